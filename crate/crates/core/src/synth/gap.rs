use serde::{Deserialize, Serialize};

use super::dataset::{clip_seed, Split};
use super::scene::{ActionSpec, NUM_ACTIONS};
use super::{render_clip, DomainSpec, VideoClip};
use crate::boxes::BBox;
use crate::detector::{detector_quality, Detector, FrameRef};
use crate::error::{Error, Result};
use crate::seed;

/// Summary statistics of the shift between two domains.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    pub domain_a: String,
    pub domain_b: String,
    pub clips_per_domain: usize,
    /// Mean absolute difference of the per-channel mean intensities.
    pub pixel_distance: f64,
    /// Symmetric fraction of palette colours with a close counterpart.
    pub palette_overlap: f64,
    /// `sum(b) / sum(a)` over paired pixels where neither side is clipped.
    pub intensity_ratio: f64,
    /// Mean best-IoU of the given detector on each domain, and their drop.
    pub detector_iou_a: Option<f64>,
    pub detector_iou_b: Option<f64>,
    pub detector_iou_drop: Option<f64>,
}

const COLOR_MATCH: f32 = 0.1;

fn channel_means(clips: &[VideoClip]) -> [f64; 3] {
    let mut sum = [0.0f64; 3];
    let mut n = 0usize;
    for c in clips {
        for px in c.frames.chunks_exact(3) {
            for k in 0..3 {
                sum[k] += px[k] as f64;
            }
            n += 1;
        }
    }
    sum.map(|s| s / n as f64)
}

fn palette_overlap(a: &DomainSpec, b: &DomainSpec) -> f64 {
    let (pa, pb) = (a.palette().colors(), b.palette().colors());
    let covered = |xs: &[[f32; 3]], ys: &[[f32; 3]]| {
        xs.iter()
            .filter(|x| ys.iter().any(|y| x.iter().zip(y.iter()).all(|(p, q)| (p - q).abs() <= COLOR_MATCH)))
            .count() as f64
            / xs.len() as f64
    };
    0.5 * (covered(&pa, &pb) + covered(&pb, &pa))
}

/// Renders `sample` clips per domain with identical scene seeds, so pixel
/// statistics pair up one-to-one.
pub fn domain_gap_report(a: &DomainSpec, b: &DomainSpec, sample: usize, detector: Option<&Detector>) -> Result<GapReport> {
    if sample == 0 {
        return Err(Error::invalid("gap report needs sample >= 1"));
    }
    if (a.frames, a.size) != (b.frames, b.size) {
        return Err(Error::invalid("domains must share clip geometry to be compared"));
    }
    let render = |spec: &DomainSpec| -> Result<Vec<VideoClip>> {
        (0..sample)
            .map(|i| {
                let action = i % NUM_ACTIONS;
                let s = clip_seed(&DomainSpec { rng_seed: 0, ..spec.clone() }, Split::Test, action, i);
                let mut rng = seed::rng(s, &[seed::tag("motion")]);
                render_clip(spec, &ActionSpec::sample(action, &mut rng), s)
            })
            .collect()
    };
    let (ca, cb) = (render(a)?, render(b)?);
    let (ma, mb) = (channel_means(&ca), channel_means(&cb));
    let pixel_distance = (0..3).map(|k| (ma[k] - mb[k]).abs()).sum::<f64>() / 3.0;

    let (mut sa, mut sb) = (0.0f64, 0.0f64);
    for (x, y) in ca.iter().zip(&cb) {
        for (&p, &q) in x.frames.iter().zip(&y.frames) {
            if p > 0.0 && p < 1.0 && q > 0.0 && q < 1.0 {
                sa += p as f64;
                sb += q as f64;
            }
        }
    }
    let intensity_ratio = if sa > 0.0 { sb / sa } else { 1.0 };

    let (iou_a, iou_b) = match detector {
        Some(det) => {
            let quality = |clips: &[VideoClip]| -> Result<f64> {
                let boxes: Vec<Vec<BBox>> = clips.iter().flat_map(|c| (0..c.t).map(move |t| c.boxes(t))).collect();
                let frames: Vec<FrameRef<'_>> = clips
                    .iter()
                    .flat_map(|c| (0..c.t).map(move |t| c.frame(t)))
                    .zip(&boxes)
                    .map(|(pixels, b)| FrameRef { pixels, boxes: b })
                    .collect();
                Ok(detector_quality(det, &frames)?.mean_best_iou)
            };
            (Some(quality(&ca)?), Some(quality(&cb)?))
        }
        None => (None, None),
    };

    Ok(GapReport {
        domain_a: a.domain_id.clone(),
        domain_b: b.domain_id.clone(),
        clips_per_domain: sample,
        pixel_distance,
        palette_overlap: palette_overlap(a, b),
        intensity_ratio,
        detector_iou_a: iou_a,
        detector_iou_b: iou_b,
        detector_iou_drop: iou_a.zip(iou_b).map(|(x, y)| (x - y).max(0.0)),
    })
}
