//! The three-stage adaptation protocol, its baselines, and the simulated
//! auto-labeler.
//!
//! Stage one trains a detector `F` and a recognizer `(G, E)` on the source
//! domain. Stage two fine-tunes only `F` on a handful of annotated target
//! frames. Stage three runs the frozen recognizer on target clips with boxes
//! from the adapted detector.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::boxes::{iou, BBox, SLOTS};
use crate::detector::{detector_quality, finetune_detector, Detector, FrameRef, Quality, TrainConfig};
use crate::error::{Error, Result};
use crate::recognizer::{accuracy, fit, FitConfig, Recognizer, Sample};
use crate::seed;
use crate::synth::{Dataset, Split, VideoClip};

/// One annotated frame: every hand and hand-interacted object in it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptationEntry {
    pub clip_id: String,
    pub frame_index: usize,
    pub boxes: Vec<BBox>,
}

/// The sparse target annotations, at most one frame per clip.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AdaptationSet {
    pub entries: Vec<AdaptationEntry>,
}

impl AdaptationSet {
    pub fn n_t(&self) -> usize {
        self.entries.len()
    }

    /// Resolves entries to frames of `dataset`'s train split.
    pub fn frames<'a>(&'a self, dataset: &'a Dataset) -> Result<Vec<FrameRef<'a>>> {
        self.entries
            .iter()
            .map(|e| {
                let clip = dataset
                    .clip(Split::Train, &e.clip_id)
                    .ok_or_else(|| Error::invalid(format!("clip {} not in the train split", e.clip_id)))?;
                if e.frame_index >= clip.t {
                    return Err(Error::invalid(format!("frame {} out of range for {}", e.frame_index, e.clip_id)));
                }
                Ok(FrameRef {
                    pixels: clip.frame(e.frame_index),
                    boxes: &e.boxes,
                })
            })
            .collect()
    }
}

/// Picks `n_t` distinct train clips uniformly and one uniform frame of each.
pub fn sample_sparse_frames(target: &Dataset, n_t: usize, seed_v: u64) -> Result<AdaptationSet> {
    let clips = target.split(Split::Train);
    if n_t == 0 {
        return Err(Error::invalid("n_t must be >= 1"));
    }
    if n_t > clips.len() {
        return Err(Error::invalid(format!("n_t = {n_t} exceeds the {} train clips", clips.len())));
    }
    let mut rng = seed::rng(seed_v, &[seed::tag("sparse-frames")]);
    let mut idx: Vec<usize> = (0..clips.len()).collect();
    idx.shuffle(&mut rng);
    let entries = idx[..n_t]
        .iter()
        .map(|&i| {
            let c = &clips[i];
            let t = rng.random_range(0..c.t);
            AdaptationEntry {
                clip_id: c.clip_id.clone(),
                frame_index: t,
                boxes: c.boxes(t),
            }
        })
        .collect();
    Ok(AdaptationSet { entries })
}

/// The clips whose full supervision the fully-supervised baseline may use.
pub fn map_frames_to_clips(aset: &AdaptationSet) -> Result<Vec<String>> {
    let mut seen = BTreeSet::new();
    for e in &aset.entries {
        if !seen.insert(e.clip_id.as_str()) {
            return Err(Error::invalid(format!("clip {} annotated twice", e.clip_id)));
        }
    }
    Ok(aset.entries.iter().map(|e| e.clip_id.clone()).collect())
}

/// Annotation noise of a simulated click-to-box labeler.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    /// Gaussian corner noise, normalized units.
    pub jitter_sigma: f64,
    pub drop_prob: f64,
    pub spurious_prob: f64,
    /// Discard labels whose IoU with the truth is below [`FILTER_IOU`].
    pub filter_enabled: bool,
}

pub const FILTER_IOU: f64 = 0.3;

impl NoiseModel {
    pub fn validate(&self) -> Result<()> {
        let p = |v: f64| (0.0..=1.0).contains(&v);
        if !(self.jitter_sigma >= 0.0 && self.jitter_sigma.is_finite()) || !p(self.drop_prob) || !p(self.spurious_prob) {
            return Err(Error::invalid("noise needs jitter_sigma >= 0 and probabilities in [0, 1]"));
        }
        Ok(())
    }
}

/// Perturbs the true boxes of every entry. Spurious boxes are random boxes
/// with no true counterpart; the filter removes them along with badly
/// jittered ones. At most `SLOTS` boxes are kept per frame.
pub fn auto_label(truth: &AdaptationSet, noise: &NoiseModel, seed_v: u64) -> Result<AdaptationSet> {
    noise.validate()?;
    let mut rng = seed::rng(seed_v, &[seed::tag("auto-label")]);
    let normal = Normal::new(0.0, noise.jitter_sigma.max(f64::MIN_POSITIVE)).expect("finite sigma");
    let mut entries = Vec::with_capacity(truth.entries.len());
    for e in &truth.entries {
        let mut boxes = Vec::with_capacity(e.boxes.len() + 1);
        for b in &e.boxes {
            if noise.drop_prob > 0.0 && rng.random_bool(noise.drop_prob) {
                continue;
            }
            let labelled = if noise.jitter_sigma > 0.0 {
                let c = b.coords();
                let mut d = || normal.sample(&mut rng);
                let (dx1, dy1, dx2, dy2) = (d(), d(), d(), d());
                match BBox::clamped(c[0] + dx1, c[1] + dy1, c[2] + dx2, c[3] + dy2) {
                    Some(j) => j,
                    None => continue,
                }
            } else {
                *b
            };
            if noise.filter_enabled && iou(&labelled, b) < FILTER_IOU {
                continue;
            }
            boxes.push(labelled);
        }
        if noise.spurious_prob > 0.0 && rng.random_bool(noise.spurious_prob) {
            let (x, y) = (rng.random_range(0.0..0.8), rng.random_range(0.0..0.8));
            let (w, h) = (rng.random_range(0.05..0.2), rng.random_range(0.05..0.2));
            if let Some(s) = BBox::clamped(x, y, x + w, y + h) {
                let best = e.boxes.iter().map(|b| iou(&s, b)).fold(0.0, f64::max);
                if !(noise.filter_enabled && best < FILTER_IOU) {
                    boxes.push(s);
                }
            }
        }
        boxes.truncate(SLOTS);
        entries.push(AdaptationEntry { boxes, ..e.clone() });
    }
    Ok(AdaptationSet { entries })
}

/// A trained source detector and recognizer.
#[derive(Clone, Debug)]
pub struct SourceBundle {
    pub detector: Detector,
    pub recognizer: Recognizer,
}

/// Clips paired with the detector's boxes for every frame.
pub fn detected_samples<'a>(det: &Detector, clips: &'a [VideoClip]) -> Result<Vec<Sample<'a>>> {
    clips
        .iter()
        .map(|c| {
            let frames: Vec<&[f32]> = (0..c.t).map(|t| c.frame(t)).collect();
            let preds = det.detect_batch(&frames)?;
            Ok(Sample {
                clip: c,
                boxes: preds.iter().map(|p| std::array::from_fn(|n| p[n].bbox)).collect(),
                label: c.action_label,
            })
        })
        .collect()
}

/// Top-1 accuracy on the test split of `target` with boxes from `det`.
pub fn evaluate(det: &Detector, rec: &Recognizer, target: &Dataset) -> Result<f64> {
    accuracy(rec, &detected_samples(det, target.split(Split::Test))?)
}

/// Top-1 accuracy on the test split with ground-truth boxes (a perfect
/// detector).
pub fn evaluate_gt_boxes(rec: &Recognizer, target: &Dataset) -> Result<f64> {
    let samples: Vec<Sample<'_>> = target.split(Split::Test).iter().map(Sample::with_gt_boxes).collect();
    accuracy(rec, &samples)
}

/// Detector quality on every frame of the test split.
pub fn test_quality(det: &Detector, target: &Dataset) -> Result<Quality> {
    let clips = target.split(Split::Test);
    let boxes: Vec<Vec<BBox>> = clips.iter().flat_map(|c| (0..c.t).map(move |t| c.boxes(t))).collect();
    let frames: Vec<FrameRef<'_>> = clips
        .iter()
        .flat_map(|c| (0..c.t).map(move |t| c.frame(t)))
        .zip(&boxes)
        .map(|(pixels, b)| FrameRef { pixels, boxes: b })
        .collect();
    detector_quality(det, &frames)
}

pub fn run_source_only(bundle: &SourceBundle, target: &Dataset) -> Result<f64> {
    evaluate(&bundle.detector, &bundle.recognizer, target)
}

#[derive(Clone, Debug)]
pub struct OdaptOutcome {
    pub accuracy: f64,
    pub detector: Detector,
    pub fingerprint_before: String,
    pub fingerprint_after: String,
}

/// Fine-tunes the detector on `aset` and evaluates the frozen recognizer
/// with it. Fails with [`Error::Contract`] if the recognizer changed.
pub fn run_odapt(bundle: &SourceBundle, target: &Dataset, aset: &AdaptationSet, cfg: &TrainConfig) -> Result<OdaptOutcome> {
    let before = bundle.recognizer.fingerprint();
    let frames = aset.frames(target)?;
    let (detector, _) = finetune_detector(&bundle.detector, &frames, cfg)?;
    let accuracy = evaluate(&detector, &bundle.recognizer, target)?;
    let after = bundle.recognizer.fingerprint();
    check_frozen(&before, &after)?;
    Ok(OdaptOutcome {
        accuracy,
        detector,
        fingerprint_before: before,
        fingerprint_after: after,
    })
}

pub fn check_frozen(before: &str, after: &str) -> Result<()> {
    if before != after {
        return Err(Error::Contract(format!("recognizer changed during adaptation: {before} -> {after}")));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FullySupervisedConfig {
    pub detector: TrainConfig,
    pub recognizer: FitConfig,
}

/// Fine-tunes every component on the full labels of `clip_ids` (train
/// split): the detector on all their frames, the recognizer on action labels
/// with ground-truth crop boxes. Evaluated like ODAPT.
pub fn run_fully_supervised(bundle: &SourceBundle, target: &Dataset, clip_ids: &[String], cfg: &FullySupervisedConfig) -> Result<f64> {
    if clip_ids.is_empty() {
        return Err(Error::invalid("fully-supervised baseline needs at least one clip"));
    }
    let clips: Vec<&VideoClip> = clip_ids
        .iter()
        .map(|id| target.clip(Split::Train, id).ok_or_else(|| Error::invalid(format!("clip {id} not in the train split"))))
        .collect::<Result<_>>()?;
    let boxes: Vec<Vec<BBox>> = clips.iter().flat_map(|c| (0..c.t).map(move |t| c.boxes(t))).collect();
    let frames: Vec<FrameRef<'_>> = clips
        .iter()
        .flat_map(|c| (0..c.t).map(move |t| c.frame(t)))
        .zip(&boxes)
        .map(|(pixels, b)| FrameRef { pixels, boxes: b })
        .collect();
    let (detector, _) = finetune_detector(&bundle.detector, &frames, &cfg.detector)?;
    let recognizer = if cfg.recognizer.epochs == 0 {
        bundle.recognizer.clone()
    } else {
        let samples: Vec<Sample<'_>> = clips.iter().map(|c| Sample::with_gt_boxes(c)).collect();
        fit(&bundle.recognizer, &samples, &cfg.recognizer)?.0
    };
    evaluate(&detector, &recognizer, target)
}

/// A seeded permutation of `labels`, for the shuffled-label control.
pub fn shuffle_labels(labels: &[usize], seed_v: u64) -> Vec<usize> {
    let mut rng = seed::rng(seed_v, &[seed::tag("shuffled-labels")]);
    let mut out = labels.to_vec();
    out.shuffle(&mut rng);
    out
}
