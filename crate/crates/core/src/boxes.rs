//! Box geometry, IoU, prediction-to-truth matching and the detector
//! adaptation loss.
//!
//! The loss over a set of annotated frames is
//!
//! ```text
//! L = sum_i sum_j BCE(sigmoid(p_ij), y_ij) + y_ij * L1(b_ij, g_ij)
//! ```
//!
//! where `y_ij` is 1 when prediction `j` of frame `i` is matched to a ground
//! truth box `g_ij` with IoU at or above the threshold. Matching is greedy in
//! descending IoU (ties: lower prediction index, then lower truth index) and is
//! held fixed while differentiating.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of box slots emitted per frame by the detector.
pub const SLOTS: usize = 4;

/// Default IoU threshold for a positive match.
pub const DEFAULT_IOU_THRESHOLD: f64 = 0.5;

/// Axis-aligned box in normalized image coordinates, `0 <= x1 < x2 <= 1`
/// and `0 <= y1 < y2 <= 1`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let ok = [x1, y1, x2, y2].iter().all(|v| v.is_finite())
            && (0.0..=1.0).contains(&x1)
            && (0.0..=1.0).contains(&y1)
            && x2 <= 1.0
            && y2 <= 1.0
            && x1 < x2
            && y1 < y2;
        if ok {
            Ok(Self { x1, y1, x2, y2 })
        } else {
            Err(Error::invalid(format!("invalid box [{x1}, {y1}, {x2}, {y2}]")))
        }
    }

    /// Clamps corners into the unit square and orders them; `None` when the
    /// result has no area.
    pub fn clamped(x1: f64, y1: f64, x2: f64, y2: f64) -> Option<Self> {
        let (a, b) = (x1.min(x2).clamp(0.0, 1.0), x1.max(x2).clamp(0.0, 1.0));
        let (c, d) = (y1.min(y2).clamp(0.0, 1.0), y1.max(y2).clamp(0.0, 1.0));
        Self::new(a, c, b, d).ok()
    }

    /// Moves each edge by a uniform offset of up to `frac` times the box
    /// extent on that axis; keeps the box unchanged if the result is empty.
    pub fn jittered<R: rand::Rng + ?Sized>(&self, frac: f64, rng: &mut R) -> Self {
        if frac <= 0.0 {
            return *self;
        }
        let (w, h) = (self.width(), self.height());
        let mut off = |s: f64| s * rng.random_range(-frac..=frac);
        let (a, b, c, d) = (off(w), off(h), off(w), off(h));
        Self::clamped(self.x1 + a, self.y1 + b, self.x2 + c, self.y2 + d).unwrap_or(*self)
    }

    pub fn full() -> Self {
        Self {
            x1: 0.0,
            y1: 0.0,
            x2: 1.0,
            y2: 1.0,
        }
    }

    pub fn coords(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn x1(&self) -> f64 {
        self.x1
    }
    pub fn y1(&self) -> f64 {
        self.y1
    }
    pub fn x2(&self) -> f64 {
        self.x2
    }
    pub fn y2(&self) -> f64 {
        self.y2
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    pub fn intersects(&self, other: &BBox) -> bool {
        self.x1 < other.x2 && other.x1 < self.x2 && self.y1 < other.y2 && other.y1 < self.y2
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = Error;

    fn try_from(c: [f64; 4]) -> Result<Self> {
        BBox::new(c[0], c[1], c[2], c[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        b.coords()
    }
}

/// A predicted box with its confidence logit.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxPrediction {
    pub bbox: BBox,
    pub logit: f64,
}

impl BoxPrediction {
    pub fn confidence(&self) -> f64 {
        sigmoid(self.logit)
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Intersection over union; symmetric and in `[0, 1]`.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    /// `indicators[j]` is set when prediction `j` is a positive.
    pub indicators: Vec<bool>,
    /// Ground-truth index assigned to each prediction, if any.
    pub assignment: Vec<Option<usize>>,
    pub iou_threshold: f64,
}

impl MatchResult {
    pub fn positives(&self) -> usize {
        self.indicators.iter().filter(|&&b| b).count()
    }
}

/// Greedy descending-IoU matching of `SLOTS` predictions to at most `SLOTS`
/// ground-truth boxes.
pub fn match_boxes(preds: &[BoxPrediction], gts: &[BBox], iou_threshold: f64) -> Result<MatchResult> {
    if preds.len() != SLOTS {
        return Err(Error::shape(format!("{SLOTS} predictions"), preds.len()));
    }
    if gts.len() > SLOTS {
        return Err(Error::invalid(format!("{} ground-truth boxes exceed the {SLOTS} slots", gts.len())));
    }
    if !(iou_threshold > 0.0 && iou_threshold < 1.0) {
        return Err(Error::invalid(format!("iou threshold {iou_threshold} outside (0, 1)")));
    }
    let mut pairs: Vec<(f64, usize, usize)> = Vec::with_capacity(preds.len() * gts.len());
    for (j, p) in preds.iter().enumerate() {
        for (k, g) in gts.iter().enumerate() {
            pairs.push((iou(&p.bbox, g), j, k));
        }
    }
    // Stable order: IoU descending, then prediction index, then truth index.
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));

    let mut assignment = vec![None; preds.len()];
    let mut gt_used = vec![false; gts.len()];
    let mut indicators = vec![false; preds.len()];
    for (v, j, k) in pairs {
        if assignment[j].is_some() || gt_used[k] {
            continue;
        }
        assignment[j] = Some(k);
        gt_used[k] = true;
        indicators[j] = v >= iou_threshold;
    }
    Ok(MatchResult {
        indicators,
        assignment,
        iou_threshold,
    })
}

/// Predictions and annotations for one frame of the adaptation loss.
#[derive(Clone, Copy, Debug)]
pub struct FrameTargets<'a> {
    pub preds: &'a [BoxPrediction],
    pub gts: &'a [BBox],
}

#[derive(Clone, Debug)]
pub struct DetectorLoss {
    pub value: f64,
    /// d loss / d logit, per frame and slot.
    pub grad_logits: Vec<[f64; SLOTS]>,
    /// d loss / d (x1, y1, x2, y2), per frame and slot.
    pub grad_boxes: Vec<[[f64; 4]; SLOTS]>,
    pub matches: Vec<MatchResult>,
}

/// Numerically stable `BCE(sigmoid(z), y)`.
fn bce_with_logit(z: f64, y: f64) -> f64 {
    z.max(0.0) - y * z + (-z.abs()).exp().ln_1p()
}

/// Sum over frames and slots of the confidence BCE plus the gated L1 box
/// term, with gradients in the logits and the box corners.
pub fn detector_loss(frames: &[FrameTargets<'_>], iou_threshold: f64) -> Result<DetectorLoss> {
    loss_impl(frames, iou_threshold, false)
}

/// Bootstrap variant for training from scratch. Every slot regresses towards
/// a ground-truth box whether or not it overlaps it: slots are paired one to
/// one by ascending L1 corner distance, and slots left over take their
/// nearest box. The confidence term keeps the IoU-threshold indicators.
pub fn detector_loss_warmup(frames: &[FrameTargets<'_>], iou_threshold: f64) -> Result<DetectorLoss> {
    loss_impl(frames, iou_threshold, true)
}

fn l1(a: &BBox, b: &BBox) -> f64 {
    a.coords().iter().zip(b.coords()).map(|(p, q)| (p - q).abs()).sum()
}

/// Regression targets for the bootstrap loss; `None` only without truths.
fn nearest_targets(preds: &[BoxPrediction], gts: &[BBox]) -> Vec<Option<usize>> {
    let mut out = vec![None; preds.len()];
    if gts.is_empty() {
        return out;
    }
    let mut pairs: Vec<(f64, usize, usize)> = Vec::with_capacity(preds.len() * gts.len());
    for (j, p) in preds.iter().enumerate() {
        for (k, g) in gts.iter().enumerate() {
            pairs.push((l1(&p.bbox, g), j, k));
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut used = vec![false; gts.len()];
    for &(_, j, k) in &pairs {
        if out[j].is_none() && !used[k] {
            out[j] = Some(k);
            used[k] = true;
        }
    }
    for &(_, j, k) in &pairs {
        if out[j].is_none() {
            out[j] = Some(k);
        }
    }
    out
}

fn loss_impl(frames: &[FrameTargets<'_>], iou_threshold: f64, regress_assigned: bool) -> Result<DetectorLoss> {
    let mut out = DetectorLoss {
        value: 0.0,
        grad_logits: Vec::with_capacity(frames.len()),
        grad_boxes: Vec::with_capacity(frames.len()),
        matches: Vec::with_capacity(frames.len()),
    };
    for (i, f) in frames.iter().enumerate() {
        if f.preds.iter().any(|p| !p.logit.is_finite()) {
            return Err(Error::NonFinite(format!("confidence logits of frame {i}")));
        }
        let m = match_boxes(f.preds, f.gts, iou_threshold)?;
        let warm = if regress_assigned { nearest_targets(f.preds, f.gts) } else { Vec::new() };
        let mut gl = [0.0; SLOTS];
        let mut gb = [[0.0; 4]; SLOTS];
        for (j, p) in f.preds.iter().enumerate() {
            let y = if m.indicators[j] { 1.0 } else { 0.0 };
            out.value += bce_with_logit(p.logit, y);
            gl[j] = sigmoid(p.logit) - y;
            let target = if regress_assigned {
                warm[j]
            } else if m.indicators[j] {
                m.assignment[j]
            } else {
                None
            };
            if let Some(k) = target {
                let g = f.gts[k];
                for (c, (pc, gc)) in p.bbox.coords().iter().zip(g.coords()).enumerate() {
                    let d = pc - gc;
                    out.value += d.abs();
                    gb[j][c] = if d > 0.0 {
                        1.0
                    } else if d < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                }
            }
        }
        out.grad_logits.push(gl);
        out.grad_boxes.push(gb);
        out.matches.push(m);
    }
    if !out.value.is_finite() {
        return Err(Error::NonFinite("detector loss".into()));
    }
    Ok(out)
}
