//! Class-agnostic detector: a four-stage strided convolutional backbone and a
//! fully connected head that regresses [`SLOTS`] boxes with confidence logits
//! per frame.
//!
//! Boxes are decoded from a centre in `(0, 1)^2` and a size in `(EPS, 1)^2`
//! (both through a sigmoid), and the corners are clipped to the unit square,
//! so every decoded box has positive area whatever the weights are.

use std::sync::Arc;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::boxes::{detector_loss, detector_loss_warmup, iou, sigmoid, BBox, BoxPrediction, FrameTargets, DEFAULT_IOU_THRESHOLD, SLOTS};
use crate::error::{Error, Result};
use crate::nn::layers::{linear, linear_backward, relu_backward_inplace, relu_inplace, Conv3x3};
use crate::nn::{Init, Layout, Optimizer, OptimizerKind, Params, Scalar, Schedule, SegId};
use crate::seed;

/// Minimum decoded box side.
pub const MIN_SIZE: f64 = 1e-3;

const CHANNELS: [usize; 4] = [16, 32, 64, 64];
const HIDDEN: usize = 128;
const OUT: usize = SLOTS * 5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub iou_threshold: f64,
    pub rng_seed: u64,
    pub optimizer: OptimizerKind,
    /// Fine-tuning only: start from fresh weights instead of the given ones.
    #[serde(default)]
    pub reinit: bool,
    /// Leading epochs that regress every assigned slot, see
    /// [`detector_loss_warmup`](crate::boxes::detector_loss_warmup).
    #[serde(default)]
    pub warmup_epochs: usize,
    /// Number of leading stages updated (conv stages 1-4, then the hidden
    /// layer, then the head); `None` trains everything.
    #[serde(default)]
    pub trainable_stages: Option<usize>,
    #[serde(default)]
    pub schedule: Schedule,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            epochs: 30,
            batch_size: 16,
            iou_threshold: DEFAULT_IOU_THRESHOLD,
            rng_seed: 0,
            optimizer: OptimizerKind::Sgd,
            reinit: false,
            warmup_epochs: 0,
            trainable_stages: None,
            schedule: Schedule::Constant,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate {} must be > 0", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.iou_threshold > 0.0 && self.iou_threshold < 1.0) {
            return Err(Error::Config(format!("iou_threshold {} outside (0, 1)", self.iou_threshold)));
        }
        Ok(())
    }
}

/// Per-epoch mean loss of a training run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epoch_loss: Vec<f64>,
}

/// Layer geometry and parameter handles for a given frame size.
#[derive(Clone, Debug)]
pub struct DetectorArch {
    pub size: usize,
    convs: [Conv3x3; 4],
    conv_w: [SegId; 4],
    conv_b: [SegId; 4],
    fc_w: SegId,
    fc_b: SegId,
    head_w: SegId,
    head_b: SegId,
    layout: Arc<Layout>,
}

impl DetectorArch {
    pub fn new(size: usize) -> Result<Self> {
        if size < 16 || !size.is_multiple_of(16) {
            return Err(Error::invalid(format!("detector input size {size} must be a multiple of 16")));
        }
        let mut layout = Layout::new();
        let mut convs = Vec::new();
        let (mut conv_w, mut conv_b) = (Vec::new(), Vec::new());
        let (mut hw, mut cin) = (size, 3);
        for (k, &cout) in CHANNELS.iter().enumerate() {
            let c = Conv3x3 {
                in_h: hw,
                in_w: hw,
                cin,
                cout,
                stride: 2,
            };
            conv_w.push(layout.add(format!("conv{k}.w"), &[c.patch(), cout]));
            conv_b.push(layout.add(format!("conv{k}.b"), &[cout]));
            hw = c.out_h();
            cin = cout;
            convs.push(c);
        }
        let feat = hw * hw * cin;
        let fc_w = layout.add("fc.w", &[feat, HIDDEN]);
        let fc_b = layout.add("fc.b", &[HIDDEN]);
        let head_w = layout.add("head.w", &[HIDDEN, OUT]);
        let head_b = layout.add("head.b", &[OUT]);
        Ok(Self {
            size,
            convs: convs.try_into().expect("four stages"),
            conv_w: conv_w.try_into().expect("four stages"),
            conv_b: conv_b.try_into().expect("four stages"),
            fc_w,
            fc_b,
            head_w,
            head_b,
            layout: Arc::new(layout),
        })
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    /// End of the parameter prefix belonging to the first `stages` stages.
    pub fn stage_prefix(&self, stages: usize) -> usize {
        let ends = [
            self.layout.range(self.conv_b[0]).end,
            self.layout.range(self.conv_b[1]).end,
            self.layout.range(self.conv_b[2]).end,
            self.layout.range(self.conv_b[3]).end,
            self.layout.range(self.fc_b).end,
        ];
        match stages {
            0 => 0,
            k if k <= ends.len() => ends[k - 1],
            _ => self.layout.total(),
        }
    }

    fn feat(&self) -> usize {
        let c = self.convs[3];
        c.out_h() * c.out_w() * c.cout
    }

    /// He-initialized weights; the head bias spreads the slots over the four
    /// image quadrants so matching starts from distinct proposals.
    pub fn init_params<S: Scalar>(&self, seed: u64) -> Params<S> {
        let mut rng = seed::rng(seed, &[seed::tag("detector-init")]);
        let mut p = Params::init(self.layout.clone(), &mut rng, |seg| {
            if seg.name.ends_with(".b") {
                Init::Zeros
            } else if seg.name == "head.w" {
                Init::Normal(0.01)
            } else {
                Init::Normal((2.0 / seg.shape[0] as f64).sqrt())
            }
        });
        let bias = p.get_mut(self.head_b);
        for j in 0..SLOTS {
            let (sx, sy) = ([-0.8, 0.8, -0.8, 0.8][j], [-0.8, -0.8, 0.8, 0.8][j]);
            bias[j * 5] = S::of(sx);
            bias[j * 5 + 1] = S::of(sy);
            bias[j * 5 + 2] = S::of(-1.0);
            bias[j * 5 + 3] = S::of(-1.0);
        }
        p
    }
}

struct ForwardCache<S> {
    cols: Vec<Vec<S>>,
    acts: Vec<Vec<S>>,
    hidden: Vec<S>,
    raw: Vec<S>,
}

fn forward<S: Scalar>(arch: &DetectorArch, p: &Params<S>, x: &[S], batch: usize) -> ForwardCache<S> {
    let mut cols = Vec::with_capacity(4);
    let mut acts = Vec::with_capacity(4);
    let mut cur = x.to_vec();
    for k in 0..4 {
        let (mut y, c) = arch.convs[k].forward(&cur, batch, p.get(arch.conv_w[k]), p.get(arch.conv_b[k]));
        relu_inplace(&mut y);
        cols.push(c);
        acts.push(y.clone());
        cur = y;
    }
    let mut hidden = linear(&cur, batch, arch.feat(), p.get(arch.fc_w), p.get(arch.fc_b), HIDDEN);
    relu_inplace(&mut hidden);
    let raw = linear(&hidden, batch, HIDDEN, p.get(arch.head_w), p.get(arch.head_b), OUT);
    ForwardCache { cols, acts, hidden, raw }
}

fn backward<S: Scalar>(arch: &DetectorArch, p: &Params<S>, cache: &ForwardCache<S>, batch: usize, draw: &[S], grads: &mut [S]) {
    let lay = &arch.layout;
    let g = |id: SegId| lay.range(id);
    let (hw, hb) = (g(arch.head_w), g(arch.head_b));
    let (dw, rest) = split_two(grads, hw.clone(), hb.clone());
    let mut dhidden = linear_backward(&cache.hidden, batch, HIDDEN, p.get(arch.head_w), draw, OUT, dw, rest, true).unwrap();
    relu_backward_inplace(&cache.hidden, &mut dhidden);
    let (fw, fb) = (g(arch.fc_w), g(arch.fc_b));
    let (dw, db) = split_two(grads, fw, fb);
    let mut dcur = linear_backward(&cache.acts[3], batch, arch.feat(), p.get(arch.fc_w), &dhidden, HIDDEN, dw, db, true).unwrap();
    for k in (0..4).rev() {
        relu_backward_inplace(&cache.acts[k], &mut dcur);
        let (cw, cb) = (g(arch.conv_w[k]), g(arch.conv_b[k]));
        let (dw, db) = split_two(grads, cw, cb);
        match arch.convs[k].backward(&cache.cols[k], batch, p.get(arch.conv_w[k]), &dcur, dw, db, k > 0) {
            Some(dx) => dcur = dx,
            None => break,
        }
    }
}

/// Two disjoint mutable sub-slices; `a` must precede `b`.
fn split_two<S>(buf: &mut [S], a: std::ops::Range<usize>, b: std::ops::Range<usize>) -> (&mut [S], &mut [S]) {
    assert!(a.end <= b.start);
    let (left, right) = buf.split_at_mut(b.start);
    (&mut left[a], &mut right[..b.end - b.start])
}

struct Decoded {
    pred: BoxPrediction,
    // d corner / d raw, for (x1, y1, x2, y2) w.r.t. (u0, u1, u2, u3)
    jac: [[f64; 4]; 4],
}

fn decode_slot(u: [f64; 5]) -> Decoded {
    let (sx, sy, sw, sh) = (sigmoid(u[0]), sigmoid(u[1]), sigmoid(u[2]), sigmoid(u[3]));
    let (cx, cy) = (sx, sy);
    let w = MIN_SIZE + (1.0 - MIN_SIZE) * sw;
    let h = MIN_SIZE + (1.0 - MIN_SIZE) * sh;
    let (x1, x2) = ((cx - 0.5 * w).max(0.0), (cx + 0.5 * w).min(1.0));
    let (y1, y2) = ((cy - 0.5 * h).max(0.0), (cy + 0.5 * h).min(1.0));
    let dcx = sx * (1.0 - sx);
    let dcy = sy * (1.0 - sy);
    let dw = (1.0 - MIN_SIZE) * sw * (1.0 - sw);
    let dh = (1.0 - MIN_SIZE) * sh * (1.0 - sh);
    let open = |v: bool| if v { 1.0 } else { 0.0 };
    let gx1 = open(cx - 0.5 * w > 0.0);
    let gx2 = open(cx + 0.5 * w < 1.0);
    let gy1 = open(cy - 0.5 * h > 0.0);
    let gy2 = open(cy + 0.5 * h < 1.0);
    let jac = [
        [gx1 * dcx, 0.0, -0.5 * gx1 * dw, 0.0],
        [0.0, gy1 * dcy, 0.0, -0.5 * gy1 * dh],
        [gx2 * dcx, 0.0, 0.5 * gx2 * dw, 0.0],
        [0.0, gy2 * dcy, 0.0, 0.5 * gy2 * dh],
    ];
    // x1 < cx < x2 holds strictly for cx in (0, 1); saturated sigmoids can hit
    // the boundary, where clamping to the other side keeps the order.
    let bbox = BBox::new(x1, y1, x2, y2).unwrap_or_else(|_| {
        let fx = if x2 <= x1 { (x1.min(1.0 - MIN_SIZE), x1.min(1.0 - MIN_SIZE) + MIN_SIZE) } else { (x1, x2) };
        let fy = if y2 <= y1 { (y1.min(1.0 - MIN_SIZE), y1.min(1.0 - MIN_SIZE) + MIN_SIZE) } else { (y1, y2) };
        BBox::new(fx.0, fy.0, fx.1, fy.1).expect("repaired box")
    });
    Decoded {
        pred: BoxPrediction { bbox, logit: u[4] },
        jac,
    }
}

fn decode_all<S: Scalar>(raw: &[S], batch: usize) -> Vec<Vec<Decoded>> {
    (0..batch)
        .map(|b| {
            (0..SLOTS)
                .map(|j| {
                    let o = b * OUT + j * 5;
                    decode_slot([raw[o].f64(), raw[o + 1].f64(), raw[o + 2].f64(), raw[o + 3].f64(), raw[o + 4].f64()])
                })
                .collect()
        })
        .collect()
}

/// A frame and its annotated boxes.
#[derive(Clone, Copy, Debug)]
pub struct FrameRef<'a> {
    pub pixels: &'a [f32],
    pub boxes: &'a [BBox],
}

#[derive(Clone, Debug, PartialEq)]
pub struct Detector {
    pub arch_size: usize,
    pub params: Params<f32>,
}

impl Detector {
    pub fn new(size: usize, seed: u64) -> Result<Self> {
        let arch = DetectorArch::new(size)?;
        Ok(Self {
            arch_size: size,
            params: arch.init_params(seed),
        })
    }

    pub fn from_params(size: usize, params: Params<f32>) -> Result<Self> {
        let arch = DetectorArch::new(size)?;
        if **arch.layout() != **params.layout() {
            return Err(Error::invalid("parameter layout does not match the detector architecture"));
        }
        Ok(Self { arch_size: size, params })
    }

    pub fn arch(&self) -> DetectorArch {
        DetectorArch::new(self.arch_size).expect("validated at construction")
    }

    /// Predictions for a batch of frames stored back to back.
    pub fn detect_batch(&self, frames: &[&[f32]]) -> Result<Vec<[BoxPrediction; SLOTS]>> {
        let arch = self.arch();
        let flen = arch.size * arch.size * 3;
        let mut out = Vec::with_capacity(frames.len());
        for chunk in frames.chunks(32) {
            let mut x = Vec::with_capacity(chunk.len() * flen);
            for f in chunk {
                if f.len() != flen {
                    return Err(Error::shape(format!("{0}x{0}x3 frame", arch.size), format!("{} values", f.len())));
                }
                x.extend_from_slice(f);
            }
            let cache = forward(&arch, &self.params, &x, chunk.len());
            for slots in decode_all(&cache.raw, chunk.len()) {
                let preds: Vec<BoxPrediction> = slots.iter().map(|d| d.pred).collect();
                out.push(preds.try_into().expect("SLOTS predictions"));
            }
        }
        Ok(out)
    }

    pub fn detect(&self, frame: &[f32]) -> Result<[BoxPrediction; SLOTS]> {
        Ok(self.detect_batch(&[frame])?[0])
    }
}

/// Loss and parameter gradient of a batch of annotated frames.
pub fn loss_and_grad<S: Scalar>(
    arch: &DetectorArch,
    params: &Params<S>,
    pixels: &[S],
    boxes: &[&[BBox]],
    iou_threshold: f64,
    warmup: bool,
) -> Result<(f64, Vec<S>)> {
    let batch = boxes.len();
    let cache = forward(arch, params, pixels, batch);
    let decoded = decode_all(&cache.raw, batch);
    let preds: Vec<Vec<BoxPrediction>> = decoded.iter().map(|d| d.iter().map(|x| x.pred).collect()).collect();
    let targets: Vec<FrameTargets<'_>> = preds
        .iter()
        .zip(boxes)
        .map(|(p, g)| FrameTargets { preds: p, gts: g })
        .collect();
    let loss = if warmup {
        detector_loss_warmup(&targets, iou_threshold)?
    } else {
        detector_loss(&targets, iou_threshold)?
    };
    let mut draw = vec![S::zero(); batch * OUT];
    for b in 0..batch {
        for j in 0..SLOTS {
            let o = b * OUT + j * 5;
            let jac = &decoded[b][j].jac;
            let gb = &loss.grad_boxes[b][j];
            for r in 0..4 {
                let v: f64 = (0..4).map(|c| gb[c] * jac[c][r]).sum();
                draw[o + r] = S::of(v);
            }
            draw[o + 4] = S::of(loss.grad_logits[b][j]);
        }
    }
    let mut grads = vec![S::zero(); params.len()];
    backward(arch, params, &cache, batch, &draw, &mut grads);
    Ok((loss.value, grads))
}

fn fit(arch: &DetectorArch, mut params: Params<f32>, frames: &[FrameRef<'_>], cfg: &TrainConfig) -> Result<(Params<f32>, TrainLog)> {
    let flen = arch.size * arch.size * 3;
    for f in frames {
        if f.pixels.len() != flen {
            return Err(Error::shape(format!("{0}x{0}x3 frame", arch.size), format!("{} values", f.pixels.len())));
        }
    }
    let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate, params.len());
    let trainable = cfg.trainable_stages.map_or(params.len(), |k| arch.stage_prefix(k));
    let mut log = TrainLog::default();
    let mut order: Vec<usize> = (0..frames.len()).collect();
    for epoch in 0..cfg.epochs {
        let mut rng = seed::rng(cfg.rng_seed, &[seed::tag("detector-epoch"), epoch as u64]);
        order.shuffle(&mut rng);
        opt.set_learning_rate(cfg.schedule.rate(cfg.learning_rate, epoch, cfg.epochs));
        let mut total = 0.0;
        for idx in order.chunks(cfg.batch_size) {
            let mut x = Vec::with_capacity(idx.len() * flen);
            let mut boxes = Vec::with_capacity(idx.len());
            for &i in idx {
                x.extend_from_slice(frames[i].pixels);
                boxes.push(frames[i].boxes);
            }
            let (loss, mut grads) = loss_and_grad(arch, &params, &x, &boxes, cfg.iou_threshold, epoch < cfg.warmup_epochs)?;
            grads[trainable..].fill(0.0);
            if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::Diverged { epoch, loss });
            }
            total += loss;
            opt.step(params.data_mut(), &grads);
        }
        let mean = total / frames.len() as f64;
        if !mean.is_finite() || !params.is_finite() {
            return Err(Error::Diverged { epoch, loss: mean });
        }
        log.epoch_loss.push(mean);
    }
    Ok((params, log))
}

/// Trains a detector from scratch on annotated source frames.
pub fn train_detector(size: usize, frames: &[FrameRef<'_>], cfg: &TrainConfig) -> Result<(Detector, TrainLog)> {
    cfg.validate()?;
    if cfg.epochs == 0 {
        return Err(Error::Config("detector training needs epochs >= 1".into()));
    }
    if frames.is_empty() {
        return Err(Error::invalid("detector training needs at least one frame"));
    }
    let arch = DetectorArch::new(size)?;
    let init = arch.init_params(cfg.rng_seed);
    let (params, log) = fit(&arch, init, frames, cfg)?;
    Ok((Detector { arch_size: size, params }, log))
}

/// Continues training on a sparse set of annotated target frames. Only the
/// detector's own parameters are touched. Frames with an empty box list
/// carry no annotation and are skipped; if none remain the detector is
/// returned unchanged.
pub fn finetune_detector(det: &Detector, frames: &[FrameRef<'_>], cfg: &TrainConfig) -> Result<(Detector, TrainLog)> {
    cfg.validate()?;
    if frames.is_empty() {
        return Err(Error::invalid("fine-tuning needs a non-empty adaptation set"));
    }
    let annotated: Vec<FrameRef<'_>> = frames.iter().filter(|f| !f.boxes.is_empty()).copied().collect();
    if annotated.is_empty() {
        return Ok((det.clone(), TrainLog::default()));
    }
    let arch = det.arch();
    let start = if cfg.reinit { arch.init_params(cfg.rng_seed) } else { det.params.clone() };
    let (params, log) = fit(&arch, start, &annotated, cfg)?;
    Ok((Detector { arch_size: det.arch_size, params }, log))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Quality {
    /// Mean over ground-truth boxes of the best IoU among confident predictions.
    pub mean_best_iou: f64,
    /// Fraction of ground-truth boxes whose best IoU is at least 0.5.
    pub recall: f64,
}

/// Box quality of given predictions; confident means `sigmoid(logit) > 0.5`.
pub fn quality_from_predictions(preds: &[[BoxPrediction; SLOTS]], gts: &[&[BBox]]) -> Quality {
    let (mut sum, mut hits, mut n) = (0.0, 0usize, 0usize);
    for (p, g) in preds.iter().zip(gts) {
        for gt in g.iter() {
            let best = p
                .iter()
                .filter(|q| q.confidence() > 0.5)
                .map(|q| iou(&q.bbox, gt))
                .fold(0.0, f64::max);
            sum += best;
            hits += usize::from(best >= 0.5);
            n += 1;
        }
    }
    if n == 0 {
        return Quality {
            mean_best_iou: 0.0,
            recall: 0.0,
        };
    }
    Quality {
        mean_best_iou: sum / n as f64,
        recall: hits as f64 / n as f64,
    }
}

pub fn detector_quality(det: &Detector, frames: &[FrameRef<'_>]) -> Result<Quality> {
    if frames.is_empty() {
        return Err(Error::invalid("quality needs at least one frame"));
    }
    let pixels: Vec<&[f32]> = frames.iter().map(|f| f.pixels).collect();
    let preds = det.detect_batch(&pixels)?;
    let gts: Vec<&[BBox]> = frames.iter().map(|f| f.boxes).collect();
    Ok(quality_from_predictions(&preds, &gts))
}
