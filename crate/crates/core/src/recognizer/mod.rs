//! Object-centric action recognizer: patch tokens of every frame, object
//! tokens pooled from them inside per-frame boxes (Crop), an optional per-token
//! encoder E, concatenation (Attach) and a pre-norm transformer with a class
//! token.

mod crop;
mod transformer;

use std::sync::Arc;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use crop::{axis_weights, box_weights, crop, crop_backward, pad_boxes, FeatureGrid, ObjectTokens};
use transformer::{block_backward, block_forward, pair, BlockCache, BlockIds, Dims};

use crate::boxes::{BBox, SLOTS};
use crate::detector::TrainLog;
use crate::error::{Error, Result};
use crate::nn::layers::{gelu, gelu_backward, layer_norm, layer_norm_backward, linear, linear_backward, softmax_cross_entropy, LayerNormCache};
use crate::nn::{Init, Layout, Optimizer, OptimizerKind, Params, Scalar, SegId};
use crate::seed;
use crate::synth::VideoClip;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecognizerConfig {
    pub frames: usize,
    pub size: usize,
    pub patch: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub classes: usize,
    /// Learned per-slot embedding on object tokens. Off by default: detector
    /// slots carry no canonical order.
    pub slot_embedding: bool,
    /// Use the object encoder E; when off, E is the identity.
    pub encoder: bool,
}

impl Default for RecognizerConfig {
    fn default() -> Self {
        Self {
            frames: 8,
            size: 64,
            patch: 16,
            dim: 64,
            depth: 4,
            heads: 4,
            mlp_ratio: 2,
            classes: crate::synth::NUM_ACTIONS,
            slot_embedding: false,
            encoder: true,
        }
    }
}

impl RecognizerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.patch == 0 || !self.size.is_multiple_of(self.patch) {
            return bad(format!("patch {} must divide frame size {}", self.patch, self.size));
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return bad(format!("heads {} must divide dim {}", self.heads, self.dim));
        }
        if self.frames == 0 || self.depth == 0 || self.mlp_ratio == 0 || self.classes < 2 {
            return bad("frames, depth, mlp_ratio must be >= 1 and classes >= 2".into());
        }
        Ok(())
    }

    /// Patch grid side.
    pub fn grid(&self) -> usize {
        self.size / self.patch
    }

    /// Class token plus all patch tokens.
    pub fn patch_tokens(&self) -> usize {
        1 + self.frames * self.grid() * self.grid()
    }

    /// Sequence length after Attach.
    pub fn seq_len(&self) -> usize {
        self.patch_tokens() + self.frames * SLOTS
    }
}

struct EncIds {
    w1: SegId,
    b1: SegId,
    w2: SegId,
    b2: SegId,
}

struct Arch {
    cfg: RecognizerConfig,
    g_layout: Arc<Layout>,
    e_layout: Arc<Layout>,
    patch_w: SegId,
    patch_b: SegId,
    pos_space: SegId,
    pos_time: SegId,
    cls: SegId,
    obj_time: SegId,
    slot: Option<SegId>,
    blocks: Vec<BlockIds>,
    lnf_g: SegId,
    lnf_b: SegId,
    head_w: SegId,
    head_b: SegId,
    enc: EncIds,
}

impl Arch {
    fn new(cfg: RecognizerConfig) -> Result<Self> {
        cfg.validate()?;
        let (d, g) = (cfg.dim, cfg.grid());
        let mut l = Layout::new();
        let patch_w = l.add("patch.w", &[cfg.patch * cfg.patch * 3, d]);
        let patch_b = l.add("patch.b", &[d]);
        let pos_space = l.add("pos.space", &[g * g, d]);
        let pos_time = l.add("pos.time", &[cfg.frames, d]);
        let cls = l.add("cls", &[d]);
        let obj_time = l.add("obj.time", &[cfg.frames, d]);
        let slot = cfg.slot_embedding.then(|| l.add("obj.slot", &[SLOTS, d]));
        let blocks = (0..cfg.depth).map(|k| BlockIds::register(&mut l, k, d, d * cfg.mlp_ratio)).collect();
        let lnf_g = l.add("lnf.g", &[d]);
        let lnf_b = l.add("lnf.b", &[d]);
        let head_w = l.add("head.w", &[d, cfg.classes]);
        let head_b = l.add("head.b", &[cfg.classes]);
        let mut el = Layout::new();
        let enc = EncIds {
            w1: el.add("enc.w1", &[d, 2 * d]),
            b1: el.add("enc.b1", &[2 * d]),
            w2: el.add("enc.w2", &[2 * d, d]),
            b2: el.add("enc.b2", &[d]),
        };
        Ok(Self {
            cfg,
            g_layout: Arc::new(l),
            e_layout: Arc::new(el),
            patch_w,
            patch_b,
            pos_space,
            pos_time,
            cls,
            obj_time,
            slot,
            blocks,
            lnf_g,
            lnf_b,
            head_w,
            head_b,
            enc,
        })
    }

    fn dims(&self) -> Dims {
        Dims {
            len: self.cfg.seq_len(),
            d: self.cfg.dim,
            heads: self.cfg.heads,
            hidden: self.cfg.dim * self.cfg.mlp_ratio,
        }
    }

    fn init_g<S: Scalar>(&self, seed_v: u64) -> Params<S> {
        let mut rng = seed::rng(seed_v, &[seed::tag("recognizer-init")]);
        Params::init(self.g_layout.clone(), &mut rng, |s| {
            let n = s.name.as_str();
            if n.ends_with(".g") {
                Init::Ones
            } else if n.ends_with(".b") || n == "obj.slot" {
                Init::Zeros
            } else if n.starts_with("pos.") || n == "obj.time" {
                Init::Normal(1.0)
            } else if n.ends_with(".w") {
                Init::Normal((1.0 / s.shape[0] as f64).sqrt())
            } else {
                Init::Normal(0.02)
            }
        })
    }

    /// Residual encoder with a zero output layer: the identity at init.
    fn init_e<S: Scalar>(&self, seed_v: u64) -> Params<S> {
        let mut rng = seed::rng(seed_v, &[seed::tag("encoder-init")]);
        Params::init(self.e_layout.clone(), &mut rng, |s| match s.name.as_str() {
            "enc.w1" => Init::Normal((2.0 / s.shape[0] as f64).sqrt()),
            _ => Init::Zeros,
        })
    }

    fn frame_len(&self) -> usize {
        self.cfg.size * self.cfg.size * 3
    }

    /// Rows of flattened patches, `(t, gy, gx)` major, `(py, px, c)` minor.
    fn patchify<S: Scalar>(&self, pixels: &[S]) -> Vec<S> {
        let (p, g, size) = (self.cfg.patch, self.cfg.grid(), self.cfg.size);
        let plen = p * p * 3;
        let mut out = vec![S::zero(); self.cfg.frames * g * g * plen];
        for t in 0..self.cfg.frames {
            let frame = &pixels[t * self.frame_len()..(t + 1) * self.frame_len()];
            for gy in 0..g {
                for gx in 0..g {
                    let row = &mut out[((t * g + gy) * g + gx) * plen..][..plen];
                    for py in 0..p {
                        let src = ((gy * p + py) * size + gx * p) * 3;
                        row[py * p * 3..(py + 1) * p * 3].copy_from_slice(&frame[src..src + p * 3]);
                    }
                }
            }
        }
        out
    }

    fn grid<S: Scalar>(&self, gp: &Params<S>, patches: &[S]) -> Vec<S> {
        let (d, hw) = (self.cfg.dim, self.cfg.grid() * self.cfg.grid());
        let rows = self.cfg.frames * hw;
        let mut x = linear(patches, rows, self.cfg.patch * self.cfg.patch * 3, gp.get(self.patch_w), gp.get(self.patch_b), d);
        let (ps, pt) = (gp.get(self.pos_space), gp.get(self.pos_time));
        for t in 0..self.cfg.frames {
            for s in 0..hw {
                let row = &mut x[(t * hw + s) * d..][..d];
                for k in 0..d {
                    row[k] += ps[s * d + k] + pt[t * d + k];
                }
            }
        }
        x
    }

    fn encode<S: Scalar>(&self, ep: &Params<S>, obj: &[S]) -> (Vec<S>, Vec<S>, Vec<S>) {
        let (rows, d) = (self.cfg.frames * SLOTS, self.cfg.dim);
        let e = &self.enc;
        let e1 = linear(obj, rows, d, ep.get(e.w1), ep.get(e.b1), 2 * d);
        let ge = gelu(&e1);
        let mut out = linear(&ge, rows, 2 * d, ep.get(e.w2), ep.get(e.b2), d);
        for (o, x) in out.iter_mut().zip(obj) {
            *o += *x;
        }
        (out, e1, ge)
    }

    fn attach<S: Scalar>(&self, gp: &Params<S>, prefix: &[S], obj: &[S]) -> Vec<S> {
        let d = self.cfg.dim;
        let mut seq = Vec::with_capacity(self.cfg.seq_len() * d);
        seq.extend_from_slice(prefix);
        let ot = gp.get(self.obj_time);
        let slot = self.slot.map(|s| gp.get(s));
        for t in 0..self.cfg.frames {
            for n in 0..SLOTS {
                let tok = &obj[(t * SLOTS + n) * d..][..d];
                for k in 0..d {
                    let mut v = tok[k] + ot[t * d + k];
                    if let Some(s) = slot {
                        v += s[n * d + k];
                    }
                    seq.push(v);
                }
            }
        }
        seq
    }
}

struct Cache<S> {
    patches: Vec<S>,
    obj: Vec<S>,
    enc: Option<(Vec<S>, Vec<S>)>,
    blocks: Vec<BlockCache<S>>,
    lnf: LayerNormCache<S>,
    hf: Vec<S>,
}

fn forward<S: Scalar>(arch: &Arch, gp: &Params<S>, ep: Option<&Params<S>>, pixels: &[S], boxes: &[[BBox; SLOTS]]) -> (Vec<S>, Cache<S>) {
    let cfg = &arch.cfg;
    let (d, g) = (cfg.dim, cfg.grid());
    let patches = arch.patchify(pixels);
    let grid = arch.grid(gp, &patches);
    let fg = FeatureGrid {
        t: cfg.frames,
        h: g,
        w: g,
        d,
        values: grid,
    };
    let obj = crop(&fg, boxes).expect("frame count checked by caller").values;
    let (obj_out, enc) = match ep {
        Some(ep) => {
            let (o, e1, ge) = arch.encode(ep, &obj);
            (o, Some((e1, ge)))
        }
        None => (obj.clone(), None),
    };
    let mut prefix = Vec::with_capacity(cfg.patch_tokens() * d);
    prefix.extend_from_slice(gp.get(arch.cls));
    prefix.extend_from_slice(&fg.values);
    let mut x = arch.attach(gp, &prefix, &obj_out);
    let dims = arch.dims();
    let blocks = arch.blocks.iter().map(|ids| block_forward(ids, gp, dims, &mut x)).collect();
    let (hf, lnf) = layer_norm(&x[..d], 1, d, gp.get(arch.lnf_g), gp.get(arch.lnf_b));
    let logits = linear(&hf, 1, d, gp.get(arch.head_w), gp.get(arch.head_b), cfg.classes);
    (
        logits,
        Cache {
            patches,
            obj,
            enc,
            blocks,
            lnf,
            hf,
        },
    )
}

fn backward<S: Scalar>(
    arch: &Arch,
    gp: &Params<S>,
    ep: Option<&Params<S>>,
    cache: &Cache<S>,
    boxes: &[[BBox; SLOTS]],
    dlogits: &[S],
) -> (Vec<S>, Option<Vec<S>>) {
    let cfg = &arch.cfg;
    let (d, g) = (cfg.dim, cfg.grid());
    let hw = g * g;
    let gl = arch.g_layout.clone();
    let seg = |id: SegId| gl.range(id);
    let mut dg = vec![S::zero(); gp.len()];

    let dhf = {
        let (dw, db) = pair(&mut dg, seg(arch.head_w), seg(arch.head_b));
        linear_backward(&cache.hf, 1, d, gp.get(arch.head_w), dlogits, cfg.classes, dw, db, true).unwrap()
    };
    let mut dx = vec![S::zero(); cfg.seq_len() * d];
    {
        let (dgam, dbet) = pair(&mut dg, seg(arch.lnf_g), seg(arch.lnf_b));
        let d0 = layer_norm_backward(&cache.lnf, 1, d, gp.get(arch.lnf_g), &dhf, dgam, dbet);
        dx[..d].copy_from_slice(&d0);
    }
    let dims = arch.dims();
    for (ids, bc) in arch.blocks.iter().zip(&cache.blocks).rev() {
        block_backward(ids, gp, dims, bc, &mut dx, &mut dg);
    }

    // Attach: object positions, then the object tokens themselves.
    let obj_start = cfg.patch_tokens() * d;
    let dobj_out = &dx[obj_start..];
    {
        let r = seg(arch.obj_time);
        for t in 0..cfg.frames {
            for n in 0..SLOTS {
                for k in 0..d {
                    dg[r.start + t * d + k] += dobj_out[(t * SLOTS + n) * d + k];
                }
            }
        }
        if let Some(s) = arch.slot {
            let r = seg(s);
            for t in 0..cfg.frames {
                for n in 0..SLOTS {
                    for k in 0..d {
                        dg[r.start + n * d + k] += dobj_out[(t * SLOTS + n) * d + k];
                    }
                }
            }
        }
    }
    let (dobj, de) = match (ep, &cache.enc) {
        (Some(ep), Some((e1, ge))) => {
            let rows = cfg.frames * SLOTS;
            let el = ep.layout().clone();
            let mut de = vec![S::zero(); ep.len()];
            let e = &arch.enc;
            let dge = {
                let (dw, db) = pair(&mut de, el.range(e.w2), el.range(e.b2));
                linear_backward(ge, rows, 2 * d, ep.get(e.w2), dobj_out, d, dw, db, true).unwrap()
            };
            let de1 = gelu_backward(e1, &dge);
            let mut dobj = {
                let (dw, db) = pair(&mut de, el.range(e.w1), el.range(e.b1));
                linear_backward(&cache.obj, rows, d, ep.get(e.w1), &de1, 2 * d, dw, db, true).unwrap()
            };
            for (a, b) in dobj.iter_mut().zip(dobj_out) {
                *a += *b;
            }
            (dobj, Some(de))
        }
        _ => (dobj_out.to_vec(), None),
    };

    // Grid gradient: direct path through the prefix plus the crop.
    let mut dgrid = dx[d..obj_start].to_vec();
    crop_backward(g, g, d, boxes, &dobj, &mut dgrid);
    {
        let r = seg(arch.cls);
        for k in 0..d {
            dg[r.start + k] += dx[k];
        }
    }
    let (rs, rt) = (seg(arch.pos_space), seg(arch.pos_time));
    for t in 0..cfg.frames {
        for s in 0..hw {
            for k in 0..d {
                let v = dgrid[(t * hw + s) * d + k];
                dg[rs.start + s * d + k] += v;
                dg[rt.start + t * d + k] += v;
            }
        }
    }
    {
        let (dw, db) = pair(&mut dg, seg(arch.patch_w), seg(arch.patch_b));
        linear_backward(&cache.patches, cfg.frames * hw, cfg.patch * cfg.patch * 3, gp.get(arch.patch_w), &dgrid, d, dw, db, false);
    }
    (dg, de)
}

/// Recognizer G with its object encoder E (`None` when E is the identity).
#[derive(Clone, Debug, PartialEq)]
pub struct Recognizer {
    pub cfg: RecognizerConfig,
    pub g: Params<f32>,
    pub e: Option<Params<f32>>,
}

impl Recognizer {
    pub fn new(cfg: RecognizerConfig, seed_v: u64) -> Result<Self> {
        let arch = Arch::new(cfg)?;
        Ok(Self {
            cfg,
            g: arch.init_g(seed_v),
            e: cfg.encoder.then(|| arch.init_e(seed_v)),
        })
    }

    pub fn from_params(cfg: RecognizerConfig, g: Params<f32>, e: Option<Params<f32>>) -> Result<Self> {
        let arch = Arch::new(cfg)?;
        if **g.layout() != *arch.g_layout {
            return Err(Error::invalid("recognizer parameters do not match the configuration"));
        }
        match (&e, cfg.encoder) {
            (Some(e), true) if **e.layout() == *arch.e_layout => {}
            (None, false) => {}
            _ => return Err(Error::invalid("encoder parameters do not match the configuration")),
        }
        Ok(Self { cfg, g, e })
    }

    fn arch(&self) -> Arch {
        Arch::new(self.cfg).expect("validated at construction")
    }

    fn check(&self, clip: &VideoClip, boxes: &[[BBox; SLOTS]]) -> Result<()> {
        let c = &self.cfg;
        if (clip.t, clip.h, clip.w) != (c.frames, c.size, c.size) || clip.frames.len() != c.frames * c.size * c.size * 3 {
            return Err(Error::shape(
                format!("{}x{}x{}x3 clip", c.frames, c.size, c.size),
                format!("{}x{}x{}x3", clip.t, clip.h, clip.w),
            ));
        }
        if boxes.len() != c.frames {
            return Err(Error::shape(format!("{} frames of boxes", c.frames), boxes.len()));
        }
        Ok(())
    }

    /// Patch tokens with positional embeddings, as a per-frame grid.
    pub fn feature_grid(&self, clip: &VideoClip) -> Result<FeatureGrid<f32>> {
        self.check(clip, &vec![[BBox::full(); SLOTS]; self.cfg.frames])?;
        let arch = self.arch();
        let g = self.cfg.grid();
        FeatureGrid::new(self.cfg.frames, g, g, self.cfg.dim, arch.grid(&self.g, &arch.patchify(&clip.frames)))
    }

    /// Class token followed by the patch tokens.
    pub fn patch_sequence(&self, clip: &VideoClip) -> Result<Vec<f32>> {
        let grid = self.feature_grid(clip)?;
        let mut seq = self.g.get(self.arch().cls).to_vec();
        seq.extend_from_slice(&grid.values);
        Ok(seq)
    }

    /// E applied to every token independently.
    pub fn encode_objects(&self, x: &ObjectTokens<f32>) -> Result<ObjectTokens<f32>> {
        if x.d != self.cfg.dim || x.t != self.cfg.frames || x.values.len() != x.t * SLOTS * x.d {
            return Err(Error::shape(format!("{}x{SLOTS}x{}", self.cfg.frames, self.cfg.dim), x.values.len()));
        }
        Ok(match &self.e {
            Some(ep) => ObjectTokens {
                t: x.t,
                d: x.d,
                values: self.arch().encode(ep, &x.values).0,
            },
            None => x.clone(),
        })
    }

    /// Appends object tokens, each offset by its positional embedding.
    pub fn attach(&self, patch_tokens: &[f32], obj: &ObjectTokens<f32>) -> Result<Vec<f32>> {
        let d = self.cfg.dim;
        if obj.d != d || patch_tokens.len() != self.cfg.patch_tokens() * d || obj.values.len() != self.cfg.frames * SLOTS * d {
            return Err(Error::shape(
                format!("{} patch tokens and {}x{SLOTS} object tokens of dim {d}", self.cfg.patch_tokens(), self.cfg.frames),
                format!("{} and {} values of dim {}", patch_tokens.len(), obj.values.len(), obj.d),
            ));
        }
        Ok(self.arch().attach(&self.g, patch_tokens, &obj.values))
    }

    /// Class logits for a clip and per-frame boxes.
    pub fn recognize(&self, clip: &VideoClip, boxes: &[[BBox; SLOTS]]) -> Result<Vec<f32>> {
        self.check(clip, boxes)?;
        Ok(forward(&self.arch(), &self.g, self.e.as_ref(), &clip.frames, boxes).0)
    }

    pub fn predict(&self, clip: &VideoClip, boxes: &[[BBox; SLOTS]]) -> Result<usize> {
        let logits = self.recognize(clip, boxes)?;
        Ok(argmax(&logits))
    }

    /// Content digest of G and E.
    pub fn fingerprint(&self) -> String {
        freeze_fingerprint(&self.g, self.e.as_ref())
    }
}

pub fn freeze_fingerprint(g: &Params<f32>, e: Option<&Params<f32>>) -> String {
    let mut h = Sha256::new();
    h.update(b"G:");
    h.update(g.digest());
    h.update(b"E:");
    match e {
        Some(e) => h.update(e.digest()),
        None => h.update(b"identity"),
    }
    hex::encode(h.finalize())
}

fn argmax<S: Scalar>(v: &[S]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Cross-entropy and parameter gradients of one clip, in any precision.
pub fn loss_and_grad<S: Scalar>(
    cfg: RecognizerConfig,
    g: &Params<S>,
    e: Option<&Params<S>>,
    pixels: &[S],
    boxes: &[[BBox; SLOTS]],
    label: usize,
) -> Result<(f64, Vec<S>, Option<Vec<S>>)> {
    let arch = Arch::new(cfg)?;
    if pixels.len() != cfg.frames * arch.frame_len() || boxes.len() != cfg.frames || label >= cfg.classes {
        return Err(Error::invalid("clip, boxes or label do not match the recognizer"));
    }
    let (logits, cache) = forward(&arch, g, e, pixels, boxes);
    let (loss, dlogits) = softmax_cross_entropy(&logits, label);
    let (dg, de) = backward(&arch, g, e, &cache, boxes, &dlogits);
    Ok((loss.f64(), dg, de))
}

/// A training or evaluation example: clip, boxes for Crop, action label.
#[derive(Clone, Debug)]
pub struct Sample<'a> {
    pub clip: &'a VideoClip,
    pub boxes: Vec<[BBox; SLOTS]>,
    pub label: usize,
}

impl<'a> Sample<'a> {
    /// Ground-truth boxes padded to the slot count, and the clip's own label.
    pub fn with_gt_boxes(clip: &'a VideoClip) -> Self {
        Self {
            clip,
            boxes: (0..clip.t).map(|t| pad_boxes(&clip.boxes(t))).collect(),
            label: clip.action_label,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub rng_seed: u64,
    pub optimizer: OptimizerKind,
    /// Per-epoch box edge jitter as a fraction of box extent (0 = off).
    #[serde(default)]
    pub box_jitter: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            epochs: 30,
            batch_size: 16,
            rng_seed: 0,
            optimizer: OptimizerKind::Adam,
            box_jitter: 0.0,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) || self.batch_size == 0 || !(0.0..0.5).contains(&self.box_jitter) {
            return Err(Error::Config("recognizer training needs learning_rate > 0 and batch_size >= 1".into()));
        }
        Ok(())
    }
}

/// Trains G and E (when present) on the samples with cross-entropy, starting
/// from `model`'s weights.
pub fn fit(model: &Recognizer, samples: &[Sample<'_>], cfg: &FitConfig) -> Result<(Recognizer, TrainLog)> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::invalid("recognizer training needs at least one clip"));
    }
    for s in samples {
        model.check(s.clip, &s.boxes)?;
        if s.label >= model.cfg.classes {
            return Err(Error::invalid(format!("label {} out of range", s.label)));
        }
    }
    let arch = model.arch();
    let mut out = model.clone();
    let mut opt_g = Optimizer::new(cfg.optimizer, cfg.learning_rate, out.g.len());
    let mut opt_e = out.e.as_ref().map(|e| Optimizer::new(cfg.optimizer, cfg.learning_rate, e.len()));
    let mut log = TrainLog::default();
    let mut order: Vec<usize> = (0..samples.len()).collect();
    for epoch in 0..cfg.epochs {
        let mut rng = seed::rng(cfg.rng_seed, &[seed::tag("recognizer-epoch"), epoch as u64]);
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for idx in order.chunks(cfg.batch_size) {
            let mut gg = vec![0.0f32; out.g.len()];
            let mut ge = out.e.as_ref().map(|e| vec![0.0f32; e.len()]);
            let scale = 1.0 / idx.len() as f32;
            for &i in idx {
                let s = &samples[i];
                let jittered: Vec<[BBox; SLOTS]>;
                let boxes = if cfg.box_jitter > 0.0 {
                    jittered = s.boxes.iter().map(|f| f.map(|b| b.jittered(cfg.box_jitter, &mut rng))).collect();
                    &jittered
                } else {
                    &s.boxes
                };
                let (logits, cache) = forward(&arch, &out.g, out.e.as_ref(), &s.clip.frames, boxes);
                let (loss, dlogits) = softmax_cross_entropy(&logits, s.label);
                if !loss.is_finite() {
                    return Err(Error::Diverged { epoch, loss: loss as f64 });
                }
                total += loss as f64;
                let (dg, de) = backward(&arch, &out.g, out.e.as_ref(), &cache, boxes, &dlogits);
                for (a, b) in gg.iter_mut().zip(&dg) {
                    *a += scale * b;
                }
                if let (Some(acc), Some(de)) = (ge.as_mut(), de) {
                    for (a, b) in acc.iter_mut().zip(&de) {
                        *a += scale * b;
                    }
                }
            }
            opt_g.step(out.g.data_mut(), &gg);
            if let (Some(opt), Some(e), Some(grad)) = (opt_e.as_mut(), out.e.as_mut(), ge.as_ref()) {
                opt.step(e.data_mut(), grad);
            }
        }
        let mean = total / samples.len() as f64;
        if !mean.is_finite() || !out.g.is_finite() || out.e.as_ref().is_some_and(|e| !e.is_finite()) {
            return Err(Error::Diverged { epoch, loss: mean });
        }
        log.epoch_loss.push(mean);
    }
    Ok((out, log))
}

/// Source training from fresh weights; G and E are trained jointly.
pub fn train_source(model_cfg: RecognizerConfig, samples: &[Sample<'_>], cfg: &FitConfig) -> Result<(Recognizer, TrainLog)> {
    let init = Recognizer::new(model_cfg, cfg.rng_seed)?;
    fit(&init, samples, cfg)
}

/// Top-1 accuracy over the samples.
pub fn accuracy(model: &Recognizer, samples: &[Sample<'_>]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::invalid("accuracy of an empty set"));
    }
    let hits: Result<Vec<bool>> = samples
        .par_iter()
        .map(|s| Ok(model.predict(s.clip, &s.boxes)? == s.label))
        .collect();
    Ok(hits?.iter().filter(|&&h| h).count() as f64 / samples.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> RecognizerConfig {
        RecognizerConfig {
            frames: 2,
            size: 16,
            patch: 8,
            dim: 8,
            depth: 2,
            heads: 2,
            mlp_ratio: 2,
            classes: 3,
            slot_embedding: true,
            encoder: true,
        }
    }

    #[test]
    fn default_token_count() {
        let c = RecognizerConfig::default();
        assert_eq!(c.seq_len(), 1 + 8 * 16 + 8 * 4);
        let c8 = RecognizerConfig { patch: 8, ..c };
        assert_eq!(c8.patch_tokens(), 513);
        assert_eq!(c8.seq_len(), 545);
    }

    #[test]
    fn bad_configs_are_rejected() {
        assert!(Recognizer::new(RecognizerConfig { patch: 5, ..tiny() }, 0).is_err());
        assert!(Recognizer::new(RecognizerConfig { heads: 3, ..tiny() }, 0).is_err());
    }

    #[test]
    fn encoder_off_has_no_parameters() {
        let r = Recognizer::new(RecognizerConfig { encoder: false, ..tiny() }, 0).unwrap();
        assert!(r.e.is_none());
    }

    fn tiny_input(cfg: &RecognizerConfig) -> (Vec<f64>, Vec<[BBox; SLOTS]>) {
        use rand::Rng;
        let mut rng = seed::rng(9, &[]);
        let px = (0..cfg.frames * cfg.size * cfg.size * 3).map(|_| rng.random::<f64>()).collect();
        let boxes = (0..cfg.frames)
            .map(|_| {
                std::array::from_fn(|_| {
                    let (x, y) = (rng.random_range(0.0..0.6), rng.random_range(0.0..0.6));
                    BBox::new(x, y, x + rng.random_range(0.1..0.4), y + rng.random_range(0.1..0.4)).unwrap()
                })
            })
            .collect();
        (px, boxes)
    }

    #[test]
    fn gradients_match_finite_differences() {
        use crate::nn::gradcheck::{central_difference_at, rel_error};
        let cfg = tiny();
        let arch = Arch::new(cfg).unwrap();
        let g: Params<f64> = arch.init_g(1);
        // Non-trivial E so its whole path is exercised.
        let mut e: Params<f64> = arch.init_e(2);
        for (i, v) in e.data_mut().iter_mut().enumerate() {
            *v += 0.05 * ((i * 7919 % 13) as f64 - 6.0) / 6.0;
        }
        let (px, boxes) = tiny_input(&cfg);
        let (_, dg, de) = loss_and_grad(cfg, &g, Some(&e), &px, &boxes, 1).unwrap();
        let de = de.unwrap();
        let idx: Vec<usize> = (0..g.len()).step_by(7).collect();
        let num = central_difference_at(g.data(), 1e-5, idx.iter().copied(), |d| {
            let gp = Params::from_vec(g.layout().clone(), d.to_vec()).unwrap();
            loss_and_grad(cfg, &gp, Some(&e), &px, &boxes, 1).unwrap().0
        });
        for (k, &i) in idx.iter().enumerate() {
            let ok = (dg[i] - num[k]).abs() < 1e-9 || rel_error(dg[i], num[k]) < 1e-4;
            assert!(ok, "G {} ({i}): {} vs {}", g.layout().segments().iter().find(|s| s.range().contains(&i)).unwrap().name, dg[i], num[k]);
        }
        let idx: Vec<usize> = (0..e.len()).step_by(3).collect();
        let num = central_difference_at(e.data(), 1e-5, idx.iter().copied(), |d| {
            let ep = Params::from_vec(e.layout().clone(), d.to_vec()).unwrap();
            loss_and_grad(cfg, &g, Some(&ep), &px, &boxes, 1).unwrap().0
        });
        for (k, &i) in idx.iter().enumerate() {
            let ok = (de[i] - num[k]).abs() < 1e-9 || rel_error(de[i], num[k]) < 1e-4;
            assert!(ok, "E {i}: {} vs {}", de[i], num[k]);
        }
    }
}
