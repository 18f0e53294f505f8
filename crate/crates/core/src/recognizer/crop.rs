//! RoI pooling of object tokens from a per-frame token grid.
//!
//! A box is pooled to the exact mean of the bilinear interpolant of the grid
//! over the box area. The interpolant is piecewise linear per axis between
//! cell centres (and constant beyond the outermost centres), so the mean
//! factors into one weight vector per axis, computed by splitting the box
//! interval at the cell centres and integrating each linear piece exactly.

use crate::boxes::{BBox, SLOTS};
use crate::error::{Error, Result};
use crate::nn::Scalar;

/// Per-frame spatial feature map, `T x h x w x d` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureGrid<S> {
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub d: usize,
    pub values: Vec<S>,
}

impl<S: Scalar> FeatureGrid<S> {
    pub fn new(t: usize, h: usize, w: usize, d: usize, values: Vec<S>) -> Result<Self> {
        if h == 0 || w == 0 || d == 0 {
            return Err(Error::invalid("feature grid needs h, w, d >= 1"));
        }
        if values.len() != t * h * w * d {
            return Err(Error::shape(format!("{t}x{h}x{w}x{d} grid"), values.len()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feature grid".into()));
        }
        Ok(Self { t, h, w, d, values })
    }
}

/// One token per (frame, slot), `T x N x d` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectTokens<S> {
    pub t: usize,
    pub d: usize,
    pub values: Vec<S>,
}

impl<S> ObjectTokens<S> {
    pub fn token(&self, t: usize, n: usize) -> &[S] {
        let o = (t * SLOTS + n) * self.d;
        &self.values[o..o + self.d]
    }
}

/// Weights over `cells` grid cells whose combination is the mean of the
/// clamped linear interpolant over `[lo, hi]` (normalized coordinates).
pub fn axis_weights(lo: f64, hi: f64, cells: usize) -> Vec<(usize, f64)> {
    if cells == 1 {
        return vec![(0, 1.0)];
    }
    let n = cells as f64;
    let (a, b) = (lo * n, hi * n);
    if b - a < 1e-9 {
        let j = ((0.5 * (a + b)).floor().max(0.0) as usize).min(cells - 1);
        return vec![(j, 1.0)];
    }
    let mut cuts = vec![a];
    for j in 0..cells {
        let k = j as f64 + 0.5;
        if k > a && k < b {
            cuts.push(k);
        }
    }
    cuts.push(b);
    let mut wts = vec![0.0; cells];
    for piece in cuts.windows(2) {
        let (p, q) = (piece[0], piece[1]);
        let m = 0.5 * (p + q) - 0.5;
        let share = (q - p) / (b - a);
        if m <= 0.0 {
            wts[0] += share;
        } else if m >= n - 1.0 {
            wts[cells - 1] += share;
        } else {
            let j = m.floor() as usize;
            let f = m - j as f64;
            wts[j] += share * (1.0 - f);
            wts[j + 1] += share * f;
        }
    }
    wts.into_iter().enumerate().filter(|&(_, v)| v != 0.0).collect()
}

/// Sparse weights over the `h x w` cells of one frame, indexed `y * w + x`.
pub fn box_weights(b: &BBox, h: usize, w: usize) -> Vec<(usize, f64)> {
    let wy = axis_weights(b.y1(), b.y2(), h);
    let wx = axis_weights(b.x1(), b.x2(), w);
    let mut out = Vec::with_capacity(wy.len() * wx.len());
    for &(i, a) in &wy {
        for &(j, c) in &wx {
            out.push((i * w + j, a * c));
        }
    }
    out
}

fn check_boxes(t: usize, boxes: &[[BBox; SLOTS]]) -> Result<()> {
    if boxes.len() != t {
        return Err(Error::shape(format!("{t} frames of boxes"), boxes.len()));
    }
    Ok(())
}

/// Pools one token per box from the frame's grid.
pub fn crop<S: Scalar>(grid: &FeatureGrid<S>, boxes: &[[BBox; SLOTS]]) -> Result<ObjectTokens<S>> {
    check_boxes(grid.t, boxes)?;
    let (hw, d) = (grid.h * grid.w, grid.d);
    let mut values = vec![S::zero(); grid.t * SLOTS * d];
    for (t, frame) in boxes.iter().enumerate() {
        for (n, b) in frame.iter().enumerate() {
            let out = &mut values[(t * SLOTS + n) * d..(t * SLOTS + n + 1) * d];
            for (cell, wt) in box_weights(b, grid.h, grid.w) {
                let wt = S::of(wt);
                let src = &grid.values[(t * hw + cell) * d..(t * hw + cell + 1) * d];
                for (o, &s) in out.iter_mut().zip(src) {
                    *o += wt * s;
                }
            }
        }
    }
    Ok(ObjectTokens { t: grid.t, d, values })
}

/// Accumulates `d loss / d grid` given `d loss / d tokens`.
pub fn crop_backward<S: Scalar>(h: usize, w: usize, d: usize, boxes: &[[BBox; SLOTS]], dtok: &[S], dgrid: &mut [S]) {
    let hw = h * w;
    for (t, frame) in boxes.iter().enumerate() {
        for (n, b) in frame.iter().enumerate() {
            let g = &dtok[(t * SLOTS + n) * d..(t * SLOTS + n + 1) * d];
            for (cell, wt) in box_weights(b, h, w) {
                let wt = S::of(wt);
                let dst = &mut dgrid[(t * hw + cell) * d..(t * hw + cell + 1) * d];
                for (o, &v) in dst.iter_mut().zip(g) {
                    *o += wt * v;
                }
            }
        }
    }
}

/// Fills `SLOTS` boxes from a shorter list by cycling through it; an empty
/// list becomes full-frame boxes.
pub fn pad_boxes(boxes: &[BBox]) -> [BBox; SLOTS] {
    if boxes.is_empty() {
        return [BBox::full(); SLOTS];
    }
    std::array::from_fn(|n| boxes[n % boxes.len()])
}
