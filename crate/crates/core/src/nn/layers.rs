//! Forward and backward kernels for the layers used by the detector and the
//! recognizer. Activations are row-major `rows x features` buffers.

use super::scalar::{gemm, MatMut, MatRef, Scalar};

/// `y = x w + b` with `w` stored `in_dim x out_dim`.
pub fn linear<S: Scalar>(x: &[S], rows: usize, in_dim: usize, w: &[S], b: &[S], out_dim: usize) -> Vec<S> {
    let mut y = Vec::with_capacity(rows * out_dim);
    for _ in 0..rows {
        y.extend_from_slice(b);
    }
    gemm(
        S::one(),
        MatRef::new(x, rows, in_dim),
        MatRef::new(w, in_dim, out_dim),
        S::one(),
        MatMut::new(&mut y, rows, out_dim),
    );
    y
}

/// Accumulates `dw`, `db` and returns `dx` when requested.
#[allow(clippy::too_many_arguments)]
pub fn linear_backward<S: Scalar>(
    x: &[S],
    rows: usize,
    in_dim: usize,
    w: &[S],
    dy: &[S],
    out_dim: usize,
    dw: &mut [S],
    db: &mut [S],
    want_dx: bool,
) -> Option<Vec<S>> {
    gemm(
        S::one(),
        MatRef::new(x, rows, in_dim).t(),
        MatRef::new(dy, rows, out_dim),
        S::one(),
        MatMut::new(dw, in_dim, out_dim),
    );
    for r in 0..rows {
        for (g, d) in db.iter_mut().zip(&dy[r * out_dim..(r + 1) * out_dim]) {
            *g += *d;
        }
    }
    want_dx.then(|| {
        let mut dx = vec![S::zero(); rows * in_dim];
        gemm(
            S::one(),
            MatRef::new(dy, rows, out_dim),
            MatRef::new(w, in_dim, out_dim).t(),
            S::zero(),
            MatMut::new(&mut dx, rows, in_dim),
        );
        dx
    })
}

pub struct LayerNormCache<S> {
    xhat: Vec<S>,
    rstd: Vec<S>,
}

const LN_EPS: f64 = 1e-5;

pub fn layer_norm<S: Scalar>(x: &[S], rows: usize, dim: usize, gamma: &[S], beta: &[S]) -> (Vec<S>, LayerNormCache<S>) {
    let mut y = vec![S::zero(); rows * dim];
    let mut xhat = vec![S::zero(); rows * dim];
    let mut rstd = vec![S::zero(); rows];
    let n = S::of(dim as f64);
    for r in 0..rows {
        let xr = &x[r * dim..(r + 1) * dim];
        let mean = xr.iter().copied().sum::<S>() / n;
        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / n;
        let rs = S::one() / (var + S::of(LN_EPS)).sqrt();
        rstd[r] = rs;
        for i in 0..dim {
            let h = (xr[i] - mean) * rs;
            xhat[r * dim + i] = h;
            y[r * dim + i] = h * gamma[i] + beta[i];
        }
    }
    (y, LayerNormCache { xhat, rstd })
}

pub fn layer_norm_backward<S: Scalar>(
    cache: &LayerNormCache<S>,
    rows: usize,
    dim: usize,
    gamma: &[S],
    dy: &[S],
    dgamma: &mut [S],
    dbeta: &mut [S],
) -> Vec<S> {
    let mut dx = vec![S::zero(); rows * dim];
    let n = S::of(dim as f64);
    let mut dxhat = vec![S::zero(); dim];
    for r in 0..rows {
        let xh = &cache.xhat[r * dim..(r + 1) * dim];
        let dyr = &dy[r * dim..(r + 1) * dim];
        let mut sum_d = S::zero();
        let mut sum_dx = S::zero();
        for i in 0..dim {
            dgamma[i] += dyr[i] * xh[i];
            dbeta[i] += dyr[i];
            dxhat[i] = dyr[i] * gamma[i];
            sum_d += dxhat[i];
            sum_dx += dxhat[i] * xh[i];
        }
        let rs = cache.rstd[r];
        for i in 0..dim {
            dx[r * dim + i] = rs * (dxhat[i] - sum_d / n - xh[i] * sum_dx / n);
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

/// Tanh-approximated GELU.
pub fn gelu<S: Scalar>(x: &[S]) -> Vec<S> {
    let c = S::of(GELU_C);
    let k = S::of(0.044715);
    let half = S::of(0.5);
    x.iter()
        .map(|&v| half * v * (S::one() + (c * (v + k * v * v * v)).tanh()))
        .collect()
}

pub fn gelu_backward<S: Scalar>(x: &[S], dy: &[S]) -> Vec<S> {
    let c = S::of(GELU_C);
    let k = S::of(0.044715);
    let half = S::of(0.5);
    x.iter()
        .zip(dy)
        .map(|(&v, &d)| {
            let u = c * (v + k * v * v * v);
            let t = u.tanh();
            let du = c * (S::one() + S::of(3.0) * k * v * v);
            d * (half * (S::one() + t) + half * v * (S::one() - t * t) * du)
        })
        .collect()
}

pub fn relu_inplace<S: Scalar>(x: &mut [S]) {
    for v in x.iter_mut() {
        if *v < S::zero() {
            *v = S::zero();
        }
    }
}

/// Masks `dy` where the post-activation output was clamped.
pub fn relu_backward_inplace<S: Scalar>(y: &[S], dy: &mut [S]) {
    for (d, &v) in dy.iter_mut().zip(y) {
        if v <= S::zero() {
            *d = S::zero();
        }
    }
}

/// Row-wise softmax in place.
pub fn softmax_rows<S: Scalar>(x: &mut [S], cols: usize) {
    for row in x.chunks_mut(cols) {
        let max = row.iter().copied().fold(S::neg_infinity(), S::max);
        let mut sum = S::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
}

/// Cross-entropy of one logit row against `label`; returns (loss, dlogits).
pub fn softmax_cross_entropy<S: Scalar>(logits: &[S], label: usize) -> (S, Vec<S>) {
    let mut p = logits.to_vec();
    softmax_rows(&mut p, logits.len());
    let loss = -(p[label].max(S::of(1e-30))).ln();
    p[label] -= S::one();
    (loss, p)
}

/// Geometry of a same-padded 3x3 convolution over NHWC batches.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv3x3 {
    pub in_h: usize,
    pub in_w: usize,
    pub cin: usize,
    pub cout: usize,
    pub stride: usize,
}

impl Conv3x3 {
    pub fn out_h(&self) -> usize {
        (self.in_h + 2 - 3) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 - 3) / self.stride + 1
    }

    pub fn patch(&self) -> usize {
        9 * self.cin
    }

    fn im2col<S: Scalar>(&self, x: &[S], batch: usize) -> Vec<S> {
        let (oh, ow, k) = (self.out_h(), self.out_w(), self.patch());
        let mut cols = vec![S::zero(); batch * oh * ow * k];
        for b in 0..batch {
            let img = &x[b * self.in_h * self.in_w * self.cin..(b + 1) * self.in_h * self.in_w * self.cin];
            for oy in 0..oh {
                for ox in 0..ow {
                    let row = &mut cols[((b * oh + oy) * ow + ox) * k..((b * oh + oy) * ow + ox + 1) * k];
                    for ky in 0..3 {
                        let iy = (oy * self.stride + ky) as isize - 1;
                        if iy < 0 || iy >= self.in_h as isize {
                            continue;
                        }
                        for kx in 0..3 {
                            let ix = (ox * self.stride + kx) as isize - 1;
                            if ix < 0 || ix >= self.in_w as isize {
                                continue;
                            }
                            let src = (iy as usize * self.in_w + ix as usize) * self.cin;
                            let dst = (ky * 3 + kx) * self.cin;
                            row[dst..dst + self.cin].copy_from_slice(&img[src..src + self.cin]);
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im<S: Scalar>(&self, dcols: &[S], batch: usize) -> Vec<S> {
        let (oh, ow, k) = (self.out_h(), self.out_w(), self.patch());
        let mut dx = vec![S::zero(); batch * self.in_h * self.in_w * self.cin];
        for b in 0..batch {
            let img = &mut dx[b * self.in_h * self.in_w * self.cin..(b + 1) * self.in_h * self.in_w * self.cin];
            for oy in 0..oh {
                for ox in 0..ow {
                    let row = &dcols[((b * oh + oy) * ow + ox) * k..((b * oh + oy) * ow + ox + 1) * k];
                    for ky in 0..3 {
                        let iy = (oy * self.stride + ky) as isize - 1;
                        if iy < 0 || iy >= self.in_h as isize {
                            continue;
                        }
                        for kx in 0..3 {
                            let ix = (ox * self.stride + kx) as isize - 1;
                            if ix < 0 || ix >= self.in_w as isize {
                                continue;
                            }
                            let dst = (iy as usize * self.in_w + ix as usize) * self.cin;
                            let src = (ky * 3 + kx) * self.cin;
                            for c in 0..self.cin {
                                img[dst + c] += row[src + c];
                            }
                        }
                    }
                }
            }
        }
        dx
    }

    /// Returns `(output, im2col buffer)`; the buffer is needed for backward.
    pub fn forward<S: Scalar>(&self, x: &[S], batch: usize, w: &[S], b: &[S]) -> (Vec<S>, Vec<S>) {
        let cols = self.im2col(x, batch);
        let rows = batch * self.out_h() * self.out_w();
        let y = linear(&cols, rows, self.patch(), w, b, self.cout);
        (y, cols)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn backward<S: Scalar>(
        &self,
        cols: &[S],
        batch: usize,
        w: &[S],
        dy: &[S],
        dw: &mut [S],
        db: &mut [S],
        want_dx: bool,
    ) -> Option<Vec<S>> {
        let rows = batch * self.out_h() * self.out_w();
        let dcols = linear_backward(cols, rows, self.patch(), w, dy, self.cout, dw, db, want_dx)?;
        Some(self.col2im(&dcols, batch))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{central_difference, max_rel_error};

    fn seq(n: usize, scale: f64) -> Vec<f64> {
        (0..n).map(|i| ((i as f64 + 1.0) * scale).sin()).collect()
    }

    #[test]
    fn linear_backward_matches_finite_differences() {
        let (rows, din, dout) = (3, 4, 5);
        let x = seq(rows * din, 0.7);
        let w = seq(din * dout, 0.3);
        let b = seq(dout, 1.1);
        let g = seq(rows * dout, 0.9);
        let loss = |x: &[f64], w: &[f64]| -> f64 {
            linear(x, rows, din, w, &b, dout).iter().zip(&g).map(|(a, b)| a * b).sum()
        };
        let mut dw = vec![0.0; din * dout];
        let mut db = vec![0.0; dout];
        let dx = linear_backward(&x, rows, din, &w, &g, dout, &mut dw, &mut db, true).unwrap();
        let num_w = central_difference(&w, 1e-5, |w| loss(&x, w));
        let num_x = central_difference(&x, 1e-5, |x| loss(x, &w));
        assert!(max_rel_error(&dw, &num_w) < 1e-6);
        assert!(max_rel_error(&dx, &num_x) < 1e-6);
    }

    #[test]
    fn layer_norm_backward_matches_finite_differences() {
        let (rows, dim) = (2, 6);
        let x = seq(rows * dim, 0.77);
        let gamma = seq(dim, 0.5);
        let beta = seq(dim, 0.2);
        let g = seq(rows * dim, 1.3);
        let loss = |x: &[f64]| -> f64 { layer_norm(x, rows, dim, &gamma, &beta).0.iter().zip(&g).map(|(a, b)| a * b).sum() };
        let (_, cache) = layer_norm(&x, rows, dim, &gamma, &beta);
        let mut dg = vec![0.0; dim];
        let mut dbt = vec![0.0; dim];
        let dx = layer_norm_backward(&cache, rows, dim, &gamma, &g, &mut dg, &mut dbt);
        let num = central_difference(&x, 1e-5, loss);
        assert!(max_rel_error(&dx, &num) < 1e-6);
    }

    #[test]
    fn gelu_backward_matches_finite_differences() {
        let x: Vec<f64> = (0..21).map(|i| -3.0 + 0.3 * i as f64).collect();
        let ones = vec![1.0; x.len()];
        let d = gelu_backward(&x, &ones);
        for (i, &xi) in x.iter().enumerate() {
            let h = 1e-5;
            let num = (gelu(&[xi + h])[0] - gelu(&[xi - h])[0]) / (2.0 * h);
            assert!((d[i] - num).abs() < 1e-8, "x = {xi}");
        }
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let conv = Conv3x3 { in_h: 5, in_w: 4, cin: 2, cout: 3, stride: 2 };
        assert_eq!((conv.out_h(), conv.out_w()), (3, 2));
        let batch = 2;
        let x = seq(batch * 5 * 4 * 2, 0.41);
        let w = seq(conv.patch() * 3, 0.23);
        let b = seq(3, 0.5);
        let g = seq(batch * 3 * 2 * 3, 0.61);
        let loss = |x: &[f64], w: &[f64]| -> f64 { conv.forward(x, batch, w, &b).0.iter().zip(&g).map(|(a, b)| a * b).sum() };
        let (_, cols) = conv.forward(&x, batch, &w, &b);
        let mut dw = vec![0.0; w.len()];
        let mut db = vec![0.0; 3];
        let dx = conv.backward(&cols, batch, &w, &g, &mut dw, &mut db, true).unwrap();
        assert!(max_rel_error(&dw, &central_difference(&w, 1e-5, |w| loss(&x, w))) < 1e-6);
        assert!(max_rel_error(&dx, &central_difference(&x, 1e-5, |x| loss(x, &w))) < 1e-6);
    }

    #[test]
    fn conv_matches_direct_convolution() {
        let conv = Conv3x3 { in_h: 4, in_w: 4, cin: 1, cout: 1, stride: 1 };
        let x: Vec<f64> = (0..16).map(|i| i as f64).collect();
        let mut w = vec![0.0; 9];
        w[4] = 1.0; // center tap
        w[5] = 2.0; // right neighbour
        let (y, _) = conv.forward(&x, 1, &w, &[0.5]);
        for r in 0..4 {
            for c in 0..4 {
                let right = if c + 1 < 4 { x[r * 4 + c + 1] } else { 0.0 };
                assert_eq!(y[r * 4 + c], x[r * 4 + c] + 2.0 * right + 0.5);
            }
        }
    }

    #[test]
    fn softmax_cross_entropy_gradient_is_p_minus_onehot() {
        let logits = [1.0f64, -0.5, 2.0];
        let (loss, d) = softmax_cross_entropy(&logits, 2);
        let z: f64 = logits.iter().map(|v| v.exp()).sum();
        assert!((loss - (z.ln() - 2.0)).abs() < 1e-12);
        assert!((d.iter().sum::<f64>()).abs() < 1e-12);
        assert!(d[2] < 0.0);
    }
}
