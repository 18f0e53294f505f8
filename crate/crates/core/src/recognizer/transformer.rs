//! Pre-norm transformer block with multi-head self-attention over one sequence.

use crate::nn::layers::{gelu, gelu_backward, layer_norm, layer_norm_backward, linear, linear_backward, softmax_rows, LayerNormCache};
use crate::nn::{gemm, Layout, MatMut, MatRef, Params, Scalar, SegId};

#[derive(Clone, Debug)]
pub(crate) struct BlockIds {
    ln1_g: SegId,
    ln1_b: SegId,
    qkv_w: SegId,
    qkv_b: SegId,
    proj_w: SegId,
    proj_b: SegId,
    ln2_g: SegId,
    ln2_b: SegId,
    fc1_w: SegId,
    fc1_b: SegId,
    fc2_w: SegId,
    fc2_b: SegId,
}

impl BlockIds {
    pub(crate) fn register(layout: &mut Layout, k: usize, d: usize, hidden: usize) -> Self {
        let mut add = |name: &str, shape: &[usize]| layout.add(format!("block{k}.{name}"), shape);
        Self {
            ln1_g: add("ln1.g", &[d]),
            ln1_b: add("ln1.b", &[d]),
            qkv_w: add("qkv.w", &[d, 3 * d]),
            qkv_b: add("qkv.b", &[3 * d]),
            proj_w: add("proj.w", &[d, d]),
            proj_b: add("proj.b", &[d]),
            ln2_g: add("ln2.g", &[d]),
            ln2_b: add("ln2.b", &[d]),
            fc1_w: add("fc1.w", &[d, hidden]),
            fc1_b: add("fc1.b", &[hidden]),
            fc2_w: add("fc2.w", &[hidden, d]),
            fc2_b: add("fc2.b", &[d]),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Dims {
    pub len: usize,
    pub d: usize,
    pub heads: usize,
    pub hidden: usize,
}

pub(crate) struct BlockCache<S> {
    ln1: LayerNormCache<S>,
    h1: Vec<S>,
    qkv: Vec<S>,
    attn: Vec<Vec<S>>,
    ctx: Vec<S>,
    ln2: LayerNormCache<S>,
    h2: Vec<S>,
    f1: Vec<S>,
    g: Vec<S>,
}

pub(crate) fn block_forward<S: Scalar>(ids: &BlockIds, p: &Params<S>, dims: Dims, x: &mut [S]) -> BlockCache<S> {
    let Dims { len, d, heads, hidden } = dims;
    let dh = d / heads;
    let scale = S::of(1.0 / (dh as f64).sqrt());
    let (h1, ln1) = layer_norm(x, len, d, p.get(ids.ln1_g), p.get(ids.ln1_b));
    let qkv = linear(&h1, len, d, p.get(ids.qkv_w), p.get(ids.qkv_b), 3 * d);
    let mut ctx = vec![S::zero(); len * d];
    let mut attn = Vec::with_capacity(heads);
    for h in 0..heads {
        let mut a = vec![S::zero(); len * len];
        gemm(
            scale,
            MatRef::strided(&qkv[h * dh..], len, dh, 3 * d, 1),
            MatRef::strided(&qkv[d + h * dh..], len, dh, 3 * d, 1).t(),
            S::zero(),
            MatMut::new(&mut a, len, len),
        );
        softmax_rows(&mut a, len);
        gemm(
            S::one(),
            MatRef::new(&a, len, len),
            MatRef::strided(&qkv[2 * d + h * dh..], len, dh, 3 * d, 1),
            S::zero(),
            MatMut::strided(&mut ctx[h * dh..], len, dh, d, 1),
        );
        attn.push(a);
    }
    let o = linear(&ctx, len, d, p.get(ids.proj_w), p.get(ids.proj_b), d);
    for (xi, oi) in x.iter_mut().zip(&o) {
        *xi += *oi;
    }
    let (h2, ln2) = layer_norm(x, len, d, p.get(ids.ln2_g), p.get(ids.ln2_b));
    let f1 = linear(&h2, len, d, p.get(ids.fc1_w), p.get(ids.fc1_b), hidden);
    let g = gelu(&f1);
    let f2 = linear(&g, len, hidden, p.get(ids.fc2_w), p.get(ids.fc2_b), d);
    for (xi, fi) in x.iter_mut().zip(&f2) {
        *xi += *fi;
    }
    BlockCache {
        ln1,
        h1,
        qkv,
        attn,
        ctx,
        ln2,
        h2,
        f1,
        g,
    }
}

/// Backpropagates `dx` (gradient w.r.t. the block output) in place to the
/// gradient w.r.t. the block input, accumulating parameter gradients.
pub(crate) fn block_backward<S: Scalar>(
    ids: &BlockIds,
    p: &Params<S>,
    dims: Dims,
    cache: &BlockCache<S>,
    dx: &mut [S],
    grads: &mut [S],
) {
    let Dims { len, d, heads, hidden } = dims;
    let dh = d / heads;
    let scale = S::of(1.0 / (dh as f64).sqrt());
    let lay = p.layout().clone();
    let seg = |id: SegId| lay.range(id);

    // MLP branch.
    let (w2, b2) = (seg(ids.fc2_w), seg(ids.fc2_b));
    let dg = {
        let (dw, db) = pair(grads, w2, b2);
        linear_backward(&cache.g, len, hidden, p.get(ids.fc2_w), dx, d, dw, db, true).unwrap()
    };
    let df1 = gelu_backward(&cache.f1, &dg);
    let dh2 = {
        let (dw, db) = pair(grads, seg(ids.fc1_w), seg(ids.fc1_b));
        linear_backward(&cache.h2, len, d, p.get(ids.fc1_w), &df1, hidden, dw, db, true).unwrap()
    };
    let dres = {
        let (dgam, dbet) = pair(grads, seg(ids.ln2_g), seg(ids.ln2_b));
        layer_norm_backward(&cache.ln2, len, d, p.get(ids.ln2_g), &dh2, dgam, dbet)
    };
    for (a, b) in dx.iter_mut().zip(&dres) {
        *a += *b;
    }

    // Attention branch.
    let dctx = {
        let (dw, db) = pair(grads, seg(ids.proj_w), seg(ids.proj_b));
        linear_backward(&cache.ctx, len, d, p.get(ids.proj_w), dx, d, dw, db, true).unwrap()
    };
    let mut dqkv = vec![S::zero(); len * 3 * d];
    let mut da = vec![S::zero(); len * len];
    for h in 0..heads {
        let a = &cache.attn[h];
        let dctx_h = MatRef::strided(&dctx[h * dh..], len, dh, d, 1);
        // dV = A^T dctx
        gemm(
            S::one(),
            MatRef::new(a, len, len).t(),
            dctx_h,
            S::zero(),
            MatMut::strided(&mut dqkv[2 * d + h * dh..], len, dh, 3 * d, 1),
        );
        // dA = dctx V^T
        gemm(
            S::one(),
            dctx_h,
            MatRef::strided(&cache.qkv[2 * d + h * dh..], len, dh, 3 * d, 1).t(),
            S::zero(),
            MatMut::new(&mut da, len, len),
        );
        // Softmax backward, in place: dS = A * (dA - rowsum(dA * A)).
        for r in 0..len {
            let (ar, dr) = (&a[r * len..(r + 1) * len], &mut da[r * len..(r + 1) * len]);
            let dot = ar.iter().zip(dr.iter()).fold(S::zero(), |s, (&x, &y)| s + x * y);
            for (g, &x) in dr.iter_mut().zip(ar) {
                *g = x * (*g - dot);
            }
        }
        gemm(
            scale,
            MatRef::new(&da, len, len),
            MatRef::strided(&cache.qkv[d + h * dh..], len, dh, 3 * d, 1),
            S::zero(),
            MatMut::strided(&mut dqkv[h * dh..], len, dh, 3 * d, 1),
        );
        gemm(
            scale,
            MatRef::new(&da, len, len).t(),
            MatRef::strided(&cache.qkv[h * dh..], len, dh, 3 * d, 1),
            S::zero(),
            MatMut::strided(&mut dqkv[d + h * dh..], len, dh, 3 * d, 1),
        );
    }
    let dh1 = {
        let (dw, db) = pair(grads, seg(ids.qkv_w), seg(ids.qkv_b));
        linear_backward(&cache.h1, len, d, p.get(ids.qkv_w), &dqkv, 3 * d, dw, db, true).unwrap()
    };
    let dres = {
        let (dgam, dbet) = pair(grads, seg(ids.ln1_g), seg(ids.ln1_b));
        layer_norm_backward(&cache.ln1, len, d, p.get(ids.ln1_g), &dh1, dgam, dbet)
    };
    for (a, b) in dx.iter_mut().zip(&dres) {
        *a += *b;
    }
}

/// Disjoint mutable views of two parameter segments, in either order.
pub(crate) fn pair<S>(buf: &mut [S], a: std::ops::Range<usize>, b: std::ops::Range<usize>) -> (&mut [S], &mut [S]) {
    if a.end <= b.start {
        let (l, r) = buf.split_at_mut(b.start);
        (&mut l[a], &mut r[..b.end - b.start])
    } else {
        assert!(b.end <= a.start, "overlapping segments");
        let (l, r) = buf.split_at_mut(a.start);
        (&mut r[..a.end - a.start], &mut l[b])
    }
}
