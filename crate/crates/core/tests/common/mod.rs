//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use odapt::boxes::{BBox, BoxPrediction, SLOTS};
use odapt::recognizer::FeatureGrid;
use rand::Rng;

/// Pixel centres of a `res`-pixel axis lying inside `[lo, hi)`, counted one
/// by one.
fn axis_count(lo: f64, hi: f64, res: usize) -> usize {
    (0..res).filter(|&i| {
        let c = (i as f64 + 0.5) / res as f64;
        c >= lo && c < hi
    })
    .count()
}

/// IoU by counting pixels of a `res x res` raster. Boxes are axis-aligned,
/// so the 2-D pixel count of a box (or of an intersection) is the product
/// of its per-axis counts.
pub fn raster_iou(a: &BBox, b: &BBox, res: usize) -> f64 {
    let [ax1, ay1, ax2, ay2] = a.coords();
    let [bx1, by1, bx2, by2] = b.coords();
    let area = |x1, y1, x2, y2| axis_count(x1, x2, res) * axis_count(y1, y2, res);
    let inter = if ax1.max(bx1) < ax2.min(bx2) && ay1.max(by1) < ay2.min(by2) {
        area(ax1.max(bx1), ay1.max(by1), ax2.min(bx2), ay2.min(by2))
    } else {
        0
    };
    let union = area(ax1, ay1, ax2, ay2) + area(bx1, by1, bx2, by2) - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Clamped bilinear interpolation of frame `t` of the grid at normalized
/// `(x, y)`; cell `j` has its centre at `(j + 0.5) / w`.
pub fn bilinear(grid: &FeatureGrid<f64>, t: usize, x: f64, y: f64) -> Vec<f64> {
    let (h, w, d) = (grid.h, grid.w, grid.d);
    let coord = |v: f64, n: usize| -> (usize, usize, f64) {
        let u = (v * n as f64 - 0.5).clamp(0.0, (n - 1) as f64);
        let i = (u.floor() as usize).min(n.saturating_sub(2));
        if n == 1 {
            (0, 0, 0.0)
        } else {
            (i, i + 1, u - i as f64)
        }
    };
    let (y0, y1, fy) = coord(y, h);
    let (x0, x1, fx) = coord(x, w);
    let at = |yy: usize, xx: usize, k: usize| grid.values[((t * h + yy) * w + xx) * d + k];
    (0..d)
        .map(|k| {
            (1.0 - fy) * ((1.0 - fx) * at(y0, x0, k) + fx * at(y0, x1, k)) + fy * ((1.0 - fx) * at(y1, x0, k) + fx * at(y1, x1, k))
        })
        .collect()
}

/// Mean of `s x s` bilinear samples at the centres of a regular
/// subdivision of the box.
pub fn dense_crop(grid: &FeatureGrid<f64>, t: usize, b: &BBox, s: usize) -> Vec<f64> {
    let [x1, y1, x2, y2] = b.coords();
    let mut acc = vec![0.0; grid.d];
    for i in 0..s {
        let y = y1 + (y2 - y1) * (i as f64 + 0.5) / s as f64;
        for j in 0..s {
            let x = x1 + (x2 - x1) * (j as f64 + 0.5) / s as f64;
            for (a, v) in acc.iter_mut().zip(bilinear(grid, t, x, y)) {
                *a += v;
            }
        }
    }
    acc.iter().map(|a| a / (s * s) as f64).collect()
}

pub fn random_box<R: Rng>(rng: &mut R, min_side: f64) -> BBox {
    loop {
        let (a, b) = (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0));
        let (c, d) = (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0));
        let (x1, x2) = (f64::min(a, b), f64::max(a, b));
        let (y1, y2) = (f64::min(c, d), f64::max(c, d));
        if x2 - x1 >= min_side && y2 - y1 >= min_side {
            return BBox::new(x1, y1, x2, y2).unwrap();
        }
    }
}

pub fn random_grid<R: Rng>(rng: &mut R, t: usize, h: usize, w: usize, d: usize) -> FeatureGrid<f64> {
    let values = (0..t * h * w * d).map(|_| rng.random_range(-1.0..1.0)).collect();
    FeatureGrid::new(t, h, w, d, values).unwrap()
}

pub fn random_preds<R: Rng>(rng: &mut R) -> [BoxPrediction; SLOTS] {
    std::array::from_fn(|_| BoxPrediction {
        bbox: random_box(rng, 0.02),
        logit: rng.random_range(-3.0..3.0),
    })
}

/// Largest |iou - raster oracle| over `pairs` random box pairs with corners
/// on the 1/`res` lattice, where pixel counting is exact.
pub fn iou_oracle_max_error(pairs: usize, res: usize, seed: u64) -> f64 {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut snapped = || loop {
        let mut c = [0usize; 4];
        for v in &mut c {
            *v = rng.random_range(0..=res);
        }
        let (x1, x2) = (c[0].min(c[1]), c[0].max(c[1]));
        let (y1, y2) = (c[2].min(c[3]), c[2].max(c[3]));
        if x1 < x2 && y1 < y2 {
            let r = res as f64;
            return BBox::new(x1 as f64 / r, y1 as f64 / r, x2 as f64 / r, y2 as f64 / r).unwrap();
        }
    };
    let mut worst: f64 = 0.0;
    for i in 0..pairs {
        let a = snapped();
        // Every fourth pair overlaps by construction.
        let b = if i % 4 == 0 {
            let [x1, y1, x2, y2] = a.coords();
            let s = |v: f64| ((v * res as f64).round() + 1.0).min(res as f64) / res as f64;
            BBox::new(x1, y1, s(x2), s(y2)).unwrap()
        } else {
            snapped()
        };
        worst = worst.max((odapt::boxes::iou(&a, &b) - raster_iou(&a, &b, res)).abs());
    }
    worst
}

pub struct LossGradCheck {
    pub max_rel_error: f64,
    pub checked: usize,
    pub skipped: usize,
    pub unmatched_box_grads_zero: bool,
}

/// Central differences (step `h`) of the detector loss against its
/// analytic gradient over random frames. Coordinates of matched slots and
/// all logits are checked; a probe whose perturbation changes the matching
/// is skipped, since the matching is held fixed within a step.
pub fn loss_gradient_check(frames: usize, h: f64, seed: u64) -> LossGradCheck {
    use odapt::boxes::{detector_loss, FrameTargets, DEFAULT_IOU_THRESHOLD as THR};
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut out = LossGradCheck {
        max_rel_error: 0.0,
        checked: 0,
        skipped: 0,
        unmatched_box_grads_zero: true,
    };
    for _ in 0..frames {
        let n_gt = rng.random_range(0..=SLOTS);
        let gts: Vec<BBox> = (0..n_gt).map(|_| random_box(&mut rng, 0.1)).collect();
        let mut preds = random_preds(&mut rng);
        for (k, g) in gts.iter().enumerate() {
            if rng.random_bool(0.7) {
                let [x1, y1, x2, y2] = g.coords();
                let mut j = || rng.random_range(-0.02..0.02);
                if let Some(b) = BBox::clamped(x1 + j(), y1 + j(), x2 + j(), y2 + j()) {
                    preds[k].bbox = b;
                }
            }
        }
        let loss = |p: &[BoxPrediction; SLOTS]| detector_loss(&[FrameTargets { preds: p, gts: &gts }], THR).unwrap();
        let base = loss(&preds);
        let m = &base.matches[0];
        for j in 0..SLOTS {
            if !m.indicators[j] && base.grad_boxes[0][j] != [0.0; 4] {
                out.unmatched_box_grads_zero = false;
            }
        }
        let mut kinks = 0;
        let mut probe = |perturb: &dyn Fn(&mut [BoxPrediction; SLOTS], f64) -> bool, analytic: f64| {
            let (mut up, mut dn) = (preds, preds);
            if !perturb(&mut up, h) || !perturb(&mut dn, -h) {
                out.skipped += 1;
                return;
            }
            let (lu, ld) = (loss(&up), loss(&dn));
            if lu.matches[0] != *m || ld.matches[0] != *m {
                out.skipped += 1;
                return;
            }
            let numeric = (lu.value - ld.value) / (2.0 * h);
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
            out.max_rel_error = out.max_rel_error.max(rel);
            out.checked += 1;
        };
        for j in 0..SLOTS {
            probe(
                &|p: &mut [BoxPrediction; SLOTS], d: f64| {
                    p[j].logit += d;
                    true
                },
                base.grad_logits[0][j],
            );
            if !m.indicators[j] {
                continue;
            }
            for c in 0..4 {
                // |x| has no derivative at its kink; a probe straddling it is skipped.
                let target = gts[m.assignment[j].unwrap()].coords()[c];
                if (preds[j].bbox.coords()[c] - target).abs() <= h {
                    kinks += 1;
                    continue;
                }
                probe(
                    &|p: &mut [BoxPrediction; SLOTS], d: f64| {
                        let mut v = p[j].bbox.coords();
                        v[c] += d;
                        match BBox::try_from(v) {
                            Ok(b) => {
                                p[j].bbox = b;
                                true
                            }
                            Err(_) => false,
                        }
                    },
                    base.grad_boxes[0][j][c],
                );
            }
        }
        out.skipped += kinks;
    }
    out
}

/// Largest per-component |crop - dense oracle| over random boxes, and over
/// boxes whose edges lie on cell centres or the frame border and span
/// 1/2, 1, 2 or all cells, where the oracle's sample lattice puts every
/// kink of the interpolant on a sample-cell boundary.
pub fn crop_oracle_errors(boxes: usize, samples: usize, seed: u64) -> (f64, f64) {
    use odapt::recognizer::crop;
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let (h, w, d) = (4, 4, 3);
    let grid = random_grid(&mut rng, 1, h, w, d);
    let err = |b: &BBox| -> f64 {
        let tok = crop(&grid, &[[*b; SLOTS]]).unwrap();
        let oracle = dense_crop(&grid, 0, b, samples);
        tok.token(0, 0).iter().zip(&oracle).map(|(a, o)| (a - o).abs()).fold(0.0, f64::max)
    };
    let random = (0..boxes).map(|_| err(&random_box(&mut rng, 0.05))).fold(0.0, f64::max);
    let knots = [0.0, 0.125, 0.375, 0.625, 0.875, 1.0];
    let span_ok = |a: f64, b: f64| [0.5, 1.0, 2.0, 4.0].contains(&((b - a) * 4.0));
    let mut lattice: f64 = 0.0;
    for &x1 in &knots {
        for &x2 in knots.iter().filter(|&&v| v > x1 && span_ok(x1, v)) {
            for &y1 in &knots {
                for &y2 in knots.iter().filter(|&&v| v > y1 && span_ok(y1, v)) {
                    lattice = lattice.max(err(&BBox::new(x1, y1, x2, y2).unwrap()));
                }
            }
        }
    }
    (random, lattice)
}

/// Largest |crop(aU + bV) - (a crop(U) + b crop(V))| over random inputs.
pub fn crop_linearity_error(trials: usize, seed: u64) -> f64 {
    use odapt::recognizer::crop;
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let (t, h, w, d) = (2, rng.random_range(1..6), rng.random_range(1..6), 4);
        let (u, v) = (random_grid(&mut rng, t, h, w, d), random_grid(&mut rng, t, h, w, d));
        let (a, b) = (rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
        let mix = FeatureGrid::new(t, h, w, d, u.values.iter().zip(&v.values).map(|(x, y)| a * x + b * y).collect()).unwrap();
        let boxes: Vec<[BBox; SLOTS]> = (0..t).map(|_| std::array::from_fn(|_| random_box(&mut rng, 0.0))).collect();
        let (cm, cu, cv) = (crop(&mix, &boxes).unwrap(), crop(&u, &boxes).unwrap(), crop(&v, &boxes).unwrap());
        for ((m, x), y) in cm.values.iter().zip(&cu.values).zip(&cv.values) {
            worst = worst.max((m - (a * x + b * y)).abs());
        }
    }
    worst
}
