mod common;

use odapt::boxes::{iou, BBox, SLOTS};
use odapt::detector::Detector;
use odapt::recognizer::{Recognizer, RecognizerConfig};
use odapt::synth::VideoClip;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};

#[test]
fn iou_matches_raster_counting() {
    let err = common::iou_oracle_max_error(10_000, 1000, 1);
    assert!(err <= 1e-3, "{err}");
}

#[test]
fn iou_closed_form_agrees_with_raster() {
    let a = BBox::new(0.0, 0.0, 0.5, 0.5).unwrap();
    let b = BBox::new(0.25, 0.25, 0.75, 0.75).unwrap();
    assert!((iou(&a, &b) - 1.0 / 7.0).abs() < 1e-12);
    assert!((common::raster_iou(&a, &b, 1000) - 1.0 / 7.0).abs() < 1e-3);
}

#[test]
fn detector_loss_gradient_matches_central_differences() {
    let r = common::loss_gradient_check(500, 1e-5, 2);
    assert!(r.checked > 2000, "only {} probes checked", r.checked);
    assert!(r.skipped * 20 < r.checked, "{} skipped", r.skipped);
    assert!(r.max_rel_error <= 1e-4, "{}", r.max_rel_error);
    assert!(r.unmatched_box_grads_zero);
}

#[test]
fn crop_matches_dense_bilinear_oracle() {
    let (random, lattice) = common::crop_oracle_errors(100, 256, 3);
    assert!(random <= 0.02, "{random}");
    assert!(lattice <= 1e-5, "{lattice}");
}

#[test]
fn crop_is_linear_in_features() {
    assert!(common::crop_linearity_error(50, 4) <= 1e-6);
}

fn tiny_recognizer(slot_embedding: bool) -> Recognizer {
    let cfg = RecognizerConfig {
        frames: 2,
        size: 32,
        patch: 8,
        dim: 16,
        depth: 2,
        heads: 2,
        slot_embedding,
        ..RecognizerConfig::default()
    };
    let mut r = Recognizer::new(cfg, 5).unwrap();
    // Move E away from its identity initialization.
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
    if let Some(e) = r.e.as_mut() {
        for v in e.data_mut() {
            *v += rng.random_range(-0.1..0.1);
        }
    }
    r
}

fn random_clip(t: usize, size: usize, seed: u64) -> VideoClip {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    VideoClip {
        clip_id: "random".into(),
        frames: (0..t * size * size * 3).map(|_| rng.random_range(0.0..1.0)).collect(),
        t,
        h: size,
        w: size,
        action_label: 0,
        gt_boxes: vec![Vec::new(); t],
    }
}

#[test]
fn permuting_slots_without_slot_embedding_keeps_logits() {
    let rec = tiny_recognizer(false);
    let clip = random_clip(2, 32, 1);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
    let boxes: Vec<[BBox; SLOTS]> = (0..2).map(|_| std::array::from_fn(|_| common::random_box(&mut rng, 0.1))).collect();
    let permuted: Vec<[BBox; SLOTS]> = boxes.iter().map(|f| [f[2], f[0], f[3], f[1]]).collect();
    let (a, b) = (rec.recognize(&clip, &boxes).unwrap(), rec.recognize(&clip, &permuted).unwrap());
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() <= 1e-5, "{x} vs {y}");
    }
    // With slot embeddings the order matters.
    let rec = tiny_recognizer(true);
    let mut slot = rec.clone();
    for (i, v) in slot.g.get_mut(slot.g.layout().find("obj.slot").unwrap()).iter_mut().enumerate() {
        *v = (i as f32 * 0.37).sin();
    }
    let (a, b) = (slot.recognize(&clip, &boxes).unwrap(), slot.recognize(&clip, &permuted).unwrap());
    assert!(a.iter().zip(&b).any(|(x, y)| (x - y).abs() > 1e-5));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn decoded_boxes_are_always_valid(seed in any::<u64>(), scale in 0.1f32..50.0, bright in 0.0f32..1.0) {
        let mut det = Detector::new(16, seed).unwrap();
        for v in det.params.data_mut() {
            *v *= scale;
        }
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 7);
        let frame: Vec<f32> = (0..16 * 16 * 3).map(|_| bright * rng.random_range(0.0..1.0f32)).collect();
        for p in det.detect(&frame).unwrap() {
            let [x1, y1, x2, y2] = p.bbox.coords();
            prop_assert!(0.0 <= x1 && x1 < x2 && x2 <= 1.0);
            prop_assert!(0.0 <= y1 && y1 < y2 && y2 <= 1.0);
            prop_assert!(!p.logit.is_nan());
        }
    }

    #[test]
    fn iou_is_symmetric_and_bounded(a in 0.0f64..1.0, b in 0.0f64..1.0, c in 0.0f64..1.0, d in 0.0f64..1.0,
                                    e in 0.0f64..1.0, f in 0.0f64..1.0, g in 0.0f64..1.0, h in 0.0f64..1.0) {
        let p = BBox::clamped(a, b, c, d);
        let q = BBox::clamped(e, f, g, h);
        if let (Some(p), Some(q)) = (p, q) {
            let v = iou(&p, &q);
            prop_assert!((0.0..=1.0).contains(&v));
            prop_assert_eq!(v, iou(&q, &p));
            prop_assert!((iou(&p, &p) - 1.0).abs() < 1e-12);
        }
    }
}
