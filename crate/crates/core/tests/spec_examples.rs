use std::path::Path;
use std::process::Command;

use odapt::adapt::{
    auto_label, evaluate, run_fully_supervised, run_odapt, run_source_only, sample_sparse_frames, shuffle_labels, FullySupervisedConfig,
    NoiseModel, SourceBundle,
};
use odapt::boxes::{BBox, SLOTS};
use odapt::checkpoint;
use odapt::detector::{detector_quality, finetune_detector, train_detector, Detector, FrameRef, TrainConfig};
use odapt::harness::report::{self, ExperimentResult, ResultsFile, SeedResult, ALL, SCHEMA_VERSION};
use odapt::harness::{self, GenerateStatus, StudyConfig};
use odapt::nn::OptimizerKind;
use odapt::recognizer::{fit, pad_boxes, FitConfig, ObjectTokens, Recognizer, RecognizerConfig, Sample};
use odapt::synth::{generate_domain, Dataset, DomainSpec, SplitRatios};
use odapt::Error;

fn small_spec() -> DomainSpec {
    DomainSpec {
        frames: 4,
        size: 32,
        ..DomainSpec::kitchen_a()
    }
}

fn small_dataset() -> Dataset {
    generate_domain(&small_spec(), 2, SplitRatios::new(0.5, 0.0, 0.5).unwrap()).unwrap()
}

fn small_recognizer(encoder: bool) -> Recognizer {
    let cfg = RecognizerConfig {
        frames: 4,
        size: 32,
        patch: 8,
        dim: 16,
        depth: 2,
        heads: 2,
        encoder,
        ..RecognizerConfig::default()
    };
    Recognizer::new(cfg, 3).unwrap()
}

fn small_bundle() -> SourceBundle {
    SourceBundle {
        detector: Detector::new(32, 11).unwrap(),
        recognizer: small_recognizer(true),
    }
}

fn gt_boxes(clip: &odapt::synth::VideoClip) -> Vec<[BBox; SLOTS]> {
    (0..clip.t).map(|t| pad_boxes(&clip.boxes(t))).collect()
}

// --- recognizer ---

#[test]
fn logits_form_a_distribution_and_are_deterministic() {
    let ds = small_dataset();
    let rec = small_recognizer(true);
    let clip = &ds.test[0];
    let logits = rec.recognize(clip, &gt_boxes(clip)).unwrap();
    assert_eq!(logits.len(), 8);
    let m = logits.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
    let z: f64 = logits.iter().map(|&l| (l as f64 - m).exp()).sum();
    let total: f64 = logits.iter().map(|&l| (l as f64 - m).exp() / z).sum();
    assert!((total - 1.0).abs() <= 1e-6);
    assert_eq!(logits, rec.recognize(clip, &gt_boxes(clip)).unwrap());
}

#[test]
fn encoder_is_identity_at_init_and_per_token() {
    let rec = small_recognizer(true);
    let d = rec.cfg.dim;
    let values: Vec<f32> = (0..4 * SLOTS * d).map(|i| ((i * 37 % 101) as f32 / 50.0) - 1.0).collect();
    let x = ObjectTokens { t: 4, d, values };
    assert_eq!(rec.encode_objects(&x).unwrap(), x);

    // Away from init, equal inputs still give equal outputs.
    let mut moved = rec.clone();
    for (i, v) in moved.e.as_mut().unwrap().data_mut().iter_mut().enumerate() {
        *v += 0.05 * ((i % 7) as f32 - 3.0);
    }
    let mut y = x.clone();
    let first = y.token(0, 0).to_vec();
    y.values[(2 * SLOTS + 3) * d..(2 * SLOTS + 4) * d].copy_from_slice(&first);
    let out = moved.encode_objects(&y).unwrap();
    assert_ne!(out, y);
    assert_eq!(out.token(0, 0), out.token(2, 3));
}

#[test]
fn attach_appends_object_tokens_after_an_exact_prefix() {
    let cfg = RecognizerConfig {
        patch: 8,
        dim: 16,
        depth: 1,
        heads: 2,
        ..RecognizerConfig::default()
    };
    let rec = Recognizer::new(cfg, 1).unwrap();
    let spec = DomainSpec::kitchen_a();
    let ds = generate_domain(&spec, 1, SplitRatios::new(1.0, 0.0, 0.0).unwrap()).unwrap();
    let clip = &ds.train[0];
    let patches = rec.patch_sequence(clip).unwrap();
    assert_eq!(patches.len(), 513 * 16);
    let obj = odapt::recognizer::crop(&rec.feature_grid(clip).unwrap(), &gt_boxes(clip)).unwrap();
    let seq = rec.attach(&patches, &obj).unwrap();
    assert_eq!(seq.len(), 545 * 16);
    assert_eq!(seq[..patches.len()], patches[..]);
}

#[test]
fn one_training_step_changes_the_fingerprint() {
    let ds = small_dataset();
    let rec = small_recognizer(true);
    let samples: Vec<Sample<'_>> = ds.train.iter().take(2).map(Sample::with_gt_boxes).collect();
    let cfg = FitConfig {
        epochs: 1,
        batch_size: 2,
        ..FitConfig::default()
    };
    let (trained, _) = fit(&rec, &samples, &cfg).unwrap();
    assert_ne!(rec.fingerprint(), trained.fingerprint());
    // Same weights give the same digest, also via files on disk.
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
    checkpoint::save_recognizer(&a, &trained, true).unwrap();
    checkpoint::save_recognizer(&b, &trained.clone(), true).unwrap();
    assert_eq!(checkpoint::file_digest(&a).unwrap(), checkpoint::file_digest(&b).unwrap());
    assert_eq!(checkpoint::load_recognizer(&a).unwrap().0.fingerprint(), trained.fingerprint());
}

// --- detector ---

fn source_frames(ds: &Dataset) -> (Vec<&[f32]>, Vec<Vec<BBox>>) {
    let mut px = Vec::new();
    let mut boxes = Vec::new();
    for c in &ds.train {
        for t in 0..c.t {
            px.push(c.frame(t));
            boxes.push(c.boxes(t));
        }
    }
    (px, boxes)
}

fn refs<'a>(px: &[&'a [f32]], boxes: &'a [Vec<BBox>]) -> Vec<FrameRef<'a>> {
    px.iter().zip(boxes).map(|(p, b)| FrameRef { pixels: p, boxes: b }).collect()
}

#[test]
fn detector_training_lowers_the_loss_and_is_reproducible() {
    // 200 of 32 clips x 8 frames.
    let spec = DomainSpec {
        size: 32,
        ..DomainSpec::kitchen_a()
    };
    let ds = generate_domain(&spec, 5, SplitRatios::new(0.8, 0.0, 0.2).unwrap()).unwrap();
    let (px, boxes) = source_frames(&ds);
    let frames = refs(&px[..200], &boxes[..200]);
    let cfg = TrainConfig {
        learning_rate: 3e-4,
        epochs: 30,
        optimizer: OptimizerKind::Adam,
        warmup_epochs: 30,
        ..TrainConfig::default()
    };
    let (det, log) = train_detector(32, &frames, &cfg).unwrap();
    assert_eq!(log.epoch_loss.len(), 30);
    assert!(log.epoch_loss[29] < log.epoch_loss[0], "{:?}", log.epoch_loss);

    let short = TrainConfig { epochs: 2, ..cfg };
    let a = train_detector(32, &frames[..48], &short).unwrap().0;
    let b = train_detector(32, &frames[..48], &short).unwrap().0;
    assert_eq!(a.params.data(), b.params.data());
    assert_ne!(a.params.data(), det.params.data());
}

// --- adaptation ---

fn finetune_cfg(epochs: usize) -> TrainConfig {
    TrainConfig {
        learning_rate: 1e-4,
        epochs,
        optimizer: OptimizerKind::Adam,
        warmup_epochs: epochs,
        ..TrainConfig::default()
    }
}

#[test]
fn zero_epochs_reproduce_source_only_exactly() {
    let ds = small_dataset();
    let bundle = small_bundle();
    let src = run_source_only(&bundle, &ds).unwrap();
    assert_eq!(src, run_source_only(&bundle, &ds).unwrap());

    let aset = sample_sparse_frames(&ds, 4, 1).unwrap();
    let out = run_odapt(&bundle, &ds, &aset, &finetune_cfg(0)).unwrap();
    assert_eq!(out.accuracy, src);
    assert_eq!(out.detector.params.data(), bundle.detector.params.data());
    assert_eq!(out.fingerprint_before, out.fingerprint_after);

    let ids: Vec<String> = ds.train.iter().take(3).map(|c| c.clip_id.clone()).collect();
    let fs = FullySupervisedConfig {
        detector: finetune_cfg(0),
        recognizer: FitConfig {
            epochs: 0,
            ..FitConfig::default()
        },
    };
    assert_eq!(run_fully_supervised(&bundle, &ds, &ids, &fs).unwrap(), src);
}

#[test]
fn odapt_keeps_the_recognizer_frozen() {
    let ds = small_dataset();
    let bundle = small_bundle();
    let aset = sample_sparse_frames(&ds, 4, 2).unwrap();
    let out = run_odapt(&bundle, &ds, &aset, &finetune_cfg(2)).unwrap();
    assert_eq!(out.fingerprint_before, out.fingerprint_after);
    assert_eq!(out.fingerprint_before, bundle.recognizer.fingerprint());
    assert_ne!(out.detector.params.data(), bundle.detector.params.data());
    assert_eq!(out.accuracy, evaluate(&out.detector, &bundle.recognizer, &ds).unwrap());
}

#[test]
fn dropping_every_label_leaves_the_detector_unchanged() {
    let ds = small_dataset();
    let bundle = small_bundle();
    let aset = sample_sparse_frames(&ds, 8, 3).unwrap();
    let noise = NoiseModel {
        drop_prob: 1.0,
        ..NoiseModel::default()
    };
    let dropped = auto_label(&aset, &noise, 4).unwrap();
    assert!(dropped.entries.iter().all(|e| e.boxes.is_empty()));
    let frames = dropped.frames(&ds).unwrap();
    let (det, _) = finetune_detector(&bundle.detector, &frames, &finetune_cfg(3)).unwrap();
    let test: Vec<Vec<BBox>> = ds.test.iter().flat_map(|c| (0..c.t).map(move |t| c.boxes(t))).collect();
    let px: Vec<&[f32]> = ds.test.iter().flat_map(|c| (0..c.t).map(move |t| c.frame(t))).collect();
    let test = refs(&px, &test);
    assert_eq!(detector_quality(&det, &test).unwrap(), detector_quality(&bundle.detector, &test).unwrap());
}

#[test]
fn zero_noise_auto_labels_give_the_manual_result() {
    let ds = small_dataset();
    let bundle = small_bundle();
    let aset = sample_sparse_frames(&ds, 4, 5).unwrap();
    let auto = auto_label(&aset, &NoiseModel::default(), 6).unwrap();
    assert_eq!(auto, aset);
    let a = run_odapt(&bundle, &ds, &aset, &finetune_cfg(2)).unwrap();
    let b = run_odapt(&bundle, &ds, &auto, &finetune_cfg(2)).unwrap();
    assert_eq!(a.detector.params.data(), b.detector.params.data());
    assert_eq!(a.accuracy, b.accuracy);
}

#[test]
fn whole_budget_takes_one_frame_per_clip() {
    let ds = small_dataset();
    let n = ds.train.len();
    let aset = sample_sparse_frames(&ds, n, 9).unwrap();
    let mut ids: Vec<&str> = aset.entries.iter().map(|e| e.clip_id.as_str()).collect();
    ids.sort();
    let mut all: Vec<&str> = ds.train.iter().map(|c| c.clip_id.as_str()).collect();
    all.sort();
    assert_eq!(ids, all);
    assert!(matches!(sample_sparse_frames(&ds, 0, 9), Err(Error::InvalidArgument(_))));
}

#[test]
fn shuffled_labels_are_a_permutation() {
    let labels: Vec<usize> = (0..64).map(|i| i % 8).collect();
    let s = shuffle_labels(&labels, 3);
    assert_ne!(s, labels);
    let mut sorted = s.clone();
    sorted.sort();
    let mut expect = labels.clone();
    expect.sort();
    assert_eq!(sorted, expect);
    assert_eq!(s, shuffle_labels(&labels, 3));
}

// --- harness ---

fn tiny_study(root: &Path) -> StudyConfig {
    let text = format!(
        "domains = kitchen_a, kitchen_b\nclips_per_action = 2\nsplit = 0.5, 0.0, 0.5\n\
         domain.kitchen_a.frames = 4\ndomain.kitchen_a.size = 32\ndomain.kitchen_b.frames = 4\ndomain.kitchen_b.size = 32\n\
         recognizer.frames = 4\nrecognizer.size = 32\nrecognizer.patch = 8\n\
         data_root = {}\nout_dir = {}\n",
        root.join("data").display(),
        root.join("out").display()
    );
    StudyConfig::parse(&text).unwrap()
}

fn snapshot(dir: &Path) -> Vec<(std::path::PathBuf, Vec<u8>, std::time::SystemTime)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let m = std::fs::metadata(&p).unwrap().modified().unwrap();
                out.push((p.clone(), std::fs::read(&p).unwrap(), m));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn generate_is_idempotent_and_detects_missing_clips() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_study(tmp.path());
    let first = harness::cmd_generate(&cfg).unwrap();
    assert!(first.iter().all(|(_, s)| *s == GenerateStatus::Written));
    for id in ["kitchen_a", "kitchen_b"] {
        assert!(tmp.path().join("data").join(id).join("domain.json").is_file());
    }
    let before = snapshot(&tmp.path().join("data"));
    let second = harness::cmd_generate(&cfg).unwrap();
    assert!(second.iter().all(|(_, s)| *s == GenerateStatus::Unchanged));
    assert_eq!(before, snapshot(&tmp.path().join("data")));

    let victim = before.iter().find(|(p, _, _)| p.ends_with("frames.bin")).unwrap().0.clone();
    std::fs::remove_file(&victim).unwrap();
    let err = harness::cmd_generate(&cfg).unwrap_err();
    assert_ne!(harness::exit_code(&err), 0);

    // The binary reports the same failure as a nonzero exit.
    let cfg_path = tmp.path().join("study.cfg");
    std::fs::write(&cfg_path, cfg.to_text().unwrap()).unwrap();
    let status = Command::new(env!("CARGO_BIN_EXE_odapt"))
        .args(["generate", "--config"])
        .arg(&cfg_path)
        .output()
        .unwrap()
        .status;
    assert_eq!(status.code(), Some(harness::exit_code(&err)));
}

fn seed_row(seed: u64, src: f64, odapt: f64, fs: f64) -> SeedResult {
    SeedResult {
        seed,
        accuracy_source_only: src,
        accuracy_odapt: Some(odapt),
        accuracy_fully_supervised: Some(fs),
        accuracy_gt_boxes: Some(fs),
        ..SeedResult::default()
    }
}

fn two_direction_results() -> ResultsFile {
    let ab = ExperimentResult::from_seeds("matrix", "manual", "kitchen_a", "kitchen_b", 32, vec![seed_row(0, 0.25, 0.5, 0.625)], "d");
    let ba = ExperimentResult::from_seeds("matrix", "manual", "kitchen_b", "kitchen_a", 32, vec![seed_row(0, 0.375, 0.4375, 0.75)], "d");
    let mean = ExperimentResult::mean_of(&[ab.clone(), ba.clone()]).unwrap();
    let mut r = ResultsFile {
        schema_version: SCHEMA_VERSION,
        rows: Vec::new(),
    };
    r.replace(&["matrix"], vec![ab, ba, mean]);
    r
}

fn table_row<'a>(table: &'a str, name: &str) -> Vec<&'a str> {
    table
        .lines()
        .filter(|l| l.starts_with(&format!("| {name} |")))
        .map(|l| l.trim_matches('|').split('|').map(str::trim).collect::<Vec<_>>())
        .next()
        .unwrap()
}

#[test]
fn matrix_table_has_pair_columns_mean_and_exact_deltas() {
    let results = two_direction_results();
    let table = report::matrix_table(&results);
    let header = table_row(&table, "Method");
    assert_eq!(header, ["Method", "kitchen_a → kitchen_b", "kitchen_b → kitchen_a", "Mean"]);
    let src = table_row(&table, "Source-only");
    let odapt = table_row(&table, "ODAPT");
    let delta = table_row(&table, "Δ");
    let cells: Vec<&ExperimentResult> = results.rows_of("matrix").collect();
    for (col, c) in cells.iter().enumerate().map(|(i, c)| (i + 1, c)) {
        assert_eq!(src[col], report::pct(c.accuracy_source_only));
        assert_eq!(odapt[col], report::pct(c.accuracy_odapt.unwrap()));
        let d = c.accuracy_odapt.unwrap() - c.accuracy_source_only;
        assert_eq!(delta[col], format!("{:+.1}", 100.0 * d));
    }
    let mean = results.rows.iter().find(|r| r.source_domain == ALL).unwrap();
    assert_eq!(mean.delta_odapt, Some(mean.accuracy_odapt.unwrap() - mean.accuracy_source_only));
}

#[test]
fn report_is_deterministic_and_copies_fixture_values() {
    let tmp = tempfile::tempdir().unwrap();
    let fixture = ResultsFile {
        schema_version: SCHEMA_VERSION,
        rows: vec![ExperimentResult::from_seeds("matrix", "manual", "kitchen_a", "kitchen_b", 32, vec![seed_row(0, 0.125, 0.5, 0.75)], "d")],
    };
    let path = tmp.path().join("results.json");
    std::fs::write(&path, fixture.to_json().unwrap()).unwrap();
    let a = harness::cmd_report(&path, tmp.path()).unwrap();
    let b = harness::cmd_report(&path, tmp.path()).unwrap();
    assert_eq!(a, b);
    assert_eq!(std::fs::read_to_string(tmp.path().join("report.md")).unwrap(), a);
    assert_eq!(table_row(&a, "Source-only")[1], "12.5");
    assert_eq!(table_row(&a, "ODAPT")[1], "50.0");
    assert_eq!(table_row(&a, "Fully-supervised")[1], "75.0");
}

#[test]
fn empty_results_report_no_rows_and_exit_zero() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("results.json");
    let empty = ResultsFile {
        schema_version: SCHEMA_VERSION,
        rows: Vec::new(),
    };
    std::fs::write(&path, empty.to_json().unwrap()).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_odapt")).arg("report").arg(&path).arg("--out").arg(tmp.path()).output().unwrap();
    assert!(out.status.success());
    assert!(String::from_utf8(out.stdout).unwrap().contains("No rows"));

    let missing = Command::new(env!("CARGO_BIN_EXE_odapt")).arg("report").arg(tmp.path().join("nope.json")).output().unwrap();
    assert!(!missing.status.success());
}
