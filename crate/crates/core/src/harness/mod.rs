//! The configuration-driven study: data generation, source training, the
//! adaptation matrix with its controls, and the two ablations.
//!
//! Every command writes into `out_dir`: the commands that run experiments
//! replace their own rows in `results.json` and write their tables; `report`
//! renders everything from `results.json` alone.

pub mod config;
pub mod report;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use sha2::{Digest, Sha256};

pub use config::{domain_preset, Pair, StudyConfig};
pub use report::{ExperimentResult, ResultsFile, SeedResult, SCHEMA_VERSION};

use crate::adapt::{
    auto_label, evaluate, evaluate_gt_boxes, map_frames_to_clips, run_fully_supervised, run_odapt, run_source_only,
    sample_sparse_frames, shuffle_labels, test_quality, AdaptationSet, NoiseModel, SourceBundle,
};
use crate::boxes::BBox;
use crate::checkpoint;
use crate::detector::{train_detector, Detector, FrameRef, TrainConfig};
use crate::error::{Error, Result};
use crate::recognizer::{train_source, Recognizer, RecognizerConfig, Sample};
use crate::seed;
use crate::synth::{generate_domain, Dataset, DomainSpec, Split};

/// Process exit code of an error: 2 config, 3 contract, 4 missing or
/// corrupted artifact, 1 anything else.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => 2,
        Error::Contract(_) => 3,
        Error::MissingArtifact { .. } | Error::Corrupted { .. } | Error::Schema { .. } => 4,
        _ => 1,
    }
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn in_pool<T: Send>(jobs: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Config(format!("cannot start {jobs} workers: {e}")))?;
    Ok(pool.install(f))
}

fn short_digest(v: &impl serde::Serialize) -> String {
    let json = serde_json::to_vec(v).expect("serializable");
    hex::encode(&Sha256::digest(&json)[..8])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GenerateStatus {
    Written,
    Unchanged,
}

/// Renders every domain's dataset under the data root. Existing datasets
/// are verified and left untouched when they match the config.
pub fn cmd_generate(cfg: &StudyConfig) -> Result<Vec<(String, GenerateStatus)>> {
    let root = cfg.data_root();
    let ratios = cfg.split_ratios()?;
    in_pool(cfg.jobs, || {
        cfg.domains
            .iter()
            .map(|spec| {
                let fresh = generate_domain(spec, cfg.clips_per_action, ratios)?;
                let dir = Dataset::dir(&root, &spec.domain_id);
                let status = if dir.join("manifest.json").exists() {
                    let on_disk = Dataset::verify(&root, &spec.domain_id)?;
                    if on_disk != fresh.manifest()? {
                        return Err(Error::Corrupted {
                            path: dir,
                            detail: "dataset differs from the configured domain; delete it and re-run `odapt generate`".into(),
                        });
                    }
                    GenerateStatus::Unchanged
                } else {
                    fresh.save(&root)?;
                    GenerateStatus::Written
                };
                eprintln!("generate {}: {status:?}", spec.domain_id);
                Ok((spec.domain_id.clone(), status))
            })
            .collect()
    })?
}

/// Loads datasets and caches trained source models for one config.
pub struct Study {
    pub cfg: StudyConfig,
    datasets: BTreeMap<String, Dataset>,
}

fn load_dataset(cfg: &StudyConfig, spec: &DomainSpec) -> Result<Dataset> {
    let root = cfg.data_root();
    let ds = Dataset::load(&root, &spec.domain_id)?;
    let (tr, va, te) = cfg.split_ratios()?.counts(cfg.clips_per_action);
    let n = crate::synth::NUM_ACTIONS;
    if &ds.spec != spec || (ds.train.len(), ds.val.len(), ds.test.len()) != (tr * n, va * n, te * n) {
        return Err(Error::Corrupted {
            path: Dataset::dir(&root, &spec.domain_id),
            detail: "dataset was generated from a different config; delete it and re-run `odapt generate`".into(),
        });
    }
    Ok(ds)
}

impl Study {
    /// Loads the datasets of every domain used by a pair.
    pub fn open(cfg: &StudyConfig) -> Result<Self> {
        cfg.validate()?;
        let mut datasets = BTreeMap::new();
        for p in &cfg.pairs {
            for id in [&p.source, &p.target] {
                if !datasets.contains_key(id) {
                    let spec = cfg.domain(id).expect("validated");
                    datasets.insert(id.clone(), load_dataset(cfg, spec)?);
                }
            }
        }
        Ok(Self { cfg: cfg.clone(), datasets })
    }

    pub fn dataset(&self, id: &str) -> &Dataset {
        &self.datasets[id]
    }

    fn sources(&self) -> Vec<String> {
        let mut s: Vec<String> = self.cfg.pairs.iter().map(|p| p.source.clone()).collect();
        s.sort();
        s.dedup();
        s
    }

    fn checkpoint_dir(&self) -> PathBuf {
        self.cfg.out_dir.join("checkpoints")
    }

    fn detector_path(&self, domain: &str, seed_v: u64) -> PathBuf {
        let key = short_digest(&(
            self.cfg.domain(domain),
            self.cfg.clips_per_action,
            &self.cfg.split,
            self.cfg.source_detector,
            self.cfg.detector_frame_stride,
        ));
        self.checkpoint_dir().join(domain).join(format!("detector-{key}")).join(format!("seed{seed_v}.ckpt"))
    }

    fn recognizer_path(&self, domain: &str, seed_v: u64, encoder: bool, shuffled: bool) -> PathBuf {
        let rcfg = RecognizerConfig {
            encoder,
            ..self.cfg.recognizer
        };
        let key = short_digest(&(self.cfg.domain(domain), self.cfg.clips_per_action, &self.cfg.split, rcfg, self.cfg.source_recognizer));
        let kind = if shuffled { "recognizer-shuffled" } else { "recognizer" };
        self.checkpoint_dir().join(domain).join(format!("{kind}-{key}")).join(format!("seed{seed_v}.ckpt"))
    }

    fn detector_config(&self, seed_v: u64) -> TrainConfig {
        TrainConfig {
            rng_seed: seed::derive(seed_v, &[seed::tag("source-detector")]),
            ..self.cfg.source_detector
        }
    }

    /// The source detector of `domain` for `seed`, trained on first use.
    pub fn source_detector(&self, domain: &str, seed_v: u64) -> Result<(Detector, String)> {
        let path = self.detector_path(domain, seed_v);
        if !path.exists() {
            let ds = self.dataset(domain);
            let clips = ds.split(Split::Train);
            let stride = self.cfg.detector_frame_stride;
            let boxes: Vec<Vec<BBox>> = clips.iter().flat_map(|c| (0..c.t).step_by(stride).map(move |t| c.boxes(t))).collect();
            let frames: Vec<FrameRef<'_>> = clips
                .iter()
                .flat_map(|c| (0..c.t).step_by(stride).map(move |t| c.frame(t)))
                .zip(&boxes)
                .map(|(pixels, b)| FrameRef { pixels, boxes: b })
                .collect();
            eprintln!("train detector {domain} seed {seed_v} on {} frames", frames.len());
            let (det, _) = train_detector(ds.spec.size, &frames, &self.detector_config(seed_v))?;
            checkpoint::save_detector(&path, &det, false)?;
        }
        let (det, _) = checkpoint::load_detector(&path)?;
        Ok((det, checkpoint::file_digest(&path)?))
    }

    /// The source recognizer of `domain` for `seed`, trained on ground-truth
    /// boxes on first use. `shuffled` permutes the training labels.
    pub fn source_recognizer(&self, domain: &str, seed_v: u64, encoder: bool, shuffled: bool) -> Result<(Recognizer, String)> {
        let path = self.recognizer_path(domain, seed_v, encoder, shuffled);
        if !path.exists() {
            let clips = self.dataset(domain).split(Split::Train);
            let mut samples: Vec<Sample<'_>> = clips.iter().map(Sample::with_gt_boxes).collect();
            if shuffled {
                let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
                for (s, l) in samples.iter_mut().zip(shuffle_labels(&labels, seed_v)) {
                    s.label = l;
                }
            }
            let rcfg = RecognizerConfig {
                encoder,
                ..self.cfg.recognizer
            };
            let fit = crate::recognizer::FitConfig {
                rng_seed: seed::derive(seed_v, &[seed::tag("source-recognizer")]),
                ..self.cfg.source_recognizer
            };
            eprintln!("train recognizer {domain} seed {seed_v} encoder={encoder} shuffled={shuffled}");
            let (rec, _) = train_source(rcfg, &samples, &fit)?;
            checkpoint::save_recognizer(&path, &rec, true)?;
        }
        let (rec, _) = checkpoint::load_recognizer(&path)?;
        Ok((rec, checkpoint::file_digest(&path)?))
    }

    pub fn bundle(&self, domain: &str, seed_v: u64, encoder: bool) -> Result<(SourceBundle, BTreeMap<String, String>)> {
        let (detector, dd) = self.source_detector(domain, seed_v)?;
        let (recognizer, rd) = self.source_recognizer(domain, seed_v, encoder, false)?;
        let hashes = BTreeMap::from([("detector.ckpt".to_string(), dd), ("recognizer.ckpt".to_string(), rd)]);
        Ok((SourceBundle { detector, recognizer }, hashes))
    }

    /// Trains every source model the given encoder modes need, in parallel.
    pub fn prepare(&self, encoders: &[bool], shuffled: bool) -> Result<()> {
        let mut jobs: Vec<(String, u64, Option<(bool, bool)>)> = Vec::new();
        for d in self.sources() {
            for &s in &self.cfg.seeds {
                jobs.push((d.clone(), s, None));
                for &e in encoders {
                    jobs.push((d.clone(), s, Some((e, false))));
                }
                if shuffled {
                    jobs.push((d.clone(), s, Some((self.cfg.encoder, true))));
                }
            }
        }
        in_pool(self.cfg.jobs, || {
            jobs.par_iter()
                .map(|(d, s, r)| match r {
                    None => self.source_detector(d, *s).map(|_| ()),
                    Some((e, sh)) => self.source_recognizer(d, *s, *e, *sh).map(|_| ()),
                })
                .collect::<Result<Vec<()>>>()
        })??;
        Ok(())
    }

    fn finetune_config(&self, seed_v: u64) -> TrainConfig {
        TrainConfig {
            rng_seed: seed::derive(seed_v, &[seed::tag("finetune")]),
            ..self.cfg.finetune
        }
    }

    fn adapt_seed(seed_v: u64) -> u64 {
        seed::derive(seed_v, &[seed::tag("adaptation-set")])
    }

    /// One ODAPT run; the recognizer fingerprint is checked and recorded.
    fn odapt_row(&self, bundle: &SourceBundle, target: &Dataset, aset: &AdaptationSet, seed_v: u64, base: &SeedResult) -> Result<SeedResult> {
        let out = run_odapt(bundle, target, aset, &self.finetune_config(seed_v))?;
        Ok(SeedResult {
            accuracy_odapt: Some(out.accuracy),
            detector_iou_adapted: Some(test_quality(&out.detector, target)?.mean_best_iou),
            fingerprint_before: Some(out.fingerprint_before),
            fingerprint_after: Some(out.fingerprint_after),
            checkpoints: {
                let mut c = base.checkpoints.clone();
                c.insert("adapted-detector".into(), out.detector.params.digest());
                c
            },
            ..base.clone()
        })
    }

    /// All seed results of one matrix cell: `(experiment, variant, pair, row)`.
    fn matrix_cell(&self, pair: &Pair, seed_v: u64) -> Result<Vec<(String, String, Pair, SeedResult)>> {
        let (bundle, hashes) = self.bundle(&pair.source, seed_v, self.cfg.encoder)?;
        let (source, target) = (self.dataset(&pair.source), self.dataset(&pair.target));
        let base = SeedResult {
            seed: seed_v,
            accuracy_source_only: run_source_only(&bundle, target)?,
            detector_iou_source: Some(test_quality(&bundle.detector, target)?.mean_best_iou),
            checkpoints: hashes.clone(),
            ..SeedResult::default()
        };
        let aset = sample_sparse_frames(target, self.cfg.n_t, Self::adapt_seed(seed_v))?;
        let mut main = self.odapt_row(&bundle, target, &aset, seed_v, &base)?;
        let fs_cfg = crate::adapt::FullySupervisedConfig {
            detector: TrainConfig {
                rng_seed: seed::derive(seed_v, &[seed::tag("supervised-detector")]),
                ..self.cfg.supervised.detector
            },
            recognizer: crate::recognizer::FitConfig {
                rng_seed: seed::derive(seed_v, &[seed::tag("supervised-recognizer")]),
                ..self.cfg.supervised.recognizer
            },
        };
        main.accuracy_fully_supervised = Some(run_fully_supervised(&bundle, target, &map_frames_to_clips(&aset)?, &fs_cfg)?);
        main.accuracy_gt_boxes = Some(evaluate_gt_boxes(&bundle.recognizer, target)?);
        eprintln!(
            "matrix {pair} seed {seed_v}: source-only {:.3} odapt {:.3} supervised {:.3}",
            base.accuracy_source_only,
            main.accuracy_odapt.unwrap_or(f64::NAN),
            main.accuracy_fully_supervised.unwrap_or(f64::NAN)
        );
        let mut rows = vec![("matrix".into(), "manual".into(), pair.clone(), main)];
        if !self.cfg.controls {
            return Ok(rows);
        }
        let same = Pair {
            source: pair.source.clone(),
            target: pair.source.clone(),
        };
        // No-gap control: annotated frames from the source domain itself.
        let src_base = SeedResult {
            seed: seed_v,
            accuracy_source_only: run_source_only(&bundle, source)?,
            detector_iou_source: Some(test_quality(&bundle.detector, source)?.mean_best_iou),
            checkpoints: hashes.clone(),
            ..SeedResult::default()
        };
        let src_aset = sample_sparse_frames(source, self.cfg.n_t, Self::adapt_seed(seed_v))?;
        rows.push(("control".into(), "source-frames".into(), same.clone(), self.odapt_row(&bundle, source, &src_aset, seed_v, &src_base)?));
        // Chance-level control: the recognizer trained on permuted labels.
        let (shuffled, sd) = self.source_recognizer(&pair.source, seed_v, self.cfg.encoder, true)?;
        let mut sh_hashes = hashes.clone();
        sh_hashes.insert("recognizer.ckpt".into(), sd);
        rows.push((
            "control".into(),
            "shuffled-labels".into(),
            same,
            SeedResult {
                seed: seed_v,
                accuracy_source_only: evaluate(&bundle.detector, &shuffled, source)?,
                checkpoints: sh_hashes,
                ..SeedResult::default()
            },
        ));
        // Simulated auto-labels, with the same sampled frames.
        let label_seed = seed::derive(seed_v, &[seed::tag("auto-label")]);
        let variants = [
            ("zero-noise", NoiseModel::default()),
            (
                "jitter-filter",
                NoiseModel {
                    filter_enabled: true,
                    ..self.cfg.auto_label
                },
            ),
            (
                "jitter",
                NoiseModel {
                    filter_enabled: false,
                    ..self.cfg.auto_label
                },
            ),
        ];
        for (name, noise) in variants {
            let labelled = auto_label(&aset, &noise, label_seed)?;
            rows.push(("auto-label".into(), name.into(), pair.clone(), self.odapt_row(&bundle, target, &labelled, seed_v, &base)?));
        }
        Ok(rows)
    }

    fn frames_cell(&self, pair: &Pair, seed_v: u64) -> Result<Vec<(usize, SeedResult)>> {
        let (bundle, hashes) = self.bundle(&pair.source, seed_v, self.cfg.encoder)?;
        let target = self.dataset(&pair.target);
        let base = SeedResult {
            seed: seed_v,
            accuracy_source_only: run_source_only(&bundle, target)?,
            detector_iou_source: Some(test_quality(&bundle.detector, target)?.mean_best_iou),
            checkpoints: hashes,
            ..SeedResult::default()
        };
        self.cfg
            .n_t_sweep
            .iter()
            .map(|&n| {
                let aset = sample_sparse_frames(target, n, Self::adapt_seed(seed_v))?;
                let row = self.odapt_row(&bundle, target, &aset, seed_v, &base)?;
                eprintln!("frames {pair} seed {seed_v} n_t {n}: {:.3}", row.accuracy_odapt.unwrap_or(f64::NAN));
                Ok((n, row))
            })
            .collect()
    }

    fn encoder_cell(&self, pair: &Pair, seed_v: u64, encoder: bool) -> Result<SeedResult> {
        let (bundle, hashes) = self.bundle(&pair.source, seed_v, encoder)?;
        let target = self.dataset(&pair.target);
        let base = SeedResult {
            seed: seed_v,
            accuracy_source_only: run_source_only(&bundle, target)?,
            checkpoints: hashes,
            ..SeedResult::default()
        };
        let aset = sample_sparse_frames(target, self.cfg.n_t, Self::adapt_seed(seed_v))?;
        let row = self.odapt_row(&bundle, target, &aset, seed_v, &base)?;
        eprintln!("encoder {pair} seed {seed_v} on={encoder}: {:.3}", row.accuracy_odapt.unwrap_or(f64::NAN));
        Ok(row)
    }

    fn cells(&self) -> Vec<(Pair, u64)> {
        self.cfg.pairs.iter().flat_map(|p| self.cfg.seeds.iter().map(move |&s| (p.clone(), s))).collect()
    }
}

fn group<K: Ord>(rows: impl IntoIterator<Item = (K, SeedResult)>) -> BTreeMap<K, Vec<SeedResult>> {
    let mut out: BTreeMap<K, Vec<SeedResult>> = BTreeMap::new();
    for (k, r) in rows {
        out.entry(k).or_default().push(r);
    }
    out
}

fn results_path(cfg: &StudyConfig) -> PathBuf {
    cfg.out_dir.join("results.json")
}

fn load_results(path: &Path) -> Result<ResultsFile> {
    match fs::read(path) {
        Ok(bytes) => ResultsFile::from_json(&bytes),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(ResultsFile::default()),
        Err(e) => Err(Error::io(path, e)),
    }
}

/// Merges rows into `results.json` and writes the resolved config next to it.
fn store(cfg: &StudyConfig, experiments: &[&str], rows: Vec<ExperimentResult>) -> Result<ResultsFile> {
    let path = results_path(cfg);
    let mut results = load_results(&path)?;
    results.replace(experiments, rows);
    write(&path, &results.to_json()?)?;
    write(&cfg.out_dir.join("study.cfg"), cfg.to_text()?.as_bytes())?;
    Ok(results)
}

/// Trains (or verifies cached) source detectors and recognizers.
pub fn cmd_train_source(cfg: &StudyConfig) -> Result<()> {
    let study = Study::open(cfg)?;
    study.prepare(&[cfg.encoder], false)
}

pub fn cmd_matrix(cfg: &StudyConfig) -> Result<ResultsFile> {
    let study = Study::open(cfg)?;
    study.prepare(&[cfg.encoder], cfg.controls)?;
    let cells = study.cells();
    let rows = in_pool(cfg.jobs, || {
        cells
            .par_iter()
            .map(|(p, s)| study.matrix_cell(p, *s))
            .collect::<Result<Vec<_>>>()
    })??;
    let grouped = group(rows.into_iter().flatten().map(|(e, v, p, r)| ((e, v, p), r)));
    let digest = cfg.digest();
    let mut out: Vec<ExperimentResult> = grouped
        .into_iter()
        .map(|((e, v, p), r)| ExperimentResult::from_seeds(&e, &v, &p.source, &p.target, cfg.n_t, r, &digest))
        .collect();
    let matrix: Vec<ExperimentResult> = out.iter().filter(|r| r.experiment == "matrix").cloned().collect();
    out.extend(ExperimentResult::mean_of(&matrix));
    let results = store(cfg, &["matrix", "control", "auto-label"], out)?;
    let table = format!("{}{}", report::matrix_table(&results), report::controls_table(&results));
    write(&cfg.out_dir.join("table.md"), table.as_bytes())?;
    Ok(results)
}

pub fn cmd_ablate_frames(cfg: &StudyConfig) -> Result<ResultsFile> {
    let study = Study::open(cfg)?;
    study.prepare(&[cfg.encoder], false)?;
    let cells = study.cells();
    let rows = in_pool(cfg.jobs, || {
        cells
            .par_iter()
            .map(|(p, s)| Ok(study.frames_cell(p, *s)?.into_iter().map(|(n, r)| ((p.clone(), n), r)).collect::<Vec<_>>()))
            .collect::<Result<Vec<_>>>()
    })??;
    let digest = cfg.digest();
    let out = group(rows.into_iter().flatten())
        .into_iter()
        .map(|((p, n), r)| ExperimentResult::from_seeds("frames", "manual", &p.source, &p.target, n, r, &digest))
        .collect();
    let results = store(cfg, &["frames"], out)?;
    write(&cfg.out_dir.join("frames.md"), report::frames_table(&results).as_bytes())?;
    write(&cfg.out_dir.join("frames.svg"), report::frames_svg(&results).as_bytes())?;
    Ok(results)
}

pub fn cmd_ablate_encoder(cfg: &StudyConfig) -> Result<ResultsFile> {
    let study = Study::open(cfg)?;
    study.prepare(&[true, false], false)?;
    let cells: Vec<(Pair, u64, bool)> = study.cells().into_iter().flat_map(|(p, s)| [(p.clone(), s, true), (p, s, false)]).collect();
    let rows = in_pool(cfg.jobs, || {
        cells
            .par_iter()
            .map(|(p, s, e)| Ok(((p.clone(), *e), study.encoder_cell(p, *s, *e)?)))
            .collect::<Result<Vec<_>>>()
    })??;
    let digest = cfg.digest();
    let out = group(rows)
        .into_iter()
        .map(|((p, e), r)| ExperimentResult::from_seeds("encoder", if e { "on" } else { "off" }, &p.source, &p.target, cfg.n_t, r, &digest))
        .collect();
    let results = store(cfg, &["encoder"], out)?;
    write(&cfg.out_dir.join("encoder.md"), report::encoder_table(&results).as_bytes())?;
    Ok(results)
}

/// Renders `report.md` (and the budget plot) next to the results file.
pub fn cmd_report(results_path: &Path, out_dir: &Path) -> Result<String> {
    let bytes = fs::read(results_path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingArtifact {
            path: results_path.to_path_buf(),
            hint: "run `odapt matrix` first".into(),
        },
        _ => Error::io(results_path, e),
    })?;
    let results = ResultsFile::from_json(&bytes)?;
    let text = report::render_report(&results);
    write(&out_dir.join("report.md"), text.as_bytes())?;
    if results.rows_of("frames").next().is_some() {
        write(&out_dir.join("frames.svg"), report::frames_svg(&results).as_bytes())?;
    }
    Ok(text)
}
