//! Balanced datasets and their on-disk layout.
//!
//! ```text
//! <root>/<domain_id>/domain.json
//! <root>/<domain_id>/manifest.json
//! <root>/<domain_id>/<split>/<clip_id>/frames.bin   u32 T,H,W,C (LE) + f32 LE values
//! <root>/<domain_id>/<split>/<clip_id>/meta.json
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::scene::{ActionSpec, NUM_ACTIONS};
use super::{render_clip, DomainSpec, GtBox, VideoClip};
use crate::error::{Error, Result};
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl SplitRatios {
    pub fn new(train: f64, val: f64, test: f64) -> Result<Self> {
        let r = Self { train, val, test };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::invalid(format!("split ratios {parts:?} must lie in [0, 1]")));
        }
        let sum: f64 = parts.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("split ratios sum to {sum}, not 1")));
        }
        Ok(())
    }

    /// Clips per action for (train, val, test).
    pub fn counts(&self, n: usize) -> (usize, usize, usize) {
        let train = (self.train * n as f64).round() as usize;
        let val = ((self.val * n as f64).round() as usize).min(n - train.min(n));
        (train.min(n), val, n - train.min(n) - val)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: DomainSpec,
    pub train: Vec<VideoClip>,
    pub val: Vec<VideoClip>,
    pub test: Vec<VideoClip>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[VideoClip] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn clip(&self, split: Split, clip_id: &str) -> Option<&VideoClip> {
        self.split(split).iter().find(|c| c.clip_id == clip_id)
    }
}

/// Seed of clip `index` of `action` in `split`.
pub(crate) fn clip_seed(spec: &DomainSpec, split: Split, action: usize, index: usize) -> u64 {
    seed::derive(spec.rng_seed, &[seed::tag(split.name()), action as u64, index as u64])
}

fn render_split(spec: &DomainSpec, split: Split, per_action: usize) -> Result<Vec<VideoClip>> {
    let jobs: Vec<(usize, usize)> = (0..NUM_ACTIONS).flat_map(|a| (0..per_action).map(move |i| (a, i))).collect();
    jobs.par_iter()
        .map(|&(action, index)| {
            let s = clip_seed(spec, split, action, index);
            let mut rng = seed::rng(s, &[seed::tag("motion")]);
            let spec_a = ActionSpec::sample(action, &mut rng);
            let mut clip = render_clip(spec, &spec_a, s)?;
            clip.clip_id = format!("{}-{}-a{}-{:04}", spec.domain_id, split.name(), action, index);
            Ok(clip)
        })
        .collect()
}

/// Renders a class-balanced dataset with disjoint splits.
pub fn generate_domain(spec: &DomainSpec, n_clips_per_action: usize, ratios: SplitRatios) -> Result<Dataset> {
    if n_clips_per_action == 0 {
        return Err(Error::invalid("n_clips_per_action must be >= 1"));
    }
    spec.validate()?;
    ratios.validate()?;
    let (tr, va, te) = ratios.counts(n_clips_per_action);
    Ok(Dataset {
        spec: spec.clone(),
        train: render_split(spec, Split::Train, tr)?,
        val: render_split(spec, Split::Val, va)?,
        test: render_split(spec, Split::Test, te)?,
    })
}

#[derive(Serialize, Deserialize)]
struct ClipMeta {
    clip_id: String,
    action_label: usize,
    gt_boxes: Vec<Vec<GtBox>>,
}

fn frames_bytes(c: &VideoClip) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + c.frames.len() * 4);
    for d in [c.t, c.h, c.w, 3] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in &c.frames {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn parse_frames(bytes: &[u8], path: &Path) -> Result<(usize, usize, usize, Vec<f32>)> {
    let corrupt = |detail: &str| Error::Corrupted {
        path: path.to_path_buf(),
        detail: detail.into(),
    };
    if bytes.len() < 16 {
        return Err(corrupt("truncated header"));
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[i * 4..i * 4 + 4].try_into().unwrap()) as usize;
    let (t, h, w, c) = (dim(0), dim(1), dim(2), dim(3));
    if c != 3 || bytes.len() != 16 + t * h * w * c * 4 {
        return Err(corrupt("payload does not match the shape header"));
    }
    let data = bytes[16..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Ok((t, h, w, data))
}

pub(crate) fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read(path: &Path, hint: &str) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingArtifact {
            path: path.to_path_buf(),
            hint: hint.into(),
        },
        _ => Error::io(path, e),
    })
}

/// File contents of a dataset keyed by path relative to the domain directory.
fn files(ds: &Dataset) -> Result<BTreeMap<String, Vec<u8>>> {
    let mut out = BTreeMap::new();
    out.insert("domain.json".to_string(), serde_json::to_vec_pretty(&ds.spec)?);
    for split in Split::ALL {
        for c in ds.split(split) {
            let dir = format!("{}/{}", split.name(), c.clip_id);
            let meta = ClipMeta {
                clip_id: c.clip_id.clone(),
                action_label: c.action_label,
                gt_boxes: c.gt_boxes.clone(),
            };
            out.insert(format!("{dir}/frames.bin"), frames_bytes(c));
            out.insert(format!("{dir}/meta.json"), serde_json::to_vec_pretty(&meta)?);
        }
    }
    Ok(out)
}

/// `relative path -> sha256` of every file of the dataset.
pub type Manifest = BTreeMap<String, String>;

impl Dataset {
    pub fn dir(root: &Path, domain_id: &str) -> PathBuf {
        root.join(domain_id)
    }

    pub fn manifest(&self) -> Result<Manifest> {
        Ok(files(self)?.into_iter().map(|(k, v)| (k, sha256_hex(&v))).collect())
    }

    /// Writes the dataset and its manifest under `<root>/<domain_id>/`.
    pub fn save(&self, root: &Path) -> Result<Manifest> {
        let dir = Self::dir(root, &self.spec.domain_id);
        let mut manifest = Manifest::new();
        for (rel, bytes) in files(self)? {
            write(&dir.join(&rel), &bytes)?;
            manifest.insert(rel, sha256_hex(&bytes));
        }
        write(&dir.join("manifest.json"), &serde_json::to_vec_pretty(&manifest)?)?;
        Ok(manifest)
    }

    pub fn read_manifest(root: &Path, domain_id: &str) -> Result<Manifest> {
        let path = Self::dir(root, domain_id).join("manifest.json");
        Ok(serde_json::from_slice(&read(&path, "run `odapt generate` to create the dataset")?)?)
    }

    /// Checks every manifest entry against the files on disk.
    pub fn verify(root: &Path, domain_id: &str) -> Result<Manifest> {
        let dir = Self::dir(root, domain_id);
        let manifest = Self::read_manifest(root, domain_id)?;
        let hint = format!("delete {} and re-run `odapt generate`", dir.display());
        for (rel, digest) in &manifest {
            let path = dir.join(rel);
            let bytes = read(&path, &hint)?;
            if &sha256_hex(&bytes) != digest {
                return Err(Error::Corrupted {
                    path,
                    detail: format!("hash mismatch; {hint}"),
                });
            }
        }
        Ok(manifest)
    }

    /// Loads a verified dataset.
    pub fn load(root: &Path, domain_id: &str) -> Result<Self> {
        let dir = Self::dir(root, domain_id);
        let manifest = Self::verify(root, domain_id)?;
        let spec: DomainSpec = serde_json::from_slice(&read(&dir.join("domain.json"), "")?)?;
        let mut ds = Dataset {
            spec,
            train: Vec::new(),
            val: Vec::new(),
            test: Vec::new(),
        };
        for rel in manifest.keys().filter(|k| k.ends_with("/meta.json")) {
            let split = match rel.split('/').next() {
                Some("train") => Split::Train,
                Some("val") => Split::Val,
                Some("test") => Split::Test,
                _ => continue,
            };
            let meta: ClipMeta = serde_json::from_slice(&read(&dir.join(rel), "")?)?;
            let fpath = dir.join(rel.replace("meta.json", "frames.bin"));
            let (t, h, w, frames) = parse_frames(&read(&fpath, "")?, &fpath)?;
            let clip = VideoClip {
                clip_id: meta.clip_id,
                frames,
                t,
                h,
                w,
                action_label: meta.action_label,
                gt_boxes: meta.gt_boxes,
            };
            match split {
                Split::Train => ds.train.push(clip),
                Split::Val => ds.val.push(clip),
                Split::Test => ds.test.push(clip),
            }
        }
        // Manifest order is lexicographic; restore generation order.
        let key = |c: &VideoClip| (c.action_label, c.clip_id.clone());
        ds.train.sort_by_key(key);
        ds.val.sort_by_key(key);
        ds.test.sort_by_key(key);
        Ok(ds)
    }
}
