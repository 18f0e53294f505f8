//! The study configuration and its flat `key = value` text format.
//!
//! Keys are dotted paths into [`StudyConfig`] (`finetune.epochs = 60`);
//! list values are comma separated. Domains are declared with
//! `domains = kitchen_a, kitchen_b` and tuned field by field with
//! `domain.<id>.<field> = value`. Lines starting with `#` are comments.

use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::adapt::{FullySupervisedConfig, NoiseModel};
use crate::detector::TrainConfig;
use crate::error::{Error, Result};
use crate::nn::{OptimizerKind, Schedule};
use crate::recognizer::{FitConfig, RecognizerConfig};
use crate::seed;
use crate::synth::{DomainSpec, SplitRatios};

/// A source -> target domain pair, written `source->target`.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Pair {
    pub source: String,
    pub target: String,
}

impl FromStr for Pair {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.split_once("->") {
            Some((a, b)) if !a.trim().is_empty() && !b.trim().is_empty() => Ok(Pair {
                source: a.trim().into(),
                target: b.trim().into(),
            }),
            _ => Err(Error::Config(format!("pair `{s}` must look like `source->target`"))),
        }
    }
}

impl TryFrom<String> for Pair {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Pair> for String {
    fn from(p: Pair) -> String {
        p.to_string()
    }
}

impl std::fmt::Display for Pair {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}->{}", self.source, self.target)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyConfig {
    pub domains: Vec<DomainSpec>,
    pub pairs: Vec<Pair>,
    pub seeds: Vec<u64>,
    /// Annotated target frames for the matrix and encoder ablation.
    pub n_t: usize,
    pub n_t_sweep: Vec<usize>,
    pub clips_per_action: usize,
    /// Train / val / test fractions.
    pub split: Vec<f64>,
    /// Encoder mode of the main study; the encoder ablation runs both.
    pub encoder: bool,
    /// Also run the no-gap, ground-truth-box, shuffled-label and
    /// auto-label controls in the matrix.
    pub controls: bool,
    pub recognizer: RecognizerConfig,
    pub source_detector: TrainConfig,
    /// Source detector training uses every k-th frame of each train clip.
    pub detector_frame_stride: usize,
    pub source_recognizer: FitConfig,
    pub finetune: TrainConfig,
    pub supervised: FullySupervisedConfig,
    /// Noise of the auto-label control; it is run with and without the filter.
    pub auto_label: NoiseModel,
    pub data_root: PathBuf,
    pub out_dir: PathBuf,
    pub jobs: usize,
}

impl Default for StudyConfig {
    fn default() -> Self {
        let source_detector = TrainConfig {
            learning_rate: 3e-4,
            epochs: 40,
            batch_size: 16,
            optimizer: OptimizerKind::Adam,
            warmup_epochs: 40,
            schedule: Schedule::Cosine,
            ..TrainConfig::default()
        };
        let finetune = TrainConfig {
            learning_rate: 5e-5,
            epochs: 240,
            batch_size: 16,
            optimizer: OptimizerKind::Adam,
            warmup_epochs: 240,
            ..TrainConfig::default()
        };
        Self {
            domains: vec![DomainSpec::kitchen_a(), DomainSpec::kitchen_b()],
            pairs: vec![Pair {
                source: "kitchen_a".into(),
                target: "kitchen_b".into(),
            }],
            seeds: vec![0, 1, 2],
            n_t: 32,
            n_t_sweep: vec![4, 8, 16, 32, 48, 64],
            clips_per_action: 100,
            split: vec![0.6, 0.1, 0.3],
            encoder: true,
            controls: true,
            recognizer: RecognizerConfig::default(),
            source_detector,
            detector_frame_stride: 4,
            source_recognizer: FitConfig {
                learning_rate: 1e-3,
                epochs: 16,
                batch_size: 16,
                rng_seed: 0,
                optimizer: OptimizerKind::Adam,
                box_jitter: 0.3,
            },
            finetune,
            supervised: FullySupervisedConfig {
                detector: TrainConfig {
                    learning_rate: 1e-4,
                    epochs: 30,
                    warmup_epochs: 30,
                    ..finetune
                },
                recognizer: FitConfig {
                    learning_rate: 1e-4,
                    epochs: 4,
                    batch_size: 16,
                    rng_seed: 0,
                    optimizer: OptimizerKind::Adam,
                    box_jitter: 0.3,
                },
            },
            auto_label: NoiseModel {
                jitter_sigma: 0.02,
                drop_prob: 0.0,
                spurious_prob: 0.1,
                filter_enabled: true,
            },
            data_root: PathBuf::from("data"),
            out_dir: PathBuf::from("out"),
            jobs: 1,
        }
    }
}

fn config_err(line: usize, msg: impl std::fmt::Display) -> Error {
    Error::Config(format!("line {line}: {msg}"))
}

/// Parses `raw` into the JSON type of `like`.
fn parse_like(like: &Value, raw: &str) -> std::result::Result<Value, String> {
    let raw = raw.trim();
    match like {
        Value::Bool(_) => match raw {
            "true" | "on" | "yes" => Ok(Value::Bool(true)),
            "false" | "off" | "no" => Ok(Value::Bool(false)),
            _ => Err(format!("expected on/off, got `{raw}`")),
        },
        Value::Number(n) => {
            if n.is_f64() {
                raw.parse::<f64>().map(Value::from).map_err(|_| format!("expected a number, got `{raw}`"))
            } else {
                raw.parse::<u64>().map(Value::from).map_err(|_| format!("expected a non-negative integer, got `{raw}`"))
            }
        }
        Value::String(_) => Ok(Value::String(raw.to_string())),
        Value::Array(items) => {
            let elem = items.first().cloned().unwrap_or(Value::String(String::new()));
            raw.split(',')
                .filter(|s| !s.trim().is_empty())
                .map(|s| parse_like(&elem, s))
                .collect::<std::result::Result<Vec<_>, _>>()
                .map(Value::Array)
        }
        Value::Null => match raw {
            "none" => Ok(Value::Null),
            _ => raw.parse::<u64>().map(Value::from).map_err(|_| format!("expected an integer or `none`, got `{raw}`")),
        },
        Value::Object(_) => Err("is a section, not a value".into()),
    }
}

fn set_path(root: &mut Value, path: &[&str], raw: &str) -> std::result::Result<(), String> {
    let mut node = root;
    for (i, key) in path.iter().enumerate() {
        let obj = node.as_object_mut().ok_or_else(|| format!("`{}` is not a section", path[..i].join(".")))?;
        node = obj.get_mut(*key).ok_or_else(|| format!("unknown key `{}`", path[..=i].join(".")))?;
    }
    // Integers stored as floats (`1e-3` style) keep their float type.
    let parsed = match (&*node, raw.trim().parse::<f64>()) {
        (Value::Number(n), Ok(v)) if n.is_f64() => Value::from(v),
        _ => parse_like(node, raw)?,
    };
    *node = parsed;
    Ok(())
}

/// A domain that is not a built-in preset starts from `kitchen_a` with its
/// own id and generator seed.
pub fn domain_preset(id: &str) -> DomainSpec {
    match id {
        "kitchen_a" => DomainSpec::kitchen_a(),
        "kitchen_b" => DomainSpec::kitchen_b(),
        other => DomainSpec {
            domain_id: other.into(),
            rng_seed: seed::tag(other),
            ..DomainSpec::kitchen_a()
        },
    }
}

impl StudyConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| config_err(i + 1, format!("expected `key = value`, got `{line}`")))?;
            lines.push((i + 1, k.trim().to_string(), v.trim().to_string()));
        }
        let mut cfg = Self::default();
        // The domain list comes first so later per-domain keys can refer to it.
        for (n, _, v) in lines.iter().filter(|l| l.1 == "domains") {
            let ids: Vec<&str> = v.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
            if ids.is_empty() {
                return Err(config_err(*n, "domains must not be empty"));
            }
            cfg.domains = ids.into_iter().map(domain_preset).collect();
        }
        let mut root = serde_json::to_value(&cfg)?;
        let mut domains: Vec<Value> = cfg.domains.iter().map(serde_json::to_value).collect::<std::result::Result<_, _>>()?;
        for (n, k, v) in &lines {
            if k == "domains" {
                continue;
            }
            let path: Vec<&str> = k.split('.').collect();
            if path[0] == "domain" {
                let (id, field) = match path.as_slice() {
                    [_, id, field] => (*id, *field),
                    _ => return Err(config_err(*n, format!("expected `domain.<id>.<field>`, got `{k}`"))),
                };
                if field == "domain_id" {
                    return Err(config_err(*n, "a domain id is set through `domains`"));
                }
                let slot = domains
                    .iter_mut()
                    .find(|d| d["domain_id"] == id)
                    .ok_or_else(|| config_err(*n, format!("domain `{id}` is not listed in `domains`")))?;
                set_path(slot, &[field], v).map_err(|e| config_err(*n, e))?;
            } else {
                if path[0] == "domains" {
                    return Err(config_err(*n, "domains are set with `domains = a, b`"));
                }
                set_path(&mut root, &path, v).map_err(|e| config_err(*n, e))?;
            }
        }
        root["domains"] = Value::Array(domains);
        let cfg: Self = serde_json::from_value(root).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::Config(format!("config file {} not found", path.display())),
            _ => Error::io(path, e),
        })?;
        Self::parse(&text)
    }

    /// The config in the text format; `parse(to_text())` round-trips.
    pub fn to_text(&self) -> Result<String> {
        let mut out = String::new();
        let ids: Vec<&str> = self.domains.iter().map(|d| d.domain_id.as_str()).collect();
        out += &format!("domains = {}\n", ids.join(", "));
        for d in &self.domains {
            if let Value::Object(m) = serde_json::to_value(d)? {
                for (k, v) in m.iter().filter(|(k, _)| *k != "domain_id") {
                    out += &format!("domain.{}.{} = {}\n", d.domain_id, k, scalar_text(v));
                }
            }
        }
        let mut root = serde_json::to_value(self)?;
        if let Value::Object(m) = &mut root {
            m.remove("domains");
        }
        flatten("", &root, &mut out);
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.domains.len() < 2 {
            return bad("a study needs at least 2 domains".into());
        }
        for d in &self.domains {
            d.validate()?;
            if (d.frames, d.size) != (self.recognizer.frames, self.recognizer.size) {
                return bad(format!(
                    "domain {} renders {}x{}px clips but the recognizer expects {}x{}px",
                    d.domain_id, d.frames, d.size, self.recognizer.frames, self.recognizer.size
                ));
            }
        }
        let mut ids: Vec<&str> = self.domains.iter().map(|d| d.domain_id.as_str()).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return bad("domain ids must be unique".into());
        }
        if self.pairs.is_empty() {
            return bad("pairs must not be empty".into());
        }
        for p in &self.pairs {
            for id in [&p.source, &p.target] {
                if self.domain(id).is_none() {
                    return bad(format!("pair {p} refers to undefined domain `{id}`"));
                }
            }
            if p.source == p.target {
                return bad(format!("pair {p} has no domain shift"));
            }
        }
        if self.seeds.is_empty() {
            return bad("seeds must not be empty".into());
        }
        if self.n_t == 0 || self.n_t_sweep.is_empty() || self.n_t_sweep.contains(&0) {
            return bad("n_t and every n_t_sweep value must be >= 1".into());
        }
        if self.clips_per_action == 0 || self.detector_frame_stride == 0 || self.jobs == 0 {
            return bad("clips_per_action, detector_frame_stride and jobs must be >= 1".into());
        }
        self.split_ratios()?;
        self.recognizer.validate()?;
        for t in [&self.source_detector, &self.finetune, &self.supervised.detector] {
            t.validate()?;
        }
        self.source_recognizer.validate()?;
        self.supervised.recognizer.validate()?;
        self.auto_label.validate().map_err(|e| Error::Config(e.to_string()))
    }

    pub fn split_ratios(&self) -> Result<SplitRatios> {
        match self.split.as_slice() {
            &[a, b, c] => SplitRatios::new(a, b, c).map_err(|e| Error::Config(e.to_string())),
            _ => Err(Error::Config("split needs three fractions: train, val, test".into())),
        }
    }

    pub fn domain(&self, id: &str) -> Option<&DomainSpec> {
        self.domains.iter().find(|d| d.domain_id == id)
    }

    /// Dataset root, overridable with `ODAPT_DATA_ROOT`.
    pub fn data_root(&self) -> PathBuf {
        std::env::var_os("ODAPT_DATA_ROOT").map(PathBuf::from).unwrap_or_else(|| self.data_root.clone())
    }

    /// Digest of everything that affects results (not paths or job count).
    pub fn digest(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Value::Object(m) = &mut v {
            for k in ["data_root", "out_dir", "jobs"] {
                m.remove(k);
            }
        }
        hex::encode(Sha256::digest(v.to_string().as_bytes()))
    }
}

fn scalar_text(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        Value::Bool(b) => if *b { "on" } else { "off" }.into(),
        Value::Null => "none".into(),
        Value::Array(items) => items.iter().map(scalar_text).collect::<Vec<_>>().join(", "),
        other => other.to_string(),
    }
}

fn flatten(prefix: &str, v: &Value, out: &mut String) {
    match v {
        Value::Object(m) => flatten_map(prefix, m, out),
        leaf => *out += &format!("{prefix} = {}\n", scalar_text(leaf)),
    }
}

fn flatten_map(prefix: &str, m: &Map<String, Value>, out: &mut String) {
    for (k, v) in m {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        flatten(&key, v, out);
    }
}
