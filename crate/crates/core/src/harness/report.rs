//! `results.json` and everything rendered from it.
//!
//! Renderers only format numbers stored in the results file; the one
//! computation they perform is the Δ arithmetic of the tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

/// The pseudo-pair holding means over all pairs of a matrix run.
pub const ALL: &str = "mean";

/// One seed of one experiment cell.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub accuracy_source_only: f64,
    pub accuracy_odapt: Option<f64>,
    pub accuracy_fully_supervised: Option<f64>,
    pub accuracy_gt_boxes: Option<f64>,
    pub detector_iou_source: Option<f64>,
    pub detector_iou_adapted: Option<f64>,
    pub fingerprint_before: Option<String>,
    pub fingerprint_after: Option<String>,
    /// Content hashes of the checkpoint files used, by file name.
    pub checkpoints: BTreeMap<String, String>,
}

/// Seed means of one (experiment, variant, pair, n_t) cell.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    /// `matrix`, `control`, `auto-label`, `frames` or `encoder`.
    pub experiment: String,
    pub variant: String,
    pub source_domain: String,
    pub target_domain: String,
    pub n_t: usize,
    pub seeds: Vec<u64>,
    pub accuracy_source_only: f64,
    pub accuracy_odapt: Option<f64>,
    pub accuracy_fully_supervised: Option<f64>,
    pub accuracy_gt_boxes: Option<f64>,
    pub delta_odapt: Option<f64>,
    pub delta_fully_supervised: Option<f64>,
    pub detector_iou_source: Option<f64>,
    pub detector_iou_adapted: Option<f64>,
    pub per_seed: Vec<SeedResult>,
    pub config_digest: String,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

fn mean_opt<'a>(rows: &'a [SeedResult], f: impl Fn(&'a SeedResult) -> Option<f64>) -> Option<f64> {
    let vals: Option<Vec<f64>> = rows.iter().map(f).collect();
    vals.filter(|v| !v.is_empty()).map(|v| mean(v.into_iter()))
}

impl ExperimentResult {
    /// Aggregates per-seed results into a cell.
    pub fn from_seeds(
        experiment: &str,
        variant: &str,
        source: &str,
        target: &str,
        n_t: usize,
        mut per_seed: Vec<SeedResult>,
        config_digest: &str,
    ) -> Self {
        per_seed.sort_by_key(|s| s.seed);
        let src = mean(per_seed.iter().map(|s| s.accuracy_source_only));
        let odapt = mean_opt(&per_seed, |s| s.accuracy_odapt);
        let fs = mean_opt(&per_seed, |s| s.accuracy_fully_supervised);
        Self {
            experiment: experiment.into(),
            variant: variant.into(),
            source_domain: source.into(),
            target_domain: target.into(),
            n_t,
            seeds: per_seed.iter().map(|s| s.seed).collect(),
            accuracy_source_only: src,
            accuracy_odapt: odapt,
            accuracy_fully_supervised: fs,
            accuracy_gt_boxes: mean_opt(&per_seed, |s| s.accuracy_gt_boxes),
            delta_odapt: odapt.map(|a| a - src),
            delta_fully_supervised: fs.map(|a| a - src),
            detector_iou_source: mean_opt(&per_seed, |s| s.detector_iou_source),
            detector_iou_adapted: mean_opt(&per_seed, |s| s.detector_iou_adapted),
            per_seed,
            config_digest: config_digest.into(),
        }
    }

    /// Means over several cells, as the [`ALL`] pseudo-pair.
    pub fn mean_of(cells: &[ExperimentResult]) -> Option<Self> {
        let first = cells.first()?;
        let m = |f: &dyn Fn(&ExperimentResult) -> Option<f64>| -> Option<f64> {
            let v: Option<Vec<f64>> = cells.iter().map(f).collect();
            v.map(|v| mean(v.into_iter()))
        };
        let src = mean(cells.iter().map(|c| c.accuracy_source_only));
        let odapt = m(&|c| c.accuracy_odapt);
        let fs = m(&|c| c.accuracy_fully_supervised);
        Some(Self {
            experiment: first.experiment.clone(),
            variant: first.variant.clone(),
            source_domain: ALL.into(),
            target_domain: ALL.into(),
            n_t: first.n_t,
            seeds: first.seeds.clone(),
            accuracy_source_only: src,
            accuracy_odapt: odapt,
            accuracy_fully_supervised: fs,
            accuracy_gt_boxes: m(&|c| c.accuracy_gt_boxes),
            delta_odapt: odapt.map(|a| a - src),
            delta_fully_supervised: fs.map(|a| a - src),
            detector_iou_source: m(&|c| c.detector_iou_source),
            detector_iou_adapted: m(&|c| c.detector_iou_adapted),
            per_seed: Vec::new(),
            config_digest: first.config_digest.clone(),
        })
    }

    fn key(&self) -> (String, String, bool, String, String, usize) {
        let is_mean = self.source_domain == ALL;
        (
            self.experiment.clone(),
            self.variant.clone(),
            is_mean,
            self.source_domain.clone(),
            self.target_domain.clone(),
            self.n_t,
        )
    }

    pub fn pair_label(&self) -> String {
        if self.source_domain == ALL {
            "Mean".into()
        } else {
            format!("{} → {}", self.source_domain, self.target_domain)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultsFile {
    pub schema_version: u32,
    pub rows: Vec<ExperimentResult>,
}

impl Default for ResultsFile {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            rows: Vec::new(),
        }
    }
}

impl ResultsFile {
    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        #[derive(Deserialize)]
        struct Probe {
            schema_version: u32,
        }
        let probe: Probe = serde_json::from_slice(bytes)?;
        if probe.schema_version != SCHEMA_VERSION {
            return Err(Error::Schema {
                found: probe.schema_version,
                expected: SCHEMA_VERSION,
            });
        }
        Ok(serde_json::from_slice(bytes)?)
    }

    pub fn to_json(&self) -> Result<Vec<u8>> {
        let mut out = serde_json::to_vec_pretty(self)?;
        out.push(b'\n');
        Ok(out)
    }

    /// Replaces all rows of the given experiments with `rows`, keeping the
    /// file sorted.
    pub fn replace(&mut self, experiments: &[&str], rows: Vec<ExperimentResult>) {
        self.rows.retain(|r| !experiments.contains(&r.experiment.as_str()));
        self.rows.extend(rows);
        self.rows.sort_by_key(|r| r.key());
    }

    pub fn rows_of<'a>(&'a self, experiment: &'a str) -> impl Iterator<Item = &'a ExperimentResult> + 'a {
        self.rows.iter().filter(move |r| r.experiment == experiment)
    }
}

pub fn pct(v: f64) -> String {
    format!("{:.1}", 100.0 * v)
}

fn signed_pct(v: f64) -> String {
    format!("{:+.1}", 100.0 * v)
}

fn opt_pct(v: Option<f64>) -> String {
    v.map_or("–".into(), pct)
}

fn table(out: &mut String, header: &[String], rows: &[Vec<String>]) {
    let _ = writeln!(out, "| {} |", header.join(" | "));
    let _ = writeln!(out, "|{}", "---|".repeat(header.len()));
    for r in rows {
        let _ = writeln!(out, "| {} |", r.join(" | "));
    }
    out.push('\n');
}

/// The adaptation table: one column per pair plus the mean, with Δ rows.
pub fn matrix_table(results: &ResultsFile) -> String {
    let cells: Vec<&ExperimentResult> = results.rows_of("matrix").collect();
    let mut out = String::from("## Adaptation matrix\n\nTop-1 accuracy (%) on the target test split, mean over seeds.\n\n");
    if cells.is_empty() {
        out += "No matrix rows.\n\n";
        return out;
    }
    let mut header = vec!["Method".to_string()];
    header.extend(cells.iter().map(|c| c.pair_label()));
    let row = |name: &str, f: &dyn Fn(&ExperimentResult) -> String| {
        let mut r = vec![name.to_string()];
        r.extend(cells.iter().map(|c| f(c)));
        r
    };
    let delta = |v: Option<f64>, base: f64| v.map_or("–".into(), |v| signed_pct(v - base));
    let rows = vec![
        row("Source-only", &|c| pct(c.accuracy_source_only)),
        row("ODAPT", &|c| opt_pct(c.accuracy_odapt)),
        row("Δ", &|c| delta(c.accuracy_odapt, c.accuracy_source_only)),
        row("Fully-supervised", &|c| opt_pct(c.accuracy_fully_supervised)),
        row("Δ", &|c| delta(c.accuracy_fully_supervised, c.accuracy_source_only)),
        row("Ground-truth boxes", &|c| opt_pct(c.accuracy_gt_boxes)),
    ];
    table(&mut out, &header, &rows);
    out += &format!("n_t = {}, seeds = {:?}\n\n", cells[0].n_t, cells[0].seeds);
    out
}

/// Controls and auto-label variants, one row each.
pub fn controls_table(results: &ResultsFile) -> String {
    let mut out = String::from("## Controls\n\n");
    let cells: Vec<&ExperimentResult> = results.rows_of("control").chain(results.rows_of("auto-label")).collect();
    if cells.is_empty() {
        out += "No control rows.\n\n";
        return out;
    }
    let header = ["Experiment", "Variant", "Pair", "Baseline", "Adapted", "Δ"].map(String::from);
    let rows: Vec<Vec<String>> = cells
        .iter()
        .map(|c| {
            vec![
                c.experiment.clone(),
                c.variant.clone(),
                c.pair_label(),
                pct(c.accuracy_source_only),
                opt_pct(c.accuracy_odapt),
                c.accuracy_odapt.map_or("–".into(), |a| signed_pct(a - c.accuracy_source_only)),
            ]
        })
        .collect();
    table(&mut out, &header, &rows);
    out
}

pub fn frames_table(results: &ResultsFile) -> String {
    let mut out = String::from("## Annotation budget\n\nODAPT accuracy (%) by number of annotated target frames, mean over seeds.\n\n");
    let cells: Vec<&ExperimentResult> = results.rows_of("frames").collect();
    if cells.is_empty() {
        out += "No budget rows.\n\n";
        return out;
    }
    let header = ["Pair", "n_t", "Source-only", "ODAPT", "Δ"].map(String::from);
    let rows: Vec<Vec<String>> = cells
        .iter()
        .map(|c| {
            vec![
                c.pair_label(),
                c.n_t.to_string(),
                pct(c.accuracy_source_only),
                opt_pct(c.accuracy_odapt),
                c.accuracy_odapt.map_or("–".into(), |a| signed_pct(a - c.accuracy_source_only)),
            ]
        })
        .collect();
    table(&mut out, &header, &rows);
    out
}

pub fn encoder_table(results: &ResultsFile) -> String {
    let mut out = String::from("## Object encoder\n\nODAPT accuracy (%) with the object encoder on and replaced by the identity.\n\n");
    let cells: Vec<&ExperimentResult> = results.rows_of("encoder").collect();
    if cells.is_empty() {
        out += "No encoder rows.\n\n";
        return out;
    }
    let header = ["Pair", "Encoder", "Source-only", "ODAPT", "Δ"].map(String::from);
    let rows: Vec<Vec<String>> = cells
        .iter()
        .map(|c| {
            vec![
                c.pair_label(),
                c.variant.clone(),
                pct(c.accuracy_source_only),
                opt_pct(c.accuracy_odapt),
                c.accuracy_odapt.map_or("–".into(), |a| signed_pct(a - c.accuracy_source_only)),
            ]
        })
        .collect();
    table(&mut out, &header, &rows);
    out
}

fn per_seed_table(results: &ResultsFile) -> String {
    let mut out = String::from("## Per-seed results\n\n");
    let header = ["Experiment", "Variant", "Pair", "n_t", "Seed", "Source-only", "ODAPT", "Fully-sup.", "GT boxes"].map(String::from);
    let rows: Vec<Vec<String>> = results
        .rows
        .iter()
        .flat_map(|c| {
            c.per_seed.iter().map(move |s| {
                vec![
                    c.experiment.clone(),
                    c.variant.clone(),
                    c.pair_label(),
                    c.n_t.to_string(),
                    s.seed.to_string(),
                    pct(s.accuracy_source_only),
                    opt_pct(s.accuracy_odapt),
                    opt_pct(s.accuracy_fully_supervised),
                    opt_pct(s.accuracy_gt_boxes),
                ]
            })
        })
        .collect();
    if rows.is_empty() {
        out += "No rows.\n\n";
    } else {
        table(&mut out, &header, &rows);
    }
    out
}

/// The full report; a pure function of the results.
pub fn render_report(results: &ResultsFile) -> String {
    let mut out = format!("# ODAPT study report\n\nResults schema version {}.\n\n", results.schema_version);
    if results.rows.is_empty() {
        out += "## No rows\n\nThe results file contains no experiment rows.\n";
        return out;
    }
    out += &matrix_table(results);
    out += &controls_table(results);
    out += &frames_table(results);
    if results.rows_of("frames").next().is_some() {
        out += "![accuracy vs annotated frames](frames.svg)\n\n";
    }
    out += &encoder_table(results);
    out += &per_seed_table(results);
    out
}

/// Accuracy-vs-budget line plot, one line per pair.
pub fn frames_svg(results: &ResultsFile) -> String {
    let (w, h, m) = (480.0, 320.0, 48.0);
    let mut series: BTreeMap<String, Vec<(usize, f64)>> = BTreeMap::new();
    for c in results.rows_of("frames") {
        if let Some(a) = c.accuracy_odapt {
            series.entry(c.pair_label()).or_default().push((c.n_t, a));
        }
    }
    let max_n = series.values().flatten().map(|p| p.0).max().unwrap_or(1).max(1) as f64;
    let x = |n: f64| m + (w - 2.0 * m) * n / max_n;
    let y = |a: f64| h - m - (h - 2.0 * m) * a;
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\" font-family=\"sans-serif\" font-size=\"11\">\n"
    );
    s += &format!("<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n");
    s += &format!(
        "<line x1=\"{m}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n<line x1=\"{m}\" y1=\"{m}\" x2=\"{m}\" y2=\"{}\" stroke=\"black\"/>\n",
        h - m,
        w - m,
        h - m,
        h - m
    );
    for k in 0..=4 {
        let a = k as f64 / 4.0;
        s += &format!("<text x=\"{}\" y=\"{:.1}\" text-anchor=\"end\">{}</text>\n", m - 4.0, y(a) + 4.0, pct(a));
    }
    let ticks: std::collections::BTreeSet<usize> = series.values().flatten().map(|p| p.0).collect();
    for n in ticks {
        s += &format!("<text x=\"{:.1}\" y=\"{}\" text-anchor=\"middle\">{n}</text>\n", x(n as f64), h - m + 14.0);
    }
    s += &format!("<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">annotated target frames</text>\n", w / 2.0, h - 8.0);
    s += &format!("<text x=\"12\" y=\"{}\" transform=\"rotate(-90 12 {})\" text-anchor=\"middle\">top-1 accuracy (%)</text>\n", h / 2.0, h / 2.0);
    const COLORS: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];
    for (i, (label, pts)) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let path: Vec<String> = pts.iter().map(|&(n, a)| format!("{:.1},{:.1}", x(n as f64), y(a))).collect();
        s += &format!("<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>\n", path.join(" "));
        for &(n, a) in pts {
            s += &format!("<circle cx=\"{:.1}\" cy=\"{:.1}\" r=\"3\" fill=\"{color}\"/>\n", x(n as f64), y(a));
        }
        s += &format!("<text x=\"{}\" y=\"{}\" fill=\"{color}\">{label}</text>\n", m + 8.0, m + 14.0 * (i as f64 + 1.0));
    }
    s += "</svg>\n";
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seed_row(seed: u64, src: f64, odapt: f64) -> SeedResult {
        SeedResult {
            seed,
            accuracy_source_only: src,
            accuracy_odapt: Some(odapt),
            ..SeedResult::default()
        }
    }

    #[test]
    fn cell_means_and_deltas() {
        let c = ExperimentResult::from_seeds("matrix", "manual", "a", "b", 32, vec![seed_row(1, 0.2, 0.5), seed_row(0, 0.4, 0.5)], "d");
        assert_eq!(c.seeds, vec![0, 1]);
        assert!((c.accuracy_source_only - 0.3).abs() < 1e-12);
        assert!((c.delta_odapt.unwrap() - 0.2).abs() < 1e-12);
        assert_eq!(c.accuracy_fully_supervised, None);
    }

    #[test]
    fn schema_mismatch_is_versioned() {
        let bytes = br#"{"schema_version": 99, "rows": []}"#;
        assert!(matches!(ResultsFile::from_json(bytes), Err(Error::Schema { found: 99, expected: SCHEMA_VERSION })));
    }

    #[test]
    fn empty_results_render_no_rows() {
        let r = render_report(&ResultsFile::default());
        assert!(r.contains("No rows"));
    }
}
