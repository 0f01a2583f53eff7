//! Flat CSV tables, one per figure family. Floats use Rust's shortest
//! round-trip formatting; missing values are empty fields.

use std::path::{Path, PathBuf};

use crate::concept_space::ActiveConceptSet;
use crate::error::{Error, Result};

use super::report::{write_atomically, AnalysisReport, PairReport, REPORT_FILE, SWEEP_REPORT_FILE};
use super::sweep::SweepReport;

pub const ACTIVE_COUNTS: &str = "active_counts.csv";
pub const DELETION: &str = "deletion.csv";
pub const REGAINED: &str = "regained.csv";
pub const TRAJECTORIES: &str = "trajectories.csv";
pub const DECODABILITY: &str = "decodability.csv";
pub const TAXONOMY: &str = "taxonomy.csv";
pub const PROBE_PANELS: &str = "probe_panels.csv";
pub const MONOSEMANTICITY: &str = "monosemanticity.csv";
pub const SWEEP_SUMMARY: &str = "sweep_summary.csv";

const VARIANTS: [&str; 3] = ["anchor", "raw_after", "translated"];

fn num(v: f64) -> String {
    format!("{v}")
}

fn opt(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

fn opt_bool(v: Option<bool>) -> String {
    v.map(|b| b.to_string()).unwrap_or_default()
}

struct Table {
    name: &'static str,
    writer: csv::Writer<Vec<u8>>,
}

impl Table {
    fn new(name: &'static str, header: &[&str]) -> Result<Self> {
        let mut t = Self {
            name,
            writer: csv::Writer::from_writer(Vec::new()),
        };
        t.row(header.iter().map(|s| s.to_string()))?;
        Ok(t)
    }

    fn row(&mut self, fields: impl IntoIterator<Item = String>) -> Result<()> {
        let fields: Vec<String> = fields.into_iter().collect();
        self.writer
            .write_record(&fields)
            .map_err(|e| Error::schema(self.name, e.to_string()))
    }

    fn finish(self) -> Result<(String, Vec<u8>)> {
        let bytes = self
            .writer
            .into_inner()
            .map_err(|e| Error::schema(self.name, e.to_string()))?;
        Ok((self.name.to_owned(), bytes))
    }
}

fn sets(p: &PairReport) -> [&ActiveConceptSet; 3] {
    [
        &p.active_sets.anchor,
        &p.active_sets.raw_after,
        &p.active_sets.translated,
    ]
}

/// Fraction of anchor-active concepts missing from `other`.
fn deletion_against(anchor: &ActiveConceptSet, other: &ActiveConceptSet) -> Option<f64> {
    if anchor.is_empty() {
        return None;
    }
    let missing = anchor.indices.iter().filter(|&&k| !other.contains(k)).count();
    Some(missing as f64 / anchor.len() as f64)
}

fn ids(p: &PairReport) -> [String; 2] {
    [p.task_id.to_string(), p.checkpoint_id.to_string()]
}

/// Builds every plot table for an analysis report, in a fixed order.
pub fn emit_plot_tables(report: &AnalysisReport) -> Result<Vec<(String, Vec<u8>)>> {
    let mut active = Table::new(ACTIVE_COUNTS, &["task_id", "checkpoint_id", "variant", "tau", "active_count"])?;
    let mut deletion = Table::new(DELETION, &["task_id", "checkpoint_id", "variant", "deletion_ratio"])?;
    let mut regained = Table::new(
        REGAINED,
        &[
            "task_id",
            "checkpoint_id",
            "deleted_count",
            "regained_count_ratio",
            "regained_activation_mass",
        ],
    )?;
    let mut traj = Table::new(
        TRAJECTORIES,
        &[
            "task_id",
            "checkpoint_id",
            "active_count_t",
            "active_count_ts",
            "active_count_tt",
            "deletion_ratio",
            "retained_ratio",
            "regained_count_ratio",
            "regained_activation_mass",
            "accuracy_at_t",
            "accuracy_raw_after",
            "accuracy_translated",
        ],
    )?;
    let mut decod = Table::new(
        DECODABILITY,
        &[
            "task_id",
            "checkpoint_id",
            "concept",
            "balanced_accuracy",
            "f1",
            "converged",
            "skipped",
        ],
    )?;
    let mut taxonomy = Table::new(TAXONOMY, &["task_id", "checkpoint_id", "concept", "category"])?;
    let mut panels = Table::new(
        PROBE_PANELS,
        &["task_id", "checkpoint_id", "space", "variant", "accuracy"],
    )?;
    let mut ms = Table::new(MONOSEMANTICITY, &["task_id", "concept", "ms", "baseline_ms"])?;

    for task in &report.tasks {
        if let Some(m) = &task.monosemanticity {
            for ((k, v), b) in m.neurons.iter().zip(&m.per_concept_ms).zip(&m.baseline_ms) {
                ms.row([task.task_id.to_string(), k.to_string(), num(*v), num(*b)])?;
            }
        }
    }
    for p in report.pairs() {
        let [t, c] = ids(p);
        let s = sets(p);
        for (variant, set) in VARIANTS.iter().zip(s) {
            active.row([
                t.clone(),
                c.clone(),
                variant.to_string(),
                num(set.tau),
                set.len().to_string(),
            ])?;
            deletion.row([
                t.clone(),
                c.clone(),
                variant.to_string(),
                opt(deletion_against(s[0], set)),
            ])?;
        }
        let m = &p.metrics;
        regained.row([
            t.clone(),
            c.clone(),
            m.deleted.len().to_string(),
            opt(m.regained_count_ratio),
            opt(m.regained_activation_mass),
        ])?;
        let f = &p.task_probes.features;
        traj.row([
            t.clone(),
            c.clone(),
            m.active_count_t.to_string(),
            m.active_count_ts.to_string(),
            m.active_count_tt.to_string(),
            opt(m.deletion_ratio),
            opt(m.retained_ratio),
            opt(m.regained_count_ratio),
            opt(m.regained_activation_mass),
            num(f.at_t),
            num(f.raw_after),
            num(f.translated),
        ])?;
        for r in &p.decodability.concepts {
            decod.row([
                t.clone(),
                c.clone(),
                r.concept.to_string(),
                opt(r.scores.map(|s| s.balanced_accuracy)),
                opt(r.scores.and_then(|s| s.f1)),
                opt_bool(r.converged),
                r.skipped.clone().unwrap_or_default(),
            ])?;
        }
        for r in &m.taxonomy {
            taxonomy.row([
                t.clone(),
                c.clone(),
                r.concept.to_string(),
                r.category.as_str().to_owned(),
            ])?;
        }
        for (space, panel) in [("features", &p.task_probes.features), ("latents", &p.task_probes.latents)] {
            for (variant, acc) in VARIANTS.iter().zip([panel.at_t, panel.raw_after, panel.translated]) {
                panels.row([
                    t.clone(),
                    c.clone(),
                    space.to_owned(),
                    variant.to_string(),
                    num(acc),
                ])?;
            }
        }
    }
    [active, deletion, regained, traj, decod, taxonomy, panels, ms]
        .into_iter()
        .map(Table::finish)
        .collect()
}

/// One row per (K, batch, tau, pair) with inter-run quartiles.
pub fn emit_sweep_tables(report: &SweepReport) -> Result<Vec<(String, Vec<u8>)>> {
    const METRICS: [&str; 7] = [
        "active_count_t",
        "active_count_ts",
        "active_count_tt",
        "deletion_ratio",
        "retained_ratio",
        "regained_count_ratio",
        "regained_activation_mass",
    ];
    let mut header: Vec<String> = ["k", "batch_size", "tau", "task_id", "checkpoint_id", "n_runs"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    for m in METRICS {
        for q in ["min", "q1", "median", "q3", "max"] {
            header.push(format!("{m}_{q}"));
        }
    }
    let refs: Vec<&str> = header.iter().map(String::as_str).collect();
    let mut table = Table::new(SWEEP_SUMMARY, &refs)?;
    for s in &report.summary {
        let mut row = vec![
            s.k.to_string(),
            s.batch_size.to_string(),
            num(s.tau),
            s.task_id.to_string(),
            s.checkpoint_id.to_string(),
            s.n_runs.to_string(),
        ];
        for d in [
            &s.active_count_t,
            &s.active_count_ts,
            &s.active_count_tt,
            &s.deletion_ratio,
            &s.retained_ratio,
            &s.regained_count_ratio,
            &s.regained_activation_mass,
        ] {
            for q in [
                d.map(|d| d.min),
                d.map(|d| d.q1),
                d.map(|d| d.median),
                d.map(|d| d.q3),
                d.map(|d| d.max),
            ] {
                row.push(opt(q));
            }
        }
        table.row(row)?;
    }
    Ok(vec![table.finish()?])
}

/// Writes the plot tables and then the report into `out_dir`.
pub fn write_analysis_outputs(report: &AnalysisReport, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = emit_plot_tables(report)?;
    files.push((REPORT_FILE.to_owned(), report.to_json()?.into_bytes()));
    write_atomically(out_dir, &files)
}

pub fn write_sweep_outputs(report: &SweepReport, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = emit_sweep_tables(report)?;
    let json = serde_json::to_string_pretty(report)
        .map_err(|e| Error::schema(SWEEP_REPORT_FILE, e.to_string()))?;
    files.push((SWEEP_REPORT_FILE.to_owned(), json.into_bytes()));
    write_atomically(out_dir, &files)
}
