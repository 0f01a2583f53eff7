//! Grid sweeps over (K, SAE batch size) cells, tau points and repeated runs.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::MetricsBundle;
use crate::probe::Distribution;

use super::analysis::{evaluate_pair, prepare_task, FeatureSource, ProbeCache};
use super::config::{RunConfig, SaeSettings};
use super::report::REPORT_SCHEMA_VERSION;

/// Seed of the cell at `cell_index`; run `r` of that cell uses `cell_seed + r`.
pub fn cell_seed(base_seed: u64, cell_index: usize) -> u64 {
    base_seed
        .wrapping_mul(10007)
        .wrapping_add(cell_index as u64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub tau: f64,
    pub task_id: u32,
    pub checkpoint_id: u32,
    pub metrics: MetricsBundle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRun {
    pub run: usize,
    pub seed: u64,
    /// Smallest and largest number of nonzero latents in any anchor test row.
    pub row_nonzero_min: usize,
    pub row_nonzero_max: usize,
    pub sae_r2: Vec<f64>,
    pub points: Vec<SweepPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub index: usize,
    pub k: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub runs: Vec<SweepRun>,
    /// Set when a run failed; runs completed before the failure are kept.
    pub error: Option<String>,
}

/// Inter-run quantiles of one grid point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub k: usize,
    pub batch_size: usize,
    pub tau: f64,
    pub task_id: u32,
    pub checkpoint_id: u32,
    pub n_runs: usize,
    pub active_count_t: Option<Distribution>,
    pub active_count_ts: Option<Distribution>,
    pub active_count_tt: Option<Distribution>,
    pub deletion_ratio: Option<Distribution>,
    pub retained_ratio: Option<Distribution>,
    pub regained_count_ratio: Option<Distribution>,
    pub regained_activation_mass: Option<Distribution>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTiming {
    pub total_seconds: f64,
    pub per_cell_seconds: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub schema_version: u32,
    pub version: String,
    pub seed: u64,
    pub config: RunConfig,
    pub cells: Vec<SweepCell>,
    pub summary: Vec<SweepSummary>,
    pub timing: SweepTiming,
}

impl SweepReport {
    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let report: Self =
            serde_json::from_str(&text).map_err(|e| Error::schema(path, e.to_string()))?;
        if report.schema_version != REPORT_SCHEMA_VERSION {
            return Err(Error::schema(
                path,
                format!("unknown schema_version {}", report.schema_version),
            ));
        }
        Ok(report)
    }

    pub fn failed_cells(&self) -> impl Iterator<Item = &SweepCell> {
        self.cells.iter().filter(|c| c.error.is_some())
    }
}

fn check_monotone(points: &[SweepPoint]) -> Result<()> {
    for w in points.windows(2) {
        let (a, b) = (&w[0], &w[1]);
        if a.task_id != b.task_id || a.checkpoint_id != b.checkpoint_id {
            continue;
        }
        let (ma, mb) = (&a.metrics, &b.metrics);
        let grew = mb.active_count_t > ma.active_count_t
            || mb.active_count_ts > ma.active_count_ts
            || mb.active_count_tt > ma.active_count_tt;
        if grew {
            return Err(Error::Invariant(format!(
                "active count grew from tau {} to tau {} (task {}, checkpoint {})",
                a.tau, b.tau, a.task_id, a.checkpoint_id
            )));
        }
    }
    Ok(())
}

fn run_once(
    config: &RunConfig,
    source: &FeatureSource,
    settings: &SaeSettings,
    taus: &[f64],
    run: usize,
    seed: u64,
) -> Result<SweepRun> {
    let mut points = Vec::new();
    let mut sae_r2 = Vec::new();
    let (mut lo, mut hi) = (usize::MAX, 0usize);
    for (task, ckpts) in config.tasks() {
        let state = prepare_task(config, source, task, &ckpts, settings, seed)?;
        sae_r2.push(state.sae.diagnostics.r2);
        for row in state.z_test.data.rows() {
            let nz = row.iter().filter(|&&v| v != 0.0).count();
            lo = lo.min(nz);
            hi = hi.max(nz);
        }
        for pair in &state.pairs {
            let mut cache = ProbeCache::new();
            let start = points.len();
            for &tau in taus {
                let (_, metrics, _) = evaluate_pair(config, &state, pair, tau, &mut cache)?;
                points.push(SweepPoint {
                    tau,
                    task_id: task,
                    checkpoint_id: pair.checkpoint,
                    metrics,
                });
            }
            check_monotone(&points[start..])?;
        }
    }
    Ok(SweepRun {
        run,
        seed,
        row_nonzero_min: if lo == usize::MAX { 0 } else { lo },
        row_nonzero_max: hi,
        sae_r2,
        points,
    })
}

fn distribution<F>(points: &[&SweepPoint], f: F) -> Option<Distribution>
where
    F: Fn(&MetricsBundle) -> Option<f64>,
{
    let v: Vec<f64> = points.iter().filter_map(|p| f(&p.metrics)).collect();
    Distribution::of(&v)
}

fn summarize(cells: &[SweepCell]) -> Vec<SweepSummary> {
    let mut out = Vec::new();
    for cell in cells {
        let Some(first) = cell.runs.first() else {
            continue;
        };
        for (i, p) in first.points.iter().enumerate() {
            let pts: Vec<&SweepPoint> = cell.runs.iter().filter_map(|r| r.points.get(i)).collect();
            out.push(SweepSummary {
                k: cell.k,
                batch_size: cell.batch_size,
                tau: p.tau,
                task_id: p.task_id,
                checkpoint_id: p.checkpoint_id,
                n_runs: pts.len(),
                active_count_t: distribution(&pts, |m| Some(m.active_count_t as f64)),
                active_count_ts: distribution(&pts, |m| Some(m.active_count_ts as f64)),
                active_count_tt: distribution(&pts, |m| Some(m.active_count_tt as f64)),
                deletion_ratio: distribution(&pts, |m| m.deletion_ratio),
                retained_ratio: distribution(&pts, |m| m.retained_ratio),
                regained_count_ratio: distribution(&pts, |m| m.regained_count_ratio),
                regained_activation_mass: distribution(&pts, |m| m.regained_activation_mass),
            });
        }
    }
    out
}

/// Runs every (K, batch size) cell `n_runs` times and evaluates each run at
/// every tau. The SAE and translator of a run are shared across taus.
///
/// A failing cell is recorded and the sweep continues. A tau grid on which an
/// active count increases is an error for the whole sweep.
pub fn run_sweep(config: &RunConfig, source: &FeatureSource) -> Result<SweepReport> {
    config.validate()?;
    let grid = &config.sweep;
    grid.validate()?;
    let start = Instant::now();
    let mut taus = grid.taus.clone();
    taus.sort_by(f64::total_cmp);
    taus.dedup();

    let specs: Vec<(usize, usize, usize)> = grid
        .ks
        .iter()
        .flat_map(|&k| grid.batch_sizes.iter().map(move |&b| (k, b)))
        .enumerate()
        .map(|(i, (k, b))| (i, k, b))
        .collect();

    let results: Vec<Result<(SweepCell, f64)>> = specs
        .par_iter()
        .map(|&(index, k, batch_size)| {
            let t0 = Instant::now();
            let seed = cell_seed(config.seed, index);
            let settings = SaeSettings {
                k,
                batch_size,
                ..config.sae
            };
            let mut runs = Vec::with_capacity(grid.n_runs);
            let mut error = None;
            for r in 0..grid.n_runs {
                match run_once(config, source, &settings, &taus, r, seed.wrapping_add(r as u64)) {
                    Ok(run) => runs.push(run),
                    Err(e @ Error::Invariant(_)) => return Err(e),
                    Err(e) => {
                        log::warn!("sweep cell {index} (K={k}, batch={batch_size}) failed: {e}");
                        error = Some(e.to_string());
                        break;
                    }
                }
            }
            let cell = SweepCell {
                index,
                k,
                batch_size,
                seed,
                runs,
                error,
            };
            Ok((cell, t0.elapsed().as_secs_f64()))
        })
        .collect();

    let mut cells = Vec::with_capacity(results.len());
    let mut per_cell_seconds = Vec::with_capacity(results.len());
    for r in results {
        let (cell, secs) = r?;
        cells.push(cell);
        per_cell_seconds.push(secs);
    }
    let summary = summarize(&cells);
    Ok(SweepReport {
        schema_version: REPORT_SCHEMA_VERSION,
        version: env!("CARGO_PKG_VERSION").to_owned(),
        seed: config.seed,
        config: config.clone(),
        cells,
        summary,
        timing: SweepTiming {
            total_seconds: start.elapsed().as_secs_f64(),
            per_cell_seconds,
        },
    })
}
