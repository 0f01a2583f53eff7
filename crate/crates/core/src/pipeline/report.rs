use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::blob;
use crate::concept_space::ActiveConceptSet;
use crate::error::{Error, Result};
use crate::metrics::MetricsBundle;
use crate::monosemanticity::MsResult;
use crate::probe::{DecodabilityReport, ProbePanel};
use crate::sae::SaeDiagnostics;

use super::config::{RunConfig, TranslatorMethod};

pub const REPORT_SCHEMA_VERSION: u32 = 1;
pub const REPORT_FILE: &str = "report.json";
pub const SWEEP_REPORT_FILE: &str = "sweep_report.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaeSummary {
    pub latent_dim: usize,
    pub k: usize,
    pub diagnostics: SaeDiagnostics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorSummary {
    pub fingerprint: u64,
    pub mu: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationCheck {
    pub tau: f64,
    pub active_count: usize,
    pub accuracy_full: f64,
    pub accuracy_ablated: f64,
    pub max_abs_change: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopActivating {
    pub concept: usize,
    pub samples: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranslatorSummary {
    pub method: TranslatorMethod,
    pub train_mse: f64,
    pub val_mse: Option<f64>,
    pub test_mse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActiveSets {
    pub anchor: ActiveConceptSet,
    pub raw_after: ActiveConceptSet,
    pub translated: ActiveConceptSet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelPair {
    pub features: ProbePanel,
    pub latents: ProbePanel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairReport {
    pub task_id: u32,
    pub checkpoint_id: u32,
    /// Test-split active sets, all under the task's anchor statistics.
    pub active_sets: ActiveSets,
    pub metrics: MetricsBundle,
    pub translator: TranslatorSummary,
    pub nonlinear_translator: Option<TranslatorSummary>,
    pub task_probes: PanelPair,
    pub decodability: DecodabilityReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskReport {
    pub task_id: u32,
    pub sae: SaeSummary,
    pub anchor: AnchorSummary,
    /// Train-split active set used for ablation and monosemanticity.
    pub active_train: ActiveConceptSet,
    pub monosemanticity: Option<MsResult>,
    pub ablation: Option<AblationCheck>,
    pub top_activating: Vec<TopActivating>,
    pub pairs: Vec<PairReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub total_seconds: f64,
    pub per_task_seconds: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub schema_version: u32,
    pub version: String,
    pub seed: u64,
    pub config: RunConfig,
    pub tasks: Vec<TaskReport>,
    pub timing: Timing,
}

impl AnalysisReport {
    pub fn pairs(&self) -> impl Iterator<Item = &PairReport> {
        self.tasks.iter().flat_map(|t| t.pairs.iter())
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self)
            .map_err(|e| Error::schema(Path::new(REPORT_FILE), e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
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
}

/// Writes every file into a staging directory, then renames them into
/// `out_dir` in order. The last file is meant to be the report, so a run that
/// fails part way never leaves a report behind.
pub fn write_atomically(out_dir: &Path, files: &[(String, Vec<u8>)]) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let nanos = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_nanos())
        .unwrap_or(0);
    let staging = out_dir.join(format!(".staging-{}-{nanos}", std::process::id()));
    fs::create_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
    let result = (|| {
        for (name, bytes) in files {
            blob::write_file(&staging.join(name), bytes)?;
        }
        let mut written = Vec::with_capacity(files.len());
        for (name, _) in files {
            let from = staging.join(name);
            let to = out_dir.join(name);
            fs::rename(&from, &to).map_err(|e| Error::io(&to, e))?;
            written.push(to);
        }
        Ok(written)
    })();
    let _ = fs::remove_dir_all(&staging);
    result
}
