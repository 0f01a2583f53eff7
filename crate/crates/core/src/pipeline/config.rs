use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::concept_space::{DEFAULT_TAU, DEFAULT_TOP_M};
use crate::error::{Error, Result};
use crate::probe::ProbeConfig;
use crate::sae::SaeConfig;
use crate::translator::{TranslatorConfig, DEFAULT_RIDGE};

/// A task `t` analysed at checkpoint `t+s`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TaskPair {
    pub task: u32,
    pub checkpoint: u32,
}

/// SAE hyperparameters; the input width comes from the data and the seed from
/// the run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SaeSettings {
    pub expansion: f64,
    pub k: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub dead_loss_weight: f64,
    pub dead_window_steps: usize,
    pub aux_k: Option<usize>,
}

impl Default for SaeSettings {
    fn default() -> Self {
        let c = SaeConfig::new(1);
        Self {
            expansion: c.expansion,
            k: c.k,
            epochs: c.epochs,
            lr: c.lr,
            batch_size: c.batch_size,
            dead_loss_weight: c.dead_loss_weight,
            dead_window_steps: c.dead_window_steps,
            aux_k: c.aux_k,
        }
    }
}

impl SaeSettings {
    pub fn to_config(&self, input_dim: usize, seed: u64) -> SaeConfig {
        SaeConfig {
            input_dim,
            expansion: self.expansion,
            k: self.k,
            epochs: self.epochs,
            lr: self.lr,
            batch_size: self.batch_size,
            dead_loss_weight: self.dead_loss_weight,
            dead_window_steps: self.dead_window_steps,
            aux_k: self.aux_k,
            seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TranslatorMethod {
    Gradient,
    ClosedForm,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TranslatorSettings {
    pub method: TranslatorMethod,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub val_fraction: f64,
    pub ridge_lambda: f64,
    /// Also fit the three-layer GELU baseline and report its errors.
    pub nonlinear_baseline: bool,
}

impl Default for TranslatorSettings {
    fn default() -> Self {
        let c = TranslatorConfig::default();
        Self {
            method: TranslatorMethod::Gradient,
            epochs: c.epochs,
            lr: c.lr,
            weight_decay: c.weight_decay,
            batch_size: c.batch_size,
            val_fraction: c.val_fraction,
            ridge_lambda: DEFAULT_RIDGE,
            nonlinear_baseline: false,
        }
    }
}

impl TranslatorSettings {
    pub fn to_config(&self, seed: u64) -> TranslatorConfig {
        TranslatorConfig {
            epochs: self.epochs,
            lr: self.lr,
            weight_decay: self.weight_decay,
            batch_size: self.batch_size,
            val_fraction: self.val_fraction,
            seed,
        }
    }
}

pub const DEFAULT_TAUS: [f64; 6] = [0.00625, 0.0125, 0.025, 0.05, 0.1, 0.2];
pub const DEFAULT_KS: [usize; 4] = [10, 16, 32, 64];
pub const DEFAULT_BATCHES: [usize; 5] = [16, 32, 64, 128, 256];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepGrid {
    pub taus: Vec<f64>,
    pub ks: Vec<usize>,
    pub batch_sizes: Vec<usize>,
    pub n_runs: usize,
}

impl Default for SweepGrid {
    fn default() -> Self {
        Self {
            taus: DEFAULT_TAUS.to_vec(),
            ks: DEFAULT_KS.to_vec(),
            batch_sizes: DEFAULT_BATCHES.to_vec(),
            n_runs: 1,
        }
    }
}

impl SweepGrid {
    pub fn validate(&self) -> Result<()> {
        if self.taus.is_empty() || self.ks.is_empty() || self.batch_sizes.is_empty() {
            return Err(Error::InvalidConfig("sweep grids must be nonempty".into()));
        }
        if self.n_runs == 0 {
            return Err(Error::InvalidConfig("sweep n_runs must be at least 1".into()));
        }
        if let Some(t) = self.taus.iter().find(|t| !(0.0..=1.0).contains(*t)) {
            return Err(Error::InvalidConfig(format!("sweep tau {t} outside [0, 1]")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub features_root: PathBuf,
    pub pairs: Vec<TaskPair>,
    pub tau: f64,
    pub seed: u64,
    pub sae: SaeSettings,
    pub translator: TranslatorSettings,
    pub task_probe: ProbeConfig,
    pub concept_probe: ProbeConfig,
    /// Probe every seemingly deleted concept, recovered ones included.
    pub probe_all_deleted: bool,
    pub monosemanticity: bool,
    pub ablation: bool,
    pub top_m: usize,
    /// Runs whose SAE reconstructs worse than this are rejected.
    pub min_sae_r2: f64,
    pub sweep: SweepGrid,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            features_root: PathBuf::from("features"),
            pairs: vec![TaskPair {
                task: 0,
                checkpoint: 1,
            }],
            tau: DEFAULT_TAU,
            seed: 0,
            sae: SaeSettings::default(),
            translator: TranslatorSettings::default(),
            task_probe: ProbeConfig::task(),
            concept_probe: ProbeConfig::concept(),
            probe_all_deleted: false,
            monosemanticity: true,
            ablation: true,
            top_m: DEFAULT_TOP_M,
            min_sae_r2: 0.6,
            sweep: SweepGrid::default(),
            output_dir: PathBuf::from("out"),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::schema(path, e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.pairs.is_empty() {
            return Err(Error::InvalidConfig("no task pairs configured".into()));
        }
        if let Some(p) = self.pairs.iter().find(|p| p.checkpoint == 0) {
            return Err(Error::InvalidConfig(format!(
                "pair for task {} uses checkpoint 0, the anchor itself",
                p.task
            )));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::InvalidConfig(format!("tau {} outside [0, 1]", self.tau)));
        }
        self.task_probe.validate()?;
        self.concept_probe.validate()?;
        self.translator.to_config(0).validate()?;
        Ok(())
    }

    /// Pairs grouped by task, both levels ascending and deduplicated.
    pub fn tasks(&self) -> Vec<(u32, Vec<u32>)> {
        let mut pairs = self.pairs.clone();
        pairs.sort_unstable();
        pairs.dedup();
        let mut out: Vec<(u32, Vec<u32>)> = Vec::new();
        for p in pairs {
            match out.last_mut() {
                Some((t, ckpts)) if *t == p.task => ckpts.push(p.checkpoint),
                _ => out.push((p.task, vec![p.checkpoint])),
            }
        }
        out
    }
}
