//! Run configuration files.
//!
//! A run config is one JSON document with four sections: `model` (the
//! architecture), `data` (source selection), `train` (hyperparameters), and
//! an optional `eval` section for the evaluation radius and attack budget.
//! Unknown keys anywhere are errors so typos fail fast instead of silently
//! training with defaults.
//!
//! Schedule fields in `train` may be given in epochs (`units_in_epochs`:
//! true); the loader converts them to steps by multiplying with the number
//! of batches per epoch, ceil(N / batch_size). That conversion applies to
//! t_nat, t_adv, ramp_steps, fosc_decay_steps, total_steps, and the step
//! coordinate of every lr breakpoint. The lr step coordinate counts ALL
//! optimizer steps including warm-up.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{mnist_test, mnist_train, synthetic_blobs, Dataset};
use crate::error::{CertError, Result};
use crate::net::{init_network, LayerSpec, Network};
use crate::train::{Mode, TrainConfig};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub data: DataConfig,
    pub train: TrainSection,
    #[serde(default)]
    pub eval: Option<EvalSection>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataConfig {
    /// Synthetic two-cluster data; the evaluation split uses seed+1 so it is
    /// disjoint from training draws.
    Blobs {
        n_per_class: usize,
        dim: usize,
        separation: f64,
        seed: u64,
        eval_n_per_class: usize,
    },
    /// MNIST IDX directory with the canonical file names. `train_subset`
    /// keeps only the first N training examples; evaluation always uses the
    /// t10k pair.
    Mnist {
        dir: PathBuf,
        #[serde(default)]
        train_subset: Option<usize>,
    },
}

/// `train` section: TrainConfig fields plus the epoch/step unit switch.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub eps_train: f64,
    pub t_nat: u64,
    pub t_adv: u64,
    pub ramp_steps: u64,
    pub fosc_decay_steps: u64,
    pub c_max: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    pub total_steps: u64,
    pub batch_size: usize,
    pub lr_schedule: Vec<(u64, f64)>,
    pub seed: u64,
    #[serde(default = "default_mode")]
    pub mode: Mode,
    #[serde(default)]
    pub units_in_epochs: bool,
}

fn default_beta1() -> f64 {
    0.9
}

fn default_beta2() -> f64 {
    0.99
}

fn default_mode() -> Mode {
    Mode::Joint
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub eps: f64,
    #[serde(default = "default_pgd_steps")]
    pub pgd_steps: usize,
    /// Defaults to eps/4.
    #[serde(default)]
    pub pgd_step_size: Option<f64>,
    #[serde(default)]
    pub seed: u64,
}

fn default_pgd_steps() -> usize {
    200
}

pub fn batches_per_epoch(n_examples: usize, batch_size: usize) -> u64 {
    assert!(n_examples > 0 && batch_size > 0);
    n_examples.div_ceil(batch_size) as u64
}

impl RunConfig {
    pub fn from_str_json(text: &str) -> Result<RunConfig> {
        serde_json::from_str(text).map_err(|e| CertError::Config(format!("run config: {e}")))
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            CertError::Config(format!("cannot read config {}: {e}", path.display()))
        })?;
        Self::from_str_json(&text)
    }

    pub fn build_net(&self) -> Result<Network> {
        init_network(
            self.model.layers.clone(),
            self.model.input_shape.clone(),
            self.train.seed,
        )
    }

    /// Training and evaluation splits for the configured source.
    pub fn load_data(&self) -> Result<(Dataset, Dataset)> {
        match &self.data {
            DataConfig::Blobs { n_per_class, dim, separation, seed, eval_n_per_class } => {
                if *n_per_class == 0 || *eval_n_per_class == 0 || *dim == 0 {
                    return Err(CertError::Config(
                        "blob sizes and dimension must be at least 1".into(),
                    ));
                }
                Ok((
                    synthetic_blobs(*n_per_class, *dim, *separation, *seed),
                    synthetic_blobs(*eval_n_per_class, *dim, *separation, seed + 1),
                ))
            }
            DataConfig::Mnist { dir, train_subset } => {
                Ok((mnist_train(dir, *train_subset)?, mnist_test(dir)?))
            }
        }
    }

    /// Runtime training config with every schedule field in steps.
    pub fn train_config(&self, train_examples: usize) -> Result<TrainConfig> {
        let s = &self.train;
        let scale = if s.units_in_epochs {
            if train_examples == 0 {
                return Err(CertError::Config("cannot scale epochs on an empty dataset".into()));
            }
            batches_per_epoch(train_examples, s.batch_size.max(1))
        } else {
            1
        };
        let cfg = TrainConfig {
            eps_train: s.eps_train,
            t_nat: s.t_nat * scale,
            t_adv: s.t_adv * scale,
            ramp_steps: s.ramp_steps * scale,
            fosc_decay_steps: s.fosc_decay_steps * scale,
            c_max: s.c_max,
            beta1: s.beta1,
            beta2: s.beta2,
            total_steps: s.total_steps * scale,
            batch_size: s.batch_size,
            lr_schedule: s
                .lr_schedule
                .iter()
                .map(|&(step, lr)| (step * scale, lr))
                .collect(),
            seed: s.seed,
            mode: s.mode,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Eval section with defaults resolved; eps falls back to the training
    /// radius when the section is absent.
    pub fn eval_resolved(&self) -> ResolvedEval {
        match &self.eval {
            Some(e) => ResolvedEval {
                eps: e.eps,
                pgd_steps: e.pgd_steps,
                pgd_step_size: e.pgd_step_size.unwrap_or(e.eps / 4.0),
                seed: e.seed,
            },
            None => ResolvedEval {
                eps: self.train.eps_train,
                pgd_steps: default_pgd_steps(),
                pgd_step_size: self.train.eps_train / 4.0,
                seed: 0,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResolvedEval {
    pub eps: f64,
    pub pgd_steps: usize,
    pub pgd_step_size: f64,
    pub seed: u64,
}
