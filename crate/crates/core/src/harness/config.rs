use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::fusion::Cue;
use crate::metrics::EvalOptions;
use crate::model::{Combiner, DropoutMode, ModelSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Sgd,
    Momentum,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Rescale the gradient when its global norm exceeds this.
    pub clip_norm: Option<f64>,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            learning_rate: 0.05,
            epochs: 200,
            batch_size: 16,
            momentum: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            clip_norm: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub path: PathBuf,
    /// Share of examples held out for validation.
    pub val_fraction: f64,
    /// Train on at most this many reference questions per example.
    pub max_questions: Option<usize>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            path: PathBuf::from("data.jsonl"),
            val_fraction: 0.1,
            max_questions: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    /// One deterministic greedy pass.
    #[default]
    Greedy,
    /// Greedy on the softmax averaged over dropout draws.
    McMean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportMode {
    /// Scores of the checkpoint with the lowest validation loss.
    #[default]
    BestValidation,
    /// Best validation scores seen at any epoch.
    MaxOverEpochs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub decision: Decision,
    pub metrics: EvalOptions,
    pub report_mode: ReportMode,
    /// Score the validation split every this many epochs (0 = never).
    pub score_every: usize,
    /// Examples per batched generation pass.
    pub batch_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            decision: Decision::Greedy,
            metrics: EvalOptions::default(),
            report_mode: ReportMode::BestValidation,
            score_every: 0,
            batch_size: 64,
        }
    }
}

/// Everything a run needs; parsed from TOML with unknown keys rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Output directory for checkpoint, curves and reports.
    pub out_dir: PathBuf,
    pub data: DataConfig,
    pub model: ModelSpec,
    pub optim: OptimConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("run"),
            data: DataConfig::default(),
            model: ModelSpec::default(),
            optim: OptimConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        let cfg: Self = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String, HarnessError> {
        toml::to_string(self).map_err(|e| HarnessError::Config(e.to_string()))
    }

    /// Reads a config; relative data and output paths are resolved against
    /// the config file's directory.
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = fs::read_to_string(path)
            .map_err(|e| HarnessError::ConfigNotFound(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        if let Some(dir) = path.parent() {
            if cfg.data.path.is_relative() {
                cfg.data.path = dir.join(&cfg.data.path);
            }
            if cfg.out_dir.is_relative() {
                cfg.out_dir = dir.join(&cfg.out_dir);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        self.model.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        let o = &self.optim;
        if !(o.learning_rate.is_finite() && o.learning_rate > 0.0) {
            return Err(HarnessError::Config(format!("learning_rate must be positive, got {}", o.learning_rate)));
        }
        if o.epochs == 0 || o.batch_size == 0 || self.eval.batch_size == 0 {
            return Err(HarnessError::Config("epochs and batch sizes must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&o.momentum) || !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) {
            return Err(HarnessError::Config("momentum and beta coefficients must lie in [0, 1)".into()));
        }
        if !(o.epsilon > 0.0) {
            return Err(HarnessError::Config("epsilon must be positive".into()));
        }
        if matches!(o.clip_norm, Some(c) if !(c > 0.0)) {
            return Err(HarnessError::Config("clip_norm must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.data.val_fraction) {
            return Err(HarnessError::Config(format!(
                "val_fraction must lie in [0, 1), got {}",
                self.data.val_fraction
            )));
        }
        if self.data.max_questions == Some(0) {
            return Err(HarnessError::Config("max_questions must be >= 1".into()));
        }
        Ok(())
    }
}

/// Named model variants of the ablation study.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ablation {
    pub name: &'static str,
    pub combiner: Combiner,
    pub dropout: DropoutMode,
    pub dropout_at_inference: bool,
}

pub const ABLATIONS: [Ablation; 5] = [
    Ablation {
        name: "MC-SMix",
        combiner: Combiner::Mixture,
        dropout: DropoutMode::None,
        dropout_at_inference: false,
    },
    Ablation {
        name: "MC-BMix",
        combiner: Combiner::Mixture,
        dropout: DropoutMode::Bernoulli,
        dropout_at_inference: true,
    },
    Ablation {
        name: "MC-SMN",
        combiner: Combiner::Moderator,
        dropout: DropoutMode::Bernoulli,
        dropout_at_inference: false,
    },
    Ablation {
        name: "MC-BMN",
        combiner: Combiner::Moderator,
        dropout: DropoutMode::Bernoulli,
        dropout_at_inference: true,
    },
    Ablation {
        name: "MC-GMN",
        combiner: Combiner::Moderator,
        dropout: DropoutMode::Gaussian,
        dropout_at_inference: true,
    },
];

pub fn ablation(name: &str) -> Option<Ablation> {
    ABLATIONS.iter().copied().find(|a| a.name.eq_ignore_ascii_case(name))
}

impl Ablation {
    pub fn apply(&self, spec: &mut ModelSpec) {
        spec.combiner = self.combiner;
        spec.dropout.kind = self.dropout;
        spec.dropout.at_inference = self.dropout_at_inference;
    }
}

/// Every non-empty cue subset that a model can be built from: all subsets
/// containing the image, plus each single cue.
pub fn cue_subsets() -> Vec<Vec<Cue>> {
    let mut out = Vec::new();
    for mask in 1u32..16 {
        let set: Vec<Cue> = Cue::ALL.iter().enumerate().filter(|(i, _)| mask & (1 << i) != 0).map(|(_, c)| *c).collect();
        if set.len() == 1 || set.contains(&Cue::Image) {
            out.push(set);
        }
    }
    out
}
