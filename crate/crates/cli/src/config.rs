//! Experiment configuration: one JSON file with a section per pipeline stage.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use unlearn_core::metrics::Scenario;
use unlearn_core::nets::ArchConfig;
use unlearn_core::pretrain::PretrainConfig;
use unlearn_core::synthdata::CorpusSize;
use unlearn_core::unlearn::UnlearnConfig;

use crate::error::{CliError, CliResult};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub n_train: usize,
    pub n_heldout_ind: usize,
    pub n_heldout_ood: usize,
    pub images_per_identity: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        let s = CorpusSize::default();
        DataConfig {
            n_train: s.n_train,
            n_heldout_ind: s.n_heldout_ind,
            n_heldout_ood: s.n_heldout_ood,
            images_per_identity: s.images_per_identity,
        }
    }
}

impl DataConfig {
    pub fn size(&self) -> CorpusSize {
        CorpusSize {
            n_train: self.n_train,
            n_heldout_ind: self.n_heldout_ind,
            n_heldout_ood: self.n_heldout_ood,
            images_per_identity: self.images_per_identity,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub scenario: Scenario,
    /// Sources `first_identity .. first_identity + n_identities` of the scenario.
    pub n_identities: usize,
    pub first_identity: usize,
    pub n_eval_latents: usize,
    /// Prior draws shown as preservation pairs in contact sheets.
    pub grid_preservation: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            scenario: Scenario::Ind,
            n_identities: 10,
            first_identity: 0,
            n_eval_latents: 1000,
            grid_preservation: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateConfig {
    /// Name of an unlearning hyperparameter, e.g. `d` or `alpha_max`.
    pub axis: String,
    pub values: Vec<f64>,
    pub scenario: Scenario,
    pub n_identities: usize,
}

impl Default for AblateConfig {
    fn default() -> Self {
        AblateConfig {
            axis: "d".into(),
            values: vec![-10.0, 0.0, 10.0, 30.0, 50.0],
            scenario: Scenario::Ood,
            n_identities: 20,
        }
    }
}

/// Unlearning hyperparameters an ablation may sweep.
pub const ABLATION_AXES: [&str; 11] = [
    "d",
    "alpha_max",
    "n_a",
    "n_g",
    "lambda_l2",
    "lambda_per",
    "lambda_id",
    "lambda_adj",
    "lambda_global",
    "iterations",
    "lr",
];

/// Sets one named unlearning hyperparameter.
pub fn apply_axis(cfg: &mut UnlearnConfig, axis: &str, value: f64) -> CliResult<()> {
    let count = |v: f64| -> CliResult<usize> {
        if v >= 0.0 && v.fract() == 0.0 && v.is_finite() {
            Ok(v as usize)
        } else {
            Err(CliError::config("ablate.values", format!("{axis} needs non-negative integers, got {v}")))
        }
    };
    match axis {
        "d" => cfg.d = value,
        "alpha_max" => cfg.alpha_max = value,
        "n_a" => cfg.n_a = count(value)?,
        "n_g" => cfg.n_g = count(value)?,
        "lambda_l2" => cfg.lambda_l2 = value,
        "lambda_per" => cfg.lambda_per = value,
        "lambda_id" => cfg.lambda_id = value,
        "lambda_adj" => cfg.lambda_adj = value,
        "lambda_global" => cfg.lambda_global = value,
        "iterations" => cfg.iterations = count(value)?,
        "lr" => cfg.lr = value,
        other => {
            return Err(CliError::config(
                "ablate.axis",
                format!("unknown axis `{other}`; expected one of {}", ABLATION_AXES.join(", ")),
            ))
        }
    }
    Ok(())
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Master seed; copied into every stage's seed when the config is resolved.
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub data: DataConfig,
    pub arch: ArchConfig,
    pub pretrain: PretrainConfig,
    pub unlearn: UnlearnConfig,
    pub eval: EvalConfig,
    pub ablate: AblateConfig,
}

/// Command-line overrides applied on top of the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub scenario: Option<Scenario>,
    pub mode: Option<unlearn_core::unlearn::Mode>,
    pub preset_no_id: bool,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> CliResult<Self> {
        serde_json::from_str(text).map_err(|e| CliError::config("config", e.to_string()))
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::config(&path.display().to_string(), e.to_string()))
    }

    /// Applies overrides and propagates the master seed.
    pub fn resolve(mut self, o: &Overrides) -> CliResult<Self> {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(out) = &o.out {
            self.out = Some(out.clone());
        }
        if let Some(s) = o.scenario {
            self.eval.scenario = s;
            self.ablate.scenario = s;
        }
        if let Some(m) = o.mode {
            self.unlearn.mode = m;
        }
        if o.preset_no_id {
            self.unlearn = self.unlearn.preset_no_id();
        }
        self.pretrain.seed = self.seed;
        self.unlearn.seed = self.seed;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> CliResult<()> {
        let d = &self.data;
        if d.n_train == 0 || d.images_per_identity < 2 {
            return Err(CliError::config(
                "data",
                "need at least one train identity and two images per identity".into(),
            ));
        }
        self.pretrain
            .validate()
            .map_err(|e| CliError::config("pretrain", e.to_string()))?;
        self.unlearn
            .validate()
            .map_err(|e| CliError::config("unlearn", e.to_string()))?;
        if self.eval.n_identities == 0 || self.eval.n_eval_latents < 2 {
            return Err(CliError::config(
                "eval",
                "n_identities must be positive and n_eval_latents at least 2".into(),
            ));
        }
        if !ABLATION_AXES.contains(&self.ablate.axis.as_str()) {
            return Err(CliError::config(
                "ablate.axis",
                format!("unknown axis `{}`; expected one of {}", self.ablate.axis, ABLATION_AXES.join(", ")),
            ));
        }
        if self.ablate.values.is_empty() || self.ablate.n_identities == 0 {
            return Err(CliError::config("ablate.values", "need at least one value and one identity".into()));
        }
        let mut probe = self.unlearn.clone();
        for &v in &self.ablate.values {
            apply_axis(&mut probe, &self.ablate.axis, v)?;
            probe
                .validate()
                .map_err(|e| CliError::config("ablate.values", e.to_string()))?;
        }
        Ok(())
    }

    /// Output root: `--out`, then the config's `out`, then `LATENT_UNLEARN_OUT`, then `runs`.
    pub fn out_root(&self) -> PathBuf {
        self.out
            .clone()
            .or_else(|| std::env::var_os("LATENT_UNLEARN_OUT").map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("runs"))
    }
}
