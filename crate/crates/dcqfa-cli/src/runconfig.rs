//! Run configuration: one JSON file drives every pipeline stage, with a
//! `--set key=value` override mechanism for scripted sweeps. Unknown keys
//! are rejected.

use std::path::{Path, PathBuf};

use dcqfa_core::configspace::SearchSpace;
use dcqfa_core::env::PushBoxParams;
use dcqfa_core::opd::{OpdSettings, OpdWeights};
use dcqfa_core::search::{SearchObjective, SearchParams, SelectionRule};
use dcqfa_core::supernet::ArchDims;
use dcqfa_core::trainer::{ConfigSampling, TrainSettings};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("override `{0}` is not key=value")]
    BadOverride(String),
    #[error("override path `{0}` does not exist in the config")]
    UnknownOverridePath(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Device LUT files; empty means the two default synthetic profiles
    /// under `out_dir/profiles`.
    pub device_profiles: Vec<PathBuf>,
    pub space: SpaceConfig,
    pub model: ModelConfig,
    pub env: EnvConfig,
    pub demos: DemoConfig,
    pub trainer: TrainerConfig,
    pub opd: OpdConfig,
    pub search: SearchConfig,
    pub eval: EvalConfig,
    pub profile_synth: ProfileSynthConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 42,
            out_dir: PathBuf::from("runs/default"),
            device_profiles: Vec::new(),
            space: SpaceConfig::default(),
            model: ModelConfig::default(),
            env: EnvConfig::default(),
            demos: DemoConfig::default(),
            trainer: TrainerConfig::default(),
            opd: OpdConfig::default(),
            search: SearchConfig::default(),
            eval: EvalConfig::default(),
            profile_synth: ProfileSynthConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct SpaceConfig {
    pub layers: usize,
    pub mlp_ratios: Vec<u32>,
    pub head_ratios: Vec<f64>,
    pub weight_bits: Vec<u8>,
    pub act_bits: Vec<u8>,
    pub min_active_layers: usize,
}

impl Default for SpaceConfig {
    fn default() -> Self {
        SpaceConfig {
            layers: 4,
            mlp_ratios: vec![1, 2, 4],
            head_ratios: vec![0.5, 1.0],
            weight_bits: vec![4, 8, 16],
            act_bits: vec![4, 8, 16],
            min_active_layers: 1,
        }
    }
}

impl SpaceConfig {
    pub fn to_space(&self) -> SearchSpace {
        SearchSpace {
            layers: self.layers,
            mlp_ratios: self.mlp_ratios.clone(),
            head_ratios: self.head_ratios.clone(),
            weight_bits: self.weight_bits.clone(),
            act_bits: self.act_bits.clone(),
            min_active_layers: self.min_active_layers,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub max_heads: usize,
    pub head_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { d_model: 32, max_heads: 4, head_dim: 8 }
    }
}

impl ModelConfig {
    pub fn to_dims(&self) -> ArchDims {
        ArchDims {
            d_model: self.d_model,
            max_heads: self.max_heads,
            head_dim: self.head_dim,
            ..ArchDims::default()
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct EnvConfig {
    pub dt: f64,
    pub agent_radius: f64,
    pub box_radius: f64,
    pub success_dist: f64,
    pub max_steps: usize,
}

impl Default for EnvConfig {
    fn default() -> Self {
        let p = PushBoxParams::default();
        EnvConfig {
            dt: p.dt,
            agent_radius: p.agent_radius,
            box_radius: p.box_radius,
            success_dist: p.success_dist,
            max_steps: p.max_steps,
        }
    }
}

impl EnvConfig {
    pub fn to_params(&self) -> PushBoxParams {
        PushBoxParams {
            dt: self.dt,
            agent_radius: self.agent_radius,
            box_radius: self.box_radius,
            success_dist: self.success_dist,
            max_steps: self.max_steps,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct DemoConfig {
    pub count: usize,
}

impl Default for DemoConfig {
    fn default() -> Self {
        DemoConfig { count: 50 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub alpha: f64,
    pub beta: f64,
    pub warmup_steps: usize,
    pub random_configs: usize,
    /// "sandwich" or "reg-biased"
    pub sampling: String,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            steps: 2000,
            batch_size: 64,
            lr: 1e-3,
            alpha: 0.1,
            beta: 0.1,
            warmup_steps: 200,
            random_configs: 2,
            sampling: "sandwich".into(),
        }
    }
}

impl TrainerConfig {
    pub fn to_settings(&self) -> Result<TrainSettings, ConfigError> {
        let sampling = match self.sampling.as_str() {
            "sandwich" => ConfigSampling::Sandwich,
            "reg-biased" => ConfigSampling::RegBiased,
            other => {
                return Err(ConfigError::Invalid(format!(
                    "trainer.sampling must be \"sandwich\" or \"reg-biased\", got {other:?}"
                )))
            }
        };
        if self.alpha < 0.0 || self.beta < 0.0 {
            return Err(ConfigError::Invalid("regularizer weights must be nonnegative".into()));
        }
        if self.lr <= 0.0 {
            return Err(ConfigError::Invalid("learning rate must be positive".into()));
        }
        Ok(TrainSettings {
            steps: self.steps,
            batch_size: self.batch_size,
            lr: self.lr,
            alpha: self.alpha,
            beta: self.beta,
            warmup_steps: self.warmup_steps,
            random_configs: self.random_configs,
            sampling,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct OpdConfig {
    pub gamma: f64,
    pub k_min: usize,
    pub k_max: usize,
    pub steps: usize,
    pub lr: f64,
    /// None for uniform step weights, Some(lambda) for exponential discount.
    pub exp_discount: Option<f64>,
    /// "low-bit-sandwich" or "sampled"
    pub student: String,
}

impl Default for OpdConfig {
    fn default() -> Self {
        OpdConfig {
            gamma: 1.0,
            k_min: 1,
            k_max: 8,
            steps: 500,
            lr: 2e-4,
            exp_discount: None,
            student: "low-bit-sandwich".into(),
        }
    }
}

impl OpdConfig {
    pub fn to_settings(&self) -> Result<OpdSettings, ConfigError> {
        if self.k_min < 1 || self.k_min > self.k_max {
            return Err(ConfigError::Invalid("need 1 <= k_min <= k_max".into()));
        }
        if self.gamma < 0.0 {
            return Err(ConfigError::Invalid("gamma must be nonnegative".into()));
        }
        let weights = match self.exp_discount {
            Some(l) if l > 0.0 => OpdWeights::ExpDiscount(l),
            Some(_) => return Err(ConfigError::Invalid("exp_discount must be positive".into())),
            None => OpdWeights::Uniform,
        };
        Ok(OpdSettings {
            gamma: self.gamma,
            k_min: self.k_min,
            k_max: self.k_max,
            weights,
            lr: self.lr,
        })
    }

    pub fn student_rule(&self) -> Result<dcqfa_core::opd::StudentRule, ConfigError> {
        match self.student.as_str() {
            "sampled" => Ok(dcqfa_core::opd::StudentRule::SampledPerStep),
            "low-bit-sandwich" => Ok(dcqfa_core::opd::StudentRule::LowBitSandwich),
            other => Err(ConfigError::Invalid(format!(
                "opd.student must be \"low-bit-sandwich\" or \"sampled\", got {other:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct SearchConfig {
    pub population: usize,
    pub generations: usize,
    pub crossover_rate: f64,
    pub mutation_rate: Option<f64>,
    /// "latency" or "params"
    pub objective: String,
    pub val_fraction: f64,
    pub val_batch: usize,
    /// "min-loss" or "knee"
    pub selection: String,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            population: 64,
            generations: 40,
            crossover_rate: 0.9,
            mutation_rate: None,
            objective: "latency".into(),
            val_fraction: 0.2,
            val_batch: 256,
            selection: "min-loss".into(),
        }
    }
}

impl SearchConfig {
    pub fn to_params(&self) -> Result<SearchParams, ConfigError> {
        let objective = match self.objective.as_str() {
            "latency" => SearchObjective::Latency,
            "params" => SearchObjective::ParamCount,
            other => {
                return Err(ConfigError::Invalid(format!(
                    "search.objective must be \"latency\" or \"params\", got {other:?}"
                )))
            }
        };
        Ok(SearchParams {
            population: self.population,
            generations: self.generations,
            crossover_rate: self.crossover_rate,
            mutation_rate: self.mutation_rate,
            objective,
        })
    }

    pub fn selection_rule(&self) -> Result<SelectionRule, ConfigError> {
        match self.selection.as_str() {
            "min-loss" => Ok(SelectionRule::MinLossUnderBudget),
            "knee" => Ok(SelectionRule::Knee),
            other => Err(ConfigError::Invalid(format!(
                "search.selection must be \"min-loss\" or \"knee\", got {other:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub episodes: usize,
    pub seed_base: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { episodes: 100, seed_base: 900_000 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticDeviceConfig {
    pub index: usize,
    pub latency_budget_frac: f64,
    pub memory_budget_frac: f64,
}

impl Default for SyntheticDeviceConfig {
    fn default() -> Self {
        SyntheticDeviceConfig { index: 0, latency_budget_frac: 0.30, memory_budget_frac: 0.45 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ProfileSynthConfig {
    pub devices: Vec<SyntheticDeviceConfig>,
}

impl Default for ProfileSynthConfig {
    fn default() -> Self {
        ProfileSynthConfig {
            devices: vec![
                SyntheticDeviceConfig {
                    index: 0,
                    latency_budget_frac: 0.30,
                    memory_budget_frac: 0.45,
                },
                SyntheticDeviceConfig {
                    index: 1,
                    latency_budget_frac: 0.42,
                    memory_budget_frac: 0.60,
                },
            ],
        }
    }
}

impl RunConfig {
    /// Load a config file (or defaults when `path` is None), apply dotted
    /// `key=value` overrides, and validate.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig, ConfigError> {
        let mut value: serde_json::Value = match path {
            Some(p) => serde_json::from_str(&std::fs::read_to_string(p)?)?,
            None => serde_json::to_value(RunConfig::default())?,
        };
        for ov in overrides {
            apply_override(&mut value, ov)?;
        }
        let config: RunConfig = serde_json::from_value(value)?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.space
            .to_space()
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.trainer.to_settings()?;
        self.opd.to_settings()?;
        self.opd.student_rule()?;
        self.search.to_params()?;
        self.search.selection_rule()?;
        if self.demos.count == 0 {
            return Err(ConfigError::Invalid("demos.count must be positive".into()));
        }
        if self.model.d_model == 0 || self.model.max_heads == 0 || self.model.head_dim == 0 {
            return Err(ConfigError::Invalid("model dimensions must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.search.val_fraction) {
            return Err(ConfigError::Invalid("search.val_fraction must be in [0, 1)".into()));
        }
        Ok(())
    }

    // ---- derived paths --------------------------------------------------

    pub fn demos_path(&self) -> PathBuf {
        self.out_dir.join("demos.bin")
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.out_dir.join("supernet.dcqf")
    }

    pub fn distilled_path(&self) -> PathBuf {
        self.out_dir.join("supernet_distilled.dcqf")
    }

    /// The checkpoint later stages read: the distilled one when present.
    pub fn stage_checkpoint_path(&self) -> PathBuf {
        let distilled = self.distilled_path();
        if distilled.exists() {
            distilled
        } else {
            self.checkpoint_path()
        }
    }

    pub fn profiles_dir(&self) -> PathBuf {
        self.out_dir.join("profiles")
    }

    pub fn search_dir(&self) -> PathBuf {
        self.out_dir.join("search")
    }

    pub fn export_dir(&self) -> PathBuf {
        self.out_dir.join("export")
    }

    pub fn train_metrics_path(&self) -> PathBuf {
        self.out_dir.join("train_metrics.csv")
    }

    pub fn distill_metrics_path(&self) -> PathBuf {
        self.out_dir.join("distill_metrics.csv")
    }

    /// Device profile paths: explicit list, or the default two synthetic
    /// devices.
    pub fn profile_paths(&self) -> Vec<PathBuf> {
        if self.device_profiles.is_empty() {
            self.profile_synth
                .devices
                .iter()
                .map(|d| self.profiles_dir().join(format!("synth-{}.json", d.index)))
                .collect()
        } else {
            self.device_profiles.clone()
        }
    }
}

/// `a.b.c=value` override; the value is parsed as JSON when possible,
/// falling back to a string.
fn apply_override(root: &mut serde_json::Value, spec: &str) -> Result<(), ConfigError> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| ConfigError::BadOverride(spec.to_string()))?;
    let value: serde_json::Value = serde_json::from_str(raw)
        .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
    let mut cursor = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let map = cursor
            .as_object_mut()
            .ok_or_else(|| ConfigError::UnknownOverridePath(path.to_string()))?;
        if i == parts.len() - 1 {
            map.insert(part.to_string(), value);
            return Ok(());
        }
        cursor = map
            .get_mut(*part)
            .ok_or_else(|| ConfigError::UnknownOverridePath(path.to_string()))?;
    }
    Err(ConfigError::BadOverride(spec.to_string()))
}
