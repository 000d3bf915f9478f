use anyhow::{bail, Context, Result};
use gazebc::eval::RolloutSettings;
use gazebc::nn::AdamConfig;
use gazebc::oracle::OracleParams;
use gazebc::policy::{LossWeights, PolicyConfig, TrainConfig};
use gazebc::world::{SimSettings, WorldConfig, WorldParams};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldSection {
    pub params: WorldParams,
    pub seed: u64,
    /// Loads a saved world instead of generating one.
    pub file: Option<PathBuf>,
}

impl Default for WorldSection {
    fn default() -> Self {
        Self { params: WorldParams::default(), seed: 7, file: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Trajectories to collect, one per sampled configuration.
    pub count: usize,
    pub config_seed: u64,
    pub split_ratio: f64,
    pub split_seed: u64,
    /// Base seed of the demonstrator's gaze jitter; trajectory `i` uses `seed + i`.
    pub demo_seed: u64,
}

impl Default for DataSection {
    fn default() -> Self {
        Self { count: 200, config_seed: 0, split_ratio: 0.9, split_seed: 0, demo_seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingSection {
    pub lambda_gaze: f64,
    pub lambda_bc: f64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub yaw_threshold: f64,
    pub oversample_boost: f64,
}

impl Default for TrainingSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            lambda_gaze: 1.0,
            lambda_bc: 1.0,
            lr: t.optimizer.lr,
            beta1: t.optimizer.beta1,
            beta2: t.optimizer.beta2,
            eps: t.optimizer.eps,
            epochs: t.epochs,
            batch_size: t.batch_size,
            seed: t.seed,
            yaw_threshold: t.yaw_threshold,
            oversample_boost: t.oversample_boost,
        }
    }
}

impl TrainingSection {
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            weights: LossWeights { lambda_gaze: self.lambda_gaze, lambda_bc: self.lambda_bc },
            optimizer: AdamConfig { lr: self.lr, beta1: self.beta1, beta2: self.beta2, eps: self.eps },
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed: self.seed,
            yaw_threshold: self.yaw_threshold,
            oversample_boost: self.oversample_boost,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationSection {
    pub repeats: usize,
    /// Training seeds per model variant.
    pub seeds: usize,
    pub timeout_steps: usize,
    pub position_sigma: f64,
    pub yaw_sigma_deg: f64,
    pub action_repeat: usize,
    /// Base seed of the rollout perturbation streams.
    pub seed: u64,
}

impl Default for EvaluationSection {
    fn default() -> Self {
        let r = RolloutSettings::default();
        Self {
            repeats: r.repeats,
            seeds: 6,
            timeout_steps: SimSettings::default().timeout_steps,
            position_sigma: r.position_sigma,
            yaw_sigma_deg: r.yaw_sigma_deg,
            action_repeat: r.action_repeat,
            seed: 0,
        }
    }
}

impl EvaluationSection {
    pub fn rollout_settings(&self) -> RolloutSettings {
        RolloutSettings {
            repeats: self.repeats,
            position_sigma: self.position_sigma,
            yaw_sigma_deg: self.yaw_sigma_deg,
            action_repeat: self.action_repeat,
        }
    }
}

/// Every tunable of a collect/train/eval run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub world: WorldSection,
    /// Simulation settings; `timeout_steps` bounds demonstrations and teleop episodes.
    pub sim: SimSettings,
    pub oracle: OracleParams,
    pub data: DataSection,
    pub model: PolicyConfig,
    pub training: TrainingSection,
    pub evaluation: EvaluationSection,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(text).context("parsing experiment config")?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_json(&text).with_context(|| format!("in {}", path.display()))
    }

    /// `path` if given, defaults otherwise.
    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        match path {
            Some(p) => Self::load(p),
            None => Ok(Self::default()),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.training;
        LossWeights { lambda_gaze: t.lambda_gaze, lambda_bc: t.lambda_bc }.validate()?;
        if !(t.lr > 0.0 && t.lr.is_finite()) || t.epochs == 0 || t.batch_size == 0 {
            bail!("training needs a positive lr, epoch count and batch size");
        }
        if !(0.0..1.0).contains(&t.beta1) || !(0.0..1.0).contains(&t.beta2) || !(t.eps > 0.0) {
            bail!("Adam betas must lie in [0, 1) and eps must be positive");
        }
        if !(self.data.split_ratio > 0.0 && self.data.split_ratio < 1.0) {
            bail!("split_ratio {} outside (0, 1)", self.data.split_ratio);
        }
        if self.data.count == 0 {
            bail!("data.count must be positive");
        }
        let e = &self.evaluation;
        if e.seeds == 0 || e.timeout_steps == 0 {
            bail!("evaluation needs at least one seed and a positive timeout");
        }
        self.evaluation.rollout_settings().validate()?;
        self.model.validate()?;
        if !(self.sim.dt > 0.0) || self.sim.timeout_steps == 0 {
            bail!("sim.dt and sim.timeout_steps must be positive");
        }
        if self.sim.camera.width != self.model.width || self.sim.camera.height != self.model.height {
            bail!(
                "camera renders {}x{} but the model expects {}x{}",
                self.sim.camera.width,
                self.sim.camera.height,
                self.model.width,
                self.model.height
            );
        }
        Ok(())
    }

    pub fn world(&self) -> Result<WorldConfig> {
        let w = match &self.world.file {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading world {}", p.display()))?;
                WorldConfig::from_json(&text)?
            }
            None => WorldConfig::generate(&self.world.params, self.world.seed),
        };
        w.validate()?;
        Ok(w)
    }

    pub fn eval_sim(&self) -> SimSettings {
        SimSettings { timeout_steps: self.evaluation.timeout_steps, ..self.sim }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_and_unknown_keys_fail() {
        let c = ExperimentConfig::default();
        assert_eq!(ExperimentConfig::from_json(&c.to_json()).unwrap(), c);
        assert!(ExperimentConfig::from_json(r#"{"training": {"learning_rate": 0.1}}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"bogus": 1}"#).is_err());
        let partial = ExperimentConfig::from_json(r#"{"training": {"lambda_gaze": 0.0}}"#).unwrap();
        assert_eq!(partial.training.lambda_gaze, 0.0);
        assert_eq!(partial.training.epochs, 20);
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(ExperimentConfig::from_json(r#"{"training": {"lambda_gaze": -1.0}}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"data": {"split_ratio": 1.0}}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"evaluation": {"repeats": 0}}"#).is_err());
    }

    #[test]
    fn default_world_matches_the_library_default() {
        assert_eq!(ExperimentConfig::default().world().unwrap(), WorldConfig::default_world());
    }
}
