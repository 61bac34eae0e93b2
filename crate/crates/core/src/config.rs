//! Experiment configuration: one strict TOML file, unknown keys fatal,
//! echoed verbatim into every output directory.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cache::AnchorPolicy;
use crate::model::ModelConfig;
use crate::rollout::{NoiseSchedule, RolloutSettings};
use crate::scene::{MixtureComponent, SceneMode, SceneSpec};
use crate::train::TrainSettings;
use crate::{CoreError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: String,
    pub model: ModelConfig,
    pub cache: CacheConfig,
    pub schedule: ScheduleConfig,
    pub training: TrainingConfig,
    pub scene: SceneConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CacheConfig {
    pub frames_per_chunk: usize,
    pub state_frames: usize,
    pub window_frames: usize,
    pub policy: String,
    pub ema_decay: f64,
    pub heuristic_period: usize,
    pub retain_static_sink: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub steps: usize,
    /// Explicit levels override the linear schedule.
    pub levels: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub chunks: usize,
    pub alpha: f64,
    pub gen_lr: f64,
    pub critic_lr: f64,
    pub weight_decay: f64,
    pub iterations: usize,
    pub batch_rollouts: usize,
    pub ema_decay: f64,
    pub ema_start: usize,
    /// Pseudo-target normalizer; 0 resolves to the per-frame
    /// dimensionality.
    pub gamma: f64,
    pub include_first_chunk_loss: bool,
    /// Bounds of the per-frame noise-level draw in the loss.
    pub loss_t_min: f64,
    pub loss_t_max: f64,
    pub detach_state: bool,
    pub checkpoint_every: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneConfig {
    pub mode: SceneMode,
    /// Per-component mixture weight; must sum to 1.
    pub component_weights: Vec<f64>,
    /// Per-component mean, as a fill value across all latent dims.
    pub component_means: Vec<f64>,
    /// Per-component isotropic variance.
    pub component_vars: Vec<f64>,
    /// Latent units of mean motion per frame along the drift direction.
    pub drift_velocity: f64,
    /// The drift direction is the unit vector spread over this many
    /// leading dims.
    pub drift_dims: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            output_dir: "runs/default".into(),
            model: ModelConfig::default(),
            cache: CacheConfig {
                frames_per_chunk: 3,
                state_frames: 1,
                window_frames: 3,
                policy: "adaptive-state".into(),
                ema_decay: 0.9,
                heuristic_period: 2,
                retain_static_sink: false,
            },
            schedule: ScheduleConfig { steps: 4, levels: None },
            training: TrainingConfig {
                chunks: 7,
                alpha: 2.0,
                gen_lr: 2e-3,
                critic_lr: 4e-3,
                weight_decay: 0.01,
                iterations: 2000,
                batch_rollouts: 1,
                ema_decay: 0.99,
                ema_start: 200,
                gamma: 0.0,
                include_first_chunk_loss: true,
                loss_t_min: 0.25,
                loss_t_max: 0.98,
                detach_state: true,
                checkpoint_every: 500,
            },
            scene: SceneConfig {
                mode: SceneMode::Drifting,
                component_weights: vec![0.5, 0.5],
                component_means: vec![0.6, -0.6],
                component_vars: vec![0.09, 0.09],
                drift_velocity: 0.1,
                drift_dims: 8,
            },
        }
    }
}

/// Maps a policy label to the policy variant; parameters come from the
/// cache config.
pub fn parse_policy(label: &str, ema_decay: f64, heuristic_period: usize) -> Result<AnchorPolicy> {
    let policy = match label {
        "adaptive-state" => AnchorPolicy::AdaptiveState,
        "static-sink" => AnchorPolicy::StaticSink,
        "ema-sink" => AnchorPolicy::EmaSink { decay: ema_decay },
        "heuristic-replace" => AnchorPolicy::HeuristicReplace { period: heuristic_period },
        "no-anchor" => AnchorPolicy::NoAnchor,
        other => {
            return Err(CoreError::Config(format!(
                "unknown policy '{other}'; expected adaptive-state, static-sink, ema-sink, heuristic-replace, or no-anchor"
            )))
        }
    };
    policy.validate()?;
    Ok(policy)
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CoreError::Config(format!("cannot read {}: {e}", path.display())))?;
        let config: ExperimentConfig =
            toml::from_str(&text).map_err(|e| CoreError::Config(format!("{e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| CoreError::Config(format!("serialize: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.policy()?;
        if self.cache.frames_per_chunk == 0 || self.cache.window_frames == 0 {
            return Err(CoreError::Config("cache frame counts must be positive".into()));
        }
        if self.cache.state_frames == 0 || self.cache.state_frames > self.cache.frames_per_chunk {
            return Err(CoreError::Config(
                "state_frames must be in 1..=frames_per_chunk".into(),
            ));
        }
        if self.training.chunks == 0 {
            return Err(CoreError::Config("training.chunks must be >= 1".into()));
        }
        if self.training.gen_lr <= 0.0 || self.training.critic_lr <= 0.0 {
            return Err(CoreError::Config("learning rates must be positive".into()));
        }
        if self.training.gamma < 0.0 {
            return Err(CoreError::Config("gamma must be >= 0 (0 = auto)".into()));
        }
        if self.training.alpha < 0.0 {
            return Err(CoreError::Config("alpha must be >= 0".into()));
        }
        if !(0.0 < self.training.loss_t_min
            && self.training.loss_t_min < self.training.loss_t_max
            && self.training.loss_t_max <= 1.0)
        {
            return Err(CoreError::Config(
                "loss t bounds must satisfy 0 < min < max <= 1".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.training.ema_decay) && self.training.ema_decay != 0.99 {
            // 0 <= decay < 1 required; 0.99 listed for clarity of the range
            return Err(CoreError::Config("ema_decay must lie in [0, 1)".into()));
        }
        self.schedule()?;
        self.scene_spec()?;
        Ok(())
    }

    pub fn policy(&self) -> Result<AnchorPolicy> {
        parse_policy(
            &self.cache.policy,
            self.cache.ema_decay,
            self.cache.heuristic_period,
        )
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        match &self.schedule.levels {
            Some(levels) => NoiseSchedule::new(levels.clone()),
            None => NoiseSchedule::linear(self.schedule.steps),
        }
    }

    pub fn scene_spec(&self) -> Result<SceneSpec> {
        let d = self.model.frame_dim();
        let sc = &self.scene;
        let n = sc.component_weights.len();
        if sc.component_means.len() != n || sc.component_vars.len() != n || n == 0 {
            return Err(CoreError::Config(
                "scene component lists must be non-empty and the same length".into(),
            ));
        }
        let mut drift = vec![0.0; d];
        if sc.mode == SceneMode::Drifting {
            let k = sc.drift_dims.clamp(1, d);
            let unit = 1.0 / (k as f64).sqrt();
            for v in drift.iter_mut().take(k) {
                *v = sc.drift_velocity * unit;
            }
        }
        let components = (0..n)
            .map(|i| MixtureComponent {
                weight: sc.component_weights[i],
                mean: vec![sc.component_means[i]; d],
                var: vec![sc.component_vars[i]; d],
            })
            .collect();
        let spec = SceneSpec {
            mode: sc.mode,
            frame_dim: d,
            components,
            drift,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn resolved_gamma(&self) -> f64 {
        if self.training.gamma > 0.0 {
            self.training.gamma
        } else {
            self.model.frame_dim() as f64
        }
    }

    pub fn rollout_settings(&self, chunks: usize, policy: AnchorPolicy) -> Result<RolloutSettings> {
        Ok(RolloutSettings {
            policy,
            retain_static_sink: self.cache.retain_static_sink,
            frames_per_chunk: self.cache.frames_per_chunk,
            state_frames: self.cache.state_frames,
            window_frames: self.cache.window_frames,
            chunks,
            schedule: self.schedule()?,
            detach_state: self.training.detach_state,
            reuse_initial_noise: false,
            chunk0_from_teacher: true,
            collect_snapshots: false,
            collect_attention: false,
        })
    }

    pub fn train_settings(&self) -> Result<TrainSettings> {
        Ok(TrainSettings {
            rollout: self.rollout_settings(self.training.chunks, self.policy()?)?,
            alpha: self.training.alpha,
            gamma: self.resolved_gamma(),
            include_first_chunk_loss: self.training.include_first_chunk_loss,
            loss_t_min: self.training.loss_t_min,
            loss_t_max: self.training.loss_t_max,
            gen_lr: self.training.gen_lr,
            critic_lr: self.training.critic_lr,
            weight_decay: self.training.weight_decay,
            batch_rollouts: self.training.batch_rollouts,
            ema_decay: self.training.ema_decay,
            ema_start: self.training.ema_start,
            seed: self.seed,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid_and_roundtrips() {
        let config = ExperimentConfig::default();
        config.validate().unwrap();
        let text = config.to_toml().unwrap();
        let back: ExperimentConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, config);
    }

    #[test]
    fn unknown_keys_are_fatal() {
        let mut text = ExperimentConfig::default().to_toml().unwrap();
        text.push_str("\nunknown_knob = 3\n");
        assert!(toml::from_str::<ExperimentConfig>(&text).is_err());
    }

    #[test]
    fn unknown_nested_key_is_fatal() {
        let text = ExperimentConfig::default().to_toml().unwrap();
        let text = text.replace("[training]", "[training]\nmystery = true");
        assert!(toml::from_str::<ExperimentConfig>(&text).is_err());
    }

    #[test]
    fn policy_labels_parse() {
        assert!(parse_policy("adaptive-state", 0.9, 2).is_ok());
        assert!(parse_policy("static-sink", 0.9, 2).is_ok());
        assert!(matches!(
            parse_policy("ema-sink", 0.5, 2).unwrap(),
            AnchorPolicy::EmaSink { decay } if decay == 0.5
        ));
        assert!(parse_policy("nonsense", 0.9, 2).is_err());
        assert!(parse_policy("ema-sink", 1.5, 2).is_err());
    }

    #[test]
    fn gamma_resolves_to_frame_dim() {
        let config = ExperimentConfig::default();
        assert_eq!(config.resolved_gamma(), config.model.frame_dim() as f64);
    }

    #[test]
    fn drifting_scene_spreads_unit_drift() {
        let config = ExperimentConfig::default();
        let spec = config.scene_spec().unwrap();
        let norm: f64 = spec.drift.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - config.scene.drift_velocity).abs() < 1e-12);
    }
}
