//! Run configuration: strict JSON parsing with per-field defaults, layer
//! range resolution against the model depth, and a stable digest for
//! provenance.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bottleneck::{BottleneckMode, BottleneckSpec, StatsMode};
use crate::error::{Error, Result};
use crate::vit::ModelConfig;
use crate::Real;

/// Bottleneck hyperparameters as configured; `s`/`e` stay optional until the
/// model depth is known.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BottleneckConfig {
    pub mode: BottleneckMode,
    pub s: Option<usize>,
    pub e: Option<usize>,
    pub beta: Real,
    pub beta_per_layer: Option<Vec<Real>>,
    pub iterations: usize,
    pub learning_rate: Real,
    pub noise_batch: usize,
    pub stats_mode: StatsMode,
    pub per_channel: bool,
    pub raw_lambda_scores: bool,
}

impl Default for BottleneckConfig {
    fn default() -> Self {
        BottleneckConfig {
            mode: BottleneckMode::Coiba,
            s: None,
            e: None,
            beta: 1.0,
            beta_per_layer: None,
            iterations: 10,
            learning_rate: 1.0,
            noise_batch: 10,
            stats_mode: StatsMode::PerSample,
            per_channel: false,
            raw_lambda_scores: false,
        }
    }
}

/// Default departure layer: ceil(depth / 3), per the middle-third heuristic.
pub fn default_departure(depth: usize) -> usize {
    depth.div_ceil(3)
}

impl BottleneckConfig {
    /// Resolve against a concrete depth and seed into a validated spec.
    pub fn to_spec(&self, depth: usize, seed: u64) -> Result<BottleneckSpec> {
        let s = self.s.unwrap_or_else(|| default_departure(depth));
        let e = self.e.unwrap_or(depth);
        if s > e {
            return Err(Error::Config(format!("departure layer {} exceeds arrival layer {}", s, e)));
        }
        let spec = BottleneckSpec {
            mode: self.mode,
            s,
            e,
            beta: self.beta,
            beta_per_layer: self.beta_per_layer.clone(),
            iterations: self.iterations,
            learning_rate: self.learning_rate,
            noise_batch: self.noise_batch,
            seed,
            stats_mode: self.stats_mode,
            per_channel: self.per_channel,
            raw_lambda_scores: self.raw_lambda_scores,
        };
        spec.validate(depth)?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub step_fraction: Real,
    pub sigma_road: Real,
    pub road_fractions: Vec<Real>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            step_fraction: crate::eval::DEFAULT_STEP_FRACTION,
            sigma_road: crate::eval::DEFAULT_SIGMA_ROAD,
            road_fractions: crate::eval::ROAD_FRACTIONS.to_vec(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: Real,
    pub batch_size: usize,
    pub train_samples: usize,
    pub holdout_samples: usize,
    pub classes: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 24,
            learning_rate: 3e-4,
            batch_size: 16,
            train_samples: 256,
            holdout_samples: 64,
            classes: 4,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub bottleneck: BottleneckConfig,
    pub eval: EvalConfig,
    pub train: TrainConfig,
    pub seed: u64,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let mut violations = Vec::new();
        if let Err(e) = self.model.validate() {
            violations.push(e.to_string());
        }
        if let Err(e) = self.bottleneck.to_spec(self.model.depth, self.seed) {
            violations.push(e.to_string());
        }
        if !(self.eval.step_fraction > 0.0 && self.eval.step_fraction <= 1.0) {
            violations.push(format!("step_fraction {} outside (0, 1]", self.eval.step_fraction));
        }
        if self.eval.sigma_road < 0.0 {
            violations.push("sigma_road must be non-negative".into());
        }
        if self.eval.road_fractions.iter().any(|f| !(0.0..=1.0).contains(f)) {
            violations.push("road_fractions must lie in [0, 1]".into());
        }
        if self.train.batch_size == 0 || self.train.classes == 0 {
            violations.push("batch_size and classes must be positive".into());
        }
        if violations.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(violations.join("; ")))
        }
    }

    pub fn spec(&self) -> Result<BottleneckSpec> {
        self.bottleneck.to_spec(self.model.depth, self.seed)
    }

    /// SHA-256 of the canonical JSON serialization; embedded in outputs so
    /// every run is reproducible from (config, seed).
    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let json = serde_json::to_vec(self).expect("config serializes");
        let mut h = Sha256::new();
        h.update(&json);
        format!("{:x}", h.finalize())
    }
}

pub fn parse_config(text: &str) -> Result<RunConfig> {
    let cfg: RunConfig =
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)?;
    parse_config(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_gives_full_defaults() {
        let cfg = parse_config("{}").unwrap();
        assert_eq!(cfg.bottleneck.beta, 1.0);
        assert_eq!(cfg.bottleneck.iterations, 10);
        assert_eq!(cfg.bottleneck.learning_rate, 1.0);
        assert_eq!(cfg.bottleneck.noise_batch, 10);
        let spec = cfg.spec().unwrap();
        assert_eq!(spec.s, 2);
        assert_eq!(spec.e, 6);
        assert_eq!(cfg.eval.step_fraction, 0.035);
    }

    #[test]
    fn departure_default_is_ceil_third() {
        assert_eq!(default_departure(6), 2);
        assert_eq!(default_departure(7), 3);
        assert_eq!(default_departure(1), 1);
    }

    #[test]
    fn unknown_key_named_in_error() {
        let err = parse_config(r#"{"bottleneck": {"betaa": 2.0}}"#).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("betaa"), "error was: {}", msg);
    }

    #[test]
    fn s_greater_than_e_rejected() {
        let err = parse_config(r#"{"bottleneck": {"s": 5, "e": 3}}"#).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(err.to_string().contains("departure"));
    }

    #[test]
    fn out_of_range_layer_rejected() {
        assert!(parse_config(r#"{"bottleneck": {"e": 9}}"#).is_err());
        assert!(parse_config(r#"{"bottleneck": {"s": 0}}"#).is_err());
    }

    #[test]
    fn overrides_survive_round_trip() {
        let cfg = parse_config(r#"{"bottleneck": {"beta": 10.0, "s": 3}, "seed": 7}"#).unwrap();
        assert_eq!(cfg.bottleneck.beta, 10.0);
        let spec = cfg.spec().unwrap();
        assert_eq!((spec.s, spec.e, spec.seed), (3, 6, 7));
        let text = serde_json::to_string(&cfg).unwrap();
        let again = parse_config(&text).unwrap();
        assert_eq!(again.digest(), cfg.digest());
    }

    #[test]
    fn digest_changes_with_content() {
        let a = parse_config("{}").unwrap();
        let b = parse_config(r#"{"seed": 1}"#).unwrap();
        assert_ne!(a.digest(), b.digest());
    }

    #[test]
    fn invalid_eval_parameters_listed() {
        let err =
            parse_config(r#"{"eval": {"step_fraction": 0.0, "sigma_road": -1.0}}"#).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("step_fraction") && msg.contains("sigma_road"), "{}", msg);
    }
}
