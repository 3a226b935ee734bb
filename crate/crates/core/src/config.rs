//! Configuration types, their defaults, and validation.
//!
//! `RunConfig` is the JSON config file the CLI accepts; it rejects unknown
//! keys so typos fail loudly, while nested sections fall back to defaults
//! field by field. All defaults mirror the reference settings: focal and
//! boundary weights 0.4, hard-negative weight 10, contrast window fraction
//! 0.25, erosion width 7, mask thresholds 0.1..0.9 in steps of 0.05.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Weights and knobs of the four loss terms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// Balance between the focal and binary branches of the classification
    /// loss.
    pub lambda1: f64,
    /// Weight of the dice complement inside the mask loss.
    pub lambda2: f64,
    /// Focal exponent.
    pub gamma: f64,
    /// Hard-negative weight in the classification loss.
    pub alpha: f64,
    /// Exponent on the contrast deficit in the promotion loss.
    pub beta: f64,
    /// Flank size for the outer-inner contrast, as a fraction of segment
    /// length.
    pub delta: f64,
    /// Erosion window width (odd).
    pub erosion_k: usize,
    /// Stabilizer added to quotient denominators.
    pub eps: f64,
    /// Soft-intersection level below which the mask loss falls back to a
    /// plain distance term.
    pub tau_ov: f64,
    /// When true, the boundary term compares band masks (m - erode(m))
    /// instead of eroded masks.
    pub boundary_band: bool,
    /// Classification confidence gate, shared with inference decoding.
    pub theta_c: f64,
    /// Mask binarization gate for the consistency loss.
    pub theta_m: f64,
    /// Snippets pooled per branch in the consistency loss.
    pub topk: usize,
    /// Mask binarization grid, shared between the promotion loss and
    /// inference decoding. Strictly increasing, inside (0, 1).
    pub thresholds: Vec<f64>,
    /// Probability clamp applied before logarithms.
    pub prob_clamp: f64,
}

/// The shared threshold grid: 0.10, 0.15, ... 0.90.
pub fn default_thresholds() -> Vec<f64> {
    (0..17).map(|i| 0.10 + 0.05 * i as f64).collect()
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 0.4,
            lambda2: 0.4,
            gamma: 2.0,
            alpha: 10.0,
            beta: 2.0,
            delta: 0.25,
            erosion_k: 7,
            eps: 1e-8,
            tau_ov: 1e-6,
            boundary_band: false,
            theta_c: 0.3,
            theta_m: 0.5,
            topk: 40,
            thresholds: default_thresholds(),
            prob_clamp: 1e-7,
        }
    }
}

impl LossWeights {
    /// Number of hard-negative classes scored against: ceil(K / 10), at
    /// least one.
    pub fn hard_negatives(&self, num_classes: usize) -> usize {
        ((num_classes + 9) / 10).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        for (name, v, lo, hi) in [
            ("lambda1", self.lambda1, 0.0, 1.0),
            ("lambda2", self.lambda2, 0.0, 10.0),
            ("delta", self.delta, 0.0, 1.0),
            ("theta_c", self.theta_c, 0.0, 1.0),
            ("theta_m", self.theta_m, 0.0, 1.0),
        ] {
            if !(v >= lo && v <= hi && v.is_finite()) {
                return bad(format!("{name} must lie in [{lo}, {hi}], got {v}"));
            }
        }
        if self.gamma < 0.0 || self.alpha < 0.0 || self.beta < 0.0 {
            return bad("gamma, alpha and beta must be non-negative".into());
        }
        if self.erosion_k % 2 == 0 || self.erosion_k == 0 {
            return bad(format!("erosion_k must be odd, got {}", self.erosion_k));
        }
        if !(self.eps > 0.0 && self.prob_clamp > 0.0 && self.prob_clamp < 0.5) {
            return bad("eps and prob_clamp must be small positive numbers".into());
        }
        if self.topk == 0 {
            return bad("topk must be >= 1".into());
        }
        if self.thresholds.is_empty() {
            return bad("thresholds must not be empty".into());
        }
        for w in self.thresholds.windows(2) {
            if !(w[0] < w[1]) {
                return bad("thresholds must be strictly increasing".into());
            }
        }
        if self.thresholds[0] <= 0.0 || *self.thresholds.last().unwrap() >= 1.0 {
            return bad("thresholds must lie strictly inside (0, 1)".into());
        }
        Ok(())
    }
}

/// Encoder shape: scale set lives in `TrainConfig` (it also affects targets
/// and losses); this holds the attention layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub n_heads: usize,
    /// Attention width; must equal the feature width and divide evenly
    /// across heads.
    pub channels: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            n_heads: 4,
            channels: 16,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 {
            return Err(Error::InvalidConfig("n_heads must be >= 1".into()));
        }
        if self.channels == 0 || self.channels % self.n_heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "channels ({}) must be a positive multiple of n_heads ({})",
                self.channels, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.channels / self.n_heads
    }
}

/// Optimization settings. Serialized verbatim into every checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Temporal scales; each must divide into a sensible pyramid (1, 2, 4).
    pub scales: Vec<usize>,
    /// Expected snippet count of every training video.
    pub snippets: usize,
    pub loss: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 15,
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 4,
            seed: 7,
            scales: vec![1, 2],
            snippets: 64,
            loss: LossWeights::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.epochs == 0 {
            return bad("epochs must be >= 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b >= 0.0 && b < 1.0) {
                return bad(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if !(self.adam_eps > 0.0) {
            return bad("adam_eps must be positive".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if self.snippets == 0 {
            return bad("snippets must be >= 1".into());
        }
        if self.scales.is_empty() {
            return bad("scales must not be empty".into());
        }
        let mut seen = std::collections::BTreeSet::new();
        for &s in &self.scales {
            if ![1, 2, 4].contains(&s) {
                return bad(format!("scale {s} unsupported; choose from {{1, 2, 4}}"));
            }
            if !seen.insert(s) {
                return bad(format!("scale {s} listed twice"));
            }
        }
        self.loss.validate()
    }
}

/// SoftNMS and decoding settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferConfig {
    /// Gaussian decay width.
    pub sigma: f64,
    /// Candidates decayed below this score are dropped.
    pub score_floor: f64,
    pub max_keep: usize,
    /// When true, suppression only compares candidates of the same class.
    pub per_class: bool,
}

impl Default for InferConfig {
    fn default() -> Self {
        Self {
            sigma: 0.5,
            score_floor: 1e-4,
            max_keep: 100,
            per_class: false,
        }
    }
}

impl InferConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "sigma must be positive, got {}",
                self.sigma
            )));
        }
        if !(self.score_floor > 0.0 && self.score_floor < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "score_floor must lie in (0, 1), got {}",
                self.score_floor
            )));
        }
        if self.max_keep == 0 {
            return Err(Error::InvalidConfig("max_keep must be >= 1".into()));
        }
        Ok(())
    }
}

/// Optional default paths a config file may carry; flags override these.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub features: Option<String>,
    pub annotations: Option<String>,
    pub out: Option<String>,
}

/// Everything the CLI can read from `--config <file.json>`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub encoder: EncoderConfig,
    pub infer: InferConfig,
    pub paths: PathsConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.encoder.validate()?;
        self.infer.validate()
    }

    /// Parses a JSON config, rejecting unknown keys by name.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)
            .map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_grid_has_17_levels() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.train.loss.thresholds.len(), 17);
        assert!((cfg.train.loss.thresholds[0] - 0.10).abs() < 1e-12);
        assert!((cfg.train.loss.thresholds[16] - 0.90).abs() < 1e-12);
        assert_eq!(cfg.train.loss.hard_negatives(3), 1);
        assert_eq!(cfg.train.loss.hard_negatives(25), 3);
    }

    #[test]
    fn unknown_keys_are_rejected_by_name() {
        let err = RunConfig::from_json(r#"{"train": {"learnig_rate": 0.1}}"#).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("learnig_rate"), "message should name the key: {msg}");
    }

    #[test]
    fn partial_configs_inherit_defaults() {
        let cfg = RunConfig::from_json(r#"{"train": {"epochs": 3}}"#).unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.batch_size, TrainConfig::default().batch_size);
        assert_eq!(cfg.encoder, EncoderConfig::default());
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(RunConfig::from_json(r#"{"train": {"learning_rate": 0.0}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"train": {"scales": [3]}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"train": {"loss": {"erosion_k": 4}}}"#).is_err());
        assert!(
            RunConfig::from_json(r#"{"train": {"loss": {"thresholds": [0.5, 0.4]}}}"#).is_err()
        );
        assert!(RunConfig::from_json(r#"{"encoder": {"n_heads": 3, "channels": 16}}"#).is_err());
    }
}
