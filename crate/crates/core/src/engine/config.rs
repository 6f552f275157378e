use serde::{Deserialize, Serialize};

use super::EngineError;

/// Architecture of the micro decoder-only transformer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 4,
            n_heads: 4,
            d_model: 64,
            d_ff: 256,
            vocab_size: 4,
            max_seq_len: 64,
        }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<(), EngineError> {
        let counts = [
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(EngineError::InvalidConfig(format!("{name} must be >= 1")));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(EngineError::InvalidConfig(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    #[default]
    Cosine,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Optimisation settings for one fine-tuning phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub global_batch_size: usize,
    pub schedule: Schedule,
    pub warmup_steps: usize,
    pub optimizer: AdamW,
    pub weight_decay: f64,
    pub seed: u64,
    pub precision: Precision,
}

impl Default for TrainConfig {
    /// Desk-scale defaults: the published table with a learning rate that
    /// actually moves a 4-layer model.
    fn default() -> Self {
        Self {
            learning_rate: 3e-3,
            epochs: 4,
            global_batch_size: 16,
            schedule: Schedule::Cosine,
            warmup_steps: 10,
            optimizer: AdamW::default(),
            weight_decay: 0.0,
            seed: 0,
            precision: Precision::F32,
        }
    }
}

impl TrainConfig {
    /// Hyperparameters exactly as published for the 7B/8B runs.
    pub fn paper() -> Self {
        Self {
            learning_rate: 1e-6,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), EngineError> {
        if self.global_batch_size == 0 {
            return Err(EngineError::InvalidConfig("global_batch_size must be >= 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(EngineError::InvalidConfig("learning_rate must be finite and >= 0".into()));
        }
        Ok(())
    }

    /// Learning rate at optimisation step `step` of `total_steps`.
    ///
    /// Linear warmup `lr * (s + 1) / warmup`, then cosine decay from `lr`
    /// towards 0 over the remaining steps.
    pub fn lr_at(&self, step: usize, total_steps: usize) -> f64 {
        let lr = self.learning_rate;
        if step < self.warmup_steps {
            return lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = total_steps.saturating_sub(self.warmup_steps).max(1);
        let t = (step - self.warmup_steps) as f64 / span as f64;
        0.5 * lr * (1.0 + (std::f64::consts::PI * t.min(1.0)).cos())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_invariants() {
        assert!(ModelConfig::default().validate().is_ok());
        let bad = ModelConfig {
            d_model: 10,
            n_heads: 4,
            ..ModelConfig::default()
        };
        assert!(bad.validate().is_err());
        let zero = ModelConfig {
            n_layers: 0,
            ..ModelConfig::default()
        };
        assert!(zero.validate().is_err());
        assert_eq!(ModelConfig::default().head_dim(), 16);
    }

    #[test]
    fn table_defaults() {
        let c = TrainConfig::default();
        assert_eq!((c.epochs, c.global_batch_size, c.warmup_steps), (4, 16, 10));
        assert_eq!(c.weight_decay, 0.0);
        assert_eq!(TrainConfig::paper().learning_rate, 1e-6);
    }

    #[test]
    fn schedule_shape() {
        let c = TrainConfig {
            learning_rate: 1.0,
            warmup_steps: 10,
            ..TrainConfig::default()
        };
        let total = 110;
        for s in 0..10 {
            assert!((c.lr_at(s, total) - (s + 1) as f64 / 10.0).abs() < 1e-15);
        }
        assert!((c.lr_at(10, total) - 1.0).abs() < 1e-15);
        // halfway through the decay
        assert!((c.lr_at(60, total) - 0.5).abs() < 1e-12);
        let mut prev = f64::INFINITY;
        for s in 10..total {
            let lr = c.lr_at(s, total);
            assert!(lr <= prev && lr >= 0.0);
            prev = lr;
        }
        // no warmup
        let c0 = TrainConfig {
            warmup_steps: 0,
            learning_rate: 2.0,
            ..TrainConfig::default()
        };
        assert_eq!(c0.lr_at(0, 5), 2.0);
    }
}
