use serde::{Deserialize, Serialize};

use crate::error::{config, Result};

/// Layer and lifecycle hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MoeConfig {
    pub d_model: usize,
    /// Hidden width of the global expert.
    pub d_inner: usize,
    pub num_experts: usize,
    pub top_k: usize,
    /// Routed experts use `d_inner / width_factor` hidden units.
    pub width_factor: usize,
    pub num_landmarks: usize,
    /// Residual energy fraction captured by each task expert.
    pub tau: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for MoeConfig {
    fn default() -> Self {
        Self {
            d_model: 8,
            d_inner: 64,
            num_experts: 8,
            top_k: 2,
            width_factor: 16,
            num_landmarks: 5,
            tau: 0.2,
            noise_std: 1.0,
            seed: 0,
        }
    }
}

impl MoeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.d_inner == 0 {
            return Err(config("d_model and d_inner must be positive"));
        }
        if self.num_experts == 0 || self.top_k == 0 || self.top_k > self.num_experts {
            return Err(config(format!(
                "need 1 <= top_k <= num_experts, got top_k = {}, num_experts = {}",
                self.top_k, self.num_experts
            )));
        }
        if self.width_factor == 0 || !self.d_inner.is_multiple_of(self.width_factor) {
            return Err(config(format!(
                "d_inner = {} is not divisible by width_factor = {}",
                self.d_inner, self.width_factor
            )));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(config(format!("tau must lie in (0, 1], got {}", self.tau)));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(config(format!("noise_std must be >= 0, got {}", self.noise_std)));
        }
        Ok(())
    }

    pub fn routed_hidden(&self) -> usize {
        self.d_inner / self.width_factor
    }

    /// Router input: token, pooled sequence, landmark offsets.
    pub fn gate_dim(&self) -> usize {
        2 * self.d_model + 2 * self.num_landmarks
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        let c = MoeConfig::default();
        c.validate().unwrap();
        assert_eq!(c.num_experts, 8);
        assert_eq!(c.width_factor, 16);
        assert_eq!(c.routed_hidden(), 4);
    }

    #[test]
    fn rejects_bad_values() {
        let bad = [
            MoeConfig { top_k: 0, ..Default::default() },
            MoeConfig { top_k: 9, ..Default::default() },
            MoeConfig { d_inner: 60, ..Default::default() },
            MoeConfig { tau: 0.0, ..Default::default() },
            MoeConfig { tau: 1.5, ..Default::default() },
            MoeConfig { noise_std: -1.0, ..Default::default() },
        ];
        for c in bad {
            assert!(c.validate().is_err(), "{c:?}");
        }
    }
}
