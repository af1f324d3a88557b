use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 16,
        }
    }
}

impl OptimizerConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        // Zero is allowed so that a run can be made an exact no-op.
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            out.push(format!("optimizer.learning_rate must be a finite value > 0, got {}", self.learning_rate));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                out.push(format!("optimizer.{name} must lie in [0, 1), got {b}"));
            }
        }
        if !(self.eps > 0.0) {
            out.push(format!("optimizer.eps must be > 0, got {}", self.eps));
        }
        if self.batch_size < 2 {
            out.push(format!("optimizer.batch_size must be >= 2, got {}", self.batch_size));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Adam with per-tensor moments keyed by parameter name.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    config: OptimizerConfig,
    steps: u64,
    moments: BTreeMap<String, Moments>,
}

impl Adam {
    pub fn new(config: OptimizerConfig) -> Self {
        Self {
            config,
            steps: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Starts a new step; bias corrections use the incremented count.
    pub fn begin_step(&mut self) {
        self.steps += 1;
    }

    pub fn update(&mut self, name: &str, param: &mut [f64], grad: &[f64]) {
        assert_eq!(param.len(), grad.len(), "gradient length for {name}");
        let c = &self.config;
        let st = self.moments.entry(name.to_string()).or_insert_with(|| Moments {
            m: vec![0.0; grad.len()],
            v: vec![0.0; grad.len()],
        });
        let t = self.steps.max(1) as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (((p, &g), m), v) in param.iter_mut().zip(grad).zip(&mut st.m).zip(&mut st.v) {
            *m = c.beta1 * *m + (1.0 - c.beta1) * g;
            *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= c.learning_rate * m_hat / (v_hat.sqrt() + c.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        // With bias correction the first step is lr * g / (|g| + eps).
        let mut adam = Adam::new(OptimizerConfig::default());
        let mut p = [1.0, -2.0];
        adam.begin_step();
        adam.update("w", &mut p, &[0.3, -4.0]);
        assert!((p[0] - (1.0 - 5e-4 * 0.3 / (0.3 + 1e-8))).abs() < 1e-15);
        assert!((p[1] - (-2.0 + 5e-4 * 4.0 / (4.0 + 1e-8))).abs() < 1e-15);
    }

    #[test]
    fn zero_learning_rate_is_exact_noop() {
        let mut adam = Adam::new(OptimizerConfig {
            learning_rate: 0.0,
            ..OptimizerConfig::default()
        });
        let mut p = [0.1, 1e-300, -7.5];
        for _ in 0..3 {
            adam.begin_step();
            adam.update("w", &mut p, &[1.0, -2.0, 1e10]);
        }
        assert_eq!(p, [0.1, 1e-300, -7.5]);
    }

    #[test]
    fn violations() {
        let bad = OptimizerConfig {
            learning_rate: -1.0,
            beta1: 1.0,
            beta2: -0.1,
            eps: 0.0,
            batch_size: 1,
        };
        assert_eq!(bad.violations().len(), 5);
        let zero = OptimizerConfig {
            learning_rate: 0.0,
            ..OptimizerConfig::default()
        };
        assert_eq!(zero.violations().len(), 1);
    }
}
