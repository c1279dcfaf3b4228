use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OptimizerConfig {
    Sgd {
        learning_rate: f64,
    },
    Adam {
        learning_rate: f64,
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_epsilon")]
        epsilon: f64,
    },
}

fn default_beta1() -> f64 {
    0.9
}

fn default_beta2() -> f64 {
    0.999
}

fn default_epsilon() -> f64 {
    1e-8
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig::adam(0.001)
    }
}

impl OptimizerConfig {
    pub fn sgd(learning_rate: f64) -> Self {
        OptimizerConfig::Sgd { learning_rate }
    }

    pub fn adam(learning_rate: f64) -> Self {
        OptimizerConfig::Adam {
            learning_rate,
            beta1: default_beta1(),
            beta2: default_beta2(),
            epsilon: default_epsilon(),
        }
    }

    pub fn learning_rate(&self) -> f64 {
        match *self {
            OptimizerConfig::Sgd { learning_rate }
            | OptimizerConfig::Adam { learning_rate, .. } => learning_rate,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let lr = self.learning_rate();
        if !(lr.is_finite() && lr > 0.0) {
            return Err(Error::config("learning_rate must be positive"));
        }
        if let OptimizerConfig::Adam {
            beta1,
            beta2,
            epsilon,
            ..
        } = *self
        {
            if !(0.0 < beta1 && beta1 < 1.0 && 0.0 < beta2 && beta2 < 1.0) {
                return Err(Error::config("adam betas must lie in (0, 1)"));
            }
            if epsilon.is_nan() || epsilon <= 0.0 {
                return Err(Error::config("adam epsilon must be positive"));
            }
        }
        Ok(())
    }

    pub fn init(&self, len: usize) -> OptimizerState {
        let moments = match self {
            OptimizerConfig::Sgd { .. } => 0,
            OptimizerConfig::Adam { .. } => len,
        };
        OptimizerState {
            config: *self,
            first_moment: vec![0.0; moments],
            second_moment: vec![0.0; moments],
            step_count: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub config: OptimizerConfig,
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step_count: u64,
}

impl OptimizerState {
    /// Applies one update and returns the new parameters. On error the state
    /// is left untouched.
    pub fn step(&mut self, params: &[f64], grad: &[f64]) -> Result<Vec<f64>> {
        if params.len() != grad.len() {
            return Err(Error::shape(format!(
                "{} parameters for {} gradient entries",
                params.len(),
                grad.len()
            )));
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("optimizer gradient"));
        }
        match self.config {
            OptimizerConfig::Sgd { learning_rate } => {
                self.step_count += 1;
                Ok(params
                    .iter()
                    .zip(grad)
                    .map(|(p, g)| p - learning_rate * g)
                    .collect())
            }
            OptimizerConfig::Adam {
                learning_rate,
                beta1,
                beta2,
                epsilon,
            } => {
                if self.first_moment.len() != params.len() {
                    return Err(Error::shape(format!(
                        "optimizer tracks {} entries, got {}",
                        self.first_moment.len(),
                        params.len()
                    )));
                }
                self.step_count += 1;
                let t = self.step_count as i32;
                let bias1 = 1.0 - beta1.powi(t);
                let bias2 = 1.0 - beta2.powi(t);
                let mut out = Vec::with_capacity(params.len());
                for (i, (&p, &g)) in params.iter().zip(grad).enumerate() {
                    let m = beta1 * self.first_moment[i] + (1.0 - beta1) * g;
                    let v = beta2 * self.second_moment[i] + (1.0 - beta2) * g * g;
                    self.first_moment[i] = m;
                    self.second_moment[i] = v;
                    let m_hat = m / bias1;
                    let v_hat = v / bias2;
                    out.push(p - learning_rate * m_hat / (v_hat.sqrt() + epsilon));
                }
                Ok(out)
            }
        }
    }
}
