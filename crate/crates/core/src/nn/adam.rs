use ndarray::Zip;

use super::{NnError, Result};
use crate::autodiff::Matrix;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.5,
            beta2: 0.9,
            epsilon: 1e-8,
        }
    }
}

/// Adam with bias correction. Moment buffers mirror the parameter list they
/// were created for.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    first: Vec<Matrix>,
    second: Vec<Matrix>,
    step: u64,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &[&Matrix]) -> Self {
        Self {
            config,
            first: params.iter().map(|p| Matrix::zeros(p.dim())).collect(),
            second: params.iter().map(|p| Matrix::zeros(p.dim())).collect(),
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Descends along `grads`.
    pub fn step(&mut self, params: Vec<&mut Matrix>, grads: &[Matrix]) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != self.first.len() {
            return Err(NnError::ParameterCount {
                expected: self.first.len(),
                got: params.len().min(grads.len()),
            });
        }
        for (index, (p, g)) in params.iter().zip(grads).enumerate() {
            let expected = self.first[index].dim();
            for got in [p.dim(), g.dim()] {
                if got != expected {
                    return Err(NnError::ParameterShape {
                        index,
                        expected,
                        got,
                    });
                }
            }
        }
        self.step += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let bias1 = 1.0 - beta1.powi(self.step as i32);
        let bias2 = 1.0 - beta2.powi(self.step as i32);
        for (((p, g), m), v) in params
            .into_iter()
            .zip(grads)
            .zip(self.first.iter_mut())
            .zip(self.second.iter_mut())
        {
            Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let m_hat = *m / bias1;
                let v_hat = *v / bias2;
                *p -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = array![[1.0, -2.0]];
        let mut adam = Adam::new(AdamConfig::default(), &[&p]);
        for _ in 0..3 {
            adam.step(vec![&mut p], &[Matrix::zeros((1, 2))]).unwrap();
        }
        assert_eq!(p, array![[1.0, -2.0]]);
    }

    #[test]
    fn first_step_closed_form() {
        // After one step m_hat = g and v_hat = g^2, so the update is
        // -lr * g / (|g| + eps).
        let cfg = AdamConfig {
            learning_rate: 0.01,
            ..AdamConfig::default()
        };
        let g = array![[0.3, -4.0, 1e-3]];
        let mut p = array![[0.0, 0.0, 0.0]];
        let mut adam = Adam::new(cfg, &[&p]);
        adam.step(vec![&mut p], std::slice::from_ref(&g)).unwrap();
        for (pi, gi) in p.iter().zip(g.iter()) {
            let expected = -0.01 * gi / (gi.abs() + 1e-8);
            assert!((pi - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn shape_mismatch() {
        let mut p = array![[1.0, 2.0]];
        let mut adam = Adam::new(AdamConfig::default(), &[&p]);
        assert!(adam.step(vec![&mut p], &[Matrix::zeros((2, 1))]).is_err());
        assert!(adam.step(vec![], &[]).is_err());
    }

    #[test]
    fn identical_runs_identical_trajectories() {
        let run = || {
            let mut p = array![[0.5, -0.5]];
            let mut adam = Adam::new(AdamConfig::default(), &[&p]);
            for k in 0..20 {
                let g = p.mapv(|v| 2.0 * v + k as f64 * 0.01);
                adam.step(vec![&mut p], &[g]).unwrap();
            }
            p
        };
        assert_eq!(run(), run());
    }
}
