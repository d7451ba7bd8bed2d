//! AdamW with decoupled weight decay.

use crate::error::{invalid, Result};
use crate::tensorops::layers::Parameter;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 0.01,
            betas: (0.9, 0.999),
            eps: 1e-8,
        }
    }
}

/// Optimizer state: first and second moments per parameter, in the order the
/// parameters are passed to [`AdamW::step`].
#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    step_count: u64,
    moments: Vec<(Vec<f64>, Vec<f64>)>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step_count: 0,
            moments: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Applies one update using the gradients currently stored in `params`.
    pub fn step(&mut self, params: &mut [&mut Parameter]) -> Result<()> {
        if self.moments.is_empty() {
            self.moments = params
                .iter()
                .map(|p| (vec![0.0; p.value.len()], vec![0.0; p.value.len()]))
                .collect();
        }
        if self.moments.len() != params.len()
            || self
                .moments
                .iter()
                .zip(params.iter())
                .any(|(m, p)| m.0.len() != p.value.len())
        {
            return Err(invalid("parameter list changed between optimizer steps"));
        }
        self.step_count += 1;
        for (p, (m, v)) in params.iter_mut().zip(self.moments.iter_mut()) {
            adamw_step(p, m, v, &self.config, self.step_count);
        }
        Ok(())
    }
}

/// One AdamW update of a single parameter at 1-based step `step_count`:
/// decay `p <- p (1 - lr wd)`, then the bias-corrected Adam step.
pub fn adamw_step(
    p: &mut Parameter,
    m: &mut [f64],
    v: &mut [f64],
    cfg: &AdamWConfig,
    step_count: u64,
) {
    let (b1, b2) = cfg.betas;
    let c1 = 1.0 - b1.powi(step_count as i32);
    let c2 = 1.0 - b2.powi(step_count as i32);
    let decay = 1.0 - cfg.lr * cfg.weight_decay;
    let grad = p.grad.data().to_vec();
    for (i, w) in p.value.data_mut().iter_mut().enumerate() {
        let g = grad[i];
        m[i] = b1 * m[i] + (1.0 - b1) * g;
        v[i] = b2 * v[i] + (1.0 - b2) * g * g;
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        *w = *w * decay - cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensorops::Tensor;

    fn param(values: &[f64]) -> Parameter {
        Parameter::new(
            "p",
            Tensor::new(vec![values.len()], values.to_vec()).unwrap(),
        )
    }

    #[test]
    fn zero_gradient_zero_decay_is_noop() {
        let mut p = param(&[1.0, -2.0]);
        let mut opt = AdamW::new(AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        });
        opt.step(&mut [&mut p]).unwrap();
        assert_eq!(p.value.data(), &[1.0, -2.0]);
    }

    #[test]
    fn first_step_on_quadratic() {
        // f(w) = w^2 at w = 3: g = 6, m_hat = 6, v_hat = 36.
        let mut p = param(&[3.0]);
        p.grad = Tensor::new(vec![1], vec![6.0]).unwrap();
        let cfg = AdamWConfig {
            lr: 0.1,
            weight_decay: 0.0,
            ..AdamWConfig::default()
        };
        let mut opt = AdamW::new(cfg);
        opt.step(&mut [&mut p]).unwrap();
        let expected = 3.0 - 0.1 * 6.0 / (6.0 + 1e-8);
        assert!((p.value.data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn decay_only_shrinks_by_lr_wd() {
        let mut p = param(&[2.0, -4.0]);
        let mut opt = AdamW::new(AdamWConfig {
            lr: 0.01,
            weight_decay: 0.5,
            ..AdamWConfig::default()
        });
        opt.step(&mut [&mut p]).unwrap();
        assert_eq!(p.value.data(), &[2.0 * (1.0 - 0.005), -4.0 * (1.0 - 0.005)]);
    }

    #[test]
    fn parameter_list_must_be_stable() {
        let mut a = param(&[1.0]);
        let mut b = param(&[1.0, 2.0]);
        let mut opt = AdamW::new(AdamWConfig::default());
        opt.step(&mut [&mut a]).unwrap();
        assert!(opt.step(&mut [&mut b]).is_err());
    }
}
