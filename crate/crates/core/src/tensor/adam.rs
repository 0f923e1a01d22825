use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Decoupled weight decay: `θ ← θ − lr·wd·θ` in addition to the Adam step.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// First and second moment estimates for every parameter.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamState {
    /// Zero-initialised moments matching `params`.
    pub fn new(config: AdamConfig, params: &[Tensor]) -> Self {
        AdamState {
            config,
            step: 0,
            first: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            second: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected update of every parameter from its stored
    /// gradient. Parameters without a gradient are treated as having a zero
    /// gradient (their moments still decay).
    pub fn step(&mut self, params: &mut [Tensor]) -> Result<()> {
        self.step_with_lr(params, self.config.learning_rate)
    }

    pub fn step_with_lr(&mut self, params: &mut [Tensor], lr: f64) -> Result<()> {
        if params.len() != self.first.len() {
            return Err(Error::invalid(
                "adam_step",
                format!("{} parameters, state tracks {}", params.len(), self.first.len()),
            ));
        }
        for (k, p) in params.iter().enumerate() {
            if p.numel() != self.first[k].len() {
                return Err(Error::invalid(
                    "adam_step",
                    format!("parameter {k} has {} elements, moments {}", p.numel(), self.first[k].len()),
                ));
            }
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, epsilon, weight_decay, .. } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for (k, p) in params.iter_mut().enumerate() {
            let (m, v) = (&mut self.first[k], &mut self.second[k]);
            let grad = p.grad.take();
            let data = p.data_mut();
            for i in 0..data.len() {
                let g = grad.as_ref().map_or(0.0, |g| g[i]);
                m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                data[i] -= lr * weight_decay * data[i];
                data[i] -= lr * m_hat / (v_hat.sqrt() + epsilon);
            }
            p.grad = grad;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(values: &[f64]) -> Tensor {
        let mut t = Tensor::new(&[values.len()], values.to_vec()).unwrap();
        t.set_requires_grad(true);
        t
    }

    #[test]
    fn zero_gradient_only_decays() {
        let cfg = AdamConfig { learning_rate: 0.1, weight_decay: 0.01, ..Default::default() };
        let mut p = vec![param(&[2.0, -4.0])];
        p[0].set_grad(vec![0.0, 0.0]).unwrap();
        let mut st = AdamState::new(cfg, &p);
        st.step(&mut p).unwrap();
        let expected = [2.0 * (1.0 - 0.001), -4.0 * (1.0 - 0.001)];
        for (x, e) in p[0].data().iter().zip(expected) {
            assert!((x - e).abs() < 1e-15);
        }
        assert_eq!(st.step_count(), 1);
    }

    #[test]
    fn first_step_closed_form() {
        // After one step m̂ = g and v̂ = g², so Δθ = −lr·g/(|g| + ε).
        let cfg = AdamConfig { learning_rate: 0.01, weight_decay: 0.0, ..Default::default() };
        let grads = [0.3, -2.0, 1e-3];
        let mut p = vec![param(&[1.0, 1.0, 1.0])];
        p[0].set_grad(grads.to_vec()).unwrap();
        let mut st = AdamState::new(cfg, &p);
        st.step(&mut p).unwrap();
        for (x, g) in p[0].data().iter().zip(grads) {
            let expected = 1.0 - 0.01 * g / (g.abs() + 1e-8);
            assert!((x - expected).abs() < 1e-15, "{x} vs {expected}");
        }
    }

    #[test]
    fn converges_on_quadratic() {
        let cfg = AdamConfig { learning_rate: 2e-4 * 50.0, weight_decay: 0.0, ..Default::default() };
        let mut p = vec![param(&[0.0])];
        let mut st = AdamState::new(cfg, &p);
        let mut reached = None;
        for step in 1..=2000 {
            let x = p[0].data()[0];
            p[0].set_grad(vec![2.0 * (x - 3.0)]).unwrap();
            st.step(&mut p).unwrap();
            if (p[0].data()[0] - 3.0).abs() < 0.01 && reached.is_none() {
                reached = Some(step);
            }
        }
        assert!(reached.is_some());
        assert!((p[0].data()[0] - 3.0).abs() < 0.01);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let p = vec![param(&[1.0, 2.0])];
        let mut st = AdamState::new(AdamConfig::default(), &p);
        let mut other = vec![param(&[1.0])];
        assert!(st.step(&mut other).is_err());
    }
}
