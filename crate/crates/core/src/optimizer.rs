//! Adam with per-parameter state keyed by name.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::config("learning_rate must be positive"));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(format!("{name} must lie in [0, 1)")));
            }
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::config("epsilon must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    step: i32,
}

#[derive(Debug, Clone)]
pub struct Adam {
    config: AdamConfig,
    state: HashMap<String, Moments>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            state: HashMap::new(),
        }
    }

    pub fn reset(&mut self) {
        self.state.clear();
    }

    /// Updates `param` in place. Frozen parameters are left untouched.
    pub fn step(&mut self, name: &str, param: &mut Tensor, grad: &[f64]) -> Result<()> {
        if !param.requires_grad {
            return Ok(());
        }
        if grad.len() != param.len() {
            return Err(Error::dim(format!(
                "gradient of {} entries for `{name}` with {} entries",
                grad.len(),
                param.len()
            )));
        }
        if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
            return Err(Error::Numerical(format!(
                "non-finite gradient {} at `{name}`[{i}]",
                grad[i]
            )));
        }
        let c = self.config;
        let st = self.state.entry(name.to_string()).or_insert_with(|| Moments {
            m: vec![0.0; grad.len()],
            v: vec![0.0; grad.len()],
            step: 0,
        });
        st.step += 1;
        let bc1 = 1.0 - c.beta1.powi(st.step);
        let bc2 = 1.0 - c.beta2.powi(st.step);
        for (i, p) in param.data_mut().iter_mut().enumerate() {
            let g = grad[i];
            st.m[i] = c.beta1 * st.m[i] + (1.0 - c.beta1) * g;
            st.v[i] = c.beta2 * st.v[i] + (1.0 - c.beta2) * g * g;
            let mhat = st.m[i] / bc1;
            let vhat = st.v[i] / bc2;
            *p -= c.learning_rate * mhat / (vhat.sqrt() + c.epsilon);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut opt = Adam::new(AdamConfig::default());
        let mut p = Tensor::full(&[3], 0.5).trainable();
        for _ in 0..5 {
            opt.step("p", &mut p, &[0.0; 3]).unwrap();
        }
        assert_eq!(p.data(), &[0.5; 3]);
    }

    #[test]
    fn frozen_parameter_is_never_updated() {
        let mut opt = Adam::new(AdamConfig::default());
        let mut p = Tensor::full(&[2], 1.0);
        opt.step("p", &mut p, &[1.0, -1.0]).unwrap();
        assert_eq!(p.data(), &[1.0, 1.0]);
    }

    #[test]
    fn quadratic_converges() {
        // f(x) = (x − 1)², minimum at 1.
        let mut opt = Adam::new(AdamConfig { learning_rate: 0.01, ..AdamConfig::default() });
        let mut x = Tensor::scalar(0.0).trainable();
        for _ in 0..500 {
            let g = 2.0 * (x.data()[0] - 1.0);
            opt.step("x", &mut x, &[g]).unwrap();
        }
        assert!((x.data()[0] - 1.0).abs() < 1e-3, "{}", x.data()[0]);
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut opt = Adam::new(AdamConfig::default());
        let mut p = Tensor::zeros(&[2]).trainable();
        let err = opt.step("w", &mut p, &[0.0, f64::NAN]).unwrap_err();
        assert!(err.to_string().contains("`w`[1]"));
    }
}
