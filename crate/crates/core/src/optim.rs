//! Adam over named parameter groups with per-group learning rates.
//!
//! One group per logical parameter block (Gaussian positions, hash tables,
//! the inheritance mask, ...). Groups step independently; there is no
//! learning-rate schedule because stages run at most a few hundred steps.

use crate::error::CoreError;
use crate::Result;

/// Adam state detached from parameter storage, for parameters that live
/// inside another structure (hash tables, MLP weights).
#[derive(Debug, Clone)]
pub struct AdamState {
    pub name: String,
    m: Vec<f64>,
    v: Vec<f64>,
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(name: impl Into<String>, len: usize, lr: f64) -> AdamState {
        AdamState {
            name: name.into(),
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// Hash-grid variant: tiny epsilon keeps sparse, rarely-touched entries
    /// responsive.
    pub fn with_eps(mut self, eps: f64) -> AdamState {
        self.eps = eps;
        self
    }

    /// One bias-corrected Adam update applied in place.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) -> Result<()> {
        if grad.len() != params.len() || params.len() != self.m.len() {
            return Err(CoreError::ShapeMismatch(format!(
                "group '{}': {} grads vs {} params vs {} moments",
                self.name,
                grad.len(),
                params.len(),
                self.m.len()
            )));
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(CoreError::NonFiniteGradient(self.name.clone()));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

/// Named parameter group owning its flat parameter vector.
#[derive(Debug, Clone)]
pub struct ParamGroup {
    pub params: Vec<f64>,
    pub opt: AdamState,
}

impl ParamGroup {
    pub fn new(name: impl Into<String>, params: Vec<f64>, lr: f64) -> ParamGroup {
        let opt = AdamState::new(name, params.len(), lr);
        ParamGroup { params, opt }
    }

    pub fn with_eps(mut self, eps: f64) -> ParamGroup {
        self.opt = self.opt.with_eps(eps);
        self
    }

    pub fn name(&self) -> &str {
        &self.opt.name
    }

    /// One bias-corrected Adam update. The gradient must match the parameter
    /// count and be finite everywhere.
    pub fn adam_step(&mut self, grad: &[f64]) -> Result<()> {
        self.opt.step(&mut self.params, grad)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn zero_grad_on_fresh_state_is_a_noop() {
        let mut g = ParamGroup::new("p", vec![1.0, -2.0, 3.0], 0.1);
        g.adam_step(&[0.0, 0.0, 0.0]).unwrap();
        assert_eq!(g.params, vec![1.0, -2.0, 3.0]);
    }

    #[test]
    fn first_step_moves_by_lr_for_unit_grad() {
        // bias-corrected ratio m̂/√v̂ is exactly 1 for a constant gradient
        let mut g = ParamGroup::new("p", vec![0.5], 0.1);
        g.adam_step(&[1.0]).unwrap();
        assert_relative_eq!(g.params[0], 0.5 - 0.1, epsilon = 1e-6);
    }

    #[test]
    fn converges_on_quadratic_within_100_steps() {
        let mut g = ParamGroup::new("x", vec![1.0], 0.05);
        for _ in 0..100 {
            let x = g.params[0];
            g.adam_step(&[2.0 * x]).unwrap();
        }
        assert!(g.params[0].abs() < 0.05, "ended at {}", g.params[0]);
    }

    #[test]
    fn quadratic_loss_decreases_monotonically_after_transient() {
        // small enough step that the iterate never crosses the optimum
        let mut g = ParamGroup::new("x", vec![1.0], 0.005);
        let mut losses = Vec::new();
        for _ in 0..100 {
            let x = g.params[0];
            losses.push(x * x);
            g.adam_step(&[2.0 * x]).unwrap();
        }
        for w in losses[5..].windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "loss increased: {} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn length_mismatch_and_nonfinite_grad_error() {
        let mut g = ParamGroup::new("named", vec![1.0, 2.0], 0.1);
        assert!(g.adam_step(&[1.0]).is_err());
        match g.adam_step(&[1.0, f64::NAN]) {
            Err(CoreError::NonFiniteGradient(name)) => assert_eq!(name, "named"),
            other => panic!("expected NonFiniteGradient, got {other:?}"),
        }
    }

    #[test]
    fn deterministic_given_identical_inputs() {
        let run = || {
            let mut g = ParamGroup::new("p", vec![0.3, -0.8], 0.01);
            for i in 0..50 {
                let gr = [(i as f64 * 0.1).sin(), (i as f64 * 0.2).cos()];
                g.adam_step(&gr).unwrap();
            }
            g.params
        };
        assert_eq!(run(), run());
    }
}
