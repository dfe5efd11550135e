use serde::{Deserialize, Serialize};

use super::tensor::Tensor2;

/// A trainable tensor with its gradient accumulator and Adam moments.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub value: Tensor2,
    pub grad: Tensor2,
    pub m: Tensor2,
    pub v: Tensor2,
    pub step: u64,
}

impl Param {
    pub fn new(name: impl Into<String>, value: Tensor2) -> Self {
        let (r, c) = value.shape();
        Param {
            name: name.into(),
            value,
            grad: Tensor2::zeros(r, c),
            m: Tensor2::zeros(r, c),
            v: Tensor2::zeros(r, c),
            step: 0,
        }
    }

    pub fn zeros(name: impl Into<String>, rows: usize, cols: usize) -> Self {
        Param::new(name, Tensor2::zeros(rows, cols))
    }

    pub fn shape(&self) -> (usize, usize) {
        self.value.shape()
    }

    pub fn len(&self) -> usize {
        self.value.data().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

/// Anything that owns a fixed, ordered list of parameters.
pub trait ParamSet {
    fn params(&self) -> Vec<&Param>;
    fn params_mut(&mut self) -> Vec<&mut Param>;

    fn zero_grads(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    fn num_parameters(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }
}

/// Adam hyperparameters. Defaults follow the usual framework settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update. Consumes (zeroes) the gradient.
pub fn adam_step(param: &mut Param, cfg: &AdamConfig) {
    param.step += 1;
    let t = param.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let Param { value, grad, m, v, .. } = param;
    for (((x, g), m), v) in value
        .data_mut()
        .iter_mut()
        .zip(grad.data_mut().iter_mut())
        .zip(m.data_mut().iter_mut())
        .zip(v.data_mut().iter_mut())
    {
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * *g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * *g * *g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *x -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        *g = 0.0;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> Param {
        Param::new("s", Tensor2::from_rows(&[vec![v]]))
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = scalar(1.0);
        p.grad.set(0, 0, 0.5);
        adam_step(&mut p, &AdamConfig::default());
        let delta = p.value.get(0, 0) - 1.0;
        let expected = -0.001 * 0.5 / (0.5 + 1e-8);
        assert!((delta - expected).abs() < 1e-15);
        assert!((delta + 0.001).abs() < 1e-10);
        assert_eq!(p.grad.get(0, 0), 0.0);
        assert_eq!(p.step, 1);
    }

    #[test]
    fn zero_grad_on_fresh_param_is_noop() {
        let mut p = scalar(0.3);
        adam_step(&mut p, &AdamConfig::default());
        assert_eq!(p.value.get(0, 0), 0.3);
    }

    #[test]
    fn two_constant_steps_match_hand_trace() {
        // g = 1 both steps.
        // t=1: m=0.1, v=0.001, m̂=1, v̂=1 → Δ = -lr/(1+ε)
        // t=2: m=0.19, v=0.001999, m̂=0.19/0.19=1, v̂=0.001999/0.001999=1 → Δ = -lr/(1+ε)
        let lr = 0.001;
        let eps = 1e-8;
        let m1 = 0.1_f64;
        let v1 = 0.001_f64;
        let x1 = 2.0 - lr * (m1 / 0.1) / ((v1 / 0.001).sqrt() + eps);
        let m2 = 0.9 * m1 + 0.1;
        let v2 = 0.999 * v1 + 0.001;
        let x2 = x1 - lr * (m2 / (1.0 - 0.81)) / ((v2 / (1.0 - 0.998001)).sqrt() + eps);

        let mut p = scalar(2.0);
        for _ in 0..2 {
            p.grad.set(0, 0, 1.0);
            adam_step(&mut p, &AdamConfig::default());
        }
        assert!((p.value.get(0, 0) - x2).abs() < 1e-12);
        assert!((p.m.get(0, 0) - m2).abs() < 1e-15);
        assert!((p.v.get(0, 0) - v2).abs() < 1e-15);
        assert!((x2 - (2.0 - 2.0 * lr / (1.0 + eps))).abs() < 1e-12);
    }

    #[test]
    fn adam_is_bit_deterministic() {
        let mut a = Param::new("a", Tensor2::from_rows(&[vec![0.1, -0.7, 3.0]]));
        a.grad = Tensor2::from_rows(&[vec![0.2, 1e-3, -4.0]]);
        let mut b = a.clone();
        adam_step(&mut a, &AdamConfig::default());
        adam_step(&mut b, &AdamConfig::default());
        assert_eq!(a, b);
    }
}
