//! Adam optimizer.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates, one buffer per parameter.
#[derive(Debug, Clone, Default)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl AdamState {
    pub fn new() -> Self {
        AdamState::default()
    }

    pub fn steps(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update. Each parameter's gradient is read from
/// its `grad` buffer; parameters without a gradient are left untouched.
pub fn adam_step(params: &mut [&mut Tensor], state: &mut AdamState, hp: AdamParams) -> Result<()> {
    if !(hp.lr >= 0.0 && hp.lr.is_finite()) {
        return Err(Error::Config(format!("learning rate must be finite and >= 0, got {}", hp.lr)));
    }
    if state.m.is_empty() {
        state.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
        state.v = state.m.clone();
    }
    if state.m.len() != params.len() {
        return Err(Error::Usage("adam state was built for a different parameter list".into()));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - hp.beta1.powi(t);
    let bc2 = 1.0 - hp.beta2.powi(t);
    for (i, p) in params.iter_mut().enumerate() {
        let Some(g) = p.grad().map(<[f64]>::to_vec) else { continue };
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        if m.len() != g.len() {
            return Err(Error::Usage("adam state shape mismatch".into()));
        }
        for (j, w) in p.data_mut().iter_mut().enumerate() {
            m[j] = hp.beta1 * m[j] + (1.0 - hp.beta1) * g[j];
            v[j] = hp.beta2 * v[j] + (1.0 - hp.beta2) * g[j] * g[j];
            let mh = m[j] / bc1;
            let vh = v[j] / bc2;
            *w -= hp.lr * mh / (vh.sqrt() + hp.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut p = Tensor::new(vec![2], vec![1.0, -1.0]).unwrap();
        p.set_grad(vec![0.3, -2.0]).unwrap();
        let mut st = AdamState::new();
        adam_step(&mut [&mut p], &mut st, AdamParams { lr: 0.1, ..Default::default() }).unwrap();
        assert!((p.data()[0] - 0.9).abs() < 1e-6);
        assert!((p.data()[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn zero_lr_is_identity() {
        let mut p = Tensor::new(vec![2], vec![1.0, -1.0]).unwrap();
        p.set_grad(vec![0.3, -2.0]).unwrap();
        let before = p.data().to_vec();
        let mut st = AdamState::new();
        adam_step(&mut [&mut p], &mut st, AdamParams { lr: 0.0, ..Default::default() }).unwrap();
        assert_eq!(p.data(), &before[..]);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut p = Tensor::new(vec![1], vec![5.0]).unwrap();
        let mut st = AdamState::new();
        for _ in 0..2000 {
            let g = 2.0 * (p.data()[0] - 2.0);
            p.set_grad(vec![g]).unwrap();
            adam_step(&mut [&mut p], &mut st, AdamParams { lr: 0.05, ..Default::default() }).unwrap();
        }
        assert!((p.data()[0] - 2.0).abs() < 1e-3);
    }
}
