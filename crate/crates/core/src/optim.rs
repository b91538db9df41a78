use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::scalar::Scalar;

fn trainable_grads_present<T: Scalar>(params: &ParamSet<T>) -> Result<()> {
    match params.iter().find(|p| !p.frozen && p.tensor.grad().is_none()) {
        Some(p) => Err(Error::MissingGrad(p.name.clone())),
        None => Ok(()),
    }
}

/// Plain gradient descent on every non-frozen parameter; clears all gradients.
pub fn sgd_step<T: Scalar>(params: &mut ParamSet<T>, lr: f64) -> Result<()> {
    trainable_grads_present(params)?;
    let lr = T::lit(lr);
    for p in params.iter_mut().filter(|p| !p.frozen) {
        let g = p.tensor.take_grad().expect("checked above");
        for (w, g) in p.tensor.data_mut().iter_mut().zip(g) {
            *w -= lr * g;
        }
    }
    params.zero_grad();
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moment estimates, keyed by parameter name. Entries are
/// created lazily on the first update of a non-frozen parameter.
#[derive(Clone, Debug, Default)]
pub struct AdamState<T> {
    moments: HashMap<String, (Vec<T>, Vec<T>)>,
    steps: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new() -> Self {
        Self { moments: HashMap::new(), steps: 0 }
    }

    pub fn has_state(&self, name: &str) -> bool {
        self.moments.contains_key(name)
    }

    /// Names of the parameters that have moment estimates, sorted.
    pub fn names(&self) -> Vec<String> {
        let mut v: Vec<String> = self.moments.keys().cloned().collect();
        v.sort();
        v
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Takes one bias-corrected step, advancing the internal step counter.
    pub fn step(&mut self, params: &mut ParamSet<T>, cfg: &AdamConfig) -> Result<()> {
        self.steps += 1;
        adam_step(params, self, cfg, self.steps)
    }
}

/// One Adam update using `step_count` (1-based) for bias correction.
pub fn adam_step<T: Scalar>(
    params: &mut ParamSet<T>,
    state: &mut AdamState<T>,
    cfg: &AdamConfig,
    step_count: u64,
) -> Result<()> {
    if step_count == 0 {
        return Err(Error::Precondition("adam step count is 1-based".into()));
    }
    trainable_grads_present(params)?;
    let t = step_count as i32;
    let c1 = T::lit(1.0 - cfg.beta1.powi(t));
    let c2 = T::lit(1.0 - cfg.beta2.powi(t));
    let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
    let (lr, eps) = (T::lit(cfg.lr), T::lit(cfg.eps));
    for p in params.iter_mut().filter(|p| !p.frozen) {
        let g = p.tensor.take_grad().expect("checked above");
        let n = g.len();
        let (m, v) = state
            .moments
            .entry(p.name.clone())
            .or_insert_with(|| (vec![T::zero(); n], vec![T::zero(); n]));
        for (((w, g), m), v) in p.tensor.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
            *m = b1 * *m + (T::one() - b1) * g;
            *v = b2 * *v + (T::one() - b2) * g * g;
            let mhat = *m / c1;
            let vhat = *v / c2;
            *w -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    params.zero_grad();
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn single(value: f32, grad: f32) -> ParamSet<f32> {
        let mut ps = ParamSet::new();
        ps.insert("p", Tensor::scalar(value)).unwrap();
        ps.get_mut("p").unwrap().accumulate_grad(&[grad]).unwrap();
        ps
    }

    #[test]
    fn sgd_scalar_update() {
        let mut ps = single(1.0, 2.0);
        sgd_step(&mut ps, 0.1).unwrap();
        assert!((ps.get("p").unwrap().item() - 0.8).abs() < 1e-7);
        assert!(ps.get("p").unwrap().grad().is_none());
    }

    #[test]
    fn frozen_is_bit_identical() {
        let mut ps = single(0.3712, 5.0);
        ps.insert("q", Tensor::scalar(1.0)).unwrap();
        ps.get_mut("q").unwrap().accumulate_grad(&[1.0]).unwrap();
        ps.set_frozen("p", true).unwrap();
        let before = ps.get("p").unwrap().item().to_bits();
        let mut st = AdamState::new();
        for _ in 0..5 {
            ps.get_mut("p").unwrap().accumulate_grad(&[5.0]).unwrap();
            if ps.get("q").unwrap().grad().is_none() {
                ps.get_mut("q").unwrap().accumulate_grad(&[1.0]).unwrap();
            }
            st.step(&mut ps, &AdamConfig::default()).unwrap();
        }
        assert_eq!(ps.get("p").unwrap().item().to_bits(), before);
        assert!(!st.has_state("p"));
        assert!(st.has_state("q"));
    }

    #[test]
    fn missing_grad_is_reported() {
        let mut ps = ParamSet::<f32>::new();
        ps.insert("w", Tensor::scalar(1.0)).unwrap();
        assert!(matches!(sgd_step(&mut ps, 0.1), Err(Error::MissingGrad(_))));
        let mut st = AdamState::new();
        assert!(matches!(st.step(&mut ps, &AdamConfig::default()), Err(Error::MissingGrad(_))));
    }
}
