use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::ParamStore;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates per parameter name.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdamState {
    pub step: u64,
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
}

/// One bias-corrected Adam update of every parameter named in `grads`.
/// Parameters absent from `grads` are untouched, moments included.
pub fn adam_step(
    params: &mut ParamStore,
    grads: &BTreeMap<String, Tensor>,
    state: &mut AdamState,
    lr: f64,
    cfg: AdamConfig,
) -> Result<()> {
    for (name, g) in grads {
        let p = params.get(name)?;
        if p.shape() != g.shape() {
            return Err(Error::Shape(format!(
                "gradient for `{name}` has shape {:?}, parameter {:?}",
                g.shape(),
                p.shape()
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (name, g) in grads {
        let p = params.get_mut(name)?;
        let n = p.len();
        let m = state.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
        let v = state.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
        for (((w, gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
            let mhat = *mi / c1;
            let vhat = *vi / c2;
            *w -= lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// Step schedule: `lr` before `decay_point · epochs`, `lr_final` from
/// there on. `epoch` is zero-based.
pub fn lr_at_epoch(epoch: usize, epochs: usize, lr: f64, decay_point: f64, lr_final: f64) -> f64 {
    if (epoch as f64) >= decay_point * epochs as f64 {
        lr_final
    } else {
        lr
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(vals: Vec<f64>) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::vector(vals));
        s
    }

    fn grads(vals: Vec<f64>) -> BTreeMap<String, Tensor> {
        BTreeMap::from([("w".to_string(), Tensor::vector(vals))])
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = store(vec![1.0, -2.0, 0.5]);
        let mut st = AdamState::default();
        adam_step(&mut p, &grads(vec![3.0, -0.01, 1e3]), &mut st, 1e-4, AdamConfig::default()).unwrap();
        let w = p.get("w").unwrap().data();
        assert!((w[0] - (1.0 - 1e-4)).abs() < 1e-10);
        assert!((w[1] - (-2.0 + 1e-4)).abs() < 1e-9);
        assert!((w[2] - (0.5 - 1e-4)).abs() < 1e-10);
    }

    #[test]
    fn zero_gradient_leaves_weights_and_decays_moments() {
        let mut p = store(vec![1.0, 2.0]);
        let mut st = AdamState::default();
        adam_step(&mut p, &grads(vec![1.0, 1.0]), &mut st, 1e-3, AdamConfig::default()).unwrap();
        let m0 = st.m["w"].clone();
        let v0 = st.v["w"].clone();
        adam_step(&mut p, &grads(vec![0.0, 0.0]), &mut st, 1e-3, AdamConfig::default()).unwrap();
        assert!((st.m["w"][0] - 0.9 * m0[0]).abs() < 1e-15);
        assert!((st.v["w"][0] - 0.999 * v0[0]).abs() < 1e-15);

        let mut fresh = store(vec![1.0, 2.0]);
        let mut st = AdamState::default();
        adam_step(&mut fresh, &grads(vec![0.0, 0.0]), &mut st, 1e-3, AdamConfig::default()).unwrap();
        assert_eq!(fresh.get("w").unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn shape_mismatch() {
        let mut p = store(vec![1.0, 2.0]);
        let mut st = AdamState::default();
        assert!(adam_step(&mut p, &grads(vec![1.0]), &mut st, 1e-3, AdamConfig::default()).is_err());
        assert_eq!(st.step, 0);
    }

    #[test]
    fn schedule_boundary() {
        assert_eq!(lr_at_epoch(3999, 5000, 1e-4, 0.8, 1e-5), 1e-4);
        assert_eq!(lr_at_epoch(4000, 5000, 1e-4, 0.8, 1e-5), 1e-5);
    }
}
