//! SGD with momentum and decoupled-from-LN weight decay, plus LR schedules.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::session::{Grads, Owner, ParamStore};
use crate::tensor::Float;

/// `v ← μ·v + (g + wd·w)`, then `w ← w − lr·v`.
pub fn sgd_update<T: Float>(w: &mut [T], g: &[T], v: &mut [T], lr: T, momentum: T, wd: T) {
    for ((w, &g), v) in w.iter_mut().zip(g).zip(v.iter_mut()) {
        *v = momentum * *v + (g + wd * *w);
        *w -= lr * *v;
    }
}

#[derive(Debug, Clone)]
pub struct Sgd<T> {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: HashMap<(Owner, usize), Vec<T>>,
}

impl<T: Float> Sgd<T> {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Sgd { momentum, weight_decay, velocity: HashMap::new() }
    }

    /// Applies `grads` to the trainable tensors of the matching stores.
    /// Decay applies only to tensors flagged for it.
    pub fn step(&mut self, stores: &mut [(Owner, &mut ParamStore<T>)], grads: &Grads<T>, lr: f64) -> Result<()> {
        for key @ (owner, idx) in grads.keys() {
            let store = stores
                .iter_mut()
                .find(|(o, _)| *o == owner)
                .map(|(_, s)| &mut **s)
                .ok_or_else(|| Error::Contract(format!("gradient for unknown owner {owner:?}")))?;
            let p = store.get_mut(idx);
            if !p.trainable {
                continue;
            }
            let g = grads.get(owner, idx).expect("key present");
            let v = self.velocity.entry(key).or_insert_with(|| vec![T::ZERO; g.len()]);
            let wd = if p.decay { self.weight_decay } else { 0.0 };
            sgd_update(p.value.data_mut(), g, v, T::from_f64(lr), T::from_f64(self.momentum), T::from_f64(wd));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Cosine,
    Constant,
}

impl LrSchedule {
    /// Learning rate for `epoch` of `epochs`; cosine decays from `base` toward 0 per epoch.
    pub fn at(self, base: f64, epoch: usize, epochs: usize) -> f64 {
        match self {
            LrSchedule::Constant => base,
            LrSchedule::Cosine => {
                let t = epoch as f64 / epochs.max(1) as f64;
                0.5 * base * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_plain_step() {
        let (mut w, mut v) = (vec![1.0f64], vec![0.0]);
        sgd_update(&mut w, &[1.0], &mut v, 0.1, 0.9, 0.0);
        assert!((w[0] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn momentum_recursion_by_hand() {
        let (mut w, mut v) = (vec![0.0f64], vec![0.0]);
        sgd_update(&mut w, &[2.0], &mut v, 0.5, 0.9, 0.0);
        sgd_update(&mut w, &[2.0], &mut v, 0.5, 0.9, 0.0);
        // v1 = 2, w1 = -1; v2 = 0.9·2 + 2 = 3.8, w2 = -1 - 1.9 = -2.9
        assert!((v[0] - 3.8).abs() < 1e-15);
        assert!((w[0] + 2.9).abs() < 1e-15);
    }

    #[test]
    fn decay_uses_current_weight() {
        let (mut w, mut v) = (vec![2.0f64], vec![0.0]);
        sgd_update(&mut w, &[0.0], &mut v, 1.0, 0.9, 0.5);
        assert!((w[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(LrSchedule::Cosine.at(0.01, 0, 10), 0.01);
        assert!((LrSchedule::Cosine.at(0.01, 5, 10) - 0.005).abs() < 1e-15);
        assert!(LrSchedule::Cosine.at(0.01, 9, 10) > 0.0);
        assert_eq!(LrSchedule::Constant.at(0.01, 9, 10), 0.01);
    }
}
