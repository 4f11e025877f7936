//! Adam and Adamax updates over a [`ParamStore`], and the training schedule.

use serde::{Deserialize, Serialize};

use crate::error::{NnError, Result};
use crate::loss::{self, LossParts};
use crate::network::{Network, ParamStore};
use crate::real::Real;
use crate::tensor::FeatureMap;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const OPT_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Adam,
    Adamax,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Steps with Adam (one case per step).
    pub adam_epochs: usize,
    /// Steps with Adamax after the Adam phase.
    pub adamax_epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Probability of drawing from the primary set during the Adamax phase.
    pub mix_probability: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { adam_epochs: 2000, adamax_epochs: 1000, learning_rate: 1e-3, seed: 0, mix_probability: 0.5 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.mix_probability) {
            return Err(NnError::InvalidParameter(format!("mix_probability {} outside [0, 1]", self.mix_probability)));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(NnError::InvalidParameter(format!("learning_rate {}", self.learning_rate)));
        }
        Ok(())
    }

    /// Optimizer for a zero-based step index.
    pub fn phase(&self, step: usize) -> Optimizer {
        if step < self.adam_epochs {
            Optimizer::Adam
        } else {
            Optimizer::Adamax
        }
    }

    pub fn total_steps(&self) -> usize {
        self.adam_epochs + self.adamax_epochs
    }
}

fn check_grads<T: Real>(store: &ParamStore<T>) -> Result<()> {
    match store.grads.iter().position(|g| !g.is_finite()) {
        Some(i) => Err(NnError::NonFiniteGradient(i)),
        None => Ok(()),
    }
}

pub fn adam_step<T: Real>(store: &mut ParamStore<T>, lr: f64) -> Result<()> {
    check_grads(store)?;
    store.step += 1;
    let t = store.step as i32;
    let (b1, b2) = (T::of(BETA1), T::of(BETA2));
    let c1 = T::of(1.0 - BETA1.powi(t));
    let c2 = T::of(1.0 - BETA2.powi(t));
    let (lr, eps) = (T::of(lr), T::of(OPT_EPS));
    let ParamStore { params, grads, first_moment, second_moment, .. } = store;
    for (((w, &g), m), v) in params.iter_mut().zip(grads.iter()).zip(first_moment.iter_mut()).zip(second_moment.iter_mut()) {
        *m = b1 * *m + (T::one() - b1) * g;
        *v = b2 * *v + (T::one() - b2) * g * g;
        let mhat = *m / c1;
        let vhat = *v / c2;
        *w -= lr * mhat / (vhat.sqrt() + eps);
    }
    Ok(())
}

/// Adam variant whose denominator is the exponentially weighted infinity norm
/// of past gradients.
pub fn adamax_step<T: Real>(store: &mut ParamStore<T>, lr: f64) -> Result<()> {
    check_grads(store)?;
    store.step += 1;
    let t = store.step as i32;
    let (b1, b2) = (T::of(BETA1), T::of(BETA2));
    let step = T::of(lr / (1.0 - BETA1.powi(t)));
    let eps = T::of(OPT_EPS);
    let ParamStore { params, grads, first_moment, second_moment, .. } = store;
    for (((w, &g), m), u) in params.iter_mut().zip(grads.iter()).zip(first_moment.iter_mut()).zip(second_moment.iter_mut()) {
        *m = b1 * *m + (T::one() - b1) * g;
        *u = (b2 * *u).max(g.abs());
        *w -= step * *m / (*u + eps);
    }
    Ok(())
}

pub fn step<T: Real>(store: &mut ParamStore<T>, optimizer: Optimizer, lr: f64) -> Result<()> {
    match optimizer {
        Optimizer::Adam => adam_step(store, lr),
        Optimizer::Adamax => adamax_step(store, lr),
    }
}

/// Forward, loss, backward and one optimizer update on a single case.
/// Parameters are left untouched when the loss or a gradient is not finite.
pub fn train_step<T: Real>(
    net: &mut Network<T>,
    x: &FeatureMap<T>,
    target: &FeatureMap<T>,
    optimizer: Optimizer,
    lr: f64,
    seed: u64,
) -> Result<LossParts> {
    let tape = net.forward_train(x, seed)?;
    let (parts, dprobs) = loss::dice_bce(tape.probs(), target)?;
    if !parts.value.is_finite() {
        return Err(NnError::NonFinite(0));
    }
    net.store.zero_grads();
    net.backward(&tape, &dprobs, false)?;
    step(&mut net.store, optimizer, lr)?;
    Ok(parts)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(w: f64, g: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new(vec![w], vec![]);
        s.grads[0] = g;
        s
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut s = ParamStore::new(vec![0.5f32, -2.0, 3.0], vec![]);
        adam_step(&mut s, 1e-3).unwrap();
        adamax_step(&mut s, 1e-3).unwrap();
        assert_eq!(s.params, vec![0.5, -2.0, 3.0]);
    }

    #[test]
    fn nan_gradient_is_rejected() {
        let mut s = scalar(1.0, f64::NAN);
        assert!(matches!(adam_step(&mut s, 1e-3), Err(NnError::NonFiniteGradient(0))));
        assert_eq!(s.step, 0);
    }

    #[test]
    fn phases_follow_the_schedule() {
        let c = TrainConfig { adam_epochs: 2, adamax_epochs: 1, ..Default::default() };
        assert_eq!((0..3).map(|i| c.phase(i)).collect::<Vec<_>>(), vec![Optimizer::Adam, Optimizer::Adam, Optimizer::Adamax]);
        assert!(TrainConfig { mix_probability: 1.5, ..Default::default() }.validate().is_err());
    }
}
