//! Log-scaled Dice + binary cross-entropy loss.

use crate::error::{NnError, Result};
use crate::real::Real;
use crate::tensor::FeatureMap;

pub const LOSS_EPS: f64 = 1e-7;
pub const PROB_CLIP: f64 = 1e-7;
pub const DICE_SMOOTH: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossParts {
    pub value: f64,
    pub mean_dice: f64,
    pub bce: f64,
}

/// `ln((1 - mean soft Dice + BCE) / 2 + eps)` and its gradient with respect
/// to `pred`. BCE is per-class binary, averaged over voxels and channels.
pub fn dice_bce<T: Real>(pred: &FeatureMap<T>, target: &FeatureMap<T>) -> Result<(LossParts, FeatureMap<T>)> {
    if !pred.same_shape(target) {
        return Err(NnError::ShapeMismatch(format!(
            "prediction {}x{:?} vs target {}x{:?}",
            pred.channels, pred.dims, target.channels, target.dims
        )));
    }
    check_one_hot(target)?;
    let n = pred.voxels();
    let c = pred.channels;
    let total = (n * c) as f64;
    let (lo, hi) = (PROB_CLIP, 1.0 - PROB_CLIP);

    let mut dice = Vec::with_capacity(c);
    let mut denom = Vec::with_capacity(c);
    let mut bce = 0.0;
    for k in 0..c {
        let (mut inter, mut sp, mut sy) = (0.0, 0.0, 0.0);
        for (p, y) in pred.channel(k).iter().zip(target.channel(k)) {
            let (p, y) = (p.to_f64().unwrap(), y.to_f64().unwrap());
            inter += p * y;
            sp += p;
            sy += y;
            let q = p.clamp(lo, hi);
            bce -= y * q.ln() + (1.0 - y) * (1.0 - q).ln();
        }
        let d = sp + sy + DICE_SMOOTH;
        dice.push((2.0 * inter + DICE_SMOOTH) / d);
        denom.push(d);
    }
    bce /= total;
    let mean_dice = dice.iter().sum::<f64>() / c as f64;
    let arg = (1.0 - mean_dice + bce) / 2.0 + LOSS_EPS;
    let value = arg.ln();

    let scale = 0.5 / arg;
    let mut grad = FeatureMap::zeros(c, pred.dims);
    for k in 0..c {
        let ddice = -1.0 / c as f64;
        let (dk, dn) = (dice[k], denom[k]);
        let out = &mut grad.data[k * n..(k + 1) * n];
        for ((g, p), y) in out.iter_mut().zip(pred.channel(k)).zip(target.channel(k)) {
            let (p, y) = (p.to_f64().unwrap(), y.to_f64().unwrap());
            let mut d = ddice * (2.0 * y - dk) / dn;
            if p > lo && p < hi {
                d -= (y / p - (1.0 - y) / (1.0 - p)) / total;
            }
            *g = T::of(scale * d);
        }
    }
    Ok((LossParts { value, mean_dice, bce }, grad))
}

fn check_one_hot<T: Real>(target: &FeatureMap<T>) -> Result<()> {
    let n = target.voxels();
    for v in 0..n {
        let mut ones = 0;
        for k in 0..target.channels {
            let y = target.data[k * n + v];
            if y == T::one() {
                ones += 1;
            } else if y != T::zero() {
                return Err(NnError::NotOneHot(v));
            }
        }
        if ones != 1 {
            return Err(NnError::NotOneHot(v));
        }
    }
    Ok(())
}

/// One-hot encoding of class indices.
pub fn one_hot<T: Real>(classes: &[usize], count: usize, dims: [usize; 3]) -> Result<FeatureMap<T>> {
    let n: usize = dims.iter().product();
    if classes.len() != n {
        return Err(NnError::ShapeMismatch(format!("{} labels for dims {dims:?}", classes.len())));
    }
    let mut out = FeatureMap::zeros(count, dims);
    for (v, &k) in classes.iter().enumerate() {
        if k >= count {
            return Err(NnError::InvalidParameter(format!("class {k} >= {count}")));
        }
        out.data[k * n + v] = T::one();
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_prediction_is_strongly_negative() {
        let y = one_hot::<f64>(&[0, 1, 1, 0, 2, 2, 1, 0], 3, [2, 2, 2]).unwrap();
        let (l, _) = dice_bce(&y, &y).unwrap();
        assert!(l.value.is_finite());
        assert!(l.value < -14.0, "{}", l.value);
    }

    #[test]
    fn rejects_soft_targets() {
        let p = FeatureMap::<f64>::new(2, [1, 1, 1], vec![0.5, 0.5]).unwrap();
        assert!(matches!(dice_bce(&p, &p), Err(NnError::NotOneHot(0))));
        let y = one_hot::<f64>(&[0], 2, [1, 1, 1]).unwrap();
        let q = FeatureMap::<f64>::new(3, [1, 1, 1], vec![0.3; 3]).unwrap();
        assert!(dice_bce(&q, &y).is_err());
    }
}
