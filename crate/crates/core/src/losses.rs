//! Segmentation losses: smoothed Dice, BCE on logits, and their 1:3 blend.

use crate::autodiff::{Graph, Var};
use crate::error::{dim_err, Error, Result};
use crate::tensor::Tensor;

pub const DICE_WEIGHT: f64 = 1.0;
pub const BCE_WEIGHT: f64 = 3.0;
/// Additive smoothing in both numerator and denominator of the Dice ratio.
pub const DICE_SMOOTH: f64 = 1.0;

/// `1 - (2 sum(x*y) + 1) / (sum(x) + sum(y) + 1)` over probabilities `x`.
pub fn dice_loss(g: &mut Graph, pred_prob: Var, target: &Tensor) -> Result<Var> {
    if g.shape(pred_prob) != target.shape() {
        return Err(dim_err!("dice: prediction {:?} vs target {:?}", g.shape(pred_prob), target.shape()));
    }
    if let Some(v) = g.value(pred_prob).data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Domain(format!("dice needs probabilities in [0,1], found {v}")));
    }
    let sum_y: f64 = target.data().iter().sum();
    let y = g.constant(target.clone());
    let prod = g.mul(pred_prob, y)?;
    let inter = g.sum(prod);
    let sum_x = g.sum(pred_prob);
    let num = g.scale(inter, 2.0);
    let num = g.add_scalar(num, DICE_SMOOTH);
    let den = g.add_scalar(sum_x, sum_y + DICE_SMOOTH);
    let ratio = g.div(num, den)?;
    let neg = g.scale(ratio, -1.0);
    Ok(g.add_scalar(neg, 1.0))
}

/// Mean binary cross-entropy of `sigmoid(logits)` against `target`.
pub fn bce_sigmoid_loss(g: &mut Graph, logits: Var, target: &Tensor) -> Result<Var> {
    g.bce_with_logits(logits, target)
}

/// `(1*dice + 3*bce) / 4`.
pub fn composite(dice: f64, bce: f64) -> f64 {
    (DICE_WEIGHT * dice + BCE_WEIGHT * bce) / (DICE_WEIGHT + BCE_WEIGHT)
}

pub fn composite_loss(g: &mut Graph, dice: Var, bce: Var) -> Result<Var> {
    let total = DICE_WEIGHT + BCE_WEIGHT;
    let d = g.scale(dice, DICE_WEIGHT / total);
    let b = g.scale(bce, BCE_WEIGHT / total);
    g.add(d, b)
}

/// The three loss nodes of one segmentation batch.
#[derive(Clone, Copy, Debug)]
pub struct SegLoss {
    pub dice: Var,
    pub bce: Var,
    pub composite: Var,
}

/// Dice on `sigmoid(logits)`, BCE on `logits`, and their composite.
pub fn segmentation_loss(g: &mut Graph, logits: Var, target: &Tensor) -> Result<SegLoss> {
    let prob = g.sigmoid(logits);
    let dice = dice_loss(g, prob, target)?;
    let bce = bce_sigmoid_loss(g, logits, target)?;
    let composite = composite_loss(g, dice, bce)?;
    Ok(SegLoss { dice, bce, composite })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;

    fn dice_of(x: &[f64], y: &[f64]) -> f64 {
        let mut g = Graph::new();
        let xv = g.constant(Tensor::new(&[x.len()], x.to_vec()).unwrap());
        let l = dice_loss(&mut g, xv, &Tensor::new(&[y.len()], y.to_vec()).unwrap()).unwrap();
        g.value(l).item()
    }

    fn bce_of(z: f64, y: f64) -> f64 {
        let mut g = Graph::new();
        let zv = g.constant(Tensor::scalar(z));
        let l = bce_sigmoid_loss(&mut g, zv, &Tensor::scalar(y)).unwrap();
        g.value(l).item()
    }

    #[test]
    fn dice_examples() {
        assert!(dice_of(&[1.; 4], &[1.; 4]).abs() < 1e-12);
        assert!(dice_of(&[0.; 4], &[0.; 4]).abs() < 1e-12);
        assert!((dice_of(&[0.5; 4], &[1.; 4]) - 2.0 / 7.0).abs() < 1e-12);
    }

    #[test]
    fn dice_errors() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(&[2], vec![0.5, 1.5]).unwrap());
        assert!(matches!(dice_loss(&mut g, x, &Tensor::new(&[2], vec![1., 0.]).unwrap()), Err(Error::Domain(_))));
        assert!(matches!(dice_loss(&mut g, x, &Tensor::new(&[3], vec![1., 0., 0.]).unwrap()), Err(Error::Dimension(_))));
    }

    #[test]
    fn bce_examples() {
        assert!((bce_of(0.0, 1.0) - 2f64.ln()).abs() < 1e-12);
        assert!(bce_of(30.0, 1.0) < 1e-12);
        assert!((bce_of(3f64.ln(), 0.0) - 4f64.ln()).abs() < 1e-12);
        for z in [1e6, -1e6] {
            for y in [0.0, 1.0] {
                assert!(bce_of(z, y).is_finite());
            }
        }
    }

    #[test]
    fn composite_examples() {
        assert_eq!(composite(0.0, 0.0), 0.0);
        assert!((composite(0.0, 2f64.ln()) - 3.0 * 2f64.ln() / 4.0).abs() < 1e-12);
        assert_eq!(composite(1.0, 1.0), 1.0);
    }

    #[test]
    fn loss_gradients_check() {
        let target = Tensor::new(&[1, 1, 2, 3], vec![1., 0., 1., 1., 0., 0.]).unwrap();
        let z = Tensor::new(&[1, 1, 2, 3], vec![0.3, -1.2, 2.0, -0.4, 0.9, 0.1]).unwrap();
        let err = grad_check(|g, x| Ok(segmentation_loss(g, x, &target)?.composite), &z, 1e-5).unwrap();
        assert!(err < 1e-8, "{err}");
    }
}
