//! Soft Dice plus cross-entropy with deep supervision.
//!
//! `G` and `P` hold the `J` foreground classes on the channel axis. For rank-5
//! tensors `(B, J, H, W, D)` the voxel count is `B·H·W·D`; for rank-2 `(J, N)`
//! it is `N`.

use factorizer_tensor::{Real, Tensor, Var};

use crate::error::{usage, Result};
use crate::network::{Activation, NetworkOutput};

pub const DICE_EPS: f64 = 1e-5;
pub const LOG_EPS: f64 = 1e-12;
pub const SCALE_WEIGHTS: [f64; 3] = [1.0, 0.5, 0.25];

fn same_shape<T: Real>(g: Var<'_, T>, p: Var<'_, T>, op: &str) -> Result<()> {
    if g.shape() != p.shape() {
        return Err(usage(format!("{op}: target {:?} and prediction {:?} differ", g.shape(), p.shape())));
    }
    Ok(())
}

fn class_axis(shape: &[usize]) -> usize {
    if shape.len() <= 2 {
        0
    } else {
        1
    }
}

/// `1 − (2⟨G,P⟩ + ε) / (‖G‖² + ‖P‖² + ε)`.
pub fn soft_dice_loss<'g, T: Real>(g: Var<'g, T>, p: Var<'g, T>, eps: f64) -> Result<Var<'g, T>> {
    same_shape(g, p, "soft dice")?;
    let eps = T::lit(eps);
    let inter = g.mul(p)?.sum().mul_scalar(T::lit(2.0)).add_scalar(eps);
    let norms = g.mul(g)?.sum().add(p.mul(p)?.sum())?.add_scalar(eps);
    Ok(inter.div(norms)?.neg().add_scalar(T::one()))
}

/// `−(1/N)⟨G, log P⟩` with `P` clamped to `[1e-12, 1]`.
pub fn cross_entropy_loss<'g, T: Real>(g: Var<'g, T>, p: Var<'g, T>) -> Result<Var<'g, T>> {
    same_shape(g, p, "cross entropy")?;
    let shape = g.shape();
    let voxels = shape.iter().product::<usize>() / shape[class_axis(&shape)];
    let logp = p.clamp(T::lit(LOG_EPS), T::one()).ln();
    Ok(g.mul(logp)?.sum().mul_scalar(T::lit(-1.0 / voxels as f64)))
}

/// Foreground probabilities from logits. Softmax logits carry a leading
/// background channel that is dropped after normalization.
pub fn foreground_probabilities<'g, T: Real>(logits: Var<'g, T>, activation: Activation) -> Result<Var<'g, T>> {
    match activation {
        Activation::Sigmoid => Ok(logits.sigmoid()),
        Activation::Softmax => {
            let c = logits.shape()[1];
            if c < 2 {
                return Err(usage("softmax output needs a background and at least one foreground channel"));
            }
            Ok(logits.softmax(1)?.slice(1, 1, c - 1)?)
        }
    }
}

/// Dice plus cross-entropy at one scale. Under sigmoid outputs each channel
/// is a separate binary problem, so the complementary term is included.
pub fn scale_loss<'g, T: Real>(logits: Var<'g, T>, target: &Tensor<T>, activation: Activation) -> Result<Var<'g, T>> {
    let p = foreground_probabilities(logits, activation)?;
    let g = logits.graph().constant(target.clone());
    let dice = soft_dice_loss(g, p, DICE_EPS)?;
    let mut ce = cross_entropy_loss(g, p)?;
    if activation == Activation::Sigmoid {
        let ng = g.neg().add_scalar(T::one());
        let np = p.neg().add_scalar(T::one());
        ce = ce.add(cross_entropy_loss(ng, np)?)?;
    }
    Ok(dice.add(ce)?)
}

/// Weighted sum of per-scale losses; `targets[i]` matches output scale `i`
/// (full resolution first).
pub fn total_loss<'g, T: Real>(output: &NetworkOutput<'g, T>, targets: &[Tensor<T>], activation: Activation) -> Result<Var<'g, T>> {
    let scales: Vec<Var<'g, T>> = std::iter::once(output.logits).chain(output.aux.iter().copied()).collect();
    if targets.len() < scales.len() {
        return Err(usage(format!("{} output scales but only {} targets", scales.len(), targets.len())));
    }
    let mut total: Option<Var<'g, T>> = None;
    for (i, (logits, target)) in scales.iter().zip(targets).enumerate() {
        let mut expect = logits.shape();
        if activation == Activation::Softmax {
            expect[1] -= 1;
        }
        if target.shape() != expect.as_slice() {
            return Err(usage(format!("scale {i}: target {:?} does not match logits {:?}", target.shape(), logits.shape())));
        }
        let term = scale_loss(*logits, target, activation)?.mul_scalar(T::lit(SCALE_WEIGHTS[i]));
        total = Some(match total {
            None => term,
            Some(t) => t.add(term)?,
        });
    }
    Ok(total.expect("at least the full-resolution scale"))
}

/// Halves each spatial axis with a 2³ max-pool, so a class present anywhere
/// in a cell survives.
pub fn max_pool2<T: Real>(t: &Tensor<T>) -> Result<Tensor<T>> {
    let s = t.shape();
    if s.len() != 5 || s[2..].iter().any(|e| e % 2 != 0) {
        return Err(usage(format!("max-pool needs (B, C, H, W, D) with even extents, got {s:?}")));
    }
    let (h, w, d) = (s[2] / 2, s[3] / 2, s[4] / 2);
    let src = t.data();
    let mut out = Vec::with_capacity(t.numel() / 8);
    for bc in 0..s[0] * s[1] {
        for i in 0..h {
            for j in 0..w {
                for k in 0..d {
                    let mut m = T::lit(f64::NEG_INFINITY);
                    for (a, b, c) in (0..8).map(|q| (q >> 2, (q >> 1) & 1, q & 1)) {
                        let v = src[((bc * s[2] + 2 * i + a) * s[3] + 2 * j + b) * s[4] + 2 * k + c];
                        if v > m {
                            m = v;
                        }
                    }
                    out.push(m);
                }
            }
        }
    }
    Ok(Tensor::new(vec![s[0], s[1], h, w, d], out)?)
}

/// Full-resolution target followed by `levels − 1` max-pooled copies.
pub fn target_pyramid<T: Real>(target: &Tensor<T>, levels: usize) -> Result<Vec<Tensor<T>>> {
    let mut out = vec![target.clone()];
    for _ in 1..levels {
        let next = max_pool2(out.last().expect("nonempty"))?;
        out.push(next);
    }
    Ok(out)
}

/// `(J, H, W, D)` foreground indicators for labels `1..=classes`.
pub fn one_hot<T: Real>(labels: &[u8], dims: [usize; 3], classes: usize) -> Result<Tensor<T>> {
    let n = dims.iter().product::<usize>();
    if labels.len() != n {
        return Err(usage(format!("label map has {} voxels, dims {dims:?} imply {n}", labels.len())));
    }
    let mut data = vec![T::zero(); classes * n];
    for (i, &l) in labels.iter().enumerate() {
        if l as usize > classes {
            return Err(usage(format!("label {l} exceeds class count {classes}")));
        }
        if l > 0 {
            data[(l as usize - 1) * n + i] = T::one();
        }
    }
    Ok(Tensor::new(vec![classes, dims[0], dims[1], dims[2]], data)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use factorizer_tensor::Graph;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), v.to_vec()).unwrap()
    }

    #[test]
    fn dice_examples() {
        let g = Graph::new();
        let gt = g.constant(t(&[1, 2], &[1.0, 0.0]));
        let half = g.constant(t(&[1, 2], &[0.5, 0.5]));
        let v = soft_dice_loss(gt, half, DICE_EPS).unwrap().value().item().unwrap();
        let want = 1.0 - (1.0 + 1e-5) / (1.5 + 1e-5);
        assert!((v - want).abs() < 1e-15);
        assert!((v - 1.0 / 3.0).abs() < 1e-5);
        assert!(soft_dice_loss(gt, gt, DICE_EPS).unwrap().value().item().unwrap().abs() < 1e-12);
        let z = g.constant(t(&[1, 2], &[0.0, 0.0]));
        assert_eq!(soft_dice_loss(z, z, DICE_EPS).unwrap().value().item().unwrap(), 0.0);
    }

    #[test]
    fn ce_examples() {
        let g = Graph::new();
        let one = g.constant(t(&[1, 1], &[1.0]));
        let half = g.constant(t(&[1, 1], &[0.5]));
        let v = cross_entropy_loss(one, half).unwrap().value().item().unwrap();
        assert!((v - std::f64::consts::LN_2).abs() < 1e-15);
        let gt = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        assert_eq!(cross_entropy_loss(gt, gt).unwrap().value().item().unwrap(), 0.0);
        // zero probabilities are clamped rather than producing infinities
        let zero = g.constant(t(&[1, 1], &[0.0]));
        let v = cross_entropy_loss(one, zero).unwrap().value().item().unwrap();
        assert!((v - (-(1e-12f64).ln())).abs() < 1e-9);
    }

    #[test]
    fn max_pool_keeps_isolated_voxels() {
        let mut data = vec![0.0; 64];
        data[(3 * 4 + 2) * 4 + 1] = 1.0;
        let pooled = max_pool2(&t(&[1, 1, 4, 4, 4], &data)).unwrap();
        assert_eq!(pooled.shape(), &[1, 1, 2, 2, 2]);
        assert_eq!(pooled.sum(), 1.0);
        assert_eq!(pooled.get(&[0, 0, 1, 1, 0]), Some(1.0));
    }

    #[test]
    fn one_hot_layout() {
        let oh = one_hot::<f32>(&[0, 1, 2, 2], [1, 2, 2], 2).unwrap();
        assert_eq!(oh.data(), &[0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0]);
        assert!(one_hot::<f32>(&[3], [1, 1, 1], 2).is_err());
    }
}
