//! AdamW with decoupled weight decay and a warmup-plus-cosine schedule.

use factorizer_tensor::{Real, Tensor};

use crate::error::{Error, Result};
use crate::params::ParamStore;

/// Linear warmup from 0 to `base_lr`, then cosine decay to 0 at `total`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub base_lr: f64,
    pub warmup: usize,
    pub total: usize,
}

impl Schedule {
    pub fn lr(&self, step: usize) -> f64 {
        if step < self.warmup {
            return self.base_lr * step as f64 / self.warmup as f64;
        }
        let span = self.total.saturating_sub(self.warmup).max(1);
        let t = (step - self.warmup).min(span) as f64 / span as f64;
        0.5 * self.base_lr * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Completed updates.
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new<T: Real>(store: &ParamStore<T>, weight_decay: f64) -> Self {
        let zeros: Vec<Vec<f64>> = store.entries().iter().map(|e| vec![0.0; e.value.numel()]).collect();
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, t: 0, m: zeros.clone(), v: zeros }
    }

    /// One update. Parameters flagged without decay (norms, biases, the
    /// positional embedding) skip the decay term.
    pub fn step<T: Real>(&mut self, store: &mut ParamStore<T>, grads: &[Tensor<T>], lr: f64) -> Result<()> {
        if grads.len() != store.len() || self.m.len() != store.len() {
            return Err(Error::Structural(format!(
                "{} gradients and {} moment slots for {} parameters",
                grads.len(),
                self.m.len(),
                store.len()
            )));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let ids: Vec<_> = store.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let entry = &store.entries()[i];
            let g = &grads[i];
            if g.shape() != entry.value.shape() {
                return Err(Error::Structural(format!("gradient for `{}` has shape {:?}", entry.name, g.shape())));
            }
            let decay = if entry.decay { 1.0 - lr * self.weight_decay } else { 1.0 };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let mut next = Vec::with_capacity(g.numel());
            for (k, (&p, &gk)) in entry.value.data().iter().zip(g.data()).enumerate() {
                let gk = gk.as_f64();
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * gk;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * gk * gk;
                let mhat = m[k] / bc1;
                let vhat = v[k] / bc2;
                let p = p.as_f64() * decay - lr * mhat / (vhat.sqrt() + self.eps);
                next.push(T::lit(p));
            }
            store.set(id, Tensor::new(entry.value.shape().to_vec(), next)?)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_endpoints() {
        let s = Schedule { base_lr: 1e-3, warmup: 10, total: 100 };
        assert_eq!(s.lr(0), 0.0);
        assert_eq!(s.lr(5), 5e-4);
        assert_eq!(s.lr(10), 1e-3);
        assert!((s.lr(55) - 5e-4).abs() < 1e-15);
        assert!(s.lr(100).abs() < 1e-18);
        assert!(s.lr(99) > 0.0);
    }
}
