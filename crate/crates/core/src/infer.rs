//! Sliding-window inference and dataset evaluation.

use factorizer_tensor::{Graph, Real, Tensor};

use crate::data::VolumeSample;
use crate::error::{usage, Result};
use crate::loss::foreground_probabilities;
use crate::metrics::{Mask, MetricsReport};
use crate::network::{Activation, Factorizer};
use crate::params::Ctx;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlendMode {
    /// Plain average of every tile covering a voxel.
    Constant,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InferConfig {
    pub window: [usize; 3],
    pub overlap: f64,
    pub threshold: f64,
    pub blend: BlendMode,
}

impl InferConfig {
    pub fn new(window: [usize; 3]) -> Self {
        Self { window, overlap: 0.5, threshold: 0.5, blend: BlendMode::Constant }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.overlap) {
            return Err(crate::Error::Config(format!("overlap must lie in [0, 1), got {}", self.overlap)));
        }
        if self.window.contains(&0) {
            return Err(crate::Error::Config("window extents must be positive".into()));
        }
        Ok(())
    }
}

/// Tile origins along one axis: a regular grid with stride
/// `window·(1 − overlap)`, plus a final tile flush with the far edge.
pub fn tile_corners(extent: usize, window: usize, overlap: f64) -> Vec<usize> {
    if extent <= window {
        return vec![0];
    }
    let stride = ((window as f64 * (1.0 - overlap)).floor() as usize).max(1);
    let mut corners = vec![0];
    let mut c = 0;
    while c + window < extent {
        c = (c + stride).min(extent - window);
        corners.push(c);
    }
    corners
}

/// Mirror padding (edge voxel not repeated) up to `target` extents.
fn reflect_pad(image: &Tensor<f32>, target: [usize; 3]) -> Result<Tensor<f32>> {
    let s = image.shape();
    let dims = [s[1], s[2], s[3]];
    let reflect = |p: usize, n: usize| -> usize {
        if n == 1 {
            return 0;
        }
        let period = 2 * (n - 1);
        let q = p % period;
        if q < n {
            q
        } else {
            period - q
        }
    };
    let src = image.data();
    let mut out = Vec::with_capacity(s[0] * target.iter().product::<usize>());
    for c in 0..s[0] {
        for i in 0..target[0] {
            for j in 0..target[1] {
                for k in 0..target[2] {
                    let (a, b, d) = (reflect(i, dims[0]), reflect(j, dims[1]), reflect(k, dims[2]));
                    out.push(src[((c * dims[0] + a) * dims[1] + b) * dims[2] + d]);
                }
            }
        }
    }
    Ok(Tensor::new(vec![s[0], target[0], target[1], target[2]], out)?)
}

fn crop_channels(t: &Tensor<f32>, corner: [usize; 3], size: [usize; 3]) -> Result<Tensor<f32>> {
    let s = t.shape();
    let mut out = Vec::with_capacity(s[0] * size.iter().product::<usize>());
    for c in 0..s[0] {
        for i in 0..size[0] {
            for j in 0..size[1] {
                let row = ((c * s[1] + corner[0] + i) * s[2] + corner[1] + j) * s[3] + corner[2];
                out.extend_from_slice(&t.data()[row..row + size[2]]);
            }
        }
    }
    Ok(Tensor::new(vec![s[0], size[0], size[1], size[2]], out)?)
}

/// Averaged probabilities of the foreground classes over overlapping tiles.
pub struct Prediction {
    /// `(J, H, W, D)`.
    pub probabilities: Tensor<f32>,
    pub threshold: f64,
    pub activation: Activation,
}

impl Prediction {
    pub fn dims(&self) -> [usize; 3] {
        let s = self.probabilities.shape();
        [s[1], s[2], s[3]]
    }

    pub fn classes(&self) -> usize {
        self.probabilities.shape()[0]
    }

    /// Voxels of class `class` (1-based) at or above the threshold.
    pub fn mask(&self, class: usize) -> Mask {
        let n = self.dims().iter().product::<usize>();
        let p = &self.probabilities.data()[(class - 1) * n..class * n];
        Mask { dims: self.dims(), data: p.iter().map(|&v| v as f64 >= self.threshold).collect() }
    }

    /// Label map. Softmax: most probable class including the implicit
    /// background. Sigmoid: the highest-numbered class above threshold.
    pub fn labels(&self) -> Vec<u8> {
        let n = self.dims().iter().product::<usize>();
        let p = self.probabilities.data();
        (0..n)
            .map(|v| match self.activation {
                Activation::Softmax => {
                    let fg: f32 = (0..self.classes()).map(|c| p[c * n + v]).sum();
                    let mut best = (0u8, 1.0 - fg);
                    for c in 0..self.classes() {
                        if p[c * n + v] > best.1 {
                            best = (c as u8 + 1, p[c * n + v]);
                        }
                    }
                    best.0
                }
                Activation::Sigmoid => (0..self.classes())
                    .rev()
                    .find(|&c| p[c * n + v] as f64 >= self.threshold)
                    .map_or(0, |c| c as u8 + 1),
            })
            .collect()
    }
}

/// Runs the model over `image (C, H, W, D)` tile by tile.
pub fn sliding_window_infer<T: Real>(model: &Factorizer<T>, image: &Tensor<f32>, cfg: &InferConfig) -> Result<Prediction> {
    sliding_window_with(image, cfg, model.config.foreground_classes(), model.config.activation, |tile| {
        let g = Graph::<T>::new();
        let ctx = Ctx::new(&g, &model.params, false);
        let s = tile.shape();
        let x = g.constant(tile.cast::<T>().reshape([vec![1], s.to_vec()].concat())?);
        let out = model.forward(&ctx, x, false)?;
        let p = foreground_probabilities(out.logits, model.config.activation)?.value();
        let ps = p.shape()[1..].to_vec();
        Ok(p.cast::<f32>().reshape(ps)?)
    })
}

/// Tiling and blending with an arbitrary per-tile predictor returning
/// `(J, h, w, d)` probabilities for a `(C, h, w, d)` tile.
pub fn sliding_window_with(
    image: &Tensor<f32>,
    cfg: &InferConfig,
    classes: usize,
    activation: Activation,
    mut predict: impl FnMut(&Tensor<f32>) -> Result<Tensor<f32>>,
) -> Result<Prediction> {
    cfg.validate()?;
    let s = image.shape();
    if s.len() != 4 {
        return Err(usage(format!("expected a (C, H, W, D) image, got {s:?}")));
    }
    let dims = [s[1], s[2], s[3]];
    let padded_dims = [0, 1, 2].map(|a| dims[a].max(cfg.window[a]));
    let padded = if padded_dims == dims { image.clone() } else { reflect_pad(image, padded_dims)? };
    let corners: Vec<Vec<usize>> = (0..3).map(|a| tile_corners(padded_dims[a], cfg.window[a], cfg.overlap)).collect();
    let n = padded_dims.iter().product::<usize>();
    let mut sum = vec![0f64; classes * n];
    let mut count = vec![0u32; n];
    let w = cfg.window;
    for &ci in &corners[0] {
        for &cj in &corners[1] {
            for &ck in &corners[2] {
                let tile = crop_channels(&padded, [ci, cj, ck], w)?;
                let p = predict(&tile)?;
                if p.shape() != [classes, w[0], w[1], w[2]] {
                    return Err(usage(format!("tile prediction has shape {:?}", p.shape())));
                }
                let pd = p.data();
                for i in 0..w[0] {
                    for j in 0..w[1] {
                        let row = ((ci + i) * padded_dims[1] + cj + j) * padded_dims[2] + ck;
                        for k in 0..w[2] {
                            count[row + k] += 1;
                            for c in 0..classes {
                                sum[c * n + row + k] += pd[((c * w[0] + i) * w[1] + j) * w[2] + k] as f64;
                            }
                        }
                    }
                }
            }
        }
    }
    let blended: Vec<f32> = sum.iter().enumerate().map(|(i, &v)| (v / count[i % n] as f64) as f32).collect();
    let mut probabilities = Tensor::new(vec![classes, padded_dims[0], padded_dims[1], padded_dims[2]], blended)?;
    if padded_dims != dims {
        probabilities = crop_channels(&probabilities, [0; 3], dims)?;
    }
    Ok(Prediction { probabilities, threshold: cfg.threshold, activation })
}

/// Per-class ground-truth and predicted masks for scoring.
pub fn class_masks(truth: &[u8], pred: &[u8], dims: [usize; 3], classes: usize) -> Result<Vec<(usize, Mask, Mask)>> {
    (1..=classes)
        .map(|c| Ok((c, Mask::from_labels(truth, dims, c as u8)?, Mask::from_labels(pred, dims, c as u8)?)))
        .collect()
}

/// Scores the model on every sample with sliding-window inference.
pub fn evaluate<T: Real>(model: &Factorizer<T>, samples: &[VolumeSample], cfg: &InferConfig) -> Result<MetricsReport> {
    let mut report = MetricsReport::default();
    let classes = model.config.foreground_classes();
    for s in samples {
        let pred = sliding_window_infer(model, &s.image, cfg)?;
        let masks = (1..=classes)
            .map(|c| Ok((c, Mask::from_labels(&s.label, s.dims(), c as u8)?, pred.mask(c))))
            .collect::<Result<Vec<_>>>()?;
        report.add_case(&s.id, &masks, s.spacing)?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corner_grids() {
        assert_eq!(tile_corners(96, 64, 0.5), vec![0, 32]);
        assert_eq!(tile_corners(64, 64, 0.5), vec![0]);
        assert_eq!(tile_corners(100, 64, 0.5), vec![0, 32, 36]);
        assert_eq!(tile_corners(43, 32, 0.5), vec![0, 11]);
        assert_eq!(tile_corners(10, 4, 0.0), vec![0, 4, 6]);
    }

    #[test]
    fn reflect_padding() {
        let t = Tensor::new(vec![1, 1, 1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(reflect_pad(&t, [1, 1, 6]).unwrap().data(), &[1.0, 2.0, 3.0, 2.0, 1.0, 2.0]);
    }
}
