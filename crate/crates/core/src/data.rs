//! Synthetic volumetric segmentation data, preprocessing, augmentation and
//! on-disk dataset layout.
//!
//! A dataset directory holds `dataset.cfg` (the generating spec) and one
//! subdirectory per sample with `image.ft`, `label.ft` and `meta`.

use std::f64::consts::PI;
use std::path::Path;

use factorizer_tensor::{io as ftio, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::config::ConfigMap;
use crate::error::{usage, Error, Result};
use crate::rng;

/// Multi-channel image `(C, H, W, D)` with its integer label map.
#[derive(Debug, Clone, PartialEq)]
pub struct VolumeSample {
    pub id: String,
    pub image: Tensor<f32>,
    pub label: Vec<u8>,
    pub spacing: [f64; 3],
}

impl VolumeSample {
    pub fn new(id: impl Into<String>, image: Tensor<f32>, label: Vec<u8>, spacing: [f64; 3]) -> Result<Self> {
        let s = image.shape();
        if s.len() != 4 {
            return Err(usage(format!("image must be (C, H, W, D), got {s:?}")));
        }
        if label.len() != s[1] * s[2] * s[3] {
            return Err(usage(format!("label has {} voxels, image {s:?}", label.len())));
        }
        Ok(Self { id: id.into(), image, label, spacing })
    }

    pub fn channels(&self) -> usize {
        self.image.shape()[0]
    }

    pub fn dims(&self) -> [usize; 3] {
        let s = self.image.shape();
        [s[1], s[2], s[3]]
    }

    fn voxels(&self) -> usize {
        self.label.len()
    }

    /// Copies the box starting at `corner` with extents `size`.
    pub fn crop(&self, corner: [usize; 3], size: [usize; 3]) -> Result<Self> {
        let dims = self.dims();
        if (0..3).any(|a| corner[a] + size[a] > dims[a]) {
            return Err(usage(format!("crop {corner:?}+{size:?} exceeds volume {dims:?}")));
        }
        let c = self.channels();
        let n = size.iter().product::<usize>();
        let src = self.image.data();
        let mut image = Vec::with_capacity(c * n);
        let mut label = Vec::with_capacity(n);
        for ch in 0..c {
            for i in 0..size[0] {
                for j in 0..size[1] {
                    let row = ((ch * dims[0] + corner[0] + i) * dims[1] + corner[1] + j) * dims[2] + corner[2];
                    image.extend_from_slice(&src[row..row + size[2]]);
                    if ch == 0 {
                        label.extend_from_slice(&self.label[row..row + size[2]]);
                    }
                }
            }
        }
        Self::new(self.id.clone(), Tensor::new(vec![c, size[0], size[1], size[2]], image)?, label, self.spacing)
    }

    /// Reverses the order of voxels along spatial axis `axis` in image and label.
    pub fn flip(&mut self, axis: usize) {
        let [h, w, d] = self.dims();
        let c = self.channels();
        let idx = |i: usize, j: usize, k: usize| (i * w + j) * d + k;
        let mirror = |i: usize, j: usize, k: usize| match axis {
            0 => idx(h - 1 - i, j, k),
            1 => idx(i, w - 1 - j, k),
            _ => idx(i, j, d - 1 - k),
        };
        let n = self.voxels();
        let mut image = self.image.to_vec();
        let src = self.image.data();
        let mut label = self.label.clone();
        for i in 0..h {
            for j in 0..w {
                for k in 0..d {
                    let (to, from) = (idx(i, j, k), mirror(i, j, k));
                    label[to] = self.label[from];
                    for ch in 0..c {
                        image[ch * n + to] = src[ch * n + from];
                    }
                }
            }
        }
        self.image = Tensor::new(self.image.shape().to_vec(), image).expect("same shape");
        self.label = label;
    }
}

/// Parameters of the synthetic lesion task.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTaskSpec {
    pub extent: [usize; 3],
    pub channels: usize,
    /// Foreground classes; labels run over `0..=classes`.
    pub classes: usize,
    pub samples: usize,
    pub blobs: (usize, usize),
    /// Ellipsoid semi-axis range in voxels.
    pub radius: (f64, f64),
    /// `contrast[k][c]`: intensity added inside class `k + 1` lesions in channel `c`.
    pub contrast: Vec<Vec<f64>>,
    /// Standard deviation of the additive voxel noise.
    pub noise: f64,
    pub spacing: [f64; 3],
    pub seed: u64,
}

impl Default for SyntheticTaskSpec {
    fn default() -> Self {
        Self::new([48; 3], 2, 2, 4, 0)
    }
}

impl SyntheticTaskSpec {
    pub const KEYS: &'static [&'static str] = &[
        "extent", "channels", "classes", "samples", "blobs_min", "blobs_max", "radius_min", "radius_max", "contrast",
        "noise", "spacing", "seed",
    ];

    pub fn new(extent: [usize; 3], channels: usize, classes: usize, samples: usize, seed: u64) -> Self {
        Self {
            extent,
            channels,
            classes,
            samples,
            blobs: (2, 4),
            radius: (3.0, 6.0),
            contrast: default_contrast(classes, channels),
            noise: 0.1,
            spacing: [1.0; 3],
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.extent.iter().any(|e| *e == 0 || e % 16 != 0) {
            return bad(format!("volume extent {:?} must be positive multiples of 16", self.extent));
        }
        if self.channels == 0 || self.classes == 0 || self.classes > 254 {
            return bad(format!("need at least one channel and 1..=254 classes, got {} and {}", self.channels, self.classes));
        }
        if self.blobs.0 > self.blobs.1 {
            return bad(format!("blob count range {:?} is empty", self.blobs));
        }
        if !(self.radius.0 > 0.0 && self.radius.0 <= self.radius.1) {
            return bad(format!("blob radius range {:?} is invalid", self.radius));
        }
        if self.contrast.len() != self.classes || self.contrast.iter().any(|c| c.len() != self.channels) {
            return bad(format!("contrast table must be {} classes by {} channels", self.classes, self.channels));
        }
        if !(self.noise >= 0.0) || self.spacing.iter().any(|s| !(*s > 0.0)) {
            return bad("noise must be nonnegative and spacing positive".into());
        }
        Ok(())
    }

    /// Reads `data.*` keys on top of the defaults.
    pub fn from_map(map: &ConfigMap) -> Result<Self> {
        map.check_known("data", Self::KEYS)?;
        let s = map.section("data");
        let mut spec = Self::default();
        if let Some(e) = s.get_list::<usize>("extent")? {
            spec.extent = match e[..] {
                [a] => [a; 3],
                [a, b, c] => [a, b, c],
                _ => return Err(Error::Config(format!("extent takes 1 or 3 values, got {e:?}"))),
            };
        }
        spec.channels = s.get_or("channels", spec.channels)?;
        spec.classes = s.get_or("classes", spec.classes)?;
        spec.samples = s.get_or("samples", spec.samples)?;
        spec.blobs = (s.get_or("blobs_min", spec.blobs.0)?, s.get_or("blobs_max", spec.blobs.1)?);
        spec.radius = (s.get_or("radius_min", spec.radius.0)?, s.get_or("radius_max", spec.radius.1)?);
        spec.noise = s.get_or("noise", spec.noise)?;
        spec.seed = s.get_or("seed", spec.seed)?;
        if let Some(sp) = s.get_list::<f64>("spacing")? {
            spec.spacing = sp.try_into().map_err(|v| Error::Config(format!("spacing takes 3 values, got {v:?}")))?;
        }
        spec.contrast = match s.get_list::<f64>("contrast")? {
            Some(flat) => {
                if flat.len() != spec.classes * spec.channels {
                    return Err(Error::Config(format!(
                        "contrast lists {} values, expected classes x channels = {}",
                        flat.len(),
                        spec.classes * spec.channels
                    )));
                }
                flat.chunks(spec.channels).map(<[f64]>::to_vec).collect()
            }
            None => default_contrast(spec.classes, spec.channels),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_map(&self) -> ConfigMap {
        let join = |v: &[String]| v.join(",");
        let mut m = ConfigMap::new();
        m.set("data.extent", join(&self.extent.map(|e| e.to_string())));
        m.set("data.channels", self.channels);
        m.set("data.classes", self.classes);
        m.set("data.samples", self.samples);
        m.set("data.blobs_min", self.blobs.0);
        m.set("data.blobs_max", self.blobs.1);
        m.set("data.radius_min", self.radius.0);
        m.set("data.radius_max", self.radius.1);
        m.set("data.contrast", join(&self.contrast.iter().flatten().map(f64::to_string).collect::<Vec<_>>()));
        m.set("data.noise", self.noise);
        m.set("data.spacing", join(&self.spacing.map(|e| e.to_string())));
        m.set("data.seed", self.seed);
        m
    }
}

/// Each class is bright in one channel and moderately bright elsewhere.
pub fn default_contrast(classes: usize, channels: usize) -> Vec<Vec<f64>> {
    (1..=classes)
        .map(|k| (0..channels).map(|c| if c == k % channels { 1.5 } else { 0.5 + 0.25 * k as f64 }).collect())
        .collect()
}

#[derive(Debug, Clone, Copy)]
struct Blob {
    center: [f64; 3],
    radii: [f64; 3],
    class: u8,
}

impl Blob {
    /// Normalized ellipsoid radius of a point (1 on the boundary).
    fn rho(&self, p: [f64; 3]) -> f64 {
        (0..3).map(|a| ((p[a] - self.center[a]) / self.radii[a]).powi(2)).sum::<f64>().sqrt()
    }
}

const PLACEMENT_ATTEMPTS: usize = 2000;
/// Body ellipsoid semi-axes as a fraction of the extent.
const BODY_FRACTION: f64 = 0.45;
/// Falloff length of the soft lesion halo, in normalized radius.
const HALO: f64 = 0.15;

/// Builds `spec.samples` volumes named `case_000`, `case_001`, ...
pub fn generate(spec: &SyntheticTaskSpec) -> Result<Vec<VolumeSample>> {
    spec.validate()?;
    (0..spec.samples).map(|i| generate_one(spec, i)).collect()
}

fn place_blobs(spec: &SyntheticTaskSpec, body: [f64; 3], centre: [f64; 3], rng: &mut ChaCha8Rng) -> Result<Vec<Blob>> {
    let count = rng.gen_range(spec.blobs.0..=spec.blobs.1);
    let mut blobs: Vec<Blob> = Vec::with_capacity(count);
    for b in 0..count {
        let class = (1 + b % spec.classes) as u8;
        let mut placed = false;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let radii = [0; 3].map(|_| rng.gen_range(spec.radius.0..=spec.radius.1));
            let rmax = radii.iter().copied().fold(0.0, f64::max);
            // The body's normalized radius changes by at most 1/min(body) per
            // voxel, so this keeps the lesion and a one-voxel margin inside.
            let slack = 1.0 - (rmax + 1.0) / body.iter().copied().fold(f64::INFINITY, f64::min);
            if slack <= 0.0 {
                continue;
            }
            let offset = [0; 3].map(|_| rng.gen_range(-1.0..1.0));
            let center = [0, 1, 2].map(|a| centre[a] + offset[a] * slack * body[a]);
            let inside = (0..3).map(|a| ((center[a] - centre[a]) / body[a]).powi(2)).sum::<f64>().sqrt();
            if inside > slack {
                continue;
            }
            let clear = blobs.iter().all(|o| {
                let omax = o.radii.iter().copied().fold(0.0, f64::max);
                let dist = (0..3).map(|a| (center[a] - o.center[a]).powi(2)).sum::<f64>().sqrt();
                dist > rmax + omax + 1.0
            });
            if clear {
                blobs.push(Blob { center, radii, class });
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Generation(format!(
                "could not place lesion {} of {count} after {PLACEMENT_ATTEMPTS} attempts; reduce blob count or radius",
                b + 1
            )));
        }
    }
    Ok(blobs)
}

fn generate_one(spec: &SyntheticTaskSpec, index: usize) -> Result<VolumeSample> {
    let mut rng = rng::stream(spec.seed, &[0xDA7A, index as u64]);
    let [h, w, d] = spec.extent;
    let n = h * w * d;
    let centre = spec.extent.map(|e| (e as f64 - 1.0) / 2.0);
    let body = spec.extent.map(|e| e as f64 * BODY_FRACTION);
    let blobs = place_blobs(spec, body, centre, &mut rng)?;

    let phases: Vec<[f64; 3]> = (0..spec.channels).map(|_| [0; 3].map(|_| rng.gen_range(0.0..2.0 * PI))).collect();
    let periods = [0; 3].map(|_| rng.gen_range(10.0..20.0));
    let noise = Normal::new(0.0, spec.noise).map_err(|e| Error::Generation(e.to_string()))?;

    let mut label = vec![0u8; n];
    let mut image = vec![0f32; spec.channels * n];
    for i in 0..h {
        for j in 0..w {
            for k in 0..d {
                let v = (i * w + j) * d + k;
                let p = [i as f64, j as f64, k as f64];
                let in_body = (0..3).map(|a| ((p[a] - centre[a]) / body[a]).powi(2)).sum::<f64>() <= 1.0;
                if !in_body {
                    continue;
                }
                // Inside a lesion the full contrast applies; outside it fades
                // over a short halo so edges are soft but labels stay exact.
                let mut lesion: Option<(u8, f64)> = None;
                let mut halo = vec![0.0; spec.channels];
                for blob in &blobs {
                    let rho = blob.rho(p);
                    let contrast = &spec.contrast[blob.class as usize - 1];
                    if rho <= 1.0 {
                        lesion = Some((blob.class, rho));
                    } else {
                        let weight = (-((rho - 1.0) / HALO).powi(2)).exp();
                        for (c, hv) in halo.iter_mut().enumerate() {
                            *hv += weight * contrast[c];
                        }
                    }
                }
                if let Some((class, _)) = lesion {
                    label[v] = class;
                }
                for c in 0..spec.channels {
                    let ph = phases[c];
                    let texture = 0.15 * (2.0 * PI * p[0] / periods[0] + ph[0]).sin() * (2.0 * PI * p[1] / periods[1] + ph[1]).sin()
                        + 0.1 * (2.0 * PI * p[2] / periods[2] + ph[2]).sin();
                    let base = 1.0 + 0.3 * c as f64 + texture;
                    let signal = match lesion {
                        Some((class, _)) => spec.contrast[class as usize - 1][c],
                        None => halo[c],
                    };
                    let mut value = base + signal + noise.sample(&mut rng);
                    if value == 0.0 {
                        value = f64::MIN_POSITIVE;
                    }
                    image[c * n + v] = value as f32;
                }
            }
        }
    }
    VolumeSample::new(
        format!("case_{index:03}"),
        Tensor::new(vec![spec.channels, h, w, d], image)?,
        label,
        spec.spacing,
    )
}

/// Minimal box containing every voxel that is nonzero in some channel, as
/// `(corner, size)`. `None` for an all-zero image.
pub fn nonzero_bbox(image: &Tensor<f32>) -> Option<([usize; 3], [usize; 3])> {
    let s = image.shape();
    let (h, w, d) = (s[1], s[2], s[3]);
    let n = h * w * d;
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    let data = image.data();
    for v in 0..n {
        if (0..s[0]).any(|c| data[c * n + v] != 0.0) {
            let p = [v / (w * d), (v / d) % w, v % d];
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
    }
    (lo[0] != usize::MAX).then(|| (lo, [0, 1, 2].map(|a| hi[a] - lo[a] + 1)))
}

pub const STD_GUARD: f64 = 1e-8;

/// Crops to the nonzero bounding box, then z-scores every channel.
pub fn preprocess(sample: &VolumeSample) -> Result<VolumeSample> {
    Ok(preprocess_with_origin(sample)?.0)
}

/// [`preprocess`], also returning the crop corner in the original volume.
pub fn preprocess_with_origin(sample: &VolumeSample) -> Result<(VolumeSample, [usize; 3])> {
    let (mut out, origin) = match nonzero_bbox(&sample.image) {
        Some((corner, size)) => (sample.crop(corner, size)?, corner),
        None => (sample.clone(), [0; 3]),
    };
    let n = out.voxels();
    let mut data = out.image.to_vec();
    for chunk in data.chunks_mut(n) {
        let mean = chunk.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
        let var = chunk.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n as f64;
        let std = var.sqrt().max(STD_GUARD);
        for v in chunk.iter_mut() {
            *v = ((*v as f64 - mean) / std) as f32;
        }
    }
    out.image = Tensor::new(out.image.shape().to_vec(), data)?;
    Ok((out, origin))
}

/// Probabilities and ranges of the random transforms, applied in field order.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentPolicy {
    /// Per spatial axis.
    pub flip_prob: f64,
    pub noise_prob: f64,
    pub noise_variance: (f64, f64),
    pub smooth_prob: f64,
    pub smooth_sigma: (f64, f64),
    pub scale_prob: f64,
    pub scale: (f64, f64),
    pub shift_prob: f64,
    pub shift: (f64, f64),
    pub gamma_prob: f64,
    pub gamma: (f64, f64),
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self {
            flip_prob: 0.5,
            noise_prob: 0.15,
            noise_variance: (0.0, 0.1),
            smooth_prob: 0.15,
            smooth_sigma: (0.5, 1.5),
            scale_prob: 0.15,
            scale: (0.7, 1.3),
            shift_prob: 0.15,
            shift: (-0.1, 0.1),
            gamma_prob: 0.15,
            gamma: (0.7, 1.5),
        }
    }
}

impl AugmentPolicy {
    /// Every probability zero: augmentation is the identity.
    pub fn none() -> Self {
        Self { flip_prob: 0.0, noise_prob: 0.0, smooth_prob: 0.0, scale_prob: 0.0, shift_prob: 0.0, gamma_prob: 0.0, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let probs = [self.flip_prob, self.noise_prob, self.smooth_prob, self.scale_prob, self.shift_prob, self.gamma_prob];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Config(format!("augmentation probabilities must lie in [0, 1], got {probs:?}")));
        }
        let ranges = [self.noise_variance, self.smooth_sigma, self.scale, self.shift, self.gamma];
        if ranges.iter().any(|(a, b)| !(a <= b)) {
            return Err(Error::Config("augmentation ranges must satisfy lo <= hi".into()));
        }
        if self.noise_variance.0 < 0.0 || self.smooth_sigma.0 <= 0.0 || self.gamma.0 <= 0.0 {
            return Err(Error::Config("noise variance, smoothing width and gamma must be positive".into()));
        }
        Ok(())
    }
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..hi)
    }
}

/// Applies `policy` to a sample. Flips move image and label together; the
/// intensity transforms touch the image only.
pub fn augment(sample: &VolumeSample, policy: &AugmentPolicy, rng: &mut ChaCha8Rng) -> Result<VolumeSample> {
    policy.validate()?;
    let mut out = sample.clone();
    for axis in 0..3 {
        if rng.gen_bool(policy.flip_prob) {
            out.flip(axis);
        }
    }
    let mut data: Vec<f64> = out.image.data().iter().map(|&v| v as f64).collect();
    if rng.gen_bool(policy.noise_prob) {
        add_noise(&mut data, uniform(rng, policy.noise_variance), rng);
    }
    if rng.gen_bool(policy.smooth_prob) {
        let n = out.voxels();
        let dims = out.dims();
        for chunk in data.chunks_mut(n) {
            let sigma = uniform(rng, policy.smooth_sigma);
            gaussian_smooth(chunk, dims, sigma);
        }
    }
    if rng.gen_bool(policy.scale_prob) {
        let s = uniform(rng, policy.scale);
        data.iter_mut().for_each(|v| *v *= s);
    }
    if rng.gen_bool(policy.shift_prob) {
        let o = uniform(rng, policy.shift);
        data.iter_mut().for_each(|v| *v += o);
    }
    if rng.gen_bool(policy.gamma_prob) {
        adjust_gamma(&mut data, uniform(rng, policy.gamma));
    }
    out.image = Tensor::new(out.image.shape().to_vec(), data.into_iter().map(|v| v as f32).collect())?;
    Ok(out)
}

/// Adds zero-mean Gaussian noise of the given variance to every voxel.
pub fn add_noise(data: &mut [f64], variance: f64, rng: &mut ChaCha8Rng) {
    if variance <= 0.0 {
        return;
    }
    let normal = Normal::new(0.0, variance.sqrt()).expect("positive std");
    for v in data.iter_mut() {
        *v += normal.sample(rng);
    }
}

/// Separable Gaussian filter truncated at `4σ`. Weights are renormalized
/// over in-bounds taps, so constant volumes are preserved.
pub fn gaussian_smooth(data: &mut [f64], dims: [usize; 3], sigma: f64) {
    let radius = (4.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius).map(|t| (-(t * t) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let strides = [dims[1] * dims[2], dims[2], 1];
    let mut line = Vec::new();
    for axis in 0..3 {
        let n = dims[axis];
        let others: Vec<usize> = (0..3).filter(|&a| a != axis).collect();
        for a in 0..dims[others[0]] {
            for b in 0..dims[others[1]] {
                let base = a * strides[others[0]] + b * strides[others[1]];
                line.clear();
                line.extend((0..n).map(|q| data[base + q * strides[axis]]));
                for q in 0..n {
                    let (mut acc, mut norm) = (0.0, 0.0);
                    for (t, w) in (-radius..=radius).zip(&kernel) {
                        let p = q as isize + t;
                        if (0..n as isize).contains(&p) {
                            acc += w * line[p as usize];
                            norm += w;
                        }
                    }
                    data[base + q * strides[axis]] = acc / norm;
                }
            }
        }
    }
}

/// Gamma correction on intensities shifted to `[0, 1]`, then mapped back to
/// the original range.
pub fn adjust_gamma(data: &mut [f64], gamma: f64) {
    let lo = data.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    if !(range > 0.0) {
        return;
    }
    for v in data.iter_mut() {
        *v = ((*v - lo) / range).powf(gamma) * range + lo;
    }
}

/// Uniformly placed crop of extents `patch`.
pub fn random_patch(sample: &VolumeSample, patch: [usize; 3], rng: &mut ChaCha8Rng) -> Result<VolumeSample> {
    let dims = sample.dims();
    if (0..3).any(|a| patch[a] > dims[a]) {
        return Err(usage(format!("patch {patch:?} is larger than volume {dims:?}")));
    }
    let corner = [0, 1, 2].map(|a| rng.gen_range(0..=dims[a] - patch[a]));
    sample.crop(corner, patch)
}

/// Writes each sample to `dir/<id>/` and the generator settings (if any) to `dir/dataset.cfg`.
pub fn save_dataset(dir: &Path, samples: &[VolumeSample], spec: Option<&SyntheticTaskSpec>) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    if let Some(spec) = spec {
        std::fs::write(dir.join("dataset.cfg"), spec.to_map().to_text())?;
    }
    for s in samples {
        save_sample(&dir.join(&s.id), s)?;
    }
    Ok(())
}

pub fn save_sample(dir: &Path, s: &VolumeSample) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    ftio::save(dir.join("image.ft"), &s.image)?;
    let [h, w, d] = s.dims();
    let label = Tensor::new(vec![h, w, d], s.label.iter().map(|&l| l as f32).collect())?;
    ftio::save(dir.join("label.ft"), &label)?;
    let mut meta = ConfigMap::new();
    meta.set("id", &s.id);
    meta.set("spacing", s.spacing.map(|v| v.to_string()).join(","));
    std::fs::write(dir.join("meta"), meta.to_text())?;
    Ok(())
}

pub fn load_sample(dir: &Path) -> Result<VolumeSample> {
    let meta = ConfigMap::load(&dir.join("meta"))?;
    let id = meta.raw("id").map(str::to_string).unwrap_or_else(|| dir.file_name().map_or(String::new(), |n| n.to_string_lossy().into_owned()));
    let spacing: [f64; 3] = match meta.get_list::<f64>("spacing")? {
        Some(v) => v.try_into().map_err(|v| Error::Format { what: "meta", detail: format!("spacing {v:?} needs 3 values") })?,
        None => [1.0; 3],
    };
    let image: Tensor<f32> = ftio::load(dir.join("image.ft"))?;
    let label: Tensor<f32> = ftio::load(dir.join("label.ft"))?;
    let labels = label
        .data()
        .iter()
        .map(|&v| {
            if v >= 0.0 && v <= 255.0 && v.fract() == 0.0 {
                Ok(v as u8)
            } else {
                Err(Error::Format { what: "label", detail: format!("value {v} is not a class index") })
            }
        })
        .collect::<Result<Vec<u8>>>()?;
    if image.rank() != 4 || label.shape() != &image.shape()[1..] {
        return Err(Error::Structural(format!("image {:?} and label {:?} do not align", image.shape(), label.shape())));
    }
    VolumeSample::new(id, image, labels, spacing)
}

/// Loads every sample subdirectory of `dir`, sorted by name.
pub fn load_dataset(dir: &Path) -> Result<Vec<VolumeSample>> {
    let mut dirs: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_dir() && p.join("image.ft").exists())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(usage(format!("no samples found under {}", dir.display())));
    }
    dirs.iter().map(|p| load_sample(p)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> SyntheticTaskSpec {
        let mut s = SyntheticTaskSpec::new([16; 3], 2, 2, 1, 3);
        s.blobs = (1, 2);
        s.radius = (2.0, 3.0);
        s
    }

    #[test]
    fn flip_twice_is_identity() {
        let s = generate(&tiny()).unwrap().remove(0);
        for axis in 0..3 {
            let mut t = s.clone();
            t.flip(axis);
            assert_ne!(t, s);
            t.flip(axis);
            assert_eq!(t, s);
        }
    }

    #[test]
    fn crop_is_consistent_with_indexing() {
        let s = generate(&tiny()).unwrap().remove(0);
        let c = s.crop([1, 2, 3], [4, 5, 6]).unwrap();
        let n = 16 * 16 * 16;
        for (i, j, k) in [(0, 0, 0), (3, 4, 5), (2, 1, 0)] {
            let src = ((1 + i) * 16 + 2 + j) * 16 + 3 + k;
            let dst = (i * 5 + j) * 6 + k;
            assert_eq!(c.label[dst], s.label[src]);
            assert_eq!(c.image.data()[120 + dst], s.image.data()[n + src]);
        }
        assert!(s.crop([10, 0, 0], [8, 1, 1]).is_err());
    }

    #[test]
    fn gamma_keeps_range() {
        let mut v = vec![-1.0, 0.0, 3.0];
        adjust_gamma(&mut v, 2.0);
        assert_eq!(v[0], -1.0);
        assert_eq!(v[2], 3.0);
        assert!((v[1] - (-1.0 + 4.0 / 16.0)).abs() < 1e-12);
    }

    #[test]
    fn smoothing_preserves_constants() {
        let mut v = vec![2.5; 5 * 4 * 3];
        gaussian_smooth(&mut v, [5, 4, 3], 1.2);
        assert!(v.iter().all(|x| (x - 2.5).abs() < 1e-12));
    }

    #[test]
    fn spec_round_trips_through_config() {
        let mut s = tiny();
        s.contrast[1][0] = 0.25;
        assert_eq!(SyntheticTaskSpec::from_map(&s.to_map()).unwrap(), s);
    }
}
