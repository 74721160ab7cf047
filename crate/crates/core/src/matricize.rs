//! Reshapes between batches of 3D feature maps `(B, C, H, W, D)` and batches
//! of matrices `(B', M, N)`.
//!
//! * `Global` splits channels into heads of `E` and flattens all voxels:
//!   `(B·C/E, E, H·W·D)`.
//! * `Local` additionally cuts the volume into cubic windows of edge `P`:
//!   `(B·C/E·(H/P)(W/P)(D/P), E, P³)`.
//! * `ShiftedWindow` stacks `Local(x)` and `Local(roll(x, P/2))` on the batch
//!   axis. The inverse averages the two reconstructions.

use factorizer_tensor::{Real, Var};

use crate::error::{config, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MatricizeMode {
    Global,
    Local,
    ShiftedWindow,
}

impl MatricizeMode {
    pub fn name(self) -> &'static str {
        match self {
            Self::Global => "global",
            Self::Local => "local",
            Self::ShiftedWindow => "sw",
        }
    }
}

impl std::str::FromStr for MatricizeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "global" => Ok(Self::Global),
            "local" => Ok(Self::Local),
            "sw" | "swin" | "shifted" | "shifted-window" => Ok(Self::ShiftedWindow),
            other => Err(config(format!("unknown matricize mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MatricizeConfig {
    pub mode: MatricizeMode,
    /// Channels per matrix (`E`).
    pub head_dim: usize,
    /// Cubic window edge (`P`); ignored for `Global`.
    pub patch: usize,
}

const AXES: [&str; 3] = ["H", "W", "D"];

impl MatricizeConfig {
    pub fn new(mode: MatricizeMode, head_dim: usize, patch: usize) -> Self {
        Self { mode, head_dim, patch }
    }

    pub fn global(head_dim: usize) -> Self {
        Self::new(MatricizeMode::Global, head_dim, 1)
    }

    /// Checks the divisibility rules against a `(B, C, H, W, D)` shape.
    pub fn validate(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 5 {
            return Err(config(format!("matricize expects a (B, C, H, W, D) tensor, got shape {shape:?}")));
        }
        let e = self.head_dim;
        if e == 0 || shape[1] % e != 0 {
            return Err(config(format!("head dimension {e} does not divide channel axis C={}", shape[1])));
        }
        if self.mode == MatricizeMode::Global {
            return Ok(());
        }
        let p = self.patch;
        if p == 0 {
            return Err(config("patch size must be positive"));
        }
        if self.mode == MatricizeMode::ShiftedWindow && p % 2 != 0 {
            return Err(config(format!("shifted-window patch size must be even, got {p}")));
        }
        for (axis, &extent) in AXES.iter().zip(&shape[2..]) {
            if extent % p != 0 {
                return Err(config(format!("patch size {p} does not divide spatial axis {axis}={extent}")));
            }
        }
        Ok(())
    }

    /// `(B', M, N)` produced for an input of the given shape.
    pub fn matrix_shape(&self, shape: &[usize]) -> Result<[usize; 3]> {
        self.validate(shape)?;
        let total: usize = shape.iter().product();
        let e = self.head_dim;
        Ok(match self.mode {
            MatricizeMode::Global => {
                let n = shape[2] * shape[3] * shape[4];
                [total / (e * n), e, n]
            }
            MatricizeMode::Local => {
                let n = self.patch.pow(3);
                [total / (e * n), e, n]
            }
            MatricizeMode::ShiftedWindow => {
                let n = self.patch.pow(3);
                [2 * total / (e * n), e, n]
            }
        })
    }
}

/// Matrices plus what is needed to put them back.
#[derive(Debug, Clone, Copy)]
pub struct MatricizedBatch<'g, T: Real> {
    pub matrices: Var<'g, T>,
    pub original_shape: [usize; 5],
    pub config: MatricizeConfig,
}

impl<'g, T: Real> MatricizedBatch<'g, T> {
    /// Same metadata, different matrices (e.g. an NMF reconstruction).
    pub fn with_matrices(&self, matrices: Var<'g, T>) -> Self {
        Self { matrices, ..*self }
    }
}

const LOCAL_PERM: [usize; 9] = [0, 1, 3, 5, 7, 2, 4, 6, 8];
const LOCAL_PERM_INV: [usize; 9] = [0, 1, 5, 2, 6, 3, 7, 4, 8];

fn local_forward<'g, T: Real>(x: Var<'g, T>, s: [usize; 5], e: usize, p: usize) -> Result<Var<'g, T>> {
    let [b, c, h, w, d] = s;
    let split = x.reshape(vec![b, c / e, e, h / p, p, w / p, p, d / p, p])?;
    let grouped = split.permute(&LOCAL_PERM)?;
    let batch = b * (c / e) * (h / p) * (w / p) * (d / p);
    Ok(grouped.reshape(vec![batch, e, p * p * p])?)
}

fn local_inverse<'g, T: Real>(m: Var<'g, T>, s: [usize; 5], e: usize, p: usize) -> Result<Var<'g, T>> {
    let [b, c, h, w, d] = s;
    let grouped = m.reshape(vec![b, c / e, h / p, w / p, d / p, e, p, p, p])?;
    let split = grouped.permute(&LOCAL_PERM_INV)?;
    Ok(split.reshape(s.to_vec())?)
}

fn half_shift(p: usize, sign: isize) -> [isize; 3] {
    let h = (p / 2) as isize * sign;
    [h, h, h]
}

pub fn matricize<'g, T: Real>(x: Var<'g, T>, cfg: MatricizeConfig) -> Result<MatricizedBatch<'g, T>> {
    let shape = x.shape();
    cfg.validate(&shape)?;
    let s: [usize; 5] = shape.as_slice().try_into().expect("validated rank");
    let (e, p) = (cfg.head_dim, cfg.patch);
    let matrices = match cfg.mode {
        MatricizeMode::Global => x.reshape(vec![s[0] * s[1] / e, e, s[2] * s[3] * s[4]])?,
        MatricizeMode::Local => local_forward(x, s, e, p)?,
        MatricizeMode::ShiftedWindow => {
            let regular = local_forward(x, s, e, p)?;
            let rolled = x.roll(&[2, 3, 4], &half_shift(p, 1))?;
            let shifted = local_forward(rolled, s, e, p)?;
            Var::concat(&[regular, shifted], 0)?
        }
    };
    Ok(MatricizedBatch { matrices, original_shape: s, config: cfg })
}

pub fn dematricize<'g, T: Real>(batch: &MatricizedBatch<'g, T>) -> Result<Var<'g, T>> {
    let cfg = batch.config;
    let s = batch.original_shape;
    let expected = cfg.matrix_shape(&s)?;
    let actual = batch.matrices.shape();
    if actual != expected {
        return Err(Error::Structural(format!(
            "matrices have shape {actual:?} but metadata for {s:?} under {} mode implies {expected:?}",
            cfg.mode.name()
        )));
    }
    let (e, p) = (cfg.head_dim, cfg.patch);
    match cfg.mode {
        MatricizeMode::Global => Ok(batch.matrices.reshape(s.to_vec())?),
        MatricizeMode::Local => local_inverse(batch.matrices, s, e, p),
        MatricizeMode::ShiftedWindow => {
            let half = expected[0] / 2;
            let regular = local_inverse(batch.matrices.slice(0, 0, half)?, s, e, p)?;
            let shifted = local_inverse(batch.matrices.slice(0, half, half)?, s, e, p)?;
            let unrolled = shifted.roll(&[2, 3, 4], &half_shift(p, -1))?;
            Ok(regular.add(unrolled)?.mul_scalar(T::lit(0.5)))
        }
    }
}
