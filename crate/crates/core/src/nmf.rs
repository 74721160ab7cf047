//! Batched NMF solvers recorded on the autodiff graph.
//!
//! `X (B', M, N) ≈ F (B', M, R) · G (B', N, R)ᵀ`. The forward pass runs a fixed
//! number of outer iterations from a seeded uniform initialization and returns
//! the reconstruction, so gradients flow through every unrolled update.

use factorizer_tensor::{Graph, Real, Tensor, Var};
use rand::distributions::{Distribution, Open01};

use crate::error::{config, Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Solver {
    Mu,
    Hals,
}

impl Solver {
    pub fn name(self) -> &'static str {
        match self {
            Self::Mu => "mu",
            Self::Hals => "hals",
        }
    }
}

impl std::str::FromStr for Solver {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mu" => Ok(Self::Mu),
            "hals" => Ok(Self::Hals),
            other => Err(config(format!("unknown NMF solver `{other}`"))),
        }
    }
}

pub const DEFAULT_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NmfConfig {
    pub rank: usize,
    pub iterations: usize,
    pub solver: Solver,
    pub eps: f64,
    pub init_seed: u64,
}

impl Default for NmfConfig {
    fn default() -> Self {
        Self { rank: 1, iterations: 5, solver: Solver::Hals, eps: DEFAULT_EPS, init_seed: 0 }
    }
}

impl NmfConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(config("NMF rank must be at least 1"));
        }
        if self.iterations == 0 {
            return Err(config("NMF iteration count must be at least 1"));
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(config(format!("NMF eps must be positive, got {}", self.eps)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FactorPair<'g, T: Real> {
    /// `(B', M, R)`
    pub f: Var<'g, T>,
    /// `(B', N, R)`
    pub g: Var<'g, T>,
}

impl<'g, T: Real> FactorPair<'g, T> {
    pub fn rank(&self) -> usize {
        self.f.shape()[2]
    }

    /// `F·Gᵀ`.
    pub fn reconstruct(&self) -> Result<Var<'g, T>> {
        Ok(self.f.matmul(self.g.transpose()?)?)
    }
}

/// Uniform `(0, 1)` factors for a `(batch, m, n)` problem, drawn from `seed`.
pub fn init_factors<T: Real>(batch: usize, m: usize, n: usize, rank: usize, seed: u64) -> Result<(Tensor<T>, Tensor<T>)> {
    let mut stream = rng::stream(seed, &[]);
    let mut draw = |len: usize| -> Vec<T> {
        (0..len)
            .map(|_| {
                let u: f64 = Open01.sample(&mut stream);
                T::lit(u)
            })
            .collect()
    };
    let f = Tensor::new(vec![batch, m, rank], draw(batch * m * rank))?;
    let g = Tensor::new(vec![batch, n, rank], draw(batch * n * rank))?;
    Ok((f, g))
}

/// `Xᵀ·F` computed as `(Fᵀ·X)ᵀ`, which only transposes the thin operands.
fn xt_times<'g, T: Real>(x: Var<'g, T>, f: Var<'g, T>) -> Result<Var<'g, T>> {
    Ok(f.transpose()?.matmul(x)?.transpose()?)
}

fn gram<'g, T: Real>(a: Var<'g, T>) -> Result<Var<'g, T>> {
    Ok(a.transpose()?.matmul(a)?)
}

/// `f ← Xg/(‖g‖²+eps)`, `g ← Xᵀf/(‖f‖²+eps)`.
pub fn rank_one_step<'g, T: Real>(x: Var<'g, T>, pair: FactorPair<'g, T>, eps: f64) -> Result<FactorPair<'g, T>> {
    let eps = T::lit(eps);
    let f = x.matmul(pair.g)?.div(gram(pair.g)?.add_scalar(eps))?;
    let g = xt_times(x, f)?.div(gram(f)?.add_scalar(eps))?;
    Ok(FactorPair { f, g })
}

/// One multiplicative-update iteration. Rank one uses [`rank_one_step`],
/// to which the multiplicative rule reduces.
pub fn mu_step<'g, T: Real>(x: Var<'g, T>, pair: FactorPair<'g, T>, eps: f64) -> Result<FactorPair<'g, T>> {
    if pair.rank() == 1 {
        return rank_one_step(x, pair, eps);
    }
    mu_general(x, pair, eps)
}

pub(crate) fn mu_general<'g, T: Real>(x: Var<'g, T>, pair: FactorPair<'g, T>, eps: f64) -> Result<FactorPair<'g, T>> {
    let eps = T::lit(eps);
    let FactorPair { f, g } = pair;
    let den = f.matmul(gram(g)?)?.add_scalar(eps);
    let f = f.mul(x.matmul(g)?)?.div(den)?;
    let den = g.matmul(gram(f)?)?.add_scalar(eps);
    let g = g.mul(xt_times(x, f)?)?.div(den)?;
    Ok(FactorPair { f, g })
}

/// One HALS iteration: all columns of `F`, then all columns of `G`.
pub fn hals_step<'g, T: Real>(x: Var<'g, T>, pair: FactorPair<'g, T>, eps: f64) -> Result<FactorPair<'g, T>> {
    if pair.rank() == 1 {
        return rank_one_step(x, pair, eps);
    }
    hals_observed(x, pair, eps, |_| Ok(()))
}

/// HALS with a callback after each of the `2R` column updates.
pub fn hals_observed<'g, T: Real>(
    x: Var<'g, T>,
    pair: FactorPair<'g, T>,
    eps: f64,
    mut observe: impl FnMut(&FactorPair<'g, T>) -> Result<()>,
) -> Result<FactorPair<'g, T>> {
    let eps = T::lit(eps);
    let rank = pair.rank();
    let columns = |v: Var<'g, T>| -> Result<Vec<Var<'g, T>>> { (0..rank).map(|r| Ok(v.slice(2, r, 1)?)).collect() };

    let mut f_cols = columns(pair.f)?;
    let g_cols = columns(pair.g)?;
    let a = x.matmul(pair.g)?;
    let b = gram(pair.g)?;
    for r in 0..rank {
        f_cols[r] = column_update(a, b, &f_cols, r, eps)?;
        observe(&FactorPair { f: Var::concat(&f_cols, 2)?, g: pair.g })?;
    }
    let f = Var::concat(&f_cols, 2)?;

    let mut g_cols = g_cols;
    let a = xt_times(x, f)?;
    let b = gram(f)?;
    for r in 0..rank {
        g_cols[r] = column_update(a, b, &g_cols, r, eps)?;
        observe(&FactorPair { f, g: Var::concat(&g_cols, 2)? })?;
    }
    Ok(FactorPair { f, g: Var::concat(&g_cols, 2)? })
}

/// `max(0, (A[:,r] − Σ_{ℓ≠r} B[ℓ,r]·col_ℓ) / (B[r,r] + eps))`.
fn column_update<'g, T: Real>(a: Var<'g, T>, b: Var<'g, T>, cols: &[Var<'g, T>], r: usize, eps: T) -> Result<Var<'g, T>> {
    let entry = |l: usize| -> Result<Var<'g, T>> { Ok(b.slice(1, l, 1)?.slice(2, r, 1)?) };
    let mut num = a.slice(2, r, 1)?;
    for (l, col) in cols.iter().enumerate() {
        if l != r {
            num = num.sub(col.mul(entry(l)?)?)?;
        }
    }
    Ok(num.div(entry(r)?.add_scalar(eps))?.relu())
}

pub fn step<'g, T: Real>(solver: Solver, x: Var<'g, T>, pair: FactorPair<'g, T>, eps: f64) -> Result<FactorPair<'g, T>> {
    match solver {
        Solver::Mu => mu_step(x, pair, eps),
        Solver::Hals => hals_step(x, pair, eps),
    }
}

fn check_input<T: Real>(x: &Tensor<T>, cfg: &NmfConfig) -> Result<()> {
    cfg.validate()?;
    let shape = x.shape();
    if shape.len() != 3 {
        return Err(config(format!("NMF expects a (B', M, N) batch of matrices, got shape {shape:?}")));
    }
    let bound = shape[1].min(shape[2]);
    if cfg.rank > bound {
        return Err(config(format!("NMF rank {} exceeds min(M, N) = {bound} for matrices {}x{}", cfg.rank, shape[1], shape[2])));
    }
    if let Some(pos) = x.data().iter().position(|&v| v < T::zero() || v.is_nan()) {
        return Err(Error::Domain(format!("NMF input must be nonnegative; entry {pos} is {}", x.data()[pos].as_f64())));
    }
    Ok(())
}

/// Runs the configured solver and returns the final factors.
pub fn factorize<'g, T: Real>(x: Var<'g, T>, cfg: &NmfConfig) -> Result<FactorPair<'g, T>> {
    check_input(&x.value(), cfg)?;
    let s = x.shape();
    let (f0, g0) = init_factors::<T>(s[0], s[1], s[2], cfg.rank, cfg.init_seed)?;
    let graph: &Graph<T> = x.graph();
    let mut pair = FactorPair { f: graph.constant(f0), g: graph.constant(g0) };
    for _ in 0..cfg.iterations {
        pair = step(cfg.solver, x, pair, cfg.eps)?;
    }
    Ok(pair)
}

/// `F·Gᵀ` after `cfg.iterations` outer iterations.
pub fn nmf_forward<'g, T: Real>(x: Var<'g, T>, cfg: &NmfConfig) -> Result<Var<'g, T>> {
    factorize(x, cfg)?.reconstruct()
}

/// `‖X − F·Gᵀ‖²` per instance, accumulated in f64.
pub fn nmf_objective<T: Real>(x: &Tensor<T>, f: &Tensor<T>, g: &Tensor<T>) -> Result<Vec<f64>> {
    let (xs, fs, gs) = (x.shape(), f.shape(), g.shape());
    let consistent = xs.len() == 3
        && fs.len() == 3
        && gs.len() == 3
        && fs[0] == xs[0]
        && gs[0] == xs[0]
        && fs[1] == xs[1]
        && gs[1] == xs[2]
        && fs[2] == gs[2];
    if !consistent {
        return Err(Error::Usage(format!("objective shapes do not line up: X {xs:?}, F {fs:?}, G {gs:?}")));
    }
    let (batch, m, n, r) = (xs[0], xs[1], xs[2], fs[2]);
    let (xd, fd, gd) = (x.data(), f.data(), g.data());
    let mut out = Vec::with_capacity(batch);
    for b in 0..batch {
        let mut acc = 0.0;
        for i in 0..m {
            let frow = &fd[(b * m + i) * r..][..r];
            for j in 0..n {
                let grow = &gd[(b * n + j) * r..][..r];
                let approx: f64 = frow.iter().zip(grow).map(|(a, c)| a.as_f64() * c.as_f64()).sum();
                let resid = xd[(b * m + i) * n + j].as_f64() - approx;
                acc += resid * resid;
            }
        }
        out.push(acc);
    }
    Ok(out)
}
