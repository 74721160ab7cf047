//! Brute-force oracles and fixtures shared by the integration tests.
#![allow(dead_code)]

pub mod gradients;
pub mod suites;

use factorizer::matricize::MatricizeMode;
use factorizer::metrics::Mask;
use factorizer::network::{Activation, FactorizerConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// The desk-scale Swin Factorizer: C=16, E=4, P=4, 32³ patches, softmax.
pub fn small_config() -> FactorizerConfig {
    FactorizerConfig {
        in_channels: 2,
        base_channels: 16,
        out_channels: 3,
        head_dims: vec![4; 5],
        patches: vec![4; 5],
        patch_size: [32; 3],
        matricize: MatricizeMode::ShiftedWindow,
        activation: Activation::Softmax,
        ..FactorizerConfig::default()
    }
}

/// A cheaper two-stage variant for tests that run the network many times.
pub fn tiny_config() -> FactorizerConfig {
    FactorizerConfig {
        in_channels: 2,
        base_channels: 4,
        out_channels: 3,
        stages: 2,
        head_dims: vec![2; 3],
        patches: vec![2; 3],
        patch_size: [8; 3],
        matricize: MatricizeMode::ShiftedWindow,
        activation: Activation::Softmax,
        ..FactorizerConfig::default()
    }
}

pub fn random_mask(dims: [usize; 3], density: f64, rng: &mut ChaCha8Rng) -> Mask {
    Mask::from_fn(dims, |_, _, _| rng.gen_bool(density))
}

fn at(m: &Mask, i: isize, j: isize, k: isize) -> bool {
    let d = m.dims;
    if i < 0 || j < 0 || k < 0 || i >= d[0] as isize || j >= d[1] as isize || k >= d[2] as isize {
        return false;
    }
    m.data[(i as usize * d[1] + j as usize) * d[2] + k as usize]
}

/// Surface voxels by direct neighbour inspection.
pub fn brute_surface(m: &Mask) -> Vec<[usize; 3]> {
    let mut out = Vec::new();
    for i in 0..m.dims[0] {
        for j in 0..m.dims[1] {
            for k in 0..m.dims[2] {
                let (a, b, c) = (i as isize, j as isize, k as isize);
                if !at(m, a, b, c) {
                    continue;
                }
                let nbs = [(a - 1, b, c), (a + 1, b, c), (a, b - 1, c), (a, b + 1, c), (a, b, c - 1), (a, b, c + 1)];
                if nbs.iter().any(|&(x, y, z)| !at(m, x, y, z)) {
                    out.push([i, j, k]);
                }
            }
        }
    }
    out
}

pub fn brute_directed(from: &[[usize; 3]], to: &[[usize; 3]], spacing: [f64; 3]) -> Vec<f64> {
    from.iter()
        .map(|p| {
            to.iter()
                .map(|q| {
                    let d: [f64; 3] = [0, 1, 2].map(|a| spacing[a] * (p[a] as f64 - q[a] as f64));
                    (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
                })
                .fold(f64::INFINITY, f64::min)
        })
        .collect()
}

/// Order-statistic interpolation at rank `0.95·(n − 1)`.
pub fn brute_q95(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let pos = 0.95 * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let frac = pos - lo as f64;
    if frac == 0.0 || lo + 1 == v.len() {
        v[lo]
    } else {
        v[lo] + frac * (v[lo + 1] - v[lo])
    }
}

/// `None` when exactly one mask is empty.
pub fn brute_hd95(g: &Mask, y: &Mask, spacing: [f64; 3]) -> Option<f64> {
    let (sg, sy) = (brute_surface(g), brute_surface(y));
    match (sg.is_empty(), sy.is_empty()) {
        (true, true) => Some(0.0),
        (false, false) => Some(brute_q95(brute_directed(&sg, &sy, spacing)).max(brute_q95(brute_directed(&sy, &sg, spacing)))),
        _ => None,
    }
}

pub fn brute_dice(g: &Mask, y: &Mask) -> f64 {
    let inter = g.data.iter().zip(&y.data).filter(|(a, b)| **a && **b).count();
    let total = g.data.iter().filter(|v| **v).count() + y.data.iter().filter(|v| **v).count();
    if total == 0 {
        1.0
    } else {
        2.0 * inter as f64 / total as f64
    }
}

/// Fifty mask pairs up to 8³: random fills, shifted boxes, single voxels,
/// identical and empty masks.
pub fn metric_cases() -> Vec<(Mask, Mask, [f64; 3])> {
    let mut r = rng(2024);
    let spacings = [[1.0, 1.0, 1.0], [1.0, 2.0, 0.5], [0.9, 1.1, 1.3]];
    let mut cases = Vec::new();
    for n in 0..50 {
        let dims = [r.gen_range(1..=8), r.gen_range(1..=8), r.gen_range(1..=8)];
        let spacing = spacings[n % 3];
        let (g, y) = match n % 5 {
            0 => (Mask::empty(dims), Mask::empty(dims)),
            1 => {
                let m = random_mask(dims, 0.4, &mut r);
                (m.clone(), m)
            }
            2 => {
                let box_at = |o: [usize; 3], s: [usize; 3]| {
                    Mask::from_fn(dims, move |i, j, k| {
                        (o[0]..o[0] + s[0]).contains(&i) && (o[1]..o[1] + s[1]).contains(&j) && (o[2]..o[2] + s[2]).contains(&k)
                    })
                };
                let o1 = dims.map(|e| r.gen_range(0..e));
                let o2 = dims.map(|e| r.gen_range(0..e));
                let s = dims.map(|e| r.gen_range(1..=e));
                (box_at(o1, s), box_at(o2, s))
            }
            3 => {
                let v1 = dims.map(|e| r.gen_range(0..e));
                let v2 = dims.map(|e| r.gen_range(0..e));
                (Mask::from_fn(dims, |i, j, k| [i, j, k] == v1), Mask::from_fn(dims, |i, j, k| [i, j, k] == v2))
            }
            _ => {
                let d1 = r.gen_range(0.05..0.6);
                let d2 = r.gen_range(0.0..0.6);
                (random_mask(dims, d1, &mut r), random_mask(dims, d2, &mut r))
            }
        };
        cases.push((g, y, spacing));
    }
    cases
}
