//! Property sweeps used both by the per-module tests and by the acceptance run.

use factorizer::matricize::{dematricize, matricize, MatricizeConfig, MatricizeMode};
use factorizer::nmf::{self, init_factors, nmf_objective, FactorPair, Solver};
use factorizer_tensor::{Graph, Tensor};
use rand::Rng;

use super::rng;

pub const NMF_EPS: f64 = 1e-8;

pub fn nonneg_matrix(m: usize, n: usize, seed: u64) -> Tensor<f64> {
    let mut r = rng(seed);
    Tensor::from_fn(vec![1, m, n], |_| r.gen_range(0.0..1.0)).unwrap()
}

/// Objective after initialization and after each of `iterations` solver steps.
pub fn objective_trace(x: &Tensor<f64>, rank: usize, solver: Solver, iterations: usize, seed: u64) -> Vec<f64> {
    let s = x.shape();
    let (f0, g0) = init_factors::<f64>(s[0], s[1], s[2], rank, seed).unwrap();
    let graph = Graph::new();
    let xv = graph.constant(x.clone());
    let mut pair = FactorPair { f: graph.constant(f0), g: graph.constant(g0) };
    let mut trace = vec![nmf_objective(x, &pair.f.value(), &pair.g.value()).unwrap()[0]];
    for _ in 0..iterations {
        pair = nmf::step(solver, xv, pair, NMF_EPS).unwrap();
        trace.push(nmf_objective(x, &pair.f.value(), &pair.g.value()).unwrap()[0]);
    }
    trace
}

/// Worst relative increase `(next − prev)/prev` over all steps.
pub fn worst_increase(trace: &[f64]) -> f64 {
    trace.windows(2).map(|w| (w[1] - w[0]) / w[0].max(f64::MIN_POSITIVE)).fold(f64::NEG_INFINITY, f64::max)
}

pub struct MonotonicityReport {
    pub runs: usize,
    pub worst: f64,
    pub failures: Vec<String>,
}

/// `count` matrices of each shape, both solvers, ranks cycling through 1..=4.
pub fn nmf_monotonicity(count: usize, iterations: usize, slack: f64) -> MonotonicityReport {
    let mut report = MonotonicityReport { runs: 0, worst: f64::NEG_INFINITY, failures: Vec::new() };
    for (si, &(m, n)) in [(8usize, 512usize), (4, 64)].iter().enumerate() {
        for i in 0..count {
            let seed = (si * 10_000 + i) as u64;
            let x = nonneg_matrix(m, n, seed);
            let rank = 1 + i % 4;
            for solver in [Solver::Mu, Solver::Hals] {
                let w = worst_increase(&objective_trace(&x, rank, solver, iterations, seed + 7));
                report.runs += 1;
                report.worst = report.worst.max(w);
                if w > slack {
                    report.failures.push(format!("({m},{n}) seed {seed} rank {rank} {}: +{w:e}", solver.name()));
                }
            }
        }
    }
    report
}

/// Instances where the multiplicative and HALS steps disagree at rank one,
/// and instances where the generic column-wise HALS path disagrees with
/// the closed-form rank-one update.
pub fn rank_one_mismatches(count: usize) -> (usize, usize) {
    let mut r = rng(77);
    let (mut solver_diff, mut generic_diff) = (0, 0);
    for i in 0..count {
        let (b, m, n) = (r.gen_range(1..4), r.gen_range(1..10), r.gen_range(1..40));
        let mut x = Tensor::from_fn(vec![b, m, n], |_| r.gen_range(0.0..2.0)).unwrap();
        if i % 5 == 0 {
            // exact zeros exercise the eps guard
            x = x.map(|v| if v < 0.5 { 0.0 } else { v });
        }
        let (f0, g0) = init_factors::<f64>(b, m, n, 1, i as u64).unwrap();
        let graph = Graph::new();
        let xv = graph.constant(x);
        let pair = FactorPair { f: graph.constant(f0), g: graph.constant(g0) };
        let mu = nmf::mu_step(xv, pair, NMF_EPS).unwrap();
        let hals = nmf::hals_step(xv, pair, NMF_EPS).unwrap();
        let generic = nmf::hals_observed(xv, pair, NMF_EPS, |_| Ok(())).unwrap();
        let same = |a: &FactorPair<f64>, c: &FactorPair<f64>| {
            a.f.value().data().iter().zip(c.f.value().data()).all(|(p, q)| p.to_bits() == q.to_bits())
                && a.g.value().data().iter().zip(c.g.value().data()).all(|(p, q)| p.to_bits() == q.to_bits())
        };
        if !same(&mu, &hals) {
            solver_diff += 1;
        }
        if !same(&hals, &generic) {
            generic_diff += 1;
        }
    }
    (solver_diff, generic_diff)
}

/// A random `(B, C, H, W, D)` shape valid for `cfg`'s mode with the given
/// head dimension and patch.
pub fn random_valid_shape(mode: MatricizeMode, r: &mut impl Rng) -> ([usize; 5], MatricizeConfig) {
    let e = r.gen_range(1..=3);
    let p = match mode {
        MatricizeMode::Global => 1,
        MatricizeMode::Local => r.gen_range(1..=3),
        MatricizeMode::ShiftedWindow => 2 * r.gen_range(1..=2),
    };
    let shape = [r.gen_range(1..=2), e * r.gen_range(1..=3), p * r.gen_range(1..=3), p * r.gen_range(1..=3), p * r.gen_range(1..=2)];
    (shape, MatricizeConfig::new(mode, e, p))
}

/// Number of shapes (out of `count` per mode) that fail an exact round trip.
pub fn matricize_round_trip_failures(count: usize) -> Vec<(MatricizeMode, [usize; 5])> {
    let mut r = rng(99);
    let mut failures = Vec::new();
    for mode in [MatricizeMode::Global, MatricizeMode::Local, MatricizeMode::ShiftedWindow] {
        for _ in 0..count {
            let (shape, cfg) = random_valid_shape(mode, &mut r);
            let x = Tensor::from_fn(shape.to_vec(), |_| r.gen_range(-1.0..1.0)).unwrap();
            let graph = Graph::<f64>::new();
            let batch = matricize(graph.constant(x.clone()), cfg).unwrap();
            let back = dematricize(&batch).unwrap().value();
            if back != x {
                failures.push((mode, shape));
            }
        }
    }
    failures
}
