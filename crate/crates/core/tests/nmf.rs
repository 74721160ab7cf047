mod common;

use common::rng;
use common::suites::*;
use factorizer::nmf::*;
use factorizer::Error;
use factorizer_tensor::{Graph, Tensor};
use rand::Rng;

#[test]
fn objective_never_increases() {
    let report = nmf_monotonicity(20, 5, 1e-6);
    assert!(report.failures.is_empty(), "{:?}", report.failures);
    assert_eq!(report.runs, 80);
}

#[test]
fn long_runs_stay_monotone() {
    for solver in [Solver::Mu, Solver::Hals] {
        let x = nonneg_matrix(6, 30, 4);
        let trace = objective_trace(&x, 3, solver, 60, 2);
        assert!(worst_increase(&trace) <= 1e-9, "{}: {trace:?}", solver.name());
        assert!(trace[60] < trace[0]);
    }
}

#[test]
fn rank_one_solvers_agree_bitwise() {
    assert_eq!(rank_one_mismatches(50), (0, 0));
}

#[test]
fn recovers_exact_low_rank_matrices() {
    let mut r = rng(8);
    let f = Tensor::from_fn(vec![1, 8, 2], |_| r.gen_range(0.1..1.0)).unwrap();
    let g = Tensor::from_fn(vec![1, 40, 2], |_| r.gen_range(0.1..1.0)).unwrap();
    let graph = Graph::<f64>::new();
    let x = graph.constant(f).matmul(graph.constant(g).transpose().unwrap()).unwrap().value();
    let norm: f64 = x.data().iter().map(|v| v * v).sum();
    for solver in [Solver::Mu, Solver::Hals] {
        let trace = objective_trace(&x, 2, solver, 300, 1);
        assert!(trace[300] / norm < 1e-4, "{}: {}", solver.name(), trace[300] / norm);
    }
}

#[test]
fn objective_matches_naive_sum() {
    let mut r = rng(9);
    let x = Tensor::from_fn(vec![2, 3, 4], |_| r.gen_range(0.0..1.0)).unwrap();
    let f = Tensor::from_fn(vec![2, 3, 2], |_| r.gen_range(0.0..1.0)).unwrap();
    let g = Tensor::from_fn(vec![2, 4, 2], |_| r.gen_range(0.0..1.0)).unwrap();
    let got = nmf_objective(&x, &f, &g).unwrap();
    for b in 0..2 {
        let mut want = 0.0;
        for i in 0..3 {
            for j in 0..4 {
                let approx: f64 = (0..2).map(|k| f.get(&[b, i, k]).unwrap() * g.get(&[b, j, k]).unwrap()).sum();
                want += (x.get(&[b, i, j]).unwrap() - approx).powi(2);
            }
        }
        assert!((got[b] - want).abs() < 1e-14);
    }
    assert!(nmf_objective(&x, &g, &f).is_err());
}

#[test]
fn initialization_is_seeded_and_positive() {
    let (f1, g1) = init_factors::<f64>(2, 3, 5, 2, 11).unwrap();
    let (f2, g2) = init_factors::<f64>(2, 3, 5, 2, 11).unwrap();
    let (f3, _) = init_factors::<f64>(2, 3, 5, 2, 12).unwrap();
    assert_eq!((&f1, &g1), (&f2, &g2));
    assert_ne!(f1, f3);
    assert!(f1.data().iter().chain(g1.data()).all(|&v| v > 0.0 && v < 1.0));
    assert_eq!((f1.shape(), g1.shape()), (&[2, 3, 2][..], &[2, 5, 2][..]));
}

#[test]
fn factors_stay_nonnegative_on_sparse_input() {
    let x = nonneg_matrix(5, 20, 3).map(|v| if v < 0.7 { 0.0 } else { v });
    let graph = Graph::new();
    for solver in [Solver::Mu, Solver::Hals] {
        let cfg = NmfConfig { rank: 3, iterations: 10, solver, ..NmfConfig::default() };
        let pair = factorize(graph.constant(x.clone()), &cfg).unwrap();
        assert!(pair.f.value().data().iter().chain(pair.g.value().data()).all(|v| *v >= 0.0 && v.is_finite()));
    }
    // an all-zero matrix is handled by the eps guard
    let zero = Tensor::<f64>::zeros(vec![1, 4, 6]).unwrap();
    let out = nmf_forward(graph.constant(zero), &NmfConfig { rank: 2, ..NmfConfig::default() }).unwrap();
    assert!(out.value().data().iter().all(|&v| v == 0.0));
}

#[test]
fn invalid_inputs_are_rejected() {
    let graph = Graph::new();
    let x = graph.constant(nonneg_matrix(3, 4, 1));
    let too_big = NmfConfig { rank: 4, ..NmfConfig::default() };
    assert!(matches!(factorize(x, &too_big), Err(Error::Config(_))));
    let neg = graph.constant(Tensor::new(vec![1, 2, 2], vec![0.5, -0.1, 0.2, 0.3]).unwrap());
    assert!(matches!(factorize(neg, &NmfConfig::default()), Err(Error::Domain(_))));
    let nan = graph.constant(Tensor::new(vec![1, 1, 2], vec![f64::NAN, 0.3]).unwrap());
    assert!(matches!(factorize(nan, &NmfConfig::default()), Err(Error::Domain(_))));
    assert!(NmfConfig { iterations: 0, ..NmfConfig::default() }.validate().is_err());
    assert!(NmfConfig { eps: 0.0, ..NmfConfig::default() }.validate().is_err());
}

#[test]
fn f32_and_f64_agree() {
    let x64 = nonneg_matrix(4, 16, 6);
    let x32: Tensor<f32> = x64.cast();
    let cfg = NmfConfig { rank: 2, iterations: 5, ..NmfConfig::default() };
    let a = nmf_forward(Graph::new().constant(x64), &cfg).map(|v| v.value()).unwrap();
    let b = nmf_forward(Graph::new().constant(x32), &cfg).map(|v| v.value()).unwrap();
    for (p, q) in a.data().iter().zip(b.data()) {
        assert!((p - *q as f64).abs() < 1e-4);
    }
}
