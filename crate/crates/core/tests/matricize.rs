mod common;

use common::rng;
use common::suites::*;
use factorizer::matricize::*;
use factorizer::Error;
use factorizer_tensor::{Graph, Tensor};
use rand::Rng;

fn ramp(shape: [usize; 5]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |i| i as f64).unwrap()
}

/// Where the local layout sends voxel `(b, c, h, w, d)`: window-major
/// batches, channel-within-head rows, window-raster columns.
fn local_index(s: [usize; 5], e: usize, p: usize, [b, c, h, w, d]: [usize; 5]) -> [usize; 3] {
    let (nh, nw, nd) = (s[2] / p, s[3] / p, s[4] / p);
    let batch = (((b * (s[1] / e) + c / e) * nh + h / p) * nw + w / p) * nd + d / p;
    let col = ((h % p) * p + w % p) * p + d % p;
    [batch, c % e, col]
}

fn voxels(s: [usize; 5]) -> impl Iterator<Item = [usize; 5]> {
    let n: usize = s.iter().product();
    (0..n).map(move |mut i| {
        let mut idx = [0; 5];
        for a in (0..5).rev() {
            idx[a] = i % s[a];
            i /= s[a];
        }
        idx
    })
}

fn matrices(x: &Tensor<f64>, cfg: MatricizeConfig) -> Tensor<f64> {
    let g = Graph::new();
    matricize(g.constant(x.clone()), cfg).unwrap().matrices.value()
}

#[test]
fn round_trips_are_exact() {
    let failures = matricize_round_trip_failures(20);
    assert!(failures.is_empty(), "{failures:?}");
}

#[test]
fn global_layout() {
    let s = [2, 4, 2, 3, 2];
    let x = ramp(s);
    let m = matrices(&x, MatricizeConfig::global(2));
    assert_eq!(m.shape(), &[4, 2, 12]);
    for v in voxels(s) {
        let [b, c, h, w, d] = v;
        let at = [b * 2 + c / 2, c % 2, (h * 3 + w) * 2 + d];
        assert_eq!(m.get(&at).unwrap(), x.get(&v).unwrap());
    }
}

#[test]
fn local_layout() {
    let s = [2, 6, 4, 2, 6];
    let (e, p) = (3, 2);
    let x = ramp(s);
    let m = matrices(&x, MatricizeConfig::new(MatricizeMode::Local, e, p));
    assert_eq!(m.shape(), &[2 * 2 * 2 * 1 * 3, 3, 8]);
    for v in voxels(s) {
        assert_eq!(m.get(&local_index(s, e, p, v)).unwrap(), x.get(&v).unwrap(), "{v:?}");
    }
}

#[test]
fn shifted_window_layout() {
    let s = [1, 2, 4, 4, 8];
    let (e, p) = (1, 4);
    let x = ramp(s);
    let m = matrices(&x, MatricizeConfig::new(MatricizeMode::ShiftedWindow, e, p));
    let half = m.shape()[0] / 2;
    assert_eq!(m.shape(), &[2 * half, 1, 64]);
    assert_eq!(half, 2 * 1 * 1 * 2);
    for v in voxels(s) {
        let [bi, ci, mi] = local_index(s, e, p, v);
        assert_eq!(m.get(&[bi, ci, mi]).unwrap(), x.get(&v).unwrap());
        // the shifted copy sees the volume rolled forward by P/2 on every axis
        let [b, c, h, w, d] = v;
        let shifted = [b, c, (h + 2) % s[2], (w + 2) % s[3], (d + 2) % s[4]];
        let [bi, ci, mi] = local_index(s, e, p, shifted);
        assert_eq!(m.get(&[half + bi, ci, mi]).unwrap(), x.get(&v).unwrap());
    }
}

#[test]
fn matrix_shapes_match_formulas() {
    let mut r = rng(3);
    for mode in [MatricizeMode::Global, MatricizeMode::Local, MatricizeMode::ShiftedWindow] {
        for _ in 0..10 {
            let (s, cfg) = random_valid_shape(mode, &mut r);
            let total: usize = s.iter().product();
            let e = cfg.head_dim;
            let n = match mode {
                MatricizeMode::Global => s[2] * s[3] * s[4],
                _ => cfg.patch.pow(3),
            };
            let copies = if mode == MatricizeMode::ShiftedWindow { 2 } else { 1 };
            assert_eq!(cfg.matrix_shape(&s).unwrap(), [copies * total / (e * n), e, n]);
            assert_eq!(matrices(&Tensor::zeros(s.to_vec()).unwrap(), cfg).shape(), &cfg.matrix_shape(&s).unwrap());
        }
    }
}

#[test]
fn divisibility_errors_name_the_axis() {
    let err = |cfg: MatricizeConfig, s: [usize; 5]| match cfg.validate(&s) {
        Err(Error::Config(msg)) => msg,
        other => panic!("expected a config error, got {other:?}"),
    };
    assert!(err(MatricizeConfig::global(3), [1, 4, 2, 2, 2]).contains("C=4"));
    assert!(err(MatricizeConfig::new(MatricizeMode::Local, 2, 4), [1, 4, 8, 6, 8]).contains("W=6"));
    assert!(err(MatricizeConfig::new(MatricizeMode::Local, 2, 4), [1, 4, 8, 8, 2]).contains("D=2"));
    assert!(err(MatricizeConfig::new(MatricizeMode::ShiftedWindow, 2, 3), [1, 4, 6, 6, 6]).contains("even"));
    assert!(MatricizeConfig::global(2).validate(&[4, 4, 4]).is_err());
}

#[test]
fn dematricize_rejects_altered_matrices() {
    let g = Graph::<f64>::new();
    let cfg = MatricizeConfig::new(MatricizeMode::Local, 2, 2);
    let batch = matricize(g.constant(ramp([1, 4, 4, 4, 4])), cfg).unwrap();
    let wrong = batch.with_matrices(batch.matrices.slice(0, 0, 4).unwrap());
    assert!(matches!(dematricize(&wrong), Err(Error::Structural(_))));
}

#[test]
fn matricize_gradient_is_the_inverse_layout() {
    // d/dx Σ w ⊙ matricize(x) places each weight back at its voxel
    let s = [1, 2, 4, 4, 4];
    let cfg = MatricizeConfig::new(MatricizeMode::Local, 1, 2);
    let g = Graph::<f64>::new();
    let x = g.param(Tensor::zeros(s.to_vec()).unwrap());
    let m = matricize(x, cfg).unwrap();
    let mut r = rng(5);
    let w = Tensor::from_fn(m.matrices.shape(), |_| r.gen_range(-1.0..1.0)).unwrap();
    let loss = m.matrices.mul(g.constant(w.clone())).unwrap().sum();
    let grads = g.backward(loss).unwrap();
    let dx = grads.get(x).unwrap();
    for v in voxels(s) {
        assert_eq!(dx.get(&v).unwrap(), w.get(&local_index(s, 1, 2, v)).unwrap());
    }
}
