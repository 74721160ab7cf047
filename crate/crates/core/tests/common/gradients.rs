//! Finite-difference checks shared by the gradient tests and the acceptance run.

use factorizer::blocks::WrappedNmf;
use factorizer::loss::{soft_dice_loss, DICE_EPS};
use factorizer::matricize::{MatricizeConfig, MatricizeMode};
use factorizer::nmf::{self, NmfConfig, Solver};
use factorizer::params::{Ctx, Init, ParamStore};
use factorizer_tensor::{gradcheck, ConvGeometry, Tensor, Var};
use rand::Rng;

use super::rng;

const H: f64 = 1e-6;

pub fn uniform(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor<f64> {
    let mut r = rng(seed);
    Tensor::from_fn(shape.to_vec(), |_| r.gen_range(lo..hi)).unwrap()
}

/// Values bounded away from zero so kinks (relu, clamp) are never straddled.
fn off_zero(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut r = rng(seed);
    Tensor::from_fn(shape.to_vec(), |_| {
        let v: f64 = r.gen_range(0.1..1.5);
        if r.gen_bool(0.5) {
            v
        } else {
            -v
        }
    })
    .unwrap()
}

fn err<F>(inputs: &[Tensor<f64>], f: F) -> f64
where
    F: for<'g> Fn(&'g factorizer_tensor::Graph<f64>, &[Var<'g, f64>]) -> factorizer_tensor::Result<Var<'g, f64>>,
{
    gradcheck::check(inputs, f, H).unwrap().max_relative_error()
}

/// Maximum relative error per differentiable primitive.
pub fn primitive_op_errors() -> Vec<(&'static str, f64)> {
    let a = off_zero(&[2, 3, 4], 1);
    let b = uniform(&[2, 3, 4], 0.5, 2.0, 2);
    let row = uniform(&[4], 0.5, 2.0, 3);
    let m1 = uniform(&[2, 3, 5], -1.0, 1.0, 4);
    let m2 = uniform(&[5, 4], -1.0, 1.0, 5);
    let x = uniform(&[1, 2, 4, 3, 4], -1.0, 1.0, 6);
    let w = uniform(&[3, 2, 3, 3, 3], -0.5, 0.5, 7);
    let bias = uniform(&[3], -0.5, 0.5, 8);
    let wd = uniform(&[3, 2, 2, 2, 2], -0.5, 0.5, 9);
    let xt = uniform(&[1, 3, 2, 3, 2], -1.0, 1.0, 10);
    let wt = uniform(&[3, 2, 2, 2, 2], -0.5, 0.5, 11);
    let ln_x = uniform(&[2, 5, 2, 2, 2], -1.0, 1.0, 12);
    let gain = uniform(&[5], 0.5, 1.5, 13);
    let offset = uniform(&[5], -0.5, 0.5, 14);
    let tail = uniform(&[2, 1, 4], -1.0, 1.0, 15);

    vec![
        ("add", err(&[a.clone(), b.clone()], |_, v| v[0].add(v[1]))),
        ("sub", err(&[a.clone(), b.clone()], |_, v| v[0].sub(v[1]))),
        ("mul", err(&[a.clone(), b.clone()], |_, v| v[0].mul(v[1]))),
        ("div", err(&[a.clone(), b.clone()], |_, v| v[0].div(v[1]))),
        ("mul_broadcast", err(&[a.clone(), row.clone()], |_, v| v[0].mul(v[1]))),
        ("div_broadcast", err(&[a.clone(), row.clone()], |_, v| v[0].div(v[1]))),
        ("neg", err(&[a.clone()], |_, v| Ok(v[0].neg()))),
        ("add_scalar", err(&[a.clone()], |_, v| Ok(v[0].add_scalar(1.5)))),
        ("mul_scalar", err(&[a.clone()], |_, v| Ok(v[0].mul_scalar(-2.5)))),
        ("relu", err(&[a.clone()], |_, v| Ok(v[0].relu()))),
        ("gelu", err(&[a.clone()], |_, v| Ok(v[0].gelu()))),
        ("exp", err(&[a.clone()], |_, v| Ok(v[0].exp()))),
        ("ln", err(&[b.clone()], |_, v| Ok(v[0].ln()))),
        ("sqrt", err(&[b.clone()], |_, v| Ok(v[0].sqrt()))),
        ("sigmoid", err(&[a.clone()], |_, v| Ok(v[0].sigmoid()))),
        ("clamp", err(&[a.clone()], |_, v| Ok(v[0].clamp(-0.9, 0.95)))),
        ("clamp_min", err(&[a.clone()], |_, v| Ok(v[0].clamp_min(0.05)))),
        ("max_with_scalar", err(&[a.clone()], |_, v| Ok(v[0].max_with_scalar(-0.05)))),
        ("sum", err(&[a.clone()], |_, v| Ok(v[0].sum()))),
        ("mean", err(&[a.clone()], |_, v| Ok(v[0].mean()))),
        ("sum_axes", err(&[a.clone()], |_, v| v[0].sum_axes(&[0, 2]))),
        ("softmax", err(&[a.clone()], |_, v| v[0].softmax(1))),
        ("matmul", err(&[m1.clone(), m2.clone()], |_, v| v[0].matmul(v[1]))),
        ("transpose", err(&[m1.clone()], |_, v| v[0].transpose())),
        ("reshape", err(&[a.clone()], |_, v| v[0].reshape(vec![6, 4]))),
        ("permute", err(&[a.clone()], |_, v| v[0].permute(&[2, 0, 1]))),
        ("roll", err(&[a.clone()], |_, v| v[0].roll(&[1, 2], &[1, -3]))),
        ("slice", err(&[a.clone()], |_, v| v[0].slice(1, 1, 2))),
        ("concat", err(&[a.clone(), tail], |_, v| Var::concat(&[v[0], v[1]], 1))),
        ("conv3d", err(&[x.clone(), w, bias], |_, v| v[0].conv3d(v[1], Some(v[2]), ConvGeometry::new(3, 1, 1)))),
        ("conv3d_strided", err(&[x, wd], |_, v| v[0].conv3d(v[1], None, ConvGeometry::new(2, 2, 0)))),
        ("conv3d_transposed", err(&[xt, wt], |_, v| v[0].conv3d_transposed(v[1], None, ConvGeometry::new(2, 2, 0)))),
        ("layer_norm", err(&[ln_x, gain, offset], |_, v| v[0].layer_norm(v[1], v[2], 1e-5))),
    ]
}

/// NMF reconstruction with both solvers, differentiated through every iteration.
pub fn nmf_errors(iterations: usize) -> Vec<(&'static str, f64)> {
    let x = uniform(&[2, 6, 10], 0.1, 1.0, 20);
    [("nmf_mu_r2", Solver::Mu, 2), ("nmf_hals_r2", Solver::Hals, 2), ("nmf_rank_one", Solver::Hals, 1)]
        .into_iter()
        .map(|(name, solver, rank)| {
            let cfg = NmfConfig { rank, iterations, solver, init_seed: 3, ..NmfConfig::default() };
            (name, err(&[x.clone()], move |_, v| nmf::nmf_forward(v[0], &cfg).map_err(to_tensor_err)))
        })
        .collect()
}

/// The full Wrapped NMF block (projection, matricize, ReLU, NMF, dematricize,
/// projection) for each matricize mode.
pub fn wrapped_nmf_errors(iterations: usize) -> Vec<(&'static str, f64)> {
    let mut store = ParamStore::<f64>::new();
    let mut init = Init::new(&mut store, 17);
    let modes = [
        ("wrapped_global", MatricizeConfig::global(2)),
        ("wrapped_local", MatricizeConfig::new(MatricizeMode::Local, 2, 2)),
        ("wrapped_shifted", MatricizeConfig::new(MatricizeMode::ShiftedWindow, 2, 2)),
    ];
    let nmf = NmfConfig { rank: 2, iterations, solver: Solver::Hals, init_seed: 5, ..NmfConfig::default() };
    let blocks: Vec<_> = modes
        .iter()
        .enumerate()
        .map(|(i, (_, m))| WrappedNmf::new(&mut init, &format!("w{i}"), i + 1, 4, *m, nmf).unwrap())
        .collect();
    // The checker's graph lifetime is universally quantified, so the
    // parameters must outlive any graph.
    let store: &'static ParamStore<f64> = Box::leak(Box::new(store));
    let x = uniform(&[1, 4, 4, 4, 4], -1.0, 1.0, 21);
    modes
        .iter()
        .zip(&blocks)
        .map(|((name, _), block)| {
            let e = err(&[x.clone()], |g, v| {
                let ctx = Ctx::new(g, store, false);
                block.forward(&ctx, v[0]).map_err(to_tensor_err)
            });
            (*name, e)
        })
        .collect()
}

pub fn soft_dice_error() -> f64 {
    let g = Tensor::from_fn(vec![2, 12], |i| ((i * 7) % 3 == 0) as u8 as f64).unwrap();
    let p = uniform(&[2, 12], 0.05, 0.95, 30);
    err(&[p], |graph, v| soft_dice_loss(graph.constant(g.clone()), v[0], DICE_EPS).map_err(to_tensor_err))
}

fn to_tensor_err(e: factorizer::Error) -> factorizer_tensor::TensorError {
    match e {
        factorizer::Error::Tensor(t) => t,
        other => factorizer_tensor::TensorError::Usage(other.to_string()),
    }
}
