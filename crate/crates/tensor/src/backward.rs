//! Vector-Jacobian products for every recorded op.

use crate::error::Result;
use crate::graph::{Node, Op};
use crate::kernels::{self, ConvGeometry, MatView};
use crate::ops::{gelu_grad_scalar, matmul_plan, split_axis};
use crate::real::Real;
use crate::tensor::{numel, strides_of, Tensor};

type Contributions<T> = Vec<(usize, Vec<T>)>;

/// Gradients of a broadcast binary op. `partials(a, b, out)` returns
/// `(∂out/∂a, ∂out/∂b)` at one element.
fn binary_vjp<T: Real>(
    nodes: &[Node<T>],
    ia: usize,
    ib: usize,
    out: &Tensor<T>,
    g: &[T],
    partials: impl Fn(T, T, T) -> (T, T),
) -> Contributions<T> {
    let (a, b) = (&nodes[ia].value, &nodes[ib].value);
    let (need_a, need_b) = (nodes[ia].requires_grad, nodes[ib].requires_grad);
    let mut ga = vec![T::zero(); if need_a { a.numel() } else { 0 }];
    let mut gb = vec![T::zero(); if need_b { b.numel() } else { 0 }];
    let (ad, bd, od) = (a.data(), b.data(), out.data());
    if a.shape() == b.shape() {
        for i in 0..g.len() {
            let (da, db) = partials(ad[i], bd[i], od[i]);
            if need_a {
                ga[i] = g[i] * da;
            }
            if need_b {
                gb[i] = g[i] * db;
            }
        }
    } else {
        let sa = kernels::broadcast_strides(a.shape(), out.shape());
        let sb = kernels::broadcast_strides(b.shape(), out.shape());
        kernels::for_each_offset2(out.shape(), &sa, &sb, |i, oa, ob| {
            let (da, db) = partials(ad[oa], bd[ob], od[i]);
            if need_a {
                ga[oa] += g[i] * da;
            }
            if need_b {
                gb[ob] += g[i] * db;
            }
        });
    }
    let mut res = Vec::with_capacity(2);
    if need_a {
        res.push((ia, ga));
    }
    if need_b {
        res.push((ib, gb));
    }
    res
}

fn unary_vjp<T: Real>(
    nodes: &[Node<T>],
    ix: usize,
    out: &Tensor<T>,
    g: &[T],
    deriv: impl Fn(T, T) -> T,
) -> Contributions<T> {
    let x = nodes[ix].value.data();
    let od = out.data();
    let gx = (0..g.len()).map(|i| g[i] * deriv(x[i], od[i])).collect();
    vec![(ix, gx)]
}

fn conv_vjp<T: Real>(
    nodes: &[Node<T>],
    ix: usize,
    iw: usize,
    ib: Option<usize>,
    geo: &ConvGeometry,
    out: &Tensor<T>,
    g: &[T],
) -> Contributions<T> {
    let x = &nodes[ix].value;
    let w = &nodes[iw].value;
    let (batch, cin) = (x.shape()[0], x.shape()[1]);
    let spatial = [x.shape()[2], x.shape()[3], x.shape()[4]];
    let out_sp = [out.shape()[2], out.shape()[3], out.shape()[4]];
    let cout = out.shape()[1];
    let (n_in, n_out) = (numel(&spatial), numel(&out_sp));
    let ck = cin * geo.kernel_volume();
    let need_x = nodes[ix].requires_grad;
    let need_w = nodes[iw].requires_grad;

    let mut gx = vec![T::zero(); if need_x { x.numel() } else { 0 }];
    let mut gw = vec![T::zero(); if need_w { w.numel() } else { 0 }];
    let mut dcol = vec![T::zero(); if need_x && !geo.is_pointwise() { ck * n_out } else { 0 }];
    for bi in 0..batch {
        let gb = &g[bi * cout * n_out..(bi + 1) * cout * n_out];
        let xb = &x.data()[bi * cin * n_in..(bi + 1) * cin * n_in];
        if need_w {
            let owned;
            let col: &[T] = if geo.is_pointwise() {
                xb
            } else {
                owned = kernels::im2col(xb, cin, spatial, geo, out_sp);
                &owned
            };
            kernels::gemm(
                cout,
                n_out,
                ck,
                gb,
                MatView::row_major(0, n_out),
                col,
                MatView::transposed(0, n_out),
                &mut gw,
                MatView::row_major(0, ck),
                true,
            );
        }
        if need_x {
            let gxb = &mut gx[bi * cin * n_in..(bi + 1) * cin * n_in];
            if geo.is_pointwise() {
                kernels::gemm(
                    ck,
                    cout,
                    n_out,
                    w.data(),
                    MatView::transposed(0, ck),
                    gb,
                    MatView::row_major(0, n_out),
                    gxb,
                    MatView::row_major(0, n_out),
                    false,
                );
            } else {
                kernels::gemm(
                    ck,
                    cout,
                    n_out,
                    w.data(),
                    MatView::transposed(0, ck),
                    gb,
                    MatView::row_major(0, n_out),
                    &mut dcol,
                    MatView::row_major(0, n_out),
                    false,
                );
                kernels::col2im(&dcol, cin, spatial, geo, out_sp, gxb);
            }
        }
    }
    let mut res = Vec::with_capacity(3);
    if need_x {
        res.push((ix, gx));
    }
    if need_w {
        res.push((iw, gw));
    }
    if let Some(ib) = ib {
        if nodes[ib].requires_grad {
            res.push((ib, channel_sums(g, batch, cout, n_out)));
        }
    }
    res
}

fn conv_transposed_vjp<T: Real>(
    nodes: &[Node<T>],
    ix: usize,
    iw: usize,
    ib: Option<usize>,
    geo: &ConvGeometry,
    out: &Tensor<T>,
    g: &[T],
) -> Contributions<T> {
    let x = &nodes[ix].value;
    let w = &nodes[iw].value;
    let (batch, cin) = (x.shape()[0], x.shape()[1]);
    let spatial = [x.shape()[2], x.shape()[3], x.shape()[4]];
    let out_sp = [out.shape()[2], out.shape()[3], out.shape()[4]];
    let cout = out.shape()[1];
    let (n_in, n_out) = (numel(&spatial), numel(&out_sp));
    let ck = cout * geo.kernel_volume();
    let need_x = nodes[ix].requires_grad;
    let need_w = nodes[iw].requires_grad;

    let mut gx = vec![T::zero(); if need_x { x.numel() } else { 0 }];
    let mut gw = vec![T::zero(); if need_w { w.numel() } else { 0 }];
    if need_x || need_w {
        for bi in 0..batch {
            let gb = &g[bi * cout * n_out..(bi + 1) * cout * n_out];
            let dcol = kernels::im2col(gb, cout, out_sp, geo, spatial);
            if need_x {
                kernels::gemm(
                    cin,
                    ck,
                    n_in,
                    w.data(),
                    MatView::row_major(0, ck),
                    &dcol,
                    MatView::row_major(0, n_in),
                    &mut gx[bi * cin * n_in..(bi + 1) * cin * n_in],
                    MatView::row_major(0, n_in),
                    false,
                );
            }
            if need_w {
                let xb = &x.data()[bi * cin * n_in..(bi + 1) * cin * n_in];
                kernels::gemm(
                    cin,
                    n_in,
                    ck,
                    xb,
                    MatView::row_major(0, n_in),
                    &dcol,
                    MatView::transposed(0, n_in),
                    &mut gw,
                    MatView::row_major(0, ck),
                    true,
                );
            }
        }
    }
    let mut res = Vec::with_capacity(3);
    if need_x {
        res.push((ix, gx));
    }
    if need_w {
        res.push((iw, gw));
    }
    if let Some(ib) = ib {
        if nodes[ib].requires_grad {
            res.push((ib, channel_sums(g, batch, cout, n_out)));
        }
    }
    res
}

fn channel_sums<T: Real>(g: &[T], batch: usize, channels: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); channels];
    for bi in 0..batch {
        for (c, acc) in out.iter_mut().enumerate() {
            let base = (bi * channels + c) * n;
            *acc += g[base..base + n].iter().copied().sum::<T>();
        }
    }
    out
}

pub(crate) fn propagate<T: Real>(nodes: &[Node<T>], node: &Node<T>, g: &[T]) -> Result<Contributions<T>> {
    let out = &node.value;
    let res = match &node.op {
        Op::Leaf => Vec::new(),
        Op::Add(a, b) => binary_vjp(nodes, *a, *b, out, g, |_, _, _| (T::one(), T::one())),
        Op::Sub(a, b) => binary_vjp(nodes, *a, *b, out, g, |_, _, _| (T::one(), -T::one())),
        Op::Mul(a, b) => binary_vjp(nodes, *a, *b, out, g, |x, y, _| (y, x)),
        Op::Div(a, b) => binary_vjp(nodes, *a, *b, out, g, |_, y, o| (T::one() / y, -o / y)),
        Op::AddScalar(x) => vec![(*x, g.to_vec())],
        Op::MulScalar(x, s) => vec![(*x, g.iter().map(|&v| v * *s).collect())],
        Op::Relu(x) => unary_vjp(nodes, *x, out, g, |v, _| {
            if v > T::zero() {
                T::one()
            } else {
                T::zero()
            }
        }),
        Op::Gelu(x) => unary_vjp(nodes, *x, out, g, |v, _| gelu_grad_scalar(v)),
        Op::Exp(x) => unary_vjp(nodes, *x, out, g, |_, o| o),
        Op::Log(x) => unary_vjp(nodes, *x, out, g, |v, _| T::one() / v),
        Op::Sigmoid(x) => unary_vjp(nodes, *x, out, g, |_, o| o * (T::one() - o)),
        Op::Sqrt(x) => unary_vjp(nodes, *x, out, g, |_, o| T::lit(0.5) / o),
        Op::Clamp { x, lo, hi } => unary_vjp(nodes, *x, out, g, |v, _| {
            if v > *lo && v < *hi {
                T::one()
            } else {
                T::zero()
            }
        }),
        Op::Sum(x) => vec![(*x, vec![g[0]; nodes[*x].value.numel()])],
        Op::SumAxes(x) => {
            let in_shape = nodes[*x].value.shape();
            let contiguous = strides_of(in_shape);
            let spread = kernels::broadcast_strides(out.shape(), in_shape);
            let mut gx = vec![T::zero(); numel(in_shape)];
            kernels::for_each_offset2(in_shape, &contiguous, &spread, |_, i, o| gx[i] = g[o]);
            vec![(*x, gx)]
        }
        Op::MatMul(ia, ib) => {
            let (a, b) = (&nodes[*ia].value, &nodes[*ib].value);
            let plan = matmul_plan(a.shape(), b.shape())?;
            let (m, k, n) = (plan.m, plan.k, plan.n);
            let mut res = Vec::with_capacity(2);
            if nodes[*ia].requires_grad {
                let mut ga = vec![T::zero(); a.numel()];
                for (i, &(oa, ob)) in plan.pairs.iter().enumerate() {
                    kernels::gemm(
                        m,
                        n,
                        k,
                        g,
                        MatView::row_major(i * m * n, n),
                        b.data(),
                        MatView::transposed(ob, n),
                        &mut ga,
                        MatView::row_major(oa, k),
                        true,
                    );
                }
                res.push((*ia, ga));
            }
            if nodes[*ib].requires_grad {
                let mut gb = vec![T::zero(); b.numel()];
                for (i, &(oa, ob)) in plan.pairs.iter().enumerate() {
                    kernels::gemm(
                        k,
                        m,
                        n,
                        a.data(),
                        MatView::transposed(oa, k),
                        g,
                        MatView::row_major(i * m * n, n),
                        &mut gb,
                        MatView::row_major(ob, n),
                        true,
                    );
                }
                res.push((*ib, gb));
            }
            res
        }
        Op::Reshape(x) => vec![(*x, g.to_vec())],
        Op::Permute { x, perm } => {
            let inv = kernels::inverse_permutation(perm);
            vec![(*x, kernels::permute(g, out.shape(), &inv))]
        }
        Op::Roll { x, shifts } => {
            let back: Vec<isize> = shifts.iter().map(|s| -s).collect();
            vec![(*x, kernels::roll(g, out.shape(), &back))]
        }
        Op::Slice { x, axis, start } => {
            let in_shape = nodes[*x].value.shape();
            let (outer, extent, inner) = split_axis(in_shape, *axis);
            let len = out.shape()[*axis];
            let mut gx = vec![T::zero(); numel(in_shape)];
            for o in 0..outer {
                let dst = (o * extent + start) * inner;
                gx[dst..dst + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
            }
            vec![(*x, gx)]
        }
        Op::Concat { parts, axis } => {
            let (outer, total, inner) = split_axis(out.shape(), *axis);
            let mut res = Vec::with_capacity(parts.len());
            let mut at = 0;
            for &p in parts {
                let len = nodes[p].value.shape()[*axis];
                if nodes[p].requires_grad {
                    let mut gp = Vec::with_capacity(outer * len * inner);
                    for o in 0..outer {
                        let src = (o * total + at) * inner;
                        gp.extend_from_slice(&g[src..src + len * inner]);
                    }
                    res.push((p, gp));
                }
                at += len;
            }
            res
        }
        Op::Conv { x, w, b, geo } => conv_vjp(nodes, *x, *w, *b, geo, out, g),
        Op::ConvTransposed { x, w, b, geo } => conv_transposed_vjp(nodes, *x, *w, *b, geo, out, g),
        Op::LayerNorm {
            x,
            gain,
            offset,
            xhat,
            rstd,
        } => {
            let shape = out.shape();
            let (batch, c) = (shape[0], shape[1]);
            let s = numel(&shape[2..]);
            let gv = nodes[*gain].value.data();
            let inv_c = T::one() / T::lit(c as f64);
            let mut res = Vec::with_capacity(3);
            if nodes[*x].requires_grad {
                let mut gx = vec![T::zero(); g.len()];
                let mut m1 = vec![T::zero(); s];
                let mut m2 = vec![T::zero(); s];
                for b in 0..batch {
                    m1.fill(T::zero());
                    m2.fill(T::zero());
                    for ci in 0..c {
                        let base = (b * c + ci) * s;
                        for p in 0..s {
                            let dh = g[base + p] * gv[ci];
                            m1[p] += dh;
                            m2[p] += dh * xhat[base + p];
                        }
                    }
                    for ci in 0..c {
                        let base = (b * c + ci) * s;
                        for p in 0..s {
                            let dh = g[base + p] * gv[ci];
                            gx[base + p] = rstd[b * s + p] * (dh - m1[p] * inv_c - xhat[base + p] * m2[p] * inv_c);
                        }
                    }
                }
                res.push((*x, gx));
            }
            if nodes[*gain].requires_grad {
                let mut gg = vec![T::zero(); c];
                for b in 0..batch {
                    for (ci, acc) in gg.iter_mut().enumerate() {
                        let base = (b * c + ci) * s;
                        for p in 0..s {
                            *acc += g[base + p] * xhat[base + p];
                        }
                    }
                }
                res.push((*gain, gg));
            }
            if nodes[*offset].requires_grad {
                res.push((*offset, channel_sums(g, batch, c, s)));
            }
            res
        }
        Op::Softmax { x, axis } => {
            let (outer, n, inner) = split_axis(out.shape(), *axis);
            let y = out.data();
            let mut gx = vec![T::zero(); g.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |k: usize| (o * n + k) * inner + i;
                    let dot: T = (0..n).map(|k| g[at(k)] * y[at(k)]).sum();
                    for k in 0..n {
                        gx[at(k)] = y[at(k)] * (g[at(k)] - dot);
                    }
                }
            }
            vec![(*x, gx)]
        }
    };
    Ok(res)
}
