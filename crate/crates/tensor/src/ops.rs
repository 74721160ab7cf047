//! Differentiable operations on [`Var`].

use crate::error::{dim_err, Result, TensorError};
use crate::graph::{Op, Var};
use crate::kernels::{self, ConvGeometry, MatView};
use crate::real::Real;
use crate::tensor::{numel, strides_of, Tensor};

fn same_graph<T: Real>(a: &Var<'_, T>, b: &Var<'_, T>) -> Result<()> {
    if std::ptr::eq(a.graph, b.graph) {
        Ok(())
    } else {
        Err(TensorError::Usage("operands recorded on different graphs".into()))
    }
}

pub(crate) fn binary_forward<T: Real>(
    op: &'static str,
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>> {
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Ok(Tensor::from_parts(a.shape().to_vec(), data));
    }
    let out_shape = kernels::broadcast_shape(op, a.shape(), b.shape())?;
    let sa = kernels::broadcast_strides(a.shape(), &out_shape);
    let sb = kernels::broadcast_strides(b.shape(), &out_shape);
    let (ad, bd) = (a.data(), b.data());
    let mut out = Vec::with_capacity(numel(&out_shape));
    kernels::for_each_offset2(&out_shape, &sa, &sb, |_, oa, ob| out.push(f(ad[oa], bd[ob])));
    Ok(Tensor::from_parts(out_shape, out))
}

fn unary_forward<T: Real>(x: &Tensor<T>, f: impl Fn(T) -> T) -> Tensor<T> {
    x.map(f)
}

pub(crate) fn gelu_scalar<T: Real>(x: T) -> T {
    let half = T::lit(0.5);
    half * x * (T::one() + (x * T::lit(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

pub(crate) fn gelu_grad_scalar<T: Real>(x: T) -> T {
    let cdf = T::lit(0.5) * (T::one() + (x * T::lit(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-(x * x) * T::lit(0.5)).exp() * T::lit(0.398_942_280_401_432_7);
    cdf + x * pdf
}

/// Splits `shape` around `axis` into `(outer, extent, inner)`.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (numel(&shape[..axis]), shape[axis], numel(&shape[axis + 1..]))
}

/// Per-batch matrix offsets of a broadcast batched matmul.
pub(crate) struct MatmulPlan {
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub out_shape: Vec<usize>,
    /// `(a_offset, b_offset)` for each output matrix, in output order.
    pub pairs: Vec<(usize, usize)>,
}

pub(crate) fn matmul_plan(a: &[usize], b: &[usize]) -> Result<MatmulPlan> {
    if a.len() < 2 || b.len() < 2 {
        return Err(dim_err(
            "matmul",
            format!("operands need rank >= 2, got {a:?} and {b:?}"),
        ));
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
    if k != k2 {
        return Err(TensorError::ShapeMismatch {
            op: "matmul",
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        });
    }
    let (ab, bb) = (&a[..a.len() - 2], &b[..b.len() - 2]);
    let batch = kernels::broadcast_shape("matmul", ab, bb).map_err(|_| TensorError::ShapeMismatch {
        op: "matmul",
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    })?;
    let sa = kernels::broadcast_strides(ab, &batch);
    let sb = kernels::broadcast_strides(bb, &batch);
    let mut pairs = Vec::with_capacity(numel(&batch));
    kernels::for_each_offset2(&batch, &sa, &sb, |_, oa, ob| pairs.push((oa * m * k, ob * k * n)));
    let mut out_shape = batch;
    out_shape.extend([m, n]);
    Ok(MatmulPlan {
        m,
        k,
        n,
        out_shape,
        pairs,
    })
}

fn spatial3(shape: &[usize], op: &'static str) -> Result<[usize; 3]> {
    if shape.len() != 5 {
        return Err(dim_err(op, format!("expected [B, C, H, W, D], got {shape:?}")));
    }
    Ok([shape[2], shape[3], shape[4]])
}

pub(crate) fn conv3d_forward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    geo: &ConvGeometry,
) -> Result<Tensor<T>> {
    let spatial = spatial3(x.shape(), "conv3d")?;
    let (batch, cin) = (x.shape()[0], x.shape()[1]);
    let ws = w.shape();
    if ws.len() != 5 || ws[1] != cin || [ws[2], ws[3], ws[4]] != geo.kernel {
        return Err(TensorError::ShapeMismatch {
            op: "conv3d",
            lhs: x.shape().to_vec(),
            rhs: ws.to_vec(),
        });
    }
    let cout = ws[0];
    if let Some(b) = b {
        if b.shape() != [cout] {
            return Err(TensorError::ShapeMismatch {
                op: "conv3d bias",
                lhs: vec![cout],
                rhs: b.shape().to_vec(),
            });
        }
    }
    let out_sp = geo.output_extent(spatial).ok_or_else(|| {
        dim_err("conv3d", format!("input extent {spatial:?} too small for {geo:?}"))
    })?;
    let n_in = numel(&spatial);
    let n_out = numel(&out_sp);
    let ck = cin * geo.kernel_volume();
    let mut out = vec![T::zero(); batch * cout * n_out];
    for bi in 0..batch {
        let xb = &x.data()[bi * cin * n_in..(bi + 1) * cin * n_in];
        let owned;
        let col: &[T] = if geo.is_pointwise() {
            xb
        } else {
            owned = kernels::im2col(xb, cin, spatial, geo, out_sp);
            &owned
        };
        let ob = &mut out[bi * cout * n_out..(bi + 1) * cout * n_out];
        if let Some(bias) = b {
            for (o, chunk) in ob.chunks_mut(n_out).enumerate() {
                chunk.fill(bias.data()[o]);
            }
        }
        kernels::gemm(
            cout,
            ck,
            n_out,
            w.data(),
            MatView::row_major(0, ck),
            col,
            MatView::row_major(0, n_out),
            ob,
            MatView::row_major(0, n_out),
            b.is_some(),
        );
    }
    Ok(Tensor::from_parts(
        vec![batch, cout, out_sp[0], out_sp[1], out_sp[2]],
        out,
    ))
}

pub(crate) fn conv3d_transposed_forward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    geo: &ConvGeometry,
) -> Result<Tensor<T>> {
    let spatial = spatial3(x.shape(), "conv3d_transposed")?;
    let (batch, cin) = (x.shape()[0], x.shape()[1]);
    let ws = w.shape();
    if ws.len() != 5 || ws[0] != cin || [ws[2], ws[3], ws[4]] != geo.kernel {
        return Err(TensorError::ShapeMismatch {
            op: "conv3d_transposed",
            lhs: x.shape().to_vec(),
            rhs: ws.to_vec(),
        });
    }
    let cout = ws[1];
    if let Some(b) = b {
        if b.shape() != [cout] {
            return Err(TensorError::ShapeMismatch {
                op: "conv3d_transposed bias",
                lhs: vec![cout],
                rhs: b.shape().to_vec(),
            });
        }
    }
    let out_sp = geo.transposed_extent(spatial).ok_or_else(|| {
        dim_err("conv3d_transposed", format!("padding too large for {spatial:?}"))
    })?;
    // The forward conv of `out_sp` must land back on `spatial` for the adjoint to hold.
    if geo.output_extent(out_sp) != Some(spatial) {
        return Err(dim_err(
            "conv3d_transposed",
            format!("geometry {geo:?} is not invertible for input {spatial:?}"),
        ));
    }
    let n_in = numel(&spatial);
    let n_out = numel(&out_sp);
    let ck = cout * geo.kernel_volume();
    let mut out = vec![T::zero(); batch * cout * n_out];
    let mut col = vec![T::zero(); ck * n_in];
    for bi in 0..batch {
        let xb = &x.data()[bi * cin * n_in..(bi + 1) * cin * n_in];
        kernels::gemm(
            ck,
            cin,
            n_in,
            w.data(),
            MatView::transposed(0, ck),
            xb,
            MatView::row_major(0, n_in),
            &mut col,
            MatView::row_major(0, n_in),
            false,
        );
        let ob = &mut out[bi * cout * n_out..(bi + 1) * cout * n_out];
        kernels::col2im(&col, cout, out_sp, geo, spatial, ob);
        if let Some(bias) = b {
            for (o, chunk) in ob.chunks_mut(n_out).enumerate() {
                let bv = bias.data()[o];
                chunk.iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    Ok(Tensor::from_parts(
        vec![batch, cout, out_sp[0], out_sp[1], out_sp[2]],
        out,
    ))
}

impl<'g, T: Real> Var<'g, T> {
    fn binary(
        self,
        other: Var<'g, T>,
        name: &'static str,
        f: impl Fn(T, T) -> T,
        op: fn(usize, usize) -> Op<T>,
    ) -> Result<Var<'g, T>> {
        same_graph(&self, &other)?;
        let out = binary_forward(name, &self.value(), &other.value(), f)?;
        Ok(self.graph.record(out, op(self.id, other.id), &[self.id, other.id]))
    }

    pub fn add(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        self.binary(other, "add", |a, b| a + b, Op::Add)
    }

    pub fn sub(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        self.binary(other, "sub", |a, b| a - b, Op::Sub)
    }

    pub fn mul(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        self.binary(other, "mul", |a, b| a * b, Op::Mul)
    }

    /// Elementwise quotient. Callers that need a guarded denominator add their
    /// own epsilon with [`Var::add_scalar`] first.
    pub fn div(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        self.binary(other, "div", |a, b| a / b, Op::Div)
    }

    pub fn add_scalar(self, s: T) -> Var<'g, T> {
        let out = unary_forward(&self.value(), |v| v + s);
        self.graph.record(out, Op::AddScalar(self.id), &[self.id])
    }

    pub fn mul_scalar(self, s: T) -> Var<'g, T> {
        let out = unary_forward(&self.value(), |v| v * s);
        self.graph.record(out, Op::MulScalar(self.id, s), &[self.id])
    }

    pub fn neg(self) -> Var<'g, T> {
        self.mul_scalar(-T::one())
    }

    pub fn relu(self) -> Var<'g, T> {
        let out = unary_forward(&self.value(), |v| if v > T::zero() { v } else { T::zero() });
        self.graph.record(out, Op::Relu(self.id), &[self.id])
    }

    /// Exact GELU, `x·Φ(x)` with the erf-based Gaussian CDF.
    pub fn gelu(self) -> Var<'g, T> {
        let out = unary_forward(&self.value(), gelu_scalar);
        self.graph.record(out, Op::Gelu(self.id), &[self.id])
    }

    pub fn exp(self) -> Var<'g, T> {
        let out = unary_forward(&self.value(), T::exp);
        self.graph.record(out, Op::Exp(self.id), &[self.id])
    }

    pub fn ln(self) -> Var<'g, T> {
        let out = unary_forward(&self.value(), T::ln);
        self.graph.record(out, Op::Log(self.id), &[self.id])
    }

    pub fn sigmoid(self) -> Var<'g, T> {
        let out = unary_forward(&self.value(), |v| T::one() / (T::one() + (-v).exp()));
        self.graph.record(out, Op::Sigmoid(self.id), &[self.id])
    }

    pub fn sqrt(self) -> Var<'g, T> {
        let out = unary_forward(&self.value(), T::sqrt);
        self.graph.record(out, Op::Sqrt(self.id), &[self.id])
    }

    /// Clamps into `[lo, hi]`; the gradient is zero wherever clamping was active.
    pub fn clamp(self, lo: T, hi: T) -> Var<'g, T> {
        let out = unary_forward(&self.value(), |v| v.max(lo).min(hi));
        self.graph.record(out, Op::Clamp { x: self.id, lo, hi }, &[self.id])
    }

    pub fn clamp_min(self, lo: T) -> Var<'g, T> {
        self.clamp(lo, T::infinity())
    }

    /// `max(x, s)` elementwise.
    pub fn max_with_scalar(self, s: T) -> Var<'g, T> {
        self.clamp_min(s)
    }

    pub fn sum(self) -> Var<'g, T> {
        let out = Tensor::scalar(self.value().sum());
        self.graph.record(out, Op::Sum(self.id), &[self.id])
    }

    /// Sums over `axes`, keeping them as extent-1 axes.
    pub fn sum_axes(self, axes: &[usize]) -> Result<Var<'g, T>> {
        let x = self.value();
        let in_shape = x.shape().to_vec();
        let mut out_shape = in_shape.clone();
        for &a in axes {
            if a >= in_shape.len() {
                return Err(dim_err("sum_axes", format!("axis {a} out of range for {in_shape:?}")));
            }
            out_shape[a] = 1;
        }
        let mut out = vec![T::zero(); numel(&out_shape)];
        let contiguous = strides_of(&in_shape);
        let reduce = kernels::broadcast_strides(&out_shape, &in_shape);
        let xd = x.data();
        kernels::for_each_offset2(&in_shape, &contiguous, &reduce, |_, i, o| out[o] += xd[i]);
        let out = Tensor::from_parts(out_shape, out);
        Ok(self.graph.record(out, Op::SumAxes(self.id), &[self.id]))
    }

    pub fn mean(self) -> Var<'g, T> {
        let n = T::lit(self.value().numel() as f64);
        self.sum().mul_scalar(T::one() / n)
    }

    /// Batched matrix product over the last two axes; leading axes broadcast.
    pub fn matmul(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        same_graph(&self, &other)?;
        let (a, b) = (self.value(), other.value());
        let plan = matmul_plan(a.shape(), b.shape())?;
        let (m, k, n) = (plan.m, plan.k, plan.n);
        let mut out = vec![T::zero(); numel(&plan.out_shape)];
        for (i, &(oa, ob)) in plan.pairs.iter().enumerate() {
            kernels::gemm(
                m,
                k,
                n,
                a.data(),
                MatView::row_major(oa, k),
                b.data(),
                MatView::row_major(ob, n),
                &mut out,
                MatView::row_major(i * m * n, n),
                false,
            );
        }
        let out = Tensor::from_parts(plan.out_shape, out);
        Ok(self.graph.record(out, Op::MatMul(self.id, other.id), &[self.id, other.id]))
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Var<'g, T>> {
        let out = self.value().reshape(shape)?;
        Ok(self.graph.record(out, Op::Reshape(self.id), &[self.id]))
    }

    pub fn permute(self, perm: &[usize]) -> Result<Var<'g, T>> {
        let x = self.value();
        let rank = x.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(dim_err("permute", format!("{perm:?} is not a permutation of rank {rank}")));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| x.shape()[p]).collect();
        let out = Tensor::from_parts(out_shape, kernels::permute(x.data(), x.shape(), perm));
        Ok(self.graph.record(
            out,
            Op::Permute {
                x: self.id,
                perm: perm.to_vec(),
            },
            &[self.id],
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose(self) -> Result<Var<'g, T>> {
        let rank = self.value().rank();
        if rank < 2 {
            return Err(dim_err("transpose", "needs rank >= 2"));
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(rank - 1, rank - 2);
        self.permute(&perm)
    }

    /// Circular shift along `axes`: the element at index `i` moves to
    /// `(i + shift) mod extent`, so elements pushed past the end re-enter at
    /// the start.
    pub fn roll(self, axes: &[usize], shifts: &[isize]) -> Result<Var<'g, T>> {
        let x = self.value();
        if axes.len() != shifts.len() {
            return Err(dim_err("roll", "axes and shifts differ in length"));
        }
        let mut full = vec![0isize; x.rank()];
        for (&a, &s) in axes.iter().zip(shifts) {
            if a >= x.rank() {
                return Err(dim_err("roll", format!("axis {a} out of range for {:?}", x.shape())));
            }
            full[a] += s;
        }
        let out = Tensor::from_parts(x.shape().to_vec(), kernels::roll(x.data(), x.shape(), &full));
        Ok(self.graph.record(
            out,
            Op::Roll {
                x: self.id,
                shifts: full,
            },
            &[self.id],
        ))
    }

    /// `len` consecutive entries along `axis`, starting at `start`.
    pub fn slice(self, axis: usize, start: usize, len: usize) -> Result<Var<'g, T>> {
        let x = self.value();
        if axis >= x.rank() || len == 0 || start + len > x.shape()[axis] {
            return Err(dim_err(
                "slice",
                format!("range {start}..{} on axis {axis} of {:?}", start + len, x.shape()),
            ));
        }
        let (outer, extent, inner) = split_axis(x.shape(), axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * extent + start) * inner;
            data.extend_from_slice(&x.data()[base..base + len * inner]);
        }
        let mut shape = x.shape().to_vec();
        shape[axis] = len;
        let out = Tensor::from_parts(shape, data);
        Ok(self.graph.record(
            out,
            Op::Slice {
                x: self.id,
                axis,
                start,
            },
            &[self.id],
        ))
    }

    pub fn concat(parts: &[Var<'g, T>], axis: usize) -> Result<Var<'g, T>> {
        let first = parts.first().ok_or_else(|| TensorError::Usage("concat of nothing".into()))?;
        let values: Vec<Tensor<T>> = parts.iter().map(Var::value).collect();
        let base = values[0].shape();
        if axis >= base.len() {
            return Err(dim_err("concat", format!("axis {axis} out of range for {base:?}")));
        }
        for (p, v) in parts.iter().zip(&values) {
            same_graph(first, p)?;
            let s = v.shape();
            let compatible = s.len() == base.len()
                && s.iter().zip(base).enumerate().all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: base.to_vec(),
                    rhs: s.to_vec(),
                });
            }
        }
        let (outer, _, inner) = split_axis(base, axis);
        let total: usize = values.iter().map(|v| v.shape()[axis]).sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in &values {
                let chunk = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base.to_vec();
        shape[axis] = total;
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let out = Tensor::from_parts(shape, data);
        Ok(first.graph.record(
            out,
            Op::Concat {
                parts: ids.clone(),
                axis,
            },
            &ids,
        ))
    }

    /// Direct 3D cross-correlation. `self: [B, Cin, H, W, D]`,
    /// `weight: [Cout, Cin, kh, kw, kd]`, `bias: [Cout]`.
    pub fn conv3d(self, weight: Var<'g, T>, bias: Option<Var<'g, T>>, geo: ConvGeometry) -> Result<Var<'g, T>> {
        same_graph(&self, &weight)?;
        if let Some(b) = &bias {
            same_graph(&self, b)?;
        }
        let bias_value = bias.map(|b| b.value());
        let out = conv3d_forward(&self.value(), &weight.value(), bias_value.as_ref(), &geo)?;
        let mut inputs = vec![self.id, weight.id];
        inputs.extend(bias.map(|b| b.id));
        Ok(self.graph.record(
            out,
            Op::Conv {
                x: self.id,
                w: weight.id,
                b: bias.map(|b| b.id),
                geo,
            },
            &inputs,
        ))
    }

    /// Adjoint of [`Var::conv3d`] with `weight: [Cin, Cout, kh, kw, kd]`.
    pub fn conv3d_transposed(
        self,
        weight: Var<'g, T>,
        bias: Option<Var<'g, T>>,
        geo: ConvGeometry,
    ) -> Result<Var<'g, T>> {
        same_graph(&self, &weight)?;
        if let Some(b) = &bias {
            same_graph(&self, b)?;
        }
        let bias_value = bias.map(|b| b.value());
        let out = conv3d_transposed_forward(&self.value(), &weight.value(), bias_value.as_ref(), &geo)?;
        let mut inputs = vec![self.id, weight.id];
        inputs.extend(bias.map(|b| b.id));
        Ok(self.graph.record(
            out,
            Op::ConvTransposed {
                x: self.id,
                w: weight.id,
                b: bias.map(|b| b.id),
                geo,
            },
            &inputs,
        ))
    }

    /// Normalizes over axis 1 (channels) at every other index, then applies
    /// the per-channel affine `gain`, `offset`.
    pub fn layer_norm(self, gain: Var<'g, T>, offset: Var<'g, T>, eps: T) -> Result<Var<'g, T>> {
        same_graph(&self, &gain)?;
        same_graph(&self, &offset)?;
        let x = self.value();
        let shape = x.shape().to_vec();
        if shape.len() < 2 {
            return Err(dim_err("layer_norm", format!("needs a channel axis, got {shape:?}")));
        }
        let c = shape[1];
        let (gv, ov) = (gain.value(), offset.value());
        if gv.shape() != [c] || ov.shape() != [c] {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                lhs: shape,
                rhs: gv.shape().to_vec(),
            });
        }
        let batch = shape[0];
        let s = numel(&shape[2..]);
        let xd = x.data();
        let inv_c = T::one() / T::lit(c as f64);
        let mut xhat = vec![T::zero(); xd.len()];
        let mut rstd = vec![T::zero(); batch * s];
        let mut out = vec![T::zero(); xd.len()];
        let mut mean = vec![T::zero(); s];
        let mut var = vec![T::zero(); s];
        for b in 0..batch {
            let xb = &xd[b * c * s..(b + 1) * c * s];
            mean.fill(T::zero());
            var.fill(T::zero());
            for ch in xb.chunks(s) {
                for (m, &v) in mean.iter_mut().zip(ch) {
                    *m += v;
                }
            }
            mean.iter_mut().for_each(|m| *m *= inv_c);
            for ch in xb.chunks(s) {
                for ((acc, &m), &v) in var.iter_mut().zip(&mean).zip(ch) {
                    let d = v - m;
                    *acc += d * d;
                }
            }
            let rb = &mut rstd[b * s..(b + 1) * s];
            for (r, &v) in rb.iter_mut().zip(&var) {
                *r = T::one() / (v * inv_c + eps).sqrt();
            }
            for ci in 0..c {
                let base = (b * c + ci) * s;
                let (g, o) = (gv.data()[ci], ov.data()[ci]);
                for p in 0..s {
                    let h = (xd[base + p] - mean[p]) * rb[p];
                    xhat[base + p] = h;
                    out[base + p] = h * g + o;
                }
            }
        }
        let out = Tensor::from_parts(shape, out);
        Ok(self.graph.record(
            out,
            Op::LayerNorm {
                x: self.id,
                gain: gain.id,
                offset: offset.id,
                xhat,
                rstd,
            },
            &[self.id, gain.id, offset.id],
        ))
    }

    pub fn softmax(self, axis: usize) -> Result<Var<'g, T>> {
        let x = self.value();
        if axis >= x.rank() {
            return Err(dim_err("softmax", format!("axis {axis} out of range for {:?}", x.shape())));
        }
        let out = Tensor::from_parts(x.shape().to_vec(), softmax_values(&x, axis));
        Ok(self.graph.record(out, Op::Softmax { x: self.id, axis }, &[self.id]))
    }
}

pub(crate) fn softmax_values<T: Real>(x: &Tensor<T>, axis: usize) -> Vec<T> {
    let (outer, n, inner) = split_axis(x.shape(), axis);
    let xd = x.data();
    let mut out = vec![T::zero(); xd.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * n + k) * inner + i;
            let mut mx = T::neg_infinity();
            for k in 0..n {
                mx = mx.max(xd[at(k)]);
            }
            let mut total = T::zero();
            for k in 0..n {
                let e = (xd[at(k)] - mx).exp();
                out[at(k)] = e;
                total += e;
            }
            for k in 0..n {
                out[at(k)] /= total;
            }
        }
    }
    out
}

/// Value-level helpers that do not touch a graph.
impl<T: Real> Tensor<T> {
    pub fn softmax(&self, axis: usize) -> Result<Tensor<T>> {
        if axis >= self.rank() {
            return Err(dim_err("softmax", format!("axis {axis} out of range for {:?}", self.shape())));
        }
        Ok(Tensor::from_parts(self.shape().to_vec(), softmax_values(self, axis)))
    }

    pub fn conv3d(&self, weight: &Tensor<T>, bias: Option<&Tensor<T>>, geo: ConvGeometry) -> Result<Tensor<T>> {
        conv3d_forward(self, weight, bias, &geo)
    }

    pub fn conv3d_transposed(
        &self,
        weight: &Tensor<T>,
        bias: Option<&Tensor<T>>,
        geo: ConvGeometry,
    ) -> Result<Tensor<T>> {
        conv3d_transposed_forward(self, weight, bias, &geo)
    }

    pub fn permute(&self, perm: &[usize]) -> Result<Tensor<T>> {
        if perm.len() != self.rank() {
            return Err(dim_err("permute", format!("{perm:?} for rank {}", self.rank())));
        }
        let shape: Vec<usize> = perm.iter().map(|&p| self.shape()[p]).collect();
        Ok(Tensor::from_parts(shape, kernels::permute(self.data(), self.shape(), perm)))
    }

    pub fn roll(&self, shifts: &[isize]) -> Result<Tensor<T>> {
        if shifts.len() != self.rank() {
            return Err(dim_err("roll", format!("{} shifts for rank {}", shifts.len(), self.rank())));
        }
        Ok(Tensor::from_parts(
            self.shape().to_vec(),
            kernels::roll(self.data(), self.shape(), shifts),
        ))
    }

    pub fn zip_with(&self, other: &Tensor<T>, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        binary_forward("zip_with", self, other, f)
    }
}
