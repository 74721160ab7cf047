//! Raw buffer kernels shared by the forward and backward passes.

use crate::error::{Result, TensorError};
use crate::real::Real;
use crate::tensor::strides_of;

/// Strided matrix view into a flat buffer.
#[derive(Debug, Clone, Copy)]
pub(crate) struct MatView {
    pub offset: usize,
    pub rs: usize,
    pub cs: usize,
}

impl MatView {
    pub fn row_major(offset: usize, cols: usize) -> Self {
        MatView { offset, rs: cols, cs: 1 }
    }

    /// The transpose of a row-major `rows × cols` block.
    pub fn transposed(offset: usize, cols: usize) -> Self {
        MatView { offset, rs: 1, cs: cols }
    }

    fn last_index(&self, rows: usize, cols: usize) -> usize {
        self.offset + (rows - 1) * self.rs + (cols - 1) * self.cs
    }
}

/// Below this many multiply-adds the plain triple loop beats the packed GEMM.
const SMALL_GEMM: usize = 2048;

/// Dot product with eight independent accumulators, combined in a fixed order.
#[inline]
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut lanes = [T::zero(); 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for l in 0..8 {
            lanes[l] += x[l] * y[l];
        }
    }
    let mut acc = ((lanes[0] + lanes[4]) + (lanes[1] + lanes[5])) + ((lanes[2] + lanes[6]) + (lanes[3] + lanes[7]));
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        acc += *x * *y;
    }
    acc
}

/// Small products without packing: dot form when rows of `a` and columns of
/// `b` are contiguous, row-update form when rows of `b` and `c` are.
#[allow(clippy::too_many_arguments)]
fn small_gemm<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    av: MatView,
    b: &[T],
    bv: MatView,
    c: &mut [T],
    cv: MatView,
    accumulate: bool,
) {
    // Tall thin outputs are cheaper as the transposed problem `cᵀ = bᵀ·aᵀ`.
    if m > n && m >= k && (av.rs == 1 || m == 1) && (cv.rs == 1 || m == 1) {
        let t = |v: MatView| MatView { offset: v.offset, rs: v.cs, cs: v.rs };
        return small_gemm(n, k, m, b, t(bv), a, t(av), c, t(cv), accumulate);
    }
    let store = |slot: &mut T, v: T| if accumulate { *slot += v } else { *slot = v };
    let dot_form = (av.cs == 1 || k == 1) && (bv.rs == 1 || k == 1);
    let row_form = (bv.cs == 1 || n == 1) && (cv.cs == 1 || n == 1);
    if dot_form && !(row_form && n >= k) {
        for i in 0..m {
            let row = &a[av.offset + i * av.rs..][..k];
            for j in 0..n {
                let col = &b[bv.offset + j * bv.cs..][..k];
                store(&mut c[cv.offset + i * cv.rs + j * cv.cs], dot(row, col));
            }
        }
    } else if row_form {
        for i in 0..m {
            let out = &mut c[cv.offset + i * cv.rs..][..n];
            if !accumulate {
                out.fill(T::zero());
            }
            for p in 0..k {
                let s = a[av.offset + i * av.rs + p * av.cs];
                let row = &b[bv.offset + p * bv.rs..][..n];
                for (o, &v) in out.iter_mut().zip(row) {
                    *o += s * v;
                }
            }
        }
    } else {
        for i in 0..m {
            for j in 0..n {
                let mut acc = T::zero();
                for p in 0..k {
                    acc += a[av.offset + i * av.rs + p * av.cs] * b[bv.offset + p * bv.rs + j * bv.cs];
                }
                store(&mut c[cv.offset + i * cv.rs + j * cv.cs], acc);
            }
        }
    }
}

/// `c (+)= a · b` with `a: m×k`, `b: k×n`, `c: m×n` given as strided views.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    av: MatView,
    b: &[T],
    bv: MatView,
    c: &mut [T],
    cv: MatView,
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(cv.last_index(m, n) < c.len(), "gemm: c out of bounds");
    if k == 0 {
        if !accumulate {
            for i in 0..m {
                for j in 0..n {
                    c[cv.offset + i * cv.rs + j * cv.cs] = T::zero();
                }
            }
        }
        return;
    }
    assert!(av.last_index(m, k) < a.len(), "gemm: a out of bounds");
    assert!(bv.last_index(k, n) < b.len(), "gemm: b out of bounds");

    if m * k * n <= SMALL_GEMM {
        small_gemm(m, k, n, a, av, b, bv, c, cv, accumulate);
        return;
    }

    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: the last reachable element of each view was bounds-checked above
    // and all strides are non-negative.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.as_ptr().add(av.offset),
            av.rs as isize,
            av.cs as isize,
            b.as_ptr().add(bv.offset),
            bv.rs as isize,
            bv.cs as isize,
            beta,
            c.as_mut_ptr().add(cv.offset),
            cv.rs as isize,
            cv.cs as isize,
        );
    }
}

pub(crate) fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = if da == db || db == 1 {
            da
        } else if da == 1 {
            db
        } else {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: a.to_vec(),
                rhs: b.to_vec(),
            });
        };
    }
    Ok(out)
}

/// Strides of `shape` when read through the broadcast `out` shape; broadcast
/// axes get stride 0.
pub(crate) fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let own = strides_of(shape);
    let lead = out.len() - shape.len();
    (0..out.len())
        .map(|d| {
            if d < lead || shape[d - lead] == 1 {
                0
            } else {
                own[d - lead]
            }
        })
        .collect()
}

/// Calls `f(flat_out, offset_a, offset_b)` for every element of `shape`, in
/// row-major order, with offsets computed from the two stride sets.
pub(crate) fn for_each_offset2(
    shape: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let rank = shape.len();
    if rank == 0 {
        f(0, 0, 0);
        return;
    }
    let total: usize = shape.iter().product();
    let inner = shape[rank - 1];
    let (ia, ib) = (sa[rank - 1], sb[rank - 1]);
    let mut idx = vec![0usize; rank];
    let (mut oa, mut ob) = (0usize, 0usize);
    let mut flat = 0;
    while flat < total {
        for j in 0..inner {
            f(flat + j, oa + j * ia, ob + j * ib);
        }
        flat += inner;
        // Advance the odometer over the outer axes.
        let mut d = rank - 1;
        while d > 0 {
            d -= 1;
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < shape[d] {
                break;
            }
            oa -= sa[d] * shape[d];
            ob -= sb[d] * shape[d];
            idx[d] = 0;
        }
    }
}

/// Gathers `src` (row-major `in_shape`) into the axis order `perm`.
pub(crate) fn permute<T: Real>(src: &[T], in_shape: &[usize], perm: &[usize]) -> Vec<T> {
    let in_strides = strides_of(in_shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let gather: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let zeros = vec![0; out_shape.len()];
    let mut out = Vec::with_capacity(src.len());
    for_each_offset2(&out_shape, &gather, &zeros, |_, off, _| out.push(src[off]));
    out
}

pub(crate) fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Circular shift: `out[i] = src[(i - shift) mod extent]` on every axis.
pub(crate) fn roll<T: Real>(src: &[T], shape: &[usize], shifts: &[isize]) -> Vec<T> {
    let strides = strides_of(shape);
    let tables: Vec<Vec<usize>> = shape
        .iter()
        .zip(shifts)
        .zip(&strides)
        .map(|((&n, &s), &st)| {
            let s = s.rem_euclid(n as isize) as usize;
            (0..n).map(|i| ((i + n - s) % n) * st).collect()
        })
        .collect();
    let rank = shape.len();
    let mut out = Vec::with_capacity(src.len());
    if rank == 0 {
        out.push(src[0]);
        return out;
    }
    let mut idx = vec![0usize; rank];
    let inner = &tables[rank - 1];
    loop {
        let base: usize = (0..rank - 1).map(|d| tables[d][idx[d]]).sum();
        out.extend(inner.iter().map(|&o| src[base + o]));
        let mut d = rank - 1;
        loop {
            if d == 0 {
                return out;
            }
            d -= 1;
            idx[d] += 1;
            if idx[d] < shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
}

/// Spatial geometry of a 3D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
}

impl ConvGeometry {
    pub fn new(kernel: usize, stride: usize, padding: usize) -> Self {
        ConvGeometry {
            kernel: [kernel; 3],
            stride: [stride; 3],
            padding: [padding; 3],
        }
    }

    pub fn kernel_volume(&self) -> usize {
        self.kernel.iter().product()
    }

    pub fn is_pointwise(&self) -> bool {
        self.kernel == [1; 3] && self.stride == [1; 3] && self.padding == [0; 3]
    }

    /// Output extents of the forward convolution.
    pub fn output_extent(&self, input: [usize; 3]) -> Option<[usize; 3]> {
        let mut out = [0; 3];
        for d in 0..3 {
            let padded = input[d] + 2 * self.padding[d];
            if padded < self.kernel[d] || self.stride[d] == 0 {
                return None;
            }
            out[d] = (padded - self.kernel[d]) / self.stride[d] + 1;
        }
        Some(out)
    }

    /// Output extents of the transposed convolution.
    pub fn transposed_extent(&self, input: [usize; 3]) -> Option<[usize; 3]> {
        let mut out = [0; 3];
        for d in 0..3 {
            let full = (input[d] - 1) * self.stride[d] + self.kernel[d];
            if full <= 2 * self.padding[d] {
                return None;
            }
            out[d] = full - 2 * self.padding[d];
        }
        Some(out)
    }
}

/// Unfolds one `[C, H, W, D]` volume into columns `[C·K, Ho·Wo·Do]`.
pub(crate) fn im2col<T: Real>(
    x: &[T],
    channels: usize,
    spatial: [usize; 3],
    geo: &ConvGeometry,
    out_spatial: [usize; 3],
) -> Vec<T> {
    let [h, w, d] = spatial;
    let [oh, ow, od] = out_spatial;
    let [kh, kw, kd] = geo.kernel;
    let [sh, sw, sd] = geo.stride;
    let [ph, pw, pd] = geo.padding;
    let n_out = oh * ow * od;
    let k_vol = geo.kernel_volume();
    let mut col = vec![T::zero(); channels * k_vol * n_out];
    for c in 0..channels {
        let xc = &x[c * h * w * d..(c + 1) * h * w * d];
        for a in 0..kh {
            for b in 0..kw {
                for e in 0..kd {
                    let row = c * k_vol + (a * kw + b) * kd + e;
                    let dst = &mut col[row * n_out..(row + 1) * n_out];
                    for i in 0..oh {
                        let y = (i * sh + a) as isize - ph as isize;
                        if y < 0 || y >= h as isize {
                            continue;
                        }
                        for j in 0..ow {
                            let z = (j * sw + b) as isize - pw as isize;
                            if z < 0 || z >= w as isize {
                                continue;
                            }
                            let src_row = (y as usize * w + z as usize) * d;
                            let dst_row = (i * ow + j) * od;
                            for l in 0..od {
                                let t = (l * sd + e) as isize - pd as isize;
                                if t >= 0 && t < d as isize {
                                    dst[dst_row + l] = xc[src_row + t as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: scatter-adds columns back into a `[C, H, W, D]` volume.
pub(crate) fn col2im<T: Real>(
    col: &[T],
    channels: usize,
    spatial: [usize; 3],
    geo: &ConvGeometry,
    out_spatial: [usize; 3],
    x: &mut [T],
) {
    let [h, w, d] = spatial;
    let [oh, ow, od] = out_spatial;
    let [kh, kw, kd] = geo.kernel;
    let [sh, sw, sd] = geo.stride;
    let [ph, pw, pd] = geo.padding;
    let n_out = oh * ow * od;
    let k_vol = geo.kernel_volume();
    for c in 0..channels {
        let xc = &mut x[c * h * w * d..(c + 1) * h * w * d];
        for a in 0..kh {
            for b in 0..kw {
                for e in 0..kd {
                    let row = c * k_vol + (a * kw + b) * kd + e;
                    let src = &col[row * n_out..(row + 1) * n_out];
                    for i in 0..oh {
                        let y = (i * sh + a) as isize - ph as isize;
                        if y < 0 || y >= h as isize {
                            continue;
                        }
                        for j in 0..ow {
                            let z = (j * sw + b) as isize - pw as isize;
                            if z < 0 || z >= w as isize {
                                continue;
                            }
                            let dst_row = (y as usize * w + z as usize) * d;
                            let src_row = (i * ow + j) * od;
                            for l in 0..od {
                                let t = (l * sd + e) as isize - pd as isize;
                                if t >= 0 && t < d as isize {
                                    xc[dst_row + t as usize] += src[src_row + l];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}
