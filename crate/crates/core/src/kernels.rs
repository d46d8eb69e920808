//! Raw compute kernels behind the tape ops.
//!
//! Every hot kernel comes in a sequential variant and, with the `parallel`
//! feature, a rayon variant. Parallel variants split work only across
//! independent output elements; each output element is reduced in the same
//! sequential order in both variants, so results are bitwise identical
//! regardless of feature flags or thread count. The `kernels` benches
//! compare the two paths directly.

use crate::scalar::Scalar;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Below this many output elements the sequential path is used even when
/// the `parallel` feature is enabled; rayon's spawn overhead dominates on
/// tiny tensors.
pub const PAR_THRESHOLD: usize = 4096;

#[inline]
pub fn use_par(work: usize) -> bool {
    #[cfg(feature = "parallel")]
    {
        work >= PAR_THRESHOLD
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = work;
        false
    }
}

// ── Scalar math helpers ────────────────────────────────────────────────

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[inline]
fn sigmoid_f64(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

// Tanh-approximation GELU in its sigmoid form:
// 0.5·(1 + tanh(u)) == sigmoid(2u), which needs one exp instead of a tanh.

#[inline]
pub fn gelu<T: Scalar>(x: T) -> T {
    let v = x.to_f64();
    let u2 = 2.0 * GELU_C * (v + GELU_A * v * v * v);
    T::from_f64(v * sigmoid_f64(u2))
}

#[inline]
pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let v = x.to_f64();
    let u2 = 2.0 * GELU_C * (v + GELU_A * v * v * v);
    let s = sigmoid_f64(u2);
    let du2 = 2.0 * GELU_C * (1.0 + 3.0 * GELU_A * v * v);
    T::from_f64(s + v * s * (1.0 - s) * du2)
}

#[inline]
pub fn softplus<T: Scalar>(x: T) -> T {
    let v = x.to_f64();
    // Stable split: softplus(x) = max(x, 0) + ln(1 + exp(-|x|)).
    T::from_f64(v.max(0.0) + (-v.abs()).exp().ln_1p())
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    let v = x.to_f64();
    T::from_f64(if v >= 0.0 { 1.0 / (1.0 + (-v).exp()) } else { let e = v.exp(); e / (1.0 + e) })
}

// ── Elementwise maps ───────────────────────────────────────────────────

pub fn unary_map_seq<T: Scalar>(x: &[T], out: &mut [T], f: impl Fn(T) -> T + Sync) {
    for (o, &v) in out.iter_mut().zip(x.iter()) {
        *o = f(v);
    }
}

#[cfg(feature = "parallel")]
pub fn unary_map_par<T: Scalar>(x: &[T], out: &mut [T], f: impl Fn(T) -> T + Sync) {
    out.par_iter_mut().zip(x.par_iter()).for_each(|(o, &v)| *o = f(v));
}

pub fn unary_map<T: Scalar>(x: &[T], out: &mut [T], f: impl Fn(T) -> T + Sync) {
    #[cfg(feature = "parallel")]
    if use_par(x.len()) {
        return unary_map_par(x, out, f);
    }
    unary_map_seq(x, out, f)
}

pub fn binary_map_seq<T: Scalar>(a: &[T], b: &[T], out: &mut [T], f: impl Fn(T, T) -> T + Sync) {
    for ((o, &x), &y) in out.iter_mut().zip(a.iter()).zip(b.iter()) {
        *o = f(x, y);
    }
}

#[cfg(feature = "parallel")]
pub fn binary_map_par<T: Scalar>(a: &[T], b: &[T], out: &mut [T], f: impl Fn(T, T) -> T + Sync) {
    out.par_iter_mut()
        .zip(a.par_iter())
        .zip(b.par_iter())
        .for_each(|((o, &x), &y)| *o = f(x, y));
}

pub fn binary_map<T: Scalar>(a: &[T], b: &[T], out: &mut [T], f: impl Fn(T, T) -> T + Sync) {
    #[cfg(feature = "parallel")]
    if use_par(a.len()) {
        return binary_map_par(a, b, out, f);
    }
    binary_map_seq(a, b, out, f)
}

// ── Broadcasting (rhs aligned to trailing axes of lhs) ─────────────────

/// For an output of shape `out_shape` and an rhs whose shape right-aligns
/// against it (each aligned dim equal or 1, missing leading dims broadcast),
/// returns per-output-axis strides into the rhs buffer (0 on broadcast axes).
pub fn rhs_broadcast_strides(out_shape: &[usize], rhs_shape: &[usize]) -> Option<Vec<usize>> {
    if rhs_shape.len() > out_shape.len() {
        return None;
    }
    let offset = out_shape.len() - rhs_shape.len();
    let rhs_strides = crate::tensor::strides(rhs_shape);
    let mut out = vec![0usize; out_shape.len()];
    for (i, &od) in out_shape.iter().enumerate() {
        if i < offset {
            continue;
        }
        let rd = rhs_shape[i - offset];
        if rd == od {
            out[i] = rhs_strides[i - offset];
        } else if rd == 1 {
            out[i] = 0;
        } else {
            return None;
        }
    }
    Some(out)
}

#[inline]
fn rhs_index(mut flat: usize, out_strides: &[usize], rhs_axis_strides: &[usize]) -> usize {
    let mut r = 0usize;
    for (os, rs) in out_strides.iter().zip(rhs_axis_strides.iter()) {
        let c = flat / os;
        flat -= c * os;
        r += c * rs;
    }
    r
}

/// Division-free walk over (output index, rhs index) pairs on a range of
/// output positions; the odometer advances the rhs index with adds only.
fn broadcast_walk(
    out_shape: &[usize],
    rhs_axis_strides: &[usize],
    start: usize,
    len: usize,
    mut visit: impl FnMut(usize, usize),
) {
    let out_strides = crate::tensor::strides(out_shape);
    let rank = out_shape.len();
    let mut counters = vec![0usize; rank];
    {
        let mut rem = start;
        for ax in 0..rank {
            counters[ax] = rem / out_strides[ax];
            rem -= counters[ax] * out_strides[ax];
        }
    }
    let mut ridx = rhs_index(start, &out_strides, rhs_axis_strides);
    for i in start..start + len {
        visit(i, ridx);
        for ax in (0..rank).rev() {
            counters[ax] += 1;
            ridx += rhs_axis_strides[ax];
            if counters[ax] == out_shape[ax] {
                counters[ax] = 0;
                ridx -= rhs_axis_strides[ax] * out_shape[ax];
            } else {
                break;
            }
        }
    }
}

/// out[i] = f(a[i], b[bcast(i)]) with b broadcast over trailing axes of a.
pub fn broadcast_map<T: Scalar>(
    a: &[T],
    b: &[T],
    out: &mut [T],
    out_shape: &[usize],
    rhs_axis_strides: &[usize],
    f: impl Fn(T, T) -> T + Sync,
) {
    if b.len() == a.len() && rhs_axis_strides == crate::tensor::strides(out_shape).as_slice() {
        return binary_map(a, b, out, f);
    }
    #[cfg(feature = "parallel")]
    if use_par(a.len()) {
        let chunk = 4096usize;
        out.par_chunks_mut(chunk).enumerate().for_each(|(ci, os)| {
            let start = ci * chunk;
            broadcast_walk(out_shape, rhs_axis_strides, start, os.len(), |i, j| {
                os[i - start] = f(a[i], b[j]);
            });
        });
        return;
    }
    broadcast_walk(out_shape, rhs_axis_strides, 0, a.len(), |i, j| {
        out[i] = f(a[i], b[j]);
    });
}

/// Accumulate into the rhs of a broadcast op: d_rhs[j] += f(i, j) over all
/// output positions i mapping to rhs position j. Sequential by construction
/// so the reduction order is fixed.
pub fn broadcast_reduce_into<T: Scalar>(
    n_out: usize,
    out_shape: &[usize],
    rhs_axis_strides: &[usize],
    d_rhs: &mut [T],
    f: impl Fn(usize, usize) -> f64,
) {
    broadcast_walk(out_shape, rhs_axis_strides, 0, n_out, |i, j| {
        d_rhs[j] = T::from_f64(d_rhs[j].to_f64() + f(i, j));
    });
}

/// Accumulate into the lhs of a broadcast op: dst[i] += f(i, rhs_index(i)).
pub fn broadcast_accum_into_lhs<T: Scalar>(
    dst: &mut [T],
    out_shape: &[usize],
    rhs_axis_strides: &[usize],
    f: impl Fn(usize, usize) -> f64 + Sync,
) {
    #[cfg(feature = "parallel")]
    if use_par(dst.len()) {
        let chunk = 4096usize;
        dst.par_chunks_mut(chunk).enumerate().for_each(|(ci, ds)| {
            let start = ci * chunk;
            broadcast_walk(out_shape, rhs_axis_strides, start, ds.len(), |i, j| {
                let d = &mut ds[i - start];
                *d = T::from_f64(d.to_f64() + f(i, j));
            });
        });
        return;
    }
    broadcast_walk(out_shape, rhs_axis_strides, 0, dst.len(), |i, j| {
        let d = &mut dst[i];
        *d = T::from_f64(d.to_f64() + f(i, j));
    });
}

// ── Matrix multiply ────────────────────────────────────────────────────

/// out[m,n] = A·B where `ta`/`tb` mark transposed storage: with `ta` the
/// buffer `a` holds the k×m layout of Aᵀ, with `tb` the buffer `b` holds
/// n×k. Accumulation order over the contraction axis is identical in all
/// variants.
pub fn matmul2_seq<T: Scalar>(
    a: &[T],
    ta: bool,
    b: &[T],
    tb: bool,
    m: usize,
    k: usize,
    n: usize,
    out: &mut [T],
) {
    matmul2_rows(a, ta, b, tb, m, k, n, out, 0);
}

#[allow(clippy::too_many_arguments)]
fn matmul2_rows<T: Scalar>(
    a: &[T],
    ta: bool,
    b: &[T],
    tb: bool,
    _m: usize,
    k: usize,
    n: usize,
    out_rows: &mut [T],
    row0: usize,
) {
    let rows = out_rows.len() / n;
    for r in 0..rows {
        let i = row0 + r;
        let out_row = &mut out_rows[r * n..(r + 1) * n];
        for o in out_row.iter_mut() {
            *o = T::ZERO;
        }
        if !tb {
            // Stream over rows of B.
            for kk in 0..k {
                let a_ik = if ta { a[kk * _m + i] } else { a[i * k + kk] };
                let b_row = &b[kk * n..kk * n + n];
                for (o, &bv) in out_row.iter_mut().zip(b_row.iter()) {
                    *o = T::from_f64(o.to_f64() + a_ik.to_f64() * bv.to_f64());
                }
            }
        } else {
            for (j, o) in out_row.iter_mut().enumerate() {
                let mut acc = 0.0f64;
                for kk in 0..k {
                    let a_ik = if ta { a[kk * _m + i] } else { a[i * k + kk] };
                    acc += a_ik.to_f64() * b[j * k + kk].to_f64();
                }
                *o = T::from_f64(acc);
            }
        }
    }
}

#[cfg(feature = "parallel")]
#[allow(clippy::too_many_arguments)]
pub fn matmul2_par<T: Scalar>(
    a: &[T],
    ta: bool,
    b: &[T],
    tb: bool,
    m: usize,
    k: usize,
    n: usize,
    out: &mut [T],
) {
    out.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
        matmul2_rows(a, ta, b, tb, m, k, n, row, i);
    });
}

#[allow(clippy::too_many_arguments)]
pub fn matmul2<T: Scalar>(
    a: &[T],
    ta: bool,
    b: &[T],
    tb: bool,
    m: usize,
    k: usize,
    n: usize,
    out: &mut [T],
) {
    #[cfg(feature = "parallel")]
    if use_par(m * n) && m > 1 {
        return matmul2_par(a, ta, b, tb, m, k, n, out);
    }
    matmul2_seq(a, ta, b, tb, m, k, n, out)
}

// ── 1D convolution ─────────────────────────────────────────────────────

/// Output length for conv1d.
pub fn conv1d_out_len(l: usize, k: usize, stride: usize, pad: usize) -> usize {
    (l + 2 * pad - k) / stride + 1
}

fn conv1d_fwd_one<T: Scalar>(
    x_b: &[T],
    w: &[T],
    c_in: usize,
    l: usize,
    k: usize,
    stride: usize,
    pad: usize,
    l_out: usize,
    co: usize,
    out_row: &mut [T],
) {
    let w_co = &w[co * c_in * k..(co + 1) * c_in * k];
    if stride == 1 {
        let mut acc = vec![0.0f64; l_out];
        match k {
            1 => conv_s1_taps::<T, 1>(x_b, w_co, c_in, l, pad, &mut acc),
            3 => conv_s1_taps::<T, 3>(x_b, w_co, c_in, l, pad, &mut acc),
            5 => conv_s1_taps::<T, 5>(x_b, w_co, c_in, l, pad, &mut acc),
            7 => conv_s1_taps::<T, 7>(x_b, w_co, c_in, l, pad, &mut acc),
            _ => conv_s1_generic(x_b, w_co, c_in, l, k, pad, &mut acc),
        }
        for (o, &a) in out_row.iter_mut().zip(acc.iter()) {
            *o = T::from_f64(a);
        }
        return;
    }
    for (i, o) in out_row.iter_mut().enumerate().take(l_out) {
        let start = (i * stride) as isize - pad as isize;
        let mut acc = 0.0f64;
        for ci in 0..c_in {
            let x_ci = &x_b[ci * l..(ci + 1) * l];
            let w_ci = &w_co[ci * k..ci * k + k];
            for (j, &wv) in w_ci.iter().enumerate() {
                let t = start + j as isize;
                if t >= 0 && (t as usize) < l {
                    acc += x_ci[t as usize].to_f64() * wv.to_f64();
                }
            }
        }
        *o = T::from_f64(acc);
    }
}

/// Stride-1 accumulation with a compile-time tap count: the interior runs
/// as unrolled window dots, edges fall back to bounds-checked taps.
fn conv_s1_taps<T: Scalar, const K: usize>(
    x_b: &[T],
    w_co: &[T],
    c_in: usize,
    l: usize,
    pad: usize,
    acc: &mut [f64],
) {
    let l_out = acc.len();
    for ci in 0..c_in {
        let x_ci = &x_b[ci * l..(ci + 1) * l];
        let mut w = [0.0f64; K];
        for (j, wj) in w.iter_mut().enumerate() {
            *wj = w_co[ci * K + j].to_f64();
        }
        // Window fully inside: i − pad ∈ [0, l − K].
        let lo = pad.min(l_out);
        let hi = (l + pad + 1).saturating_sub(K).min(l_out).max(lo);
        for (o, win) in acc[lo..hi].iter_mut().zip(x_ci.windows(K)) {
            let mut s = 0.0;
            for j in 0..K {
                s += w[j] * win[j].to_f64();
            }
            *o += s;
        }
        for i in (0..lo).chain(hi..l_out) {
            let mut s = 0.0;
            for (j, &wj) in w.iter().enumerate() {
                let t = i as isize + j as isize - pad as isize;
                if t >= 0 && (t as usize) < l {
                    s += wj * x_ci[t as usize].to_f64();
                }
            }
            acc[i] += s;
        }
    }
}

fn conv_s1_generic<T: Scalar>(
    x_b: &[T],
    w_co: &[T],
    c_in: usize,
    l: usize,
    k: usize,
    pad: usize,
    acc: &mut [f64],
) {
    let l_out = acc.len();
    for ci in 0..c_in {
        let x_ci = &x_b[ci * l..(ci + 1) * l];
        let w_ci = &w_co[ci * k..ci * k + k];
        for i in 0..l_out {
            let mut s = 0.0;
            for (j, &wj) in w_ci.iter().enumerate() {
                let t = i as isize + j as isize - pad as isize;
                if t >= 0 && (t as usize) < l {
                    s += wj.to_f64() * x_ci[t as usize].to_f64();
                }
            }
            acc[i] += s;
        }
    }
}

/// x: [B, C_in, L], w: [C_out, C_in, K] → out: [B, C_out, L_out].
#[allow(clippy::too_many_arguments)]
pub fn conv1d_fwd_seq<T: Scalar>(
    x: &[T],
    w: &[T],
    batch: usize,
    c_in: usize,
    l: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    pad: usize,
    out: &mut [T],
) {
    let l_out = conv1d_out_len(l, k, stride, pad);
    for b in 0..batch {
        let x_b = &x[b * c_in * l..(b + 1) * c_in * l];
        for co in 0..c_out {
            let row = &mut out[(b * c_out + co) * l_out..(b * c_out + co + 1) * l_out];
            conv1d_fwd_one(x_b, w, c_in, l, k, stride, pad, l_out, co, row);
        }
    }
}

#[cfg(feature = "parallel")]
#[allow(clippy::too_many_arguments)]
pub fn conv1d_fwd_par<T: Scalar>(
    x: &[T],
    w: &[T],
    batch: usize,
    c_in: usize,
    l: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    pad: usize,
    out: &mut [T],
) {
    let l_out = conv1d_out_len(l, k, stride, pad);
    out.par_chunks_mut(l_out).enumerate().for_each(|(bc, row)| {
        let b = bc / c_out;
        let co = bc % c_out;
        let x_b = &x[b * c_in * l..(b + 1) * c_in * l];
        conv1d_fwd_one(x_b, w, c_in, l, k, stride, pad, l_out, co, row);
    });
    let _ = batch;
}

#[allow(clippy::too_many_arguments)]
pub fn conv1d_fwd<T: Scalar>(
    x: &[T],
    w: &[T],
    batch: usize,
    c_in: usize,
    l: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    pad: usize,
    out: &mut [T],
) {
    #[cfg(feature = "parallel")]
    if use_par(out.len()) && batch * c_out > 1 {
        return conv1d_fwd_par(x, w, batch, c_in, l, c_out, k, stride, pad, out);
    }
    conv1d_fwd_seq(x, w, batch, c_in, l, c_out, k, stride, pad, out)
}

fn conv1d_bwd_x_one<T: Scalar>(
    dy_b: &[T],
    w: &[T],
    c_in: usize,
    l: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    pad: usize,
    l_out: usize,
    ci: usize,
    dx_row: &mut [T],
) {
    for (t, o) in dx_row.iter_mut().enumerate().take(l) {
        let mut acc = 0.0f64;
        for co in 0..c_out {
            let dy_row = &dy_b[co * l_out..(co + 1) * l_out];
            let w_row = &w[(co * c_in + ci) * k..(co * c_in + ci + 1) * k];
            for (j, &wv) in w_row.iter().enumerate() {
                let num = t as isize + pad as isize - j as isize;
                if num >= 0 {
                    let num = num as usize;
                    if num % stride == 0 {
                        let i = num / stride;
                        if i < l_out {
                            acc += dy_row[i].to_f64() * wv.to_f64();
                        }
                    }
                }
            }
        }
        *o = T::from_f64(acc);
    }
}

/// dL/dx for conv1d. dx: [B, C_in, L].
#[allow(clippy::too_many_arguments)]
pub fn conv1d_bwd_x<T: Scalar>(
    dy: &[T],
    w: &[T],
    batch: usize,
    c_in: usize,
    l: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    pad: usize,
    dx: &mut [T],
) {
    let l_out = conv1d_out_len(l, k, stride, pad);
    #[cfg(feature = "parallel")]
    if use_par(dx.len()) && batch * c_in > 1 {
        dx.par_chunks_mut(l).enumerate().for_each(|(bc, row)| {
            let b = bc / c_in;
            let ci = bc % c_in;
            let dy_b = &dy[b * c_out * l_out..(b + 1) * c_out * l_out];
            conv1d_bwd_x_one(dy_b, w, c_in, l, c_out, k, stride, pad, l_out, ci, row);
        });
        return;
    }
    for b in 0..batch {
        let dy_b = &dy[b * c_out * l_out..(b + 1) * c_out * l_out];
        for ci in 0..c_in {
            let row = &mut dx[(b * c_in + ci) * l..(b * c_in + ci + 1) * l];
            conv1d_bwd_x_one(dy_b, w, c_in, l, c_out, k, stride, pad, l_out, ci, row);
        }
    }
}

fn conv1d_bwd_w_one<T: Scalar>(
    dy: &[T],
    x: &[T],
    batch: usize,
    c_in: usize,
    l: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    pad: usize,
    l_out: usize,
    co: usize,
    dw_co: &mut [T],
) {
    for ci in 0..c_in {
        for j in 0..k {
            let mut acc = 0.0f64;
            for b in 0..batch {
                let dy_row = &dy[(b * c_out + co) * l_out..(b * c_out + co + 1) * l_out];
                let x_row = &x[(b * c_in + ci) * l..(b * c_in + ci + 1) * l];
                for (i, &dyv) in dy_row.iter().enumerate() {
                    let t = (i * stride) as isize + j as isize - pad as isize;
                    if t >= 0 && (t as usize) < l {
                        acc += dyv.to_f64() * x_row[t as usize].to_f64();
                    }
                }
            }
            dw_co[ci * k + j] = T::from_f64(acc);
        }
    }
}

/// dL/dw for conv1d. dw: [C_out, C_in, K].
#[allow(clippy::too_many_arguments)]
pub fn conv1d_bwd_w<T: Scalar>(
    dy: &[T],
    x: &[T],
    batch: usize,
    c_in: usize,
    l: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    pad: usize,
    dw: &mut [T],
) {
    let l_out = conv1d_out_len(l, k, stride, pad);
    #[cfg(feature = "parallel")]
    if use_par(batch * c_out * l_out) && c_out > 1 {
        dw.par_chunks_mut(c_in * k).enumerate().for_each(|(co, dw_co)| {
            conv1d_bwd_w_one(dy, x, batch, c_in, l, c_out, k, stride, pad, l_out, co, dw_co);
        });
        return;
    }
    for co in 0..c_out {
        let dw_co = &mut dw[co * c_in * k..(co + 1) * c_in * k];
        conv1d_bwd_w_one(dy, x, batch, c_in, l, c_out, k, stride, pad, l_out, co, dw_co);
    }
}

// ── Max pooling (width 2, stride 2) ────────────────────────────────────

/// x: [.., L] lanes of even length; out: [.., L/2]; argmax records the
/// winning offset (0 or 1, first wins ties) per output element.
pub fn maxpool2_fwd<T: Scalar>(x: &[T], lane: usize, out: &mut [T], argmax: &mut [u8]) {
    let half = lane / 2;
    let go = |(idx, pair): (usize, (&mut T, &mut u8))| {
        let (o, am) = pair;
        let lane_i = idx / half;
        let j = idx % half;
        let a = x[lane_i * lane + 2 * j];
        let b = x[lane_i * lane + 2 * j + 1];
        if b > a {
            *o = b;
            *am = 1;
        } else {
            *o = a;
            *am = 0;
        }
    };
    #[cfg(feature = "parallel")]
    if use_par(out.len()) {
        out.par_iter_mut().zip(argmax.par_iter_mut()).enumerate().for_each(go);
        return;
    }
    out.iter_mut().zip(argmax.iter_mut()).enumerate().for_each(go);
}

pub fn maxpool2_bwd<T: Scalar>(dy: &[T], argmax: &[u8], lane: usize, dx: &mut [T]) {
    let half = lane / 2;
    for (idx, (&g, &am)) in dy.iter().zip(argmax.iter()).enumerate() {
        let lane_i = idx / half;
        let j = idx % half;
        dx[lane_i * lane + 2 * j + am as usize] = g;
    }
}

// ── Lane ops over the last axis ────────────────────────────────────────

pub fn softmax_lanes<T: Scalar>(x: &[T], lane: usize, out: &mut [T]) {
    let go = |(xs, os): (&[T], &mut [T])| {
        let mut mx = f64::NEG_INFINITY;
        for &v in xs {
            mx = mx.max(v.to_f64());
        }
        let mut sum = 0.0f64;
        for (o, &v) in os.iter_mut().zip(xs.iter()) {
            let e = (v.to_f64() - mx).exp();
            *o = T::from_f64(e);
            sum += e;
        }
        for o in os.iter_mut() {
            *o = T::from_f64(o.to_f64() / sum);
        }
    };
    #[cfg(feature = "parallel")]
    if use_par(x.len()) {
        x.par_chunks(lane).zip(out.par_chunks_mut(lane)).for_each(go);
        return;
    }
    x.chunks(lane).zip(out.chunks_mut(lane)).for_each(go);
}

/// dx = y ⊙ (dy − Σ dy·y) per lane, where y is the softmax output.
pub fn softmax_bwd_lanes<T: Scalar>(y: &[T], dy: &[T], lane: usize, dx: &mut [T]) {
    let go = |((ys, gs), os): ((&[T], &[T]), &mut [T])| {
        let mut dot = 0.0f64;
        for (&yv, &gv) in ys.iter().zip(gs.iter()) {
            dot += yv.to_f64() * gv.to_f64();
        }
        for ((o, &yv), &gv) in os.iter_mut().zip(ys.iter()).zip(gs.iter()) {
            *o = T::from_f64(yv.to_f64() * (gv.to_f64() - dot));
        }
    };
    #[cfg(feature = "parallel")]
    if use_par(y.len()) {
        y.par_chunks(lane)
            .zip(dy.par_chunks(lane))
            .zip(dx.par_chunks_mut(lane))
            .for_each(go);
        return;
    }
    y.chunks(lane).zip(dy.chunks(lane)).zip(dx.chunks_mut(lane)).for_each(go);
}

/// Indices of the k largest entries of a lane, ties broken by lowest index.
/// Returned indices are in descending value order.
pub fn topk_indices<T: Scalar>(lane: &[T], k: usize) -> Vec<u32> {
    let mut idx: Vec<u32> = (0..lane.len() as u32).collect();
    idx.sort_by(|&a, &b| {
        lane[b as usize]
            .partial_cmp(&lane[a as usize])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx.truncate(k);
    idx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity() {
        let a = vec![1.0f64, 0.0, 0.0, 1.0];
        let b = vec![1.0, 2.0, 3.0, 4.0];
        let mut out = vec![0.0; 4];
        matmul2_seq(&a, false, &b, false, 2, 2, 2, &mut out);
        assert_eq!(out, b);
    }

    #[test]
    fn matmul_transpose_flags_agree() {
        // A: 2x3, B: 3x2. Compare (A, B) with (Aᵀ stored, ta) and (Bᵀ stored, tb).
        let a = vec![1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0];
        let at = vec![1.0, 4.0, 2.0, 5.0, 3.0, 6.0];
        let b = vec![7.0f64, 8.0, 9.0, 10.0, 11.0, 12.0];
        let bt = vec![7.0, 9.0, 11.0, 8.0, 10.0, 12.0];
        let mut o1 = vec![0.0; 4];
        let mut o2 = vec![0.0; 4];
        let mut o3 = vec![0.0; 4];
        matmul2_seq(&a, false, &b, false, 2, 3, 2, &mut o1);
        matmul2_seq(&at, true, &b, false, 2, 3, 2, &mut o2);
        matmul2_seq(&a, false, &bt, true, 2, 3, 2, &mut o3);
        assert_eq!(o1, o2);
        assert_eq!(o1, o3);
    }

    #[cfg(feature = "parallel")]
    #[test]
    fn par_matches_seq_bitwise() {
        let mut rng = crate::rng::Rng::new(5);
        let m = 37;
        let k = 19;
        let n = 23;
        let a: Vec<f32> = (0..m * k).map(|_| rng.uniform(-1.0, 1.0) as f32).collect();
        let b: Vec<f32> = (0..k * n).map(|_| rng.uniform(-1.0, 1.0) as f32).collect();
        let mut o1 = vec![0.0f32; m * n];
        let mut o2 = vec![0.0f32; m * n];
        matmul2_seq(&a, false, &b, false, m, k, n, &mut o1);
        matmul2_par(&a, false, &b, false, m, k, n, &mut o2);
        assert_eq!(o1, o2);

        let x: Vec<f32> = (0..2 * 3 * 40).map(|_| rng.uniform(-1.0, 1.0) as f32).collect();
        let w: Vec<f32> = (0..4 * 3 * 5).map(|_| rng.uniform(-1.0, 1.0) as f32).collect();
        let l_out = conv1d_out_len(40, 5, 1, 2);
        let mut c1 = vec![0.0f32; 2 * 4 * l_out];
        let mut c2 = vec![0.0f32; 2 * 4 * l_out];
        conv1d_fwd_seq(&x, &w, 2, 3, 40, 4, 5, 1, 2, &mut c1);
        conv1d_fwd_par(&x, &w, 2, 3, 40, 4, 5, 1, 2, &mut c2);
        assert_eq!(c1, c2);
    }

    #[test]
    fn conv_same_padding_identity_kernel() {
        let x = vec![1.0f64, 2.0, 3.0, 4.0];
        let w = vec![1.0f64];
        let mut out = vec![0.0; 4];
        conv1d_fwd_seq(&x, &w, 1, 1, 4, 1, 1, 1, 0, &mut out);
        assert_eq!(out, x);
    }

    #[test]
    fn maxpool_tie_goes_first() {
        let x = vec![2.0f64, 2.0, 1.0, 3.0];
        let mut out = vec![0.0; 2];
        let mut am = vec![0u8; 2];
        maxpool2_fwd(&x, 4, &mut out, &mut am);
        assert_eq!(out, vec![2.0, 3.0]);
        assert_eq!(am, vec![0, 1]);
    }

    #[test]
    fn topk_tie_breaks_low_index() {
        let lane = [1.0f64, 3.0, 3.0, 0.5];
        assert_eq!(topk_indices(&lane, 2), vec![1, 2]);
        let lane2 = [5.0f64, 5.0, 5.0];
        assert_eq!(topk_indices(&lane2, 1), vec![0]);
    }

    #[test]
    fn broadcast_strides_suffix_and_ones() {
        assert_eq!(rhs_broadcast_strides(&[2, 3, 4], &[4]).unwrap(), vec![0, 0, 1]);
        assert_eq!(rhs_broadcast_strides(&[2, 3, 4], &[3, 1]).unwrap(), vec![0, 1, 0]);
        assert!(rhs_broadcast_strides(&[2, 3, 4], &[2]).is_none());
    }
}
