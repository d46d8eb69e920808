//! Tape-recorded operations: forward evaluation plus backward closures.

use super::{add_into, NodeId, Tape};
use crate::kernels as kn;
use crate::scalar::Scalar;
use crate::tensor::{numel, strides, Tensor, TensorError, TensorResult};

/// (outer, axis_len, inner) split of a shape around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<T: Scalar> Tape<T> {
    // ── Elementwise binary with trailing-axis broadcasting ─────────────

    fn binary_broadcast(
        &mut self,
        op: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64 + Sync,
        // (g, a_val, b_val) -> d/da
        dfda: impl Fn(f64, f64, f64) -> f64 + Sync + 'static,
        // (g, a_val, b_val) -> d/db
        dfdb: impl Fn(f64, f64, f64) -> f64 + 'static,
    ) -> TensorResult<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        let out_shape = va.shape().to_vec();
        let rhs_strides = kn::rhs_broadcast_strides(&out_shape, vb.shape()).ok_or_else(|| {
            TensorError::ShapeMismatch { op, lhs: out_shape.clone(), rhs: vb.shape().to_vec() }
        })?;
        let mut out = Tensor::zeros(&out_shape);
        kn::broadcast_map(va.data(), vb.data(), out.data_mut(), &out_shape, &rhs_strides, |x, y| {
            T::from_f64(f(x.to_f64(), y.to_f64()))
        });
        let (req_a, req_b) = (self.requires_grad(a), self.requires_grad(b));
        if !(req_a || req_b) {
            return Ok(self.push(out, false, None));
        }
        let shape_b = vb.shape().to_vec();
        let os = out_shape.clone();
        let step = Box::new(move |vals: &[Tensor<T>], g: &Tensor<T>, gs: &mut super::GradStore<T>| {
            let (av, bv) = (vals[a.0].data(), vals[b.0].data());
            let gd = g.data();
            if req_a {
                let slot = gs.slot(a, &os);
                kn::broadcast_accum_into_lhs(slot, &os, &rhs_strides, |i, j| {
                    dfda(gd[i].to_f64(), av[i].to_f64(), bv[j].to_f64())
                });
            }
            if req_b {
                let slot = gs.slot(b, &shape_b);
                kn::broadcast_reduce_into(gd.len(), &os, &rhs_strides, slot, |i, j| {
                    dfdb(gd[i].to_f64(), av[i].to_f64(), bv[j].to_f64())
                });
            }
        });
        Ok(self.push(out, true, Some(step)))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> TensorResult<NodeId> {
        self.binary_broadcast("add", a, b, |x, y| x + y, |g, _, _| g, |g, _, _| g)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> TensorResult<NodeId> {
        self.binary_broadcast("sub", a, b, |x, y| x - y, |g, _, _| g, |g, _, _| -g)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> TensorResult<NodeId> {
        self.binary_broadcast("mul", a, b, |x, y| x * y, |g, _, y| g * y, |g, x, _| g * x)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> TensorResult<NodeId> {
        if self.value(b).data().iter().any(|&v| v.to_f64() == 0.0) {
            return Err(TensorError::Domain {
                op: "div",
                message: "division by zero".to_string(),
            });
        }
        self.binary_broadcast(
            "div",
            a,
            b,
            |x, y| x / y,
            |g, _, y| g / y,
            |g, x, y| -g * x / (y * y),
        )
    }

    // ── Scalar ops ─────────────────────────────────────────────────────

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let out = self.value(a).map(|x| T::from_f64(x.to_f64() + c));
        self.unary_from(a, out, move |_x, g| g)
    }

    pub fn mul_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let out = self.value(a).map(|x| T::from_f64(x.to_f64() * c));
        self.unary_from(a, out, move |_x, g| g * c)
    }

    // ── Elementwise unary ──────────────────────────────────────────────

    /// Shared recording for unary ops whose gradient is a pointwise
    /// function of the input value: d = df(x, g).
    fn unary_from(
        &mut self,
        a: NodeId,
        out: Tensor<T>,
        df: impl Fn(f64, f64) -> f64 + 'static,
    ) -> NodeId {
        if !self.requires_grad(a) {
            return self.push(out, false, None);
        }
        let shape = self.value(a).shape().to_vec();
        let step = Box::new(move |vals: &[Tensor<T>], g: &Tensor<T>, gs: &mut super::GradStore<T>| {
            let xv = vals[a.0].data();
            let gd = g.data();
            let slot = gs.slot(a, &shape);
            for (i, s) in slot.iter_mut().enumerate() {
                *s = T::from_f64(s.to_f64() + df(xv[i].to_f64(), gd[i].to_f64()));
            }
        });
        self.push(out, true, Some(step))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let mut out = Tensor::zeros(self.value(a).shape());
        kn::unary_map(self.value(a).data(), out.data_mut(), |x| T::from_f64(x.to_f64().exp()));
        self.unary_from(a, out, |x, g| g * x.exp())
    }

    /// Natural logarithm; errors on any nonpositive element.
    pub fn ln(&mut self, a: NodeId) -> TensorResult<NodeId> {
        if let Some(bad) = self.value(a).data().iter().find(|v| v.to_f64() <= 0.0) {
            return Err(TensorError::Domain {
                op: "ln",
                message: format!("log of nonpositive input {bad}"),
            });
        }
        let mut out = Tensor::zeros(self.value(a).shape());
        kn::unary_map(self.value(a).data(), out.data_mut(), |x| T::from_f64(x.to_f64().ln()));
        Ok(self.unary_from(a, out, |x, g| g / x))
    }

    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        let mut out = Tensor::zeros(self.value(a).shape());
        kn::unary_map(self.value(a).data(), out.data_mut(), kn::softplus);
        self.unary_from(a, out, |x, g| g * kn::sigmoid(x))
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let mut out = Tensor::zeros(self.value(a).shape());
        kn::unary_map(self.value(a).data(), out.data_mut(), kn::gelu);
        self.unary_from(a, out, |x, g| g * kn::gelu_grad(x).to_f64())
    }

    // ── Reductions ─────────────────────────────────────────────────────

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let total: f64 = self.value(a).data().iter().map(|v| v.to_f64()).sum();
        let out = Tensor::scalar(T::from_f64(total));
        let shape = self.value(a).shape().to_vec();
        if !self.requires_grad(a) {
            return self.push(out, false, None);
        }
        let step = Box::new(move |_v: &[Tensor<T>], g: &Tensor<T>, gs: &mut super::GradStore<T>| {
            let gv = g.data()[0].to_f64();
            let slot = gs.slot(a, &shape);
            for s in slot.iter_mut() {
                *s = T::from_f64(s.to_f64() + gv);
            }
        });
        self.push(out, true, Some(step))
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let n = self.value(a).numel() as f64;
        let s = self.sum_all(a);
        self.mul_scalar(s, 1.0 / n)
    }

    fn reduce_axis(&mut self, a: NodeId, axis: usize, mean: bool) -> TensorResult<NodeId> {
        let va = self.value(a);
        if axis >= va.rank() {
            return Err(TensorError::InvalidArgument {
                op: "reduce_axis",
                message: format!("axis {axis} out of range for shape {:?}", va.shape()),
            });
        }
        let (outer, len, inner) = split_axis(va.shape(), axis);
        let mut out_shape = va.shape().to_vec();
        out_shape.remove(axis);
        let scale = if mean { 1.0 / len as f64 } else { 1.0 };
        let mut out = Tensor::zeros(&out_shape);
        {
            let x = va.data();
            let od = out.data_mut();
            for o in 0..outer {
                for i in 0..inner {
                    let mut acc = 0.0f64;
                    for t in 0..len {
                        acc += x[(o * len + t) * inner + i].to_f64();
                    }
                    od[o * inner + i] = T::from_f64(acc * scale);
                }
            }
        }
        let in_shape = va.shape().to_vec();
        if !self.requires_grad(a) {
            return Ok(self.push(out, false, None));
        }
        let step = Box::new(move |_v: &[Tensor<T>], g: &Tensor<T>, gs: &mut super::GradStore<T>| {
            let gd = g.data();
            let slot = gs.slot(a, &in_shape);
            for o in 0..outer {
                for t in 0..len {
                    for i in 0..inner {
                        let idx = (o * len + t) * inner + i;
                        slot[idx] =
                            T::from_f64(slot[idx].to_f64() + gd[o * inner + i].to_f64() * scale);
                    }
                }
            }
        });
        Ok(self.push(out, true, Some(step)))
    }

    pub fn sum_axis(&mut self, a: NodeId, axis: usize) -> TensorResult<NodeId> {
        self.reduce_axis(a, axis, false)
    }

    /// Arithmetic mean along `axis` (the axis is removed). Gradient
    /// distributes 1/len to every reduced element.
    pub fn mean_axis(&mut self, a: NodeId, axis: usize) -> TensorResult<NodeId> {
        self.reduce_axis(a, axis, true)
    }

    // ── Structural ops ─────────────────────────────────────────────────

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> TensorResult<NodeId> {
        let va = self.value(a);
        if numel(shape) != va.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: va.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let out = Tensor::new(shape.to_vec(), va.data().to_vec()).expect("checked");
        let in_shape = va.shape().to_vec();
        if !self.requires_grad(a) {
            return Ok(self.push(out, false, None));
        }
        let step = Box::new(move |_v: &[Tensor<T>], g: &Tensor<T>, gs: &mut super::GradStore<T>| {
            add_into(gs.slot(a, &in_shape), g.data());
        });
        Ok(self.push(out, true, Some(step)))
    }

    pub fn permute(&mut self, a: NodeId, axes: &[usize]) -> TensorResult<NodeId> {
        let va = self.value(a);
        let rank = va.rank();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&x| x >= rank || std::mem::replace(&mut seen[x], true)) {
            return Err(TensorError::InvalidArgument {
                op: "permute",
                message: format!("invalid axes {axes:?} for rank {rank}"),
            });
        }
        let out_shape: Vec<usize> = axes.iter().map(|&x| va.dim(x)).collect();
        let mut out = Tensor::zeros(&out_shape);
        permute_copy(va.data(), va.shape(), axes, out.data_mut());
        let in_shape = va.shape().to_vec();
        let mut inverse = vec![0usize; rank];
        for (i, &x) in axes.iter().enumerate() {
            inverse[x] = i;
        }
        if !self.requires_grad(a) {
            return Ok(self.push(out, false, None));
        }
        let step = Box::new(move |_v: &[Tensor<T>], g: &Tensor<T>, gs: &mut super::GradStore<T>| {
            let mut tmp = vec![T::ZERO; g.numel()];
            permute_copy(g.data(), g.shape(), &inverse, &mut tmp);
            add_into(gs.slot(a, &in_shape), &tmp);
        });
        Ok(self.push(out, true, Some(step)))
    }

    pub fn concat(&mut self, a: NodeId, b: NodeId, axis: usize) -> TensorResult<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.rank() != vb.rank()
            || axis >= va.rank()
            || (0..va.rank()).any(|i| i != axis && va.dim(i) != vb.dim(i))
        {
            return Err(TensorError::ShapeMismatch {
                op: "concat",
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let (outer, la, inner) = split_axis(va.shape(), axis);
        let lb = vb.dim(axis);
        let mut out_shape = va.shape().to_vec();
        out_shape[axis] = la + lb;
        let mut out = Tensor::zeros(&out_shape);
        {
            let od = out.data_mut();
            for o in 0..outer {
                let dst = o * (la + lb) * inner;
                od[dst..dst + la * inner]
                    .copy_from_slice(&va.data()[o * la * inner..(o + 1) * la * inner]);
                od[dst + la * inner..dst + (la + lb) * inner]
                    .copy_from_slice(&vb.data()[o * lb * inner..(o + 1) * lb * inner]);
            }
        }
        let (req_a, req_b) = (self.requires_grad(a), self.requires_grad(b));
        let (sa, sb) = (va.shape().to_vec(), vb.shape().to_vec());
        if !(req_a || req_b) {
            return Ok(self.push(out, false, None));
        }
        let step = Box::new(move |_v: &[Tensor<T>], g: &Tensor<T>, gs: &mut super::GradStore<T>| {
            let gd = g.data();
            if req_a {
                let slot = gs.slot(a, &sa);
                for o in 0..outer {
                    let src = o * (la + lb) * inner;
                    add_into(
                        &mut slot[o * la * inner..(o + 1) * la * inner],
                        &gd[src..src + la * inner],
                    );
                }
            }
            if req_b {
                let slot = gs.slot(b, &sb);
                for o in 0..outer {
                    let src = o * (la + lb) * inner + la * inner;
                    add_into(
                        &mut slot[o * lb * inner..(o + 1) * lb * inner],
                        &gd[src..src + lb * inner],
                    );
                }
            }
        });
        Ok(self.push(out, true, Some(step)))
    }

    pub fn slice(&mut self, a: NodeId, axis: usize, start: usize, len: usize) -> TensorResult<NodeId> {
        let va = self.value(a);
        if axis >= va.rank() || start + len > va.dim(axis) || len == 0 {
            return Err(TensorError::InvalidArgument {
                op: "slice",
                message: format!(
                    "slice [{start}, {}) on axis {axis} of shape {:?}",
                    start + len,
                    va.shape()
                ),
            });
        }
        let (outer, full, inner) = split_axis(va.shape(), axis);
        let mut out_shape = va.shape().to_vec();
        out_shape[axis] = len;
        let mut out = Tensor::zeros(&out_shape);
        {
            let od = out.data_mut();
            for o in 0..outer {
                let src = (o * full + start) * inner;
                od[o * len * inner..(o + 1) * len * inner]
                    .copy_from_slice(&va.data()[src..src + len * inner]);
            }
        }
        let in_shape = va.shape().to_vec();
        if !self.requires_grad(a) {
            return Ok(self.push(out, false, None));
        }
        let step = Box::new(move |_v: &[Tensor<T>], g: &Tensor<T>, gs: &mut super::GradStore<T>| {
            let gd = g.data();
            let slot = gs.slot(a, &in_shape);
            for o in 0..outer {
                let dst = (o * full + start) * inner;
                add_into(&mut slot[dst..dst + len * inner], &gd[o * len * inner..(o + 1) * len * inner]);
            }
        });
        Ok(self.push(out, true, Some(step)))
    }

    /// Gather rows along `axis` by index; backward scatter-adds.
    pub fn index_select(&mut self, a: NodeId, axis: usize, indices: &[usize]) -> TensorResult<NodeId> {
        let va = self.value(a);
        if axis >= va.rank() {
            return Err(TensorError::InvalidArgument {
                op: "index_select",
                message: format!("axis {axis} out of range for shape {:?}", va.shape()),
            });
        }
        let (outer, full, inner) = split_axis(va.shape(), axis);
        if let Some(&bad) = indices.iter().find(|&&i| i >= full) {
            return Err(TensorError::InvalidArgument {
                op: "index_select",
                message: format!("index {bad} out of range for axis length {full}"),
            });
        }
        let k = indices.len();
        let mut out_shape = va.shape().to_vec();
        out_shape[axis] = k;
        let mut out = Tensor::zeros(&out_shape);
        {
            let od = out.data_mut();
            for o in 0..outer {
                for (pos, &src) in indices.iter().enumerate() {
                    let s = (o * full + src) * inner;
                    od[(o * k + pos) * inner..(o * k + pos + 1) * inner]
                        .copy_from_slice(&va.data()[s..s + inner]);
                }
            }
        }
        let in_shape = va.shape().to_vec();
        let idx = indices.to_vec();
        if !self.requires_grad(a) {
            return Ok(self.push(out, false, None));
        }
        let step = Box::new(move |_v: &[Tensor<T>], g: &Tensor<T>, gs: &mut super::GradStore<T>| {
            let gd = g.data();
            let slot = gs.slot(a, &in_shape);
            for o in 0..outer {
                for (pos, &src) in idx.iter().enumerate() {
                    let d = (o * full + src) * inner;
                    add_into(&mut slot[d..d + inner], &gd[(o * k + pos) * inner..(o * k + pos + 1) * inner]);
                }
            }
        });
        Ok(self.push(out, true, Some(step)))
    }

    // ── Matrix multiply ────────────────────────────────────────────────

    /// Batched contraction: `a` is [.., m, k]; `b` is either [k, n]
    /// (shared across all leading dims of `a`) or has identical leading
    /// dims [.., k, n].
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> TensorResult<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        let (ra, rb) = (va.rank(), vb.rank());
        let mismatch = || TensorError::ShapeMismatch {
            op: "matmul",
            lhs: va.shape().to_vec(),
            rhs: vb.shape().to_vec(),
        };
        if ra < 2 || rb < 2 {
            return Err(mismatch());
        }
        let (m, k) = (va.dim(ra - 2), va.dim(ra - 1));
        let (kb, n) = (vb.dim(rb - 2), vb.dim(rb - 1));
        if k != kb {
            return Err(mismatch());
        }
        let shared_b = rb == 2 && ra >= 2;
        if !shared_b && (ra != rb || va.shape()[..ra - 2] != vb.shape()[..rb - 2]) {
            return Err(mismatch());
        }
        let batch: usize = va.shape()[..ra - 2].iter().product();
        let mut out_shape = va.shape()[..ra - 2].to_vec();
        out_shape.push(m);
        out_shape.push(n);
        let mut out = Tensor::zeros(&out_shape);
        if shared_b {
            kn::matmul2(va.data(), false, vb.data(), false, batch * m, k, n, out.data_mut());
        } else {
            for bi in 0..batch {
                kn::matmul2(
                    &va.data()[bi * m * k..(bi + 1) * m * k],
                    false,
                    &vb.data()[bi * k * n..(bi + 1) * k * n],
                    false,
                    m,
                    k,
                    n,
                    &mut out.data_mut()[bi * m * n..(bi + 1) * m * n],
                );
            }
        }
        let (req_a, req_b) = (self.requires_grad(a), self.requires_grad(b));
        let (sa, sb) = (va.shape().to_vec(), vb.shape().to_vec());
        if !(req_a || req_b) {
            return Ok(self.push(out, false, None));
        }
        let step = Box::new(move |vals: &[Tensor<T>], g: &Tensor<T>, gs: &mut super::GradStore<T>| {
            let av = vals[a.0].data();
            let bv = vals[b.0].data();
            let gd = g.data();
            if shared_b {
                if req_a {
                    let mut da = vec![T::ZERO; batch * m * k];
                    kn::matmul2(gd, false, bv, true, batch * m, n, k, &mut da);
                    add_into(gs.slot(a, &sa), &da);
                }
                if req_b {
                    let mut db = vec![T::ZERO; k * n];
                    kn::matmul2(av, true, gd, false, k, batch * m, n, &mut db);
                    add_into(gs.slot(b, &sb), &db);
                }
            } else {
                if req_a {
                    let mut da = vec![T::ZERO; batch * m * k];
                    for bi in 0..batch {
                        kn::matmul2(
                            &gd[bi * m * n..(bi + 1) * m * n],
                            false,
                            &bv[bi * k * n..(bi + 1) * k * n],
                            true,
                            m,
                            n,
                            k,
                            &mut da[bi * m * k..(bi + 1) * m * k],
                        );
                    }
                    add_into(gs.slot(a, &sa), &da);
                }
                if req_b {
                    let mut db = vec![T::ZERO; batch * k * n];
                    for bi in 0..batch {
                        kn::matmul2(
                            &av[bi * m * k..(bi + 1) * m * k],
                            true,
                            &gd[bi * m * n..(bi + 1) * m * n],
                            false,
                            k,
                            m,
                            n,
                            &mut db[bi * k * n..(bi + 1) * k * n],
                        );
                    }
                    add_into(gs.slot(b, &sb), &db);
                }
            }
        });
        Ok(self.push(out, true, Some(step)))
    }

    /// x @ w + b.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> TensorResult<NodeId> {
        let xw = self.matmul(x, w)?;
        self.add(xw, b)
    }

    // ── Convolution and pooling ────────────────────────────────────────

    /// 1D convolution: x [B, C_in, L], w [C_out, C_in, K].
    pub fn conv1d(&mut self, x: NodeId, w: NodeId, stride: usize, pad: usize) -> TensorResult<NodeId> {
        let (vx, vw) = (self.value(x), self.value(w));
        if vx.rank() != 3 || vw.rank() != 3 || vx.dim(1) != vw.dim(1) {
            return Err(TensorError::ShapeMismatch {
                op: "conv1d",
                lhs: vx.shape().to_vec(),
                rhs: vw.shape().to_vec(),
            });
        }
        if stride == 0 {
            return Err(TensorError::InvalidArgument {
                op: "conv1d",
                message: "stride must be >= 1".to_string(),
            });
        }
        let (batch, c_in, l) = (vx.dim(0), vx.dim(1), vx.dim(2));
        let (c_out, k) = (vw.dim(0), vw.dim(2));
        if k > l + 2 * pad {
            return Err(TensorError::InvalidArgument {
                op: "conv1d",
                message: format!("kernel width {k} exceeds padded input length {}", l + 2 * pad),
            });
        }
        let l_out = kn::conv1d_out_len(l, k, stride, pad);
        let mut out = Tensor::zeros(&[batch, c_out, l_out]);
        kn::conv1d_fwd(vx.data(), vw.data(), batch, c_in, l, c_out, k, stride, pad, out.data_mut());
        let (req_x, req_w) = (self.requires_grad(x), self.requires_grad(w));
        let (sx, sw) = (vx.shape().to_vec(), vw.shape().to_vec());
        if !(req_x || req_w) {
            return Ok(self.push(out, false, None));
        }
        let step = Box::new(move |vals: &[Tensor<T>], g: &Tensor<T>, gs: &mut super::GradStore<T>| {
            let xv = vals[x.0].data();
            let wv = vals[w.0].data();
            let gd = g.data();
            if req_x {
                let mut dx = vec![T::ZERO; xv.len()];
                kn::conv1d_bwd_x(gd, wv, batch, c_in, l, c_out, k, stride, pad, &mut dx);
                add_into(gs.slot(x, &sx), &dx);
            }
            if req_w {
                let mut dw = vec![T::ZERO; wv.len()];
                kn::conv1d_bwd_w(gd, xv, batch, c_in, l, c_out, k, stride, pad, &mut dw);
                add_into(gs.slot(w, &sw), &dw);
            }
        });
        Ok(self.push(out, true, Some(step)))
    }

    /// Max pooling with width 2 and stride 2 over the last axis; ties go
    /// to the earlier element.
    pub fn maxpool2(&mut self, a: NodeId) -> TensorResult<NodeId> {
        let va = self.value(a);
        let lane = *va.shape().last().ok_or(TensorError::InvalidArgument {
            op: "maxpool2",
            message: "rank-0 input".to_string(),
        })?;
        if lane % 2 != 0 || lane == 0 {
            return Err(TensorError::InvalidArgument {
                op: "maxpool2",
                message: format!("last axis length {lane} is not even"),
            });
        }
        let mut out_shape = va.shape().to_vec();
        *out_shape.last_mut().unwrap() = lane / 2;
        let mut out = Tensor::zeros(&out_shape);
        let mut argmax = vec![0u8; out.numel()];
        kn::maxpool2_fwd(va.data(), lane, out.data_mut(), &mut argmax);
        let in_shape = va.shape().to_vec();
        if !self.requires_grad(a) {
            return Ok(self.push(out, false, None));
        }
        let step = Box::new(move |_v: &[Tensor<T>], g: &Tensor<T>, gs: &mut super::GradStore<T>| {
            let mut dx = vec![T::ZERO; numel(&in_shape)];
            kn::maxpool2_bwd(g.data(), &argmax, lane, &mut dx);
            add_into(gs.slot(a, &in_shape), &dx);
        });
        Ok(self.push(out, true, Some(step)))
    }

    // ── Softmax family ─────────────────────────────────────────────────

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, a: NodeId, axis: usize) -> TensorResult<NodeId> {
        let va = self.value(a);
        if axis >= va.rank() {
            return Err(TensorError::InvalidArgument {
                op: "softmax",
                message: format!("axis {axis} out of range for shape {:?}", va.shape()),
            });
        }
        let (outer, len, inner) = split_axis(va.shape(), axis);
        let mut out = Tensor::zeros(va.shape());
        if inner == 1 {
            kn::softmax_lanes(va.data(), len, out.data_mut());
        } else {
            let x = va.data();
            let od = out.data_mut();
            for o in 0..outer {
                for i in 0..inner {
                    let at = |t: usize| (o * len + t) * inner + i;
                    let mut mx = f64::NEG_INFINITY;
                    for t in 0..len {
                        mx = mx.max(x[at(t)].to_f64());
                    }
                    let mut sum = 0.0;
                    for t in 0..len {
                        let e = (x[at(t)].to_f64() - mx).exp();
                        od[at(t)] = T::from_f64(e);
                        sum += e;
                    }
                    for t in 0..len {
                        od[at(t)] = T::from_f64(od[at(t)].to_f64() / sum);
                    }
                }
            }
        }
        let in_shape = va.shape().to_vec();
        if !self.requires_grad(a) {
            return Ok(self.push(out, false, None));
        }
        let out_id = self.next_id();
        let step = Box::new(move |vals: &[Tensor<T>], g: &Tensor<T>, gs: &mut super::GradStore<T>| {
            let y = vals[out_id].data();
            let gd = g.data();
            if inner == 1 {
                let mut dx = vec![T::ZERO; y.len()];
                kn::softmax_bwd_lanes(y, gd, len, &mut dx);
                add_into(gs.slot(a, &in_shape), &dx);
            } else {
                let slot = gs.slot(a, &in_shape);
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |t: usize| (o * len + t) * inner + i;
                        let mut dot = 0.0;
                        for t in 0..len {
                            dot += y[at(t)].to_f64() * gd[at(t)].to_f64();
                        }
                        for t in 0..len {
                            let idx = at(t);
                            slot[idx] = T::from_f64(
                                slot[idx].to_f64() + y[idx].to_f64() * (gd[idx].to_f64() - dot),
                            );
                        }
                    }
                }
            }
        });
        Ok(self.push(out, true, Some(step)))
    }

    /// Sparse gate activation over the last axis: keeps the k largest
    /// logits (ties to the lowest index), renormalizes them with a softmax
    /// over the selected subset, and zeroes the rest. Gradient flows only
    /// through the selected entries.
    pub fn topk_softmax(&mut self, a: NodeId, k: usize) -> TensorResult<NodeId> {
        let va = self.value(a);
        let n = *va.shape().last().ok_or(TensorError::InvalidArgument {
            op: "topk_softmax",
            message: "rank-0 input".to_string(),
        })?;
        if k == 0 || k > n {
            return Err(TensorError::InvalidArgument {
                op: "topk_softmax",
                message: format!("k = {k} out of range for lane length {n}"),
            });
        }
        let lanes = va.numel() / n;
        let mut out = Tensor::zeros(va.shape());
        let mut selected = vec![0u32; lanes * k];
        {
            let x = va.data();
            let od = out.data_mut();
            for lane_i in 0..lanes {
                let xs = &x[lane_i * n..(lane_i + 1) * n];
                let idx = kn::topk_indices(xs, k);
                let mx = xs[idx[0] as usize].to_f64();
                let mut sum = 0.0;
                let mut exps = [0.0f64; 32];
                let mut exps_vec;
                let exps: &mut [f64] = if k <= 32 {
                    &mut exps[..k]
                } else {
                    exps_vec = vec![0.0f64; k];
                    &mut exps_vec
                };
                for (pos, &i) in idx.iter().enumerate() {
                    let e = (xs[i as usize].to_f64() - mx).exp();
                    exps[pos] = e;
                    sum += e;
                }
                for (pos, &i) in idx.iter().enumerate() {
                    od[lane_i * n + i as usize] = T::from_f64(exps[pos] / sum);
                }
                selected[lane_i * k..(lane_i + 1) * k].copy_from_slice(&idx);
            }
        }
        let in_shape = va.shape().to_vec();
        if !self.requires_grad(a) {
            return Ok(self.push(out, false, None));
        }
        let out_id = self.next_id();
        let step = Box::new(move |vals: &[Tensor<T>], g: &Tensor<T>, gs: &mut super::GradStore<T>| {
            let y = vals[out_id].data();
            let gd = g.data();
            let slot = gs.slot(a, &in_shape);
            for lane_i in 0..lanes {
                let sel = &selected[lane_i * k..(lane_i + 1) * k];
                let mut dot = 0.0;
                for &i in sel {
                    let idx = lane_i * n + i as usize;
                    dot += y[idx].to_f64() * gd[idx].to_f64();
                }
                for &i in sel {
                    let idx = lane_i * n + i as usize;
                    slot[idx] = T::from_f64(
                        slot[idx].to_f64() + y[idx].to_f64() * (gd[idx].to_f64() - dot),
                    );
                }
            }
        });
        Ok(self.push(out, true, Some(step)))
    }

    // ── Layer normalization ────────────────────────────────────────────

    /// Normalize over the last axis to mean 0 / variance 1, then apply the
    /// affine (gamma, beta).
    pub fn layernorm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> TensorResult<NodeId> {
        let vx = self.value(x);
        let d = *vx.shape().last().ok_or(TensorError::InvalidArgument {
            op: "layernorm",
            message: "rank-0 input".to_string(),
        })?;
        let (vg, vb) = (self.value(gamma), self.value(beta));
        if vg.shape() != [d] || vb.shape() != [d] {
            return Err(TensorError::ShapeMismatch {
                op: "layernorm",
                lhs: vx.shape().to_vec(),
                rhs: vg.shape().to_vec(),
            });
        }
        let lanes = vx.numel() / d;
        let mut out = Tensor::zeros(vx.shape());
        let mut means = vec![0.0f64; lanes];
        let mut inv_stds = vec![0.0f64; lanes];
        {
            let xd = vx.data();
            let gd = vg.data();
            let bd = vb.data();
            let od = out.data_mut();
            for li in 0..lanes {
                let xs = &xd[li * d..(li + 1) * d];
                let mean = xs.iter().map(|v| v.to_f64()).sum::<f64>() / d as f64;
                let var =
                    xs.iter().map(|v| (v.to_f64() - mean) * (v.to_f64() - mean)).sum::<f64>()
                        / d as f64;
                let inv = 1.0 / (var + eps).sqrt();
                means[li] = mean;
                inv_stds[li] = inv;
                for j in 0..d {
                    let xhat = (xs[j].to_f64() - mean) * inv;
                    od[li * d + j] = T::from_f64(gd[j].to_f64() * xhat + bd[j].to_f64());
                }
            }
        }
        let (req_x, req_g, req_b) =
            (self.requires_grad(x), self.requires_grad(gamma), self.requires_grad(beta));
        let in_shape = vx.shape().to_vec();
        if !(req_x || req_g || req_b) {
            return Ok(self.push(out, false, None));
        }
        let step = Box::new(move |vals: &[Tensor<T>], g: &Tensor<T>, gs: &mut super::GradStore<T>| {
            let xd = vals[x.0].data();
            let gam = vals[gamma.0].data();
            let gg = g.data();
            if req_g || req_b {
                // Accumulate affine grads lane by lane.
                let mut dgamma = vec![0.0f64; d];
                let mut dbeta = vec![0.0f64; d];
                for li in 0..lanes {
                    for j in 0..d {
                        let xhat = (xd[li * d + j].to_f64() - means[li]) * inv_stds[li];
                        dgamma[j] += gg[li * d + j].to_f64() * xhat;
                        dbeta[j] += gg[li * d + j].to_f64();
                    }
                }
                if req_g {
                    let slot = gs.slot(gamma, &[d]);
                    for (s, v) in slot.iter_mut().zip(dgamma.iter()) {
                        *s = T::from_f64(s.to_f64() + v);
                    }
                }
                if req_b {
                    let slot = gs.slot(beta, &[d]);
                    for (s, v) in slot.iter_mut().zip(dbeta.iter()) {
                        *s = T::from_f64(s.to_f64() + v);
                    }
                }
            }
            if req_x {
                let slot = gs.slot(x, &in_shape);
                for li in 0..lanes {
                    let mut m1 = 0.0f64;
                    let mut m2 = 0.0f64;
                    for j in 0..d {
                        let aj = gg[li * d + j].to_f64() * gam[j].to_f64();
                        let xhat = (xd[li * d + j].to_f64() - means[li]) * inv_stds[li];
                        m1 += aj;
                        m2 += aj * xhat;
                    }
                    m1 /= d as f64;
                    m2 /= d as f64;
                    for j in 0..d {
                        let aj = gg[li * d + j].to_f64() * gam[j].to_f64();
                        let xhat = (xd[li * d + j].to_f64() - means[li]) * inv_stds[li];
                        let idx = li * d + j;
                        slot[idx] = T::from_f64(
                            slot[idx].to_f64() + inv_stds[li] * (aj - m1 - xhat * m2),
                        );
                    }
                }
            }
        });
        Ok(self.push(out, true, Some(step)))
    }

    // ── Loss primitives ────────────────────────────────────────────────

    /// Mean Poisson negative log-likelihood (1/N)·Σ (p_i − t_i ln p_i)
    /// against constant targets. Terms with t_i = 0 drop the logarithm
    /// (0·ln p := 0). Errors if any p_i ≤ 0 where t_i > 0.
    pub fn poisson_nll(&mut self, p: NodeId, targets: &Tensor<T>) -> TensorResult<NodeId> {
        let vp = self.value(p);
        if vp.shape() != targets.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "poisson_nll",
                lhs: vp.shape().to_vec(),
                rhs: targets.shape().to_vec(),
            });
        }
        if let Some(bad) = targets.data().iter().find(|v| v.to_f64() < 0.0) {
            return Err(TensorError::Domain {
                op: "poisson_nll",
                message: format!("negative target {bad}"),
            });
        }
        let n = vp.numel() as f64;
        let mut acc = 0.0f64;
        for (&pi, &ti) in vp.data().iter().zip(targets.data().iter()) {
            let (pv, tv) = (pi.to_f64(), ti.to_f64());
            if tv > 0.0 {
                if pv <= 0.0 {
                    return Err(TensorError::Domain {
                        op: "poisson_nll",
                        message: format!("rate {pv} <= 0 where target {tv} > 0"),
                    });
                }
                acc += pv - tv * pv.ln();
            } else {
                acc += pv;
            }
        }
        let out = Tensor::scalar(T::from_f64(acc / n));
        let in_shape = vp.shape().to_vec();
        if !self.requires_grad(p) {
            return Ok(self.push(out, false, None));
        }
        let t = targets.clone();
        let step = Box::new(move |vals: &[Tensor<T>], g: &Tensor<T>, gs: &mut super::GradStore<T>| {
            let pv = vals[p.0].data();
            let gv = g.data()[0].to_f64();
            let slot = gs.slot(p, &in_shape);
            for (i, s) in slot.iter_mut().enumerate() {
                let tv = t.data()[i].to_f64();
                let d = if tv > 0.0 { 1.0 - tv / pv[i].to_f64() } else { 1.0 };
                *s = T::from_f64(s.to_f64() + gv * d / n);
            }
        });
        Ok(self.push(out, true, Some(step)))
    }

    /// Mutual information MI(S;E) = H(S) + H(E) − H(S,E) of a joint mass
    /// matrix [M, N] (natural log, 0·ln 0 := 0). The input must be a valid
    /// distribution up to accumulation error; gradient flows through every
    /// strictly positive cell.
    pub fn mutual_information(&mut self, joint: NodeId) -> TensorResult<NodeId> {
        let vj = self.value(joint);
        if vj.rank() != 2 {
            return Err(TensorError::InvalidArgument {
                op: "mutual_information",
                message: format!("expected [M, N] joint, got {:?}", vj.shape()),
            });
        }
        let (m, n) = (vj.dim(0), vj.dim(1));
        let mut total = 0.0f64;
        for &v in vj.data() {
            let v = v.to_f64();
            if v < -1e-9 {
                return Err(TensorError::Domain {
                    op: "mutual_information",
                    message: format!("negative mass {v}"),
                });
            }
            total += v;
        }
        if (total - 1.0).abs() > 1e-4 {
            return Err(TensorError::Domain {
                op: "mutual_information",
                message: format!("total mass {total} != 1"),
            });
        }
        let data: Vec<f64> = vj.data().iter().map(|v| v.to_f64().max(0.0)).collect();
        let mut row = vec![0.0f64; m];
        let mut col = vec![0.0f64; n];
        for i in 0..m {
            for j in 0..n {
                row[i] += data[i * n + j];
                col[j] += data[i * n + j];
            }
        }
        let ent = |q: f64| if q > 0.0 { -q * q.ln() } else { 0.0 };
        let h_s: f64 = row.iter().map(|&q| ent(q)).sum();
        let h_e: f64 = col.iter().map(|&q| ent(q)).sum();
        let h_se: f64 = data.iter().map(|&q| ent(q)).sum();
        let mi = h_s + h_e - h_se;
        let out = Tensor::scalar(T::from_f64(mi));
        let in_shape = vj.shape().to_vec();
        if !self.requires_grad(joint) {
            return Ok(self.push(out, false, None));
        }
        let step = Box::new(move |vals: &[Tensor<T>], g: &Tensor<T>, gs: &mut super::GradStore<T>| {
            let jd = vals[joint.0].data();
            let gv = g.data()[0].to_f64();
            let mut row = vec![0.0f64; m];
            let mut col = vec![0.0f64; n];
            for i in 0..m {
                for j in 0..n {
                    let v = jd[i * n + j].to_f64().max(0.0);
                    row[i] += v;
                    col[j] += v;
                }
            }
            let slot = gs.slot(joint, &in_shape);
            for i in 0..m {
                for j in 0..n {
                    let v = jd[i * n + j].to_f64();
                    if v > 0.0 {
                        // d MI / d P_ij = ln(P_ij / (P_i· P_·j)) − 1
                        let d = v.ln() - row[i].ln() - col[j].ln() - 1.0;
                        let idx = i * n + j;
                        slot[idx] = T::from_f64(slot[idx].to_f64() + gv * d);
                    }
                }
            }
        });
        Ok(self.push(out, true, Some(step)))
    }
}

/// out[flat] = x[permuted(flat)] for a permutation of axes.
fn permute_copy<T: Scalar>(x: &[T], shape: &[usize], axes: &[usize], out: &mut [T]) {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let out_strides = strides(&out_shape);
    for (o_flat, o) in out.iter_mut().enumerate() {
        let mut rem = o_flat;
        let mut i_flat = 0usize;
        for (ax_pos, &src_axis) in axes.iter().enumerate() {
            let c = rem / out_strides[ax_pos];
            rem -= c * out_strides[ax_pos];
            i_flat += c * in_strides[src_axis];
        }
        *o = x[i_flat];
    }
}
