//! Forward ops and their backward closures.

use std::rc::Rc;

use matrixmultiply::dgemm;

use super::Tensor;
use crate::error::{Result, SbsgError};

// ---------------------------------------------------------------------------
// Broadcasting helpers (trailing-dimension alignment)
// ---------------------------------------------------------------------------

fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let ndim = a.len().max(b.len());
    let mut out = vec![0usize; ndim];
    for i in 0..ndim {
        let da = if i < ndim - a.len() { 1 } else { a[i - (ndim - a.len())] };
        let db = if i < ndim - b.len() { 1 } else { b[i - (ndim - b.len())] };
        if da != db && da != 1 && db != 1 {
            return Err(SbsgError::Dimension(format!(
                "shapes {a:?} and {b:?} are not broadcastable"
            )));
        }
        out[i] = da.max(db);
    }
    Ok(out)
}

/// Row-major strides, with stride 0 on axes the shape broadcasts over.
/// `shape` is right-aligned inside `out_shape`.
fn bcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let ndim = out_shape.len();
    let offset = ndim - shape.len();
    let mut padded = vec![1usize; ndim];
    padded[offset..].copy_from_slice(shape);
    let mut strides = vec![0usize; ndim];
    let mut acc = 1usize;
    for d in (0..ndim).rev() {
        strides[d] = if padded[d] == 1 { 0 } else { acc };
        acc *= padded[d];
    }
    strides
}

fn contiguous_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1usize; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        strides[d] = strides[d + 1] * shape[d + 1];
    }
    strides
}

/// Odometer over `shape` driving two broadcast offsets at once.
fn for_each_bcast(shape: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let numel: usize = shape.iter().product();
    if numel == 0 {
        return;
    }
    let ndim = shape.len();
    let mut coords = vec![0usize; ndim];
    let mut oa = 0usize;
    let mut ob = 0usize;
    for flat in 0..numel {
        f(flat, oa, ob);
        for d in (0..ndim).rev() {
            coords[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if coords[d] < shape[d] {
                break;
            }
            oa -= sa[d] * shape[d];
            ob -= sb[d] * shape[d];
            coords[d] = 0;
        }
    }
}

// ---------------------------------------------------------------------------
// Elementwise ops
// ---------------------------------------------------------------------------

macro_rules! binary_elementwise {
    ($name:ident, $fwd:expr, $bwd_a:expr, $bwd_b:expr) => {
        pub fn $name(&self, other: &Tensor) -> Result<Tensor> {
            let out_shape = broadcast_shape(self.shape(), other.shape())?;
            let numel: usize = out_shape.iter().product();
            let mut data = vec![0.0; numel];
            let fwd: fn(f64, f64) -> f64 = $fwd;
            if self.shape() == other.shape() {
                for ((o, a), b) in data.iter_mut().zip(self.data()).zip(other.data()) {
                    *o = fwd(*a, *b);
                }
            } else {
                let sa = bcast_strides(self.shape(), &out_shape);
                let sb = bcast_strides(other.shape(), &out_shape);
                let (ad, bd) = (self.data(), other.data());
                for_each_bcast(&out_shape, &sa, &sb, |flat, oa, ob| {
                    data[flat] = fwd(ad[oa], bd[ob]);
                });
            }
            let shape = out_shape.clone();
            Ok(Tensor::from_op(
                out_shape,
                data,
                vec![self.clone(), other.clone()],
                Box::new(move |grad, _out, parents| {
                    let (a, b) = (&parents[0], &parents[1]);
                    let ga: fn(f64, f64, f64) -> f64 = $bwd_a;
                    let gb: fn(f64, f64, f64) -> f64 = $bwd_b;
                    let sa = bcast_strides(a.shape(), &shape);
                    let sb = bcast_strides(b.shape(), &shape);
                    if a.tracked() {
                        let mut da = vec![0.0; a.numel()];
                        let (ad, bd) = (a.data(), b.data());
                        for_each_bcast(&shape, &sa, &sb, |flat, oa, ob| {
                            da[oa] += ga(grad[flat], ad[oa], bd[ob]);
                        });
                        a.accumulate_grad(&da);
                    }
                    if b.tracked() {
                        let mut db = vec![0.0; b.numel()];
                        let (ad, bd) = (a.data(), b.data());
                        for_each_bcast(&shape, &sa, &sb, |flat, oa, ob| {
                            db[ob] += gb(grad[flat], ad[oa], bd[ob]);
                        });
                        b.accumulate_grad(&db);
                    }
                }),
            ))
        }
    };
}

impl Tensor {
    binary_elementwise!(add, |a, b| a + b, |g, _a, _b| g, |g, _a, _b| g);
    binary_elementwise!(sub, |a, b| a - b, |g, _a, _b| g, |g, _a, _b| -g);
    binary_elementwise!(mul, |a, b| a * b, |g, _a, b| g * b, |g, a, _b| g * a);

    pub fn scale(&self, c: f64) -> Tensor {
        let data = self.data().iter().map(|v| v * c).collect();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |grad, _out, parents| {
                if parents[0].tracked() {
                    let da: Vec<f64> = grad.iter().map(|g| g * c).collect();
                    parents[0].accumulate_grad(&da);
                }
            }),
        )
    }

    pub fn neg(&self) -> Tensor {
        self.scale(-1.0)
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        let data = self.data().iter().map(|v| v + c).collect();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(|grad, _out, parents| {
                if parents[0].tracked() {
                    parents[0].accumulate_grad(grad);
                }
            }),
        )
    }

    pub fn relu(&self) -> Tensor {
        let data = self.data().iter().map(|v| v.max(0.0)).collect();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(|grad, _out, parents| {
                let x = &parents[0];
                if x.tracked() {
                    let da: Vec<f64> = grad
                        .iter()
                        .zip(x.data())
                        .map(|(g, v)| if *v > 0.0 { *g } else { 0.0 })
                        .collect();
                    x.accumulate_grad(&da);
                }
            }),
        )
    }

    /// Inverted dropout: keeps each element with probability `1 - rate` and
    /// rescales by `1/(1 - rate)`. The mask is drawn from `draw` (one call
    /// per element, expected uniform in [0,1)).
    pub fn dropout(&self, rate: f64, draw: &mut impl FnMut() -> f64) -> Tensor {
        if rate == 0.0 {
            return self.clone();
        }
        let keep = 1.0 - rate;
        let mask: Rc<Vec<f64>> = Rc::new(
            (0..self.numel())
                .map(|_| if draw() < keep { 1.0 / keep } else { 0.0 })
                .collect(),
        );
        let data = self.data().iter().zip(mask.iter()).map(|(v, m)| v * m).collect();
        let mask_b = Rc::clone(&mask);
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |grad, _out, parents| {
                if parents[0].tracked() {
                    let da: Vec<f64> =
                        grad.iter().zip(mask_b.iter()).map(|(g, m)| g * m).collect();
                    parents[0].accumulate_grad(&da);
                }
            }),
        )
    }
}

// ---------------------------------------------------------------------------
// Matrix multiplication
// ---------------------------------------------------------------------------

#[allow(clippy::too_many_arguments)]
fn gemm_acc(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    beta: f64,
    c: &mut [f64],
) {
    // SAFETY: callers pass slices that cover the strided index ranges.
    unsafe {
        dgemm(
            m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}

impl Tensor {
    /// Batched matrix product `[..., m, k] x [..., k, n] -> [..., m, n]` with
    /// broadcasting over the leading batch dimensions.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (a_shape, b_shape) = (self.shape(), other.shape());
        if a_shape.len() < 2 || b_shape.len() < 2 {
            return Err(SbsgError::Dimension(format!(
                "matmul needs at least 2-d operands, got {a_shape:?} x {b_shape:?}"
            )));
        }
        let (m, ka) = (a_shape[a_shape.len() - 2], a_shape[a_shape.len() - 1]);
        let (kb, n) = (b_shape[b_shape.len() - 2], b_shape[b_shape.len() - 1]);
        if ka != kb {
            return Err(SbsgError::Dimension(format!(
                "matmul inner dimensions disagree: {a_shape:?} x {b_shape:?}"
            )));
        }
        // A plain 2-d right operand multiplies every batch entry of the left
        // side by the same matrix, so the batch loop collapses into one tall
        // product. This is the hot path for all weight projections, where
        // per-row gemm calls would otherwise dominate incremental decoding.
        if b_shape.len() == 2 {
            return self.matmul_flat(other, ka, n);
        }

        let batch = broadcast_shape(&a_shape[..a_shape.len() - 2], &b_shape[..b_shape.len() - 2])?;
        let n_batch: usize = batch.iter().product();
        let sa = bcast_strides(&a_shape[..a_shape.len() - 2], &batch);
        let sb = bcast_strides(&b_shape[..b_shape.len() - 2], &batch);
        let (a_mat, b_mat, c_mat) = (m * ka, kb * n, m * n);

        let mut out = vec![0.0; n_batch * c_mat];
        let (ad, bd) = (self.data(), other.data());
        for_each_batch(&batch, &sa, &sb, |bi, oa, ob| {
            gemm_acc(
                m, ka, n,
                &ad[oa * a_mat..oa * a_mat + a_mat], ka as isize, 1,
                &bd[ob * b_mat..ob * b_mat + b_mat], n as isize, 1,
                0.0,
                &mut out[bi * c_mat..bi * c_mat + c_mat],
            );
        });

        let mut out_shape = batch.clone();
        out_shape.push(m);
        out_shape.push(n);
        Ok(Tensor::from_op(
            out_shape,
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |grad, _out, parents| {
                let (a, b) = (&parents[0], &parents[1]);
                let (ad, bd) = (a.data(), b.data());
                if a.tracked() {
                    // dA = dC . B^T, accumulated over broadcast batch entries
                    let mut da = vec![0.0; a.numel()];
                    for_each_batch(&batch, &sa, &sb, |bi, oa, ob| {
                        gemm_acc(
                            m, n, ka,
                            &grad[bi * c_mat..bi * c_mat + c_mat], n as isize, 1,
                            &bd[ob * b_mat..ob * b_mat + b_mat], 1, n as isize,
                            1.0,
                            &mut da[oa * a_mat..oa * a_mat + a_mat],
                        );
                    });
                    a.accumulate_grad(&da);
                }
                if b.tracked() {
                    // dB = A^T . dC
                    let mut db = vec![0.0; b.numel()];
                    for_each_batch(&batch, &sa, &sb, |bi, oa, ob| {
                        gemm_acc(
                            ka, m, n,
                            &ad[oa * a_mat..oa * a_mat + a_mat], 1, ka as isize,
                            &grad[bi * c_mat..bi * c_mat + c_mat], n as isize, 1,
                            1.0,
                            &mut db[ob * b_mat..ob * b_mat + b_mat],
                        );
                    });
                    b.accumulate_grad(&db);
                }
            }),
        ))
    }

    /// `[..., m, k] x [k, n]` as a single gemm over the flattened rows of the
    /// left side. Row-major batch entries are contiguous, so `[B..., m, k]`
    /// reads as one `[B*m, k]` matrix and the batch dimension never enters
    /// the kernel.
    fn matmul_flat(&self, other: &Tensor, k: usize, n: usize) -> Result<Tensor> {
        let rows = self.numel() / k;
        let mut out = vec![0.0; rows * n];
        gemm_acc(
            rows, k, n,
            self.data(), k as isize, 1,
            other.data(), n as isize, 1,
            0.0,
            &mut out,
        );
        let mut out_shape = self.shape().to_vec();
        let last = out_shape.len() - 1;
        out_shape[last] = n;
        Ok(Tensor::from_op(
            out_shape,
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |grad, _out, parents| {
                let (a, b) = (&parents[0], &parents[1]);
                if a.tracked() {
                    // dA = dC . B^T
                    let mut da = vec![0.0; a.numel()];
                    gemm_acc(
                        rows, n, k,
                        grad, n as isize, 1,
                        b.data(), 1, n as isize,
                        0.0,
                        &mut da,
                    );
                    a.accumulate_grad(&da);
                }
                if b.tracked() {
                    // dB = A^T . dC, summed over every flattened row.
                    let mut db = vec![0.0; b.numel()];
                    gemm_acc(
                        k, rows, n,
                        a.data(), 1, k as isize,
                        grad, n as isize, 1,
                        0.0,
                        &mut db,
                    );
                    b.accumulate_grad(&db);
                }
            }),
        ))
    }
}

/// Iterates batch coordinates yielding (flat batch index, a offset, b offset)
/// in units of whole matrices.
fn for_each_batch(batch: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    if batch.is_empty() {
        f(0, 0, 0);
        return;
    }
    for_each_bcast(batch, sa, sb, |flat, oa, ob| f(flat, oa, ob));
}

// ---------------------------------------------------------------------------
// Shape ops
// ---------------------------------------------------------------------------

impl Tensor {
    /// Reinterprets the data with a new shape of equal element count.
    /// Shares storage with the source.
    pub fn reshape(&self, new_shape: &[usize]) -> Result<Tensor> {
        let numel: usize = new_shape.iter().product();
        if numel != self.numel() {
            return Err(SbsgError::Dimension(format!(
                "cannot reshape {:?} (numel {}) to {new_shape:?} (numel {numel})",
                self.shape(),
                self.numel()
            )));
        }
        Ok(Tensor::from_op_shared(
            new_shape.to_vec(),
            self.data_rc(),
            vec![self.clone()],
            Box::new(|grad, _out, parents| {
                if parents[0].tracked() {
                    parents[0].accumulate_grad(grad);
                }
            }),
        ))
    }

    /// Permutes axes, materializing the result in row-major order.
    pub fn permute(&self, axes: &[usize]) -> Result<Tensor> {
        let ndim = self.ndim();
        if axes.len() != ndim || {
            let mut seen = vec![false; ndim];
            axes.iter().any(|&a| a >= ndim || std::mem::replace(&mut seen[a], true))
        } {
            return Err(SbsgError::Dimension(format!(
                "invalid permutation {axes:?} for shape {:?}",
                self.shape()
            )));
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| self.shape()[a]).collect();
        let data = permute_data(self.data(), self.shape(), axes);
        let axes_owned = axes.to_vec();
        Ok(Tensor::from_op(
            out_shape.clone(),
            data,
            vec![self.clone()],
            Box::new(move |grad, _out, parents| {
                if parents[0].tracked() {
                    // Inverse permutation maps the gradient back.
                    let mut inv = vec![0usize; axes_owned.len()];
                    for (i, &a) in axes_owned.iter().enumerate() {
                        inv[a] = i;
                    }
                    let da = permute_data(grad, &out_shape, &inv);
                    parents[0].accumulate_grad(&da);
                }
            }),
        ))
    }

    /// Concatenates tensors along `axis`; all other dimensions must agree.
    pub fn cat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| {
            SbsgError::Dimension("cat needs at least one tensor".into())
        })?;
        if axis >= first.ndim() {
            return Err(SbsgError::Dimension(format!(
                "cat axis {axis} out of range for shape {:?}",
                first.shape()
            )));
        }
        let mut axis_total = 0;
        for p in parts {
            if p.ndim() != first.ndim()
                || p.shape()[..axis] != first.shape()[..axis]
                || p.shape()[axis + 1..] != first.shape()[axis + 1..]
            {
                return Err(SbsgError::Dimension(format!(
                    "cat shapes {:?} and {:?} disagree off axis {axis}",
                    first.shape(),
                    p.shape()
                )));
            }
            axis_total += p.shape()[axis];
        }
        let outer: usize = first.shape()[..axis].iter().product();
        let inner: usize = first.shape()[axis + 1..].iter().product();
        let mut out_shape = first.shape().to_vec();
        out_shape[axis] = axis_total;
        let mut data = vec![0.0; outer * axis_total * inner];
        let mut offset = 0;
        let part_lens: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        for (p, &plen) in parts.iter().zip(&part_lens) {
            let src = p.data();
            for o in 0..outer {
                let dst = (o * axis_total + offset) * inner;
                data[dst..dst + plen * inner]
                    .copy_from_slice(&src[o * plen * inner..(o + 1) * plen * inner]);
            }
            offset += plen;
        }
        let parents: Vec<Tensor> = parts.iter().map(|p| (*p).clone()).collect();
        Ok(Tensor::from_op(
            out_shape,
            data,
            parents,
            Box::new(move |grad, _out, parents| {
                let mut offset = 0;
                for (p, &plen) in parents.iter().zip(&part_lens) {
                    if p.tracked() {
                        let mut dp = vec![0.0; p.numel()];
                        for o in 0..outer {
                            let src = (o * axis_total + offset) * inner;
                            dp[o * plen * inner..(o + 1) * plen * inner]
                                .copy_from_slice(&grad[src..src + plen * inner]);
                        }
                        p.accumulate_grad(&dp);
                    }
                    offset += plen;
                }
            }),
        ))
    }

    /// Slice of length `len` starting at `start` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        if axis >= self.ndim() || start + len > self.shape()[axis] {
            return Err(SbsgError::Dimension(format!(
                "narrow(axis={axis}, start={start}, len={len}) out of range for shape {:?}",
                self.shape()
            )));
        }
        let outer: usize = self.shape()[..axis].iter().product();
        let axis_len = self.shape()[axis];
        let inner: usize = self.shape()[axis + 1..].iter().product();
        let mut out_shape = self.shape().to_vec();
        out_shape[axis] = len;
        let mut data = vec![0.0; outer * len * inner];
        let src = self.data();
        for o in 0..outer {
            let src_base = (o * axis_len + start) * inner;
            let dst_base = o * len * inner;
            data[dst_base..dst_base + len * inner]
                .copy_from_slice(&src[src_base..src_base + len * inner]);
        }
        Ok(Tensor::from_op(
            out_shape,
            data,
            vec![self.clone()],
            Box::new(move |grad, _out, parents| {
                let p = &parents[0];
                if p.tracked() {
                    let mut da = vec![0.0; p.numel()];
                    for o in 0..outer {
                        let dst_base = (o * axis_len + start) * inner;
                        let src_base = o * len * inner;
                        da[dst_base..dst_base + len * inner]
                            .copy_from_slice(&grad[src_base..src_base + len * inner]);
                    }
                    p.accumulate_grad(&da);
                }
            }),
        ))
    }
}

fn permute_data(data: &[f64], shape: &[usize], axes: &[usize]) -> Vec<f64> {
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let in_strides = contiguous_strides(shape);
    // Stride in the input for each output axis.
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let numel: usize = shape.iter().product();
    let mut out = vec![0.0; numel];
    if numel == 0 {
        return out;
    }
    let ndim = out_shape.len();
    let mut coords = vec![0usize; ndim];
    let mut src = 0usize;
    for slot in out.iter_mut() {
        *slot = data[src];
        for d in (0..ndim).rev() {
            coords[d] += 1;
            src += strides[d];
            if coords[d] < out_shape[d] {
                break;
            }
            src -= strides[d] * out_shape[d];
            coords[d] = 0;
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Reductions and normalizations
// ---------------------------------------------------------------------------

/// Decomposes a shape around `axis` into (outer, axis_len, inner).
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Tensor {
    pub fn sum_all(&self) -> Tensor {
        let total: f64 = self.data().iter().sum();
        let numel = self.numel();
        Tensor::from_op(
            vec![1],
            vec![total],
            vec![self.clone()],
            Box::new(move |grad, _out, parents| {
                if parents[0].tracked() {
                    parents[0].accumulate_grad(&vec![grad[0]; numel]);
                }
            }),
        )
    }

    /// Numerically stabilized softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        if axis >= self.ndim() {
            return Err(SbsgError::Dimension(format!(
                "softmax axis {axis} out of range for shape {:?}",
                self.shape()
            )));
        }
        let (outer, len, inner) = axis_split(self.shape(), axis);
        let mut data = self.data().to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut maxv = f64::NEG_INFINITY;
                for j in 0..len {
                    maxv = maxv.max(data[base + j * inner]);
                }
                let mut sum = 0.0;
                for j in 0..len {
                    let e = (data[base + j * inner] - maxv).exp();
                    data[base + j * inner] = e;
                    sum += e;
                }
                for j in 0..len {
                    data[base + j * inner] /= sum;
                }
            }
        }
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |grad, out, parents| {
                if parents[0].tracked() {
                    let mut da = vec![0.0; grad.len()];
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * len * inner + i;
                            let mut dot = 0.0;
                            for j in 0..len {
                                let idx = base + j * inner;
                                dot += grad[idx] * out[idx];
                            }
                            for j in 0..len {
                                let idx = base + j * inner;
                                da[idx] = out[idx] * (grad[idx] - dot);
                            }
                        }
                    }
                    parents[0].accumulate_grad(&da);
                }
            }),
        ))
    }

    /// log(softmax(x)) along `axis`, computed stably.
    pub fn log_softmax(&self, axis: usize) -> Result<Tensor> {
        if axis >= self.ndim() {
            return Err(SbsgError::Dimension(format!(
                "log_softmax axis {axis} out of range for shape {:?}",
                self.shape()
            )));
        }
        let (outer, len, inner) = axis_split(self.shape(), axis);
        let mut data = self.data().to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut maxv = f64::NEG_INFINITY;
                for j in 0..len {
                    maxv = maxv.max(data[base + j * inner]);
                }
                let mut sum = 0.0;
                for j in 0..len {
                    sum += (data[base + j * inner] - maxv).exp();
                }
                let log_z = maxv + sum.ln();
                for j in 0..len {
                    data[base + j * inner] -= log_z;
                }
            }
        }
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |grad, out, parents| {
                if parents[0].tracked() {
                    let mut da = vec![0.0; grad.len()];
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * len * inner + i;
                            let mut gsum = 0.0;
                            for j in 0..len {
                                gsum += grad[base + j * inner];
                            }
                            for j in 0..len {
                                let idx = base + j * inner;
                                da[idx] = grad[idx] - out[idx].exp() * gsum;
                            }
                        }
                    }
                    parents[0].accumulate_grad(&da);
                }
            }),
        ))
    }

    /// Layer normalization over the last dimension followed by an affine
    /// transform: `gain * (x - mean)/sqrt(var + eps) + bias`.
    pub fn layer_norm(&self, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
        let d = *self.shape().last().ok_or_else(|| {
            SbsgError::Dimension("layer_norm requires at least one dimension".into())
        })?;
        if gain.shape() != [d] || bias.shape() != [d] {
            return Err(SbsgError::Dimension(format!(
                "layer_norm parameter shapes {:?}/{:?} do not match last dim {d} of {:?}",
                gain.shape(),
                bias.shape(),
                self.shape()
            )));
        }
        let rows = self.numel() / d;
        let x = self.data();
        let (g, b) = (gain.data(), bias.data());
        let mut data = vec![0.0; self.numel()];
        let mut normed = vec![0.0; self.numel()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = &x[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[r] = inv;
            for j in 0..d {
                let xn = (row[j] - mean) * inv;
                normed[r * d + j] = xn;
                data[r * d + j] = g[j] * xn + b[j];
            }
        }
        let normed = Rc::new(normed);
        let inv_std = Rc::new(inv_std);
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), gain.clone(), bias.clone()],
            Box::new(move |grad, _out, parents| {
                let (x, gain, bias) = (&parents[0], &parents[1], &parents[2]);
                let g = gain.data();
                if x.tracked() {
                    let mut dx = vec![0.0; x.numel()];
                    for r in 0..rows {
                        let inv = inv_std[r];
                        let base = r * d;
                        let mut mean_dxn = 0.0;
                        let mut mean_dxn_xn = 0.0;
                        for j in 0..d {
                            let dxn = grad[base + j] * g[j];
                            mean_dxn += dxn;
                            mean_dxn_xn += dxn * normed[base + j];
                        }
                        mean_dxn /= d as f64;
                        mean_dxn_xn /= d as f64;
                        for j in 0..d {
                            let dxn = grad[base + j] * g[j];
                            dx[base + j] =
                                inv * (dxn - mean_dxn - normed[base + j] * mean_dxn_xn);
                        }
                    }
                    x.accumulate_grad(&dx);
                }
                if gain.tracked() {
                    let mut dg = vec![0.0; d];
                    for r in 0..rows {
                        for j in 0..d {
                            dg[j] += grad[r * d + j] * normed[r * d + j];
                        }
                    }
                    gain.accumulate_grad(&dg);
                }
                if bias.tracked() {
                    let mut db = vec![0.0; d];
                    for r in 0..rows {
                        for j in 0..d {
                            db[j] += grad[r * d + j];
                        }
                    }
                    bias.accumulate_grad(&db);
                }
            }),
        ))
    }

    /// Row gather: `table[V, d]` indexed by `ids` produces
    /// `[ids-shape..., d]`. Gradient scatters back into the table.
    pub fn embedding(table: &Tensor, ids: &[u32], ids_shape: &[usize]) -> Result<Tensor> {
        if table.ndim() != 2 {
            return Err(SbsgError::Dimension(format!(
                "embedding table must be 2-d, got {:?}",
                table.shape()
            )));
        }
        let count: usize = ids_shape.iter().product();
        if ids.len() != count {
            return Err(SbsgError::Dimension(format!(
                "id count {} does not match shape {ids_shape:?}",
                ids.len()
            )));
        }
        let (v, d) = (table.shape()[0], table.shape()[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i as usize >= v) {
            return Err(SbsgError::Vocab(format!(
                "token id {bad} out of range for vocabulary of size {v}"
            )));
        }
        let src = table.data();
        let mut data = vec![0.0; count * d];
        for (row, &id) in ids.iter().enumerate() {
            data[row * d..(row + 1) * d]
                .copy_from_slice(&src[id as usize * d..(id as usize + 1) * d]);
        }
        let mut out_shape = ids_shape.to_vec();
        out_shape.push(d);
        let ids_owned: Rc<Vec<u32>> = Rc::new(ids.to_vec());
        Ok(Tensor::from_op(
            out_shape,
            data,
            vec![table.clone()],
            Box::new(move |grad, _out, parents| {
                let table = &parents[0];
                if table.tracked() {
                    let mut dt = vec![0.0; table.numel()];
                    for (row, &id) in ids_owned.iter().enumerate() {
                        let dst = &mut dt[id as usize * d..(id as usize + 1) * d];
                        for (s, gv) in dst.iter_mut().zip(&grad[row * d..(row + 1) * d]) {
                            *s += gv;
                        }
                    }
                    table.accumulate_grad(&dt);
                }
            }),
        ))
    }
}
