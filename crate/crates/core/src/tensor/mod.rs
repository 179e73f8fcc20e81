//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! Values are immutable, row-major, and cheap to clone (`Arc` payload).
//! Differentiation is tape-based: a [`Tape`] records every operation whose
//! inputs include a watched tensor, and [`Tape::backward`] replays the record
//! in reverse. Untraced operations skip recording entirely, so the same
//! forward code serves training and inference.

mod fd;
mod tape;

pub use fd::{finite_diff_grad, max_rel_err, rel_err};
pub use tape::{GradientMap, Tape};

use std::sync::Arc;

use crate::error::{Error, Result};

/// Identifies a node on a specific tape. The `tape` field is a process-unique
/// tape serial so that tensors recorded on a dropped/foreign tape are caught
/// instead of silently aliasing node indices.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TapeId {
    pub(crate) tape: u64,
    pub(crate) node: usize,
}

/// Immutable dense tensor. Scalars use the empty shape `[]`.
#[derive(Clone, Debug)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    requires_grad: bool,
    tape_id: Option<TapeId>,
}

impl Tensor {
    /// Build a tensor from a flat row-major buffer.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::InvalidShape {
                op: "tensor.new",
                shape,
                detail: format!("buffer holds {} elements", data.len()),
            });
        }
        Ok(Tensor {
            shape,
            data: Arc::new(data),
            requires_grad: false,
            tape_id: None,
        })
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![],
            data: Arc::new(vec![v]),
            requires_grad: false,
            tape_id: None,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new(vec![0.0; numel]),
            requires_grad: false,
            tape_id: None,
        }
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new(vec![v; numel]),
            requires_grad: false,
            tape_id: None,
        }
    }

    /// Identity matrix of side `n`.
    pub fn eye(n: usize) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Tensor::new(vec![n, n], data).expect("square buffer")
    }

    /// 2-D tensor from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(Error::InvalidShape {
                    op: "tensor.from_rows",
                    shape: vec![r, row.len()],
                    detail: format!("ragged rows: expected width {c}"),
                });
            }
            data.extend_from_slice(row);
        }
        Tensor::new(vec![r, c], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn tape_id(&self) -> Option<TapeId> {
        self.tape_id
    }

    pub fn is_scalar(&self) -> bool {
        self.shape.is_empty()
    }

    /// Extract the value of a scalar tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() == 1 {
            Ok(self.data[0])
        } else {
            Err(Error::InvalidShape {
                op: "tensor.item",
                shape: self.shape.clone(),
                detail: "expected a single element".into(),
            })
        }
    }

    /// Rows of a 2-D tensor (or 1 for 1-D/scalar).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[0],
            _ => 1,
        }
    }

    /// Trailing dimension (width for 2-D, length for 1-D, 1 for scalar).
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Element of a 2-D tensor. Debug-checked indexing; hot paths index the
    /// flat buffer directly.
    pub fn at(&self, i: usize, j: usize) -> f64 {
        debug_assert_eq!(self.shape.len(), 2);
        self.data[i * self.shape[1] + j]
    }

    /// Copy of row `i` of a 2-D tensor as a 1-D tensor.
    pub fn row(&self, i: usize) -> Result<Tensor> {
        let (r, c) = self.dims2("tensor.row")?;
        if i >= r {
            return Err(Error::contract(
                "tensor.row",
                format!("row {i} out of range for {r} rows"),
            ));
        }
        Tensor::new(vec![c], self.data[i * c..(i + 1) * c].to_vec())
    }

    /// Same values, no tape linkage, no gradient request.
    pub fn detach(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::clone(&self.data),
            requires_grad: false,
            tape_id: None,
        }
    }

    /// Same buffer under a new shape with identical element count.
    pub fn reshaped(&self, shape: &[usize]) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::InvalidShape {
                op: "tensor.reshape",
                shape: shape.to_vec(),
                detail: format!("cannot hold {} elements", self.data.len()),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Arc::clone(&self.data),
            requires_grad: self.requires_grad,
            tape_id: None,
        })
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            _ => Err(Error::InvalidShape {
                op,
                shape: self.shape.clone(),
                detail: "expected a 2-D tensor".into(),
            }),
        }
    }

    pub(crate) fn traced(mut self, id: TapeId, requires_grad: bool) -> Tensor {
        self.tape_id = Some(id);
        self.requires_grad = requires_grad;
        self
    }

    // ---- value-level arithmetic (no tape participation) ----

    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        vc_matmul(self, rhs)
    }

    pub fn transpose(&self) -> Result<Tensor> {
        vc_transpose(self)
    }

    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        vc_zip(self, rhs, "add", |a, b| a + b)
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        vc_zip(self, rhs, "sub", |a, b| a - b)
    }

    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        vc_zip(self, rhs, "mul", |a, b| a * b)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        let data = self.data.iter().map(|v| v * c).collect();
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(data),
            requires_grad: false,
            tape_id: None,
        }
    }

    pub fn sum_all(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn softmax_rows(&self) -> Result<Tensor> {
        vc_softmax_rows(self)
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Tensor> {
        vc_mean_axis(self, axis)
    }

    pub fn pairwise_sqdist(&self, rhs: &Tensor) -> Result<Tensor> {
        vc_pairwise_sqdist(self, rhs)
    }

    /// Stack 1-D tensors of equal length into a 2-D tensor.
    pub fn stack_rows(rows: &[Tensor]) -> Result<Tensor> {
        vc_stack_rows(rows)
    }
}

impl PartialEq for Tensor {
    /// Bitwise value equality (shape and payload); tape linkage is ignored.
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

// ---- shared compute kernels ----
//
// Value semantics (shape checks included); the tape ops call these and then
// record. Backward passes reuse the raw loops below on flat slices.

pub(crate) fn k_matmul(a: &[f64], m: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

pub(crate) fn k_transpose(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

pub(crate) fn vc_matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, ka) = a.dims2("matmul")?;
    let (kb, n) = b.dims2("matmul")?;
    if ka != kb {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    Tensor::new(vec![m, n], k_matmul(&a.data, m, ka, &b.data, n))
}

pub(crate) fn vc_transpose(a: &Tensor) -> Result<Tensor> {
    let (m, n) = a.dims2("transpose")?;
    Tensor::new(vec![n, m], k_transpose(&a.data, m, n))
}

pub(crate) fn vc_zip(
    a: &Tensor,
    b: &Tensor,
    op: &'static str,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    if a.shape != b.shape {
        return Err(Error::ShapeMismatch {
            op,
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let data = a
        .data
        .iter()
        .zip(b.data.iter())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::new(a.shape.clone(), data)
}

/// Broadcast-add a length-`n` row vector to every row of an `m x n` matrix.
pub(crate) fn vc_add_row(a: &Tensor, row: &Tensor) -> Result<Tensor> {
    let (m, n) = a.dims2("add_row")?;
    if row.numel() != n || row.ndim() > 2 {
        return Err(Error::ShapeMismatch {
            op: "add_row",
            lhs: a.shape.clone(),
            rhs: row.shape.clone(),
        });
    }
    let mut data = Vec::with_capacity(m * n);
    for i in 0..m {
        for j in 0..n {
            data.push(a.data[i * n + j] + row.data[j]);
        }
    }
    Tensor::new(vec![m, n], data)
}

/// Multiply column `j` of an `m x n` matrix by `s[j]`.
pub(crate) fn vc_scale_cols(a: &Tensor, s: &Tensor) -> Result<Tensor> {
    let (m, n) = a.dims2("scale_cols")?;
    if s.numel() != n || s.ndim() > 2 {
        return Err(Error::ShapeMismatch {
            op: "scale_cols",
            lhs: a.shape.clone(),
            rhs: s.shape.clone(),
        });
    }
    let mut data = Vec::with_capacity(m * n);
    for i in 0..m {
        for j in 0..n {
            data.push(a.data[i * n + j] * s.data[j]);
        }
    }
    Tensor::new(vec![m, n], data)
}

pub(crate) fn vc_softmax_rows(a: &Tensor) -> Result<Tensor> {
    let (m, n) = a.dims2("softmax_rows")?;
    if n == 0 {
        return Err(Error::InvalidShape {
            op: "softmax_rows",
            shape: a.shape.clone(),
            detail: "rows must be non-empty".into(),
        });
    }
    if !a.all_finite() {
        return Err(Error::numeric("softmax_rows", "non-finite input entry"));
    }
    let mut data = vec![0.0; m * n];
    for i in 0..m {
        let row = &a.data[i * n..(i + 1) * n];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let out = &mut data[i * n..(i + 1) * n];
        let mut sum = 0.0;
        for (o, &x) in out.iter_mut().zip(row) {
            let e = (x - max).exp();
            *o = e;
            sum += e;
        }
        for o in out.iter_mut() {
            *o /= sum;
        }
    }
    Tensor::new(vec![m, n], data)
}

/// Row-wise layer normalization. Returns `(out, xhat, inv_std)`; the extra
/// buffers feed the backward pass.
pub(crate) fn vc_layer_norm(
    a: &Tensor,
    gain: &Tensor,
    bias: &Tensor,
    eps: f64,
) -> Result<(Tensor, Vec<f64>, Vec<f64>)> {
    let (m, n) = a.dims2("layer_norm")?;
    if gain.numel() != n {
        return Err(Error::ShapeMismatch {
            op: "layer_norm",
            lhs: a.shape.clone(),
            rhs: gain.shape.clone(),
        });
    }
    if bias.numel() != n {
        return Err(Error::ShapeMismatch {
            op: "layer_norm",
            lhs: a.shape.clone(),
            rhs: bias.shape.clone(),
        });
    }
    if !(eps > 0.0) {
        return Err(Error::contract("layer_norm", format!("eps must be > 0, got {eps}")));
    }
    let mut out = vec![0.0; m * n];
    let mut xhat = vec![0.0; m * n];
    let mut inv_std = vec![0.0; m];
    for i in 0..m {
        let row = &a.data[i * n..(i + 1) * n];
        let mean = row.iter().sum::<f64>() / n as f64;
        let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
        let istd = 1.0 / (var + eps).sqrt();
        inv_std[i] = istd;
        for j in 0..n {
            let xh = (row[j] - mean) * istd;
            xhat[i * n + j] = xh;
            out[i * n + j] = gain.data[j] * xh + bias.data[j];
        }
    }
    Ok((Tensor::new(vec![m, n], out)?, xhat, inv_std))
}

const GELU_C: f64 = 0.044715;

pub(crate) fn gelu_scalar(x: f64) -> f64 {
    // tanh approximation of x * Phi(x)
    let s = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (s * (x + GELU_C * x * x * x)).tanh())
}

pub(crate) fn gelu_grad_scalar(x: f64) -> f64 {
    let s = (2.0 / std::f64::consts::PI).sqrt();
    let u = s * (x + GELU_C * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * s * (1.0 + 3.0 * GELU_C * x * x)
}

pub(crate) fn vc_gelu(a: &Tensor) -> Result<Tensor> {
    let data = a.data.iter().map(|&x| gelu_scalar(x)).collect();
    Tensor::new(a.shape.clone(), data)
}

pub(crate) fn vc_mean_axis(a: &Tensor, axis: usize) -> Result<Tensor> {
    let (m, n) = a.dims2("mean_axis")?;
    match axis {
        0 => {
            if m == 0 {
                return Err(Error::contract("mean_axis", "mean over zero rows"));
            }
            let mut out = vec![0.0; n];
            for i in 0..m {
                for j in 0..n {
                    out[j] += a.data[i * n + j];
                }
            }
            for o in out.iter_mut() {
                *o /= m as f64;
            }
            Tensor::new(vec![1, n], out)
        }
        1 => {
            if n == 0 {
                return Err(Error::contract("mean_axis", "mean over zero columns"));
            }
            let mut out = vec![0.0; m];
            for i in 0..m {
                out[i] = a.data[i * n..(i + 1) * n].iter().sum::<f64>() / n as f64;
            }
            Tensor::new(vec![m, 1], out)
        }
        _ => Err(Error::contract("mean_axis", format!("axis {axis} out of range"))),
    }
}

/// Squared Euclidean distances between rows of `a` (m x d) and rows of `b`
/// (n x d), expanded as |a|^2 - 2 a.b + |b|^2 with a non-negativity clamp.
pub(crate) fn vc_pairwise_sqdist(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, da) = a.dims2("pairwise_sqdist")?;
    let (n, db) = b.dims2("pairwise_sqdist")?;
    if da != db {
        return Err(Error::ShapeMismatch {
            op: "pairwise_sqdist",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let ar = &a.data[i * da..(i + 1) * da];
        for j in 0..n {
            let br = &b.data[j * da..(j + 1) * da];
            let mut acc = 0.0;
            for (x, y) in ar.iter().zip(br) {
                let d = x - y;
                acc += d * d;
            }
            out[i * n + j] = acc;
        }
    }
    Tensor::new(vec![m, n], out)
}

pub(crate) fn vc_concat_cols(parts: &[&Tensor]) -> Result<Tensor> {
    if parts.is_empty() {
        return Err(Error::contract("concat_cols", "no parts given"));
    }
    let (m, _) = parts[0].dims2("concat_cols")?;
    let mut widths = Vec::with_capacity(parts.len());
    for p in parts {
        let (pm, pn) = p.dims2("concat_cols")?;
        if pm != m {
            return Err(Error::ShapeMismatch {
                op: "concat_cols",
                lhs: parts[0].shape.clone(),
                rhs: p.shape.clone(),
            });
        }
        widths.push(pn);
    }
    let total: usize = widths.iter().sum();
    let mut data = Vec::with_capacity(m * total);
    for i in 0..m {
        for (p, &w) in parts.iter().zip(&widths) {
            data.extend_from_slice(&p.data[i * w..(i + 1) * w]);
        }
    }
    Tensor::new(vec![m, total], data)
}

pub(crate) fn vc_stack_rows(rows: &[Tensor]) -> Result<Tensor> {
    if rows.is_empty() {
        return Err(Error::contract("stack_rows", "no rows given"));
    }
    let d = rows[0].numel();
    let mut data = Vec::with_capacity(rows.len() * d);
    for r in rows {
        if r.ndim() > 1 && !(r.ndim() == 2 && r.shape[0] == 1) {
            return Err(Error::InvalidShape {
                op: "stack_rows",
                shape: r.shape.clone(),
                detail: "rows must be 1-D (or 1 x n)".into(),
            });
        }
        if r.numel() != d {
            return Err(Error::ShapeMismatch {
                op: "stack_rows",
                lhs: vec![d],
                rhs: r.shape.clone(),
            });
        }
        data.extend_from_slice(&r.data);
    }
    Tensor::new(vec![rows.len(), d], data)
}

/// Mean of the rows of `a` that share a group index: `out[g] = mean_{i: groups[i]=g} a[i]`.
/// Every group in `0..n_groups` must be populated.
pub(crate) fn vc_group_mean_rows(a: &Tensor, groups: &[usize], n_groups: usize) -> Result<Tensor> {
    let (m, d) = a.dims2("group_mean_rows")?;
    if groups.len() != m {
        return Err(Error::contract(
            "group_mean_rows",
            format!("{} group indices for {} rows", groups.len(), m),
        ));
    }
    let mut out = vec![0.0; n_groups * d];
    let mut counts = vec![0usize; n_groups];
    for (i, &g) in groups.iter().enumerate() {
        if g >= n_groups {
            return Err(Error::contract(
                "group_mean_rows",
                format!("group index {g} out of range for {n_groups} groups"),
            ));
        }
        counts[g] += 1;
        for j in 0..d {
            out[g * d + j] += a.data[i * d + j];
        }
    }
    for (g, &c) in counts.iter().enumerate() {
        if c == 0 {
            return Err(Error::contract(
                "group_mean_rows",
                format!("group {g} has no rows"),
            ));
        }
        for j in 0..d {
            out[g * d + j] /= c as f64;
        }
    }
    Tensor::new(vec![n_groups, d], out)
}

/// Probability floor used inside cross-entropy so that log stays finite.
pub(crate) const CE_FLOOR: f64 = 1e-300;

/// Mean cross-entropy between probability rows and target distribution rows.
/// Each target row must be non-negative and sum to 1 within 1e-6.
pub(crate) fn vc_cross_entropy(probs: &Tensor, targets: &Tensor) -> Result<Tensor> {
    let (m, n) = probs.dims2("cross_entropy")?;
    let (tm, tn) = targets.dims2("cross_entropy")?;
    if (m, n) != (tm, tn) {
        return Err(Error::ShapeMismatch {
            op: "cross_entropy",
            lhs: probs.shape.clone(),
            rhs: targets.shape.clone(),
        });
    }
    if m == 0 {
        return Err(Error::contract("cross_entropy", "no rows"));
    }
    let mut total = 0.0;
    for i in 0..m {
        let trow = &targets.data[i * n..(i + 1) * n];
        let sum: f64 = trow.iter().sum();
        if trow.iter().any(|&t| t < 0.0) || (sum - 1.0).abs() > 1e-6 {
            return Err(Error::contract(
                "cross_entropy",
                format!("target row {i} is not a distribution (sum {sum})"),
            ));
        }
        for j in 0..n {
            let t = trow[j];
            if t != 0.0 {
                total -= t * probs.data[i * n + j].max(CE_FLOOR).ln();
            }
        }
    }
    Ok(Tensor::scalar(total / m as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_t(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn new_rejects_mismatched_buffer() {
        let err = Tensor::new(vec![2, 3], vec![1.0; 5]).unwrap_err();
        assert!(err.to_string().contains("[2, 3]"));
    }

    #[test]
    fn matmul_identity_preserves_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = rand_t(&[4, 4], &mut rng);
        let out = Tensor::eye(4).matmul(&a).unwrap();
        assert_eq!(out, a.detach());
    }

    #[test]
    fn matmul_row_times_column() {
        let a = Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::new(vec![2, 1], vec![3.0, 4.0]).unwrap();
        let out = a.matmul(&b).unwrap();
        assert_eq!(out.shape(), &[1, 1]);
        assert_eq!(out.data()[0], 11.0);
    }

    #[test]
    fn matmul_matches_naive_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let a = rand_t(&[3, 4], &mut rng);
        let b = rand_t(&[4, 2], &mut rng);
        let out = a.matmul(&b).unwrap();
        // independently ordered reference: j outer, explicit indexing
        for j in 0..2 {
            for i in 0..3 {
                let mut s = 0.0;
                for k in 0..4 {
                    s += a.at(i, k) * b.at(k, j);
                }
                assert!((out.at(i, j) - s).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[4, 2]);
        match a.matmul(&b).unwrap_err() {
            Error::ShapeMismatch { lhs, rhs, .. } => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![4, 2]);
            }
            other => panic!("unexpected error: {other}"),
        }
    }

    #[test]
    fn matmul_is_associative_within_tolerance() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..20 {
            let a = rand_t(&[4, 4], &mut rng);
            let b = rand_t(&[4, 4], &mut rng);
            let c = rand_t(&[4, 4], &mut rng);
            let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
            let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
            for (x, y) in left.data().iter().zip(right.data()) {
                assert!((x - y).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn softmax_uniform_inputs() {
        let z = Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap();
        assert_eq!(z.softmax_rows().unwrap().data(), &[0.5, 0.5]);

        // large equal logits must not overflow
        let big = Tensor::new(vec![1, 3], vec![1000.0, 1000.0, 1000.0]).unwrap();
        for &p in big.softmax_rows().unwrap().data() {
            assert!((p - 1.0 / 3.0).abs() <= 1e-15);
        }
    }

    #[test]
    fn softmax_matches_high_precision_reference() {
        let z = Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let p = z.softmax_rows().unwrap();
        let expect = [
            0.090030573170380457998,
            0.24472847105479765247,
            0.66524095577482188953,
        ];
        for (a, b) in p.data().iter().zip(expect) {
            assert!((a - b).abs() <= 1e-15, "{a} vs {b}");
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        for _ in 0..50 {
            let scale = 10f64.powi(rng.random_range(0..7));
            let z = rand_t(&[5, 7], &mut rng).scale(scale);
            let p = z.softmax_rows().unwrap();
            for i in 0..5 {
                let s: f64 = p.data()[i * 7..(i + 1) * 7].iter().sum();
                assert!((s - 1.0).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn softmax_rejects_nan() {
        let z = Tensor::new(vec![1, 2], vec![f64::NAN, 0.0]).unwrap();
        assert!(matches!(z.softmax_rows(), Err(Error::Numeric { .. })));
    }

    #[test]
    fn layer_norm_constant_row_is_all_bias() {
        let x = Tensor::new(vec![1, 4], vec![5.0; 4]).unwrap();
        let g = Tensor::full(&[4], 1.0);
        let b = Tensor::zeros(&[4]);
        let (out, _, _) = vc_layer_norm(&x, &g, &b, 1e-5).unwrap();
        assert_eq!(out.data(), &[0.0; 4]);
    }

    #[test]
    fn layer_norm_two_point_row() {
        let x = Tensor::new(vec![1, 2], vec![1.0, 3.0]).unwrap();
        let g = Tensor::full(&[2], 1.0);
        let b = Tensor::zeros(&[2]);
        let (out, _, _) = vc_layer_norm(&x, &g, &b, 1e-12).unwrap();
        assert!((out.data()[0] - -0.9999999999995).abs() <= 1e-9);
        assert!((out.data()[1] - 0.9999999999995).abs() <= 1e-9);
    }

    #[test]
    fn layer_norm_standardizes_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let x = rand_t(&[6, 9], &mut rng).scale(3.0);
        let g = Tensor::full(&[9], 1.0);
        let b = Tensor::zeros(&[9]);
        let (out, _, _) = vc_layer_norm(&x, &g, &b, 1e-12).unwrap();
        for i in 0..6 {
            let row = &out.data()[i * 9..(i + 1) * 9];
            // two-pass oracle on the output row
            let mean = row.iter().sum::<f64>() / 9.0;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / 9.0;
            assert!(mean.abs() <= 1e-9);
            assert!((var - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn layer_norm_requires_positive_eps() {
        let x = Tensor::zeros(&[1, 2]);
        let g = Tensor::full(&[2], 1.0);
        let b = Tensor::zeros(&[2]);
        assert!(vc_layer_norm(&x, &g, &b, 0.0).is_err());
    }

    #[test]
    fn cross_entropy_perfect_one_hot_is_zero() {
        let p = Tensor::new(vec![1, 3], vec![0.0, 1.0, 0.0]).unwrap();
        let t = Tensor::new(vec![1, 3], vec![0.0, 1.0, 0.0]).unwrap();
        assert_eq!(vc_cross_entropy(&p, &t).unwrap().item().unwrap(), 0.0);
    }

    #[test]
    fn cross_entropy_uniform_four_way() {
        let p = Tensor::full(&[1, 4], 0.25);
        let t = Tensor::new(vec![1, 4], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let ce = vc_cross_entropy(&p, &t).unwrap().item().unwrap();
        assert!((ce - 1.3862943611198906188).abs() <= 1e-12);
    }

    #[test]
    fn cross_entropy_is_linear_in_the_target() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let logits = rand_t(&[1, 5], &mut rng);
        let p = logits.softmax_rows().unwrap();
        let yi = Tensor::new(vec![1, 5], vec![1.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let yj = Tensor::new(vec![1, 5], vec![0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        let lam = 0.3;
        let mixed = yi.scale(lam).add(&yj.scale(1.0 - lam)).unwrap();
        let ce_mix = vc_cross_entropy(&p, &mixed).unwrap().item().unwrap();
        let ce_i = vc_cross_entropy(&p, &yi).unwrap().item().unwrap();
        let ce_j = vc_cross_entropy(&p, &yj).unwrap().item().unwrap();
        assert!((ce_mix - (lam * ce_i + (1.0 - lam) * ce_j)).abs() <= 1e-12);
    }

    #[test]
    fn cross_entropy_rejects_non_distribution_target() {
        let p = Tensor::full(&[1, 2], 0.5);
        let t = Tensor::new(vec![1, 2], vec![0.9, 0.3]).unwrap();
        assert!(matches!(
            vc_cross_entropy(&p, &t),
            Err(Error::Contract { .. })
        ));
    }

    #[test]
    fn pairwise_sqdist_matches_direct_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let a = rand_t(&[5, 3], &mut rng);
        let b = rand_t(&[4, 3], &mut rng);
        let d = a.pairwise_sqdist(&b).unwrap();
        for i in 0..5 {
            for j in 0..4 {
                let mut s = 0.0;
                for t in 0..3 {
                    s += (a.at(i, t) - b.at(j, t)).powi(2);
                }
                assert!((d.at(i, j) - s).abs() <= 1e-12);
            }
        }
        // distance to itself is exactly zero
        let dd = a.pairwise_sqdist(&a).unwrap();
        for i in 0..5 {
            assert_eq!(dd.at(i, i), 0.0);
        }
    }

    #[test]
    fn group_mean_rows_averages_per_group() {
        let a = Tensor::from_rows(&[
            vec![1.0, 2.0],
            vec![3.0, 4.0],
            vec![10.0, 20.0],
        ])
        .unwrap();
        let out = vc_group_mean_rows(&a, &[0, 0, 1], 2).unwrap();
        assert_eq!(out.data(), &[2.0, 3.0, 10.0, 20.0]);
    }

    #[test]
    fn group_mean_rows_rejects_empty_group() {
        let a = Tensor::zeros(&[2, 2]);
        assert!(vc_group_mean_rows(&a, &[0, 0], 2).is_err());
    }

    #[test]
    fn transpose_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let a = rand_t(&[3, 5], &mut rng);
        let back = a.transpose().unwrap().transpose().unwrap();
        assert_eq!(a.detach(), back);
    }

    #[test]
    fn mean_axis_both_axes() {
        let a = Tensor::from_rows(&[vec![1.0, 3.0], vec![5.0, 7.0]]).unwrap();
        assert_eq!(a.mean_axis(0).unwrap().data(), &[3.0, 5.0]);
        assert_eq!(a.mean_axis(1).unwrap().data(), &[2.0, 6.0]);
    }

    #[test]
    fn row_broadcast_and_column_scaling() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let r = Tensor::new(vec![2], vec![10.0, 20.0]).unwrap();
        assert_eq!(vc_add_row(&a, &r).unwrap().data(), &[11.0, 22.0, 13.0, 24.0]);
        assert_eq!(vc_scale_cols(&a, &r).unwrap().data(), &[10.0, 40.0, 30.0, 80.0]);
    }

    #[test]
    fn gelu_fixed_points() {
        assert_eq!(gelu_scalar(0.0), 0.0);
        assert!((gelu_scalar(10.0) - 10.0).abs() <= 1e-9);
        assert!(gelu_scalar(-10.0).abs() <= 1e-9);
        // frozen references for the tanh form
        assert!((gelu_scalar(1.0) - 0.84119199060827670478).abs() <= 1e-15);
        assert!((gelu_scalar(-1.0) - -0.15880800939172329522).abs() <= 1e-15);
        assert!((gelu_scalar(0.5) - 0.34571400982514392204).abs() <= 1e-15);
    }

    #[test]
    fn stack_and_concat() {
        let r1 = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let r2 = Tensor::new(vec![2], vec![3.0, 4.0]).unwrap();
        let m = Tensor::stack_rows(&[r1, r2]).unwrap();
        assert_eq!(m.shape(), &[2, 2]);
        let c = vc_concat_cols(&[&m, &m]).unwrap();
        assert_eq!(c.shape(), &[2, 4]);
        assert_eq!(c.data(), &[1.0, 2.0, 1.0, 2.0, 3.0, 4.0, 3.0, 4.0]);
    }

    #[test]
    fn scalar_shape_is_empty() {
        let s = Tensor::scalar(2.5);
        assert!(s.is_scalar());
        assert_eq!(s.numel(), 1);
        assert_eq!(s.item().unwrap(), 2.5);
    }
}
