//! Recording tape for reverse-mode differentiation.
//!
//! A tape lives for one optimization step: watch the trainable tensors,
//! run the forward pass through the tape's op methods, call `backward`
//! on the scalar loss, and drop the tape. Ops whose inputs are all
//! untraced compute values without recording, so frozen parts of a model
//! cost no tape memory.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};

use super::{
    gelu_grad_scalar, vc_add_row, vc_concat_cols, vc_cross_entropy, vc_gelu, vc_group_mean_rows,
    vc_layer_norm, vc_matmul, vc_mean_axis, vc_pairwise_sqdist, vc_scale_cols, vc_softmax_rows,
    vc_stack_rows, vc_transpose, vc_zip, Tensor, TapeId, CE_FLOOR,
};

static TAPE_SERIAL: AtomicU64 = AtomicU64::new(1);

/// One recorded input: the producing node (if traced) and a value snapshot
/// captured at record time. Snapshots share the tensor's buffer, so they are
/// cheap and immune to later mutation by construction (tensors are immutable).
#[derive(Clone)]
struct Arg {
    node: Option<usize>,
    value: Tensor,
}

enum Op {
    Leaf,
    Matmul { a: Arg, b: Arg },
    Transpose { a: Arg },
    Add { a: Arg, b: Arg },
    Sub { a: Arg, b: Arg },
    Mul { a: Arg, b: Arg },
    Scale { a: Arg, c: f64 },
    AddScalar { a: Arg },
    AddRow { a: Arg, row: Arg },
    ScaleCols { a: Arg, s: Arg },
    SoftmaxRows { a: Arg, out: Tensor },
    LayerNorm { a: Arg, gain: Arg, bias: Arg, xhat: Vec<f64>, inv_std: Vec<f64> },
    Gelu { a: Arg },
    MeanAxis { a: Arg, axis: usize },
    Sum { a: Arg },
    ConcatCols { parts: Vec<Arg> },
    StackRows { parts: Vec<Arg> },
    Reshape { a: Arg },
    PairwiseSqdist { a: Arg, b: Arg },
    GroupMeanRows { a: Arg, groups: Vec<usize>, counts: Vec<usize> },
    CrossEntropy { probs: Arg, targets: Tensor },
}

struct Node {
    op: Op,
    shape: Vec<usize>,
}

pub struct Tape {
    uid: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            uid: TAPE_SERIAL.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Register `t` as a differentiation target. The returned tensor carries
    /// the tape linkage; the original is untouched.
    pub fn watch(&mut self, t: &Tensor) -> Tensor {
        let node = self.nodes.len();
        self.nodes.push(Node {
            op: Op::Leaf,
            shape: t.shape().to_vec(),
        });
        t.detach().traced(TapeId { tape: self.uid, node }, true)
    }

    fn arg(&self, t: &Tensor, op: &'static str) -> Result<Arg> {
        match t.tape_id() {
            Some(id) if id.tape != self.uid => Err(Error::contract(
                op,
                "input tensor was recorded on a different tape",
            )),
            id => Ok(Arg {
                node: id.map(|i| i.node),
                value: t.detach(),
            }),
        }
    }

    /// Record `op` if any argument is traced; otherwise return the bare value.
    fn emit(&mut self, traced: bool, op: Op, out: Tensor) -> Tensor {
        if !traced {
            return out;
        }
        let node = self.nodes.len();
        let shape = out.shape().to_vec();
        self.nodes.push(Node { op, shape });
        out.traced(TapeId { tape: self.uid, node }, true)
    }

    pub fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let out = vc_matmul(a, b)?;
        let (a, b) = (self.arg(a, "matmul")?, self.arg(b, "matmul")?);
        let traced = a.node.is_some() || b.node.is_some();
        Ok(self.emit(traced, Op::Matmul { a, b }, out))
    }

    pub fn transpose(&mut self, a: &Tensor) -> Result<Tensor> {
        let out = vc_transpose(a)?;
        let a = self.arg(a, "transpose")?;
        let traced = a.node.is_some();
        Ok(self.emit(traced, Op::Transpose { a }, out))
    }

    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let out = vc_zip(a, b, "add", |x, y| x + y)?;
        let (a, b) = (self.arg(a, "add")?, self.arg(b, "add")?);
        let traced = a.node.is_some() || b.node.is_some();
        Ok(self.emit(traced, Op::Add { a, b }, out))
    }

    pub fn sub(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let out = vc_zip(a, b, "sub", |x, y| x - y)?;
        let (a, b) = (self.arg(a, "sub")?, self.arg(b, "sub")?);
        let traced = a.node.is_some() || b.node.is_some();
        Ok(self.emit(traced, Op::Sub { a, b }, out))
    }

    pub fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let out = vc_zip(a, b, "mul", |x, y| x * y)?;
        let (a, b) = (self.arg(a, "mul")?, self.arg(b, "mul")?);
        let traced = a.node.is_some() || b.node.is_some();
        Ok(self.emit(traced, Op::Mul { a, b }, out))
    }

    pub fn scale(&mut self, a: &Tensor, c: f64) -> Result<Tensor> {
        let out = a.scale(c);
        let a = self.arg(a, "scale")?;
        let traced = a.node.is_some();
        Ok(self.emit(traced, Op::Scale { a, c }, out))
    }

    pub fn add_scalar(&mut self, a: &Tensor, c: f64) -> Result<Tensor> {
        let out = Tensor::new(a.shape().to_vec(), a.data().iter().map(|v| v + c).collect())?;
        let a = self.arg(a, "add_scalar")?;
        let traced = a.node.is_some();
        Ok(self.emit(traced, Op::AddScalar { a }, out))
    }

    pub fn add_row(&mut self, a: &Tensor, row: &Tensor) -> Result<Tensor> {
        let out = vc_add_row(a, row)?;
        let (a, row) = (self.arg(a, "add_row")?, self.arg(row, "add_row")?);
        let traced = a.node.is_some() || row.node.is_some();
        Ok(self.emit(traced, Op::AddRow { a, row }, out))
    }

    pub fn scale_cols(&mut self, a: &Tensor, s: &Tensor) -> Result<Tensor> {
        let out = vc_scale_cols(a, s)?;
        let (a, s) = (self.arg(a, "scale_cols")?, self.arg(s, "scale_cols")?);
        let traced = a.node.is_some() || s.node.is_some();
        Ok(self.emit(traced, Op::ScaleCols { a, s }, out))
    }

    pub fn softmax_rows(&mut self, a: &Tensor) -> Result<Tensor> {
        let out = vc_softmax_rows(a)?;
        let a = self.arg(a, "softmax_rows")?;
        let traced = a.node.is_some();
        let snapshot = out.detach();
        Ok(self.emit(traced, Op::SoftmaxRows { a, out: snapshot }, out))
    }

    pub fn layer_norm(&mut self, a: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
        let (out, xhat, inv_std) = vc_layer_norm(a, gain, bias, eps)?;
        let (a, gain, bias) = (
            self.arg(a, "layer_norm")?,
            self.arg(gain, "layer_norm")?,
            self.arg(bias, "layer_norm")?,
        );
        let traced = a.node.is_some() || gain.node.is_some() || bias.node.is_some();
        Ok(self.emit(traced, Op::LayerNorm { a, gain, bias, xhat, inv_std }, out))
    }

    pub fn gelu(&mut self, a: &Tensor) -> Result<Tensor> {
        let out = vc_gelu(a)?;
        let a = self.arg(a, "gelu")?;
        let traced = a.node.is_some();
        Ok(self.emit(traced, Op::Gelu { a }, out))
    }

    pub fn mean_axis(&mut self, a: &Tensor, axis: usize) -> Result<Tensor> {
        let out = vc_mean_axis(a, axis)?;
        let a = self.arg(a, "mean_axis")?;
        let traced = a.node.is_some();
        Ok(self.emit(traced, Op::MeanAxis { a, axis }, out))
    }

    pub fn sum(&mut self, a: &Tensor) -> Result<Tensor> {
        let out = Tensor::scalar(a.data().iter().sum());
        let a = self.arg(a, "sum")?;
        let traced = a.node.is_some();
        Ok(self.emit(traced, Op::Sum { a }, out))
    }

    pub fn concat_cols(&mut self, parts: &[&Tensor]) -> Result<Tensor> {
        let out = vc_concat_cols(parts)?;
        let parts = parts
            .iter()
            .map(|p| self.arg(p, "concat_cols"))
            .collect::<Result<Vec<_>>>()?;
        let traced = parts.iter().any(|p| p.node.is_some());
        Ok(self.emit(traced, Op::ConcatCols { parts }, out))
    }

    pub fn stack_rows(&mut self, rows: &[Tensor]) -> Result<Tensor> {
        let out = vc_stack_rows(rows)?;
        let parts = rows
            .iter()
            .map(|p| self.arg(p, "stack_rows"))
            .collect::<Result<Vec<_>>>()?;
        let traced = parts.iter().any(|p| p.node.is_some());
        Ok(self.emit(traced, Op::StackRows { parts }, out))
    }

    pub fn reshape(&mut self, a: &Tensor, shape: &[usize]) -> Result<Tensor> {
        let out = a.reshaped(shape)?.detach();
        let a = self.arg(a, "reshape")?;
        let traced = a.node.is_some();
        Ok(self.emit(traced, Op::Reshape { a }, out))
    }

    pub fn pairwise_sqdist(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let out = vc_pairwise_sqdist(a, b)?;
        let (a, b) = (
            self.arg(a, "pairwise_sqdist")?,
            self.arg(b, "pairwise_sqdist")?,
        );
        let traced = a.node.is_some() || b.node.is_some();
        Ok(self.emit(traced, Op::PairwiseSqdist { a, b }, out))
    }

    /// Per-group row means; groups must each contain at least one row.
    pub fn group_mean_rows(&mut self, a: &Tensor, groups: &[usize], n_groups: usize) -> Result<Tensor> {
        let out = vc_group_mean_rows(a, groups, n_groups)?;
        let mut counts = vec![0usize; n_groups];
        for &g in groups {
            counts[g] += 1;
        }
        let a = self.arg(a, "group_mean_rows")?;
        let traced = a.node.is_some();
        Ok(self.emit(
            traced,
            Op::GroupMeanRows { a, groups: groups.to_vec(), counts },
            out,
        ))
    }

    /// Mean cross-entropy of probability rows against target distribution
    /// rows. Targets are always treated as constants: labels (hard, soft or
    /// mixed) are data, not differentiation targets.
    pub fn cross_entropy(&mut self, probs: &Tensor, targets: &Tensor) -> Result<Tensor> {
        let out = vc_cross_entropy(probs, targets)?;
        let probs = self.arg(probs, "cross_entropy")?;
        let traced = probs.node.is_some();
        Ok(self.emit(
            traced,
            Op::CrossEntropy { probs, targets: targets.detach() },
            out,
        ))
    }

    /// Reverse sweep from a traced scalar. The tape is not consumed: repeated
    /// calls replay the same record and yield bit-identical gradients.
    pub fn backward(&self, loss: &Tensor) -> Result<GradientMap> {
        let id = loss.tape_id().ok_or_else(|| {
            Error::contract("backward", "loss tensor is not traced on any tape")
        })?;
        if id.tape != self.uid {
            return Err(Error::contract("backward", "loss belongs to a different tape"));
        }
        if loss.numel() != 1 {
            return Err(Error::contract(
                "backward",
                format!("loss must be scalar, got shape {:?}", loss.shape()),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[id.node] = Some(vec![1.0]);

        for idx in (0..=id.node).rev() {
            // Arguments always precede their consumer, so split at idx.
            let (lower, upper) = grads.split_at_mut(idx);
            let Some(g) = upper[0].as_ref() else { continue };
            self.nodes[idx].op.backward(g, lower);
        }

        Ok(GradientMap {
            tape: self.uid,
            shapes: self.nodes.iter().map(|n| n.shape.clone()).collect(),
            grads,
        })
    }
}

fn acc(slot: &mut Option<Vec<f64>>, numel: usize, f: impl FnOnce(&mut [f64])) {
    let buf = slot.get_or_insert_with(|| vec![0.0; numel]);
    f(buf);
}

fn acc_arg(lower: &mut [Option<Vec<f64>>], arg: &Arg, f: impl FnOnce(&mut [f64])) {
    if let Some(node) = arg.node {
        acc(&mut lower[node], arg.value.numel(), f);
    }
}

impl Op {
    /// Distribute the output gradient `g` onto this node's traced inputs.
    fn backward(&self, g: &[f64], lower: &mut [Option<Vec<f64>>]) {
        match self {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (m, k) = (a.value.shape()[0], a.value.shape()[1]);
                let n = b.value.shape()[1];
                let (av, bv) = (a.value.data(), b.value.data());
                acc_arg(lower, a, |da| {
                    for i in 0..m {
                        for kk in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += g[i * n + j] * bv[kk * n + j];
                            }
                            da[i * k + kk] += s;
                        }
                    }
                });
                acc_arg(lower, b, |db| {
                    for i in 0..m {
                        for kk in 0..k {
                            let av_ik = av[i * k + kk];
                            if av_ik == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                db[kk * n + j] += av_ik * g[i * n + j];
                            }
                        }
                    }
                });
            }
            Op::Transpose { a } => {
                let (m, n) = (a.value.shape()[0], a.value.shape()[1]);
                acc_arg(lower, a, |da| {
                    for i in 0..m {
                        for j in 0..n {
                            da[i * n + j] += g[j * m + i];
                        }
                    }
                });
            }
            Op::Add { a, b } => {
                acc_arg(lower, a, |da| {
                    for (d, &gv) in da.iter_mut().zip(g) {
                        *d += gv;
                    }
                });
                acc_arg(lower, b, |db| {
                    for (d, &gv) in db.iter_mut().zip(g) {
                        *d += gv;
                    }
                });
            }
            Op::Sub { a, b } => {
                acc_arg(lower, a, |da| {
                    for (d, &gv) in da.iter_mut().zip(g) {
                        *d += gv;
                    }
                });
                acc_arg(lower, b, |db| {
                    for (d, &gv) in db.iter_mut().zip(g) {
                        *d -= gv;
                    }
                });
            }
            Op::Mul { a, b } => {
                acc_arg(lower, a, |da| {
                    for ((d, &gv), &bv) in da.iter_mut().zip(g).zip(b.value.data()) {
                        *d += gv * bv;
                    }
                });
                acc_arg(lower, b, |db| {
                    for ((d, &gv), &av) in db.iter_mut().zip(g).zip(a.value.data()) {
                        *d += gv * av;
                    }
                });
            }
            Op::Scale { a, c } => {
                acc_arg(lower, a, |da| {
                    for (d, &gv) in da.iter_mut().zip(g) {
                        *d += c * gv;
                    }
                });
            }
            Op::AddScalar { a } => {
                acc_arg(lower, a, |da| {
                    for (d, &gv) in da.iter_mut().zip(g) {
                        *d += gv;
                    }
                });
            }
            Op::AddRow { a, row } => {
                let n = row.value.numel();
                let m = a.value.numel() / n;
                acc_arg(lower, a, |da| {
                    for (d, &gv) in da.iter_mut().zip(g) {
                        *d += gv;
                    }
                });
                acc_arg(lower, row, |dr| {
                    for i in 0..m {
                        for j in 0..n {
                            dr[j] += g[i * n + j];
                        }
                    }
                });
            }
            Op::ScaleCols { a, s } => {
                let n = s.value.numel();
                let m = a.value.numel() / n;
                let (av, sv) = (a.value.data(), s.value.data());
                acc_arg(lower, a, |da| {
                    for i in 0..m {
                        for j in 0..n {
                            da[i * n + j] += g[i * n + j] * sv[j];
                        }
                    }
                });
                acc_arg(lower, s, |ds| {
                    for i in 0..m {
                        for j in 0..n {
                            ds[j] += g[i * n + j] * av[i * n + j];
                        }
                    }
                });
            }
            Op::SoftmaxRows { a, out } => {
                let (m, n) = (out.shape()[0], out.shape()[1]);
                let y = out.data();
                acc_arg(lower, a, |da| {
                    for i in 0..m {
                        let (ys, gs) = (&y[i * n..(i + 1) * n], &g[i * n..(i + 1) * n]);
                        let dot: f64 = ys.iter().zip(gs).map(|(&yv, &gv)| yv * gv).sum();
                        for j in 0..n {
                            da[i * n + j] += ys[j] * (gs[j] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm { a, gain, bias, xhat, inv_std } => {
                let n = gain.value.numel();
                let m = a.value.numel() / n;
                let gv = gain.value.data();
                acc_arg(lower, a, |da| {
                    for i in 0..m {
                        let row = i * n;
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for j in 0..n {
                            let gy = g[row + j] * gv[j];
                            s1 += gy;
                            s2 += gy * xhat[row + j];
                        }
                        let nf = n as f64;
                        for j in 0..n {
                            let gy = g[row + j] * gv[j];
                            da[row + j] +=
                                inv_std[i] * (gy - s1 / nf - xhat[row + j] * s2 / nf);
                        }
                    }
                });
                acc_arg(lower, gain, |dg| {
                    for i in 0..m {
                        for j in 0..n {
                            dg[j] += g[i * n + j] * xhat[i * n + j];
                        }
                    }
                });
                acc_arg(lower, bias, |db| {
                    for i in 0..m {
                        for j in 0..n {
                            db[j] += g[i * n + j];
                        }
                    }
                });
            }
            Op::Gelu { a } => {
                acc_arg(lower, a, |da| {
                    for ((d, &gv), &x) in da.iter_mut().zip(g).zip(a.value.data()) {
                        *d += gv * gelu_grad_scalar(x);
                    }
                });
            }
            Op::MeanAxis { a, axis } => {
                let (m, n) = (a.value.shape()[0], a.value.shape()[1]);
                acc_arg(lower, a, |da| match axis {
                    0 => {
                        for i in 0..m {
                            for j in 0..n {
                                da[i * n + j] += g[j] / m as f64;
                            }
                        }
                    }
                    _ => {
                        for i in 0..m {
                            for j in 0..n {
                                da[i * n + j] += g[i] / n as f64;
                            }
                        }
                    }
                });
            }
            Op::Sum { a } => {
                acc_arg(lower, a, |da| {
                    for d in da.iter_mut() {
                        *d += g[0];
                    }
                });
            }
            Op::ConcatCols { parts } => {
                let m = parts[0].value.shape()[0];
                let total: usize = parts.iter().map(|p| p.value.shape()[1]).sum();
                let mut start = 0;
                for p in parts {
                    let w = p.value.shape()[1];
                    acc_arg(lower, p, |dp| {
                        for i in 0..m {
                            for j in 0..w {
                                dp[i * w + j] += g[i * total + start + j];
                            }
                        }
                    });
                    start += w;
                }
            }
            Op::StackRows { parts } => {
                let d = parts[0].value.numel();
                for (i, p) in parts.iter().enumerate() {
                    acc_arg(lower, p, |dp| {
                        for j in 0..d {
                            dp[j] += g[i * d + j];
                        }
                    });
                }
            }
            Op::Reshape { a } => {
                acc_arg(lower, a, |da| {
                    for (d, &gv) in da.iter_mut().zip(g) {
                        *d += gv;
                    }
                });
            }
            Op::PairwiseSqdist { a, b } => {
                let (m, d) = (a.value.shape()[0], a.value.shape()[1]);
                let n = b.value.shape()[0];
                let (av, bv) = (a.value.data(), b.value.data());
                acc_arg(lower, a, |da| {
                    for i in 0..m {
                        for j in 0..n {
                            let gv = 2.0 * g[i * n + j];
                            if gv == 0.0 {
                                continue;
                            }
                            for t in 0..d {
                                da[i * d + t] += gv * (av[i * d + t] - bv[j * d + t]);
                            }
                        }
                    }
                });
                acc_arg(lower, b, |db| {
                    for i in 0..m {
                        for j in 0..n {
                            let gv = 2.0 * g[i * n + j];
                            if gv == 0.0 {
                                continue;
                            }
                            for t in 0..d {
                                db[j * d + t] -= gv * (av[i * d + t] - bv[j * d + t]);
                            }
                        }
                    }
                });
            }
            Op::GroupMeanRows { a, groups, counts } => {
                let d = a.value.shape()[1];
                acc_arg(lower, a, |da| {
                    for (i, &grp) in groups.iter().enumerate() {
                        let c = counts[grp] as f64;
                        for j in 0..d {
                            da[i * d + j] += g[grp * d + j] / c;
                        }
                    }
                });
            }
            Op::CrossEntropy { probs, targets } => {
                let (m, n) = (probs.value.shape()[0], probs.value.shape()[1]);
                let (pv, tv) = (probs.value.data(), targets.data());
                acc_arg(lower, probs, |dp| {
                    for i in 0..m {
                        for j in 0..n {
                            let t = tv[i * n + j];
                            if t != 0.0 {
                                let p = pv[i * n + j].max(CE_FLOOR);
                                dp[i * n + j] -= g[0] * t / (p * m as f64);
                            }
                        }
                    }
                });
            }
        }
    }
}

/// Gradients produced by one backward sweep. Leaves (and interior nodes)
/// that the loss does not reach report zeros of the right shape.
pub struct GradientMap {
    tape: u64,
    shapes: Vec<Vec<usize>>,
    grads: Vec<Option<Vec<f64>>>,
}

impl GradientMap {
    /// Gradient of the swept loss with respect to a traced tensor.
    pub fn get(&self, t: &Tensor) -> Result<Tensor> {
        let id = t
            .tape_id()
            .ok_or_else(|| Error::contract("gradient.get", "tensor is not traced"))?;
        if id.tape != self.tape {
            return Err(Error::contract(
                "gradient.get",
                "tensor belongs to a different tape",
            ));
        }
        let shape = self.shapes[id.node].clone();
        match &self.grads[id.node] {
            Some(buf) => Tensor::new(shape, buf.clone()),
            None => Ok(Tensor::zeros(&shape)),
        }
    }
}
