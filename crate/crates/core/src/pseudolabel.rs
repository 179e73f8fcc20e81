//! Graph-based pseudo-labeling: a Gaussian affinity graph over embeddings,
//! label propagation to convergence, confidence-ranked selection, and the
//! support splitting used for target-domain fine-tuning.
//!
//! Production predictions use the closed form `F* = (I - alpha A_hat)^-1 Y_hat`;
//! the power iteration is kept as an independent cross-check and fallback.

use rand_chacha::ChaCha8Rng;

use crate::episodic::choose_indices;
use crate::error::{Error, Result};
use crate::linalg::solve_lu;
use crate::tensor::Tensor;

/// Bandwidth choice for the affinity kernel.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SigmaMode {
    /// Median of all pairwise embedding distances; falls back to 1.0 when
    /// the median degenerates (a single node or coincident embeddings).
    Median,
    Fixed(f64),
}

#[derive(Clone, Debug)]
pub struct PropagationConfig {
    /// Smoothness/fitting trade-off, in [0, 1).
    pub alpha: f64,
    pub sigma: SigmaMode,
    /// Multiplier on the bandwidth produced by `sigma`. The raw median is
    /// dominated by between-class pairs once several classes are present,
    /// which flattens the kernel; shrinking the bandwidth restores the
    /// within-class block structure the propagation relies on.
    pub sigma_scale: f64,
    /// Added to degrees before normalization and to the closed-form
    /// diagonal if the plain solve fails.
    pub ridge_eps: f64,
    pub max_iters: usize,
    pub conv_tol: f64,
}

impl Default for PropagationConfig {
    fn default() -> Self {
        PropagationConfig {
            alpha: 0.99,
            sigma: SigmaMode::Median,
            sigma_scale: 1.0,
            ridge_eps: 1e-6,
            max_iters: 1000,
            conv_tol: 1e-9,
        }
    }
}

impl PropagationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.alpha) {
            return Err(Error::config("alpha", format!("must be in [0, 1), got {}", self.alpha)));
        }
        if let SigmaMode::Fixed(s) = self.sigma {
            if !(s > 0.0) {
                return Err(Error::config("sigma", format!("fixed bandwidth must be > 0, got {s}")));
            }
        }
        if !(self.sigma_scale.is_finite() && self.sigma_scale > 0.0) {
            return Err(Error::config(
                "sigma_scale",
                format!("must be positive and finite, got {}", self.sigma_scale),
            ));
        }
        if !(self.ridge_eps > 0.0) {
            return Err(Error::config("ridge_eps", format!("must be > 0, got {}", self.ridge_eps)));
        }
        if self.max_iters == 0 {
            return Err(Error::config("max_iters", "must be >= 1"));
        }
        if !(self.conv_tol > 0.0) {
            return Err(Error::config("conv_tol", format!("must be > 0, got {}", self.conv_tol)));
        }
        Ok(())
    }
}

/// Affinity graph with symmetric normalization and initial label rows.
#[derive(Clone, Debug)]
pub struct LabelGraph {
    pub n: usize,
    pub n_classes: usize,
    /// Bandwidth actually used by the kernel.
    pub sigma: f64,
    /// Gaussian affinities, zero diagonal.
    pub affinity: Tensor,
    /// `D^-1/2 A D^-1/2` with `ridge_eps` added to the degrees.
    pub normalized: Tensor,
    /// One row per node: one-hot for initially labeled nodes, zero rows
    /// for unlabeled ones.
    pub y_hat: Tensor,
}

/// Build the propagation graph over embedding rows. `init[i]` carries
/// node i's initial class, if any.
pub fn build_graph(
    embeddings: &Tensor,
    init: &[Option<usize>],
    n_classes: usize,
    cfg: &PropagationConfig,
) -> Result<LabelGraph> {
    cfg.validate()?;
    let (n, _d) = embeddings.dims2("build_graph")?;
    if n == 0 {
        return Err(Error::contract("build_graph", "no nodes"));
    }
    if init.len() != n {
        return Err(Error::contract(
            "build_graph",
            format!("{} initial labels for {n} nodes", init.len()),
        ));
    }
    if n_classes == 0 {
        return Err(Error::contract("build_graph", "n_classes must be >= 1"));
    }
    if !embeddings.all_finite() {
        return Err(Error::numeric("build_graph", "non-finite embedding entry"));
    }

    let sq = embeddings.pairwise_sqdist(embeddings)?;
    let base_sigma = match cfg.sigma {
        SigmaMode::Fixed(s) => s,
        SigmaMode::Median => {
            let mut dists = Vec::with_capacity(n * (n - 1) / 2);
            for i in 0..n {
                for j in i + 1..n {
                    dists.push(sq.at(i, j).sqrt());
                }
            }
            dists.sort_by(f64::total_cmp);
            let med = match dists.len() {
                0 => 0.0,
                l if l % 2 == 1 => dists[l / 2],
                l => 0.5 * (dists[l / 2 - 1] + dists[l / 2]),
            };
            // coincident embeddings (or one node) give no usable spread
            if med > 1e-12 {
                med
            } else {
                1.0
            }
        }
    };
    let sigma = cfg.sigma_scale * base_sigma;

    let mut a = vec![0.0; n * n];
    let denom = 2.0 * sigma * sigma;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                a[i * n + j] = (-sq.at(i, j) / denom).exp();
            }
        }
    }
    let degrees: Vec<f64> = (0..n)
        .map(|i| a[i * n..(i + 1) * n].iter().sum::<f64>() + cfg.ridge_eps)
        .collect();
    let inv_sqrt: Vec<f64> = degrees.iter().map(|&d| 1.0 / d.sqrt()).collect();
    let mut a_hat = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            a_hat[i * n + j] = inv_sqrt[i] * a[i * n + j] * inv_sqrt[j];
        }
    }

    let mut y = vec![0.0; n * n_classes];
    for (i, lab) in init.iter().enumerate() {
        if let Some(c) = lab {
            if *c >= n_classes {
                return Err(Error::contract(
                    "build_graph",
                    format!("initial label {c} out of range for {n_classes} classes"),
                ));
            }
            y[i * n_classes + c] = 1.0;
        }
    }

    Ok(LabelGraph {
        n,
        n_classes,
        sigma,
        affinity: Tensor::new(vec![n, n], a)?,
        normalized: Tensor::new(vec![n, n], a_hat)?,
        y_hat: Tensor::new(vec![n, n_classes], y)?,
    })
}

/// Closed-form propagation: solve `(I - alpha A_hat) F = Y_hat`. If the
/// plain solve reports a singular system, retries once with `ridge_eps`
/// added to the diagonal.
pub fn propagate_closed_form(graph: &LabelGraph, cfg: &PropagationConfig) -> Result<Tensor> {
    cfg.validate()?;
    let n = graph.n;
    let mut m = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            m[i * n + j] = -cfg.alpha * graph.normalized.at(i, j);
        }
        m[i * n + i] += 1.0;
    }
    let solved = match solve_lu(&m, n, graph.y_hat.data(), graph.n_classes) {
        Ok(f) => f,
        Err(_) => {
            for i in 0..n {
                m[i * n + i] += cfg.ridge_eps;
            }
            solve_lu(&m, n, graph.y_hat.data(), graph.n_classes)?
        }
    };
    Tensor::new(vec![n, graph.n_classes], solved)
}

/// Iterative propagation of the same fixed point: `G <- alpha A_hat G + Y_hat`
/// converges to `(I - alpha A_hat)^-1 Y_hat`. Returns the result and the
/// number of sweeps; errors if `max_iters` passes without the largest
/// entry change dropping to `conv_tol`.
pub fn propagate_iterative(graph: &LabelGraph, cfg: &PropagationConfig) -> Result<(Tensor, usize)> {
    cfg.validate()?;
    let n = graph.n;
    let c = graph.n_classes;
    let y = graph.y_hat.data();
    let a = graph.normalized.data();
    let mut g = y.to_vec();
    for iter in 1..=cfg.max_iters {
        let mut next = y.to_vec();
        for i in 0..n {
            for k in 0..n {
                let w = cfg.alpha * a[i * n + k];
                if w == 0.0 {
                    continue;
                }
                for j in 0..c {
                    next[i * c + j] += w * g[k * c + j];
                }
            }
        }
        let delta = next
            .iter()
            .zip(&g)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        g = next;
        if delta <= cfg.conv_tol {
            return Ok((Tensor::new(vec![n, c], g)?, iter));
        }
    }
    Err(Error::numeric(
        "propagate_iterative",
        format!("no convergence within {} sweeps", cfg.max_iters),
    ))
}

/// Row-normalized class scores: each row scaled to sum 1 (uniform when a
/// row is all zero). Argmax ties break toward the lower class index.
pub fn normalize_scores(f: &Tensor) -> Result<Tensor> {
    let (n, c) = f.dims2("normalize_scores")?;
    let mut out = vec![0.0; n * c];
    for i in 0..n {
        let row = &f.data()[i * c..(i + 1) * c];
        let sum: f64 = row.iter().sum();
        if sum.abs() > 1e-300 {
            for j in 0..c {
                out[i * c + j] = row[j] / sum;
            }
        } else {
            for j in 0..c {
                out[i * c + j] = 1.0 / c as f64;
            }
        }
    }
    Tensor::new(vec![n, c], out)
}

/// Predicted class per node: argmax over columns, ties to the lower index.
pub fn argmax_rows(f: &Tensor) -> Result<Vec<usize>> {
    let (n, c) = f.dims2("argmax_rows")?;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let row = &f.data()[i * c..(i + 1) * c];
        let mut best = 0;
        for j in 1..c {
            if row[j] > row[best] {
                best = j;
            }
        }
        out.push(best);
    }
    Ok(out)
}

/// One confidence-ranked selection.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Selection {
    pub node: usize,
    pub class: usize,
    pub confidence: f64,
}

/// For every predicted class, the up-to-k most confident nodes. Confidence
/// is the row-normalized score of the winning class; ties resolve toward
/// the lower node index for determinism.
pub fn select_top_k(scores: &Tensor, k: usize) -> Result<Vec<Selection>> {
    let norm = normalize_scores(scores)?;
    let (n, c) = norm.dims2("select_top_k")?;
    let classes = argmax_rows(&norm)?;
    let mut picked = Vec::new();
    for class in 0..c {
        let mut members: Vec<Selection> = (0..n)
            .filter(|&i| classes[i] == class)
            .map(|i| Selection {
                node: i,
                class,
                confidence: norm.at(i, class),
            })
            .collect();
        members.sort_by(|a, b| {
            b.confidence
                .partial_cmp(&a.confidence)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.node.cmp(&b.node))
        });
        members.truncate(k);
        picked.extend(members);
    }
    Ok(picked)
}

/// Smooth a batch of initial predictions against labeled anchors: builds
/// the graph over `[anchors; batch]`, propagates, and returns the
/// row-normalized scores of the batch rows (anchor rows are discarded).
/// No ground-truth batch label ever enters this function.
pub fn smooth_scores(
    anchor_embeddings: &Tensor,
    anchor_labels: &[usize],
    batch_embeddings: &Tensor,
    batch_init: &[usize],
    n_classes: usize,
    cfg: &PropagationConfig,
) -> Result<Tensor> {
    let (n_a, d_a) = anchor_embeddings.dims2("smooth_scores")?;
    let (n_b, d_b) = batch_embeddings.dims2("smooth_scores")?;
    if d_a != d_b {
        return Err(Error::ShapeMismatch {
            op: "smooth_scores",
            lhs: anchor_embeddings.shape().to_vec(),
            rhs: batch_embeddings.shape().to_vec(),
        });
    }
    if anchor_labels.len() != n_a || batch_init.len() != n_b {
        return Err(Error::contract(
            "smooth_scores",
            "label counts do not match embedding rows",
        ));
    }
    let mut all = Vec::with_capacity((n_a + n_b) * d_a);
    all.extend_from_slice(anchor_embeddings.data());
    all.extend_from_slice(batch_embeddings.data());
    let stacked = Tensor::new(vec![n_a + n_b, d_a], all)?;
    let init: Vec<Option<usize>> = anchor_labels
        .iter()
        .chain(batch_init.iter())
        .map(|&c| Some(c))
        .collect();
    let graph = build_graph(&stacked, &init, n_classes, cfg)?;
    let f = propagate_closed_form(&graph, cfg)?;
    let norm = normalize_scores(&f)?;
    let mut batch_rows = Vec::with_capacity(n_b * n_classes);
    batch_rows.extend_from_slice(&norm.data()[n_a * n_classes..]);
    Tensor::new(vec![n_b, n_classes], batch_rows)
}

/// Refined class per batch row; see [`smooth_scores`].
pub fn smooth_predictions(
    anchor_embeddings: &Tensor,
    anchor_labels: &[usize],
    batch_embeddings: &Tensor,
    batch_init: &[usize],
    n_classes: usize,
    cfg: &PropagationConfig,
) -> Result<Vec<usize>> {
    let scores = smooth_scores(
        anchor_embeddings,
        anchor_labels,
        batch_embeddings,
        batch_init,
        n_classes,
        cfg,
    )?;
    argmax_rows(&scores)
}

/// Split a balanced support set into a sub-support/sub-query pair per
/// class. Every class must hold exactly `k_sub + q_sub` samples.
pub fn split_support<T: Clone>(
    support: &[(T, usize)],
    k_sub: usize,
    q_sub: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<(T, usize)>, Vec<(T, usize)>)> {
    if k_sub == 0 || q_sub == 0 {
        return Err(Error::contract(
            "split_support",
            format!("split sizes must be positive, got ({k_sub}, {q_sub})"),
        ));
    }
    let n_classes = support.iter().map(|(_, c)| c + 1).max().unwrap_or(0);
    let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); n_classes];
    for (i, (_, c)) in support.iter().enumerate() {
        per_class[*c].push(i);
    }
    let mut sub_support = Vec::new();
    let mut sub_query = Vec::new();
    for (c, members) in per_class.iter().enumerate() {
        if members.len() != k_sub + q_sub {
            return Err(Error::contract(
                "split_support",
                format!(
                    "class {c} holds {} samples, split needs exactly {}",
                    members.len(),
                    k_sub + q_sub
                ),
            ));
        }
        let order = choose_indices(members.len(), members.len(), rng);
        for &o in &order[..k_sub] {
            let (x, c) = &support[members[o]];
            sub_support.push((x.clone(), *c));
        }
        for &o in &order[k_sub..] {
            let (x, c) = &support[members[o]];
            sub_query.push((x.clone(), *c));
        }
    }
    Ok((sub_support, sub_query))
}
