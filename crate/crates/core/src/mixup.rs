//! Mixup-based intermediate-domain synthesis.
//!
//! Convex combinations of samples (inputs or embeddings) and their labels
//! bridge the source and target domains. The mixing ratio for the
//! intermediate domain follows a progressive schedule driven by sliced
//! Wasserstein distances: it starts at the target domain and drifts toward
//! the source as epochs advance.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, StandardNormal};

use crate::episodic::{choose_indices, one_hot, classify, prototypes, Episode, Embedder};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Debug)]
pub struct MixupConfig {
    /// Beta(alpha, alpha) parameter for within-domain mixing ratios.
    pub beta_alpha: f64,
    /// Temperature of the schedule weighting factor q.
    pub tau: f64,
    /// Half-width of the uniform perturbation around lambda2.
    pub sigma_perturb: f64,
    /// Number of random directions for the sliced Wasserstein distance.
    pub projections: usize,
}

impl Default for MixupConfig {
    fn default() -> Self {
        MixupConfig {
            beta_alpha: 1.0,
            tau: 0.05,
            sigma_perturb: 0.2,
            projections: 32,
        }
    }
}

impl MixupConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta_alpha > 0.0) {
            return Err(Error::config("beta_alpha", format!("must be > 0, got {}", self.beta_alpha)));
        }
        if !(self.tau > 0.0) {
            return Err(Error::config("tau", format!("must be > 0, got {}", self.tau)));
        }
        if !(self.sigma_perturb >= 0.0) {
            return Err(Error::config("sigma_perturb", format!("must be >= 0, got {}", self.sigma_perturb)));
        }
        if self.projections == 0 {
            return Err(Error::config("projections", "must be >= 1"));
        }
        Ok(())
    }
}

/// Draw a mixing ratio from Beta(alpha, alpha).
pub fn sample_lambda(alpha: f64, rng: &mut ChaCha8Rng) -> Result<f64> {
    let beta = Beta::new(alpha, alpha)
        .map_err(|e| Error::contract("sample_lambda", format!("bad alpha {alpha}: {e}")))?;
    Ok(beta.sample(rng))
}

fn check_lambda(op: &'static str, lambda: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) || lambda.is_nan() {
        return Err(Error::contract(op, format!("lambda {lambda} outside [0, 1]")));
    }
    Ok(())
}

/// Value-level convex combination `lambda * a + (1 - lambda) * b`.
/// Used for inputs and labels, which are data rather than grad targets.
pub fn mix_values(a: &Tensor, b: &Tensor, lambda: f64) -> Result<Tensor> {
    check_lambda("mix_values", lambda)?;
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op: "mix_values",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    a.scale(lambda).add(&b.scale(1.0 - lambda))
}

/// Traced convex combination: gradients flow to both endpoints.
pub fn mix_on_tape(tape: &mut Tape, a: &Tensor, b: &Tensor, lambda: f64) -> Result<Tensor> {
    check_lambda("mix_on_tape", lambda)?;
    let sa = tape.scale(a, lambda)?;
    let sb = tape.scale(b, 1.0 - lambda)?;
    tape.add(&sa, &sb)
}

/// Clamp(U(lambda2 - sigma, lambda2 + sigma), 0, 1). With sigma = 0 the
/// ratio is returned as-is and the generator is left untouched.
pub fn perturb_lambda(lambda2: f64, sigma: f64, rng: &mut ChaCha8Rng) -> Result<f64> {
    check_lambda("perturb_lambda", lambda2)?;
    if sigma < 0.0 {
        return Err(Error::contract("perturb_lambda", format!("sigma {sigma} < 0")));
    }
    if sigma == 0.0 {
        return Ok(lambda2);
    }
    let draw = rng.random_range(lambda2 - sigma..lambda2 + sigma);
    Ok(draw.clamp(0.0, 1.0))
}

/// Progressive mixing-ratio schedule over a fixed number of epochs.
///
/// `lambda2` weights the source sample in every intermediate mix, so the
/// schedule's start value 0 places the intermediate domain on the target.
/// Each epoch-end update moves it by
/// `lambda2_n = n(1-q)/N + q * lambda2_{n-1}` with
/// `q = exp(-d_S / ((d_S + d_T) tau))`: a source-like intermediate domain
/// (small `d_S`) pushes q toward 1 and freezes the ratio, a target-like one
/// lets it advance toward n/N. By induction `lambda2 <= n/N <= 1` and the
/// sequence never decreases.
#[derive(Clone, Debug)]
pub struct MixupSchedule {
    pub epoch: usize,
    pub total_epochs: usize,
    pub lambda2: f64,
    pub q: f64,
}

impl MixupSchedule {
    pub fn new(total_epochs: usize) -> Result<Self> {
        if total_epochs == 0 {
            return Err(Error::contract("schedule.new", "total_epochs must be >= 1"));
        }
        Ok(MixupSchedule {
            epoch: 0,
            total_epochs,
            lambda2: 0.0,
            q: 0.0,
        })
    }

    /// Advance one epoch from measured intermediate-to-source and
    /// intermediate-to-target distances. Both zero means the measurement
    /// is uninformative: the ratio holds, the epoch still counts.
    pub fn advance(&mut self, d_source: f64, d_target: f64, tau: f64) -> Result<()> {
        if self.epoch >= self.total_epochs {
            return Err(Error::contract(
                "schedule.advance",
                format!("all {} epochs already consumed", self.total_epochs),
            ));
        }
        if !(tau > 0.0) {
            return Err(Error::contract("schedule.advance", format!("tau {tau} must be > 0")));
        }
        if !d_source.is_finite() || !d_target.is_finite() || d_source < 0.0 || d_target < 0.0 {
            return Err(Error::numeric(
                "schedule.advance",
                format!("distances must be finite and non-negative, got ({d_source}, {d_target})"),
            ));
        }
        self.epoch += 1;
        if d_source + d_target == 0.0 {
            return Ok(());
        }
        let q = (-d_source / ((d_source + d_target) * tau)).exp();
        self.q = q;
        let n = self.epoch as f64;
        let total = self.total_epochs as f64;
        self.lambda2 = (n * (1.0 - q) / total + q * self.lambda2).clamp(0.0, 1.0);
        debug_assert!((0.0..=1.0).contains(&self.lambda2));
        Ok(())
    }

    /// Perturbed ratio for one intermediate sample.
    pub fn perturbed(&self, sigma: f64, rng: &mut ChaCha8Rng) -> Result<f64> {
        perturb_lambda(self.lambda2, sigma, rng)
    }
}

/// Mean |first coordinate| of a uniform direction on the (d-1)-sphere,
/// via the recurrence E_1 = 1, E_2 = 2/pi, E_d = E_{d-2} (d-2)/(d-1).
/// Dividing each projected 1-D distance by this makes the sliced distance
/// exact for translated point sets.
fn mean_abs_projection(d: usize) -> f64 {
    debug_assert!(d >= 1);
    let mut e = if d % 2 == 1 { 1.0 } else { 2.0 / std::f64::consts::PI };
    let mut k = if d % 2 == 1 { 1 } else { 2 };
    while k < d {
        k += 2;
        e *= (k - 2) as f64 / (k - 1) as f64;
    }
    e
}

/// Exact 1-Wasserstein distance between two 1-D empirical distributions,
/// by integrating |F_a^{-1} - F_b^{-1}| over the merged quantile grid.
/// Handles unequal sample counts.
fn wasserstein_1d(mut a: Vec<f64>, mut b: Vec<f64>) -> f64 {
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (n, m) = (a.len(), b.len());
    let mut dist = 0.0;
    let mut i = 0usize;
    let mut j = 0usize;
    let mut level = 0.0;
    while i < n && j < m {
        let qa = (i + 1) as f64 / n as f64;
        let qb = (j + 1) as f64 / m as f64;
        let next = qa.min(qb);
        dist += (next - level) * (a[i] - b[j]).abs();
        level = next;
        if qa <= next + 1e-15 {
            i += 1;
        }
        if qb <= next + 1e-15 {
            j += 1;
        }
    }
    dist
}

/// Sliced 1-Wasserstein distance between two sets of equal-dimension
/// vectors: average over random unit directions of the exact 1-D distance
/// between the projected sets, corrected for the expected projection
/// shrinkage so translations are measured at full length.
pub fn domain_distance(
    a: &[Tensor],
    b: &[Tensor],
    projections: usize,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::contract("domain_distance", "empty point set"));
    }
    if projections == 0 {
        return Err(Error::contract("domain_distance", "need at least one projection"));
    }
    let d = a[0].numel();
    for t in a.iter().chain(b.iter()) {
        if t.numel() != d || t.ndim() > 2 {
            return Err(Error::ShapeMismatch {
                op: "domain_distance",
                lhs: vec![d],
                rhs: t.shape().to_vec(),
            });
        }
        if !t.all_finite() {
            return Err(Error::numeric("domain_distance", "non-finite embedding entry"));
        }
    }

    let mut acc = 0.0;
    for _ in 0..projections {
        // unit direction; redraw in the (measure-zero) degenerate case
        let mut dir = vec![0.0; d];
        loop {
            let mut norm2 = 0.0;
            for v in dir.iter_mut() {
                let g: f64 = StandardNormal.sample(rng);
                *v = g;
                norm2 += g * g;
            }
            if norm2 > 1e-24 {
                let inv = 1.0 / norm2.sqrt();
                for v in dir.iter_mut() {
                    *v *= inv;
                }
                break;
            }
        }
        let project = |set: &[Tensor]| -> Vec<f64> {
            set.iter()
                .map(|t| t.data().iter().zip(&dir).map(|(x, w)| x * w).sum())
                .collect()
        };
        acc += wasserstein_1d(project(a), project(b));
    }
    Ok(acc / projections as f64 / mean_abs_projection(d))
}

/// Source-phase loss terms: episodic loss plus within-domain embedding
/// mixup, both against the support prototypes.
pub struct SourceLoss {
    pub total: Tensor,
    pub fsl: f64,
    pub mixup: f64,
}

/// Episodic loss + mixup loss on one source episode. Query pairs are drawn
/// without replacement (a shuffled half-split); each pair mixes embeddings
/// with its own Beta-distributed ratio. With fewer than two queries the
/// mixup term is zero.
pub fn source_phase_loss(
    tape: &mut Tape,
    embed: &mut Embedder,
    episode: &Episode,
    cfg: &MixupConfig,
    rng: &mut ChaCha8Rng,
) -> Result<SourceLoss> {
    cfg.validate()?;
    let qlabels = episode
        .query
        .iter()
        .map(|(_, l)| {
            l.class()
                .ok_or_else(|| Error::contract("source_phase_loss", "unlabeled query sample"))
        })
        .collect::<Result<Vec<_>>>()?;
    if qlabels.is_empty() {
        return Err(Error::contract("source_phase_loss", "episode has no query samples"));
    }

    let mut srows = Vec::with_capacity(episode.support.len());
    let mut slabels = Vec::with_capacity(episode.support.len());
    for (x, c) in &episode.support {
        srows.push(embed(tape, x)?);
        slabels.push(*c);
    }
    let support = tape.stack_rows(&srows)?;
    let protos = prototypes(tape, &support, &slabels, episode.n_way)?;

    let mut qrows = Vec::with_capacity(episode.query.len());
    for (x, _) in &episode.query {
        qrows.push(embed(tape, x)?);
    }
    let queries = tape.stack_rows(&qrows)?;
    let probs = classify(tape, &queries, &protos)?;
    let fsl = tape.cross_entropy(&probs, &one_hot(&qlabels, episode.n_way)?)?;

    let m = qrows.len();
    if m < 2 {
        return Ok(SourceLoss {
            fsl: fsl.item()?,
            mixup: 0.0,
            total: fsl,
        });
    }
    let perm = choose_indices(m, m, rng);
    let mut mixed_rows = Vec::with_capacity(m / 2);
    let mut mixed_targets = Vec::with_capacity(m / 2);
    for pair in perm.chunks_exact(2) {
        let (i, j) = (pair[0], pair[1]);
        let lambda = sample_lambda(cfg.beta_alpha, rng)?;
        mixed_rows.push(mix_on_tape(tape, &qrows[i], &qrows[j], lambda)?);
        let yi = one_hot(&[qlabels[i]], episode.n_way)?.reshaped(&[episode.n_way])?;
        let yj = one_hot(&[qlabels[j]], episode.n_way)?.reshaped(&[episode.n_way])?;
        mixed_targets.push(mix_values(&yi, &yj, lambda)?);
    }
    let mixed = tape.stack_rows(&mixed_rows)?;
    let mixed_probs = classify(tape, &mixed, &protos)?;
    let targets = Tensor::stack_rows(&mixed_targets)?;
    let mx = tape.cross_entropy(&mixed_probs, &targets)?;

    let total = tape.add(&fsl, &mx)?;
    Ok(SourceLoss {
        fsl: fsl.item()?,
        mixup: mx.item()?,
        total,
    })
}

/// Intermediate-phase loss terms: cross-entropy of input-level mixes and
/// of embedding-level mixes, both against prototypes over the union of
/// source and target classes.
#[derive(Debug)]
pub struct IntermediateLoss {
    pub total: Tensor,
    pub input_mix: f64,
    pub embed_mix: f64,
    pub pairs: usize,
}

/// Cross-domain mixup loss on one source episode and one (pseudo-)labeled
/// target episode. `lambda2` is the current schedule value; each pair draws
/// its own perturbed ratio, weighting the source sample. Labels mix in the
/// union class space (source classes first, then target classes).
pub fn intermediate_phase_loss(
    tape: &mut Tape,
    embed: &mut Embedder,
    source_ep: &Episode,
    target_ep: &Episode,
    lambda2: f64,
    cfg: &MixupConfig,
    rng: &mut ChaCha8Rng,
) -> Result<IntermediateLoss> {
    cfg.validate()?;
    check_lambda("intermediate_phase_loss", lambda2)?;
    let n_union = source_ep.n_way + target_ep.n_way;

    let mut srows = Vec::new();
    let mut slabels = Vec::new();
    for (x, c) in &source_ep.support {
        srows.push(embed(tape, x)?);
        slabels.push(*c);
    }
    for (x, c) in &target_ep.support {
        srows.push(embed(tape, x)?);
        slabels.push(source_ep.n_way + c);
    }
    let support = tape.stack_rows(&srows)?;
    let protos = prototypes(tape, &support, &slabels, n_union)?;

    let src_q = &source_ep.query;
    let tgt_q = &target_ep.query;
    let pairs = src_q.len().min(tgt_q.len());
    if pairs == 0 {
        return Err(Error::contract(
            "intermediate_phase_loss",
            "both episodes need at least one query sample",
        ));
    }
    let src_pick = choose_indices(src_q.len(), pairs, rng);
    let tgt_pick = choose_indices(tgt_q.len(), pairs, rng);

    let mut input_rows = Vec::with_capacity(pairs);
    let mut embed_rows = Vec::with_capacity(pairs);
    let mut target_rows = Vec::with_capacity(pairs);
    for (&si, &ti) in src_pick.iter().zip(&tgt_pick) {
        let (xs, ls) = (&src_q[si].0, &src_q[si].1);
        let (xt, lt) = (&tgt_q[ti].0, &tgt_q[ti].1);
        let ys = ls.class().ok_or_else(|| {
            Error::contract("intermediate_phase_loss", "unlabeled source query")
        })?;
        let yt = lt.class().ok_or_else(|| {
            Error::contract("intermediate_phase_loss", "target query lacks a pseudo-label")
        })?;
        let lam = perturb_lambda(lambda2, cfg.sigma_perturb, rng)?;

        let x_mix = mix_values(xs, xt, lam)?;
        input_rows.push(embed(tape, &x_mix)?);

        let zs = embed(tape, xs)?;
        let zt = embed(tape, xt)?;
        embed_rows.push(mix_on_tape(tape, &zs, &zt, lam)?);

        let ys_hot = one_hot(&[ys], n_union)?.reshaped(&[n_union])?;
        let yt_hot = one_hot(&[source_ep.n_way + yt], n_union)?.reshaped(&[n_union])?;
        target_rows.push(mix_values(&ys_hot, &yt_hot, lam)?);
    }
    let targets = Tensor::stack_rows(&target_rows)?;

    let input_stack = tape.stack_rows(&input_rows)?;
    let input_probs = classify(tape, &input_stack, &protos)?;
    let l_input = tape.cross_entropy(&input_probs, &targets)?;

    let embed_stack = tape.stack_rows(&embed_rows)?;
    let embed_probs = classify(tape, &embed_stack, &protos)?;
    let l_embed = tape.cross_entropy(&embed_probs, &targets)?;

    let total = tape.add(&l_input, &l_embed)?;
    Ok(IntermediateLoss {
        input_mix: l_input.item()?,
        embed_mix: l_embed.item()?,
        pairs,
        total,
    })
}
