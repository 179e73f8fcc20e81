//! Training and evaluation phases of the adaptation pipeline.
//!
//! A run has three stages. Source meta-training fits the full encoder on
//! episodes from the labeled source cube, freezing the backbone partway
//! through so the remaining episodes warm up the adapter tensors. The
//! intermediate phase then adapts those tensors to a target cube from a
//! small labeled support set: each outer epoch fine-tunes on splits of the
//! support set, re-labels a pool of unlabeled pixels via graph smoothing,
//! trains on cross-domain mixtures against the current mixing ratio, and
//! advances the ratio from measured embedding distances. Evaluation scores
//! every labeled pixel outside the support set.
//!
//! All randomness comes from counter-derived streams of the run seed, so
//! the same seed and trial index replay bit-for-bit — in particular the
//! support pixels drawn for adaptation and for evaluation are identical,
//! and evaluation explicitly re-checks that no scored pixel is one of them.

use std::collections::BTreeSet;

use rand_chacha::ChaCha8Rng;
use rand::Rng;
use rand::SeedableRng;

use crate::encoder::{encode, EncoderConfig, EncoderParams};
use crate::episodic::{
    classify, metrics, prototypes, sample_episode, ConfusionMatrix, Episode, Metrics, QueryLabel,
};
use crate::error::{Error, Result};
use crate::hsidata::CubeDataset;
use crate::mixup::{
    domain_distance, intermediate_phase_loss, mix_values, source_phase_loss, MixupSchedule,
};
use crate::pipeline::config::RunConfig;
use crate::pipeline::optim::Sgd;
use crate::pseudolabel::{argmax_rows, select_top_k, smooth_predictions, smooth_scores, split_support};
use crate::tensor::{Tape, Tensor};

/// Independent random streams of one run. Each stream seeds its own
/// generator, so reordering or skipping one phase never shifts another.
const STREAM_SOURCE: u64 = 0x01;
const STREAM_SUPPORT: u64 = 0x1000;
const STREAM_ADAPT: u64 = 0x2000;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Generator for the stream `tag` of run seed `seed`.
pub(crate) fn stream_rng(seed: u64, tag: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix(seed ^ splitmix(tag)))
}

/// Checks that an encoder configuration matches a dataset's geometry.
fn check_encoder_dataset(enc: &EncoderConfig, ds: &CubeDataset, role: &str) -> Result<()> {
    if enc.bands != ds.bands {
        return Err(Error::config(
            "enc_bands",
            format!("encoder expects {} bands, {role} cube has {}", enc.bands, ds.bands),
        ));
    }
    let patch = 2 * ds.patch_radius + 1;
    if enc.input_size != patch {
        return Err(Error::config(
            "enc_input_size",
            format!(
                "encoder expects {0}x{0} patches, {role} cube yields {1}x{1}",
                enc.input_size, patch
            ),
        ));
    }
    Ok(())
}

/// Fixed per-trial support draw from a labeled target cube.
///
/// Pixels are chosen per class, `k_shot` each, in ascending class-id order.
/// The same `(seed, trial)` pair always yields the same pixels, which is
/// what lets adaptation and evaluation agree on the support set without
/// passing it around.
#[derive(Clone, Debug)]
pub struct SupportSet {
    /// Sorted distinct class ids; local label `c` maps to `class_ids[c]`.
    pub class_ids: Vec<u16>,
    /// `(pixel, local label)` pairs, `k_shot` per class, class-major order.
    pub coords: Vec<((usize, usize), usize)>,
}

impl SupportSet {
    pub fn pixel_set(&self) -> BTreeSet<(usize, usize)> {
        self.coords.iter().map(|&(p, _)| p).collect()
    }

    pub fn pixels(&self) -> Vec<(usize, usize)> {
        self.coords.iter().map(|&(p, _)| p).collect()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.coords.iter().map(|&(_, c)| c).collect()
    }

    /// Patch tensors paired with local labels, in draw order.
    pub fn patches(&self, ds: &CubeDataset) -> Result<Vec<(Tensor, usize)>> {
        self.coords
            .iter()
            .map(|&((y, x), c)| Ok((ds.extract_patch(y, x)?, c)))
            .collect()
    }
}

pub fn draw_support(ds: &CubeDataset, k_shot: usize, seed: u64, trial: u64) -> Result<SupportSet> {
    if k_shot == 0 {
        return Err(Error::contract("draw_support", "k_shot must be positive"));
    }
    let mut rng = stream_rng(seed, STREAM_SUPPORT + trial);
    let by_class = ds.class_pixels();
    if by_class.is_empty() {
        return Err(Error::insufficient("cube has no labeled pixels"));
    }
    let mut class_ids = Vec::with_capacity(by_class.len());
    let mut coords = Vec::with_capacity(by_class.len() * k_shot);
    for (local, (&id, pixels)) in by_class.iter().enumerate() {
        if pixels.len() < k_shot {
            return Err(Error::insufficient(format!(
                "class {id} has {} labeled pixels, support needs {k_shot}",
                pixels.len()
            )));
        }
        for i in crate::episodic::choose_indices(pixels.len(), k_shot, &mut rng) {
            coords.push((pixels[i], local));
        }
        class_ids.push(id);
    }
    Ok(SupportSet { class_ids, coords })
}

fn param_norm(params: &EncoderParams) -> f64 {
    params
        .iter()
        .map(|(_, p)| p.value.data().iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

/// Tags numeric failures with the step index and the current parameter
/// norm, so a diverged run names where it went off the rails.
fn annotate_step(e: Error, op: &'static str, step: usize, params: &EncoderParams) -> Error {
    match e {
        Error::Numeric { detail, .. } => Error::numeric(
            op,
            format!("step {step}: {detail} (parameter norm {:.6})", param_norm(params)),
        ),
        other => other,
    }
}

/// One optimization step on an episode drawn from a single domain.
fn step_source(
    params: &mut EncoderParams,
    opt: &mut Sgd,
    run: &RunConfig,
    episode: &Episode,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let enc = &run.encoder;
    let mut embed = |t: &mut Tape, x: &Tensor| Ok(encode(t, x, &bound, enc)?.z);
    let loss = source_phase_loss(&mut tape, &mut embed, episode, &run.mixup, rng)?;
    let total = loss.total.item()?;
    if !total.is_finite() {
        return Err(Error::numeric("step_source", format!("non-finite loss {total}")));
    }
    let grads = tape.backward(&loss.total)?;
    opt.step(params, &bound, &grads)?;
    Ok(total)
}

/// One optimization step on a cross-domain pair of episodes, mixing inputs
/// and embeddings at the given ratio.
fn step_intermediate(
    params: &mut EncoderParams,
    opt: &mut Sgd,
    run: &RunConfig,
    source_ep: &Episode,
    target_ep: &Episode,
    lambda2: f64,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let enc = &run.encoder;
    let mut embed = |t: &mut Tape, x: &Tensor| Ok(encode(t, x, &bound, enc)?.z);
    let loss =
        intermediate_phase_loss(&mut tape, &mut embed, source_ep, target_ep, lambda2, &run.mixup, rng)?;
    let total = loss.total.item()?;
    if !total.is_finite() {
        return Err(Error::numeric("step_intermediate", format!("non-finite loss {total}")));
    }
    let grads = tape.backward(&loss.total)?;
    opt.step(params, &bound, &grads)?;
    Ok(total)
}

/// Embeds patches at the given pixels without recording gradients.
/// Returns one embedding row per pixel.
fn embed_coords(
    params: &EncoderParams,
    enc: &EncoderConfig,
    ds: &CubeDataset,
    coords: &[(usize, usize)],
) -> Result<Tensor> {
    let bound = params.bind_frozen();
    let mut tape = Tape::new();
    let mut rows = Vec::with_capacity(coords.len());
    for &(y, x) in coords {
        let patch = ds.extract_patch(y, x)?;
        rows.push(encode(&mut tape, &patch, &bound, enc)?.z);
    }
    Tensor::stack_rows(&rows)
}

/// Meta-trains an encoder on episodes from the source cube.
///
/// The backbone trains for the first `warmup_episodes` episodes and is
/// frozen for the rest, leaving only the adapter tensors live. Returns the
/// trained parameters and the per-episode loss trace.
pub fn run_source_phase(run: &RunConfig, source: &CubeDataset) -> Result<(EncoderParams, Vec<f64>)> {
    run.validate()?;
    check_encoder_dataset(&run.encoder, source, "source")?;
    let mut params = EncoderParams::init(&run.encoder, run.seed)?;
    let mut opt = Sgd::new(run.lr, run.momentum)?;
    let mut rng = stream_rng(run.seed, STREAM_SOURCE);
    let pool = source.pool();
    let mut trace = Vec::with_capacity(run.e_source);
    for ep in 0..run.e_source {
        if ep == run.warmup_episodes {
            params.freeze_backbone();
        }
        let episode = sample_episode(&pool, run.n_way, run.k_shot, run.q_query, &mut rng)?;
        let loss = step_source(&mut params, &mut opt, run, &episode, &mut rng)
            .map_err(|e| annotate_step(e, "run_source_phase", ep, &params))?;
        trace.push(loss);
    }
    Ok((params, trace))
}

/// Per-epoch record of the intermediate phase.
#[derive(Clone, Debug)]
pub struct ScheduleEpoch {
    pub epoch: usize,
    /// Mixing ratio in force during this epoch's episodes.
    pub lambda2: f64,
    /// Distance-weighting factor measured at epoch end (0 when unmeasured).
    pub q: f64,
    pub d_source: f64,
    pub d_target: f64,
    pub ft_loss_mean: f64,
    /// Mean cross-domain episode loss; 0 when no episodes ran.
    pub inner_loss_mean: f64,
    /// Pseudo-labels accepted per local target class.
    pub pseudo_counts: Vec<usize>,
}

/// Adapted parameters plus the per-epoch schedule trace.
#[derive(Clone, Debug)]
pub struct AdaptOutcome {
    pub params: EncoderParams,
    pub schedule: Vec<ScheduleEpoch>,
}

/// Nearest-prototype scores for a pool of embeddings, optionally smoothed
/// over the joint support/pool similarity graph in bounded batches.
fn pool_scores(
    run: &RunConfig,
    support_emb: &Tensor,
    support_labels: &[usize],
    pool_emb: &Tensor,
    n_classes: usize,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let protos = prototypes(&mut tape, support_emb, support_labels, n_classes)?;
    let probs = classify(&mut tape, pool_emb, &protos)?;
    if !run.smoothing {
        return Ok(probs);
    }
    let init = argmax_rows(&probs)?;
    let (n, d) = pool_emb.dims2("pool_scores")?;
    let mut out = Vec::with_capacity(n * n_classes);
    let mut start = 0;
    while start < n {
        let end = (start + run.smooth_batch).min(n);
        let batch = Tensor::new(
            vec![end - start, d],
            pool_emb.data()[start * d..end * d].to_vec(),
        )?;
        let scores = smooth_scores(
            support_emb,
            support_labels,
            &batch,
            &init[start..end],
            n_classes,
            &run.propagation,
        )?;
        out.extend_from_slice(scores.data());
        start = end;
    }
    Tensor::new(vec![n, n_classes], out)
}

/// Builds the target-side episode for one cross-domain training step:
/// full support set as support, up to `q_query` pseudo-labeled pixels per
/// class as queries.
fn target_episode(
    support: &SupportSet,
    support_patches: &[(Tensor, usize)],
    pseudo: &[Vec<(usize, usize)>],
    target: &CubeDataset,
    q_query: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Episode> {
    let mut query = Vec::new();
    for (class, members) in pseudo.iter().enumerate() {
        if members.is_empty() {
            continue;
        }
        let take = members.len().min(q_query);
        for i in crate::episodic::choose_indices(members.len(), take, rng) {
            let (y, x) = members[i];
            query.push((target.extract_patch(y, x)?, QueryLabel::Pseudo(class)));
        }
    }
    Ok(Episode {
        n_way: support.class_ids.len(),
        support: support_patches.to_vec(),
        query,
        class_ids: support.class_ids.iter().map(|&id| id as usize).collect(),
    })
}

/// Measures embedding distances of ratio-mixed probes to each domain and
/// advances the schedule. Returns `(q, d_source, d_target)`.
fn advance_schedule(
    run: &RunConfig,
    schedule: &mut MixupSchedule,
    params: &EncoderParams,
    source: &CubeDataset,
    target: &CubeDataset,
    src_coords: &[(usize, usize)],
    tgt_coords: &[(usize, usize)],
    rng: &mut ChaCha8Rng,
) -> Result<(f64, f64, f64)> {
    let m = run.probes.min(src_coords.len()).min(tgt_coords.len());
    if m == 0 {
        schedule.advance(0.0, 0.0, run.mixup.tau)?;
        return Ok((schedule.q, 0.0, 0.0));
    }
    let src_pick = crate::episodic::choose_indices(src_coords.len(), m, rng);
    let tgt_pick = crate::episodic::choose_indices(tgt_coords.len(), m, rng);
    let bound = params.bind_frozen();
    let mut tape = Tape::new();
    let enc = &run.encoder;
    let mut src_emb = Vec::with_capacity(m);
    let mut tgt_emb = Vec::with_capacity(m);
    let mut mix_emb = Vec::with_capacity(m);
    for (&si, &ti) in src_pick.iter().zip(&tgt_pick) {
        let xs = source.extract_patch(src_coords[si].0, src_coords[si].1)?;
        let xt = target.extract_patch(tgt_coords[ti].0, tgt_coords[ti].1)?;
        let xm = mix_values(&xs, &xt, schedule.lambda2)?;
        src_emb.push(encode(&mut tape, &xs, &bound, enc)?.z);
        tgt_emb.push(encode(&mut tape, &xt, &bound, enc)?.z);
        mix_emb.push(encode(&mut tape, &xm, &bound, enc)?.z);
    }
    let d_source = domain_distance(&mix_emb, &src_emb, run.mixup.projections, rng)?;
    let d_target = domain_distance(&mix_emb, &tgt_emb, run.mixup.projections, rng)?;
    schedule.advance(d_source, d_target, run.mixup.tau)?;
    Ok((schedule.q, d_source, d_target))
}

/// Adapts source-trained parameters to a target cube from `k_shot` labeled
/// pixels per class.
///
/// Each outer epoch: fine-tune on support splits, pseudo-label a pool of
/// unlabeled pixels, train on cross-domain mixed episodes at the current
/// ratio, then advance the ratio from measured distances. The backbone is
/// frozen throughout; only adapter tensors move.
pub fn run_intermediate_phase(
    run: &RunConfig,
    source: &CubeDataset,
    target: &CubeDataset,
    mut params: EncoderParams,
    trial: u64,
) -> Result<AdaptOutcome> {
    run.validate()?;
    check_encoder_dataset(&run.encoder, source, "source")?;
    check_encoder_dataset(&run.encoder, target, "target")?;

    let support = draw_support(target, run.k_shot, run.seed, trial)?;
    let c_t = support.class_ids.len();
    if c_t < 2 {
        return Err(Error::insufficient(format!(
            "target cube has {c_t} labeled classes, adaptation needs at least 2"
        )));
    }
    let support_patches = support.patches(target)?;
    let support_pixels = support.pixels();
    let support_labels = support.labels();

    params.freeze_backbone();
    let mut opt = Sgd::new(run.lr, run.momentum)?;
    let mut rng = stream_rng(run.seed, STREAM_ADAPT + trial);
    let mut schedule = MixupSchedule::new(run.e_outer)?;
    let source_pool = source.pool();

    // Unlabeled-side candidates: labeled pixels outside the support set, in
    // raster order so smoothing batches group spatial neighborhoods rather
    // than encoding any label structure. Labels are not consulted past this
    // point.
    let excluded = support.pixel_set();
    let mut pool_coords: Vec<(usize, usize)> = Vec::new();
    for pixels in target.class_pixels().values() {
        pool_coords.extend(pixels.iter().filter(|p| !excluded.contains(p)));
    }
    pool_coords.sort_unstable();
    let src_probe_coords: Vec<(usize, usize)> =
        source.class_pixels().values().flatten().copied().collect();

    let mut trace = Vec::with_capacity(run.e_outer);
    for epoch in 0..run.e_outer {
        let lambda_used = schedule.lambda2;

        let mut ft_sum = 0.0;
        for s in 0..run.ft_steps {
            let (sub_s, sub_q) =
                split_support(&support_patches, run.k_sub_support, run.k_sub_query, &mut rng)?;
            let episode = Episode {
                n_way: c_t,
                support: sub_s,
                query: sub_q.into_iter().map(|(x, c)| (x, QueryLabel::True(c))).collect(),
                class_ids: support.class_ids.iter().map(|&id| id as usize).collect(),
            };
            let loss = step_source(&mut params, &mut opt, run, &episode, &mut rng)
                .map_err(|e| annotate_step(e, "run_intermediate_phase", epoch * run.ft_steps + s, &params))?;
            ft_sum += loss;
        }
        let ft_loss_mean = if run.ft_steps > 0 { ft_sum / run.ft_steps as f64 } else { 0.0 };

        // Re-label the pool under the current embedding, keeping only the
        // most confident picks per class.
        let mut pseudo: Vec<Vec<(usize, usize)>> = vec![Vec::new(); c_t];
        if run.e_inner > 0 && !pool_coords.is_empty() {
            // Strided subsample with a random phase: keeps the raster order
            // (so batches stay spatially coherent) while rotating coverage
            // across epochs.
            let sampled: Vec<(usize, usize)> = if pool_coords.len() > run.pseudo_pool {
                let stride = pool_coords.len() as f64 / run.pseudo_pool as f64;
                let phase: f64 = rng.random_range(0.0..stride);
                (0..run.pseudo_pool)
                    .map(|i| {
                        let at = (phase + i as f64 * stride) as usize;
                        pool_coords[at.min(pool_coords.len() - 1)]
                    })
                    .collect()
            } else {
                pool_coords.clone()
            };
            let support_emb = embed_coords(&params, &run.encoder, target, &support_pixels)?;
            let pool_emb = embed_coords(&params, &run.encoder, target, &sampled)?;
            let scores = pool_scores(run, &support_emb, &support_labels, &pool_emb, c_t)?;
            for sel in select_top_k(&scores, run.pseudo_per_class)? {
                pseudo[sel.class].push(sampled[sel.node]);
            }
        }
        let pseudo_counts: Vec<usize> = pseudo.iter().map(|v| v.len()).collect();

        let mut inner_sum = 0.0;
        let mut inner_ran = 0usize;
        if run.e_inner > 0 && pseudo_counts.iter().any(|&c| c > 0) {
            for e in 0..run.e_inner {
                let source_ep =
                    sample_episode(&source_pool, run.n_way, run.k_shot, run.q_query, &mut rng)?;
                let target_ep = target_episode(
                    &support,
                    &support_patches,
                    &pseudo,
                    target,
                    run.q_query,
                    &mut rng,
                )?;
                let loss = step_intermediate(
                    &mut params,
                    &mut opt,
                    run,
                    &source_ep,
                    &target_ep,
                    lambda_used,
                    &mut rng,
                )
                .map_err(|err| {
                    annotate_step(err, "run_intermediate_phase", epoch * run.e_inner + e, &params)
                })?;
                inner_sum += loss;
                inner_ran += 1;
            }
        }
        let inner_loss_mean = if inner_ran > 0 { inner_sum / inner_ran as f64 } else { 0.0 };

        let (q, d_source, d_target) = if run.e_inner > 0 {
            advance_schedule(
                run,
                &mut schedule,
                &params,
                source,
                target,
                &src_probe_coords,
                &pool_coords,
                &mut rng,
            )?
        } else {
            // No mixing stage: the ratio holds, the epoch still counts.
            schedule.advance(0.0, 0.0, run.mixup.tau)?;
            (schedule.q, 0.0, 0.0)
        };

        trace.push(ScheduleEpoch {
            epoch,
            lambda2: lambda_used,
            q,
            d_source,
            d_target,
            ft_loss_mean,
            inner_loss_mean,
            pseudo_counts,
        });
    }

    Ok(AdaptOutcome { params, schedule: trace })
}

/// Evaluation of one trial: accuracy metrics, the confusion matrix over
/// local target classes, and the predicted class-id raster (0 where a
/// pixel was unlabeled or spent on support).
#[derive(Clone, Debug)]
pub struct TrialEval {
    pub class_ids: Vec<u16>,
    pub confusion: ConfusionMatrix,
    pub metrics: Metrics,
    pub predicted: Vec<u16>,
    pub scored: usize,
}

/// Scores every labeled target pixel outside the trial's support set.
///
/// Predictions come from nearest-prototype scores against the support
/// embeddings, graph-smoothed per batch when smoothing is on.
pub fn evaluate(
    run: &RunConfig,
    params: &EncoderParams,
    target: &CubeDataset,
    trial: u64,
) -> Result<TrialEval> {
    run.validate()?;
    check_encoder_dataset(&run.encoder, target, "target")?;
    let support = draw_support(target, run.k_shot, run.seed, trial)?;
    let c_t = support.class_ids.len();
    let excluded = support.pixel_set();

    let local_of = |id: u16| support.class_ids.binary_search(&id);
    let mut coords = Vec::new();
    let mut truth = Vec::new();
    for y in 0..target.height {
        for x in 0..target.width {
            let l = target.label(y, x);
            if l == 0 || excluded.contains(&(y, x)) {
                continue;
            }
            let local = local_of(l).map_err(|_| {
                Error::contract("evaluate", format!("label {l} missing from support classes"))
            })?;
            coords.push((y, x));
            truth.push(local);
        }
    }
    // Support/evaluation disjointness is load-bearing; check it outright.
    if coords.iter().any(|p| excluded.contains(p)) {
        return Err(Error::contract("evaluate", "scored pixel overlaps support set"));
    }
    if coords.is_empty() {
        return Err(Error::insufficient("no labeled pixels left outside the support set"));
    }

    let support_emb = embed_coords(params, &run.encoder, target, &support.pixels())?;
    let support_labels = support.labels();
    let mut tape = Tape::new();
    let protos = prototypes(&mut tape, &support_emb, &support_labels, c_t)?;

    let mut cm = ConfusionMatrix::new(c_t);
    let mut predicted = vec![0u16; target.height * target.width];
    let mut offset = 0;
    for batch in coords.chunks(run.smooth_batch.max(1)) {
        let emb = embed_coords(params, &run.encoder, target, batch)?;
        let probs = classify(&mut tape, &emb, &protos)?;
        let init = argmax_rows(&probs)?;
        let classes = if run.smoothing {
            smooth_predictions(&support_emb, &support_labels, &emb, &init, c_t, &run.propagation)?
        } else {
            init
        };
        for (i, (&(y, x), &class)) in batch.iter().zip(&classes).enumerate() {
            predicted[y * target.width + x] = support.class_ids[class];
            cm.record(truth[offset + i], class)?;
        }
        offset += batch.len();
    }

    let metrics = metrics(&cm)?;
    Ok(TrialEval {
        class_ids: support.class_ids,
        confusion: cm,
        metrics,
        predicted,
        scored: coords.len(),
    })
}

/// One adaptation trial end to end: adapt a copy of the source-trained
/// parameters, then evaluate on everything the support draw left over.
#[derive(Clone, Debug)]
pub struct TrialOutput {
    pub trial: u64,
    pub eval: TrialEval,
    pub schedule: Vec<ScheduleEpoch>,
}

pub fn run_trial(
    run: &RunConfig,
    source: &CubeDataset,
    target: &CubeDataset,
    source_params: &EncoderParams,
    trial: u64,
) -> Result<TrialOutput> {
    let outcome = run_intermediate_phase(run, source, target, source_params.clone(), trial)?;
    let eval = evaluate(run, &outcome.params, target, trial)?;
    Ok(TrialOutput {
        trial,
        eval,
        schedule: outcome.schedule,
    })
}

/// Full run: one source training pass shared by `trials` independent
/// adaptation trials, each with its own support draw.
#[derive(Clone, Debug)]
pub struct PipelineOutput {
    pub source_params: EncoderParams,
    pub source_trace: Vec<f64>,
    pub trials: Vec<TrialOutput>,
}

pub fn run_pipeline(
    run: &RunConfig,
    source: &CubeDataset,
    target: &CubeDataset,
) -> Result<PipelineOutput> {
    let (source_params, source_trace) = run_source_phase(run, source)?;
    let mut trials = Vec::with_capacity(run.trials);
    for t in 0..run.trials {
        trials.push(run_trial(run, source, target, &source_params, t as u64)?);
    }
    Ok(PipelineOutput {
        source_params,
        source_trace,
        trials,
    })
}
