//! Episodic few-shot machinery: N-way/K-shot episode sampling, prototype
//! construction, nearest-prototype classification, and evaluation metrics.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor};

/// Label attached to a query sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QueryLabel {
    /// Ground-truth episode-local class.
    True(usize),
    /// Propagation-assigned episode-local class.
    Pseudo(usize),
    Unlabeled,
}

impl QueryLabel {
    /// Class index usable as a training target, if any.
    pub fn class(&self) -> Option<usize> {
        match *self {
            QueryLabel::True(c) | QueryLabel::Pseudo(c) => Some(c),
            QueryLabel::Unlabeled => None,
        }
    }
}

/// One few-shot task: a balanced labeled support set and a query set over
/// the same `n_way` episode-local classes. `class_ids` maps local class
/// index back to the dataset's class id.
#[derive(Debug)]
pub struct Episode {
    pub n_way: usize,
    pub support: Vec<(Tensor, usize)>,
    pub query: Vec<(Tensor, QueryLabel)>,
    pub class_ids: Vec<usize>,
}

/// Source of labeled samples grouped by class. Implementations fetch
/// samples lazily so pools over large rasters stay cheap.
pub trait SamplePool {
    fn n_classes(&self) -> usize;
    /// Dataset-level id of the class at `class_index`.
    fn class_id(&self, class_index: usize) -> usize;
    fn class_len(&self, class_index: usize) -> usize;
    fn fetch(&self, class_index: usize, sample_index: usize) -> Result<Tensor>;
}

/// In-memory pool, mainly for tests and small intermediate sets.
pub struct VecPool {
    pub classes: Vec<(usize, Vec<Tensor>)>,
}

impl SamplePool for VecPool {
    fn n_classes(&self) -> usize {
        self.classes.len()
    }
    fn class_id(&self, class_index: usize) -> usize {
        self.classes[class_index].0
    }
    fn class_len(&self, class_index: usize) -> usize {
        self.classes[class_index].1.len()
    }
    fn fetch(&self, class_index: usize, sample_index: usize) -> Result<Tensor> {
        Ok(self.classes[class_index].1[sample_index].detach())
    }
}

/// First `take` elements of a seeded partial Fisher-Yates shuffle of `0..len`.
pub(crate) fn choose_indices(len: usize, take: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    debug_assert!(take <= len);
    let mut idx: Vec<usize> = (0..len).collect();
    for i in 0..take {
        let j = rng.random_range(i..len);
        idx.swap(i, j);
    }
    idx.truncate(take);
    idx
}

/// Draw an N-way, K-shot episode with Q queries per class. Classes and
/// samples are drawn without replacement; query labels are ground truth.
pub fn sample_episode(
    pool: &dyn SamplePool,
    n_way: usize,
    k_shot: usize,
    q_query: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Episode> {
    if n_way == 0 || k_shot == 0 {
        return Err(Error::contract(
            "sample_episode",
            format!("n_way={n_way}, k_shot={k_shot} must be positive"),
        ));
    }
    if pool.n_classes() < n_way {
        return Err(Error::insufficient(format!(
            "episode needs {n_way} classes but the pool has {}",
            pool.n_classes()
        )));
    }
    let class_choice = choose_indices(pool.n_classes(), n_way, rng);
    let mut support = Vec::with_capacity(n_way * k_shot);
    let mut query = Vec::with_capacity(n_way * q_query);
    let mut class_ids = Vec::with_capacity(n_way);
    for (local, &ci) in class_choice.iter().enumerate() {
        let avail = pool.class_len(ci);
        if avail < k_shot + q_query {
            return Err(Error::insufficient(format!(
                "class {} has {avail} samples, episode needs {}",
                pool.class_id(ci),
                k_shot + q_query
            )));
        }
        let picks = choose_indices(avail, k_shot + q_query, rng);
        for &s in &picks[..k_shot] {
            support.push((pool.fetch(ci, s)?, local));
        }
        for &s in &picks[k_shot..] {
            query.push((pool.fetch(ci, s)?, QueryLabel::True(local)));
        }
        class_ids.push(pool.class_id(ci));
    }
    Ok(Episode {
        n_way,
        support,
        query,
        class_ids,
    })
}

/// One-hot rows for episode-local class labels.
pub fn one_hot(labels: &[usize], n_classes: usize) -> Result<Tensor> {
    let mut data = vec![0.0; labels.len() * n_classes];
    for (i, &c) in labels.iter().enumerate() {
        if c >= n_classes {
            return Err(Error::contract(
                "one_hot",
                format!("label {c} out of range for {n_classes} classes"),
            ));
        }
        data[i * n_classes + c] = 1.0;
    }
    Tensor::new(vec![labels.len(), n_classes], data)
}

/// Class prototypes: the mean embedding per class, rows ordered by class.
/// Differentiable when `embeddings` is traced.
pub fn prototypes(
    tape: &mut Tape,
    embeddings: &Tensor,
    labels: &[usize],
    n_classes: usize,
) -> Result<Tensor> {
    tape.group_mean_rows(embeddings, labels, n_classes)
}

/// Soft nearest-prototype classification: softmax over negated squared
/// Euclidean distances. Rows are probability distributions.
pub fn classify(tape: &mut Tape, embeddings: &Tensor, protos: &Tensor) -> Result<Tensor> {
    let d = tape.pairwise_sqdist(embeddings, protos)?;
    let neg = tape.scale(&d, -1.0)?;
    tape.softmax_rows(&neg)
}

/// Maps a sample to its embedding row under the recording tape.
pub type Embedder<'a> = dyn FnMut(&mut Tape, &Tensor) -> Result<Tensor> + 'a;

/// Embed every support and query sample of an episode. Returns stacked
/// support embeddings with labels, and stacked query embeddings.
pub fn embed_episode(
    tape: &mut Tape,
    embed: &mut Embedder,
    episode: &Episode,
) -> Result<(Tensor, Vec<usize>, Tensor)> {
    let mut srows = Vec::with_capacity(episode.support.len());
    let mut slabels = Vec::with_capacity(episode.support.len());
    for (x, c) in &episode.support {
        srows.push(embed(tape, x)?);
        slabels.push(*c);
    }
    let mut qrows = Vec::with_capacity(episode.query.len());
    for (x, _) in &episode.query {
        qrows.push(embed(tape, x)?);
    }
    let s = tape.stack_rows(&srows)?;
    let q = tape.stack_rows(&qrows)?;
    Ok((s, slabels, q))
}

/// Few-shot episodic loss: mean negative log-probability of the true class
/// of every query under nearest-prototype classification.
pub fn fsl_loss(tape: &mut Tape, embed: &mut Embedder, episode: &Episode) -> Result<Tensor> {
    let labels = episode
        .query
        .iter()
        .map(|(_, l)| {
            l.class().ok_or_else(|| {
                Error::contract("fsl_loss", "query sample has no usable label")
            })
        })
        .collect::<Result<Vec<_>>>()?;
    if labels.is_empty() {
        return Err(Error::contract("fsl_loss", "episode has no query samples"));
    }
    let (s, slabels, q) = embed_episode(tape, embed, episode)?;
    let protos = prototypes(tape, &s, &slabels, episode.n_way)?;
    let probs = classify(tape, &q, &protos)?;
    let targets = one_hot(&labels, episode.n_way)?;
    tape.cross_entropy(&probs, &targets)
}

/// Square confusion matrix over episode-local or dataset-local class
/// indices; rows are truth, columns are predictions.
#[derive(Clone, Debug)]
pub struct ConfusionMatrix {
    n: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(n: usize) -> Self {
        ConfusionMatrix {
            n,
            counts: vec![0; n * n],
        }
    }

    pub fn from_counts(rows: &[Vec<u64>]) -> Result<Self> {
        let n = rows.len();
        let mut counts = Vec::with_capacity(n * n);
        for row in rows {
            if row.len() != n {
                return Err(Error::contract(
                    "confusion.from_counts",
                    "matrix must be square",
                ));
            }
            counts.extend_from_slice(row);
        }
        Ok(ConfusionMatrix { n, counts })
    }

    pub fn n_classes(&self) -> usize {
        self.n
    }

    pub fn record(&mut self, truth: usize, pred: usize) -> Result<()> {
        if truth >= self.n || pred >= self.n {
            return Err(Error::contract(
                "confusion.record",
                format!("({truth},{pred}) out of range for {} classes", self.n),
            ));
        }
        self.counts[truth * self.n + pred] += 1;
        Ok(())
    }

    pub fn count(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.n + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn row_total(&self, truth: usize) -> u64 {
        self.counts[truth * self.n..(truth + 1) * self.n].iter().sum()
    }

    pub fn col_total(&self, pred: usize) -> u64 {
        (0..self.n).map(|t| self.counts[t * self.n + pred]).sum()
    }
}

/// Overall accuracy, average (per-class) accuracy, and Cohen's kappa.
/// Classes absent from the truth are skipped by AA and reported as `None`.
#[derive(Clone, Debug)]
pub struct Metrics {
    pub oa: f64,
    pub aa: f64,
    pub kappa: f64,
    pub per_class: Vec<Option<f64>>,
}

pub fn metrics(cm: &ConfusionMatrix) -> Result<Metrics> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::contract("metrics", "empty confusion matrix"));
    }
    let totalf = total as f64;
    let trace: u64 = (0..cm.n).map(|i| cm.count(i, i)).sum();
    let oa = trace as f64 / totalf;

    let mut per_class = Vec::with_capacity(cm.n);
    let mut aa_sum = 0.0;
    let mut aa_n = 0usize;
    for c in 0..cm.n {
        let row = cm.row_total(c);
        if row == 0 {
            per_class.push(None);
        } else {
            let acc = cm.count(c, c) as f64 / row as f64;
            per_class.push(Some(acc));
            aa_sum += acc;
            aa_n += 1;
        }
    }
    let aa = aa_sum / aa_n as f64;

    let pe: f64 = (0..cm.n)
        .map(|c| cm.row_total(c) as f64 * cm.col_total(c) as f64)
        .sum::<f64>()
        / (totalf * totalf);
    // degenerate marginals: all mass in one class for truth and prediction
    let kappa = if (1.0 - pe).abs() < 1e-15 {
        if (1.0 - oa).abs() < 1e-15 {
            1.0
        } else {
            0.0
        }
    } else {
        (oa - pe) / (1.0 - pe)
    };

    Ok(Metrics {
        oa,
        aa,
        kappa,
        per_class,
    })
}
