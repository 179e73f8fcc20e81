//! Declarative run configuration: one flat `key = value` file drives every
//! stage, so a run is fully described by (config, seed).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::hsidata::GeneratorSpec;
use crate::mixup::MixupConfig;
use crate::pseudolabel::{PropagationConfig, SigmaMode};

#[derive(Clone, Debug)]
pub struct RunConfig {
    /// Master seed; every random stream in the pipeline derives from it.
    pub seed: u64,
    /// Independent repetitions of the adapt/evaluate protocol.
    pub trials: usize,
    /// Classes per episode.
    pub n_way: usize,
    /// Labeled support samples per class.
    pub k_shot: usize,
    /// Query samples per class per episode.
    pub q_query: usize,
    /// Source-training episodes.
    pub e_source: usize,
    /// Source episodes with the full backbone trainable; from this episode
    /// on, only adapter parameters receive gradients.
    pub warmup_episodes: usize,
    /// Outer adaptation epochs (support tuning + pseudo-labels + schedule).
    pub e_outer: usize,
    /// Mixup episodes per outer epoch. Zero disables the cross-domain
    /// mixing stage entirely (support tuning still runs).
    pub e_inner: usize,
    /// Support fine-tuning steps per outer epoch.
    pub ft_steps: usize,
    /// Support split: sub-support size per class.
    pub k_sub_support: usize,
    /// Support split: sub-query size per class.
    pub k_sub_query: usize,
    /// Pseudo-labeled samples kept per predicted class.
    pub pseudo_per_class: usize,
    /// Upper bound on query pixels scored for pseudo-labels per epoch.
    pub pseudo_pool: usize,
    /// Samples embedded per domain when measuring domain distances.
    pub probes: usize,
    /// Learning rate for stochastic gradient descent.
    pub lr: f64,
    /// Momentum coefficient.
    pub momentum: f64,
    /// Maximum rows per graph-smoothing batch.
    pub smooth_batch: usize,
    /// Graph-smooth pseudo-labels and test-time predictions. Disabling
    /// falls back to raw nearest-prototype decisions everywhere.
    pub smoothing: bool,
    pub mixup: MixupConfig,
    pub propagation: PropagationConfig,
    pub encoder: EncoderConfig,
    pub generator: GeneratorSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        let generator = GeneratorSpec::default();
        let mut encoder = EncoderConfig::default();
        // The bundled defaults must cohere: the encoder consumes exactly
        // what the generator produces.
        encoder.bands = generator.bands;
        encoder.input_size = 2 * generator.patch_radius + 1;
        let mut propagation = PropagationConfig::default();
        // Pipeline graphs hold several classes, so the raw pairwise median
        // sits at the between-class distance; shrink the bandwidth to keep
        // the affinity matrix block-structured.
        propagation.sigma_scale = 0.08;
        RunConfig {
            seed: 42,
            trials: 20,
            n_way: 6,
            k_shot: 5,
            q_query: 5,
            e_source: 300,
            warmup_episodes: 300,
            e_outer: 5,
            e_inner: 100,
            ft_steps: 30,
            k_sub_support: 3,
            k_sub_query: 2,
            pseudo_per_class: 15,
            pseudo_pool: 512,
            probes: 32,
            lr: 1e-2,
            momentum: 0.9,
            smooth_batch: 256,
            smoothing: true,
            mixup: MixupConfig::default(),
            propagation,
            encoder,
            generator,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::config(key, format!("cannot parse `{value}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" => Ok(true),
        "false" => Ok(false),
        other => Err(Error::config(key, format!("expected true or false, got `{other}`"))),
    }
}

impl RunConfig {
    /// Apply one `key = value` override.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse_num(key, value)?,
            "trials" => self.trials = parse_num(key, value)?,
            "n_way" => self.n_way = parse_num(key, value)?,
            "k_shot" => self.k_shot = parse_num(key, value)?,
            "q_query" => self.q_query = parse_num(key, value)?,
            "e_source" => self.e_source = parse_num(key, value)?,
            "warmup_episodes" => self.warmup_episodes = parse_num(key, value)?,
            "e_outer" => self.e_outer = parse_num(key, value)?,
            "e_inner" => self.e_inner = parse_num(key, value)?,
            "ft_steps" => self.ft_steps = parse_num(key, value)?,
            "k_sub_support" => self.k_sub_support = parse_num(key, value)?,
            "k_sub_query" => self.k_sub_query = parse_num(key, value)?,
            "pseudo_per_class" => self.pseudo_per_class = parse_num(key, value)?,
            "pseudo_pool" => self.pseudo_pool = parse_num(key, value)?,
            "probes" => self.probes = parse_num(key, value)?,
            "lr" => self.lr = parse_num(key, value)?,
            "momentum" => self.momentum = parse_num(key, value)?,
            "smooth_batch" => self.smooth_batch = parse_num(key, value)?,
            "smoothing" => self.smoothing = parse_bool(key, value)?,

            "mixup_alpha" => self.mixup.beta_alpha = parse_num(key, value)?,
            "mixup_tau" => self.mixup.tau = parse_num(key, value)?,
            "mixup_sigma" => self.mixup.sigma_perturb = parse_num(key, value)?,
            "mixup_projections" => self.mixup.projections = parse_num(key, value)?,

            "prop_alpha" => self.propagation.alpha = parse_num(key, value)?,
            "prop_sigma" => {
                self.propagation.sigma = if value.trim() == "median" {
                    SigmaMode::Median
                } else {
                    SigmaMode::Fixed(parse_num(key, value)?)
                }
            }
            "prop_sigma_scale" => self.propagation.sigma_scale = parse_num(key, value)?,
            "prop_ridge" => self.propagation.ridge_eps = parse_num(key, value)?,
            "prop_max_iters" => self.propagation.max_iters = parse_num(key, value)?,
            "prop_tol" => self.propagation.conv_tol = parse_num(key, value)?,

            "enc_depth" => self.encoder.depth = parse_num(key, value)?,
            "enc_embed_dim" => self.encoder.embed_dim = parse_num(key, value)?,
            "enc_heads" => self.encoder.heads = parse_num(key, value)?,
            "enc_mlp_dim" => self.encoder.mlp_dim = parse_num(key, value)?,
            "enc_patch_size" => self.encoder.patch_size = parse_num(key, value)?,
            "enc_input_size" => self.encoder.input_size = parse_num(key, value)?,
            "enc_spectral_tokens" => self.encoder.spectral_tokens = parse_num(key, value)?,
            "enc_bands" => self.encoder.bands = parse_num(key, value)?,

            "gen_height" => self.generator.height = parse_num(key, value)?,
            "gen_width" => self.generator.width = parse_num(key, value)?,
            "gen_bands" => self.generator.bands = parse_num(key, value)?,
            "gen_source_classes" => self.generator.source_classes = parse_num(key, value)?,
            "gen_target_classes" => self.generator.target_classes = parse_num(key, value)?,
            "gen_regions_per_class" => self.generator.regions_per_class = parse_num(key, value)?,
            "gen_background_regions" => {
                self.generator.background_regions = parse_num(key, value)?
            }
            "gen_signature_bumps" => self.generator.signature_bumps = parse_num(key, value)?,
            "gen_gain_jitter" => self.generator.gain_jitter = parse_num(key, value)?,
            "gen_noise_sigma" => self.generator.noise_sigma = parse_num(key, value)?,
            "gen_corr_noise_sigma" => self.generator.corr_noise_sigma = parse_num(key, value)?,
            "gen_drift_amp" => self.generator.drift_amp = parse_num(key, value)?,
            "gen_distortion_gain" => self.generator.distortion_gain = parse_num(key, value)?,
            "gen_distortion_offset" => self.generator.distortion_offset = parse_num(key, value)?,
            "gen_spatial_amp" => self.generator.spatial_amp = parse_num(key, value)?,
            "gen_min_class_pixels" => self.generator.min_class_pixels = parse_num(key, value)?,
            "gen_patch_radius" => self.generator.patch_radius = parse_num(key, value)?,

            other => return Err(Error::config(other, "unknown configuration key")),
        }
        Ok(())
    }

    /// Parse a config text: one `key = value` per line, `#` comments. Keys
    /// not mentioned keep their defaults; `warmup_episodes` defaults to
    /// `e_source` when absent.
    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        let mut pairs: Vec<(String, String)> = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::config(
                    format!("line {}", lineno + 1),
                    format!("expected `key = value`, got `{line}`"),
                ));
            };
            pairs.push((key.trim().to_string(), value.trim().to_string()));
        }
        let mut seen: BTreeMap<String, ()> = BTreeMap::new();
        for (key, _) in &pairs {
            if seen.insert(key.clone(), ()).is_some() {
                return Err(Error::config(key.clone(), "key appears twice"));
            }
        }
        for (key, value) in &pairs {
            cfg.set(key, value)?;
        }
        if !seen.contains_key("warmup_episodes") {
            cfg.warmup_episodes = cfg.e_source;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<RunConfig> {
        let path = path.as_ref();
        let text =
            fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        RunConfig::parse(&text)
    }

    /// Cross-field validation; every failure names the offending key.
    pub fn validate(&self) -> Result<()> {
        for (key, v) in [
            ("trials", self.trials),
            ("n_way", self.n_way),
            ("k_shot", self.k_shot),
            ("q_query", self.q_query),
            ("ft_steps", self.ft_steps),
            ("pseudo_per_class", self.pseudo_per_class),
            ("pseudo_pool", self.pseudo_pool),
            ("probes", self.probes),
            ("smooth_batch", self.smooth_batch),
            ("e_outer", self.e_outer),
        ] {
            if v == 0 {
                return Err(Error::config(key, "must be positive"));
            }
        }
        if self.n_way < 2 {
            return Err(Error::config("n_way", "episodes need at least two classes"));
        }
        if self.warmup_episodes > self.e_source {
            return Err(Error::config(
                "warmup_episodes",
                format!("{} exceeds e_source {}", self.warmup_episodes, self.e_source),
            ));
        }
        if self.k_sub_support + self.k_sub_query != self.k_shot {
            return Err(Error::config(
                "k_sub_support",
                format!(
                    "support split {}+{} must equal k_shot {}",
                    self.k_sub_support, self.k_sub_query, self.k_shot
                ),
            ));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::config("lr", format!("must be positive and finite, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(
                "momentum",
                format!("must lie in [0, 1), got {}", self.momentum),
            ));
        }
        self.mixup.validate()?;
        self.propagation.validate()?;
        self.encoder.validate()?;
        self.generator.validate()?;
        Ok(())
    }
}
