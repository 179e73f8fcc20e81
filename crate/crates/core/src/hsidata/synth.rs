//! Seeded synthetic source/target cube pairs for end-to-end pipeline tests.
//!
//! Each class gets a spectral signature built from a few Gaussian bumps over
//! the band axis. Spatial layout is a Voronoi partition around random region
//! seeds, modulated by a smooth illumination field. The target domain reuses
//! the first `target_classes` signature families under a fixed affine
//! per-band distortion plus band-correlated noise, so the two domains share
//! semantics but not statistics. Setting the distortion knobs to zero yields
//! a near-identical pair, which is the control case for transfer tests.

use std::collections::BTreeMap;
use std::f64::consts::TAU;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

use super::CubeDataset;

#[derive(Clone, Debug)]
pub struct GeneratorSpec {
    pub height: usize,
    pub width: usize,
    pub bands: usize,
    /// Distinct classes in the source cube (ids 1..=source_classes).
    pub source_classes: usize,
    /// Classes in the target cube; class j borrows source signature j but
    /// gets id source_classes + j, so the id ranges never overlap.
    pub target_classes: usize,
    /// Voronoi regions drawn per class.
    pub regions_per_class: usize,
    /// Extra regions left unlabeled (background, id 0).
    pub background_regions: usize,
    /// Gaussian bumps per class signature.
    pub signature_bumps: usize,
    /// Per-pixel multiplicative gain jitter (standard deviation).
    pub gain_jitter: f64,
    /// Independent per-band noise (standard deviation).
    pub noise_sigma: f64,
    /// Band-correlated noise on the target domain (standard deviation).
    pub corr_noise_sigma: f64,
    /// Amplitude of the target's smooth spatial drift: a band-correlated
    /// displacement field that varies slowly across the raster, so distant
    /// pixels of one class form separate modes.
    pub drift_amp: f64,
    /// Amplitude of the target's multiplicative per-band distortion.
    pub distortion_gain: f64,
    /// Amplitude of the target's additive per-band distortion.
    pub distortion_offset: f64,
    /// Amplitude of the smooth illumination field.
    pub spatial_amp: f64,
    /// Regenerate region seeds until every class holds at least this many
    /// pixels; fail after 64 attempts.
    pub min_class_pixels: usize,
    /// Patch radius stamped on the generated datasets.
    pub patch_radius: usize,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        GeneratorSpec {
            height: 64,
            width: 64,
            bands: 48,
            source_classes: 12,
            target_classes: 6,
            regions_per_class: 3,
            background_regions: 4,
            signature_bumps: 3,
            gain_jitter: 0.05,
            noise_sigma: 0.01,
            corr_noise_sigma: 0.05,
            drift_amp: 1.6,
            distortion_gain: 0.60,
            distortion_offset: 0.20,
            spatial_amp: 0.12,
            min_class_pixels: 25,
            patch_radius: 4,
        }
    }
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        let positive: [(&str, usize); 7] = [
            ("height", self.height),
            ("width", self.width),
            ("bands", self.bands),
            ("source_classes", self.source_classes),
            ("target_classes", self.target_classes),
            ("regions_per_class", self.regions_per_class),
            ("signature_bumps", self.signature_bumps),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(Error::config(key, "must be positive"));
            }
        }
        if self.target_classes > self.source_classes {
            return Err(Error::config(
                "target_classes",
                format!(
                    "{} exceeds source_classes {}",
                    self.target_classes, self.source_classes
                ),
            ));
        }
        if self.source_classes > u16::MAX as usize / 2 {
            return Err(Error::config("source_classes", "exceeds the label id range"));
        }
        for (key, v) in [
            ("gain_jitter", self.gain_jitter),
            ("noise_sigma", self.noise_sigma),
            ("corr_noise_sigma", self.corr_noise_sigma),
            ("drift_amp", self.drift_amp),
            ("distortion_gain", self.distortion_gain),
            ("distortion_offset", self.distortion_offset),
            ("spatial_amp", self.spatial_amp),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::config(key, format!("must be finite and non-negative, got {v}")));
            }
        }
        if self.patch_radius >= self.height.min(self.width) {
            return Err(Error::config("patch_radius", "too large for the raster"));
        }
        Ok(())
    }
}

/// Generate a (source, target) cube pair. The same spec and seed always
/// produce bit-identical cubes.
pub fn synth_domain_pair(spec: &GeneratorSpec, seed: u64) -> Result<(CubeDataset, CubeDataset)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let signatures = gen_signatures(spec, &mut rng);
    let phase_gain: f64 = rng.random_range(0.0..TAU);
    let phase_gain_hi: f64 = rng.random_range(0.0..TAU);
    let phase_offset: f64 = rng.random_range(0.0..TAU);

    let source_labels = voronoi_labels(spec, spec.source_classes, &mut rng)?;
    let target_local = voronoi_labels(spec, spec.target_classes, &mut rng)?;

    let source_field = SpatialField::draw(spec, &mut rng);
    let target_field = SpatialField::draw(spec, &mut rng);

    // Two gain harmonics: the slow one re-tilts the spectrum, the fast one
    // (period ~12 bands) decorrelates neighboring bands so the distortion
    // cannot be absorbed as a plain brightness change.
    let bands = spec.bands;
    let gamma: Vec<f64> = (0..bands)
        .map(|b| {
            let t = TAU * b as f64 / bands as f64;
            1.0 + spec.distortion_gain
                * (0.5 * (t + phase_gain).sin() + 0.5 * (4.0 * t + phase_gain_hi).sin())
        })
        .collect();
    let delta: Vec<f64> = (0..bands)
        .map(|b| spec.distortion_offset * (TAU * b as f64 / bands as f64 + phase_offset).cos())
        .collect();

    let mut source_data = Vec::with_capacity(spec.height * spec.width * bands);
    for (idx, &label) in source_labels.iter().enumerate() {
        let (y, x) = (idx / spec.width, idx % spec.width);
        let sig = signature_for(&signatures, label);
        let field = source_field.at(y, x);
        let gain = pixel_gain(spec, &mut rng);
        for b in 0..bands {
            let noise: f64 = rng.sample::<f64, _>(StandardNormal) * spec.noise_sigma;
            source_data.push(sig[b] * gain * field + noise);
        }
    }

    let drift = DriftBank::draw(spec, &mut rng);

    let mut target_data = Vec::with_capacity(spec.height * spec.width * bands);
    let mut white = vec![0.0f64; bands];
    for (idx, &label) in target_local.iter().enumerate() {
        let (y, x) = (idx / spec.width, idx % spec.width);
        let sig = signature_for(&signatures, label);
        let field = target_field.at(y, x);
        let gain = pixel_gain(spec, &mut rng);
        for w in white.iter_mut() {
            *w = rng.sample(StandardNormal);
        }
        let weights = drift.weights(y, x);
        for b in 0..bands {
            let base = sig[b] * gain * field;
            let noise: f64 = rng.sample::<f64, _>(StandardNormal) * spec.noise_sigma;
            let corr = spec.corr_noise_sigma * moving_average(&white, b);
            target_data.push(gamma[b] * base + delta[b] + corr + drift.at(&weights, b) + noise);
        }
    }

    let mut source_names = BTreeMap::new();
    for c in 1..=spec.source_classes {
        source_names.insert(c as u16, format!("source_{c:02}"));
    }
    let mut target_names = BTreeMap::new();
    let offset = spec.source_classes as u16;
    for c in 1..=spec.target_classes {
        target_names.insert(offset + c as u16, format!("target_{c:02}"));
    }
    let target_labels: Vec<u16> = target_local
        .iter()
        .map(|&l| if l == 0 { 0 } else { offset + l })
        .collect();

    let source = CubeDataset::new(
        spec.height,
        spec.width,
        bands,
        source_data,
        source_labels,
        source_names,
        spec.patch_radius,
    )?;
    let target = CubeDataset::new(
        spec.height,
        spec.width,
        bands,
        target_data,
        target_labels,
        target_names,
        spec.patch_radius,
    )?;
    Ok((source, target))
}

/// Signatures indexed by class - 1, plus a bland background signature at the
/// end. All values stay positive.
fn gen_signatures(spec: &GeneratorSpec, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let bands = spec.bands as f64;
    let mut sigs = Vec::with_capacity(spec.source_classes + 1);
    for _ in 0..=spec.source_classes {
        let baseline = rng.random_range(0.10..0.20);
        let mut sig = vec![baseline; spec.bands];
        for _ in 0..spec.signature_bumps {
            let amp = rng.random_range(0.4..1.0);
            let center = rng.random_range(0.0..bands);
            let widthf = rng.random_range(bands / 20.0..bands / 6.0);
            for (b, v) in sig.iter_mut().enumerate() {
                let d = (b as f64 - center) / widthf;
                *v += amp * (-0.5 * d * d).exp();
            }
        }
        sigs.push(sig);
    }
    // flatten the background signature so it stays spectrally bland
    if let Some(bg) = sigs.last_mut() {
        for v in bg.iter_mut() {
            *v = 0.25 + 0.25 * (*v - 0.25);
        }
    }
    sigs
}

fn signature_for<'a>(sigs: &'a [Vec<f64>], label: u16) -> &'a [f64] {
    if label == 0 {
        sigs.last().unwrap()
    } else {
        &sigs[label as usize - 1]
    }
}

fn pixel_gain(spec: &GeneratorSpec, rng: &mut ChaCha8Rng) -> f64 {
    (1.0 + spec.gain_jitter * rng.sample::<f64, _>(StandardNormal)).max(0.2)
}

/// Nearest-seed Voronoi class raster with local labels 1..=n_classes and
/// background 0; redraws seed positions until every class is big enough.
fn voronoi_labels(spec: &GeneratorSpec, n_classes: usize, rng: &mut ChaCha8Rng) -> Result<Vec<u16>> {
    let n_seeds = n_classes * spec.regions_per_class + spec.background_regions;
    for _attempt in 0..64 {
        let seeds: Vec<(f64, f64, u16)> = (0..n_seeds)
            .map(|s| {
                let y = rng.random_range(0.0..spec.height as f64);
                let x = rng.random_range(0.0..spec.width as f64);
                let class = if s < n_classes * spec.regions_per_class {
                    (s % n_classes + 1) as u16
                } else {
                    0
                };
                (y, x, class)
            })
            .collect();
        let mut labels = Vec::with_capacity(spec.height * spec.width);
        let mut counts = vec![0usize; n_classes + 1];
        for y in 0..spec.height {
            for x in 0..spec.width {
                let mut best = 0usize;
                let mut best_d = f64::INFINITY;
                for (s, &(sy, sx, _)) in seeds.iter().enumerate() {
                    let d = (y as f64 - sy).powi(2) + (x as f64 - sx).powi(2);
                    if d < best_d {
                        best_d = d;
                        best = s;
                    }
                }
                let class = seeds[best].2;
                counts[class as usize] += 1;
                labels.push(class);
            }
        }
        if counts[1..].iter().all(|&c| c >= spec.min_class_pixels) {
            return Ok(labels);
        }
    }
    Err(Error::insufficient(format!(
        "could not place {n_classes} classes with at least {} pixels each on a {}x{} raster",
        spec.min_class_pixels, spec.height, spec.width
    )))
}

/// Smooth multiplicative illumination: 1 + a sin(2π(fx x/W + px)) cos(2π(fy y/H + py)).
struct SpatialField {
    amp: f64,
    fx: f64,
    fy: f64,
    px: f64,
    py: f64,
    inv_w: f64,
    inv_h: f64,
}

impl SpatialField {
    fn draw(spec: &GeneratorSpec, rng: &mut ChaCha8Rng) -> Self {
        SpatialField {
            amp: spec.spatial_amp,
            fx: rng.random_range(1..=2) as f64,
            fy: rng.random_range(1..=2) as f64,
            px: rng.random_range(0.0..1.0),
            py: rng.random_range(0.0..1.0),
            inv_w: 1.0 / spec.width as f64,
            inv_h: 1.0 / spec.height as f64,
        }
    }

    fn at(&self, y: usize, x: usize) -> f64 {
        let sx = (TAU * (self.fx * x as f64 * self.inv_w + self.px)).sin();
        let cy = (TAU * (self.fy * y as f64 * self.inv_h + self.py)).cos();
        1.0 + self.amp * sx * cy
    }
}

/// A small bank of band-correlated displacement vectors, each modulated by
/// its own smooth zero-mean spatial wave. The superposition moves the target
/// spectra coherently over scales of tens of pixels: one class ends up as a
/// few displaced modes instead of a single tight cluster.
struct DriftBank {
    amp: f64,
    inv_w: f64,
    inv_h: f64,
    /// Per-component displacement spectrum, already smoothed along bands.
    vectors: Vec<Vec<f64>>,
    waves: Vec<DriftWave>,
}

struct DriftWave {
    fx: f64,
    fy: f64,
    px: f64,
    py: f64,
}

impl DriftBank {
    const COMPONENTS: usize = 4;

    fn draw(spec: &GeneratorSpec, rng: &mut ChaCha8Rng) -> Self {
        let mut vectors = Vec::with_capacity(Self::COMPONENTS);
        let mut waves = Vec::with_capacity(Self::COMPONENTS);
        for _ in 0..Self::COMPONENTS {
            let white: Vec<f64> =
                (0..spec.bands).map(|_| rng.sample(StandardNormal)).collect();
            vectors.push((0..spec.bands).map(|b| moving_average(&white, b)).collect());
            waves.push(DriftWave {
                fx: rng.random_range(1..=3) as f64,
                fy: rng.random_range(1..=3) as f64,
                px: rng.random_range(0.0..1.0),
                py: rng.random_range(0.0..1.0),
            });
        }
        DriftBank {
            amp: spec.drift_amp / (Self::COMPONENTS as f64).sqrt(),
            inv_w: 1.0 / spec.width as f64,
            inv_h: 1.0 / spec.height as f64,
            vectors,
            waves,
        }
    }

    /// Spatial weight of every component at (y, x).
    fn weights(&self, y: usize, x: usize) -> Vec<f64> {
        self.waves
            .iter()
            .map(|w| {
                let sx = (TAU * (w.fx * x as f64 * self.inv_w + w.px)).sin();
                let cy = (TAU * (w.fy * y as f64 * self.inv_h + w.py)).cos();
                sx * cy
            })
            .collect()
    }

    fn at(&self, weights: &[f64], b: usize) -> f64 {
        self.amp
            * weights
                .iter()
                .zip(&self.vectors)
                .map(|(w, v)| w * v[b])
                .sum::<f64>()
    }
}

/// 5-tap moving average along the band axis, window clamped at the ends.
fn moving_average(w: &[f64], b: usize) -> f64 {
    let lo = b.saturating_sub(2);
    let hi = (b + 2).min(w.len() - 1);
    let sum: f64 = w[lo..=hi].iter().sum();
    sum / (hi - lo + 1) as f64
}
