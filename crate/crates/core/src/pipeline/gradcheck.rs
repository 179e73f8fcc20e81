//! Finite-difference verification of the encoder's analytic gradients.
//!
//! The check builds a small batch of random patches, takes the loss
//! `sum(z^2)` over their embeddings, and compares the taped gradient of
//! every trainable tensor against central finite differences at a sample
//! of coordinates. The relative error uses a floored denominator so that
//! near-zero gradients are compared absolutely instead of amplifying
//! finite-difference noise.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use crate::encoder::{encode, EncoderConfig, EncoderParams};
use crate::error::Result;
use crate::tensor::{Tape, Tensor};

/// Comparison outcome for one parameter tensor.
#[derive(Clone, Debug)]
pub struct GroupCheck {
    pub name: String,
    /// Coordinates compared; 0 when the tensor was skipped as frozen.
    pub checked: usize,
    pub worst_rel: f64,
    pub skipped: bool,
}

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub groups: Vec<GroupCheck>,
}

impl GradcheckReport {
    /// Worst relative error over all checked coordinates.
    pub fn worst(&self) -> f64 {
        self.groups
            .iter()
            .filter(|g| !g.skipped)
            .map(|g| g.worst_rel)
            .fold(0.0, f64::max)
    }

    pub fn checked(&self) -> usize {
        self.groups.iter().map(|g| g.checked).sum()
    }

    pub fn pass(&self, tol: f64) -> bool {
        self.checked() > 0 && self.worst() <= tol
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for g in &self.groups {
            if g.skipped {
                out.push_str(&format!("{} skipped (frozen)\n", g.name));
            } else {
                out.push_str(&format!("{} checked={} worst_rel={:.3e}\n", g.name, g.checked, g.worst_rel));
            }
        }
        out.push_str(&format!("total checked={} worst_rel={:.3e}\n", self.checked(), self.worst()));
        out
    }
}

/// Relative error with a floored denominator: tiny gradients compare
/// absolutely at the floor instead of dividing by ~0.
fn rel_err(analytic: f64, fd: f64) -> f64 {
    (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-4)
}

fn make_patches(enc: &EncoderConfig, seed: u64, count: usize) -> Result<Vec<Tensor>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xa5a5_a5a5);
    let shape = vec![enc.input_size, enc.input_size, enc.bands];
    let numel = enc.input_size * enc.input_size * enc.bands;
    (0..count)
        .map(|_| {
            let data: Vec<f64> = (0..numel).map(|_| rng.random_range(0.0..1.0)).collect();
            Tensor::new(shape.clone(), data)
        })
        .collect()
}

/// Loss value without any gradient recording.
fn loss_value(params: &EncoderParams, enc: &EncoderConfig, patches: &[Tensor]) -> Result<f64> {
    let bound = params.bind_frozen();
    let mut tape = Tape::new();
    let mut total = 0.0;
    for p in patches {
        let z = encode(&mut tape, p, &bound, enc)?.z;
        total += z.data().iter().map(|v| v * v).sum::<f64>();
    }
    Ok(total)
}

/// Taped gradients of the same loss for every trainable tensor.
pub(crate) fn analytic_grads(
    params: &EncoderParams,
    enc: &EncoderConfig,
    patches: &[Tensor],
) -> Result<BTreeMap<String, Vec<f64>>> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let mut loss: Option<Tensor> = None;
    for p in patches {
        let z = encode(&mut tape, p, &bound, enc)?.z;
        let sq = tape.mul(&z, &z)?;
        let s = tape.sum(&sq)?;
        loss = Some(match loss {
            Some(acc) => tape.add(&acc, &s)?,
            None => s,
        });
    }
    let loss = loss.ok_or_else(|| crate::error::Error::contract("gradcheck", "no patches"))?;
    let grads = tape.backward(&loss)?;
    let mut out = BTreeMap::new();
    for (name, traced) in bound.traced() {
        out.insert(name.to_string(), grads.get(traced)?.data().to_vec());
    }
    Ok(out)
}

/// Central finite difference of the loss along one coordinate.
pub(crate) fn fd_grad(
    params: &EncoderParams,
    enc: &EncoderConfig,
    patches: &[Tensor],
    name: &str,
    index: usize,
    h: f64,
) -> Result<f64> {
    let base = params.value(name)?.clone();
    let bump = |delta: f64| -> Result<f64> {
        let mut data = base.data().to_vec();
        data[index] += delta;
        let mut probe = params.clone();
        probe.set_value(name, Tensor::new(base.shape().to_vec(), data)?)?;
        loss_value(&probe, enc, patches)
    };
    Ok((bump(h)? - bump(-h)?) / (2.0 * h))
}

/// Runs the full check. `frozen` freezes the backbone first, so only
/// adapter tensors are compared and the rest are reported as skipped.
/// `coords_per_tensor` bounds the finite-difference work per tensor;
/// coordinates are sampled at an even stride.
pub fn run_gradcheck(
    enc: &EncoderConfig,
    seed: u64,
    frozen: bool,
    coords_per_tensor: usize,
    h: f64,
) -> Result<GradcheckReport> {
    enc.validate()?;
    let mut params = EncoderParams::init(enc, seed)?;
    if frozen {
        params.freeze_backbone();
    }
    let patches = make_patches(enc, seed, 2)?;
    let analytic = analytic_grads(&params, enc, &patches)?;

    let names: Vec<(String, bool, usize)> = params
        .iter()
        .map(|(n, p)| (n.to_string(), p.trainable, p.value.numel()))
        .collect();
    let mut groups = Vec::with_capacity(names.len());
    for (name, trainable, numel) in names {
        if !trainable {
            groups.push(GroupCheck {
                name,
                checked: 0,
                worst_rel: 0.0,
                skipped: true,
            });
            continue;
        }
        let grad = &analytic[&name];
        let take = coords_per_tensor.max(1).min(numel);
        let stride = numel.div_ceil(take);
        let mut worst = 0.0_f64;
        let mut checked = 0;
        let mut k = 0;
        while k < numel && checked < take {
            let fd = fd_grad(&params, enc, &patches, &name, k, h)?;
            worst = worst.max(rel_err(grad[k], fd));
            checked += 1;
            k += stride;
        }
        groups.push(GroupCheck {
            name,
            checked,
            worst_rel: worst,
            skipped: false,
        });
    }
    Ok(GradcheckReport { groups })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> EncoderConfig {
        EncoderConfig {
            depth: 1,
            embed_dim: 8,
            heads: 2,
            mlp_dim: 8,
            patch_size: 3,
            input_size: 3,
            spectral_tokens: 2,
            bands: 4,
        }
    }

    #[test]
    fn full_parameter_set_matches_finite_differences() {
        let enc = tiny_config();
        let report = run_gradcheck(&enc, 5, false, 3, 1e-5).unwrap();
        assert!(report.groups.iter().all(|g| !g.skipped));
        assert!(report.groups.iter().all(|g| g.checked > 0));
        assert!(
            report.worst() <= 1e-4,
            "worst relative error {:.3e}\n{}",
            report.worst(),
            report.render()
        );
    }

    #[test]
    fn frozen_backbone_reports_skips_and_checks_adapters() {
        let enc = tiny_config();
        let report = run_gradcheck(&enc, 5, true, 3, 1e-5).unwrap();
        for g in &report.groups {
            let adapter = crate::encoder::is_adapter_name(&g.name);
            assert_eq!(g.skipped, !adapter, "{} skip status", g.name);
        }
        assert!(report.checked() > 0);
        assert!(report.worst() <= 1e-4, "{}", report.render());
        assert!(report.pass(1e-3));
    }

    #[test]
    fn corrupted_gradient_is_flagged() {
        let enc = tiny_config();
        let params = EncoderParams::init(&enc, 5).unwrap();
        let patches = make_patches(&enc, 5, 2).unwrap();
        let analytic = analytic_grads(&params, &enc, &patches).unwrap();
        let fd = fd_grad(&params, &enc, &patches, "head.proj", 0, 1e-5).unwrap();
        let honest = rel_err(analytic["head.proj"][0], fd);
        let corrupted = rel_err(analytic["head.proj"][0] + 0.5, fd);
        assert!(honest <= 1e-4, "honest comparison should pass, got {honest:.3e}");
        assert!(corrupted > 1e-2, "corruption must be flagged, got {corrupted:.3e}");
    }

    #[test]
    fn report_rendering_and_determinism() {
        let enc = tiny_config();
        let a = run_gradcheck(&enc, 9, true, 2, 1e-5).unwrap();
        let b = run_gradcheck(&enc, 9, true, 2, 1e-5).unwrap();
        assert_eq!(a.render(), b.render());
        assert!(a.render().contains("skipped (frozen)"));
        assert!(a.render().contains("total checked="));
    }
}
