//! Encoder forward pass, written entirely against the recording tape so the
//! same code serves training (with whatever subset of parameters is bound as
//! trainable) and pure evaluation (nothing bound, nothing recorded).

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor};

use super::{Branch, EncoderConfig, TapeParams};

/// Layer-norm stabilizer.
pub const LN_EPS: f64 = 1e-5;

/// Tile a `[S, S, C]` patch into `(S/patch_size)²` flattened tokens, row-major
/// tile order. Pure value shuffling; the input is treated as a constant.
pub fn spatial_tokenize(patch: &Tensor, config: &EncoderConfig) -> Result<Tensor> {
    let s = config.input_size;
    let c = config.bands;
    expect_patch_shape(patch, config)?;
    let ps = config.patch_size;
    let tiles = s / ps;
    let mut data = Vec::with_capacity(config.n_spatial_tokens() * config.spatial_token_dim());
    for ty in 0..tiles {
        for tx in 0..tiles {
            for dy in 0..ps {
                let y = ty * ps + dy;
                for dx in 0..ps {
                    let x = tx * ps + dx;
                    let base = (y * s + x) * c;
                    data.extend_from_slice(&patch.data()[base..base + c]);
                }
            }
        }
    }
    Tensor::new(
        vec![config.n_spatial_tokens(), config.spatial_token_dim()],
        data,
    )
}

/// Average the channel axis into `n_spec` contiguous balanced groups and
/// flatten each averaged plane: `[S, S, C]` becomes `[n_spec, S·S]`. The
/// first `C mod n_spec` groups take the extra channel.
pub fn spectral_group_rows(patch: &Tensor, n_spec: usize) -> Result<Tensor> {
    let dims = patch.shape();
    if dims.len() != 3 {
        return Err(Error::InvalidShape {
            op: "spectral_group_rows",
            shape: dims.to_vec(),
            detail: "expected a [height, width, bands] patch".to_string(),
        });
    }
    let (h, w, c) = (dims[0], dims[1], dims[2]);
    if n_spec == 0 || n_spec > c {
        return Err(Error::config(
            "spectral_tokens",
            format!("{n_spec} outside 1..={c}"),
        ));
    }
    let base = c / n_spec;
    let rem = c % n_spec;
    let mut data = Vec::with_capacity(n_spec * h * w);
    let mut start = 0usize;
    for g in 0..n_spec {
        let size = base + usize::from(g < rem);
        for p in 0..h * w {
            let px = &patch.data()[p * c..(p + 1) * c];
            let sum: f64 = px[start..start + size].iter().sum();
            data.push(sum / size as f64);
        }
        start += size;
    }
    Tensor::new(vec![n_spec, h * w], data)
}

/// Spectral tokens embedded to the model width: group, then apply the
/// spectral embedding map and bias.
pub fn spectral_tokenize(
    tape: &mut Tape,
    patch: &Tensor,
    params: &TapeParams,
    config: &EncoderConfig,
) -> Result<Tensor> {
    expect_patch_shape(patch, config)?;
    let rows = spectral_group_rows(patch, config.spectral_tokens)?;
    let e = tape.matmul(&rows, params.get("spec.embed.w")?)?;
    tape.add_row(&e, params.get("spec.embed.b")?)
}

fn expect_patch_shape(patch: &Tensor, config: &EncoderConfig) -> Result<()> {
    let want = [config.input_size, config.input_size, config.bands];
    if patch.shape() != want {
        return Err(Error::InvalidShape {
            op: "encode",
            shape: patch.shape().to_vec(),
            detail: format!("expected a {want:?} patch"),
        });
    }
    Ok(())
}

fn head_param<'a>(
    params: &'a TapeParams,
    branch: Branch,
    layer: usize,
    head: usize,
    which: &str,
) -> Result<&'a Tensor> {
    params.get(&format!("{}.l{layer}.h{head}.{which}", branch.prefix()))
}

/// Pre-softmax attention map of one head: Q·C·Kᵀ/√D'.
pub fn attention_logits(
    tape: &mut Tape,
    u: &Tensor,
    branch: Branch,
    layer: usize,
    head: usize,
    params: &TapeParams,
    config: &EncoderConfig,
) -> Result<Tensor> {
    let q = tape.matmul(u, head_param(params, branch, layer, head, "wq")?)?;
    let k = tape.matmul(u, head_param(params, branch, layer, head, "wk")?)?;
    let qc = tape.matmul(&q, head_param(params, branch, layer, head, "cp")?)?;
    let kt = tape.transpose(&k)?;
    let logits = tape.matmul(&qc, &kt)?;
    tape.scale(&logits, 1.0 / (config.head_dim() as f64).sqrt())
}

/// One attention head with its coalescent projection: softmax(Q·C·Kᵀ/√D')·V.
pub fn attention_cp(
    tape: &mut Tape,
    u: &Tensor,
    branch: Branch,
    layer: usize,
    head: usize,
    params: &TapeParams,
    config: &EncoderConfig,
) -> Result<Tensor> {
    let logits = attention_logits(tape, u, branch, layer, head, params, config)?;
    let weights = tape.softmax_rows(&logits)?;
    let v = tape.matmul(u, head_param(params, branch, layer, head, "wv")?)?;
    tape.matmul(&weights, &v)
}

/// Multi-head attention: concatenated head outputs projected back to D.
pub fn mhsa_cp(
    tape: &mut Tape,
    u: &Tensor,
    branch: Branch,
    layer: usize,
    params: &TapeParams,
    config: &EncoderConfig,
) -> Result<Tensor> {
    let heads: Vec<Tensor> = (0..config.heads)
        .map(|j| attention_cp(tape, u, branch, layer, j, params, config))
        .collect::<Result<_>>()?;
    let refs: Vec<&Tensor> = heads.iter().collect();
    let cat = tape.concat_cols(&refs)?;
    let p = branch.prefix();
    let projected = tape.matmul(&cat, params.get(&format!("{p}.l{layer}.proj.w"))?)?;
    tape.add_row(&projected, params.get(&format!("{p}.l{layer}.proj.b"))?)
}

/// Run `n_layers` pre-norm transformer blocks and the branch's final layer
/// norm over a `[N, D]` token matrix. Exposed separately so callers can
/// benchmark block cost at arbitrary token counts.
pub fn run_blocks(
    tape: &mut Tape,
    tokens: &Tensor,
    branch: Branch,
    n_layers: usize,
    params: &TapeParams,
    config: &EncoderConfig,
) -> Result<Tensor> {
    let p = branch.prefix();
    let mut u = tokens.clone();
    for i in 0..n_layers {
        let normed = tape.layer_norm(
            &u,
            params.get(&format!("{p}.l{i}.ln1.g"))?,
            params.get(&format!("{p}.l{i}.ln1.b"))?,
            LN_EPS,
        )?;
        let attended = mhsa_cp(tape, &normed, branch, i, params, config)?;
        let u1 = tape.add(&u, &attended)?;

        let normed2 = tape.layer_norm(
            &u1,
            params.get(&format!("{p}.l{i}.ln2.g"))?,
            params.get(&format!("{p}.l{i}.ln2.b"))?,
            LN_EPS,
        )?;
        let h = tape.matmul(&normed2, params.get(&format!("{p}.l{i}.ffn.w1"))?)?;
        let h = tape.add_row(&h, params.get(&format!("{p}.l{i}.ffn.b1"))?)?;
        let h = tape.gelu(&h)?;
        let h = tape.matmul(&h, params.get(&format!("{p}.l{i}.ffn.w2"))?)?;
        let h = tape.add_row(&h, params.get(&format!("{p}.l{i}.ffn.b2"))?)?;
        u = tape.add(&u1, &h)?;
    }
    tape.layer_norm(
        &u,
        params.get(&format!("{p}.ln_out.g"))?,
        params.get(&format!("{p}.ln_out.b"))?,
        LN_EPS,
    )
}

/// Encoder output: the fused embedding plus both branch token matrices.
#[derive(Clone, Debug)]
pub struct EmbeddingOutput {
    /// `[1, D]` fused embedding.
    pub z: Tensor,
    /// `[N_spat, D]` spatial branch tokens after the final layer norm.
    pub z_spat: Tensor,
    /// `[N_spec, D]` spectral branch tokens after the final layer norm.
    pub z_spec: Tensor,
}

/// Full forward pass over one `[S, S, C]` patch.
///
/// Spatial tokens run `depth` blocks; spectral tokens run `min(depth, 4)`
/// blocks. The pooled spectral feature is reduced, re-aligned and applied as
/// a `(1 + z')` channel gate on the spatial tokens; the gated tokens are
/// mean-pooled and linearly projected into the final embedding.
pub fn encode(
    tape: &mut Tape,
    patch: &Tensor,
    params: &TapeParams,
    config: &EncoderConfig,
) -> Result<EmbeddingOutput> {
    expect_patch_shape(patch, config)?;

    let tokens = spatial_tokenize(patch, config)?;
    let e = tape.matmul(&tokens, params.get("spat.embed.w")?)?;
    let e = tape.add_row(&e, params.get("spat.embed.b")?)?;
    let u0 = tape.add(&e, params.get("spat.pos")?)?;
    let z_spat = run_blocks(tape, &u0, Branch::Spatial, config.depth, params, config)?;

    let spec_e = spectral_tokenize(tape, patch, params, config)?;
    let s0 = tape.add(&spec_e, params.get("spec.pos")?)?;
    let z_spec = run_blocks(
        tape,
        &s0,
        Branch::Spectral,
        config.spectral_depth(),
        params,
        config,
    )?;

    let reduced = tape.matmul(&z_spec, params.get("sem.reduce")?)?;
    let pooled = tape.mean_axis(&reduced, 0)?;
    let z_prime = tape.matmul(&pooled, params.get("sem.align")?)?;
    let gate = tape.add_scalar(&z_prime, 1.0)?;
    let fused = tape.scale_cols(&z_spat, &gate)?;

    let pooled_fused = tape.mean_axis(&fused, 0)?;
    let z = tape.matmul(&pooled_fused, params.get("head.proj")?)?;
    if !z.all_finite() {
        return Err(Error::numeric("encode", "non-finite embedding"));
    }
    Ok(EmbeddingOutput { z, z_spat, z_spec })
}

/// The four corner blocks of a square attention map split after `n_real`
/// rows/columns, for inspecting how appended context interacts with real
/// tokens.
#[derive(Clone, Debug)]
pub struct AttentionBlocks {
    /// `[n_real, n_real]` interactions among the leading tokens.
    pub top_left: Tensor,
    /// `[n_real, p]` leading queries against trailing keys.
    pub top_right: Tensor,
    /// `[p, n_real]` trailing queries against leading keys.
    pub bottom_left: Tensor,
    /// `[p, p]` interactions among the trailing tokens.
    pub bottom_right: Tensor,
}

pub fn attention_block_decomposition(a: &Tensor, n_real: usize) -> Result<AttentionBlocks> {
    let (m, n) = a.dims2("attention_block_decomposition")?;
    if m != n {
        return Err(Error::InvalidShape {
            op: "attention_block_decomposition",
            shape: a.shape().to_vec(),
            detail: "attention map must be square".to_string(),
        });
    }
    if n_real == 0 || n_real > m {
        return Err(Error::contract(
            "attention_block_decomposition",
            format!("split point {n_real} outside 1..={m}"),
        ));
    }
    let slice = |r0: usize, r1: usize, c0: usize, c1: usize| -> Result<Tensor> {
        let mut data = Vec::with_capacity((r1 - r0) * (c1 - c0));
        for i in r0..r1 {
            data.extend_from_slice(&a.data()[i * n + c0..i * n + c1]);
        }
        Tensor::new(vec![r1 - r0, c1 - c0], data)
    };
    Ok(AttentionBlocks {
        top_left: slice(0, n_real, 0, n_real)?,
        top_right: slice(0, n_real, n_real, m)?,
        bottom_left: slice(n_real, m, 0, n_real)?,
        bottom_right: slice(n_real, m, n_real, m)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderParams;
    use crate::tensor::{finite_diff_grad, rel_err};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_config() -> EncoderConfig {
        EncoderConfig {
            depth: 1,
            embed_dim: 8,
            heads: 2,
            mlp_dim: 12,
            patch_size: 1,
            input_size: 3,
            spectral_tokens: 3,
            bands: 6,
        }
    }

    fn random_patch(config: &EncoderConfig, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = config.input_size * config.input_size * config.bands;
        let data: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::new(vec![config.input_size, config.input_size, config.bands], data).unwrap()
    }

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::new(vec![rows, cols], data).unwrap()
    }

    // Naive attention oracle with its own softmax, independent of the tape.
    fn plain_attention_oracle(u: &Tensor, wq: &Tensor, wk: &Tensor, wv: &Tensor, c: &Tensor) -> Vec<f64> {
        let n = u.rows();
        let d = u.cols();
        let dh = wq.cols();
        let proj = |w: &Tensor, i: usize, a: usize| -> f64 {
            (0..d).map(|k| u.at(i, k) * w.at(k, a)).sum()
        };
        let mut out = vec![0.0; n * dh];
        for i in 0..n {
            // logits_ij = q_i^T C k_j / sqrt(dh), brute-force bilinear form
            let mut logits = vec![0.0; n];
            for (j, l) in logits.iter_mut().enumerate() {
                let mut s = 0.0;
                for a in 0..dh {
                    for b in 0..dh {
                        s += proj(wq, i, a) * c.at(a, b) * proj(wk, j, b);
                    }
                }
                *l = s / (dh as f64).sqrt();
            }
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let denom: f64 = exps.iter().sum();
            for a in 0..dh {
                let mut s = 0.0;
                for j in 0..n {
                    s += exps[j] / denom * proj(wv, j, a);
                }
                out[i * dh + a] = s;
            }
        }
        out
    }

    #[test]
    fn identity_cp_matches_the_plain_attention_oracle() {
        let config = tiny_config();
        let params = EncoderParams::init(&config, 5).unwrap();
        let bound = params.bind_frozen();
        let u = random_matrix(4, config.embed_dim, 9);

        let mut tape = Tape::new();
        let got = attention_cp(&mut tape, &u, Branch::Spatial, 0, 0, &bound, &config).unwrap();

        let oracle = plain_attention_oracle(
            &u,
            params.value("spat.l0.h0.wq").unwrap(),
            params.value("spat.l0.h0.wk").unwrap(),
            params.value("spat.l0.h0.wv").unwrap(),
            &Tensor::eye(config.head_dim()),
        );
        for (g, o) in got.data().iter().zip(&oracle) {
            assert!((g - o).abs() < 1e-12, "{g} vs {o}");
        }
    }

    #[test]
    fn random_cp_matches_the_bilinear_form_oracle() {
        let config = EncoderConfig {
            embed_dim: 8,
            heads: 2, // head_dim 4
            ..tiny_config()
        };
        let mut params = EncoderParams::init(&config, 6).unwrap();
        params
            .set_value("spat.l0.h1.cp", random_matrix(4, 4, 77))
            .unwrap();
        let bound = params.bind_frozen();
        let u = random_matrix(3, config.embed_dim, 10);

        let mut tape = Tape::new();
        let got = attention_cp(&mut tape, &u, Branch::Spatial, 0, 1, &bound, &config).unwrap();
        let oracle = plain_attention_oracle(
            &u,
            params.value("spat.l0.h1.wq").unwrap(),
            params.value("spat.l0.h1.wk").unwrap(),
            params.value("spat.l0.h1.wv").unwrap(),
            params.value("spat.l0.h1.cp").unwrap(),
        );
        for (g, o) in got.data().iter().zip(&oracle) {
            assert!((g - o).abs() < 1e-10, "{g} vs {o}");
        }
    }

    #[test]
    fn single_token_attention_returns_its_value_row() {
        let config = tiny_config();
        let params = EncoderParams::init(&config, 7).unwrap();
        let bound = params.bind_frozen();
        let u = random_matrix(1, config.embed_dim, 11);
        let mut tape = Tape::new();
        let got = attention_cp(&mut tape, &u, Branch::Spectral, 0, 0, &bound, &config).unwrap();
        let v = u
            .matmul(params.value("spec.l0.h0.wv").unwrap())
            .unwrap();
        for (g, o) in got.data().iter().zip(v.data()) {
            assert!((g - o).abs() < 1e-14);
        }
    }

    #[test]
    fn mhsa_decomposes_into_per_head_projected_contributions() {
        let config = tiny_config();
        let params = EncoderParams::init(&config, 8).unwrap();
        let bound = params.bind_frozen();
        let u = random_matrix(4, config.embed_dim, 12);
        let mut tape = Tape::new();
        let whole = mhsa_cp(&mut tape, &u, Branch::Spatial, 0, &bound, &config).unwrap();

        // block-structure oracle: concat([h0, h1]) · W = h0 · W[0..dh] + h1 · W[dh..]
        let dh = config.head_dim();
        let w = params.value("spat.l0.proj.w").unwrap();
        let b = params.value("spat.l0.proj.b").unwrap();
        let mut sum = Tensor::zeros(&[4, config.embed_dim]);
        for j in 0..config.heads {
            let hj = attention_cp(&mut tape, &u, Branch::Spatial, 0, j, &bound, &config).unwrap();
            let mut block = Vec::with_capacity(dh * config.embed_dim);
            for r in j * dh..(j + 1) * dh {
                for col in 0..config.embed_dim {
                    block.push(w.at(r, col));
                }
            }
            let wj = Tensor::new(vec![dh, config.embed_dim], block).unwrap();
            sum = sum.add(&hj.matmul(&wj).unwrap()).unwrap();
        }
        for i in 0..4 {
            for jc in 0..config.embed_dim {
                let want = sum.at(i, jc) + b.data()[jc];
                assert!((whole.at(i, jc) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn spectral_grouping_is_balanced_and_averages_constants() {
        // closed-form oracle for the group sizes: group i holds
        // floor((C + n - 1 - i) / n) channels
        let sizes_oracle = |c: usize, n: usize| -> Vec<usize> {
            (0..n).map(|i| (c + n - 1 - i) / n).collect()
        };
        assert_eq!(sizes_oracle(50, 8), vec![7, 7, 6, 6, 6, 6, 6, 6]);

        // recover the implementation's sizes by feeding channel-index values:
        // the group means reveal the boundaries
        let c = 50;
        let data: Vec<f64> = (0..c).map(|b| b as f64).collect();
        let patch = Tensor::new(vec![1, 1, c], data).unwrap();
        let rows = spectral_group_rows(&patch, 8).unwrap();
        let mut start = 0usize;
        for (g, size) in sizes_oracle(c, 8).into_iter().enumerate() {
            let want: f64 = (start..start + size).sum::<usize>() as f64 / size as f64;
            assert!((rows.at(g, 0) - want).abs() < 1e-12, "group {g}");
            start += size;
        }

        // one channel per token when C == n_spec
        let patch = Tensor::new(vec![1, 2, 4], vec![0., 1., 2., 3., 4., 5., 6., 7.]).unwrap();
        let rows = spectral_group_rows(&patch, 4).unwrap();
        assert_eq!(rows.shape(), &[4, 2]);
        assert_eq!(rows.data(), &[0., 4., 1., 5., 2., 6., 3., 7.]);

        // constant cube averages to the constant
        let patch = Tensor::full(&[2, 2, 4], 3.25);
        let rows = spectral_group_rows(&patch, 2).unwrap();
        assert!(rows.data().iter().all(|&v| (v - 3.25).abs() < 1e-15));

        // more tokens than channels is a config error
        assert!(spectral_group_rows(&patch, 5).is_err());
    }

    #[test]
    fn spatial_tokenizer_tiles_row_major() {
        let config = EncoderConfig {
            patch_size: 2,
            input_size: 4,
            bands: 1,
            spectral_tokens: 1,
            ..tiny_config()
        };
        let data: Vec<f64> = (0..16).map(|i| i as f64).collect();
        let patch = Tensor::new(vec![4, 4, 1], data).unwrap();
        let tokens = spatial_tokenize(&patch, &config).unwrap();
        assert_eq!(tokens.shape(), &[4, 4]);
        // tile (0,0) covers raster entries 0,1,4,5
        assert_eq!(tokens.row(0).unwrap().data(), &[0., 1., 4., 5.]);
        // tile (1,1) covers 10,11,14,15
        assert_eq!(tokens.row(3).unwrap().data(), &[10., 11., 14., 15.]);
    }

    #[test]
    fn encode_is_deterministic_and_finite() {
        let config = tiny_config();
        let params = EncoderParams::init(&config, 21).unwrap();
        let bound = params.bind_frozen();
        let patch = random_patch(&config, 3);
        let mut tape = Tape::new();
        let a = encode(&mut tape, &patch, &bound, &config).unwrap();
        let b = encode(&mut tape, &patch, &bound, &config).unwrap();
        assert_eq!(a.z, b.z);
        assert_eq!(a.z_spat, b.z_spat);
        assert_eq!(a.z_spec, b.z_spec);
        assert_eq!(a.z.shape(), &[1, config.embed_dim]);
        assert!(a.z.all_finite());
        // nothing was traced, so the tape stayed empty
        assert!(tape.is_empty());
    }

    #[test]
    fn zero_alignment_makes_fusion_an_identity() {
        let config = tiny_config();
        let mut params = EncoderParams::init(&config, 22).unwrap();
        params
            .set_value("sem.align", Tensor::zeros(&[config.sem_dim(), config.embed_dim]))
            .unwrap();
        let bound = params.bind_frozen();
        let patch = random_patch(&config, 4);
        let mut tape = Tape::new();
        let out = encode(&mut tape, &patch, &bound, &config).unwrap();
        // with z' = 0 the gate is 1, so z = mean(z_spat) · head.proj
        let want = out
            .z_spat
            .mean_axis(0)
            .unwrap()
            .matmul(params.value("head.proj").unwrap())
            .unwrap();
        for (g, o) in out.z.data().iter().zip(want.data()) {
            assert!((g - o).abs() < 1e-14);
        }
    }

    #[test]
    fn encode_rejects_mismatched_patches() {
        let config = tiny_config();
        let params = EncoderParams::init(&config, 23).unwrap();
        let bound = params.bind_frozen();
        let wrong = Tensor::zeros(&[3, 3, 5]);
        let mut tape = Tape::new();
        assert!(encode(&mut tape, &wrong, &bound, &config).is_err());
    }

    fn squared_norm_loss(
        config: &EncoderConfig,
        params: &EncoderParams,
        patch: &Tensor,
    ) -> (Tape, crate::tensor::GradientMap, super::super::TapeParams) {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let out = encode(&mut tape, patch, &bound, config).unwrap();
        let sq = tape.mul(&out.z, &out.z).unwrap();
        let loss = tape.sum(&sq).unwrap();
        let grads = tape.backward(&loss).unwrap();
        (tape, grads, bound)
    }

    #[test]
    fn embedding_gradients_match_finite_differences() {
        let config = tiny_config();
        let mut params = EncoderParams::init(&config, 31).unwrap();
        params.freeze_backbone();
        let patch = random_patch(&config, 6);

        let (_tape, grads, bound) = squared_norm_loss(&config, &params, &patch);
        for name in ["spat.l0.h0.cp", "sem.align", "head.proj"] {
            let analytic = grads.get(bound.get(name).unwrap()).unwrap();
            let base = params.value(name).unwrap().clone();
            let mut probe = params.clone();
            let fd = finite_diff_grad(
                |x| {
                    probe.set_value(name, x.clone())?;
                    let mut tape = Tape::new();
                    let b = probe.bind_frozen();
                    let out = encode(&mut tape, &patch, &b, &config)?;
                    Ok(out.z.data().iter().map(|v| v * v).sum())
                },
                &base,
                1e-5,
            )
            .unwrap();
            for (a, f) in analytic.data().iter().zip(fd.data()) {
                assert!(
                    rel_err(*a, *f) < 1e-4,
                    "{name}: analytic {a} vs finite difference {f}"
                );
            }
        }
    }

    #[test]
    fn head_gradients_are_independent() {
        let config = tiny_config();
        let mut params = EncoderParams::init(&config, 32).unwrap();
        params.freeze_backbone();
        let u = random_matrix(4, config.embed_dim, 40);

        // loss built from head 0 alone leaves head 1's CP gradient at zero
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let h0 = attention_cp(&mut tape, &u, Branch::Spatial, 0, 0, &bound, &config).unwrap();
        let sq = tape.mul(&h0, &h0).unwrap();
        let loss = tape.sum(&sq).unwrap();
        let grads = tape.backward(&loss).unwrap();

        let g0 = grads.get(bound.get("spat.l0.h0.cp").unwrap()).unwrap();
        let g1 = grads.get(bound.get("spat.l0.h1.cp").unwrap()).unwrap();
        assert!(g0.data().iter().any(|&v| v != 0.0));
        assert!(g1.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn frozen_parameters_receive_no_gradients() {
        let config = tiny_config();
        let mut params = EncoderParams::init(&config, 33).unwrap();
        params.freeze_backbone();
        let patch = random_patch(&config, 7);
        let (_tape, grads, bound) = squared_norm_loss(&config, &params, &patch);
        // frozen tensors were never watched, so the gradient map rejects them
        assert!(grads.get(bound.get("spat.l0.h0.wq").unwrap()).is_err());
        // trainable ones resolve fine
        assert!(grads.get(bound.get("spat.l0.h0.cp").unwrap()).is_ok());
    }

    #[test]
    fn block_decomposition_splits_in_reading_order() {
        let a = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let blocks = attention_block_decomposition(&a, 1).unwrap();
        assert_eq!(blocks.top_left.data(), &[1.0]);
        assert_eq!(blocks.top_right.data(), &[2.0]);
        assert_eq!(blocks.bottom_left.data(), &[3.0]);
        assert_eq!(blocks.bottom_right.data(), &[4.0]);

        // split at the full width: the map itself plus empty remainders
        let blocks = attention_block_decomposition(&a, 2).unwrap();
        assert_eq!(blocks.top_left, a);
        assert_eq!(blocks.top_right.shape(), &[2, 0]);
        assert_eq!(blocks.bottom_left.shape(), &[0, 2]);
        assert_eq!(blocks.bottom_right.shape(), &[0, 0]);

        assert!(attention_block_decomposition(&a, 0).is_err());
        assert!(attention_block_decomposition(&a, 3).is_err());
        let rect = Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap();
        assert!(attention_block_decomposition(&rect, 1).is_err());
    }

    #[test]
    fn rank_one_cp_perturbation_shifts_logits_by_the_outer_product()
    {
        let config = tiny_config();
        let mut params = EncoderParams::init(&config, 34).unwrap();
        let u = random_matrix(3, config.embed_dim, 50);
        let dh = config.head_dim();

        let mut tape = Tape::new();
        let before =
            attention_logits(&mut tape, &u, Branch::Spatial, 0, 0, &params.bind_frozen(), &config)
                .unwrap();

        // C = I + eps * e_0 e_0^T
        let eps = 1e-3;
        let mut c = Tensor::eye(dh).data().to_vec();
        c[0] += eps;
        params
            .set_value("spat.l0.h0.cp", Tensor::new(vec![dh, dh], c).unwrap())
            .unwrap();
        let after =
            attention_logits(&mut tape, &u, Branch::Spatial, 0, 0, &params.bind_frozen(), &config)
                .unwrap();

        // predicted shift: eps * q_i0 * k_j0 / sqrt(dh)
        let q = u.matmul(params.value("spat.l0.h0.wq").unwrap()).unwrap();
        let k = u.matmul(params.value("spat.l0.h0.wk").unwrap()).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let want = eps * q.at(i, 0) * k.at(j, 0) / (dh as f64).sqrt();
                let got = after.at(i, j) - before.at(i, j);
                assert!((got - want).abs() < 1e-12, "({i},{j}): {got} vs {want}");
            }
        }
    }
}
