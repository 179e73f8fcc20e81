//! Dual-branch transformer encoder over hyperspectral patches.
//!
//! A spatial branch attends over sub-patch tokens and a spectral branch over
//! channel-group tokens; a small fusion block gates the spatial features with
//! the pooled spectral signal. Every attention head carries a square
//! coalescent-projection (CP) matrix between its query and key maps. The CP
//! matrices start as exact identities, so the initial network is an ordinary
//! transformer; after backbone freezing they are the only trainable encoder
//! parameters besides the fusion and output heads, which keeps adaptation
//! cheap while leaving the frozen backbone bit-for-bit intact.

mod checkpoint;
mod forward;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use forward::{
    attention_block_decomposition, attention_cp, attention_logits, encode, mhsa_cp, run_blocks,
    spatial_tokenize, spectral_group_rows, spectral_tokenize, AttentionBlocks, EmbeddingOutput,
    LN_EPS,
};

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor};

/// Standard deviation of the Gaussian weight initialization.
const INIT_STD: f64 = 0.02;

/// Token streams of the encoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    Spatial,
    Spectral,
}

impl Branch {
    pub(crate) fn prefix(self) -> &'static str {
        match self {
            Branch::Spatial => "spat",
            Branch::Spectral => "spec",
        }
    }
}

#[derive(Clone, Debug)]
pub struct EncoderConfig {
    /// Transformer blocks per branch.
    pub depth: usize,
    /// Token width D.
    pub embed_dim: usize,
    /// Attention heads; must divide `embed_dim`.
    pub heads: usize,
    /// Hidden width of the feed-forward sublayer.
    pub mlp_dim: usize,
    /// Side length of one spatial token tile; must divide `input_size`.
    pub patch_size: usize,
    /// Side length of the input patch.
    pub input_size: usize,
    /// Number of spectral tokens; channels are grouped into this many bins.
    pub spectral_tokens: usize,
    /// Spectral channels the encoder expects.
    pub bands: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            depth: 2,
            embed_dim: 32,
            heads: 4,
            mlp_dim: 64,
            patch_size: 3,
            input_size: 9,
            spectral_tokens: 8,
            bands: 50,
        }
    }
}

impl EncoderConfig {
    /// Per-head width D' = D / h.
    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    /// Reduced width of the fusion bottleneck.
    pub fn sem_dim(&self) -> usize {
        self.embed_dim / 2
    }

    /// Spatial tokens per patch.
    pub fn n_spatial_tokens(&self) -> usize {
        let t = self.input_size / self.patch_size;
        t * t
    }

    /// Input width of one flattened spatial token.
    pub fn spatial_token_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.bands
    }

    /// Input width of one spectral token (a full band-averaged plane).
    pub fn spectral_token_dim(&self) -> usize {
        self.input_size * self.input_size
    }

    /// Spectral blocks actually executed in the forward pass.
    pub fn spectral_depth(&self) -> usize {
        self.depth.min(4)
    }

    pub fn validate(&self) -> Result<()> {
        for (key, v) in [
            ("depth", self.depth),
            ("embed_dim", self.embed_dim),
            ("heads", self.heads),
            ("mlp_dim", self.mlp_dim),
            ("patch_size", self.patch_size),
            ("input_size", self.input_size),
            ("spectral_tokens", self.spectral_tokens),
            ("bands", self.bands),
        ] {
            if v == 0 {
                return Err(Error::config(key, "must be positive"));
            }
        }
        if self.embed_dim % self.heads != 0 {
            return Err(Error::config(
                "heads",
                format!("{} does not divide embed_dim {}", self.heads, self.embed_dim),
            ));
        }
        if self.embed_dim % 2 != 0 {
            return Err(Error::config("embed_dim", "must be even for the fusion bottleneck"));
        }
        if self.input_size % self.patch_size != 0 {
            return Err(Error::config(
                "patch_size",
                format!("{} does not tile input_size {}", self.patch_size, self.input_size),
            ));
        }
        if self.spectral_tokens > self.bands {
            return Err(Error::config(
                "spectral_tokens",
                format!("{} exceeds band count {}", self.spectral_tokens, self.bands),
            ));
        }
        Ok(())
    }
}

/// One named parameter tensor and its current optimization status.
#[derive(Clone, Debug)]
pub struct Param {
    pub value: Tensor,
    pub trainable: bool,
}

/// How a parameter starts out.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum InitKind {
    Gauss,
    Zero,
    One,
    Identity,
}

/// Full parameter inventory of a config: (name, shape, init), in a fixed
/// construction order that also fixes the RNG draw order.
fn inventory(config: &EncoderConfig) -> Vec<(String, Vec<usize>, InitKind)> {
    let d = config.embed_dim;
    let dh = config.head_dim();
    let mut out = Vec::new();
    for branch in [Branch::Spatial, Branch::Spectral] {
        let p = branch.prefix();
        let (n_tok, in_dim) = match branch {
            Branch::Spatial => (config.n_spatial_tokens(), config.spatial_token_dim()),
            Branch::Spectral => (config.spectral_tokens, config.spectral_token_dim()),
        };
        out.push((format!("{p}.embed.w"), vec![in_dim, d], InitKind::Gauss));
        out.push((format!("{p}.embed.b"), vec![1, d], InitKind::Zero));
        out.push((format!("{p}.pos"), vec![n_tok, d], InitKind::Gauss));
        for i in 0..config.depth {
            out.push((format!("{p}.l{i}.ln1.g"), vec![1, d], InitKind::One));
            out.push((format!("{p}.l{i}.ln1.b"), vec![1, d], InitKind::Zero));
            for j in 0..config.heads {
                out.push((format!("{p}.l{i}.h{j}.wq"), vec![d, dh], InitKind::Gauss));
                out.push((format!("{p}.l{i}.h{j}.wk"), vec![d, dh], InitKind::Gauss));
                out.push((format!("{p}.l{i}.h{j}.wv"), vec![d, dh], InitKind::Gauss));
                out.push((format!("{p}.l{i}.h{j}.cp"), vec![dh, dh], InitKind::Identity));
            }
            out.push((
                format!("{p}.l{i}.proj.w"),
                vec![config.heads * dh, d],
                InitKind::Gauss,
            ));
            out.push((format!("{p}.l{i}.proj.b"), vec![1, d], InitKind::Zero));
            out.push((format!("{p}.l{i}.ln2.g"), vec![1, d], InitKind::One));
            out.push((format!("{p}.l{i}.ln2.b"), vec![1, d], InitKind::Zero));
            out.push((format!("{p}.l{i}.ffn.w1"), vec![d, config.mlp_dim], InitKind::Gauss));
            out.push((format!("{p}.l{i}.ffn.b1"), vec![1, config.mlp_dim], InitKind::Zero));
            out.push((format!("{p}.l{i}.ffn.w2"), vec![config.mlp_dim, d], InitKind::Gauss));
            out.push((format!("{p}.l{i}.ffn.b2"), vec![1, d], InitKind::Zero));
        }
        out.push((format!("{p}.ln_out.g"), vec![1, d], InitKind::One));
        out.push((format!("{p}.ln_out.b"), vec![1, d], InitKind::Zero));
    }
    out.push(("sem.reduce".to_string(), vec![d, config.sem_dim()], InitKind::Gauss));
    out.push(("sem.align".to_string(), vec![config.sem_dim(), d], InitKind::Gauss));
    out.push(("head.proj".to_string(), vec![d, d], InitKind::Gauss));
    out
}

/// A parameter keeps receiving gradients after backbone freezing when it is
/// a CP matrix, part of the fusion block, or the output head.
pub fn is_adapter_name(name: &str) -> bool {
    name.ends_with(".cp") || name.starts_with("sem.") || name.starts_with("head.")
}

/// Named parameter set of one encoder. Snapshots are plain values behind
/// shared buffers, so clones are cheap and safe to hand to other threads.
#[derive(Clone, Debug)]
pub struct EncoderParams {
    params: BTreeMap<String, Param>,
}

impl EncoderParams {
    /// Fresh seeded initialization: weights from N(0, 0.02²), biases and
    /// layer-norm shifts zero, layer-norm gains one, CP matrices exact
    /// identities. Everything starts trainable.
    pub fn init(config: &EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = BTreeMap::new();
        for (name, shape, kind) in inventory(config) {
            let numel: usize = shape.iter().product();
            let value = match kind {
                InitKind::Gauss => {
                    let data: Vec<f64> = (0..numel)
                        .map(|_| {
                            let n: f64 = StandardNormal.sample(&mut rng);
                            INIT_STD * n
                        })
                        .collect();
                    Tensor::new(shape, data)?
                }
                InitKind::Zero => Tensor::zeros(&shape),
                InitKind::One => Tensor::full(&shape, 1.0),
                InitKind::Identity => Tensor::eye(shape[0]),
            };
            params.insert(name, Param { value, trainable: true });
        }
        Ok(EncoderParams { params })
    }

    pub(crate) fn from_values(
        config: &EncoderConfig,
        values: BTreeMap<String, Tensor>,
    ) -> Result<Self> {
        let mut params = BTreeMap::new();
        for (name, shape, _) in inventory(config) {
            let value = values.get(&name).ok_or_else(|| {
                Error::contract("encoder_params", format!("missing parameter `{name}`"))
            })?;
            if value.shape() != shape.as_slice() {
                return Err(Error::contract(
                    "encoder_params",
                    format!("parameter `{name}` has shape {:?}, expected {shape:?}", value.shape()),
                ));
            }
            params.insert(name, Param { value: value.clone(), trainable: true });
        }
        if values.len() != params.len() {
            let extra: Vec<&String> =
                values.keys().filter(|k| !params.contains_key(*k)).collect();
            return Err(Error::contract(
                "encoder_params",
                format!("unexpected parameters {extra:?}"),
            ));
        }
        Ok(EncoderParams { params })
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        self.params
            .get(name)
            .ok_or_else(|| Error::contract("encoder_params", format!("no parameter `{name}`")))
    }

    pub fn value(&self, name: &str) -> Result<&Tensor> {
        Ok(&self.get(name)?.value)
    }

    /// Replace a parameter value; the shape must not change.
    pub fn set_value(&mut self, name: &str, value: Tensor) -> Result<()> {
        let param = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::contract("encoder_params", format!("no parameter `{name}`")))?;
        if param.value.shape() != value.shape() {
            return Err(Error::ShapeMismatch {
                op: "encoder_params.set_value",
                lhs: param.value.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        param.value = value;
        Ok(())
    }

    /// Mark every backbone parameter frozen, leaving only CP matrices, the
    /// fusion block and the output head trainable.
    pub fn freeze_backbone(&mut self) {
        for (name, param) in self.params.iter_mut() {
            param.trainable = is_adapter_name(name);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(n, p)| (n.as_str(), p))
    }

    pub fn trainable_names(&self) -> impl Iterator<Item = &str> {
        self.params
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(n, _)| n.as_str())
    }

    /// Total scalar count over trainable tensors.
    pub fn trainable_count(&self) -> usize {
        self.params
            .values()
            .filter(|p| p.trainable)
            .map(|p| p.value.numel())
            .sum()
    }

    /// Register trainable parameters on `tape` and pass frozen ones through
    /// as plain values. Forward code built from the result records exactly
    /// the operations that can influence a trainable parameter's gradient.
    pub fn bind(&self, tape: &mut Tape) -> TapeParams {
        let values = self
            .params
            .iter()
            .map(|(n, p)| {
                let v = if p.trainable { tape.watch(&p.value) } else { p.value.clone() };
                (n.clone(), v)
            })
            .collect();
        TapeParams { values }
    }

    /// Bind with nothing traced: evaluation mode. The same forward code then
    /// records no tape nodes at all.
    pub fn bind_frozen(&self) -> TapeParams {
        let values = self
            .params
            .iter()
            .map(|(n, p)| (n.clone(), p.value.clone()))
            .collect();
        TapeParams { values }
    }
}

/// Parameter views used by one forward pass: traced handles for trainable
/// parameters, plain tensors for frozen ones.
pub struct TapeParams {
    values: BTreeMap<String, Tensor>,
}

impl TapeParams {
    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.values
            .get(name)
            .ok_or_else(|| Error::contract("tape_params", format!("no parameter `{name}`")))
    }

    /// Traced handles, for pulling gradients after a backward pass.
    pub fn traced(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.values
            .iter()
            .filter(|(_, v)| v.requires_grad())
            .map(|(n, v)| (n.as_str(), v))
    }
}
