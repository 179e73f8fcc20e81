//! Cross-domain few-shot classification of hyperspectral cubes.
//!
//! The pipeline trains a dual-branch transformer encoder episodically on a
//! labeled source domain, adapts it to a scarcely labeled target domain
//! through synthesized intermediate domains (mixup with a progressively
//! scheduled mixing ratio), and sharpens predictions with graph-based label
//! propagation. Everything is f64, single-threaded, and deterministic under
//! a seed.

mod bytes;
pub mod encoder;
pub mod episodic;
pub mod error;
pub mod hsidata;
pub mod linalg;
pub mod mixup;
pub mod pipeline;
pub mod pseudolabel;
pub mod tensor;

pub use error::{Error, Result};
