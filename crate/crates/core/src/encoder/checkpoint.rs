//! Parameter checkpoint container.
//!
//! Layout (integers little-endian):
//!
//! ```text
//! offset 0  magic   b"MIFO"
//! offset 4  version u32 (currently 1)
//! then per-tensor records until end of file, sorted by name:
//!           name_len u32, name bytes (UTF-8),
//!           ndim u32, ndim x dim u32,
//!           prod(dims) x f64 values
//! ```
//!
//! Trainability is not stored; a loaded parameter set starts fully
//! trainable, exactly like a fresh initialization.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::bytes::Cursor;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{EncoderConfig, EncoderParams};

const MAGIC: &[u8; 4] = b"MIFO";
const VERSION: u32 = 1;

/// Serialize every parameter (trainable or not) to `path`. Emission is
/// sorted by name, so equal parameter sets produce identical bytes.
pub fn save_checkpoint(params: &EncoderParams, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    for (name, param) in params.iter() {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        let shape = param.value.shape();
        buf.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &d in shape {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in param.value.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, &buf).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Read a checkpoint and validate it against `config`: every tensor the
/// config calls for must be present with the right shape, and nothing else.
pub fn load_checkpoint(path: impl AsRef<Path>, config: &EncoderConfig) -> Result<EncoderParams> {
    config.validate()?;
    let path = path.as_ref();
    let path_str = path.display().to_string();
    let buf = fs::read(path).map_err(|e| Error::io(path_str.clone(), e))?;
    let mut c = Cursor::new(&buf, &path_str);

    let magic = c.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::format(
            &path_str,
            0,
            format!("bad magic {magic:02x?}, expected {MAGIC:02x?}"),
        ));
    }
    let version = c.u32("version")?;
    if version != VERSION {
        return Err(Error::format(
            &path_str,
            4,
            format!("unsupported checkpoint version {version}, expected {VERSION}"),
        ));
    }

    let mut values: BTreeMap<String, Tensor> = BTreeMap::new();
    while !c.at_end() {
        let record_at = c.pos as u64;
        let name_len = c.u32("tensor name length")? as usize;
        let raw = c.take(name_len, "tensor name")?;
        let name = std::str::from_utf8(raw)
            .map_err(|_| Error::format(&path_str, record_at, "tensor name is not UTF-8"))?
            .to_string();
        let ndim = c.u32("tensor rank")? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(c.u32("tensor dimension")? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for i in 0..numel {
            let at = c.pos as u64;
            let v = c.f64("tensor values")?;
            if !v.is_finite() {
                return Err(Error::format(
                    &path_str,
                    at,
                    format!("non-finite value at index {i} of tensor `{name}`"),
                ));
            }
            data.push(v);
        }
        let tensor = Tensor::new(shape, data).map_err(|e| {
            Error::format(&path_str, record_at, format!("tensor `{name}`: {e}"))
        })?;
        if values.insert(name.clone(), tensor).is_some() {
            return Err(Error::format(
                &path_str,
                record_at,
                format!("duplicate tensor `{name}`"),
            ));
        }
    }

    EncoderParams::from_values(config, values).map_err(|e| match e {
        Error::Contract { detail, .. } => Error::format(&path_str, 8, detail),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

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

    fn tmp(name: &str) -> std::path::PathBuf {
        let mut p = std::env::temp_dir();
        p.push(format!("mifo-ckpt-{}-{name}", std::process::id()));
        p
    }

    #[test]
    fn round_trip_is_bit_exact_and_deterministic() {
        let config = tiny_config();
        let params = EncoderParams::init(&config, 17).unwrap();
        let p1 = tmp("rt1.mifo");
        let p2 = tmp("rt2.mifo");
        save_checkpoint(&params, &p1).unwrap();
        save_checkpoint(&params, &p2).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());

        let back = load_checkpoint(&p1, &config).unwrap();
        for ((na, pa), (nb, pb)) in params.iter().zip(back.iter()) {
            assert_eq!(na, nb);
            assert_eq!(pa.value, pb.value, "{na}");
        }
        // loaded checkpoints start fully trainable
        assert!(back.iter().all(|(_, p)| p.trainable));
        fs::remove_file(&p1).ok();
        fs::remove_file(&p2).ok();
    }

    #[test]
    fn bad_magic_and_version_are_positioned() {
        let p = tmp("magic.mifo");
        fs::write(&p, b"NOPE\x01\x00\x00\x00").unwrap();
        match load_checkpoint(&p, &tiny_config()).unwrap_err() {
            Error::Format { offset, .. } => assert_eq!(offset, 0),
            other => panic!("unexpected error {other:?}"),
        }
        fs::write(&p, b"MIFO\x09\x00\x00\x00").unwrap();
        match load_checkpoint(&p, &tiny_config()).unwrap_err() {
            Error::Format { offset, .. } => assert_eq!(offset, 4),
            other => panic!("unexpected error {other:?}"),
        }
        fs::remove_file(&p).ok();
    }

    #[test]
    fn truncated_record_reports_the_cut() {
        let config = tiny_config();
        let params = EncoderParams::init(&config, 2).unwrap();
        let p = tmp("trunc.mifo");
        save_checkpoint(&params, &p).unwrap();
        let mut bytes = fs::read(&p).unwrap();
        bytes.truncate(bytes.len() - 3);
        fs::write(&p, &bytes).unwrap();
        match load_checkpoint(&p, &config).unwrap_err() {
            Error::Format { detail, .. } => assert!(detail.contains("truncated"), "{detail}"),
            other => panic!("unexpected error {other:?}"),
        }
        fs::remove_file(&p).ok();
    }

    #[test]
    fn wrong_inventory_is_rejected() {
        let config = tiny_config();
        let params = EncoderParams::init(&config, 2).unwrap();
        let p = tmp("inventory.mifo");
        save_checkpoint(&params, &p).unwrap();

        // loading under a different architecture fails
        let other = EncoderConfig { depth: 2, ..tiny_config() };
        match load_checkpoint(&p, &other).unwrap_err() {
            Error::Format { detail, .. } => assert!(detail.contains("missing"), "{detail}"),
            other => panic!("unexpected error {other:?}"),
        }
        fs::remove_file(&p).ok();
    }

    #[test]
    fn non_finite_values_are_rejected_with_their_offset() {
        let config = tiny_config();
        let params = EncoderParams::init(&config, 2).unwrap();
        let p = tmp("nan.mifo");
        save_checkpoint(&params, &p).unwrap();
        let mut bytes = fs::read(&p).unwrap();
        // first record: "head.proj", name_len 9 -> values start at
        // 8 + 4 + 9 + 4 + 2*4 = 33
        let at = 33;
        bytes[at..at + 8].copy_from_slice(&f64::NAN.to_le_bytes());
        fs::write(&p, &bytes).unwrap();
        match load_checkpoint(&p, &config).unwrap_err() {
            Error::Format { offset, detail, .. } => {
                assert_eq!(offset, at as u64);
                assert!(detail.contains("head.proj"), "{detail}");
            }
            other => panic!("unexpected error {other:?}"),
        }
        fs::remove_file(&p).ok();
    }

    #[test]
    fn duplicate_tensor_is_rejected() {
        let config = tiny_config();
        let params = EncoderParams::init(&config, 2).unwrap();
        let p = tmp("dup.mifo");
        save_checkpoint(&params, &p).unwrap();
        let bytes = fs::read(&p).unwrap();
        // duplicate the first record (name "head.proj", 8x8 doubles)
        let rec_start = 8;
        let rec_len = 4 + 9 + 4 + 2 * 4 + 64 * 8;
        let mut doubled = bytes.clone();
        doubled.extend_from_slice(&bytes[rec_start..rec_start + rec_len]);
        fs::write(&p, &doubled).unwrap();
        match load_checkpoint(&p, &config).unwrap_err() {
            Error::Format { detail, .. } => assert!(detail.contains("duplicate"), "{detail}"),
            other => panic!("unexpected error {other:?}"),
        }
        fs::remove_file(&p).ok();
    }
}
