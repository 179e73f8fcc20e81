//! On-disk cube container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! offset 0   magic   b"HSIC"
//! offset 4   version u32 (currently 1)
//! offset 8   height  u32
//! offset 12  width   u32
//! offset 16  bands   u32
//! offset 20  labeled u8 (0 or 1)
//! offset 21  payload height*width*bands f32, (row, column, band) order
//! then, when labeled == 1:
//!            labels  height*width u16
//!            count   u32
//!            count x { id u32, name_len u32, name bytes (UTF-8) }
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::bytes::Cursor;
use crate::error::{Error, Result};

use super::CubeDataset;

const MAGIC: &[u8; 4] = b"HSIC";
const VERSION: u32 = 1;

/// Read a cube container. `patch_radius` configures the returned dataset's
/// patch geometry; it is not stored in the file.
pub fn read_cube(path: impl AsRef<Path>, patch_radius: usize) -> Result<CubeDataset> {
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
            format!("unsupported container version {version}, expected {VERSION}"),
        ));
    }
    let height = c.u32("height")? as usize;
    let width = c.u32("width")? as usize;
    let bands = c.u32("bands")? as usize;
    if height == 0 || width == 0 || bands == 0 {
        return Err(Error::format(&path_str, 8, "zero cube dimension"));
    }
    let labeled = c.u8("label flag")?;
    if labeled > 1 {
        return Err(Error::format(&path_str, 20, format!("label flag must be 0 or 1, got {labeled}")));
    }

    let n_values = height * width * bands;
    let mut data = Vec::with_capacity(n_values);
    for i in 0..n_values {
        let at = c.pos as u64;
        let v = c.f32("cube payload")?;
        if !v.is_finite() {
            return Err(Error::format(
                &path_str,
                at,
                format!("non-finite payload value at flat index {i}"),
            ));
        }
        data.push(v as f64);
    }

    let mut labels = vec![0u16; height * width];
    let mut class_names = BTreeMap::new();
    if labeled == 1 {
        for l in labels.iter_mut() {
            *l = c.u16("label raster")?;
        }
        let count = c.u32("class count")?;
        for _ in 0..count {
            let id_at = c.pos as u64;
            let id = c.u32("class id")?;
            let id = u16::try_from(id).map_err(|_| {
                Error::format(&path_str, id_at, format!("class id {id} exceeds u16 range"))
            })?;
            if id == 0 {
                return Err(Error::format(&path_str, id_at, "class id 0 is reserved for background"));
            }
            let name_len = c.u32("class name length")? as usize;
            let name_at = c.pos as u64;
            let raw = c.take(name_len, "class name")?;
            let name = std::str::from_utf8(raw)
                .map_err(|_| Error::format(&path_str, name_at, "class name is not UTF-8"))?
                .to_string();
            if class_names.insert(id, name).is_some() {
                return Err(Error::format(&path_str, id_at, format!("duplicate class id {id}")));
            }
        }
    }
    if !c.at_end() {
        return Err(Error::format(
            &path_str,
            c.pos as u64,
            format!("{} trailing bytes after the class table", c.remaining()),
        ));
    }

    // re-point label/table mismatches at the file rather than the constructor
    CubeDataset::new(height, width, bands, data, labels, class_names, patch_radius).map_err(|e| {
        match e {
            Error::Contract { detail, .. } => Error::format(&path_str, 21, detail),
            other => other,
        }
    })
}

/// Write a cube container. Values are stored as f32; labels and the class
/// table are emitted only when the raster carries at least one label.
pub fn write_cube(ds: &CubeDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let path_str = path.display().to_string();
    let labeled = ds.labels().iter().any(|&l| l != 0);

    let mut buf = Vec::with_capacity(21 + ds.data().len() * 4);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(ds.height as u32).to_le_bytes());
    buf.extend_from_slice(&(ds.width as u32).to_le_bytes());
    buf.extend_from_slice(&(ds.bands as u32).to_le_bytes());
    buf.push(labeled as u8);
    for &v in ds.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    if labeled {
        for &l in ds.labels() {
            buf.extend_from_slice(&l.to_le_bytes());
        }
        buf.extend_from_slice(&(ds.class_names.len() as u32).to_le_bytes());
        for (&id, name) in &ds.class_names {
            buf.extend_from_slice(&(id as u32).to_le_bytes());
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
        }
    }
    fs::write(path, &buf).map_err(|e| Error::io(path_str, e))
}
