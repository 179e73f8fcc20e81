//! Hyperspectral cube handling: in-memory datasets with labeled rasters,
//! mirror-padded patch extraction, episode pools, a synthetic domain-pair
//! generator, PCA band reduction, and classification-map rendering.

mod format;
mod pca;
mod synth;

pub use format::{read_cube, write_cube};
pub use pca::{apply_pca, fit_pca, PcaModel};
pub use synth::{synth_domain_pair, GeneratorSpec};

use std::collections::{BTreeMap, BTreeSet};

use crate::episodic::SamplePool;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A hyperspectral cube with an optional class raster. Values are stored
/// as f64 in (row, column, band) order; label 0 marks unlabeled background.
#[derive(Clone, Debug)]
pub struct CubeDataset {
    pub height: usize,
    pub width: usize,
    pub bands: usize,
    data: Vec<f64>,
    labels: Vec<u16>,
    /// Class id -> display name, for every id present in the raster.
    pub class_names: BTreeMap<u16, String>,
    /// Half-width of extracted patches (patch side = 2r + 1).
    pub patch_radius: usize,
}

impl CubeDataset {
    pub fn new(
        height: usize,
        width: usize,
        bands: usize,
        data: Vec<f64>,
        labels: Vec<u16>,
        class_names: BTreeMap<u16, String>,
        patch_radius: usize,
    ) -> Result<Self> {
        if height == 0 || width == 0 || bands == 0 {
            return Err(Error::contract("cube.new", "empty cube dimensions"));
        }
        if data.len() != height * width * bands {
            return Err(Error::contract(
                "cube.new",
                format!(
                    "cube payload holds {} values, dimensions need {}",
                    data.len(),
                    height * width * bands
                ),
            ));
        }
        if labels.len() != height * width {
            return Err(Error::contract(
                "cube.new",
                format!("label raster holds {} entries, needs {}", labels.len(), height * width),
            ));
        }
        if patch_radius >= height.min(width) {
            return Err(Error::contract(
                "cube.new",
                format!("patch radius {patch_radius} too large for {height}x{width} raster"),
            ));
        }
        for (i, v) in data.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::numeric("cube.new", format!("non-finite value at flat index {i}")));
            }
        }
        for (i, &l) in labels.iter().enumerate() {
            if l != 0 && !class_names.contains_key(&l) {
                return Err(Error::contract(
                    "cube.new",
                    format!("label {l} at pixel {i} missing from the class table"),
                ));
            }
        }
        Ok(CubeDataset {
            height,
            width,
            bands,
            data,
            labels,
            class_names,
            patch_radius,
        })
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn labels(&self) -> &[u16] {
        &self.labels
    }

    pub fn label(&self, y: usize, x: usize) -> u16 {
        self.labels[y * self.width + x]
    }

    /// Spectrum of one pixel.
    pub fn pixel(&self, y: usize, x: usize) -> &[f64] {
        let base = (y * self.width + x) * self.bands;
        &self.data[base..base + self.bands]
    }

    /// Sorted distinct non-background class ids present in the raster.
    pub fn class_ids(&self) -> Vec<u16> {
        let ids: BTreeSet<u16> = self.labels.iter().copied().filter(|&l| l != 0).collect();
        ids.into_iter().collect()
    }

    /// Labeled pixel coordinates grouped by class id, raster order.
    pub fn class_pixels(&self) -> BTreeMap<u16, Vec<(usize, usize)>> {
        let mut map: BTreeMap<u16, Vec<(usize, usize)>> = BTreeMap::new();
        for y in 0..self.height {
            for x in 0..self.width {
                let l = self.label(y, x);
                if l != 0 {
                    map.entry(l).or_default().push((y, x));
                }
            }
        }
        map
    }

    /// Extract the patch centered on `(y, x)` as a `[P, P, bands]` tensor,
    /// P = 2 * patch_radius + 1. Out-of-raster coordinates reflect about
    /// the border pixel (index -1 maps to 1, H maps to H - 2).
    pub fn extract_patch(&self, y: usize, x: usize) -> Result<Tensor> {
        if y >= self.height || x >= self.width {
            return Err(Error::contract(
                "extract_patch",
                format!("pixel ({y}, {x}) outside {}x{} raster", self.height, self.width),
            ));
        }
        let r = self.patch_radius as isize;
        let p = 2 * self.patch_radius + 1;
        let mut out = Vec::with_capacity(p * p * self.bands);
        for dy in -r..=r {
            let sy = mirror_index(y as isize + dy, self.height);
            for dx in -r..=r {
                let sx = mirror_index(x as isize + dx, self.width);
                out.extend_from_slice(self.pixel(sy, sx));
            }
        }
        Tensor::new(vec![p, p, self.bands], out)
    }

    /// Episode pool over every labeled pixel.
    pub fn pool(&self) -> CubePool<'_> {
        self.pool_excluding(&BTreeSet::new())
    }

    /// Episode pool over labeled pixels not in `excluded`. Classes whose
    /// pixels are all excluded disappear from the pool.
    pub fn pool_excluding(&self, excluded: &BTreeSet<(usize, usize)>) -> CubePool<'_> {
        let classes = self
            .class_pixels()
            .into_iter()
            .map(|(id, pixels)| {
                let kept: Vec<(usize, usize)> = pixels
                    .into_iter()
                    .filter(|p| !excluded.contains(p))
                    .collect();
                (id, kept)
            })
            .filter(|(_, kept)| !kept.is_empty())
            .collect();
        CubePool { ds: self, classes }
    }
}

/// Reflect an index into `[0, n)` about the border (no edge duplication).
/// Requires |i| < 2n - 1, guaranteed by the patch-radius bound.
fn mirror_index(i: isize, n: usize) -> usize {
    let n = n as isize;
    let m = if i < 0 {
        -i
    } else if i >= n {
        2 * n - 2 - i
    } else {
        i
    };
    debug_assert!((0..n).contains(&m));
    m as usize
}

/// Lazily extracting sample pool over a cube's labeled pixels.
pub struct CubePool<'a> {
    ds: &'a CubeDataset,
    classes: Vec<(u16, Vec<(usize, usize)>)>,
}

impl CubePool<'_> {
    pub fn class_coords(&self, class_index: usize) -> &[(usize, usize)] {
        &self.classes[class_index].1
    }
}

impl SamplePool for CubePool<'_> {
    fn n_classes(&self) -> usize {
        self.classes.len()
    }
    fn class_id(&self, class_index: usize) -> usize {
        self.classes[class_index].0 as usize
    }
    fn class_len(&self, class_index: usize) -> usize {
        self.classes[class_index].1.len()
    }
    fn fetch(&self, class_index: usize, sample_index: usize) -> Result<Tensor> {
        let (y, x) = self.classes[class_index].1[sample_index];
        self.ds.extract_patch(y, x)
    }
}

/// Deterministic distinct palette over class ids: hues stepped by the
/// golden angle at full saturation. Id 0 (background) is always black.
pub fn default_palette(class_ids: &[u16]) -> BTreeMap<u16, (u8, u8, u8)> {
    let mut palette = BTreeMap::new();
    palette.insert(0, (0, 0, 0));
    for (rank, &id) in class_ids.iter().enumerate() {
        let hue = (rank as f64 * 137.50776405003785) % 360.0;
        palette.insert(id, hsv_to_rgb(hue, 0.85, 0.95));
    }
    palette
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (u8, u8, u8) {
    let c = v * s;
    let hp = h / 60.0;
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    (
        ((r + m) * 255.0).round() as u8,
        ((g + m) * 255.0).round() as u8,
        ((b + m) * 255.0).round() as u8,
    )
}

/// Render a class raster as a binary PPM (P6) image. Every non-background
/// id must have a palette entry.
pub fn render_class_map(
    labels: &[u16],
    height: usize,
    width: usize,
    palette: &BTreeMap<u16, (u8, u8, u8)>,
) -> Result<Vec<u8>> {
    if labels.len() != height * width {
        return Err(Error::contract(
            "render_class_map",
            format!("{} labels for {height}x{width} raster", labels.len()),
        ));
    }
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    for &l in labels {
        let (r, g, b) = if l == 0 {
            (0, 0, 0)
        } else {
            *palette.get(&l).ok_or_else(|| {
                Error::contract("render_class_map", format!("class {l} missing from palette"))
            })?
        };
        out.extend_from_slice(&[r, g, b]);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cube() -> CubeDataset {
        // 4x5 raster, 2 bands; value encodes (y, x, band) for easy checks
        let h = 4;
        let w = 5;
        let b = 2;
        let mut data = Vec::new();
        for y in 0..h {
            for x in 0..w {
                for band in 0..b {
                    data.push((y * 100 + x * 10 + band) as f64);
                }
            }
        }
        let mut labels = vec![0u16; h * w];
        labels[0] = 1;
        labels[6] = 2;
        labels[7] = 2;
        let mut names = BTreeMap::new();
        names.insert(1, "alpha".to_string());
        names.insert(2, "beta".to_string());
        CubeDataset::new(h, w, b, data, labels, names, 1).unwrap()
    }

    #[test]
    fn construction_validates_shapes_and_labels() {
        let names: BTreeMap<u16, String> = BTreeMap::new();
        assert!(CubeDataset::new(2, 2, 1, vec![0.0; 3], vec![0; 4], names.clone(), 0).is_err());
        assert!(CubeDataset::new(2, 2, 1, vec![0.0; 4], vec![0; 3], names.clone(), 0).is_err());
        // label without a class-table entry
        assert!(CubeDataset::new(2, 2, 1, vec![0.0; 4], vec![7, 0, 0, 0], names.clone(), 0).is_err());
        // NaN payload
        assert!(CubeDataset::new(2, 2, 1, vec![0.0, f64::NAN, 0.0, 0.0], vec![0; 4], names, 0).is_err());
    }

    #[test]
    fn interior_patch_is_copied_verbatim() {
        let ds = tiny_cube();
        let p = ds.extract_patch(1, 2).unwrap();
        assert_eq!(p.shape(), &[3, 3, 2]);
        // center pixel of the patch equals the raster pixel
        let center = &p.data()[(1 * 3 + 1) * 2..(1 * 3 + 1) * 2 + 2];
        assert_eq!(center, ds.pixel(1, 2));
        // top-left of the patch is raster (0, 1)
        assert_eq!(&p.data()[0..2], ds.pixel(0, 1));
    }

    #[test]
    fn corner_patch_mirrors_without_edge_duplication() {
        let ds = tiny_cube();
        let p = ds.extract_patch(0, 0).unwrap();
        // index-map oracle: patch row dy maps to raster row |0 + dy - 1|
        for dy in 0..3usize {
            for dx in 0..3usize {
                let sy = (dy as isize - 1).unsigned_abs();
                let sx = (dx as isize - 1).unsigned_abs();
                let got = &p.data()[(dy * 3 + dx) * 2..(dy * 3 + dx) * 2 + 2];
                assert_eq!(got, ds.pixel(sy, sx), "patch ({dy},{dx})");
            }
        }

        // bottom-right corner reflects high indices
        let p = ds.extract_patch(3, 4).unwrap();
        for dy in 0..3usize {
            for dx in 0..3usize {
                let ry = 3 + dy as isize - 1;
                let rx = 4 + dx as isize - 1;
                let sy = if ry >= 4 { 2 * 4 - 2 - ry } else { ry } as usize;
                let sx = if rx >= 5 { 2 * 5 - 2 - rx } else { rx } as usize;
                let got = &p.data()[(dy * 3 + dx) * 2..(dy * 3 + dx) * 2 + 2];
                assert_eq!(got, ds.pixel(sy, sx), "patch ({dy},{dx})");
            }
        }
    }

    #[test]
    fn patch_coordinates_are_bounds_checked() {
        let ds = tiny_cube();
        assert!(ds.extract_patch(4, 0).is_err());
        assert!(ds.extract_patch(0, 5).is_err());
    }

    #[test]
    fn pools_group_by_class_and_respect_exclusions() {
        let ds = tiny_cube();
        let pool = ds.pool();
        assert_eq!(pool.n_classes(), 2);
        assert_eq!(pool.class_id(0), 1);
        assert_eq!(pool.class_len(0), 1);
        assert_eq!(pool.class_id(1), 2);
        assert_eq!(pool.class_len(1), 2);

        let mut excl = BTreeSet::new();
        excl.insert((1, 1)); // one of the two class-2 pixels
        let pool = ds.pool_excluding(&excl);
        assert_eq!(pool.class_len(1), 1);
        excl.insert((0, 0)); // the only class-1 pixel: class disappears
        let pool = ds.pool_excluding(&excl);
        assert_eq!(pool.n_classes(), 1);
        assert_eq!(pool.class_id(0), 2);
    }

    #[test]
    fn ppm_rendering_and_palette() {
        let ids = vec![1u16, 2];
        let palette = default_palette(&ids);
        let labels = vec![0u16, 1, 2, 1];
        let bytes = render_class_map(&labels, 2, 2, &palette).unwrap();
        assert!(bytes.starts_with(b"P6\n2 2\n255\n"));
        let header = b"P6\n2 2\n255\n".len();
        assert_eq!(bytes.len(), header + 12);
        assert_eq!(&bytes[header..header + 3], &[0, 0, 0]); // background black
        // distinct classes, distinct colors
        assert_ne!(palette[&1], palette[&2]);
        // pixels 1 and 3 share class 1's color
        assert_eq!(bytes[header + 3..header + 6], bytes[header + 9..header + 12]);

        // unknown class id
        let bad = vec![9u16; 4];
        assert!(render_class_map(&bad, 2, 2, &palette).is_err());
    }
}
