//! Principal-component band reduction for cubes.

use crate::error::{Error, Result};
use crate::linalg::sym_eigen;

use super::CubeDataset;

/// A fitted projection from `input_bands` to `out_bands` spectral channels.
#[derive(Clone, Debug)]
pub struct PcaModel {
    pub input_bands: usize,
    pub out_bands: usize,
    /// Per-band mean over every pixel of the fitting cube.
    pub mean: Vec<f64>,
    /// Row-major `[input_bands, out_bands]`; column j is the j-th principal
    /// axis (unit length, descending variance).
    pub components: Vec<f64>,
    /// Fraction of total variance captured by each kept component.
    pub explained_ratio: Vec<f64>,
}

/// Fit a PCA model on every pixel of `ds` (labeled or not).
pub fn fit_pca(ds: &CubeDataset, out_bands: usize) -> Result<PcaModel> {
    let bands = ds.bands;
    if out_bands == 0 || out_bands > bands {
        return Err(Error::contract(
            "fit_pca",
            format!("out_bands {out_bands} outside 1..={bands}"),
        ));
    }
    let n = ds.height * ds.width;
    if n < 2 {
        return Err(Error::insufficient("PCA needs at least two pixels"));
    }

    let mut mean = vec![0.0f64; bands];
    for p in 0..n {
        let px = &ds.data()[p * bands..(p + 1) * bands];
        for (m, v) in mean.iter_mut().zip(px) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }

    // sample covariance, accumulated over the upper triangle
    let mut cov = vec![0.0f64; bands * bands];
    let mut centered = vec![0.0f64; bands];
    for p in 0..n {
        let px = &ds.data()[p * bands..(p + 1) * bands];
        for (c, (v, m)) in centered.iter_mut().zip(px.iter().zip(&mean)) {
            *c = v - m;
        }
        for a in 0..bands {
            let ca = centered[a];
            if ca == 0.0 {
                continue;
            }
            for b in a..bands {
                cov[a * bands + b] += ca * centered[b];
            }
        }
    }
    let denom = (n - 1) as f64;
    for a in 0..bands {
        for b in a..bands {
            let v = cov[a * bands + b] / denom;
            cov[a * bands + b] = v;
            cov[b * bands + a] = v;
        }
    }

    let (eigvals, eigvecs) = sym_eigen(&cov, bands)?;
    let total: f64 = eigvals.iter().map(|&l| l.max(0.0)).sum();
    if total <= 0.0 {
        return Err(Error::numeric("fit_pca", "cube has zero spectral variance"));
    }

    let mut components = vec![0.0f64; bands * out_bands];
    for a in 0..bands {
        for j in 0..out_bands {
            components[a * out_bands + j] = eigvecs[a * bands + j];
        }
    }
    let explained_ratio: Vec<f64> = eigvals[..out_bands]
        .iter()
        .map(|&l| l.max(0.0) / total)
        .collect();

    Ok(PcaModel {
        input_bands: bands,
        out_bands,
        mean,
        components,
        explained_ratio,
    })
}

/// Project every pixel of `ds` through `model`, keeping labels, names and
/// patch geometry.
pub fn apply_pca(model: &PcaModel, ds: &CubeDataset) -> Result<CubeDataset> {
    if ds.bands != model.input_bands {
        return Err(Error::contract(
            "apply_pca",
            format!("cube has {} bands, model expects {}", ds.bands, model.input_bands),
        ));
    }
    let (bands, k) = (model.input_bands, model.out_bands);
    let n = ds.height * ds.width;
    let mut out = vec![0.0f64; n * k];
    for p in 0..n {
        let px = &ds.data()[p * bands..(p + 1) * bands];
        let z = &mut out[p * k..(p + 1) * k];
        for a in 0..bands {
            let c = px[a] - model.mean[a];
            if c == 0.0 {
                continue;
            }
            let row = &model.components[a * k..(a + 1) * k];
            for (zj, w) in z.iter_mut().zip(row) {
                *zj += c * w;
            }
        }
    }
    CubeDataset::new(
        ds.height,
        ds.width,
        k,
        out,
        ds.labels().to_vec(),
        ds.class_names.clone(),
        ds.patch_radius,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hsidata::{synth_domain_pair, GeneratorSpec};
    use nalgebra::DMatrix;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeMap;

    fn random_cube(h: usize, w: usize, bands: usize, seed: u64) -> CubeDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..h * w * bands)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        CubeDataset::new(h, w, bands, data, vec![0; h * w], BTreeMap::new(), 0).unwrap()
    }

    #[test]
    fn eigen_spectrum_matches_nalgebra() {
        let ds = random_cube(8, 9, 6, 42);
        let model = fit_pca(&ds, 6).unwrap();

        // rebuild the sample covariance independently
        let n = 72;
        let bands = 6;
        let mut mean = vec![0.0; bands];
        for p in 0..n {
            for b in 0..bands {
                mean[b] += ds.data()[p * bands + b];
            }
        }
        for m in mean.iter_mut() {
            *m /= n as f64;
        }
        let mut cov = DMatrix::zeros(bands, bands);
        for p in 0..n {
            for a in 0..bands {
                for b in 0..bands {
                    cov[(a, b)] += (ds.data()[p * bands + a] - mean[a])
                        * (ds.data()[p * bands + b] - mean[b]);
                }
            }
        }
        cov /= (n - 1) as f64;
        let eig = cov.clone().symmetric_eigen();
        let mut reference: Vec<f64> = eig.eigenvalues.iter().copied().collect();
        reference.sort_by(|a, b| b.total_cmp(a));
        let total: f64 = reference.iter().sum();

        for (j, &r) in reference.iter().enumerate() {
            let got = model.explained_ratio[j] * total;
            assert!((got - r).abs() < 1e-9, "eigenvalue {j}: {got} vs {r}");
        }

        // loadings match the reference eigenvectors up to sign
        for j in 0..bands {
            // find the reference column for the j-th largest eigenvalue
            let mut order: Vec<usize> = (0..bands).collect();
            order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
            let rj = order[j];
            let mut dot = 0.0;
            for a in 0..bands {
                dot += model.components[a * bands + j] * eig.eigenvectors[(a, rj)];
            }
            assert!(
                (dot.abs() - 1.0).abs() < 1e-9,
                "component {j} not aligned: |dot| = {}",
                dot.abs()
            );
        }
    }

    #[test]
    fn full_rank_projection_reconstructs_the_cube() {
        let ds = random_cube(5, 5, 4, 7);
        let model = fit_pca(&ds, 4).unwrap();
        let z = apply_pca(&model, &ds).unwrap();
        let bands = 4;
        for p in 0..25 {
            for a in 0..bands {
                let mut x = model.mean[a];
                for j in 0..bands {
                    x += model.components[a * bands + j] * z.data()[p * bands + j];
                }
                let want = ds.data()[p * bands + a];
                assert!((x - want).abs() < 1e-9, "pixel {p} band {a}: {x} vs {want}");
            }
        }
    }

    #[test]
    fn rank_one_cube_concentrates_variance_in_one_component() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let bands = 8;
        let spectrum: Vec<f64> = (0..bands).map(|_| rng.random_range(0.5..1.5)).collect();
        let mut data = Vec::new();
        for _ in 0..50 {
            let a: f64 = rng.random_range(-2.0..2.0);
            data.extend(spectrum.iter().map(|s| a * s));
        }
        let ds = CubeDataset::new(5, 10, bands, data, vec![0; 50], BTreeMap::new(), 0).unwrap();
        let model = fit_pca(&ds, 2).unwrap();
        assert!(
            model.explained_ratio[0] >= 0.9999,
            "first component explains {}",
            model.explained_ratio[0]
        );
    }

    #[test]
    fn refitting_a_projected_cube_gives_axis_aligned_components() {
        let ds = random_cube(10, 10, 5, 13);
        let model = fit_pca(&ds, 5).unwrap();
        let z = apply_pca(&model, &ds).unwrap();
        // z is already decorrelated with descending variances, so a second
        // fit must produce signed unit vectors along the coordinate axes
        let again = fit_pca(&z, 5).unwrap();
        for j in 0..5 {
            for a in 0..5 {
                let v = again.components[a * 5 + j].abs();
                let want = if a == j { 1.0 } else { 0.0 };
                assert!((v - want).abs() < 1e-9, "component ({a},{j}) = {v}");
            }
        }
    }

    #[test]
    fn projection_keeps_labels_and_patch_geometry() {
        let spec = GeneratorSpec {
            height: 24,
            width: 24,
            bands: 16,
            source_classes: 3,
            target_classes: 2,
            min_class_pixels: 10,
            patch_radius: 2,
            ..GeneratorSpec::default()
        };
        let (source, _) = synth_domain_pair(&spec, 21).unwrap();
        let model = fit_pca(&source, 5).unwrap();
        let z = apply_pca(&model, &source).unwrap();
        assert_eq!(z.bands, 5);
        assert_eq!(z.labels(), source.labels());
        assert_eq!(z.class_names, source.class_names);
        assert_eq!(z.patch_radius, 2);
        let p = z.extract_patch(0, 0).unwrap();
        assert_eq!(p.shape(), &[5, 5, 5]);
    }

    #[test]
    fn fit_validates_band_count_and_variance() {
        let ds = random_cube(3, 3, 4, 1);
        assert!(fit_pca(&ds, 0).is_err());
        assert!(fit_pca(&ds, 5).is_err());
        let flat = CubeDataset::new(2, 2, 3, vec![1.0; 12], vec![0; 4], BTreeMap::new(), 0).unwrap();
        assert!(fit_pca(&flat, 2).is_err());
        let model = fit_pca(&ds, 2).unwrap();
        let wrong = random_cube(3, 3, 5, 2);
        assert!(apply_pca(&model, &wrong).is_err());
    }
}
