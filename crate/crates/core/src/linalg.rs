//! Small dense linear-algebra routines: LU solves for the label-propagation
//! closed form and a Jacobi eigensolver for PCA. Sizes here are a few
//! hundred at most, so simplicity and determinism win over speed.

use crate::error::{Error, Result};

/// Solve `A X = B` for X where A is `n x n` and B is `n x m`, both row-major.
/// Partial-pivot LU; fails on singular (or numerically singular) systems.
pub fn solve_lu(a: &[f64], n: usize, b: &[f64], m: usize) -> Result<Vec<f64>> {
    if a.len() != n * n || b.len() != n * m {
        return Err(Error::contract(
            "solve_lu",
            format!("buffer sizes {}/{} do not match n={n}, m={m}", a.len(), b.len()),
        ));
    }
    let mut lu = a.to_vec();
    let x = b.to_vec();
    let mut perm: Vec<usize> = (0..n).collect();

    for col in 0..n {
        // pivot: largest magnitude on or below the diagonal
        let mut pivot = col;
        let mut best = lu[perm[col] * n + col].abs();
        for r in col + 1..n {
            let v = lu[perm[r] * n + col].abs();
            if v > best {
                best = v;
                pivot = r;
            }
        }
        if !best.is_finite() || best < 1e-300 {
            return Err(Error::numeric(
                "solve_lu",
                format!("singular system at column {col} (pivot {best:.3e})"),
            ));
        }
        perm.swap(col, pivot);
        let prow = perm[col];
        let pval = lu[prow * n + col];
        for r in col + 1..n {
            let row = perm[r];
            let f = lu[row * n + col] / pval;
            lu[row * n + col] = f;
            for c in col + 1..n {
                lu[row * n + c] -= f * lu[prow * n + c];
            }
        }
    }

    // forward/back substitution per right-hand side, honoring the pivot order
    let mut out = vec![0.0; n * m];
    let mut y = vec![0.0; n];
    for rhs in 0..m {
        for i in 0..n {
            let mut v = x[perm[i] * m + rhs];
            for j in 0..i {
                v -= lu[perm[i] * n + j] * y[j];
            }
            y[i] = v;
        }
        for i in (0..n).rev() {
            let mut v = y[i];
            for j in i + 1..n {
                v -= lu[perm[i] * n + j] * out[j * m + rhs];
            }
            out[i * m + rhs] = v / lu[perm[i] * n + i];
        }
    }
    Ok(out)
}

/// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns eigenvalues in descending order and eigenvectors as the columns
/// of the second buffer (row-major `n x n`), matching the value order.
pub fn sym_eigen(a: &[f64], n: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if a.len() != n * n {
        return Err(Error::contract(
            "sym_eigen",
            format!("buffer size {} does not match n={n}", a.len()),
        ));
    }
    for i in 0..n {
        for j in 0..i {
            if (a[i * n + j] - a[j * n + i]).abs() > 1e-9 * (1.0 + a[i * n + j].abs()) {
                return Err(Error::contract(
                    "sym_eigen",
                    format!("matrix is not symmetric at ({i},{j})"),
                ));
            }
        }
    }
    let mut m = a.to_vec();
    // symmetrize exactly so rotations stay stable
    for i in 0..n {
        for j in 0..i {
            let v = 0.5 * (m[i * n + j] + m[j * n + i]);
            m[i * n + j] = v;
            m[j * n + i] = v;
        }
    }
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }

    let off = |m: &[f64]| -> f64 {
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    s += m[i * n + j] * m[i * n + j];
                }
            }
        }
        s.sqrt()
    };
    let scale: f64 = (0..n).map(|i| m[i * n + i].abs()).fold(1e-300, f64::max);
    let tol = 1e-14 * scale * n as f64;

    for _sweep in 0..100 {
        if off(&m) <= tol {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[p * n + q];
                if apq.abs() <= tol / (n as f64 * 10.0) {
                    continue;
                }
                let app = m[p * n + p];
                let aqq = m[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[k * n + p];
                    let mkq = m[k * n + q];
                    m[k * n + p] = c * mkp - s * mkq;
                    m[k * n + q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[p * n + k];
                    let mqk = m[q * n + k];
                    m[p * n + k] = c * mpk - s * mqk;
                    m[q * n + k] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        m[j * n + j]
            .partial_cmp(&m[i * n + i])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(i.cmp(&j))
    });
    let values: Vec<f64> = order.iter().map(|&i| m[i * n + i]).collect();
    let mut vectors = vec![0.0; n * n];
    for (new_col, &old_col) in order.iter().enumerate() {
        // sign convention: largest-magnitude entry positive, for determinism
        let mut lead = 0;
        let mut best = 0.0;
        for r in 0..n {
            let x = v[r * n + old_col].abs();
            if x > best {
                best = x;
                lead = r;
            }
        }
        let flip = if v[lead * n + old_col] < 0.0 { -1.0 } else { 1.0 };
        for r in 0..n {
            vectors[r * n + new_col] = flip * v[r * n + old_col];
        }
    }
    Ok((values, vectors))
}

/// Spectral radius of a symmetric matrix (largest |eigenvalue|).
pub fn spectral_radius_sym(a: &[f64], n: usize) -> Result<f64> {
    let (values, _) = sym_eigen(a, n)?;
    Ok(values.iter().fold(0.0f64, |acc, &v| acc.max(v.abs())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, DVector};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..n * n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn solve_matches_nalgebra() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for n in [1usize, 3, 8, 20] {
            let a = rand_mat(n, &mut rng);
            let b: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let x = solve_lu(&a, n, &b, 1).unwrap();
            let na = DMatrix::from_row_slice(n, n, &a);
            let nb = DVector::from_column_slice(&b);
            let nx = na.lu().solve(&nb).expect("nalgebra solve");
            for i in 0..n {
                assert!((x[i] - nx[i]).abs() <= 1e-9, "n={n} i={i}");
            }
        }
    }

    #[test]
    fn solve_multiple_right_hand_sides() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let n = 6;
        let m = 4;
        let a = rand_mat(n, &mut rng);
        let b: Vec<f64> = (0..n * m).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x = solve_lu(&a, n, &b, m).unwrap();
        // residual check: A X == B
        for i in 0..n {
            for j in 0..m {
                let mut s = 0.0;
                for k in 0..n {
                    s += a[i * n + k] * x[k * m + j];
                }
                assert!((s - b[i * m + j]).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn solve_detects_singularity() {
        // rank-1 matrix
        let a = vec![1.0, 2.0, 2.0, 4.0];
        let b = vec![1.0, 1.0];
        assert!(solve_lu(&a, 2, &b, 1).is_err());
    }

    #[test]
    fn eigen_matches_nalgebra_on_random_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        for n in [2usize, 5, 12, 30] {
            let raw = rand_mat(n, &mut rng);
            // symmetrize
            let mut a = vec![0.0; n * n];
            for i in 0..n {
                for j in 0..n {
                    a[i * n + j] = 0.5 * (raw[i * n + j] + raw[j * n + i]);
                }
            }
            let (vals, vecs) = sym_eigen(&a, n).unwrap();
            let na = DMatrix::from_row_slice(n, n, &a);
            let mut nvals: Vec<f64> = na.symmetric_eigen().eigenvalues.iter().cloned().collect();
            nvals.sort_by(|x, y| y.partial_cmp(x).unwrap());
            for i in 0..n {
                assert!((vals[i] - nvals[i]).abs() <= 1e-9, "n={n} i={i}");
            }
            // residual: A v = lambda v for every pair
            for col in 0..n {
                for row in 0..n {
                    let mut av = 0.0;
                    for k in 0..n {
                        av += a[row * n + k] * vecs[k * n + col];
                    }
                    assert!((av - vals[col] * vecs[row * n + col]).abs() <= 1e-8);
                }
            }
            // orthonormal columns
            for c1 in 0..n {
                for c2 in 0..n {
                    let mut dot = 0.0;
                    for r in 0..n {
                        dot += vecs[r * n + c1] * vecs[r * n + c2];
                    }
                    let want = if c1 == c2 { 1.0 } else { 0.0 };
                    assert!((dot - want).abs() <= 1e-9);
                }
            }
        }
    }

    #[test]
    fn eigen_rejects_asymmetric_input() {
        let a = vec![1.0, 2.0, 3.0, 4.0];
        assert!(sym_eigen(&a, 2).is_err());
    }

    #[test]
    fn eigen_diagonal_matrix_is_exact() {
        let a = vec![3.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 2.0];
        let (vals, _) = sym_eigen(&a, 3).unwrap();
        assert_eq!(vals, vec![3.0, 2.0, 1.0]);
    }
}
