//! Singular values of small dense matrices via one-sided Jacobi.
//!
//! The working copy is oriented so the rotated side is the smaller dimension
//! (the implicit Gram side). Convergence is declared when the off-diagonal
//! Frobenius mass of the implicit Gram matrix drops below 1e-14 of its total,
//! with a hard cap of 100 sweeps.

use super::matrix::Matrix;
use crate::error::{Error, Result};

const MAX_SWEEPS: usize = 100;
const MASS_TOL: f64 = 1e-14;
const SMALL_MATRIX_LIMIT: usize = 512;

/// Singular values sorted descending.
pub fn svd_values(m: &Matrix) -> Result<Vec<f64>> {
    let min_dim = m.rows().min(m.cols());
    if min_dim > SMALL_MATRIX_LIMIT {
        return Err(Error::SvdTooLarge { min_dim });
    }
    if min_dim == 0 {
        return Ok(Vec::new());
    }
    // Rotate columns of the copy whose column count is the smaller dimension.
    let mut a = if m.rows() >= m.cols() {
        m.clone()
    } else {
        m.transpose()
    };
    let n = a.cols();

    let mut converged = false;
    for _ in 0..MAX_SWEEPS {
        if gram_off_mass_converged(&a) {
            converged = true;
            break;
        }
        one_sided_sweep(&mut a, n);
    }
    if !converged {
        return Err(Error::SvdNotConverged { sweeps: MAX_SWEEPS });
    }

    let mut sigma = a.column_norms();
    sigma.sort_by(|x, y| y.partial_cmp(x).unwrap());
    Ok(sigma)
}

/// Count of singular values above `rel_tol * sigma_max`; 0 for the zero matrix.
pub fn numerical_rank(m: &Matrix, rel_tol: f64) -> Result<usize> {
    if !(rel_tol > 0.0 && rel_tol < 1.0) {
        return Err(Error::InvalidRelTol(rel_tol));
    }
    let sigma = svd_values(m)?;
    let Some(&top) = sigma.first() else {
        return Ok(0);
    };
    Ok(sigma.iter().filter(|&&s| s > rel_tol * top).count())
}

fn col_dot(a: &Matrix, p: usize, q: usize) -> f64 {
    let (rows, cols) = (a.rows(), a.cols());
    let data = a.data();
    let mut acc = 0.0;
    for i in 0..rows {
        let row = i * cols;
        acc += data[row + p] * data[row + q];
    }
    acc
}

/// Off-diagonal Frobenius mass of the implicit Gram matrix A^T A, relative to
/// its total mass.
fn gram_off_mass_converged(a: &Matrix) -> bool {
    let n = a.cols();
    let mut diag_sq = 0.0;
    for p in 0..n {
        let alpha = col_dot(a, p, p);
        diag_sq += alpha * alpha;
    }
    let mut off_sq = 0.0;
    for p in 0..n {
        for q in (p + 1)..n {
            let gamma = col_dot(a, p, q);
            off_sq += gamma * gamma;
        }
    }
    let total_sq = diag_sq + 2.0 * off_sq;
    (2.0 * off_sq).sqrt() <= MASS_TOL * total_sq.sqrt()
}

fn one_sided_sweep(a: &mut Matrix, n: usize) {
    let rows = a.rows();
    for p in 0..n {
        for q in (p + 1)..n {
            let alpha = col_dot(a, p, p);
            let beta = col_dot(a, q, q);
            let gamma = col_dot(a, p, q);
            if gamma.abs() <= 1e-15 * (alpha * beta).sqrt() {
                continue;
            }
            // Jacobi rotation orthogonalizing columns p and q.
            let zeta = (beta - alpha) / (2.0 * gamma);
            let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
            let c = 1.0 / (1.0 + t * t).sqrt();
            let s = c * t;
            let cols = a.cols();
            let data = a.data_mut();
            for i in 0..rows {
                let row = i * cols;
                let vp = data[row + p];
                let vq = data[row + q];
                data[row + p] = c * vp - s * vq;
                data[row + q] = s * vp + c * vq;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::matrix::outer;
    use crate::numkit::rng::{gaussian_matrix, Rng};

    /// Test oracle: eigenvalues of the symmetric Gram matrix M^T M via cyclic
    /// two-sided Jacobi, independent of the one-sided production path.
    fn gram_eigen_singular_values(m: &Matrix) -> Vec<f64> {
        let gram = m.transpose().matmul(m).unwrap();
        let n = gram.rows();
        let mut a = gram;
        for _ in 0..200 {
            let mut off = 0.0;
            for p in 0..n {
                for q in (p + 1)..n {
                    off += a.get(p, q) * a.get(p, q);
                }
            }
            if off.sqrt() < 1e-30 + 1e-16 * a.frobenius_norm() {
                break;
            }
            for p in 0..n {
                for q in (p + 1)..n {
                    let apq = a.get(p, q);
                    if apq == 0.0 {
                        continue;
                    }
                    let tau = (a.get(q, q) - a.get(p, p)) / (2.0 * apq);
                    let t = tau.signum() / (tau.abs() + (1.0 + tau * tau).sqrt());
                    let c = 1.0 / (1.0 + t * t).sqrt();
                    let s = c * t;
                    // rows p,q then columns p,q
                    for j in 0..n {
                        let vp = a.get(p, j);
                        let vq = a.get(q, j);
                        a.set(p, j, c * vp - s * vq);
                        a.set(q, j, s * vp + c * vq);
                    }
                    for i in 0..n {
                        let vp = a.get(i, p);
                        let vq = a.get(i, q);
                        a.set(i, p, c * vp - s * vq);
                        a.set(i, q, s * vp + c * vq);
                    }
                }
            }
        }
        let mut vals: Vec<f64> = (0..n).map(|i| a.get(i, i).max(0.0).sqrt()).collect();
        vals.sort_by(|x, y| y.partial_cmp(x).unwrap());
        vals
    }

    #[test]
    fn diagonal_matrix() {
        let m = Matrix::from_vec(2, 2, vec![3.0, 0.0, 0.0, 1.0]).unwrap();
        let s = svd_values(&m).unwrap();
        assert!((s[0] - 3.0).abs() < 1e-12);
        assert!((s[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rank_one_outer_product_singular_value() {
        // |u| = 2, |v| = 3 -> leading singular value 6, rest 0
        let u = Matrix::column_vector(vec![2.0, 0.0, 0.0]);
        let v = Matrix::column_vector(vec![0.0, 3.0, 0.0, 0.0]);
        let s = svd_values(&outer(&u, &v)).unwrap();
        assert!((s[0] - 6.0).abs() < 1e-12);
        for &x in &s[1..] {
            assert!(x.abs() < 1e-12);
        }
    }

    #[test]
    fn random_matches_gram_eigen_oracle() {
        let mut rng = Rng::new(17);
        let m = gaussian_matrix(5, 5, &mut rng);
        let fast = svd_values(&m).unwrap();
        let oracle = gram_eigen_singular_values(&m);
        for (a, b) in fast.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn wide_matrix_matches_tall_transpose() {
        let mut rng = Rng::new(29);
        let m = gaussian_matrix(3, 7, &mut rng);
        let wide = svd_values(&m).unwrap();
        let tall = svd_values(&m.transpose()).unwrap();
        for (a, b) in wide.iter().zip(&tall) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn orthogonal_matrix_has_unit_singular_values() {
        // Householder reflection I - 2uu^T/|u|^2 is orthogonal.
        let mut rng = Rng::new(31);
        let u = gaussian_matrix(6, 1, &mut rng);
        let nsq = u.inner(&u).unwrap();
        let h = Matrix::identity(6)
            .sub(&outer(&u, &u).scale(2.0 / nsq))
            .unwrap();
        for s in svd_values(&h).unwrap() {
            assert!((s - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn numerical_rank_examples() {
        assert_eq!(numerical_rank(&Matrix::zeros(4, 3), 1e-10).unwrap(), 0);

        // -2uu^T W with unit u has rank 1
        let mut rng = Rng::new(101);
        let u = gaussian_matrix(6, 1, &mut rng);
        let u = u.scale(1.0 / u.frobenius_norm());
        let w = gaussian_matrix(6, 5, &mut rng);
        let delta = outer(&u, &u).matmul(&w).unwrap().scale(-2.0);
        assert_eq!(numerical_rank(&delta, 1e-10).unwrap(), 1);

        // sum of k random rank-1 terms has rank k
        for k in 1..=4 {
            let mut acc = Matrix::zeros(6, 5);
            for _ in 0..k {
                let a = gaussian_matrix(6, 1, &mut rng);
                let b = gaussian_matrix(5, 1, &mut rng);
                acc = acc.add(&outer(&a, &b)).unwrap();
            }
            assert_eq!(numerical_rank(&acc, 1e-10).unwrap(), k);
        }
    }

    #[test]
    fn rank_of_outer_product_is_one() {
        let mut rng = Rng::new(77);
        for _ in 0..5 {
            let u = gaussian_matrix(8, 1, &mut rng);
            let v = gaussian_matrix(3, 1, &mut rng);
            assert_eq!(numerical_rank(&outer(&u, &v), 1e-10).unwrap(), 1);
        }
    }

    #[test]
    fn invalid_rel_tol_is_rejected() {
        let m = Matrix::identity(2);
        assert!(numerical_rank(&m, 0.0).is_err());
        assert!(numerical_rank(&m, 1.0).is_err());
    }

    #[test]
    fn matrices_beyond_the_small_limit_are_rejected() {
        let m = Matrix::zeros(513, 513);
        assert!(matches!(
            svd_values(&m),
            Err(crate::error::Error::SvdTooLarge { min_dim: 513 })
        ));
    }
}
