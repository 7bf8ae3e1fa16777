//! Cyclic Jacobi eigensolver for dense symmetric matrices.

use super::{Matrix, EIG_MAX_SWEEPS, EIG_OFFDIAG_TOL, SYMMETRY_TOL};
use crate::error::{Error, Result};

/// Full spectral decomposition of a symmetric matrix.
#[derive(Debug, Clone)]
pub struct EigenResult {
    /// Eigenvalues in ascending order.
    pub eigenvalues: Vec<f64>,
    /// Orthonormal eigenvectors stored as columns, in the order of `eigenvalues`.
    pub eigenvectors: Matrix,
}

impl EigenResult {
    /// Column `k` of the eigenvector matrix.
    pub fn eigenvector(&self, k: usize) -> Vec<f64> {
        let n = self.eigenvectors.rows();
        (0..n).map(|i| self.eigenvectors[(i, k)]).collect()
    }

    /// `V diag(f(λ)) Vᵀ`.
    pub fn reconstruct_with(&self, f: impl Fn(f64) -> f64) -> Matrix {
        let n = self.eigenvalues.len();
        let v = &self.eigenvectors;
        let w: Vec<f64> = self.eigenvalues.iter().map(|&l| f(l)).collect();
        let mut out = Matrix::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let s: f64 = (0..n).map(|k| v[(i, k)] * w[k] * v[(j, k)]).sum();
                out[(i, j)] = s;
                out[(j, i)] = s;
            }
        }
        out
    }
}

fn check_symmetric(s: &Matrix) -> Result<()> {
    if !s.is_square() {
        return Err(Error::dim(format!(
            "eigensolver needs a square matrix, got {}x{}",
            s.rows(),
            s.cols()
        )));
    }
    let n = s.rows();
    let tol = SYMMETRY_TOL * s.max_abs().max(1.0);
    for i in 0..n {
        for j in i + 1..n {
            if (s[(i, j)] - s[(j, i)]).abs() > tol {
                return Err(Error::Contract(format!(
                    "matrix is not symmetric at ({i}, {j}): {} vs {}",
                    s[(i, j)],
                    s[(j, i)]
                )));
            }
        }
    }
    Ok(())
}

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
///
/// Sweeps stop once every off-diagonal entry is below
/// `EIG_OFFDIAG_TOL · ‖S‖_F`.
pub fn eig_sym(s: &Matrix) -> Result<EigenResult> {
    check_symmetric(s)?;
    let (vals, vecs) = jacobi(s, true);
    Ok(sorted(vals, vecs.expect("vectors requested")))
}

/// Eigenvalues only, ascending. The input must be symmetric; this is not checked.
pub fn sym_eigenvalues(s: &Matrix) -> Vec<f64> {
    let n = s.rows();
    match n {
        0 => Vec::new(),
        1 => vec![s[(0, 0)]],
        2 => {
            let (a, b, c) = (s[(0, 0)], s[(0, 1)], s[(1, 1)]);
            let mean = 0.5 * (a + c);
            let r = (0.5 * (a - c)).hypot(b);
            vec![mean - r, mean + r]
        }
        _ => {
            let (mut vals, _) = jacobi(s, false);
            vals.sort_by(f64::total_cmp);
            vals
        }
    }
}

/// Largest eigenvalue with a unit eigenvector. Ties are resolved towards the
/// eigenvector that the Jacobi sweep leaves in the lowest column.
pub fn leading_eigenpair(s: &Matrix) -> (f64, Vec<f64>) {
    let (vals, vecs) = jacobi(s, true);
    let vecs = vecs.expect("vectors requested");
    let mut best = 0;
    for (k, &v) in vals.iter().enumerate() {
        if v > vals[best] {
            best = k;
        }
    }
    let n = s.rows();
    (vals[best], (0..n).map(|i| vecs[(i, best)]).collect())
}

fn sorted(vals: Vec<f64>, vecs: Matrix) -> EigenResult {
    let n = vals.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| vals[i].total_cmp(&vals[j]).then(i.cmp(&j)));
    let mut v = Matrix::zeros(n, n);
    for (new, &old) in order.iter().enumerate() {
        for i in 0..n {
            v[(i, new)] = vecs[(i, old)];
        }
    }
    EigenResult {
        eigenvalues: order.iter().map(|&k| vals[k]).collect(),
        eigenvectors: v,
    }
}

fn jacobi(s: &Matrix, want_vectors: bool) -> (Vec<f64>, Option<Matrix>) {
    let n = s.rows();
    let mut a = s.as_slice().to_vec();
    let mut v = want_vectors.then(|| Matrix::identity(n));
    let tol = EIG_OFFDIAG_TOL * s.frobenius_norm();

    for _ in 0..EIG_MAX_SWEEPS {
        let mut off = 0.0_f64;
        for p in 0..n {
            for q in p + 1..n {
                off = off.max(a[p * n + q].abs());
            }
        }
        if off <= tol {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let sign = if theta >= 0.0 { 1.0 } else { -1.0 };
                let t = sign / (theta.abs() + theta.hypot(1.0));
                let c = 1.0 / t.hypot(1.0);
                let sn = t * c;

                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - sn * akq;
                    a[k * n + q] = sn * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - sn * aqk;
                    a[q * n + k] = sn * apk + c * aqk;
                }
                a[p * n + q] = 0.0;
                a[q * n + p] = 0.0;

                if let Some(v) = v.as_mut() {
                    for k in 0..n {
                        let vkp = v[(k, p)];
                        let vkq = v[(k, q)];
                        v[(k, p)] = c * vkp - sn * vkq;
                        v[(k, q)] = sn * vkp + c * vkq;
                    }
                }
            }
        }
    }
    ((0..n).map(|i| a[i * n + i]).collect(), v)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diagonal_input() {
        let r = eig_sym(&Matrix::from_diag(&[3.0, 1.0])).unwrap();
        assert_eq!(r.eigenvalues, vec![1.0, 3.0]);
        assert_eq!(r.eigenvector(0), vec![0.0, 1.0]);
    }

    #[test]
    fn all_ones_2x2() {
        let s = Matrix::from_rows(&[[1.0, 1.0], [1.0, 1.0]]).unwrap();
        let r = eig_sym(&s).unwrap();
        assert!(r.eigenvalues[0].abs() < 1e-15);
        assert!((r.eigenvalues[1] - 2.0).abs() < 1e-15);
        assert_eq!(sym_eigenvalues(&s).len(), 2);
        assert!((sym_eigenvalues(&s)[1] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn zero_matrix() {
        let r = eig_sym(&Matrix::zeros(4, 4)).unwrap();
        assert_eq!(r.eigenvalues, vec![0.0; 4]);
    }

    #[test]
    fn rejects_asymmetric() {
        let a = Matrix::from_rows(&[[1.0, 2.0], [0.0, 1.0]]).unwrap();
        assert!(matches!(eig_sym(&a), Err(Error::Contract(_))));
    }

    #[test]
    fn three_by_three_against_known_spectrum() {
        // tridiag(-1, 2, -1): eigenvalues 2 - 2cos(kπ/4)
        let s = Matrix::from_rows(&[[2.0, -1.0, 0.0], [-1.0, 2.0, -1.0], [0.0, -1.0, 2.0]])
            .unwrap();
        let r = eig_sym(&s).unwrap();
        let expect: Vec<f64> = (1..=3)
            .map(|k| 2.0 - 2.0 * (k as f64 * std::f64::consts::PI / 4.0).cos())
            .collect();
        for (a, b) in r.eigenvalues.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-14, "{a} vs {b}");
        }
        let (top, v) = leading_eigenpair(&s);
        assert!((top - expect[2]).abs() < 1e-14);
        let sv = s.matvec(&v).unwrap();
        for i in 0..3 {
            assert!((sv[i] - top * v[i]).abs() < 1e-13);
        }
    }
}
