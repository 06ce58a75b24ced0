//! One-sided (Hestenes) Jacobi SVD.
//!
//! Columns of a working copy are rotated pairwise until mutually orthogonal;
//! the column norms are then the singular values and the accumulated
//! rotations form `V`. Wide inputs are handled through their transpose.

use serde::{Deserialize, Serialize};

use super::matrix::{dot, Matrix};
use crate::error::{GraspError, Result};

pub const MAX_SWEEPS: usize = 100;
/// Pairs with `|a_p·a_q| <= TOL * ‖a_p‖‖a_q‖` count as orthogonal.
pub const ORTHOGONALITY_TOL: f64 = 1e-12;

/// Thin SVD `W = U diag(sigma) Vᵀ` with `l = min(m, n)` columns in `u` and `v`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvdFactors {
    pub u: Matrix,
    pub sigma: Vec<f64>,
    pub v: Matrix,
}

/// One rank-one component `u_k σ_k v_kᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct SingularGroup {
    pub index: usize,
    pub u: Vec<f64>,
    pub sigma: f64,
    pub v: Vec<f64>,
}

impl SvdFactors {
    pub fn rank_limit(&self) -> usize {
        self.sigma.len()
    }

    pub fn m(&self) -> usize {
        self.u.rows()
    }

    pub fn n(&self) -> usize {
        self.v.rows()
    }

    pub fn group(&self, k: usize) -> SingularGroup {
        SingularGroup {
            index: k,
            u: self.u.col(k),
            sigma: self.sigma[k],
            v: self.v.col(k),
        }
    }

    pub fn groups(&self) -> Vec<SingularGroup> {
        (0..self.rank_limit()).map(|k| self.group(k)).collect()
    }

    /// `U diag(sigma) Vᵀ`.
    pub fn reconstruct(&self) -> Matrix {
        let mut us = self.u.clone();
        for i in 0..us.rows() {
            for (x, s) in us.row_mut(i).iter_mut().zip(&self.sigma) {
                *x *= s;
            }
        }
        super::matrix::mm_nt(&us, &self.v)
    }
}

pub fn svd(w: &Matrix) -> Result<SvdFactors> {
    let (m, n) = w.shape();
    if m == 0 || n == 0 {
        return Err(GraspError::validation(format!("svd of empty {m}x{n} matrix")));
    }
    if !w.is_finite() {
        return Err(GraspError::NonFinite("svd input".into()));
    }
    if m >= n {
        let (u, sigma, v) = jacobi_tall(w)?;
        Ok(SvdFactors { u, sigma, v })
    } else {
        let (v, sigma, u) = jacobi_tall(&w.transpose())?;
        let mut f = SvdFactors { u, sigma, v };
        fix_signs(&mut f);
        Ok(f)
    }
}

/// SVD of a matrix with `rows >= cols`. Returns `(U, sigma, V)` with the sign
/// convention already applied.
fn jacobi_tall(w: &Matrix) -> Result<(Matrix, Vec<f64>, Matrix)> {
    let (m, n) = w.shape();
    // Column-major working copies.
    let mut a: Vec<Vec<f64>> = (0..n).map(|j| w.col(j)).collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            e
        })
        .collect();
    let mut norms: Vec<f64> = a.iter().map(|c| dot(c, c)).collect();
    let scale = norms.iter().cloned().fold(0.0, f64::max);
    // Columns below this squared norm are numerically zero and are skipped.
    let negligible = scale * f64::EPSILON * f64::EPSILON;

    let mut converged = false;
    let mut residual = 0.0;
    for _sweep in 0..MAX_SWEEPS {
        let mut rotated = false;
        residual = 0.0f64;
        for p in 0..n {
            for q in (p + 1)..n {
                let alpha = norms[p];
                let beta = norms[q];
                if alpha <= negligible || beta <= negligible {
                    continue;
                }
                let gamma = dot(&a[p], &a[q]);
                let rel = gamma.abs() / (alpha * beta).sqrt();
                residual = residual.max(rel);
                if rel <= ORTHOGONALITY_TOL {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut a, p, q, c, s);
                rotate(&mut v, p, q, c, s);
                norms[p] = dot(&a[p], &a[p]);
                norms[q] = dot(&a[q], &a[q]);
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(GraspError::Convergence {
            sweeps: MAX_SWEEPS,
            residual,
        });
    }

    let sigma_raw: Vec<f64> = a.iter().map(|c| dot(c, c).sqrt()).collect();
    // Stable sort: equal singular values keep their original column order.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| sigma_raw[j].total_cmp(&sigma_raw[i]));

    let smax = sigma_raw[order[0]];
    let tiny = (m as f64) * f64::EPSILON * smax;
    let mut u_cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut sigma = Vec::with_capacity(n);
    let mut v_cols = Vec::with_capacity(n);
    let mut deficient = Vec::new();
    for (slot, &j) in order.iter().enumerate() {
        let s = sigma_raw[j];
        if s > tiny && s > 0.0 {
            u_cols.push(a[j].iter().map(|x| x / s).collect());
        } else {
            u_cols.push(vec![0.0; m]);
            deficient.push(slot);
        }
        sigma.push(s);
        v_cols.push(v[j].clone());
    }
    complete_basis(&mut u_cols, &deficient);

    let u = Matrix::from_fn(m, n, |i, k| u_cols[k][i]);
    let vm = Matrix::from_fn(n, n, |i, k| v_cols[k][i]);
    let mut f = SvdFactors { u, sigma, v: vm };
    fix_signs(&mut f);
    Ok((f.u, f.sigma, f.v))
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (lo, hi) = cols.split_at_mut(q);
    let (cp, cq) = (&mut lo[p], &mut hi[0]);
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let (xp, xq) = (*x, *y);
        *x = c * xp - s * xq;
        *y = s * xp + c * xq;
    }
}

/// Fills the listed slots with unit vectors orthogonal to every other column
/// (modified Gram-Schmidt over the standard basis, two passes).
fn complete_basis(cols: &mut [Vec<f64>], slots: &[usize]) {
    if slots.is_empty() {
        return;
    }
    let m = cols[0].len();
    let mut filled: Vec<bool> = vec![true; cols.len()];
    for &s in slots {
        filled[s] = false;
    }
    let mut candidate = 0;
    for &slot in slots {
        loop {
            assert!(candidate < m, "basis completion ran out of candidates");
            let mut e = vec![0.0; m];
            e[candidate] = 1.0;
            candidate += 1;
            for _ in 0..2 {
                for (k, col) in cols.iter().enumerate() {
                    if filled[k] {
                        let proj = dot(col, &e);
                        e.iter_mut().zip(col).for_each(|(x, c)| *x -= proj * c);
                    }
                }
            }
            let nrm = dot(&e, &e).sqrt();
            if nrm > 1e-3 {
                e.iter_mut().for_each(|x| *x /= nrm);
                cols[slot] = e;
                filled[slot] = true;
                break;
            }
        }
    }
}

/// Flips each `(u_k, v_k)` pair so the largest-magnitude entry of `u_k` is
/// positive (first such entry on ties).
fn fix_signs(f: &mut SvdFactors) {
    let (m, l) = f.u.shape();
    for k in 0..l {
        let mut best = 0;
        let mut best_abs = -1.0;
        for i in 0..m {
            let a = f.u.get(i, k).abs();
            if a > best_abs {
                best_abs = a;
                best = i;
            }
        }
        if f.u.get(best, k) < 0.0 {
            for i in 0..m {
                f.u.set(i, k, -f.u.get(i, k));
            }
            for i in 0..f.v.rows() {
                f.v.set(i, k, -f.v.get(i, k));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::matrix::{matmul_tn, mm_tn};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn orth_residual(q: &Matrix) -> f64 {
        mm_tn(q, q).sub(&Matrix::identity(q.cols())).unwrap().frobenius_norm()
    }

    fn rel_recon(w: &Matrix, f: &SvdFactors) -> f64 {
        f.reconstruct().sub(w).unwrap().frobenius_norm() / w.frobenius_norm()
    }

    #[test]
    fn identity_has_unit_sigma() {
        let f = svd(&Matrix::identity(2)).unwrap();
        assert_eq!(f.sigma, vec![1.0, 1.0]);
    }

    #[test]
    fn diagonal_gives_signed_permutations() {
        let f = svd(&Matrix::diag(&[3.0, 2.0])).unwrap();
        assert_eq!(f.sigma, vec![3.0, 2.0]);
        for q in [&f.u, &f.v] {
            for x in q.as_slice() {
                assert!(x.abs() == 0.0 || x.abs() == 1.0);
            }
        }
        assert_eq!(f.u, Matrix::identity(2));
        assert_eq!(f.v, Matrix::identity(2));
    }

    #[test]
    fn random_tall_and_wide() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for (m, n) in [(8, 5), (5, 8), (1, 4), (4, 1), (7, 7)] {
            let w = Matrix::from_fn(m, n, |_, _| rng.random_range(-1.0..1.0));
            let f = svd(&w).unwrap();
            assert_eq!(f.rank_limit(), m.min(n));
            assert!(rel_recon(&w, &f) <= 1e-10);
            assert!(orth_residual(&f.u) <= 1e-10);
            assert!(orth_residual(&f.v) <= 1e-10);
            assert!(f.sigma.windows(2).all(|p| p[0] >= p[1]));
        }
    }

    #[test]
    fn rank_deficient_completes_basis() {
        // Rank one 4x3: remaining u columns must still be orthonormal.
        let w = Matrix::from_fn(4, 3, |i, j| (i as f64 + 1.0) * (j as f64 - 1.5));
        let f = svd(&w).unwrap();
        assert!(orth_residual(&f.u) <= 1e-10);
        assert!(orth_residual(&f.v) <= 1e-10);
        assert!(f.sigma[1] < 1e-12 && f.sigma[2] < 1e-12);
        assert!(rel_recon(&w, &f) <= 1e-10);

        let z = svd(&Matrix::zeros(3, 2)).unwrap();
        assert_eq!(z.sigma, vec![0.0, 0.0]);
        assert!(orth_residual(&z.u) <= 1e-12);
    }

    #[test]
    fn largest_u_entry_positive() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = Matrix::from_fn(6, 4, |_, _| rng.random_range(-1.0..1.0));
        let f = svd(&w).unwrap();
        for k in 0..4 {
            let col = f.u.col(k);
            let mx = col.iter().cloned().fold(0.0f64, |a, b| if b.abs() > a.abs() { b } else { a });
            assert!(mx > 0.0);
        }
    }

    #[test]
    fn ties_keep_column_order() {
        // Equal singular values sit on columns 0 and 1 of a permuted diagonal.
        let w = Matrix::from_rows(&[vec![0.0, 2.0, 0.0], vec![2.0, 0.0, 0.0], vec![0.0, 0.0, 1.0]]).unwrap();
        let f = svd(&w).unwrap();
        assert_eq!(f.sigma, vec![2.0, 2.0, 1.0]);
        // First group comes from original column 0.
        assert_eq!(f.v.col(0), vec![1.0, 0.0, 0.0]);
        let _ = matmul_tn(&f.u, &f.u).unwrap();
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(svd(&Matrix::zeros(0, 3)), Err(GraspError::Validation(_))));
    }
}
