//! Dense linear algebra shared by every other module.

mod matrix;
mod svd;

pub use matrix::{dot, matmul, matmul_nt, matmul_tn, norm2, Matrix};
pub(crate) use matrix::{gemm, mm, mm_nt, mm_tn};
pub use svd::{svd, SingularGroup, SvdFactors, MAX_SWEEPS, ORTHOGONALITY_TOL};

use crate::error::{GraspError, Result};

/// `aᵀb / (‖a‖‖b‖)`, clamped to `[-1, 1]`.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(GraspError::Shape {
            op: "cosine_similarity",
            lhs: (a.len(), 1),
            rhs: (b.len(), 1),
        });
    }
    let na = norm2(a);
    let nb = norm2(b);
    if na == 0.0 {
        return Err(GraspError::DegenerateVector("first operand has zero norm"));
    }
    if nb == 0.0 {
        return Err(GraspError::DegenerateVector("second operand has zero norm"));
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// `Σ_k u_k σ_k v_kᵀ` as an `m x n` matrix.
pub fn reconstruct_from_groups(groups: &[SingularGroup], m: usize, n: usize) -> Result<Matrix> {
    let mut out = Matrix::zeros(m, n);
    for g in groups {
        if g.u.len() != m || g.v.len() != n {
            return Err(GraspError::Shape {
                op: "reconstruct_from_groups",
                lhs: (m, n),
                rhs: (g.u.len(), g.v.len()),
            });
        }
        for i in 0..m {
            let ui = g.u[i] * g.sigma;
            for (o, vj) in out.row_mut(i).iter_mut().zip(&g.v) {
                *o += ui * vj;
            }
        }
    }
    Ok(out)
}
