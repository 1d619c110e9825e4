//! Conjugate gradients, preconditioned CG with Lanczos coefficients, and
//! power/inverse-power extreme-eigenvalue estimation.

use crate::linalg::{axpy, dot, norm, LinearOperator};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("preconditioner is not positive definite: <z,r> = {0}")]
    IndefinitePreconditioner(f64),
    #[error("inner solver did not converge (residual {0})")]
    InnerSolveFailed(f64),
}

#[derive(Debug, Clone)]
pub struct CgInfo {
    pub iterations: usize,
    pub converged: bool,
    pub rel_residual: f64,
}

/// Plain CG. On max_iter the best iterate is returned with
/// `converged = false`.
pub fn cg(a: &dyn LinearOperator, b: &[f64], tol: f64, max_iter: usize) -> (Vec<f64>, CgInfo) {
    let n = a.dim();
    assert_eq!(b.len(), n);
    let b_norm = norm(b).max(f64::MIN_POSITIVE);
    let mut x = vec![0.0; n];
    let mut r = b.to_vec();
    let mut p = r.clone();
    let mut rtr = dot(&r, &r);
    let mut scratch = vec![0.0; n];
    for it in 0..max_iter {
        if rtr.sqrt() <= tol * b_norm {
            return (x, CgInfo { iterations: it, converged: true, rel_residual: rtr.sqrt() / b_norm });
        }
        a.apply_into(&p, &mut scratch);
        let alpha = rtr / dot(&p, &scratch);
        axpy(&mut x, alpha, &p);
        axpy(&mut r, -alpha, &scratch);
        let rtr_new = dot(&r, &r);
        let beta = rtr_new / rtr;
        rtr = rtr_new;
        for i in 0..n {
            p[i] = r[i] + beta * p[i];
        }
    }
    let converged = rtr.sqrt() <= tol * b_norm;
    (x, CgInfo { iterations: max_iter, converged, rel_residual: rtr.sqrt() / b_norm })
}

#[derive(Debug, Clone)]
pub struct PcgInfo {
    pub iterations: usize,
    pub converged: bool,
    pub rel_residual: f64,
    /// Lanczos tridiagonal collected from the PCG recurrence.
    pub lanczos_diag: Vec<f64>,
    pub lanczos_offdiag: Vec<f64>,
}

impl PcgInfo {
    /// Eigenvalues of the Lanczos tridiagonal (Ritz values for B^{-1}A).
    pub fn ritz_values(&self) -> Vec<f64> {
        let k = self.lanczos_diag.len();
        if k == 0 {
            return Vec::new();
        }
        let mut full = vec![0.0; k * k];
        for i in 0..k {
            full[i * k + i] = self.lanczos_diag[i];
            if i + 1 < k {
                full[i * k + i + 1] = self.lanczos_offdiag[i];
                full[(i + 1) * k + i] = self.lanczos_offdiag[i];
            }
        }
        crate::oracle::symmetric_eigenvalues_jacobi(&full, k)
    }
}

/// Preconditioned CG; also emits the Lanczos tridiagonal built from the
/// alpha/beta coefficients. Detects an indefinite preconditioner via a
/// negative <z, r>.
pub fn pcg(
    a: &dyn LinearOperator,
    binv: &dyn LinearOperator,
    b: &[f64],
    tol: f64,
    max_iter: usize,
) -> Result<(Vec<f64>, PcgInfo), SolverError> {
    let n = a.dim();
    assert_eq!(b.len(), n);
    let b_norm = norm(b).max(f64::MIN_POSITIVE);
    let mut x = vec![0.0; n];
    let mut r = b.to_vec();
    let mut z = binv.apply(&r);
    let mut rz = dot(&r, &z);
    if rz < 0.0 {
        return Err(SolverError::IndefinitePreconditioner(rz));
    }
    let mut p = z.clone();
    let mut scratch = vec![0.0; n];
    let mut alphas: Vec<f64> = Vec::new();
    let mut betas: Vec<f64> = Vec::new();
    let mut diag = Vec::new();
    let mut offdiag = Vec::new();
    let info = |alphas: &[f64], betas: &[f64], diag: &mut Vec<f64>, offdiag: &mut Vec<f64>| {
        diag.clear();
        offdiag.clear();
        for k in 0..alphas.len() {
            let mut d = 1.0 / alphas[k];
            if k > 0 {
                d += betas[k - 1] / alphas[k - 1];
            }
            diag.push(d);
            if k + 1 < alphas.len() {
                offdiag.push(betas[k].sqrt() / alphas[k]);
            }
        }
    };
    let mut it = 0;
    let converged = loop {
        if norm(&r) <= tol * b_norm {
            break true;
        }
        if it >= max_iter {
            break false;
        }
        a.apply_into(&p, &mut scratch);
        let alpha = rz / dot(&p, &scratch);
        alphas.push(alpha);
        axpy(&mut x, alpha, &p);
        axpy(&mut r, -alpha, &scratch);
        binv.apply_into(&r, &mut z);
        let rz_new = dot(&r, &z);
        if rz_new < 0.0 {
            return Err(SolverError::IndefinitePreconditioner(rz_new));
        }
        let beta = rz_new / rz;
        betas.push(beta);
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
        it += 1;
    };
    info(&alphas, &betas, &mut diag, &mut offdiag);
    Ok((
        x,
        PcgInfo {
            iterations: it,
            converged,
            rel_residual: norm(&r) / b_norm,
            lanczos_diag: diag,
            lanczos_offdiag: offdiag,
        },
    ))
}

/// Estimate with convergence metadata.
#[derive(Debug, Clone, Copy)]
pub struct EigEstimate {
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
    pub last_rel_change: f64,
}

/// Extreme eigenvalue report for a preconditioned operator.
#[derive(Debug, Clone, Copy)]
pub struct EigenReport {
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub kappa: f64,
    pub iterations_max: usize,
    pub iterations_min: usize,
    pub converged: bool,
}

/// Rayleigh-quotient power iteration for the largest eigenvalue of
/// `op`, self-adjoint w.r.t. the inner product induced by `inner`
/// (pass the identity for the Euclidean case). Random seeded start; stops
/// when the relative change stays below `tol` for 3 consecutive iterations.
pub fn lambda_max_power(
    op: &dyn LinearOperator,
    inner: &dyn LinearOperator,
    tol: f64,
    max_iter: usize,
    seed: u64,
) -> EigEstimate {
    let n = op.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut rayleigh = 0.0;
    let mut stagnant = 0;
    let mut change = f64::INFINITY;
    for it in 0..max_iter {
        let av = op.apply(&v);
        let m_av = inner.apply(&av);
        let m_v = inner.apply(&v);
        let num = dot(&m_av, &v);
        let den = dot(&m_v, &v);
        let new = num / den;
        change = ((new - rayleigh) / new.abs().max(f64::MIN_POSITIVE)).abs();
        rayleigh = new;
        if change < tol {
            stagnant += 1;
            if stagnant >= 3 {
                return EigEstimate { value: rayleigh, iterations: it + 1, converged: true, last_rel_change: change };
            }
        } else {
            stagnant = 0;
        }
        let s = 1.0 / norm(&av).max(f64::MIN_POSITIVE);
        v = av;
        scale(&mut v, s);
    }
    EigEstimate { value: rayleigh, iterations: max_iter, converged: false, last_rel_change: change }
}

fn scale(v: &mut [f64], s: f64) {
    for x in v {
        *x *= s;
    }
}

/// Inverse power iteration for the smallest eigenvalue of B^{-1}A:
/// each application of the inverse solves B^{-1} z = v by CG on the SPD
/// operator B^{-1} and then A y = z by CG preconditioned with B^{-1}.
/// Returns the reciprocal of the converged Rayleigh quotient of the inverse.
pub fn lambda_min_inverse_power(
    a: &dyn LinearOperator,
    binv: &dyn LinearOperator,
    tol: f64,
    max_iter: usize,
    inner_tol: f64,
    seed: u64,
) -> Result<EigEstimate, SolverError> {
    let n = a.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let inner_max = 40 * n + 200;
    let apply_inverse = |v: &[f64]| -> Result<Vec<f64>, SolverError> {
        // z = B v  via CG on B^{-1}
        let (z, info) = cg(binv, v, inner_tol, inner_max);
        if !info.converged {
            return Err(SolverError::InnerSolveFailed(info.rel_residual));
        }
        // y = A^{-1} z  via CG preconditioned with B^{-1}
        let (y, info) = pcg(a, binv, &z, inner_tol, inner_max)?;
        if !info.converged {
            return Err(SolverError::InnerSolveFailed(info.rel_residual));
        }
        Ok(y)
    };
    let mut rayleigh_inv = 0.0;
    let mut stagnant = 0;
    let mut change = f64::INFINITY;
    for it in 0..max_iter {
        let w = apply_inverse(&v)?;
        // Rayleigh quotient of the inverse operator in the A-inner product
        let aw = a.apply(&w);
        let av = a.apply(&v);
        let new = dot(&aw, &v) / dot(&av, &v);
        change = ((new - rayleigh_inv) / new.abs().max(f64::MIN_POSITIVE)).abs();
        rayleigh_inv = new;
        if change < tol {
            stagnant += 1;
            if stagnant >= 3 {
                return Ok(EigEstimate {
                    value: 1.0 / rayleigh_inv,
                    iterations: it + 1,
                    converged: true,
                    last_rel_change: change,
                });
            }
        } else {
            stagnant = 0;
        }
        let s = 1.0 / norm(&w).max(f64::MIN_POSITIVE);
        v = w;
        scale(&mut v, s);
    }
    Ok(EigEstimate {
        value: 1.0 / rayleigh_inv,
        iterations: max_iter,
        converged: false,
        last_rel_change: change,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{CompressedMatrix, DenseSymMatrix, IdentityOperator};

    fn diag_matrix(d: &[f64]) -> DenseSymMatrix {
        let mut a = DenseSymMatrix::zeros(d.len());
        for (i, &v) in d.iter().enumerate() {
            a.set(i, i, v);
        }
        a
    }

    #[test]
    fn cg_identity_single_iteration() {
        let a = CompressedMatrix::identity(4);
        let b = vec![1.0, -2.0, 3.0, 0.5];
        let (x, info) = cg(&a, &b, 1e-12, 10);
        assert!(info.converged && info.iterations <= 1);
        for (xi, bi) in x.iter().zip(&b) {
            assert!((xi - bi).abs() < 1e-12);
        }
    }

    #[test]
    fn cg_hand_solved_diagonal() {
        let a = diag_matrix(&[1.0, 4.0]);
        let (x, info) = cg(&a, &[1.0, 4.0], 1e-12, 10);
        assert!(info.converged);
        assert!((x[0] - 1.0).abs() < 1e-10 && (x[1] - 1.0).abs() < 1e-10);
    }

    #[test]
    fn cg_finite_termination() {
        // distinct eigenvalues, n = 5: converges within n iterations
        let a = diag_matrix(&[1.0, 2.0, 3.0, 4.0, 5.0]);
        let b = vec![1.0; 5];
        let (_, info) = cg(&a, &b, 1e-10, 5);
        assert!(info.converged, "CG must converge in <= n iterations, got {info:?}");
    }

    #[test]
    fn pcg_with_exact_inverse_converges_immediately() {
        let a = diag_matrix(&[2.0, 8.0, 0.5]);
        let ainv = diag_matrix(&[0.5, 0.125, 2.0]);
        let b = vec![3.0, -1.0, 4.0];
        let (x, info) = pcg(&a, &ainv, &b, 1e-12, 10).unwrap();
        assert!(info.converged && info.iterations <= 1, "{info:?}");
        assert!((x[0] - 1.5).abs() < 1e-12);

        // identity preconditioner reproduces plain CG iterates
        let spd = {
            let mut m = DenseSymMatrix::zeros(3);
            m.set(0, 0, 3.0);
            m.set(1, 1, 2.0);
            m.set(2, 2, 4.0);
            m.set(1, 0, 1.0);
            m.set(2, 1, 0.5);
            m
        };
        let (x1, i1) = cg(&spd, &b, 1e-11, 50);
        let (x2, i2) = pcg(&spd, &IdentityOperator(3), &b, 1e-11, 50).unwrap();
        assert_eq!(i1.iterations, i2.iterations);
        for (u, v) in x1.iter().zip(&x2) {
            assert!((u - v).abs() < 1e-12);
        }

        // indefinite "preconditioner" detected
        let bad = diag_matrix(&[1.0, -1.0, 1.0]);
        assert!(pcg(&spd, &bad, &b, 1e-11, 50).is_err());
    }

    #[test]
    fn lanczos_ritz_values_match_spectrum() {
        let a = diag_matrix(&[1.0, 2.0, 5.0, 10.0]);
        let (_, info) = pcg(&a, &IdentityOperator(4), &[1.0, 1.0, 1.0, 1.0], 1e-14, 20).unwrap();
        let ritz = info.ritz_values();
        // with a full Krylov space the extreme Ritz values hit the spectrum
        assert!((ritz.first().unwrap() - 1.0).abs() < 1e-6);
        assert!((ritz.last().unwrap() - 10.0).abs() < 1e-6);
    }

    #[test]
    fn power_iterations() {
        let id = IdentityOperator(3);
        let est = lambda_max_power(&id, &IdentityOperator(3), 1e-10, 100, 1);
        assert!(est.converged && (est.value - 1.0).abs() < 1e-10);

        let p = diag_matrix(&[1.0, 3.0]);
        let est = lambda_max_power(&p, &IdentityOperator(2), 1e-10, 500, 2);
        assert!(est.converged && (est.value - 3.0).abs() < 1e-6, "{est:?}");

        let a = diag_matrix(&[2.0, 6.0]);
        let est =
            lambda_min_inverse_power(&a, &IdentityOperator(2), 1e-10, 500, 1e-12, 3).unwrap();
        assert!(est.converged && (est.value - 2.0).abs() < 1e-6, "{est:?}");

        // cross-check against Ritz values from PCG within 5%
        let big = diag_matrix(&[1.0, 1.7, 2.9, 4.2, 8.5]);
        let (_, info) = pcg(&big, &IdentityOperator(5), &[1.0; 5], 1e-14, 30).unwrap();
        let ritz = info.ritz_values();
        let pmax = lambda_max_power(&big, &IdentityOperator(5), 1e-6, 2000, 4);
        assert!((pmax.value - ritz.last().unwrap()).abs() <= 0.05 * ritz.last().unwrap());
        let pmin =
            lambda_min_inverse_power(&big, &IdentityOperator(5), 1e-6, 2000, 1e-12, 5).unwrap();
        assert!((pmin.value - ritz.first().unwrap()).abs() <= 0.05 * ritz.first().unwrap());
    }
}
