//! Local multilevel diagonal preconditioner B^{-1} = sum_l I^l D^l_inv
//! (I^l)^T over marked-node sets, plus the stable-decomposition diagnostic.

use crate::hierarchy::{marked_vertices, Hierarchy};
use crate::kernel::{diagonal_entry, FracParams, KernelError, QuadConfig};
use crate::linalg::{CompressedMatrix, DenseSymMatrix, LinearOperator};
use crate::mesh::{boundary_vertices, MeshView, RefinementForest};
use crate::solver::{lambda_max_power, lambda_min_inverse_power, EigenReport, SolverError};
use crate::space::{
    build_space, prolongation, scott_zhang_apply_discrete, AveragingAssignment, FeSpace, Family,
    SpaceError,
};
use rayon::prelude::*;
use std::collections::HashSet;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PrecondError {
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Space(#[from] SpaceError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error("nonpositive diagonal entry {value} at node {node} (quadrature failure)")]
    NonpositiveDiagonal { node: usize, value: f64 },
    #[error("dimension mismatch: preconditioner dim {expected}, vector {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("marked set of level {0} is empty")]
    EmptyMarkedSet(usize),
    #[error("hierarchy/assignment mismatch: {0}")]
    Mismatch(String),
}

/// Marked nodes of a hierarchy level: new dofs plus dofs whose vertex patch
/// changed (p1 flavors; restricted to interior vertices for the zero-trace
/// family), or the barycenters of new elements (p0). Level 0 marks
/// everything.
pub fn marked_nodes(
    forest: &RefinementForest,
    hierarchy: &Hierarchy,
    level: usize,
    family: Family,
) -> Vec<usize> {
    match family {
        Family::P0 => {
            let fine = &hierarchy.levels[level];
            if level == 0 {
                return fine.elements.clone();
            }
            let coarse: HashSet<usize> =
                hierarchy.levels[level - 1].elements.iter().copied().collect();
            fine.elements.iter().copied().filter(|e| !coarse.contains(e)).collect()
        }
        Family::P1 => marked_vertices(forest, hierarchy, level),
        Family::P1ZeroBc => {
            let boundary = boundary_vertices(forest, &hierarchy.levels[level]);
            marked_vertices(forest, hierarchy, level)
                .into_iter()
                .filter(|z| !boundary.contains(z))
                .collect()
        }
    }
}

/// Inverse diagonal entries 1/a(phi_z, phi_z) for the marked nodes.
pub fn level_diagonal(
    forest: &RefinementForest,
    space: &FeSpace,
    marked: &[usize],
    boundary: &[([f64; 2], [f64; 2])],
    params: &FracParams,
    quad: &QuadConfig,
) -> Result<Vec<(usize, f64)>, PrecondError> {
    if marked.is_empty() {
        return Err(PrecondError::EmptyMarkedSet(usize::MAX));
    }
    let entries: Vec<Result<(usize, f64), PrecondError>> = marked
        .par_iter()
        .map(|&node| {
            let value = diagonal_entry(forest, space, node, boundary, params, quad)?;
            if value <= 0.0 {
                return Err(PrecondError::NonpositiveDiagonal { node, value });
            }
            Ok((node, value))
        })
        .collect();
    entries.into_iter().collect()
}

/// Everything the preconditioner needs per level.
#[derive(Debug, Clone)]
pub struct LevelData {
    pub level: usize,
    pub space: FeSpace,
    /// marked node ids (vertices or elements) and their dof indices
    pub marked: Vec<usize>,
    pub marked_dofs: Vec<usize>,
    /// a(phi_z, phi_z) per marked dof, parallel to `marked_dofs`
    pub diag: Vec<f64>,
    /// two-level prolongation to the next level (absent on the finest)
    pub prolong: Option<CompressedMatrix>,
}

#[derive(Debug)]
pub struct MlPreconditioner {
    pub levels: Vec<LevelData>,
    pub params: FracParams,
}

impl MlPreconditioner {
    /// Assemble marked sets, level diagonals (only those entries, never a
    /// full coarse matrix), and the two-level prolongations.
    pub fn build(
        forest: &RefinementForest,
        hierarchy: &Hierarchy,
        family: Family,
        params: &FracParams,
        quad: &QuadConfig,
    ) -> Result<Self, PrecondError> {
        crate::kernel::validate_family(family, params)?;
        let boundary = crate::mesh::domain_polygon(forest, &hierarchy.levels[0]);
        let mut levels = Vec::with_capacity(hierarchy.levels.len());
        for (l, mesh) in hierarchy.levels.iter().enumerate() {
            let space = build_space(forest, mesh, family)?;
            let marked = marked_nodes(forest, hierarchy, l, family);
            if marked.is_empty() {
                return Err(PrecondError::EmptyMarkedSet(l));
            }
            let diag_entries =
                level_diagonal(forest, &space, &marked, &boundary, params, quad)?;
            let marked_dofs: Vec<usize> =
                diag_entries.iter().map(|&(n, _)| space.dof_of_node[&n]).collect();
            let diag: Vec<f64> = diag_entries.iter().map(|&(_, v)| v).collect();
            levels.push(LevelData { level: l, space, marked, marked_dofs, diag, prolong: None });
        }
        for l in 0..levels.len() - 1 {
            let p = prolongation(forest, &levels[l].space, &levels[l + 1].space)?;
            levels[l].prolong = Some(p);
        }
        Ok(MlPreconditioner { levels, params: *params })
    }

    pub fn finest_dim(&self) -> usize {
        self.levels.last().map_or(0, |l| l.space.dim())
    }

    /// y = sum_{l <= prefix} I^l D^l_inv (I^l)^T x, one restriction sweep
    /// down and one prolongation sweep up.
    pub fn apply_prefix(&self, prefix: usize, x: &[f64]) -> Result<Vec<f64>, PrecondError> {
        let dim = self.levels[prefix].space.dim();
        if x.len() != dim {
            return Err(PrecondError::DimensionMismatch { expected: dim, got: x.len() });
        }
        // residual restrictions r_l = (P_l)^T r_{l+1}
        let mut restricted: Vec<Vec<f64>> = vec![Vec::new(); prefix + 1];
        restricted[prefix] = x.to_vec();
        for l in (0..prefix).rev() {
            let p = self.levels[l].prolong.as_ref().expect("prolongation present below top");
            restricted[l] = p.matvec_transpose(&restricted[l + 1]);
        }
        // diagonal scaling on marked dofs, then accumulate upward
        let mut acc = vec![0.0; self.levels[0].space.dim()];
        for l in 0..=prefix {
            let data = &self.levels[l];
            let mut d = vec![0.0; data.space.dim()];
            for (&dof, &a_zz) in data.marked_dofs.iter().zip(&data.diag) {
                d[dof] = restricted[l][dof] / a_zz;
            }
            if l == 0 {
                acc = d;
            } else {
                for (a, v) in acc.iter_mut().zip(&d) {
                    *a += v;
                }
            }
            if l < prefix {
                let p = self.levels[l].prolong.as_ref().unwrap();
                acc = p.matvec(&acc);
            }
        }
        Ok(acc)
    }

    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>, PrecondError> {
        self.apply_prefix(self.levels.len() - 1, x)
    }

    /// Counted floating-point work of one application through `prefix`:
    /// two passes over each prolongation and the diagonal scaling.
    pub fn apply_cost_flops(&self, prefix: usize) -> u64 {
        let mut flops = 0u64;
        for l in 0..=prefix {
            if l < prefix {
                if let Some(p) = &self.levels[l].prolong {
                    flops += 4 * p.nnz() as u64;
                }
            }
            flops += 2 * self.levels[l].marked_dofs.len() as u64;
        }
        flops
    }

    /// Explicit dense matrix of the prefix preconditioner (tests only).
    pub fn dense_matrix(&self, prefix: usize) -> DenseSymMatrix {
        let n = self.levels[prefix].space.dim();
        let mut m = DenseSymMatrix::zeros(n);
        for j in 0..n {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            let col = self.apply_prefix(prefix, &e).unwrap();
            for i in j..n {
                m.set(i, j, col[i]);
            }
        }
        m
    }
}

/// Operator view of a prefix of the preconditioner.
pub struct PrecondOperator<'a> {
    pub prec: &'a MlPreconditioner,
    pub prefix: usize,
}

impl LinearOperator for PrecondOperator<'_> {
    fn dim(&self) -> usize {
        self.prec.levels[self.prefix].space.dim()
    }
    fn apply_into(&self, x: &[f64], y: &mut [f64]) {
        let r = self.prec.apply_prefix(self.prefix, x).expect("dimension checked");
        y.copy_from_slice(&r);
    }
}

/// Extreme eigenvalues of B^{-1}A in the A-inner product via power and
/// inverse-power iteration with seeded random starts.
pub fn condition_report(
    a: &DenseSymMatrix,
    binv: &dyn LinearOperator,
    tol: f64,
    max_iter: usize,
    seed: u64,
) -> Result<EigenReport, PrecondError> {
    assert_eq!(a.n, binv.dim());
    let n = a.n;
    let composed = (n, |x: &[f64], y: &mut [f64]| {
        let ax = a.apply(x);
        let bx = binv.apply(&ax);
        y.copy_from_slice(&bx);
    });
    let max = lambda_max_power(&composed, a, tol, max_iter, seed);
    let min = lambda_min_inverse_power(a, binv, tol, max_iter, 1e-10, seed.wrapping_add(1))?;
    Ok(EigenReport {
        lambda_min: min.value,
        lambda_max: max.value,
        kappa: max.value / min.value,
        iterations_max: max.iterations,
        iterations_min: min.iterations,
        converged: max.converged && min.converged,
    })
}

/// Level components of the stable decomposition and the measured ratios.
#[derive(Debug)]
pub struct DecompositionReport {
    /// coefficients of u_l on each level's space
    pub components: Vec<Vec<f64>>,
    /// sum_l hat-a_l(u_l, u_l) / a(u, u) with the hat-h_l^{-2s} local solver
    pub ratio_hhat: f64,
    /// same ratio with the true diagonal entries a(phi_z, phi_z)
    pub ratio_diag: f64,
    /// max |sum_l u_l - u| over finest dofs (telescoping check)
    pub reconstruction_error: f64,
}

/// u_l = sum_{z in M_l} (I_l - I_{l-1}) u(z) phi_z^l for the zero-trace p1
/// preconditioner levels; the telescoping sum reconstructs u exactly.
pub fn stable_decomposition(
    forest: &RefinementForest,
    hierarchy: &Hierarchy,
    prec: &MlPreconditioner,
    assignments: &[AveragingAssignment],
    u: &[f64],
    a_matrix: &DenseSymMatrix,
) -> Result<DecompositionReport, PrecondError> {
    let nl = prec.levels.len();
    if assignments.len() != nl || hierarchy.levels.len() != nl {
        return Err(PrecondError::Mismatch(format!(
            "{} levels vs {} assignments",
            nl,
            assignments.len()
        )));
    }
    let finest = &prec.levels[nl - 1].space;
    if u.len() != finest.dim() {
        return Err(PrecondError::DimensionMismatch { expected: finest.dim(), got: u.len() });
    }
    // I_l u for every level
    let mut sz: Vec<Vec<f64>> = Vec::with_capacity(nl);
    for l in 0..nl {
        sz.push(scott_zhang_apply_discrete(
            forest,
            &prec.levels[l].space,
            &assignments[l],
            finest,
            u,
        )?);
    }
    let mut components: Vec<Vec<f64>> = Vec::with_capacity(nl);
    let mut sum_hhat = 0.0;
    let mut sum_diag = 0.0;
    let s = prec.params.s;
    for l in 0..nl {
        let data = &prec.levels[l];
        let diff: Vec<f64> = if l == 0 {
            sz[0].clone()
        } else {
            let p = prec.levels[l - 1].prolong.as_ref().unwrap();
            let coarse_on_fine = p.matvec(&sz[l - 1]);
            sz[l].iter().zip(&coarse_on_fine).map(|(f, c)| f - c).collect()
        };
        let marked: HashSet<usize> = data.marked_dofs.iter().copied().collect();
        // Eq. SZzero: differences vanish off the marked set by construction
        for (dof, &v) in diff.iter().enumerate() {
            if !marked.contains(&dof) {
                assert!(
                    v.abs() <= 1e-12,
                    "telescoping locality violated at level {l}, dof {dof}: {v}"
                );
            }
        }
        let mut comp = vec![0.0; data.space.dim()];
        let hat_h = hierarchy.hat_h(l);
        for (&dof, &a_zz) in data.marked_dofs.iter().zip(&data.diag) {
            let v = diff[dof];
            comp[dof] = v;
            let z = data.space.nodes[dof];
            let phi_l2_sq = crate::space::hat_l2_norm_sq(forest, &data.space.mesh, z);
            sum_hhat += hat_h.powf(-2.0 * s) * v * v * phi_l2_sq;
            sum_diag += v * v * a_zz;
        }
        components.push(comp);
    }
    // telescoping reconstruction on the finest level
    let mut recon = vec![0.0; finest.dim()];
    for l in 0..nl {
        let mut lifted = components[l].clone();
        for k in l..nl - 1 {
            lifted = prec.levels[k].prolong.as_ref().unwrap().matvec(&lifted);
        }
        for (r, v) in recon.iter_mut().zip(&lifted) {
            *r += v;
        }
    }
    let reconstruction_error = recon
        .iter()
        .zip(u)
        .map(|(r, u)| (r - u).abs())
        .fold(0.0, f64::max);
    let energy = {
        let au = a_matrix.apply(u);
        crate::linalg::dot(&au, u)
    };
    Ok(DecompositionReport {
        components,
        ratio_hhat: sum_hhat / energy,
        ratio_diag: sum_diag / energy,
        reconstruction_error,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::assemble_stiffness;
    use crate::mesh::{make_initial_mesh, uniform_refine, Domain};

    #[test]
    fn jacobi_limit_on_single_level() {
        // L = 0: y_j = x_j / A_jj
        let (mut forest, mesh) = make_initial_mesh(Domain::UnitSquare);
        let fine = uniform_refine(&mut forest, &mesh, 2).unwrap();
        let h = crate::hierarchy::build_fcc_hierarchy(&mut forest, &fine, Some(0)).unwrap();
        // single-level hierarchy over the roots: use the uniform hierarchy
        let h0 = crate::hierarchy::Hierarchy {
            forest_id: h.forest_id,
            kind: crate::hierarchy::HierarchyKind::Uniform,
            levels: vec![fine.clone()],
            uniform_levels: None,
            hat_h0: h.hat_h0,
        };
        let params = FracParams::new(0.4).unwrap();
        let quad = QuadConfig::default();
        let prec =
            MlPreconditioner::build(&forest, &h0, Family::P1ZeroBc, &params, &quad).unwrap();
        let a = assemble_stiffness(&forest, &prec.levels[0].space, &params, &quad).unwrap();
        let x: Vec<f64> = (0..a.n).map(|i| (i as f64 * 0.7).sin()).collect();
        let y = prec.apply(&x).unwrap();
        for j in 0..a.n {
            let expected = x[j] / a.get(j, j);
            assert!(
                (y[j] - expected).abs() <= 1e-10 * expected.abs(),
                "j={j}: {} vs {expected}",
                y[j]
            );
        }
    }

    #[test]
    fn diagonal_matches_full_assembly() {
        let (mut forest, mesh) = make_initial_mesh(Domain::UnitSquare);
        let fine = uniform_refine(&mut forest, &mesh, 1).unwrap();
        let fine2 = crate::mesh::refine(&mut forest, &fine, &fine.elements[..3].to_vec()).unwrap();
        let params = FracParams::new(0.3).unwrap();
        let quad = QuadConfig::default();
        let boundary = crate::mesh::domain_polygon(&forest, &fine2);
        for family in [Family::P1ZeroBc, Family::P0] {
            let space = build_space(&forest, &fine2, family).unwrap();
            let a = assemble_stiffness(&forest, &space, &params, &quad).unwrap();
            for (dof, &node) in space.nodes.iter().enumerate() {
                let d =
                    diagonal_entry(&forest, &space, node, &boundary, &params, &quad).unwrap();
                assert!(
                    (d - a.get(dof, dof)).abs() <= 1e-10 * a.get(dof, dof),
                    "{family:?} dof {dof}: {d} vs {}",
                    a.get(dof, dof)
                );
            }
        }
    }

    #[test]
    fn apply_matches_explicit_matrix_and_is_symmetric() {
        let (mut forest, mesh) = make_initial_mesh(Domain::UnitSquare);
        let l1 = uniform_refine(&mut forest, &mesh, 1).unwrap();
        let l2 = crate::mesh::refine(&mut forest, &l1, &l1.elements[..6].to_vec()).unwrap();
        let h = crate::hierarchy::build_adaptive_hierarchy(
            &forest,
            vec![mesh.clone(), l1.clone(), l2.clone()],
        )
        .unwrap();
        let params = FracParams::new(0.45).unwrap();
        let quad = QuadConfig::default();
        let prec =
            MlPreconditioner::build(&forest, &h, Family::P0, &params, &quad).unwrap();
        let n = prec.finest_dim();
        let dense = prec.dense_matrix(prec.levels.len() - 1);
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(4);
        use rand::Rng;
        for _ in 0..5 {
            let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let y: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let bx = prec.apply(&x).unwrap();
            let by = prec.apply(&y).unwrap();
            let dx = dense.apply(&x);
            for (u, v) in bx.iter().zip(&dx) {
                assert!((u - v).abs() <= 1e-12 * v.abs().max(1.0));
            }
            // symmetry of the preconditioner
            let xy = crate::linalg::dot(&bx, &y);
            let yx = crate::linalg::dot(&by, &x);
            assert!((xy - yx).abs() <= 1e-10 * xy.abs().max(1.0));
            // positive definiteness probe
            assert!(crate::linalg::dot(&bx, &x) > 0.0);
        }
        // dimension mismatch rejected
        assert!(prec.apply(&vec![0.0; n + 1]).is_err());
    }

    #[test]
    fn condition_report_small_jacobi_matches_dense_eigensolve() {
        let (mut forest, mesh) = make_initial_mesh(Domain::UnitSquare);
        let fine = uniform_refine(&mut forest, &mesh, 2).unwrap();
        let h0 = crate::hierarchy::Hierarchy {
            forest_id: forest.id,
            kind: crate::hierarchy::HierarchyKind::Uniform,
            levels: vec![fine.clone()],
            uniform_levels: None,
            hat_h0: 0.5,
        };
        let params = FracParams::new(0.5).unwrap();
        let quad = QuadConfig::default();
        let prec =
            MlPreconditioner::build(&forest, &h0, Family::P1ZeroBc, &params, &quad).unwrap();
        let a = assemble_stiffness(&forest, &prec.levels[0].space, &params, &quad).unwrap();
        let op = PrecondOperator { prec: &prec, prefix: 0 };
        let report = condition_report(&a, &op, 1e-5, 3000, 11).unwrap();
        // oracle: eigenvalues of D^{-1/2} A D^{-1/2}
        let n = a.n;
        let d = a.diagonal();
        let mut full = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                full[i * n + j] = a.get(i, j) / (d[i] * d[j]).sqrt();
            }
        }
        let eigs = crate::oracle::symmetric_eigenvalues_jacobi(&full, n);
        let (lo, hi) = (eigs[0], eigs[n - 1]);
        assert!(
            (report.lambda_max - hi).abs() <= 0.01 * hi,
            "{} vs {hi}",
            report.lambda_max
        );
        assert!(
            (report.lambda_min - lo).abs() <= 0.01 * lo,
            "{} vs {lo}",
            report.lambda_min
        );
        let kappa_ref = hi / lo;
        assert!((report.kappa - kappa_ref).abs() <= 0.02 * kappa_ref);
    }
}
