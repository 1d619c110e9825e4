//! SOLVE - ESTIMATE - MARK - REFINE with the weighted residual estimator
//! eta_l = (sum_T || h-tilde^s (f - (-Delta)^s u_l) ||^2_{L2(T)})^{1/2}.

use crate::hierarchy::{build_adaptive_hierarchy, Hierarchy};
use crate::kernel::{
    assemble_load, assemble_stiffness, eval_frac_laplacian_known_owner, FracParams, KernelError,
    QuadConfig,
};
use crate::linalg::LinearOperator;
use crate::mesh::{refine, uniform_refine, MeshError, MeshView, RefinementForest};
use crate::precond::{MlPreconditioner, PrecondError, PrecondOperator};
use crate::quadrature::tri_rule_degree5;
use crate::solver::pcg;
use crate::space::{build_space, Family, SpaceError};
use rayon::prelude::*;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AdaptiveError {
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Space(#[from] SpaceError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Precond(#[from] PrecondError),
    #[error("solver failed at iteration {iteration}: {source}")]
    Solve {
        iteration: usize,
        #[source]
        source: crate::solver::SolverError,
    },
    #[error("estimator evaluation failed on element {element} at ({x}, {y}): {source}")]
    Estimate {
        element: usize,
        x: f64,
        y: f64,
        #[source]
        source: KernelError,
    },
    #[error("invalid Doerfler parameter theta = {0}, need (0, 1]")]
    BadTheta(f64),
}

/// Estimator configuration: Doerfler theta and the residual quadrature.
#[derive(Debug, Clone, Copy)]
pub struct EstimatorConfig {
    pub theta: f64,
    /// inner quadrature for the nonlocal residual evaluation
    pub residual_quad: QuadConfig,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        EstimatorConfig {
            theta: 0.5,
            residual_quad: QuadConfig {
                gauss_order: 4,
                min_far_order: 1,
                ..QuadConfig::default()
            },
        }
    }
}

impl EstimatorConfig {
    pub fn validate(&self) -> Result<(), AdaptiveError> {
        if !(0.0 < self.theta && self.theta <= 1.0) {
            return Err(AdaptiveError::BadTheta(self.theta));
        }
        Ok(())
    }
}

/// Per-element estimator contributions eta_T^2 via the interior 7-point
/// rule; the weight is h_T^s for s <= 1/2 and h_T^{1/2} w(x)^{s-1/2} with
/// w(x) = dist(x, boundary of the owning element) for s > 1/2.
pub fn estimate(
    forest: &RefinementForest,
    space: &crate::space::FeSpace,
    u: &[f64],
    f: &(dyn Fn(f64, f64) -> f64 + Sync),
    params: &FracParams,
    config: &EstimatorConfig,
) -> Result<Vec<f64>, AdaptiveError> {
    let rule = tri_rule_degree5();
    let boundary = crate::mesh::domain_polygon(forest, &space.mesh);
    let s = params.s;
    let results: Vec<Result<f64, AdaptiveError>> = space
        .mesh
        .elements
        .par_iter()
        .map(|&e| {
            let tri = forest.coords(e);
            let area = forest.area(e);
            let h_t = forest.mesh_width(e);
            let mut eta_sq = 0.0;
            for p in &rule {
                let x = crate::geometry::bary_to_point(&tri, p.bary);
                let op_val = eval_frac_laplacian_known_owner(
                    forest,
                    space,
                    u,
                    x,
                    e,
                    &boundary,
                    params,
                    &config.residual_quad,
                )
                .map_err(|source| AdaptiveError::Estimate { element: e, x: x[0], y: x[1], source })?;
                let residual = f(x[0], x[1]) - op_val;
                let weight = if s <= 0.5 {
                    h_t.powf(s)
                } else {
                    let w: f64 = (0..3)
                        .map(|k| {
                            crate::geometry::point_segment_distance(x, tri[k], tri[(k + 1) % 3])
                        })
                        .fold(f64::INFINITY, f64::min);
                    h_t.sqrt() * w.powf(s - 0.5)
                };
                eta_sq += p.weight * area * (weight * residual).powi(2);
            }
            Ok(eta_sq)
        })
        .collect();
    results.into_iter().collect()
}

/// Minimal-cardinality Doerfler set: greedy over descending eta_T^2 with
/// ties broken by element id; all-zero estimators give the empty set.
pub fn doerfler_mark(mesh: &MeshView, eta_sq: &[f64], theta: f64) -> Vec<usize> {
    assert_eq!(eta_sq.len(), mesh.elements.len());
    let total: f64 = eta_sq.iter().sum();
    if total <= 0.0 {
        return Vec::new();
    }
    let mut order: Vec<usize> = (0..eta_sq.len()).collect();
    order.sort_by(|&a, &b| {
        eta_sq[b]
            .partial_cmp(&eta_sq[a])
            .unwrap()
            .then(mesh.elements[a].cmp(&mesh.elements[b]))
    });
    let mut marked = Vec::new();
    let mut acc = 0.0;
    for idx in order {
        if acc >= theta * total {
            break;
        }
        if eta_sq[idx] > 0.0 {
            marked.push(mesh.elements[idx]);
            acc += eta_sq[idx];
        } else {
            break;
        }
    }
    marked.sort_unstable();
    marked
}

/// Stopping rule of the adaptive loop.
#[derive(Debug, Clone, Copy)]
pub enum StopRule {
    MaxDofs(usize),
    MaxIters(usize),
}

/// One loop iteration's record.
#[derive(Debug, Clone)]
pub struct LoopRecord {
    pub mesh: MeshView,
    pub dofs: usize,
    pub solution: Vec<f64>,
    pub eta: f64,
    pub eta_sq_per_element: Vec<f64>,
    pub solver_iterations: usize,
    pub solver_residual: f64,
    pub wall_time: std::time::Duration,
}

/// Solver knobs for the loop.
#[derive(Debug, Clone, Copy)]
pub struct SolveConfig {
    pub tol: f64,
    pub max_iter: usize,
    pub quad: QuadConfig,
}

impl Default for SolveConfig {
    fn default() -> Self {
        SolveConfig { tol: 1e-8, max_iter: 400, quad: QuadConfig::default() }
    }
}

/// Run the adaptive loop from `initial` (uniformly pre-refined until the
/// space has at least one dof). PCG uses the local multilevel diagonal
/// preconditioner built over the snapshots collected so far.
pub fn adaptive_loop(
    forest: &mut RefinementForest,
    initial: &MeshView,
    family: Family,
    f: &(dyn Fn(f64, f64) -> f64 + Sync),
    params: &FracParams,
    est_config: &EstimatorConfig,
    solve_config: &SolveConfig,
    stop: StopRule,
) -> Result<(Vec<LoopRecord>, Hierarchy), AdaptiveError> {
    est_config.validate()?;
    crate::kernel::validate_family(family, params)?;
    let mut mesh = initial.clone();
    while build_space(forest, &mesh, family)?.dim() == 0 {
        mesh = uniform_refine(forest, &mesh, 1)?;
    }
    let mut records: Vec<LoopRecord> = Vec::new();
    let mut snapshots: Vec<MeshView> = Vec::new();
    loop {
        let started = std::time::Instant::now();
        let iteration = records.len();
        snapshots.push(mesh.clone());
        let hierarchy = build_adaptive_hierarchy(forest, snapshots.clone())
            .map_err(|e| AdaptiveError::Mesh(match e {
                crate::hierarchy::HierarchyError::Mesh(m) => m,
                other => MeshError::InvalidFile(other.to_string()),
            }))?;
        let space = build_space(forest, &mesh, family)?;
        let a = assemble_stiffness(forest, &space, params, &solve_config.quad)?;
        let b = assemble_load(forest, &space, f);
        let prec =
            MlPreconditioner::build(forest, &hierarchy, family, params, &solve_config.quad)?;
        let op = PrecondOperator { prec: &prec, prefix: hierarchy.levels.len() - 1 };
        let (u, info) = pcg(&a, &op, &b, solve_config.tol, solve_config.max_iter)
            .map_err(|source| AdaptiveError::Solve { iteration, source })?;
        let eta_sq = estimate(forest, &space, &u, f, params, est_config)?;
        let eta = eta_sq.iter().sum::<f64>().sqrt();
        records.push(LoopRecord {
            mesh: mesh.clone(),
            dofs: space.dim(),
            solution: u,
            eta,
            eta_sq_per_element: eta_sq.clone(),
            solver_iterations: info.iterations,
            solver_residual: info.rel_residual,
            wall_time: started.elapsed(),
        });
        let done = match stop {
            StopRule::MaxDofs(n) => space.dim() >= n,
            StopRule::MaxIters(k) => records.len() >= k,
        };
        if done {
            break;
        }
        let marked = doerfler_mark(&mesh, &eta_sq, est_config.theta);
        if marked.is_empty() {
            break; // estimator vanished; nothing to refine
        }
        mesh = refine(forest, &mesh, &marked)?;
    }
    let hierarchy = build_adaptive_hierarchy(forest, snapshots)
        .expect("snapshots are nested by construction");
    Ok((records, hierarchy))
}

/// Least-squares slope of log(y) against log(x).
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let sx: f64 = lx.iter().sum();
    let sy: f64 = ly.iter().sum();
    let sxx: f64 = lx.iter().map(|v| v * v).sum();
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| a * b).sum();
    (n * sxy - sx * sy) / (n * sxx - sx * sx)
}

/// Unpreconditioned solve for comparisons.
pub fn solve_unpreconditioned(
    a: &crate::linalg::DenseSymMatrix,
    b: &[f64],
    tol: f64,
    max_iter: usize,
) -> (Vec<f64>, usize, bool) {
    let (x, info) = crate::solver::cg(a, b, tol, max_iter);
    (x, info.iterations, info.converged)
}

#[allow(unused_imports)]
use crate::linalg::dot as _keep;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{make_initial_mesh, Domain};

    #[test]
    fn doerfler_marking_rules() {
        let (forest, mesh) = make_initial_mesh(Domain::UnitSquare);
        let _ = &forest;
        // contributions (3,2,1)^2, theta = 0.5 -> first element only
        let eta_sq = vec![9.0, 4.0, 1.0, 0.0];
        let marked = doerfler_mark(&mesh, &eta_sq, 0.5);
        assert_eq!(marked, vec![mesh.elements[0]]);
        // theta = 1: all elements with positive contribution
        let marked = doerfler_mark(&mesh, &eta_sq, 1.0);
        assert_eq!(marked.len(), 3);
        // equal contributions, theta = 0.5: ceil(n/2)
        let marked = doerfler_mark(&mesh, &[1.0; 4], 0.5);
        assert_eq!(marked.len(), 2);
        // all zero -> empty
        assert!(doerfler_mark(&mesh, &[0.0; 4], 0.5).is_empty());
        // exact inequality and minimality under the fixed order
        let eta_sq = vec![5.0, 4.0, 3.0, 2.0];
        let theta = 0.6;
        let marked = doerfler_mark(&mesh, &eta_sq, theta);
        let total: f64 = eta_sq.iter().sum();
        let marked_sum: f64 = marked
            .iter()
            .map(|e| {
                let i = mesh.elements.iter().position(|x| x == e).unwrap();
                eta_sq[i]
            })
            .sum();
        assert!(marked_sum >= theta * total);
        let without_last: f64 = marked_sum
            - marked
                .iter()
                .map(|e| {
                    let i = mesh.elements.iter().position(|x| x == e).unwrap();
                    eta_sq[i]
                })
                .fold(f64::INFINITY, f64::min);
        assert!(without_last < theta * total, "greedy set must be minimal");
    }

    #[test]
    fn estimator_weight_switch_is_continuous_at_half() {
        // the two weight formulas coincide as s -> 1/2: h^s vs h^{1/2} w^{s-1/2}
        let h: f64 = 0.37;
        let w: f64 = 0.11;
        let below = h.powf(0.5);
        let above = h.sqrt() * w.powf(0.5000001 - 0.5);
        assert!((below - above).abs() < 1e-5);
    }

    #[test]
    fn single_iteration_loop() {
        let (mut forest, mesh) = make_initial_mesh(Domain::UnitSquare);
        let params = FracParams::new(0.4).unwrap();
        let est = EstimatorConfig::default();
        let solve = SolveConfig::default();
        let (records, hierarchy) = adaptive_loop(
            &mut forest,
            &mesh,
            Family::P1ZeroBc,
            &|_, _| 1.0,
            &params,
            &est,
            &solve,
            StopRule::MaxIters(1),
        )
        .unwrap();
        assert_eq!(records.len(), 1);
        assert_eq!(hierarchy.levels.len(), 1);
        assert_eq!(records[0].mesh.elements, mesh.elements);
        assert_eq!(records[0].dofs, 1);
        assert!(records[0].solver_residual <= solve.tol);
        assert!(records[0].eta > 0.0);

        // synthetic zero residual: f defined as the pointwise operator value
        // of the computed solution makes every sampled contribution vanish
        let space = build_space(&forest, &mesh, Family::P1ZeroBc).unwrap();
        let boundary = crate::mesh::domain_polygon(&forest, &mesh);
        let u = records[0].solution.clone();
        let quad = est.residual_quad;
        let f_synth = {
            let forest = &forest;
            let space = &space;
            let u = &u;
            let boundary = &boundary;
            move |x: f64, y: f64| {
                crate::kernel::eval_frac_laplacian(
                    forest, space, u, [x, y], boundary, &params, &quad,
                )
                .unwrap()
            }
        };
        let eta_sq = estimate(&forest, &space, &u, &f_synth, &params, &est).unwrap();
        let eta: f64 = eta_sq.iter().sum::<f64>().sqrt();
        assert!(eta <= 1e-12 * records[0].eta, "synthetic residual must vanish, eta = {eta}");
    }
}
