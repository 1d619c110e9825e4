//! Discrete spaces S^{1,1}, S^{1,1}_0, S^{0,0}, prolongations, and the
//! adapted Scott-Zhang operators with dual-basis averaging.

use crate::geometry::{barycentric, bary_to_point, Tri};
use crate::hierarchy::{marked_vertices, Hierarchy, HierarchyKind};
use crate::linalg::CompressedMatrix;
use crate::mesh::{boundary_vertices, vertex_incidence, MeshError, MeshView, RefinementForest};
use crate::quadrature::{tri_rule_degree2, tri_rule_degree5};
use std::collections::{HashMap, HashSet};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SpaceError {
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error("meshes are not nested")]
    NotNested,
    #[error("spaces have different families")]
    FamilyMismatch,
    #[error("tilde mesh is not the finest common coarsening of the inputs")]
    NotAnFccTriple,
    #[error("hierarchy must be of fcc kind with its uniform companions")]
    NotFccHierarchy,
    #[error("averaging element {element} is not admissible for node {node}")]
    InadmissibleAveraging { node: usize, element: usize },
    #[error("quadrature for the Scott-Zhang functional did not converge (achieved {achieved:.3e}, wanted {wanted:.3e})")]
    QuadratureNotConverged { achieved: f64, wanted: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Family {
    P1,
    P1ZeroBc,
    P0,
}

impl std::str::FromStr for Family {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "p1" => Ok(Family::P1),
            "p1_zero_bc" | "p1_0" => Ok(Family::P1ZeroBc),
            "p0" => Ok(Family::P0),
            other => Err(format!("unknown family '{other}'")),
        }
    }
}

/// A discrete space on a mesh: node list (vertices, interior vertices, or
/// barycenters) ordered lexicographically by coordinates, and the dof map.
#[derive(Debug, Clone)]
pub struct FeSpace {
    pub mesh: MeshView,
    pub family: Family,
    /// vertex ids (p1 families) or element ids (p0), in dof order
    pub nodes: Vec<usize>,
    pub node_coords: Vec<[f64; 2]>,
    pub dof_of_node: HashMap<usize, usize>,
}

impl FeSpace {
    pub fn dim(&self) -> usize {
        self.nodes.len()
    }
}

fn lex_sort(keys: &mut [usize], coords: &HashMap<usize, [f64; 2]>) {
    keys.sort_by(|a, b| {
        let (ca, cb) = (coords[a], coords[b]);
        ca[0].partial_cmp(&cb[0]).unwrap().then(ca[1].partial_cmp(&cb[1]).unwrap())
    });
}

/// Build a space on a regular mesh.
pub fn build_space(
    forest: &RefinementForest,
    mesh: &MeshView,
    family: Family,
) -> Result<FeSpace, SpaceError> {
    mesh.check_forest(forest)?;
    let (mut nodes, coords): (Vec<usize>, HashMap<usize, [f64; 2]>) = match family {
        Family::P0 => {
            let coords: HashMap<usize, [f64; 2]> =
                mesh.elements.iter().map(|&e| (e, forest.barycenter(e))).collect();
            (mesh.elements.clone(), coords)
        }
        Family::P1 | Family::P1ZeroBc => {
            let incidence = vertex_incidence(forest, mesh);
            let mut vs: Vec<usize> = incidence.keys().copied().collect();
            if family == Family::P1ZeroBc {
                let boundary = boundary_vertices(forest, mesh);
                vs.retain(|v| !boundary.contains(v));
            }
            let coords: HashMap<usize, [f64; 2]> =
                vs.iter().map(|&v| (v, forest.vertex(v).pos())).collect();
            (vs, coords)
        }
    };
    lex_sort(&mut nodes, &coords);
    let node_coords = nodes.iter().map(|n| coords[n]).collect();
    let dof_of_node = nodes.iter().enumerate().map(|(i, &n)| (n, i)).collect();
    Ok(FeSpace { mesh: mesh.clone(), family, nodes, node_coords, dof_of_node })
}

/// Prolongation matrix P with P (coarse coefficients) = the same function in
/// the fine basis. For p1 families the column of a coarse node holds its hat
/// function evaluated at the fine nodes; for p0 the entry is 1 when the fine
/// element descends from the coarse one.
pub fn prolongation(
    forest: &RefinementForest,
    coarse: &FeSpace,
    fine: &FeSpace,
) -> Result<CompressedMatrix, SpaceError> {
    if coarse.family != fine.family {
        return Err(SpaceError::FamilyMismatch);
    }
    let mut triplets: Vec<(usize, usize, f64)> = Vec::new();
    match coarse.family {
        Family::P0 => {
            let coarse_set: HashSet<usize> = coarse.nodes.iter().copied().collect();
            for (i, &fe) in fine.nodes.iter().enumerate() {
                let anc = forest
                    .ancestor_or_self_where(fe, |n| coarse_set.contains(&n))
                    .ok_or(SpaceError::NotNested)?;
                triplets.push((i, coarse.dof_of_node[&anc], 1.0));
            }
        }
        Family::P1 | Family::P1ZeroBc => {
            // For each coarse element, visit its fine descendants and record
            // the barycentric values of the fine vertices.
            let mut seen: HashMap<usize, ()> = HashMap::new();
            for &ce in &coarse.mesh.elements {
                let tri = forest.coords(ce);
                let cols: Vec<Option<usize>> = forest.node(ce)
                    .vertex_ids
                    .iter()
                    .map(|v| coarse.dof_of_node.get(v).copied())
                    .collect();
                let descendants = forest
                    .descendants_in_cut(ce, &fine.mesh)
                    .ok_or(SpaceError::NotNested)?;
                for fe in descendants {
                    for v in forest.node(fe).vertex_ids {
                        let Some(&row) = fine.dof_of_node.get(&v) else { continue };
                        if seen.insert(v, ()).is_some() {
                            continue;
                        }
                        let b = barycentric(&tri, forest.vertex(v).pos());
                        for (k, col) in cols.iter().enumerate() {
                            if let Some(col) = col {
                                if b[k].abs() > 1e-14 {
                                    triplets.push((row, *col, b[k]));
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(CompressedMatrix::from_triplets(fine.dim(), coarse.dim(), &triplets))
}

// ---------------------------------------------------------------------------
// Scott-Zhang operators
// ---------------------------------------------------------------------------

/// Choice of averaging element T_z for every node of one mesh.
#[derive(Debug, Clone)]
pub struct AveragingAssignment {
    pub mesh: MeshView,
    /// vertex id -> forest node used for the dual-basis functional
    pub element_of_node: HashMap<usize, usize>,
}

impl AveragingAssignment {
    /// T_z must contain z in its closure, i.e. z is one of its vertices.
    pub fn validate(&self, forest: &RefinementForest) -> Result<(), SpaceError> {
        for (&z, &e) in &self.element_of_node {
            if !forest.node(e).vertex_ids.contains(&z) {
                return Err(SpaceError::InadmissibleAveraging { node: z, element: e });
            }
        }
        Ok(())
    }
}

/// The paired averaging choices of the adapted Scott-Zhang construction for
/// a hat (uniform) mesh and the tilde mesh fcc(T, hat).
///
/// Loop order is ascending forest-node id; nodes inside an element are
/// visited in ascending vertex id. Case (1a) of the construction (nodes
/// interior to an element) cannot occur for p = 1 where all nodes are mesh
/// vertices.
pub fn assign_averaging(
    forest: &RefinementForest,
    t_mesh: &MeshView,
    hat_mesh: &MeshView,
    tilde_mesh: &MeshView,
) -> Result<(AveragingAssignment, AveragingAssignment), SpaceError> {
    let check = crate::hierarchy::fcc(forest, t_mesh, hat_mesh)?;
    if check.elements != tilde_mesh.elements {
        return Err(SpaceError::NotAnFccTriple);
    }
    assign_averaging_inner(forest, t_mesh, hat_mesh, tilde_mesh, &HashMap::new())
}

fn assign_averaging_inner(
    forest: &RefinementForest,
    t_mesh: &MeshView,
    hat_mesh: &MeshView,
    tilde_mesh: &MeshView,
    forced_tilde: &HashMap<usize, usize>,
) -> Result<(AveragingAssignment, AveragingAssignment), SpaceError> {
    let t_set: HashSet<usize> = t_mesh.elements.iter().copied().collect();
    let tilde_set: HashSet<usize> = tilde_mesh.elements.iter().copied().collect();
    let hat_incidence = vertex_incidence(forest, hat_mesh);

    let mut hat: HashMap<usize, usize> = HashMap::new();
    let mut tilde: HashMap<usize, usize> = HashMap::new();

    let common: Vec<usize> =
        hat_mesh.elements.iter().copied().filter(|e| tilde_set.contains(e)).collect();

    // (1) common elements; nodes on the element boundary get the paired
    // choice: prefer a hat element strictly inside an element of T.
    for &elem in &common {
        let mut vs = forest.node(elem).vertex_ids;
        vs.sort_unstable();
        for z in vs {
            if hat.contains_key(&z) {
                continue;
            }
            if let Some(&f) = forced_tilde.get(&z) {
                tilde.insert(z, f);
                // hat still follows its own rule at z
                let pick = admissible_inside_t(forest, &hat_incidence, &t_set, z);
                hat.insert(z, pick.map(|(tp, _)| tp).unwrap_or(elem));
                continue;
            }
            match admissible_inside_t(forest, &hat_incidence, &t_set, z) {
                // (1b)(i): hat element strictly inside an element of T
                Some((t_prime, t_big)) => {
                    hat.insert(z, t_prime);
                    debug_assert!(tilde_set.contains(&t_big));
                    tilde.insert(z, t_big);
                }
                // (1b)(ii): the current element for both
                None => {
                    hat.insert(z, elem);
                    tilde.insert(z, elem);
                }
            }
        }
    }

    // (2) remaining tilde nodes from elements of tilde \ hat
    for &elem in tilde_mesh.elements.iter().filter(|e| !hat_mesh.contains(**e)) {
        let mut vs = forest.node(elem).vertex_ids;
        vs.sort_unstable();
        for z in vs {
            if let Some(&f) = forced_tilde.get(&z) {
                tilde.entry(z).or_insert(f);
            } else {
                tilde.entry(z).or_insert(elem);
            }
        }
    }

    // (3) remaining hat nodes from elements of hat \ tilde
    for &elem in hat_mesh.elements.iter().filter(|e| !tilde_set.contains(e)) {
        let mut vs = forest.node(elem).vertex_ids;
        vs.sort_unstable();
        for z in vs {
            hat.entry(z).or_insert(elem);
        }
    }

    let hat = AveragingAssignment { mesh: hat_mesh.clone(), element_of_node: hat };
    let tilde = AveragingAssignment { mesh: tilde_mesh.clone(), element_of_node: tilde };
    hat.validate(forest)?;
    tilde.validate(forest)?;
    Ok((hat, tilde))
}

/// First admissible hat element of z strictly inside an element of T, with
/// that element; candidates in ascending element id.
fn admissible_inside_t(
    forest: &RefinementForest,
    hat_incidence: &HashMap<usize, Vec<usize>>,
    t_set: &HashSet<usize>,
    z: usize,
) -> Option<(usize, usize)> {
    let mut candidates = hat_incidence.get(&z)?.clone();
    candidates.sort_unstable();
    for cand in candidates {
        if let Some(big) = forest.ancestor_or_self_where(cand, |n| n != cand && t_set.contains(&n))
        {
            return Some((cand, big));
        }
    }
    None
}

/// Per-level tilde assignments for an fcc hierarchy satisfying the
/// inheritance rule: nodes outside the marked set reuse the previous level's
/// averaging element, so consecutive operators agree at those nodes.
pub fn assign_averaging_leveled(
    forest: &RefinementForest,
    t_mesh: &MeshView,
    hierarchy: &Hierarchy,
) -> Result<Vec<AveragingAssignment>, SpaceError> {
    if hierarchy.kind != HierarchyKind::Fcc {
        return Err(SpaceError::NotFccHierarchy);
    }
    let uniforms = hierarchy.uniform_levels.as_ref().ok_or(SpaceError::NotFccHierarchy)?;
    let mut out: Vec<AveragingAssignment> = Vec::with_capacity(hierarchy.levels.len());
    for l in 0..hierarchy.levels.len() {
        let forced: HashMap<usize, usize> = if l == 0 {
            HashMap::new()
        } else {
            let marked: HashSet<usize> =
                marked_vertices(forest, hierarchy, l).into_iter().collect();
            let prev = &out[l - 1];
            let level_nodes = vertex_incidence(forest, &hierarchy.levels[l]);
            level_nodes
                .keys()
                .filter(|z| !marked.contains(z))
                .filter_map(|z| prev.element_of_node.get(z).map(|&e| (*z, e)))
                .collect()
        };
        let (_, tilde) = assign_averaging_inner(
            forest,
            t_mesh,
            &uniforms[l],
            &hierarchy.levels[l],
            &forced,
        )?;
        out.push(tilde);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// dual basis and application
// ---------------------------------------------------------------------------

/// psi*_z on T for P1: the affine function with int_T psi*_z phi_z' =
/// delta_{zz'}; in barycentric coordinates psi*_z = (12 lambda_z - 3)/|T|.
fn dual_weight(local: usize, bary: [f64; 3], area: f64) -> f64 {
    (12.0 * bary[local] - 3.0) / area
}

/// Apply a Scott-Zhang operator to a plain function. The functional for
/// node z integrates psi*_z u over T_z with the degree-5 rule; a refined
/// evaluation estimates the quadrature error and `tol` rejects
/// non-converged functionals.
pub fn scott_zhang_apply_fn(
    forest: &RefinementForest,
    space: &FeSpace,
    avg: &AveragingAssignment,
    u: &dyn Fn(f64, f64) -> f64,
    tol: Option<f64>,
) -> Result<Vec<f64>, SpaceError> {
    assert!(matches!(space.family, Family::P1 | Family::P1ZeroBc));
    let rule = tri_rule_degree5();
    let mut out = vec![0.0; space.dim()];
    for (dof, &z) in space.nodes.iter().enumerate() {
        let elem = avg.element_of_node[&z];
        let tri = forest.coords(elem);
        let area = crate::geometry::tri_area(&tri);
        let local = local_index(forest, elem, z);
        let coarse = integrate_dual(&tri, area, local, u, &rule, 0);
        if let Some(tol) = tol {
            let fine = integrate_dual(&tri, area, local, u, &rule, 1);
            let achieved = (fine - coarse).abs() / fine.abs().max(1e-14);
            if achieved > tol {
                return Err(SpaceError::QuadratureNotConverged { achieved, wanted: tol });
            }
            out[dof] = fine;
        } else {
            out[dof] = coarse;
        }
    }
    Ok(out)
}

fn local_index(forest: &RefinementForest, elem: usize, z: usize) -> usize {
    forest
        .node(elem)
        .vertex_ids
        .iter()
        .position(|&v| v == z)
        .expect("averaging element must have z as a vertex")
}

fn integrate_dual(
    tri: &Tri,
    area: f64,
    local: usize,
    u: &dyn Fn(f64, f64) -> f64,
    rule: &[crate::quadrature::TriPoint],
    subdivide: usize,
) -> f64 {
    if subdivide == 0 {
        let mut sum = 0.0;
        for p in rule {
            let x = bary_to_point(tri, p.bary);
            sum += p.weight * dual_weight(local, p.bary, area) * u(x[0], x[1]);
        }
        return sum * area;
    }
    // one level of midpoint subdivision; dual weight evaluated via the
    // parent barycentric coordinates
    let mids: Tri = [
        [(tri[0][0] + tri[1][0]) / 2.0, (tri[0][1] + tri[1][1]) / 2.0],
        [(tri[1][0] + tri[2][0]) / 2.0, (tri[1][1] + tri[2][1]) / 2.0],
        [(tri[2][0] + tri[0][0]) / 2.0, (tri[2][1] + tri[0][1]) / 2.0],
    ];
    let children: [Tri; 4] = [
        [tri[0], mids[0], mids[2]],
        [mids[0], tri[1], mids[1]],
        [mids[2], mids[1], tri[2]],
        [mids[0], mids[1], mids[2]],
    ];
    let mut sum = 0.0;
    for child in &children {
        let child_area = crate::geometry::tri_area(child);
        for p in rule {
            let x = bary_to_point(child, p.bary);
            let parent_bary = barycentric(tri, x);
            sum += p.weight * child_area * dual_weight(local, parent_bary, area) * u(x[0], x[1]);
        }
    }
    sum
}

/// Apply a Scott-Zhang operator to a discrete function given on a mesh over
/// the same forest; the functional is integrated exactly piecewise.
pub fn scott_zhang_apply_discrete(
    forest: &RefinementForest,
    target: &FeSpace,
    avg: &AveragingAssignment,
    source: &FeSpace,
    coef: &[f64],
) -> Result<Vec<f64>, SpaceError> {
    assert!(matches!(target.family, Family::P1 | Family::P1ZeroBc));
    assert!(matches!(source.family, Family::P1 | Family::P1ZeroBc));
    assert_eq!(coef.len(), source.dim());
    let rule = tri_rule_degree2(); // product of two affine functions: degree 2
    let mut out = vec![0.0; target.dim()];
    for (dof, &z) in target.nodes.iter().enumerate() {
        let elem = avg.element_of_node[&z];
        let tri = forest.coords(elem);
        let area = crate::geometry::tri_area(&tri);
        let local = local_index(forest, elem, z);
        // pieces of T_z in the source mesh: descendants, or T_z inside one
        // source element
        let pieces: Vec<usize> = match forest.descendants_in_cut(elem, &source.mesh) {
            Some(d) => d,
            None => vec![elem],
        };
        let mut sum = 0.0;
        for piece in pieces {
            let ptri = forest.coords(piece);
            let parea = crate::geometry::tri_area(&ptri);
            // u is affine on the source element covering this piece
            let src_elem = forest
                .ancestor_or_self_where(piece, |n| source.mesh.contains(n))
                .ok_or(SpaceError::NotNested)?;
            let stri = forest.coords(src_elem);
            let svals: [f64; 3] = {
                let vs = forest.node(src_elem).vertex_ids;
                [
                    source.dof_of_node.get(&vs[0]).map_or(0.0, |&d| coef[d]),
                    source.dof_of_node.get(&vs[1]).map_or(0.0, |&d| coef[d]),
                    source.dof_of_node.get(&vs[2]).map_or(0.0, |&d| coef[d]),
                ]
            };
            for p in &rule {
                let x = bary_to_point(&ptri, p.bary);
                let sb = barycentric(&stri, x);
                let uval = svals[0] * sb[0] + svals[1] * sb[1] + svals[2] * sb[2];
                let tb = barycentric(&tri, x);
                sum += p.weight * parea * dual_weight(local, tb, area) * uval;
            }
        }
        out[dof] = sum;
    }
    Ok(out)
}

/// Evaluate a discrete function at a point (the owning element is searched
/// linearly; ties on edges are harmless for continuous families).
pub fn eval_discrete(
    forest: &RefinementForest,
    space: &FeSpace,
    coef: &[f64],
    x: [f64; 2],
) -> f64 {
    for &e in &space.mesh.elements {
        let tri = forest.coords(e);
        let b = barycentric(&tri, x);
        if b.iter().all(|&v| v >= -1e-12) {
            return match space.family {
                Family::P0 => space.dof_of_node.get(&e).map_or(0.0, |&d| coef[d]),
                _ => {
                    let vs = forest.node(e).vertex_ids;
                    (0..3)
                        .map(|k| {
                            space.dof_of_node.get(&vs[k]).map_or(0.0, |&d| coef[d]) * b[k]
                        })
                        .sum()
                }
            };
        }
    }
    0.0
}

/// Exact L2 norm of a p1 coefficient vector over its mesh.
pub fn l2_norm_p1(forest: &RefinementForest, space: &FeSpace, coef: &[f64]) -> f64 {
    let mut sq = 0.0;
    for &e in &space.mesh.elements {
        let vs = forest.node(e).vertex_ids;
        let v: Vec<f64> = vs
            .iter()
            .map(|vid| space.dof_of_node.get(vid).map_or(0.0, |&d| coef[d]))
            .collect();
        let area = forest.area(e);
        // local P1 mass: |T|/12 (2 delta_ij + 1)
        let quad = v[0] * v[0] + v[1] * v[1] + v[2] * v[2]
            + v[0] * v[1] + v[1] * v[2] + v[2] * v[0];
        sq += area / 6.0 * quad;
    }
    sq.sqrt()
}

/// Squared L2 norm of one scaled hat function: sum_{T in patch} |T|/6.
pub fn hat_l2_norm_sq(forest: &RefinementForest, mesh: &MeshView, z: usize) -> f64 {
    let incidence = vertex_incidence(forest, mesh);
    incidence.get(&z).map_or(0.0, |elems| elems.iter().map(|&e| forest.area(e)).sum::<f64>() / 6.0)
}
