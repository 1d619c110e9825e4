//! Independent reference computations used by the property suite and the
//! test oracles: brute-force fcc, forced-move mesh completion, a cyclic
//! Jacobi eigensolver, a divergence-theorem complement weight, and a
//! subdivision quadrature oracle for the singular pair integrals.
//!
//! Everything here deliberately avoids the production code paths it checks.

use crate::geometry::{
    self, bary_to_point, dist, sub, tri_area, tri_diam, tri_tri_distance, Point, Tri,
};
use crate::mesh::{MeshView, RefinementForest};
use crate::quadrature::tri_rule_tensor;
use std::collections::{BTreeSet, HashSet};

// ---------------------------------------------------------------------------
// fcc by direct evaluation of the three-set definition
// ---------------------------------------------------------------------------

/// Evaluates B1, B2, B3 by pairwise ancestor tests and returns the sorted
/// union.
pub fn fcc_by_definition(forest: &RefinementForest, a: &MeshView, b: &MeshView) -> Vec<usize> {
    let mut out = BTreeSet::new();
    for &t in &a.elements {
        if b.elements.iter().any(|&tp| forest.is_proper_ancestor(t, tp)) {
            out.insert(t); // B1
        }
    }
    for &tp in &b.elements {
        if a.elements.iter().any(|&t| forest.is_proper_ancestor(tp, t)) {
            out.insert(tp); // B2
        }
    }
    let aset: HashSet<usize> = a.elements.iter().copied().collect();
    for &tp in &b.elements {
        if aset.contains(&tp) {
            out.insert(tp); // B3
        }
    }
    out.into_iter().collect()
}

// ---------------------------------------------------------------------------
// minimal completion by forced moves
// ---------------------------------------------------------------------------

/// Completes a (possibly hanging) cut to a regular triangulation by
/// repeatedly bisecting any element carrying a hanging vertex, scanning in
/// an order derived from `seed`. Every such bisection is forced, so the
/// fixpoint is the unique minimal completion.
pub fn minimal_completion_fixpoint(
    forest: &mut RefinementForest,
    cut: &MeshView,
    seed: u64,
) -> MeshView {
    let mut alive: BTreeSet<usize> = cut.elements.iter().copied().collect();
    loop {
        let verts: HashSet<usize> =
            alive.iter().flat_map(|&e| forest.node(e).vertex_ids).collect();
        let mut offender = None;
        // seed-dependent scan order; the fixpoint must not depend on it
        let mut order: Vec<usize> = alive.iter().copied().collect();
        if seed != 0 {
            let n = order.len() as u64;
            order.rotate_left((seed % n.max(1)) as usize);
        }
        'scan: for e in order {
            for (a, b) in forest.edges(e) {
                let (pa, pb) = (forest.vertex(a).pos(), forest.vertex(b).pos());
                for &v in &verts {
                    if v == a || v == b {
                        continue;
                    }
                    let p = forest.vertex(v).pos();
                    let cr = geometry::cross(sub(pb, pa), sub(p, pa));
                    let d = geometry::dot(sub(p, pa), sub(pb, pa));
                    let l2 = geometry::dot(sub(pb, pa), sub(pb, pa));
                    if cr.abs() < 1e-12 * l2 && d > 1e-12 * l2 && d < l2 * (1.0 - 1e-12) {
                        offender = Some(e);
                        break 'scan;
                    }
                }
            }
        }
        match offender {
            None => break,
            Some(e) => {
                let children = forest.ensure_children(e);
                alive.remove(&e);
                alive.extend(children);
            }
        }
    }
    MeshView { forest_id: forest.id, elements: alive.into_iter().collect() }
}

/// Breadth-first search over NVB refinement sequences: all regular cuts
/// reachable from `cut` with the fewest bisections. Exponential; only for
/// tiny instances.
pub fn minimal_completions_bfs(
    forest: &mut RefinementForest,
    cut: &MeshView,
    max_extra_bisections: usize,
    state_cap: usize,
) -> Vec<Vec<usize>> {
    let start: BTreeSet<usize> = cut.elements.iter().copied().collect();
    let regular = |forest: &RefinementForest, state: &BTreeSet<usize>| {
        let view =
            MeshView { forest_id: forest.id, elements: state.iter().copied().collect() };
        crate::mesh::hanging_nodes(forest, &view).is_empty()
    };
    let mut frontier: HashSet<BTreeSet<usize>> = HashSet::from([start]);
    for _ in 0..=max_extra_bisections {
        let hits: Vec<Vec<usize>> = frontier
            .iter()
            .filter(|s| regular(forest, s))
            .map(|s| s.iter().copied().collect())
            .collect();
        if !hits.is_empty() {
            return hits;
        }
        let mut next = HashSet::new();
        for state in &frontier {
            for &e in state.iter() {
                let children = forest.ensure_children(e);
                let mut new_state = state.clone();
                new_state.remove(&e);
                new_state.extend(children);
                next.insert(new_state);
                if next.len() > state_cap {
                    return Vec::new();
                }
            }
        }
        frontier = next;
    }
    Vec::new()
}

// ---------------------------------------------------------------------------
// dense symmetric eigenvalues (cyclic Jacobi)
// ---------------------------------------------------------------------------

/// Eigenvalues of a small symmetric matrix (row-major n*n), ascending.
pub fn symmetric_eigenvalues_jacobi(a: &[f64], n: usize) -> Vec<f64> {
    assert_eq!(a.len(), n * n);
    let mut m = a.to_vec();
    let idx = |i: usize, j: usize| i * n + j;
    for _sweep in 0..100 {
        let mut off = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                off += m[idx(i, j)] * m[idx(i, j)];
            }
        }
        if off.sqrt() < 1e-14 * (1.0 + m.iter().map(|v| v.abs()).fold(0.0, f64::max)) {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[idx(p, q)];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (m[idx(q, q)] - m[idx(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (m[idx(k, p)], m[idx(k, q)]);
                    m[idx(k, p)] = c * akp - s * akq;
                    m[idx(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (m[idx(p, k)], m[idx(q, k)]);
                    m[idx(p, k)] = c * apk - s * aqk;
                    m[idx(q, k)] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut eigs: Vec<f64> = (0..n).map(|i| m[idx(i, i)]).collect();
    eigs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    eigs
}

// ---------------------------------------------------------------------------
// complement weight by the divergence theorem
// ---------------------------------------------------------------------------

/// rho(x) = int_{Omega^c} |x-y|^{-2-2s} dy evaluated as the boundary
/// integral (1/2s) sum_edges int ((y-x).n) |y-x|^{-2-2s} ds with high-order
/// Gauss per edge. Independent of the radial production formula.
pub fn complement_weight_oracle(x: Point, boundary: &[(Point, Point)], s: f64) -> f64 {
    // composite Gauss, splitting edges until their length is comparable to
    // the distance from x (the integrand peaks near the closest point)
    fn piece(x: Point, a: Point, b: Point, nrm: Point, s: f64, depth: usize) -> f64 {
        let e = sub(b, a);
        let len = geometry::norm(e);
        let mid = [(a[0] + b[0]) / 2.0, (a[1] + b[1]) / 2.0];
        if depth < 24 && len > 0.5 * dist(mid, x) {
            return piece(x, a, mid, nrm, s, depth + 1) + piece(x, mid, b, nrm, s, depth + 1);
        }
        let g = crate::quadrature::gauss_legendre_01(24);
        let mut sum = 0.0;
        for (&t, &w) in g.nodes.iter().zip(&g.weights) {
            let y = [a[0] + t * e[0], a[1] + t * e[1]];
            let r = dist(y, x);
            sum += w * geometry::dot(sub(y, x), nrm) * r.powf(-2.0 - 2.0 * s);
        }
        sum * len
    }
    let mut total = 0.0;
    for &(a, b) in boundary {
        // outward normal for counter-clockwise boundary orientation
        let e = sub(b, a);
        let len = geometry::norm(e);
        let nrm = [e[1] / len, -e[0] / len];
        total += piece(x, a, b, nrm, s, 0);
    }
    total / (2.0 * s)
}

// ---------------------------------------------------------------------------
// subdivision quadrature oracle for pair interactions
// ---------------------------------------------------------------------------

/// Local basis for the pair oracle: P1 hats tied to vertex coordinates, or
/// P0 indicators tied to the root triangles.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OracleBasis {
    P1,
    P0,
}

/// A triangle carrying, for every global dof of the pair, the three vertex
/// values of that basis function on this triangle (affine data; exact under
/// midpoint subdivision).
#[derive(Debug, Clone)]
struct Cell {
    tri: Tri,
    /// values[d][k] = phi_d at vertex k of `tri`
    values: Vec<[f64; 3]>,
}

impl Cell {
    fn subdivide(&self) -> [Cell; 4] {
        let [a, b, c] = self.tri;
        let mab = [(a[0] + b[0]) / 2.0, (a[1] + b[1]) / 2.0];
        let mbc = [(b[0] + c[0]) / 2.0, (b[1] + c[1]) / 2.0];
        let mca = [(c[0] + a[0]) / 2.0, (c[1] + a[1]) / 2.0];
        let mid = |u: [f64; 3], i: usize, j: usize| (u[i] + u[j]) / 2.0;
        let mk = |tri: Tri, f: &dyn Fn(&[f64; 3]) -> [f64; 3]| Cell {
            tri,
            values: self.values.iter().map(f).collect(),
        };
        [
            mk([a, mab, mca], &|v| [v[0], mid(*v, 0, 1), mid(*v, 2, 0)]),
            mk([mab, b, mbc], &|v| [mid(*v, 0, 1), v[1], mid(*v, 1, 2)]),
            mk([mca, mbc, c], &|v| [mid(*v, 2, 0), mid(*v, 1, 2), v[2]]),
            mk([mab, mbc, mca], &|v| [mid(*v, 0, 1), mid(*v, 1, 2), mid(*v, 2, 0)]),
        ]
    }

    fn eval(&self, d: usize, bary: [f64; 3]) -> f64 {
        let v = self.values[d];
        v[0] * bary[0] + v[1] * bary[1] + v[2] * bary[2]
    }
}

fn shared_point_count(a: &Tri, b: &Tri) -> usize {
    let mut n = 0;
    for p in a {
        if b.iter().any(|q| dist(*p, *q) < 1e-13) {
            n += 1;
        }
    }
    n
}

struct OracleCtx {
    s: f64,
    ndof: usize,
    max_depth: usize,
    /// sum of separated-pair contributions collected per recursion depth
    slices: Vec<Vec<f64>>,
}

impl OracleCtx {
    fn block(&mut self, depth: usize) -> &mut Vec<f64> {
        while self.slices.len() <= depth {
            self.slices.push(vec![0.0; self.ndof * self.ndof]);
        }
        &mut self.slices[depth]
    }

    /// Tensor-Gauss on a separated pair, order graded by the distance ratio.
    fn separated(&mut self, a: &Cell, b: &Cell, depth: usize) {
        let ratio = tri_tri_distance(&a.tri, &b.tri) / tri_diam(&a.tri).max(tri_diam(&b.tri));
        let n = if ratio < 0.7 {
            8
        } else if ratio < 1.5 {
            7
        } else if ratio < 3.0 {
            5
        } else {
            4
        };
        let rule = tri_rule_tensor(n);
        let (area_a, area_b) = (tri_area(&a.tri), tri_area(&b.tri));
        let ndof = self.ndof;
        let expo = -2.0 - 2.0 * self.s;
        let mut vals_a = vec![0.0; ndof];
        let mut vals_b = vec![0.0; ndof];
        let block = self.block(depth);
        for pa in rule.iter() {
            let x = bary_to_point(&a.tri, pa.bary);
            for d in 0..ndof {
                vals_a[d] = a.eval(d, pa.bary);
            }
            for pb in rule.iter() {
                let y = bary_to_point(&b.tri, pb.bary);
                let k = dist(x, y).powf(expo);
                for d in 0..ndof {
                    vals_b[d] = vals_a[d] - b.eval(d, pb.bary);
                }
                let w = pa.weight * pb.weight * area_a * area_b * k;
                for i in 0..ndof {
                    for j in 0..ndof {
                        block[i * ndof + j] += w * vals_b[i] * vals_b[j];
                    }
                }
            }
        }
    }

    fn touching(&mut self, a: &Cell, b: &Cell, depth: usize) {
        if depth >= self.max_depth {
            return; // tail handled by geometric extrapolation
        }
        let ca = a.subdivide();
        let cb = b.subdivide();
        if depth < 2 {
            // parallelize the shallow fan-out; merge per-depth slices
            use rayon::prelude::*;
            let pairs: Vec<(usize, usize)> =
                (0..4).flat_map(|i| (0..4).map(move |j| (i, j))).collect();
            let results: Vec<Vec<Vec<f64>>> = pairs
                .par_iter()
                .map(|&(i, j)| {
                    let mut sub = OracleCtx {
                        s: self.s,
                        ndof: self.ndof,
                        max_depth: self.max_depth,
                        slices: Vec::new(),
                    };
                    sub.touching_or_separated(&ca[i], &cb[j], depth + 1);
                    sub.slices
                })
                .collect();
            for slices in results {
                for (d, sl) in slices.into_iter().enumerate() {
                    let dst = self.block(d);
                    for (t, v) in dst.iter_mut().zip(&sl) {
                        *t += v;
                    }
                }
            }
            return;
        }
        for x in &ca {
            for y in &cb {
                self.touching_or_separated(x, y, depth + 1);
            }
        }
    }
}

/// Geometric tail of the per-depth slices, fitted entrywise with the two
/// exact family ratios (edge-type and vertex-type scaling).
fn extrapolate_tail(slices: &[Vec<f64>], q_edge: f64, q_vertex: f64, ndof: usize) -> Vec<f64> {
    let mut tail = vec![0.0; ndof * ndof];
    let d = slices.len();
    if d < 3 {
        return tail;
    }
    // least squares on the last three slices: slice_d ~ A q_e^d + B q_v^d
    let rows = [d - 3, d - 2, d - 1];
    for e in 0..ndof * ndof {
        let (mut m00, mut m01, mut m11, mut r0, mut r1) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for &k in &rows {
            let (fe, fv) = (q_edge.powi(k as i32), q_vertex.powi(k as i32));
            m00 += fe * fe;
            m01 += fe * fv;
            m11 += fv * fv;
            r0 += fe * slices[k][e];
            r1 += fv * slices[k][e];
        }
        let det = m00 * m11 - m01 * m01;
        let (a, b) = if det.abs() > 1e-300 {
            ((m11 * r0 - m01 * r1) / det, (m00 * r1 - m01 * r0) / det)
        } else {
            (0.0, 0.0)
        };
        // sum of both families for depths >= d
        tail[e] = a * q_edge.powi(d as i32) / (1.0 - q_edge)
            + b * q_vertex.powi(d as i32) / (1.0 - q_vertex);
    }
    tail
}

/// Reference value of the pair block
/// I_ij = iint_{Ta x Tb} (phi_i(x)-phi_i(y)) (phi_j(x)-phi_j(y)) |x-y|^{-2-2s}
/// by graded midpoint subdivision. Dof order: for P1 the deduplicated vertex
/// union (a's vertices then b's new ones); for P0 the indicators of Ta, Tb.
/// Identical pairs use the exact self-similar reduction
/// I(T) = cross-children(T) / (1 - 2^{2s-2}).
pub fn pair_block_oracle(
    tri_a: &Tri,
    tri_b: &Tri,
    basis: OracleBasis,
    s: f64,
    depth: usize,
) -> (Vec<Point>, Vec<f64>) {
    let identical = shared_point_count(tri_a, tri_b) == 3;
    // global dof list
    let mut dof_points: Vec<Point> = Vec::new();
    match basis {
        OracleBasis::P1 => {
            for p in tri_a.iter().chain(tri_b.iter()) {
                if !dof_points.iter().any(|q| dist(*p, *q) < 1e-13) {
                    dof_points.push(*p);
                }
            }
        }
        OracleBasis::P0 => {
            dof_points.push(geometry::tri_centroid(tri_a));
            if !identical {
                dof_points.push(geometry::tri_centroid(tri_b));
            }
        }
    }
    let ndof = dof_points.len();
    let cell_for = |tri: &Tri, own: bool| -> Cell {
        let values = match basis {
            OracleBasis::P1 => dof_points
                .iter()
                .map(|p| {
                    let mut v = [0.0; 3];
                    for k in 0..3 {
                        if dist(tri[k], *p) < 1e-13 {
                            v[k] = 1.0;
                        }
                    }
                    v
                })
                .collect(),
            // dof 0 = indicator of tri_a, dof 1 (if present) = indicator of tri_b
            OracleBasis::P0 => (0..ndof)
                .map(|d| {
                    let val = if (d == 0) == own { 1.0 } else { 0.0 };
                    [val; 3]
                })
                .collect(),
        };
        Cell { tri: *tri, values }
    };

    if basis == OracleBasis::P0 && identical {
        return (dof_points, vec![0.0; 1]);
    }

    let (q_edge, q_vertex) = match basis {
        OracleBasis::P1 => (2f64.powf(2.0 * s - 3.0), 2f64.powf(2.0 * s - 4.0)),
        OracleBasis::P0 => (2f64.powf(2.0 * s - 1.0), 2f64.powf(2.0 * s - 2.0)),
    };

    if identical {
        // I(T) = cross-child pairs / (1 - 2^{2s-2}), exact self-similarity;
        // ordered cross pairs come in swap-equal twins, so each unordered
        // pair is computed once and doubled
        let parent = cell_for(tri_a, true);
        let children = parent.subdivide();
        let mut ctx = OracleCtx { s, ndof, max_depth: depth, slices: Vec::new() };
        for i in 0..4 {
            for j in (i + 1)..4 {
                ctx.touching_or_separated(&children[i], &children[j], 1);
            }
        }
        let mut total = vec![0.0; ndof * ndof];
        for sl in &ctx.slices {
            for (t, v) in total.iter_mut().zip(sl) {
                *t += v;
            }
        }
        let tail = extrapolate_tail(&ctx.slices, q_edge, q_vertex, ndof);
        for (t, v) in total.iter_mut().zip(&tail) {
            *t += v;
        }
        let factor = 2.0 / (1.0 - 2f64.powf(2.0 * s - 2.0));
        for t in &mut total {
            *t *= factor;
        }
        return (dof_points, total);
    }

    let a = cell_for(tri_a, true);
    let b = cell_for(tri_b, false);
    let mut ctx = OracleCtx { s, ndof, max_depth: depth, slices: Vec::new() };
    ctx.touching_or_separated(&a, &b, 0);
    let mut total = vec![0.0; ndof * ndof];
    for sl in &ctx.slices {
        for (t, v) in total.iter_mut().zip(sl) {
            *t += v;
        }
    }
    let tail = extrapolate_tail(&ctx.slices, q_edge, q_vertex, ndof);
    for (t, v) in total.iter_mut().zip(&tail) {
        *t += v;
    }
    (dof_points, total)
}

impl OracleCtx {
    fn touching_or_separated(&mut self, a: &Cell, b: &Cell, depth: usize) {
        let shared = shared_point_count(&a.tri, &b.tri);
        let ratio = tri_tri_distance(&a.tri, &b.tri) / tri_diam(&a.tri).max(tri_diam(&b.tri));
        if shared > 0 || ratio < 0.5 {
            self.touching(a, b, depth);
        } else {
            self.separated(a, b, depth);
        }
    }
}

// ---------------------------------------------------------------------------
// exterior-term oracle
// ---------------------------------------------------------------------------

/// Reference value of int_T phi_i phi_j rho(x) dx, where rho is the
/// complement weight of the polygon `boundary`; adaptive midpoint
/// subdivision toward the boundary with a measured-ratio geometric tail.
pub fn exterior_entry_oracle(
    tri: &Tri,
    values_i: [f64; 3],
    values_j: [f64; 3],
    boundary: &[(Point, Point)],
    s: f64,
    depth: usize,
) -> f64 {
    let rule = crate::quadrature::tri_rule_degree5();
    let mut slices = vec![0.0; depth + 1];
    struct St<'a> {
        boundary: &'a [(Point, Point)],
        s: f64,
        rule: Vec<crate::quadrature::TriPoint>,
        depth: usize,
    }
    let st = St { boundary, s, rule, depth };
    fn go(st: &St, cell: &Cell, d: usize, slices: &mut [f64]) {
        let touches = cell.tri.iter().any(|p| {
            st.boundary
                .iter()
                .any(|&(a, b)| geometry::point_segment_distance(*p, a, b) < 1e-13)
        });
        if touches && d < st.depth {
            for c in cell.subdivide() {
                go(st, &c, d + 1, slices);
            }
            return;
        }
        let area = tri_area(&cell.tri);
        let mut sum = 0.0;
        for p in &st.rule {
            let x = bary_to_point(&cell.tri, p.bary);
            let rho = complement_weight_oracle(x, st.boundary, st.s);
            sum += p.weight * cell.eval(0, p.bary) * cell.eval(1, p.bary) * rho;
        }
        slices[d] += sum * area;
    }
    let cell = Cell { tri: *tri, values: vec![values_i, values_j] };
    go(&st, &cell, 0, &mut slices);
    let total: f64 = slices.iter().sum();
    // measured-ratio geometric tail from the last two slices
    let d = slices.len();
    if d >= 3 && slices[d - 2].abs() > 0.0 {
        let r = slices[d - 1] / slices[d - 2];
        if r > 0.0 && r < 0.99 {
            return total + slices[d - 1] * r / (1.0 - r);
        }
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jacobi_eigenvalues() {
        // [[2,1],[1,2]] -> {1, 3}
        let e = symmetric_eigenvalues_jacobi(&[2.0, 1.0, 1.0, 2.0], 2);
        assert!((e[0] - 1.0).abs() < 1e-12 && (e[1] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn complement_weight_oracle_on_disk_like_polygon() {
        // regular polygon approximating the unit circle; center value must
        // approach the radial integral 2*pi*1/(2s) = pi/s
        let s = 0.3;
        let n = 4096;
        let mut segs = Vec::new();
        for i in 0..n {
            let t0 = 2.0 * std::f64::consts::PI * i as f64 / n as f64;
            let t1 = 2.0 * std::f64::consts::PI * (i + 1) as f64 / n as f64;
            segs.push(([t0.cos(), t0.sin()], [t1.cos(), t1.sin()]));
        }
        let got = complement_weight_oracle([0.0, 0.0], &segs, s);
        let want = std::f64::consts::PI / s;
        assert!((got - want).abs() < 1e-4 * want, "{got} vs {want}");
    }

    #[test]
    fn domain_boundary_merges_collinear_edges() {
        let (mut forest, mesh) = crate::mesh::make_initial_mesh(crate::mesh::Domain::LShape);
        let fine = crate::mesh::uniform_refine(&mut forest, &mesh, 2).unwrap();
        let segs = crate::mesh::domain_polygon(&forest, &fine);
        assert_eq!(segs.len(), 6, "L-shape boundary has six corners");
        // total length = 8
        let len: f64 = segs.iter().map(|&(a, b)| dist(a, b)).sum();
        assert!((len - 8.0).abs() < 1e-12);
    }
}
