//! Finest common coarsening of two NVB meshes and nested mesh hierarchies.

use crate::mesh::{uniform_refine, vertex_incidence, MeshError, MeshView, RefinementForest};
use std::collections::{HashMap, HashSet};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HierarchyError {
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error("snapshots are not nested: element {0} of snapshot {1} has no ancestor in the previous one")]
    NotNested(usize, usize),
    #[error("hierarchy has no levels")]
    Empty,
}

/// The three disjoint element sets making up fcc(a, b).
#[derive(Debug, Clone)]
pub struct FccParts {
    /// elements of `a` strictly containing an element of `b`
    pub b1: Vec<usize>,
    /// elements of `b` strictly containing an element of `a`
    pub b2: Vec<usize>,
    /// common elements
    pub b3: Vec<usize>,
}

impl FccParts {
    pub fn union(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.b1.len() + self.b2.len() + self.b3.len());
        out.extend_from_slice(&self.b1);
        out.extend_from_slice(&self.b2);
        out.extend_from_slice(&self.b3);
        out.sort_unstable();
        out
    }
}

/// Classify the elements of fcc(a, b) by a single forest traversal: each
/// element of `a` either lies in `b` (common), below an element of `b`
/// (which then strictly contains it), or strictly contains elements of `b`.
pub fn fcc_parts(
    forest: &RefinementForest,
    a: &MeshView,
    b: &MeshView,
) -> Result<FccParts, MeshError> {
    a.check_forest(forest)?;
    b.check_forest(forest)?;
    let b_set: HashSet<usize> = b.elements.iter().copied().collect();
    let mut b1 = Vec::new();
    let mut b2: HashSet<usize> = HashSet::new();
    let mut b3 = Vec::new();
    for &t in &a.elements {
        if b_set.contains(&t) {
            b3.push(t);
            continue;
        }
        match forest.ancestor_or_self_where(t, |n| n != t && b_set.contains(&n)) {
            Some(anc) => {
                b2.insert(anc);
            }
            None => b1.push(t),
        }
    }
    let mut b2: Vec<usize> = b2.into_iter().collect();
    b2.sort_unstable();
    b1.sort_unstable();
    b3.sort_unstable();
    Ok(FccParts { b1, b2, b3 })
}

/// Finest common coarsening of two meshes over the same forest.
pub fn fcc(forest: &RefinementForest, a: &MeshView, b: &MeshView) -> Result<MeshView, MeshError> {
    let parts = fcc_parts(forest, a, b)?;
    Ok(MeshView { forest_id: forest.id, elements: parts.union() })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HierarchyKind {
    Adaptive,
    Fcc,
    Uniform,
}

impl std::str::FromStr for HierarchyKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "adaptive" => Ok(HierarchyKind::Adaptive),
            "fcc" => Ok(HierarchyKind::Fcc),
            "uniform" => Ok(HierarchyKind::Uniform),
            other => Err(format!("unknown hierarchy kind '{other}'")),
        }
    }
}

/// Ordered list of nested meshes. For `Fcc` hierarchies the uniformly
/// refined companions and their mesh sizes are kept alongside.
#[derive(Debug, Clone)]
pub struct Hierarchy {
    pub forest_id: u64,
    pub kind: HierarchyKind,
    pub levels: Vec<MeshView>,
    /// T-hat_l for kind == Fcc (same length as `levels`).
    pub uniform_levels: Option<Vec<MeshView>>,
    /// hat-h_0 = max |T|^{1/2} over the root mesh; hat-h_l = hat-h_0 2^{-l}.
    pub hat_h0: f64,
}

impl Hierarchy {
    pub fn depth(&self) -> usize {
        self.levels.len().saturating_sub(1)
    }

    pub fn finest(&self) -> &MeshView {
        self.levels.last().expect("hierarchy has at least one level")
    }

    pub fn hat_h(&self, level: usize) -> f64 {
        self.hat_h0 * 0.5f64.powi(level as i32)
    }

    /// Every element of level l+1 must be a descendant-or-equal of an
    /// element of level l.
    pub fn verify_nested(&self, forest: &RefinementForest) -> Result<(), HierarchyError> {
        for l in 1..self.levels.len() {
            let coarse: HashSet<usize> = self.levels[l - 1].elements.iter().copied().collect();
            for &e in &self.levels[l].elements {
                if forest.ancestor_or_self_where(e, |n| coarse.contains(&n)).is_none() {
                    return Err(HierarchyError::NotNested(e, l));
                }
            }
        }
        Ok(())
    }
}

fn root_hat_h0(forest: &RefinementForest) -> f64 {
    forest.roots.iter().map(|&r| forest.mesh_width(r)).fold(0.0, f64::max)
}

fn root_mesh(forest: &RefinementForest) -> MeshView {
    MeshView { forest_id: forest.id, elements: forest.roots.clone() }
}

/// Smallest L with d * L >= max generation of the mesh, i.e. the first
/// uniform level that resolves every element of `mesh`.
pub fn full_depth(forest: &RefinementForest, mesh: &MeshView) -> usize {
    let max_gen = mesh.elements.iter().map(|&e| forest.node(e).generation).max().unwrap_or(0);
    (max_gen as usize).div_ceil(2)
}

/// Hierarchy T-tilde_l = fcc(t_final, T-hat_l) for l = 0..=L with
/// L = min(max_levels, full depth). When the hierarchy is complete
/// (no truncation), the last level equals `t_final` exactly and this is
/// asserted.
pub fn build_fcc_hierarchy(
    forest: &mut RefinementForest,
    t_final: &MeshView,
    max_levels: Option<usize>,
) -> Result<Hierarchy, HierarchyError> {
    t_final.check_forest(forest)?;
    let roots = root_mesh(forest);
    let full = full_depth(forest, t_final);
    let depth = max_levels.map_or(full, |m| m.min(full));
    let mut levels = Vec::with_capacity(depth + 1);
    let mut uniform_levels = Vec::with_capacity(depth + 1);
    let mut hat = roots;
    for l in 0..=depth {
        if l > 0 {
            hat = uniform_refine(forest, &hat, 1)?;
        }
        levels.push(fcc(forest, t_final, &hat)?);
        uniform_levels.push(hat.clone());
    }
    if depth == full {
        assert_eq!(
            levels.last().unwrap().elements,
            t_final.elements,
            "finest fcc level must equal the input mesh once all generations are resolved"
        );
    }
    let h = Hierarchy {
        forest_id: forest.id,
        kind: HierarchyKind::Fcc,
        levels,
        uniform_levels: Some(uniform_levels),
        hat_h0: root_hat_h0(forest),
    };
    debug_assert!(h.verify_nested(forest).is_ok());
    Ok(h)
}

/// Wrap adaptive-loop snapshots; rejects non-nested input.
pub fn build_adaptive_hierarchy(
    forest: &RefinementForest,
    snapshots: Vec<MeshView>,
) -> Result<Hierarchy, HierarchyError> {
    if snapshots.is_empty() {
        return Err(HierarchyError::Empty);
    }
    for s in &snapshots {
        s.check_forest(forest)?;
    }
    let h = Hierarchy {
        forest_id: forest.id,
        kind: HierarchyKind::Adaptive,
        levels: snapshots,
        uniform_levels: None,
        hat_h0: root_hat_h0(forest),
    };
    h.verify_nested(forest)?;
    Ok(h)
}

/// Uniform refinements of the root mesh, levels 0..=depth.
pub fn build_uniform_hierarchy(
    forest: &mut RefinementForest,
    depth: usize,
) -> Result<Hierarchy, HierarchyError> {
    let mut levels = vec![root_mesh(forest)];
    for l in 1..=depth {
        let next = uniform_refine(forest, &levels[l - 1], 1)?;
        levels.push(next);
    }
    Ok(Hierarchy {
        forest_id: forest.id,
        kind: HierarchyKind::Uniform,
        levels,
        uniform_levels: None,
        hat_h0: root_hat_h0(forest),
    })
}

/// Vertices of level `l` whose patch differs from the previous level, plus
/// all new vertices; level 0 returns every vertex. This is the p1 marked set
/// over the full vertex set; restrict to interior vertices for zero-trace
/// spaces.
pub fn marked_vertices(
    forest: &RefinementForest,
    hierarchy: &Hierarchy,
    level: usize,
) -> Vec<usize> {
    let fine = &hierarchy.levels[level];
    let fine_inc = vertex_incidence(forest, fine);
    if level == 0 {
        let mut all: Vec<usize> = fine_inc.keys().copied().collect();
        all.sort_unstable();
        return all;
    }
    let coarse_inc = vertex_incidence(forest, &hierarchy.levels[level - 1]);
    let mut out = Vec::new();
    for (&z, elems) in &fine_inc {
        match coarse_inc.get(&z) {
            None => out.push(z), // new vertex
            Some(coarse_elems) => {
                let mut a: Vec<usize> = elems.clone();
                let mut b: Vec<usize> = coarse_elems.clone();
                a.sort_unstable();
                b.sort_unstable();
                if a != b {
                    out.push(z); // patch changed
                }
            }
        }
    }
    out.sort_unstable();
    out
}

/// Max mesh width over the elements of the vertex patch of `z` in `mesh`.
pub fn patch_width(forest: &RefinementForest, incidence: &HashMap<usize, Vec<usize>>, z: usize) -> f64 {
    incidence
        .get(&z)
        .map(|elems| elems.iter().map(|&e| forest.mesh_width(e)).fold(0.0, f64::max))
        .unwrap_or(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{make_initial_mesh, refine, Domain};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn random_refinement(
        forest: &mut RefinementForest,
        mesh: &MeshView,
        rng: &mut ChaCha8Rng,
        rounds: usize,
        max_gen: u32,
    ) -> MeshView {
        let mut cur = mesh.clone();
        for _ in 0..rounds {
            let markable: Vec<usize> = cur
                .elements
                .iter()
                .copied()
                .filter(|&e| forest.node(e).generation < max_gen)
                .collect();
            if markable.is_empty() {
                break;
            }
            let marked: Vec<usize> =
                markable.into_iter().filter(|_| rng.gen_bool(0.35)).collect();
            cur = refine(forest, &cur, &marked).unwrap();
        }
        cur
    }

    #[test]
    fn fcc_trivial_cases() {
        let (mut forest, mesh) = make_initial_mesh(Domain::UnitSquare);
        // fcc(T, T) = T
        let same = fcc(&forest, &mesh, &mesh).unwrap();
        assert_eq!(same.elements, mesh.elements);
        let parts = fcc_parts(&forest, &mesh, &mesh).unwrap();
        assert!(parts.b1.is_empty() && parts.b2.is_empty());
        assert_eq!(parts.b3.len(), mesh.len());

        // fcc with a uniform refinement of itself is the coarse mesh
        let fine = uniform_refine(&mut forest, &mesh, 1).unwrap();
        let coarse = fcc(&forest, &mesh, &fine).unwrap();
        assert_eq!(coarse.elements, mesh.elements);
    }

    #[test]
    fn fcc_matches_bruteforce_on_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..25 {
            let (mut forest, mesh) = make_initial_mesh(Domain::UnitSquare);
            let a = random_refinement(&mut forest, &mesh, &mut rng, 4, 6);
            let b = random_refinement(&mut forest, &mesh, &mut rng, 4, 6);
            let got = fcc(&forest, &a, &b).unwrap();
            let want = crate::oracle::fcc_by_definition(&forest, &a, &b);
            assert_eq!(got.elements, want);
            // symmetry and disjointness
            let sym = fcc(&forest, &b, &a).unwrap();
            assert_eq!(got.elements, sym.elements);
            let parts = fcc_parts(&forest, &a, &b).unwrap();
            assert_eq!(parts.b1.len() + parts.b2.len() + parts.b3.len(), got.len());
            // covering
            let area: f64 = got.elements.iter().map(|&e| forest.area(e)).sum();
            assert!((area - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn fcc_hierarchy_of_uniform_mesh_is_uniform() {
        let (mut forest, mesh) = make_initial_mesh(Domain::UnitSquare);
        let t = uniform_refine(&mut forest, &mesh, 2).unwrap();
        let h = build_fcc_hierarchy(&mut forest, &t, Some(2)).unwrap();
        assert_eq!(h.levels.len(), 3);
        assert_eq!(h.levels[0].elements, mesh.elements);
        assert_eq!(h.levels[2].elements, t.elements);
        let hat1 = uniform_refine(&mut forest, &mesh, 1).unwrap();
        assert_eq!(h.levels[1].elements, hat1.elements);

        // t_final already the root mesh: all levels equal it
        let h0 = build_fcc_hierarchy(&mut forest, &mesh, None).unwrap();
        assert_eq!(h0.levels.len(), 1);
        assert_eq!(h0.levels[0].elements, mesh.elements);
    }

    #[test]
    fn chopping_properties_hold_on_random_hierarchies() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..5 {
            let (mut forest, mesh) = make_initial_mesh(Domain::LShape);
            let t = random_refinement(&mut forest, &mesh, &mut rng, 5, 8);
            let t_set: std::collections::HashSet<usize> = t.elements.iter().copied().collect();
            let h = build_fcc_hierarchy(&mut forest, &t, None).unwrap();
            h.verify_nested(&forest).unwrap();
            let uniforms = h.uniform_levels.as_ref().unwrap();
            for l in 0..h.levels.len() {
                let level: std::collections::HashSet<usize> =
                    h.levels[l].elements.iter().copied().collect();
                // every element not in T belongs to T-hat_l
                for &e in &h.levels[l].elements {
                    if !t_set.contains(&e) {
                        assert!(uniforms[l].contains(e));
                    }
                }
                if l + 1 < h.levels.len() {
                    let next: std::collections::HashSet<usize> =
                        h.levels[l + 1].elements.iter().copied().collect();
                    for &e in &h.levels[l].elements {
                        if t_set.contains(&e) {
                            // (i): elements of T persist to all finer levels
                            assert!(next.contains(&e));
                        } else {
                            // (ii): uniform leftovers disappear on the next level
                            assert!(!next.contains(&e));
                        }
                    }
                    // (iv): vertex nestedness
                    let vc: std::collections::HashSet<usize> =
                        vertex_incidence(&forest, &h.levels[l]).keys().copied().collect();
                    let vf: std::collections::HashSet<usize> =
                        vertex_incidence(&forest, &h.levels[l + 1]).keys().copied().collect();
                    assert!(vc.is_subset(&vf));
                    let _ = level;
                }
            }
        }
    }

    #[test]
    fn adaptive_hierarchy_rejects_non_nested() {
        let (mut forest, mesh) = make_initial_mesh(Domain::UnitSquare);
        let a = refine(&mut forest, &mesh, &[mesh.elements[0]]).unwrap();
        let b = refine(&mut forest, &mesh, &[mesh.elements[1]]).unwrap();
        assert!(build_adaptive_hierarchy(&forest, vec![mesh.clone(), a.clone()]).is_ok());
        assert!(build_adaptive_hierarchy(&forest, vec![a, b]).is_err());
    }

    #[test]
    fn marked_vertices_rules() {
        let (mut forest, mesh) = make_initial_mesh(Domain::UnitSquare);
        let fine = uniform_refine(&mut forest, &mesh, 1).unwrap();
        let h = build_fcc_hierarchy(&mut forest, &fine, None).unwrap();
        // level 0: all vertices
        let m0 = marked_vertices(&forest, &h, 0);
        assert_eq!(m0.len(), 5);
        // a full uniform step marks every vertex of the fine mesh
        let m1 = marked_vertices(&forest, &h, 1);
        let n1 = vertex_incidence(&forest, &h.levels[1]).len();
        assert_eq!(m1.len(), n1);

        // local refinement far from a vertex leaves it unmarked
        let (mut forest, mesh) = make_initial_mesh(Domain::UnitSquare);
        let fine = uniform_refine(&mut forest, &mesh, 2).unwrap();
        // refine only elements near the corner (0,0)
        let near: Vec<usize> = fine
            .elements
            .iter()
            .copied()
            .filter(|&e| {
                let b = forest.barycenter(e);
                b[0] < 0.3 && b[1] < 0.3
            })
            .collect();
        let local = refine(&mut forest, &fine, &near).unwrap();
        let h = build_fcc_hierarchy(&mut forest, &local, None).unwrap();
        let last = h.levels.len() - 1;
        let marked = marked_vertices(&forest, &h, last);
        let far_vertex = forest
            .vertices
            .iter()
            .find(|v| (v.x - 1.0).abs() < 1e-12 && (v.y - 1.0).abs() < 1e-12)
            .unwrap()
            .id;
        assert!(
            !marked.contains(&far_vertex),
            "far corner vertex with untouched patch must not be marked"
        );
    }
}
