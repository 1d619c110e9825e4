//! Machine-checkable property suite aggregating the module invariants:
//! fcc brute force, Scott-Zhang coincidence, telescoping locality, minimal
//! completion, SPD assembly, quadrature oracle agreement, and the
//! hanging-node fault injection.

use crate::hierarchy::{build_fcc_hierarchy, fcc, fcc_parts, marked_vertices};
use crate::kernel::{
    assemble_stiffness, pair_interaction, FracParams, PairBasis, QuadConfig,
};
use crate::mesh::{
    hanging_nodes, make_initial_mesh, refine, refine_no_closure, vertex_incidence, Domain,
    MeshView, RefinementForest,
};
use crate::oracle;
use crate::space::{
    assign_averaging, assign_averaging_leveled, build_space, prolongation,
    scott_zhang_apply_discrete, Family,
};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub struct PropertyResult {
    pub name: String,
    pub passed: bool,
    pub details: String,
    pub seed: u64,
}

impl PropertyResult {
    fn ok(name: &str, seed: u64, details: String) -> Self {
        PropertyResult { name: name.into(), passed: true, details, seed }
    }
    fn fail(name: &str, seed: u64, details: String) -> Self {
        PropertyResult { name: name.into(), passed: false, details, seed }
    }
}

fn random_local_mesh(seed: u64, rounds: usize, max_gen: u32) -> (RefinementForest, MeshView) {
    let (mut forest, mesh) = make_initial_mesh(Domain::UnitSquare);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cur = mesh;
    for _ in 0..rounds {
        let marked: Vec<usize> = cur
            .elements
            .iter()
            .copied()
            .filter(|&e| forest.node(e).generation < max_gen && rng.gen_bool(0.35))
            .collect();
        cur = refine(&mut forest, &cur, &marked).unwrap();
    }
    (forest, cur)
}

fn check_fcc(seed: u64, pairs: usize) -> PropertyResult {
    let name = "fcc_bruteforce";
    for k in 0..pairs {
        let pair_seed = seed.wrapping_add(k as u64);
        let (mut forest, mesh) = make_initial_mesh(Domain::UnitSquare);
        let mut rng = ChaCha8Rng::seed_from_u64(pair_seed);
        let mut refine_random = |forest: &mut RefinementForest, rng: &mut ChaCha8Rng| {
            let mut cur = mesh.clone();
            for _ in 0..4 {
                let marked: Vec<usize> = cur
                    .elements
                    .iter()
                    .copied()
                    .filter(|&e| forest.node(e).generation < 6 && rng.gen_bool(0.35))
                    .collect();
                cur = refine(forest, &cur, &marked).unwrap();
            }
            cur
        };
        let a = refine_random(&mut forest, &mut rng);
        let b = refine_random(&mut forest, &mut rng);
        let got = fcc(&forest, &a, &b).unwrap();
        let want = oracle::fcc_by_definition(&forest, &a, &b);
        if got.elements != want {
            return PropertyResult::fail(name, pair_seed, "definition mismatch".into());
        }
        let sym = fcc(&forest, &b, &a).unwrap();
        if sym.elements != got.elements {
            return PropertyResult::fail(name, pair_seed, "not symmetric".into());
        }
        let parts = fcc_parts(&forest, &a, &b).unwrap();
        if parts.b1.len() + parts.b2.len() + parts.b3.len() != got.len() {
            return PropertyResult::fail(name, pair_seed, "parts not disjoint".into());
        }
        let area: f64 = got.elements.iter().map(|&e| forest.area(e)).sum();
        if (area - 1.0).abs() > 1e-12 {
            return PropertyResult::fail(name, pair_seed, format!("covering defect {area}"));
        }
    }
    PropertyResult::ok(name, seed, format!("{pairs} random pairs"))
}

fn check_sz_coincidence(seed: u64) -> PropertyResult {
    let name = "scott_zhang_coincidence";
    let (forest, t, h) = {
        let (mut forest, t) = random_local_mesh(seed, 4, 6);
        let h = build_fcc_hierarchy(&mut forest, &t, None).unwrap();
        (forest, t, h)
    };
    let uniforms = h.uniform_levels.as_ref().unwrap();
    let t_space = build_space(&forest, &t, Family::P1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5a);
    let mut worst = 0.0f64;
    for _ in 0..3 {
        let u: Vec<f64> = (0..t_space.dim()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        for l in 0..h.levels.len() {
            let (hat, tilde) =
                assign_averaging(&forest, &t, &uniforms[l], &h.levels[l]).unwrap();
            let hat_space = build_space(&forest, &uniforms[l], Family::P1).unwrap();
            let tilde_space = build_space(&forest, &h.levels[l], Family::P1).unwrap();
            let hu = scott_zhang_apply_discrete(&forest, &hat_space, &hat, &t_space, &u).unwrap();
            let tu =
                scott_zhang_apply_discrete(&forest, &tilde_space, &tilde, &t_space, &u).unwrap();
            let p = prolongation(&forest, &tilde_space, &hat_space).unwrap();
            let tu_on_hat = p.matvec(&tu);
            for (a, b) in hu.iter().zip(&tu_on_hat) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    if worst <= 1e-12 {
        PropertyResult::ok(name, seed, format!("max node deviation {worst:.2e}"))
    } else {
        PropertyResult::fail(name, seed, format!("max node deviation {worst:.2e}"))
    }
}

fn check_sz_zero(seed: u64) -> PropertyResult {
    let name = "telescoping_locality";
    let (forest, t, h) = {
        let (mut forest, t) = random_local_mesh(seed, 4, 6);
        let h = build_fcc_hierarchy(&mut forest, &t, None).unwrap();
        (forest, t, h)
    };
    let assignments = assign_averaging_leveled(&forest, &t, &h).unwrap();
    let t_space = build_space(&forest, &t, Family::P1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xce);
    let mut worst = 0.0f64;
    for _ in 0..3 {
        let u: Vec<f64> = (0..t_space.dim()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut prev: Option<(crate::space::FeSpace, Vec<f64>)> = None;
        for l in 0..h.levels.len() {
            let space = build_space(&forest, &h.levels[l], Family::P1).unwrap();
            let su =
                scott_zhang_apply_discrete(&forest, &space, &assignments[l], &t_space, &u).unwrap();
            if let Some((cspace, cu)) = prev {
                let p = prolongation(&forest, &cspace, &space).unwrap();
                let on_fine = p.matvec(&cu);
                let marked: std::collections::HashSet<usize> =
                    marked_vertices(&forest, &h, l).into_iter().collect();
                for (dof, &z) in space.nodes.iter().enumerate() {
                    if !marked.contains(&z) {
                        worst = worst.max((su[dof] - on_fine[dof]).abs());
                    }
                }
            }
            prev = Some((space, su));
        }
    }
    if worst <= 1e-12 {
        PropertyResult::ok(name, seed, format!("max off-marked jump {worst:.2e}"))
    } else {
        PropertyResult::fail(name, seed, format!("max off-marked jump {worst:.2e}"))
    }
}

fn check_minimal_completion(seed: u64) -> PropertyResult {
    let name = "minimal_completion";
    for k in 0..4u64 {
        let (mut forest, mesh) = random_local_mesh(seed.wrapping_add(k), 2, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(100 + k));
        let marked: Vec<usize> = mesh
            .elements
            .iter()
            .copied()
            .filter(|_| rng.gen_bool(0.2))
            .take(3)
            .collect();
        if marked.is_empty() {
            continue;
        }
        let refined = refine(&mut forest, &mesh, &marked).unwrap();
        // forced-move fixpoint from the bare marked bisections, several scan
        // orders: all must agree with refine's output
        for scan in 0..3u64 {
            let bare = refine_no_closure(&mut forest, &mesh, &marked).unwrap();
            let completed = oracle::minimal_completion_fixpoint(&mut forest, &bare, scan * 7 + 1);
            if completed.elements != refined.elements {
                return PropertyResult::fail(
                    name,
                    seed.wrapping_add(k),
                    format!("fixpoint (scan {scan}) disagrees with refine"),
                );
            }
        }
    }
    PropertyResult::ok(name, seed, "refine output is the unique forced fixpoint".into())
}

fn check_spd(seed: u64) -> PropertyResult {
    let name = "spd_assembly";
    let (mut forest, mesh) = make_initial_mesh(Domain::UnitSquare);
    let fine = crate::mesh::uniform_refine(&mut forest, &mesh, 1).unwrap();
    let quad = QuadConfig::default();
    for (family, s) in [(Family::P1ZeroBc, 0.6), (Family::P0, 0.3)] {
        let params = FracParams::new(s).unwrap();
        let space = build_space(&forest, &fine, family).unwrap();
        let a = assemble_stiffness(&forest, &space, &params, &quad).unwrap();
        match a.cholesky_pivots() {
            Ok(_) => {}
            Err(e) => return PropertyResult::fail(name, seed, format!("{family:?}: {e}")),
        }
    }
    PropertyResult::ok(name, seed, "all pivots positive".into())
}

fn check_quadrature_oracle(seed: u64) -> PropertyResult {
    let name = "quadrature_oracle";
    let forest = RefinementForest::from_raw(
        &[[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]],
        &[[1, 0, 2], [3, 2, 0]],
    );
    let quad = QuadConfig::default();
    for (basis, obasis, s) in [
        (PairBasis::P1, oracle::OracleBasis::P1, 0.5),
        (PairBasis::P0, oracle::OracleBasis::P0, 0.3),
    ] {
        let params = FracParams::new(s).unwrap();
        let block = pair_interaction(&forest, 0, 1, basis, &params, &quad);
        let (opoints, ovalues) =
            oracle::pair_block_oracle(&forest.coords(0), &forest.coords(1), obasis, s, 7);
        let scale = ovalues.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for (i, &di) in block.dofs().iter().enumerate() {
            let pi = match basis {
                PairBasis::P1 => forest.vertex(di).pos(),
                PairBasis::P0 => forest.barycenter(di),
            };
            let oi = opoints
                .iter()
                .position(|q| (q[0] - pi[0]).abs() + (q[1] - pi[1]).abs() < 1e-12)
                .unwrap();
            for (j, &dj) in block.dofs().iter().enumerate() {
                let pj = match basis {
                    PairBasis::P1 => forest.vertex(dj).pos(),
                    PairBasis::P0 => forest.barycenter(dj),
                };
                let oj = opoints
                    .iter()
                    .position(|q| (q[0] - pj[0]).abs() + (q[1] - pj[1]).abs() < 1e-12)
                    .unwrap();
                let (got, want) = (block.get(i, j), ovalues[oi * opoints.len() + oj]);
                if (got - want).abs() > 5e-4 * scale {
                    return PropertyResult::fail(
                        name,
                        seed,
                        format!("s={s} entry({i},{j}): {got} vs {want}"),
                    );
                }
            }
        }
    }
    PropertyResult::ok(name, seed, "pair blocks within 5e-4 of the subdivision oracle".into())
}

fn check_fault_injection(seed: u64) -> PropertyResult {
    let name = "hanging_node_fault_injection";
    let (mut forest, mesh) = make_initial_mesh(Domain::UnitSquare);
    let fine = crate::mesh::uniform_refine(&mut forest, &mesh, 1).unwrap();
    let broken = refine_no_closure(&mut forest, &fine, &[fine.elements[0]]).unwrap();
    let detected = !hanging_nodes(&forest, &broken).is_empty();
    let clean = refine(&mut forest, &fine, &[fine.elements[0]]).unwrap();
    let clean_ok = hanging_nodes(&forest, &clean).is_empty();
    if detected && clean_ok {
        PropertyResult::ok(name, seed, "closure skip detected, real refine clean".into())
    } else {
        PropertyResult::fail(name, seed, format!("detected={detected} clean={clean_ok}"))
    }
}

fn check_chopping_cardinality(seed: u64) -> PropertyResult {
    let name = "chopping_marked_cardinality";
    let (forest, h) = {
        let (mut forest, t) = random_local_mesh(seed, 5, 8);
        let h = build_fcc_hierarchy(&mut forest, &t, None).unwrap();
        (forest, h)
    };
    let mut measured_c = 0.0f64;
    for l in 1..h.levels.len() {
        let marked = marked_vertices(&forest, &h, l).len();
        let nodes_f: std::collections::HashSet<usize> =
            vertex_incidence(&forest, &h.levels[l]).keys().copied().collect();
        let nodes_c: std::collections::HashSet<usize> =
            vertex_incidence(&forest, &h.levels[l - 1]).keys().copied().collect();
        let new_nodes = nodes_f.difference(&nodes_c).count();
        if new_nodes > 0 {
            measured_c = measured_c.max(marked as f64 / new_nodes as f64);
        } else if marked > 0 {
            return PropertyResult::fail(name, seed, format!("level {l}: marked without new nodes"));
        }
    }
    // the constant only depends on shape regularity; 8 is generous for NVB
    if measured_c <= 8.0 {
        PropertyResult::ok(name, seed, format!("measured C = {measured_c:.3}"))
    } else {
        PropertyResult::fail(name, seed, format!("measured C = {measured_c:.3}"))
    }
}

/// Run every check with the given seed.
pub fn run_property_suite(seed: u64) -> Vec<PropertyResult> {
    vec![
        check_fcc(seed, 20),
        check_sz_coincidence(seed),
        check_sz_zero(seed),
        check_minimal_completion(seed),
        check_spd(seed),
        check_quadrature_oracle(seed),
        check_fault_injection(seed),
        check_chopping_cardinality(seed),
    ]
}
