//! Newest-vertex-bisection refinement forests over 2D triangulations.
//!
//! Every mesh in this crate is a [`MeshView`]: a set of leaves-at-some-cut of
//! a shared [`RefinementForest`]. The forest is append-only; views taken
//! earlier stay valid while the forest grows.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::sync::atomic::{AtomicU64, Ordering};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MeshError {
    #[error("forest node {0} is not a leaf")]
    NotALeaf(usize),
    #[error("element {0} does not belong to the mesh")]
    UnknownElement(usize),
    #[error("vertex {0} does not belong to the mesh")]
    UnknownVertex(usize),
    #[error("patch order must be at least 1")]
    InvalidPatchOrder,
    #[error("degenerate element {0} (zero area)")]
    DegenerateElement(usize),
    #[error("mesh belongs to a different forest")]
    ForestMismatch,
    #[error("closure did not terminate (corrupt refinement-edge tagging?)")]
    ClosureDiverged,
    #[error("invalid mesh file: {0}")]
    InvalidFile(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Mesh vertex with dense id and dyadic coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Vertex {
    pub id: usize,
    pub x: f64,
    pub y: f64,
}

impl Vertex {
    pub fn pos(&self) -> [f64; 2] {
        [self.x, self.y]
    }
}

/// Triangle in the binary refinement forest.
///
/// `vertex_ids = [v0, v1, v2]` with the refinement edge (v1, v2) opposite the
/// newest vertex v0.
#[derive(Debug, Clone)]
pub struct ForestNode {
    pub id: usize,
    pub vertex_ids: [usize; 3],
    pub parent: Option<usize>,
    pub children: Option<[usize; 2]>,
    pub generation: u32,
}

static FOREST_IDS: AtomicU64 = AtomicU64::new(0);

/// Binary forest of NVB triangles over an initial mesh.
#[derive(Debug)]
pub struct RefinementForest {
    pub id: u64,
    pub nodes: Vec<ForestNode>,
    pub roots: Vec<usize>,
    pub vertices: Vec<Vertex>,
    /// Midpoint vertex created for an edge, keyed by sorted endpoint ids.
    edge_midpoint: HashMap<(usize, usize), usize>,
}

/// Reference domains for the experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Domain {
    UnitSquare,
    LShape,
}

impl std::str::FromStr for Domain {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "unit_square" | "square" => Ok(Domain::UnitSquare),
            "l_shape" | "lshape" => Ok(Domain::LShape),
            other => Err(format!("unknown domain '{other}'")),
        }
    }
}

/// Immutable triangulation snapshot: a cut through the forest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MeshView {
    pub forest_id: u64,
    /// Sorted forest-node ids with pairwise disjoint interiors covering the domain.
    pub elements: Vec<usize>,
}

impl MeshView {
    pub fn new(forest: &RefinementForest, mut elements: Vec<usize>) -> Self {
        elements.sort_unstable();
        elements.dedup();
        MeshView { forest_id: forest.id, elements }
    }

    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    pub fn contains(&self, node: usize) -> bool {
        self.elements.binary_search(&node).is_ok()
    }

    pub fn check_forest(&self, forest: &RefinementForest) -> Result<(), MeshError> {
        if self.forest_id == forest.id {
            Ok(())
        } else {
            Err(MeshError::ForestMismatch)
        }
    }
}

fn normalize_zero(v: f64) -> f64 {
    if v == 0.0 {
        0.0
    } else {
        v
    }
}

impl RefinementForest {
    /// Forest whose roots are the given triangles. `triangles` hold vertex ids
    /// ordered so that (v1, v2) is the refinement edge.
    pub fn from_raw(coords: &[[f64; 2]], triangles: &[[usize; 3]]) -> Self {
        Self::from_raw_with_generations(coords, triangles, None)
    }

    fn from_raw_with_generations(
        coords: &[[f64; 2]],
        triangles: &[[usize; 3]],
        generations: Option<&[u32]>,
    ) -> Self {
        let vertices = coords
            .iter()
            .enumerate()
            .map(|(id, c)| Vertex { id, x: normalize_zero(c[0]), y: normalize_zero(c[1]) })
            .collect();
        let nodes = triangles
            .iter()
            .enumerate()
            .map(|(id, t)| ForestNode {
                id,
                vertex_ids: *t,
                parent: None,
                children: None,
                generation: generations.map_or(0, |g| g[id]),
            })
            .collect();
        RefinementForest {
            id: FOREST_IDS.fetch_add(1, Ordering::Relaxed),
            nodes,
            roots: (0..triangles.len()).collect(),
            vertices,
            edge_midpoint: HashMap::new(),
        }
    }

    /// Initial mesh of a reference domain, refinement edges on the
    /// hypotenuses so that all shared root edges are compatibly tagged.
    pub fn initial_mesh(domain: Domain) -> (Self, MeshView) {
        let (coords, tris): (Vec<[f64; 2]>, Vec<[usize; 3]>) = match domain {
            Domain::UnitSquare => (
                vec![[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0], [0.5, 0.5]],
                // criss-cross: peak at the center, refinement edge on the boundary
                vec![[4, 0, 1], [4, 1, 2], [4, 2, 3], [4, 3, 0]],
            ),
            Domain::LShape => (
                vec![
                    [-1.0, 0.0], // 0
                    [0.0, 0.0],  // 1 reentrant corner
                    [-1.0, 1.0], // 2
                    [0.0, 1.0],  // 3
                    [-1.0, -1.0], // 4
                    [0.0, -1.0], // 5
                    [1.0, -1.0], // 6
                    [1.0, 0.0],  // 7
                ],
                // three unit squares, each split by the diagonal toward (0,0)
                vec![
                    [0, 1, 2], // top-left square
                    [3, 2, 1],
                    [0, 4, 1], // bottom-left square
                    [5, 1, 4],
                    [5, 6, 1], // bottom-right square
                    [7, 1, 6],
                ],
            ),
        };
        let forest = Self::from_raw(&coords, &tris);
        let view = MeshView::new(&forest, forest.roots.clone());
        debug_assert!(forest.compatibility_check(&view));
        (forest, view)
    }

    pub fn node(&self, id: usize) -> &ForestNode {
        &self.nodes[id]
    }

    pub fn vertex(&self, id: usize) -> &Vertex {
        &self.vertices[id]
    }

    pub fn is_leaf(&self, id: usize) -> bool {
        self.nodes[id].children.is_none()
    }

    pub fn coords(&self, node: usize) -> [[f64; 2]; 3] {
        let vs = self.nodes[node].vertex_ids;
        [self.vertices[vs[0]].pos(), self.vertices[vs[1]].pos(), self.vertices[vs[2]].pos()]
    }

    /// Refinement edge of a node: sorted vertex-id pair (v1, v2).
    pub fn refinement_edge(&self, node: usize) -> (usize, usize) {
        let v = self.nodes[node].vertex_ids;
        sorted_pair(v[1], v[2])
    }

    /// The three edges as sorted vertex-id pairs.
    pub fn edges(&self, node: usize) -> [(usize, usize); 3] {
        let v = self.nodes[node].vertex_ids;
        [sorted_pair(v[0], v[1]), sorted_pair(v[1], v[2]), sorted_pair(v[2], v[0])]
    }

    pub fn area(&self, node: usize) -> f64 {
        let [a, b, c] = self.coords(node);
        0.5 * ((b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])).abs()
    }

    pub fn diameter(&self, node: usize) -> f64 {
        let [a, b, c] = self.coords(node);
        let d = |p: [f64; 2], q: [f64; 2]| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt();
        d(a, b).max(d(b, c)).max(d(c, a))
    }

    /// Local mesh width h_T = |T|^{1/d}, d = 2.
    pub fn mesh_width(&self, node: usize) -> f64 {
        self.area(node).sqrt()
    }

    pub fn barycenter(&self, node: usize) -> [f64; 2] {
        let [a, b, c] = self.coords(node);
        [(a[0] + b[0] + c[0]) / 3.0, (a[1] + b[1] + c[1]) / 3.0]
    }

    fn midpoint_vertex(&mut self, a: usize, b: usize) -> usize {
        let key = sorted_pair(a, b);
        if let Some(&m) = self.edge_midpoint.get(&key) {
            return m;
        }
        let (va, vb) = (self.vertices[a], self.vertices[b]);
        let id = self.vertices.len();
        self.vertices.push(Vertex {
            id,
            x: normalize_zero(0.5 * (va.x + vb.x)),
            y: normalize_zero(0.5 * (va.y + vb.y)),
        });
        self.edge_midpoint.insert(key, id);
        id
    }

    /// Bisect a leaf at its refinement edge. The midpoint vertex is shared
    /// with the neighbor's bisection of the same edge.
    pub fn bisect(&mut self, node: usize) -> Result<[usize; 2], MeshError> {
        if !self.is_leaf(node) {
            return Err(MeshError::NotALeaf(node));
        }
        Ok(self.ensure_children(node))
    }

    /// Children of `node`, bisecting it if it has none yet.
    pub(crate) fn ensure_children(&mut self, node: usize) -> [usize; 2] {
        if let Some(c) = self.nodes[node].children {
            return c;
        }
        let [v0, v1, v2] = self.nodes[node].vertex_ids;
        let gen = self.nodes[node].generation;
        let m = self.midpoint_vertex(v1, v2);
        let ca = self.push_node([m, v0, v1], node, gen + 1);
        let cb = self.push_node([m, v2, v0], node, gen + 1);
        self.nodes[node].children = Some([ca, cb]);
        [ca, cb]
    }

    fn push_node(&mut self, vertex_ids: [usize; 3], parent: usize, generation: u32) -> usize {
        let id = self.nodes.len();
        self.nodes.push(ForestNode { id, vertex_ids, parent: Some(parent), children: None, generation });
        id
    }

    /// True iff `anc` is a proper ancestor of `node`.
    pub fn is_proper_ancestor(&self, anc: usize, node: usize) -> bool {
        let mut cur = self.nodes[node].parent;
        while let Some(p) = cur {
            if p == anc {
                return true;
            }
            cur = self.nodes[p].parent;
        }
        false
    }

    /// Walk up from `node` (inclusive) until a node satisfying `pred` is found.
    pub fn ancestor_or_self_where<F: Fn(usize) -> bool>(&self, node: usize, pred: F) -> Option<usize> {
        let mut cur = Some(node);
        while let Some(n) = cur {
            if pred(n) {
                return Some(n);
            }
            cur = self.nodes[n].parent;
        }
        None
    }

    /// Leaves of the cut `mesh` that lie below-or-at `node`, in sorted order.
    /// Returns `None` when `node` is strictly below the cut.
    pub fn descendants_in_cut(&self, node: usize, mesh: &MeshView) -> Option<Vec<usize>> {
        if mesh.contains(node) {
            return Some(vec![node]);
        }
        let children = self.nodes[node].children?;
        let mut out = Vec::new();
        let mut stack = vec![children[0], children[1]];
        while let Some(n) = stack.pop() {
            if mesh.contains(n) {
                out.push(n);
            } else if let Some(c) = self.nodes[n].children {
                stack.extend(c);
            } else {
                return None; // ran past the cut: node is not covered by mesh
            }
        }
        out.sort_unstable();
        Some(out)
    }

    /// Every shared root edge must be a refinement edge of both or neither
    /// root; guarantees conforming uniform refinement without closure.
    pub fn compatibility_check(&self, mesh: &MeshView) -> bool {
        let mut tag: HashMap<(usize, usize), Vec<bool>> = HashMap::new();
        for &e in &mesh.elements {
            let ref_edge = self.refinement_edge(e);
            for edge in self.edges(e) {
                tag.entry(edge).or_default().push(edge == ref_edge);
            }
        }
        tag.values().all(|v| v.len() < 2 || v[0] == v[1])
    }
}

fn sorted_pair(a: usize, b: usize) -> (usize, usize) {
    if a < b {
        (a, b)
    } else {
        (b, a)
    }
}

/// Build the initial mesh of a reference domain.
pub fn make_initial_mesh(domain: Domain) -> (RefinementForest, MeshView) {
    RefinementForest::initial_mesh(domain)
}

// ---------------------------------------------------------------------------
// Refinement with conforming closure
// ---------------------------------------------------------------------------

/// Mutable working cut used during refinement.
struct CutEditor<'f> {
    forest: &'f mut RefinementForest,
    alive: HashSet<usize>,
    /// edge -> incident alive elements (at most 2)
    edge_map: HashMap<(usize, usize), Vec<usize>>,
    bisections: usize,
}

impl<'f> CutEditor<'f> {
    fn new(forest: &'f mut RefinementForest, mesh: &MeshView) -> Self {
        let alive: HashSet<usize> = mesh.elements.iter().copied().collect();
        let mut edge_map: HashMap<(usize, usize), Vec<usize>> = HashMap::new();
        for &e in &mesh.elements {
            for edge in forest.edges(e) {
                edge_map.entry(edge).or_default().push(e);
            }
        }
        CutEditor { forest, alive, edge_map, bisections: 0 }
    }

    fn neighbor_across(&self, edge: (usize, usize), me: usize) -> Option<usize> {
        self.edge_map.get(&edge)?.iter().copied().find(|&e| e != me)
    }

    fn remove(&mut self, e: usize) {
        self.alive.remove(&e);
        for edge in self.forest.edges(e) {
            if let Some(v) = self.edge_map.get_mut(&edge) {
                v.retain(|&x| x != e);
            }
        }
    }

    fn insert(&mut self, e: usize) {
        self.alive.insert(e);
        for edge in self.forest.edges(e) {
            self.edge_map.entry(edge).or_default().push(e);
        }
    }

    fn bisect_leaf(&mut self, e: usize) {
        let children = self.forest.ensure_children(e);
        self.remove(e);
        for c in children {
            self.insert(c);
        }
        self.bisections += 1;
    }

    /// Bisect `target` and whatever its conforming closure forces.
    fn bisect_conforming(&mut self, target: usize) -> Result<(), MeshError> {
        let budget = 64 * (self.alive.len() + 64); // closure terminates; guard anyway
        let mut stack = vec![target];
        while let Some(&top) = stack.last() {
            if self.bisections > budget || stack.len() > budget {
                return Err(MeshError::ClosureDiverged);
            }
            if !self.alive.contains(&top) {
                stack.pop(); // already bisected as somebody's partner
                continue;
            }
            let edge = self.forest.refinement_edge(top);
            match self.neighbor_across(edge, top) {
                None => {
                    self.bisect_leaf(top);
                    stack.pop();
                }
                Some(n) if self.forest.refinement_edge(n) == edge => {
                    self.bisect_leaf(top);
                    self.bisect_leaf(n);
                    stack.pop();
                }
                Some(n) => stack.push(n),
            }
        }
        Ok(())
    }

    fn into_view(self) -> MeshView {
        let mut elements: Vec<usize> = self.alive.into_iter().collect();
        elements.sort_unstable();
        MeshView { forest_id: self.forest.id, elements }
    }
}

/// Bisect every marked element at least once and restore conformity by the
/// minimal closure. `marked = []` returns the input mesh.
pub fn refine(
    forest: &mut RefinementForest,
    mesh: &MeshView,
    marked: &[usize],
) -> Result<MeshView, MeshError> {
    mesh.check_forest(forest)?;
    for &m in marked {
        if !mesh.contains(m) {
            return Err(MeshError::UnknownElement(m));
        }
    }
    if marked.is_empty() {
        return Ok(mesh.clone());
    }
    let mut editor = CutEditor::new(forest, mesh);
    let mut targets: Vec<usize> = marked.to_vec();
    targets.sort_unstable();
    targets.dedup();
    for t in targets {
        if editor.alive.contains(&t) {
            editor.bisect_conforming(t)?;
        }
    }
    Ok(editor.into_view())
}

/// Fault-injection variant for the property suite: bisects the marked
/// elements without any closure, generally producing hanging nodes.
pub fn refine_no_closure(
    forest: &mut RefinementForest,
    mesh: &MeshView,
    marked: &[usize],
) -> Result<MeshView, MeshError> {
    mesh.check_forest(forest)?;
    let mut editor = CutEditor::new(forest, mesh);
    for &m in marked {
        if !mesh.contains(m) {
            return Err(MeshError::UnknownElement(m));
        }
        if editor.alive.contains(&m) {
            editor.bisect_leaf(m);
        }
    }
    Ok(editor.into_view())
}

/// `steps` rounds of full uniform refinement; each round bisects every
/// element d = 2 times, replacing it by its four grandchildren.
pub fn uniform_refine(
    forest: &mut RefinementForest,
    mesh: &MeshView,
    steps: usize,
) -> Result<MeshView, MeshError> {
    mesh.check_forest(forest)?;
    let mut current = mesh.elements.clone();
    for _ in 0..steps {
        let mut next = Vec::with_capacity(current.len() * 4);
        for e in current {
            for c in forest.ensure_children(e) {
                next.extend(forest.ensure_children(c));
            }
        }
        current = next;
    }
    current.sort_unstable();
    Ok(MeshView { forest_id: forest.id, elements: current })
}

/// Patch seeds: an element of the mesh or a mesh vertex.
#[derive(Debug, Clone, Copy)]
pub enum PatchSeed {
    Element(usize),
    Vertex(usize),
}

/// ω^k(T) for an element seed (k rounds of closure-neighbor expansion), or
/// the vertex patch ω(z) (all elements having z as a vertex, expanded k-1
/// further rounds). Requires k >= 1.
pub fn patch(
    forest: &RefinementForest,
    mesh: &MeshView,
    seed: PatchSeed,
    order: usize,
) -> Result<Vec<usize>, MeshError> {
    mesh.check_forest(forest)?;
    if order == 0 {
        return Err(MeshError::InvalidPatchOrder);
    }
    let incidence = vertex_incidence(forest, mesh);
    let mut set: HashSet<usize>;
    let mut rounds = order;
    match seed {
        PatchSeed::Element(e) => {
            if !mesh.contains(e) {
                return Err(MeshError::UnknownElement(e));
            }
            set = HashSet::from([e]);
        }
        PatchSeed::Vertex(z) => {
            let Some(elems) = incidence.get(&z) else {
                return Err(MeshError::UnknownVertex(z));
            };
            set = elems.iter().copied().collect();
            rounds -= 1;
        }
    }
    for _ in 0..rounds {
        let mut grown = set.clone();
        for &e in &set {
            for v in forest.nodes[e].vertex_ids {
                if let Some(elems) = incidence.get(&v) {
                    grown.extend(elems.iter().copied());
                }
            }
        }
        set = grown;
    }
    let mut out: Vec<usize> = set.into_iter().collect();
    out.sort_unstable();
    Ok(out)
}

/// vertex id -> incident elements of the mesh
pub fn vertex_incidence(forest: &RefinementForest, mesh: &MeshView) -> HashMap<usize, Vec<usize>> {
    let mut map: HashMap<usize, Vec<usize>> = HashMap::new();
    for &e in &mesh.elements {
        for v in forest.nodes[e].vertex_ids {
            map.entry(v).or_default().push(e);
        }
    }
    map
}

/// max_T diam(T)/|T|^{1/2}.
pub fn shape_regularity(forest: &RefinementForest, mesh: &MeshView) -> Result<f64, MeshError> {
    mesh.check_forest(forest)?;
    let mut gamma: f64 = 0.0;
    for &e in &mesh.elements {
        let area = forest.area(e);
        if area <= 0.0 {
            return Err(MeshError::DegenerateElement(e));
        }
        gamma = gamma.max(forest.diameter(e) / area.sqrt());
    }
    Ok(gamma)
}

/// Edges incident to exactly one element (as sorted vertex-id pairs).
pub fn boundary_edges(forest: &RefinementForest, mesh: &MeshView) -> Vec<(usize, usize)> {
    let mut count: HashMap<(usize, usize), u32> = HashMap::new();
    for &e in &mesh.elements {
        for edge in forest.edges(e) {
            *count.entry(edge).or_default() += 1;
        }
    }
    let mut out: Vec<(usize, usize)> =
        count.into_iter().filter(|&(_, c)| c == 1).map(|(e, _)| e).collect();
    out.sort_unstable();
    out
}

/// Vertex ids lying on the mesh boundary.
pub fn boundary_vertices(forest: &RefinementForest, mesh: &MeshView) -> HashSet<usize> {
    let mut set = HashSet::new();
    for (a, b) in boundary_edges(forest, mesh) {
        set.insert(a);
        set.insert(b);
    }
    set
}

/// Boundary of the meshed domain as counter-clockwise oriented segments
/// with collinear runs merged, suitable for ray casting.
pub fn domain_polygon(
    forest: &RefinementForest,
    mesh: &MeshView,
) -> Vec<([f64; 2], [f64; 2])> {
    let raw = boundary_edges(forest, mesh);
    // orient each edge so its element lies on the left
    let mut owner: HashMap<(usize, usize), usize> = HashMap::new();
    for &e in &mesh.elements {
        for edge in forest.edges(e) {
            owner.insert(edge, e);
        }
    }
    let cross = |a: [f64; 2], b: [f64; 2]| a[0] * b[1] - a[1] * b[0];
    let sub = |a: [f64; 2], b: [f64; 2]| [a[0] - b[0], a[1] - b[1]];
    let mut next: HashMap<usize, usize> = HashMap::new();
    for (a, b) in raw {
        let e = owner[&(a, b)];
        let [p, q, r] = forest.coords(e);
        let c = [(p[0] + q[0] + r[0]) / 3.0, (p[1] + q[1] + r[1]) / 3.0];
        let (pa, pb) = (forest.vertex(a).pos(), forest.vertex(b).pos());
        if cross(sub(pb, pa), sub(c, pa)) > 0.0 {
            next.insert(a, b);
        } else {
            next.insert(b, a);
        }
    }
    let mut segments = Vec::new();
    let mut visited: HashSet<usize> = HashSet::new();
    let starts: Vec<usize> = {
        let mut s: Vec<usize> = next.keys().copied().collect();
        s.sort_unstable();
        s
    };
    for start in starts {
        if visited.contains(&start) {
            continue;
        }
        let mut loop_pts = vec![start];
        let mut cur = start;
        loop {
            visited.insert(cur);
            let nxt = next[&cur];
            if nxt == start {
                break;
            }
            loop_pts.push(nxt);
            cur = nxt;
        }
        let pts: Vec<[f64; 2]> = loop_pts.iter().map(|&v| forest.vertex(v).pos()).collect();
        let n = pts.len();
        let mut corners = Vec::new();
        for i in 0..n {
            let prev = pts[(i + n - 1) % n];
            let here = pts[i];
            let nxt = pts[(i + 1) % n];
            if cross(sub(here, prev), sub(nxt, here)).abs() > 1e-12 {
                corners.push(here);
            }
        }
        for i in 0..corners.len() {
            segments.push((corners[i], corners[(i + 1) % corners.len()]));
        }
    }
    segments
}

/// Hanging-node scan: vertices of the mesh lying strictly inside an edge of
/// some element. Empty iff the triangulation is regular.
pub fn hanging_nodes(forest: &RefinementForest, mesh: &MeshView) -> Vec<(usize, usize)> {
    let mut verts = HashSet::new();
    for &e in &mesh.elements {
        verts.extend(forest.nodes[e].vertex_ids);
    }
    let mut edge_seen = HashSet::new();
    let mut offenders = Vec::new();
    for &e in &mesh.elements {
        for (a, b) in forest.edges(e) {
            if !edge_seen.insert((a, b)) {
                continue;
            }
            let (pa, pb) = (forest.vertices[a].pos(), forest.vertices[b].pos());
            for &v in &verts {
                if v == a || v == b {
                    continue;
                }
                let p = forest.vertices[v].pos();
                let cross = (pb[0] - pa[0]) * (p[1] - pa[1]) - (pb[1] - pa[1]) * (p[0] - pa[0]);
                let dot = (p[0] - pa[0]) * (pb[0] - pa[0]) + (p[1] - pa[1]) * (pb[1] - pa[1]);
                let len2 = (pb[0] - pa[0]).powi(2) + (pb[1] - pa[1]).powi(2);
                if cross.abs() < 1e-12 * len2 && dot > 1e-12 * len2 && dot < len2 * (1.0 - 1e-12) {
                    offenders.push((e, v));
                }
            }
        }
    }
    offenders
}

// ---------------------------------------------------------------------------
// Text format
// ---------------------------------------------------------------------------

/// Serialize: "nv ne", nv lines "x y", ne lines "v0 v1 v2 g" with the
/// refinement edge (v1, v2). Coordinates use the shortest round-tripping
/// decimal form.
pub fn write_mesh(forest: &RefinementForest, mesh: &MeshView) -> String {
    // compact vertex numbering over the vertices actually used
    let mut used: Vec<usize> = Vec::new();
    let mut index: HashMap<usize, usize> = HashMap::new();
    for &e in &mesh.elements {
        for v in forest.nodes[e].vertex_ids {
            index.entry(v).or_insert_with(|| {
                used.push(v);
                used.len() - 1
            });
        }
    }
    let mut out = String::new();
    let _ = writeln!(out, "{} {}", used.len(), mesh.elements.len());
    for &v in &used {
        let vert = forest.vertex(v);
        let _ = writeln!(out, "{} {}", vert.x, vert.y);
    }
    for &e in &mesh.elements {
        let n = forest.node(e);
        let _ = writeln!(
            out,
            "{} {} {} {}",
            index[&n.vertex_ids[0]], index[&n.vertex_ids[1]], index[&n.vertex_ids[2]], n.generation
        );
    }
    out
}

pub fn save_mesh(
    forest: &RefinementForest,
    mesh: &MeshView,
    path: &std::path::Path,
) -> Result<(), MeshError> {
    std::fs::write(path, write_mesh(forest, mesh))?;
    Ok(())
}

/// Parse the text format back into a fresh forest whose roots are the stored
/// elements (keeping their generations).
pub fn read_mesh(text: &str) -> Result<(RefinementForest, MeshView), MeshError> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines.next().ok_or_else(|| MeshError::InvalidFile("empty file".into()))?;
    let mut it = header.split_whitespace();
    let nv: usize = parse_tok(it.next(), "nv")?;
    let ne: usize = parse_tok(it.next(), "ne")?;
    let mut coords = Vec::with_capacity(nv);
    for _ in 0..nv {
        let line = lines.next().ok_or_else(|| MeshError::InvalidFile("missing vertex line".into()))?;
        let mut it = line.split_whitespace();
        let x: f64 = parse_tok(it.next(), "x")?;
        let y: f64 = parse_tok(it.next(), "y")?;
        coords.push([x, y]);
    }
    let mut tris = Vec::with_capacity(ne);
    let mut gens = Vec::with_capacity(ne);
    for _ in 0..ne {
        let line = lines.next().ok_or_else(|| MeshError::InvalidFile("missing element line".into()))?;
        let mut it = line.split_whitespace();
        let v0: usize = parse_tok(it.next(), "v0")?;
        let v1: usize = parse_tok(it.next(), "v1")?;
        let v2: usize = parse_tok(it.next(), "v2")?;
        let g: u32 = parse_tok(it.next(), "g")?;
        for v in [v0, v1, v2] {
            if v >= nv {
                return Err(MeshError::InvalidFile(format!("vertex index {v} out of range")));
            }
        }
        tris.push([v0, v1, v2]);
        gens.push(g);
    }
    let forest = RefinementForest::from_raw_with_generations(&coords, &tris, Some(&gens));
    let view = MeshView::new(&forest, forest.roots.clone());
    Ok((forest, view))
}

pub fn load_mesh(path: &std::path::Path) -> Result<(RefinementForest, MeshView), MeshError> {
    read_mesh(&std::fs::read_to_string(path)?)
}

fn parse_tok<T: std::str::FromStr>(tok: Option<&str>, what: &str) -> Result<T, MeshError> {
    tok.ok_or_else(|| MeshError::InvalidFile(format!("missing {what}")))?
        .parse()
        .map_err(|_| MeshError::InvalidFile(format!("bad {what}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn initial_meshes() {
        let (forest, mesh) = make_initial_mesh(Domain::UnitSquare);
        assert_eq!(mesh.len(), 4);
        assert!(forest.compatibility_check(&mesh));
        assert!(hanging_nodes(&forest, &mesh).is_empty());
        let total: f64 = mesh.elements.iter().map(|&e| forest.area(e)).sum();
        assert!((total - 1.0).abs() < 1e-14);

        let (forest, mesh) = make_initial_mesh(Domain::LShape);
        assert_eq!(mesh.len(), 6);
        assert!(forest.compatibility_check(&mesh));
        assert!(hanging_nodes(&forest, &mesh).is_empty());
        let total: f64 = mesh.elements.iter().map(|&e| forest.area(e)).sum();
        assert!((total - 3.0).abs() < 1e-14);
    }

    #[test]
    fn shape_regularity_matches_unit_right_triangle() {
        // conv{(0,0),(1,0),(0,1)}: diam sqrt(2), area 1/2 -> ratio 2
        let forest = RefinementForest::from_raw(&[[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]], &[[0, 1, 2]]);
        let mesh = MeshView::new(&forest, vec![0]);
        assert!((shape_regularity(&forest, &mesh).unwrap() - 2.0).abs() < 1e-14);

        for domain in [Domain::UnitSquare, Domain::LShape] {
            let (forest, mesh) = make_initial_mesh(domain);
            assert!((shape_regularity(&forest, &mesh).unwrap() - 2.0).abs() < 1e-14);
        }
    }

    #[test]
    fn bisection_halves_area_and_shares_midpoint() {
        let (mut forest, mesh) = make_initial_mesh(Domain::UnitSquare);
        let parent_area = forest.area(0);
        let [a, b] = forest.bisect(0).unwrap();
        assert!((forest.area(a) - 0.5 * parent_area).abs() < 1e-15);
        assert!((forest.area(b) - 0.5 * parent_area).abs() < 1e-15);
        assert!(forest.bisect(0).is_err(), "bisecting a non-leaf must fail");

        // bisecting both triangles of a shared refinement edge adds one vertex
        let forest2 = {
            let coords = [[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]];
            // two triangles sharing the diagonal (0,2) as refinement edge
            let tris = [[1, 0, 2], [3, 2, 0]];
            RefinementForest::from_raw(&coords, &tris)
        };
        let mut forest2 = forest2;
        let nv0 = forest2.vertices.len();
        forest2.bisect(0).unwrap();
        forest2.bisect(1).unwrap();
        assert_eq!(forest2.vertices.len(), nv0 + 1);
        assert_eq!(mesh.len(), 4);
    }

    #[test]
    fn similarity_classes_stay_finite() {
        let (mut forest, _) = make_initial_mesh(Domain::UnitSquare);
        // enumerate descendants of root 0 to depth 10 and collect normalized shapes
        let mut frontier = vec![0usize];
        let mut classes: Vec<[f64; 3]> = Vec::new();
        for _ in 0..10 {
            let mut next = Vec::new();
            for e in frontier {
                for c in forest.ensure_children(e) {
                    next.push(c);
                    let [a, b, cc] = forest.coords(c);
                    let d = |p: [f64; 2], q: [f64; 2]| {
                        ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt()
                    };
                    // side lengths opposite v0,v1,v2 scaled by the longest:
                    // captures shape and refinement-edge placement
                    let sides = [d(b, cc), d(cc, a), d(a, b)];
                    let m = sides[0].max(sides[1]).max(sides[2]);
                    let sig = [sides[0] / m, sides[1] / m, sides[2] / m];
                    if !classes.iter().any(|c| {
                        c.iter().zip(&sig).all(|(x, y)| (x - y).abs() < 1e-9)
                    }) {
                        classes.push(sig);
                    }
                }
            }
            frontier = next;
        }
        assert!(classes.len() <= 4, "found {} similarity classes", classes.len());
    }

    #[test]
    fn refine_contracts() {
        let (mut forest, mesh) = make_initial_mesh(Domain::UnitSquare);
        // empty marking is the identity
        let same = refine(&mut forest, &mesh, &[]).unwrap();
        assert_eq!(same.elements, mesh.elements);

        // marking everything on a compatibly tagged mesh needs no closure
        let all = mesh.elements.clone();
        let refined = refine(&mut forest, &mesh, &all).unwrap();
        assert_eq!(refined.len(), 8);
        assert!(refined.elements.iter().all(|&e| forest.node(e).generation == 1));
        assert!(hanging_nodes(&forest, &refined).is_empty());

        // marking one element also bisects the partner across its refinement edge
        let one = refine(&mut forest, &refined, &[refined.elements[0]]).unwrap();
        assert!(hanging_nodes(&forest, &one).is_empty());
        assert_eq!(one.len(), refined.len() + 2);

        // monotone: every output element is a descendant-or-equal of an input element
        for &e in &one.elements {
            assert!(forest.ancestor_or_self_where(e, |n| refined.contains(n)).is_some());
        }

        // an element whose ref-edge neighbor is tagged differently forces a chain
        let mut edge_map: std::collections::HashMap<(usize, usize), Vec<usize>> =
            std::collections::HashMap::new();
        for &e in &one.elements {
            for edge in forest.edges(e) {
                edge_map.entry(edge).or_default().push(e);
            }
        }
        let mismatched = one.elements.iter().copied().find(|&e| {
            let re = forest.refinement_edge(e);
            edge_map[&re]
                .iter()
                .any(|&n| n != e && forest.refinement_edge(n) != re)
        });
        let e2 = mismatched.expect("mesh should contain a tag-mismatched neighbor pair");
        let re = forest.refinement_edge(e2);
        let neighbor = edge_map[&re].iter().copied().find(|&n| n != e2).unwrap();
        let closed = refine(&mut forest, &one, &[e2]).unwrap();
        assert!(hanging_nodes(&forest, &closed).is_empty());
        assert!(!closed.contains(neighbor), "closure must bisect the neighbor too");
    }

    #[test]
    fn uniform_refine_scales_diameters() {
        let (mut forest, mesh) = make_initial_mesh(Domain::UnitSquare);
        assert_eq!(uniform_refine(&mut forest, &mesh, 0).unwrap().elements, mesh.elements);
        let once = uniform_refine(&mut forest, &mesh, 1).unwrap();
        assert_eq!(once.len(), 16);
        assert!(hanging_nodes(&forest, &once).is_empty());

        let (mut forest, mesh) = make_initial_mesh(Domain::LShape);
        let d0: f64 = mesh.elements.iter().map(|&e| forest.diameter(e)).fold(0.0, f64::max);
        let three = uniform_refine(&mut forest, &mesh, 3).unwrap();
        assert!(hanging_nodes(&forest, &three).is_empty());
        let d3: f64 = three.elements.iter().map(|&e| forest.diameter(e)).fold(0.0, f64::max);
        assert!((d3 - d0 / 8.0).abs() < 1e-12);
        // shape regularity unchanged by uniform refinement of these meshes
        assert!(
            (shape_regularity(&forest, &three).unwrap() - shape_regularity(&forest, &mesh).unwrap())
                .abs()
                < 1e-12
        );
    }

    #[test]
    fn area_generation_invariant() {
        let (mut forest, mesh) = make_initial_mesh(Domain::LShape);
        let two = uniform_refine(&mut forest, &mesh, 2).unwrap();
        for &e in &two.elements {
            let g = forest.node(e).generation;
            let root = forest.ancestor_or_self_where(e, |n| forest.node(n).parent.is_none()).unwrap();
            let expected = forest.area(root) * 0.5f64.powi(g as i32);
            assert!((forest.area(e) - expected).abs() <= 1e-14 * expected);
        }
    }

    #[test]
    fn patches() {
        let (mut forest, mesh) = make_initial_mesh(Domain::UnitSquare);
        assert!(patch(&forest, &mesh, PatchSeed::Element(0), 0).is_err());
        // center vertex (id 4) touches all four triangles
        assert_eq!(patch(&forest, &mesh, PatchSeed::Vertex(4), 1).unwrap().len(), 4);
        // a corner vertex of the criss-cross square touches exactly two
        assert_eq!(patch(&forest, &mesh, PatchSeed::Vertex(0), 1).unwrap().len(), 2);
        // the L-shape convex corner (1,0) has a one-element patch
        let (lf, lmesh) = make_initial_mesh(Domain::LShape);
        assert_eq!(patch(&lf, &lmesh, PatchSeed::Vertex(7), 1).unwrap().len(), 1);

        // omega^2 equals omega^1 applied twice on a random-ish refined mesh
        let fine = uniform_refine(&mut forest, &mesh, 2).unwrap();
        let seed = fine.elements[fine.len() / 2];
        let w1 = patch(&forest, &fine, PatchSeed::Element(seed), 1).unwrap();
        let mut two_pass: std::collections::HashSet<usize> = w1.iter().copied().collect();
        for &e in &w1 {
            two_pass.extend(patch(&forest, &fine, PatchSeed::Element(e), 1).unwrap());
        }
        let mut two_pass: Vec<usize> = two_pass.into_iter().collect();
        two_pass.sort_unstable();
        let w2 = patch(&forest, &fine, PatchSeed::Element(seed), 2).unwrap();
        assert_eq!(w2, two_pass);
        // interior element patch contains the element and all closure neighbors
        assert!(w1.contains(&seed));
    }

    #[test]
    fn mesh_file_roundtrip() {
        let (mut forest, mesh) = make_initial_mesh(Domain::LShape);
        let refined = refine(&mut forest, &mesh, &mesh.elements[..2].to_vec()).unwrap();
        let text = write_mesh(&forest, &refined);
        let (forest2, mesh2) = read_mesh(&text).unwrap();
        assert_eq!(mesh2.len(), refined.len());
        let text2 = write_mesh(&forest2, &mesh2);
        assert_eq!(text, text2, "round trip must be loss-free");
        // generations preserved
        let gens: Vec<u32> = refined.elements.iter().map(|&e| forest.node(e).generation).collect();
        let gens2: Vec<u32> = mesh2.elements.iter().map(|&e| forest2.node(e).generation).collect();
        assert_eq!(gens, gens2);
    }

    #[test]
    fn no_closure_fault_injection_produces_hanging_nodes() {
        let (mut forest, mesh) = make_initial_mesh(Domain::UnitSquare);
        let fine = uniform_refine(&mut forest, &mesh, 1).unwrap();
        let broken = refine_no_closure(&mut forest, &fine, &[fine.elements[0]]).unwrap();
        assert!(!hanging_nodes(&forest, &broken).is_empty());
    }
}
