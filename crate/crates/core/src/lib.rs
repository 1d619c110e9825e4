//! Finite-element toolkit for the integral fractional Laplacian on
//! adaptively refined 2D newest-vertex-bisection meshes.
//!
//! The crate provides the NVB refinement forest and finest-common-coarsening
//! mesh hierarchies, piecewise-constant/linear spaces with adapted
//! Scott-Zhang operators, dense assembly of the singular bilinear form, the
//! local multilevel diagonal preconditioner, and the adaptive
//! SOLVE-ESTIMATE-MARK-REFINE driver used by the experiment CLI.

pub mod adaptive;
pub mod geometry;
pub mod hierarchy;
pub mod kernel;
pub mod linalg;
pub mod mesh;
pub mod oracle;
pub mod precond;
pub mod quadrature;
pub mod solver;
pub mod space;
pub mod suite;

pub use hierarchy::{Hierarchy, HierarchyKind};
pub use mesh::{Domain, MeshView, RefinementForest};
