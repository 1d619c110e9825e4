//! Assembly timing probe at growing sizes (tuning aid).

use fraclap::kernel::{assemble_stiffness, FracParams, QuadConfig};
use fraclap::mesh::{make_initial_mesh, uniform_refine, Domain};
use fraclap::space::{build_space, Family};

fn main() {
    let (mut forest, mesh) = make_initial_mesh(Domain::LShape);
    let params = FracParams::new(0.5).unwrap();
    let quad = QuadConfig::default();
    for steps in [2, 3, 4] {
        let fine = uniform_refine(&mut forest, &mesh, steps).unwrap();
        let space = build_space(&forest, &fine, Family::P1ZeroBc).unwrap();
        let t0 = std::time::Instant::now();
        let a = assemble_stiffness(&forest, &space, &params, &quad).unwrap();
        println!(
            "steps={steps}: elements={} dofs={} assembled in {:?}, maxabs {:.3e}",
            fine.len(),
            space.dim(),
            t0.elapsed(),
            a.max_abs()
        );
        let t0 = std::time::Instant::now();
        let pivots = a.cholesky_pivots();
        println!("  SPD: {:?} ({:?})", pivots.map(|p| p.len()).is_ok(), t0.elapsed());
    }
}
