//! Prints oracle-vs-implementation drift for the p0 edge pair at several
//! subdivision depths (tuning aid, not shipped functionality).

use fraclap::kernel::{pair_interaction, FracParams, PairBasis, QuadConfig};
use fraclap::mesh::RefinementForest;
use fraclap::oracle::{pair_block_oracle, OracleBasis};

fn main() {
    let forest = RefinementForest::from_raw(
        &[[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]],
        &[[1, 0, 2], [3, 2, 0]],
    );
    for s in [0.25, 0.4] {
        let params = FracParams::new(s).unwrap();
        let block = pair_interaction(&forest, 0, 1, PairBasis::P0, &params, &QuadConfig::default());
        let hi = pair_interaction(
            &forest, 0, 1, PairBasis::P0, &params,
            &QuadConfig { gauss_order: 10, ..QuadConfig::default() },
        );
        println!("s={s}: impl[0,0]={:.10e}  impl(hi)={:.10e}  rel drift {:.2e}",
            block.get(0, 0), hi.get(0, 0), (block.get(0,0)-hi.get(0,0)).abs()/hi.get(0,0).abs());
        for depth in [8, 9, 10, 11, 12] {
            let t0 = std::time::Instant::now();
            let (_, ov) = pair_block_oracle(&forest.coords(0), &forest.coords(1), OracleBasis::P0, s, depth);
            println!("  depth {depth}: oracle={:.10e}  rel err vs impl {:.2e}  ({:?})",
                ov[0], (ov[0] - hi.get(0,0)).abs() / hi.get(0,0).abs(), t0.elapsed());
        }
    }
}
