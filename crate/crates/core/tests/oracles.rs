mod common;

use common::VfiOracle;
use custcap::egm::{solve_firm_problem, SolverOptions, StateGrids};
use custcap::productivity::discretize;
use custcap::{AggregateGuess, Parameters};

const M_RANGE: (f64, f64) = (0.6, 3.0);
const K_RANGE: (f64, f64) = (0.2, 2.5);

fn worst_next_state_error(n: usize, oracle: &VfiOracle) -> (f64, f64) {
    let grids = StateGrids::log_spaced(n, M_RANGE.0, M_RANGE.1, n, K_RANGE.0, K_RANGE.1).unwrap();
    let sol = solve_firm_problem(&grids, &oracle.proc, oracle.agg, &oracle.p, SolverOptions::default()).unwrap();
    assert_eq!(sol.clipped_fraction(), 0.0);
    let step = (n - 1) / 7;
    let mut worst = (0.0f64, 0.0f64);
    let coarse = StateGrids::log_spaced(8, M_RANGE.0, M_RANGE.1, 8, K_RANGE.0, K_RANGE.1).unwrap();
    for i in 0..8 {
        for j in 0..8 {
            for s in 0..oracle.proc.z_nodes.len() {
                let c = oracle.maximize(coarse.m_nodes[i], coarse.k_nodes[j], s);
                let idx = [i * step, j * step, s];
                worst.0 = worst.0.max((sol.next_m[idx] / c.next_m - 1.0).abs());
                worst.1 = worst.1.max((sol.next_k[idx] / c.next_k - 1.0).abs());
            }
        }
    }
    worst
}

#[test]
fn endogenous_grid_policies_match_value_function_iteration() {
    let p = Parameters::default();
    let proc = discretize(p.rho, p.sigma_z, 0.0, 3, 3.0).unwrap();
    let agg = AggregateGuess::new(0.74, 0.64, 1.3).unwrap();
    let mut oracle = VfiOracle::new(p, agg, proc, M_RANGE, K_RANGE, 14, 60);
    let t = std::time::Instant::now();
    let change = oracle.solve(60, 150, 1e-9);
    eprintln!("vfi change {change:e} in {:?}", t.elapsed());
    assert!(change < 1e-9, "{change}");
    let coarse = worst_next_state_error(8, &oracle);
    let fine = worst_next_state_error(50, &oracle);
    eprintln!("coarse {coarse:?} fine {fine:?}");
    assert!(coarse.0 < 0.02 && coarse.1 < 0.02);
    assert!(fine.0 < 0.005 && fine.1 < 0.005);
}
