use custcap::distribution::entrant_capital;
use custcap::egm::StateGrids;
use custcap::equilibrium::{solve_equilibrium, EquilibriumResult, EquilibriumSettings};
use custcap::interp::bracket;
use custcap::panel::{simulate_fold, PanelOptions};
use custcap::productivity::{discretize, ProductivityProcess};
use custcap::Parameters;
use ndarray::{Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const FIRMS: usize = 200_000;
const PERIODS: usize = 500;

fn setup() -> (Parameters, StateGrids, ProductivityProcess, EquilibriumResult) {
    let p = Parameters::default();
    let grids = StateGrids::log_spaced(20, 0.05, 20.0, 20, 0.01, 20.0).unwrap();
    let proc = discretize(p.rho, p.sigma_z, 0.0, 5, 3.0).unwrap();
    let eq = solve_equilibrium(&p, &grids, &proc, &EquilibriumSettings::default()).unwrap();
    assert!(eq.converged);
    (p, grids, proc, eq)
}

fn draw(rng: &mut ChaCha8Rng, probs: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (j, &q) in probs.iter().enumerate() {
        acc += q;
        if u < acc {
            return j;
        }
    }
    probs.len() - 1
}

fn lottery(rng: &mut ChaCha8Rng, nodes: &[f64], x: f64) -> usize {
    let b = bracket(nodes, x);
    b.lo + (rng.random::<f64>() < b.weight) as usize
}

fn tv(a: &Array3<f64>, b: &Array3<f64>) -> f64 {
    0.5 * (a - b).mapv(f64::abs).sum()
}

/// Firms that live on grid nodes and move to a neighbouring node with the
/// linear-interpolation probabilities: the stochastic counterpart of the
/// transition operator, simulated without it.
#[test]
fn stationary_distribution_matches_node_lottery_simulation() {
    let (p, grids, proc, eq) = setup();
    let (nm, nk, nz) = eq.dist.mass.dim();
    let k0 = entrant_capital(&p, &grids);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut hist = Array3::<f64>::zeros((nm, nk, nz));
    for _ in 0..FIRMS {
        let enter = |rng: &mut ChaCha8Rng| {
            (lottery(rng, &grids.m_nodes, p.m_under), lottery(rng, &grids.k_nodes, k0), draw(rng, &proc.entrant_dist))
        };
        let (mut i, mut j, mut s) = enter(&mut rng);
        for _ in 0..PERIODS - 1 {
            if rng.random::<f64>() < p.theta {
                (i, j, s) = enter(&mut rng);
            } else {
                let (mn, kn) = (eq.pol.next_m[[i, j, s]], eq.pol.next_k[[i, j, s]]);
                i = lottery(&mut rng, &grids.m_nodes, mn);
                j = lottery(&mut rng, &grids.k_nodes, kn);
                s = draw(&mut rng, &proc.transition[s]);
            }
        }
        hist[[i, j, s]] += 1.0 / FIRMS as f64;
    }
    let d = tv(&hist, &eq.dist.mass);
    assert!(d < 0.02, "total variation {d}");
}

/// The panel simulator moves firms through continuous states. Its histogram,
/// split linearly onto the grid, agrees with the distribution in the
/// productivity marginal and in mean states; cell by cell the two differ
/// because the transition operator spreads each entry cohort over
/// neighbouring nodes.
#[test]
fn stationary_distribution_agrees_with_panel_simulator() {
    let (p, grids, proc, eq) = setup();
    let shape = eq.dist.mass.dim();
    let opts = PanelOptions {
        n_firms: FIRMS,
        n_years: 1,
        burn_in: PERIODS - 1,
        seed: 11,
        initial: None,
    };
    let ((hist, mean_m, mean_k), _) = simulate_fold(
        &eq.pol,
        &grids,
        &proc,
        &p,
        &opts,
        || (Array3::<f64>::zeros(shape), 0.0, 0.0),
        |(h, sm, sk), r| {
            let bx = bracket(&grids.m_nodes, r.m);
            let by = bracket(&grids.k_nodes, r.k);
            let s = r.z_index as usize;
            h[[bx.lo, by.lo, s]] += (1.0 - bx.weight) * (1.0 - by.weight);
            h[[bx.lo + 1, by.lo, s]] += bx.weight * (1.0 - by.weight);
            h[[bx.lo, by.lo + 1, s]] += (1.0 - bx.weight) * by.weight;
            h[[bx.lo + 1, by.lo + 1, s]] += bx.weight * by.weight;
            *sm += r.m;
            *sk += r.k;
        },
        |a, b| (a.0 + b.0, a.1 + b.1, a.2 + b.2),
    )
    .unwrap();
    let n = FIRMS as f64;
    let hist = hist / n;
    let d = &eq.dist.mass;
    let zh = hist.sum_axis(Axis(0)).sum_axis(Axis(0));
    let zd = d.sum_axis(Axis(0)).sum_axis(Axis(0));
    let z_tv = 0.5 * (&zh - &zd).mapv(f64::abs).sum();
    assert!(z_tv < 0.01, "productivity marginal {z_tv}");
    let dm: f64 = d.indexed_iter().map(|((i, _, _), w)| w * grids.m_nodes[i]).sum();
    let dk: f64 = d.indexed_iter().map(|((_, j, _), w)| w * grids.k_nodes[j]).sum();
    assert!((mean_m / n / dm - 1.0).abs() < 0.02, "mean m {} vs {dm}", mean_m / n);
    assert!((mean_k / n / dk - 1.0).abs() < 0.02, "mean k {} vs {dk}", mean_k / n);
    eprintln!("cell total variation {}", tv(&hist, d));
}
