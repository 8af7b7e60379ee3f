//! Stationary distribution over the `(m, k, z)` grid by non-stochastic
//! mass splitting.

use std::path::Path;

use ndarray::Array3;
use rayon::prelude::*;

use crate::egm::{PolicySolution, StateGrids};
use crate::error::{Error, Result};
use crate::interp::{bracket, Bracket, Clamp};
use crate::model::{labor_requirement, Parameters};
use crate::productivity::ProductivityProcess;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistOptions {
    /// Sup-norm tolerance on the change in node mass.
    pub tol: f64,
    pub max_iter: usize,
    /// Escaped mass above this level is an error; `f64::INFINITY` only
    /// records it.
    pub escape_threshold: f64,
}

impl Default for DistOptions {
    fn default() -> Self {
        Self {
            tol: 1e-11,
            max_iter: 20_000,
            escape_threshold: 1e-6,
        }
    }
}

/// Per-period mass whose next state falls outside the grid, by side.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct EscapeReport {
    pub m_low: f64,
    pub m_high: f64,
    pub k_low: f64,
    pub k_high: f64,
}

impl EscapeReport {
    pub fn total(&self) -> f64 {
        self.m_low + self.m_high + self.k_low + self.k_high
    }

    pub fn check(&self, threshold: f64) -> Result<()> {
        if self.total() > threshold {
            return Err(Error::MassEscape {
                mass: self.total(),
                m_low: self.m_low,
                m_high: self.m_high,
                k_low: self.k_low,
                k_high: self.k_high,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct StationaryDistribution {
    /// Probability mass at each node, indexed `[m, k, z]`.
    pub mass: Array3<f64>,
    pub total_customers: f64,
    pub labor_prod: f64,
    pub labor_ads: f64,
    pub labor_inv: f64,
    pub aggregate_ads: f64,
    pub escape: EscapeReport,
    pub iterations: usize,
}

impl StationaryDistribution {
    pub fn total_labor(&self) -> f64 {
        self.labor_prod + self.labor_ads + self.labor_inv
    }

    /// Marginal distribution over productivity nodes.
    pub fn z_marginal(&self) -> Vec<f64> {
        let (_, _, nz) = self.mass.dim();
        (0..nz)
            .map(|s| self.mass.index_axis(ndarray::Axis(2), s).sum())
            .collect()
    }

    pub fn write_csv(&self, path: &Path, grids: &StateGrids, proc: &ProductivityProcess) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["im", "ik", "iz", "m", "k", "z", "mass"])?;
        let (nm, nk, nz) = self.mass.dim();
        for s in 0..nz {
            for j in 0..nk {
                for i in 0..nm {
                    w.write_record(&[
                        i.to_string(),
                        j.to_string(),
                        s.to_string(),
                        grids.m_nodes[i].to_string(),
                        grids.k_nodes[j].to_string(),
                        proc.z_nodes[s].to_string(),
                        self.mass[[i, j, s]].to_string(),
                    ])?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Entrant capital endowment: the configured value or the capital grid
/// minimum.
pub fn entrant_capital(p: &Parameters, grids: &StateGrids) -> f64 {
    p.k0.unwrap_or(grids.k_nodes[0])
}

/// Transition of one period: survivors move to their bracketed next state and
/// mix over productivity; exiting mass is reborn at the entrant endowment.
struct Mover {
    nm: usize,
    nk: usize,
    nz: usize,
    /// Per node: m bracket, k bracket.
    targets: Vec<(Bracket, Bracket)>,
    entry: (Bracket, Bracket),
    survive: f64,
    theta: f64,
}

impl Mover {
    fn new(pol: &PolicySolution, grids: &StateGrids, p: &Parameters) -> Self {
        let (nm, nk, nz) = pol.shape();
        let mut targets = Vec::with_capacity(nm * nk * nz);
        for s in 0..nz {
            for j in 0..nk {
                for i in 0..nm {
                    targets.push((
                        bracket(&grids.m_nodes, pol.next_m[[i, j, s]]),
                        bracket(&grids.k_nodes, pol.next_k[[i, j, s]]),
                    ));
                }
            }
        }
        let entry = (
            bracket(&grids.m_nodes, p.m_under),
            bracket(&grids.k_nodes, entrant_capital(p, grids)),
        );
        Self {
            nm,
            nk,
            nz,
            targets,
            entry,
            survive: 1.0 - p.theta,
            theta: p.theta,
        }
    }

    #[inline]
    fn flat(&self, i: usize, j: usize, s: usize) -> usize {
        i + self.nm * (j + self.nk * s)
    }

    fn split(plane: &mut [f64], nm: usize, bx: &Bracket, by: &Bracket, w: f64) {
        let cells = [
            (bx.lo, by.lo, (1.0 - bx.weight) * (1.0 - by.weight)),
            (bx.lo + 1, by.lo, bx.weight * (1.0 - by.weight)),
            (bx.lo, by.lo + 1, (1.0 - bx.weight) * by.weight),
            (bx.lo + 1, by.lo + 1, bx.weight * by.weight),
        ];
        for (i, j, f) in cells {
            if f != 0.0 {
                plane[i + nm * j] += w * f;
            }
        }
    }

    fn step(&self, mass: &[f64], proc: &ProductivityProcess) -> Vec<f64> {
        let plane = self.nm * self.nk;
        // survivors' (m', k') planes by source productivity
        let pushed: Vec<Vec<f64>> = (0..self.nz)
            .into_par_iter()
            .map(|s| {
                let mut out = vec![0.0; plane];
                for j in 0..self.nk {
                    for i in 0..self.nm {
                        let f = self.flat(i, j, s);
                        let w = mass[f];
                        if w != 0.0 {
                            let (bx, by) = &self.targets[f];
                            Self::split(&mut out, self.nm, bx, by, self.survive * w);
                        }
                    }
                }
                out
            })
            .collect();
        let mut entry_plane = vec![0.0; plane];
        Self::split(&mut entry_plane, self.nm, &self.entry.0, &self.entry.1, 1.0);
        let slices: Vec<Vec<f64>> = (0..self.nz)
            .into_par_iter()
            .map(|sp| {
                let mut out = vec![0.0; plane];
                for s in 0..self.nz {
                    let t = proc.transition[s][sp];
                    if t != 0.0 {
                        for (o, v) in out.iter_mut().zip(&pushed[s]) {
                            *o += t * v;
                        }
                    }
                }
                let e = self.theta * proc.entrant_dist[sp];
                if e != 0.0 {
                    for (o, v) in out.iter_mut().zip(&entry_plane) {
                        *o += e * v;
                    }
                }
                out
            })
            .collect();
        slices.concat()
    }
}

/// Stationary distribution implied by converged policies, entry and exit.
pub fn stationary_distribution(
    pol: &PolicySolution,
    grids: &StateGrids,
    proc: &ProductivityProcess,
    p: &Parameters,
    opts: DistOptions,
) -> Result<StationaryDistribution> {
    stationary_distribution_from(pol, grids, proc, p, opts, None)
}

/// As [`stationary_distribution`], optionally starting from `initial`.
pub fn stationary_distribution_from(
    pol: &PolicySolution,
    grids: &StateGrids,
    proc: &ProductivityProcess,
    p: &Parameters,
    opts: DistOptions,
    initial: Option<&Array3<f64>>,
) -> Result<StationaryDistribution> {
    let (nm, nk, nz) = pol.shape();
    if grids.n_m() != nm || grids.n_k() != nk || proc.len() != nz {
        return Err(Error::Configuration("policy arrays do not match the grids".into()));
    }
    let mover = Mover::new(pol, grids, p);
    let mut mass: Vec<f64> = match initial {
        Some(init) if init.dim() == (nm, nk, nz) => {
            let mut v = vec![0.0; nm * nk * nz];
            for ((i, j, s), x) in init.indexed_iter() {
                v[mover.flat(i, j, s)] = *x;
            }
            let total: f64 = v.iter().sum();
            if !(total > 0.0) {
                return Err(Error::Configuration("initial distribution has no mass".into()));
            }
            v.iter_mut().for_each(|x| *x /= total);
            v
        }
        Some(_) => return Err(Error::Configuration("initial distribution does not match the grids".into())),
        None => {
            // all mass at the entrant point
            let mut v = vec![0.0; nm * nk * nz];
            let mut plane = vec![0.0; nm * nk];
            Mover::split(&mut plane, nm, &mover.entry.0, &mover.entry.1, 1.0);
            for s in 0..nz {
                for (q, x) in plane.iter().enumerate() {
                    v[q + nm * nk * s] = x * proc.entrant_dist[s];
                }
            }
            v
        }
    };

    let mut iterations = 0;
    let mut diff = f64::INFINITY;
    while iterations < opts.max_iter {
        let next = mover.step(&mass, proc);
        diff = next.iter().zip(&mass).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        mass = next;
        iterations += 1;
        if diff < opts.tol {
            break;
        }
    }
    if !(diff < opts.tol) {
        return Err(Error::NonConvergence {
            what: "stationary distribution",
            iterations,
            residual: diff,
            worst: None,
        });
    }
    let total: f64 = mass.iter().sum();
    mass.iter_mut().for_each(|x| *x /= total);

    let mut escape = EscapeReport::default();
    let mut arr = Array3::zeros((nm, nk, nz));
    let (mut cust, mut lp, mut la, mut lk, mut ads) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for s in 0..nz {
        for j in 0..nk {
            for i in 0..nm {
                let f = mover.flat(i, j, s);
                let w = mass[f];
                arr[[i, j, s]] = w;
                if w == 0.0 {
                    continue;
                }
                let idx = [i, j, s];
                cust += w * grids.m_nodes[i];
                lp += w * pol.statics.labor_prod[idx];
                la += w * labor_requirement(pol.pol_a[idx], p.alpha_a);
                lk += w * labor_requirement(pol.pol_i[idx], p.alpha_k);
                ads += w * pol.pol_a[idx];
                let (bx, by) = &mover.targets[f];
                let out = w * mover.survive;
                match bx.clamped {
                    Clamp::Below => escape.m_low += out,
                    Clamp::Above => escape.m_high += out,
                    Clamp::None => {}
                }
                match by.clamped {
                    Clamp::Below => escape.k_low += out,
                    Clamp::Above => escape.k_high += out,
                    Clamp::None => {}
                }
            }
        }
    }
    // entrants placed off the grid escape too
    let (ex, ey) = &mover.entry;
    match ex.clamped {
        Clamp::Below => escape.m_low += p.theta,
        Clamp::Above => escape.m_high += p.theta,
        Clamp::None => {}
    }
    match ey.clamped {
        Clamp::Below => escape.k_low += p.theta,
        Clamp::Above => escape.k_high += p.theta,
        Clamp::None => {}
    }
    escape.check(opts.escape_threshold)?;
    Ok(StationaryDistribution {
        mass: arr,
        total_customers: cust,
        labor_prod: lp,
        labor_ads: la,
        labor_inv: lk,
        aggregate_ads: ads,
        escape,
        iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::egm::{solve_firm_problem, SolverOptions};
    use crate::interp::bracket;
    use crate::model::AggregateGuess;
    use crate::productivity::discretize;
    use proptest::prelude::*;

    fn setup(p: &Parameters, n: usize) -> (StateGrids, ProductivityProcess, PolicySolution) {
        let grids = StateGrids::log_spaced(n, 0.05, 20.0, n, 0.01, 20.0).unwrap();
        let proc = discretize(p.rho, p.sigma_z, 0.0, 3, 3.0).unwrap();
        let agg = AggregateGuess::new(0.74, 0.64, 1.3).unwrap();
        let pol = solve_firm_problem(&grids, &proc, agg, p, SolverOptions::default()).unwrap();
        (grids, proc, pol)
    }

    #[test]
    fn full_replacement_leaves_only_entrants() {
        let p = Parameters {
            theta: 1.0,
            ..Parameters::default()
        };
        let (grids, proc, pol) = setup(&p, 10);
        let d = stationary_distribution(&pol, &grids, &proc, &p, DistOptions::default()).unwrap();
        let bx = bracket(&grids.m_nodes, p.m_under);
        let by = bracket(&grids.k_nodes, entrant_capital(&p, &grids));
        for s in 0..3 {
            let e = proc.entrant_dist[s];
            let expect = [
                ([bx.lo, by.lo], (1.0 - bx.weight) * (1.0 - by.weight)),
                ([bx.lo + 1, by.lo], bx.weight * (1.0 - by.weight)),
                ([bx.lo, by.lo + 1], (1.0 - bx.weight) * by.weight),
                ([bx.lo + 1, by.lo + 1], bx.weight * by.weight),
            ];
            let mut covered = 0.0;
            for ([i, j], w) in expect {
                assert!((d.mass[[i, j, s]] - e * w).abs() < 1e-14);
                covered += d.mass[[i, j, s]];
            }
            assert!((covered - e).abs() < 1e-14);
        }
    }

    #[test]
    fn full_separation_without_advertising_sits_at_the_bottom() {
        let p = Parameters {
            beta: 0.0,
            delta_m: 1.0,
            m_under: 0.05,
            ..Parameters::default()
        };
        let (grids, proc, pol) = setup(&p, 10);
        assert!(pol.pol_a.iter().all(|&a| a == 0.0));
        // every survivor's next customer base is 0, below the grid
        let opts = DistOptions {
            escape_threshold: f64::INFINITY,
            ..DistOptions::default()
        };
        let d = stationary_distribution(&pol, &grids, &proc, &p, opts).unwrap();
        let bottom: f64 = d.mass.index_axis(ndarray::Axis(0), 0).sum();
        assert!((bottom - 1.0).abs() < 1e-12);
        assert!((d.total_customers - 0.05).abs() < 1e-12);
    }

    #[test]
    fn start_does_not_matter() {
        let p = Parameters::default();
        let (grids, proc, pol) = setup(&p, 12);
        let a = stationary_distribution(&pol, &grids, &proc, &p, DistOptions::default()).unwrap();
        let uniform = Array3::from_elem(pol.shape(), 1.0);
        let b = stationary_distribution_from(&pol, &grids, &proc, &p, DistOptions::default(), Some(&uniform)).unwrap();
        for (x, y) in a.mass.iter().zip(&b.mass) {
            assert!((x - y).abs() < 1e-9);
        }
        assert!((a.mass.sum() - 1.0).abs() < 1e-12);
        let z = a.z_marginal();
        let chain = crate::productivity::stationary_of_chain(&proc, p.theta, &proc.entrant_dist).unwrap();
        for (x, y) in z.iter().zip(&chain) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn aggregates_are_mass_weighted_sums() {
        let p = Parameters::default();
        let (grids, proc, pol) = setup(&p, 10);
        let d = stationary_distribution(&pol, &grids, &proc, &p, DistOptions::default()).unwrap();
        let cust: f64 = d.mass.indexed_iter().map(|((i, _, _), w)| w * grids.m_nodes[i]).sum();
        let ads: f64 = d.mass.iter().zip(&pol.pol_a).map(|(w, a)| w * a).sum();
        assert!((cust - d.total_customers).abs() < 1e-12);
        assert!((ads - d.aggregate_ads).abs() < 1e-12);
        assert!((d.total_labor() - d.labor_prod - d.labor_ads - d.labor_inv).abs() < 1e-12);
    }

    #[test]
    fn mismatched_initial_rejected() {
        let p = Parameters::default();
        let (grids, proc, pol) = setup(&p, 8);
        let bad = Array3::from_elem((2, 2, 2), 1.0);
        assert!(stationary_distribution_from(&pol, &grids, &proc, &p, DistOptions::default(), Some(&bad)).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn arbitrary_transitions_keep_a_probability_measure(seed in any::<u64>(), theta in 0.02f64..1.0) {
            use rand::{Rng, SeedableRng};
            let p = Parameters { theta, ..Parameters::default() };
            let (grids, proc, mut pol) = setup(&Parameters::default(), 8);
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            pol.next_m.mapv_inplace(|_| rng.random_range(0.01..25.0));
            pol.next_k.mapv_inplace(|_| rng.random_range(0.005..25.0));
            let opts = DistOptions { escape_threshold: f64::INFINITY, ..DistOptions::default() };
            let d = stationary_distribution(&pol, &grids, &proc, &p, opts).unwrap();
            prop_assert!(d.mass.iter().all(|&x| x >= 0.0));
            prop_assert!((d.mass.sum() - 1.0).abs() < 1e-12);
        }
    }
}
