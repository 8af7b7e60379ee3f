//! Stationary equilibrium: aggregates `(C, W, P_m)` at which the firm
//! solution and its stationary distribution clear labor, goods and customer
//! markets with the ideal price index as numeraire.

use argmin::core::{CostFunction, Executor};
use argmin::solver::neldermead::NelderMead;
use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::distribution::{stationary_distribution_from, DistOptions, StationaryDistribution};
use crate::egm::{FirmSolver, PolicySolution, SolverOptions, StateGrids};
use crate::error::{Error, Result};
use crate::model::{derived_constants, labor_requirement, AggregateGuess, Parameters};
use crate::productivity::ProductivityProcess;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EquilibriumSettings {
    /// Every residual must fall below this in absolute value.
    pub outer_tol: f64,
    /// Step taken toward each component's clearing value, in logs.
    pub damping: f64,
    pub max_outer: usize,
    pub firm: SolverOptions,
    pub dist: DistOptions,
    /// Run the derivative-free fallback when damped iteration stalls.
    pub fallback: bool,
    pub fallback_starts: usize,
    /// Number of past steps mixed into each update; 0 gives plain damping.
    pub anderson_depth: usize,
}

impl Default for EquilibriumSettings {
    fn default() -> Self {
        Self {
            outer_tol: 1e-5,
            damping: 0.3,
            max_outer: 300,
            firm: SolverOptions::default(),
            dist: DistOptions::default(),
            fallback: true,
            fallback_starts: 4,
            anderson_depth: 3,
        }
    }
}

/// Market-clearing gaps; all are absolute.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct Residuals {
    /// Total labor demand minus the unit endowment.
    pub labor: f64,
    /// Household aggregator implied by the distribution minus `C`.
    pub goods: f64,
    /// `P_m` minus its free-customer clearing value.
    pub customer: f64,
    /// Ideal price index minus one.
    pub price_index: f64,
}

impl Residuals {
    pub fn max_abs(&self) -> f64 {
        self.labor
            .abs()
            .max(self.goods.abs())
            .max(self.customer.abs())
            .max(self.price_index.abs())
    }

    fn norm2(&self) -> f64 {
        self.labor.powi(2) + self.goods.powi(2) + self.customer.powi(2) + self.price_index.powi(2)
    }
}

#[derive(Debug, Clone)]
pub struct EquilibriumResult {
    pub agg: AggregateGuess,
    pub pol: PolicySolution,
    pub dist: StationaryDistribution,
    pub residuals: Residuals,
    pub converged: bool,
    pub outer_iterations: usize,
    /// Max absolute residual after each outer iteration.
    pub history: Vec<f64>,
    /// Ideal price index and household aggregator at `agg`.
    pub price_index: f64,
    pub c_implied: f64,
}

#[derive(Serialize)]
struct Summary<'a> {
    converged: bool,
    outer_iterations: usize,
    inner_iterations: usize,
    distribution_iterations: usize,
    aggregates: &'a AggregateGuess,
    residuals: &'a Residuals,
    total_customers: f64,
    labor_production: f64,
    labor_advertising: f64,
    labor_investment: f64,
    aggregate_advertising: f64,
    escaped_mass: f64,
    clipped_node_fraction: f64,
}

impl EquilibriumResult {
    /// Structured text record of aggregates, residuals and iteration counts.
    pub fn summary_toml(&self) -> String {
        let s = Summary {
            converged: self.converged,
            outer_iterations: self.outer_iterations,
            inner_iterations: self.pol.iterations,
            distribution_iterations: self.dist.iterations,
            aggregates: &self.agg,
            residuals: &self.residuals,
            total_customers: self.dist.total_customers,
            labor_production: self.dist.labor_prod,
            labor_advertising: self.dist.labor_ads,
            labor_investment: self.dist.labor_inv,
            aggregate_advertising: self.dist.aggregate_ads,
            escaped_mass: self.dist.escape.total(),
            clipped_node_fraction: self.pol.clipped_fraction(),
        };
        toml::to_string(&s).expect("summary serializes")
    }
}

/// Measure of customers freed each period by exit and separation.
pub fn free_customers(p: &Parameters) -> f64 {
    p.theta * (1.0 - p.m_under) + (1.0 - p.theta) * p.delta_m
}

/// Conversion rate that clears the free-customer market given aggregate
/// advertising.
pub fn clearing_p_m(aggregate_ads: f64, p: &Parameters) -> Result<f64> {
    let free = free_customers(p);
    if !(free > 0.0) {
        return Err(Error::Configuration(format!(
            "no free customers (theta={}, m_under={}, delta_m={}): the customer market cannot clear",
            p.theta, p.m_under, p.delta_m
        )));
    }
    Ok((1.0 - p.theta) / free * aggregate_ads)
}

/// Ideal price index `(sum mass M^(1+phi) P^(1-sigma))^(1/(1-sigma))` and the
/// household aggregator `(sum mass M^(1+phi/sigma) c^((sigma-1)/sigma))^(sigma/(sigma-1))`.
pub fn price_index_and_aggregator(
    pol: &PolicySolution,
    dist: &StationaryDistribution,
    grids: &StateGrids,
    p: &Parameters,
) -> (f64, f64) {
    aggregator_at(pol, dist, grids, p.sigma, p.phi, p.phi)
}

/// Aggregator sums where the demand system is evaluated at `phi_demand`
/// while the household weights use `phi_weights`.
pub(crate) fn aggregator_at(
    pol: &PolicySolution,
    dist: &StationaryDistribution,
    grids: &StateGrids,
    sigma: f64,
    phi_demand: f64,
    phi_weights: f64,
) -> (f64, f64) {
    let mut idx = 0.0;
    let mut basket = 0.0;
    for ((i, j, s), &w) in dist.mass.indexed_iter() {
        if w == 0.0 {
            continue;
        }
        let m = grids.m_nodes[i];
        let node = [i, j, s];
        idx += w * m.powf(1.0 + phi_demand) * pol.statics.price[node].powf(1.0 - sigma);
        basket += w * m.powf(1.0 + phi_weights / sigma) * pol.statics.demand_per_customer[node].powf((sigma - 1.0) / sigma);
    }
    (idx.powf(1.0 / (1.0 - sigma)), basket.powf(sigma / (sigma - 1.0)))
}

struct Evaluation {
    pol: PolicySolution,
    dist: StationaryDistribution,
    residuals: Residuals,
    price_index: f64,
    c_implied: f64,
    p_m_clear: f64,
}

fn evaluate(
    agg: AggregateGuess,
    p: &Parameters,
    grids: &StateGrids,
    proc: &ProductivityProcess,
    settings: &EquilibriumSettings,
    warm: Option<(&PolicySolution, &StationaryDistribution)>,
) -> Result<Evaluation> {
    let wrap = |e: Error| Error::InnerSolve {
        c_agg: agg.c_agg,
        wage: agg.wage,
        p_m: agg.p_m,
        source: Box::new(e),
    };
    let mut solver = FirmSolver::new(grids, proc, agg, p, settings.firm).map_err(wrap)?;
    if let Some((pol, _)) = warm {
        solver = solver.with_marginal_values(&pol.v_m, &pol.v_k).map_err(wrap)?;
    }
    let pol = solver.solve().map_err(wrap)?;
    let dist_opts = DistOptions {
        escape_threshold: f64::INFINITY,
        ..settings.dist
    };
    let dist = stationary_distribution_from(&pol, grids, proc, p, dist_opts, warm.map(|w| &w.1.mass)).map_err(wrap)?;
    let (price_index, c_implied) = price_index_and_aggregator(&pol, &dist, grids, p);
    let p_m_clear = clearing_p_m(dist.aggregate_ads, p)?;
    let residuals = Residuals {
        labor: dist.total_labor() - 1.0,
        goods: c_implied - agg.c_agg,
        customer: agg.p_m - p_m_clear,
        price_index: price_index - 1.0,
    };
    Ok(Evaluation {
        pol,
        dist,
        residuals,
        price_index,
        c_implied,
        p_m_clear,
    })
}

/// Clearing gaps at a candidate aggregate vector.
pub fn residuals(
    agg: AggregateGuess,
    p: &Parameters,
    grids: &StateGrids,
    proc: &ProductivityProcess,
    settings: &EquilibriumSettings,
) -> Result<Residuals> {
    clearing_p_m(0.0, p)?;
    Ok(evaluate(agg, p, grids, proc, settings, None)?.residuals)
}

/// Starting aggregates for a cold solve.
pub fn default_guess() -> AggregateGuess {
    AggregateGuess {
        c_agg: 1.0,
        wage: 1.0,
        p_m: 1.0,
    }
}

fn into_result(ev: Evaluation, agg: AggregateGuess, converged: bool, iters: usize, history: Vec<f64>) -> EquilibriumResult {
    EquilibriumResult {
        agg,
        pol: ev.pol,
        dist: ev.dist,
        residuals: ev.residuals,
        converged,
        outer_iterations: iters,
        history,
        price_index: ev.price_index,
        c_implied: ev.c_implied,
    }
}

/// Damped iteration on log aggregates, falling back to a multistart simplex
/// search if it stalls.
pub fn solve_equilibrium(
    p: &Parameters,
    grids: &StateGrids,
    proc: &ProductivityProcess,
    settings: &EquilibriumSettings,
) -> Result<EquilibriumResult> {
    solve_equilibrium_from(p, grids, proc, settings, default_guess(), None)
}

/// As [`solve_equilibrium`] from a given guess, optionally warm-starting the
/// inner solves from a previous equilibrium on the same grid.
pub fn solve_equilibrium_from(
    p: &Parameters,
    grids: &StateGrids,
    proc: &ProductivityProcess,
    settings: &EquilibriumSettings,
    guess: AggregateGuess,
    warm: Option<&EquilibriumResult>,
) -> Result<EquilibriumResult> {
    p.validate()?;
    guess.validate()?;
    clearing_p_m(0.0, p)?;
    if !(settings.damping > 0.0 && settings.damping <= 1.0) {
        return Err(Error::invalid("damping", "must lie in (0, 1]"));
    }
    let dc = derived_constants(p);
    let shape_ok = |e: &&EquilibriumResult| e.pol.shape() == (grids.n_m(), grids.n_k(), proc.len());
    let warm = warm.filter(shape_ok);

    let mut agg = guess;
    let mut ev = evaluate(agg, p, grids, proc, settings, warm.map(|w| (&w.pol, &w.dist)))?;
    let mut history = vec![ev.residuals.max_abs()];
    let mut best = (ev.residuals.norm2(), agg);
    let mut iters = 0;
    let mut stalled = false;
    let mut anderson = Anderson::new(settings.anderson_depth, settings.damping);
    while ev.residuals.max_abs() >= settings.outer_tol {
        if iters >= settings.max_outer {
            stalled = true;
            break;
        }
        // Policies and labor depend on (C, W) only through
        // S = W^-Lambda C^(Lambda/sigma); production labor is proportional
        // to S and the price index scales as C^(1/sigma) S^(-gamma_l/sigma).
        let ls = -ev.dist.total_labor().ln();
        let lc = -p.sigma * ev.price_index.ln() + p.gamma_l * ls;
        let lw = (dc.lambda_big / p.sigma * lc - ls) / dc.lambda_big;
        let lp = (1.0 - p.alpha_a) * (ev.p_m_clear / agg.p_m).ln();
        let x = [agg.c_agg.ln(), agg.wage.ln(), agg.p_m.ln()];
        let mut step = anderson.push(x, [lc, lw, lp]);
        // backtrack on steps that make the residuals much worse
        let mut tries = 0;
        let (next, nev) = loop {
            let next = AggregateGuess {
                c_agg: (x[0] + step[0]).exp(),
                wage: (x[1] + step[1]).exp(),
                p_m: (x[2] + step[2]).exp(),
            };
            let nev = match next.validate() {
                Ok(()) => evaluate(next, p, grids, proc, settings, Some((&ev.pol, &ev.dist))).ok(),
                Err(_) => None,
            };
            let worse = nev.as_ref().map_or(true, |n| n.residuals.norm2() > 2.0 * ev.residuals.norm2());
            if !worse || tries == 4 {
                break (next, nev);
            }
            if tries == 0 {
                anderson.reset();
                step = [settings.damping * lc, settings.damping * lw, settings.damping * lp];
            }
            step.iter_mut().for_each(|v| *v *= 0.5);
            tries += 1;
        };
        let Some(nev) = nev else {
            stalled = true;
            break;
        };
        agg = next;
        ev = nev;
        iters += 1;
        history.push(ev.residuals.max_abs());
        if ev.residuals.norm2() < best.0 {
            best = (ev.residuals.norm2(), agg);
        } else if ev.residuals.norm2() > 4.0 * best.0 {
            // mixing overshot; restart it from the current point
            anderson.reset();
        }
        // no improvement over the last 20 steps counts as a stall
        if history.len() > 40 {
            let recent = history[history.len() - 20..].iter().cloned().fold(f64::INFINITY, f64::min);
            let before = history[..history.len() - 20].iter().cloned().fold(f64::INFINITY, f64::min);
            if recent > 0.9 * before {
                stalled = true;
                break;
            }
        }
    }

    if stalled && settings.fallback {
        let (agg_f, ev_f) = simplex_fallback(p, grids, proc, settings, best.1, &ev)?;
        agg = agg_f;
        ev = ev_f;
        history.push(ev.residuals.max_abs());
    }

    let converged = ev.residuals.max_abs() < settings.outer_tol;
    if converged {
        ev.dist.escape.check(settings.dist.escape_threshold)?;
    }
    Ok(into_result(ev, agg, converged, iters, history))
}

/// Anderson mixing of the damped log-aggregate map `x -> x + damping * f(x)`.
struct Anderson {
    depth: usize,
    damping: f64,
    xs: Vec<[f64; 3]>,
    fs: Vec<[f64; 3]>,
}

impl Anderson {
    fn new(depth: usize, damping: f64) -> Self {
        Self {
            depth,
            damping,
            xs: Vec::new(),
            fs: Vec::new(),
        }
    }

    fn reset(&mut self) {
        self.xs.clear();
        self.fs.clear();
    }

    /// Records `(x, f)` and returns the step to take from `x`.
    fn push(&mut self, x: [f64; 3], f: [f64; 3]) -> [f64; 3] {
        let b = self.damping;
        let plain = [b * f[0], b * f[1], b * f[2]];
        self.xs.push(x);
        self.fs.push(f);
        if self.xs.len() > self.depth + 1 {
            self.xs.remove(0);
            self.fs.remove(0);
        }
        let n = self.xs.len() - 1;
        if n == 0 {
            return plain;
        }
        let df = DMatrix::from_fn(3, n, |r, c| self.fs[c + 1][r] - self.fs[c][r]);
        let dx = DMatrix::from_fn(3, n, |r, c| self.xs[c + 1][r] - self.xs[c][r]);
        let rhs = DVector::from_row_slice(&f);
        let gamma = match df.clone().svd(true, true).solve(&rhs, 1e-12) {
            Ok(g) if g.iter().all(|v| v.is_finite()) => g,
            _ => {
                self.reset();
                return plain;
            }
        };
        let corr = (dx + df * b) * gamma;
        let step = [plain[0] - corr[0], plain[1] - corr[1], plain[2] - corr[2]];
        // keep single moves modest; the inner solves warm-start from here
        let len = step.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(len.is_finite()) || len > 0.5 {
            self.reset();
            return plain;
        }
        step
    }
}

struct LogResidualCost<'a> {
    p: &'a Parameters,
    grids: &'a StateGrids,
    proc: &'a ProductivityProcess,
    settings: &'a EquilibriumSettings,
    warm: &'a Evaluation,
}

impl CostFunction for LogResidualCost<'_> {
    type Param = Vec<f64>;
    type Output = f64;

    fn cost(&self, x: &Self::Param) -> std::result::Result<f64, argmin::core::Error> {
        let agg = AggregateGuess {
            c_agg: x[0].exp(),
            wage: x[1].exp(),
            p_m: x[2].exp(),
        };
        if agg.validate().is_err() {
            return Ok(f64::INFINITY);
        }
        Ok(
            match evaluate(agg, self.p, self.grids, self.proc, self.settings, Some((&self.warm.pol, &self.warm.dist))) {
                Ok(ev) => ev.residuals.norm2(),
                Err(_) => f64::INFINITY,
            },
        )
    }
}

fn simplex_fallback(
    p: &Parameters,
    grids: &StateGrids,
    proc: &ProductivityProcess,
    settings: &EquilibriumSettings,
    start: AggregateGuess,
    warm: &Evaluation,
) -> Result<(AggregateGuess, Evaluation)> {
    let cost = LogResidualCost {
        p,
        grids,
        proc,
        settings,
        warm,
    };
    let x0 = vec![start.c_agg.ln(), start.wage.ln(), start.p_m.ln()];
    let mut best_x = x0.clone();
    let mut best_cost = cost.cost(&x0).unwrap_or(f64::INFINITY);
    let target = (settings.outer_tol * 0.5).powi(2);
    for attempt in 0..settings.fallback_starts.max(1) {
        if best_cost < target {
            break;
        }
        let width = 0.2 / (1 << attempt) as f64;
        let mut simplex = vec![best_x.clone()];
        for d in 0..3 {
            let mut v = best_x.clone();
            v[d] += if attempt % 2 == 0 { width } else { -width };
            simplex.push(v);
        }
        let solver = NelderMead::new(simplex)
            .with_sd_tolerance(target * 1e-3)
            .map_err(|e| Error::Configuration(e.to_string()))?;
        let cost = LogResidualCost {
            p,
            grids,
            proc,
            settings,
            warm,
        };
        let res = Executor::new(cost, solver)
            .configure(|s| s.max_iters(400).target_cost(target))
            .run()
            .map_err(|e| Error::Configuration(e.to_string()))?;
        let state = res.state();
        if let Some(x) = &state.best_param {
            if state.best_cost < best_cost {
                best_cost = state.best_cost;
                best_x = x.clone();
            }
        }
    }
    let agg = AggregateGuess {
        c_agg: best_x[0].exp(),
        wage: best_x[1].exp(),
        p_m: best_x[2].exp(),
    };
    let ev = evaluate(agg, p, grids, proc, settings, Some((&warm.pol, &warm.dist)))?;
    Ok((agg, ev))
}

/// Scales every advertising policy by `lambda`, re-clears `P_m` from the
/// scaled aggregate, and recomputes next-period customers, the
/// distribution and the residuals. Advertising labor is held at its
/// original level: only the units in which advertising is counted change.
pub fn rescale_advertising(
    eq: &EquilibriumResult,
    lambda: f64,
    p: &Parameters,
    grids: &StateGrids,
    proc: &ProductivityProcess,
    dist_opts: DistOptions,
) -> Result<EquilibriumResult> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::invalid("lambda", "must be positive"));
    }
    let mut pol = eq.pol.clone();
    pol.pol_a.mapv_inplace(|a| a * lambda);
    let ads: f64 = pol
        .pol_a
        .iter()
        .zip(eq.dist.mass.iter())
        .map(|(a, w)| a * w)
        .sum();
    let p_m = clearing_p_m(ads, p)?;
    for ((i, j, s), nm) in pol.next_m.indexed_iter_mut() {
        *nm = (1.0 - p.delta_m) * grids.m_nodes[i] + pol.pol_a[[i, j, s]] / p_m;
    }
    let mut dist = stationary_distribution_from(&pol, grids, proc, p, dist_opts, Some(&eq.dist.mass))?;
    // the distribution module prices labor from the policy quantities
    dist.labor_ads = eq
        .pol
        .pol_a
        .iter()
        .zip(dist.mass.iter())
        .map(|(a, w)| w * labor_requirement(*a, p.alpha_a))
        .sum();
    let agg = AggregateGuess { p_m, ..eq.agg };
    pol.agg = agg;
    let (price_index, c_implied) = price_index_and_aggregator(&pol, &dist, grids, p);
    let residuals = Residuals {
        labor: dist.total_labor() - 1.0,
        goods: c_implied - agg.c_agg,
        customer: p_m - clearing_p_m(dist.aggregate_ads, p)?,
        price_index: price_index - 1.0,
    };
    Ok(EquilibriumResult {
        agg,
        pol,
        dist,
        residuals,
        converged: eq.converged,
        outer_iterations: 0,
        history: Vec::new(),
        price_index,
        c_implied,
    })
}
