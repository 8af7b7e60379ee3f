//! Calibration of the scale elasticity to a negative-earnings target, of
//! the two returns-to-scale parameters to a baseline moment pair, and
//! parameter sweeps.

use std::path::Path;

use rayon::prelude::*;
use serde::Deserialize;

use crate::egm::StateGrids;
use crate::equilibrium::{solve_equilibrium, solve_equilibrium_from, EquilibriumResult, EquilibriumSettings};
use crate::error::{Error, Result};
use crate::model::Parameters;
use crate::moments::{
    aggregate_accounts, compute_moments, counterfactual_consumption, csv_row, distribution_moments, AggregateAccounts,
    MomentSet,
};
use crate::panel::{simulate_panel, PanelOptions};
use crate::productivity::ProductivityProcess;

/// One year's calibration target.
#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
pub struct CalibrationTarget {
    pub year: i32,
    pub target_pct_negative: f64,
    #[serde(default)]
    pub target_capex_share: Option<f64>,
}

impl CalibrationTarget {
    pub fn validate(&self) -> Result<()> {
        let frac = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::invalid(name, format!("year {}: must lie in [0, 1], got {v}", self.year)))
            }
        };
        frac("target_pct_negative", self.target_pct_negative)?;
        if let Some(c) = self.target_capex_share {
            frac("target_capex_share", c)?;
        }
        Ok(())
    }
}

/// Reads `year,target_pct_negative[,target_capex_share]` rows.
pub fn read_targets(path: &Path) -> Result<Vec<CalibrationTarget>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let mut out = Vec::new();
    for row in rdr.deserialize() {
        let t: CalibrationTarget = row?;
        t.validate()?;
        out.push(t);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhiOptions {
    /// Absolute tolerance on the matched share.
    pub tol: f64,
    pub bracket: (f64, f64),
    /// The bracket is walked upward in steps of at most this size, each
    /// solve warm-started from the last, until the target is crossed.
    pub march_step: f64,
    /// Bisection gives up once the bracket is narrower than this.
    pub min_width: f64,
}

impl Default for PhiOptions {
    fn default() -> Self {
        Self {
            tol: 1e-3,
            bracket: (0.0, 1.5),
            march_step: 0.25,
            min_width: 1e-9,
        }
    }
}

impl PhiOptions {
    fn validate(&self) -> Result<()> {
        let (lo, hi) = self.bracket;
        if !(lo.is_finite() && hi.is_finite() && lo >= 0.0 && lo < hi) {
            return Err(Error::invalid("bracket", format!("need 0 <= low < high, got ({lo}, {hi})")));
        }
        if !(self.tol > 0.0) {
            return Err(Error::invalid("tol", "must be positive"));
        }
        if !(self.march_step > 0.0) {
            return Err(Error::invalid("march_step", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct PhiCalibration {
    pub phi: f64,
    pub achieved: f64,
    /// `achieved - target`.
    pub residual: f64,
    pub eq: EquilibriumResult,
    /// Equilibrium solves made for this target (cache hits excluded).
    pub solves: usize,
}

/// Equilibria already solved at given `phi`, all other parameters fixed.
/// Shared across the years of a path so bracket endpoints are solved once.
pub struct PhiCache {
    p: Parameters,
    grids: StateGrids,
    proc: ProductivityProcess,
    settings: EquilibriumSettings,
    points: Vec<(f64, f64, EquilibriumResult)>,
    solves: usize,
}

impl PhiCache {
    pub fn new(p: &Parameters, grids: &StateGrids, proc: &ProductivityProcess, settings: &EquilibriumSettings) -> Self {
        Self {
            p: *p,
            grids: grids.clone(),
            proc: proc.clone(),
            settings: *settings,
            points: Vec::new(),
            solves: 0,
        }
    }

    /// Share of negative-earnings firms at `phi`, solving if needed.
    pub fn pct_negative(&mut self, phi: f64) -> Result<f64> {
        Ok(self.point(phi)?.1)
    }

    fn point(&mut self, phi: f64) -> Result<&(f64, f64, EquilibriumResult)> {
        if let Some(i) = self.points.iter().position(|q| q.0 == phi) {
            return Ok(&self.points[i]);
        }
        let mut p = self.p;
        p.phi = phi;
        let nearest = self
            .points
            .iter()
            .min_by(|a, b| (a.0 - phi).abs().total_cmp(&(b.0 - phi).abs()))
            .map(|q| &q.2);
        let eq = match nearest {
            Some(w) => solve_equilibrium_from(&p, &self.grids, &self.proc, &self.settings, w.agg, Some(w))?,
            None => solve_equilibrium(&p, &self.grids, &self.proc, &self.settings)?,
        };
        self.solves += 1;
        if !eq.converged {
            return Err(Error::NonConvergence {
                what: "equilibrium",
                iterations: eq.outer_iterations,
                residual: eq.residuals.max_abs(),
                worst: None,
            });
        }
        let share = distribution_moments(&eq, &self.grids, &self.proc, &p)?.pct_negative_earnings;
        self.points.push((phi, share, eq));
        Ok(self.points.last().unwrap())
    }

    fn take(&self, phi: f64, target: f64, solves: usize) -> PhiCalibration {
        let q = self.points.iter().find(|q| q.0 == phi).expect("cached point");
        PhiCalibration {
            phi,
            achieved: q.1,
            residual: q.1 - target,
            eq: q.2.clone(),
            solves,
        }
    }

    /// Bisection on `phi` for a negative-earnings share, assuming the share
    /// increases in `phi`.
    pub fn calibrate(&mut self, target: f64, opts: &PhiOptions) -> Result<PhiCalibration> {
        opts.validate()?;
        if !(0.0..=1.0).contains(&target) {
            return Err(Error::invalid("target_pct_negative", format!("must lie in [0, 1], got {target}")));
        }
        let start = self.solves;
        let (lo0, hi0) = opts.bracket;
        let f_lo0 = self.pct_negative(lo0)?;
        if (f_lo0 - target).abs() < opts.tol {
            return Ok(self.take(lo0, target, self.solves - start));
        }
        // walk up until the share crosses the target
        let (mut lo, mut f_lo) = (lo0, f_lo0);
        let (mut hi, mut f_hi) = (lo0, f_lo0);
        while hi < hi0 {
            let next = (hi + opts.march_step).min(hi0);
            let f = self.pct_negative(next)?;
            if f < f_hi - opts.tol {
                return Err(Error::NonMonotone {
                    low: hi,
                    high: next,
                    low_value: f_hi,
                    high_value: f,
                });
            }
            (lo, f_lo) = (hi, f_hi);
            (hi, f_hi) = (next, f);
            if (f - target).abs() < opts.tol {
                return Ok(self.take(next, target, self.solves - start));
            }
            if f > target || target < f_lo0 {
                break;
            }
        }
        if !(f_lo < target && target < f_hi) {
            return Err(Error::Bracketing {
                target,
                low: lo0,
                high: hi,
                low_value: f_lo0,
                high_value: f_hi,
            });
        }
        while hi - lo > opts.min_width {
            let mid = 0.5 * (lo + hi);
            let f = self.pct_negative(mid)?;
            if (f - target).abs() < opts.tol {
                return Ok(self.take(mid, target, self.solves - start));
            }
            if f < target {
                (lo, f_lo) = (mid, f);
            } else {
                (hi, f_hi) = (mid, f);
            }
        }
        Err(Error::Discontinuity {
            target,
            at: 0.5 * (lo + hi),
            low_value: f_lo,
            high_value: f_hi,
        })
    }
}

/// Calibrates `phi` for one target with a fresh cache.
pub fn calibrate_phi(
    target: &CalibrationTarget,
    p: &Parameters,
    grids: &StateGrids,
    proc: &ProductivityProcess,
    settings: &EquilibriumSettings,
    opts: &PhiOptions,
) -> Result<PhiCalibration> {
    target.validate()?;
    PhiCache::new(p, grids, proc, settings).calibrate(target.target_pct_negative, opts)
}

/// One year of a calibrated path; failures keep the error text.
#[derive(Debug, Clone)]
pub struct PathYear {
    pub target: CalibrationTarget,
    pub outcome: std::result::Result<(PhiCalibration, MomentSet, AggregateAccounts), String>,
}

/// Calibrates every year in chronological order. Endpoint and bisection
/// solves are shared between years, and each new solve warm-starts from the
/// nearest `phi` already solved.
pub fn calibrate_path(
    targets: &[CalibrationTarget],
    p: &Parameters,
    grids: &StateGrids,
    proc: &ProductivityProcess,
    settings: &EquilibriumSettings,
    opts: &PhiOptions,
    panel: &PanelOptions,
) -> Result<Vec<PathYear>> {
    let mut sorted = targets.to_vec();
    sorted.sort_by_key(|t| t.year);
    for t in &sorted {
        t.validate()?;
    }
    let mut cache = PhiCache::new(p, grids, proc, settings);
    Ok(sorted
        .into_iter()
        .map(|target| {
            let outcome = cache
                .calibrate(target.target_pct_negative, opts)
                .and_then(|cal| {
                    let mut pp = *p;
                    pp.phi = cal.phi;
                    let (m, a) = moments_at(&cal.eq, grids, proc, &pp, panel)?;
                    Ok((cal, m, a))
                })
                .map_err(|e| e.to_string());
            PathYear { target, outcome }
        })
        .collect())
}

fn moments_at(
    eq: &EquilibriumResult,
    grids: &StateGrids,
    proc: &ProductivityProcess,
    p: &Parameters,
    panel: &PanelOptions,
) -> Result<(MomentSet, AggregateAccounts)> {
    let sim = simulate_panel(&eq.pol, grids, proc, p, panel)?;
    Ok((compute_moments(eq, &sim, grids, proc, p)?, aggregate_accounts(eq)))
}

pub fn write_path_csv(path: &Path, years: &[PathYear]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let (names, _) = csv_row(&MomentSet::default(), &AggregateAccounts::default());
    let mut header = vec!["year", "target_pct_negative", "phi", "achieved", "residual", "c_agg", "wage", "p_m"];
    header.extend(names);
    header.push("error");
    w.write_record(&header)?;
    for y in years {
        let mut rec = vec![y.target.year.to_string(), y.target.target_pct_negative.to_string()];
        match &y.outcome {
            Ok((cal, m, a)) => {
                rec.extend(
                    [cal.phi, cal.achieved, cal.residual, cal.eq.agg.c_agg, cal.eq.agg.wage, cal.eq.agg.p_m]
                        .iter()
                        .map(f64::to_string),
                );
                rec.extend(csv_row(m, a).1.iter().map(f64::to_string));
                rec.push(String::new());
            }
            Err(e) => {
                rec.extend(std::iter::repeat_n(String::new(), header.len() - 3));
                rec.push(e.clone());
            }
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// The pair matched by [`calibrate_alphas`], both at the baseline `phi`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlphaTargets {
    pub pct_negative: f64,
    /// Median investment spending over revenue.
    pub capex_share: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlphaOptions {
    pub tol_pct_negative: f64,
    pub tol_capex_share: f64,
    /// Equilibrium solves allowed in total.
    pub max_iters: u64,
    /// Search range of `alpha_a`, which moves the negative-earnings share.
    pub alpha_a_range: (f64, f64),
    /// Search range of `alpha_k`, which moves the capex share.
    pub alpha_k_range: (f64, f64),
    /// Alternations between the two one-dimensional searches.
    pub max_rounds: usize,
}

impl Default for AlphaOptions {
    fn default() -> Self {
        Self {
            tol_pct_negative: 1e-3,
            tol_capex_share: 1e-3,
            max_iters: 80,
            alpha_a_range: (0.2, 0.9),
            alpha_k_range: (0.3, 0.95),
            max_rounds: 6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlphaCalibration {
    pub alpha_a: f64,
    pub alpha_k: f64,
    pub achieved: AlphaTargets,
    pub solves: usize,
}

struct AlphaSearch<'a> {
    p: &'a Parameters,
    grids: &'a StateGrids,
    proc: &'a ProductivityProcess,
    settings: &'a EquilibriumSettings,
    targets: AlphaTargets,
    opts: &'a AlphaOptions,
    warm: Option<EquilibriumResult>,
    best: Option<(f64, AlphaCalibration)>,
    solves: usize,
}

/// Which moment a one-dimensional search moves.
#[derive(Clone, Copy)]
enum Coordinate {
    AdsScale,
    InvestmentScale,
}

impl AlphaSearch<'_> {
    /// Moments at `(alpha_a, alpha_k)`, remembering the best point so far.
    fn moments(&mut self, alpha_a: f64, alpha_k: f64) -> Result<AlphaTargets> {
        if self.solves as u64 >= self.opts.max_iters {
            return Err(self.failure());
        }
        let mut p = *self.p;
        p.alpha_a = alpha_a;
        p.alpha_k = alpha_k;
        p.validate()?;
        let eq = match &self.warm {
            Some(w) => solve_equilibrium_from(&p, self.grids, self.proc, self.settings, w.agg, Some(w))?,
            None => solve_equilibrium(&p, self.grids, self.proc, self.settings)?,
        };
        self.solves += 1;
        if !eq.converged {
            return Err(Error::NonConvergence {
                what: "equilibrium",
                iterations: eq.outer_iterations,
                residual: eq.residuals.max_abs(),
                worst: None,
            });
        }
        let m = distribution_moments(&eq, self.grids, self.proc, &p)?;
        self.warm = Some(eq);
        let achieved = AlphaTargets {
            pct_negative: m.pct_negative_earnings,
            capex_share: m.median_investment_share,
        };
        let cost = self.scaled(&achieved);
        if self.best.as_ref().is_none_or(|b| cost < b.0) {
            self.best = Some((
                cost,
                AlphaCalibration {
                    alpha_a,
                    alpha_k,
                    achieved,
                    solves: 0,
                },
            ));
        }
        Ok(achieved)
    }

    /// Largest residual in tolerance units; below 1 both moments match.
    fn scaled(&self, a: &AlphaTargets) -> f64 {
        let r1 = (a.pct_negative - self.targets.pct_negative) / self.opts.tol_pct_negative;
        let r2 = (a.capex_share - self.targets.capex_share) / self.opts.tol_capex_share;
        r1.abs().max(r2.abs())
    }

    fn done(&self) -> Option<AlphaCalibration> {
        let (c, cal) = self.best.as_ref()?;
        (*c < 1.0).then_some(AlphaCalibration {
            solves: self.solves,
            ..*cal
        })
    }

    fn failure(&self) -> Error {
        match self.best.as_ref().map(|b| b.1) {
            Some(b) => Error::CalibrationFailed {
                alpha_a: b.alpha_a,
                alpha_k: b.alpha_k,
                pct_negative_gap: b.achieved.pct_negative - self.targets.pct_negative,
                capex_share_gap: b.achieved.capex_share - self.targets.capex_share,
            },
            None => Error::Configuration("no equilibrium could be solved during calibration".into()),
        }
    }

    /// Moves one parameter, the other held at `other`, until its moment is
    /// within tolerance. The moment is taken to increase in the parameter.
    /// Returns the new value and the moments there.
    fn solve_coordinate(&mut self, c: Coordinate, x0: f64, f0: AlphaTargets, other: f64) -> Result<(f64, AlphaTargets)> {
        let (range, target, tol) = match c {
            Coordinate::AdsScale => (self.opts.alpha_a_range, self.targets.pct_negative, self.opts.tol_pct_negative),
            Coordinate::InvestmentScale => (self.opts.alpha_k_range, self.targets.capex_share, self.opts.tol_capex_share),
        };
        let pick = |m: &AlphaTargets| match c {
            Coordinate::AdsScale => m.pct_negative,
            Coordinate::InvestmentScale => m.capex_share,
        };
        let eval = |s: &mut Self, x: f64| -> Result<AlphaTargets> {
            match c {
                Coordinate::AdsScale => s.moments(x, other),
                Coordinate::InvestmentScale => s.moments(other, x),
            }
        };
        if (pick(&f0) - target).abs() < tol {
            return Ok((x0, f0));
        }
        // expand from the current point toward the target
        let up = pick(&f0) < target;
        let (mut a, mut fa) = (x0, pick(&f0));
        let mut step = 0.02;
        let (mut b, mut fb, mut mb);
        loop {
            b = if up { (a + step).min(range.1) } else { (a - step).max(range.0) };
            mb = eval(self, b)?;
            fb = pick(&mb);
            if (fb - target).abs() < tol {
                return Ok((b, mb));
            }
            if (fb > target) == up {
                break;
            }
            if b == range.0 || b == range.1 {
                return Err(Error::Bracketing {
                    target,
                    low: range.0,
                    high: range.1,
                    low_value: if up { pick(&f0) } else { fb },
                    high_value: if up { fb } else { pick(&f0) },
                });
            }
            (a, fa) = (b, fb);
            step *= 2.0;
        }
        // regula falsi, bisecting when the bracket stalls or the share jumps
        let (mut lo, mut f_lo, mut hi, mut f_hi) = if a < b { (a, fa, b, fb) } else { (b, fb, a, fa) };
        while hi - lo > 1e-6 {
            let width = hi - lo;
            let secant = lo + (target - f_lo) / (f_hi - f_lo) * width;
            let x = if secant.is_finite() && secant > lo + 0.1 * width && secant < hi - 0.1 * width {
                secant
            } else {
                0.5 * (lo + hi)
            };
            let m = eval(self, x)?;
            let f = pick(&m);
            if (f - target).abs() < tol {
                return Ok((x, m));
            }
            if f < target {
                (lo, f_lo) = (x, f);
            } else {
                (hi, f_hi) = (x, f);
            }
            if hi - lo > 0.5 * width {
                // a lopsided step; force the next one to the middle
                let mid = 0.5 * (lo + hi);
                let m = eval(self, mid)?;
                let f = pick(&m);
                if (f - target).abs() < tol {
                    return Ok((mid, m));
                }
                if f < target {
                    (lo, f_lo) = (mid, f);
                } else {
                    (hi, f_hi) = (mid, f);
                }
            }
        }
        Err(Error::Discontinuity {
            target,
            at: 0.5 * (lo + hi),
            low_value: f_lo,
            high_value: f_hi,
        })
    }
}

/// Matches the baseline negative-earnings share and median capex share by
/// alternating one-dimensional searches: `alpha_a` for the share, then
/// `alpha_k` for the capex share, starting from the values in `p`. Both
/// moments are taken to increase in their parameter.
///
/// A target outside what a search range reaches is a bracketing error; a
/// share that jumps over its target, or running out of solves, ends in
/// [`Error::CalibrationFailed`] carrying the best point found.
pub fn calibrate_alphas(
    targets: AlphaTargets,
    p: &Parameters,
    grids: &StateGrids,
    proc: &ProductivityProcess,
    settings: &EquilibriumSettings,
    opts: &AlphaOptions,
) -> Result<AlphaCalibration> {
    for (name, v) in [("target_pct_negative", targets.pct_negative), ("target_capex_share", targets.capex_share)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::invalid(name, format!("must lie in [0, 1], got {v}")));
        }
    }
    for (name, (lo, hi)) in [("alpha_a_range", opts.alpha_a_range), ("alpha_k_range", opts.alpha_k_range)] {
        if !(0.0 < lo && lo < hi && hi < 1.0) {
            return Err(Error::invalid(name, format!("need 0 < low < high < 1, got ({lo}, {hi})")));
        }
    }
    let mut search = AlphaSearch {
        p,
        grids,
        proc,
        settings,
        targets,
        opts,
        warm: None,
        best: None,
        solves: 0,
    };
    let (mut a, mut k) = (p.alpha_a, p.alpha_k);
    let mut m = search.moments(a, k)?;
    for _ in 0..opts.max_rounds {
        if let Some(cal) = search.done() {
            return Ok(cal);
        }
        let step = search.solve_coordinate(Coordinate::AdsScale, a, m, k).and_then(|(a2, m2)| {
            a = a2;
            search.solve_coordinate(Coordinate::InvestmentScale, k, m2, a2)
        });
        match step {
            Ok((k2, m2)) => {
                k = k2;
                m = m2;
            }
            Err(Error::Discontinuity { .. }) => return Err(search.failure()),
            Err(e) => return Err(e),
        }
    }
    search.done().ok_or_else(|| search.failure())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepOptions {
    /// Each point starts from the previous converged point; otherwise points
    /// solve concurrently from the default guess.
    pub warm_start: bool,
    pub panel: PanelOptions,
}

impl Default for SweepOptions {
    fn default() -> Self {
        Self {
            warm_start: true,
            panel: PanelOptions::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SweepPoint {
    pub eq: EquilibriumResult,
    pub moments: MomentSet,
    pub accounts: AggregateAccounts,
}

#[derive(Debug, Clone)]
pub struct SweepRow {
    pub value: f64,
    pub outcome: std::result::Result<SweepPoint, String>,
}

/// Solves one equilibrium per value of the named parameter. A failing value
/// is recorded in its row and the sweep continues; a point that does not
/// converge counts as a failure.
pub fn sweep(
    name: &str,
    values: &[f64],
    p: &Parameters,
    grids: &StateGrids,
    proc: &ProductivityProcess,
    settings: &EquilibriumSettings,
    opts: &SweepOptions,
) -> Result<Vec<SweepRow>> {
    p.get(name)?;
    let point = |v: f64, warm: Option<&EquilibriumResult>| -> Result<SweepPoint> {
        let mut pp = *p;
        pp.set(name, v)?;
        let eq = match warm {
            Some(w) => solve_equilibrium_from(&pp, grids, proc, settings, w.agg, Some(w))?,
            None => solve_equilibrium(&pp, grids, proc, settings)?,
        };
        if !eq.converged {
            return Err(Error::NonConvergence {
                what: "equilibrium",
                iterations: eq.outer_iterations,
                residual: eq.residuals.max_abs(),
                worst: None,
            });
        }
        let (moments, accounts) = moments_at(&eq, grids, proc, &pp, &opts.panel)?;
        Ok(SweepPoint { eq, moments, accounts })
    };
    if !opts.warm_start {
        return Ok(values
            .par_iter()
            .map(|&value| SweepRow {
                value,
                outcome: point(value, None).map_err(|e| e.to_string()),
            })
            .collect());
    }
    let mut rows: Vec<SweepRow> = Vec::with_capacity(values.len());
    for &value in values {
        let warm = rows.iter().rev().find_map(|r| r.outcome.as_ref().ok()).map(|s| &s.eq);
        let outcome = point(value, warm).map_err(|e| e.to_string());
        rows.push(SweepRow { value, outcome });
    }
    Ok(rows)
}

pub fn write_sweep_csv(path: &Path, name: &str, rows: &[SweepRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let (names, _) = csv_row(&MomentSet::default(), &AggregateAccounts::default());
    let mut header = vec![name, "converged", "outer_iterations", "max_residual", "c_agg", "wage", "p_m", "labor_ads"];
    header.extend(names);
    header.push("error");
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![r.value.to_string()];
        match &r.outcome {
            Ok(s) => {
                rec.push(s.eq.converged.to_string());
                rec.push(s.eq.outer_iterations.to_string());
                rec.extend(
                    [s.eq.residuals.max_abs(), s.eq.agg.c_agg, s.eq.agg.wage, s.eq.agg.p_m, s.eq.dist.labor_ads]
                        .iter()
                        .map(f64::to_string),
                );
                rec.extend(csv_row(&s.moments, &s.accounts).1.iter().map(f64::to_string));
                rec.push(String::new());
            }
            Err(e) => {
                rec.extend(std::iter::repeat_n(String::new(), header.len() - 2));
                rec.push(e.clone());
            }
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Consumption along a `phi` path three ways.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecompositionRow {
    pub phi: f64,
    /// Household aggregator at the equilibrium solved at `phi`.
    pub full: f64,
    /// Baseline firm choices valued with utility weights at `phi`.
    pub choices_fixed: f64,
    /// Equilibrium choices at `phi` valued with the baseline weights.
    pub aggregator_fixed: f64,
    pub labor_ads: f64,
}

/// Full, choices-fixed and aggregator-fixed consumption for each `phi`.
/// The baseline is the equilibrium at `p.phi`.
pub fn decompose(
    phis: &[f64],
    p: &Parameters,
    grids: &StateGrids,
    proc: &ProductivityProcess,
    settings: &EquilibriumSettings,
) -> Result<Vec<DecompositionRow>> {
    let base = solve_equilibrium(p, grids, proc, settings)?;
    if !base.converged {
        return Err(Error::NonConvergence {
            what: "baseline equilibrium",
            iterations: base.outer_iterations,
            residual: base.residuals.max_abs(),
            worst: None,
        });
    }
    let mut prev = base.clone();
    let mut rows = Vec::with_capacity(phis.len());
    for &phi in phis {
        let mut pp = *p;
        pp.set("phi", phi)?;
        let eq = solve_equilibrium_from(&pp, grids, proc, settings, prev.agg, Some(&prev))?;
        if !eq.converged {
            return Err(Error::NonConvergence {
                what: "equilibrium",
                iterations: eq.outer_iterations,
                residual: eq.residuals.max_abs(),
                worst: None,
            });
        }
        rows.push(DecompositionRow {
            phi,
            full: eq.c_implied,
            choices_fixed: counterfactual_consumption(&base, grids, p, phi),
            aggregator_fixed: counterfactual_consumption(&eq, grids, &pp, p.phi),
            labor_ads: eq.dist.labor_ads,
        });
        prev = eq;
    }
    Ok(rows)
}

pub fn write_decomposition_csv(path: &Path, rows: &[DecompositionRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["phi", "full", "choices_fixed", "aggregator_fixed", "labor_ads"])?;
    for r in rows {
        w.write_record(
            [r.phi, r.full, r.choices_fixed, r.aggregator_fixed, r.labor_ads]
                .iter()
                .map(f64::to_string),
        )?;
    }
    w.flush()?;
    Ok(())
}
