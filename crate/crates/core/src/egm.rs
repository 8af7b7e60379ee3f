//! Firm dynamic program solved for marginal values with an alternating
//! endogenous grid method.
//!
//! The unknowns are the marginal values `V_M` and `V_K` on the structured
//! `(m, k, z)` grid. Each iteration:
//!
//! 1. forms the discounted expected continuations
//!    `lam_a = beta (1 - theta) E[V_M(m', k', z') | z]` (and `lam_k`) on the
//!    next-period nodes;
//! 2. Pass A: along every customer line `(k'_j, z_s)` inverts the advertising
//!    first-order condition at each `m'` node, recovers the implied current
//!    `m`, and inverts `m -> m'` onto the structured `m` nodes;
//! 3. Pass B: the same along capital lines `(m'_i, z_s)`;
//! 4. resolves each node: the two line maps are crossed to find the joint
//!    `(m', k')`, then the pair of first-order conditions is solved exactly
//!    against the bilinear continuation surface;
//! 5. updates the marginal values through the envelope conditions
//!    `V_M = pi_M + (1 - delta_m) lam_a(m', k')`, `V_K = pi_K + (1 - delta_k) lam_k(m', k')`.

use std::path::Path;

use ndarray::{Array2, Array3};
use rayon::prelude::*;

use crate::error::{Error, NodeIndex, Result};
use crate::interp::{bilinear_at, bracket, invert_endogenous_line, log_space, Bracket, Clamp};
use crate::model::{
    derived_constants, inverse_marginal_cost, static_solve_with, AggregateGuess, DerivedConstants, FirmState,
    Parameters,
};
use crate::productivity::ProductivityProcess;

pub const FLAG_ADS_CLIPPED: u8 = 1;
pub const FLAG_INV_CLIPPED: u8 = 2;
pub const FLAG_M_OUTSIDE: u8 = 4;
pub const FLAG_K_OUTSIDE: u8 = 8;

/// Minimum nodes per endogenous dimension.
pub const MIN_NODES: usize = 8;

/// Structured grids for the two endogenous states.
#[derive(Debug, Clone, PartialEq)]
pub struct StateGrids {
    pub m_nodes: Vec<f64>,
    pub k_nodes: Vec<f64>,
}

impl StateGrids {
    pub fn new(m_nodes: Vec<f64>, k_nodes: Vec<f64>) -> Result<Self> {
        for (name, nodes) in [("m_nodes", &m_nodes), ("k_nodes", &k_nodes)] {
            if nodes.len() < MIN_NODES {
                return Err(Error::invalid(name, format!("need at least {MIN_NODES} nodes, got {}", nodes.len())));
            }
            if nodes[0] <= 0.0 || nodes.windows(2).any(|w| !(w[1] > w[0])) {
                return Err(Error::invalid(name, "nodes must be positive and strictly increasing"));
            }
        }
        Ok(Self { m_nodes, k_nodes })
    }

    pub fn log_spaced(n_m: usize, m_min: f64, m_max: f64, n_k: usize, k_min: f64, k_max: f64) -> Result<Self> {
        if !(m_min > 0.0 && m_max > m_min) {
            return Err(Error::invalid("m_min", "need 0 < m_min < m_max"));
        }
        if !(k_min > 0.0 && k_max > k_min) {
            return Err(Error::invalid("k_min", "need 0 < k_min < k_max"));
        }
        Self::new(log_space(m_min, m_max, n_m), log_space(k_min, k_max, n_k))
    }

    pub fn n_m(&self) -> usize {
        self.m_nodes.len()
    }

    pub fn n_k(&self) -> usize {
        self.k_nodes.len()
    }

    pub fn m_max(&self) -> f64 {
        *self.m_nodes.last().unwrap()
    }

    pub fn k_max(&self) -> f64 {
        *self.k_nodes.last().unwrap()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    /// Sup-norm tolerance on `|dV| / (1 + |V|)` across both marginal values.
    pub tol: f64,
    pub max_iter: usize,
    /// Update productivity slices in place so later slices see fresh values.
    pub gauss_seidel: bool,
    /// Fail on any line whose implied current states are not monotone.
    /// Otherwise such lines are skipped and their nodes are solved from the
    /// previous iterate.
    pub strict_lines: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tol: 1e-7,
            max_iter: 3000,
            gauss_seidel: false,
            strict_lines: false,
        }
    }
}

/// Static-block quantities at every node.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeStatics {
    pub revenue: Array3<f64>,
    pub profit: Array3<f64>,
    pub labor_prod: Array3<f64>,
    pub price: Array3<f64>,
    pub demand_per_customer: Array3<f64>,
    pub pi_m: Array3<f64>,
    pub pi_k: Array3<f64>,
}

impl NodeStatics {
    pub fn compute(grids: &StateGrids, proc: &ProductivityProcess, agg: &AggregateGuess, p: &Parameters) -> Result<Self> {
        let dc = derived_constants(p);
        let shape = (grids.n_m(), grids.n_k(), proc.len());
        let mut out = Self {
            revenue: Array3::zeros(shape),
            profit: Array3::zeros(shape),
            labor_prod: Array3::zeros(shape),
            price: Array3::zeros(shape),
            demand_per_customer: Array3::zeros(shape),
            pi_m: Array3::zeros(shape),
            pi_k: Array3::zeros(shape),
        };
        for (i, &m) in grids.m_nodes.iter().enumerate() {
            for (j, &k) in grids.k_nodes.iter().enumerate() {
                for (s, &z) in proc.z_nodes.iter().enumerate() {
                    let sol = static_solve_with(&FirmState { m, k, z }, agg, p, &dc)?;
                    out.revenue[[i, j, s]] = sol.revenue;
                    out.profit[[i, j, s]] = sol.profit;
                    out.labor_prod[[i, j, s]] = sol.labor_prod;
                    out.price[[i, j, s]] = sol.price;
                    out.demand_per_customer[[i, j, s]] = sol.demand_per_customer;
                    out.pi_m[[i, j, s]] = sol.profit / m * dc.eps_pi_m;
                    out.pi_k[[i, j, s]] = sol.profit / k * dc.eps_pi_k;
                }
            }
        }
        Ok(out)
    }
}

/// Converged marginal values, policies and the static block at every node.
/// Arrays are indexed `[m, k, z]`.
#[derive(Debug, Clone)]
pub struct PolicySolution {
    pub agg: AggregateGuess,
    pub v_m: Array3<f64>,
    pub v_k: Array3<f64>,
    pub pol_a: Array3<f64>,
    pub pol_i: Array3<f64>,
    pub next_m: Array3<f64>,
    pub next_k: Array3<f64>,
    /// Bit flags per node: clipped advertising or investment, next state
    /// outside the grid.
    pub flags: Array3<u8>,
    pub statics: NodeStatics,
    pub iterations: usize,
    pub max_resid: f64,
    pub resid_history: Vec<f64>,
    /// Lines whose implied current states were not monotone in the last
    /// iteration.
    pub nonmonotone_lines: usize,
}

impl PolicySolution {
    pub fn shape(&self) -> (usize, usize, usize) {
        self.v_m.dim()
    }

    /// Share of nodes carrying any clipping or out-of-grid flag.
    pub fn clipped_fraction(&self) -> f64 {
        self.flags.iter().filter(|&&f| f != 0).count() as f64 / self.flags.len() as f64
    }

    /// Writes node coordinates, marginal values and policies as CSV.
    pub fn write_csv(&self, path: &Path, grids: &StateGrids, proc: &ProductivityProcess) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record([
            "im", "ik", "iz", "m", "k", "z", "v_m", "v_k", "pol_a", "pol_i", "next_m", "next_k", "flags",
        ])?;
        let (nm, nk, nz) = self.shape();
        for s in 0..nz {
            for j in 0..nk {
                for i in 0..nm {
                    let idx = [i, j, s];
                    w.write_record(&[
                        i.to_string(),
                        j.to_string(),
                        s.to_string(),
                        grids.m_nodes[i].to_string(),
                        grids.k_nodes[j].to_string(),
                        proc.z_nodes[s].to_string(),
                        self.v_m[idx].to_string(),
                        self.v_k[idx].to_string(),
                        self.pol_a[idx].to_string(),
                        self.pol_i[idx].to_string(),
                        self.next_m[idx].to_string(),
                        self.next_k[idx].to_string(),
                        self.flags[idx].to_string(),
                    ])?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Conditional expectation of `values` over next-period productivity given
/// current node `z_row`; returns an `(m, k)` array.
pub fn expected_continuation(values: &Array3<f64>, proc: &ProductivityProcess, z_row: usize) -> Array2<f64> {
    let (nm, nk, nz) = values.dim();
    let row = &proc.transition[z_row];
    let mut out = Array2::zeros((nm, nk));
    for sp in 0..nz {
        let t = row[sp];
        if t == 0.0 {
            continue;
        }
        for i in 0..nm {
            for j in 0..nk {
                out[[i, j]] += t * values[[i, j, sp]];
            }
        }
    }
    out
}

/// Result of solving one node.
#[derive(Debug, Clone, Copy)]
struct NodeOut {
    a: f64,
    inv: f64,
    next_m: f64,
    next_k: f64,
    lam_a: f64,
    lam_k: f64,
    flags: u8,
}

/// Iterative solver; exposes single steps so callers can inspect iterates.
pub struct FirmSolver<'a> {
    grids: &'a StateGrids,
    proc: &'a ProductivityProcess,
    agg: AggregateGuess,
    p: Parameters,
    dc: DerivedConstants,
    opts: SolverOptions,
    statics: NodeStatics,
    v_m: Array3<f64>,
    v_k: Array3<f64>,
    pol_a: Array3<f64>,
    pol_i: Array3<f64>,
    next_m: Array3<f64>,
    next_k: Array3<f64>,
    flags: Array3<u8>,
    history: Vec<f64>,
    worst: Option<NodeIndex>,
    nonmonotone_lines: usize,
}

impl<'a> FirmSolver<'a> {
    /// Starts from `V_M = pi_M`, `V_K = pi_K`.
    pub fn new(
        grids: &'a StateGrids,
        proc: &'a ProductivityProcess,
        agg: AggregateGuess,
        p: &Parameters,
        opts: SolverOptions,
    ) -> Result<Self> {
        agg.validate()?;
        p.validate()?;
        StateGrids::new(grids.m_nodes.clone(), grids.k_nodes.clone())?;
        let statics = NodeStatics::compute(grids, proc, &agg, p)?;
        let shape = statics.pi_m.dim();
        let mut next_m = Array3::zeros(shape);
        let mut next_k = Array3::zeros(shape);
        for ((i, _, _), v) in next_m.indexed_iter_mut() {
            *v = grids.m_nodes[i];
        }
        for ((_, j, _), v) in next_k.indexed_iter_mut() {
            *v = grids.k_nodes[j];
        }
        Ok(Self {
            grids,
            proc,
            agg,
            p: *p,
            dc: derived_constants(p),
            opts,
            v_m: statics.pi_m.clone(),
            v_k: statics.pi_k.clone(),
            statics,
            pol_a: Array3::zeros(shape),
            pol_i: Array3::zeros(shape),
            next_m,
            next_k,
            flags: Array3::zeros(shape),
            history: Vec::new(),
            worst: None,
            nonmonotone_lines: 0,
        })
    }

    /// Replaces the initial marginal values (warm start).
    pub fn with_marginal_values(mut self, v_m: &Array3<f64>, v_k: &Array3<f64>) -> Result<Self> {
        if v_m.dim() != self.v_m.dim() || v_k.dim() != self.v_k.dim() {
            return Err(Error::Configuration("warm-start arrays do not match the grid".into()));
        }
        if v_m.iter().chain(v_k.iter()).any(|x| !(x.is_finite() && *x > 0.0)) {
            return Err(Error::Configuration("warm-start marginal values must be positive".into()));
        }
        self.v_m.assign(v_m);
        self.v_k.assign(v_k);
        Ok(self)
    }

    pub fn v_m(&self) -> &Array3<f64> {
        &self.v_m
    }

    pub fn v_k(&self) -> &Array3<f64> {
        &self.v_k
    }

    pub fn statics(&self) -> &NodeStatics {
        &self.statics
    }

    /// One full iteration; returns the sup-norm change.
    pub fn step(&mut self) -> Result<f64> {
        let nz = self.proc.len();
        let blocks: Vec<Vec<usize>> = if self.opts.gauss_seidel {
            (0..nz).map(|s| vec![s]).collect()
        } else {
            vec![(0..nz).collect()]
        };
        let mut resid = 0.0f64;
        let mut worst = None;
        let mut failed = 0;
        for block in blocks {
            let (outs, f) = self.solve_block(&block)?;
            failed += f;
            for (s, slice) in block.iter().zip(outs) {
                let (r, w) = self.write_slice(*s, &slice);
                if r > resid {
                    resid = r;
                    worst = Some(w);
                }
            }
        }
        if !resid.is_finite() {
            return Err(Error::NumericRange {
                what: "marginal value update",
                value: resid,
            });
        }
        self.history.push(resid);
        self.worst = worst;
        self.nonmonotone_lines = failed;
        Ok(resid)
    }

    /// Iterates to convergence.
    pub fn solve(mut self) -> Result<PolicySolution> {
        let mut resid = f64::INFINITY;
        while self.history.len() < self.opts.max_iter {
            resid = self.step()?;
            if resid < self.opts.tol {
                return Ok(self.finish(resid));
            }
        }
        Err(Error::NonConvergence {
            what: "firm problem",
            iterations: self.history.len(),
            residual: resid,
            worst: self.worst,
        })
    }

    fn finish(self, resid: f64) -> PolicySolution {
        PolicySolution {
            agg: self.agg,
            v_m: self.v_m,
            v_k: self.v_k,
            pol_a: self.pol_a,
            pol_i: self.pol_i,
            next_m: self.next_m,
            next_k: self.next_k,
            flags: self.flags,
            statics: self.statics,
            iterations: self.history.len(),
            max_resid: resid,
            resid_history: self.history,
            nonmonotone_lines: self.nonmonotone_lines,
        }
    }

    /// Continuation slices `beta~ E[V(., ., z') | z_s]` for one productivity
    /// row, stored `i + n_m * j`.
    fn continuation(&self, s: usize) -> (Vec<f64>, Vec<f64>) {
        let bt = self.dc.beta_tilde;
        let ea = expected_continuation(&self.v_m, self.proc, s);
        let ek = expected_continuation(&self.v_k, self.proc, s);
        let (nm, nk) = ea.dim();
        let mut la = vec![0.0; nm * nk];
        let mut lk = vec![0.0; nm * nk];
        for j in 0..nk {
            for i in 0..nm {
                la[i + nm * j] = bt * ea[[i, j]];
                lk[i + nm * j] = bt * ek[[i, j]];
            }
        }
        (la, lk)
    }

    fn solve_block(&self, block: &[usize]) -> Result<(Vec<Vec<NodeOut>>, usize)> {
        let nm = self.grids.n_m();
        let nk = self.grids.n_k();
        let conts: Vec<(Vec<f64>, Vec<f64>)> = block.par_iter().map(|&s| self.continuation(s)).collect();

        let w = self.agg.wage;
        let pm = self.agg.p_m;
        let a_cap = self.grids.m_max() * pm;
        let i_cap = self.grids.k_max();
        let (am, ak) = (self.p.alpha_a, self.p.alpha_k);
        let (dm, dk) = (self.p.delta_m, self.p.delta_k);

        // Pass A: customer lines at fixed (k'_j, z_s) -> m'(m) on structured m.
        let pass_a: Vec<Result<Vec<f64>>> = (0..if dm < 1.0 { block.len() * nk } else { 0 })
            .into_par_iter()
            .map(|line| {
                let (b, j) = (line / nk, line % nk);
                let la = &conts[b].0;
                let implied: Vec<f64> = (0..nm)
                    .map(|p| {
                        let a = inverse_marginal_cost(la[p + nm * j] / (w * pm), am).min(a_cap);
                        (self.grids.m_nodes[p] - a / pm) / (1.0 - dm)
                    })
                    .collect();
                let vals: Vec<f64> = (0..nm).map(|p| la[p + nm * j]).collect();
                invert_endogenous_line(&self.grids.m_nodes, &implied, &vals, &self.grids.m_nodes)
                    .map(|l| l.next)
                    .map_err(|e| match e {
                        Error::NonMonotoneLine { position } => Error::GridInversion {
                            pass: "customer",
                            line: j,
                            z: block[b],
                            position,
                        },
                        other => other,
                    })
            })
            .collect();

        // Pass B: capital lines at fixed (m'_i, z_s) -> k'(k) on structured k.
        let pass_b: Vec<Result<Vec<f64>>> = (0..if dk < 1.0 { block.len() * nm } else { 0 })
            .into_par_iter()
            .map(|line| {
                let (b, i) = (line / nm, line % nm);
                let lk = &conts[b].1;
                let implied: Vec<f64> = (0..nk)
                    .map(|q| {
                        let inv = inverse_marginal_cost(lk[i + nm * q] / w, ak).min(i_cap);
                        (self.grids.k_nodes[q] - inv) / (1.0 - dk)
                    })
                    .collect();
                let vals: Vec<f64> = (0..nk).map(|q| lk[i + nm * q]).collect();
                invert_endogenous_line(&self.grids.k_nodes, &implied, &vals, &self.grids.k_nodes)
                    .map(|l| l.next)
                    .map_err(|e| match e {
                        Error::NonMonotoneLine { position } => Error::GridInversion {
                            pass: "capital",
                            line: i,
                            z: block[b],
                            position,
                        },
                        other => other,
                    })
            })
            .collect();

        let failed = pass_a.iter().chain(&pass_b).filter(|l| l.is_err()).count();
        if self.opts.strict_lines {
            if let Some(e) = pass_a.iter().chain(&pass_b).find_map(|l| l.as_ref().err()) {
                return Err(match e {
                    Error::GridInversion { pass, line, z, position } => Error::GridInversion {
                        pass,
                        line: *line,
                        z: *z,
                        position: *position,
                    },
                    other => Error::Configuration(other.to_string()),
                });
            }
        }

        let outs = (0..block.len())
            .map(|b| {
                let s = block[b];
                (0..nm * nk)
                    .into_par_iter()
                    .map(|node| {
                        let (i, j) = (node % nm, node / nm);
                        // cross the two line maps for an initial (m', k')
                        let mut mp = self.next_m[[i, j, s]];
                        let mut kp = self.next_k[[i, j, s]];
                        // lines that failed to invert leave the previous iterate
                        for _ in 0..3 {
                            let by = bracket(&self.grids.k_nodes, kp);
                            if let (Some(lo), Some(hi)) = (line(&pass_a, b * nk + by.lo), line(&pass_a, b * nk + by.lo + 1)) {
                                mp = (1.0 - by.weight) * lo[i] + by.weight * hi[i];
                            }
                            let bx = bracket(&self.grids.m_nodes, mp);
                            if let (Some(lo), Some(hi)) = (line(&pass_b, b * nm + bx.lo), line(&pass_b, b * nm + bx.lo + 1)) {
                                kp = (1.0 - bx.weight) * lo[j] + bx.weight * hi[j];
                            }
                        }
                        self.resolve_node(i, j, &conts[b], mp, kp)
                    })
                    .collect::<Vec<_>>()
            })
            .collect();
        Ok((outs, failed))
    }

    /// Solves the two first-order conditions at node `(i, j)` against the
    /// bilinear continuation surfaces, starting from `(mp0, kp0)`.
    fn resolve_node(&self, i: usize, j: usize, cont: &(Vec<f64>, Vec<f64>), mp0: f64, kp0: f64) -> NodeOut {
        let g = self.grids;
        let nm = g.n_m();
        let (la_s, lk_s) = cont;
        let w = self.agg.wage;
        let pm = self.agg.p_m;
        let (dm, dk) = (self.p.delta_m, self.p.delta_k);
        let m = g.m_nodes[i];
        let k = g.k_nodes[j];
        let a_cap = g.m_max() * pm;
        let i_cap = g.k_max();
        let surface = |bx: &Bracket, by: &Bracket| {
            (
                bilinear_at(bx, by, |p, q| la_s[p + nm * q]),
                bilinear_at(bx, by, |p, q| lk_s[p + nm * q]),
            )
        };
        let mut a = (pm * (mp0 - (1.0 - dm) * m)).clamp(0.0, a_cap);
        let mut inv = (kp0 - (1.0 - dk) * k).clamp(0.0, i_cap);
        for it in 0..400 {
            let bx = bracket(&g.m_nodes, (1.0 - dm) * m + a / pm);
            let by = bracket(&g.k_nodes, (1.0 - dk) * k + inv);
            let (la, lk) = surface(&bx, &by);
            let a_new = inverse_marginal_cost(la / (w * pm), self.p.alpha_a).min(a_cap);
            let i_new = inverse_marginal_cost(lk / w, self.p.alpha_k).min(i_cap);
            let done = (a_new - a).abs() <= 1e-14 * a_new.max(a) && (i_new - inv).abs() <= 1e-14 * i_new.max(inv);
            // plain substitution first; damp if a kink makes it cycle
            let damp = if it < 30 { 1.0 } else if it < 200 { 0.5 } else { 0.2 };
            a += damp * (a_new - a);
            inv += damp * (i_new - inv);
            if done {
                break;
            }
        }
        let next_m = (1.0 - dm) * m + a / pm;
        let next_k = (1.0 - dk) * k + inv;
        let bx = bracket(&g.m_nodes, next_m);
        let by = bracket(&g.k_nodes, next_k);
        let (lam_a, lam_k) = surface(&bx, &by);
        let mut flags = 0;
        if a >= a_cap {
            flags |= FLAG_ADS_CLIPPED;
        }
        if inv >= i_cap {
            flags |= FLAG_INV_CLIPPED;
        }
        if bx.clamped != Clamp::None {
            flags |= FLAG_M_OUTSIDE;
        }
        if by.clamped != Clamp::None {
            flags |= FLAG_K_OUTSIDE;
        }
        NodeOut {
            a,
            inv,
            next_m,
            next_k,
            lam_a,
            lam_k,
            flags,
        }
    }

    fn write_slice(&mut self, s: usize, slice: &[NodeOut]) -> (f64, NodeIndex) {
        let nm = self.grids.n_m();
        let (dm, dk) = (self.p.delta_m, self.p.delta_k);
        let mut resid = 0.0f64;
        let mut worst = NodeIndex { m: 0, k: 0, z: s };
        for (node, out) in slice.iter().enumerate() {
            let (i, j) = (node % nm, node / nm);
            let idx = [i, j, s];
            let vm = self.statics.pi_m[idx] + (1.0 - dm) * out.lam_a;
            let vk = self.statics.pi_k[idx] + (1.0 - dk) * out.lam_k;
            let r = ((vm - self.v_m[idx]).abs() / (1.0 + vm.abs())).max((vk - self.v_k[idx]).abs() / (1.0 + vk.abs()));
            if r > resid || r.is_nan() {
                resid = if r.is_nan() { f64::NAN } else { r };
                worst = NodeIndex { m: i, k: j, z: s };
                if r.is_nan() {
                    break;
                }
            }
            self.v_m[idx] = vm;
            self.v_k[idx] = vk;
            self.pol_a[idx] = out.a;
            self.pol_i[idx] = out.inv;
            self.next_m[idx] = out.next_m;
            self.next_k[idx] = out.next_k;
            self.flags[idx] = out.flags;
        }
        (resid, worst)
    }
}

fn line(lines: &[Result<Vec<f64>>], k: usize) -> Option<&Vec<f64>> {
    lines.get(k).and_then(|l| l.as_ref().ok())
}

/// Solves the firm problem from the static-profit initial guess.
pub fn solve_firm_problem(
    grids: &StateGrids,
    proc: &ProductivityProcess,
    agg: AggregateGuess,
    p: &Parameters,
    opts: SolverOptions,
) -> Result<PolicySolution> {
    FirmSolver::new(grids, proc, agg, p, opts)?.solve()
}

/// Bilinear policy lookup at an off-grid state for productivity node `s`.
pub fn interpolate_policy(values: &Array3<f64>, grids: &StateGrids, m: f64, k: f64, s: usize) -> f64 {
    let bx = bracket(&grids.m_nodes, m);
    let by = bracket(&grids.k_nodes, k);
    bilinear_at(&bx, &by, |i, j| values[[i, j, s]])
}

/// First-order-condition residuals at one node, relative to the marginal
/// value side: `(advertising, investment)`.
pub fn foc_residuals(sol: &PolicySolution, grids: &StateGrids, proc: &ProductivityProcess, p: &Parameters, node: NodeIndex) -> (f64, f64) {
    let dc = derived_constants(p);
    let ea = expected_continuation(&sol.v_m, proc, node.z);
    let ek = expected_continuation(&sol.v_k, proc, node.z);
    let idx = [node.m, node.k, node.z];
    let bx = bracket(&grids.m_nodes, sol.next_m[idx]);
    let by = bracket(&grids.k_nodes, sol.next_k[idx]);
    let la = dc.beta_tilde * bilinear_at(&bx, &by, |i, j| ea[[i, j]]);
    let lk = dc.beta_tilde * bilinear_at(&bx, &by, |i, j| ek[[i, j]]);
    let agg = sol.agg;
    let cost_a = agg.wage * agg.p_m * crate::model::marginal_cost(sol.pol_a[idx], p.alpha_a);
    let cost_k = agg.wage * crate::model::marginal_cost(sol.pol_i[idx], p.alpha_k);
    ((cost_a - la).abs() / la, (cost_k - lk).abs() / lk)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::productivity::discretize;

    fn setup(n: usize, n_z: usize) -> (StateGrids, ProductivityProcess, Parameters) {
        let p = Parameters::default();
        let grids = StateGrids::log_spaced(n, 0.05, 20.0, n, 0.01, 20.0).unwrap();
        let proc = discretize(p.rho, p.sigma_z, 0.0, n_z, 3.0).unwrap();
        (grids, proc, p)
    }

    fn agg() -> AggregateGuess {
        AggregateGuess::new(0.74, 0.64, 1.3).unwrap()
    }

    #[test]
    fn zero_discounting_gives_static_marginals_and_no_spending() {
        let (grids, proc, mut p) = setup(10, 3);
        p.beta = 0.0;
        let sol = solve_firm_problem(&grids, &proc, agg(), &p, SolverOptions::default()).unwrap();
        assert!(sol.pol_a.iter().all(|&a| a == 0.0));
        assert!(sol.pol_i.iter().all(|&i| i == 0.0));
        assert_eq!(sol.v_m, sol.statics.pi_m);
        assert_eq!(sol.v_k, sol.statics.pi_k);
    }

    #[test]
    fn first_iterate_is_static_marginal_profit() {
        let (grids, proc, p) = setup(8, 3);
        let s = FirmSolver::new(&grids, &proc, agg(), &p, SolverOptions::default()).unwrap();
        assert_eq!(s.v_m(), &s.statics().pi_m);
        assert_eq!(s.v_k(), &s.statics().pi_k);
    }

    #[test]
    fn continuation_under_identity_chain_is_the_same_slice() {
        let proc = ProductivityProcess::from_parts(vec![0.9, 1.0, 1.1], vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]], vec![0.2, 0.6, 0.2]).unwrap();
        let v = Array3::from_shape_fn((4, 5, 3), |(i, j, s)| (i * 100 + j * 10 + s) as f64);
        for s in 0..3 {
            assert_eq!(expected_continuation(&v, &proc, s), v.index_axis(ndarray::Axis(2), s));
        }
    }

    #[test]
    fn iid_continuation_ignores_current_node() {
        let proc = discretize(0.0, 0.04, 0.0, 5, 3.0).unwrap();
        let v = Array3::from_shape_fn((4, 4, 5), |(i, j, s)| ((i + 1) * (j + 2)) as f64 * (1.0 + s as f64).sqrt());
        let first = expected_continuation(&v, &proc, 0);
        for s in 1..5 {
            let e = expected_continuation(&v, &proc, s);
            assert!(e.iter().zip(&first).all(|(a, b)| (a - b).abs() < 1e-12));
        }
    }

    #[test]
    fn continuation_matches_dense_product() {
        use rand::{Rng, SeedableRng};
        let proc = discretize(0.82, 0.04, 0.0, 7, 3.0).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let v = Array3::from_shape_fn((6, 5, 7), |_| rng.random::<f64>());
        for s in 0..7 {
            let e = expected_continuation(&v, &proc, s);
            for i in 0..6 {
                for j in 0..5 {
                    let dense: f64 = (0..7).map(|sp| proc.transition[s][sp] * v[[i, j, sp]]).sum();
                    assert!((e[[i, j]] - dense).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn converged_policies_satisfy_the_contract() {
        let (grids, proc, p) = setup(16, 5);
        let a = agg();
        let sol = solve_firm_problem(&grids, &proc, a, &p, SolverOptions::default()).unwrap();
        assert!(sol.max_resid < 1e-7);
        let (nm, nk, nz) = sol.shape();
        for i in 0..nm {
            for j in 0..nk {
                for s in 0..nz {
                    let idx = [i, j, s];
                    assert!(sol.pol_a[idx] >= 0.0 && sol.pol_i[idx] >= 0.0);
                    assert!(sol.v_m[idx] > 0.0 && sol.v_k[idx] > 0.0);
                    assert!(sol.pol_a[idx] <= grids.m_max() * a.p_m * (1.0 + 1e-12));
                    let nm_ = (1.0 - p.delta_m) * grids.m_nodes[i] + sol.pol_a[idx] / a.p_m;
                    let nk_ = (1.0 - p.delta_k) * grids.k_nodes[j] + sol.pol_i[idx];
                    assert!((sol.next_m[idx] - nm_).abs() <= 1e-12 * nm_.max(1.0));
                    assert!((sol.next_k[idx] - nk_).abs() <= 1e-12 * nk_.max(1.0));
                    if s > 0 {
                        let prev = [i, j, s - 1];
                        assert!(sol.pol_a[idx] >= sol.pol_a[prev] * (1.0 - 1e-9), "ads not increasing in z at {idx:?}");
                        assert!(sol.pol_i[idx] >= sol.pol_i[prev] * (1.0 - 1e-9), "investment not increasing in z at {idx:?}");
                    }
                }
            }
        }
    }

    #[test]
    fn interior_nodes_satisfy_first_order_conditions() {
        let (grids, proc, p) = setup(16, 5);
        let sol = solve_firm_problem(&grids, &proc, agg(), &p, SolverOptions::default()).unwrap();
        let (nm, nk, nz) = sol.shape();
        let mut checked = 0;
        for i in 0..nm {
            for j in 0..nk {
                for s in 0..nz {
                    let idx = [i, j, s];
                    let edge = i == 0 || j == 0 || i + 1 == nm || j + 1 == nk;
                    if edge || sol.flags[idx] != 0 || sol.pol_a[idx] == 0.0 || sol.pol_i[idx] == 0.0 {
                        continue;
                    }
                    let (ra, rk) = foc_residuals(&sol, &grids, &proc, &p, NodeIndex { m: i, k: j, z: s });
                    assert!(ra < 1e-6 && rk < 1e-6, "node {idx:?}: residuals {ra:e}, {rk:e}");
                    checked += 1;
                }
            }
        }
        assert!(checked > (nm - 2) * (nk - 2) * nz / 2);
    }

    #[test]
    fn gauss_seidel_reaches_the_same_fixed_point() {
        let (grids, proc, p) = setup(10, 3);
        let jac = solve_firm_problem(&grids, &proc, agg(), &p, SolverOptions::default()).unwrap();
        let gs = solve_firm_problem(
            &grids,
            &proc,
            agg(),
            &p,
            SolverOptions {
                gauss_seidel: true,
                ..SolverOptions::default()
            },
        )
        .unwrap();
        for (a, b) in jac.pol_a.iter().zip(&gs.pol_a) {
            assert!((a - b).abs() <= 1e-5 * (1.0 + a.abs()));
        }
    }

    #[test]
    fn too_few_nodes_rejected() {
        assert!(StateGrids::log_spaced(4, 0.1, 1.0, 10, 0.1, 1.0).is_err());
    }

    #[test]
    fn warm_start_shape_checked() {
        let (grids, proc, p) = setup(8, 3);
        let s = FirmSolver::new(&grids, &proc, agg(), &p, SolverOptions::default()).unwrap();
        let bad = Array3::from_elem((2, 2, 2), 1.0);
        assert!(s.with_marginal_values(&bad, &bad).is_err());
    }
}
