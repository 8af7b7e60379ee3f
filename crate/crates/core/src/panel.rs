//! Seeded forward simulation of a panel of firms.
//!
//! Each firm carries continuous `(m, k)` and a productivity node. Policies
//! are interpolated bilinearly in `(m, k)`; the static block is evaluated
//! exactly at the continuous state. A firm exits with probability `theta`
//! at the end of each year and is replaced at once by an entrant at
//! `(m_under, k0)` with productivity drawn from the entrant distribution.
//!
//! Every firm owns a ChaCha8 stream selected by its id, so results do not
//! depend on scheduling or thread count.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::distribution::entrant_capital;
use crate::egm::{interpolate_policy, PolicySolution, StateGrids};
use crate::error::{Error, Result};
use crate::model::{derived_constants, labor_requirement, static_solve_with, FirmState, Parameters};
use crate::productivity::ProductivityProcess;

/// Spells longer than this are recorded at the cap.
pub const SPELL_CAP: u32 = 19;

/// Firms per work unit; chunks are combined in firm order.
const CHUNK: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PanelOptions {
    pub n_firms: usize,
    /// Recorded years after burn-in.
    pub n_years: usize,
    pub burn_in: usize,
    pub seed: u64,
    /// Common starting state `(m, k, z node)`; entrants otherwise.
    pub initial: Option<(f64, f64, usize)>,
}

impl Default for PanelOptions {
    fn default() -> Self {
        Self {
            n_firms: 10_000,
            n_years: 10,
            burn_in: 200,
            seed: 0,
            initial: None,
        }
    }
}

/// One firm-year. Spending fields are in consumption units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FirmYear {
    pub firm: u32,
    pub year: u32,
    /// Years since entry.
    pub age: u32,
    pub m: f64,
    pub k: f64,
    pub z_index: u16,
    pub z: f64,
    pub revenue: f64,
    /// Revenue less production and advertising labor costs.
    pub earnings: f64,
    /// Earnings less investment labor costs.
    pub profit: f64,
    pub prod_cost: f64,
    pub ads_spend: f64,
    pub inv_spend: f64,
    /// The firm exits at the end of this year.
    pub exits: bool,
    /// Consecutive years of negative earnings including this one, capped.
    pub spell: u32,
}

pub const PANEL_COLUMNS: [&str; 15] = [
    "firm", "year", "age", "m", "k", "z_index", "z", "revenue", "earnings", "profit", "prod_cost", "ads_spend",
    "inv_spend", "exits", "spell",
];

#[derive(Debug, Clone)]
pub struct FirmPanel {
    /// Records ordered by firm, then year.
    pub records: Vec<FirmYear>,
    pub n_firms: usize,
    pub n_years: usize,
    pub seed: u64,
    /// Aggregates the panel was simulated at: `(c_agg, wage, p_m)`.
    pub agg: (f64, f64, f64),
    /// Firm-years whose next state left the grid hull and was clamped.
    pub clamped: usize,
}

impl FirmPanel {
    /// Writes the panel with columns in [`PANEL_COLUMNS`] order.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(PANEL_COLUMNS)?;
        for r in &self.records {
            w.write_record(&[
                r.firm.to_string(),
                r.year.to_string(),
                r.age.to_string(),
                r.m.to_string(),
                r.k.to_string(),
                r.z_index.to_string(),
                r.z.to_string(),
                r.revenue.to_string(),
                r.earnings.to_string(),
                r.profit.to_string(),
                r.prod_cost.to_string(),
                r.ads_spend.to_string(),
                r.inv_spend.to_string(),
                (r.exits as u8).to_string(),
                r.spell.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
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

/// Simulates firms and hands every recorded firm-year to `visit`, which
/// accumulates into a per-chunk value; chunk values are then combined in
/// firm order with `merge`. Returns the combined value and the clamp count.
pub fn simulate_fold<T, I, V, M>(
    pol: &PolicySolution,
    grids: &StateGrids,
    proc: &ProductivityProcess,
    p: &Parameters,
    opts: &PanelOptions,
    init: I,
    visit: V,
    merge: M,
) -> Result<(T, usize)>
where
    T: Send,
    I: Fn() -> T + Sync,
    V: Fn(&mut T, &FirmYear) + Sync,
    M: Fn(T, T) -> T,
{
    if opts.n_firms == 0 {
        return Err(Error::invalid("n_firms", "need at least one firm"));
    }
    if opts.n_firms > u32::MAX as usize {
        return Err(Error::invalid("n_firms", "too many firms"));
    }
    let (nm, nk, nz) = pol.shape();
    if grids.n_m() != nm || grids.n_k() != nk || proc.len() != nz {
        return Err(Error::Configuration("policy arrays do not match the grids".into()));
    }
    if let Some((m, k, s)) = opts.initial {
        FirmState::new(m, k, 1.0)?;
        if s >= nz {
            return Err(Error::invalid("initial", "productivity node out of range"));
        }
    }
    let dc = derived_constants(p);
    let agg = pol.agg;
    let k0 = entrant_capital(p, grids);
    let (m_lo, m_hi) = (grids.m_nodes[0], grids.m_max());
    let (k_lo, k_hi) = (grids.k_nodes[0], grids.k_max());
    let years = opts.burn_in + opts.n_years;

    let run_chunk = |c: usize| -> Result<(T, usize)> {
        let mut acc = init();
        let mut clamped = 0;
        let lo = c * CHUNK;
        let hi = (lo + CHUNK).min(opts.n_firms);
        for firm in lo..hi {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            rng.set_stream(firm as u64);
            let (mut m, mut k, mut s) = match opts.initial {
                Some(st) => st,
                None => (p.m_under, k0, draw(&mut rng, &proc.entrant_dist)),
            };
            let mut age = 0u32;
            let mut spell = 0u32;
            for year in 0..years {
                let z = proc.z_nodes[s];
                let st = static_solve_with(&FirmState { m, k, z }, &agg, p, &dc)?;
                let a = interpolate_policy(&pol.pol_a, grids, m, k, s).max(0.0);
                let inv = interpolate_policy(&pol.pol_i, grids, m, k, s).max(0.0);
                let ads_spend = agg.wage * labor_requirement(a, p.alpha_a);
                let inv_spend = agg.wage * labor_requirement(inv, p.alpha_k);
                let earnings = st.revenue - st.cost - ads_spend;
                spell = if earnings < 0.0 { spell + 1 } else { 0 };
                let exits = rng.random::<f64>() < p.theta;
                if year >= opts.burn_in {
                    let rec = FirmYear {
                        firm: firm as u32,
                        year: (year - opts.burn_in) as u32,
                        age,
                        m,
                        k,
                        z_index: s as u16,
                        z,
                        revenue: st.revenue,
                        earnings,
                        profit: earnings - inv_spend,
                        prod_cost: st.cost,
                        ads_spend,
                        inv_spend,
                        exits,
                        spell: spell.min(SPELL_CAP),
                    };
                    visit(&mut acc, &rec);
                }
                if exits {
                    m = p.m_under;
                    k = k0;
                    s = draw(&mut rng, &proc.entrant_dist);
                    age = 0;
                    spell = 0;
                } else {
                    let nm_ = (1.0 - p.delta_m) * m + a / agg.p_m;
                    let nk_ = (1.0 - p.delta_k) * k + inv;
                    m = nm_.clamp(m_lo, m_hi);
                    k = nk_.clamp(k_lo, k_hi);
                    if m != nm_ || k != nk_ {
                        clamped += 1;
                    }
                    s = draw(&mut rng, &proc.transition[s]);
                    age += 1;
                }
            }
        }
        Ok((acc, clamped))
    };

    let chunks = opts.n_firms.div_ceil(CHUNK);
    let parts: Vec<Result<(T, usize)>> = (0..chunks).into_par_iter().map(run_chunk).collect();
    let mut total: Option<T> = None;
    let mut clamped = 0;
    for part in parts {
        let (t, c) = part?;
        clamped += c;
        total = Some(match total {
            None => t,
            Some(acc) => merge(acc, t),
        });
    }
    Ok((total.expect("at least one chunk"), clamped))
}

/// Simulates and stores a panel.
pub fn simulate_panel(
    pol: &PolicySolution,
    grids: &StateGrids,
    proc: &ProductivityProcess,
    p: &Parameters,
    opts: &PanelOptions,
) -> Result<FirmPanel> {
    let (records, clamped) = simulate_fold(
        pol,
        grids,
        proc,
        p,
        opts,
        Vec::new,
        |v: &mut Vec<FirmYear>, r| v.push(*r),
        |mut a, mut b| {
            a.append(&mut b);
            a
        },
    )?;
    Ok(FirmPanel {
        records,
        n_firms: opts.n_firms,
        n_years: opts.n_years,
        seed: opts.seed,
        agg: (pol.agg.c_agg, pol.agg.wage, pol.agg.p_m),
        clamped,
    })
}

/// Spell counters for a sequence of earnings signs (negative = `true`),
/// capped at [`SPELL_CAP`].
pub fn spells(negative: &[bool]) -> Vec<u32> {
    let mut out = Vec::with_capacity(negative.len());
    let mut run = 0u32;
    for &neg in negative {
        run = if neg { run + 1 } else { 0 };
        out.push(run.min(SPELL_CAP));
    }
    out
}
