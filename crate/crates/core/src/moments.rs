//! Moments of the stationary distribution, aggregate accounts and
//! consumption counterfactuals.

use serde::Serialize;

use crate::distribution::entrant_capital;
use crate::egm::{interpolate_policy, StateGrids};
use crate::equilibrium::{aggregator_at, EquilibriumResult};
use crate::error::{Error, Result};
use crate::model::{derived_constants, labor_requirement, static_solve_with, FirmState, Parameters};
use crate::panel::FirmPanel;
use crate::productivity::ProductivityProcess;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct MomentSet {
    pub pct_negative_earnings: f64,
    /// Mean spell among negative-earnings firm-years; 0 when there are none.
    pub avg_negative_spell: f64,
    pub sd_sales: f64,
    pub sd_earnings: f64,
    pub median_ads_share: f64,
    pub median_prodcost_share: f64,
    pub median_investment_share: f64,
    pub sales_weighted_z: f64,
    pub pct_negative_profits: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct AggregateAccounts {
    pub consumption: f64,
    pub investment: f64,
    pub advertising: f64,
    pub gdp: f64,
}

/// Accounting quantities at one node.
#[derive(Debug, Clone, Copy)]
pub struct NodeAccounts {
    pub mass: f64,
    pub z: f64,
    pub revenue: f64,
    pub prod_cost: f64,
    pub ads_spend: f64,
    pub inv_spend: f64,
}

impl NodeAccounts {
    pub fn earnings(&self) -> f64 {
        self.revenue - self.prod_cost - self.ads_spend
    }

    pub fn profit(&self) -> f64 {
        self.earnings() - self.inv_spend
    }
}

/// Node-level accounts for every node carrying mass.
pub fn node_accounts(eq: &EquilibriumResult, proc: &ProductivityProcess, p: &Parameters) -> Vec<NodeAccounts> {
    let w = eq.agg.wage;
    eq.dist
        .mass
        .indexed_iter()
        .filter(|(_, &m)| m > 0.0)
        .map(|((i, j, s), &mass)| {
            let idx = [i, j, s];
            NodeAccounts {
                mass,
                z: proc.z_nodes[s],
                revenue: eq.pol.statics.revenue[idx],
                prod_cost: w * eq.pol.statics.labor_prod[idx],
                ads_spend: w * labor_requirement(eq.pol.pol_a[idx], p.alpha_a),
                inv_spend: w * labor_requirement(eq.pol.pol_i[idx], p.alpha_k),
            }
        })
        .collect()
}

/// Accounts at the continuous states the stationary distribution reaches in
/// one period: every node's survivors at their exact `(m', k')` for each
/// next productivity, plus entrants at their exact endowment. The static
/// block is evaluated exactly there and policies are interpolated, as in the
/// panel simulator. Node masses carry the grid's lottery error; these points
/// remove it for entrants and one-year-olds.
pub fn reached_accounts(eq: &EquilibriumResult, grids: &StateGrids, proc: &ProductivityProcess, p: &Parameters) -> Result<Vec<NodeAccounts>> {
    let dc = derived_constants(p);
    let agg = eq.agg;
    let at = |m: f64, k: f64, s: usize, mass: f64| -> Result<NodeAccounts> {
        let z = proc.z_nodes[s];
        let st = static_solve_with(&FirmState { m, k, z }, &agg, p, &dc)?;
        let a = interpolate_policy(&eq.pol.pol_a, grids, m, k, s).max(0.0);
        let inv = interpolate_policy(&eq.pol.pol_i, grids, m, k, s).max(0.0);
        Ok(NodeAccounts {
            mass,
            z,
            revenue: st.revenue,
            prod_cost: st.cost,
            ads_spend: agg.wage * labor_requirement(a, p.alpha_a),
            inv_spend: agg.wage * labor_requirement(inv, p.alpha_k),
        })
    };
    let (m_lo, m_hi) = (grids.m_nodes[0], grids.m_max());
    let (k_lo, k_hi) = (grids.k_nodes[0], grids.k_max());
    let mut out = Vec::new();
    for ((i, j, s), &mass) in eq.dist.mass.indexed_iter() {
        if mass <= 0.0 {
            continue;
        }
        let m = eq.pol.next_m[[i, j, s]].clamp(m_lo, m_hi);
        let k = eq.pol.next_k[[i, j, s]].clamp(k_lo, k_hi);
        for (sp, &t) in proc.transition[s].iter().enumerate() {
            if t > 0.0 {
                out.push(at(m, k, sp, (1.0 - p.theta) * mass * t)?);
            }
        }
    }
    let k0 = entrant_capital(p, grids);
    for (sp, &e) in proc.entrant_dist.iter().enumerate() {
        if e > 0.0 {
            out.push(at(p.m_under, k0, sp, p.theta * e)?);
        }
    }
    Ok(out)
}

/// Lower weighted median: smallest value whose cumulative weight reaches
/// half the total.
pub fn weighted_median(mut pairs: Vec<(f64, f64)>) -> f64 {
    if pairs.is_empty() {
        return f64::NAN;
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let total: f64 = pairs.iter().map(|p| p.1).sum();
    let mut acc = 0.0;
    for (x, w) in &pairs {
        acc += w;
        if acc >= 0.5 * total {
            return *x;
        }
    }
    pairs.last().unwrap().0
}

fn weighted_sd(pairs: impl Iterator<Item = (f64, f64)> + Clone) -> f64 {
    let total: f64 = pairs.clone().map(|p| p.1).sum();
    let mean = pairs.clone().map(|(x, w)| x * w).sum::<f64>() / total;
    let var = pairs.map(|(x, w)| w * (x - mean).powi(2)).sum::<f64>() / total;
    var.sqrt()
}

/// Mean spell counter among negative-earnings firm-years, 0 when none.
pub fn average_negative_spell(panel: &FirmPanel) -> f64 {
    let (sum, n) = panel
        .records
        .iter()
        .filter(|r| r.earnings < 0.0)
        .fold((0u64, 0u64), |(s, n), r| (s + r.spell as u64, n + 1));
    if n == 0 {
        0.0
    } else {
        sum as f64 / n as f64
    }
}

/// Moments of the distribution, with the spell statistic taken from a panel
/// simulated at the same aggregates.
pub fn compute_moments(
    eq: &EquilibriumResult,
    panel: &FirmPanel,
    grids: &StateGrids,
    proc: &ProductivityProcess,
    p: &Parameters,
) -> Result<MomentSet> {
    let (c, w, pm) = panel.agg;
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-12 * a.abs().max(b.abs());
    if !(close(c, eq.agg.c_agg) && close(w, eq.agg.wage) && close(pm, eq.agg.p_m)) {
        return Err(Error::Mismatch(format!(
            "panel aggregates ({c}, {w}, {pm}) differ from the equilibrium ({}, {}, {})",
            eq.agg.c_agg, eq.agg.wage, eq.agg.p_m
        )));
    }
    let mut m = distribution_moments(eq, grids, proc, p)?;
    m.avg_negative_spell = average_negative_spell(panel);
    Ok(m)
}

/// Distribution-based moments over [`reached_accounts`];
/// `avg_negative_spell` is left at 0.
pub fn distribution_moments(eq: &EquilibriumResult, grids: &StateGrids, proc: &ProductivityProcess, p: &Parameters) -> Result<MomentSet> {
    Ok(moments_of(&reached_accounts(eq, grids, proc, p)?))
}

/// Moments of a weighted set of accounts.
pub fn moments_of(nodes: &[NodeAccounts]) -> MomentSet {
    let total: f64 = nodes.iter().map(|n| n.mass).sum();
    let share = |f: fn(&NodeAccounts) -> f64| weighted_median(nodes.iter().map(|n| (f(n) / n.revenue, n.mass)).collect());
    let sales = nodes.iter().map(|n| n.revenue * n.mass).sum::<f64>();
    MomentSet {
        pct_negative_earnings: nodes.iter().filter(|n| n.earnings() < 0.0).map(|n| n.mass).sum::<f64>() / total,
        avg_negative_spell: 0.0,
        sd_sales: weighted_sd(nodes.iter().map(|n| (n.revenue, n.mass))),
        sd_earnings: weighted_sd(nodes.iter().map(|n| (n.earnings(), n.mass))),
        median_ads_share: share(|n| n.ads_spend),
        median_prodcost_share: share(|n| n.prod_cost),
        median_investment_share: share(|n| n.inv_spend),
        sales_weighted_z: nodes.iter().map(|n| n.revenue * n.mass * n.z).sum::<f64>() / sales,
        pct_negative_profits: nodes.iter().filter(|n| n.profit() < 0.0).map(|n| n.mass).sum::<f64>() / total,
    }
}

/// The same moments estimated from a panel alone.
pub fn panel_moments(panel: &FirmPanel) -> MomentSet {
    let recs = &panel.records;
    let n = recs.len() as f64;
    let share = |f: fn(&crate::panel::FirmYear) -> f64| weighted_median(recs.iter().map(|r| (f(r) / r.revenue, 1.0)).collect());
    let sales: f64 = recs.iter().map(|r| r.revenue).sum();
    MomentSet {
        pct_negative_earnings: recs.iter().filter(|r| r.earnings < 0.0).count() as f64 / n,
        avg_negative_spell: average_negative_spell(panel),
        sd_sales: weighted_sd(recs.iter().map(|r| (r.revenue, 1.0))),
        sd_earnings: weighted_sd(recs.iter().map(|r| (r.earnings, 1.0))),
        median_ads_share: share(|r| r.ads_spend),
        median_prodcost_share: share(|r| r.prod_cost),
        median_investment_share: share(|r| r.inv_spend),
        sales_weighted_z: recs.iter().map(|r| r.revenue * r.z).sum::<f64>() / sales,
        pct_negative_profits: recs.iter().filter(|r| r.profit < 0.0).count() as f64 / n,
    }
}

/// Consumption, investment and advertising spending at an equilibrium.
pub fn aggregate_accounts(eq: &EquilibriumResult) -> AggregateAccounts {
    let consumption = eq.c_implied;
    let investment = eq.agg.wage * eq.dist.labor_inv;
    let advertising = eq.agg.wage * eq.dist.labor_ads;
    AggregateAccounts {
        consumption,
        investment,
        advertising,
        gdp: consumption + investment + advertising,
    }
}

/// Household aggregator over the equilibrium's per-customer quantities and
/// customer bases, with the utility weights evaluated at `phi_eval`.
///
/// For an equilibrium solved at `phi`, `phi_eval` different from `phi`
/// holds every firm choice fixed and changes only how the household values
/// concentrated purchases. The mirror case is the equilibrium at some `phi`
/// evaluated at `phi_eval = 0`.
pub fn counterfactual_consumption(eq: &EquilibriumResult, grids: &StateGrids, p: &Parameters, phi_eval: f64) -> f64 {
    aggregator_at(&eq.pol, &eq.dist, grids, p.sigma, p.phi, phi_eval).1
}

/// Header and values of one output row: moments followed by accounts.
pub fn csv_row(m: &MomentSet, a: &AggregateAccounts) -> (Vec<&'static str>, Vec<f64>) {
    (
        vec![
            "pct_negative_earnings",
            "avg_negative_spell",
            "sd_sales",
            "sd_earnings",
            "median_ads_share",
            "median_prodcost_share",
            "median_investment_share",
            "sales_weighted_z",
            "pct_negative_profits",
            "consumption",
            "investment",
            "advertising",
            "gdp",
        ],
        vec![
            m.pct_negative_earnings,
            m.avg_negative_spell,
            m.sd_sales,
            m.sd_earnings,
            m.median_ads_share,
            m.median_prodcost_share,
            m.median_investment_share,
            m.sales_weighted_z,
            m.pct_negative_profits,
            a.consumption,
            a.investment,
            a.advertising,
            a.gdp,
        ],
    )
}
