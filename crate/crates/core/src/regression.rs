//! Within-firm regression of log sales on log customer capital and log
//! physical capital.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::panel::FirmPanel;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RegressionResult {
    /// Coefficient on log customers, one per regime (input panel).
    pub beta_m: Vec<f64>,
    /// Firm-clustered standard errors of `beta_m`.
    pub se_beta_m: Vec<f64>,
    /// Coefficient on log capital; `None` when capital has no within-firm
    /// variation.
    pub alpha_k_hat: Option<f64>,
    pub se_alpha_k: Option<f64>,
    pub n_obs: usize,
    pub n_firms: usize,
    /// R-squared of the demeaned regression.
    pub r2_within: f64,
}

impl RegressionResult {
    /// 95% confidence interval for the regime-`r` customer coefficient.
    pub fn ci95(&self, r: usize) -> (f64, f64) {
        let h = 1.959964 * self.se_beta_m[r];
        (self.beta_m[r] - h, self.beta_m[r] + h)
    }
}

/// OLS on a single panel with firm effects absorbed by demeaning.
pub fn estimate_sales_elasticity(panel: &FirmPanel) -> Result<RegressionResult> {
    estimate_pooled(std::slice::from_ref(panel), false)
}

/// Pools panels from several equilibria (regimes). Firms are distinct across
/// regimes; the customer coefficient is interacted with the regime while
/// the capital coefficient is common. With `control_z` log productivity
/// enters as an additional regressor.
pub fn estimate_pooled(panels: &[FirmPanel], control_z: bool) -> Result<RegressionResult> {
    if panels.is_empty() {
        return Err(Error::RankDeficient("no observations".into()));
    }
    let n_reg = panels.len();
    // rows of [ln m interacted per regime..., ln k, (ln z)], y = ln revenue
    let mut cols: Vec<Vec<f64>> = vec![Vec::new(); n_reg + 1 + control_z as usize];
    let mut y = Vec::new();
    let mut groups = Vec::new();
    let mut n_firms = 0usize;
    for (r, panel) in panels.iter().enumerate() {
        // a reborn firm is a new entity: key on (firm, birth year)
        let mut idx: HashMap<(u32, i64), Vec<usize>> = HashMap::new();
        let start = y.len();
        for (q, rec) in panel.records.iter().enumerate() {
            idx.entry((rec.firm, rec.year as i64 - rec.age as i64)).or_default().push(start + q);
            for (c, col) in cols.iter_mut().enumerate() {
                col.push(if c < n_reg {
                    if c == r {
                        rec.m.ln()
                    } else {
                        0.0
                    }
                } else if c == n_reg {
                    rec.k.ln()
                } else {
                    rec.z.ln()
                });
            }
            y.push(rec.revenue.ln());
        }
        let mut firms: Vec<_> = idx.into_iter().collect();
        firms.sort_by_key(|f| f.0);
        n_firms += firms.len();
        groups.extend(firms.into_iter().map(|f| f.1));
    }
    let n = y.len();
    // within-firm demeaning
    let demean = |v: &mut [f64]| {
        for g in &groups {
            let mean = g.iter().map(|&i| v[i]).sum::<f64>() / g.len() as f64;
            for &i in g {
                v[i] -= mean;
            }
        }
    };
    demean(&mut y);
    cols.iter_mut().for_each(|c| demean(c));

    let ss: Vec<f64> = cols.iter().map(|c| c.iter().map(|x| x * x).sum()).collect();
    for r in 0..n_reg {
        if ss[r] <= 1e-20 * n as f64 {
            return Err(Error::RankDeficient(format!("log customers have no within-firm variation in regime {r}")));
        }
    }
    let k_identified = ss[n_reg] > 1e-20 * n as f64;
    let keep: Vec<usize> = (0..cols.len()).filter(|&c| c != n_reg || k_identified).collect();
    let p = keep.len();
    let x = DMatrix::from_fn(n, p, |i, c| cols[keep[c]][i]);
    let yv = DVector::from_vec(y);
    let xtx = x.transpose() * &x;
    let chol = xtx
        .clone()
        .cholesky()
        .ok_or_else(|| Error::RankDeficient("regressors are collinear".into()))?;
    let beta = chol.solve(&(x.transpose() * &yv));
    let resid = &yv - &x * &beta;
    let ssr = resid.norm_squared();
    let sst = yv.norm_squared();
    let inv = chol.inverse();
    // firm-clustered sandwich
    let mut meat = DMatrix::<f64>::zeros(p, p);
    for g in &groups {
        let mut s = DVector::<f64>::zeros(p);
        for &i in g {
            for c in 0..p {
                s[c] += x[(i, c)] * resid[i];
            }
        }
        meat += &s * s.transpose();
    }
    let g = groups.len() as f64;
    let adj = if g > 1.0 { g / (g - 1.0) } else { 1.0 };
    let vcov = &inv * meat * &inv * adj;
    let se = |c: usize| vcov[(c, c)].max(0.0).sqrt();
    let k_pos = keep.iter().position(|&c| c == n_reg);
    Ok(RegressionResult {
        beta_m: (0..n_reg).map(|r| beta[r]).collect(),
        se_beta_m: (0..n_reg).map(se).collect(),
        alpha_k_hat: k_pos.map(|c| beta[c]),
        se_alpha_k: k_pos.map(se),
        n_obs: n,
        n_firms,
        r2_within: if sst > 0.0 { 1.0 - ssr / sst } else { 1.0 },
    })
}
