//! Domain types and the closed-form static block.
//!
//! A firm with customer base `m`, capital `k` and productivity `z` faces
//! demand `Y = m^(1+phi) P^(-sigma) C` and produces with Cobb-Douglas
//! technology `Y = z k^gamma_k L^gamma_l`. The monopolist's optimum has a
//! closed form, so everything here is a pure function of the state and the
//! aggregates. Closed forms are evaluated in logs and exponentiated last.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Exogenous model parameters. Productivity is in levels outside the
/// discretization; `z_bar` is the mean of entrant log productivity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Parameters {
    /// Annual discount factor.
    pub beta: f64,
    /// Exit (and entry) rate.
    pub theta: f64,
    pub delta_k: f64,
    /// Customer separation rate.
    pub delta_m: f64,
    pub gamma_l: f64,
    pub gamma_k: f64,
    /// Price elasticity of demand.
    pub sigma: f64,
    /// Scale elasticity of demand: elasticity of per-customer demand in the
    /// size of the customer base.
    pub phi: f64,
    pub rho: f64,
    pub sigma_z: f64,
    pub z_bar: f64,
    /// Returns to scale of advertising production, `a = L_a^alpha_a`.
    pub alpha_a: f64,
    /// Returns to scale of investment production, `i = L_k^alpha_k`.
    pub alpha_k: f64,
    /// Customers inherited by an entrant.
    pub m_under: f64,
    /// Entrant capital; `None` places entrants at the capital grid minimum.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k0: Option<f64>,
}

impl Default for Parameters {
    /// The 1980 baseline calibration with `phi = 0`.
    fn default() -> Self {
        Self {
            beta: 0.96,
            theta: 0.11,
            delta_k: 0.10,
            delta_m: 0.15,
            gamma_l: 0.86,
            gamma_k: 0.11,
            sigma: 3.15,
            phi: 0.0,
            rho: 0.82,
            sigma_z: 0.04,
            z_bar: 0.0,
            alpha_a: 0.46,
            alpha_k: 0.83,
            m_under: 0.1,
            k0: None,
        }
    }
}

impl Parameters {
    /// Checks every parameter invariant, naming the first offending field.
    pub fn validate(&self) -> Result<()> {
        let finite = [
            ("beta", self.beta),
            ("theta", self.theta),
            ("delta_k", self.delta_k),
            ("delta_m", self.delta_m),
            ("gamma_l", self.gamma_l),
            ("gamma_k", self.gamma_k),
            ("sigma", self.sigma),
            ("phi", self.phi),
            ("rho", self.rho),
            ("sigma_z", self.sigma_z),
            ("z_bar", self.z_bar),
            ("alpha_a", self.alpha_a),
            ("alpha_k", self.alpha_k),
            ("m_under", self.m_under),
        ];
        for (name, v) in finite {
            if !v.is_finite() {
                return Err(Error::invalid(name, "must be finite"));
            }
        }
        if self.sigma <= 1.0 {
            return Err(Error::invalid("sigma", format!("must exceed 1, got {}", self.sigma)));
        }
        for (name, v) in [("alpha_a", self.alpha_a), ("alpha_k", self.alpha_k)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::invalid(name, format!("must lie in (0, 1), got {v}")));
            }
        }
        if !(0.0..=1.0).contains(&self.theta) {
            return Err(Error::invalid("theta", format!("must lie in [0, 1], got {}", self.theta)));
        }
        for (name, v) in [("delta_k", self.delta_k), ("delta_m", self.delta_m)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::invalid(name, format!("must lie in [0, 1], got {v}")));
            }
        }
        if self.gamma_l <= 0.0 {
            return Err(Error::invalid("gamma_l", "must be positive"));
        }
        if self.gamma_k <= 0.0 {
            return Err(Error::invalid("gamma_k", "must be positive"));
        }
        if self.gamma_l + self.gamma_k > 1.0 + 1e-12 {
            return Err(Error::invalid(
                "gamma_k",
                format!("gamma_l + gamma_k must not exceed 1, got {}", self.gamma_l + self.gamma_k),
            ));
        }
        if self.beta < 0.0 || self.beta * (1.0 - self.theta) >= 1.0 {
            return Err(Error::invalid("beta", "need 0 <= beta and beta * (1 - theta) < 1"));
        }
        if !(0.0..1.0).contains(&self.rho) {
            return Err(Error::invalid("rho", format!("must lie in [0, 1), got {}", self.rho)));
        }
        if self.sigma_z <= 0.0 {
            return Err(Error::invalid("sigma_z", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.m_under) {
            return Err(Error::invalid("m_under", format!("must lie in [0, 1], got {}", self.m_under)));
        }
        if let Some(k0) = self.k0 {
            if !(k0.is_finite() && k0 > 0.0) {
                return Err(Error::invalid("k0", "must be positive"));
            }
        }
        Ok(())
    }

    /// Sets a field by name; used by parameter sweeps and CLI overrides.
    pub fn set(&mut self, name: &str, value: f64) -> Result<()> {
        let slot = match name {
            "beta" => &mut self.beta,
            "theta" => &mut self.theta,
            "delta_k" => &mut self.delta_k,
            "delta_m" => &mut self.delta_m,
            "gamma_l" => &mut self.gamma_l,
            "gamma_k" => &mut self.gamma_k,
            "sigma" => &mut self.sigma,
            "phi" => &mut self.phi,
            "rho" => &mut self.rho,
            "sigma_z" => &mut self.sigma_z,
            "z_bar" => &mut self.z_bar,
            "alpha_a" => &mut self.alpha_a,
            "alpha_k" => &mut self.alpha_k,
            "m_under" => &mut self.m_under,
            "k0" => {
                self.k0 = Some(value);
                return Ok(());
            }
            other => return Err(Error::invalid(other, "unknown parameter name")),
        };
        *slot = value;
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<f64> {
        Ok(match name {
            "beta" => self.beta,
            "theta" => self.theta,
            "delta_k" => self.delta_k,
            "delta_m" => self.delta_m,
            "gamma_l" => self.gamma_l,
            "gamma_k" => self.gamma_k,
            "sigma" => self.sigma,
            "phi" => self.phi,
            "rho" => self.rho,
            "sigma_z" => self.sigma_z,
            "z_bar" => self.z_bar,
            "alpha_a" => self.alpha_a,
            "alpha_k" => self.alpha_k,
            "m_under" => self.m_under,
            "k0" => self
                .k0
                .ok_or_else(|| Error::invalid("k0", "not set (defaults to the capital grid minimum)"))?,
            other => return Err(Error::invalid(other, "unknown parameter name")),
        })
    }
}

/// Constants derived from [`Parameters`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DerivedConstants {
    /// `sigma / ((1 - gamma_l) sigma + gamma_l)`, the curvature of profits in
    /// the demand and cost shifters.
    pub lambda_big: f64,
    /// Markup `sigma / (sigma - 1)`.
    pub mu: f64,
    /// Survival-adjusted discount factor.
    pub beta_tilde: f64,
    /// Elasticity of static profit in customers.
    pub eps_pi_m: f64,
    /// Elasticity of static profit in capital.
    pub eps_pi_k: f64,
}

pub fn derived_constants(p: &Parameters) -> DerivedConstants {
    let denom = (1.0 - p.gamma_l) * p.sigma + p.gamma_l;
    DerivedConstants {
        lambda_big: p.sigma / denom,
        mu: p.sigma / (p.sigma - 1.0),
        beta_tilde: p.beta * (1.0 - p.theta),
        eps_pi_m: (1.0 + p.phi) / denom,
        eps_pi_k: p.gamma_k * (p.sigma - 1.0) / denom,
    }
}

/// Steady-state aggregates taken as given by firms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AggregateGuess {
    /// Aggregate consumption basket.
    pub c_agg: f64,
    pub wage: f64,
    /// Advertising units needed per acquired customer.
    pub p_m: f64,
}

impl AggregateGuess {
    pub fn new(c_agg: f64, wage: f64, p_m: f64) -> Result<Self> {
        let agg = Self { c_agg, wage, p_m };
        agg.validate()?;
        Ok(agg)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("c_agg", self.c_agg), ("wage", self.wage), ("p_m", self.p_m)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::invalid(name, format!("aggregate must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FirmState {
    pub m: f64,
    pub k: f64,
    /// Productivity in levels.
    pub z: f64,
}

impl FirmState {
    pub fn new(m: f64, k: f64, z: f64) -> Result<Self> {
        for (name, v) in [("m", m), ("k", k), ("z", z)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::invalid(name, format!("state must be positive, got {v}")));
            }
        }
        Ok(Self { m, k, z })
    }
}

/// Outcome of the static pricing problem at one state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StaticSolution {
    pub y: f64,
    pub price: f64,
    /// Production labor.
    pub labor_prod: f64,
    /// Production cost `W L`.
    pub cost: f64,
    pub profit: f64,
    pub revenue: f64,
    /// Quantity bought by each member of the customer base.
    pub demand_per_customer: f64,
}

/// Log of optimal output at a state.
#[inline]
fn log_output(state: &FirmState, agg: &AggregateGuess, p: &Parameters, lambda_big: f64) -> f64 {
    let inner = p.gamma_l.ln()
        + ((1.0 + p.phi) * state.m.ln() + agg.c_agg.ln()) / p.sigma
        + (state.z.ln() + p.gamma_k * state.k.ln()) / p.gamma_l
        - agg.wage.ln()
        + (1.0 - 1.0 / p.sigma).ln();
    p.gamma_l * lambda_big * inner
}

/// Solves the monopolist's static problem in closed form.
pub fn static_solve(state: &FirmState, agg: &AggregateGuess, p: &Parameters) -> Result<StaticSolution> {
    let dc = derived_constants(p);
    static_solve_with(state, agg, p, &dc)
}

pub(crate) fn static_solve_with(
    state: &FirmState,
    agg: &AggregateGuess,
    p: &Parameters,
    dc: &DerivedConstants,
) -> Result<StaticSolution> {
    let ln_y = log_output(state, agg, p, dc.lambda_big);
    let ln_price = ((1.0 + p.phi) * state.m.ln() + agg.c_agg.ln() - ln_y) / p.sigma;
    let ln_labor = (ln_y - state.z.ln() - p.gamma_k * state.k.ln()) / p.gamma_l;
    let y = checked_exp(ln_y, "output")?;
    let price = checked_exp(ln_price, "price")?;
    let labor_prod = checked_exp(ln_labor, "production labor")?;
    let cost = agg.wage * labor_prod;
    let revenue = cost * dc.mu / p.gamma_l;
    let profit = cost * (dc.mu / p.gamma_l - 1.0);
    if !(cost.is_finite() && revenue.is_finite()) {
        return Err(Error::NumericRange { what: "production cost", value: cost });
    }
    Ok(StaticSolution {
        y,
        price,
        labor_prod,
        cost,
        profit,
        revenue,
        demand_per_customer: y / state.m,
    })
}

fn checked_exp(x: f64, what: &'static str) -> Result<f64> {
    let v = x.exp();
    if v.is_finite() && v > 0.0 {
        Ok(v)
    } else {
        Err(Error::NumericRange { what, value: v })
    }
}

/// Marginal static profits `(dPi/dM, dPi/dK)`.
pub fn profit_partials(state: &FirmState, agg: &AggregateGuess, p: &Parameters) -> Result<(f64, f64)> {
    let dc = derived_constants(p);
    let sol = static_solve_with(state, agg, p, &dc)?;
    Ok((sol.profit / state.m * dc.eps_pi_m, sol.profit / state.k * dc.eps_pi_k))
}

/// Advertising quantity whose marginal labor cost `(1/alpha_a) a^(1/alpha_a - 1)`
/// equals `x`.
pub fn foc_inverse_ads(x: f64, p: &Parameters) -> Result<f64> {
    foc_inverse(x, p.alpha_a, "advertising marginal value")
}

/// Investment quantity whose marginal labor cost equals `x`.
pub fn foc_inverse_inv(x: f64, p: &Parameters) -> Result<f64> {
    foc_inverse(x, p.alpha_k, "investment marginal value")
}

fn foc_inverse(x: f64, alpha: f64, what: &'static str) -> Result<f64> {
    if x.is_nan() || x < 0.0 {
        return Err(Error::invalid(what, format!("must be nonnegative, got {x}")));
    }
    Ok(inverse_marginal_cost(x, alpha))
}

#[inline]
pub(crate) fn inverse_marginal_cost(x: f64, alpha: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else {
        ((alpha * x).ln() * alpha / (1.0 - alpha)).exp()
    }
}

/// Marginal labor requirement of producing `q` units with `q = L^alpha`.
#[inline]
pub fn marginal_cost(q: f64, alpha: f64) -> f64 {
    q.powf(1.0 / alpha - 1.0) / alpha
}

/// Labor needed to produce `q` units with `q = L^alpha`.
#[inline]
pub fn labor_requirement(q: f64, alpha: f64) -> f64 {
    if q <= 0.0 {
        0.0
    } else {
        q.powf(1.0 / alpha)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table1() -> Parameters {
        Parameters::default()
    }

    fn agg() -> AggregateGuess {
        AggregateGuess::new(0.8, 0.6, 0.9).unwrap()
    }

    #[test]
    fn derived_constants_table1() {
        let dc = derived_constants(&table1());
        // (1 - 0.86) * 3.15 + 0.86 = 1.301
        assert!((dc.eps_pi_m - 1.0 / 1.301).abs() < 1e-12);
        assert!((dc.eps_pi_k - 0.11 * 2.15 / 1.301).abs() < 1e-12);
        assert!((dc.eps_pi_m - 0.76864).abs() < 1e-5);
        assert!((dc.eps_pi_k - 0.18178).abs() < 1e-5);
        assert!((dc.beta_tilde - 0.8544).abs() < 1e-12);
        assert!(dc.lambda_big > 1.0);
    }

    #[test]
    fn derived_constants_crs_labor() {
        let p = Parameters {
            gamma_l: 1.0,
            gamma_k: 0.3,
            sigma: 2.0,
            phi: 0.5,
            ..table1()
        };
        let dc = derived_constants(&p);
        assert!((dc.eps_pi_m - 1.5).abs() < 1e-14);
        assert!((dc.eps_pi_k - 0.3).abs() < 1e-14);
    }

    #[test]
    fn static_identities() {
        let p = table1();
        let s = FirmState::new(1.7, 0.4, 1.05).unwrap();
        let sol = static_solve(&s, &agg(), &p).unwrap();
        assert!((sol.revenue - sol.price * sol.y).abs() < 1e-12 * sol.revenue);
        assert!((sol.profit - (sol.revenue - sol.cost)).abs() < 1e-12 * sol.revenue);
        assert!((sol.demand_per_customer * s.m - sol.y).abs() < 1e-12 * sol.y);
        // 1 - gamma_l / mu = 1 - 0.86 * 2.15 / 3.15
        assert!((sol.profit / sol.revenue - 0.413016).abs() < 1e-6);
    }

    #[test]
    fn doubling_z_with_crs_labor() {
        let p = Parameters {
            gamma_l: 1.0,
            gamma_k: 1e-9,
            ..table1()
        };
        let s1 = FirmState::new(1.0, 1.0, 1.0).unwrap();
        let s2 = FirmState::new(1.0, 1.0, 2.0).unwrap();
        let y1 = static_solve(&s1, &agg(), &p).unwrap().y;
        let y2 = static_solve(&s2, &agg(), &p).unwrap().y;
        assert!((y2 / y1 - 2f64.powf(p.sigma)).abs() < 1e-9);
    }

    #[test]
    fn overflow_is_reported() {
        let p = table1();
        let s = FirmState::new(1e300, 1e300, 1e300).unwrap();
        assert!(matches!(
            static_solve(&s, &agg(), &p),
            Err(Error::NumericRange { .. })
        ));
    }

    #[test]
    fn relative_returns_ratio() {
        let p = table1();
        let s = FirmState::new(2.0, 2.0, 1.0).unwrap();
        let (pm, pk) = profit_partials(&s, &agg(), &p).unwrap();
        assert!((pm / pk - 1.0 / (0.11 * 2.15)).abs() < 1e-12);
        assert!((pm / pk - 4.2283).abs() < 1e-4);
    }

    #[test]
    fn no_customer_return_at_phi_minus_one() {
        let p = Parameters { phi: -1.0, ..table1() };
        for &m in &[0.1, 1.0, 7.0] {
            let s = FirmState::new(m, 0.5, 0.9).unwrap();
            assert_eq!(profit_partials(&s, &agg(), &p).unwrap().0, 0.0);
        }
    }

    #[test]
    fn foc_inverse_values() {
        let half = Parameters { alpha_a: 0.5, alpha_k: 0.5, ..table1() };
        assert!((foc_inverse_ads(4.0, &half).unwrap() - 2.0).abs() < 1e-14);
        assert!((foc_inverse_inv(2.0, &half).unwrap() - 1.0).abs() < 1e-14);
        let p = table1();
        let a = foc_inverse_ads(1.0, &p).unwrap();
        assert!((a - (0.46f64 / 0.54 * 0.46f64.ln()).exp()).abs() < 1e-14);
        assert!((a - 0.5161).abs() < 1e-4);
        let i = foc_inverse_inv(1.0, &p).unwrap();
        assert!((i - 0.4026).abs() < 1e-4);
        assert_eq!(foc_inverse_ads(0.0, &p).unwrap(), 0.0);
        assert!(foc_inverse_ads(-1.0, &p).is_err());
        assert!(foc_inverse_inv(-1e-9, &p).is_err());
    }

    #[test]
    fn foc_inverse_round_trip() {
        let p = table1();
        for &x in &[1e-3, 0.2, 1.0, 5.0, 300.0] {
            let a = foc_inverse_ads(x, &p).unwrap();
            assert!((marginal_cost(a, p.alpha_a) - x).abs() < 1e-12 * x);
            let i = foc_inverse_inv(x, &p).unwrap();
            assert!((marginal_cost(i, p.alpha_k) - x).abs() < 1e-12 * x);
        }
        let mut last = 0.0;
        for j in 1..50 {
            let i = foc_inverse_inv(j as f64 * 0.1, &p).unwrap();
            assert!(i > last);
            last = i;
        }
    }

    #[test]
    fn validation_names_field() {
        let bad = Parameters { sigma: -2.0, ..table1() };
        match bad.validate() {
            Err(Error::InvalidParameter { field, .. }) => assert_eq!(field, "sigma"),
            other => panic!("unexpected {other:?}"),
        }
        let bad = Parameters { alpha_a: 1.0, ..table1() };
        assert!(bad.validate().is_err());
        let bad = Parameters { m_under: 1.5, ..table1() };
        assert!(bad.validate().is_err());
        table1().validate().unwrap();
    }
}
