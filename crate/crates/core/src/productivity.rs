//! Discretized productivity: a Tauchen grid for the incumbent log-AR(1) and
//! the entrant log-normal distribution on the same nodes.

use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ProductivityProcess {
    /// Productivity levels, ascending.
    pub z_nodes: Vec<f64>,
    /// Row-stochastic incumbent transition matrix, `transition[s][s']`.
    pub transition: Vec<Vec<f64>>,
    /// Entrant draw probabilities over `z_nodes`.
    pub entrant_dist: Vec<f64>,
}

impl ProductivityProcess {
    pub fn len(&self) -> usize {
        self.z_nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.z_nodes.is_empty()
    }

    /// A single-node process (all firms share productivity `z`).
    pub fn degenerate(z: f64) -> Self {
        Self {
            z_nodes: vec![z],
            transition: vec![vec![1.0]],
            entrant_dist: vec![1.0],
        }
    }

    /// Builds a process from explicit nodes and probabilities, checking the
    /// stochastic invariants.
    pub fn from_parts(z_nodes: Vec<f64>, transition: Vec<Vec<f64>>, entrant_dist: Vec<f64>) -> Result<Self> {
        let n = z_nodes.len();
        if n == 0 {
            return Err(Error::invalid("z_nodes", "need at least one node"));
        }
        if z_nodes.windows(2).any(|w| w[1] <= w[0]) || z_nodes[0] <= 0.0 {
            return Err(Error::invalid("z_nodes", "must be positive and strictly increasing"));
        }
        if transition.len() != n || transition.iter().any(|r| r.len() != n) {
            return Err(Error::invalid("transition", "must be square with one row per node"));
        }
        for (s, row) in transition.iter().enumerate() {
            if row.iter().any(|&x| x < 0.0) || (row.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
                return Err(Error::invalid("transition", format!("row {s} is not a probability vector")));
            }
        }
        if entrant_dist.len() != n
            || entrant_dist.iter().any(|&x| x < 0.0)
            || (entrant_dist.iter().sum::<f64>() - 1.0).abs() > 1e-12
        {
            return Err(Error::invalid("entrant_dist", "must be a probability vector over the nodes"));
        }
        Ok(Self {
            z_nodes,
            transition,
            entrant_dist,
        })
    }
}

/// Tauchen discretization of `ln z' = rho ln z + eps`, `eps ~ N(0, sigma_z^2)`,
/// on `n_z` nodes spanning `coverage_width` unconditional standard deviations
/// either side of the unconditional mean. Entrants draw
/// `ln z ~ N(z_bar, sigma_z^2)` binned onto the same nodes.
pub fn discretize(rho: f64, sigma_z: f64, z_bar: f64, n_z: usize, coverage_width: f64) -> Result<ProductivityProcess> {
    if n_z < 3 {
        return Err(Error::invalid("n_z", format!("need at least 3 nodes, got {n_z}")));
    }
    if !(0.0..1.0).contains(&rho) {
        return Err(Error::invalid("rho", format!("must lie in [0, 1) for a stationary process, got {rho}")));
    }
    if !(sigma_z > 0.0 && sigma_z.is_finite()) {
        return Err(Error::invalid("sigma_z", "must be positive"));
    }
    if !(coverage_width > 0.0 && coverage_width.is_finite()) {
        return Err(Error::invalid("coverage_width", "must be positive"));
    }
    let sd = sigma_z / (1.0 - rho * rho).sqrt();
    let half = coverage_width * sd;
    let step = 2.0 * half / (n_z - 1) as f64;
    let log_nodes: Vec<f64> = (0..n_z).map(|j| -half + step * j as f64).collect();
    let std_normal = Normal::new(0.0, 1.0).expect("standard normal");

    let bin = |mean: f64| -> Vec<f64> {
        let cdf = |x: f64| std_normal.cdf((x - mean) / sigma_z);
        let mut row = Vec::with_capacity(n_z);
        for j in 0..n_z {
            let upper = if j + 1 == n_z { 1.0 } else { cdf(log_nodes[j] + step / 2.0) };
            let lower = if j == 0 { 0.0 } else { cdf(log_nodes[j] - step / 2.0) };
            row.push((upper - lower).max(0.0));
        }
        let total: f64 = row.iter().sum();
        row.iter_mut().for_each(|x| *x /= total);
        row
    };

    let transition = log_nodes.iter().map(|&x| bin(rho * x)).collect();
    let entrant_dist = bin(z_bar);
    Ok(ProductivityProcess {
        z_nodes: log_nodes.iter().map(|x| x.exp()).collect(),
        transition,
        entrant_dist,
    })
}

/// Stationary marginal over productivity nodes with exit and entry:
/// the fixed point of `mu' = (1 - theta) mu T + theta entrant`.
pub fn stationary_of_chain(proc: &ProductivityProcess, theta: f64, entrant_dist: &[f64]) -> Result<Vec<f64>> {
    let n = proc.len();
    if entrant_dist.len() != n {
        return Err(Error::invalid("entrant_dist", "length differs from the node count"));
    }
    if !(0.0..=1.0).contains(&theta) {
        return Err(Error::invalid("theta", "must lie in [0, 1]"));
    }
    if theta == 1.0 {
        return Ok(entrant_dist.to_vec());
    }
    const MAX_ITER: usize = 1_000_000;
    let mut mu = entrant_dist.to_vec();
    let mut next = vec![0.0; n];
    for iter in 0..MAX_ITER {
        for (j, x) in next.iter_mut().enumerate() {
            *x = theta * entrant_dist[j];
        }
        for (s, &mass) in mu.iter().enumerate() {
            for (j, &t) in proc.transition[s].iter().enumerate() {
                next[j] += (1.0 - theta) * mass * t;
            }
        }
        let diff = mu
            .iter()
            .zip(&next)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        std::mem::swap(&mut mu, &mut next);
        if diff < 1e-15 {
            let total: f64 = mu.iter().sum();
            mu.iter_mut().for_each(|x| *x /= total);
            return Ok(mu);
        }
        if iter + 1 == MAX_ITER {
            return Err(Error::NonConvergence {
                what: "productivity chain stationary distribution",
                iterations: MAX_ITER,
                residual: diff,
                worst: None,
            });
        }
    }
    unreachable!()
}
