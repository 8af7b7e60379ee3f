use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// A grid node (m, k, z) reported in diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeIndex {
    pub m: usize,
    pub k: usize,
    pub z: usize,
}

impl std::fmt::Display for NodeIndex {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "(m={}, k={}, z={})", self.m, self.k, self.z)
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid value for `{field}`: {reason}")]
    InvalidParameter { field: String, reason: String },

    #[error("numeric range error in {what}: value {value} is not finite")]
    NumericRange { what: &'static str, value: f64 },

    #[error("{what} did not converge after {iterations} iterations (residual {residual:.3e}{})",
        worst.map(|n| format!(", worst node {n}")).unwrap_or_default())]
    NonConvergence {
        what: &'static str,
        iterations: usize,
        residual: f64,
        worst: Option<NodeIndex>,
    },

    #[error("endogenous grid inversion failed on {pass} line (fixed index {line}, z {z}): implied nodes not monotone at position {position}")]
    GridInversion {
        pass: &'static str,
        line: usize,
        z: usize,
        position: usize,
    },

    #[error("interpolation nodes are not monotone at position {position}")]
    NonMonotoneLine { position: usize },

    #[error("distribution mass {mass:.3e} escapes the grid (m low {m_low:.3e}, m high {m_high:.3e}, k low {k_low:.3e}, k high {k_high:.3e}); enlarge the grid bounds")]
    MassEscape {
        mass: f64,
        m_low: f64,
        m_high: f64,
        k_low: f64,
        k_high: f64,
    },

    #[error("configuration error: {0}")]
    Configuration(String),

    #[error("inner solve failed at (C={c_agg:.6e}, W={wage:.6e}, P_m={p_m:.6e}): {source}")]
    InnerSolve {
        c_agg: f64,
        wage: f64,
        p_m: f64,
        #[source]
        source: Box<Error>,
    },

    #[error("target {target:.6} is not bracketed: endpoint values {low_value:.6} at {low:.4} and {high_value:.6} at {high:.4}")]
    Bracketing {
        target: f64,
        low: f64,
        high: f64,
        low_value: f64,
        high_value: f64,
    },

    #[error("moment is not increasing over the bracket: {low_value:.6} at {low:.4} but {high_value:.6} at {high:.4}")]
    NonMonotone {
        low: f64,
        high: f64,
        low_value: f64,
        high_value: f64,
    },

    #[error("no value matches {target:.6}: the moment jumps from {low_value:.6} to {high_value:.6} at {at:.6}")]
    Discontinuity {
        target: f64,
        at: f64,
        low_value: f64,
        high_value: f64,
    },

    #[error("calibration stopped without matching the targets; best point alpha_a={alpha_a:.6}, alpha_k={alpha_k:.6} with gaps {pct_negative_gap:.3e} (negative share) and {capex_share_gap:.3e} (capex share)")]
    CalibrationFailed {
        alpha_a: f64,
        alpha_k: f64,
        pct_negative_gap: f64,
        capex_share_gap: f64,
    },

    #[error("regression is rank deficient: {0}")]
    RankDeficient(String),

    #[error("{0}")]
    Mismatch(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn invalid(field: &str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            field: field.to_string(),
            reason: reason.into(),
        }
    }
}
