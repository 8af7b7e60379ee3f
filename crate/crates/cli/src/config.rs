//! Run configuration: a TOML file with a versioned schema, overridable
//! key by key with dotted paths.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use custcap::calibration::{AlphaOptions, PhiOptions, SweepOptions};
use custcap::egm::{SolverOptions, StateGrids};
use custcap::distribution::DistOptions;
use custcap::equilibrium::EquilibriumSettings;
use custcap::panel::PanelOptions;
use custcap::productivity::{discretize, ProductivityProcess};
use custcap::Parameters;

pub const SCHEMA_VERSION: u32 = 1;

/// The configuration shipped with the tool: baseline parameters at
/// `phi = 0` on a 40 x 40 x 7 grid.
pub const DEFAULT_CONFIG: &str = include_str!("../config/default.toml");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub parameters: Parameters,
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub simulation: SimulationConfig,
    #[serde(default)]
    pub calibration: CalibrationConfig,
    #[serde(default)]
    pub sweep: SweepConfig,
    #[serde(default)]
    pub decompose: DecomposeConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    pub n_m: usize,
    pub m_min: f64,
    pub m_max: f64,
    pub n_k: usize,
    pub k_min: f64,
    pub k_max: f64,
    pub n_z: usize,
    /// Half-width of the productivity grid in unconditional sds.
    pub coverage_width: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            n_m: 40,
            m_min: 0.05,
            m_max: 20.0,
            n_k: 40,
            k_min: 0.01,
            k_max: 20.0,
            n_z: 7,
            coverage_width: 3.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    pub outer_tol: f64,
    pub damping: f64,
    pub max_outer: usize,
    pub anderson_depth: usize,
    pub fallback: bool,
    pub fallback_starts: usize,
    pub inner_tol: f64,
    pub inner_max_iter: usize,
    pub gauss_seidel: bool,
    pub strict_lines: bool,
    pub dist_tol: f64,
    pub dist_max_iter: usize,
    pub escape_threshold: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        let s = EquilibriumSettings::default();
        Self {
            outer_tol: s.outer_tol,
            damping: s.damping,
            max_outer: s.max_outer,
            anderson_depth: s.anderson_depth,
            fallback: s.fallback,
            fallback_starts: s.fallback_starts,
            inner_tol: s.firm.tol,
            inner_max_iter: s.firm.max_iter,
            gauss_seidel: s.firm.gauss_seidel,
            strict_lines: s.firm.strict_lines,
            dist_tol: s.dist.tol,
            dist_max_iter: s.dist.max_iter,
            escape_threshold: s.dist.escape_threshold,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulationConfig {
    pub n_firms: usize,
    pub n_years: usize,
    pub burn_in: usize,
    pub seed: u64,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        let o = PanelOptions::default();
        Self {
            n_firms: o.n_firms,
            n_years: o.n_years,
            burn_in: o.burn_in,
            seed: o.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibrationConfig {
    /// CSV of `year,target_pct_negative[,target_capex_share]`.
    pub targets: Option<PathBuf>,
    pub tol: f64,
    pub bracket: [f64; 2],
    pub march_step: f64,
    /// Baseline pair for `calibrate --alphas`.
    pub alpha_target_pct_negative: Option<f64>,
    pub alpha_target_capex_share: Option<f64>,
    pub alpha_tol: f64,
    pub alpha_max_iters: u64,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        let o = PhiOptions::default();
        let a = AlphaOptions::default();
        Self {
            targets: None,
            tol: o.tol,
            bracket: [o.bracket.0, o.bracket.1],
            march_step: o.march_step,
            alpha_target_pct_negative: None,
            alpha_target_capex_share: None,
            alpha_tol: a.tol_pct_negative,
            alpha_max_iters: a.max_iters,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub parameter: String,
    pub values: Vec<f64>,
    pub warm_start: bool,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            parameter: "phi".into(),
            values: vec![0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6],
            warm_start: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecomposeConfig {
    pub phis: Vec<f64>,
}

impl Default for DecomposeConfig {
    fn default() -> Self {
        Self {
            phis: vec![0.0, 0.2, 0.4, 0.6],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { dir: "out".into() }
    }
}

/// Parses a value given on the command line: TOML syntax when it parses,
/// a bare string otherwise.
fn parse_value(raw: &str) -> toml::Value {
    #[derive(Deserialize)]
    struct Wrap {
        v: toml::Value,
    }
    toml::from_str::<Wrap>(&format!("v = {raw}"))
        .map(|w| w.v)
        .unwrap_or_else(|_| toml::Value::String(raw.to_string()))
}

/// Applies `a.b.c=value` to a parsed document, creating tables on the way.
pub fn apply_override(doc: &mut toml::Table, assignment: &str) -> Result<()> {
    let Some((path, raw)) = assignment.split_once('=') else {
        bail!("override `{assignment}` is not of the form key.path=value");
    };
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        bail!("override `{assignment}` has an empty key");
    }
    let mut table = doc;
    for k in &keys[..keys.len() - 1] {
        let entry = table
            .entry(k.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = match entry {
            toml::Value::Table(t) => t,
            _ => bail!("override `{assignment}`: `{k}` is not a table"),
        };
    }
    table.insert(keys[keys.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

impl RunConfig {
    /// Parses `text`, applies overrides and validates.
    pub fn from_str_with(text: &str, overrides: &[String]) -> Result<Self> {
        let mut doc: toml::Table = toml::from_str(text).context("config is not valid TOML")?;
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let cfg: RunConfig = toml::Value::Table(doc).try_into().context("config does not match the schema")?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path`, or the shipped default when `None`.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("cannot read config {}", p.display()))?;
                Self::from_str_with(&text, overrides).with_context(|| format!("in config {}", p.display()))
            }
            None => Self::from_str_with(DEFAULT_CONFIG, overrides),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            bail!("schema_version: expected {SCHEMA_VERSION}, got {}", self.schema_version);
        }
        self.parameters.validate().context("parameters")?;
        let s = &self.solver;
        for (name, v) in [
            ("solver.outer_tol", s.outer_tol),
            ("solver.inner_tol", s.inner_tol),
            ("solver.dist_tol", s.dist_tol),
            ("calibration.tol", self.calibration.tol),
            ("calibration.march_step", self.calibration.march_step),
            ("calibration.alpha_tol", self.calibration.alpha_tol),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                bail!("{name}: must be positive, got {v}");
            }
        }
        if !(s.damping > 0.0 && s.damping <= 1.0) {
            bail!("solver.damping: must lie in (0, 1], got {}", s.damping);
        }
        if self.simulation.n_firms == 0 {
            bail!("simulation.n_firms: need at least one firm");
        }
        self.grids().context("grid")?;
        self.process().context("grid")?;
        Ok(())
    }

    pub fn grids(&self) -> Result<StateGrids> {
        let g = &self.grid;
        Ok(StateGrids::log_spaced(g.n_m, g.m_min, g.m_max, g.n_k, g.k_min, g.k_max)?)
    }

    pub fn process(&self) -> Result<ProductivityProcess> {
        let p = &self.parameters;
        Ok(discretize(p.rho, p.sigma_z, p.z_bar, self.grid.n_z, self.grid.coverage_width)?)
    }

    pub fn settings(&self) -> EquilibriumSettings {
        let s = &self.solver;
        EquilibriumSettings {
            outer_tol: s.outer_tol,
            damping: s.damping,
            max_outer: s.max_outer,
            firm: SolverOptions {
                tol: s.inner_tol,
                max_iter: s.inner_max_iter,
                gauss_seidel: s.gauss_seidel,
                strict_lines: s.strict_lines,
            },
            dist: DistOptions {
                tol: s.dist_tol,
                max_iter: s.dist_max_iter,
                escape_threshold: s.escape_threshold,
            },
            fallback: s.fallback,
            fallback_starts: s.fallback_starts,
            anderson_depth: s.anderson_depth,
        }
    }

    pub fn panel(&self) -> PanelOptions {
        let s = &self.simulation;
        PanelOptions {
            n_firms: s.n_firms,
            n_years: s.n_years,
            burn_in: s.burn_in,
            seed: s.seed,
            initial: None,
        }
    }

    pub fn phi_options(&self) -> PhiOptions {
        let c = &self.calibration;
        PhiOptions {
            tol: c.tol,
            bracket: (c.bracket[0], c.bracket[1]),
            march_step: c.march_step,
            ..PhiOptions::default()
        }
    }

    pub fn alpha_options(&self) -> AlphaOptions {
        let c = &self.calibration;
        AlphaOptions {
            tol_pct_negative: c.alpha_tol,
            tol_capex_share: c.alpha_tol,
            max_iters: c.alpha_max_iters,
            ..AlphaOptions::default()
        }
    }

    pub fn sweep_options(&self) -> SweepOptions {
        SweepOptions {
            warm_start: self.sweep.warm_start,
            panel: self.panel(),
        }
    }

    /// Canonical text of the effective configuration; hashed into the
    /// manifest.
    pub fn canonical(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}
