//! Config-driven runner: one subcommand per artifact family, each writing
//! into the configured output directory together with a manifest.

pub mod config;
pub mod plot;

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use custcap::calibration::{
    calibrate_alphas, calibrate_path, decompose, read_targets, sweep, write_decomposition_csv, write_path_csv,
    write_sweep_csv, AlphaTargets,
};
use custcap::equilibrium::{solve_equilibrium, EquilibriumResult};
use custcap::moments::{aggregate_accounts, compute_moments, csv_row};
use custcap::panel::simulate_panel;

pub use config::RunConfig;

/// Environment variable giving the default worker thread count.
pub const THREADS_ENV: &str = "CUSTCAP_THREADS";

#[derive(Debug, Parser)]
#[command(name = "custcap", version, about = "Steady states of firms investing in capital and customers")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Config file; the shipped baseline when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override a config key, e.g. `--set parameters.phi=0.3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    /// Output directory; overrides `output.dir`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads; defaults to $CUSTCAP_THREADS, then all cores.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// One equilibrium: summary and a moments row.
    Solve {
        /// Also write the policy and distribution arrays.
        #[arg(long)]
        write_arrays: bool,
    },
    /// Phi path for the configured target CSV, or the two returns-to-scale
    /// parameters with `--alphas`.
    Calibrate {
        #[arg(long)]
        alphas: bool,
    },
    /// Moments and aggregates over the configured parameter values.
    Sweep,
    /// Panel of simulated firms at the equilibrium.
    Simulate,
    /// Full, choices-fixed and aggregator-fixed consumption over phi.
    Decompose,
    /// SVG line chart of columns of an emitted table.
    Plot {
        input: PathBuf,
        /// Column for the horizontal axis.
        #[arg(long)]
        x: String,
        /// Comma-separated columns to draw.
        #[arg(long, value_delimiter = ',', required = true)]
        y: Vec<String>,
        #[arg(long)]
        title: Option<String>,
        /// Output file name inside the output directory.
        #[arg(long)]
        name: Option<String>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Solve { .. } => "solve",
            Command::Calibrate { .. } => "calibrate",
            Command::Sweep => "sweep",
            Command::Simulate => "simulate",
            Command::Decompose => "decompose",
            Command::Plot { .. } => "plot",
        }
    }
}

#[derive(Serialize)]
struct Artifact {
    path: String,
    sha256: String,
}

#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    subcommand: &'a str,
    config_sha256: String,
    seed: u64,
    threads: usize,
    wall_time_seconds: f64,
    artifacts: Vec<Artifact>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Threads requested by flag or environment; `None` leaves rayon's default.
pub fn thread_count(flag: Option<usize>) -> Result<Option<usize>> {
    if let Some(n) = flag {
        return Ok(Some(n));
    }
    match std::env::var(THREADS_ENV) {
        Ok(v) => Ok(Some(v.trim().parse().with_context(|| format!("{THREADS_ENV}=`{v}` is not a thread count"))?)),
        Err(_) => Ok(None),
    }
}

/// Outputs written by one run, for the manifest.
struct Outputs {
    dir: PathBuf,
    files: Vec<PathBuf>,
}

impl Outputs {
    fn path(&mut self, name: &str) -> PathBuf {
        let p = self.dir.join(name);
        self.files.push(p.clone());
        p
    }
}

fn summary_with_parameters(cfg: &RunConfig, eq: &EquilibriumResult) -> String {
    let params = toml::to_string(&cfg.parameters).expect("parameters serialize");
    format!("{}\n[parameters]\n{params}", eq.summary_toml())
}

fn not_converged(eq: &EquilibriumResult) -> anyhow::Error {
    let r = eq.residuals;
    anyhow::anyhow!(
        "equilibrium did not converge after {} outer iterations: residuals labor {:.3e}, goods {:.3e}, customer {:.3e}, price index {:.3e}",
        eq.outer_iterations,
        r.labor,
        r.goods,
        r.customer,
        r.price_index
    )
}

/// Runs a parsed command line. Every run that gets as far as producing
/// output also writes `<subcommand>.manifest.toml`.
pub fn run(cli: &Cli) -> Result<()> {
    let start = Instant::now();
    let cfg = RunConfig::load(cli.config.as_deref(), &cli.overrides)?;
    let dir = cli.out.clone().unwrap_or_else(|| cfg.output.dir.clone());
    std::fs::create_dir_all(&dir).with_context(|| format!("cannot create output directory {}", dir.display()))?;
    let threads = thread_count(cli.threads)?;
    let pool = {
        let mut b = rayon::ThreadPoolBuilder::new();
        if let Some(n) = threads {
            b = b.num_threads(n);
        }
        b.build()?
    };
    let mut out = Outputs { dir, files: Vec::new() };
    let result = pool.install(|| execute(&cli.command, &cfg, &mut out));
    write_manifest(&cli.command, &cfg, &out, pool.current_num_threads(), start)?;
    result
}

fn execute(command: &Command, cfg: &RunConfig, out: &mut Outputs) -> Result<()> {
    let p = cfg.parameters;
    let settings = cfg.settings();
    match command {
        Command::Solve { write_arrays } => {
            let (grids, proc) = (cfg.grids()?, cfg.process()?);
            let eq = solve_equilibrium(&p, &grids, &proc, &settings)?;
            std::fs::write(out.path("summary.toml"), summary_with_parameters(cfg, &eq))?;
            if *write_arrays {
                eq.pol.write_csv(&out.path("policy.csv"), &grids, &proc)?;
                eq.dist.write_csv(&out.path("distribution.csv"), &grids, &proc)?;
            }
            if !eq.converged {
                return Err(not_converged(&eq));
            }
            let panel = simulate_panel(&eq.pol, &grids, &proc, &p, &cfg.panel())?;
            let m = compute_moments(&eq, &panel, &grids, &proc, &p)?;
            let (names, values) = csv_row(&m, &aggregate_accounts(&eq));
            let mut w = csv::Writer::from_path(out.path("moments.csv"))?;
            w.write_record(&names)?;
            w.write_record(values.iter().map(f64::to_string))?;
            w.flush()?;
        }
        Command::Simulate => {
            let (grids, proc) = (cfg.grids()?, cfg.process()?);
            let eq = solve_equilibrium(&p, &grids, &proc, &settings)?;
            std::fs::write(out.path("summary.toml"), summary_with_parameters(cfg, &eq))?;
            if !eq.converged {
                return Err(not_converged(&eq));
            }
            let panel = simulate_panel(&eq.pol, &grids, &proc, &p, &cfg.panel())?;
            panel.write_csv(&out.path("panel.csv"))?;
        }
        Command::Calibrate { alphas: true } => {
            let (grids, proc) = (cfg.grids()?, cfg.process()?);
            let c = &cfg.calibration;
            let (Some(pct), Some(capex)) = (c.alpha_target_pct_negative, c.alpha_target_capex_share) else {
                bail!("calibration.alpha_target_pct_negative and calibration.alpha_target_capex_share are required with --alphas");
            };
            let targets = AlphaTargets {
                pct_negative: pct,
                capex_share: capex,
            };
            let cal = calibrate_alphas(targets, &p, &grids, &proc, &settings, &cfg.alpha_options())?;
            let text = format!(
                "alpha_a = {}\nalpha_k = {}\nachieved_pct_negative = {}\nachieved_capex_share = {}\nsolves = {}\n",
                cal.alpha_a, cal.alpha_k, cal.achieved.pct_negative, cal.achieved.capex_share, cal.solves
            );
            std::fs::write(out.path("alphas.toml"), text)?;
        }
        Command::Calibrate { alphas: false } => {
            let Some(path) = &cfg.calibration.targets else {
                bail!("calibration.targets: no target CSV configured");
            };
            let targets = read_targets(path).with_context(|| format!("calibration.targets ({})", path.display()))?;
            let (grids, proc) = (cfg.grids()?, cfg.process()?);
            let years = calibrate_path(&targets, &p, &grids, &proc, &settings, &cfg.phi_options(), &cfg.panel())?;
            write_path_csv(&out.path("calibration_path.csv"), &years)?;
            let failed: Vec<String> = years
                .iter()
                .filter_map(|y| y.outcome.as_ref().err().map(|e| format!("{}: {e}", y.target.year)))
                .collect();
            if !failed.is_empty() {
                bail!("calibration failed for {} year(s):\n{}", failed.len(), failed.join("\n"));
            }
        }
        Command::Sweep => {
            let (grids, proc) = (cfg.grids()?, cfg.process()?);
            let s = &cfg.sweep;
            let rows = sweep(&s.parameter, &s.values, &p, &grids, &proc, &settings, &cfg.sweep_options())?;
            write_sweep_csv(&out.path("sweep.csv"), &s.parameter, &rows)?;
            for r in &rows {
                if let Err(e) = &r.outcome {
                    eprintln!("warning: {} = {}: {e}", s.parameter, r.value);
                }
            }
        }
        Command::Decompose => {
            let (grids, proc) = (cfg.grids()?, cfg.process()?);
            let rows = decompose(&cfg.decompose.phis, &p, &grids, &proc, &settings)?;
            write_decomposition_csv(&out.path("decomposition.csv"), &rows)?;
        }
        Command::Plot { input, x, y, title, name } => {
            let mut names = vec![x.as_str()];
            names.extend(y.iter().map(String::as_str));
            let cols = plot::read_columns(input, &names)?;
            let series: Vec<(&str, Vec<f64>)> = y.iter().map(String::as_str).zip(cols[1..].iter().cloned()).collect();
            let stem = input.file_stem().and_then(|s| s.to_str()).unwrap_or("plot");
            let title = title.clone().unwrap_or_else(|| stem.to_string());
            let svg = plot::line_chart(&title, x, &cols[0], &series)?;
            let file = name.clone().unwrap_or_else(|| format!("{stem}.svg"));
            std::fs::write(out.path(&file), svg)?;
        }
    }
    Ok(())
}

fn write_manifest(command: &Command, cfg: &RunConfig, out: &Outputs, threads: usize, start: Instant) -> Result<()> {
    let artifacts = out
        .files
        .iter()
        .filter(|f| f.exists())
        .map(|f| {
            Ok(Artifact {
                path: relative(f, &out.dir),
                sha256: sha256_hex(&std::fs::read(f)?),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let m = Manifest {
        tool: "custcap",
        version: env!("CARGO_PKG_VERSION"),
        subcommand: command.name(),
        config_sha256: sha256_hex(cfg.canonical().as_bytes()),
        seed: cfg.simulation.seed,
        threads,
        wall_time_seconds: start.elapsed().as_secs_f64(),
        artifacts,
    };
    let path = out.dir.join(format!("{}.manifest.toml", command.name()));
    std::fs::write(path, toml::to_string(&m)?)?;
    Ok(())
}

fn relative(f: &Path, dir: &Path) -> String {
    f.strip_prefix(dir).unwrap_or(f).display().to_string()
}
