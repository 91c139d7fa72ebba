//! `tte` command line: graph generation, experiment runs and sweeps, and the
//! exact verification suite.
//!
//! Exit codes: 0 success, 1 runtime or verification failure, 2 usage error
//! (bad flags, unreadable or invalid config).

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::design::DesignKind;
use crate::error::{Error, Result};
use crate::estimators::EstimatorTag;
use crate::graph::generate_configuration_model;
use crate::harness::{
    records_to_csv, run_and_summarise, summary_path, summary_to_csv, ExperimentConfig,
    ExperimentRecord, SummaryRow, SweepGrid, SweepParam,
};
use crate::oracle::run_verification_suite;

#[derive(Debug, Parser)]
#[command(
    name = "tte",
    version,
    about = "Total treatment effect estimation under staggered rollouts"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a configuration-model graph as an edge list.
    GenGraph {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 2.5)]
        exponent: f64,
        /// Edge-list path; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run one experiment config.
    Run {
        /// JSON experiment config; flags override its fields.
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        shared: RunFlags,
    },
    /// Expand a grid file into configs and run them all.
    Sweep {
        /// JSON grid file: {"base": <config>, "grid": {field: [values]}}.
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        shared: RunFlags,
    },
    /// Run the exact verification suite.
    Verify,
}

#[derive(Debug, Args)]
struct RunFlags {
    /// Per-draw CSV path (summary goes next to it); stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    #[command(flatten)]
    overrides: Overrides,
}

/// Config fields settable from the command line.
#[derive(Debug, Args, Default)]
struct Overrides {
    /// Master seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    beta: Option<usize>,
    #[arg(long)]
    r: Option<f64>,
    #[arg(long)]
    budget: Option<f64>,
    #[arg(long)]
    sigma: Option<f64>,
    /// brd or crd.
    #[arg(long)]
    design: Option<DesignKind>,
    /// Graphs per sweep value.
    #[arg(long)]
    graphs: Option<usize>,
    /// Rollouts per graph.
    #[arg(long)]
    schedules: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    exponent: Option<f64>,
    /// Comma-separated estimator tags.
    #[arg(long, value_delimiter = ',')]
    estimators: Option<Vec<EstimatorTag>>,
    /// n, r, budget or beta.
    #[arg(long)]
    sweep_param: Option<SweepParam>,
    /// Comma-separated values of the swept parameter.
    #[arg(long, value_delimiter = ',')]
    sweep_values: Option<Vec<f64>>,
}

impl Overrides {
    fn apply(&self, cfg: &mut ExperimentConfig) {
        macro_rules! set {
            ($($f:ident),*) => {$(if let Some(v) = &self.$f { cfg.$f = v.clone(); })*};
        }
        set!(
            n,
            beta,
            r,
            budget,
            sigma,
            design,
            graphs,
            schedules,
            lambda,
            exponent,
            estimators,
            sweep_param,
            sweep_values
        );
        if let Some(s) = self.seed {
            cfg.master_seed = s;
        }
        if self.design.is_some() && self.estimators.is_none() {
            // the configured list may not fit the new design; fall back to all applicable
            cfg.estimators.clear();
        }
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Exit code for a failed command: bad input is a usage error.
fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Io { .. } => 2,
        _ => 1,
    }
}

fn resolve(
    mut cfg: ExperimentConfig,
    overrides: &Overrides,
    out: &Option<PathBuf>,
    err: &mut dyn Write,
) -> Result<ExperimentConfig> {
    overrides.apply(&mut cfg);
    if out.is_some() {
        cfg.output = out.clone();
    }
    let cfg = cfg.resolve()?;
    let _ = writeln!(err, "resolved config:\n{}", cfg.to_json_pretty());
    Ok(cfg)
}

fn emit(
    records: &[ExperimentRecord],
    summary: &[SummaryRow],
    target: Option<&Path>,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> Result<()> {
    let records_csv = records_to_csv(records);
    match target {
        Some(path) => {
            write_text(path, &records_csv)?;
            let spath = summary_path(path);
            write_text(&spath, &summary_to_csv(summary))?;
            let _ = writeln!(
                err,
                "wrote {} records to {} and summary to {}",
                records.len(),
                path.display(),
                spath.display()
            );
        }
        // without a path only the per-draw records are printed
        None => {
            let _ = out.write_all(records_csv.as_bytes());
        }
    }
    Ok(())
}

fn gen_graph(
    n: usize,
    seed: u64,
    exponent: f64,
    target: Option<&Path>,
    out: &mut dyn Write,
) -> Result<()> {
    let graph = generate_configuration_model(n, exponent, seed)?;
    match target {
        Some(path) => graph.save_edge_list(path),
        None => {
            let _ = out.write_all(graph.to_edge_list().as_bytes());
            Ok(())
        }
    }
}

fn run(
    config: Option<&Path>,
    flags: &RunFlags,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> Result<()> {
    let base = match config {
        Some(path) => ExperimentConfig::from_json(&read_text(path)?)?,
        None => ExperimentConfig::default(),
    };
    let cfg = resolve(base, &flags.overrides, &flags.out, err)?;
    let (records, summary) = run_and_summarise(&cfg, flags.workers)?;
    emit(&records, &summary, cfg.output.as_deref(), out, err)
}

fn sweep(config: &Path, flags: &RunFlags, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    let grid = SweepGrid::from_json(&read_text(config)?)?;
    let mut configs = Vec::new();
    for value in grid.expand()? {
        let cfg: ExperimentConfig = serde_json::from_value(value)
            .map_err(|e| Error::Config(format!("invalid grid combination: {e}")))?;
        configs.push(resolve(cfg, &flags.overrides, &flags.out, err)?);
    }
    let (mut records, mut summary) = (Vec::new(), Vec::new());
    for cfg in &configs {
        let (r, s) = run_and_summarise(cfg, flags.workers)?;
        records.extend(r);
        summary.extend(s);
    }
    emit(&records, &summary, flags.out.as_deref(), out, err)
}

fn verify(out: &mut dyn Write) -> bool {
    let checks = run_verification_suite();
    for c in &checks {
        let _ = writeln!(out, "{c}");
    }
    checks.iter().all(|c| c.passed)
}

/// Runs the CLI on `args` (including the program name) and returns the exit code.
pub fn main_with_args<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = e.exit_code();
            let rendered = e.render().to_string();
            let _ = if code == 0 {
                write!(out, "{rendered}")
            } else {
                write!(err, "{rendered}")
            };
            return code;
        }
    };
    let result = match &cli.command {
        Command::GenGraph {
            n,
            seed,
            exponent,
            out: path,
        } => gen_graph(*n, *seed, *exponent, path.as_deref(), out),
        Command::Run { config, shared } => run(config.as_deref(), shared, out, err),
        Command::Sweep { config, shared } => sweep(config, shared, out, err),
        Command::Verify => {
            return if verify(out) { 0 } else { 1 };
        }
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}
