//! Command-line front end.
//!
//! Exit codes: 0 success, 1 validation failure, 2 numerical failure,
//! 3 configuration error.

mod manifest;
pub mod validate;

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coeffs::{compute_all, CoefficientOptions, CoefficientSet};
use crate::error::{Error, Result};
use crate::gci_solver::{check_dimension, SolverOptions};
use crate::particle::{simulate, SimConfig};

pub use manifest::RunManifest;

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_NUMERICAL: i32 = 2;
pub const EXIT_CONFIG: i32 = 3;

/// Environment variable holding the default thread count.
pub const THREADS_ENV: &str = "SOHB_THREADS";

/// Column order of coefficient tables.
pub const COEFF_COLUMNS: [&str; 13] = [
    "n", "kappa", "c1", "c2", "c3", "c4", "C2", "C3", "C4", "C4prime", "err_est", "Nq", "degree",
];

/// Column order of simulation time series.
pub const SERIES_COLUMNS: [&str; 6] = [
    "t",
    "c1_hat",
    "kappa_eff",
    "alignment_energy",
    "max_orthogonality_defect",
    "singular_skips",
];

#[derive(Parser, Debug)]
#[command(name = "sohb", version, about = "Transport coefficients of body-attitude alignment on SO(n)")]
pub struct Cli {
    /// Worker threads (results do not depend on it).
    #[arg(long, global = true, env = THREADS_ENV)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// One coefficient set c1..c4 with intermediates.
    Coeffs(CoeffsArgs),
    /// Coefficients over a list or range of kappa.
    Sweep(SweepArgs),
    /// Cross-checks of quadrature, solver, strong form and Monte Carlo.
    Validate(validate::ValidateArgs),
    /// Particle simulation from a JSON config.
    Simulate(SimulateArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Json,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct SolverArgs {
    /// Galerkin degree (default depends on n).
    #[arg(long)]
    pub degree: Option<usize>,
    /// Quadrature points per torus angle (default depends on n).
    #[arg(long)]
    pub nq: Option<usize>,
    /// Skip the N_q/2 rerun that fills err_est.
    #[arg(long)]
    pub no_error_estimate: bool,
}

impl SolverArgs {
    fn options(&self, n: usize) -> CoefficientOptions {
        let defaults = SolverOptions::defaults_for(n);
        CoefficientOptions {
            solver: SolverOptions {
                degree: self.degree.unwrap_or(defaults.degree),
                nq: self.nq.unwrap_or(defaults.nq),
            },
            error_estimate: !self.no_error_estimate,
        }
    }
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct OutputArgs {
    /// Output file (stdout when absent).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "csv")]
    pub format: Format,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct CoeffsArgs {
    #[arg(long)]
    pub n: usize,
    #[arg(long, allow_negative_numbers = true)]
    pub kappa: f64,
    #[command(flatten)]
    pub solver: SolverArgs,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct SweepArgs {
    #[arg(long)]
    pub n: usize,
    /// Comma-separated kappa values.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true, conflicts_with = "range")]
    pub kappas: Vec<f64>,
    /// `start:stop:step`, inclusive of `stop`.
    #[arg(long)]
    pub range: Option<String>,
    #[command(flatten)]
    pub solver: SolverArgs,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct SimulateArgs {
    /// JSON file with the simulation config.
    #[arg(long)]
    pub config: PathBuf,
    /// Time-series CSV (stdout when absent).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Optional JSON snapshot of the final state.
    #[arg(long)]
    pub snapshot: Option<PathBuf>,
}

/// Maps an error to the exit-code contract.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InvalidConfig(_)
        | Error::UnsupportedDimension(_)
        | Error::DimensionMismatch { .. }
        | Error::Io(_)
        | Error::Json(_) => EXIT_CONFIG,
        Error::SingularInput { .. }
        | Error::IllConditioned(_)
        | Error::NonFinite(_)
        | Error::PositiveDefinitenessFailure
        | Error::DegenerateDenominator(_)
        | Error::SingularPoint { .. } => EXIT_NUMERICAL,
    }
}

/// One output row of `coeffs` and `sweep`. Field names are the column names.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoefficientRow {
    pub n: usize,
    pub kappa: f64,
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    pub c4: f64,
    #[serde(rename = "C2")]
    pub big_c2: f64,
    #[serde(rename = "C3")]
    pub big_c3: f64,
    #[serde(rename = "C4")]
    pub big_c4: f64,
    #[serde(rename = "C4prime")]
    pub big_c4_prime: f64,
    pub err_est: Option<f64>,
    #[serde(rename = "Nq")]
    pub nq: usize,
    pub degree: usize,
    /// Sweep only: `c1` at this row is ≥ the previous row's.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub c1_nondecreasing: Option<bool>,
}

impl From<&CoefficientSet> for CoefficientRow {
    fn from(s: &CoefficientSet) -> Self {
        let v = &s.values;
        CoefficientRow {
            n: s.n,
            kappa: s.kappa,
            c1: v.c1,
            c2: v.c2,
            c3: v.c3,
            c4: v.c4,
            big_c2: v.big_c2,
            big_c3: v.big_c3,
            big_c4: v.big_c4,
            big_c4_prime: v.big_c4_prime,
            err_est: s.diagnostics.err_est,
            nq: s.diagnostics.nq,
            degree: s.diagnostics.degree,
            c1_nondecreasing: None,
        }
    }
}

impl CoefficientRow {
    fn csv_fields(&self) -> Vec<String> {
        let mut f = vec![self.n.to_string()];
        for v in [
            self.kappa,
            self.c1,
            self.c2,
            self.c3,
            self.c4,
            self.big_c2,
            self.big_c3,
            self.big_c4,
            self.big_c4_prime,
        ] {
            f.push(format!("{v:?}"));
        }
        f.push(self.err_est.map_or(String::new(), |e| format!("{e:?}")));
        f.push(self.nq.to_string());
        f.push(self.degree.to_string());
        if let Some(m) = self.c1_nondecreasing {
            f.push(m.to_string());
        }
        f
    }
}

/// Renders rows as CSV with a header line.
pub fn rows_to_csv(rows: &[CoefficientRow]) -> String {
    let mut out = COEFF_COLUMNS.join(",");
    if rows.iter().any(|r| r.c1_nondecreasing.is_some()) {
        out.push_str(",c1_nondecreasing");
    }
    out.push('\n');
    for r in rows {
        out.push_str(&r.csv_fields().join(","));
        out.push('\n');
    }
    out
}

/// Parses CSV written by [`rows_to_csv`].
pub fn rows_from_csv(text: &str) -> Result<Vec<CoefficientRow>> {
    let mut lines = text.lines();
    let header: Vec<&str> = lines
        .next()
        .ok_or_else(|| Error::InvalidConfig("empty CSV".into()))?
        .split(',')
        .collect();
    if header[..COEFF_COLUMNS.len().min(header.len())] != COEFF_COLUMNS[..] {
        return Err(Error::InvalidConfig(format!("unexpected CSV header {header:?}")));
    }
    let bad = |s: &str| Error::InvalidConfig(format!("bad CSV field {s:?}"));
    let float = |s: &str| s.parse::<f64>().map_err(|_| bad(s));
    let int = |s: &str| s.parse::<usize>().map_err(|_| bad(s));
    lines
        .filter(|l| !l.is_empty())
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != header.len() {
                return Err(bad(line));
            }
            Ok(CoefficientRow {
                n: int(f[0])?,
                kappa: float(f[1])?,
                c1: float(f[2])?,
                c2: float(f[3])?,
                c3: float(f[4])?,
                c4: float(f[5])?,
                big_c2: float(f[6])?,
                big_c3: float(f[7])?,
                big_c4: float(f[8])?,
                big_c4_prime: float(f[9])?,
                err_est: if f[10].is_empty() { None } else { Some(float(f[10])?) },
                nq: int(f[11])?,
                degree: int(f[12])?,
                c1_nondecreasing: match f.get(13) {
                    Some(s) => Some(s.parse::<bool>().map_err(|_| bad(s))?),
                    None => None,
                },
            })
        })
        .collect()
}

fn render_rows(rows: &[CoefficientRow], format: Format, single: bool) -> Result<String> {
    Ok(match format {
        Format::Csv => rows_to_csv(rows),
        Format::Json if single => serde_json::to_string_pretty(&rows[0])? + "\n",
        Format::Json => serde_json::to_string_pretty(rows)? + "\n",
    })
}

fn emit(text: &str, out: Option<&Path>) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

/// Parses `start:stop:step` into `start + i·step ≤ stop`.
pub fn parse_range(spec: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = spec.split(':').collect();
    let bad = || Error::InvalidConfig(format!("range {spec:?} must be start:stop:step"));
    if parts.len() != 3 {
        return Err(bad());
    }
    let v: Vec<f64> = parts
        .iter()
        .map(|s| s.trim().parse::<f64>().map_err(|_| bad()))
        .collect::<Result<_>>()?;
    let (start, stop, step) = (v[0], v[1], v[2]);
    if !(step > 0.0) || !start.is_finite() || !stop.is_finite() || stop < start {
        return Err(bad());
    }
    let count = ((stop - start) / step + 1e-9).floor() as usize + 1;
    Ok((0..count).map(|i| start + i as f64 * step).collect())
}

fn cmd_coeffs(args: &CoeffsArgs) -> Result<(String, serde_json::Value)> {
    check_dimension(args.n)?;
    let set = compute_all(args.n, args.kappa, args.solver.options(args.n))?;
    let row = CoefficientRow::from(&set);
    let text = render_rows(&[row], args.output.format, true)?;
    Ok((text, manifest::resolved_solver_config(args.n, &args.solver.options(args.n))))
}

fn cmd_sweep(args: &SweepArgs) -> Result<(String, serde_json::Value)> {
    check_dimension(args.n)?;
    let kappas = match &args.range {
        Some(r) => parse_range(r)?,
        None => args.kappas.clone(),
    };
    if kappas.is_empty() {
        return Err(Error::InvalidConfig("kappa list is empty".into()));
    }
    let options = args.solver.options(args.n);
    let sets: Vec<Result<CoefficientSet>> = kappas
        .par_iter()
        .map(|&k| compute_all(args.n, k, options))
        .collect();
    let mut rows = Vec::with_capacity(sets.len());
    let mut prev: Option<f64> = None;
    for s in sets {
        let mut row = CoefficientRow::from(&s?);
        row.c1_nondecreasing = Some(prev.map_or(true, |p| row.c1 >= p));
        prev = Some(row.c1);
        rows.push(row);
    }
    let text = render_rows(&rows, args.output.format, false)?;
    let mut config = manifest::resolved_solver_config(args.n, &options);
    config["kappas"] = serde_json::json!(kappas);
    Ok((text, config))
}

/// CSV of a simulation time series.
pub fn series_to_csv(series: &[crate::particle::SeriesRow], kappa_eff: f64) -> String {
    let mut out = SERIES_COLUMNS.join(",");
    out.push('\n');
    for r in series {
        let _ = writeln!(
            out,
            "{:?},{:?},{:?},{:?},{:?},{}",
            r.t, r.c1_hat, kappa_eff, r.alignment_energy, r.max_orthogonality_defect, r.singular_skips
        );
    }
    out
}

fn cmd_simulate(args: &SimulateArgs) -> Result<(String, serde_json::Value)> {
    let text = std::fs::read_to_string(&args.config).map_err(|e| {
        Error::InvalidConfig(format!("cannot read config {}: {e}", args.config.display()))
    })?;
    let config = SimConfig::from_json(&text)?;
    let output = simulate(&config)?;
    let csv = series_to_csv(&output.series, output.summary.kappa_eff);
    let summary = serde_json::to_string_pretty(&output.summary)? + "\n";
    match &args.out {
        Some(out) => {
            std::fs::write(summary_path(out), &summary)?;
            println!(
                "c1_hat (second half) = {:?}, c1(nu/D = {:?}) = {}",
                output.summary.c1_hat_second_half,
                output.summary.kappa_eff,
                output
                    .summary
                    .c1_theory
                    .map_or("n/a".to_string(), |c| format!("{c:?}"))
            );
        }
        None => eprint!("{summary}"),
    }
    if let Some(snap) = &args.snapshot {
        std::fs::write(snap, serde_json::to_string(&output.final_state)? + "\n")?;
    }
    Ok((csv, serde_json::to_value(&config)?))
}

/// `<out>.summary.json` next to a simulation's CSV.
pub fn summary_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".summary.json");
    PathBuf::from(s)
}

fn run_command(cli: &Cli, started: Instant) -> Result<i32> {
    let (name, out, inputs, outcome): (&str, Option<PathBuf>, Vec<PathBuf>, Result<(String, serde_json::Value, i32)>) =
        match &cli.command {
            Command::Coeffs(a) => (
                "coeffs",
                a.output.out.clone(),
                vec![],
                cmd_coeffs(a).map(|(t, c)| (t, c, EXIT_OK)),
            ),
            Command::Sweep(a) => (
                "sweep",
                a.output.out.clone(),
                vec![],
                cmd_sweep(a).map(|(t, c)| (t, c, EXIT_OK)),
            ),
            Command::Validate(a) => (
                "validate",
                a.out.clone(),
                vec![],
                validate::cmd_validate(a),
            ),
            Command::Simulate(a) => (
                "simulate",
                a.out.clone(),
                vec![a.config.clone()],
                cmd_simulate(a).map(|(t, c)| (t, c, EXIT_OK)),
            ),
        };
    let (text, config, code) = outcome?;
    emit(&text, out.as_deref())?;
    if let Some(out) = out {
        let mut outputs = vec![out.clone()];
        if name == "simulate" {
            outputs.push(summary_path(&out));
        }
        let m = RunManifest::build(name, config, &inputs, &outputs, cli.threads, started)?;
        m.write_next_to(&out)?;
    }
    Ok(code)
}

/// Parses `args`, runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    if let Some(t) = cli.threads {
        if t == 0 {
            eprintln!("error: --threads must be at least 1");
            return EXIT_CONFIG;
        }
        // a second initialization (tests calling run twice) keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(t).build_global();
    }
    let started = Instant::now();
    match run_command(&cli, started) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
