//! `gwk`: analyze Galton-Watson offspring laws from the command line.
//!
//! One subcommand per artifact: `analyze` (full report), `limit` (iteration
//! trace and extrapolated constants), `bounds` (series bounds), `invariant`
//! (invariant measure, closed-form or empirical), `qprocess` (rows, moments
//! and a sampled trajectory), `simulate` (Monte Carlo), `verify` (identity
//! ledger).
//!
//! Exit codes: 0 success, 1 invalid law or input file, 2 numerical failure
//! (critical law, non-convergence, failed identity), 3 usage error.

mod output;
mod verify;

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use gwk_core::asymptotics::{
    self, default_probe_points, delta_bounds, limit_estimate, nu_coefficients, p11_check,
    yaglom_conditional, BoundsReport, LimitEstimate, MeasureMode, P11Report, ProcessParams,
};
use gwk_core::montecarlo::{self, SimConfig};
use gwk_core::offspring::{self, LawError};
use gwk_core::qprocess;
use gwk_core::OffspringLaw;
use output::Format;

#[derive(Parser)]
#[command(name = "gwk", version, about = "Galton-Watson branching process toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
    /// Output format.
    #[arg(long, global = true, value_enum, default_value = "json")]
    format: Format,
    /// Write output to a file instead of stdout.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Renormalize pmf masses whose sum is off by more than 1e-12 instead
    /// of rejecting them.
    #[arg(long, global = true)]
    renormalize: bool,
}

#[derive(Args)]
struct LawArg {
    /// Law file: {"type":"pmf","p":[...]} or
    /// {"type":"linear_fractional","b":0.2,"c":0.5}.
    law: PathBuf,
}

#[derive(Subcommand)]
enum Cmd {
    /// Full report: parameters, limits, bounds, invariant measure, gap.
    Analyze {
        #[command(flatten)]
        law: LawArg,
        #[arg(long, default_value_t = 200)]
        n_max: usize,
        #[arg(long, default_value_t = 1e-9)]
        tol: f64,
        #[arg(long, default_value_t = 60)]
        j_max: usize,
        /// Probe points for the profile, comma-separated (default: the
        /// standard probe set).
        #[arg(long)]
        s: Option<String>,
    },
    /// Iteration trace and extrapolated limits.
    Limit {
        #[command(flatten)]
        law: LawArg,
        #[arg(long, default_value_t = 200)]
        n_max: usize,
        #[arg(long, default_value_t = 1e-9)]
        tol: f64,
        #[arg(long)]
        s: Option<String>,
    },
    /// Series bounds on the profile parameter.
    Bounds {
        #[command(flatten)]
        law: LawArg,
        #[arg(long, default_value_t = 1e-12)]
        tol: f64,
    },
    /// Invariant measure of the Q-process.
    Invariant {
        #[command(flatten)]
        law: LawArg,
        /// closed | empirical
        #[arg(long, default_value = "closed")]
        mode: String,
        #[arg(long, default_value_t = 60)]
        j_max: usize,
    },
    /// Q-process transition row, moments, and a sampled trajectory.
    Qprocess {
        #[command(flatten)]
        law: LawArg,
        #[arg(long, default_value_t = 8)]
        steps: usize,
        #[arg(long, default_value_t = 1)]
        i: u64,
        #[arg(long, default_value_t = 60)]
        j_max: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Monte Carlo simulation of the population chain.
    Simulate {
        #[command(flatten)]
        law: LawArg,
        /// Horizon in generations.
        #[arg(long, default_value_t = 12)]
        n: usize,
        #[arg(long, default_value_t = 100_000)]
        reps: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Simulate the process conditioned on eventual extinction (the
        /// dual law).
        #[arg(long)]
        conditional: bool,
        /// Emit the decay-constant trace at these horizons instead,
        /// comma-separated.
        #[arg(long)]
        k_at: Option<String>,
    },
    /// Run every cross-module identity and report a pass/fail ledger.
    Verify {
        #[command(flatten)]
        law: LawArg,
        #[arg(long, default_value_t = 200)]
        n_max: usize,
        /// Extrapolation tolerance; identity thresholds assume it is at
        /// least this tight.
        #[arg(long, default_value_t = 1e-11)]
        tol: f64,
        #[arg(long, default_value_t = 60)]
        j_max: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Debug)]
enum CliError {
    Input(String),
    Numerical(String),
    Usage(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Input(_) => 1,
            CliError::Numerical(_) => 2,
            CliError::Usage(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Input(m) | CliError::Numerical(m) | CliError::Usage(m) => f.write_str(m),
        }
    }
}

impl From<asymptotics::AsymptoticsError> for CliError {
    fn from(e: asymptotics::AsymptoticsError) -> Self {
        CliError::Numerical(e.to_string())
    }
}

impl From<qprocess::QProcessError> for CliError {
    fn from(e: qprocess::QProcessError) -> Self {
        CliError::Numerical(e.to_string())
    }
}

impl From<montecarlo::SimError> for CliError {
    fn from(e: montecarlo::SimError) -> Self {
        CliError::Numerical(e.to_string())
    }
}

fn parse_law_file(path: &Path, renormalize: bool) -> Result<OffspringLaw, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Input(format!("cannot read {}: {e}", path.display())))?;
    let law: OffspringLaw = serde_json::from_str(&text)
        .map_err(|e| CliError::Input(format!("cannot parse {}: {e}", path.display())))?;
    let validated = match &law {
        OffspringLaw::Pmf { p } => {
            if renormalize {
                offspring::validate_renormalizing(p)
            } else {
                offspring::validate(p)
            }
        }
        OffspringLaw::LinearFractional { .. } => law.revalidate(),
    };
    validated.map_err(|e: LawError| CliError::Input(format!("{}: {e}", path.display())))
}

fn parse_probe_list(text: &str, params: &ProcessParams) -> Result<Vec<f64>, CliError> {
    let mut out = Vec::new();
    for piece in text.split(',') {
        let s: f64 = piece
            .trim()
            .parse()
            .map_err(|_| CliError::Usage(format!("--s: `{piece}` is not a number")))?;
        if !(0.0..1.0).contains(&s) {
            return Err(CliError::Usage(format!("--s: {s} outside [0,1)")));
        }
        if (s - params.q).abs() < 1e-12 {
            eprintln!("note: dropping probe s = {s}: coincides with q");
            continue;
        }
        out.push(s);
    }
    Ok(out)
}

fn parse_horizon_list(text: &str) -> Result<Vec<usize>, CliError> {
    text.split(',')
        .map(|piece| {
            piece
                .trim()
                .parse::<usize>()
                .map_err(|_| CliError::Usage(format!("--k-at: `{piece}` is not a horizon")))
        })
        .collect()
}

/// Compact view of an invariant measure for the analyze report.
#[derive(Serialize)]
struct InvariantSummary {
    source: MeasureMode,
    nu_head: Vec<f64>,
    pi_head: Vec<f64>,
    pi_total: f64,
    residual_l1: f64,
}

impl InvariantSummary {
    fn of(m: &qprocess::InvariantMeasure) -> Self {
        let head = m.pi.len().min(12);
        InvariantSummary {
            source: m.source,
            nu_head: m.nu[..head].to_vec(),
            pi_head: m.pi[..head].to_vec(),
            pi_total: offspring::kahan_sum(m.pi.iter().copied()),
            residual_l1: m.residual_l1,
        }
    }
}

#[derive(Serialize)]
struct Discrepancy {
    k_theory: f64,
    k_hat: f64,
    absolute_gap: f64,
    relative_gap: f64,
    lf_exact: bool,
}

/// The full `analyze` report.
#[derive(Serialize)]
struct Report {
    law_echo: OffspringLaw,
    params: ProcessParams,
    limit: LimitEstimate,
    bounds: BoundsReport,
    invariant_closed_form: InvariantSummary,
    invariant_empirical: InvariantSummary,
    p11: P11Report,
    yaglom_mean: f64,
    yaglom_implied_k: f64,
    discrepancy: Discrepancy,
}

fn run(cli: &Cli) -> Result<u8, CliError> {
    let (text, code) = match &cli.cmd {
        Cmd::Analyze {
            law,
            n_max,
            tol,
            j_max,
            s,
        } => {
            let law = parse_law_file(&law.law, cli.renormalize)?;
            let params = asymptotics::derive_params(&law)?;
            let probes = match s {
                Some(text) => parse_probe_list(text, &params)?,
                None => default_probe_points(&params),
            };
            let est = limit_estimate(&law, &params, &probes, *n_max, *tol);
            let bounds = delta_bounds(&law, &params, 1e-12);
            let closed = qprocess::invariant_measure(&law, &params, *j_max, MeasureMode::ClosedForm)?;
            let empirical =
                qprocess::invariant_measure(&law, &params, *j_max, MeasureMode::Empirical)?;
            let yaglom = yaglom_conditional(&law, &params, qprocess::tail_resolved_length(&params, *j_max))?;
            let report = Report {
                law_echo: law.clone(),
                discrepancy: Discrepancy {
                    k_theory: params.k_theory,
                    k_hat: est.k_hat,
                    absolute_gap: (est.k_hat - params.k_theory).abs(),
                    relative_gap: ((est.k_hat - params.k_theory) / params.k_theory).abs(),
                    lf_exact: law.is_linear_fractional(),
                },
                p11: p11_check(&law, &params, *n_max),
                invariant_closed_form: InvariantSummary::of(&closed),
                invariant_empirical: InvariantSummary::of(&empirical),
                yaglom_mean: yaglom.mean,
                yaglom_implied_k: yaglom.implied_k,
                params,
                limit: est,
                bounds,
            };
            let code = if report.limit.converged { 0 } else { 2 };
            (render(cli.format, &report), code)
        }
        Cmd::Limit {
            law,
            n_max,
            tol,
            s,
        } => {
            let law = parse_law_file(&law.law, cli.renormalize)?;
            let params = asymptotics::derive_params(&law)?;
            let probes = match s {
                Some(text) => parse_probe_list(text, &params)?,
                None => default_probe_points(&params),
            };
            let est = limit_estimate(&law, &params, &probes, *n_max, *tol);
            let code = if est.converged { 0 } else { 2 };
            (render(cli.format, &est), code)
        }
        Cmd::Bounds { law, tol } => {
            let law = parse_law_file(&law.law, cli.renormalize)?;
            let params = asymptotics::derive_params(&law)?;
            (render(cli.format, &delta_bounds(&law, &params, *tol)), 0)
        }
        Cmd::Invariant { law, mode, j_max } => {
            let law = parse_law_file(&law.law, cli.renormalize)?;
            let params = asymptotics::derive_params(&law)?;
            let mode = match mode.as_str() {
                "closed" | "closed_form" => MeasureMode::ClosedForm,
                "empirical" => MeasureMode::Empirical,
                other => {
                    return Err(CliError::Usage(format!(
                        "--mode must be closed or empirical, got `{other}`"
                    )))
                }
            };
            let measure = qprocess::invariant_measure(&law, &params, *j_max, mode)?;
            // The ν coefficients double as the conditional-limit input;
            // emit them alongside.
            let nu = nu_coefficients(&law, &params, *j_max, mode)?;
            #[derive(Serialize)]
            struct InvariantReport {
                measure: qprocess::InvariantMeasure,
                nu_meta: asymptotics::NuCoefficients,
            }
            (
                render(
                    cli.format,
                    &InvariantReport {
                        measure,
                        nu_meta: nu,
                    },
                ),
                0,
            )
        }
        Cmd::Qprocess {
            law,
            steps,
            i,
            j_max,
            seed,
        } => {
            let law = parse_law_file(&law.law, cli.renormalize)?;
            let params = asymptotics::derive_params(&law)?;
            let row = qprocess::q_row(&law, &params, *i, *steps, *j_max)?;
            let trajectory = qprocess::sample_path(
                &law,
                &params,
                *i,
                *steps,
                *seed,
                qprocess::DEFAULT_STATE_CAP,
            )?;
            #[derive(Serialize)]
            struct QProcessReport {
                row: qprocess::QRow,
                moments: qprocess::QMoments,
                trajectory: Vec<u64>,
            }
            (
                render(
                    cli.format,
                    &QProcessReport {
                        moments: qprocess::moments(&params, *steps, *i),
                        row,
                        trajectory,
                    },
                ),
                0,
            )
        }
        Cmd::Simulate {
            law,
            n,
            reps,
            seed,
            conditional,
            k_at,
        } => {
            let law = parse_law_file(&law.law, cli.renormalize)?;
            let cfg = SimConfig::new(*n, *reps, *seed);
            match k_at {
                Some(text) => {
                    let params = asymptotics::derive_params(&law)?;
                    let horizons = parse_horizon_list(text)?;
                    let rows = montecarlo::k_trace(&law, &params, &cfg, &horizons)?;
                    (render(cli.format, &rows), 0)
                }
                None => {
                    let est = if *conditional {
                        let params = asymptotics::derive_params(&law)?;
                        montecarlo::conditional_on_extinction(&law, &params, &cfg)?
                    } else {
                        montecarlo::simulate(&law, &cfg)?
                    };
                    (render(cli.format, &est), 0)
                }
            }
        }
        Cmd::Verify {
            law,
            n_max,
            tol,
            j_max,
            seed,
        } => {
            let law = parse_law_file(&law.law, cli.renormalize)?;
            let ledger = verify::verify_suite(&law, *n_max, *tol, *j_max, *seed)?;
            let code = if ledger.all_passed { 0 } else { 2 };
            (render(cli.format, &ledger), code)
        }
    };

    match &cli.out {
        Some(path) => std::fs::write(path, text)
            .map_err(|e| CliError::Input(format!("cannot write {}: {e}", path.display())))?,
        None => print!("{text}"),
    }
    Ok(code)
}

fn render<T: Serialize>(format: Format, value: &T) -> String {
    match format {
        Format::Json => output::to_json_string(value),
        Format::Csv => output::to_csv_string(value),
        Format::Table => output::to_table_string(value),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 3,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
