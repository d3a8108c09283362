//! Command-line driver: run catalog cases, evaluate the Schur
//! condition-number oracle, and export linear systems as Matrix Market files.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use thermoflow::cases::{
    build_case, export_matrix, run_case, schur_condition_oracle, CaseConfig, CaseKind,
};
use thermoflow::solver::{time_loop, LinearSolver, NewtonConfig};

#[derive(Parser)]
#[command(
    name = "thermoflow",
    about = "Thermal two-phase reservoir simulator with two-stage preconditioning"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a case and write CSV/JSON metrics.
    Run(RunArgs),
    /// Report temperature Schur-complement condition numbers for a case.
    Oracle(RunArgs),
    /// Write the Jacobian and right-hand side of one step's first Newton
    /// linearization as Matrix Market files.
    ExportMatrix(ExportArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// Key-value config file; omit to start from the case defaults.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Case name (required when no config file is given): heater-2d,
    /// well-2d-iso, well-2d-aniso, well-3d, crosscoup-2d, spe10-slice,
    /// slice-heater, slice-well.
    #[arg(long)]
    case: Option<String>,

    /// Refinement parameter N.
    #[arg(long)]
    n: Option<usize>,

    /// Preconditioner variant (e.g. cpr-amg, cptr-block-amg).
    #[arg(long)]
    precond: Option<String>,

    /// Decoupling override: none, qi, ti.
    #[arg(long)]
    decouple: Option<String>,

    /// Fill level of the second-stage ILU (0 or 1).
    #[arg(long)]
    ilu_level: Option<usize>,

    /// Number of block-Jacobi ILU subdomains P.
    #[arg(long)]
    subdomains: Option<usize>,

    /// Cross-coupling strength multiplier.
    #[arg(long)]
    coupling_factor: Option<f64>,

    /// Time-step size in days.
    #[arg(long)]
    dt: Option<f64>,

    /// Number of time steps.
    #[arg(long)]
    steps: Option<usize>,

    /// Stage order: restricted-first or ilu-first.
    #[arg(long)]
    order: Option<String>,

    /// Equation row scaling: on or off.
    #[arg(long)]
    scaling: Option<String>,

    /// Time-step heuristics: on or off.
    #[arg(long)]
    heuristics: Option<String>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: CommonArgs,

    /// Output path prefix; writes <out>.csv and <out>.json.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExportArgs {
    #[command(flatten)]
    common: CommonArgs,

    /// One-based step index to linearize.
    #[arg(long)]
    step: usize,

    /// Output path prefix for the .mtx files.
    #[arg(long, default_value = "matrix")]
    out: PathBuf,
}

fn build_config(args: &CommonArgs) -> Result<CaseConfig> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))?;
            CaseConfig::from_text(&text)?
        }
        None => {
            let name = args
                .case
                .as_deref()
                .ok_or_else(|| anyhow::anyhow!("either --config or --case is required"))?;
            CaseConfig::default_for(CaseKind::parse(name)?)
        }
    };
    let overrides: [(&str, Option<String>); 12] = [
        ("case", args.case.clone()),
        ("n", args.n.map(|v| v.to_string())),
        ("precond", args.precond.clone()),
        ("decouple", args.decouple.clone()),
        ("ilu_level", args.ilu_level.map(|v| v.to_string())),
        ("subdomains", args.subdomains.map(|v| v.to_string())),
        (
            "coupling_factor",
            args.coupling_factor.map(|v| v.to_string()),
        ),
        ("dt_days", args.dt.map(|v| v.to_string())),
        ("steps", args.steps.map(|v| v.to_string())),
        ("order", args.order.clone()),
        ("scaling", args.scaling.clone()),
        ("heuristics", args.heuristics.clone()),
    ];
    for (key, value) in overrides {
        if let Some(v) = value {
            cfg.set(key, &v)?;
        }
    }
    Ok(cfg)
}

fn cmd_run(args: &RunArgs) -> Result<ExitCode> {
    let mut cfg = build_config(&args.common)?;
    if let Some(out) = &args.out {
        cfg.out = Some(out.clone());
    }
    let outcome = run_case(&cfg)?;
    println!(
        "case {} (n = {}, precond = {}): {} accepted step(s)",
        cfg.case.name(),
        cfg.n,
        cfg.precond,
        outcome.rows.len()
    );
    for r in &outcome.rows {
        println!(
            "  step {:>3}: dt = {:6.3} d, newton = {:2}, linear = {:3}, \
             avg linear/newton = {:5.2}",
            r.step, r.dt_days, r.newton_iters, r.total_linear_iters, r.avg_linear_per_newton
        );
    }
    println!(
        "totals: newton = {}, linear = {}, avg linear/newton = {:.2}",
        outcome.stats.total_newton(),
        outcome.stats.total_linear(),
        outcome.stats.avg_linear_per_newton()
    );
    if let Some(out) = &cfg.out {
        println!(
            "wrote {} and {}",
            out.with_extension("csv").display(),
            out.with_extension("json").display()
        );
    }
    if let Some(msg) = &outcome.aborted {
        eprintln!("solver aborted: {msg}");
        return Ok(ExitCode::FAILURE);
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_oracle(args: &RunArgs) -> Result<ExitCode> {
    let cfg = build_config(&args.common)?;
    let built = build_case(&cfg)?;
    let (state, _) = time_loop(
        &built.model,
        &built.initial,
        LinearSolver::TwoStage(&built.spec),
        &NewtonConfig::default(),
        &built.schedule,
    )?;
    let report = schur_condition_oracle(&built.model, &state)?;
    let json = serde_json::json!({
        "case": cfg.case.name(),
        "n": cfg.n,
        "perm_scale": cfg.perm_scale,
        "cond_schur_exact": report.cond_schur_exact,
        "cond_a_tt": report.cond_a_tt,
        "precond_diag": report.precond_diag,
        "precond_att": report.precond_att,
        "precond_schur": report.precond_schur,
    });
    println!("{}", serde_json::to_string_pretty(&json)?);
    if let Some(out) = &args.out {
        std::fs::write(
            out.with_extension("json"),
            serde_json::to_string_pretty(&json)? + "\n",
        )?;
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_export(args: &ExportArgs) -> Result<ExitCode> {
    let cfg = build_config(&args.common)?;
    if args.step == 0 {
        bail!("--step is one-based");
    }
    let (jac, rhs) = export_matrix(&cfg, args.step, &args.out)?;
    println!("wrote {} and {}", jac.display(), rhs.display());
    Ok(ExitCode::SUCCESS)
}

fn main() -> Result<ExitCode> {
    let cli = Cli::parse();
    match &cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Oracle(args) => cmd_oracle(args),
        Command::ExportMatrix(args) => cmd_export(args),
    }
}
