//! `tempscale`: sweep, vote, report and scenario generation from the shell.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use tempscale_core::runner::{
    cmd_report, cmd_sweep, cmd_vote, scenario_gen, Manifest, Overrides, ReportOptions, ReportRequest, RunOutcome,
};
use tempscale_core::{build_grid, RunConfig, RunReport, RunnerError, Temperature, VerifierKind};

#[derive(Parser)]
#[command(name = "tempscale", version, about = "Multi-temperature test-time scaling runs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample the full temperature plan for every question.
    Sweep(RunArgs),
    /// Two-stage voting early exit, then the fallback plan for survivors.
    Vote(RunArgs),
    /// Recompute all statistics from existing trace stores.
    Report(ReportArgs),
    /// Write a simulated taxonomy scenario as TOML.
    ScenarioGen(ScenarioArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Run configuration (TOML).
    #[arg(long, short)]
    config: PathBuf,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the config's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Drop raw completions from the store.
    #[arg(long)]
    prune_raw: bool,
    /// Continue a run whose store already holds traces.
    #[arg(long)]
    resume: bool,
}

#[derive(Args)]
struct ReportArgs {
    /// Trace stores (JSONL); records from all of them are pooled.
    #[arg(required = true)]
    stores: Vec<PathBuf>,
    /// Config of the run that wrote the stores; supplies manifest and report options.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Question manifest (JSONL); overrides the config's.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Default verifier for manifest entries without one.
    #[arg(long, value_enum, default_value_t = Verifier::BoxedInteger)]
    verifier: Verifier,
    #[arg(long, default_value = "report")]
    out: PathBuf,
    /// File name prefix of the written tables.
    #[arg(long, default_value = "report")]
    prefix: String,
    /// K values for Pass@K curves, comma separated.
    #[arg(long, value_delimiter = ',')]
    k_grid: Option<Vec<u64>>,
    /// Judged-valid overlay (JSONL) from an external validation pass.
    #[arg(long)]
    judged_valid: Option<PathBuf>,
}

#[derive(Args)]
struct ScenarioArgs {
    #[arg(long, default_value_t = 10)]
    easy: usize,
    #[arg(long, default_value_t = 10)]
    medium: usize,
    #[arg(long, default_value_t = 8)]
    hard: usize,
    #[arg(long, default_value_t = 2)]
    impossible: usize,
    #[arg(long, default_value = "0.0")]
    t_min: Temperature,
    #[arg(long, default_value = "1.2")]
    t_max: Temperature,
    #[arg(long, default_value = "0.1")]
    step: Temperature,
    #[arg(long)]
    seed: u64,
    /// Output file; stdout when absent.
    #[arg(long, short)]
    output: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Verifier {
    BoxedInteger,
    BoxedExact,
    ExactMatch,
    ExternalJudgeStub,
}

impl From<Verifier> for VerifierKind {
    fn from(v: Verifier) -> Self {
        match v {
            Verifier::BoxedInteger => VerifierKind::BoxedInteger,
            Verifier::BoxedExact => VerifierKind::BoxedExact,
            Verifier::ExactMatch => VerifierKind::ExactMatch,
            Verifier::ExternalJudgeStub => VerifierKind::ExternalJudgeStub,
        }
    }
}

fn load_config(args: &RunArgs) -> Result<RunConfig, RunnerError> {
    let mut config = RunConfig::load(&args.config)?;
    Overrides {
        seed: args.seed,
        out: args.out.clone(),
        prune_raw: args.prune_raw,
        resume: args.resume,
    }
    .apply(&mut config);
    Ok(config)
}

fn report_request(args: &ReportArgs) -> Result<ReportRequest, RunnerError> {
    let mut request = match &args.config {
        Some(path) => ReportRequest::for_config(&RunConfig::load(path)?, args.stores.clone())?,
        None => ReportRequest {
            stores: args.stores.clone(),
            options: ReportOptions::default(),
            ..Default::default()
        },
    };
    if let Some(path) = &args.manifest {
        request.manifest = Some(Manifest::load(path, args.verifier.into())?);
    }
    if let Some(k) = &args.k_grid {
        request.options.k_grid = Some(k.clone());
    }
    if let Some(path) = &args.judged_valid {
        request.options.judged_valid = Some(path.clone());
    }
    Ok(request)
}

fn scenario(args: &ScenarioArgs) -> Result<(), RunnerError> {
    let temps = build_grid(args.t_min, args.t_max, args.step, 1)
        .map_err(|e| RunnerError::Config(e.to_string()))?
        .temperatures()
        .to_vec();
    let counts = [args.easy, args.medium, args.hard, args.impossible];
    let (_, text) = scenario_gen(counts, &temps, args.seed)?;
    match &args.output {
        Some(path) => {
            fs::write(path, text).map_err(|e| RunnerError::Io(format!("{}: {e}", path.display())))?;
            println!("wrote {}", path.display());
        }
        None => print!("{text}"),
    }
    Ok(())
}

/// A closed stdout (`| head`) is not an error.
fn summarize(outcome: &RunOutcome) {
    let _ = write_summary(&mut std::io::stdout().lock(), outcome);
}

fn write_summary(w: &mut impl Write, outcome: &RunOutcome) -> std::io::Result<()> {
    let r: &RunReport = &outcome.report;
    let p = &r.pass_all;
    writeln!(w, "store: {}", outcome.store.display())?;
    writeln!(w, "questions: {}", r.questions.len())?;
    writeln!(w, "pass@all (any temperature): {}/{} = {:.4}", p.solved, p.total, p.multi_temperature)?;
    if let Some(b) = &p.best_single {
        writeln!(w, "best single temperature: T={} pass@N {:.4}", b.temperature, b.value)?;
    }
    if r.unknown_verdicts > 0 {
        writeln!(w, "unknown verdicts: {}", r.unknown_verdicts)?;
    }
    if let Some(v) = &r.voting {
        writeln!(
            w,
            "voting: {} of {} questions exited ({} rounds run), {} samples vs {} for the full grid, dC = {:.2}%",
            v.exited(),
            v.exit_log.len(),
            v.rounds_run,
            v.samples_used,
            v.samples_full_grid,
            100.0 * v.delta_c
        )?;
    }
    for f in &outcome.files {
        writeln!(w, "wrote {}", f.display())?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), RunnerError> {
    match cli.command {
        Command::Sweep(args) => summarize(&cmd_sweep(&load_config(&args)?, args.resume)?),
        Command::Vote(args) => summarize(&cmd_vote(&load_config(&args)?, args.resume)?),
        Command::Report(args) => summarize(&cmd_report(&report_request(&args)?, Path::new(&args.out), &args.prefix)?),
        Command::ScenarioGen(args) => scenario(&args)?,
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
