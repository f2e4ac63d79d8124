use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};

use netabs::config::PipelineConfig;
use netabs::pipeline::{error_exit_code, Pipeline, Stage};

/// Compositional finite abstraction, certification and safety synthesis for
/// networks of linear stochastic subsystems.
///
/// Exit codes: 0 success, 1 I/O or internal error, 2 configuration error,
/// 3 abstract, 4 certify, 5 compose, 6 bound, 7 synth, 8 simulate.
#[derive(Parser, Debug)]
#[command(name = "netabs", version)]
struct Cli {
    /// Pipeline configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; overrides `output.dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Simulation seed; overrides `simulation.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true, env = "NETABS_THREADS")]
    threads: Option<usize>,
    /// Comma-separated stages to run, in pipeline order.
    #[arg(long, global = true, value_delimiter = ',')]
    stage: Vec<String>,
    /// Recompute even when cached artifacts are up to date.
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Build the per-class MDPs.
    Abstract,
    /// Check the storage-function matrix inequality (and drift audit).
    Certify,
    /// Check the compositional conditions and aggregate the certificates.
    Compose,
    /// Evaluate the closeness bound.
    Bound,
    /// Synthesize safety policies.
    Synth,
    /// Simulate the coupled closed loop.
    Simulate,
    /// Run every stage.
    All,
}

fn stages(cli: &Cli) -> Result<Vec<Stage>, String> {
    let single = match cli.command {
        Some(Command::Abstract) => Some(Stage::Abstract),
        Some(Command::Certify) => Some(Stage::Certify),
        Some(Command::Compose) => Some(Stage::Compose),
        Some(Command::Bound) => Some(Stage::Bound),
        Some(Command::Synth) => Some(Stage::Synth),
        Some(Command::Simulate) => Some(Stage::Simulate),
        Some(Command::All) => return Ok(Stage::ALL.to_vec()),
        None => None,
    };
    if let Some(s) = single {
        return Ok(vec![s]);
    }
    if cli.stage.is_empty() || cli.stage.iter().any(|s| s == "all") {
        return Ok(Stage::ALL.to_vec());
    }
    let mut out = Vec::new();
    for name in &cli.stage {
        out.push(Stage::parse(name).ok_or_else(|| format!("unknown stage `{name}`"))?);
    }
    out.sort();
    out.dedup();
    Ok(out)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let Some(config) = &cli.config else {
        eprintln!("error: --config <path> is required");
        return ExitCode::from(2);
    };
    let stages = match stages(&cli) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("warning: thread pool: {e}");
        }
    }
    let pipeline = match PipelineConfig::load(config).and_then(|c| Pipeline::new(c, cli.out.clone(), cli.seed)) {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(error_exit_code(&e) as u8);
        }
    };
    let t = Instant::now();
    let (outcomes, code) = pipeline.run(&stages, cli.force);
    for o in &outcomes {
        let state = match (o.pass, o.skipped) {
            (true, true) => "pass (up to date)",
            (true, false) => "pass",
            (false, true) => "FAIL (up to date)",
            (false, false) => "FAIL",
        };
        println!("[{}] {state}", o.stage);
        for l in &o.lines {
            println!("  {l}");
        }
    }
    if code != 0 {
        if let Some(o) = outcomes.last() {
            eprintln!("stage {} failed (exit code {code})", o.stage);
        }
    }
    eprintln!("finished in {:.2}s, artifacts in {}", t.elapsed().as_secs_f64(), pipeline.out_dir().display());
    ExitCode::from(code as u8)
}
