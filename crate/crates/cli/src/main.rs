//! `ella`: run continual-learning experiments with the ELLA regularizer and
//! verify the shrinkage theory behind it.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use ella_core::config::{
    default_config_text, load_config, parse_config, parse_override, RunConfig,
};
use ella_core::harness::{all_baselines, build_stream, lambda_sweep, run_full};
use ella_core::report::{
    self, baseline_json, prepare_run_dir, sweep_json, task_names, write_baselines, write_json,
    write_run, write_sweep,
};
use ella_core::verify::run_verification;
use ella_core::Execution;

/// Environment variable consulted when `--output-dir` is absent.
const OUTPUT_DIR_ENV: &str = "ELLA_OUTPUT_DIR";
const DEFAULT_LAMBDAS: &str = "0,0.01,0.1,1,10,100,1000";

#[derive(Parser)]
#[command(
    name = "ella",
    version,
    about = "Continual learning with energy-weighted low-rank adapters"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the task stream once and write accuracy matrix, metrics and diagnostics.
    Run(RunArgs),
    /// Run the stream once per λ and write sweep.csv.
    Sweep(SweepArgs),
    /// Train every task alone from the frozen base and write baseline.csv.
    Baseline(RunArgs),
    /// Monte-Carlo check of the closed-form solution and its bounds.
    Verify(VerifyArgs),
    /// Print (or write) the commented default configuration.
    GenConfig(GenConfigArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML config file; built-in defaults when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted-key override, e.g. `--set ella.epsilon=1e-6`; repeatable, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Run fan-out sequentially even when built with parallelism.
    #[arg(long)]
    sequential: bool,
}

#[derive(Args)]
struct OutputArgs {
    /// Run directory; created if absent.
    #[arg(long, env = OUTPUT_DIR_ENV, default_value = "ella-out")]
    output_dir: PathBuf,
    /// Write into a non-empty run directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    output: OutputArgs,
    /// Comma-separated λ values applied to every task after the first.
    #[arg(long, default_value = DEFAULT_LAMBDAS, value_delimiter = ',')]
    lambdas: Vec<f64>,
}

#[derive(Args)]
struct VerifyArgs {
    /// Random draws per check.
    #[arg(long, default_value_t = 10_000)]
    trials: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Also write counterexamples.json here when a check fails.
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    sequential: bool,
}

#[derive(Args)]
struct GenConfigArgs {
    /// Destination file; standard output when absent.
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long)]
    force: bool,
}

fn execution(sequential: bool) -> Execution {
    if sequential {
        Execution::Sequential
    } else {
        Execution::Parallel
    }
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut overrides = self
            .overrides
            .iter()
            .map(|s| parse_override(s))
            .collect::<ella_core::Result<Vec<_>>>()?;
        if let Some(seed) = self.seed {
            overrides.push(("seed".into(), seed.to_string()));
        }
        let mut config = match &self.config {
            Some(path) => load_config(path, &overrides)?,
            None => parse_config(&default_config_text(), &overrides)?,
        };
        if self.sequential {
            config.output.execution = Execution::Sequential;
        }
        Ok(config)
    }
}

fn run(args: &RunArgs) -> Result<bool> {
    let config = args.config.resolve()?;
    let dir = &args.output.output_dir;
    prepare_run_dir(dir, args.output.force)?;
    eprintln!(
        "running {} tasks (seed {})",
        config.num_tasks(),
        config.seed
    );
    let report = run_full(&config)?;
    write_run(dir, &config, &report)?;
    if let Some(why) = &report.outcome.aborted {
        eprintln!("run aborted: {why}");
        return Ok(false);
    }
    if let Some(m) = report.metrics {
        println!("OA  {:.4}", m.oa);
        if let Some(b) = m.bwt {
            println!("BWT {b:.4}");
        }
        if let Some(f) = m.fwt {
            println!("FWT {f:.4}");
        }
    }
    if let Some(g) = &report.general {
        println!("GA  {:.4} (ΔGA {:+.4})", g.ga, g.delta_ga);
    }
    println!("wrote {}", dir.display());
    Ok(true)
}

fn sweep(args: &SweepArgs) -> Result<bool> {
    if args.lambdas.is_empty() {
        bail!("--lambdas must list at least one value");
    }
    let config = args.config.resolve()?;
    let dir = &args.output.output_dir;
    prepare_run_dir(dir, args.output.force)?;
    let rows = lambda_sweep(&config, &args.lambdas, config.output.execution)?;
    let hash = build_stream(&config)?.hash;
    write_sweep(&dir.join(report::SWEEP_FILE), &rows)?;
    write_json(
        &dir.join(report::METRICS_FILE),
        &sweep_json(&config, &hash, &rows)?,
    )?;
    for r in &rows {
        println!("lambda {:<10} OA {:.4}", r.lambda, r.oa);
    }
    println!("wrote {}", dir.display());
    Ok(true)
}

fn baseline(args: &RunArgs) -> Result<bool> {
    let config = args.config.resolve()?;
    config.validate()?;
    let dir = &args.output.output_dir;
    prepare_run_dir(dir, args.output.force)?;
    let data = build_stream(&config)?;
    let accs = all_baselines(&config, &data, config.output.execution)?;
    let names = task_names(&config);
    write_baselines(&dir.join(report::BASELINE_FILE), &names, &accs)?;
    write_json(
        &dir.join(report::METRICS_FILE),
        &baseline_json(&config, &data.hash, &accs)?,
    )?;
    for (n, a) in names.iter().zip(&accs) {
        println!("{n:<16} {a:.4}");
    }
    Ok(true)
}

fn verify(args: &VerifyArgs) -> Result<bool> {
    let report = run_verification(args.trials, args.seed, execution(args.sequential))?;
    print!("{}", report.summary());
    if report.passed() {
        println!("all checks passed");
        return Ok(true);
    }
    let dump = serde_json::to_string_pretty(&report.counterexamples())?;
    match &args.output_dir {
        Some(dir) => {
            fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            let path = dir.join("counterexamples.json");
            fs::write(&path, dump).with_context(|| format!("writing {}", path.display()))?;
            eprintln!("counterexamples written to {}", path.display());
        }
        None => eprintln!("counterexamples:\n{dump}"),
    }
    Ok(false)
}

fn write_new(path: &Path, text: &str, force: bool) -> Result<()> {
    if path.exists() && !force {
        bail!(
            "{} already exists (use --force to overwrite)",
            path.display()
        );
    }
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn gen_config(args: &GenConfigArgs) -> Result<bool> {
    let text = default_config_text();
    match &args.output {
        Some(path) => write_new(path, &text, args.force)?,
        None => print!("{text}"),
    }
    Ok(true)
}

fn dispatch(cli: &Cli) -> Result<bool> {
    match &cli.command {
        Command::Run(a) => run(a),
        Command::Sweep(a) => sweep(a),
        Command::Baseline(a) => baseline(a),
        Command::Verify(a) => verify(a),
        Command::GenConfig(a) => gen_config(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
