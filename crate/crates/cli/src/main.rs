use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::Value;

use scvamp_cli::{run_to_dir, train_to_dir, CliError, ExperimentConfig, ExperimentKind};

#[derive(Parser)]
#[command(name = "scvamp", version, about = "Score-based VAMP experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment named by `kind` in the config.
    Run(Common),
    /// Train the pair score network by denoising score matching.
    TrainScore(Common),
    /// State evolution only.
    Se(Common),
    /// EXIT transfer curves and SE staircase.
    Exit(Common),
    /// Decoupling diagnostics of the Module B input errors.
    Diagnose(Common),
    /// Message passing with a Langevin-sampled observation module.
    LangevinDemo(Common),
}

#[derive(Args)]
struct Common {
    /// TOML experiment config; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Runs once per listed seed, each into `<out>/seed-<s>`.
    #[arg(long, value_delimiter = ',', conflicts_with = "seed")]
    seeds: Vec<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads; falls back to SCVAMP_THREADS.
    #[arg(long, env = "SCVAMP_THREADS")]
    threads: Option<usize>,
}

fn load(common: &Common, forced: Option<ExperimentKind>) -> Result<ExperimentConfig, CliError> {
    let mut cfg = match &common.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::io(format!("reading {}", p.display()), e))?;
            ExperimentConfig::from_toml(&text)?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(k) = forced {
        cfg.kind = k;
    }
    if let Some(s) = common.seed {
        cfg.seed = s;
        cfg.dsm.seed = s;
    }
    Ok(cfg.resolve()?)
}

fn out_dir(common: &Common, cfg: &ExperimentConfig) -> PathBuf {
    common
        .out
        .clone()
        .or_else(|| cfg.output.clone())
        .unwrap_or_else(|| PathBuf::from("out").join(cfg.kind.name()))
}

fn print_value(prefix: &str, v: &Value) {
    match v {
        Value::Object(map) => {
            for (k, x) in map {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                print_value(&key, x);
            }
        }
        Value::Array(a) if a.len() > 8 => println!("  {prefix:<44} [{} values]", a.len()),
        Value::Null => {}
        other => println!("  {prefix:<44} {other}"),
    }
}

fn run_one(common: &Common, cfg: ExperimentConfig, train: bool) -> Result<(), CliError> {
    let dir = out_dir(common, &cfg);
    if train {
        let (_, v) = train_to_dir(&cfg, &dir, common.threads)?;
        println!("trained pair score network -> {}", dir.join("weights.json").display());
        if let Some(l) = v["report"]["final_loss"].as_f64() {
            println!("  final loss                                   {l}");
        }
        if let Some(e) = v["score_vs_analytic"]["mean_relative_rms_error"].as_f64() {
            println!("  mean relative RMS error vs analytic score    {e}");
        }
        return Ok(());
    }
    let s = run_to_dir(&cfg, &dir, common.threads)?;
    println!("{} (seed {}) -> {}", cfg.kind.name(), cfg.seed, dir.display());
    print_value("", &s["results"]);
    Ok(())
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    let (common, forced, train) = match &cli.command {
        Command::Run(c) => (c, None, false),
        Command::TrainScore(c) => (c, Some(ExperimentKind::CorrelatedLearned), true),
        Command::Se(c) => (c, Some(ExperimentKind::SeOnly), false),
        Command::Exit(c) => (c, Some(ExperimentKind::Exit), false),
        Command::Diagnose(c) => (c, Some(ExperimentKind::Diagnostics), false),
        Command::LangevinDemo(c) => (c, Some(ExperimentKind::LangevinDemo), false),
    };
    faer::set_global_parallelism(faer::Par::Seq);
    let cfg = load(common, forced)?;
    if common.seeds.is_empty() {
        return run_one(common, cfg, train);
    }
    let base = out_dir(common, &cfg);
    for &s in &common.seeds {
        let mut c = cfg.clone();
        c.seed = s;
        c.dsm.seed = s;
        c.output = Some(base.join(format!("seed-{s}")));
        let per_seed = Common {
            config: None,
            seed: None,
            seeds: Vec::new(),
            out: c.output.clone(),
            threads: common.threads,
        };
        run_one(&per_seed, c, train)?;
    }
    Ok(())
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
