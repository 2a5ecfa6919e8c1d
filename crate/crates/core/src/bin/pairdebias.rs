use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use pairdebias::pipeline::{self, PipelineConfig};
use pairdebias::Result;

#[derive(Parser)]
#[command(name = "pairdebias", version, about = "Pairwise-sentence debiasing pipeline")]
struct Cli {
    #[command(flatten)]
    opts: Opts,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Opts {
    /// key = value config file
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Override any config key, e.g. --set train.epochs=2
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Weight of the representation-preserving loss (0 drops it)
    #[arg(long, global = true)]
    lambda: Option<f64>,
    /// Random neighbors with uniform weights instead of KNN
    #[arg(long, global = true)]
    random_neighbors: bool,
    /// Neighborhood size
    #[arg(long, global = true)]
    k: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Run every stage
    Run,
    /// Generate pairwise groups from the word lists
    Generate,
    /// Validate an existing group file
    Ingest,
    /// Keep the least toxic groups
    ToxFilter,
    /// Masked-LM pretraining of the base model
    Pretrain,
    /// KNN neighborhoods, causal effects and group selection
    Align,
    /// Fine-tune on the aligned groups
    Debias,
    /// Score the base and debiased models
    Eval,
    /// Write the summary table and curves
    Report,
    /// Rerun on several corpus sizes
    Sweep,
}

fn config(opts: &Opts) -> Result<PipelineConfig> {
    let mut cfg = match &opts.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    for o in &opts.overrides {
        cfg.apply_override(o)?;
    }
    if let Some(s) = opts.seed {
        cfg.set("seed", &s.to_string())?;
    }
    if let Some(d) = &opts.out_dir {
        cfg.out_dir = d.clone();
    }
    if let Some(l) = opts.lambda {
        cfg.train.lambda = l;
    }
    if opts.random_neighbors {
        cfg.train.random_neighbors = true;
    }
    if let Some(k) = opts.k {
        cfg.train.k = k;
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = config(&cli.opts)?;
    match cli.command {
        Command::Run => {
            pipeline::run_pipeline(&cfg)?;
            print!("{}", std::fs::read_to_string(cfg.out_dir.join("report.md")).unwrap_or_default());
        }
        Command::Generate => {
            let c = pipeline::generate(&cfg)?;
            println!("{} groups", c.len());
        }
        Command::Ingest => {
            let c = pipeline::ingest(&cfg)?;
            println!("{} groups", c.len());
        }
        Command::ToxFilter => {
            let c = pipeline::tox_filter(&cfg)?;
            println!("{} groups kept", c.len());
        }
        Command::Pretrain => {
            pipeline::pretrain(&cfg)?;
        }
        Command::Align => {
            let r = pipeline::align(&cfg)?;
            println!("delta total {:.6}, {} groups kept", r.delta_total, r.kept_ids().len());
        }
        Command::Debias => {
            let (_, log) = pipeline::debias(&cfg)?;
            print!("{}", log.to_csv());
        }
        Command::Eval => {
            pipeline::eval(&cfg)?;
        }
        Command::Report => print!("{}", pipeline::report(&cfg.out_dir)?),
        Command::Sweep => {
            let m = pipeline::sweep(&cfg)?;
            println!("{} sweep points", m.points.len());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
