//! Command-line entry point: train, eval, bench, flops, analyze, sweep.
//!
//! A single JSON configuration document drives every command; flags only
//! override fields of that document. Exit codes: 0 success, 2 config
//! error, 3 runtime error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use vtlab_core::cli::{
    cmd_analyze, cmd_bench, cmd_eval, cmd_flops, cmd_sweep, cmd_train, RunConfig,
};
use vtlab_core::error::Result;
use vtlab_core::strategy::StrategyTag;

#[derive(Parser)]
#[command(name = "vtlab", about = "Visual-token summarization lab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Path to the JSON run configuration.
    config: PathBuf,

    /// Override the strategy tag.
    #[arg(long)]
    strategy: Option<String>,

    /// Override the register count / retained token count.
    #[arg(long)]
    m: Option<usize>,

    /// Override the drop layer index.
    #[arg(long)]
    k: Option<usize>,

    /// Override the run seed.
    #[arg(long)]
    seed: Option<u64>,

    /// Override the output directory.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut config = RunConfig::from_path(&self.config)?;
        if let Some(tag) = &self.strategy {
            config.strategy.tag = tag.parse()?;
        }
        if let Some(m) = self.m {
            config.strategy.m = m;
            if config.strategy.tag == StrategyTag::Fastv {
                config.strategy.fastv_keep = m;
            }
        }
        if let Some(k) = self.k {
            config.strategy.k = k;
        }
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        if let Some(dir) = &self.out_dir {
            config.out_dir = dir.clone();
        }
        config.validate()?;
        Ok(config)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run both training stages; writes checkpoint, logs, timing probe.
    Train(ConfigArgs),
    /// Evaluate a checkpoint on the held-out split.
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        /// Checkpoint path (default: <out_dir>/checkpoint.json).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Measure generation throughput against the baseline.
    Bench {
        #[command(flatten)]
        config: ConfigArgs,
        /// Bench a single generation length instead of both 2 and 128.
        #[arg(long)]
        gen_len: Option<usize>,
    },
    /// Analytic FLOPs accounting and extra-parameter counts.
    Flops(ConfigArgs),
    /// Export similarity stats, attention maps, and grid heatmaps.
    Analyze {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Which held-out sample to analyze.
        #[arg(long, default_value_t = 0)]
        sample: usize,
    },
    /// Train/eval/bench a grid of (strategy, m, k) cells; writes sweep.csv.
    Sweep {
        #[command(flatten)]
        config: ConfigArgs,
        /// Comma-separated register counts.
        #[arg(long, value_delimiter = ',')]
        m_list: Vec<usize>,
        /// Comma-separated drop layers.
        #[arg(long, value_delimiter = ',')]
        k_list: Vec<usize>,
        /// Comma-separated strategy tags (default: the config's strategy).
        #[arg(long, value_delimiter = ',')]
        strategies: Vec<String>,
    },
}

fn run() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Train(args) => {
            let config = args.load()?;
            let artifacts = cmd_train(&config)?;
            println!("checkpoint written to {}", artifacts.checkpoint.display());
        }
        Command::Eval { config, checkpoint } => {
            let config = config.load()?;
            let result = cmd_eval(&config, checkpoint.as_deref())?;
            println!(
                "accuracy {:.4} ({}/{})",
                result.accuracy, result.n_correct, result.n_total
            );
        }
        Command::Bench { config, gen_len } => {
            let config = config.load()?;
            let reports = cmd_bench(&config, gen_len)?;
            for r in &reports {
                println!(
                    "gen {}: {:.1} tok/s (ratio vs baseline: {})",
                    r.config.gen_len,
                    r.tps,
                    r.ratio_vs_baseline
                        .map(|x| format!("{x:.2}"))
                        .unwrap_or_else(|| "n/a".to_string())
                );
            }
        }
        Command::Flops(args) => {
            let config = args.load()?;
            let file = cmd_flops(&config)?;
            println!(
                "{}: {} prefill FLOPs, ratio {:.4}, extra params {}",
                file.flops.strategy,
                file.flops.total,
                file.flops.ratio_vs_baseline,
                file.extra_params.extra
            );
        }
        Command::Analyze {
            config,
            checkpoint,
            sample,
        } => {
            let config = config.load()?;
            let summary = cmd_analyze(&config, checkpoint.as_deref(), sample)?;
            println!(
                "analysis written to {} ({} pre-drop layers)",
                config.out_dir.display(),
                summary.per_layer_visual_mass.len()
            );
        }
        Command::Sweep {
            config,
            m_list,
            k_list,
            strategies,
        } => {
            let config = config.load()?;
            let tags: Vec<StrategyTag> = if strategies.is_empty() {
                vec![config.strategy.tag]
            } else {
                strategies
                    .iter()
                    .map(|s| s.parse())
                    .collect::<Result<Vec<_>>>()?
            };
            let rows = cmd_sweep(&config, &tags, &m_list, &k_list)?;
            println!(
                "sweep complete: {} rows -> {}",
                rows.len(),
                config.out_dir.join("sweep.csv").display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
