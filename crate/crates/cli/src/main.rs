use clap::{Args, Parser, Subcommand};
use fusedet_cli::commands::{
    cmd_detect, cmd_eval, cmd_gen_data, cmd_report, cmd_train, CommandError, TrainStage,
};
use fusedet_core::config::Config;
use fusedet_core::error::Error;
use fusedet_core::train::Split;
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "fusedet",
    version,
    about = "Adaptive multimodal fusion detection: synthetic data, two-stage training, sliding-window detection and PR evaluation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Configuration file (key=value lines); defaults apply when omitted
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a single key, e.g. --set train.lr=0.02 (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Override the seed of the command's config section
    #[arg(long)]
    seed: Option<u64>,
    /// Cap worker threads (default: all cores)
    #[arg(long)]
    threads: Option<usize>,
}

impl ConfigArgs {
    fn resolve(&self, seed_key: &str) -> Result<Config, CommandError> {
        let mut config = match &self.config {
            Some(path) => Config::parse_file(path).map_err(CommandError::Config)?,
            None => Config::default(),
        };
        for (i, set) in self.sets.iter().enumerate() {
            let (key, value) = set.split_once('=').ok_or_else(|| {
                CommandError::Config(Error::Config(format!(
                    "--set expects KEY=VALUE, got `{set}`"
                )))
            })?;
            config
                .set(key.trim(), value, "--set", i + 1)
                .map_err(CommandError::Config)?;
        }
        if let Some(seed) = self.seed {
            config
                .set(seed_key, &seed.to_string(), "--seed", 0)
                .map_err(CommandError::Config)?;
        }
        if let Some(threads) = self.threads {
            // ignore failure when a global pool already exists
            let _ = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build_global();
        }
        Ok(config)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multimodal dataset
    GenData {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output dataset directory (must not exist)
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a pipeline stage: experts, gate, late or channel
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// experts | gate | late | channel
        #[arg(long)]
        stage: String,
        /// Dataset directory from gen-data
        #[arg(long)]
        data: PathBuf,
        /// Run directory collecting the stage outputs
        #[arg(long)]
        out: PathBuf,
    },
    /// Score the test split through a fused model
    Detect {
        #[command(flatten)]
        config: ConfigArgs,
        /// Fused-model checkpoint directory
        #[arg(long)]
        model: PathBuf,
        /// Dataset directory
        #[arg(long)]
        data: PathBuf,
        /// Frame split to score (only `test`)
        #[arg(long, default_value = "test")]
        split: String,
        /// Output detections file (TSV)
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a detections file against the dataset ground truth
    Eval {
        /// Detections file from `detect`
        #[arg(long)]
        detections: PathBuf,
        /// Dataset directory
        #[arg(long)]
        data: PathBuf,
        /// IoU threshold for matching (0.4 and 0.6 are the usual choices)
        #[arg(long, default_value_t = 0.6)]
        iou: f64,
        /// Output metrics directory (must not exist)
        #[arg(long)]
        out: PathBuf,
    },
    /// Summarize evaluated runs into a comparison table and gate timeline
    Report {
        /// Output report directory (must not exist)
        #[arg(long)]
        out: PathBuf,
        /// Evaluated run directories (each with detections.tsv and metrics/)
        #[arg(required = true)]
        runs: Vec<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<(), CommandError> {
    match cli.command {
        Command::GenData { config, out } => {
            let cfg = config.resolve("data.seed")?;
            cmd_gen_data(&cfg, &out)
        }
        Command::Train {
            config,
            stage,
            data,
            out,
        } => {
            let cfg = config.resolve("train.seed")?;
            let stage = TrainStage::from_name(&stage)?;
            cmd_train(stage, &cfg, &data, &out)
        }
        Command::Detect {
            config,
            model,
            data,
            split,
            out,
        } => {
            let cfg = config.resolve("train.seed")?;
            let split = match split.as_str() {
                "test" => Split::Test,
                other => {
                    return Err(CommandError::Config(Error::Config(format!(
                        "unsupported split `{other}`; only `test` can be scored"
                    ))))
                }
            };
            cmd_detect(&model, &data, split, &out, &cfg)
        }
        Command::Eval {
            detections,
            data,
            iou,
            out,
        } => cmd_eval(&detections, &data, iou, &out),
        Command::Report { out, runs } => cmd_report(&runs, &out),
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("fusedet: {e}");
        std::process::exit(e.exit_code());
    }
}
