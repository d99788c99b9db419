use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use tim::cli::{self, FeatureOverrides};
use tim::eval::Task;
use tim::features::FeatureMode;
use tim::infomax::DiscriminatorConfig;
use tim::sanity::{tolerance_band, SanityConfig};
use tim::Error;

/// Text matching with local mutual-information maximization.
#[derive(Parser)]
#[command(name = "tim", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a TOML run configuration.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Output directory for vocabulary, metrics and checkpoints.
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint that holds training state.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Print accuracy or MAP/MRR of a checkpoint on a JSON-lines file.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// classify or rank
        #[arg(long, default_value = "classify")]
        task: Task,
        /// Vocabulary file [default: vocab.txt beside the checkpoint]
        #[arg(long)]
        vocab: Option<PathBuf>,
    },
    /// Print class probabilities for one text pair.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        text_a: String,
        #[arg(long)]
        text_b: String,
        #[arg(long)]
        vocab: Option<PathBuf>,
    },
    /// Dump the local feature maps of a text as JSON.
    Features {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        text: String,
        #[arg(long, value_parser = parse_mode)]
        mode: Option<FeatureMode>,
        /// Slots per map
        #[arg(long)]
        m: Option<usize>,
        /// Indices per segment
        #[arg(long)]
        d: Option<usize>,
        #[arg(long)]
        vocab: Option<PathBuf>,
    },
    /// Train a critic on correlated Gaussians and compare with the true MI.
    MiSanity {
        #[arg(long, allow_hyphen_values = true)]
        rho: f64,
        #[arg(long, default_value_t = 5000)]
        steps: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 256)]
        batch_size: usize,
        /// Fake pairings per real pair
        #[arg(long, default_value_t = 4)]
        negatives: usize,
        /// Critic hidden units per layer
        #[arg(long, default_value_t = 64)]
        hidden: usize,
        #[arg(long, default_value_t = 2)]
        layers: usize,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        /// Write step,dv_estimate,true_mi rows here
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

fn parse_mode(s: &str) -> Result<FeatureMode, String> {
    match s {
        "word" => Ok(FeatureMode::Word),
        "segment" => Ok(FeatureMode::Segment),
        other => Err(format!("unknown mode `{other}` (expected word or segment)")),
    }
}

fn print_json<T: serde::Serialize>(value: &T) {
    println!("{}", serde_json::to_string_pretty(value).expect("serializable"));
}

fn run(cli: Cli) -> Result<ExitCode, Error> {
    match cli.command {
        Command::Train { config, out, resume } => {
            print_json(&cli::cmd_train(&config, &out, resume.as_deref())?);
        }
        Command::Eval {
            checkpoint,
            data,
            task,
            vocab,
        } => print_json(&cli::cmd_eval(&checkpoint, &data, task, vocab.as_deref())?),
        Command::Predict {
            checkpoint,
            text_a,
            text_b,
            vocab,
        } => print_json(&cli::cmd_predict(&checkpoint, &text_a, &text_b, vocab.as_deref())?),
        Command::Features {
            checkpoint,
            text,
            mode,
            m,
            d,
            vocab,
        } => {
            let overrides = FeatureOverrides { mode, m, d };
            print_json(&cli::cmd_features(&checkpoint, &text, &overrides, vocab.as_deref())?);
        }
        Command::MiSanity {
            rho,
            steps,
            seed,
            batch_size,
            negatives,
            hidden,
            layers,
            lr,
            csv,
        } => {
            let config = SanityConfig {
                batch_size,
                negatives,
                critic: DiscriminatorConfig {
                    hidden_units: hidden,
                    hidden_layers: layers,
                },
                learning_rate: lr,
                ..SanityConfig::new(rho, steps, seed)
            };
            let result = cli::cmd_mi_sanity(&config, csv.as_deref())?;
            let (lo, hi) = tolerance_band(result.true_mi);
            let pass = result.within_band();
            print_json(&serde_json::json!({
                "rho": rho,
                "steps": steps,
                "dv_estimate": result.final_estimate(),
                "true_mi": result.true_mi,
                "band": [lo, hi],
                "within_band": pass,
            }));
            if !pass {
                return Ok(ExitCode::from(1));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
