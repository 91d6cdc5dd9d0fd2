//! `interlingua`: prepare corpora, train a shared-latent translation system,
//! extend it with new languages, and evaluate or plot the latent space.

mod commands;
mod config;
mod workspace;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use interlingua::training::DistanceMode;
use interlingua::Result;

use crate::config::RunConfig;

#[derive(Parser)]
#[command(name = "interlingua", version, about = "Shared-latent multilingual translation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Run configuration (TOML).
    #[arg(short, long)]
    config: PathBuf,
    /// Override one key, e.g. `--set train.learning_rate=3e-4`. Repeatable.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    overrides: Vec<String>,
    /// Shorthand for `--set train.seed=N`.
    #[arg(long)]
    seed: Option<u64>,
    /// Shorthand for `--set train.max_steps=N`.
    #[arg(long)]
    steps: Option<u64>,
    /// Distance between the two languages' latents.
    #[arg(long, value_parser = parse_distance)]
    distance: Option<DistanceMode>,
    /// Enable decomposed vector quantization of the latent.
    #[arg(long)]
    dvq: bool,
}

fn parse_distance(s: &str) -> std::result::Result<DistanceMode, String> {
    s.parse::<DistanceMode>().map_err(|e| e.to_string())
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut overrides = self.overrides.clone();
        if let Some(s) = self.seed {
            overrides.push(format!("train.seed={s}"));
        }
        if let Some(s) = self.steps {
            overrides.push(format!("train.max_steps={s}"));
        }
        if let Some(d) = self.distance {
            let name = match d {
                DistanceMode::Corr => "corr",
                DistanceMode::Max => "max",
                DistanceMode::None => "none",
            };
            overrides.push(format!("train.distance=\"{name}\""));
        }
        if self.dvq {
            overrides.push("train.quantize=true".into());
        }
        RunConfig::load(&self.config, &overrides)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Learn BPE and vocabularies and binarize the corpora.
    Prepare(ConfigArgs),
    /// Train the configured language pair.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Continue from the output directory's last checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Attach the `[extend]` language to a trained system through its pivot.
    AddLanguage {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Base checkpoint (default: the run's final checkpoint).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Translate a file line by line. Equal languages autoencode.
    Translate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        src: String,
        #[arg(long)]
        tgt: String,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Corpus BLEU for both translation directions and both autoencoders.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "test", value_parser = ["train", "test"])]
        split: String,
    },
    /// Autoencoder, MT and A-T BLEU for each decoder.
    InterlinguaEval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "test", value_parser = ["train", "test"])]
        split: String,
    },
    /// PCA scatter plot of pooled sentence vectors, one SVG per split.
    Viz {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long = "split", default_value = "test", value_parser = ["train", "test"])]
        splits: Vec<String>,
        /// Omit lines joining translation pairs.
        #[arg(long)]
        no_pair_lines: bool,
    },
    /// Write the bundled toy corpora and a matching config.
    Toy {
        #[arg(long)]
        dir: PathBuf,
        #[arg(long, default_value_t = 32)]
        pairs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Prepare(cfg) => commands::cmd_prepare(&cfg.load()?),
        Command::Train { cfg, resume } => commands::cmd_train(&cfg.load()?, resume),
        Command::AddLanguage { cfg, checkpoint } => commands::cmd_add_language(&cfg.load()?, checkpoint.as_deref()),
        Command::Translate { cfg, checkpoint, src, tgt, input, output } => {
            commands::cmd_translate(&cfg.load()?, checkpoint.as_deref(), &src, &tgt, &input, &output)
        }
        Command::Eval { cfg, checkpoint, split } => commands::cmd_eval(&cfg.load()?, checkpoint.as_deref(), &split),
        Command::InterlinguaEval { cfg, checkpoint, split } => {
            commands::cmd_interlingua_eval(&cfg.load()?, checkpoint.as_deref(), &split)
        }
        Command::Viz { cfg, checkpoint, splits, no_pair_lines } => {
            commands::cmd_viz(&cfg.load()?, checkpoint.as_deref(), &splits, !no_pair_lines)
        }
        Command::Toy { dir, pairs, seed } => commands::cmd_toy(&dir, pairs, seed),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.category());
            ExitCode::FAILURE
        }
    }
}
