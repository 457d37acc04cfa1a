use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use protfuse_core::config::{load_config, RunConfig, DESK_CONFIG};
use protfuse_core::evaluation::format_report;
use protfuse_core::fixtures::{write_corpus, CorpusSpec};
use protfuse_core::pipeline::{ablation_table, cmd_ablate, cmd_build_data, cmd_eval, cmd_generate, cmd_train};
use protfuse_core::{Error, Result};

/// Protein question answering with fused structure and sequence encoders.
#[derive(Parser)]
#[command(name = "protfuse", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Run configuration (TOML).
    #[arg(short, long)]
    config: PathBuf,
    /// Override a config key, e.g. `--set train.stage2.steps=50`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        load_config(&self.config, &self.overrides)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic desk corpus and a config for it.
    Fixtures {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = CorpusSpec::default().seed)]
        seed: u64,
        #[arg(long, default_value_t = CorpusSpec::default().proteins_per_family)]
        proteins_per_family: usize,
    },
    /// Build the projection-tuning and fine-tuning datasets.
    BuildData(ConfigArgs),
    /// Train one model per configured seed.
    Train(ConfigArgs),
    /// Answer the evaluation split with each seed's model and score it.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Checkpoints to evaluate instead of the per-seed defaults. Repeatable.
        #[arg(long)]
        checkpoint: Vec<PathBuf>,
    },
    /// Answer one question about stored proteins.
    Generate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Protein id; give two for pair questions.
        #[arg(long = "protein", required = true)]
        proteins: Vec<String>,
        /// Question text with one `<protein>` per protein.
        #[arg(long)]
        question: String,
    },
    /// Train and evaluate the configured ablation rows.
    Ablate(ConfigArgs),
}

fn write_config(dir: &Path) -> Result<PathBuf> {
    let path = dir.join("config.toml");
    std::fs::write(&path, DESK_CONFIG).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(path)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Fixtures {
            out,
            seed,
            proteins_per_family,
        } => {
            let spec = CorpusSpec {
                seed,
                proteins_per_family,
                ..CorpusSpec::default()
            };
            let summary = write_corpus(&out, &spec)?;
            let cfg = write_config(&out)?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
            println!("config written to {}", cfg.display());
        }
        Command::BuildData(args) => {
            let summary = cmd_build_data(&args.load()?)?;
            print!("{}", summary.table());
        }
        Command::Train(args) => {
            for o in cmd_train(&args.load()?)? {
                let last: Vec<String> = o
                    .losses
                    .iter()
                    .map(|(stage, l)| format!("{} {:.4}", stage.name(), l.last().copied().unwrap_or(f64::NAN)))
                    .collect();
                println!("seed {}: {} -> {}", o.seed, last.join(", "), o.checkpoint.display());
            }
        }
        Command::Eval { cfg, checkpoint } => {
            let cfg = cfg.load()?;
            let given = (!checkpoint.is_empty()).then_some(checkpoint.as_slice());
            print!("{}", format_report(&cmd_eval(&cfg, given)?));
        }
        Command::Generate {
            cfg,
            checkpoint,
            proteins,
            question,
        } => {
            println!("{}", cmd_generate(&cfg.load()?, &checkpoint, &proteins, &question)?);
        }
        Command::Ablate(args) => {
            print!("{}", ablation_table(&cmd_ablate(&args.load()?)?));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.class().exit_code() as u8)
        }
    }
}
