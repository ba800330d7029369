//! Command-line surface for the two-stage anomaly-detection pipeline.
//!
//! Exit codes: 0 success, 2 config, 3 data, 4 model, 5 divergence, 1 other.
//! Failures print one machine-parseable line: `error: <category>: <detail>`.

use std::path::PathBuf;

use clap::{CommandFactory, FromArgMatches, Parser, Subcommand};

use anomalens::config::ExperimentConfig;
use anomalens::error::Result;
use anomalens::orchestrator;

#[derive(Parser, Debug)]
#[command(
    name = "anomalens",
    version,
    about = "Two-stage reconstruction pipeline for unsupervised image anomaly detection",
    long_about = "Trains an impression extractor and a detail-restoring expert on \
anomaly-free images, then localizes anomalies by comparing perceptual features of \
the input, its impression, and its reconstructions.\n\nThe backbone weights \
directory may be overridden with the ANOMALENS_BACKBONE_WEIGHTS environment \
variable."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, clap::Args)]
struct CommonArgs {
    /// Experiment config (TOML). Omitted: built-in small preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory owned by this run.
    #[arg(long)]
    out: PathBuf,
    /// Config overrides, dotted key = value (repeatable).
    #[arg(short = 's', long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Materialize/inspect the configured dataset and export manifests.
    Prepare {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Train stage one (impression extractor) on the train split.
    TrainIe {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Materialize impressions for the train split from the best stage-one
    /// checkpoint.
    Impress {
        #[command(flatten)]
        common: CommonArgs,
        /// Regenerate even when the stored set matches another checkpoint.
        #[arg(long)]
        force: bool,
    },
    /// Train stage two (expert) on (image, impression) pairs.
    TrainExpert {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Score the test split and write maps, masks, and report.json.
    Evaluate {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Detect anomalies in a single image; writes the image quadruple, the
    /// binary mask, and the raw map values.
    Detect {
        #[command(flatten)]
        common: CommonArgs,
        /// Input image path.
        #[arg(long)]
        image: PathBuf,
    },
    /// Compose a qualitative gallery over the first test images.
    Visualize {
        #[command(flatten)]
        common: CommonArgs,
        /// Number of rows.
        #[arg(long, default_value_t = 8)]
        limit: usize,
    },
    /// Run the seven-row toggle sweep and emit one comparative report.
    Ablate {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Print the default config as TOML.
    Config {
        /// Emit the small-dataset preset instead of the full-scale default.
        #[arg(long)]
        small: bool,
    },
}

fn load_config(common: &CommonArgs) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::from_file(path)?,
        None => ExperimentConfig::small(),
    };
    for spec in &common.overrides {
        cfg.apply_override(spec)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Prepare { common } => {
            let cfg = load_config(&common)?;
            orchestrator::cmd_prepare(&cfg, &common.out)?;
            println!("prepared dataset manifests under {}", common.out.display());
        }
        Command::TrainIe { common } => {
            let cfg = load_config(&common)?;
            let outcome = orchestrator::cmd_train_ie(&cfg, &common.out)?;
            println!(
                "stage one done: {} steps, best epoch loss {:.6}, best checkpoint {}",
                outcome.steps,
                outcome.best_epoch_loss,
                outcome.best_checkpoint.display()
            );
        }
        Command::Impress { common, force } => {
            let cfg = load_config(&common)?;
            let count = orchestrator::cmd_impress(&cfg, &common.out, force)?;
            println!("materialized {count} impressions");
        }
        Command::TrainExpert { common } => {
            let cfg = load_config(&common)?;
            let outcome = orchestrator::cmd_train_expert(&cfg, &common.out)?;
            println!(
                "stage two done: {} steps, best epoch loss {:.6}, best checkpoint {}",
                outcome.steps,
                outcome.best_epoch_loss,
                outcome.best_checkpoint.display()
            );
        }
        Command::Evaluate { common } => {
            let cfg = load_config(&common)?;
            let report = orchestrator::cmd_evaluate(&cfg, &common.out)?;
            print!("{}", report.to_table());
            println!("report written to {}", common.out.join("report.json").display());
        }
        Command::Detect { common, image } => {
            let cfg = load_config(&common)?;
            let files = orchestrator::cmd_detect(&cfg, &common.out, &image)?;
            for file in files {
                println!("{}", file.display());
            }
        }
        Command::Visualize { common, limit } => {
            let cfg = load_config(&common)?;
            let path = orchestrator::cmd_visualize(&cfg, &common.out, limit)?;
            println!("{}", path.display());
        }
        Command::Ablate { common } => {
            let cfg = load_config(&common)?;
            let results = orchestrator::cmd_ablate(&cfg, &common.out)?;
            print!("{}", orchestrator::ablate::comparison_table(&results));
            println!(
                "comparative report written to {}",
                common.out.join("ablation_report.json").display()
            );
        }
        Command::Config { small } => {
            let cfg = if small {
                ExperimentConfig::small()
            } else {
                ExperimentConfig::default()
            };
            print!("{}", cfg.to_toml());
        }
    }
    Ok(())
}

fn main() {
    let command = Cli::command().after_help(ExperimentConfig::schema_help());
    let matches = command.get_matches();
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(cli) => cli,
        Err(e) => e.exit(),
    };
    match run(cli) {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {}: {e}", e.category());
            std::process::exit(e.exit_code());
        }
    }
}
