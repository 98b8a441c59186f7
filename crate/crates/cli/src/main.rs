use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gridood::scenes::Split;
use gridood::Error;

mod commands;

#[derive(Parser)]
#[command(name = "gridood", version, about = "Grid-candidate OOD detection on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON run configuration; omitted keys take their defaults.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.epochs=2`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Render the dataset splits to `<output_dir>/data`.
    Gen(ConfigArgs),
    /// Train a model and write the checkpoint and JSON-lines log.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Continue from an existing checkpoint instead of a fresh init.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score the test splits and write report.json, metrics.csv and scores.csv.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Defaults to `<output_dir>/model.gridood`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Comma-separated method names; defaults to the checkpoint mode's set.
        #[arg(long)]
        methods: Vec<String>,
        /// Defaults to `<output_dir>/eval`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one model per p triple and tabulate validation mAP and OOD metrics.
    SweepP {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Triple `p1,p2,p3`; repeat to replace the configured grid.
        #[arg(long = "p", value_name = "P1,P2,P3")]
        triples: Vec<String>,
    },
    /// Evaluate every aggregation combination and single-factor score.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Export per-head heatmaps (PGM) and an overlay (PPM) for one image.
    Heatmap {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Scene index within `--split`.
        #[arg(long, conflicts_with = "image")]
        index: Option<usize>,
        #[arg(long, default_value = "test_id", value_parser = parse_split)]
        split: Split,
        /// A P6 image file to score instead of a generated scene.
        #[arg(long)]
        image: Option<PathBuf>,
        /// Defaults to `<output_dir>/heatmap`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_split(s: &str) -> Result<Split, String> {
    Split::ALL
        .into_iter()
        .find(|sp| sp.name() == s)
        .ok_or_else(|| format!("unknown split `{s}` (train, val, test_id, test_ood)"))
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::Usage(_) | Error::Checkpoint(_) | Error::Json(_) => 2,
        Error::Diverged { .. } | Error::Io { .. } | Error::Diff(_) => 3,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen(cfg) => commands::load(&cfg.config, &cfg.overrides).and_then(|c| commands::gen(&c)),
        Command::Train { cfg, resume } => {
            commands::load(&cfg.config, &cfg.overrides).and_then(|c| commands::train(&c, resume.as_deref()))
        }
        Command::Eval {
            cfg,
            checkpoint,
            methods,
            out,
        } => commands::load(&cfg.config, &cfg.overrides)
            .and_then(|c| commands::eval(&c, checkpoint.as_deref(), &methods, out.as_deref())),
        Command::SweepP { cfg, triples } => {
            commands::load(&cfg.config, &cfg.overrides).and_then(|c| commands::sweep_p(&c, &triples))
        }
        Command::Ablate { cfg, checkpoint } => {
            commands::load(&cfg.config, &cfg.overrides).and_then(|c| commands::ablate(&c, checkpoint.as_deref()))
        }
        Command::Heatmap {
            cfg,
            checkpoint,
            index,
            split,
            image,
            out,
        } => commands::load(&cfg.config, &cfg.overrides).and_then(|c| {
            let source = match (index, image) {
                (_, Some(path)) => commands::HeatmapSource::File(path),
                (Some(i), None) => commands::HeatmapSource::Scene(split, i),
                (None, None) => return Err(Error::Usage("heatmap needs --index or --image".into())),
            };
            commands::heatmap(&c, checkpoint.as_deref(), &source, out.as_deref())
        }),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
