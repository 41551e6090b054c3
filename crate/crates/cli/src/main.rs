mod commands;
mod dataset;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use pbnet_core::{Error, ErrorKind};

#[derive(Parser)]
#[command(name = "pbnet", version, about = "Breast-ultrasound lesion segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum, Default)]
pub enum Preset {
    /// Full-size settings (EfficientNet-B0, 256×256, 100 epochs).
    #[default]
    Default,
    /// Tiny backbone on 64×64 inputs for desk-scale runs.
    Tiny,
}

/// Flags shared by every command. Values given here override the config file.
#[derive(Args, Clone, Debug, Default)]
pub struct Common {
    /// TOML configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Built-in settings used when no --config is given.
    #[arg(long, value_enum, default_value_t)]
    pub preset: Preset,
    /// Dotted override, e.g. `--set train.epochs=5`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub device: Option<String>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Allow writing into a non-empty output directory.
    #[arg(long)]
    pub overwrite: bool,
}

#[derive(Args, Clone, Debug, Default)]
pub struct DataArgs {
    /// Dataset root (overrides data.root).
    #[arg(long)]
    pub root: Option<PathBuf>,
    /// busi or generic (overrides data.layout).
    #[arg(long)]
    pub layout: Option<String>,
    /// Split manifest (overrides data.manifest).
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Pair images with masks and report category counts and problems.
    Scan {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Assign stratified folds and write manifest.json.
    Split {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Train on every fold except --fold and validate on it.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value_t = 0)]
        fold: usize,
    },
    /// k-fold cross-validation.
    Cv {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Evaluate a checkpoint on one fold, or on every sample.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        fold: Option<usize>,
    },
    /// Predict masks for an image or a directory of images.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// Ground-truth mask file, or directory with masks named like the images.
        #[arg(long)]
        masks: Option<PathBuf>,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
    },
    /// Train and compare the module ablation rows.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value_t = 0)]
        fold: usize,
        /// Comma-separated rows such as `baseline,mgpm,bgm,bgm+bs,mgpm+bgm+bs`.
        #[arg(long)]
        rows: Option<String>,
    },
    /// Export attention and boundary maps of one image.
    Visualize {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        mask: Option<PathBuf>,
    },
    /// Write synthetic phantoms in the generic layout.
    Phantoms {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 8)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        height: usize,
        #[arg(long, default_value_t = 64)]
        width: usize,
        /// Lesion contrast multiplier in [0, 1].
        #[arg(long, default_value_t = 1.0)]
        contrast: f64,
    },
    /// Print parameter count and multiply-accumulates.
    Info {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        height: Option<usize>,
        #[arg(long)]
        width: Option<usize>,
    },
}

fn exit_code(err: &anyhow::Error) -> (u8, &'static str) {
    match err.downcast_ref::<Error>().map(Error::kind) {
        Some(ErrorKind::Config) => (2, "config"),
        Some(ErrorKind::Data) => (3, "data"),
        Some(ErrorKind::Numeric) => (4, "numeric"),
        None => (1, "internal"),
    }
}

fn run(cli: Cli) -> anyhow::Result<serde_json::Value> {
    match cli.command {
        Command::Scan { common, data } => commands::scan(&common, &data),
        Command::Split { common, data } => commands::split(&common, &data),
        Command::Train { common, data, fold } => commands::train(&common, &data, fold),
        Command::Cv { common, data } => commands::cv(&common, &data),
        Command::Eval {
            common,
            data,
            checkpoint,
            fold,
        } => commands::eval(&common, &data, &checkpoint, fold),
        Command::Infer {
            common,
            checkpoint,
            input,
            masks,
            threshold,
        } => commands::infer(&common, &checkpoint, &input, masks.as_deref(), threshold),
        Command::Ablate {
            common,
            data,
            fold,
            rows,
        } => commands::ablate(&common, &data, fold, rows.as_deref()),
        Command::Visualize {
            common,
            checkpoint,
            image,
            mask,
        } => commands::visualize(&common, &checkpoint, &image, mask.as_deref()),
        Command::Phantoms {
            common,
            count,
            height,
            width,
            contrast,
        } => commands::phantoms(&common, count, height, width, contrast),
        Command::Info {
            common,
            checkpoint,
            height,
            width,
        } => commands::info(&common, checkpoint.as_deref(), height, width),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(summary) => {
            println!("{}", serde_json::to_string_pretty(&summary).expect("json value"));
            ExitCode::SUCCESS
        }
        Err(err) => {
            let (code, kind) = exit_code(&err);
            let body = serde_json::json!({ "error": { "kind": kind, "message": format!("{err:#}") } });
            eprintln!("{body}");
            ExitCode::from(code)
        }
    }
}
