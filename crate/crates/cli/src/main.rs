use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use glfusion_core::data::{load_manifest, Split};
use glfusion_core::phantom::{generate_dataset, PhantomConfig};
use glfusion_core::train::{
    evaluate, run_ablation_suite, train, AblationRow, Dataset, EvalSettings, OverlayOptions, RunReport, TrainConfig,
    CYCLE_ROWS, FUSION_ROWS,
};
use glfusion_core::{Error, Result};

#[derive(Parser)]
#[command(name = "glfusion", version, about = "Multi-view echocardiogram video segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthetic multi-view cardiac phantom.
    Phantom {
        #[command(subcommand)]
        command: PhantomCommand,
    },
    /// Train a model and keep the checkpoint with the best validation Dice.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset manifest.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides `rng_seed` of the config.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum, default_value_t = Precision::F32)]
        precision: Precision,
        /// Load and augment batches on a worker thread.
        #[arg(long)]
        concurrent_loading: bool,
    },
    /// Dice of a checkpoint on one split of a manifest.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        /// Directory for `dice.csv`, `eval_report.json` and overlays; the CSV goes to stdout otherwise.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Write an overlay PNG for every n-th frame (needs `--out`).
        #[arg(long, requires = "out")]
        overlays: Option<usize>,
        /// Resize side; defaults to the one stored in the checkpoint.
        #[arg(long, requires = "crop")]
        resize: Option<usize>,
        #[arg(long, requires = "resize")]
        crop: Option<usize>,
        /// Frames per forward pass.
        #[arg(long, default_value_t = 16)]
        chunk: usize,
    },
    /// Train the ablation rows over several seeds and tabulate test Dice.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Number of seeds, `0..k`.
        #[arg(long, default_value_t = 3)]
        seeds: u64,
        /// Dataset manifest; without it (and without `--phantom`) the default phantom is synthesized in memory.
        #[arg(long, conflicts_with = "phantom")]
        data: Option<PathBuf>,
        /// Phantom config to synthesize in memory.
        #[arg(long)]
        phantom: Option<PathBuf>,
        #[arg(long, default_value = "ablation")]
        out: PathBuf,
        /// Restrict to these rows.
        #[arg(long, value_enum, value_delimiter = ',')]
        rows: Vec<Row>,
        #[arg(long, value_enum, default_value_t = Precision::F32)]
        precision: Precision,
    },
    /// Print a default configuration document.
    Defaults {
        #[arg(value_enum)]
        kind: DefaultsKind,
    },
}

#[derive(Subcommand)]
enum PhantomCommand {
    /// Write frames, masks and `manifest.json`.
    Generate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides `rng_seed` of the config.
        #[arg(long)]
        seed: Option<u64>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Precision {
    F32,
    F64,
}

#[derive(Clone, Copy, ValueEnum)]
enum DefaultsKind {
    Train,
    Phantom,
}

#[derive(Clone, Copy, ValueEnum)]
enum Row {
    Base,
    PlusMgfm,
    PlusMlfm,
    Full,
    FusionOnly,
    FusionSingleCycle,
    FusionDenseCycle,
}

impl From<Row> for AblationRow {
    fn from(r: Row) -> Self {
        match r {
            Row::Base => Self::Base,
            Row::PlusMgfm => Self::PlusMgfm,
            Row::PlusMlfm => Self::PlusMlfm,
            Row::Full => Self::Full,
            Row::FusionOnly => Self::FusionOnly,
            Row::FusionSingleCycle => Self::FusionSingleCycle,
            Row::FusionDenseCycle => Self::FusionDenseCycle,
        }
    }
}

fn train_config(path: Option<&Path>) -> Result<TrainConfig> {
    path.map_or_else(|| Ok(TrainConfig::default()), TrainConfig::from_file)
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn summarize(report: &RunReport) {
    match (&report.validation, report.best_epoch) {
        (Some(v), Some(e)) => println!("best epoch {e}: validation average Dice {:.4}", v.average),
        _ => println!("no validation split; saved the final model"),
    }
    println!("checkpoint: {}", report.checkpoint.display());
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Phantom { command: PhantomCommand::Generate { config, out, seed } } => {
            let mut cfg = config.as_deref().map_or_else(|| Ok(PhantomConfig::default()), PhantomConfig::from_file)?;
            if let Some(s) = seed {
                cfg.rng_seed = s;
            }
            let manifest = generate_dataset(&cfg, &out)?;
            println!("wrote {} videos to {}", manifest.samples.len(), out.join("manifest.json").display());
        }
        Command::Train { config, data, out, seed, precision, concurrent_loading } => {
            let mut cfg = train_config(config.as_deref())?;
            if let Some(s) = seed {
                cfg.rng_seed = s;
            }
            if concurrent_loading {
                cfg.deterministic = false;
            }
            let dataset = Dataset::from_manifest(&load_manifest(&data)?)?;
            let report = match precision {
                Precision::F32 => train::<f32>(&cfg, &dataset, &out)?,
                Precision::F64 => train::<f64>(&cfg, &dataset, &out)?,
            };
            summarize(&report);
        }
        Command::Eval { checkpoint, data, split, out, overlays, resize, crop, chunk } => {
            let manifest = load_manifest(&data)?;
            let settings = resize.zip(crop).map(|(resize, crop)| EvalSettings { resize, crop, chunk });
            let overlay =
                out.as_ref().zip(overlays).map(|(dir, every)| OverlayOptions { dir: dir.join("overlays"), every });
            let report = evaluate(&checkpoint, &manifest, split, settings, overlay.as_ref())?;
            let csv = report.dice.to_csv_string();
            match out {
                Some(dir) => {
                    write(&dir.join("dice.csv"), &csv)?;
                    let json = serde_json::to_string_pretty(&report).expect("report serializes");
                    write(&dir.join("eval_report.json"), &json)?;
                    println!("{split} average Dice {:.4}; report in {}", report.dice.average, dir.display());
                }
                None => print!("{csv}"),
            }
        }
        Command::Ablate { config, seeds, data, phantom, out, rows, precision } => {
            let cfg = train_config(config.as_deref())?;
            let dataset = match (data, phantom) {
                (Some(manifest), _) => Dataset::from_manifest(&load_manifest(&manifest)?)?,
                (None, Some(p)) => Dataset::from_phantom(&PhantomConfig::from_file(&p)?)?,
                (None, None) => Dataset::from_phantom(&PhantomConfig::default())?,
            };
            let rows: Vec<AblationRow> = if rows.is_empty() {
                FUSION_ROWS.iter().chain(&CYCLE_ROWS).copied().collect()
            } else {
                rows.into_iter().map(Into::into).collect()
            };
            let seeds: Vec<u64> = (0..seeds).collect();
            let report = match precision {
                Precision::F32 => run_ablation_suite::<f32>(&cfg, &dataset, &seeds, &rows, &out)?,
                Precision::F64 => run_ablation_suite::<f64>(&cfg, &dataset, &seeds, &rows, &out)?,
            };
            print!("{}", report.to_markdown());
        }
        Command::Defaults { kind: DefaultsKind::Train } => print!("{}", TrainConfig::default().to_toml()),
        Command::Defaults { kind: DefaultsKind::Phantom } => print!("{}", PhantomConfig::default().to_toml()),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
