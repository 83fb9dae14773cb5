use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use corrcount::ablation::{ablation_grid, run_ablation};
use corrcount::dataset::{build_dataset, DatasetManifest, DatasetSpec, Split};
use corrcount::train::{prepare_split, train_model};
use corrcount::{checkpoint, raster, BoxRegion, CountingModel, Error, Result, TrainConfig};
use serde::de::DeserializeOwned;

const SEED_VAR: &str = "CORRCOUNT_SEED";

#[derive(Parser)]
#[command(name = "corrcount", version, about = "Few-shot object counting on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write a checkpoint.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Report MAE and RMSE on one split.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
    },
    /// Count objects in one image.
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        /// F32R raster, `[H,W]` or `[C,H,W]`.
        #[arg(long)]
        image: PathBuf,
        /// JSON list of `[top, left, bottom, right]` boxes.
        #[arg(long)]
        boxes: PathBuf,
        /// Write the density map and per-iteration correlations here.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Train and evaluate the iteration/normalization/flip grid.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated seeds. Defaults to three seeds starting at the
        /// config seed.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        #[arg(long, default_value = "val")]
        split: Split,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    if e.is_numerical() {
        3
    } else {
        2
    }
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Input(format!("{}: {e}", path.display())))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::Input(format!("{}: {e}", dir.display())))?;
    }
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Error::Input(format!("{}: {e}", path.display())))
}

fn seed_override() -> Result<Option<u64>> {
    match std::env::var(SEED_VAR) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::Input(format!("{SEED_VAR}={v:?} is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

fn load_train_config(path: &Path) -> Result<TrainConfig> {
    let mut cfg: TrainConfig = read_json(path)?;
    if let Some(seed) = seed_override()? {
        log::info!("seed {seed} from {SEED_VAR}");
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Synth { spec, out } => {
            let mut spec: DatasetSpec = read_json(&spec)?;
            if let Some(seed) = seed_override()? {
                spec.seed = seed;
            }
            let manifest = build_dataset(&spec, &out)?;
            for split in [Split::Train, Split::Val, Split::Test] {
                log::info!("{split}: {} images", manifest.split(split).len());
            }
            println!("{}", out.display());
        }
        Command::Train { data, config, out } => {
            let manifest = DatasetManifest::load(&data)?;
            let cfg = load_train_config(&config)?;
            let model = CountingModel::new(cfg.model_config())?;
            let train = prepare_split(&model, &manifest, Split::Train)?;
            log::info!("training on {} images for {} epochs", train.len(), cfg.epochs);
            match train_model(model, &train, &cfg) {
                Ok(outcome) => {
                    checkpoint::save(&outcome.model, &out)?;
                    write_json(&sibling(&out, "loss.json"), &outcome.curve)?;
                    if let Some(last) = outcome.curve.epochs.last() {
                        log::info!("final epoch loss {last:.4e}");
                    }
                }
                Err(Error::TrainingAborted { step, msg, last_good }) => {
                    let path = sibling(&out, "last_good");
                    let saved = CountingModel::from_params(cfg.model_config(), *last_good)
                        .and_then(|model| checkpoint::save(&model, &path));
                    match saved {
                        Ok(()) => log::warn!("last finite parameters written to {}", path.display()),
                        Err(e) => log::warn!("could not keep the last finite parameters: {e}"),
                    }
                    return Err(Error::TrainingAborted {
                        step,
                        msg,
                        last_good: Box::default(),
                    });
                }
                Err(e) => return Err(e),
            }
        }
        Command::Eval { data, ckpt, split } => {
            let manifest = DatasetManifest::load(&data)?;
            let model = checkpoint::load(&ckpt)?;
            let report = corrcount::eval::evaluate(&model, &manifest, split)?;
            log::info!("{split}: MAE {:.3} RMSE {:.3}", report.mae, report.rmse);
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Predict {
            ckpt,
            image,
            boxes,
            trace,
        } => {
            let model = checkpoint::load(&ckpt)?;
            let mut raster = raster::read_f32r(&image).map_err(|e| match e {
                Error::Io { path, source } => Error::Input(format!("{}: {source}", path.display())),
                other => other,
            })?;
            if raster.rank() == 2 {
                let (h, w) = (raster.shape()[0], raster.shape()[1]);
                raster = raster.reshape(&[1, h, w])?;
            }
            let boxes: Vec<BoxRegion> = read_json(&boxes)?;
            let prediction = model.predict(&raster, &boxes, trace.is_some())?;
            if let Some(dir) = &trace {
                prediction.density.export(dir, "density")?;
                if let Some(t) = &prediction.trace {
                    t.export(dir)?;
                }
            }
            println!("{}", serde_json::json!({ "count": prediction.count }));
        }
        Command::Ablate {
            data,
            config,
            out,
            seeds,
            split,
        } => {
            let manifest = DatasetManifest::load(&data)?;
            let cfg = load_train_config(&config)?;
            let seeds = if seeds.is_empty() {
                (0..3).map(|i| cfg.seed + i).collect()
            } else {
                seeds
            };
            let model = CountingModel::new(cfg.model_config())?;
            let train = prepare_split(&model, &manifest, Split::Train)?;
            let eval = prepare_split(&model, &manifest, split)?;
            let grid = ablation_grid(cfg.model.refine.iterations);
            let table = run_ablation(&train, &eval, &cfg, &grid, &seeds, &split.to_string())?;
            write_json(&out, &table)?;
            print!("{}", table.to_text());
        }
    }
    Ok(())
}

/// `ckpt.bin` -> `ckpt.bin.{suffix}`.
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".");
    s.push(suffix);
    PathBuf::from(s)
}
