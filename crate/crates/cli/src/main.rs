use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use partseg::candle_core::{DType, Device};
use partseg::config::{parse_config, Split, TrainConfig};
use partseg::data::{crop_resize_rgb, generate_toy, load_dataset, CropBox, ToySpec};
use partseg::pipeline::{evaluate, load_model, read_meta, segment_images, transfer, Trainer};
use partseg::viz::{segmentation_panel, transfer_grid};
use partseg::Error;

/// Unsupervised part segmentation: training, evaluation and visualization.
#[derive(Parser)]
#[command(name = "partseg", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Compute device; only `cpu` is built in.
    #[arg(long, env = "PARTSEG_DEVICE", default_value = "cpu")]
    device: String,
    /// Validate inputs and report what would run, without running it.
    #[arg(long)]
    dry_run: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a configuration file.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        steps: Option<u64>,
        /// Resume from this checkpoint directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Score a checkpoint on the test split of its dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Evaluate on this configuration's dataset instead of the one the
        /// checkpoint was trained on.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Where to write report.json and report.csv (default: the checkpoint).
        #[arg(long)]
        out_dir: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Render input, part map and overlay panels for images.
    Viz {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(required = true)]
        images: Vec<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Render an appearance-transfer grid.
    Transfer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, required = true, num_args = 1..)]
        appearance: Vec<PathBuf>,
        #[arg(long, required = true, num_args = 1..)]
        shape: Vec<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Write the synthetic dataset.
    GenToy {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 2000)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 64)]
        canvas: usize,
        #[command(flatten)]
        common: Common,
    },
}

/// Failure classes mapped onto the process exit status.
enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::MissingKeys(_) => Failure::Usage(e.to_string()),
            other => Failure::Runtime(other),
        }
    }
}

type Outcome = Result<(), Failure>;

fn device(common: &Common) -> Result<Device, Failure> {
    match common.device.as_str() {
        "cpu" => Ok(Device::Cpu),
        other => Err(Failure::Usage(format!("unsupported device `{other}`; this build supports `cpu`"))),
    }
}

fn read_config(path: &Path) -> Result<TrainConfig, Failure> {
    if !path.exists() {
        return Err(Failure::Usage(format!("config file {} does not exist", path.display())));
    }
    Ok(parse_config(path)?)
}

fn train(
    config: &Path,
    seed: Option<u64>,
    steps: Option<u64>,
    checkpoint: Option<&Path>,
    out_dir: Option<PathBuf>,
    common: &Common,
) -> Outcome {
    let dev = device(common)?;
    let mut cfg = read_config(config)?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    if let Some(s) = steps {
        cfg.train.steps = Some(s);
    }
    if let Some(dir) = out_dir {
        cfg.output.checkpoint_dir = dir.join("checkpoints");
        cfg.output.dir = dir;
    }
    cfg.validate()?;
    if common.dry_run {
        let data = load_dataset(&cfg.dataset.with_split(Split::Train))?;
        if let Some(ck) = checkpoint {
            read_meta(ck)?;
        }
        println!(
            "config ok: {} with {} training images, K={}, hash {}",
            cfg.dataset.kind,
            data.len(),
            cfg.model.parts,
            cfg.hash()
        );
        return Ok(());
    }
    let mut trainer = match checkpoint {
        Some(ck) => Trainer::resume(&cfg, ck, &dev)?,
        None => Trainer::new(&cfg, &dev)?,
    };
    let outcome = trainer.run()?;
    if outcome.skipped > 0 {
        log::warn!("{} unreadable images were skipped", outcome.skipped);
    }
    println!("trained {} steps; checkpoint {}", outcome.steps, outcome.final_checkpoint.display());
    Ok(())
}

fn eval(checkpoint: &Path, config: Option<&Path>, out_dir: Option<PathBuf>, common: &Common) -> Outcome {
    let dev = device(common)?;
    let meta = read_meta(checkpoint)?;
    let cfg = match config {
        Some(p) => read_config(p)?,
        None => meta.config.clone(),
    };
    if cfg.model.parts != meta.dims.parts {
        return Err(Failure::Runtime(Error::Shape(format!(
            "checkpoint has K={} parts but the dataset configuration expects K={}",
            meta.dims.parts, cfg.model.parts
        ))));
    }
    if cfg.dataset.image_size != meta.dims.image_size {
        return Err(Failure::Runtime(Error::Shape(format!(
            "checkpoint takes {}px images but the dataset configuration produces {}px",
            meta.dims.image_size, cfg.dataset.image_size
        ))));
    }
    let train = load_dataset(&cfg.dataset.with_split(Split::Train))?;
    let test = load_dataset(&cfg.dataset.with_split(Split::Test))?;
    if common.dry_run {
        println!("would evaluate step {} on {} test images", meta.step, test.len());
        return Ok(());
    }
    let (model, _) = load_model(checkpoint, DType::F32, &dev)?;
    let report = evaluate(&model, &train, &test, meta.step)?;
    let dir = out_dir.unwrap_or_else(|| checkpoint.to_path_buf());
    report.write(&dir)?;
    let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.4}"));
    println!(
        "{} test images: mean error {}, mean IoU {}; report in {}",
        report.test_samples,
        fmt(report.mean_error),
        fmt(report.mean_iou),
        dir.display()
    );
    Ok(())
}

/// Reads an image file as a square `n x n` tensor, padding the short side.
fn read_image(path: &Path, n: usize) -> Result<partseg::ndarray::Array3<f32>, Failure> {
    let img = partseg::image::open(path)
        .map_err(|e| Failure::Runtime(Error::InvalidInput(format!("{}: {e}", path.display()))))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    Ok(crop_resize_rgb(&img, CropBox::full(w, h), n))
}

fn stem(path: &Path) -> String {
    path.file_stem().map_or_else(|| "image".to_string(), |s| s.to_string_lossy().into_owned())
}

fn create_dir(dir: &Path) -> Outcome {
    std::fs::create_dir_all(dir).map_err(|e| Failure::Runtime(Error::io(dir, e)))
}

fn save(img: &partseg::image::RgbImage, path: &Path) -> Outcome {
    partseg::data::toy::save_rgb(img, path).map_err(Failure::Runtime)
}

fn viz(checkpoint: &Path, out_dir: &Path, images: &[PathBuf], common: &Common) -> Outcome {
    let dev = device(common)?;
    let meta = read_meta(checkpoint)?;
    let n = meta.dims.image_size;
    let inputs = images.iter().map(|p| read_image(p, n)).collect::<Result<Vec<_>, _>>()?;
    if common.dry_run {
        println!("would render {} panels into {}", inputs.len(), out_dir.display());
        return Ok(());
    }
    let (model, _) = load_model(checkpoint, DType::F32, &dev)?;
    let probs = segment_images(&model, &inputs.iter().collect::<Vec<_>>())?;
    create_dir(out_dir)?;
    for ((path, img), p) in images.iter().zip(&inputs).zip(&probs) {
        save(&segmentation_panel(img, p.view()), &out_dir.join(format!("{}_parts.png", stem(path))))?;
    }
    println!("wrote {} panels to {}", inputs.len(), out_dir.display());
    Ok(())
}

fn transfer_cmd(checkpoint: &Path, appearance: &[PathBuf], shape: &[PathBuf], out_dir: &Path, common: &Common) -> Outcome {
    let dev = device(common)?;
    let meta = read_meta(checkpoint)?;
    let n = meta.dims.image_size;
    let app = appearance.iter().map(|p| read_image(p, n)).collect::<Result<Vec<_>, _>>()?;
    let shp = shape.iter().map(|p| read_image(p, n)).collect::<Result<Vec<_>, _>>()?;
    if common.dry_run {
        println!("would render a {}x{} transfer grid", app.len(), shp.len());
        return Ok(());
    }
    let (model, _) = load_model(checkpoint, DType::F32, &dev)?;
    let cells = transfer(&model, &app, &shp)?;
    create_dir(out_dir)?;
    let path = out_dir.join("transfer.png");
    save(&transfer_grid(&app, &shp, &cells), &path)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn gen_toy(out_dir: &Path, count: usize, seed: u64, canvas: usize, common: &Common) -> Outcome {
    let spec = ToySpec { seed, canvas, ..ToySpec::default() };
    spec.validate()?;
    if common.dry_run {
        println!("would write {count} toy samples of {canvas}px to {}", out_dir.display());
        return Ok(());
    }
    let manifest = generate_toy(&spec, count, out_dir)?;
    println!("wrote {} toy samples to {}", manifest.count, out_dir.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    let result = match &cli.command {
        Command::Train { config, seed, steps, checkpoint, out_dir, common } => {
            train(config, *seed, *steps, checkpoint.as_deref(), out_dir.clone(), common)
        }
        Command::Eval { checkpoint, config, out_dir, common } => eval(checkpoint, config.as_deref(), out_dir.clone(), common),
        Command::Viz { checkpoint, out_dir, images, common } => viz(checkpoint, out_dir, images, common),
        Command::Transfer { checkpoint, appearance, shape, out_dir, common } => {
            transfer_cmd(checkpoint, appearance, shape, out_dir, common)
        }
        Command::GenToy { out_dir, count, seed, canvas, common } => gen_toy(out_dir, *count, *seed, *canvas, common),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            eprintln!("run `partseg --help` for usage");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
