//! `canopyseg` command-line pipeline: synth → prepare → split → train →
//! calibrate → eval, plus whole-image `predict`.

mod config;

use canopyseg::dataset::{stratified_split, PatchStore, Split, SplitManifest};
use canopyseg::eval::{self, calibrate_threshold, evaluate, Prediction, DEFAULT_THRESHOLD};
use canopyseg::model::{train, Checkpoint, UNet};
use canopyseg::pipeline::prepare_samples;
use canopyseg::raster::{self, grid_positions, write_rejection_log, PATCH_SIZE};
use canopyseg::{seed, synth, Error, Result};
use clap::{Args, Parser, Subcommand};
use config::RunConfig;
use serde::Serialize;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "canopyseg", version, about = "Tree species segmentation on aerial patches")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArg {
    /// JSON run configuration; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic scenes with species maps.
    Synth {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long)]
        out: PathBuf,
        /// Number of scenes.
        #[arg(long)]
        scenes: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Cut an image and its species map into filtered 64×64 patches.
    Prepare {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Name used in patch ids; defaults to the image file stem.
        #[arg(long)]
        source: Option<String>,
        #[arg(long)]
        brightness_threshold: Option<f64>,
        #[arg(long)]
        blank_threshold: Option<f64>,
    },
    /// Assign patches to train/val/test, stratified by coverage category.
    Split {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a U-Net on the training split.
    Train {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Per-epoch loss CSV; defaults to the checkpoint path with `.loss.csv`.
        #[arg(long)]
        loss_csv: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Train with every sample weighing 1.
        #[arg(long)]
        unweighted: bool,
    },
    /// Pick the output threshold on the validation split and store it in the checkpoint.
    Calibrate {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// JSON threshold report.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Score the test split: class rates and bucketed detection.
    Eval {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        threshold: Option<f64>,
        /// JSON report; a `.txt` table is written beside it.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Segment a whole image and write a red overlay of the detections.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        threshold: Option<f64>,
    },
}

fn required(flag: Option<PathBuf>, from_config: &Option<PathBuf>, name: &str) -> Result<PathBuf> {
    flag.or_else(|| from_config.clone())
        .ok_or_else(|| Error::Argument(format!("--{name} is required (flag or config paths.{name})")))
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("report serializes");
    write_text(&(text + "\n"), path)
}

fn write_text(text: &str, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|source| Error::Io { path: dir.into(), source })?;
    }
    std::fs::write(path, text).map_err(|source| Error::Io { path: path.into(), source })
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.with_extension("").into_os_string();
    s.push(suffix);
    PathBuf::from(s)
}

fn source_name(image: &Path) -> String {
    let stem = image.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    stem.strip_suffix(".img").unwrap_or(&stem).to_string()
}

fn synth_cmd(cfg: RunConfig, out: PathBuf, scenes: Option<usize>, seed: Option<u64>) -> Result<()> {
    let mut scene_cfg = cfg.scene.clone();
    let base = seed.unwrap_or(scene_cfg.seed);
    for i in 0..scenes.unwrap_or(cfg.scenes) {
        scene_cfg.seed = seed::derive(base, &[i as u64]);
        let scene = synth::generate(&scene_cfg)?;
        let id = format!("scene_{i:03}");
        scene.write(&out, &id, &scene_cfg)?;
        log::info!(
            "{id}: minority fraction {:.4}, {} ground cells",
            scene.achieved_minority_fraction,
            scene.ground_cells.len()
        );
    }
    Ok(())
}

fn prepare_cmd(
    cfg: RunConfig,
    image: PathBuf,
    mask: PathBuf,
    out: Option<PathBuf>,
    source: Option<String>,
    brightness: Option<f64>,
    blank: Option<f64>,
) -> Result<()> {
    let mut filter = cfg.filter;
    if let Some(t) = brightness {
        filter.brightness_threshold = t;
    }
    if let Some(t) = blank {
        filter.blank_threshold = t;
    }
    filter.validate()?;
    let out = required(out, &cfg.paths.data, "out")?;
    let source = source.unwrap_or_else(|| source_name(&image));
    let img = raster::load_rgb(&image)?;
    let msk = raster::load_mask(&mask)?;
    let prepared = prepare_samples(&img, &msk, &source, &filter)?;
    let store = PatchStore::create(&out)?;
    let entries = prepared
        .samples
        .iter()
        .map(|(s, origin)| store.write_sample(s, &source, *origin))
        .collect::<Result<Vec<_>>>()?;
    let kept = entries.len();
    store.merge_index(entries)?;
    let log_path = out.join(format!("{source}.rejected.csv"));
    let mut buf = Vec::new();
    write_rejection_log(&prepared.rejections, &mut buf).expect("writing to memory");
    write_text(&String::from_utf8(buf).expect("ascii log"), &log_path)?;
    log::info!("{source}: kept {kept} patches, rejected {}", prepared.rejections.len());
    Ok(())
}

fn split_cmd(cfg: RunConfig, data: Option<PathBuf>, seed: Option<u64>, out: Option<PathBuf>) -> Result<()> {
    let data = required(data, &cfg.paths.data, "data")?;
    let out = required(out, &cfg.paths.manifest, "out")?;
    let index = PatchStore::open(&data).load_index()?;
    if index.entries.is_empty() {
        return Err(Error::Data(format!("no patches indexed in {}", data.display())));
    }
    let items: Vec<_> = index.entries.iter().map(|e| (e.id.clone(), e.category)).collect();
    let manifest = stratified_split(&items, cfg.split_ratios, seed.unwrap_or(cfg.split_seed))?;
    manifest.save(&out)?;
    for split in [Split::Train, Split::Val, Split::Test] {
        log::info!("{split}: {} patches", manifest.ids(split).count());
    }
    Ok(())
}

struct Inputs {
    store: PatchStore,
    manifest: SplitManifest,
}

fn inputs(cfg: &RunConfig, data: Option<PathBuf>, manifest: Option<PathBuf>) -> Result<Inputs> {
    let data = required(data, &cfg.paths.data, "data")?;
    let manifest = required(manifest, &cfg.paths.manifest, "manifest")?;
    Ok(Inputs {
        store: PatchStore::open(data),
        manifest: SplitManifest::load(manifest)?,
    })
}

#[allow(clippy::too_many_arguments)]
fn train_cmd(
    mut cfg: RunConfig,
    data: Option<PathBuf>,
    manifest: Option<PathBuf>,
    out: Option<PathBuf>,
    loss_csv: Option<PathBuf>,
    epochs: Option<usize>,
    learning_rate: Option<f64>,
    batch_size: Option<usize>,
    seed: Option<u64>,
    unweighted: bool,
) -> Result<()> {
    let tc = &mut cfg.train;
    if let Some(v) = epochs {
        tc.epochs = v;
    }
    if let Some(v) = learning_rate {
        tc.learning_rate = v;
    }
    if let Some(v) = batch_size {
        tc.batch_size = v;
    }
    if let Some(v) = seed {
        tc.seed = v;
    }
    if unweighted {
        tc.weighted = false;
    }
    tc.validate()?;
    let out = required(out, &cfg.paths.model, "out")?;
    let loss_csv = loss_csv.unwrap_or_else(|| with_suffix(&out, ".loss.csv"));
    let Inputs { store, manifest } = inputs(&cfg, data, manifest)?;
    let samples = store.load_split(&manifest, Split::Train)?;
    let mut model = UNet::<f32>::build(cfg.model.clone(), cfg.model_seed)?;
    log::info!(
        "training {} parameters on {} patches for {} epochs",
        model.param_count(),
        samples.len(),
        cfg.train.epochs
    );
    let trace = train(&mut model, &samples, &cfg.train, &cfg.augment)?;

    let mut csv = String::from("epoch,mean_loss\n");
    for (e, l) in trace.iter().enumerate() {
        csv.push_str(&format!("{},{l}\n", e + 1));
    }
    write_text(&csv, &loss_csv)?;

    let mut ckpt = Checkpoint::new(&model);
    let meta = &mut ckpt.metadata;
    meta.insert("train".into(), serde_json::to_value(&cfg.train).expect("config serializes"));
    meta.insert("augment".into(), serde_json::to_value(&cfg.augment).expect("config serializes"));
    meta.insert("model_seed".into(), cfg.model_seed.into());
    meta.insert("split_seed".into(), manifest.seed.into());
    meta.insert("train_patches".into(), samples.len().into());
    if let Some(last) = trace.last() {
        meta.insert("final_loss".into(), (*last).into());
    }
    ckpt.save(&out)
}

fn calibrate_cmd(
    cfg: RunConfig,
    model: Option<PathBuf>,
    data: Option<PathBuf>,
    manifest: Option<PathBuf>,
    report: Option<PathBuf>,
) -> Result<()> {
    let model_path = required(model, &cfg.paths.model, "model")?;
    let Inputs { store, manifest } = inputs(&cfg, data, manifest)?;
    let mut ckpt = Checkpoint::load(&model_path)?;
    let val = store.load_split(&manifest, Split::Val)?;
    let result = calibrate_threshold(&ckpt.model, &val, &cfg.calibration_grid)?;
    print!("{}", result.to_text());
    write_json(&result, &report.unwrap_or_else(|| with_suffix(&model_path, ".calibration.json")))?;
    ckpt.threshold = Some(result.chosen_threshold);
    ckpt.save(&model_path)
}

fn resolve_threshold(flag: Option<f64>, ckpt: &Checkpoint) -> f64 {
    if let Some(t) = flag {
        return t;
    }
    if let Some(t) = ckpt.threshold {
        log::info!("using calibrated threshold {t}");
        return t;
    }
    log::warn!("no threshold given and checkpoint is uncalibrated; using default {DEFAULT_THRESHOLD}");
    DEFAULT_THRESHOLD
}

fn eval_cmd(
    cfg: RunConfig,
    model: Option<PathBuf>,
    data: Option<PathBuf>,
    manifest: Option<PathBuf>,
    threshold: Option<f64>,
    report: Option<PathBuf>,
) -> Result<()> {
    let model_path = required(model, &cfg.paths.model, "model")?;
    let Inputs { store, manifest } = inputs(&cfg, data, manifest)?;
    let ckpt = Checkpoint::load(&model_path)?;
    let threshold = resolve_threshold(threshold, &ckpt);
    let test = store.load_split(&manifest, Split::Test)?;
    if test.is_empty() {
        return Err(Error::Data("test split is empty".into()));
    }
    let images: Vec<_> = test.iter().map(|s| &s.image).collect();
    let probs = ckpt.model.predict_all(&images, 16)?;
    let preds: Vec<_> = test
        .iter()
        .zip(&probs)
        .map(|(s, p)| Prediction { target: &s.target, probs: p })
        .collect();
    let result = evaluate(&preds, threshold, &cfg.detection)?;
    let text = result.to_text();
    print!("{text}");
    let report = report.unwrap_or_else(|| with_suffix(&model_path, ".eval.json"));
    write_json(&result, &report)?;
    write_text(&text, &report.with_extension("txt"))
}

fn predict_cmd(model: PathBuf, image: PathBuf, out: PathBuf, threshold: Option<f64>) -> Result<()> {
    let ckpt = Checkpoint::load(&model)?;
    let threshold = resolve_threshold(threshold, &ckpt);
    let img = raster::load_rgb(&image)?;
    let xs: Vec<usize> = grid_positions(img.width, PATCH_SIZE, PATCH_SIZE).collect();
    let ys: Vec<usize> = grid_positions(img.height, PATCH_SIZE, PATCH_SIZE).collect();
    if xs.is_empty() || ys.is_empty() {
        return Err(Error::Dimension(format!(
            "image is {}×{}, smaller than one {PATCH_SIZE}×{PATCH_SIZE} tile",
            img.width, img.height
        )));
    }
    if img.width % PATCH_SIZE != 0 || img.height % PATCH_SIZE != 0 {
        log::warn!(
            "{}×{} is not a multiple of {PATCH_SIZE}; the right and bottom borders are left unpredicted",
            img.width,
            img.height
        );
    }
    let origins: Vec<(usize, usize)> = ys.iter().flat_map(|&y| xs.iter().map(move |&x| (x, y))).collect();
    let tiles = origins
        .iter()
        .map(|&(x, y)| img.crop(x, y, PATCH_SIZE, PATCH_SIZE))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<_> = tiles.iter().collect();
    let probs = ckpt.model.predict_all(&refs, 16)?;
    // uncovered border pixels keep probability 0 and so stay unblended
    let mut full = vec![0.0f32; img.width * img.height];
    for (&(x0, y0), tile) in origins.iter().zip(&probs) {
        for r in 0..PATCH_SIZE {
            let row = (y0 + r) * img.width + x0;
            full[row..row + PATCH_SIZE].copy_from_slice(&tile[r * PATCH_SIZE..(r + 1) * PATCH_SIZE]);
        }
    }
    let overlaid = eval::overlay(&img, &full, threshold)?;
    raster::save_rgb(&overlaid, &out)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { cfg, out, scenes, seed } => {
            synth_cmd(RunConfig::load(cfg.config.as_deref())?, out, scenes, seed)
        }
        Command::Prepare {
            cfg,
            image,
            mask,
            out,
            source,
            brightness_threshold,
            blank_threshold,
        } => prepare_cmd(
            RunConfig::load(cfg.config.as_deref())?,
            image,
            mask,
            out,
            source,
            brightness_threshold,
            blank_threshold,
        ),
        Command::Split { cfg, data, seed, out } => {
            split_cmd(RunConfig::load(cfg.config.as_deref())?, data, seed, out)
        }
        Command::Train {
            cfg,
            data,
            manifest,
            out,
            loss_csv,
            epochs,
            learning_rate,
            batch_size,
            seed,
            unweighted,
        } => train_cmd(
            RunConfig::load(cfg.config.as_deref())?,
            data,
            manifest,
            out,
            loss_csv,
            epochs,
            learning_rate,
            batch_size,
            seed,
            unweighted,
        ),
        Command::Calibrate { cfg, model, data, manifest, report } => {
            calibrate_cmd(RunConfig::load(cfg.config.as_deref())?, model, data, manifest, report)
        }
        Command::Eval {
            cfg,
            model,
            data,
            manifest,
            threshold,
            report,
        } => eval_cmd(RunConfig::load(cfg.config.as_deref())?, model, data, manifest, threshold, report),
        Command::Predict { model, image, out, threshold } => predict_cmd(model, image, out, threshold),
    }
}

fn init_threads() {
    let Ok(v) = std::env::var("CANOPYSEG_THREADS") else {
        return;
    };
    match v.parse::<usize>() {
        Ok(n) if n > 0 => {
            if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
                log::warn!("could not size thread pool: {e}");
            }
        }
        _ => log::warn!("ignoring CANOPYSEG_THREADS={v:?}; expected a positive integer"),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    init_threads();
    match run(cli) {
        Ok(()) => {
            let _ = std::io::stdout().flush();
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_data_error() { 2 } else { 1 })
        }
    }
}
