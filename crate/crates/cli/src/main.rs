mod overlay;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use vesselprior::architectures::NetworkKind;
use vesselprior::config::KvConfig;
use vesselprior::data::imageops::resize_image;
use vesselprior::data::{
    generate_synthetic_with, load_dataset, read_image, read_mask, write_dataset, write_gray_png,
    write_rgb_png, ImageSample, SyntheticConfig, SYNTH_KEYS,
};
use vesselprior::losses::ShapePrior;
use vesselprior::metrics::{evaluate_case, BinaryMask, DEFAULT_THRESHOLD};
use vesselprior::training::{
    cross_validate, holdout_split, predict, train_autoencoder, train_segmenter, Checkpoint, ExperimentConfig,
    PriorKind, RunDir,
};

/// Bad input from the user: exit code 1.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
struct Usage(String);

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

#[derive(Parser, Debug)]
#[command(name = "vesselprior", version, about = "Shape-prior regularized vessel segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct ConfigArgs {
    /// Flat `key = value` config file (`#` starts a comment).
    #[arg(long)]
    config: Option<PathBuf>,
    /// `key=value` applied after the config file; repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Seed for every random choice; overrides the `seed` key.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug, Clone)]
struct RunArgs {
    /// Directory holding run directories.
    #[arg(long, default_value = "runs")]
    runs: PathBuf,
    /// Run directory name; defaults to `<command>-<config hash prefix>`.
    #[arg(long)]
    run_id: Option<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic vessel dataset (images/, masks/, manifest.csv).
    Synth {
        #[arg(long)]
        count: usize,
        #[arg(long)]
        size: usize,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Pretrain an auto-encoder on the masks of a dataset.
    TrainAe {
        #[arg(long)]
        data: PathBuf,
        /// `cae` or `socae`; defaults to the configured prior, else `socae`.
        #[arg(long)]
        kind: Option<String>,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Train the segmenter, optionally regularized by a pretrained encoder.
    TrainSeg {
        #[arg(long)]
        data: PathBuf,
        /// Auto-encoder checkpoint; required unless `prior = none`.
        #[arg(long)]
        prior_checkpoint: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        run: RunArgs,
    },
    /// k-fold cross-validation of both stages with a per-case metrics report.
    CrossValidate {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Segment one image with a trained segmenter.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Ground-truth mask drawn in green on the overlay.
        #[arg(long)]
        gt: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
        threshold: f64,
        /// Resize the image to the model input size instead of rejecting it.
        #[arg(long)]
        resize: bool,
    },
    /// Score a predicted mask (or probability map) against ground truth.
    Eval {
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        pred: PathBuf,
        #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
        threshold: f64,
    },
}

fn load_kv(args: &ConfigArgs) -> Result<KvConfig> {
    let mut kv = match &args.config {
        Some(p) => {
            require_file(p, "config")?;
            KvConfig::load(p)?
        }
        None => KvConfig::default(),
    };
    for o in &args.overrides {
        kv.apply_override(o)?;
    }
    if let Some(seed) = args.seed {
        kv.set("seed", seed);
    }
    let mut known = ExperimentConfig::known_keys();
    known.extend_from_slice(SYNTH_KEYS);
    kv.ensure_known(&known)?;
    Ok(kv)
}

/// Experiment config from file + overrides; `synth.*` keys are allowed in
/// the same file and ignored here.
fn experiment(args: &ConfigArgs) -> Result<ExperimentConfig> {
    let mut kv = load_kv(args)?;
    for k in SYNTH_KEYS {
        kv.remove(k);
    }
    Ok(ExperimentConfig::from_kv(&kv)?)
}

fn require_file(p: &Path, what: &str) -> Result<()> {
    if p.is_file() {
        Ok(())
    } else {
        Err(usage(format!("{what} file {} not found", p.display())))
    }
}

fn require_dir(p: &Path, what: &str) -> Result<()> {
    if p.is_dir() {
        Ok(())
    } else {
        Err(usage(format!("{what} directory {} not found", p.display())))
    }
}

fn open_run(run: &RunArgs, command: &str, cfg: &ExperimentConfig) -> Result<RunDir> {
    let id = run.run_id.clone().unwrap_or_else(|| RunDir::default_id(command, &cfg.hash()));
    let dir = RunDir::create(&run.runs, &id)?;
    dir.write("config.cfg", &cfg.to_kv().to_text())?;
    log::info!("writing to {}", dir.root().display());
    Ok(dir)
}

fn load_data(dir: &Path) -> Result<Vec<ImageSample>> {
    require_dir(dir, "data")?;
    let samples = load_dataset(dir)?;
    if samples.is_empty() {
        return Err(usage(format!("no samples found under {}", dir.display())));
    }
    Ok(samples)
}

fn synth(count: usize, size: usize, out: &Path, args: &ConfigArgs) -> Result<()> {
    let kv = load_kv(args)?;
    let cfg = SyntheticConfig::from_kv(&kv)?;
    let seed = kv.get_or("seed", 0u64)?;
    if count == 0 {
        return Err(usage("--count must be at least 1"));
    }
    let samples = generate_synthetic_with(&cfg, count, size, seed)?;
    write_dataset(out, &samples, Some(seed))?;
    println!("wrote {count} samples to {}", out.display());
    Ok(())
}

fn train_ae(data: &Path, kind: Option<&str>, args: &ConfigArgs, run: &RunArgs) -> Result<()> {
    let cfg = experiment(args)?;
    let kind = match kind {
        Some(k) => match k.parse::<PriorKind>().map_err(usage)?.network() {
            Some(n) => n,
            None => return Err(usage("--kind must be cae or socae")),
        },
        None => cfg.segmenter.prior.network().unwrap_or(NetworkKind::Socae),
    };
    cfg.model.validate_undercomplete()?;
    let samples = load_data(data)?;
    let (fit, hold) = holdout_split(samples, cfg.holdout_fraction, cfg.autoencoder.seed);
    let dir = open_run(run, "train-ae", &cfg)?;
    let out = train_autoencoder(kind, &cfg.model, &fit, &hold, &cfg.autoencoder, &cfg.hash())?;
    out.checkpoint.save(&dir.path("ae.ckpt"))?;
    dir.write_log("ae", &out.log)?;
    println!(
        "{kind:?} auto-encoder: best epoch {} (validation MSE {:.6}) -> {}",
        out.checkpoint.epoch,
        out.checkpoint.val_metric,
        dir.path("ae.ckpt").display()
    );
    Ok(())
}

fn train_seg(data: &Path, prior_path: Option<&Path>, args: &ConfigArgs, run: &RunArgs) -> Result<()> {
    let cfg = experiment(args)?;
    let prior_ckpt = match (cfg.segmenter.prior, prior_path) {
        (PriorKind::None, _) => None,
        (_, None) => return Err(usage("--prior-checkpoint is required unless prior = none")),
        (kind, Some(p)) => {
            require_file(p, "prior checkpoint")?;
            let c = Checkpoint::load(p)?;
            if Some(c.kind) != kind.network() {
                return Err(usage(format!("prior = {kind} but the checkpoint holds a {:?}", c.kind)));
            }
            Some(c)
        }
    };
    let encoder = prior_ckpt.as_ref().map(Checkpoint::autoencoder).transpose()?;
    let prior = match (&encoder, &prior_ckpt) {
        (Some(e), Some(c)) => Some(ShapePrior {
            encoder: e,
            params: &c.params,
        }),
        _ => None,
    };
    let samples = load_data(data)?;
    let (fit, hold) = holdout_split(samples, cfg.holdout_fraction, cfg.segmenter.seed);
    let dir = open_run(run, "train-seg", &cfg)?;
    let out = train_segmenter(&cfg.model, &fit, &hold, &cfg.segmenter, prior, cfg.threshold, &cfg.hash())?;
    out.checkpoint.save(&dir.path("seg.ckpt"))?;
    dir.write_log("seg", &out.log)?;
    println!(
        "segmenter: best epoch {} (validation DSC {:.6}) -> {}",
        out.checkpoint.epoch,
        out.checkpoint.val_metric,
        dir.path("seg.ckpt").display()
    );
    Ok(())
}

fn cross_validate_cmd(data: &Path, args: &ConfigArgs, run: &RunArgs) -> Result<()> {
    let cfg = experiment(args)?;
    let samples = load_data(data)?;
    let dir = open_run(run, "cross-validate", &cfg)?;
    let cv = cross_validate(&samples, &cfg, cfg.folds)?;
    for f in &cv.folds {
        if let Some(ae) = &f.autoencoder {
            ae.checkpoint.save(&dir.path(&format!("fold{}_ae.ckpt", f.fold_index)))?;
            dir.write_log(&format!("fold{}_ae", f.fold_index), &ae.log)?;
        }
        if let Some(seg) = &f.segmenter {
            seg.checkpoint.save(&dir.path(&format!("fold{}_seg.ckpt", f.fold_index)))?;
            dir.write_log(&format!("fold{}_seg", f.fold_index), &seg.log)?;
        }
        if let Some(e) = &f.error {
            log::error!("fold {}: {e}", f.fold_index);
        }
    }
    cv.report.write_csv(&dir.path("metrics.csv"))?;
    dir.write("audit.csv", &cv.audit_csv())?;
    print!("{}", cv.report.to_text());
    if !cv.report.complete {
        anyhow::bail!("some folds failed; the report covers completed folds only");
    }
    Ok(())
}

fn predict_cmd(
    checkpoint: &Path,
    image: &Path,
    gt: Option<&Path>,
    out: &Path,
    threshold: f64,
    resize: bool,
) -> Result<()> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(usage("--threshold must lie in (0, 1)"));
    }
    require_file(checkpoint, "checkpoint")?;
    require_file(image, "image")?;
    let ckpt = Checkpoint::load(checkpoint)?;
    if ckpt.kind != NetworkKind::Unet {
        return Err(usage(format!("{} holds a {:?}, not a segmenter", checkpoint.display(), ckpt.kind)));
    }
    let unet = ckpt.unet()?;
    let (h, w) = ckpt.model.input_size;
    let mut img = read_image(image)?;
    let (c, ih, iw) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    if c != ckpt.model.input_channels {
        return Err(usage(format!(
            "image has {c} channels but the model expects {}",
            ckpt.model.input_channels
        )));
    }
    if (ih, iw) != (h, w) {
        if !resize {
            return Err(usage(format!(
                "image is {ih}x{iw} but the model expects {h}x{w}; pass --resize to resample it"
            )));
        }
        img = resize_image(&img, h, w)?;
    }
    let gt_mask = match gt {
        Some(p) => {
            require_file(p, "ground-truth")?;
            let m = read_mask(p)?;
            if (m.rows(), m.cols()) != (h, w) {
                return Err(usage(format!("ground truth is {}x{}, expected {h}x{w}", m.rows(), m.cols())));
            }
            Some(m)
        }
        None => None,
    };
    let sample = ImageSample::new(img.clone(), BinaryMask::new(h, w, vec![false; h * w])?, "input", "input")?;
    let prob = predict(&unet, &ckpt.params, &[&sample])?.remove(0);
    let mask = BinaryMask::threshold(&prob, threshold)?;

    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_gray_png(&out.join("prob.png"), h, w, prob.data())?;
    write_gray_png(&out.join("mask.png"), h, w, mask.to_tensor().data())?;
    write_rgb_png(&out.join("overlay.png"), &overlay::render(&img, &mask, gt_mask.as_ref())?)?;
    if let Some(g) = &gt_mask {
        let m = evaluate_case("input", g, &prob, threshold)?;
        println!("{}", format_case(&m));
    }
    println!("wrote prob.png, mask.png, overlay.png to {}", out.display());
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".to_string(), |x| format!("{x:.6}"))
}

fn format_case(m: &vesselprior::metrics::CaseMetrics) -> String {
    format!(
        "DSC {}  AVD {}  ASSD {}  HD {}",
        fmt_opt(m.dsc),
        fmt_opt(m.avd),
        fmt_opt(m.assd),
        fmt_opt(m.hd)
    )
}

fn eval_cmd(gt: &Path, pred: &Path, threshold: f64) -> Result<()> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(usage("--threshold must lie in (0, 1)"));
    }
    require_file(gt, "ground-truth")?;
    require_file(pred, "prediction")?;
    let g = read_mask(gt)?;
    let p = read_image(pred)?;
    if p.shape()[0] != 1 {
        return Err(usage("prediction must be a single-channel image"));
    }
    if (p.shape()[1], p.shape()[2]) != (g.rows(), g.cols()) {
        return Err(usage(format!(
            "prediction is {}x{} but ground truth is {}x{}",
            p.shape()[1],
            p.shape()[2],
            g.rows(),
            g.cols()
        )));
    }
    let m = evaluate_case("pred", &g, &p, threshold)?;
    println!("{}", format_case(&m));
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { count, size, out, cfg } => synth(count, size, &out, &cfg),
        Command::TrainAe { data, kind, cfg, run } => train_ae(&data, kind.as_deref(), &cfg, &run),
        Command::TrainSeg {
            data,
            prior_checkpoint,
            cfg,
            run,
        } => train_seg(&data, prior_checkpoint.as_deref(), &cfg, &run),
        Command::CrossValidate { data, cfg, run } => cross_validate_cmd(&data, &cfg, &run),
        Command::Predict {
            checkpoint,
            image,
            gt,
            out,
            threshold,
            resize,
        } => predict_cmd(&checkpoint, &image, gt.as_deref(), &out, threshold, resize),
        Command::Eval { gt, pred, threshold } => eval_cmd(&gt, &pred, threshold),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<Usage>().is_some() {
        return 1;
    }
    match err.downcast_ref::<vesselprior::Error>() {
        Some(e) if e.is_validation() => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
