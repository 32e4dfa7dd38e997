use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use rave::backend::load_backend;
use rave::data::{
    eval_iterator, list_images, scan_corpus, CorpusSpec, Pairing, DEFAULT_EVAL_LONG_SIDE,
};
use rave::enhance::{enhance_file, Frozen};
use rave::image::ImageTensor;
use rave::metrics::{evaluate, parse_metrics, EmbeddingFeatures, Metric, MetricBackends};
use rave::residual::{
    compute_residual, interpret_residual, load_residual, save_residual, ResidualVector,
};
use rave::train::{
    load_model, parse_key_values, LossRecord, Method, Setting, TrainConfig, TrainData, Trainer,
};

/// Backlit image enhancement: residual directions, training, inference and evaluation.
#[derive(Parser)]
#[command(name = "rave", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compute the residual direction between well-lit and backlit corpora.
    ComputeResidual(ComputeResidualArgs),
    /// List vocabulary tokens least and most similar to a residual direction.
    Interpret(InterpretArgs),
    /// Train an enhancement model.
    ///
    /// Settings are resolved as: built-in defaults for the method, then the
    /// config file, then `--set key=value` pairs, then dedicated flags.
    Train(TrainArgs),
    /// Enhance an image file or every image under a directory.
    Enhance(EnhanceArgs),
    /// Score a checkpoint on a test corpus.
    Evaluate(EvaluateArgs),
}

#[derive(Args)]
struct ComputeResidualArgs {
    #[arg(long)]
    backlit: PathBuf,
    #[arg(long = "well-lit")]
    well_lit: PathBuf,
    #[arg(long, default_value = "vit-b-32")]
    backend: String,
    #[arg(long, default_value = "cpu")]
    device: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct InterpretArgs {
    #[arg(long)]
    residual: PathBuf,
    #[arg(long, default_value = "vit-b-32")]
    backend: String,
    #[arg(long, default_value = "cpu")]
    device: String,
    #[arg(long = "top-k", default_value_t = 10, value_parser = clap::value_parser!(u64).range(1..))]
    top_k: u64,
}

#[derive(Args)]
struct TrainArgs {
    /// rave, clip-lit or clip-lit-latent; may instead come from the config file.
    #[arg(long)]
    method: Option<String>,
    /// Line-oriented `key = value` file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Corpus root holding `backlit/` and `well_lit/`.
    #[arg(long)]
    data: PathBuf,
    /// Residual file for rave; computed from the training corpus when absent.
    #[arg(long)]
    residual: Option<PathBuf>,
    /// Output directory for checkpoints and the manifest.
    #[arg(long)]
    out: PathBuf,
    /// Continue from a checkpoint of an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Encoder model id or weights directory.
    #[arg(long)]
    backend: Option<String>,
    /// supervised (paired by filename) or unsupervised.
    #[arg(long)]
    setting: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long = "total-iters")]
    total_iters: Option<u64>,
    #[arg(long = "checkpoint-every")]
    checkpoint_every: Option<u64>,
    /// Extra `key=value` overrides, applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long, default_value = "cpu")]
    device: String,
    /// Print a loss line every N steps.
    #[arg(long = "log-every", default_value_t = 1)]
    log_every: u64,
}

#[derive(Args)]
struct EnhanceArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[arg(long = "long-side", default_value_t = DEFAULT_EVAL_LONG_SIDE)]
    long_side: usize,
    #[arg(long, default_value = "cpu")]
    device: String,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Test root holding `backlit/` and `well_lit/`.
    #[arg(long)]
    test: PathBuf,
    #[arg(long, default_value = "psnr,ssim")]
    metrics: String,
    /// `paired` (ground truth by filename stem) or `unpaired`.
    #[arg(long, default_value = "paired")]
    pairing: String,
    #[arg(long = "long-side", default_value_t = DEFAULT_EVAL_LONG_SIDE)]
    long_side: usize,
    /// Backend whose image embeddings serve as FID features.
    #[arg(long = "feature-backend")]
    feature_backend: Option<String>,
    /// Where `metrics.txt` and `metrics.record` go; defaults to the checkpoint's directory.
    #[arg(long = "report-dir")]
    report_dir: Option<PathBuf>,
    #[arg(long, default_value = "cpu")]
    device: String,
}

fn load_dir(dir: &Path) -> Result<impl Iterator<Item = rave::Result<ImageTensor>>> {
    let entries = list_images(dir)?;
    Ok(entries.into_iter().map(|e| ImageTensor::load(&e.path)))
}

fn residual_from_dirs(
    backlit: &Path,
    well_lit: &Path,
    handle: &rave::backend::BackendHandle,
) -> Result<ResidualVector> {
    let back = load_dir(backlit)?;
    let well = load_dir(well_lit)?;
    Ok(compute_residual(handle, back, well)?)
}

fn compute_residual_cmd(a: ComputeResidualArgs) -> Result<()> {
    let handle = load_backend(&a.backend, &a.device)?;
    let rv = residual_from_dirs(&a.backlit, &a.well_lit, &handle)?;
    save_residual(&rv, &a.out)?;
    let norm = rv.residual_f64().iter().map(|v| v * v).sum::<f64>().sqrt();
    println!("backlit images:   {}", rv.n_back);
    println!("well-lit images:  {}", rv.n_well);
    println!("dimension:        {}", rv.dim());
    println!("residual norm:    {norm:.6}");
    println!("written:          {}", a.out.display());
    Ok(())
}

fn interpret_cmd(a: InterpretArgs) -> Result<()> {
    let handle = load_backend(&a.backend, &a.device)?;
    let rv = load_residual(&a.residual)?;
    let (low, high) = interpret_residual(&handle, &rv, a.top_k as usize)?;
    let width = low
        .iter()
        .chain(&high)
        .map(|t| t.display().chars().count())
        .chain(["lowest".len(), "highest".len()])
        .max()
        .unwrap_or(8);
    println!(
        "{:<width$}  {:>7}    {:<width$}  {:>7}",
        "lowest", "", "highest", ""
    );
    for (l, h) in low.iter().zip(&high) {
        println!(
            "{:<width$}  {:>7.3}    {:<width$}  {:>7.3}",
            l.display(),
            l.score,
            h.display(),
            h.score
        );
    }
    Ok(())
}

fn resolve_config(a: &TrainArgs) -> Result<TrainConfig> {
    let file_pairs = match &a.config {
        Some(p) => {
            let text =
                std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            parse_key_values(&text)?
        }
        None => Vec::new(),
    };
    let file_method = file_pairs
        .iter()
        .find(|(k, _)| k == "method")
        .map(|(_, v)| v.clone());
    let method: Method = match (&a.method, &file_method) {
        (Some(m), Some(f)) => {
            let (m, f): (Method, Method) = (m.parse()?, f.parse()?);
            if m != f {
                bail!("--method {m} conflicts with `method = {f}` in the config file");
            }
            m
        }
        (Some(m), None) => m.parse()?,
        (None, Some(f)) => f.parse()?,
        (None, None) => bail!("no method given; pass --method or set `method` in the config file"),
    };
    let mut cfg = TrainConfig::defaults(method);
    for (k, v) in &file_pairs {
        cfg.set(k, v)?;
    }
    for kv in &a.set {
        let (k, v) = kv
            .split_once('=')
            .with_context(|| format!("--set expects KEY=VALUE, got `{kv}`"))?;
        cfg.set(k, v)?;
    }
    if let Some(b) = &a.backend {
        cfg.backend = b.clone();
    }
    if let Some(s) = &a.setting {
        cfg.setting = s.parse()?;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(n) = a.total_iters {
        cfg.total_iters = n;
    }
    if let Some(n) = a.checkpoint_every {
        cfg.checkpoint_every = n;
    }
    if a.residual.is_some() && cfg.method != Method::Rave {
        bail!("--residual only applies to --method rave");
    }
    cfg.validate()?;
    Ok(cfg)
}

fn format_record(r: &LossRecord) -> String {
    let mut s = format!("step {:>7}  {:<16}", r.step, r.phase);
    for (k, v) in [
        ("identity", r.identity),
        ("clip", r.clip),
        ("residual", r.residual),
        ("guidance", r.guidance),
    ] {
        if let Some(v) = v {
            s.push_str(&format!("  {k}={v:.6}"));
        }
    }
    s.push_str(&format!("  total={:.6}", r.total));
    s
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let cfg = resolve_config(&a)?;
    let handle = load_backend(&cfg.backend, &a.device)?;
    if cfg.method == Method::ClipLit && !handle.has_text_tower() {
        return Err(rave::Error::NoTextTower(handle.model_id().to_string()).into());
    }
    let pairing = match cfg.setting {
        Setting::Supervised => Pairing::PairedByFilename,
        Setting::Unsupervised => Pairing::Unpaired,
    };
    let spec = CorpusSpec {
        train_size: cfg.train_size,
        ..CorpusSpec::from_root(&a.data, pairing)
    };
    let index = scan_corpus(&spec)?;
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let residual = if cfg.method == Method::Rave {
        Some(match &a.residual {
            Some(p) => load_residual(p)?,
            None => {
                println!("computing residual from {}", a.data.display());
                let rv = residual_from_dirs(&spec.backlit_dir, &spec.well_lit_dir, &handle)?;
                let path = a.out.join("residual.bin");
                save_residual(&rv, &path)?;
                println!("residual written to {}", path.display());
                rv
            }
        })
    } else {
        None
    };
    let data = TrainData::from_index(&index, cfg.train_size)?;
    let mut trainer = match &a.resume {
        Some(ckpt) => Trainer::resume(ckpt, handle, data, residual.as_ref(), Some(a.out.clone()))?,
        None => Trainer::new(cfg, handle, data, residual.as_ref(), Some(a.out.clone()))?,
    };
    let every = a.log_every.max(1);
    trainer.run_with(|r| {
        if r.step % every == 0 {
            println!("{}", format_record(r));
        }
    })?;
    let m = trainer.manifest();
    println!("steps:       {}", trainer.global_step());
    println!("checkpoints: {}", m.checkpoints.len());
    if let Some(last) = m.checkpoints.last() {
        println!("final:       {}", a.out.join(&last.file).display());
    }
    println!(
        "manifest:    {}",
        a.out.join(rave::train::MANIFEST_FILE).display()
    );
    Ok(())
}

fn enhance_cmd(a: EnhanceArgs) -> Result<()> {
    if a.long_side == 0 {
        bail!("--long-side must be positive");
    }
    let device = rave::backend::parse_device(&a.device)?;
    let model = load_model(&a.checkpoint, &device, candle_core::DType::F32)?;
    if a.input.is_dir() {
        let entries = list_images(&a.input)?;
        for e in &entries {
            let out = a.output.join(&e.relative);
            let r = enhance_file(&model, &e.path, &out, a.long_side)?;
            println!(
                "{} -> {} ({}x{})",
                e.relative,
                out.display(),
                r.processed_size.1,
                r.processed_size.0
            );
        }
        println!("enhanced {} images", entries.len());
    } else {
        let r = enhance_file(&model, &a.input, &a.output, a.long_side)?;
        println!(
            "{} -> {} ({}x{})",
            a.input.display(),
            a.output.display(),
            r.processed_size.1,
            r.processed_size.0
        );
    }
    Ok(())
}

fn evaluate_cmd(a: EvaluateArgs) -> Result<()> {
    let metrics = parse_metrics(&a.metrics)?;
    let device = rave::backend::parse_device(&a.device)?;
    let dtype = candle_core::DType::F32;
    let model = load_model(&a.checkpoint, &device, dtype)?;
    let pairing: Pairing = a.pairing.parse()?;
    let index = scan_corpus(&CorpusSpec::from_root(&a.test, pairing))?;
    let features = match &a.feature_backend {
        Some(id) => Some(EmbeddingFeatures::new(load_backend(id, &a.device)?)),
        None => None,
    };
    let mut backends = MetricBackends {
        perceptual: None,
        features: features
            .as_ref()
            .map(|f| f as &dyn rave::metrics::FeatureBackend),
        fid_reference: None,
    };
    if metrics.contains(&Metric::Fid) && !index.is_paired() {
        if let Some(f) = &features {
            use rave::metrics::FeatureBackend;
            let mut rows = Vec::new();
            for e in &index.well_lit {
                let img = ImageTensor::load(&e.path)?.resize_long_side(a.long_side)?;
                rows.push(f.features(&img)?);
            }
            backends.fid_reference = Some(rows);
        }
    }
    let report = evaluate(
        &Frozen(&model),
        eval_iterator(&index, a.long_side),
        &metrics,
        &backends,
        &device,
        dtype,
    )?;
    let dir = match &a.report_dir {
        Some(d) => d.clone(),
        None => a
            .checkpoint
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from(".")),
    };
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let table = dir.join("metrics.txt");
    let record = dir.join("metrics.record");
    report.write(&table, &record)?;
    let ckpt_bytes = std::fs::read(&a.checkpoint)
        .with_context(|| format!("reading {}", a.checkpoint.display()))?;
    let mut rec = std::fs::read_to_string(&record)?;
    rec.push_str(&format!(
        "checkpoint_sha256 = {}\n",
        rave::ops::sha256_hex(&ckpt_bytes)
    ));
    rec.push_str(&format!("test_fingerprint = {}\n", index.fingerprint));
    rave::fsutil::write_atomic(&record, rec.as_bytes())?;
    print!("{}", report.to_table());
    println!("report: {}", table.display());
    println!("record: {}", record.display());
    Ok(())
}

/// The error chain, skipping causes already spelled out by their parent.
fn describe(err: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in err.chain() {
        let text = cause.to_string();
        if out.contains(&text) {
            continue;
        }
        if !out.is_empty() {
            out.push_str(": ");
        }
        out.push_str(&text);
    }
    out
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<rave::Error>() {
        Some(e) if e.is_degenerate() => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::ComputeResidual(a) => compute_residual_cmd(a),
        Command::Interpret(a) => interpret_cmd(a),
        Command::Train(a) => train_cmd(a),
        Command::Enhance(a) => enhance_cmd(a),
        Command::Evaluate(a) => evaluate_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}
