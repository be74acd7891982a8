use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};
use serde_json::json;

use pel_core::archive::Archive;
use pel_core::data::{generate_synthetic_lt, ingest_cifar100_binary, DatasetBundle, SyntheticLtSpec};
use pel_core::rng::RngStream;
use pel_core::train::{
    analyze, audit_config, audit_preset, evaluate, evaluate_checkpoint, train, write_analysis_files,
    write_report_files, AuditReport, AuditSpec, Checkpoint, Preset, TrainConfig,
};
use pel_core::tte::{validate_expand, TteConfig};
use pel_core::vit::{BackboneParams, ViTConfig};
use pel_core::Error;

#[derive(Parser)]
#[command(name = "pel", version, about = "Parameter-efficient long-tailed fine-tuning of vision transformers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic long-tailed dataset archive.
    SynthData(SynthArgs),
    /// Convert a CIFAR-100 binary file into a long-tailed dataset archive.
    CifarData(CifarArgs),
    /// Write a randomly initialized backbone archive.
    InitBackbone(InitArgs),
    /// Train PEFT modules and a classifier on a frozen backbone.
    Train(TrainArgs),
    /// Evaluate a checkpoint by shot split.
    Eval(EvalArgs),
    /// Count learnable parameters for a preset or an explicit config.
    AuditParams(AuditArgs),
    /// Write analysis payloads for a checkpoint.
    Report(ReportArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    classes: usize,
    #[arg(long)]
    n_max: usize,
    #[arg(long)]
    ratio: f64,
    #[arg(long)]
    image_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 20)]
    test_per_class: usize,
    #[arg(long, default_value_t = 0.08)]
    noise: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CifarArgs {
    /// CIFAR-100 binary training file (train.bin).
    #[arg(long)]
    train: PathBuf,
    /// CIFAR-100 binary test file (test.bin), kept balanced.
    #[arg(long)]
    test: Option<PathBuf>,
    #[arg(long, default_value_t = 100.0)]
    ratio: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct InitArgs {
    #[arg(long, default_value_t = 16)]
    image_size: usize,
    #[arg(long, default_value_t = 4)]
    patch_size: usize,
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long, default_value_t = 32)]
    dim: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long)]
    projection_dim: Option<usize>,
    /// Use the ViT-B/16 architecture instead of the size flags.
    #[arg(long)]
    vit_b16: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    backbone: PathBuf,
    /// Text-feature archive; overrides `classifier.text_features` in the config.
    #[arg(long)]
    text_features: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum TteSwitch {
    On,
    Off,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, conflicts_with = "tte")]
    tte_expand: Option<usize>,
    #[arg(long)]
    tte: Option<TteSwitch>,
}

#[derive(Args)]
#[group(required = true, multiple = false)]
struct AuditArgs {
    #[arg(long)]
    preset: Option<String>,
    /// JSON audit spec: `{"classes": K, "vit": {...}, "peft": {...}, "head_kind": ...}`.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.chain().find_map(|c| c.downcast_ref::<Error>()) {
        Some(Error::Io(_) | Error::Format(_)) => 2,
        Some(_) => 1,
        None if e.chain().any(|c| c.is::<std::io::Error>()) => 2,
        None => 1,
    }
}

fn print_json(v: &serde_json::Value) -> Result<()> {
    let mut out = std::io::stdout().lock();
    match writeln!(out, "{}", serde_json::to_string_pretty(v)?) {
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        r => Ok(r?),
    }
}

/// The error chain, skipping causes already spelled out by their parent.
fn describe(e: &anyhow::Error) -> String {
    let mut msg = String::new();
    for cause in e.chain() {
        let c = cause.to_string();
        if !msg.ends_with(&c) {
            if !msg.is_empty() {
                msg.push_str(": ");
            }
            msg.push_str(&c);
        }
    }
    msg
}

fn synth_data(a: SynthArgs) -> Result<()> {
    let spec = SyntheticLtSpec {
        test_per_class: a.test_per_class,
        noise: a.noise,
        ..SyntheticLtSpec::new(a.classes, a.n_max, a.ratio, a.image_size, a.seed)
    };
    let bundle = generate_synthetic_lt(&spec)?;
    bundle.save(&a.out)?;
    print_json(&json!({
        "out": a.out,
        "classes": bundle.train.classes(),
        "train": bundle.train.len(),
        "test": bundle.test.as_ref().map_or(0, |t| t.len()),
        "train_counts": bundle.train.counts(),
    }))
}

fn cifar_data(a: CifarArgs) -> Result<()> {
    let train = ingest_cifar100_binary(&a.train, a.ratio, a.seed)?;
    let test = a.test.as_ref().map(|p| ingest_cifar100_binary(p, 1.0, a.seed)).transpose()?;
    let bundle = DatasetBundle { train, test };
    bundle.save(&a.out)?;
    print_json(&json!({
        "out": a.out,
        "train": bundle.train.len(),
        "test": bundle.test.as_ref().map_or(0, |t| t.len()),
        "train_counts": bundle.train.counts(),
    }))
}

fn init_backbone(a: InitArgs) -> Result<()> {
    let mut cfg =
        if a.vit_b16 { ViTConfig::vit_b16() } else { ViTConfig::tiny(a.image_size, a.patch_size, a.layers, a.dim, a.heads) };
    cfg.projection_dim = a.projection_dim;
    let params = BackboneParams::<f32>::init_random(&cfg, &mut RngStream::new(a.seed))?;
    params.save_archive(&a.out)?;
    print_json(&json!({ "out": a.out, "config": cfg, "tensors": params.store.iter().count() }))
}

fn load_backbone(path: &Path) -> Result<BackboneParams<f32>> {
    let (b, warnings) = BackboneParams::<f32>::load_archive(path, None)
        .with_context(|| format!("loading backbone {}", path.display()))?;
    for w in warnings {
        warn!("{w}");
    }
    Ok(b)
}

fn load_data(path: &Path) -> Result<DatasetBundle> {
    DatasetBundle::load(path).with_context(|| format!("loading dataset {}", path.display()))
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let ckpt = Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    for w in &ckpt.warnings {
        warn!("{w}");
    }
    Ok(ckpt)
}

fn run_train(a: TrainArgs) -> Result<()> {
    let config = TrainConfig::load(&a.config).with_context(|| format!("reading config {}", a.config.display()))?;
    let text_path = a.text_features.clone().or_else(|| {
        config.classifier.text_features.as_ref().map(|p| a.config.parent().unwrap_or(Path::new(".")).join(p))
    });
    let text = text_path
        .map(|p| Archive::load(&p).with_context(|| format!("loading text features {}", p.display())))
        .transpose()?;
    let data = load_data(&a.data)?;
    let backbone = load_backbone(&a.backbone)?;
    let started = Instant::now();
    let outcome = train(&config, &data, backbone, text.as_ref())?;
    info!("trained in {:.1}s", started.elapsed().as_secs_f64());
    std::fs::create_dir_all(&a.out)?;
    let ckpt = a.out.join("checkpoint.pelt");
    outcome.model.to_checkpoint(&outcome.config, &outcome.report.train_counts)?.save(&ckpt)?;
    write_report_files(&a.out, &outcome.report)?;
    print_json(&json!({
        "checkpoint": ckpt,
        "report": a.out.join("report.json"),
        "test": outcome.report.test,
        "test_tte": outcome.report.test_tte,
    }))
}

fn run_eval(a: EvalArgs) -> Result<()> {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let data = load_data(&a.data)?;
    let tte = match (a.tte, a.tte_expand) {
        (Some(TteSwitch::Off), _) => TteConfig::off(),
        (_, Some(e)) => TteConfig::with_expand(e),
        (Some(TteSwitch::On), None) => TteConfig { enabled: true, ..ckpt.config.tte },
        (None, None) => ckpt.config.tte,
    };
    if tte.enabled {
        if let Some(w) = validate_expand(tte.expand, ckpt.model.backbone.config.patch_size) {
            warn!("{w}");
        }
    }
    let out = evaluate_checkpoint(&ckpt, data.eval_split(), &tte)?;
    print_json(&json!({ "tte": tte, "samples": out.predictions.len(), "accuracy": out.accuracy }))
}

fn run_audit(a: AuditArgs) -> Result<()> {
    let report: AuditReport = match (a.preset, a.config) {
        (Some(p), _) => audit_preset(p.parse::<Preset>()?)?,
        (None, Some(path)) => {
            let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
            let spec: AuditSpec = serde_json::from_str(&text).map_err(Error::from)?;
            audit_config(&spec)?
        }
        (None, None) => unreachable!("clap requires one of --preset or --config"),
    };
    let mut v = serde_json::to_value(&report)?;
    v["peft_millions"] = json!(report.peft_millions());
    print_json(&v)?;
    if !report.agree {
        anyhow::bail!(Error::Contract("closed-form and enumerated counts disagree".into()));
    }
    Ok(())
}

fn run_report(a: ReportArgs) -> Result<()> {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let data = load_data(&a.data)?;
    let test = evaluate(&ckpt.model, data.eval_split(), &ckpt.train_counts, &TteConfig::off())?;
    let analysis = analyze(&ckpt.model, &data.train, &ckpt.train_counts, &test.accuracy)?;
    write_analysis_files(&a.out, &analysis)?;
    std::fs::write(a.out.join("analysis.json"), serde_json::to_string_pretty(&analysis)?)?;
    print_json(&json!({ "out": a.out, "test": test.accuracy, "train_test_gap": analysis.train_test_gap }))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::SynthData(a) => synth_data(a),
        Command::CifarData(a) => cifar_data(a),
        Command::InitBackbone(a) => init_backbone(a),
        Command::Train(a) => run_train(a),
        Command::Eval(a) => run_eval(a),
        Command::AuditParams(a) => run_audit(a),
        Command::Report(a) => run_report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}
