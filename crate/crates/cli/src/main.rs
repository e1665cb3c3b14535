//! `calclust`: generate mixtures, initialize, train, evaluate and plot.
//!
//! Config precedence: command-line flags > `CDC_SEED` (seed only) > config
//! file > built-in defaults. Exit codes: 0 success, 1 runtime failure,
//! 2 usage error.

mod report;
mod svg;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use calclust_core::checkpoint::{read_checkpoint, write_checkpoint};
use calclust_core::dataio::{
    check_companion, gen_mixture, read_csv, read_features, read_labels, write_features, write_labels, MixtureSpec,
};
use calclust_core::metrics::evaluate;
use calclust_core::trainer::{predict_with, resume, Checkpoint, EpochLog, HeadKind, TrainConfig, CONFIG_KEYS};
use calclust_core::Matrix;
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use serde::Serialize;

use report::ReportTable;

const SEED_ENV: &str = "CDC_SEED";

#[derive(Parser, Debug)]
#[command(
    name = "calclust",
    version,
    about = "Calibrated deep clustering on precomputed features"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Sample a Gaussian mixture and write CDCF features and CDCL labels.
    Gen(GenArgs),
    /// Build an initialized checkpoint and an initialization report.
    Init(InitArgs),
    /// Train a checkpoint and write the per-epoch log.
    Train(TrainArgs),
    /// Evaluate a checkpoint against labels and write the report CSV.
    Eval(EvalArgs),
    /// Draw the reliability diagram and risk-coverage curve of a report CSV.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
struct GenArgs {
    #[arg(long)]
    n: usize,
    #[arg(long)]
    d: usize,
    #[arg(long)]
    c: usize,
    #[arg(long)]
    separation: f64,
    /// Falls back to CDC_SEED, then 0.
    #[arg(long)]
    seed: Option<u64>,
    /// Feature file (CDCF).
    #[arg(long)]
    out: PathBuf,
    /// Label file (CDCL); defaults to the feature path with a `.labels` extension.
    #[arg(long)]
    labels: Option<PathBuf>,
}

/// Training configuration sources, lowest precedence first.
#[derive(Args, Debug, Default)]
struct ConfigArgs {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Set any config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    sub_batch: Option<usize>,
    #[arg(long)]
    mini_clusters: Option<usize>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long, value_parser = ["identity", "adapter"])]
    encoder: Option<String>,
    #[arg(long)]
    lr_encoder: Option<f64>,
    #[arg(long)]
    lr_head: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    ece_bins: Option<usize>,
    /// Train and predict with the clustering head alone.
    #[arg(long)]
    single_head: bool,
    /// Random head initialization instead of prototypes.
    #[arg(long)]
    no_init: bool,
    /// Replace dynamic selection by a fixed confidence threshold.
    #[arg(long, value_name = "TAU")]
    fixed_threshold: Option<f64>,
    /// Let the calibration loss update the encoder.
    #[arg(long)]
    no_stop_gradient: bool,
}

#[derive(Args, Debug)]
struct DataArgs {
    /// CDCF file, or CSV with a `d0,...[,label]` header.
    #[arg(long)]
    features: PathBuf,
    /// CDCL file.
    #[arg(long)]
    labels: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct InitArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    config: ConfigArgs,
    /// Checkpoint (CDCK).
    #[arg(long)]
    out: PathBuf,
    /// Initialization report JSON; defaults to `<out>.init.json`.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    config: ConfigArgs,
    /// Continue from this checkpoint, using its stored config.
    #[arg(long = "from")]
    from: Option<PathBuf>,
    /// Checkpoint (CDCK).
    #[arg(long)]
    out: PathBuf,
    /// Per-epoch CSV log; defaults to `<out>.log.csv`.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum HeadArg {
    Clustering,
    Calibration,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    /// Head to evaluate; defaults to the configured prediction head.
    #[arg(long, value_enum)]
    head: Option<HeadArg>,
    /// Report CSV.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// Report CSV written by `eval`.
    #[arg(long)]
    input: PathBuf,
    /// Defaults to `<input>.reliability.svg`.
    #[arg(long)]
    reliability: Option<PathBuf>,
    /// Defaults to `<input>.risk-coverage.svg`.
    #[arg(long)]
    risk_coverage: Option<PathBuf>,
}

/// Bad arguments discovered after parsing; exits with status 2.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
struct UsageError(String);

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// Reproducibility record written next to every artifact.
#[derive(Debug, Default, Serialize)]
struct RunManifest {
    command: String,
    config: BTreeMap<String, String>,
    inputs: BTreeMap<String, PathBuf>,
    outputs: BTreeMap<String, PathBuf>,
    seed: Option<u64>,
    started_unix_ms: u128,
    finished_unix_ms: u128,
    exit_status: i32,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

impl RunManifest {
    fn record_config(&mut self, cfg: &TrainConfig) {
        self.seed = Some(cfg.seed);
        self.config = CONFIG_KEYS
            .iter()
            .map(|k| (k.to_string(), cfg.get(k).unwrap_or_default()))
            .collect();
    }

    /// Path next to the primary output.
    fn path(&self) -> Option<PathBuf> {
        self.outputs.values().next().map(|p| with_suffix(p, ".manifest.json"))
    }
}

fn now_ms() -> u128 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis())
        .unwrap_or(0)
}

fn with_suffix(p: &Path, suffix: &str) -> PathBuf {
    let mut s = p.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn env_seed() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| usage(format!("{SEED_ENV} must be an unsigned integer, got {v:?}"))),
        Err(_) => Ok(None),
    }
}

impl ConfigArgs {
    fn is_empty(&self) -> bool {
        self.config.is_none()
            && self.set.is_empty()
            && self.epochs.is_none()
            && self.batch_size.is_none()
            && self.sub_batch.is_none()
            && self.mini_clusters.is_none()
            && self.classes.is_none()
            && self.hidden.is_none()
            && self.encoder.is_none()
            && self.lr_encoder.is_none()
            && self.lr_head.is_none()
            && self.seed.is_none()
            && self.ece_bins.is_none()
            && !self.single_head
            && !self.no_init
            && self.fixed_threshold.is_none()
            && !self.no_stop_gradient
    }

    fn resolve(&self) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::default();
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
            cfg.apply_text(&text)
                .map_err(|e| usage(format!("{}: {e}", path.display())))?;
        }
        if let Some(seed) = env_seed()? {
            cfg.seed = seed;
        }
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| usage(format!("--set expects KEY=VALUE, got {kv:?}")))?;
            cfg.set(k.trim(), v).map_err(|e| usage(e.to_string()))?;
        }
        let flags: [(&str, Option<String>); 14] = [
            ("epochs", self.epochs.map(|v| v.to_string())),
            ("batch_size", self.batch_size.map(|v| v.to_string())),
            ("sub_batch", self.sub_batch.map(|v| v.to_string())),
            ("mini_clusters", self.mini_clusters.map(|v| v.to_string())),
            ("classes", self.classes.map(|v| v.to_string())),
            ("hidden", self.hidden.map(|v| v.to_string())),
            ("encoder", self.encoder.clone()),
            ("lr_encoder", self.lr_encoder.map(|v| format!("{v:?}"))),
            ("lr_head", self.lr_head.map(|v| format!("{v:?}"))),
            ("seed", self.seed.map(|v| v.to_string())),
            ("ece_bins", self.ece_bins.map(|v| v.to_string())),
            ("fixed_threshold", self.fixed_threshold.map(|v| format!("{v:?}"))),
            ("single_head", self.single_head.then(|| "true".into())),
            ("no_init", self.no_init.then(|| "true".into())),
        ];
        for (k, v) in flags {
            if let Some(v) = v {
                cfg.set(k, &v).map_err(|e| usage(e.to_string()))?;
            }
        }
        if self.no_stop_gradient {
            cfg.no_stop_gradient = true;
        }
        cfg.validate().map_err(|e| usage(e.to_string()))?;
        Ok(cfg)
    }
}

fn load_data(args: &DataArgs, m: &mut RunManifest) -> Result<(Matrix, Option<Vec<usize>>)> {
    m.inputs.insert("features".into(), args.features.clone());
    let is_csv = args.features.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"));
    let (x, csv_labels) = if is_csv {
        read_csv(&args.features)?
    } else {
        (read_features(&args.features)?, None)
    };
    let labels = match &args.labels {
        Some(p) => {
            m.inputs.insert("labels".into(), p.clone());
            Some(read_labels(p)?)
        }
        None => csv_labels,
    };
    if let Some(l) = &labels {
        check_companion(&x, l)?;
    }
    Ok((x, labels))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    std::fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

fn cmd_gen(a: &GenArgs, m: &mut RunManifest) -> Result<()> {
    let seed = match a.seed {
        Some(s) => s,
        None => env_seed()?.unwrap_or(0),
    };
    let spec = MixtureSpec {
        n: a.n,
        d: a.d,
        c: a.c,
        separation: a.separation,
        seed,
    };
    spec.validate().map_err(|e| usage(e.to_string()))?;
    let labels_path = a.labels.clone().unwrap_or_else(|| a.out.with_extension("labels"));
    m.seed = Some(seed);
    m.config = [
        ("n", spec.n.to_string()),
        ("d", spec.d.to_string()),
        ("c", spec.c.to_string()),
        ("separation", format!("{:?}", spec.separation)),
        ("seed", seed.to_string()),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect();
    m.outputs.insert("features".into(), a.out.clone());
    m.outputs.insert("labels".into(), labels_path.clone());
    let mix = gen_mixture(&spec)?;
    write_features(&a.out, &mix.features)?;
    write_labels(&labels_path, &mix.labels)?;
    info!("wrote {} samples to {}", spec.n, a.out.display());
    Ok(())
}

#[derive(Serialize)]
struct InitSummary {
    /// `None` for random initialization.
    alignment_rate: Option<f64>,
    orthogonalized: [bool; 2],
    /// Present when labels were supplied.
    report: Option<calclust_core::protoinit::InitReport>,
}

fn cmd_init(a: &InitArgs, m: &mut RunManifest) -> Result<()> {
    let cfg = a.config.resolve()?;
    m.record_config(&cfg);
    let report_path = a.report.clone().unwrap_or_else(|| with_suffix(&a.out, ".init.json"));
    m.outputs.insert("checkpoint".into(), a.out.clone());
    m.outputs.insert("init_report".into(), report_path.clone());
    let (x, labels) = load_data(&a.data, m)?;
    let out = Checkpoint::initialize(&x, labels.as_deref(), &cfg)?;
    write_checkpoint(&a.out, &out.checkpoint)?;
    if let Some(r) = &out.report {
        info!(
            "k-means acc {:.4}, head acc after init {:.4}",
            r.kmeans_acc_features, r.head_acc_post_init
        );
    }
    write_json(
        &report_path,
        &InitSummary {
            alignment_rate: out.alignment_rate,
            orthogonalized: out.orthogonalized,
            report: out.report,
        },
    )
}

fn write_log(path: &Path, log: &[EpochLog]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("cannot create {}", path.display()))?;
    let mut header: Vec<String> = ["epoch", "mean_clu_loss", "mean_cal_loss", "selected_fraction"]
        .map(String::from)
        .into();
    for head in ["clu", "cal"] {
        for metric in ["acc", "ece", "nmi", "ari"] {
            header.push(format!("{head}_{metric}"));
        }
    }
    w.write_record(&header)?;
    for e in log {
        let mut row = vec![
            e.epoch.to_string(),
            format!("{}", e.mean_clu_loss),
            format!("{}", e.mean_cal_loss),
            format!("{}", e.selected_fraction),
        ];
        for s in [e.clu, e.cal] {
            match s {
                Some(s) => row.extend([s.acc, s.ece, s.nmi, s.ari].iter().map(|v| format!("{v}"))),
                None => row.extend(std::iter::repeat_n(String::new(), 4)),
            }
        }
        w.write_record(&row)?;
    }
    w.flush().with_context(|| format!("cannot write {}", path.display()))?;
    Ok(())
}

fn cmd_train(a: &TrainArgs, m: &mut RunManifest) -> Result<()> {
    let start = match &a.from {
        Some(p) => {
            if !a.config.is_empty() {
                return Err(usage(
                    "--from uses the checkpoint's stored config; drop the config flags",
                ));
            }
            m.inputs.insert("checkpoint".into(), p.clone());
            Some(read_checkpoint(p)?)
        }
        None => None,
    };
    let cfg = match &start {
        Some(c) => c.config.clone(),
        None => a.config.resolve()?,
    };
    m.record_config(&cfg);
    let log_path = a.log.clone().unwrap_or_else(|| with_suffix(&a.out, ".log.csv"));
    m.outputs.insert("checkpoint".into(), a.out.clone());
    m.outputs.insert("log".into(), log_path.clone());
    let (x, labels) = load_data(&a.data, m)?;
    let ckpt = match start {
        Some(c) => c,
        None => Checkpoint::initialize(&x, labels.as_deref(), &cfg)?.checkpoint,
    };
    let out = resume(ckpt, &x, labels.as_deref())?;
    write_checkpoint(&a.out, &out.checkpoint)?;
    write_log(&log_path, &out.log)
}

fn cmd_eval(a: &EvalArgs, m: &mut RunManifest) -> Result<()> {
    m.inputs.insert("checkpoint".into(), a.checkpoint.clone());
    m.outputs.insert("report".into(), a.out.clone());
    let ckpt = read_checkpoint(&a.checkpoint)?;
    m.record_config(&ckpt.config);
    let (x, labels) = load_data(&a.data, m)?;
    let labels = labels.ok_or_else(|| usage("eval needs labels: pass --labels or a CSV with a label column"))?;
    let kind = match a.head {
        Some(HeadArg::Clustering) => HeadKind::Clustering,
        Some(HeadArg::Calibration) => HeadKind::Calibration,
        None => ckpt.config.final_head(),
    };
    m.config.insert("eval_head".into(), format!("{kind:?}"));
    let probs = predict_with(&ckpt, &x, kind)?;
    let r = evaluate(&probs, &labels, ckpt.config.ece_bins)?;
    info!("acc {:.4}, ece {:.5}, auroc {:.4}", r.acc, r.ece, r.auroc);
    report::write(&a.out, &ReportTable::from_report(&r))
}

fn cmd_report(a: &ReportArgs, m: &mut RunManifest) -> Result<()> {
    let rel = a
        .reliability
        .clone()
        .unwrap_or_else(|| with_suffix(&a.input, ".reliability.svg"));
    let rc = a
        .risk_coverage
        .clone()
        .unwrap_or_else(|| with_suffix(&a.input, ".risk-coverage.svg"));
    m.inputs.insert("report".into(), a.input.clone());
    m.outputs.insert("reliability".into(), rel.clone());
    m.outputs.insert("risk_coverage".into(), rc.clone());
    let t = report::read(&a.input)?;
    std::fs::write(&rel, svg::reliability_diagram(&t)).with_context(|| format!("cannot write {}", rel.display()))?;
    std::fs::write(&rc, svg::risk_coverage(&t)).with_context(|| format!("cannot write {}", rc.display()))?;
    Ok(())
}

fn run(cli: &Cli) -> (RunManifest, Result<()>) {
    let mut m = RunManifest {
        started_unix_ms: now_ms(),
        ..Default::default()
    };
    let result = match &cli.command {
        Command::Gen(a) => {
            m.command = "gen".into();
            cmd_gen(a, &mut m)
        }
        Command::Init(a) => {
            m.command = "init".into();
            cmd_init(a, &mut m)
        }
        Command::Train(a) => {
            m.command = "train".into();
            cmd_train(a, &mut m)
        }
        Command::Eval(a) => {
            m.command = "eval".into();
            cmd_eval(a, &mut m)
        }
        Command::Report(a) => {
            m.command = "report".into();
            cmd_report(a, &mut m)
        }
    };
    (m, result)
}

fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<UsageError>().is_some() {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let (mut manifest, result) = run(&cli);
    let code = match &result {
        Ok(()) => 0,
        Err(e) => exit_code(e),
    };
    if let Err(e) = &result {
        eprintln!("error: {e:#}");
        if code == 2 {
            eprintln!("run `calclust --help` for usage");
            return ExitCode::from(code);
        }
        manifest.error = Some(format!("{e:#}"));
    }
    manifest.finished_unix_ms = now_ms();
    manifest.exit_status = code as i32;
    if let Some(path) = manifest.path() {
        if let Err(e) = write_json(&path, &manifest) {
            eprintln!("error: {e:#}");
            return ExitCode::from(1);
        }
    }
    ExitCode::from(code)
}
