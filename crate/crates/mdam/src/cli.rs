//! Command-line entry point: dataset generation, training, transfer,
//! evaluation, inference and the gradient audit, glued over the library
//! modules. Configuration precedence is flags > config file > defaults, and
//! every artifact records the seed and a hash of the resolved settings that
//! produced it.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::baseline::{train_cascade, DeviceTrainConfig};
use crate::dataio::{
    load_dataset, load_json, save_checkpoint, save_dataset, write_atomic, CheckpointReader,
};
use crate::domain::{LoadingLabel, PowerSpectrum};
use crate::error::{MdamError, Result};
use crate::eval::EvalModel;
use crate::linksim::{generate_preset, topology_by_name, DEFAULT_LAUNCH_POWER_DBM};
use crate::model::{gradient_audit, ModelConfig, GRADIENT_AUDIT_SEED};
use crate::rng::fnv1a;
use crate::training::{log_to_csv, train_base, TrainConfig};
use crate::transfer::{fine_tune, instantiate_target, target_preset};

/// Audit bound for `gradcheck`: analytic and numeric gradients must agree to
/// this relative error.
const GRADCHECK_BOUND: f64 = 1e-4;

/// Everything tunable from one config file. Any subset may appear; missing
/// fields take these defaults. The model's channel count always follows the
/// dataset's grid, so the `model.channels` entry is documentation only.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub fine_tune: TrainConfig,
    pub baseline: DeviceTrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            fine_tune: TrainConfig::fine_tune(),
            baseline: DeviceTrainConfig::default(),
        }
    }
}

pub fn load_run_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => load_json(p),
        None => Ok(RunConfig::default()),
    }
}

/// FNV-1a over a canonical JSON rendering of whatever settings shaped an
/// artifact. Stable across runs, cheap to compare.
pub fn config_hash<T: Serialize>(value: &T) -> Result<String> {
    let bytes = serde_json::to_vec(value)?;
    Ok(format!("{:016x}", fnv1a(&bytes)))
}

#[derive(Parser)]
#[command(
    name = "mdam",
    version,
    about = "Spectral power evolution over cascaded optical components: \
             simulate links, train the sequence model, transfer it to new \
             topologies, and compare against a per-device baseline"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a dataset from a named preset
    Simulate(SimulateArgs),
    /// Train the base model on a lab dataset
    TrainBase(TrainBaseArgs),
    /// Instantiate a trained base on a target topology and fine-tune it
    Transfer(TransferArgs),
    /// Compare checkpoints (and optionally the cascade baseline) on a test set
    Evaluate(EvaluateArgs),
    /// Run one launch spectrum through a checkpoint
    Predict(PredictArgs),
    /// Audit analytic gradients against finite differences
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// Preset name: lab-base, tl-target or cosmos-test
    #[arg(long)]
    preset: String,
    /// Master seed for loading patterns and measurement noise
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output dataset path (JSON lines)
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainBaseArgs {
    /// Training dataset (from `simulate`)
    #[arg(long)]
    data: PathBuf,
    /// Output checkpoint path
    #[arg(long)]
    out: PathBuf,
    /// Optional CSV training log
    #[arg(long)]
    log: Option<PathBuf>,
    /// Config file (JSON); missing fields take defaults
    #[arg(long)]
    config: Option<PathBuf>,
    /// Parameter init seed
    #[arg(long, default_value_t = 0)]
    init_seed: u64,
    #[command(flatten)]
    overrides: TrainOverrides,
    /// Override model.hidden
    #[arg(long)]
    hidden: Option<usize>,
    /// Override model.dropout
    #[arg(long)]
    dropout: Option<f64>,
}

/// Flag-level overrides for the schedule knobs people actually sweep.
#[derive(Args)]
struct TrainOverrides {
    /// Override teacher-forced epoch count
    #[arg(long)]
    tf_epochs: Option<usize>,
    /// Override autoregressive epoch count
    #[arg(long)]
    ar_epochs: Option<usize>,
    /// Override initial learning rate
    #[arg(long)]
    lr0: Option<f64>,
    /// Override batch size
    #[arg(long)]
    batch_size: Option<usize>,
    /// Override shuffle/dropout seed
    #[arg(long)]
    train_seed: Option<u64>,
}

impl TrainOverrides {
    fn apply(&self, cfg: &mut TrainConfig) {
        if let Some(v) = self.tf_epochs {
            cfg.tf_epochs = v;
        }
        if let Some(v) = self.ar_epochs {
            cfg.ar_epochs = v;
        }
        if let Some(v) = self.lr0 {
            cfg.lr0 = v;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = self.train_seed {
            cfg.seed = v;
        }
    }
}

#[derive(Args)]
struct TransferArgs {
    /// Base checkpoint (from `train-base`)
    #[arg(long)]
    base: PathBuf,
    /// Target preset: topo1-cosmos or topo2-cosmos
    #[arg(long)]
    topo: String,
    /// Fine-tuning dataset measured on the target
    #[arg(long)]
    train: PathBuf,
    /// Output checkpoint path
    #[arg(long)]
    out: PathBuf,
    /// Optional CSV training log
    #[arg(long)]
    log: Option<PathBuf>,
    /// Config file (JSON); the `fine_tune` section applies here
    #[arg(long)]
    config: Option<PathBuf>,
    /// Keep the encoder fixed; adapt decoders only
    #[arg(long)]
    freeze_encoder: bool,
    #[command(flatten)]
    overrides: TrainOverrides,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Checkpoint to evaluate, as `name=path` (repeatable). A bare path
    /// takes its file stem as the name.
    #[arg(long = "model", required = true)]
    models: Vec<String>,
    /// Test dataset
    #[arg(long)]
    test: PathBuf,
    /// Also train the per-device cascade baseline on this dataset and
    /// include it in the comparison
    #[arg(long)]
    cascade_train: Option<PathBuf>,
    /// Config file (JSON); the `baseline` section applies here
    #[arg(long)]
    config: Option<PathBuf>,
    /// Write the comparison table as CSV
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Write the full report (with per-component series) as JSON
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    /// Checkpoint to run
    #[arg(long)]
    model: PathBuf,
    /// Launch power per loaded channel, dBm
    #[arg(long, default_value_t = DEFAULT_LAUNCH_POWER_DBM)]
    launch_dbm: f64,
    /// Loaded channels: `all` or index ranges like `0-31,40,64-94`
    #[arg(long, default_value = "all")]
    mask: String,
    /// Loading label recorded in the output: fixed, random or goalpost
    #[arg(long, default_value = "fixed")]
    label: String,
    /// Topology name; defaults to the one recorded in the checkpoint
    #[arg(long)]
    topo: Option<String>,
    /// Output JSON path
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 8)]
    channels: usize,
    #[arg(long, default_value_t = 8)]
    hidden: usize,
    /// Parameter-draw seed for the audit point
    #[arg(long, default_value_t = GRADIENT_AUDIT_SEED)]
    seed: u64,
    /// Central-difference step
    #[arg(long, default_value_t = 1e-5)]
    epsilon: f64,
}

/// Parse a channel mask spec: `all`, or comma-separated indices/ranges.
pub fn parse_mask(spec: &str, channels: usize) -> Result<Vec<bool>> {
    if channels == 0 {
        return Err(MdamError::Config("mask needs at least one channel".into()));
    }
    let spec = spec.trim();
    if spec.eq_ignore_ascii_case("all") {
        return Ok(vec![true; channels]);
    }
    let mut mask = vec![false; channels];
    for part in spec.split(',') {
        let part = part.trim();
        if part.is_empty() {
            return Err(MdamError::Config(format!("empty entry in mask '{spec}'")));
        }
        let (lo, hi) = match part.split_once('-') {
            Some((a, b)) => (parse_index(a, part)?, parse_index(b, part)?),
            None => {
                let i = parse_index(part, part)?;
                (i, i)
            }
        };
        if lo > hi {
            return Err(MdamError::Config(format!(
                "mask range '{part}' runs backwards"
            )));
        }
        if hi >= channels {
            return Err(MdamError::Config(format!(
                "mask index {hi} out of range for {channels} channels"
            )));
        }
        for m in &mut mask[lo..=hi] {
            *m = true;
        }
    }
    Ok(mask)
}

fn parse_index(s: &str, ctx: &str) -> Result<usize> {
    s.trim()
        .parse()
        .map_err(|_| MdamError::Config(format!("bad channel index '{s}' in mask entry '{ctx}'")))
}

fn parse_label(s: &str) -> Result<LoadingLabel> {
    match s {
        "fixed" => Ok(LoadingLabel::Fixed),
        "random" => Ok(LoadingLabel::Random),
        "goalpost" => Ok(LoadingLabel::Goalpost),
        other => Err(MdamError::Config(format!(
            "unknown loading label '{other}' (expected fixed, random or goalpost)"
        ))),
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    Ok(())
}

fn cmd_simulate(args: &SimulateArgs) -> Result<()> {
    let hash = config_hash(&json!({ "preset": args.preset, "seed": args.seed }))?;
    let mut dataset = generate_preset(&args.preset, args.seed)?;
    dataset.config_hash = Some(hash);
    ensure_parent(&args.out)?;
    save_dataset(&args.out, &dataset)?;
    log::info!(
        "wrote {} sequences ({} fixed / {} random / {} goalpost) on '{}' to {}",
        dataset.sequences.len(),
        dataset.counts.fixed,
        dataset.counts.random,
        dataset.counts.goalpost,
        dataset.topology_name,
        args.out.display()
    );
    Ok(())
}

fn cmd_train_base(args: &TrainBaseArgs) -> Result<()> {
    let dataset = load_dataset(&args.data)?;
    let topo = topology_by_name(&dataset.topology_name)?;
    let mut cfg = load_run_config(args.config.as_deref())?;
    args.overrides.apply(&mut cfg.train);
    if let Some(h) = args.hidden {
        cfg.model.hidden = h;
    }
    if let Some(d) = args.dropout {
        cfg.model.dropout = d;
    }
    cfg.model.channels = topo.grid.num_channels;
    let hash = config_hash(&json!({
        "model": cfg.model,
        "train": cfg.train,
        "init_seed": args.init_seed,
    }))?;

    log::info!(
        "training base model on {} sequences from '{}' ({} tf + {} ar epochs)",
        dataset.sequences.len(),
        dataset.topology_name,
        cfg.train.tf_epochs,
        cfg.train.ar_epochs
    );
    let (bundle, records) = train_base(&dataset, &topo, &cfg.model, &cfg.train, args.init_seed)?;
    if let Some(last) = records.last() {
        log::info!("final epoch {} loss {:.6}", last.epoch, last.loss);
    }

    let mut extra = BTreeMap::new();
    extra.insert("topology".into(), json!(topo.name));
    extra.insert("config_hash".into(), json!(hash));
    extra.insert("train_config".into(), json!(cfg.train));
    extra.insert("init_seed".into(), json!(args.init_seed));
    extra.insert("data_seed".into(), json!(dataset.seed));
    if let Some(h) = &dataset.config_hash {
        extra.insert("data_config_hash".into(), json!(h));
    }
    ensure_parent(&args.out)?;
    save_checkpoint(&args.out, &bundle, extra)?;
    if let Some(log_path) = &args.log {
        ensure_parent(log_path)?;
        write_atomic(log_path, log_to_csv(&records).as_bytes())?;
    }
    Ok(())
}

fn cmd_transfer(args: &TransferArgs) -> Result<()> {
    let reader = CheckpointReader::open(&args.base)?;
    let base = reader.load_bundle()?;
    let (topo, _physics) = target_preset(&args.topo)?;
    let dataset = load_dataset(&args.train)?;
    if dataset.topology_name != topo.name {
        return Err(MdamError::Config(format!(
            "fine-tuning data is from '{}' but target preset '{}' is topology '{}'",
            dataset.topology_name, args.topo, topo.name
        )));
    }
    let mut cfg = load_run_config(args.config.as_deref())?;
    args.overrides.apply(&mut cfg.fine_tune);
    let hash = config_hash(&json!({
        "fine_tune": cfg.fine_tune,
        "freeze_encoder": args.freeze_encoder,
        "target": args.topo,
    }))?;

    let mut bundle = instantiate_target(&base, &topo)?;
    log::info!(
        "fine-tuning {} device decoders on {} sequences ({} tf + {} ar epochs{})",
        bundle.decoders.len(),
        dataset.sequences.len(),
        cfg.fine_tune.tf_epochs,
        cfg.fine_tune.ar_epochs,
        if args.freeze_encoder { ", encoder frozen" } else { "" }
    );
    let records = fine_tune(
        &mut bundle,
        &dataset,
        &topo,
        &cfg.fine_tune,
        args.freeze_encoder,
    )?;
    if let Some(last) = records.last() {
        log::info!("final epoch {} loss {:.6}", last.epoch, last.loss);
    }

    let mut extra = BTreeMap::new();
    extra.insert("topology".into(), json!(topo.name));
    extra.insert("config_hash".into(), json!(hash));
    extra.insert("fine_tune_config".into(), json!(cfg.fine_tune));
    extra.insert("data_seed".into(), json!(dataset.seed));
    if let Some(h) = reader.meta().extra.get("config_hash") {
        extra.insert("base_config_hash".into(), h.clone());
    }
    ensure_parent(&args.out)?;
    save_checkpoint(&args.out, &bundle, extra)?;
    if let Some(log_path) = &args.log {
        ensure_parent(log_path)?;
        write_atomic(log_path, log_to_csv(&records).as_bytes())?;
    }
    Ok(())
}

fn parse_model_entry(entry: &str) -> Result<(String, PathBuf)> {
    match entry.split_once('=') {
        Some((name, path)) if !name.is_empty() => Ok((name.to_string(), PathBuf::from(path))),
        Some(_) => Err(MdamError::Config(format!(
            "model entry '{entry}' has an empty name"
        ))),
        None => {
            let path = PathBuf::from(entry);
            let name = path
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or("model")
                .to_string();
            Ok((name, path))
        }
    }
}

fn cmd_evaluate(args: &EvaluateArgs) -> Result<()> {
    let test = load_dataset(&args.test)?;
    let topo = topology_by_name(&test.topology_name)?;
    let cfg = load_run_config(args.config.as_deref())?;

    let mut bundles = Vec::new();
    for entry in &args.models {
        let (name, path) = parse_model_entry(entry)?;
        let bundle = CheckpointReader::open(&path)?.load_bundle()?;
        bundles.push((name, bundle));
    }
    let cascade = match &args.cascade_train {
        Some(path) => {
            let train = load_dataset(path)?;
            if train.topology_name != test.topology_name {
                return Err(MdamError::Config(format!(
                    "cascade training data is from '{}', test data from '{}'",
                    train.topology_name, test.topology_name
                )));
            }
            log::info!(
                "training cascade baseline: {} devices x {} epochs on {} sequences",
                topo.len(),
                cfg.baseline.epochs,
                train.sequences.len()
            );
            let (model, _logs) = train_cascade(&train, &topo, &cfg.baseline)?;
            Some(model)
        }
        None => None,
    };

    let mut entries: Vec<(String, EvalModel)> = bundles
        .iter()
        .map(|(name, b)| (name.clone(), EvalModel::Sequence(b)))
        .collect();
    if let Some(c) = &cascade {
        entries.push(("cascade".to_string(), EvalModel::Cascade(c)));
    }
    let report = crate::eval::compare_models(&entries, &test, &topo)?;

    let baseline_cfg = cascade.as_ref().map(|_| &cfg.baseline);
    let hash = config_hash(&json!({
        "baseline": baseline_cfg,
        "models": args.models,
    }))?;
    print!("{}", report.to_csv());
    if let Some(csv_path) = &args.csv {
        let body = format!(
            "# config_hash={hash} test_seed={}\n{}",
            test.seed,
            report.to_csv()
        );
        ensure_parent(csv_path)?;
        write_atomic(csv_path, body.as_bytes())?;
    }
    if let Some(json_path) = &args.json {
        let doc = json!({
            "config_hash": hash,
            "test_seed": test.seed,
            "test_config_hash": test.config_hash,
            "report": report,
        });
        ensure_parent(json_path)?;
        write_atomic(json_path, serde_json::to_string_pretty(&doc)?.as_bytes())?;
    }
    Ok(())
}

fn cmd_predict(args: &PredictArgs) -> Result<()> {
    let reader = CheckpointReader::open(&args.model)?;
    let bundle = reader.load_bundle()?;
    let topo_name = match &args.topo {
        Some(name) => name.clone(),
        None => reader
            .meta()
            .extra
            .get("topology")
            .and_then(|v| v.as_str())
            .map(str::to_string)
            .ok_or_else(|| {
                MdamError::Config(
                    "checkpoint does not record a topology; pass --topo".into(),
                )
            })?,
    };
    let topo = topology_by_name(&topo_name)?;
    let label = parse_label(&args.label)?;
    let mask = parse_mask(&args.mask, topo.grid.num_channels)?;
    let launch = PowerSpectrum::flat(args.launch_dbm, &mask);
    let seq = bundle.predict_sequence(&launch, &topo, label)?;
    let n_spectra = seq.spectra.len();
    let doc = json!({
        "topology": topo.name,
        "launch_dbm": args.launch_dbm,
        "mask": args.mask,
        "model_config_hash": reader.meta().extra.get("config_hash"),
        "sequence": seq,
    });
    ensure_parent(&args.out)?;
    write_atomic(&args.out, serde_json::to_string_pretty(&doc)?.as_bytes())?;
    log::info!(
        "predicted {n_spectra} spectra on '{}' to {}",
        topo.name,
        args.out.display()
    );
    Ok(())
}

fn cmd_gradcheck(args: &GradcheckArgs) -> Result<()> {
    let t0 = std::time::Instant::now();
    let report = gradient_audit(args.channels, args.hidden, args.seed, args.epsilon)?;
    let elapsed = t0.elapsed();
    println!(
        "max rel err {:.3e} at param {} element {} (analytic {:.6e}, numeric {:.6e}) in {:.2?}",
        report.max_rel_err,
        report.worst.0,
        report.worst.1,
        report.analytic,
        report.numeric,
        elapsed
    );
    if report.max_rel_err < GRADCHECK_BOUND {
        println!("gradcheck PASS (< {GRADCHECK_BOUND:e})");
        Ok(())
    } else {
        Err(MdamError::NonFinite(format!(
            "gradient audit failed: max rel err {:.3e} >= {GRADCHECK_BOUND:e}",
            report.max_rel_err
        )))
    }
}

fn run(cli: Cli) -> Result<()> {
    match &cli.cmd {
        Cmd::Simulate(a) => cmd_simulate(a),
        Cmd::TrainBase(a) => cmd_train_base(a),
        Cmd::Transfer(a) => cmd_transfer(a),
        Cmd::Evaluate(a) => cmd_evaluate(a),
        Cmd::Predict(a) => cmd_predict(a),
        Cmd::Gradcheck(a) => cmd_gradcheck(a),
    }
}

/// Parse arguments, dispatch, and map failures to exit codes: 0 ok, 2 config
/// error, 3 data error, 4 numeric divergence. Errors print one JSON object to
/// stderr. Log verbosity comes from the `MDAM_LOG` env var.
pub fn main_entry() -> i32 {
    let _ = env_logger::Builder::from_env(
        env_logger::Env::default().filter_or("MDAM_LOG", "info"),
    )
    .format_timestamp_millis()
    .try_init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // clap prints its own usage/help text; exit code 0 for
            // --help/--version, 2 for bad arguments (a config error)
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            let code = e.exit_code();
            let payload = json!({
                "error": { "kind": e.kind(), "message": e.to_string(), "exit_code": code }
            });
            eprintln!("{payload}");
            code
        }
    }
}
