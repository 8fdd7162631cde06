//! Command-line front end.
//!
//! Exit codes: 0 success, 2 configuration or validation error, 3 I/O or
//! checkpoint-format error, 4 training divergence.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::backbone::{load_pretrained_auto, BackboneHandle, BackboneRegistry, Res12Config};
use crate::checkpoint::load_checkpoint;
use crate::config::RunConfig;
use crate::degradations::{
    load_manifest, scenes, synth_dataset, DegradationKind, DegradationSpec, Pair, MANIFEST_FILE,
};
use crate::error::{Error, Result};
use crate::evaluation::{
    group_pairs, run_protocol, EvalReport, MetricSpace, ModelRestorer, Protocol,
};
use crate::image_io::{load_image, save_png};
use crate::inference::{restore, Tiling};
use crate::losses::ExtractorKind;
use crate::model::{ReprogramModel, WaveComponents};
use crate::nn::InitMethod;
use crate::training::{train, train_backbone, FitOptions};

pub const MODEL_FILE: &str = "model.wrpg";
pub const BACKBONE_FILE: &str = "backbone.wrpg";
pub const LOSS_FILE: &str = "loss.csv";

#[derive(Debug, Parser)]
#[command(
    name = "wavereprog",
    version,
    about = "Reprogram a frozen restoration network with wave transforms"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render procedural clean scenes.
    Scenes(ScenesArgs),
    /// Degrade clean images and write a pair manifest.
    Synth(SynthArgs),
    /// Train a backbone directly on restoration pairs.
    Pretrain(TrainArgs),
    /// Train the transform modules around a backbone.
    Train(TrainArgs),
    /// Evaluate checkpoints on every degradation kind.
    Eval(EvalArgs),
    /// Restore images of any size.
    Restore(RestoreArgs),
    /// Print the default configuration file.
    Config,
}

#[derive(Debug, Args)]
pub struct ScenesArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub count: usize,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Directory of clean images.
    #[arg(long)]
    pub clean: PathBuf,
    /// Comma-separated specs, e.g. `noise:25,blur:5,lr:2,haze,rain`.
    #[arg(long, value_delimiter = ',', required = true)]
    pub kinds: Vec<String>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// TOML run configuration; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Training manifest (repeatable).
    #[arg(long)]
    pub manifest: Vec<PathBuf>,
    /// Training kinds; defaults to the kinds present in the manifests.
    #[arg(long, value_delimiter = ',')]
    pub kinds: Vec<String>,
    /// Evaluation protocol the run belongs to (1: one kind, 2: two kinds).
    #[arg(long)]
    pub protocol: Option<u8>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub patch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub steps_per_epoch: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Keep the backbone fixed (default).
    #[arg(long, conflicts_with = "finetune")]
    pub frozen: bool,
    /// Update the backbone together with the transforms.
    #[arg(long)]
    pub finetune: bool,
    /// Backbone initializer when no trained backbone is given.
    #[arg(long)]
    pub init: Option<InitMethod>,
    /// Trained backbone checkpoint.
    #[arg(long)]
    pub backbone: Option<PathBuf>,
    /// Backbone width preset: `default` or `tiny`.
    #[arg(long)]
    pub backbone_size: Option<String>,
    #[arg(long)]
    pub n_mlp: Option<usize>,
    #[arg(long)]
    pub wave_components: Option<WaveComponents>,
    #[arg(long)]
    pub lambda_p: Option<f64>,
    #[arg(long)]
    pub extractor: Option<String>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Checkpoint to evaluate (repeatable); each becomes one row.
    #[arg(long, required = true)]
    pub checkpoint: Vec<PathBuf>,
    /// Test manifest (repeatable); together they must cover all five kinds.
    #[arg(long)]
    pub test_manifest: Vec<PathBuf>,
    #[arg(long)]
    pub protocol: Option<u8>,
    #[arg(long)]
    pub tiling: Option<Tiling>,
    #[arg(long)]
    pub metric_space: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RestoreArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, required = true, num_args = 1..)]
    pub input: Vec<PathBuf>,
    /// Output PNG (single input) or directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "on")]
    pub tiling: Tiling,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Scenes(a) => cmd_scenes(&a),
        Command::Synth(a) => cmd_synth(&a).map(|_| ()),
        Command::Pretrain(a) => cmd_pretrain(&a).map(|_| ()),
        Command::Train(a) => cmd_train(&a).map(|_| ()),
        Command::Eval(a) => cmd_eval(&a).map(|_| ()),
        Command::Restore(a) => cmd_restore(&a).map(|_| ()),
        Command::Config => {
            print!("{}", RunConfig::default().to_toml());
            Ok(())
        }
    }
}

pub fn cmd_scenes(a: &ScenesArgs) -> Result<()> {
    let files = scenes::write_scenes(&a.out, a.count, a.size, a.seed)?;
    println!("wrote {} scenes to {}", files.len(), a.out.display());
    Ok(())
}

pub fn cmd_synth(a: &SynthArgs) -> Result<PathBuf> {
    let specs = a
        .kinds
        .iter()
        .map(|k| DegradationSpec::parse_short(k, 0))
        .collect::<Result<Vec<_>>>()?;
    let m = synth_dataset(&a.clean, &specs, &a.out, a.seed)?;
    let path = a.out.join(MANIFEST_FILE);
    println!("{}", path.display());
    for (k, v) in m.by_kind() {
        println!("  {k}: {} pairs", v.len());
    }
    Ok(path)
}

fn parse_kinds(list: &[String]) -> Result<Vec<DegradationKind>> {
    list.iter().map(|s| s.parse()).collect()
}

fn resolve_train_config(a: &TrainArgs) -> Result<RunConfig> {
    let mut c = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if !a.manifest.is_empty() {
        c.data.train_manifests = a.manifest.clone();
    }
    if !a.kinds.is_empty() {
        c.train.train_kinds = parse_kinds(&a.kinds)?;
    }
    if a.protocol.is_some() {
        c.eval.protocol = a.protocol;
    }
    macro_rules! set {
        ($flag:expr => $field:expr) => {
            if let Some(v) = $flag.clone() {
                $field = v;
            }
        };
    }
    set!(a.epochs => c.train.epochs);
    set!(a.batch_size => c.train.batch_size);
    set!(a.patch => c.train.patch);
    set!(a.lr => c.train.lr0);
    set!(a.seed => c.train.seed);
    set!(a.init => c.backbone.init);
    set!(a.n_mlp => c.model.output.n_mlp);
    set!(a.wave_components => c.model.wave_components);
    set!(a.lambda_p => c.loss.lambda_p);
    if a.steps_per_epoch.is_some() {
        c.train.steps_per_epoch = a.steps_per_epoch;
    }
    if a.finetune {
        c.train.frozen_backbone = false;
    }
    if a.frozen {
        c.train.frozen_backbone = true;
    }
    if a.backbone.is_some() {
        c.backbone.pretrained = a.backbone.clone();
    }
    if let Some(s) = &a.backbone_size {
        c.backbone.res12 = match s.as_str() {
            "default" => Res12Config::default(),
            "tiny" => Res12Config::tiny(),
            _ => {
                return Err(Error::Config(format!(
                    "backbone size must be `default` or `tiny`, got `{s}`"
                )))
            }
        };
    }
    if let Some(e) = &a.extractor {
        c.loss.extractor_kind = match e.as_str() {
            "fixed-random" => ExtractorKind::FixedRandom,
            "pretrained-vgg16" => ExtractorKind::PretrainedVgg16,
            _ => {
                return Err(Error::Config(format!(
                    "extractor must be `fixed-random` or `pretrained-vgg16`, got `{e}`"
                )))
            }
        };
    }
    c.resolve()
}

fn load_training_pairs(c: &mut RunConfig) -> Result<Vec<Pair>> {
    if c.data.train_manifests.is_empty() {
        return Err(Error::Config("no training manifest given".into()));
    }
    let mut pairs = Vec::new();
    for m in &c.data.train_manifests {
        pairs.extend(load_manifest(m)?.load_pairs()?);
    }
    if pairs.is_empty() {
        return Err(Error::Config("training manifests contain no pairs".into()));
    }
    if c.train.train_kinds.is_empty() {
        let mut kinds: Vec<DegradationKind> = pairs.iter().map(|p| p.kind).collect();
        kinds.sort();
        kinds.dedup();
        c.train.train_kinds = kinds;
    } else {
        let kinds = &c.train.train_kinds;
        pairs.retain(|p| kinds.contains(&p.kind));
        let missing: Vec<String> = kinds
            .iter()
            .filter(|k| !pairs.iter().any(|p| p.kind == **k))
            .map(|k| format!("no training pairs of kind {k}"))
            .collect();
        if !missing.is_empty() {
            return Err(Error::Validation(missing));
        }
    }
    if let Some(p) = c.eval.protocol {
        Protocol::from_number(p)?.validate_kinds(&c.train.train_kinds)?;
    }
    Ok(pairs)
}

fn build_backbone(c: &RunConfig) -> Result<BackboneHandle<f32>> {
    match &c.backbone.pretrained {
        Some(p) => load_pretrained_auto(p),
        None => {
            let cfg = serde_json::to_value(&c.backbone.res12).expect("config serializes");
            BackboneRegistry::<f32>::default().build(
                &c.backbone.architecture,
                &cfg,
                c.backbone.init,
                c.train.seed,
            )
        }
    }
}

pub fn cmd_train(a: &TrainArgs) -> Result<PathBuf> {
    let mut c = resolve_train_config(a)?;
    let pairs = load_training_pairs(&mut c)?;
    let backbone = build_backbone(&c)?;
    let mut model = ReprogramModel::new(&c.model, backbone, c.train.seed)?;
    c.write_resolved(&a.out)?;
    let ckpt = a.out.join(MODEL_FILE);
    let opts = FitOptions {
        checkpoint: Some(ckpt.clone()),
        loss_csv: Some(a.out.join(LOSS_FILE)),
        run_config: Some(c.to_json()),
    };
    train(&mut model, &pairs, &c.train, &c.loss, &opts)?;
    println!("{}", ckpt.display());
    Ok(ckpt)
}

pub fn cmd_pretrain(a: &TrainArgs) -> Result<PathBuf> {
    let mut c = resolve_train_config(a)?;
    c.train.frozen_backbone = false;
    let pairs = load_training_pairs(&mut c)?;
    let mut backbone = build_backbone(&c)?;
    c.write_resolved(&a.out)?;
    let ckpt = a.out.join(BACKBONE_FILE);
    let opts = FitOptions {
        checkpoint: Some(ckpt.clone()),
        loss_csv: Some(a.out.join(LOSS_FILE)),
        run_config: Some(c.to_json()),
    };
    train_backbone(&mut backbone, &pairs, &c.train, &c.loss, &opts)?;
    println!("{}", ckpt.display());
    Ok(ckpt)
}

fn parse_metric_space(s: &str) -> Result<MetricSpace> {
    match s {
        "rgb" => Ok(MetricSpace::Rgb),
        "y" => Ok(MetricSpace::Y),
        _ => Err(Error::Config(format!(
            "metric space must be `rgb` or `y`, got `{s}`"
        ))),
    }
}

/// Returns the paths of the CSV, text and JSON-lines reports.
pub fn cmd_eval(a: &EvalArgs) -> Result<Vec<PathBuf>> {
    let mut c = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if !a.test_manifest.is_empty() {
        c.data.test_manifests = a.test_manifest.clone();
    }
    if a.protocol.is_some() {
        c.eval.protocol = a.protocol;
    }
    if let Some(t) = a.tiling {
        c.eval.tiling = t;
    }
    if let Some(m) = &a.metric_space {
        c.eval.metric_space = parse_metric_space(m)?;
    }
    let c = c.resolve()?;
    if c.data.test_manifests.is_empty() {
        return Err(Error::Config("no test manifest given".into()));
    }
    let mut pairs = Vec::new();
    for m in &c.data.test_manifests {
        pairs.extend(load_manifest(m)?.load_pairs()?);
    }
    let tests = group_pairs(pairs);
    let missing: Vec<String> = DegradationKind::ALL
        .iter()
        .filter(|k| !tests.contains_key(k))
        .map(|k| format!("test manifests have no {k} pairs"))
        .collect();
    if !missing.is_empty() {
        return Err(Error::Validation(missing));
    }

    let mut rows = Vec::new();
    let mut protocol = None;
    for path in &a.checkpoint {
        let ckpt = load_checkpoint(path)?;
        let model = ReprogramModel::from_checkpoint(&ckpt)?;
        let kinds = parse_kinds(&ckpt.meta.train_kinds)?;
        let p = match c.eval.protocol {
            Some(n) => Protocol::from_number(n)?,
            None => Protocol::from_number(kinds.len() as u8)?,
        };
        if protocol.is_some_and(|q| q != p) {
            return Err(Error::Validation(vec![
                "checkpoints belong to different protocols".into(),
            ]));
        }
        protocol = Some(p);
        let restorer = ModelRestorer {
            model: &model,
            tiling: c.eval.tiling,
        };
        let mut row = run_protocol(p, &kinds, &restorer, &tests, c.eval.metric_space)?;
        row.checkpoint = Some(path.display().to_string());
        rows.push(row);
    }
    let report = EvalReport::new(
        protocol.expect("at least one checkpoint"),
        c.eval.metric_space,
        &tests,
        rows,
    );
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let mut written = Vec::new();
    for (name, body) in [
        ("report.csv", report.to_csv()),
        ("report.txt", report.to_table()),
        ("report.jsonl", report.to_jsonl()),
        (
            "report.json",
            serde_json::to_string_pretty(&report).expect("report serializes"),
        ),
    ] {
        let p = a.out.join(name);
        fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
        written.push(p);
    }
    c.write_resolved(&a.out)?;
    print!("{}", report.to_table());
    Ok(written)
}

fn output_paths(a: &RestoreArgs) -> BTreeMap<PathBuf, PathBuf> {
    let single_file = a.input.len() == 1
        && a.out
            .extension()
            .is_some_and(|e| e.eq_ignore_ascii_case("png"));
    a.input
        .iter()
        .map(|i| {
            let out = if single_file {
                a.out.clone()
            } else {
                let stem = i.file_stem().map(|s| s.to_os_string()).unwrap_or_default();
                a.out.join(Path::new(&stem).with_extension("png"))
            };
            (i.clone(), out)
        })
        .collect()
}

pub fn cmd_restore(a: &RestoreArgs) -> Result<Vec<PathBuf>> {
    let model = ReprogramModel::from_checkpoint(&load_checkpoint(&a.checkpoint)?)?;
    let mut written = Vec::new();
    for (input, out) in output_paths(a) {
        let img = load_image(&input)?;
        let restored = restore(&model, &img, a.tiling)?;
        save_png(&out, &restored)?;
        println!("{}", out.display());
        written.push(out);
    }
    Ok(written)
}
