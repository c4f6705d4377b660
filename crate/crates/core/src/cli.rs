//! Command-line workflow: `synth`, `train`, `eval` and `infer`.
//!
//! Every command writes a `run.manifest` into its output directory recording
//! the command line, the resolved configuration, the seed and the version.
//! Precedence for training settings is: defaults, then `--config`, then
//! `--set key=value`, then dedicated flags.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};

use crate::attention::HiddenActivation;
use crate::data::{
    dataset_palette, decode_mask, load_dataset, load_raster, save_dataset, save_mask,
    synth_dataset, Palette, Sample, SynthSpec,
};
use crate::error::{Error, Result};
use crate::infer::{evaluate, heatmap_overlay, predict_tiled};
use crate::keyvalue;
use crate::metrics::{
    compute_report, format_csv, format_table, ConfusionMatrix, MetricReport, OaScope,
};
use crate::model::{AttentionMode, Model, ModelConfig};
use crate::train::{train, TrainConfig, TrainOptions};

pub const RUN_MANIFEST: &str = "run.manifest";
pub const CHECKPOINT_FILE: &str = "model.sckp";
pub const HISTORY_FILE: &str = "history.csv";
pub const VERSION: &str = concat!("v", env!("CARGO_PKG_VERSION"));

/// Environment variable capping worker threads.
pub const THREADS_ENV: &str = "SCATT_THREADS";

#[derive(Debug, Parser)]
#[command(name = "scattnet", version = VERSION, about = "Attention segmentation: synth, train, eval, infer")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic segmentation dataset.
    Synth(SynthArgs),
    /// Train one or more attention variants.
    Train(TrainArgs),
    /// Score a checkpoint on a labelled dataset.
    Eval(EvalArgs),
    /// Tiled prediction of one image, with an optional heatmap overlay.
    Infer(InferArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = SynthSpec::default().num_tiles)]
    pub num_tiles: usize,
    #[arg(long, default_value_t = SynthSpec::default().tile_size)]
    pub tile_size: usize,
    #[arg(long, default_value_t = SynthSpec::default().num_classes)]
    pub num_classes: usize,
    #[arg(long, default_value_t = SynthSpec::default().shape_density)]
    pub shape_density: f64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory (or pair-list file).
    #[arg(long)]
    pub data: PathBuf,
    /// Held-out dataset scored after every epoch and in the comparison table.
    #[arg(long)]
    pub val: Option<PathBuf>,
    /// Flat key=value training config.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// none, channel, spatial, cascade, a comma list of them, or `all`.
    #[arg(long, default_value = "cascade")]
    pub attention: String,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f32>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Seeds both parameter initialisation and training.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub crop_size: Option<usize>,
    /// Encoder widths, e.g. `16,32`.
    #[arg(long, default_value = "16,32")]
    pub widths: String,
    /// Defaults to the highest label in the training set plus one.
    #[arg(long)]
    pub num_classes: Option<usize>,
    #[arg(long, default_value_t = HiddenActivation::Relu)]
    pub hidden_activation: HiddenActivation,
    /// Classes left out of MIoU/AF, e.g. `5`.
    #[arg(long, value_delimiter = ',')]
    pub exclude_classes: Vec<usize>,
    /// Extra training config overrides, `key=value`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_delimiter = ',')]
    pub exclude_classes: Vec<usize>,
    /// Count only pixels of reported classes in OA.
    #[arg(long)]
    pub oa_reported_only: bool,
    /// Directory for the table, CSV and manifest.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long, default_value_t = 256)]
    pub window: usize,
    /// Also write a heatmap overlay of this class's logits.
    #[arg(long)]
    pub heatmap_class: Option<usize>,
    #[arg(long, default_value_t = 0.5)]
    pub alpha: f32,
    /// Ground-truth mask; enables the per-image metric sidecar.
    #[arg(long)]
    pub mask: Option<PathBuf>,
    /// Palette file; defaults to the ISPRS colours.
    #[arg(long)]
    pub palette: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

/// Process exit status for an error: 1 usage or validation, 2 data, 3 numeric.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::Contract { .. } => 1,
        Error::Data(_) | Error::Format(_) | Error::Io { .. } | Error::Image { .. } => 2,
        Error::NonFinite { .. } => 3,
    }
}

/// Parses `args` and runs the command, returning the exit status.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let args: Vec<std::ffi::OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match threads_from_env() {
        Ok(t) => crate::par::configure_threads(t),
        Err(e) => {
            eprintln!("error: {e}");
            return exit_code(&e);
        }
    }
    let line: Vec<String> = args
        .iter()
        .map(|a| a.to_string_lossy().into_owned())
        .collect();
    match run(cli, &line.join(" ")) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn threads_from_env() -> Result<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(None),
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .map(Some)
            .ok_or_else(|| {
                Error::Config(format!(
                    "{THREADS_ENV} must be a positive integer, got {v:?}"
                ))
            }),
    }
}

pub fn run(cli: Cli, command_line: &str) -> Result<()> {
    match cli.command {
        Command::Synth(a) => cmd_synth(&a, command_line),
        Command::Train(a) => cmd_train(&a, command_line),
        Command::Eval(a) => cmd_eval(&a, command_line),
        Command::Infer(a) => cmd_infer(&a, command_line),
    }
}

fn unix_seconds() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

/// The `run.manifest` of one command.
#[derive(Clone, Debug)]
pub struct RunManifest {
    pub command: String,
    pub config: BTreeMap<String, String>,
    pub seed: Option<u64>,
    pub started: u64,
}

impl RunManifest {
    fn new(command: &str, seed: Option<u64>) -> Self {
        Self {
            command: command.to_string(),
            config: BTreeMap::new(),
            seed,
            started: unix_seconds(),
        }
    }

    fn with(mut self, prefix: &str, map: BTreeMap<String, String>) -> Self {
        self.config
            .extend(map.into_iter().map(|(k, v)| (format!("{prefix}.{k}"), v)));
        self
    }

    /// Writes `dir/run.manifest`. Only the two timestamp lines differ
    /// between reruns of the same command.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let mut map = self.config.clone();
        map.insert("command".into(), self.command.clone());
        map.insert("version".into(), VERSION.into());
        if let Some(seed) = self.seed {
            map.insert("seed".into(), seed.to_string());
        }
        map.insert("started_unix".into(), self.started.to_string());
        map.insert("finished_unix".into(), unix_seconds().to_string());
        let path = dir.join(RUN_MANIFEST);
        fs::write(&path, keyvalue::render(&map)).map_err(|e| Error::io(path, e))
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

pub fn cmd_synth(a: &SynthArgs, command_line: &str) -> Result<()> {
    let spec = SynthSpec {
        num_tiles: a.num_tiles,
        tile_size: a.tile_size,
        num_classes: a.num_classes,
        shape_density: a.shape_density,
    };
    spec.validate()?;
    let samples = synth_dataset(&spec, a.seed)?;
    create_dir(&a.out)?;
    save_dataset(
        &a.out,
        &samples,
        &Palette::isprs().truncated(spec.num_classes)?,
    )?;
    let cfg = BTreeMap::from([
        ("num_tiles".to_string(), spec.num_tiles.to_string()),
        ("tile_size".to_string(), spec.tile_size.to_string()),
        ("num_classes".to_string(), spec.num_classes.to_string()),
        ("shape_density".to_string(), spec.shape_density.to_string()),
    ]);
    RunManifest::new(command_line, Some(a.seed))
        .with("synth", cfg)
        .write(&a.out)?;
    println!("wrote {} tiles to {}", samples.len(), a.out.display());
    Ok(())
}

/// Attention variants named by `--attention`.
pub fn parse_attention_list(s: &str) -> Result<Vec<AttentionMode>> {
    if s.trim() == "all" {
        return Ok(AttentionMode::ALL.to_vec());
    }
    let mut modes: Vec<AttentionMode> = Vec::new();
    for part in s.split(',') {
        let m: AttentionMode = part.trim().parse()?;
        if !modes.contains(&m) {
            modes.push(m);
        }
    }
    Ok(modes)
}

fn parse_widths(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|w| {
            w.trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad encoder width {w:?} in {s:?}")))
        })
        .collect()
}

/// Resolves the training config from defaults, file, `--set` and flags.
pub fn resolve_train_config(a: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg = match &a.config {
        Some(path) => TrainConfig::load(path)?,
        None => TrainConfig::default(),
    };
    let mut overrides = BTreeMap::new();
    for kv in &a.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        overrides.insert(k.trim().to_string(), v.trim().to_string());
    }
    cfg.apply(&mut overrides)?;
    keyvalue::reject_unknown(&overrides, "train config")?;
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = a.lr {
        cfg.lr = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.crop_size {
        cfg.crop_size = Some(v);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_labelled(path: &Path) -> Result<(Vec<Sample>, Palette)> {
    let palette = dataset_palette(path)?;
    let samples = load_dataset(path, &palette)?;
    if samples.is_empty() {
        return Err(Error::Data(format!("{} lists no samples", path.display())));
    }
    Ok((samples, palette))
}

fn class_names(palette: &Palette, k: usize) -> Vec<String> {
    let names = palette.names();
    (0..k)
        .map(|c| names.get(c).cloned().unwrap_or_else(|| format!("class{c}")))
        .collect()
}

pub fn cmd_train(a: &TrainArgs, command_line: &str) -> Result<()> {
    let cfg = resolve_train_config(a)?;
    let modes = parse_attention_list(&a.attention)?;
    let (train_set, palette) = load_labelled(&a.data)?;
    let val_set = a
        .val
        .as_deref()
        .map(load_labelled)
        .transpose()?
        .map(|(s, _)| s);

    let observed = train_set
        .iter()
        .map(|s| s.mask.max_label() as usize + 1)
        .max()
        .unwrap_or(2);
    let num_classes = a.num_classes.unwrap_or(observed.max(2));
    if observed > num_classes {
        return Err(Error::Data(format!(
            "training masks use {observed} classes but --num-classes is {num_classes}"
        )));
    }
    let excluded: BTreeSet<usize> = a.exclude_classes.iter().copied().collect();
    let model_config = |attention| ModelConfig {
        in_channels: train_set[0].image.shape()[0],
        num_classes,
        encoder_widths: vec![],
        attention,
        hidden_activation: a.hidden_activation,
        seed: cfg.seed,
    };
    let widths = parse_widths(&a.widths)?;

    create_dir(&a.out)?;
    let mut manifest = RunManifest::new(command_line, Some(cfg.seed)).with("train", cfg.to_map());
    manifest.config.insert(
        "model.attention".into(),
        modes
            .iter()
            .map(|m| m.to_string())
            .collect::<Vec<_>>()
            .join(","),
    );
    manifest
        .config
        .insert("model.encoder_widths".into(), a.widths.clone());
    manifest
        .config
        .insert("model.num_classes".into(), num_classes.to_string());
    manifest.config.insert(
        "model.hidden_activation".into(),
        a.hidden_activation.to_string(),
    );

    let score_set = val_set.as_deref().unwrap_or(&train_set);
    if val_set.is_none() && modes.len() > 1 {
        log::warn!("no --val set given; the comparison table scores the training set");
    }
    let mut reports: Vec<(String, MetricReport)> = Vec::new();
    for &mode in &modes {
        let dir = if modes.len() == 1 {
            a.out.clone()
        } else {
            a.out.join(mode.to_string())
        };
        create_dir(&dir)?;
        let model = Model::build(ModelConfig {
            encoder_widths: widths.clone(),
            ..model_config(mode)
        })?;
        let opts = TrainOptions {
            checkpoint: Some(dir.join(CHECKPOINT_FILE)),
            eval_set: val_set.as_deref(),
            excluded: excluded.clone(),
            oa_scope: OaScope::AllPixels,
        };
        log::info!(
            "training attention={mode} ({} parameters)",
            model.param_count()
        );
        let (model, history) = train(model, &train_set, &cfg, &opts)?;
        write_file(&dir.join(HISTORY_FILE), &history.to_csv())?;
        if modes.len() > 1 {
            let (_, report) = evaluate(&model, score_set, &excluded, OaScope::AllPixels)?;
            reports.push((variant_label(mode), report));
        }
    }
    if modes.len() > 1 {
        let names = class_names(&palette, num_classes);
        let table = format_table(&reports, &names);
        write_file(&a.out.join("comparison.txt"), &table)?;
        write_file(&a.out.join("comparison.csv"), &format_csv(&reports, &names))?;
        print!("{table}");
    }
    manifest.write(&a.out)
}

/// Row label in the comparison table.
pub fn variant_label(mode: AttentionMode) -> String {
    match mode {
        AttentionMode::None => "Backbone",
        AttentionMode::ChannelOnly => "Backbone + cha. att",
        AttentionMode::SpatialOnly => "Backbone + spa. att",
        AttentionMode::Cascade => "Backbone + cascade att",
    }
    .to_string()
}

pub fn cmd_eval(a: &EvalArgs, command_line: &str) -> Result<()> {
    let model = Model::load_checkpoint(&a.checkpoint)?;
    let k = model.config().num_classes;
    let (samples, palette) = load_labelled(&a.data)?;
    if let Some((i, s)) = samples
        .iter()
        .enumerate()
        .find(|(_, s)| s.mask.max_label() as usize >= k)
    {
        return Err(Error::Data(format!(
            "sample {i} has label {} but the checkpoint predicts {k} classes",
            s.mask.max_label()
        )));
    }
    let excluded: BTreeSet<usize> = a.exclude_classes.iter().copied().collect();
    let scope = if a.oa_reported_only {
        OaScope::ReportedClasses
    } else {
        OaScope::AllPixels
    };
    let (_, report) = evaluate(&model, &samples, &excluded, scope)?;
    let names = class_names(&palette, k);
    let rows = vec![(a.checkpoint.display().to_string(), report)];
    let table = format_table(&rows, &names);
    print!("{table}");
    if let Some(out) = &a.out {
        create_dir(out)?;
        write_file(&out.join("metrics.txt"), &table)?;
        write_file(&out.join("metrics.csv"), &format_csv(&rows, &names))?;
        let cfg = BTreeMap::from([
            ("checkpoint".to_string(), a.checkpoint.display().to_string()),
            ("data".to_string(), a.data.display().to_string()),
            ("oa_scope".to_string(), format!("{scope:?}")),
        ]);
        RunManifest::new(command_line, Some(model.config().seed))
            .with("eval", cfg)
            .with("model", model.config().to_map())
            .write(out)?;
    }
    Ok(())
}

pub fn cmd_infer(a: &InferArgs, command_line: &str) -> Result<()> {
    let model = Model::load_checkpoint(&a.checkpoint)?;
    let k = model.config().num_classes;
    let palette = match &a.palette {
        Some(p) => Palette::from_text(&fs::read_to_string(p).map_err(|e| Error::io(p, e))?)?,
        None => Palette::isprs(),
    };
    if palette.len() < k {
        return Err(Error::Config(format!(
            "palette has {} colours, model predicts {k} classes",
            palette.len()
        )));
    }
    let image = load_raster(&a.image)?;
    let (logits, labels) = predict_tiled(&model, &image, a.window)?;
    create_dir(&a.out)?;
    save_mask(&a.out.join("prediction.png"), &labels, &palette)?;
    if let Some(class) = a.heatmap_class {
        let overlay = heatmap_overlay(&logits, &image, class, a.alpha)?;
        let path = a.out.join(format!("heatmap_class{class}.png"));
        overlay.save(&path).map_err(|source| Error::Image {
            path: path.clone(),
            source,
        })?;
    }
    if let Some(mask) = &a.mask {
        let gt = decode_mask(mask, &palette)?;
        let mut cm = ConfusionMatrix::new(k);
        cm.accumulate(&labels, &gt)?;
        let report = compute_report(&cm, &BTreeSet::new(), OaScope::AllPixels)?;
        let rows = vec![(a.image.display().to_string(), report)];
        write_file(
            &a.out.join("metrics.csv"),
            &format_csv(&rows, &class_names(&palette, k)),
        )?;
    }
    let cfg = BTreeMap::from([
        ("checkpoint".to_string(), a.checkpoint.display().to_string()),
        ("image".to_string(), a.image.display().to_string()),
        ("window".to_string(), a.window.to_string()),
        ("alpha".to_string(), a.alpha.to_string()),
        (
            "heatmap_class".to_string(),
            a.heatmap_class.map_or("none".into(), |c| c.to_string()),
        ),
    ]);
    RunManifest::new(command_line, Some(model.config().seed))
        .with("infer", cfg)
        .with("model", model.config().to_map())
        .write(&a.out)?;
    println!(
        "wrote {}×{} prediction to {}",
        labels.height(),
        labels.width(),
        a.out.display()
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn attention_lists() {
        assert_eq!(parse_attention_list("all").unwrap().len(), 4);
        assert_eq!(
            parse_attention_list("none,cascade,none").unwrap(),
            [AttentionMode::None, AttentionMode::Cascade]
        );
        assert!(parse_attention_list("both").is_err());
    }

    #[test]
    fn usage_errors_exit_with_one() {
        assert_eq!(main_with_args(["scattnet", "frobnicate"]), 1);
        assert_eq!(main_with_args(["scattnet", "--help"]), 0);
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
