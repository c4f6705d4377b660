//! Adam, the training loop and its on-disk artefacts (config file, history CSV).

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::mpsc::sync_channel;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{augment, random_crop, Sample};
use crate::error::{Error, Result};
use crate::infer::evaluate;
use crate::keyvalue;
use crate::metrics::OaScope;
use crate::model::{Mode, Model, ParamStore};
use crate::par;
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f32,
    pub batch_size: usize,
    pub epochs: usize,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub seed: u64,
    /// Pixels with this label do not contribute to the loss.
    pub ignore_class: Option<u8>,
    /// Random square crop per patch; `None` trains on whole tiles.
    pub crop_size: Option<usize>,
    pub augment: bool,
    /// Largest translation, in pixels per axis, when augmenting.
    pub max_shift: usize,
    /// When false the history's `seconds` column is left empty, which makes
    /// the CSV byte-reproducible.
    pub record_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 16,
            epochs: 50,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            ignore_class: None,
            crop_size: None,
            augment: true,
            max_shift: 8,
            record_wall_time: true,
        }
    }
}

fn optional<T: ToString>(v: Option<T>) -> String {
    v.map_or_else(|| "none".to_string(), |v| v.to_string())
}

fn parse_optional<T: std::str::FromStr>(
    map: &mut BTreeMap<String, String>,
    key: &str,
) -> Result<Option<Option<T>>>
where
    T::Err: std::fmt::Display,
{
    let Some(raw) = map.remove(key) else {
        return Ok(None);
    };
    if raw == "none" {
        return Ok(Some(None));
    }
    raw.parse()
        .map(|v| Some(Some(v)))
        .map_err(|e| Error::Config(format!("bad value {raw:?} for {key}: {e}")))
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "lr must be finite and non-negative, got {}",
                self.lr
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::Config(format!("{name} must lie in (0, 1), got {b}")));
            }
        }
        // Negated so NaN is rejected too.
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        if !(self.eps > 0.0) {
            return Err(Error::Config(format!(
                "eps must be positive, got {}",
                self.eps
            )));
        }
        if self.crop_size == Some(0) {
            return Err(Error::Config("crop_size must be positive".into()));
        }
        Ok(())
    }

    pub fn to_map(&self) -> BTreeMap<String, String> {
        [
            ("augment", self.augment.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("beta1", self.beta1.to_string()),
            ("beta2", self.beta2.to_string()),
            ("crop_size", optional(self.crop_size)),
            ("epochs", self.epochs.to_string()),
            ("eps", self.eps.to_string()),
            ("ignore_class", optional(self.ignore_class)),
            ("lr", self.lr.to_string()),
            ("max_shift", self.max_shift.to_string()),
            ("record_wall_time", self.record_wall_time.to_string()),
            ("seed", self.seed.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    /// Overrides fields named in `map`, consuming the keys it recognises.
    pub fn apply(&mut self, map: &mut BTreeMap<String, String>) -> Result<()> {
        macro_rules! field {
            ($($name:ident),*) => {$(
                if let Some(v) = keyvalue::take(map, stringify!($name))? {
                    self.$name = v;
                }
            )*};
        }
        field!(
            lr,
            batch_size,
            epochs,
            beta1,
            beta2,
            eps,
            seed,
            augment,
            max_shift,
            record_wall_time
        );
        if let Some(v) = parse_optional(map, "ignore_class")? {
            self.ignore_class = v;
        }
        if let Some(v) = parse_optional(map, "crop_size")? {
            self.crop_size = v;
        }
        Ok(())
    }

    /// Parses a flat `key=value` file; unknown keys are rejected.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut map = keyvalue::parse(text)?;
        let mut cfg = Self::default();
        cfg.apply(&mut map)?;
        keyvalue::reject_unknown(&map, "train config")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

/// First and second moment estimates per parameter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
    pub t: u64,
}

/// One bias-corrected Adam update. Parameters without a gradient entry are
/// treated as having zero gradient. Any non-finite gradient rejects the whole
/// step before anything is modified.
pub fn adam_step(
    params: &mut ParamStore,
    grads: &BTreeMap<String, Tensor>,
    state: &mut AdamState,
    cfg: &TrainConfig,
) -> Result<()> {
    for (name, g) in grads {
        let p = params.get(name).ok_or_else(|| {
            Error::contract(
                "adam_step",
                format!("gradient for unknown parameter {name:?}"),
            )
        })?;
        if p.shape() != g.shape() {
            return Err(Error::contract(
                "adam_step",
                format!(
                    "{name}: gradient shape {:?} differs from parameter {:?}",
                    g.shape(),
                    p.shape()
                ),
            ));
        }
        if !g.all_finite() {
            return Err(Error::NonFinite {
                op: format!("gradient of parameter {name}"),
            });
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (cfg.beta1 as f64, cfg.beta2 as f64);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (name, p) in params.iter_mut() {
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(p.shape()));
        let v = state
            .v
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(p.shape()));
        let g = grads.get(name).map(Tensor::data);
        let (m, v) = (m.data_mut(), v.data_mut());
        for (i, w) in p.data_mut().iter_mut().enumerate() {
            let gi = g.map_or(0.0, |g| g[i] as f64);
            let mi = b1 * m[i] as f64 + (1.0 - b1) * gi;
            let vi = b2 * v[i] as f64 + (1.0 - b2) * gi * gi;
            m[i] = mi as f32;
            v[i] = vi as f32;
            let delta = cfg.lr as f64 * (mi / c1) / ((vi / c2).sqrt() + cfg.eps as f64);
            if delta != 0.0 {
                *w = (*w as f64 - delta) as f32;
            }
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalScores {
    pub oa: f64,
    pub miou: f64,
    pub af: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Pixel-weighted mean training loss over the epoch.
    pub loss: f64,
    pub eval: Option<EvalScores>,
    pub seconds: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

pub const HISTORY_HEADER: &str = "epoch,loss,oa,miou,af,seconds";

impl TrainHistory {
    pub fn losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.loss).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{HISTORY_HEADER}\n");
        for e in &self.epochs {
            let _ = write!(out, "{},{:.8}", e.epoch, e.loss);
            match e.eval {
                Some(s) => {
                    let _ = write!(out, ",{:.6},{:.6},{:.6}", s.oa, s.miou, s.af);
                }
                None => out.push_str(",,,"),
            }
            match e.seconds {
                Some(s) => {
                    let _ = writeln!(out, ",{s:.3}");
                }
                None => out.push_str(",\n"),
            }
        }
        out
    }
}

/// Side outputs of a training run.
#[derive(Clone, Debug, Default)]
pub struct TrainOptions<'a> {
    /// Written atomically before the first epoch and after every epoch.
    pub checkpoint: Option<PathBuf>,
    /// Held-out samples scored after every epoch.
    pub eval_set: Option<&'a [Sample]>,
    pub excluded: BTreeSet<usize>,
    pub oa_scope: OaScope,
}

struct Batch {
    images: Tensor,
    targets: Vec<u8>,
}

/// Per-patch rng: a function of (seed, epoch, tile index) only, so patches
/// do not depend on batch composition or worker scheduling.
fn patch_rng(seed: u64, epoch: usize, tile: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((epoch as u64 + 1) << 32) | tile as u64);
    rng
}

fn make_patch(sample: &Sample, cfg: &TrainConfig, epoch: usize, tile: usize) -> Result<Sample> {
    let mut rng = patch_rng(cfg.seed, epoch, tile);
    let mut patch = match cfg.crop_size {
        Some(size) => random_crop(sample, size, &mut rng)?,
        None => sample.clone(),
    };
    if cfg.augment {
        if patch.height() != patch.width() {
            return Err(Error::Data(format!(
                "augmentation needs square patches, tile {tile} is {}×{}",
                patch.height(),
                patch.width()
            )));
        }
        patch = augment(&patch, cfg.max_shift, &mut rng)?.0;
    }
    Ok(patch)
}

fn make_batch(data: &[Sample], order: &[usize], cfg: &TrainConfig, epoch: usize) -> Result<Batch> {
    let patches = par::map_slice(order, |&i| make_patch(&data[i], cfg, epoch, i))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let images: Vec<Tensor> = patches.iter().map(|p| p.image.clone()).collect();
    let targets = patches
        .iter()
        .flat_map(|p| p.mask.labels().iter().copied())
        .collect();
    Ok(Batch {
        images: Tensor::stack(&images)?,
        targets,
    })
}

fn check_dataset(model: &Model, data: &[Sample], cfg: &TrainConfig) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let f = model.config().downsample_factor();
    let k = model.config().num_classes;
    let c = model.config().in_channels;
    for (i, s) in data.iter().enumerate() {
        let (ch, h, w) = s.image.dims3("train")?;
        if ch != c {
            return Err(Error::Data(format!(
                "tile {i} has {ch} channels, model expects {c}"
            )));
        }
        let (ph, pw) = cfg.crop_size.map_or((h, w), |s| (s, s));
        if ph % f != 0 || pw % f != 0 {
            return Err(Error::Data(format!(
                "patch size {ph}×{pw} of tile {i} is not divisible by the downsample factor {f}"
            )));
        }
        if s.mask.max_label() as usize >= k {
            return Err(Error::Data(format!(
                "tile {i} has label {} but the model predicts {k} classes",
                s.mask.max_label()
            )));
        }
        if (h, w) != (data[0].height(), data[0].width()) && cfg.crop_size.is_none() {
            return Err(Error::Data(
                "tiles differ in size; set crop_size to train on them".into(),
            ));
        }
    }
    Ok(())
}

fn save(model: &Model, opts: &TrainOptions) -> Result<()> {
    match &opts.checkpoint {
        Some(path) => model.save_checkpoint(path),
        None => Ok(()),
    }
}

/// Trains `model` on `data` for `cfg.epochs` epochs.
///
/// Batches are assembled on a producer thread one step ahead of the
/// optimiser and handed over through a bounded queue. A non-finite loss or
/// gradient aborts the run; the checkpoint on disk is then the last epoch
/// that completed cleanly.
pub fn train(
    mut model: Model,
    data: &[Sample],
    cfg: &TrainConfig,
    opts: &TrainOptions,
) -> Result<(Model, TrainHistory)> {
    cfg.validate()?;
    check_dataset(&model, data, cfg)?;
    save(&model, opts)?;

    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = AdamState::default();
    let mut history = TrainHistory::default();

    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        order.shuffle(&mut shuffle_rng);
        let batches: Vec<&[usize]> = order.chunks(cfg.batch_size).collect();

        let (loss_sum, pixels) = std::thread::scope(|scope| -> Result<(f64, usize)> {
            let (tx, rx) = sync_channel::<Result<Batch>>(1);
            let producer_batches = &batches;
            scope.spawn(move || {
                for b in producer_batches {
                    if tx.send(make_batch(data, b, cfg, epoch)).is_err() {
                        break;
                    }
                }
            });
            let mut loss_sum = 0.0;
            let mut pixels = 0;
            for (step, batch) in rx.iter().enumerate() {
                let batch = batch?;
                let (loss, count) =
                    train_step(&mut model, &mut state, &batch, cfg).map_err(|e| match e {
                        Error::NonFinite { op } => Error::NonFinite {
                            op: format!(
                                "{op} (epoch {epoch}, batch {}); training aborted",
                                step + 1
                            ),
                        },
                        other => other,
                    })?;
                loss_sum += loss * count as f64;
                pixels += count;
            }
            Ok((loss_sum, pixels))
        })?;

        let eval = match opts.eval_set {
            Some(set) if !set.is_empty() => {
                let (_, r) = evaluate(&model, set, &opts.excluded, opts.oa_scope)?;
                Some(EvalScores {
                    oa: r.oa,
                    miou: r.miou,
                    af: r.af,
                })
            }
            _ => None,
        };
        let record = EpochRecord {
            epoch,
            loss: loss_sum / pixels as f64,
            eval,
            seconds: cfg
                .record_wall_time
                .then(|| started.elapsed().as_secs_f64()),
        };
        log::info!("epoch {epoch}/{}: loss {:.5}", cfg.epochs, record.loss);
        history.epochs.push(record);
        save(&model, opts)?;
    }
    Ok((model, history))
}

/// Forward, backward and one Adam update; returns the batch loss and the
/// number of pixels it averaged over.
fn train_step(
    model: &mut Model,
    state: &mut AdamState,
    batch: &Batch,
    cfg: &TrainConfig,
) -> Result<(f64, usize)> {
    let mut tape = Tape::new();
    let params = model.bind(&mut tape, Mode::Train);
    let x = tape.constant(batch.images.clone());
    let logits = model.forward_on_tape(&mut tape, &params, x, None)?;
    let loss = tape.cross_entropy(logits, &batch.targets, cfg.ignore_class)?;
    let value = tape.value(loss).item()? as f64;
    let count = match cfg.ignore_class {
        Some(ig) => batch.targets.iter().filter(|&&t| t != ig).count(),
        None => batch.targets.len(),
    };
    let mut grads = tape.backward(loss)?;
    let grads = params.gradients(&mut grads);
    adam_step(model.params_mut(), &grads, state, cfg)?;
    Ok((value, count))
}
