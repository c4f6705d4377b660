//! Encoder-decoder segmentation network with the attention block on the
//! final decoder feature map, followed by a 1×1 classifier.
//!
//! Encoder stage `i`: 3×3 conv (same) + relu + 2×2 max-pool.
//! Decoder stage `j`: 2× nearest upsample + 3×3 conv (same) + relu, stepping
//! widths back down to `encoder_widths[0]`, so logits match the input size.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{
    cbam_refine, AttentionGate, BoundAttention, BoundChannel, ChannelAttentionParams,
    HiddenActivation, SpatialAttentionParams,
};
use crate::data::LabelMap;
use crate::error::{Error, Result};
use crate::keyvalue;
use crate::ops::{Padding, PoolMode, PoolScope};
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SCKP";
pub const CHECKPOINT_VERSION: u8 = 1;

/// Which attention branches refine the final feature map.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum AttentionMode {
    None,
    ChannelOnly,
    SpatialOnly,
    Cascade,
}

impl AttentionMode {
    pub const ALL: [AttentionMode; 4] = [
        AttentionMode::None,
        AttentionMode::ChannelOnly,
        AttentionMode::SpatialOnly,
        AttentionMode::Cascade,
    ];

    pub fn has_channel(self) -> bool {
        matches!(self, AttentionMode::ChannelOnly | AttentionMode::Cascade)
    }

    pub fn has_spatial(self) -> bool {
        matches!(self, AttentionMode::SpatialOnly | AttentionMode::Cascade)
    }

    pub fn is_enabled(self) -> bool {
        self != AttentionMode::None
    }
}

impl fmt::Display for AttentionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttentionMode::None => "none",
            AttentionMode::ChannelOnly => "channel",
            AttentionMode::SpatialOnly => "spatial",
            AttentionMode::Cascade => "cascade",
        })
    }
}

impl FromStr for AttentionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "channel" | "channel_only" => Ok(Self::ChannelOnly),
            "spatial" | "spatial_only" => Ok(Self::SpatialOnly),
            "cascade" => Ok(Self::Cascade),
            other => Err(Error::Config(format!(
                "unknown attention mode {other:?} (expected none|channel|spatial|cascade)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    pub encoder_widths: Vec<usize>,
    pub attention: AttentionMode,
    pub hidden_activation: HiddenActivation,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            num_classes: 6,
            encoder_widths: vec![16, 32, 64],
            attention: AttentionMode::Cascade,
            hidden_activation: HiddenActivation::Relu,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 {
            return Err(Error::Config("in_channels must be positive".into()));
        }
        if self.num_classes < 2 || self.num_classes > 256 {
            return Err(Error::Config(format!(
                "num_classes must be in 2..=256, got {}",
                self.num_classes
            )));
        }
        if self.encoder_widths.is_empty() || self.encoder_widths.contains(&0) {
            return Err(Error::Config(format!(
                "encoder_widths must be non-empty and positive, got {:?}",
                self.encoder_widths
            )));
        }
        if self.encoder_widths.len() > 16 {
            return Err(Error::Config(
                "at most 16 encoder stages are supported".into(),
            ));
        }
        let c = self.feature_channels();
        if self.attention.is_enabled() && !c.is_multiple_of(8) {
            return Err(Error::Config(format!(
                "attention needs a final feature width divisible by 8, got {c}"
            )));
        }
        Ok(())
    }

    /// Input height and width must be multiples of this.
    pub fn downsample_factor(&self) -> usize {
        1 << self.encoder_widths.len()
    }

    /// Channel count of the feature map the attention block refines.
    pub fn feature_channels(&self) -> usize {
        self.encoder_widths[0]
    }

    /// `(in, out)` channels of every decoder conv.
    fn decoder_channels(&self) -> Vec<(usize, usize)> {
        let w = &self.encoder_widths;
        let depth = w.len();
        let mut cin = w[depth - 1];
        (0..depth)
            .map(|j| {
                let cout = if j + 2 <= depth {
                    w[depth - 2 - j]
                } else {
                    w[0]
                };
                let pair = (cin, cout);
                cin = cout;
                pair
            })
            .collect()
    }

    /// Same network shape, ignoring the initialisation seed.
    pub fn same_architecture(&self, other: &ModelConfig) -> bool {
        ModelConfig {
            seed: 0,
            ..self.clone()
        } == ModelConfig {
            seed: 0,
            ..other.clone()
        }
    }

    pub fn to_map(&self) -> BTreeMap<String, String> {
        let widths: Vec<String> = self.encoder_widths.iter().map(|w| w.to_string()).collect();
        [
            ("attention", self.attention.to_string()),
            ("encoder_widths", widths.join(",")),
            ("hidden_activation", self.hidden_activation.to_string()),
            ("in_channels", self.in_channels.to_string()),
            ("num_classes", self.num_classes.to_string()),
            ("seed", self.seed.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    /// Canonical key-sorted `key=value` block.
    pub fn to_canonical_text(&self) -> String {
        keyvalue::render(&self.to_map())
    }

    pub fn from_canonical_text(text: &str) -> Result<Self> {
        let mut map = keyvalue::parse(text)?;
        let widths: String = keyvalue::require(&mut map, "encoder_widths")?;
        let encoder_widths = widths
            .split(',')
            .map(|w| {
                w.trim()
                    .parse::<usize>()
                    .map_err(|e| Error::Config(format!("bad encoder width {w:?}: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let cfg = ModelConfig {
            attention: keyvalue::require(&mut map, "attention")?,
            encoder_widths,
            hidden_activation: keyvalue::require(&mut map, "hidden_activation")?,
            in_channels: keyvalue::require(&mut map, "in_channels")?,
            num_classes: keyvalue::require(&mut map, "num_classes")?,
            seed: keyvalue::require(&mut map, "seed")?,
        };
        keyvalue::reject_unknown(&map, "model config")?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Whether parameters are recorded as differentiable variables.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

pub type ParamStore = BTreeMap<String, Tensor>;

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    config: ModelConfig,
    params: ParamStore,
}

/// Model parameters recorded on a tape, by name.
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn get(&self, name: &str) -> Var {
        self.vars[name]
    }

    /// Rebinds `name` to another tape value (gradient checks use this to
    /// differentiate with respect to a single parameter).
    pub fn set(&mut self, name: &str, var: Var) -> Result<()> {
        match self.vars.get_mut(name) {
            Some(slot) => {
                *slot = var;
                Ok(())
            }
            None => Err(Error::contract(
                "bind",
                format!("no parameter named {name:?}"),
            )),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, &v)| (k.as_str(), v))
    }

    /// Collects per-parameter gradients after [`Tape::backward`].
    pub fn gradients(&self, grads: &mut Gradients) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .filter_map(|(name, &v)| grads.take(v).map(|g| (name.clone(), g)))
            .collect()
    }
}

fn kaiming(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::normal(shape, (2.0 / fan_in as f32).sqrt(), rng)
}

fn conv_params(
    params: &mut ParamStore,
    name: &str,
    cin: usize,
    cout: usize,
    k: usize,
    rng: &mut ChaCha8Rng,
) {
    params.insert(
        format!("{name}.weight"),
        kaiming(&[cout, cin, k, k], cin * k * k, rng),
    );
    params.insert(format!("{name}.bias"), Tensor::zeros([cout]));
}

// Backbone, channel and spatial parameters draw from separate rng streams so
// that every ablation built from one seed shares identical weights.
const STREAM_BACKBONE: u64 = 0;
const STREAM_CHANNEL: u64 = 1;
const STREAM_SPATIAL: u64 = 2;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

impl Model {
    /// Builds a freshly initialised model (Kaiming-normal weights, zero biases).
    pub fn build(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut rng = stream(config.seed, STREAM_BACKBONE);

        let mut cin = config.in_channels;
        for (i, &w) in config.encoder_widths.iter().enumerate() {
            conv_params(&mut params, &format!("enc.{i}"), cin, w, 3, &mut rng);
            cin = w;
        }
        for (j, (ci, co)) in config.decoder_channels().into_iter().enumerate() {
            conv_params(&mut params, &format!("dec.{j}"), ci, co, 3, &mut rng);
        }
        let c = config.feature_channels();
        conv_params(&mut params, "head", c, config.num_classes, 1, &mut rng);

        if config.attention.has_channel() {
            let ch = ChannelAttentionParams::init(c, &mut stream(config.seed, STREAM_CHANNEL));
            params.insert("att.channel.w1".into(), ch.w1);
            params.insert("att.channel.w2".into(), ch.w2);
        }
        if config.attention.has_spatial() {
            let sp = SpatialAttentionParams::init(&mut stream(config.seed, STREAM_SPATIAL));
            params.insert("att.spatial.kernel".into(), sp.kernel);
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Parameters contributed by the attention block.
    pub fn attention_param_count(&self) -> usize {
        self.params
            .iter()
            .filter(|(k, _)| k.starts_with("att."))
            .map(|(_, t)| t.numel())
            .sum()
    }

    /// Replaces a parameter, keeping its shape.
    pub fn set_param(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::contract("set_param", format!("no parameter named {name:?}")))?;
        if slot.shape() != value.shape() {
            return Err(Error::contract(
                "set_param",
                format!(
                    "{name}: shape {:?} differs from {:?}",
                    value.shape(),
                    slot.shape()
                ),
            ));
        }
        *slot = value;
        Ok(())
    }

    pub fn bind(&self, tape: &mut Tape, mode: Mode) -> BoundParams {
        let vars = self
            .params
            .iter()
            .map(|(name, t)| {
                let v = match mode {
                    Mode::Train => tape.variable(t.clone()),
                    Mode::Eval => tape.constant(t.clone()),
                };
                (name.clone(), v)
            })
            .collect();
        BoundParams { vars }
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let &[_, c, h, w] = shape else {
            return Err(Error::contract(
                "forward",
                format!("expected an N×C×H×W batch, got {shape:?}"),
            ));
        };
        if c != self.config.in_channels {
            return Err(Error::contract(
                "forward",
                format!(
                    "batch has {c} channels, model expects {}",
                    self.config.in_channels
                ),
            ));
        }
        let f = self.config.downsample_factor();
        if h % f != 0 || w % f != 0 {
            return Err(Error::contract(
                "forward",
                format!("input {h}×{w} is not divisible by the downsample factor {f}; pad the input to a multiple of {f}"),
            ));
        }
        Ok(())
    }

    fn bound_attention(&self, p: &BoundParams) -> BoundAttention {
        let a = self.config.attention;
        BoundAttention {
            channel: a.has_channel().then(|| BoundChannel {
                w1: p.get("att.channel.w1"),
                w2: p.get("att.channel.w2"),
                hidden: self.config.hidden_activation,
            }),
            spatial: a.has_spatial().then(|| p.get("att.spatial.kernel")),
        }
    }

    /// Records the forward pass of `input` on `tape`. `gate` replaces the
    /// model's own attention weights when given (ablation tests use this).
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        p: &BoundParams,
        input: Var,
        gate: Option<&dyn AttentionGate>,
    ) -> Result<Var> {
        self.check_input(tape.value(input).shape())?;
        let conv = |tape: &mut Tape, x: Var, name: &str| -> Result<Var> {
            let w = p.get(&format!("{name}.weight"));
            let b = p.get(&format!("{name}.bias"));
            let y = tape.conv2d(x, w, Some(b), 1, Padding::Same)?;
            tape.relu(y)
        };

        let mut x = input;
        let depth = self.config.encoder_widths.len();
        for i in 0..depth {
            x = conv(tape, x, &format!("enc.{i}"))?;
            x = tape.pool2d(
                x,
                PoolMode::Max,
                PoolScope::Windowed {
                    window: 2,
                    stride: 2,
                },
            )?;
        }
        for j in 0..depth {
            x = tape.upsample_nearest(x, 2)?;
            x = conv(tape, x, &format!("dec.{j}"))?;
        }
        if self.config.attention.is_enabled() {
            let own = self.bound_attention(p);
            x = match gate {
                Some(g) => cbam_refine(tape, x, g)?,
                None => cbam_refine(tape, x, &own)?,
            };
        }
        tape.conv2d(
            x,
            p.get("head.weight"),
            Some(p.get("head.bias")),
            1,
            Padding::Same,
        )
    }

    /// Logits `N×K×H×W` for a batch, evaluated without recording gradients.
    pub fn forward(&self, batch: &Tensor) -> Result<Tensor> {
        self.forward_gated(batch, None)
    }

    pub fn forward_gated(
        &self,
        batch: &Tensor,
        gate: Option<&dyn AttentionGate>,
    ) -> Result<Tensor> {
        self.check_input(batch.shape())?;
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, Mode::Eval);
        let x = tape.constant(batch.clone());
        let y = self.forward_on_tape(&mut tape, &p, x, gate)?;
        Ok(tape.value(y).clone())
    }

    /// Per-pixel argmax class for every sample in the batch.
    pub fn predict(&self, batch: &Tensor) -> Result<Vec<LabelMap>> {
        argmax_labels(&self.forward(batch)?)
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let bytes = self.checkpoint_bytes();
        let tmp = path.with_extension("tmp");
        let write = || -> std::io::Result<()> {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
            fs::rename(&tmp, path)
        };
        write().map_err(|e| Error::io(path, e))
    }

    /// Serialised `SCKP` checkpoint:
    /// magic, version byte, `u32` config length, config text, `u32` parameter
    /// count, then per parameter `u32` name length, name, `SCTN` tensor; and a
    /// trailing `u32` CRC-32 of every preceding byte. Integers little-endian.
    pub fn checkpoint_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.push(CHECKPOINT_VERSION);
        let cfg = self.config.to_canonical_text();
        out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
        out.extend_from_slice(cfg.as_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in &self.params {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            t.write_to(&mut out).expect("Vec write");
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint_bytes(&bytes).map_err(|e| match e {
            Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Loads a checkpoint and requires its architecture to equal `expected`.
    pub fn load_checkpoint_matching(path: &Path, expected: &ModelConfig) -> Result<Self> {
        let model = Self::load_checkpoint(path)?;
        if !model.config.same_architecture(expected) {
            return Err(Error::Config(format!(
                "checkpoint {} holds a different model: found [{}], expected [{}]",
                path.display(),
                model.config.to_canonical_text().trim().replace('\n', " "),
                expected.to_canonical_text().trim().replace('\n', " "),
            )));
        }
        Ok(model)
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 + 1 + 4 + 4 + 4 {
            return Err(Error::Format("checkpoint is truncated".into()));
        }
        if &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(Error::Format(
                "bad checkpoint magic, expected \"SCKP\"".into(),
            ));
        }
        if bytes[4] != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {}",
                bytes[4]
            )));
        }
        let (payload, crc) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(crc.try_into().unwrap());
        let actual = crc32fast::hash(payload);
        if stored != actual {
            return Err(Error::Format(format!(
                "checksum mismatch (stored {stored:08x}, computed {actual:08x}); file is truncated or corrupt"
            )));
        }

        let mut cur = &payload[5..];
        let cfg_len = read_u32(&mut cur, "config length")? as usize;
        let cfg_text = std::str::from_utf8(take(&mut cur, cfg_len, "config block")?)
            .map_err(|_| Error::Format("config block is not UTF-8".into()))?;
        let config = ModelConfig::from_canonical_text(cfg_text)
            .map_err(|e| Error::Format(format!("invalid config block: {e}")))?;

        let count = read_u32(&mut cur, "parameter count")? as usize;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let len = read_u32(&mut cur, "parameter name length")? as usize;
            let name = std::str::from_utf8(take(&mut cur, len, "parameter name")?)
                .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?
                .to_string();
            let t = Tensor::read_from(&mut cur)?;
            params.insert(name, t);
        }
        if !cur.is_empty() {
            return Err(Error::Format(format!(
                "{} unexpected bytes after parameter table",
                cur.len()
            )));
        }

        // The parameter table must match what the config would build.
        let reference = Model::build(config.clone())?;
        let expected: Vec<(&String, &[usize])> = reference
            .params
            .iter()
            .map(|(k, t)| (k, t.shape()))
            .collect();
        let found: Vec<(&String, &[usize])> = params.iter().map(|(k, t)| (k, t.shape())).collect();
        if expected != found {
            return Err(Error::Format(format!(
                "parameter table does not match the stored config: expected {expected:?}, found {found:?}"
            )));
        }
        Ok(Self { config, params })
    }
}

fn take<'a>(cur: &mut &'a [u8], n: usize, what: &str) -> Result<&'a [u8]> {
    if cur.len() < n {
        return Err(Error::Format(format!("truncated {what}")));
    }
    let (head, tail) = cur.split_at(n);
    *cur = tail;
    Ok(head)
}

fn read_u32(cur: &mut &[u8], what: &str) -> Result<u32> {
    Ok(u32::from_le_bytes(take(cur, 4, what)?.try_into().unwrap()))
}

/// Argmax over the channel axis of `N×K×H×W` logits. Ties go to the lowest
/// class index.
pub fn argmax_labels(logits: &Tensor) -> Result<Vec<LabelMap>> {
    let (n, k, h, w) = logits.dims4("predict")?;
    let hw = h * w;
    let x = logits.data();
    (0..n)
        .map(|b| {
            let base = b * k * hw;
            let labels = (0..hw)
                .map(|p| {
                    let mut best = 0;
                    for c in 1..k {
                        if x[base + c * hw + p] > x[base + best * hw + p] {
                            best = c;
                        }
                    }
                    best as u8
                })
                .collect();
            LabelMap::new(w, h, labels)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(attention: AttentionMode) -> ModelConfig {
        ModelConfig {
            in_channels: 3,
            num_classes: 2,
            encoder_widths: vec![8, 16],
            attention,
            hidden_activation: HiddenActivation::Relu,
            seed: 7,
        }
    }

    #[test]
    fn decoder_steps_widths_back_down() {
        let cfg = ModelConfig {
            encoder_widths: vec![8, 16, 32],
            ..tiny(AttentionMode::None)
        };
        assert_eq!(cfg.decoder_channels(), vec![(32, 16), (16, 8), (8, 8)]);
        assert_eq!(cfg.downsample_factor(), 8);
    }

    #[test]
    fn rejects_invalid_configs() {
        let bad = [
            ModelConfig {
                num_classes: 1,
                ..tiny(AttentionMode::None)
            },
            ModelConfig {
                encoder_widths: vec![],
                ..tiny(AttentionMode::None)
            },
            ModelConfig {
                encoder_widths: vec![12],
                ..tiny(AttentionMode::Cascade)
            },
        ];
        for cfg in bad {
            assert!(matches!(Model::build(cfg), Err(Error::Config(_))));
        }
        // Non-multiples of 8 are fine without attention.
        assert!(Model::build(ModelConfig {
            encoder_widths: vec![12],
            ..tiny(AttentionMode::None)
        })
        .is_ok());
    }

    #[test]
    fn canonical_text_round_trips() {
        let cfg = tiny(AttentionMode::SpatialOnly);
        let text = cfg.to_canonical_text();
        assert!(text.starts_with("attention=spatial\nencoder_widths=8,16\n"));
        assert_eq!(ModelConfig::from_canonical_text(&text).unwrap(), cfg);
    }

    #[test]
    fn non_divisible_input_is_rejected_with_advice() {
        let m = Model::build(tiny(AttentionMode::Cascade)).unwrap();
        let err = m
            .forward(&Tensor::zeros([1, 3, 10, 12]))
            .unwrap_err()
            .to_string();
        assert!(err.contains("pad"), "{err}");
    }

    #[test]
    fn argmax_tie_goes_to_lower_class() {
        let logits = Tensor::new([1, 3, 1, 2], vec![1.0, 0.0, 1.0, 5.0, 0.5, 5.0]).unwrap();
        let maps = argmax_labels(&logits).unwrap();
        assert_eq!(maps[0].labels(), [0, 1]);
    }

    #[test]
    fn corrupt_checkpoint_is_rejected() {
        let m = Model::build(tiny(AttentionMode::Cascade)).unwrap();
        let bytes = m.checkpoint_bytes();
        let mut flipped = bytes.clone();
        flipped[20] ^= 1;
        assert!(matches!(
            Model::from_checkpoint_bytes(&flipped),
            Err(Error::Format(_))
        ));
        assert!(matches!(
            Model::from_checkpoint_bytes(&bytes[..bytes.len() / 2]),
            Err(Error::Format(_))
        ));
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(matches!(
            Model::from_checkpoint_bytes(&magic),
            Err(Error::Format(_))
        ));
        assert_eq!(Model::from_checkpoint_bytes(&bytes).unwrap(), m);
    }
}
