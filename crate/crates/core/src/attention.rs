//! Channel attention, spatial attention and their channel-first cascade.
//!
//! Channel attention squeezes the feature map with global average and max
//! pooling, runs both descriptors through one shared bias-free two-layer
//! perceptron (hidden width `C/8`), sums them and applies a sigmoid to get a
//! per-channel weight. Spatial attention pools across channels at each
//! position, stacks the average and max maps, and convolves them with a
//! bias-free 7×7 kernel followed by a sigmoid. The block adds `C·C/4 + 98`
//! parameters when `8 | C`.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::ops::{Padding, PoolMode, PoolScope};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const SPATIAL_KERNEL: usize = 7;

/// Nonlinearity between the two perceptron layers of channel attention.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum HiddenActivation {
    #[default]
    Relu,
    Identity,
}

impl fmt::Display for HiddenActivation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HiddenActivation::Relu => "relu",
            HiddenActivation::Identity => "identity",
        })
    }
}

impl FromStr for HiddenActivation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Self::Relu),
            "identity" => Ok(Self::Identity),
            other => Err(Error::Config(format!(
                "unknown hidden activation {other:?}"
            ))),
        }
    }
}

/// Hidden width of the channel perceptron: `max(1, floor(C/8))`.
pub fn hidden_width(channels: usize) -> usize {
    (channels / 8).max(1)
}

fn kaiming<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    Tensor::normal(shape, (2.0 / fan_in as f32).sqrt(), rng)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChannelAttentionParams {
    /// `C × C/8`
    pub w1: Tensor,
    /// `C/8 × C`
    pub w2: Tensor,
}

impl ChannelAttentionParams {
    pub fn init<R: Rng + ?Sized>(channels: usize, rng: &mut R) -> Self {
        let hidden = hidden_width(channels);
        Self {
            w1: kaiming(&[channels, hidden], channels, rng),
            w2: kaiming(&[hidden, channels], hidden, rng),
        }
    }

    pub fn zeros(channels: usize) -> Self {
        let hidden = hidden_width(channels);
        Self {
            w1: Tensor::zeros([channels, hidden]),
            w2: Tensor::zeros([hidden, channels]),
        }
    }

    pub fn from_weights(w1: Tensor, w2: Tensor) -> Result<Self> {
        match (w1.shape(), w2.shape()) {
            (&[c, h], &[h2, c2]) if c == c2 && h == h2 => Ok(Self { w1, w2 }),
            (a, b) => Err(Error::contract(
                "channel_attention",
                format!("perceptron weights {a:?} and {b:?} are not C×h and h×C"),
            )),
        }
    }

    pub fn channels(&self) -> usize {
        self.w1.shape()[0]
    }

    pub fn param_count(&self) -> usize {
        self.w1.numel() + self.w2.numel()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpatialAttentionParams {
    /// `1 × 2 × 7 × 7`; input channel 0 sees the average map, 1 the max map.
    pub kernel: Tensor,
}

impl SpatialAttentionParams {
    pub fn init<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let shape = [1, 2, SPATIAL_KERNEL, SPATIAL_KERNEL];
        Self {
            kernel: kaiming(&shape, 2 * SPATIAL_KERNEL * SPATIAL_KERNEL, rng),
        }
    }

    pub fn zeros() -> Self {
        Self {
            kernel: Tensor::zeros([1, 2, SPATIAL_KERNEL, SPATIAL_KERNEL]),
        }
    }

    pub fn from_kernel(kernel: Tensor) -> Result<Self> {
        if kernel.shape() != [1, 2, SPATIAL_KERNEL, SPATIAL_KERNEL] {
            return Err(Error::contract(
                "spatial_attention",
                format!("kernel must be 1×2×7×7, got {:?}", kernel.shape()),
            ));
        }
        Ok(Self { kernel })
    }

    pub fn param_count(&self) -> usize {
        self.kernel.numel()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamCount {
    pub channel: usize,
    pub spatial: usize,
}

impl ParamCount {
    pub fn total(&self) -> usize {
        self.channel + self.spatial
    }
}

/// Channel attention followed by spatial attention.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionBlock {
    pub channel: ChannelAttentionParams,
    pub spatial: SpatialAttentionParams,
    pub hidden: HiddenActivation,
}

impl AttentionBlock {
    pub fn init<R: Rng + ?Sized>(channels: usize, rng: &mut R) -> Self {
        let channel = ChannelAttentionParams::init(channels, rng);
        let spatial = SpatialAttentionParams::init(rng);
        Self {
            channel,
            spatial,
            hidden: HiddenActivation::Relu,
        }
    }

    pub fn zeros(channels: usize) -> Self {
        Self {
            channel: ChannelAttentionParams::zeros(channels),
            spatial: SpatialAttentionParams::zeros(),
            hidden: HiddenActivation::Relu,
        }
    }

    pub fn param_count(&self) -> ParamCount {
        param_count(self)
    }

    /// Records the parameters on `tape`, as variables when `trainable`.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundAttention {
        let mut leaf = |t: &Tensor| {
            if trainable {
                tape.variable(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        BoundAttention {
            channel: Some(BoundChannel {
                w1: leaf(&self.channel.w1),
                w2: leaf(&self.channel.w2),
                hidden: self.hidden,
            }),
            spatial: Some(leaf(&self.spatial.kernel)),
        }
    }

    /// Tape-free cascade refinement.
    pub fn refine(&self, features: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let f = tape.constant(features.clone());
        let gate = self.bind(&mut tape, false);
        let out = cbam_refine(&mut tape, f, &gate)?;
        Ok(tape.value(out).clone())
    }

    /// Tape-free channel weights `N×C×1×1`.
    pub fn channel_weights(&self, features: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let f = tape.constant(features.clone());
        let gate = self.bind(&mut tape, false);
        let w = gate
            .channel_weights(&mut tape, f)?
            .expect("channel stage bound");
        Ok(tape.value(w).clone())
    }

    /// Tape-free spatial weights `N×1×H×W`.
    pub fn spatial_weights(&self, features: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let f = tape.constant(features.clone());
        let gate = self.bind(&mut tape, false);
        let w = gate
            .spatial_weights(&mut tape, f)?
            .expect("spatial stage bound");
        Ok(tape.value(w).clone())
    }
}

/// Exact parameter counts read from the stored shapes.
pub fn param_count(block: &AttentionBlock) -> ParamCount {
    ParamCount {
        channel: block.channel.param_count(),
        spatial: block.spatial.param_count(),
    }
}

/// Source of attention weights for [`cbam_refine`]. A stage returning `None`
/// is skipped, which is how the single-branch ablations are expressed.
pub trait AttentionGate {
    fn channel_weights(&self, tape: &mut Tape, features: Var) -> Result<Option<Var>>;
    fn spatial_weights(&self, tape: &mut Tape, features: Var) -> Result<Option<Var>>;
}

#[derive(Clone, Copy, Debug)]
pub struct BoundChannel {
    pub w1: Var,
    pub w2: Var,
    pub hidden: HiddenActivation,
}

/// Attention parameters recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct BoundAttention {
    pub channel: Option<BoundChannel>,
    pub spatial: Option<Var>,
}

impl AttentionGate for BoundAttention {
    fn channel_weights(&self, tape: &mut Tape, features: Var) -> Result<Option<Var>> {
        self.channel
            .map(|c| channel_attention(tape, features, c.w1, c.w2, c.hidden))
            .transpose()
    }

    fn spatial_weights(&self, tape: &mut Tape, features: Var) -> Result<Option<Var>> {
        self.spatial
            .map(|k| spatial_attention(tape, features, k))
            .transpose()
    }
}

/// Gate whose attention maps are identically one.
#[derive(Clone, Copy, Debug, Default)]
pub struct UnitGate;

impl AttentionGate for UnitGate {
    fn channel_weights(&self, tape: &mut Tape, features: Var) -> Result<Option<Var>> {
        let (n, c, _, _) = tape.value(features).dims4("channel_attention")?;
        Ok(Some(tape.constant(Tensor::ones([n, c, 1, 1]))))
    }

    fn spatial_weights(&self, tape: &mut Tape, features: Var) -> Result<Option<Var>> {
        let (n, _, h, w) = tape.value(features).dims4("spatial_attention")?;
        Ok(Some(tape.constant(Tensor::ones([n, 1, h, w]))))
    }
}

fn perceptron(tape: &mut Tape, x: Var, w1: Var, w2: Var, hidden: HiddenActivation) -> Result<Var> {
    let h = tape.dense(x, w1, None)?;
    let h = match hidden {
        HiddenActivation::Relu => tape.relu(h)?,
        HiddenActivation::Identity => h,
    };
    tape.dense(h, w2, None)
}

/// `sigmoid(MLP(avgpool F) + MLP(maxpool F))`, shaped `N×C×1×1`.
pub fn channel_attention(
    tape: &mut Tape,
    features: Var,
    w1: Var,
    w2: Var,
    hidden: HiddenActivation,
) -> Result<Var> {
    let (n, c, _, _) = tape.value(features).dims4("channel_attention")?;
    let expected = tape.value(w1).shape().first().copied();
    if expected != Some(c) {
        return Err(Error::contract(
            "channel_attention",
            format!(
                "feature map has {c} channels but the perceptron expects {:?}",
                tape.value(w1).shape()
            ),
        ));
    }
    let mut branch = |mode| -> Result<Var> {
        let pooled = tape.pool2d(features, mode, PoolScope::GlobalSpatial)?;
        let flat = tape.reshape(pooled, &[n, c])?;
        perceptron(tape, flat, w1, w2, hidden)
    };
    let avg = branch(PoolMode::Avg)?;
    let max = branch(PoolMode::Max)?;
    let logits = tape.add(avg, max)?;
    let weights = tape.gate_sigmoid(logits)?;
    tape.reshape(weights, &[n, c, 1, 1])
}

/// `sigmoid(conv7x7([avgpool_c F; maxpool_c F]))`, shaped `N×1×H×W`.
pub fn spatial_attention(tape: &mut Tape, features: Var, kernel: Var) -> Result<Var> {
    tape.value(features).dims4("spatial_attention")?;
    let avg = tape.pool2d(features, PoolMode::Avg, PoolScope::GlobalChannel)?;
    let max = tape.pool2d(features, PoolMode::Max, PoolScope::GlobalChannel)?;
    let stacked = tape.concat_channels(&[avg, max])?;
    let logits = tape.conv2d(stacked, kernel, None, 1, Padding::Same)?;
    tape.gate_sigmoid(logits)
}

/// Multiplies `features` by channel (`N×C×1×1`) or spatial (`N×1×H×W`) weights.
pub fn apply_attention(tape: &mut Tape, features: Var, weights: Var) -> Result<Var> {
    let (n, c, h, w) = tape.value(features).dims4("apply_attention")?;
    let ws = tape.value(weights).shape();
    if ws != [n, c, 1, 1] && ws != [n, 1, h, w] {
        return Err(Error::contract(
            "apply_attention",
            format!(
                "weights {ws:?} broadcast neither per channel nor per position over {:?}",
                [n, c, h, w]
            ),
        ));
    }
    tape.mul(features, weights)
}

/// Channel refinement then spatial refinement of `features`.
pub fn cbam_refine<G: AttentionGate + ?Sized>(
    tape: &mut Tape,
    features: Var,
    gate: &G,
) -> Result<Var> {
    let mut refined = features;
    if let Some(wc) = gate.channel_weights(tape, refined)? {
        refined = apply_attention(tape, refined, wc)?;
    }
    if let Some(ws) = gate.spatial_weights(tape, refined)? {
        refined = apply_attention(tape, refined, ws)?;
    }
    Ok(refined)
}
