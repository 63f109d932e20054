//! Sender and receiver networks.
//!
//! The sender embeds each input vector, lays the embeddings out as one
//! single-channel sequence, runs a valid 1-D convolution with a sigmoid, and
//! maps the flattened feature maps to vocabulary scores that feed the
//! Gumbel-softmax channel. The receiver embeds the symbol and every candidate
//! into a shared space and scores candidates by dot product.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Which inputs the sender observes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// The sender sees all K candidates, target first.
    SenderSeesAll,
    /// The sender sees only the target.
    SenderSeesTarget,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::SenderSeesAll => "sender-sees-all",
            Variant::SenderSeesTarget => "sender-sees-target",
        })
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "sender-sees-all" => Ok(Variant::SenderSeesAll),
            "sender-sees-target" => Ok(Variant::SenderSeesTarget),
            other => Err(format!(
                "unknown variant `{other}` (expected sender-sees-all or sender-sees-target)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GameConfig {
    pub n_concepts: usize,
    pub vocab_size: usize,
    pub feature_dim: usize,
    pub embed_dim: usize,
    pub conv_filters: usize,
    pub conv_width: usize,
    pub temperature: f64,
    /// Straight-through hard samples during training.
    pub straight_through: bool,
    pub variant: Variant,
}

impl GameConfig {
    pub fn new(variant: Variant) -> Self {
        Self {
            n_concepts: 5,
            vocab_size: 100,
            feature_dim: 28,
            embed_dim: 15,
            conv_filters: 20,
            conv_width: 5,
            temperature: 1.0,
            straight_through: false,
            variant,
        }
    }

    /// Number of input vectors the sender observes.
    pub fn sender_arity(&self) -> usize {
        match self.variant {
            Variant::SenderSeesAll => self.n_concepts,
            Variant::SenderSeesTarget => 1,
        }
    }

    pub fn sequence_len(&self) -> usize {
        self.sender_arity() * self.embed_dim
    }

    pub fn flattened_conv_len(&self) -> usize {
        self.conv_filters * (self.sequence_len() + 1 - self.conv_width)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("game.n_concepts", self.n_concepts),
            ("game.vocab_size", self.vocab_size),
            ("game.feature_dim", self.feature_dim),
            ("game.embed_dim", self.embed_dim),
            ("game.conv_filters", self.conv_filters),
            ("game.conv_width", self.conv_width),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(Error::config(key, "must be positive"));
            }
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::config("game.temperature", "must be positive"));
        }
        if self.vocab_size < self.n_concepts {
            return Err(Error::config(
                "game.vocab_size",
                format!("must be at least n_concepts ({})", self.n_concepts),
            ));
        }
        if self.conv_width > self.sequence_len() {
            return Err(Error::config(
                "game.conv_width",
                format!(
                    "must not exceed the sender sequence length {}",
                    self.sequence_len()
                ),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SenderParams {
    pub embed_weight: Tensor,
    pub embed_bias: Tensor,
    pub conv_kernels: Tensor,
    pub conv_bias: Tensor,
    pub out_weight: Tensor,
    pub out_bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReceiverParams {
    pub image_embed_weight: Tensor,
    pub image_embed_bias: Tensor,
    pub symbol_embed_weight: Tensor,
    pub symbol_embed_bias: Tensor,
}

/// Both agents' parameters. The agents share nothing.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentParams {
    pub sender: SenderParams,
    pub receiver: ReceiverParams,
}

/// Parameter names in their canonical order.
pub const PARAM_NAMES: [&str; 10] = [
    "sender.embed_weight",
    "sender.embed_bias",
    "sender.conv_kernels",
    "sender.conv_bias",
    "sender.out_weight",
    "sender.out_bias",
    "receiver.image_embed_weight",
    "receiver.image_embed_bias",
    "receiver.symbol_embed_weight",
    "receiver.symbol_embed_bias",
];

/// Expected shape of every parameter, in [`PARAM_NAMES`] order.
pub fn param_shapes(cfg: &GameConfig) -> [Vec<usize>; 10] {
    let (e, f, v) = (cfg.embed_dim, cfg.feature_dim, cfg.vocab_size);
    [
        vec![e, f],
        vec![e],
        vec![cfg.conv_filters, 1, cfg.conv_width],
        vec![cfg.conv_filters],
        vec![v, cfg.flattened_conv_len()],
        vec![v],
        vec![e, f],
        vec![e],
        vec![e, v],
        vec![e],
    ]
}

impl AgentParams {
    pub fn tensors(&self) -> [&Tensor; 10] {
        let (s, r) = (&self.sender, &self.receiver);
        [
            &s.embed_weight,
            &s.embed_bias,
            &s.conv_kernels,
            &s.conv_bias,
            &s.out_weight,
            &s.out_bias,
            &r.image_embed_weight,
            &r.image_embed_bias,
            &r.symbol_embed_weight,
            &r.symbol_embed_bias,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 10] {
        let (s, r) = (&mut self.sender, &mut self.receiver);
        [
            &mut s.embed_weight,
            &mut s.embed_bias,
            &mut s.conv_kernels,
            &mut s.conv_bias,
            &mut s.out_weight,
            &mut s.out_bias,
            &mut r.image_embed_weight,
            &mut r.image_embed_bias,
            &mut r.symbol_embed_weight,
            &mut r.symbol_embed_bias,
        ]
    }

    pub fn named(&self) -> impl Iterator<Item = (&'static str, &Tensor)> {
        PARAM_NAMES.into_iter().zip(self.tensors())
    }

    pub fn num_values(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Rebuilds parameters from tensors given in [`PARAM_NAMES`] order,
    /// checking every shape against `cfg`.
    pub fn from_tensors(cfg: &GameConfig, tensors: Vec<Tensor>) -> Result<Self> {
        if tensors.len() != PARAM_NAMES.len() {
            return Err(Error::Contract(format!(
                "expected {} parameter tensors, got {}",
                PARAM_NAMES.len(),
                tensors.len()
            )));
        }
        for ((name, shape), t) in PARAM_NAMES.iter().zip(param_shapes(cfg)).zip(&tensors) {
            if t.shape() != shape.as_slice() {
                return Err(Error::Dimension {
                    op: name,
                    lhs: shape,
                    rhs: t.shape().to_vec(),
                });
            }
        }
        let mut it = tensors.into_iter().map(|t| t.with_requires_grad(false));
        let mut next = || it.next().expect("length checked above");
        Ok(Self {
            sender: SenderParams {
                embed_weight: next(),
                embed_bias: next(),
                conv_kernels: next(),
                conv_bias: next(),
                out_weight: next(),
                out_bias: next(),
            },
            receiver: ReceiverParams {
                image_embed_weight: next(),
                image_embed_bias: next(),
                symbol_embed_weight: next(),
                symbol_embed_bias: next(),
            },
        })
    }

    /// Records every parameter as a tape leaf.
    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> AgentVars {
        let mut vars = self
            .tensors()
            .map(|t| tape.leaf(t.clone().with_requires_grad(requires_grad)))
            .into_iter();
        let mut next = || vars.next().expect("ten parameters");
        AgentVars {
            sender: SenderVars {
                embed_weight: next(),
                embed_bias: next(),
                conv_kernels: next(),
                conv_bias: next(),
                out_weight: next(),
                out_bias: next(),
            },
            receiver: ReceiverVars {
                image_embed_weight: next(),
                image_embed_bias: next(),
                symbol_embed_weight: next(),
                symbol_embed_bias: next(),
            },
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SenderVars {
    pub embed_weight: Var,
    pub embed_bias: Var,
    pub conv_kernels: Var,
    pub conv_bias: Var,
    pub out_weight: Var,
    pub out_bias: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct ReceiverVars {
    pub image_embed_weight: Var,
    pub image_embed_bias: Var,
    pub symbol_embed_weight: Var,
    pub symbol_embed_bias: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct AgentVars {
    pub sender: SenderVars,
    pub receiver: ReceiverVars,
}

impl AgentVars {
    pub fn all(&self) -> [Var; 10] {
        let (s, r) = (&self.sender, &self.receiver);
        [
            s.embed_weight,
            s.embed_bias,
            s.conv_kernels,
            s.conv_bias,
            s.out_weight,
            s.out_bias,
            r.image_embed_weight,
            r.image_embed_bias,
            r.symbol_embed_weight,
            r.symbol_embed_bias,
        ]
    }
}

/// Glorot-uniform weights, zero biases, deterministic in `seed`.
pub fn init_params(cfg: &GameConfig, seed: u64) -> Result<AgentParams> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tensors = param_shapes(cfg)
        .into_iter()
        .map(|shape| {
            let n: usize = shape.iter().product();
            let values = match shape.len() {
                1 => vec![0.0; n],
                _ => {
                    let (fan_in, fan_out) = fans(&shape);
                    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    (0..n).map(|_| rng.random_range(-a..a)).collect()
                }
            };
            Tensor::new(shape, values)
        })
        .collect::<Result<Vec<_>>>()?;
    AgentParams::from_tensors(cfg, tensors)
}

fn fans(shape: &[usize]) -> (usize, usize) {
    let receptive: usize = shape[2..].iter().product();
    (shape[1] * receptive, shape[0] * receptive)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Relaxed Gumbel-softmax symbol; differentiable.
    TrainSoft,
    /// One-hot argmax of the logits, no noise.
    EvalHard,
}

#[derive(Debug, Clone, Copy)]
pub struct SenderOutput {
    pub symbol: Var,
    pub logits: Var,
}

/// Runs the sender on `inputs` (K vectors target-first, or the target alone).
pub fn sender_forward<R: Rng + ?Sized>(
    tape: &mut Tape,
    params: &SenderVars,
    cfg: &GameConfig,
    inputs: &[&[f64]],
    rng: &mut R,
    mode: Mode,
) -> Result<SenderOutput> {
    if inputs.len() != cfg.sender_arity() {
        return Err(Error::Contract(format!(
            "{} sender expects {} input vectors, got {}",
            cfg.variant,
            cfg.sender_arity(),
            inputs.len()
        )));
    }
    let embedded = inputs
        .iter()
        .map(|x| {
            let x = tape.constant(Tensor::vector(x.to_vec()));
            tape.linear(x, params.embed_weight, params.embed_bias)
        })
        .collect::<Result<Vec<_>>>()?;
    let sequence = tape.concat(&embedded)?;
    let sequence = tape.reshape(sequence, vec![1, cfg.sequence_len()])?;
    let maps = tape.conv1d(sequence, params.conv_kernels, params.conv_bias)?;
    let maps = tape.sigmoid(maps)?;
    let flat = tape.reshape(maps, vec![cfg.flattened_conv_len()])?;
    let logits = tape.linear(flat, params.out_weight, params.out_bias)?;
    let symbol = match mode {
        Mode::TrainSoft => {
            tape.gumbel_softmax(logits, cfg.temperature, cfg.straight_through, rng)?
        }
        Mode::EvalHard => {
            let index = tape.value(logits).argmax();
            tape.constant(Tensor::one_hot(cfg.vocab_size, index))
        }
    };
    Ok(SenderOutput { symbol, logits })
}

/// Log-probabilities over `candidates` of being the sender's target.
pub fn receiver_forward(
    tape: &mut Tape,
    params: &ReceiverVars,
    cfg: &GameConfig,
    symbol: Var,
    candidates: &[&[f64]],
) -> Result<Var> {
    if candidates.len() != cfg.n_concepts {
        return Err(Error::Contract(format!(
            "receiver expects {} candidates, got {}",
            cfg.n_concepts,
            candidates.len()
        )));
    }
    let message = tape.linear(symbol, params.symbol_embed_weight, params.symbol_embed_bias)?;
    let scores = candidates
        .iter()
        .map(|c| {
            let c = tape.constant(Tensor::vector(c.to_vec()));
            let e = tape.linear(c, params.image_embed_weight, params.image_embed_bias)?;
            tape.dot(message, e)
        })
        .collect::<Result<Vec<_>>>()?;
    let scores = tape.concat(&scores)?;
    tape.log_softmax(scores)
}
