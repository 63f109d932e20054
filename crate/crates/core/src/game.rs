//! Episode construction and single rounds of the referential game.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};

use crate::agents::{receiver_forward, sender_forward, AgentParams, AgentVars, GameConfig, Mode, Variant};
use crate::autodiff::{Tape, Var};
use crate::data::{CellRecord, Dataset};
use crate::error::{Error, Result};

/// One round: a candidate per concept, the target, and the receiver's view order.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    /// `candidates[c]` is drawn from concept `c`.
    pub candidates: Vec<CellRecord>,
    pub target_index: usize,
    /// Receiver slot `j` shows `candidates[receiver_permutation[j]]`.
    pub receiver_permutation: Vec<usize>,
}

impl Episode {
    /// Sender inputs: all candidates target-first, or only the target.
    pub fn sender_inputs(&self, variant: Variant) -> Vec<&[f64]> {
        let target = self.candidates[self.target_index].features.as_slice();
        match variant {
            Variant::SenderSeesTarget => vec![target],
            Variant::SenderSeesAll => std::iter::once(target)
                .chain(
                    self.candidates
                        .iter()
                        .enumerate()
                        .filter(|(i, _)| *i != self.target_index)
                        .map(|(_, c)| c.features.as_slice()),
                )
                .collect(),
        }
    }

    pub fn receiver_inputs(&self) -> Vec<&[f64]> {
        self.receiver_permutation
            .iter()
            .map(|&i| self.candidates[i].features.as_slice())
            .collect()
    }

    /// Receiver slot holding the target.
    pub fn permuted_target(&self) -> usize {
        self.receiver_permutation
            .iter()
            .position(|&i| i == self.target_index)
            .expect("permutation contains the target")
    }

    pub fn target_label(&self) -> usize {
        self.candidates[self.target_index].label
    }
}

/// Draws episodes from one split, with replacement across rounds.
#[derive(Debug)]
pub struct EpisodeSampler<'a> {
    dataset: &'a Dataset,
    groups: Vec<Vec<usize>>,
}

impl<'a> EpisodeSampler<'a> {
    pub fn new(dataset: &'a Dataset, cfg: &GameConfig) -> Result<Self> {
        if dataset.n_concepts() != cfg.n_concepts {
            return Err(Error::Data(format!(
                "dataset has {} concepts but the game expects {}",
                dataset.n_concepts(),
                cfg.n_concepts
            )));
        }
        if dataset.feature_dim != cfg.feature_dim {
            return Err(Error::Data(format!(
                "dataset has {} features but the game expects {}",
                dataset.feature_dim, cfg.feature_dim
            )));
        }
        let groups = dataset.by_class();
        if let Some(empty) = groups.iter().position(Vec::is_empty) {
            return Err(Error::Data(format!(
                "concept `{}` has no records in this split",
                dataset.concepts[empty]
            )));
        }
        Ok(Self { dataset, groups })
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Episode {
        let candidates = self
            .groups
            .iter()
            .map(|g| self.dataset.records[g[rng.random_range(0..g.len())]].clone())
            .collect();
        let k = self.groups.len();
        let target_index = rng.random_range(0..k);
        let mut receiver_permutation: Vec<usize> = (0..k).collect();
        receiver_permutation.shuffle(rng);
        Episode {
            candidates,
            target_index,
            receiver_permutation,
        }
    }
}

pub fn sample_episode<R: Rng + ?Sized>(dataset: &Dataset, cfg: &GameConfig, rng: &mut R) -> Result<Episode> {
    Ok(EpisodeSampler::new(dataset, cfg)?.sample(rng))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoundOutcome {
    pub loss: f64,
    /// Receiver slot picked.
    pub receiver_guess: usize,
    pub correct: bool,
    pub symbol_index: usize,
    /// Concept of the target.
    pub target_label: usize,
}

/// A played round together with its loss node.
#[derive(Debug, Clone, Copy)]
pub struct Round {
    pub outcome: RoundOutcome,
    pub loss: Var,
}

/// Plays one round on `tape`.
///
/// The receiver only ever sees the symbol and the permuted candidates; the
/// loss targets the target's permuted slot.
pub fn play_round<R: Rng + ?Sized>(
    tape: &mut Tape,
    episode: &Episode,
    agents: &AgentVars,
    cfg: &GameConfig,
    rng: &mut R,
    mode: Mode,
) -> Result<Round> {
    let sender_inputs = episode.sender_inputs(cfg.variant);
    let sent = sender_forward(tape, &agents.sender, cfg, &sender_inputs, rng, mode)?;
    let log_probs = receiver_forward(tape, &agents.receiver, cfg, sent.symbol, &episode.receiver_inputs())?;
    let target = episode.permuted_target();
    let loss = tape.nll_loss(log_probs, target)?;
    let receiver_guess = tape.value(log_probs).argmax();
    let outcome = RoundOutcome {
        loss: tape.value(loss).item(),
        receiver_guess,
        correct: receiver_guess == target,
        symbol_index: tape.value(sent.symbol).argmax(),
        target_label: episode.target_label(),
    };
    Ok(Round { outcome, loss })
}

/// Deterministic evaluation round with discrete symbols.
pub fn eval_round(params: &AgentParams, episode: &Episode, cfg: &GameConfig) -> Result<RoundOutcome> {
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape, false);
    // EvalHard never draws noise; any RNG will do.
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    Ok(play_round(&mut tape, episode, &vars, cfg, &mut rng, Mode::EvalHard)?.outcome)
}

/// Plays a soft training round and returns per-parameter gradients in
/// canonical parameter order.
pub fn round_gradients<R: Rng + ?Sized>(
    params: &AgentParams,
    episode: &Episode,
    cfg: &GameConfig,
    rng: &mut R,
) -> Result<(RoundOutcome, Vec<Vec<f64>>)> {
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape, true);
    let round = play_round(&mut tape, episode, &vars, cfg, rng, Mode::TrainSoft)?;
    tape.backward(round.loss)?;
    let grads = vars
        .all()
        .iter()
        .zip(params.tensors())
        .map(|(v, t)| tape.take_grad(*v).unwrap_or_else(|| vec![0.0; t.len()]))
        .collect();
    Ok((round.outcome, grads))
}
