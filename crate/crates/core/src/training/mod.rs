//! End-to-end training with Adam, validation-based model selection, and
//! deterministic evaluation.
//!
//! Every episode draws its own RNG seeds from two master streams (episode
//! sampling and Gumbel noise) before any work is scheduled, and per-episode
//! gradients are reduced in episode order. Results are therefore identical
//! whether batches run sequentially or in parallel.

mod adam;
pub mod checkpoint;

use std::fmt::Write as _;
use std::path::Path;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use adam::{adam_step, AdamConfig, OptimizerState};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};

use crate::agents::{init_params, AgentParams, GameConfig};
use crate::config::{RunConfig, TrainConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::game::{eval_round, round_gradients, EpisodeSampler, RoundOutcome};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean of the epoch's batch-mean losses.
    pub train_loss: f64,
    pub val_accuracy: f64,
    pub temperature: f64,
}

/// Everything needed to continue training bit-exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: AgentParams,
    pub best_params: AgentParams,
    pub optimizer: OptimizerState,
    pub episode_rng: ChaCha8Rng,
    pub gumbel_rng: ChaCha8Rng,
    /// Completed epochs.
    pub epoch: usize,
    pub epochs_since_best: usize,
    pub best_epoch: Option<usize>,
    pub best_val_accuracy: f64,
    pub stopped_early: bool,
    pub history: Vec<EpochRecord>,
}

impl TrainState {
    pub fn new(config: &RunConfig) -> Result<Self> {
        config.validate()?;
        let params = init_params(&config.game, config.train.init_seed)?;
        Ok(Self {
            optimizer: OptimizerState::zeros(params.tensors()),
            best_params: params.clone(),
            params,
            episode_rng: ChaCha8Rng::seed_from_u64(config.train.episode_seed),
            gumbel_rng: ChaCha8Rng::seed_from_u64(config.train.gumbel_seed),
            epoch: 0,
            epochs_since_best: 0,
            best_epoch: None,
            best_val_accuracy: f64::NEG_INFINITY,
            stopped_early: false,
            history: Vec::new(),
        })
    }

    pub fn finished(&self, cfg: &TrainConfig) -> bool {
        self.stopped_early || self.epoch >= cfg.max_epochs
    }
}

fn adam_config(cfg: &TrainConfig) -> AdamConfig {
    AdamConfig {
        learning_rate: cfg.learning_rate,
        beta1: cfg.beta1,
        beta2: cfg.beta2,
        epsilon: cfg.epsilon,
    }
}

/// One pass of `episodes_per_epoch` training episodes followed by validation.
pub fn run_epoch(
    state: &mut TrainState,
    train: &Dataset,
    val: &Dataset,
    config: &RunConfig,
) -> Result<EpochRecord> {
    let tc = &config.train;
    let sampler = EpisodeSampler::new(train, &config.game)?;
    let temperature = tc.temperature.at(config.game.temperature, state.epoch);
    let game = GameConfig {
        temperature,
        ..config.game.clone()
    };
    let adam = adam_config(tc);
    let n_episodes = tc.episodes_per_epoch.unwrap_or(train.len());

    let mut batch_losses = Vec::new();
    let mut done = 0;
    while done < n_episodes {
        let b = tc.batch_episodes.min(n_episodes - done);
        done += b;
        let seeds: Vec<(u64, u64)> = (0..b)
            .map(|_| (state.episode_rng.next_u64(), state.gumbel_rng.next_u64()))
            .collect();
        let params = &state.params;
        let results = tc.exec.map(b, |i| {
            let mut episode_rng = ChaCha8Rng::seed_from_u64(seeds[i].0);
            let episode = sampler.sample(&mut episode_rng);
            let mut gumbel_rng = ChaCha8Rng::seed_from_u64(seeds[i].1);
            round_gradients(params, &episode, &game, &mut gumbel_rng)
        });

        let mut loss_sum = 0.0;
        let mut grads: Option<Vec<Vec<f64>>> = None;
        for result in results {
            let (outcome, g) = result?;
            loss_sum += outcome.loss;
            match &mut grads {
                None => grads = Some(g),
                Some(acc) => {
                    for (a, gi) in acc.iter_mut().zip(&g) {
                        a.iter_mut().zip(gi).for_each(|(x, y)| *x += y);
                    }
                }
            }
        }
        let mut grads = grads.expect("batch has at least one episode");
        let scale = 1.0 / b as f64;
        grads.iter_mut().flatten().for_each(|g| *g *= scale);
        let batch_loss = loss_sum * scale;
        if !batch_loss.is_finite() {
            return Err(Error::Training(format!(
                "non-finite batch loss at epoch {} after {done} episodes",
                state.epoch
            )));
        }
        adam_step(&mut state.params.tensors_mut(), &grads, &mut state.optimizer, &adam)?;
        batch_losses.push(batch_loss);
    }
    let train_loss = batch_losses.iter().sum::<f64>() / batch_losses.len() as f64;

    let outcomes = evaluate(&state.params, val, &config.game, tc.eval_episodes, tc.eval_seed, tc.exec)?;
    let val_accuracy = accuracy(&outcomes);
    let record = EpochRecord {
        epoch: state.epoch,
        train_loss,
        val_accuracy,
        temperature,
    };
    if val_accuracy > state.best_val_accuracy {
        state.best_val_accuracy = val_accuracy;
        state.best_params = state.params.clone();
        state.best_epoch = Some(state.epoch);
        state.epochs_since_best = 0;
    } else {
        state.epochs_since_best += 1;
    }
    state.history.push(record);
    state.epoch += 1;
    if state.epochs_since_best >= tc.early_stop_patience {
        state.stopped_early = true;
    }
    Ok(record)
}

/// Continues training from `state` until `max_epochs` or patience runs out,
/// calling `on_epoch` after every completed epoch.
pub fn resume<F>(
    mut state: TrainState,
    train: &Dataset,
    val: &Dataset,
    config: &RunConfig,
    mut on_epoch: F,
) -> Result<TrainState>
where
    F: FnMut(&TrainState) -> Result<()>,
{
    config.validate()?;
    while !state.finished(&config.train) {
        run_epoch(&mut state, train, val, config)?;
        on_epoch(&state)?;
    }
    Ok(state)
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    /// Parameters from the best validation epoch.
    pub params: AgentParams,
    pub history: Vec<EpochRecord>,
    pub state: TrainState,
}

pub fn train(train: &Dataset, val: &Dataset, config: &RunConfig) -> Result<TrainOutput> {
    let state = resume(TrainState::new(config)?, train, val, config, |_| Ok(()))?;
    Ok(TrainOutput {
        params: state.best_params.clone(),
        history: state.history.clone(),
        state,
    })
}

/// Plays `n_episodes` deterministic rounds with discrete symbols.
pub fn evaluate(
    params: &AgentParams,
    split: &Dataset,
    game: &GameConfig,
    n_episodes: usize,
    seed: u64,
    exec: Exec,
) -> Result<Vec<RoundOutcome>> {
    let sampler = EpisodeSampler::new(split, game)?;
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let seeds: Vec<u64> = (0..n_episodes).map(|_| master.next_u64()).collect();
    exec.map(n_episodes, |i| {
        let episode = sampler.sample(&mut ChaCha8Rng::seed_from_u64(seeds[i]));
        eval_round(params, &episode, game)
    })
    .into_iter()
    .collect()
}

fn accuracy(outcomes: &[RoundOutcome]) -> f64 {
    outcomes.iter().filter(|o| o.correct).count() as f64 / outcomes.len().max(1) as f64
}

/// `epoch,train_loss,val_accuracy,temperature` with round-trip float formatting.
pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,train_loss,val_accuracy,temperature\n");
    for h in history {
        let _ = writeln!(out, "{},{},{},{}", h.epoch, h.train_loss, h.val_accuracy, h.temperature);
    }
    out
}

pub fn write_history(path: impl AsRef<Path>, history: &[EpochRecord]) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, history_csv(history)).map_err(|e| Error::io(path, e))
}
