//! Independent oracles shared by the integration and acceptance tests.
//!
//! Nothing here calls back into the library code it is used to check: the
//! gradient cases go through `GradCheck` (forward-only numerics), conv1d and
//! the table metrics are written out as plain nested loops.

#![allow(dead_code)]

use std::collections::HashMap;

use lewisgame::agents::{
    receiver_forward, sender_forward, AgentParams, AgentVars, GameConfig, Mode, ReceiverVars,
    SenderVars, Variant,
};
use lewisgame::autodiff::{GradCheck, Tape, Tensor, Var};
use lewisgame::data::Dataset;
use lewisgame::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const GRAD_STEP: f64 = 1e-5;

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    let values = (0..n).map(|_| rng.random_range(-scale..scale)).collect();
    Tensor::new(shape.to_vec(), values).unwrap()
}

/// Reduces a tensor-valued output to a scalar with fixed random weights.
fn project(tape: &mut Tape, y: Var, weights: &Tensor) -> Result<Var> {
    let w = tape.constant(weights.clone());
    let flat = tape.reshape(y, vec![weights.len()])?;
    tape.dot(flat, w)
}

pub type Case = (Vec<Tensor>, Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>);

pub const PRIMITIVES: [&str; 9] = [
    "linear", "conv1d", "sigmoid", "log_softmax", "dot", "nll_loss", "gumbel_softmax", "concat",
    "add_scale",
];

/// One random instance of a primitive wrapped into a scalar function.
pub fn primitive_case(name: &str, rng: &mut ChaCha8Rng) -> Case {
    let n_in = rng.random_range(1..6);
    let n_out = rng.random_range(1..6);
    match name {
        "linear" => {
            let proj = random_tensor(rng, &[n_out], 1.0);
            (
                vec![
                    random_tensor(rng, &[n_in], 2.0),
                    random_tensor(rng, &[n_out, n_in], 1.0),
                    random_tensor(rng, &[n_out], 1.0),
                ],
                Box::new(move |t, v| {
                    let y = t.linear(v[0], v[1], v[2])?;
                    project(t, y, &proj)
                }),
            )
        }
        "conv1d" => {
            let c_in = rng.random_range(1..4);
            let c_out = rng.random_range(1..4);
            let width = rng.random_range(1..5);
            let len = width + rng.random_range(0..6);
            let proj = random_tensor(rng, &[c_out * (len - width + 1)], 1.0);
            (
                vec![
                    random_tensor(rng, &[c_in, len], 2.0),
                    random_tensor(rng, &[c_out, c_in, width], 1.0),
                    random_tensor(rng, &[c_out], 1.0),
                ],
                Box::new(move |t, v| {
                    let y = t.conv1d(v[0], v[1], v[2])?;
                    project(t, y, &proj)
                }),
            )
        }
        "sigmoid" => {
            let proj = random_tensor(rng, &[n_in], 1.0);
            (
                vec![random_tensor(rng, &[n_in], 4.0)],
                Box::new(move |t, v| {
                    let y = t.sigmoid(v[0])?;
                    project(t, y, &proj)
                }),
            )
        }
        "log_softmax" => {
            let n = n_in + 1;
            let proj = random_tensor(rng, &[n], 1.0);
            (
                vec![random_tensor(rng, &[n], 3.0)],
                Box::new(move |t, v| {
                    let y = t.log_softmax(v[0])?;
                    project(t, y, &proj)
                }),
            )
        }
        "dot" => (
            vec![random_tensor(rng, &[n_in], 2.0), random_tensor(rng, &[n_in], 2.0)],
            Box::new(|t, v| t.dot(v[0], v[1])),
        ),
        "nll_loss" => {
            let n = n_in + 1;
            let target = rng.random_range(0..n);
            (
                vec![random_tensor(rng, &[n], 3.0)],
                Box::new(move |t, v| {
                    let lp = t.log_softmax(v[0])?;
                    t.nll_loss(lp, target)
                }),
            )
        }
        "gumbel_softmax" => {
            let n = n_in + 1;
            let temperature = rng.random_range(0.5..2.0);
            let noise: Vec<f64> = (0..n)
                .map(|_| -(-rng.random_range(1e-6..1.0f64).ln()).ln())
                .collect();
            let proj = random_tensor(rng, &[n], 1.0);
            (
                vec![random_tensor(rng, &[n], 2.0)],
                Box::new(move |t, v| {
                    let y = t.gumbel_softmax_with_noise(v[0], &noise, temperature, false)?;
                    project(t, y, &proj)
                }),
            )
        }
        "concat" => {
            let proj = random_tensor(rng, &[n_in + n_out], 1.0);
            (
                vec![random_tensor(rng, &[n_in], 2.0), random_tensor(rng, &[n_out], 2.0)],
                Box::new(move |t, v| {
                    let y = t.concat(&[v[0], v[1]])?;
                    project(t, y, &proj)
                }),
            )
        }
        "add_scale" => {
            let factor = rng.random_range(-3.0..3.0);
            let proj = random_tensor(rng, &[n_in], 1.0);
            (
                vec![random_tensor(rng, &[n_in], 2.0), random_tensor(rng, &[n_in], 2.0)],
                Box::new(move |t, v| {
                    let s = t.add(v[0], v[1])?;
                    let y = t.scale(s, factor)?;
                    project(t, y, &proj)
                }),
            )
        }
        other => panic!("unknown primitive {other}"),
    }
}

/// Small game for the composite check: full-size dimensions would need
/// hundreds of thousands of finite-difference evaluations.
pub fn small_game(variant: Variant) -> GameConfig {
    GameConfig {
        n_concepts: 3,
        vocab_size: 6,
        feature_dim: 4,
        embed_dim: 3,
        conv_filters: 2,
        conv_width: 3,
        ..GameConfig::new(variant)
    }
}

pub fn vars_from_slice(v: &[Var]) -> AgentVars {
    AgentVars {
        sender: SenderVars {
            embed_weight: v[0],
            embed_bias: v[1],
            conv_kernels: v[2],
            conv_bias: v[3],
            out_weight: v[4],
            out_bias: v[5],
        },
        receiver: ReceiverVars {
            image_embed_weight: v[6],
            image_embed_bias: v[7],
            symbol_embed_weight: v[8],
            symbol_embed_bias: v[9],
        },
    }
}

/// Sender → Gumbel channel → receiver → NLL with the noise frozen by a fixed
/// seed, differentiated with respect to all ten parameter tensors.
pub fn composite_error(rng: &mut ChaCha8Rng, variant: Variant) -> f64 {
    let cfg = GameConfig {
        temperature: rng.random_range(0.5..2.0),
        ..small_game(variant)
    };
    let params: Vec<Tensor> = lewisgame::agents::param_shapes(&cfg)
        .iter()
        .map(|s| random_tensor(rng, s, 1.0))
        .collect();
    let candidates: Vec<Vec<f64>> = (0..cfg.n_concepts)
        .map(|_| (0..cfg.feature_dim).map(|_| rng.random_range(-2.0..2.0)).collect())
        .collect();
    let target = rng.random_range(0..cfg.n_concepts);
    let noise_seed: u64 = rng.random();
    GradCheck::new(GRAD_STEP)
        .run(&params, |tape, v| {
            let vars = vars_from_slice(v);
            let cands: Vec<&[f64]> = candidates.iter().map(Vec::as_slice).collect();
            let mut sender_in = vec![cands[target]];
            if cfg.variant == Variant::SenderSeesAll {
                sender_in.extend(cands.iter().enumerate().filter(|(i, _)| *i != target).map(|(_, c)| *c));
            }
            let mut noise = ChaCha8Rng::seed_from_u64(noise_seed);
            let out = sender_forward(tape, &vars.sender, &cfg, &sender_in, &mut noise, Mode::TrainSoft)?;
            let lp = receiver_forward(tape, &vars.receiver, &cfg, out.symbol, &cands)?;
            tape.nll_loss(lp, target)
        })
        .unwrap()
}

/// Straightforward nested-loop valid convolution.
pub fn conv1d_oracle(x: &[Vec<f64>], kernels: &[Vec<Vec<f64>>], bias: &[f64]) -> Vec<Vec<f64>> {
    let len = x[0].len();
    let width = kernels[0][0].len();
    let mut out = Vec::new();
    for (o, k) in kernels.iter().enumerate() {
        let mut row = Vec::new();
        for t in 0..=len - width {
            let mut acc = bias[o];
            for (c, kc) in k.iter().enumerate() {
                for j in 0..width {
                    acc += kc[j] * x[c][t + j];
                }
            }
            row.push(acc);
        }
        out.push(row);
    }
    out
}

// Brute-force metrics over an explicit list of (class, symbol) events.

pub fn events_from_counts(counts: &[Vec<u64>]) -> Vec<(usize, usize)> {
    let mut events = Vec::new();
    for (c, row) in counts.iter().enumerate() {
        for (s, &n) in row.iter().enumerate() {
            for _ in 0..n {
                events.push((c, s));
            }
        }
    }
    events
}

/// Majority symbol per class by counting events in a hash map.
pub fn brute_majority(events: &[(usize, usize)], n_classes: usize) -> Vec<Option<(usize, f64)>> {
    (0..n_classes)
        .map(|c| {
            let mut tally: HashMap<usize, u64> = HashMap::new();
            let mut total = 0;
            for &(ec, s) in events {
                if ec == c {
                    *tally.entry(s).or_default() += 1;
                    total += 1;
                }
            }
            let best = tally.iter().map(|(&s, &n)| (n, std::cmp::Reverse(s))).max()?;
            Some((best.1 .0, best.0 as f64 / total as f64))
        })
        .collect()
}

pub fn brute_symbols_used(events: &[(usize, usize)], vocab: usize) -> f64 {
    let mut distinct: Vec<usize> = events.iter().map(|e| e.1).collect();
    distinct.sort_unstable();
    distinct.dedup();
    distinct.len() as f64 / vocab as f64
}

/// `H(C) + H(S) − H(C, S)` from event frequencies.
pub fn brute_mutual_information(events: &[(usize, usize)]) -> f64 {
    fn entropy<K: std::hash::Hash + Eq>(keys: impl Iterator<Item = K>, n: f64) -> f64 {
        let mut tally: HashMap<K, f64> = HashMap::new();
        for k in keys {
            *tally.entry(k).or_default() += 1.0;
        }
        tally.values().map(|&c| -(c / n) * (c / n).log2()).sum()
    }
    if events.is_empty() {
        return 0.0;
    }
    let n = events.len() as f64;
    let hc = entropy(events.iter().map(|e| e.0), n);
    let hs = entropy(events.iter().map(|e| e.1), n);
    let hcs = entropy(events.iter().copied(), n);
    (hc + hs - hcs).max(0.0)
}

/// Nearest-class-mean classifier trained on `train`, accuracy on `test`.
pub fn nearest_centroid_accuracy(train: &Dataset, test: &Dataset) -> f64 {
    let k = train.n_concepts();
    let d = train.feature_dim;
    let mut means = vec![vec![0.0; d]; k];
    let mut counts = vec![0usize; k];
    for r in &train.records {
        counts[r.label] += 1;
        for (m, x) in means[r.label].iter_mut().zip(&r.features) {
            *m += x;
        }
    }
    for (m, &n) in means.iter_mut().zip(&counts) {
        m.iter_mut().for_each(|v| *v /= n.max(1) as f64);
    }
    let correct = test
        .records
        .iter()
        .filter(|r| {
            let dist = |m: &Vec<f64>| m.iter().zip(&r.features).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            let guess = (0..k)
                .min_by(|&a, &b| dist(&means[a]).total_cmp(&dist(&means[b])))
                .unwrap();
            guess == r.label
        })
        .count();
    correct as f64 / test.len() as f64
}

pub fn params_of(cfg: &GameConfig, seed: u64) -> AgentParams {
    lewisgame::agents::init_params(cfg, seed).unwrap()
}
