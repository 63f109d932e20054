use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;

use super::tensor::{argmax, Tensor};
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(0);

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    index: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Linear { x: Var, weight: Var, bias: Var },
    Conv1d { x: Var, kernels: Var, bias: Var },
    Sigmoid { x: Var },
    LogSoftmax { x: Var },
    Dot { a: Var, b: Var },
    Nll { log_probs: Var, target: usize },
    GumbelSoftmax { logits: Var, soft: Vec<f64>, temperature: f64 },
    Concat { parts: Vec<Var> },
    Reshape { x: Var },
    Add { a: Var, b: Var },
    Scale { x: Var, factor: f64 },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Wengert list for one forward pass.
///
/// Nodes are appended in evaluation order, so the list is already
/// topologically sorted and `backward` is a single reverse sweep.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf; it receives a gradient iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let needs_grad = tensor.requires_grad();
        self.push(tensor, Op::Leaf, needs_grad)
    }

    /// Records a constant input (never differentiated).
    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.push(tensor.with_requires_grad(false), Op::Leaf, false)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.index].value
    }

    pub fn grad(&self, var: Var) -> Option<&[f64]> {
        self.nodes[var.index].value.grad()
    }

    /// Moves the accumulated gradient out of the tape.
    pub fn take_grad(&mut self, var: Var) -> Option<Vec<f64>> {
        self.nodes[var.index].value.take_grad()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn check(&self, var: Var) -> Result<()> {
        if var.tape != self.id || var.index >= self.nodes.len() {
            return Err(Error::Contract("variable belongs to a different tape".into()));
        }
        Ok(())
    }

    fn node(&self, var: Var) -> Result<&Node> {
        self.check(var)?;
        Ok(&self.nodes[var.index])
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.index].needs_grad)
    }

    /// `out[j] = Σ_i weight[j,i]·x[i] + bias[j]`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let (xn, wn, bn) = (self.node(x)?, self.node(weight)?, self.node(bias)?);
        let (xt, wt, bt) = (&xn.value, &wn.value, &bn.value);
        let n_in = xt.len();
        let ws = wt.shape();
        if ws.len() != 2 || ws[1] != n_in || xt.shape().len() != 1 {
            return Err(Error::Dimension {
                op: "linear",
                lhs: ws.to_vec(),
                rhs: xt.shape().to_vec(),
            });
        }
        let n_out = ws[0];
        if bt.shape() != [n_out] {
            return Err(Error::Dimension {
                op: "linear bias",
                lhs: ws.to_vec(),
                rhs: bt.shape().to_vec(),
            });
        }
        let xv = xt.values();
        let out: Vec<f64> = wt
            .values()
            .chunks_exact(n_in)
            .zip(bt.values())
            .map(|(row, b)| row.iter().zip(xv).map(|(w, x)| w * x).sum::<f64>() + b)
            .collect();
        let needs = self.any_grad(&[x, weight, bias]);
        Ok(self.push(Tensor::vector(out), Op::Linear { x, weight, bias }, needs))
    }

    /// Valid (unpadded) stride-1 convolution:
    /// `out[o,t] = bias[o] + Σ_{c,j} kernels[o,c,j]·x[c,t+j]`.
    pub fn conv1d(&mut self, x: Var, kernels: Var, bias: Var) -> Result<Var> {
        let (xn, kn, bn) = (self.node(x)?, self.node(kernels)?, self.node(bias)?);
        let (xs, ks) = (xn.value.shape(), kn.value.shape());
        if xs.len() != 2 || ks.len() != 3 || ks[1] != xs[0] {
            return Err(Error::Dimension {
                op: "conv1d",
                lhs: xs.to_vec(),
                rhs: ks.to_vec(),
            });
        }
        let (c_in, len) = (xs[0], xs[1]);
        let (c_out, width) = (ks[0], ks[2]);
        if width > len {
            return Err(Error::Dimension {
                op: "conv1d kernel wider than input",
                lhs: xs.to_vec(),
                rhs: ks.to_vec(),
            });
        }
        if bn.value.shape() != [c_out] {
            return Err(Error::Dimension {
                op: "conv1d bias",
                lhs: ks.to_vec(),
                rhs: bn.value.shape().to_vec(),
            });
        }
        let out_len = len - width + 1;
        let (xv, kv, bv) = (xn.value.values(), kn.value.values(), bn.value.values());
        let mut out = vec![0.0; c_out * out_len];
        for o in 0..c_out {
            let row = &mut out[o * out_len..(o + 1) * out_len];
            row.iter_mut().for_each(|v| *v = bv[o]);
            for c in 0..c_in {
                let kern = &kv[(o * c_in + c) * width..(o * c_in + c + 1) * width];
                let signal = &xv[c * len..(c + 1) * len];
                for (t, acc) in row.iter_mut().enumerate() {
                    *acc += kern
                        .iter()
                        .zip(&signal[t..t + width])
                        .map(|(k, s)| k * s)
                        .sum::<f64>();
                }
            }
        }
        let needs = self.any_grad(&[x, kernels, bias]);
        let value = Tensor::new(vec![c_out, out_len], out)?;
        Ok(self.push(value, Op::Conv1d { x, kernels, bias }, needs))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let xn = self.node(x)?;
        let out: Vec<f64> = xn.value.values().iter().map(|&v| sigmoid(v)).collect();
        let value = Tensor::new(xn.value.shape().to_vec(), out)?;
        let needs = xn.needs_grad;
        Ok(self.push(value, Op::Sigmoid { x }, needs))
    }

    /// Max-shifted log-softmax over a vector.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let xn = self.node(x)?;
        let out = log_softmax(xn.value.values());
        let needs = xn.needs_grad;
        Ok(self.push(Tensor::vector(out), Op::LogSoftmax { x }, needs))
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (an, bn) = (self.node(a)?, self.node(b)?);
        if an.value.len() != bn.value.len() {
            return Err(Error::Dimension {
                op: "dot",
                lhs: an.value.shape().to_vec(),
                rhs: bn.value.shape().to_vec(),
            });
        }
        let s: f64 = an
            .value
            .values()
            .iter()
            .zip(bn.value.values())
            .map(|(x, y)| x * y)
            .sum();
        let needs = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::scalar(s), Op::Dot { a, b }, needs))
    }

    /// `-log_probs[target]`.
    pub fn nll_loss(&mut self, log_probs: Var, target: usize) -> Result<Var> {
        let n = self.node(log_probs)?;
        let len = n.value.len();
        if target >= len {
            return Err(Error::Index { index: target, len });
        }
        let v = -n.value.values()[target];
        let needs = n.needs_grad;
        Ok(self.push(Tensor::scalar(v), Op::Nll { log_probs, target }, needs))
    }

    /// Relaxed categorical sample with fresh standard Gumbel noise drawn from `rng`.
    pub fn gumbel_softmax<R: Rng + ?Sized>(
        &mut self,
        logits: Var,
        temperature: f64,
        hard: bool,
        rng: &mut R,
    ) -> Result<Var> {
        let n = self.node(logits)?.value.len();
        let noise = sample_gumbel(n, rng);
        self.gumbel_softmax_with_noise(logits, &noise, temperature, hard)
    }

    /// Gumbel-softmax with caller-supplied noise.
    ///
    /// The soft sample is `softmax((logits + noise) / temperature)`. With
    /// `hard`, the forward value is the one-hot argmax of the soft sample while
    /// gradients still flow through the soft sample (straight-through).
    pub fn gumbel_softmax_with_noise(
        &mut self,
        logits: Var,
        noise: &[f64],
        temperature: f64,
        hard: bool,
    ) -> Result<Var> {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::Parameter(format!(
                "gumbel-softmax temperature must be positive, got {temperature}"
            )));
        }
        let ln = self.node(logits)?;
        if noise.len() != ln.value.len() {
            return Err(Error::Dimension {
                op: "gumbel_softmax noise",
                lhs: ln.value.shape().to_vec(),
                rhs: vec![noise.len()],
            });
        }
        let scaled: Vec<f64> = ln
            .value
            .values()
            .iter()
            .zip(noise)
            .map(|(l, g)| (l + g) / temperature)
            .collect();
        let soft = softmax(&scaled);
        let value = if hard {
            Tensor::one_hot(soft.len(), argmax(&soft))
        } else {
            Tensor::vector(soft.clone())
        };
        let needs = ln.needs_grad;
        Ok(self.push(
            value,
            Op::GumbelSoftmax {
                logits,
                soft,
                temperature,
            },
            needs,
        ))
    }

    /// Flattening concatenation of any number of tensors into a vector.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Contract("concat needs at least one input".into()));
        }
        let mut out = Vec::new();
        for &p in parts {
            out.extend_from_slice(self.node(p)?.value.values());
        }
        let needs = self.any_grad(parts);
        Ok(self.push(
            Tensor::vector(out),
            Op::Concat {
                parts: parts.to_vec(),
            },
            needs,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let xn = self.node(x)?;
        if shape.iter().product::<usize>() != xn.value.len() {
            return Err(Error::Dimension {
                op: "reshape",
                lhs: xn.value.shape().to_vec(),
                rhs: shape,
            });
        }
        let value = Tensor::from_shared(shape, xn.value.shared_values());
        let needs = xn.needs_grad;
        Ok(self.push(value, Op::Reshape { x }, needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (an, bn) = (self.node(a)?, self.node(b)?);
        if an.value.shape() != bn.value.shape() {
            return Err(Error::Dimension {
                op: "add",
                lhs: an.value.shape().to_vec(),
                rhs: bn.value.shape().to_vec(),
            });
        }
        let out: Vec<f64> = an
            .value
            .values()
            .iter()
            .zip(bn.value.values())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::new(an.value.shape().to_vec(), out)?;
        let needs = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Add { a, b }, needs))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let xn = self.node(x)?;
        let out: Vec<f64> = xn.value.values().iter().map(|v| v * factor).collect();
        let value = Tensor::new(xn.value.shape().to_vec(), out)?;
        let needs = xn.needs_grad;
        Ok(self.push(value, Op::Scale { x, factor }, needs))
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Afterwards every `requires_grad` leaf reachable from `loss` holds its
    /// gradient; contributions from repeated uses are summed.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.check(loss)?;
        if self.nodes[loss.index].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.index].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.index + 1];
        grads[loss.index] = Some(vec![1.0]);

        for i in (0..=loss.index).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {
                    if node.value.requires_grad() {
                        grads[i] = Some(g);
                    }
                }
                Op::Linear { x, weight, bias } => {
                    let xv = self.nodes[x.index].value.values();
                    let wv = self.nodes[weight.index].value.values();
                    let n_in = xv.len();
                    if self.nodes[x.index].needs_grad {
                        let mut dx = vec![0.0; n_in];
                        for (row, gj) in wv.chunks_exact(n_in).zip(&g) {
                            for (d, w) in dx.iter_mut().zip(row) {
                                *d += gj * w;
                            }
                        }
                        accumulate(&mut grads, *x, dx);
                    }
                    if self.nodes[weight.index].needs_grad {
                        let mut dw = vec![0.0; wv.len()];
                        for (row, gj) in dw.chunks_exact_mut(n_in).zip(&g) {
                            for (d, xi) in row.iter_mut().zip(xv) {
                                *d = gj * xi;
                            }
                        }
                        accumulate(&mut grads, *weight, dw);
                    }
                    if self.nodes[bias.index].needs_grad {
                        accumulate(&mut grads, *bias, g);
                    }
                }
                Op::Conv1d { x, kernels, bias } => {
                    let xt = &self.nodes[x.index].value;
                    let kt = &self.nodes[kernels.index].value;
                    let (c_in, len) = (xt.shape()[0], xt.shape()[1]);
                    let (c_out, width) = (kt.shape()[0], kt.shape()[2]);
                    let out_len = len - width + 1;
                    let (xv, kv) = (xt.values(), kt.values());
                    if self.nodes[x.index].needs_grad {
                        let mut dx = vec![0.0; xv.len()];
                        for o in 0..c_out {
                            let go = &g[o * out_len..(o + 1) * out_len];
                            for c in 0..c_in {
                                let kern = &kv[(o * c_in + c) * width..(o * c_in + c + 1) * width];
                                let dsig = &mut dx[c * len..(c + 1) * len];
                                for (t, gt) in go.iter().enumerate() {
                                    for (d, k) in dsig[t..t + width].iter_mut().zip(kern) {
                                        *d += gt * k;
                                    }
                                }
                            }
                        }
                        accumulate(&mut grads, *x, dx);
                    }
                    if self.nodes[kernels.index].needs_grad {
                        let mut dk = vec![0.0; kv.len()];
                        for o in 0..c_out {
                            let go = &g[o * out_len..(o + 1) * out_len];
                            for c in 0..c_in {
                                let signal = &xv[c * len..(c + 1) * len];
                                let dkern =
                                    &mut dk[(o * c_in + c) * width..(o * c_in + c + 1) * width];
                                for (j, d) in dkern.iter_mut().enumerate() {
                                    *d = go
                                        .iter()
                                        .zip(&signal[j..j + out_len])
                                        .map(|(a, b)| a * b)
                                        .sum();
                                }
                            }
                        }
                        accumulate(&mut grads, *kernels, dk);
                    }
                    if self.nodes[bias.index].needs_grad {
                        let db = g.chunks_exact(out_len).map(|r| r.iter().sum()).collect();
                        accumulate(&mut grads, *bias, db);
                    }
                }
                Op::Sigmoid { x } => {
                    let dx = node
                        .value
                        .values()
                        .iter()
                        .zip(&g)
                        .map(|(y, gi)| gi * y * (1.0 - y))
                        .collect();
                    accumulate(&mut grads, *x, dx);
                }
                Op::LogSoftmax { x } => {
                    let total: f64 = g.iter().sum();
                    let dx = node
                        .value
                        .values()
                        .iter()
                        .zip(&g)
                        .map(|(y, gi)| gi - y.exp() * total)
                        .collect();
                    accumulate(&mut grads, *x, dx);
                }
                Op::Dot { a, b } => {
                    let g0 = g[0];
                    let av = self.nodes[a.index].value.values();
                    let bv = self.nodes[b.index].value.values();
                    if self.nodes[a.index].needs_grad {
                        accumulate(&mut grads, *a, bv.iter().map(|v| g0 * v).collect());
                    }
                    if self.nodes[b.index].needs_grad {
                        accumulate(&mut grads, *b, av.iter().map(|v| g0 * v).collect());
                    }
                }
                Op::Nll { log_probs, target } => {
                    let mut dx = vec![0.0; self.nodes[log_probs.index].value.len()];
                    dx[*target] = -g[0];
                    accumulate(&mut grads, *log_probs, dx);
                }
                Op::GumbelSoftmax {
                    logits,
                    soft,
                    temperature,
                } => {
                    let inner: f64 = soft.iter().zip(&g).map(|(y, gi)| y * gi).sum();
                    let dx = soft
                        .iter()
                        .zip(&g)
                        .map(|(y, gi)| y * (gi - inner) / temperature)
                        .collect();
                    accumulate(&mut grads, *logits, dx);
                }
                Op::Concat { parts } => {
                    let mut offset = 0;
                    for p in parts {
                        let n = self.nodes[p.index].value.len();
                        if self.nodes[p.index].needs_grad {
                            accumulate(&mut grads, *p, g[offset..offset + n].to_vec());
                        }
                        offset += n;
                    }
                }
                Op::Reshape { x } => accumulate(&mut grads, *x, g),
                Op::Add { a, b } => {
                    if self.nodes[a.index].needs_grad {
                        accumulate(&mut grads, *a, g.clone());
                    }
                    if self.nodes[b.index].needs_grad {
                        accumulate(&mut grads, *b, g);
                    }
                }
                Op::Scale { x, factor } => {
                    accumulate(&mut grads, *x, g.iter().map(|v| v * factor).collect());
                }
            }
        }

        for (node, grad) in self.nodes.iter_mut().zip(grads) {
            if let (Op::Leaf, Some(grad)) = (&node.op, grad) {
                node.value.set_grad(grad);
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], var: Var, delta: Vec<f64>) {
    match &mut grads[var.index] {
        Some(existing) => existing.iter_mut().zip(delta).for_each(|(e, d)| *e += d),
        slot => *slot = Some(delta),
    }
}

/// Logistic function, evaluated without overflow for large `|x|`.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn log_softmax(x: &[f64]) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = x.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    x.iter().map(|v| v - max - lse).collect()
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Standard Gumbel noise, `-ln(-ln(u))` with `u` clamped to `[1e-20, 1 - 1e-16]`.
pub fn sample_gumbel<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let u: f64 = rng.random::<f64>().clamp(1e-20, 1.0 - 1e-16);
            -(-u.ln()).ln()
        })
        .collect()
}
