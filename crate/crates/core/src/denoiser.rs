//! Source-guided noise predictor.
//!
//! Pipeline for a batch of `B` subjects with `N` nodes each:
//!
//! 1. Source nodes `[B·N, 1]` pass through a stack of edge-conditioned
//!    convolutions over the source adjacency, giving `[B·N, conv_dim]`.
//! 2. A per-node fully connected stack maps that to a scalar target embedding;
//!    the sinusoidal embedding of `t` is added after the first layer.
//! 3. The noisy target nodes `[B, N]` are batch-normalized per node position.
//! 4. The predicted noise is the normalized noisy nodes minus the embedding.
//!
//! The edge network of each convolution is affine in the scalar edge,
//! `M(e) = e·W + Bm`, so the message sum `Σ_{j≠i} n_j·M(e_ij)` equals
//! `(E·H)·W + (O·H)·Bm` with `O` the all-ones matrix minus the identity.
//! That identity lets the convolution run as a handful of matrix products.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::braingraph::{Adjacency, BrainGraph, ROI_COUNT};
use crate::diff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub conv_layers: usize,
    pub conv_dim: usize,
    pub fc_layers: usize,
    pub fc_dim: usize,
    pub node_count: usize,
    pub pe_dim: usize,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            conv_layers: 3,
            conv_dim: 48,
            fc_layers: 3,
            fc_dim: 128,
            node_count: ROI_COUNT,
            pe_dim: 128,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.conv_layers,
            self.conv_dim,
            self.fc_layers,
            self.fc_dim,
            self.node_count,
            self.pe_dim,
        ];
        if dims.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "model dimensions must be positive: {self:?}"
            )));
        }
        if self.pe_dim != self.fc_dim {
            return Err(Error::InvalidArgument(format!(
                "pe_dim ({}) must equal fc_dim ({})",
                self.pe_dim, self.fc_dim
            )));
        }
        if !self.pe_dim.is_multiple_of(2) {
            return Err(Error::InvalidArgument("pe_dim must be even".into()));
        }
        if self.bn_eps.is_nan() || self.bn_eps <= 0.0 || !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(Error::InvalidArgument(
                "bn_eps must be > 0 and bn_momentum in [0, 1]".into(),
            ));
        }
        Ok(())
    }
}

/// Batch-norm statistic source.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrainState {
    /// Batch statistics; running statistics are updated.
    Train,
    /// Running statistics.
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub theta: Tensor,
    pub edge_weight: Tensor,
    pub edge_bias: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub conv: Vec<ConvLayer>,
    pub fc: Vec<Linear>,
    pub head: Linear,
    pub bn_gamma: Tensor,
    pub bn_beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
}

pub const RUNNING_MEAN: &str = "bn.running_mean";
pub const RUNNING_VAR: &str = "bn.running_var";

fn glorot(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize, shape: Vec<usize>) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let values = (0..n).map(|_| rng.random_range(-a..a)).collect();
    Tensor::new(shape, values)
        .expect("shape matches value count")
        .with_grad()
}

fn zeros_param(shape: Vec<usize>) -> Tensor {
    Tensor::zeros(shape).with_grad()
}

pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ModelParams> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut conv = Vec::with_capacity(cfg.conv_layers);
    for l in 0..cfg.conv_layers {
        let d_in = if l == 0 { 1 } else { cfg.conv_dim };
        let d_out = cfg.conv_dim;
        conv.push(ConvLayer {
            theta: glorot(&mut rng, d_in, d_out, vec![d_in, d_out]),
            // Edge network: Linear(1 → d_in·d_out), viewed as a [d_in, d_out] matrix.
            edge_weight: glorot(&mut rng, 1, d_in * d_out, vec![d_in, d_out]),
            edge_bias: zeros_param(vec![d_in, d_out]),
            bias: zeros_param(vec![d_out]),
        });
    }
    let mut fc = Vec::with_capacity(cfg.fc_layers);
    for l in 0..cfg.fc_layers {
        let d_in = if l == 0 { cfg.conv_dim } else { cfg.fc_dim };
        fc.push(Linear {
            weight: glorot(&mut rng, d_in, cfg.fc_dim, vec![d_in, cfg.fc_dim]),
            bias: zeros_param(vec![cfg.fc_dim]),
        });
    }
    let head = Linear {
        weight: glorot(&mut rng, cfg.fc_dim, 1, vec![cfg.fc_dim, 1]),
        bias: zeros_param(vec![1]),
    };
    let n = cfg.node_count;
    Ok(ModelParams {
        conv,
        fc,
        head,
        bn_gamma: Tensor::filled(vec![n], 1.0).with_grad(),
        bn_beta: zeros_param(vec![n]),
        running_mean: Tensor::zeros(vec![n]),
        running_var: Tensor::filled(vec![n], 1.0),
    })
}

impl ModelParams {
    /// Learnable tensors in a fixed order.
    pub fn learnable(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (l, c) in self.conv.iter().enumerate() {
            out.push((format!("conv{l}.theta"), &c.theta));
            out.push((format!("conv{l}.edge_weight"), &c.edge_weight));
            out.push((format!("conv{l}.edge_bias"), &c.edge_bias));
            out.push((format!("conv{l}.bias"), &c.bias));
        }
        for (l, f) in self.fc.iter().enumerate() {
            out.push((format!("fc{}.weight", l + 1), &f.weight));
            out.push((format!("fc{}.bias", l + 1), &f.bias));
        }
        out.push(("head.weight".into(), &self.head.weight));
        out.push(("head.bias".into(), &self.head.bias));
        out.push(("bn.gamma".into(), &self.bn_gamma));
        out.push(("bn.beta".into(), &self.bn_beta));
        out
    }

    pub fn learnable_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = self.all_tensors_mut();
        out.truncate(out.len() - 2);
        out
    }

    /// Every tensor including the batch-norm running statistics.
    pub fn all_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = self.learnable();
        out.push((RUNNING_MEAN.into(), &self.running_mean));
        out.push((RUNNING_VAR.into(), &self.running_var));
        out
    }

    /// Same order as [`ModelParams::all_tensors`]; running statistics last.
    pub fn all_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let ModelParams {
            conv,
            fc,
            head,
            bn_gamma,
            bn_beta,
            running_mean,
            running_var,
        } = self;
        let mut out = Vec::new();
        for (l, c) in conv.iter_mut().enumerate() {
            out.push((format!("conv{l}.theta"), &mut c.theta));
            out.push((format!("conv{l}.edge_weight"), &mut c.edge_weight));
            out.push((format!("conv{l}.edge_bias"), &mut c.edge_bias));
            out.push((format!("conv{l}.bias"), &mut c.bias));
        }
        for (l, f) in fc.iter_mut().enumerate() {
            out.push((format!("fc{}.weight", l + 1), &mut f.weight));
            out.push((format!("fc{}.bias", l + 1), &mut f.bias));
        }
        out.push(("head.weight".into(), &mut head.weight));
        out.push(("head.bias".into(), &mut head.bias));
        out.push(("bn.gamma".into(), bn_gamma));
        out.push(("bn.beta".into(), bn_beta));
        out.push((RUNNING_MEAN.into(), running_mean));
        out.push((RUNNING_VAR.into(), running_var));
        out
    }

    pub fn zero_grad(&mut self) {
        for (_, t) in self.learnable_mut() {
            t.zero_grad();
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.learnable().iter().map(|(_, t)| t.len()).sum()
    }

    fn update_running_stats(&mut self, stats: &BatchStats, momentum: f64) {
        let b = stats.batch_size as f64;
        let rm = self.running_mean.values_mut();
        for (r, m) in rm.iter_mut().zip(&stats.mean) {
            *r = (1.0 - momentum) * *r + momentum * m;
        }
        let rv = self.running_var.values_mut();
        for (r, v) in rv.iter_mut().zip(&stats.var) {
            // Unbiased estimate for the running variance when the batch allows it.
            let unbiased = if stats.batch_size > 1 {
                v * b / (b - 1.0)
            } else {
                *v
            };
            *r = (1.0 - momentum) * *r + momentum * unbiased;
        }
    }
}

/// Sinusoidal embedding: `PE[2i] = sin(t / 10000^(2i/dim))`,
/// `PE[2i+1] = cos(t / 10000^(2i/dim))`.
pub fn positional_embedding(t: usize, dim: usize) -> Result<Vec<f64>> {
    if !dim.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!(
            "embedding dimension must be even, got {dim}"
        )));
    }
    let mut pe = vec![0.0; dim];
    for i in 0..dim / 2 {
        let freq = 10000f64.powf(2.0 * i as f64 / dim as f64);
        let arg = t as f64 / freq;
        pe[2 * i] = arg.sin();
        pe[2 * i + 1] = arg.cos();
    }
    Ok(pe)
}

/// One denoiser call: noisy targets, their timesteps and the guiding sources.
#[derive(Debug, Clone, Copy)]
pub struct DenoiserInput<'a> {
    pub noisy: &'a [Vec<f64>],
    pub timesteps: &'a [usize],
    pub sources: &'a [&'a BrainGraph],
}

#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased (population) variance.
    pub var: Vec<f64>,
    pub batch_size: usize,
}

/// Vars for the learnable tensors, in [`ModelParams::learnable`] order.
#[derive(Debug, Clone)]
pub struct Recorded {
    pub eps_hat: Var,
    pub param_vars: Vec<Var>,
    pub batch_stats: Option<BatchStats>,
}

struct ParamVars {
    conv: Vec<[Var; 4]>,
    fc: Vec<[Var; 2]>,
    head: [Var; 2],
    gamma: Var,
    beta: Var,
}

impl ParamVars {
    fn register(tape: &mut Tape, p: &ModelParams) -> Self {
        ParamVars {
            conv: p.conv.iter().map(|c| register_conv(tape, c)).collect(),
            fc: p
                .fc
                .iter()
                .map(|f| [tape.leaf(&f.weight), tape.leaf(&f.bias)])
                .collect(),
            head: [tape.leaf(&p.head.weight), tape.leaf(&p.head.bias)],
            gamma: tape.leaf(&p.bn_gamma),
            beta: tape.leaf(&p.bn_beta),
        }
    }

    fn flatten(&self) -> Vec<Var> {
        let mut out: Vec<Var> = self.conv.iter().flatten().copied().collect();
        out.extend(self.fc.iter().flatten().copied());
        out.extend(self.head);
        out.push(self.gamma);
        out.push(self.beta);
        out
    }
}

fn check_shapes(cfg: &ModelConfig, p: &ModelParams, input: &DenoiserInput<'_>) -> Result<()> {
    let b = input.noisy.len();
    if b == 0 || input.timesteps.len() != b || input.sources.len() != b {
        return Err(Error::InvalidArgument(format!(
            "batch sizes disagree: {} noisy, {} timesteps, {} sources",
            b,
            input.timesteps.len(),
            input.sources.len()
        )));
    }
    if p.conv.len() != cfg.conv_layers || p.fc.len() != cfg.fc_layers {
        return Err(Error::InvalidArgument(
            "parameters do not match the model config".into(),
        ));
    }
    let n = cfg.node_count;
    for (row, src) in input.noisy.iter().zip(input.sources) {
        if row.len() != n || src.scaled_nodes.len() != n || src.adjacency.size() != n {
            return Err(Error::ShapeMismatch {
                op: "predict_noise",
                lhs: vec![n],
                rhs: vec![row.len(), src.scaled_nodes.len(), src.adjacency.size()],
            });
        }
        if !src.adjacency.is_symmetric_hollow() {
            return Err(Error::InvalidArgument(format!(
                "source adjacency of {} is not symmetric with zero diagonal",
                src.subject_id
            )));
        }
    }
    Ok(())
}

/// Constant `[B, N, N]` edge and neighbour-mask tensors for a batch of graphs.
/// Diagonals are forced to zero so a node never messages itself.
fn record_graph_constants(tape: &mut Tape, edges: &[&Adjacency], n: usize) -> Result<(Var, Var)> {
    let b = edges.len();
    let mut e_vals = Vec::with_capacity(b * n * n);
    let mut o_vals = Vec::with_capacity(b * n * n);
    for adj in edges {
        for i in 0..n {
            for j in 0..n {
                e_vals.push(if i == j { 0.0 } else { adj.get(i, j) });
                o_vals.push(if i == j { 0.0 } else { 1.0 });
            }
        }
    }
    Ok((
        tape.constant(vec![b, n, n], e_vals)?,
        tape.constant(vec![b, n, n], o_vals)?,
    ))
}

/// One edge-conditioned convolution over `h: [B·N, d_in]`, without activation.
fn record_conv_layer(
    tape: &mut Tape,
    [theta, edge_w, edge_b, bias]: [Var; 4],
    h: Var,
    edges: Var,
    others: Var,
    d_in: usize,
) -> Result<Var> {
    let (b, n) = (tape.shape(edges)[0], tape.shape(edges)[1]);
    let h3 = tape.reshape(h, vec![b, n, d_in])?;
    let agg_e = tape.batch_matmul(edges, h3)?;
    let agg_e = tape.reshape(agg_e, vec![b * n, d_in])?;
    let agg_o = tape.batch_matmul(others, h3)?;
    let agg_o = tape.reshape(agg_o, vec![b * n, d_in])?;

    let self_term = tape.matmul(h, theta)?;
    let msg_w = tape.matmul(agg_e, edge_w)?;
    let msg_b = tape.matmul(agg_o, edge_b)?;
    let out = tape.add(self_term, msg_w)?;
    let out = tape.add(out, msg_b)?;
    tape.add_row(out, bias)
}

/// Stacked convolutions with ReLU between layers (not after the last).
/// `nodes` is `[B·N, 1]`; returns `[B·N, conv_dim]`.
fn record_conv_stack(
    tape: &mut Tape,
    vars: &[[Var; 4]],
    nodes: Var,
    edges: &[&Adjacency],
    cfg: &ModelConfig,
) -> Result<Var> {
    let (e, others) = record_graph_constants(tape, edges, cfg.node_count)?;
    let mut h = nodes;
    let mut d_in = 1;
    for (l, layer) in vars.iter().enumerate() {
        let out = record_conv_layer(tape, *layer, h, e, others, d_in)?;
        h = if l + 1 < vars.len() {
            tape.relu(out)?
        } else {
            out
        };
        d_in = cfg.conv_dim;
    }
    Ok(h)
}

fn register_conv(tape: &mut Tape, c: &ConvLayer) -> [Var; 4] {
    [
        tape.leaf(&c.theta),
        tape.leaf(&c.edge_weight),
        tape.leaf(&c.edge_bias),
        tape.leaf(&c.bias),
    ]
}

/// Records the full forward pass on `tape`.
pub fn record_forward(
    tape: &mut Tape,
    params: &ModelParams,
    cfg: &ModelConfig,
    input: &DenoiserInput<'_>,
    state: TrainState,
) -> Result<Recorded> {
    check_shapes(cfg, params, input)?;
    let b = input.noisy.len();
    let n = cfg.node_count;
    let pv = ParamVars::register(tape, params);

    // (1) source encoder
    let src_vals: Vec<f64> = input
        .sources
        .iter()
        .flat_map(|s| s.scaled_nodes.iter().copied())
        .collect();
    let src = tape.constant(vec![b * n, 1], src_vals)?;
    let adjs: Vec<&Adjacency> = input.sources.iter().map(|s| &s.adjacency).collect();
    let mut h = record_conv_stack(tape, &pv.conv, src, &adjs, cfg)?;

    // (2) per-node FC stack with the timestep embedding after the first layer
    let mut pe_vals = Vec::with_capacity(b * n * cfg.pe_dim);
    for &t in input.timesteps {
        let pe = positional_embedding(t, cfg.pe_dim)?;
        for _ in 0..n {
            pe_vals.extend_from_slice(&pe);
        }
    }
    let pe = tape.constant(vec![b * n, cfg.pe_dim], pe_vals)?;
    for (l, [w, bias]) in pv.fc.iter().enumerate() {
        let z = tape.matmul(h, *w)?;
        let mut z = tape.add_row(z, *bias)?;
        if l == 0 {
            z = tape.add(z, pe)?;
        }
        h = tape.relu(z)?;
    }
    let m = tape.matmul(h, pv.head[0])?;
    let m = tape.add_row(m, pv.head[1])?;
    let m = tape.reshape(m, vec![b, n])?;

    // (3) batch norm of the noisy targets, per node position
    let noisy_vals: Vec<f64> = input.noisy.iter().flatten().copied().collect();
    let noisy = tape.constant(vec![b, n], noisy_vals)?;
    let (normalized, batch_stats) = match state {
        TrainState::Train => {
            let mean = tape.mean_rows(noisy)?;
            let neg_mean = tape.scale(mean, -1.0)?;
            let centered = tape.add_row(noisy, neg_mean)?;
            let sq = tape.square(centered)?;
            let var = tape.mean_rows(sq)?;
            let stats = BatchStats {
                mean: tape.value(mean).to_vec(),
                var: tape.value(var).to_vec(),
                batch_size: b,
            };
            let std = tape.add_scalar(var, cfg.bn_eps)?;
            let std = tape.sqrt(std)?;
            let inv = tape.recip(std)?;
            (tape.mul_row(centered, inv)?, Some(stats))
        }
        TrainState::Eval => {
            let rm = params.running_mean.values();
            let rv = params.running_var.values();
            let vals = input
                .noisy
                .iter()
                .flat_map(|row| {
                    row.iter()
                        .enumerate()
                        .map(|(i, x)| (x - rm[i]) / (rv[i] + cfg.bn_eps).sqrt())
                })
                .collect();
            (tape.constant(vec![b, n], vals)?, None)
        }
    };
    let scaled = tape.mul_row(normalized, pv.gamma)?;
    let bn = tape.add_row(scaled, pv.beta)?;

    // (4) residual
    let eps_hat = tape.sub(bn, m)?;
    Ok(Recorded {
        eps_hat,
        param_vars: pv.flatten(),
        batch_stats,
    })
}

fn rows(values: &[f64], n: usize) -> Vec<Vec<f64>> {
    values.chunks(n).map(<[f64]>::to_vec).collect()
}

/// Predicted noise for each subject in the batch. Train mode uses batch
/// statistics and updates the running statistics.
pub fn predict_noise(
    params: &mut ModelParams,
    cfg: &ModelConfig,
    input: &DenoiserInput<'_>,
    state: TrainState,
) -> Result<Vec<Vec<f64>>> {
    let mut tape = Tape::new();
    let rec = record_forward(&mut tape, params, cfg, input, state)?;
    if let Some(stats) = &rec.batch_stats {
        params.update_running_stats(stats, cfg.bn_momentum);
    }
    Ok(rows(tape.value(rec.eps_hat), cfg.node_count))
}

/// Eval-mode prediction; never mutates the parameters.
pub fn predict_noise_eval(
    params: &ModelParams,
    cfg: &ModelConfig,
    input: &DenoiserInput<'_>,
) -> Result<Vec<Vec<f64>>> {
    let mut tape = Tape::new();
    let rec = record_forward(&mut tape, params, cfg, input, TrainState::Eval)?;
    Ok(rows(tape.value(rec.eps_hat), cfg.node_count))
}

/// Mean squared error between predicted and drawn noise, recorded on the tape.
pub fn record_mse(tape: &mut Tape, prediction: Var, target: &[Vec<f64>]) -> Result<Var> {
    let shape = tape.shape(prediction).to_vec();
    let flat: Vec<f64> = target.iter().flatten().copied().collect();
    let target = tape.constant(shape, flat)?;
    let diff = tape.sub(prediction, target)?;
    let sq = tape.square(diff)?;
    tape.mean(sq)
}

/// Records a train-mode forward pass and the noise-regression loss, then
/// accumulates gradients into the learnable tensors and updates the running
/// statistics. Returns the loss value.
pub fn accumulate_loss_gradients(
    params: &mut ModelParams,
    cfg: &ModelConfig,
    input: &DenoiserInput<'_>,
    noise: &[Vec<f64>],
) -> Result<f64> {
    let mut tape = Tape::new();
    let rec = record_forward(&mut tape, params, cfg, input, TrainState::Train)?;
    let loss = record_mse(&mut tape, rec.eps_hat, noise)?;
    let value = tape.scalar(loss);
    if !value.is_finite() {
        return Ok(value);
    }
    let grads = tape.backward(loss)?;
    for ((name, tensor), var) in params.learnable_mut().into_iter().zip(&rec.param_vars) {
        let g = grads
            .get(*var)
            .ok_or_else(|| Error::MissingGrad(name.clone()))?;
        tensor.accumulate_grad(g)?;
    }
    if let Some(stats) = &rec.batch_stats {
        params.update_running_stats(stats, cfg.bn_momentum);
    }
    Ok(value)
}

/// Runs only the convolutional source encoder on one graph.
/// `nodes` are the per-node inputs; returns `N × conv_dim` row-major.
pub fn encode_source(
    params: &ModelParams,
    cfg: &ModelConfig,
    nodes: &[f64],
    edges: &Adjacency,
) -> Result<Vec<f64>> {
    let n = cfg.node_count;
    if nodes.len() != n || edges.size() != n {
        return Err(Error::ShapeMismatch {
            op: "encode_source",
            lhs: vec![n],
            rhs: vec![nodes.len(), edges.size()],
        });
    }
    let mut tape = Tape::new();
    let conv: Vec<[Var; 4]> = params
        .conv
        .iter()
        .map(|c| register_conv(&mut tape, c))
        .collect();
    let x = tape.constant(vec![n, 1], nodes.to_vec())?;
    let h = record_conv_stack(&mut tape, &conv, x, &[edges], cfg)?;
    Ok(tape.value(h).to_vec())
}

/// Single edge-conditioned convolution on raw arrays:
/// `n'_i = n_i·Θ + Σ_{j≠i} n_j·(e_ij·W + Bm) + bias`. `nodes` is `N × d_in`.
pub fn nnconv_forward(
    nodes: &[f64],
    d_in: usize,
    edges: &Adjacency,
    layer: &ConvLayer,
) -> Result<Vec<f64>> {
    let n = edges.size();
    let d_out = layer.theta.shape().get(1).copied().unwrap_or(0);
    if nodes.len() != n * d_in || layer.theta.shape() != [d_in, d_out] {
        return Err(Error::ShapeMismatch {
            op: "nnconv_forward",
            lhs: vec![n, d_in],
            rhs: layer.theta.shape().to_vec(),
        });
    }
    let mut tape = Tape::new();
    let vars = register_conv(&mut tape, layer);
    let (e, others) = record_graph_constants(&mut tape, &[edges], n)?;
    let x = tape.constant(vec![n, d_in], nodes.to_vec())?;
    let out = record_conv_layer(&mut tape, vars, x, e, others, d_in)?;
    Ok(tape.value(out).to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::braingraph::{pairing_edges, Hemisphere};
    use rand::seq::SliceRandom;

    fn graph(raw: Vec<f64>) -> BrainGraph {
        let hi = raw.iter().copied().fold(f64::MIN, f64::max);
        BrainGraph {
            subject_id: "s".into(),
            hemisphere: Hemisphere::Lh,
            metric: "m".into(),
            scaled_nodes: raw.iter().map(|v| v / hi).collect(),
            adjacency: pairing_edges(&raw).unwrap(),
            raw_nodes: raw,
        }
    }

    fn random_graph(rng: &mut ChaCha8Rng, n: usize) -> BrainGraph {
        graph((0..n).map(|_| rng.random_range(0.1..2.0)).collect())
    }

    fn small_cfg(n: usize) -> ModelConfig {
        ModelConfig {
            conv_dim: 5,
            fc_dim: 6,
            pe_dim: 6,
            node_count: n,
            ..Default::default()
        }
    }

    #[test]
    fn init_is_seeded_and_biases_are_zero() {
        let cfg = ModelConfig::default();
        let a = init_params(&cfg, 3).unwrap();
        assert_eq!(a, init_params(&cfg, 3).unwrap());
        assert_ne!(a, init_params(&cfg, 4).unwrap());
        assert_eq!(a.fc[0].weight.shape(), &[48, 128]);
        for (name, t) in a.learnable() {
            if name.ends_with(".bias") || name.ends_with("edge_bias") || name == "bn.beta" {
                assert!(t.values().iter().all(|&v| v == 0.0), "{name}");
            }
        }
        assert!(a.bn_gamma.values().iter().all(|&v| v == 1.0));
        assert!(a.running_mean.values().iter().all(|&v| v == 0.0));
        assert!(a.running_var.values().iter().all(|&v| v == 1.0));
        let bound = (6.0f64 / (48.0 + 128.0)).sqrt();
        assert!(a.fc[0].weight.values().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn config_validation() {
        let bad = ModelConfig {
            pe_dim: 64,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let odd = ModelConfig {
            pe_dim: 7,
            fc_dim: 7,
            ..Default::default()
        };
        assert!(odd.validate().is_err());
    }

    fn scalar_layer(theta: f64, w: f64, bm: f64, bias: f64) -> ConvLayer {
        let s = |v: f64| Tensor::new(vec![1, 1], vec![v]).unwrap();
        ConvLayer {
            theta: s(theta),
            edge_weight: s(w),
            edge_bias: s(bm),
            bias: Tensor::vector(vec![bias]),
        }
    }

    #[test]
    fn two_node_toy() {
        let edges = Adjacency::from_vec(2, vec![0.0, 0.5, 0.5, 0.0]).unwrap();
        let out =
            nnconv_forward(&[1.0, 0.0], 1, &edges, &scalar_layer(1.0, 1.0, 0.0, 0.0)).unwrap();
        assert_eq!(out, vec![1.0, 0.5]);
    }

    #[test]
    fn zero_edges_give_pure_node_transform() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = small_cfg(4);
        let p = init_params(&cfg, 2).unwrap();
        let mut layer = p.conv[1].clone();
        layer.bias = Tensor::vector((0..5).map(|_| rng.random_range(-1.0..1.0)).collect());
        let nodes: Vec<f64> = (0..20).map(|_| rng.random_range(-1.0..1.0)).collect();
        let out = nnconv_forward(&nodes, 5, &Adjacency::zeros(4), &layer).unwrap();
        for i in 0..4 {
            for o in 0..5 {
                let mut want = layer.bias.values()[o];
                for k in 0..5 {
                    want += nodes[i * 5 + k] * layer.theta.values()[k * 5 + o];
                }
                assert!((out[i * 5 + o] - want).abs() < 1e-12);
            }
        }
    }

    /// Per-edge evaluation: builds each message matrix explicitly.
    fn nnconv_oracle(nodes: &[f64], d_in: usize, edges: &Adjacency, l: &ConvLayer) -> Vec<f64> {
        let n = edges.size();
        let d_out = l.theta.shape()[1];
        let mut out = vec![0.0; n * d_out];
        for i in 0..n {
            for o in 0..d_out {
                let mut acc = l.bias.values()[o];
                for k in 0..d_in {
                    acc += nodes[i * d_in + k] * l.theta.values()[k * d_out + o];
                }
                for j in (0..n).filter(|&j| j != i) {
                    for k in 0..d_in {
                        let m = edges.get(i, j) * l.edge_weight.values()[k * d_out + o]
                            + l.edge_bias.values()[k * d_out + o];
                        acc += nodes[j * d_in + k] * m;
                    }
                }
                out[i * d_out + o] = acc;
            }
        }
        out
    }

    #[test]
    fn matches_per_edge_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let g = random_graph(&mut rng, 7);
        let mut layer = init_params(&small_cfg(7), 5).unwrap().conv[1].clone();
        for v in layer
            .edge_bias
            .values_mut()
            .iter_mut()
            .chain(layer.bias.values_mut())
        {
            *v = rng.random_range(-0.5..0.5);
        }
        let nodes: Vec<f64> = (0..35).map(|_| rng.random_range(-1.0..1.0)).collect();
        let fast = nnconv_forward(&nodes, 5, &g.adjacency, &layer).unwrap();
        let slow = nnconv_oracle(&nodes, 5, &g.adjacency, &layer);
        for (a, b) in fast.iter().zip(&slow) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_stack_is_permutation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let cfg = small_cfg(9);
        let mut p = init_params(&cfg, 1).unwrap();
        for c in &mut p.conv {
            c.edge_bias
                .values_mut()
                .iter_mut()
                .for_each(|v| *v = rng.random_range(-0.3..0.3));
        }
        let g = random_graph(&mut rng, 9);
        let base = encode_source(&p, &cfg, &g.scaled_nodes, &g.adjacency).unwrap();
        let mut perm: Vec<usize> = (0..9).collect();
        perm.shuffle(&mut rng);
        let nodes: Vec<f64> = perm.iter().map(|&i| g.scaled_nodes[i]).collect();
        let mut edges = Adjacency::zeros(9);
        for a in 0..9 {
            for b in 0..9 {
                edges.set(a, b, g.adjacency.get(perm[a], perm[b]));
            }
        }
        let out = encode_source(&p, &cfg, &nodes, &edges).unwrap();
        for (a, &src) in perm.iter().enumerate() {
            for o in 0..cfg.conv_dim {
                let d = out[a * cfg.conv_dim + o] - base[src * cfg.conv_dim + o];
                assert!(d.abs() < 1e-10);
            }
        }
    }

    #[test]
    fn positional_embedding_properties() {
        let pe0 = positional_embedding(0, 8).unwrap();
        assert_eq!(pe0, vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        let pe = positional_embedding(37, 128).unwrap();
        assert_eq!(pe[0], 37f64.sin());
        assert_eq!(pe[1], 37f64.cos());
        for i in 0..64 {
            assert!((pe[2 * i].powi(2) + pe[2 * i + 1].powi(2) - 1.0).abs() < 1e-12);
        }
        assert!(positional_embedding(3, 5).is_err());
        let all: Vec<Vec<f64>> = (1..=100)
            .map(|t| positional_embedding(t, 128).unwrap())
            .collect();
        for a in 0..100 {
            for b in a + 1..100 {
                assert_ne!(all[a], all[b]);
            }
        }
    }

    fn batch(
        rng: &mut ChaCha8Rng,
        b: usize,
        n: usize,
    ) -> (Vec<Vec<f64>>, Vec<usize>, Vec<BrainGraph>) {
        let noisy = (0..b)
            .map(|_| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let ts = (0..b).map(|_| rng.random_range(1..=100)).collect();
        let gs = (0..b).map(|_| random_graph(rng, n)).collect();
        (noisy, ts, gs)
    }

    #[test]
    fn zero_head_returns_batch_normalized_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cfg = small_cfg(5);
        let mut p = init_params(&cfg, 0).unwrap();
        p.head.weight.values_mut().iter_mut().for_each(|v| *v = 0.0);
        let (noisy, ts, gs) = batch(&mut rng, 4, 5);
        let srcs: Vec<&BrainGraph> = gs.iter().collect();
        let input = DenoiserInput {
            noisy: &noisy,
            timesteps: &ts,
            sources: &srcs,
        };
        let eval = predict_noise_eval(&p, &cfg, &input).unwrap();
        for (row, out) in noisy.iter().zip(&eval) {
            for (x, y) in row.iter().zip(out) {
                assert!((x / (1.0 + cfg.bn_eps).sqrt() - y).abs() < 1e-15);
            }
        }
        let train = predict_noise(&mut p.clone(), &cfg, &input, TrainState::Train).unwrap();
        for i in 0..5 {
            let col: Vec<f64> = noisy.iter().map(|r| r[i]).collect();
            let mean = col.iter().sum::<f64>() / 4.0;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
            for (b, v) in col.iter().enumerate() {
                let want = (v - mean) / (var + cfg.bn_eps).sqrt();
                assert!((train[b][i] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn duplicated_batch_keeps_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let cfg = small_cfg(4);
        let p = init_params(&cfg, 0).unwrap();
        let (noisy, ts, gs) = batch(&mut rng, 3, 4);
        let srcs: Vec<&BrainGraph> = gs.iter().collect();
        let run = |noisy: &[Vec<f64>], ts: &[usize], srcs: &[&BrainGraph]| {
            let mut tape = Tape::new();
            let input = DenoiserInput {
                noisy,
                timesteps: ts,
                sources: srcs,
            };
            let rec = record_forward(&mut tape, &p, &cfg, &input, TrainState::Train).unwrap();
            (rows(tape.value(rec.eps_hat), 4), rec.batch_stats.unwrap())
        };
        let (single, s1) = run(&noisy, &ts, &srcs);
        let dn: Vec<Vec<f64>> = noisy.iter().chain(&noisy).cloned().collect();
        let dt: Vec<usize> = ts.iter().chain(&ts).copied().collect();
        let ds: Vec<&BrainGraph> = srcs.iter().chain(&srcs).copied().collect();
        let (double, s2) = run(&dn, &dt, &ds);
        for i in 0..4 {
            assert!((s1.mean[i] - s2.mean[i]).abs() < 1e-14);
            assert!((s1.var[i] - s2.var[i]).abs() < 1e-14);
        }
        for b in 0..3 {
            assert_eq!(double[b], double[b + 3]);
            for (x, y) in double[b].iter().zip(&single[b]) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn eval_mode_is_deterministic_and_pure() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let cfg = small_cfg(6);
        let p = init_params(&cfg, 9).unwrap();
        let (noisy, ts, gs) = batch(&mut rng, 1, 6);
        let srcs: Vec<&BrainGraph> = gs.iter().collect();
        let input = DenoiserInput {
            noisy: &noisy,
            timesteps: &ts,
            sources: &srcs,
        };
        let a = predict_noise_eval(&p, &cfg, &input).unwrap();
        let b = predict_noise_eval(&p, &cfg, &input).unwrap();
        assert_eq!(a, b);
        assert_eq!(p, init_params(&cfg, 9).unwrap());
    }

    #[test]
    fn train_mode_updates_running_stats() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let cfg = small_cfg(3);
        let mut p = init_params(&cfg, 0).unwrap();
        let (noisy, ts, gs) = batch(&mut rng, 4, 3);
        let srcs: Vec<&BrainGraph> = gs.iter().collect();
        let input = DenoiserInput {
            noisy: &noisy,
            timesteps: &ts,
            sources: &srcs,
        };
        predict_noise(&mut p, &cfg, &input, TrainState::Train).unwrap();
        let col: Vec<f64> = noisy.iter().map(|r| r[0]).collect();
        let mean = col.iter().sum::<f64>() / 4.0;
        let unbiased = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 3.0;
        assert!((p.running_mean.values()[0] - 0.1 * mean).abs() < 1e-15);
        assert!((p.running_var.values()[0] - (0.9 + 0.1 * unbiased)).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_inputs() {
        let cfg = small_cfg(3);
        let p = init_params(&cfg, 0).unwrap();
        let g = graph(vec![1.0, 2.0, 3.0]);
        let srcs = [&g];
        let short = [vec![0.0; 2]];
        let input = DenoiserInput {
            noisy: &short,
            timesteps: &[1],
            sources: &srcs,
        };
        assert!(predict_noise_eval(&p, &cfg, &input).is_err());
        let mut asym = g.clone();
        asym.adjacency.set(0, 1, 0.9);
        let srcs = [&asym];
        let ok = [vec![0.0; 3]];
        let input = DenoiserInput {
            noisy: &ok,
            timesteps: &[1],
            sources: &srcs,
        };
        assert!(predict_noise_eval(&p, &cfg, &input).is_err());
    }

    fn loss_at(
        p: &ModelParams,
        cfg: &ModelConfig,
        input: &DenoiserInput<'_>,
        noise: &[Vec<f64>],
    ) -> f64 {
        let mut tape = Tape::new();
        let rec = record_forward(&mut tape, p, cfg, input, TrainState::Train).unwrap();
        let l = record_mse(&mut tape, rec.eps_hat, noise).unwrap();
        tape.scalar(l)
    }

    #[test]
    fn every_parameter_gets_gradient_and_matches_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let cfg = ModelConfig {
            conv_dim: 3,
            fc_dim: 4,
            pe_dim: 4,
            node_count: 4,
            ..Default::default()
        };
        let mut p = init_params(&cfg, 2).unwrap();
        for (_, t) in p.learnable_mut() {
            t.values_mut()
                .iter_mut()
                .for_each(|v| *v += rng.random_range(-0.2..0.2));
        }
        let (noisy, ts, gs) = batch(&mut rng, 3, 4);
        let noise: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let srcs: Vec<&BrainGraph> = gs.iter().collect();
        let input = DenoiserInput {
            noisy: &noisy,
            timesteps: &ts,
            sources: &srcs,
        };
        let mut q = p.clone();
        accumulate_loss_gradients(&mut q, &cfg, &input, &noise).unwrap();
        let h = 1e-6;
        for (idx, (name, t)) in q.learnable().into_iter().enumerate() {
            let g = t.grad().unwrap().to_vec();
            assert!(g.iter().any(|v| *v != 0.0), "{name} has no gradient");
            for (e, &ge) in g.iter().enumerate() {
                let orig = p.learnable()[idx].1.values()[e];
                p.learnable_mut()[idx].1.values_mut()[e] = orig + h;
                let plus = loss_at(&p, &cfg, &input, &noise);
                p.learnable_mut()[idx].1.values_mut()[e] = orig - h;
                let minus = loss_at(&p, &cfg, &input, &noise);
                p.learnable_mut()[idx].1.values_mut()[e] = orig;
                let num = (plus - minus) / (2.0 * h);
                let rel = (num - ge).abs() / num.abs().max(ge.abs()).max(1e-7);
                assert!(rel < 1e-4, "{name}[{e}]: {} vs {num}", ge);
            }
        }
    }
}
