//! Network layers built on [`Graph`] primitives.
//!
//! Each layer type is a view of graph-bound parameters (`NodeId`s) plus its
//! dimensions. `init` writes freshly initialised weights into a
//! [`Parameters`] set under a name prefix; `bind` registers those weights on
//! a graph so the layer can run forward passes.

use rand::{Rng, RngCore};

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::params::Parameters;
use crate::tensor::{Real, Tensor};

/// Glorot/Xavier uniform initialisation for a `[rows×cols]` matrix.
pub fn glorot_uniform<T: Real>(rows: usize, cols: usize, rng: &mut dyn RngCore) -> Tensor<T> {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    uniform(vec![rows, cols], limit, rng)
}

/// Elements drawn uniformly from `[-limit, limit)`.
pub fn uniform<T: Real>(shape: Vec<usize>, limit: f64, rng: &mut dyn RngCore) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| T::lit(rng.gen_range(-limit..limit)))
        .collect();
    Tensor::new(shape, data).expect("shape matches element count")
}

fn bind_as<T: Real>(
    g: &mut Graph<T>,
    params: &Parameters<T>,
    name: &str,
    shape: &[usize],
) -> Result<NodeId> {
    let t = params.get(name)?;
    if t.shape() != shape {
        return Err(Error::dim(
            "bind",
            format!("{name} has shape {:?}, expected {shape:?}", t.shape()),
        ));
    }
    Ok(g.param(name, t))
}

// ── Embedding ──────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    pub table: NodeId,
    pub vocab_size: usize,
    pub dim: usize,
    pub trainable: bool,
}

impl EmbeddingTable {
    /// Glorot-initialised `[V×d]` table with an all-zero padding row 0.
    pub fn init<T: Real>(
        params: &mut Parameters<T>,
        name: &str,
        vocab_size: usize,
        dim: usize,
        rng: &mut dyn RngCore,
    ) -> Result<()> {
        if vocab_size < 2 {
            return Err(Error::config("vocab_size", "must be at least 2 (PAD and OOV)"));
        }
        let mut table = glorot_uniform::<T>(vocab_size, dim, rng);
        table.data_mut()[..dim].fill(T::zero());
        params.insert(name, table);
        Ok(())
    }

    pub fn bind<T: Real>(
        g: &mut Graph<T>,
        params: &Parameters<T>,
        name: &str,
        trainable: bool,
    ) -> Result<Self> {
        let t = params.get(name)?;
        if t.ndim() != 2 || t.rows() < 2 {
            return Err(Error::dim("embedding", format!("bad table shape {:?}", t.shape())));
        }
        let (vocab_size, dim) = (t.shape()[0], t.shape()[1]);
        // Frozen tables still bind as named leaves; the trainer skips them.
        let table = g.param(name, t);
        Ok(Self {
            table,
            vocab_size,
            dim,
            trainable,
        })
    }
}

/// `[m×d]` matrix of embedding rows for `ids`.
pub fn embed<T: Real>(g: &mut Graph<T>, ids: &[usize], table: &EmbeddingTable) -> Result<NodeId> {
    g.embedding(table.table, ids)
}

// ── Convolution ────────────────────────────────────────────────────────

/// One filter bank per window width, sharing input and filter counts.
#[derive(Debug, Clone)]
pub struct ConvBlock {
    pub widths: Vec<usize>,
    pub filters: usize,
    pub input_dim: usize,
    /// `(weight [(k·d_in)×f], bias [f])` per entry of `widths`.
    pub banks: Vec<(NodeId, NodeId)>,
}

impl ConvBlock {
    pub fn weight_name(prefix: &str, width: usize) -> String {
        format!("{prefix}.w{width}")
    }

    pub fn bias_name(prefix: &str, width: usize) -> String {
        format!("{prefix}.b{width}")
    }

    pub fn validate_widths(widths: &[usize]) -> Result<()> {
        if widths.is_empty() {
            return Err(Error::config("conv_widths", "at least one width required"));
        }
        for (i, &w) in widths.iter().enumerate() {
            if w < 1 {
                return Err(Error::config("conv_widths", "widths must be >= 1"));
            }
            if widths[..i].contains(&w) {
                return Err(Error::config("conv_widths", format!("duplicate width {w}")));
            }
        }
        Ok(())
    }

    pub fn init<T: Real>(
        params: &mut Parameters<T>,
        prefix: &str,
        widths: &[usize],
        input_dim: usize,
        filters: usize,
        rng: &mut dyn RngCore,
    ) -> Result<()> {
        Self::validate_widths(widths)?;
        for &k in widths {
            params.insert(
                Self::weight_name(prefix, k),
                glorot_uniform::<T>(k * input_dim, filters, rng),
            );
            params.insert(Self::bias_name(prefix, k), Tensor::zeros(vec![filters]));
        }
        Ok(())
    }

    pub fn bind<T: Real>(
        g: &mut Graph<T>,
        params: &Parameters<T>,
        prefix: &str,
        widths: &[usize],
        input_dim: usize,
        filters: usize,
    ) -> Result<Self> {
        Self::validate_widths(widths)?;
        let mut banks = Vec::with_capacity(widths.len());
        for &k in widths {
            let w = bind_as(g, params, &Self::weight_name(prefix, k), &[k * input_dim, filters])?;
            let b = bind_as(g, params, &Self::bias_name(prefix, k), &[filters])?;
            banks.push((w, b));
        }
        Ok(Self {
            widths: widths.to_vec(),
            filters,
            input_dim,
            banks,
        })
    }
}

/// Rows a width-`k` window reaches before its centre: `⌈(k−1)/2⌉`.
/// Even widths lean left.
pub fn window_left(width: usize) -> usize {
    width / 2
}

/// Same-padded convolution with ReLU: `[m×d_in] -> [m×f]`.
///
/// Output row `i` is `relu(W_kᵀ · window(x, i, k) + b_k)` where the window
/// spans rows `i−⌈(k−1)/2⌉ ..= i+⌊(k−1)/2⌋`, zero-filled off the ends.
pub fn conv1d<T: Real>(g: &mut Graph<T>, x: NodeId, block: &ConvBlock, width: usize) -> Result<NodeId> {
    if width < 1 {
        return Err(Error::config("width", "convolution width must be >= 1"));
    }
    let idx = block
        .widths
        .iter()
        .position(|&w| w == width)
        .ok_or_else(|| Error::config("width", format!("block has no filters of width {width}")))?;
    let (w, b) = block.banks[idx];
    let windows = g.unfold(x, width, window_left(width))?;
    let pre = g.matmul(windows, w)?;
    let pre = g.add(pre, b)?;
    Ok(g.relu(pre))
}

/// Max-pooling over time with window `pool` and step `stride`:
/// `[m×f] -> [⌈m/stride⌉×f]`.
pub fn max_pool_time<T: Real>(g: &mut Graph<T>, features: NodeId, pool: usize, stride: usize) -> Result<NodeId> {
    g.max_pool(features, pool, stride)
}

// ── LSTM ───────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Backward,
}

/// LSTM cell with gate blocks ordered (input, forget, candidate, output)
/// along the `4H` axis.
#[derive(Debug, Clone)]
pub struct LstmCell {
    pub w_x: NodeId,
    pub w_h: NodeId,
    pub bias: NodeId,
    pub input_dim: usize,
    pub hidden: usize,
}

impl LstmCell {
    pub fn init<T: Real>(
        params: &mut Parameters<T>,
        prefix: &str,
        input_dim: usize,
        hidden: usize,
        rng: &mut dyn RngCore,
    ) {
        params.insert(format!("{prefix}.w_x"), glorot_uniform::<T>(input_dim, 4 * hidden, rng));
        params.insert(format!("{prefix}.w_h"), glorot_uniform::<T>(hidden, 4 * hidden, rng));
        let mut bias = Tensor::zeros(vec![4 * hidden]);
        bias.data_mut()[hidden..2 * hidden].fill(T::one());
        params.insert(format!("{prefix}.b"), bias);
    }

    pub fn bind<T: Real>(
        g: &mut Graph<T>,
        params: &Parameters<T>,
        prefix: &str,
        input_dim: usize,
        hidden: usize,
    ) -> Result<Self> {
        Ok(Self {
            w_x: bind_as(g, params, &format!("{prefix}.w_x"), &[input_dim, 4 * hidden])?,
            w_h: bind_as(g, params, &format!("{prefix}.w_h"), &[hidden, 4 * hidden])?,
            bias: bind_as(g, params, &format!("{prefix}.b"), &[4 * hidden])?,
            input_dim,
            hidden,
        })
    }
}

/// Hidden and cell state sequences, both `[T×H]`, row `t` aligned with
/// input position `t` for either direction.
#[derive(Debug, Clone, Copy)]
pub struct LstmStates {
    pub hidden: NodeId,
    pub cells: NodeId,
}

/// Runs the recurrence from `h₀ = c₀ = 0` and returns the hidden states.
pub fn lstm_forward<T: Real>(
    g: &mut Graph<T>,
    x: NodeId,
    cell: &LstmCell,
    direction: Direction,
) -> Result<NodeId> {
    Ok(lstm_sequence(g, x, cell, direction, false)?.hidden)
}

/// Like [`lstm_forward`] but also stacks the cell states.
pub fn lstm_states<T: Real>(
    g: &mut Graph<T>,
    x: NodeId,
    cell: &LstmCell,
    direction: Direction,
) -> Result<LstmStates> {
    lstm_sequence(g, x, cell, direction, true)
}

fn lstm_sequence<T: Real>(
    g: &mut Graph<T>,
    x: NodeId,
    cell: &LstmCell,
    direction: Direction,
    keep_cells: bool,
) -> Result<LstmStates> {
    let shape = g.value(x).shape().to_vec();
    if shape.len() != 2 || shape[1] != cell.input_dim {
        return Err(Error::dim(
            "lstm",
            format!("input {shape:?} does not match input dim {}", cell.input_dim),
        ));
    }
    let steps = shape[0];
    let h = cell.hidden;

    // Input projections for all steps at once: [T×4H].
    let xw = g.matmul(x, cell.w_x)?;
    let xw = g.add(xw, cell.bias)?;

    let mut hidden = g.constant(Tensor::zeros(vec![1, h]));
    let mut state = g.constant(Tensor::zeros(vec![1, h]));
    let mut hs = vec![hidden; steps];
    let mut cs = vec![state; steps];

    let order: Vec<usize> = match direction {
        Direction::Forward => (0..steps).collect(),
        Direction::Backward => (0..steps).rev().collect(),
    };
    for t in order {
        let xt = g.slice(xw, 0, t, t + 1)?;
        let hw = g.matmul(hidden, cell.w_h)?;
        let z = g.add(xt, hw)?;
        let i = g.slice(z, 1, 0, h)?;
        let f = g.slice(z, 1, h, 2 * h)?;
        let c_hat = g.slice(z, 1, 2 * h, 3 * h)?;
        let o = g.slice(z, 1, 3 * h, 4 * h)?;
        let i = g.sigmoid(i);
        let f = g.sigmoid(f);
        let c_hat = g.tanh(c_hat);
        let o = g.sigmoid(o);

        let keep = g.mul(f, state)?;
        let write = g.mul(i, c_hat)?;
        state = g.add(keep, write)?;
        let squashed = g.tanh(state);
        hidden = g.mul(o, squashed)?;
        hs[t] = hidden;
        cs[t] = state;
    }
    let hidden = g.concat(&hs, 0)?;
    let cells = if keep_cells { g.concat(&cs, 0)? } else { hidden };
    Ok(LstmStates { hidden, cells })
}

/// Forward and backward LSTMs over the same input, concatenated per step:
/// `[T×d_in] -> [T×2H]`.
pub fn bilstm_forward<T: Real>(
    g: &mut Graph<T>,
    x: NodeId,
    forward: &LstmCell,
    backward: &LstmCell,
) -> Result<NodeId> {
    if forward.hidden != backward.hidden {
        return Err(Error::config(
            "lstm_hidden",
            format!(
                "forward and backward cells differ ({} vs {})",
                forward.hidden, backward.hidden
            ),
        ));
    }
    let fwd = lstm_forward(g, x, forward, Direction::Forward)?;
    let bwd = lstm_forward(g, x, backward, Direction::Backward)?;
    g.concat(&[fwd, bwd], 1)
}

// ── Attention ──────────────────────────────────────────────────────────

/// Additive attention: `e_t = tanh(h_t·W_a + b_a)`, `α = softmax(e_tᵀz)`,
/// `c = Σ α_t h_t`.
#[derive(Debug, Clone)]
pub struct AttentionHead {
    pub w: NodeId,
    pub b: NodeId,
    pub z: NodeId,
    pub input_dim: usize,
    pub attention_dim: usize,
}

impl AttentionHead {
    pub fn init<T: Real>(
        params: &mut Parameters<T>,
        prefix: &str,
        input_dim: usize,
        attention_dim: usize,
        rng: &mut dyn RngCore,
    ) {
        params.insert(format!("{prefix}.w"), glorot_uniform::<T>(input_dim, attention_dim, rng));
        params.insert(format!("{prefix}.b"), Tensor::zeros(vec![attention_dim]));
        params.insert(format!("{prefix}.z"), uniform::<T>(vec![attention_dim], 0.1, rng));
    }

    pub fn bind<T: Real>(
        g: &mut Graph<T>,
        params: &Parameters<T>,
        prefix: &str,
        input_dim: usize,
        attention_dim: usize,
    ) -> Result<Self> {
        Ok(Self {
            w: bind_as(g, params, &format!("{prefix}.w"), &[input_dim, attention_dim])?,
            b: bind_as(g, params, &format!("{prefix}.b"), &[attention_dim])?,
            z: bind_as(g, params, &format!("{prefix}.z"), &[attention_dim])?,
            input_dim,
            attention_dim,
        })
    }
}

/// Returns `(context [D], weights [T])`.
pub fn attention<T: Real>(g: &mut Graph<T>, states: NodeId, head: &AttentionHead) -> Result<(NodeId, NodeId)> {
    let shape = g.value(states).shape().to_vec();
    if shape.len() != 2 || shape[1] != head.input_dim {
        return Err(Error::dim(
            "attention",
            format!("states {shape:?} do not match input dim {}", head.input_dim),
        ));
    }
    let steps = shape[0];
    let proj = g.matmul(states, head.w)?;
    let proj = g.add(proj, head.b)?;
    let e = g.tanh(proj);
    let z = g.reshape(head.z, &[head.attention_dim, 1])?;
    let scores = g.matmul(e, z)?;
    let scores = g.reshape(scores, &[steps])?;
    let alpha = g.softmax(scores)?;
    let row = g.reshape(alpha, &[1, steps])?;
    let context = g.matmul(row, states)?;
    let context = g.reshape(context, &[head.input_dim])?;
    Ok((context, alpha))
}

// ── Classifier head ────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct Dense {
    pub w: NodeId,
    pub b: NodeId,
    pub input_dim: usize,
    pub output_dim: usize,
}

impl Dense {
    pub fn init<T: Real>(
        params: &mut Parameters<T>,
        prefix: &str,
        input_dim: usize,
        output_dim: usize,
        rng: &mut dyn RngCore,
    ) {
        params.insert(format!("{prefix}.w"), glorot_uniform::<T>(input_dim, output_dim, rng));
        params.insert(format!("{prefix}.b"), Tensor::zeros(vec![output_dim]));
    }

    pub fn bind<T: Real>(
        g: &mut Graph<T>,
        params: &Parameters<T>,
        prefix: &str,
        input_dim: usize,
        output_dim: usize,
    ) -> Result<Self> {
        Ok(Self {
            w: bind_as(g, params, &format!("{prefix}.w"), &[input_dim, output_dim])?,
            b: bind_as(g, params, &format!("{prefix}.b"), &[output_dim])?,
            input_dim,
            output_dim,
        })
    }
}

/// `softmax(cᵀW + b)` for a context vector `c`.
pub fn dense_softmax<T: Real>(g: &mut Graph<T>, context: NodeId, head: &Dense) -> Result<NodeId> {
    if head.output_dim < 2 {
        return Err(Error::config("classes", "need at least 2 classes"));
    }
    let row = g.reshape(context, &[1, head.input_dim])?;
    let logits = g.matmul(row, head.w)?;
    let logits = g.reshape(logits, &[head.output_dim])?;
    let logits = g.add(logits, head.b)?;
    g.softmax(logits)
}

// ── Dropout ────────────────────────────────────────────────────────────

pub fn validate_dropout(field: &str, rate: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::config(field, format!("dropout rate {rate} not in [0, 1)")));
    }
    Ok(())
}

/// Inverted dropout. In training mode each element is zeroed with
/// probability `rate` and survivors are scaled by `1/(1−rate)`; otherwise
/// the input node is returned untouched.
pub fn dropout<T: Real>(
    g: &mut Graph<T>,
    x: NodeId,
    rate: f64,
    training: bool,
    rng: &mut dyn RngCore,
) -> Result<NodeId> {
    validate_dropout("dropout", rate)?;
    if !training || rate == 0.0 {
        return Ok(x);
    }
    let keep = T::lit(1.0 / (1.0 - rate));
    let shape = g.value(x).shape().to_vec();
    let n = g.value(x).len();
    let mask = (0..n)
        .map(|_| if rng.gen::<f64>() < rate { T::zero() } else { keep })
        .collect();
    let mask = g.constant(Tensor::new(shape, mask)?);
    g.mul(x, mask)
}
