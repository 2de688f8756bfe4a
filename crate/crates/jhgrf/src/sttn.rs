//! Dual-axis transformer over series and horizon steps.
//!
//! The forecaster's second expert runs multi-head self-attention twice on the
//! same `[series, steps, features]` tensor: first along the time axis (each
//! series attends over its own horizon positions), then along the node axis
//! (each step attends across series). Both live inside pre-norm encoder
//! blocks — `y = x + MSA(LN(x))`, `z = y + MLP(LN(y))` — plus an optional
//! extra skip that adds the block input once more ("initial connection",
//! default on). A `post_norm` switch flips to the classic post-norm ordering.
//!
//! No positional encoding is added and temporal attention is not causally
//! masked: the attended axis is a projection of a fully observed history
//! window, so nothing unseen can leak.

use rand::Rng;
use thiserror::Error;

use crate::tensor::{Tape, Tensor, TensorError, TensorId};

/// Errors from transformer configuration or execution.
#[derive(Debug, Error)]
pub enum SttnError {
    /// Invalid hyperparameter combination (e.g. head count not dividing the
    /// feature width).
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Which axis of a `[series, steps, features]` tensor attention runs over.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttendAxis {
    /// Attend over horizon steps, independently per series.
    Time,
    /// Attend over series, independently per step.
    Nodes,
}

/// Parameters of one encoder block: query/key/value projections
/// (`[d, h*h_d]` with `h*h_d = d`), output merge (`[d, d]`), two layer-norm
/// scale/shift pairs, and a two-layer MLP (`[d, 2d]`, `[2d, d]`).
#[derive(Debug, Clone)]
pub struct AttentionParams {
    pub heads: usize,
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_o: Tensor,
    pub ln1_scale: Tensor,
    pub ln1_shift: Tensor,
    pub ln2_scale: Tensor,
    pub ln2_shift: Tensor,
    pub mlp_w1: Tensor,
    pub mlp_w2: Tensor,
}

/// Tape handles for a placed [`AttentionParams`].
#[derive(Debug, Clone)]
pub struct AttentionIds {
    pub heads: usize,
    pub w_q: TensorId,
    pub w_k: TensorId,
    pub w_v: TensorId,
    pub w_o: TensorId,
    pub ln1_scale: TensorId,
    pub ln1_shift: TensorId,
    pub ln2_scale: TensorId,
    pub ln2_shift: TensorId,
    pub mlp_w1: TensorId,
    pub mlp_w2: TensorId,
}

impl AttentionParams {
    /// Fresh block of width `d` with `heads` attention heads. Fails if
    /// `heads` does not evenly partition `d`.
    pub fn init<R: Rng>(d: usize, heads: usize, rng: &mut R) -> Result<Self, SttnError> {
        if heads == 0 || d % heads != 0 {
            return Err(SttnError::Config(format!(
                "feature width {d} is not divisible into {heads} heads"
            )));
        }
        let bound = 1.0 / (d as f64).sqrt();
        let d_ff = 2 * d;
        Ok(Self {
            heads,
            w_q: Tensor::uniform(&[d, d], bound, rng),
            w_k: Tensor::uniform(&[d, d], bound, rng),
            w_v: Tensor::uniform(&[d, d], bound, rng),
            w_o: Tensor::uniform(&[d, d], bound, rng),
            ln1_scale: Tensor::full(&[d], 1.0).expect("finite constant"),
            ln1_shift: Tensor::zeros(&[d]),
            ln2_scale: Tensor::full(&[d], 1.0).expect("finite constant"),
            ln2_shift: Tensor::zeros(&[d]),
            mlp_w1: Tensor::uniform(&[d, d_ff], bound, rng),
            mlp_w2: Tensor::uniform(&[d_ff, d], 1.0 / (d_ff as f64).sqrt(), rng),
        })
    }

    /// Feature width `d`.
    pub fn dim(&self) -> usize {
        self.ln1_scale.shape()[0]
    }

    /// Place all parameters on `tape` as untracked leaves.
    pub fn place(&self, tape: &mut Tape) -> AttentionIds {
        AttentionIds {
            heads: self.heads,
            w_q: tape.place(&self.w_q),
            w_k: tape.place(&self.w_k),
            w_v: tape.place(&self.w_v),
            w_o: tape.place(&self.w_o),
            ln1_scale: tape.place(&self.ln1_scale),
            ln1_shift: tape.place(&self.ln1_shift),
            ln2_scale: tape.place(&self.ln2_scale),
            ln2_shift: tape.place(&self.ln2_shift),
            mlp_w1: tape.place(&self.mlp_w1),
            mlp_w2: tape.place(&self.mlp_w2),
        }
    }

    /// Place all parameters and record their tape ids for gradient readback.
    pub fn place_tracked(&mut self, tape: &mut Tape) -> AttentionIds {
        AttentionIds {
            heads: self.heads,
            w_q: tape.place_tracked(&mut self.w_q),
            w_k: tape.place_tracked(&mut self.w_k),
            w_v: tape.place_tracked(&mut self.w_v),
            w_o: tape.place_tracked(&mut self.w_o),
            ln1_scale: tape.place_tracked(&mut self.ln1_scale),
            ln1_shift: tape.place_tracked(&mut self.ln1_shift),
            ln2_scale: tape.place_tracked(&mut self.ln2_scale),
            ln2_shift: tape.place_tracked(&mut self.ln2_shift),
            mlp_w1: tape.place_tracked(&mut self.mlp_w1),
            mlp_w2: tape.place_tracked(&mut self.mlp_w2),
        }
    }

    /// Rebuild the id structure from leaves supplied in the same order as
    /// [`AttentionParams::place`] / [`AttentionParams::named_params_mut`].
    pub fn ids_from_iter(&self, it: &mut impl Iterator<Item = TensorId>) -> AttentionIds {
        let mut next = || it.next().expect("enough ids for the encoder block");
        AttentionIds {
            heads: self.heads,
            w_q: next(),
            w_k: next(),
            w_v: next(),
            w_o: next(),
            ln1_scale: next(),
            ln1_shift: next(),
            ln2_scale: next(),
            ln2_shift: next(),
            mlp_w1: next(),
            mlp_w2: next(),
        }
    }

    /// Collect `(name, tensor)` pairs for every parameter.
    pub fn named_params_mut<'a>(
        &'a mut self,
        prefix: &str,
        out: &mut Vec<(String, &'a mut Tensor)>,
    ) {
        out.push((format!("{prefix}.w_q"), &mut self.w_q));
        out.push((format!("{prefix}.w_k"), &mut self.w_k));
        out.push((format!("{prefix}.w_v"), &mut self.w_v));
        out.push((format!("{prefix}.w_o"), &mut self.w_o));
        out.push((format!("{prefix}.ln1_scale"), &mut self.ln1_scale));
        out.push((format!("{prefix}.ln1_shift"), &mut self.ln1_shift));
        out.push((format!("{prefix}.ln2_scale"), &mut self.ln2_scale));
        out.push((format!("{prefix}.ln2_shift"), &mut self.ln2_shift));
        out.push((format!("{prefix}.mlp_w1"), &mut self.mlp_w1));
        out.push((format!("{prefix}.mlp_w2"), &mut self.mlp_w2));
    }
}

/// Parameters of the full transformer: a stack of temporal blocks followed by
/// a stack of spatial blocks (default depth: one of each).
#[derive(Debug, Clone)]
pub struct SttnParams {
    pub temporal: Vec<AttentionParams>,
    pub spatial: Vec<AttentionParams>,
}

/// Tape handles for a placed [`SttnParams`].
#[derive(Debug, Clone)]
pub struct SttnIds {
    pub temporal: Vec<AttentionIds>,
    pub spatial: Vec<AttentionIds>,
}

impl SttnParams {
    /// Fresh transformer of width `d` with `heads` heads per block.
    pub fn init<R: Rng>(
        d: usize,
        heads: usize,
        temporal_depth: usize,
        spatial_depth: usize,
        rng: &mut R,
    ) -> Result<Self, SttnError> {
        let temporal = (0..temporal_depth)
            .map(|_| AttentionParams::init(d, heads, rng))
            .collect::<Result<_, _>>()?;
        let spatial = (0..spatial_depth)
            .map(|_| AttentionParams::init(d, heads, rng))
            .collect::<Result<_, _>>()?;
        Ok(Self { temporal, spatial })
    }

    /// Place all parameters on `tape` as untracked leaves.
    pub fn place(&self, tape: &mut Tape) -> SttnIds {
        SttnIds {
            temporal: self.temporal.iter().map(|b| b.place(tape)).collect(),
            spatial: self.spatial.iter().map(|b| b.place(tape)).collect(),
        }
    }

    /// Place all parameters and record their tape ids for gradient readback.
    pub fn place_tracked(&mut self, tape: &mut Tape) -> SttnIds {
        SttnIds {
            temporal: self
                .temporal
                .iter_mut()
                .map(|b| b.place_tracked(tape))
                .collect(),
            spatial: self
                .spatial
                .iter_mut()
                .map(|b| b.place_tracked(tape))
                .collect(),
        }
    }

    /// Rebuild the id structure from leaves supplied in the same order as
    /// [`SttnParams::place`] / [`SttnParams::named_params_mut`].
    pub fn ids_from_iter(&self, it: &mut impl Iterator<Item = TensorId>) -> SttnIds {
        SttnIds {
            temporal: self
                .temporal
                .iter()
                .map(|b| b.ids_from_iter(&mut *it))
                .collect(),
            spatial: self
                .spatial
                .iter()
                .map(|b| b.ids_from_iter(&mut *it))
                .collect(),
        }
    }

    /// Collect `(name, tensor)` pairs for every parameter.
    pub fn named_params_mut<'a>(
        &'a mut self,
        prefix: &str,
        out: &mut Vec<(String, &'a mut Tensor)>,
    ) {
        for (i, block) in self.temporal.iter_mut().enumerate() {
            block.named_params_mut(&format!("{prefix}.temporal{i}"), out);
        }
        for (i, block) in self.spatial.iter_mut().enumerate() {
            block.named_params_mut(&format!("{prefix}.spatial{i}"), out);
        }
    }
}

/// Forward-pass options.
#[derive(Debug, Clone, Copy)]
pub struct SttnOptions {
    /// Add each block's original input to its output once more.
    pub initial_connection: bool,
    /// Use post-norm ordering (`LN(x + MSA(x))`) instead of pre-norm.
    pub post_norm: bool,
}

impl Default for SttnOptions {
    fn default() -> Self {
        Self {
            initial_connection: true,
            post_norm: false,
        }
    }
}

fn expect_rank3(tape: &Tape, x: TensorId) -> Result<[usize; 3], SttnError> {
    let shape = tape.shape(x);
    if shape.len() != 3 {
        return Err(SttnError::Tensor(TensorError::ShapeMismatch(format!(
            "expected [series, steps, features], got {shape:?}"
        ))));
    }
    Ok([shape[0], shape[1], shape[2]])
}

/// Layer norm: standardize the trailing feature axis, then scale and shift.
fn layer_norm(
    tape: &mut Tape,
    x: TensorId,
    scale: TensorId,
    shift: TensorId,
) -> Result<TensorId, TensorError> {
    let standardized = tape.standardize_lastdim(x, 1e-12)?;
    let scaled = tape.mul(standardized, scale)?;
    tape.add(scaled, shift)
}

/// Multi-head self-attention over the trailing sequence axis of a
/// `[batch, len, d]` tensor. Returns the merged output and the attention
/// tensor (`[batch, h, len, len]`, rows summing to 1).
fn attention_core(
    tape: &mut Tape,
    x: TensorId,
    params: &AttentionIds,
) -> Result<(TensorId, TensorId), SttnError> {
    let [b, len, d] = expect_rank3(tape, x)?;
    let h = params.heads;
    if h == 0 || d % h != 0 {
        return Err(SttnError::Config(format!(
            "feature width {d} is not divisible into {h} heads"
        )));
    }
    let hd = d / h;
    let wq_shape = tape.shape(params.w_q);
    if wq_shape != [d, d] {
        return Err(SttnError::Tensor(TensorError::ShapeMismatch(format!(
            "attention projections expect [{d}, {d}], got {wq_shape:?}"
        ))));
    }

    let split = |tape: &mut Tape, w: TensorId| -> Result<TensorId, TensorError> {
        let proj = tape.matmul(x, w)?; // [b, len, d]
        let heads = tape.reshape(proj, &[b, len, h, hd])?;
        tape.permute(heads, &[0, 2, 1, 3]) // [b, h, len, hd]
    };
    let q = split(tape, params.w_q)?;
    let k = split(tape, params.w_k)?;
    let v = split(tape, params.w_v)?;

    let kt = tape.permute(k, &[0, 1, 3, 2])?; // [b, h, hd, len]
    let energy = tape.matmul(q, kt)?; // [b, h, len, len]
    let scaled = tape.scale(energy, 1.0 / (hd as f64).sqrt())?;
    let attention = tape.softmax_lastdim(scaled)?;
    let mixed = tape.matmul(attention, v)?; // [b, h, len, hd]
    let merged = tape.permute(mixed, &[0, 2, 1, 3])?; // [b, len, h, hd]
    let flat = tape.reshape(merged, &[b, len, d])?;
    let out = tape.matmul(flat, params.w_o)?;
    Ok((out, attention))
}

/// Move the attended axis into sequence position: identity for [`AttendAxis::Time`],
/// a series/steps transpose for [`AttendAxis::Nodes`].
fn to_sequence(tape: &mut Tape, x: TensorId, axis: AttendAxis) -> Result<TensorId, TensorError> {
    match axis {
        AttendAxis::Time => Ok(x),
        AttendAxis::Nodes => tape.permute(x, &[1, 0, 2]),
    }
}

/// Multi-head self-attention over the chosen axis of a
/// `[series, steps, features]` tensor; output keeps the input layout.
/// Also returns the attention tensor for inspection.
pub fn attention_over_axis_on(
    tape: &mut Tape,
    x: TensorId,
    axis: AttendAxis,
    params: &AttentionIds,
) -> Result<(TensorId, TensorId), SttnError> {
    expect_rank3(tape, x)?;
    let seq = to_sequence(tape, x, axis)?;
    let (out, attention) = attention_core(tape, seq, params)?;
    let restored = to_sequence(tape, out, axis)?;
    Ok((restored, attention))
}

/// Plain-tensor wrapper over [`attention_over_axis_on`].
pub fn multihead_attention_over_axis(
    x: &Tensor,
    axis: AttendAxis,
    params: &AttentionParams,
) -> Result<Tensor, SttnError> {
    let mut tape = Tape::new();
    let xid = tape.place(x);
    let ids = params.place(&mut tape);
    let (out, _) = attention_over_axis_on(&mut tape, xid, axis, &ids)?;
    Ok(tape.to_tensor(out))
}

fn mlp(tape: &mut Tape, x: TensorId, params: &AttentionIds) -> Result<TensorId, TensorError> {
    let hidden = tape.matmul(x, params.mlp_w1)?;
    let active = tape.relu(hidden)?;
    tape.matmul(active, params.mlp_w2)
}

/// One encoder block over the chosen axis.
///
/// Pre-norm (default): `y = x + MSA(LN1(x))`, `z = y + MLP(LN2(y))`.
/// Post-norm: `y = LN1(x + MSA(x))`, `z = LN2(y + MLP(y))`.
/// With the initial connection on, the block input is added once more.
pub fn encoder_block_on(
    tape: &mut Tape,
    x: TensorId,
    axis: AttendAxis,
    params: &AttentionIds,
    opts: SttnOptions,
) -> Result<TensorId, SttnError> {
    expect_rank3(tape, x)?;
    let z = if opts.post_norm {
        let (attended, _) = attention_over_axis_on(tape, x, axis, params)?;
        let summed = tape.add(x, attended)?;
        let y = layer_norm(tape, summed, params.ln1_scale, params.ln1_shift)?;
        let expanded = mlp(tape, y, params)?;
        let summed2 = tape.add(y, expanded)?;
        layer_norm(tape, summed2, params.ln2_scale, params.ln2_shift)?
    } else {
        let normed = layer_norm(tape, x, params.ln1_scale, params.ln1_shift)?;
        let (attended, _) = attention_over_axis_on(tape, normed, axis, params)?;
        let y = tape.add(x, attended)?;
        let normed2 = layer_norm(tape, y, params.ln2_scale, params.ln2_shift)?;
        let expanded = mlp(tape, normed2, params)?;
        tape.add(y, expanded)?
    };
    if opts.initial_connection {
        Ok(tape.add(z, x)?)
    } else {
        Ok(z)
    }
}

/// Plain-tensor wrapper over [`encoder_block_on`] with default options.
pub fn encoder_block(
    x: &Tensor,
    axis: AttendAxis,
    params: &AttentionParams,
) -> Result<Tensor, SttnError> {
    let mut tape = Tape::new();
    let xid = tape.place(x);
    let ids = params.place(&mut tape);
    let out = encoder_block_on(&mut tape, xid, axis, &ids, SttnOptions::default())?;
    Ok(tape.to_tensor(out))
}

/// Full transformer: all temporal blocks (attention over steps), then all
/// spatial blocks (attention over series).
pub fn sttn_forward_on(
    tape: &mut Tape,
    x: TensorId,
    params: &SttnIds,
    opts: SttnOptions,
) -> Result<TensorId, SttnError> {
    let mut state = x;
    for block in &params.temporal {
        state = encoder_block_on(tape, state, AttendAxis::Time, block, opts)?;
    }
    for block in &params.spatial {
        state = encoder_block_on(tape, state, AttendAxis::Nodes, block, opts)?;
    }
    Ok(state)
}

/// Plain-tensor wrapper over [`sttn_forward_on`] with default options.
pub fn sttn_forward(x: &Tensor, params: &SttnParams) -> Result<Tensor, SttnError> {
    let mut tape = Tape::new();
    let xid = tape.place(x);
    let ids = params.place(&mut tape);
    let out = sttn_forward_on(&mut tape, xid, &ids, SttnOptions::default())?;
    Ok(tape.to_tensor(out))
}
