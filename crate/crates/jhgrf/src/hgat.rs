//! Hypergraph attention layer.
//!
//! One layer runs two attention stages over a (possibly soft) incidence
//! matrix, then a feature-wise normalization over the node axis, optional
//! dropout, and a gated fusion with the layer input:
//!
//! 1. **Intra-edge aggregation** — each hyperedge attends over its member
//!    nodes and builds an edge representation.
//! 2. **Inter-edge aggregation** — each node attends over the hyperedges it
//!    belongs to and mixes their representations back into its own state.
//!
//! Attention weights are computed with a masked softmax whose mask *is* the
//! incidence column/row, so soft membership weights modulate attention and a
//! zero-weight membership contributes nothing (and receives no gradient).
//! Empty hyperedges produce an all-zero representation; isolated nodes keep
//! only their self term.

use rand::{Rng, SeedableRng};

use crate::structure::IncidenceMatrix;
use crate::tensor::{Tape, Tensor, TensorError, TensorId};

/// Per-head projection weights.
///
/// `w0`, `w1`, `w2` are `[d, d]` matrices; `w3` is a `[2d]` scoring vector
/// applied to the concatenation of a projected node feature and a projected
/// edge feature.
#[derive(Debug, Clone)]
pub struct HgatHeadParams {
    pub w0: Tensor,
    pub w1: Tensor,
    pub w2: Tensor,
    pub w3: Tensor,
}

/// Parameters of one hypergraph attention layer.
#[derive(Debug, Clone)]
pub struct HgatLayerParams {
    /// Attention heads (default count: 2).
    pub heads: Vec<HgatHeadParams>,
    /// Gate projection applied to the updated state (`[d, d]` weight, `[d]` bias).
    pub fuse_s_w: Tensor,
    pub fuse_s_b: Tensor,
    /// Gate projection applied to the layer input (`[d, d]` weight, `[d]` bias).
    pub fuse_g_w: Tensor,
    pub fuse_g_b: Tensor,
    /// Learned scale/shift (`[d]`) of the per-feature normalization over nodes.
    pub norm_scale: Tensor,
    pub norm_shift: Tensor,
}

/// Tape handles for a placed [`HgatLayerParams`].
#[derive(Debug, Clone)]
pub struct HgatHeadIds {
    pub w0: TensorId,
    pub w1: TensorId,
    pub w2: TensorId,
    pub w3: TensorId,
}

/// Tape handles for one placed layer; produced by [`HgatLayerParams::place`].
#[derive(Debug, Clone)]
pub struct HgatLayerIds {
    pub heads: Vec<HgatHeadIds>,
    pub fuse_s_w: TensorId,
    pub fuse_s_b: TensorId,
    pub fuse_g_w: TensorId,
    pub fuse_g_b: TensorId,
    pub norm_scale: TensorId,
    pub norm_shift: TensorId,
}

/// Forward-pass options for [`hgat_forward_on`].
#[derive(Debug, Clone, Copy)]
pub struct HgatOptions {
    /// Dropout rate applied after normalization (train mode only).
    pub dropout: f64,
    /// Whether dropout is active.
    pub train: bool,
    /// Apply a sigmoid to the fused output (`true`) or leave it linear.
    pub fuse_sigmoid: bool,
}

impl Default for HgatOptions {
    fn default() -> Self {
        Self {
            dropout: 0.1,
            train: false,
            fuse_sigmoid: true,
        }
    }
}

impl HgatLayerParams {
    /// Fresh layer with `z` heads of width `d`. Weights are `U(-1/sqrt(fan_in),
    /// 1/sqrt(fan_in))`, biases zero, normalization scale one / shift zero.
    pub fn init<R: Rng>(d: usize, z: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (d as f64).sqrt();
        let bound3 = 1.0 / (2.0 * d as f64).sqrt();
        let heads = (0..z)
            .map(|_| HgatHeadParams {
                w0: Tensor::uniform(&[d, d], bound, rng),
                w1: Tensor::uniform(&[d, d], bound, rng),
                w2: Tensor::uniform(&[d, d], bound, rng),
                w3: Tensor::uniform(&[2 * d], bound3, rng),
            })
            .collect();
        Self {
            heads,
            fuse_s_w: Tensor::uniform(&[d, d], bound, rng),
            fuse_s_b: Tensor::zeros(&[d]),
            fuse_g_w: Tensor::uniform(&[d, d], bound, rng),
            fuse_g_b: Tensor::zeros(&[d]),
            norm_scale: Tensor::full(&[d], 1.0).expect("finite constant"),
            norm_shift: Tensor::zeros(&[d]),
        }
    }

    /// Feature width `d`.
    pub fn dim(&self) -> usize {
        self.fuse_s_b.shape()[0]
    }

    /// Head count `Z`.
    pub fn head_count(&self) -> usize {
        self.heads.len()
    }

    /// Place all parameters on `tape` as untracked leaves.
    pub fn place(&self, tape: &mut Tape) -> HgatLayerIds {
        HgatLayerIds {
            heads: self
                .heads
                .iter()
                .map(|h| HgatHeadIds {
                    w0: tape.place(&h.w0),
                    w1: tape.place(&h.w1),
                    w2: tape.place(&h.w2),
                    w3: tape.place(&h.w3),
                })
                .collect(),
            fuse_s_w: tape.place(&self.fuse_s_w),
            fuse_s_b: tape.place(&self.fuse_s_b),
            fuse_g_w: tape.place(&self.fuse_g_w),
            fuse_g_b: tape.place(&self.fuse_g_b),
            norm_scale: tape.place(&self.norm_scale),
            norm_shift: tape.place(&self.norm_shift),
        }
    }

    /// Place all parameters and record their tape ids for gradient readback.
    pub fn place_tracked(&mut self, tape: &mut Tape) -> HgatLayerIds {
        HgatLayerIds {
            heads: self
                .heads
                .iter_mut()
                .map(|h| HgatHeadIds {
                    w0: tape.place_tracked(&mut h.w0),
                    w1: tape.place_tracked(&mut h.w1),
                    w2: tape.place_tracked(&mut h.w2),
                    w3: tape.place_tracked(&mut h.w3),
                })
                .collect(),
            fuse_s_w: tape.place_tracked(&mut self.fuse_s_w),
            fuse_s_b: tape.place_tracked(&mut self.fuse_s_b),
            fuse_g_w: tape.place_tracked(&mut self.fuse_g_w),
            fuse_g_b: tape.place_tracked(&mut self.fuse_g_b),
            norm_scale: tape.place_tracked(&mut self.norm_scale),
            norm_shift: tape.place_tracked(&mut self.norm_shift),
        }
    }

    /// Rebuild the id structure from leaves supplied in the same order as
    /// [`HgatLayerParams::place`] / [`HgatLayerParams::named_params_mut`].
    pub fn ids_from_iter(&self, it: &mut impl Iterator<Item = TensorId>) -> HgatLayerIds {
        let mut next = || it.next().expect("enough ids for the hgat layer");
        HgatLayerIds {
            heads: (0..self.heads.len())
                .map(|_| HgatHeadIds {
                    w0: next(),
                    w1: next(),
                    w2: next(),
                    w3: next(),
                })
                .collect(),
            fuse_s_w: next(),
            fuse_s_b: next(),
            fuse_g_w: next(),
            fuse_g_b: next(),
            norm_scale: next(),
            norm_shift: next(),
        }
    }

    /// Collect `(name, tensor)` pairs for every parameter, names prefixed by
    /// `prefix`. Order is deterministic and matches [`HgatLayerParams::place`].
    pub fn named_params_mut<'a>(
        &'a mut self,
        prefix: &str,
        out: &mut Vec<(String, &'a mut Tensor)>,
    ) {
        for (z, h) in self.heads.iter_mut().enumerate() {
            out.push((format!("{prefix}.head{z}.w0"), &mut h.w0));
            out.push((format!("{prefix}.head{z}.w1"), &mut h.w1));
            out.push((format!("{prefix}.head{z}.w2"), &mut h.w2));
            out.push((format!("{prefix}.head{z}.w3"), &mut h.w3));
        }
        out.push((format!("{prefix}.fuse_s_w"), &mut self.fuse_s_w));
        out.push((format!("{prefix}.fuse_s_b"), &mut self.fuse_s_b));
        out.push((format!("{prefix}.fuse_g_w"), &mut self.fuse_g_w));
        out.push((format!("{prefix}.fuse_g_b"), &mut self.fuse_g_b));
        out.push((format!("{prefix}.norm_scale"), &mut self.norm_scale));
        out.push((format!("{prefix}.norm_shift"), &mut self.norm_shift));
    }
}

/// Result of intra-edge aggregation: per-edge representations plus the
/// attention matrix of every head (`[m, n]`, rows = edges).
pub struct IntraOutput {
    pub edges: TensorId,
    pub alpha: Vec<TensorId>,
}

/// Result of inter-edge aggregation: updated node representations plus the
/// attention matrix of every head (`[n, m]`, rows = nodes).
pub struct InterOutput {
    pub nodes: TensorId,
    pub beta: Vec<TensorId>,
}

fn expect_rank3(tape: &Tape, x: TensorId, what: &str) -> Result<[usize; 3], TensorError> {
    let shape = tape.shape(x);
    if shape.len() != 3 {
        return Err(TensorError::ShapeMismatch(format!(
            "{what} must have shape [rows, steps, features], got {shape:?}"
        )));
    }
    Ok([shape[0], shape[1], shape[2]])
}

fn expect_incidence(
    tape: &Tape,
    incidence: TensorId,
    n: usize,
) -> Result<(usize, usize), TensorError> {
    let shape = tape.shape(incidence);
    if shape.len() != 2 || shape[0] != n {
        return Err(TensorError::ShapeMismatch(format!(
            "incidence must have shape [{n}, m], got {shape:?}"
        )));
    }
    Ok((shape[0], shape[1]))
}

/// 0/1 mask over hyperedges: 1 where the incidence column has any nonzero
/// weight. Used to zero out representations of empty hyperedges, whose
/// aggregate would otherwise pass through the sigmoid as 0.5.
fn edge_active_mask(tape: &mut Tape, incidence: TensorId) -> Result<TensorId, TensorError> {
    let shape = tape.shape(incidence).to_vec();
    let (n, m) = (shape[0], shape[1]);
    let values = tape.values(incidence).to_vec();
    let mut mask = vec![0.0; m];
    for i in 0..n {
        for (j, slot) in mask.iter_mut().enumerate() {
            if values[i * m + j] != 0.0 {
                *slot = 1.0;
            }
        }
    }
    tape.leaf(&[m, 1, 1], mask)
}

/// Attention-weighted aggregation of member nodes into hyperedge
/// representations.
///
/// For each head, every node gets a scalar score (mean of `relu(W0 h)` over
/// steps and features); each edge softmaxes those scores over its members,
/// weighted by the incidence column, and aggregates `W0 h` accordingly. Head
/// outputs pass through a sigmoid and are summed. Shapes: `node_feats`
/// `[n, steps, d]`, `incidence` `[n, m]`, result `[m, steps, d]`.
pub fn intra_edge_aggregate_on(
    tape: &mut Tape,
    node_feats: TensorId,
    incidence: TensorId,
    params: &HgatLayerIds,
) -> Result<IntraOutput, TensorError> {
    let [n, steps, d] = expect_rank3(tape, node_feats, "node_feats")?;
    let (_, m) = expect_incidence(tape, incidence, n)?;
    if params.heads.is_empty() {
        return Err(TensorError::ShapeMismatch("layer has zero heads".to_string()));
    }

    let inc_t = tape.permute(incidence, &[1, 0])?; // [m, n]
    let ones_m = tape.leaf(&[m, 1], vec![1.0; m])?;
    let active = edge_active_mask(tape, incidence)?;

    let mut edges: Option<TensorId> = None;
    let mut alpha = Vec::with_capacity(params.heads.len());
    for head in &params.heads {
        let projected = tape.matmul(node_feats, head.w0)?; // [n, steps, d]
        let scored = tape.relu(projected)?;
        let flat_scores = tape.reshape(scored, &[n, steps * d])?;
        let node_score = tape.mean_lastdim(flat_scores)?; // [n, 1]
        let score_row = tape.reshape(node_score, &[1, n])?;
        let logits = tape.mul(ones_m, score_row)?; // [m, n]
        let att = tape.masked_softmax_lastdim(logits, inc_t)?;
        alpha.push(att);

        let flat_proj = tape.reshape(projected, &[n, steps * d])?;
        let agg = tape.matmul(att, flat_proj)?; // [m, steps * d]
        let agg3 = tape.reshape(agg, &[m, steps, d])?;
        let activated = tape.sigmoid(agg3)?;
        let masked = tape.mul(activated, active)?;
        edges = Some(match edges {
            Some(acc) => tape.add(acc, masked)?,
            None => masked,
        });
    }
    Ok(IntraOutput {
        edges: edges.expect("at least one head"),
        alpha,
    })
}

/// Attention-weighted aggregation of hyperedge representations back into
/// nodes, added to a per-node self term.
///
/// For each head, node/edge affinities come from `relu` of a two-sided linear
/// score on `W2`-projected features, averaged over steps; each node softmaxes
/// over the edges it belongs to (weighted by its incidence row) and adds the
/// aggregate of `W1`-projected edge features to its self term `W0 h`, then
/// applies `relu`. Head outputs are summed. Result shape: `[n, steps, d]`.
pub fn inter_edge_aggregate_on(
    tape: &mut Tape,
    node_feats: TensorId,
    edge_feats: TensorId,
    incidence: TensorId,
    params: &HgatLayerIds,
) -> Result<InterOutput, TensorError> {
    let [n, steps, d] = expect_rank3(tape, node_feats, "node_feats")?;
    let [m, esteps, ed] = expect_rank3(tape, edge_feats, "edge_feats")?;
    if esteps != steps || ed != d {
        return Err(TensorError::ShapeMismatch(format!(
            "edge_feats shape [{m}, {esteps}, {ed}] does not match node_feats [{n}, {steps}, {d}]"
        )));
    }
    let (_, mi) = expect_incidence(tape, incidence, n)?;
    if mi != m {
        return Err(TensorError::ShapeMismatch(format!(
            "incidence has {mi} hyperedges but edge_feats has {m}"
        )));
    }
    if params.heads.is_empty() {
        return Err(TensorError::ShapeMismatch("layer has zero heads".to_string()));
    }

    let mut nodes: Option<TensorId> = None;
    let mut beta = Vec::with_capacity(params.heads.len());
    for head in &params.heads {
        let self_term = tape.matmul(node_feats, head.w0)?; // [n, steps, d]

        // Affinity logits: relu(w3 . (W2 h_i ++ W2 e_j)), averaged over steps.
        // Split w3 into its node-side and edge-side halves so the dot product
        // becomes an outer sum of two per-side scores.
        let node_proj = tape.matmul(node_feats, head.w2)?; // [n, steps, d]
        let edge_proj = tape.matmul(edge_feats, head.w2)?; // [m, steps, d]
        let w3_pair = tape.reshape(head.w3, &[2, d])?;
        let w3_node = tape.index_axis(w3_pair, 0, 0)?; // [d]
        let w3_edge = tape.index_axis(w3_pair, 0, 1)?; // [d]
        let node_side = tape.mul(node_proj, w3_node)?;
        let node_score = tape.sum_lastdim(node_side)?; // [n, steps, 1]
        let node_score = tape.reshape(node_score, &[n, 1, steps])?;
        let edge_side = tape.mul(edge_proj, w3_edge)?;
        let edge_score = tape.sum_lastdim(edge_side)?; // [m, steps, 1]
        let edge_score = tape.reshape(edge_score, &[m, steps])?;
        let pair_score = tape.add(node_score, edge_score)?; // [n, m, steps]
        let affinity = tape.relu(pair_score)?;
        let logits = tape.mean_lastdim(affinity)?; // [n, m, 1]
        let logits = tape.reshape(logits, &[n, m])?;
        let att = tape.masked_softmax_lastdim(logits, incidence)?; // [n, m]
        beta.push(att);

        let edge_mixed = tape.matmul(edge_feats, head.w1)?; // [m, steps, d]
        let flat_edges = tape.reshape(edge_mixed, &[m, steps * d])?;
        let agg = tape.matmul(att, flat_edges)?; // [n, steps * d]
        let agg3 = tape.reshape(agg, &[n, steps, d])?;
        let combined = tape.add(self_term, agg3)?;
        let activated = tape.relu(combined)?;
        nodes = Some(match nodes {
            Some(acc) => tape.add(acc, activated)?,
            None => activated,
        });
    }
    Ok(InterOutput {
        nodes: nodes.expect("at least one head"),
        beta,
    })
}

/// Gated residual fusion of an updated representation with the layer input:
/// `g = sigmoid(f_s(updated) + f_g(original))`, output
/// `act(g * updated + (1 - g) * original)` where `act` is a sigmoid when
/// `fuse_sigmoid` is set and identity otherwise.
pub fn gated_fuse_on(
    tape: &mut Tape,
    updated: TensorId,
    original: TensorId,
    params: &HgatLayerIds,
    fuse_sigmoid: bool,
) -> Result<TensorId, TensorError> {
    if tape.shape(updated) != tape.shape(original) {
        return Err(TensorError::ShapeMismatch(format!(
            "gated fusion needs matching shapes, got {:?} vs {:?}",
            tape.shape(updated),
            tape.shape(original)
        )));
    }
    let s_lin = tape.matmul(updated, params.fuse_s_w)?;
    let s_aff = tape.add(s_lin, params.fuse_s_b)?;
    let g_lin = tape.matmul(original, params.fuse_g_w)?;
    let g_aff = tape.add(g_lin, params.fuse_g_b)?;
    let gate_logit = tape.add(s_aff, g_aff)?;
    let gate = tape.sigmoid(gate_logit)?;
    let kept = tape.mul(gate, updated)?;
    let neg_gate = tape.scale(gate, -1.0)?;
    let inv_gate = tape.add_scalar(neg_gate, 1.0)?;
    let passed = tape.mul(inv_gate, original)?;
    let blend = tape.add(kept, passed)?;
    if fuse_sigmoid {
        tape.sigmoid(blend)
    } else {
        Ok(blend)
    }
}

/// Full hypergraph attention layer: intra-edge aggregation, inter-edge
/// aggregation, per-feature normalization over the node axis with learned
/// scale/shift, dropout (train mode only), and gated fusion with the layer
/// input. Input and output are `[n, steps, d]`.
pub fn hgat_forward_on<R: Rng>(
    tape: &mut Tape,
    node_feats: TensorId,
    incidence: TensorId,
    params: &HgatLayerIds,
    opts: HgatOptions,
    rng: &mut R,
) -> Result<TensorId, TensorError> {
    let [n, steps, d] = expect_rank3(tape, node_feats, "node_feats")?;
    let intra = intra_edge_aggregate_on(tape, node_feats, incidence, params)?;
    let inter = inter_edge_aggregate_on(tape, node_feats, intra.edges, incidence, params)?;

    // Normalize each (step, feature) column over the node axis.
    let per_feature = tape.permute(inter.nodes, &[1, 2, 0])?; // [steps, d, n]
    let standardized = tape.standardize_lastdim(per_feature, 1e-5)?;
    let restored = tape.permute(standardized, &[2, 0, 1])?; // [n, steps, d]
    debug_assert_eq!(tape.shape(restored), &[n, steps, d][..]);
    let scaled = tape.mul(restored, params.norm_scale)?;
    let normed = tape.add(scaled, params.norm_shift)?;

    let regularized = if opts.train && opts.dropout > 0.0 {
        tape.dropout(normed, opts.dropout, rng)?
    } else {
        normed
    };
    gated_fuse_on(tape, regularized, node_feats, params, opts.fuse_sigmoid)
}

/// Fixed-seed generator for evaluation-mode wrappers. Never drawn from when
/// dropout is inactive; it only satisfies the forward-pass signature.
pub fn eval_rng() -> rand_chacha::ChaCha8Rng {
    rand_chacha::ChaCha8Rng::seed_from_u64(0)
}

fn run_plain<F>(build: F) -> Result<Tensor, TensorError>
where
    F: FnOnce(&mut Tape) -> Result<TensorId, TensorError>,
{
    let mut tape = Tape::new();
    let out = build(&mut tape)?;
    Ok(tape.to_tensor(out))
}

/// Plain-tensor wrapper over [`intra_edge_aggregate_on`].
pub fn intra_edge_aggregate(
    node_feats: &Tensor,
    incidence: &IncidenceMatrix,
    params: &HgatLayerParams,
) -> Result<Tensor, TensorError> {
    run_plain(|tape| {
        let x = tape.place(node_feats);
        let inc = tape.place(&incidence.weights);
        let ids = params.place(tape);
        Ok(intra_edge_aggregate_on(tape, x, inc, &ids)?.edges)
    })
}

/// Plain-tensor wrapper over [`inter_edge_aggregate_on`].
pub fn inter_edge_aggregate(
    node_feats: &Tensor,
    edge_feats: &Tensor,
    incidence: &IncidenceMatrix,
    params: &HgatLayerParams,
) -> Result<Tensor, TensorError> {
    run_plain(|tape| {
        let x = tape.place(node_feats);
        let e = tape.place(edge_feats);
        let inc = tape.place(&incidence.weights);
        let ids = params.place(tape);
        Ok(inter_edge_aggregate_on(tape, x, e, inc, &ids)?.nodes)
    })
}

/// Plain-tensor wrapper over [`gated_fuse_on`] with the sigmoid output
/// activation enabled.
pub fn gated_fuse(
    updated: &Tensor,
    original: &Tensor,
    params: &HgatLayerParams,
) -> Result<Tensor, TensorError> {
    run_plain(|tape| {
        let u = tape.place(updated);
        let o = tape.place(original);
        let ids = params.place(tape);
        gated_fuse_on(tape, u, o, &ids, true)
    })
}

/// Plain-tensor wrapper over [`hgat_forward_on`] in evaluation mode (no
/// dropout, sigmoid fusion).
pub fn hgat_forward(
    node_feats: &Tensor,
    incidence: &IncidenceMatrix,
    params: &HgatLayerParams,
) -> Result<Tensor, TensorError> {
    run_plain(|tape| {
        let x = tape.place(node_feats);
        let inc = tape.place(&incidence.weights);
        let ids = params.place(tape);
        let mut rng = eval_rng();
        hgat_forward_on(tape, x, inc, &ids, HgatOptions::default(), &mut rng)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::structure::IncidenceMode;
    use crate::tensor::grad_check_many;
    use rand_chacha::ChaCha8Rng;

    fn seeded(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::uniform(shape, 1.0, rng)
    }

    fn soft_incidence(n: usize, m: usize, rng: &mut ChaCha8Rng) -> IncidenceMatrix {
        let values = (0..n * m).map(|_| rng.gen_range(0.05..1.0)).collect();
        IncidenceMatrix {
            weights: Tensor::new(&[n, m], values).unwrap(),
            mode: IncidenceMode::Soft,
        }
    }

    fn incidence_from(n: usize, m: usize, values: Vec<f64>) -> IncidenceMatrix {
        IncidenceMatrix {
            weights: Tensor::new(&[n, m], values).unwrap(),
            mode: IncidenceMode::Soft,
        }
    }

    #[test]
    fn intra_output_shape_and_empty_edge_is_zero() {
        let mut rng = seeded(7);
        let (n, m, steps, d) = (4, 3, 2, 5);
        let params = HgatLayerParams::init(d, 2, &mut rng);
        let x = random_tensor(&[n, steps, d], &mut rng);
        // Column 1 is empty.
        let mut inc = vec![0.0; n * m];
        for i in 0..n {
            inc[i * m] = 0.8;
            inc[i * m + 2] = 0.3;
        }
        let incidence = incidence_from(n, m, inc);
        let edges = intra_edge_aggregate(&x, &incidence, &params).unwrap();
        assert_eq!(edges.shape(), &[m, steps, d]);
        for s in 0..steps {
            for f in 0..d {
                let v = edges.values()[(1 * steps + s) * d + f];
                assert_eq!(v, 0.0, "empty hyperedge must map to a zero representation");
            }
        }
        // Non-empty columns are strictly inside the sigmoid range per head,
        // so the two-head sum is positive and below 2.
        for j in [0usize, 2] {
            for s in 0..steps {
                for f in 0..d {
                    let v = edges.values()[(j * steps + s) * d + f];
                    assert!(v > 0.0 && v < 2.0, "edge {j} value {v} out of range");
                }
            }
        }
    }

    #[test]
    fn intra_singleton_member_gets_full_attention() {
        let mut rng = seeded(11);
        let (n, m, steps, d) = (3, 1, 2, 4);
        let params = HgatLayerParams::init(d, 1, &mut rng);
        let x = random_tensor(&[n, steps, d], &mut rng);
        // Only node 2 belongs to the edge, with a soft weight well below 1.
        let incidence = incidence_from(n, m, vec![0.0, 0.0, 0.35]);

        let mut tape = Tape::new();
        let xid = tape.place(&x);
        let inc = tape.place(&incidence.weights);
        let ids = params.place(&mut tape);
        let out = intra_edge_aggregate_on(&mut tape, xid, inc, &ids).unwrap();
        let alpha = tape.to_tensor(out.alpha[0]);
        assert_eq!(alpha.shape(), &[m, n]);
        assert!((alpha.values()[2] - 1.0).abs() < 1e-12);
        assert_eq!(alpha.values()[0], 0.0);
        assert_eq!(alpha.values()[1], 0.0);

        // The edge representation must equal sigmoid(W0 h_2).
        let edges = tape.to_tensor(out.edges);
        let mut check = Tape::new();
        let xe = check.place(&x);
        let w0 = check.place(&params.heads[0].w0);
        let proj = check.matmul(xe, w0).unwrap();
        let node2 = check.index_axis(proj, 0, 2).unwrap();
        let expect = check.sigmoid(node2).unwrap();
        let expect = check.to_tensor(expect);
        for (a, b) in edges.values().iter().zip(expect.values()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn intra_identical_members_share_attention_equally() {
        let mut rng = seeded(13);
        let (n, m, steps, d) = (2, 1, 2, 4);
        let params = HgatLayerParams::init(d, 1, &mut rng);
        let row = random_tensor(&[1, steps, d], &mut rng);
        let mut values = row.values().to_vec();
        values.extend_from_slice(row.values());
        let x = Tensor::new(&[n, steps, d], values).unwrap();
        // Different membership weights; identical features must still split
        // attention evenly because the logits are equal.
        let incidence = incidence_from(n, m, vec![0.9, 0.2]);

        let mut tape = Tape::new();
        let xid = tape.place(&x);
        let inc = tape.place(&incidence.weights);
        let ids = params.place(&mut tape);
        let out = intra_edge_aggregate_on(&mut tape, xid, inc, &ids).unwrap();
        let alpha = tape.to_tensor(out.alpha[0]);
        let a0 = alpha.values()[0];
        let a1 = alpha.values()[1];
        assert!((a0 + a1 - 1.0).abs() < 1e-12);
        // Weights do shift the split: 0.9 vs 0.2 at equal logits gives
        // 0.9/1.1 vs 0.2/1.1.
        assert!((a0 - 0.9 / 1.1).abs() < 1e-12, "a0 = {a0}");
        assert!((a1 - 0.2 / 1.1).abs() < 1e-12, "a1 = {a1}");

        // With equal membership weights the split is exactly 50/50.
        let incidence_eq = incidence_from(n, m, vec![0.7, 0.7]);
        let mut tape2 = Tape::new();
        let xid2 = tape2.place(&x);
        let inc2 = tape2.place(&incidence_eq.weights);
        let ids2 = params.place(&mut tape2);
        let out2 = intra_edge_aggregate_on(&mut tape2, xid2, inc2, &ids2).unwrap();
        let alpha2 = tape2.to_tensor(out2.alpha[0]);
        assert!((alpha2.values()[0] - 0.5).abs() < 1e-12);
        assert!((alpha2.values()[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn attention_rows_sum_to_one_where_nonempty() {
        for seed in 0..20 {
            let mut rng = seeded(seed);
            let (n, m, steps, d) = (5, 4, 3, 6);
            let params = HgatLayerParams::init(d, 2, &mut rng);
            let x = random_tensor(&[n, steps, d], &mut rng);
            let incidence = soft_incidence(n, m, &mut rng);

            let mut tape = Tape::new();
            let xid = tape.place(&x);
            let inc = tape.place(&incidence.weights);
            let ids = params.place(&mut tape);
            let intra = intra_edge_aggregate_on(&mut tape, xid, inc, &ids).unwrap();
            let inter =
                inter_edge_aggregate_on(&mut tape, xid, intra.edges, inc, &ids).unwrap();
            for att in intra.alpha.iter().chain(inter.beta.iter()) {
                let t = tape.to_tensor(*att);
                let cols = *t.shape().last().unwrap();
                for row in t.values().chunks(cols) {
                    let sum: f64 = row.iter().sum();
                    assert!((sum - 1.0).abs() < 1e-9, "row sum {sum}");
                }
            }
        }
    }

    #[test]
    fn inter_isolated_node_keeps_self_term() {
        let mut rng = seeded(17);
        let (n, m, steps, d) = (3, 2, 2, 4);
        let params = HgatLayerParams::init(d, 1, &mut rng);
        let x = random_tensor(&[n, steps, d], &mut rng);
        let edges = random_tensor(&[m, steps, d], &mut rng);
        // Node 1 belongs to nothing.
        let incidence = incidence_from(n, m, vec![0.9, 0.4, 0.0, 0.0, 0.2, 0.8]);
        let out = inter_edge_aggregate(&x, &edges, &incidence, &params).unwrap();

        let mut check = Tape::new();
        let xid = check.place(&x);
        let w0 = check.place(&params.heads[0].w0);
        let proj = check.matmul(xid, w0).unwrap();
        let iso = check.index_axis(proj, 0, 1).unwrap();
        let expect = check.relu(iso).unwrap();
        let expect = check.to_tensor(expect);
        for (s, row) in expect.values().chunks(d).enumerate() {
            for (f, want) in row.iter().enumerate() {
                let got = out.values()[(1 * steps + s) * d + f];
                assert!(
                    (got - want).abs() < 1e-12,
                    "isolated node must equal relu(W0 h): {got} vs {want}"
                );
            }
        }
    }

    #[test]
    fn gated_fuse_matches_hand_formula() {
        let mut rng = seeded(19);
        let d = 3;
        let mut params = HgatLayerParams::init(d, 1, &mut rng);
        let updated = random_tensor(&[2, 2, d], &mut rng);
        let original = random_tensor(&[2, 2, d], &mut rng);

        // Zero gate weights, zero biases: g = 0.5 everywhere, output
        // sigmoid(0.5 * (updated + original)).
        params.fuse_s_w = Tensor::zeros(&[d, d]);
        params.fuse_g_w = Tensor::zeros(&[d, d]);
        let out = gated_fuse(&updated, &original, &params).unwrap();
        for ((o, u), x) in out
            .values()
            .iter()
            .zip(updated.values())
            .zip(original.values())
        {
            let blend = 0.5 * u + 0.5 * x;
            let want = 1.0 / (1.0 + (-blend).exp());
            assert!((o - want).abs() < 1e-12);
        }

        // Saturated positive bias: g -> 1, output -> sigmoid(updated).
        params.fuse_s_b = Tensor::full(&[d], 60.0).unwrap();
        let out = gated_fuse(&updated, &original, &params).unwrap();
        for (o, u) in out.values().iter().zip(updated.values()) {
            let want = 1.0 / (1.0 + (-u).exp());
            assert!((o - want).abs() < 1e-9);
        }

        // Saturated negative bias: g -> 0, output -> sigmoid(original).
        params.fuse_s_b = Tensor::full(&[d], -60.0).unwrap();
        let out = gated_fuse(&updated, &original, &params).unwrap();
        for (o, x) in out.values().iter().zip(original.values()) {
            let want = 1.0 / (1.0 + (-x).exp());
            assert!((o - want).abs() < 1e-9);
        }
    }

    #[test]
    fn gated_fuse_all_zero_inputs_give_half() {
        let mut rng = seeded(23);
        let d = 4;
        let mut params = HgatLayerParams::init(d, 1, &mut rng);
        params.fuse_s_b = Tensor::zeros(&[d]);
        params.fuse_g_b = Tensor::zeros(&[d]);
        let zeros = Tensor::zeros(&[2, 3, d]);
        let out = gated_fuse(&zeros, &zeros, &params).unwrap();
        for v in out.values() {
            assert!((v - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn forward_shape_and_sigmoid_range() {
        let mut rng = seeded(29);
        let (n, m, steps, d) = (4, 3, 5, 6);
        let params = HgatLayerParams::init(d, 2, &mut rng);
        let x = random_tensor(&[n, steps, d], &mut rng);
        let incidence = soft_incidence(n, m, &mut rng);
        let out = hgat_forward(&x, &incidence, &params).unwrap();
        assert_eq!(out.shape(), &[n, steps, d]);
        for v in out.values() {
            assert!(*v > 0.0 && *v < 1.0, "sigmoid fusion must stay in (0, 1)");
        }
    }

    #[test]
    fn forward_is_permutation_equivariant_over_nodes() {
        let mut rng = seeded(31);
        let (n, m, steps, d) = (5, 3, 2, 4);
        let params = HgatLayerParams::init(d, 2, &mut rng);
        let x = random_tensor(&[n, steps, d], &mut rng);
        let incidence = soft_incidence(n, m, &mut rng);
        let base = hgat_forward(&x, &incidence, &params).unwrap();

        // Reverse node order in both the features and the incidence rows.
        let perm: Vec<usize> = (0..n).rev().collect();
        let mut xp = vec![0.0; x.values().len()];
        let mut ip = vec![0.0; incidence.weights.values().len()];
        for (new, &old) in perm.iter().enumerate() {
            let stride = steps * d;
            xp[new * stride..(new + 1) * stride]
                .copy_from_slice(&x.values()[old * stride..(old + 1) * stride]);
            ip[new * m..(new + 1) * m]
                .copy_from_slice(&incidence.weights.values()[old * m..(old + 1) * m]);
        }
        let xp = Tensor::new(&[n, steps, d], xp).unwrap();
        let inc_p = incidence_from(n, m, ip);
        let permuted = hgat_forward(&xp, &inc_p, &params).unwrap();

        for (new, &old) in perm.iter().enumerate() {
            let stride = steps * d;
            let got = &permuted.values()[new * stride..(new + 1) * stride];
            let want = &base.values()[old * stride..(old + 1) * stride];
            for (g, w) in got.iter().zip(want) {
                assert!((g - w).abs() < 1e-9, "permutation equivariance violated");
            }
        }
    }

    #[test]
    fn zeroed_column_equals_deleted_column() {
        let mut rng = seeded(37);
        let (n, m, steps, d) = (4, 3, 2, 4);
        let params = HgatLayerParams::init(d, 2, &mut rng);
        let x = random_tensor(&[n, steps, d], &mut rng);
        let full = soft_incidence(n, m, &mut rng);

        // Zero out column 1.
        let mut zeroed = full.weights.values().to_vec();
        for i in 0..n {
            zeroed[i * m + 1] = 0.0;
        }
        let with_zero = incidence_from(n, m, zeroed.clone());

        // Delete column 1 entirely.
        let mut reduced = Vec::with_capacity(n * (m - 1));
        for i in 0..n {
            reduced.push(zeroed[i * m]);
            reduced.push(zeroed[i * m + 2]);
        }
        let without = incidence_from(n, m - 1, reduced);

        let a = hgat_forward(&x, &with_zero, &params).unwrap();
        let b = hgat_forward(&x, &without, &params).unwrap();
        for (x1, x2) in a.values().iter().zip(b.values()) {
            assert!((x1 - x2).abs() < 1e-9);
        }
    }

    #[test]
    fn forward_without_dropout_is_bitwise_deterministic() {
        let mut rng = seeded(41);
        let (n, m, steps, d) = (4, 3, 3, 4);
        let params = HgatLayerParams::init(d, 2, &mut rng);
        let x = random_tensor(&[n, steps, d], &mut rng);
        let incidence = soft_incidence(n, m, &mut rng);
        let a = hgat_forward(&x, &incidence, &params).unwrap();
        let b = hgat_forward(&x, &incidence, &params).unwrap();
        assert_eq!(a.values(), b.values(), "eval forward must be bitwise stable");
    }

    #[test]
    fn train_mode_dropout_draws_from_rng() {
        let mut rng = seeded(43);
        let (n, m, steps, d) = (3, 2, 2, 4);
        let params = HgatLayerParams::init(d, 2, &mut rng);
        let x = random_tensor(&[n, steps, d], &mut rng);
        let incidence = soft_incidence(n, m, &mut rng);
        let opts = HgatOptions {
            dropout: 0.5,
            train: true,
            fuse_sigmoid: true,
        };

        let run = |seed: u64| {
            let mut tape = Tape::new();
            let xid = tape.place(&x);
            let inc = tape.place(&incidence.weights);
            let ids = params.place(&mut tape);
            let mut r = seeded(seed);
            let out = hgat_forward_on(&mut tape, xid, inc, &ids, opts, &mut r).unwrap();
            tape.to_tensor(out)
        };
        let a = run(1);
        let b = run(1);
        let c = run(2);
        assert_eq!(a.values(), b.values(), "same seed must reproduce dropout");
        assert_ne!(a.values(), c.values(), "different seed must change dropout");
    }

    #[test]
    fn full_layer_grad_check_on_toy_problem() {
        let mut rng = seeded(47);
        let (n, m, steps, d) = (3, 2, 2, 4);
        let params = HgatLayerParams::init(d, 1, &mut rng);
        let x = random_tensor(&[n, steps, d], &mut rng);
        let incidence = soft_incidence(n, m, &mut rng);

        let inputs = vec![
            x,
            incidence.weights.clone(),
            params.heads[0].w0.clone(),
            params.heads[0].w1.clone(),
            params.heads[0].w2.clone(),
            params.heads[0].w3.clone(),
            params.fuse_s_w.clone(),
            params.fuse_s_b.clone(),
            params.fuse_g_w.clone(),
            params.fuse_g_b.clone(),
            params.norm_scale.clone(),
            params.norm_shift.clone(),
        ];
        let err = grad_check_many(
            |tape, ids| {
                let layer = HgatLayerIds {
                    heads: vec![HgatHeadIds {
                        w0: ids[2],
                        w1: ids[3],
                        w2: ids[4],
                        w3: ids[5],
                    }],
                    fuse_s_w: ids[6],
                    fuse_s_b: ids[7],
                    fuse_g_w: ids[8],
                    fuse_g_b: ids[9],
                    norm_scale: ids[10],
                    norm_shift: ids[11],
                };
                let opts = HgatOptions {
                    dropout: 0.0,
                    train: false,
                    fuse_sigmoid: true,
                };
                let mut r = seeded(0);
                let out = hgat_forward_on(tape, ids[0], ids[1], &layer, opts, &mut r)?;
                // Weighted sum makes incoming gradients non-uniform.
                let w: Vec<f64> = (0..n * steps * d).map(|i| 0.3 + 0.1 * i as f64).collect();
                let wid = tape.leaf(&[n, steps, d], w)?;
                let prod = tape.mul(out, wid)?;
                tape.sum_all(prod)
            },
            &inputs,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "relative gradient error {err} too large");
    }

    #[test]
    fn named_params_cover_every_tensor_once() {
        let mut rng = seeded(53);
        let mut params = HgatLayerParams::init(4, 2, &mut rng);
        let mut out = Vec::new();
        params.named_params_mut("hgat", &mut out);
        let names: Vec<&str> = out.iter().map(|(n, _)| n.as_str()).collect();
        assert_eq!(out.len(), 2 * 4 + 6);
        let mut unique = names.clone();
        unique.sort_unstable();
        unique.dedup();
        assert_eq!(unique.len(), names.len(), "parameter names must be unique");
        assert!(names.contains(&"hgat.head0.w0"));
        assert!(names.contains(&"hgat.norm_shift"));
    }
}
