//! Implicit hypergraph structure learning.
//!
//! Each series (hypernode) and each hyperedge owns a trainable embedding.
//! Pairwise similarities between node and edge embeddings become two-channel
//! connection probabilities, and a Gumbel-softmax draw over the two
//! categories (connect / don't connect) yields a soft incidence matrix that
//! stays differentiable with respect to the embeddings. "Rewiring" is
//! resampling: every forward pass draws a fresh incidence from the current
//! embeddings.

use rand::Rng;
use thiserror::Error;

use crate::tensor::{Tape, Tensor, TensorError, TensorId};

/// Smallest admissible embedding row norm.
pub const MIN_EMBED_NORM: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum StructureError {
    #[error("Gumbel-softmax temperature {0} must be > 0")]
    InvalidTemperature(f64),
    #[error("{side} embedding row {row} has norm {norm:.3e}, below {MIN_EMBED_NORM:.0e}")]
    ZeroNormEmbedding {
        side: &'static str,
        row: usize,
        norm: f64,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Trainable hypernode and hyperedge embeddings.
#[derive(Debug, Clone)]
pub struct EmbeddingBank {
    /// One row per series, shape `[n, d]`.
    pub node_embeddings: Tensor,
    /// One row per hyperedge, shape `[m, d]`.
    pub edge_embeddings: Tensor,
}

fn row_norms(t: &Tensor) -> Vec<f64> {
    let d = t.shape()[1];
    t.values()
        .chunks(d)
        .map(|row| row.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect()
}

fn check_norms(t: &Tensor, side: &'static str) -> Result<(), StructureError> {
    for (row, norm) in row_norms(t).into_iter().enumerate() {
        if norm < MIN_EMBED_NORM {
            return Err(StructureError::ZeroNormEmbedding { side, row, norm });
        }
    }
    Ok(())
}

impl EmbeddingBank {
    /// Wraps existing embedding matrices, validating shapes and row norms.
    pub fn new(node_embeddings: Tensor, edge_embeddings: Tensor) -> Result<Self, StructureError> {
        if node_embeddings.shape().len() != 2
            || edge_embeddings.shape().len() != 2
            || node_embeddings.shape()[1] != edge_embeddings.shape()[1]
        {
            return Err(StructureError::Tensor(TensorError::ShapeMismatch(format!(
                "embedding banks need [n, d] and [m, d], got {:?} and {:?}",
                node_embeddings.shape(),
                edge_embeddings.shape()
            ))));
        }
        check_norms(&node_embeddings, "node")?;
        check_norms(&edge_embeddings, "edge")?;
        Ok(Self {
            node_embeddings,
            edge_embeddings,
        })
    }

    /// Fresh bank with entries drawn i.i.d. from `U(-1/sqrt(d), 1/sqrt(d))`.
    /// Rows that land below the norm floor are re-drawn.
    pub fn init<R: Rng>(n: usize, m: usize, d: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (d as f64).sqrt();
        let mut draw = |rows: usize| -> Tensor {
            let mut values = vec![0.0; rows * d];
            for row in 0..rows {
                loop {
                    for v in &mut values[row * d..(row + 1) * d] {
                        *v = rng.gen_range(-bound..bound);
                    }
                    let norm: f64 = values[row * d..(row + 1) * d]
                        .iter()
                        .map(|v| v * v)
                        .sum::<f64>()
                        .sqrt();
                    if norm >= MIN_EMBED_NORM {
                        break;
                    }
                }
            }
            Tensor::new(&[rows, d], values).expect("finite uniform draws")
        };
        Self {
            node_embeddings: draw(n),
            edge_embeddings: draw(m),
        }
    }

    pub fn n(&self) -> usize {
        self.node_embeddings.shape()[0]
    }

    pub fn m(&self) -> usize {
        self.edge_embeddings.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.node_embeddings.shape()[1]
    }
}

/// Whether incidence weights are a soft relaxation or thresholded 0/1.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IncidenceMode {
    Soft,
    Hard,
}

/// An `[n, m]` node-by-hyperedge incidence matrix with entries in `[0, 1]`.
#[derive(Debug, Clone)]
pub struct IncidenceMatrix {
    pub weights: Tensor,
    pub mode: IncidenceMode,
}

impl IncidenceMatrix {
    pub fn n(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn m(&self) -> usize {
        self.weights.shape()[1]
    }

    /// Fraction of (node, edge) pairs connected at weight >= 0.5; a cheap
    /// sparsity diagnostic for reporting.
    pub fn edge_density(&self) -> f64 {
        let v = self.weights.values();
        v.iter().filter(|&&w| w >= 0.5).count() as f64 / v.len().max(1) as f64
    }
}

fn row_norm_on(tape: &mut Tape, z: TensorId) -> Result<TensorId, TensorError> {
    let sq = tape.mul(z, z)?;
    let sum = tape.sum_lastdim(sq)?;
    tape.sqrt(sum)
}

/// On-tape pairwise connection probabilities from embedding matrices.
///
/// `S = (cos(z_i, z_j) + 1) / 2` for every node/edge pair, then the two
/// channels `sigmoid(S)` and `sigmoid(1 - S)` are stacked along a trailing
/// axis of extent 2. Output shape `[n, m, 2]`.
pub fn pairwise_probabilities_on(
    tape: &mut Tape,
    z_nodes: TensorId,
    z_edges: TensorId,
) -> Result<TensorId, TensorError> {
    let (n, m) = (tape.shape(z_nodes)[0], tape.shape(z_edges)[0]);
    let zet = tape.permute(z_edges, &[1, 0])?;
    let dot = tape.matmul(z_nodes, zet)?;
    let nn = row_norm_on(tape, z_nodes)?;
    let ne = row_norm_on(tape, z_edges)?;
    let net = tape.permute(ne, &[1, 0])?;
    let outer = tape.matmul(nn, net)?;
    let cos = tape.div(dot, outer)?;
    let half = tape.scale(cos, 0.5)?;
    let s = tape.add_scalar(half, 0.5)?;
    let p0 = tape.sigmoid(s)?;
    let neg = tape.scale(s, -1.0)?;
    let complement = tape.add_scalar(neg, 1.0)?;
    let p1 = tape.sigmoid(complement)?;
    let p0c = tape.reshape(p0, &[n, m, 1])?;
    let p1c = tape.reshape(p1, &[n, m, 1])?;
    tape.concat_lastdim(p0c, p1c)
}

/// Connection probabilities for a bank, shape `[n, m, 2]`.
pub fn pairwise_probabilities(bank: &EmbeddingBank) -> Result<Tensor, StructureError> {
    check_norms(&bank.node_embeddings, "node")?;
    check_norms(&bank.edge_embeddings, "edge")?;
    let mut tape = Tape::new();
    let zn = tape.place(&bank.node_embeddings);
    let ze = tape.place(&bank.edge_embeddings);
    let p = pairwise_probabilities_on(&mut tape, zn, ze)?;
    Ok(tape.to_tensor(p))
}

/// Draws standard Gumbel(0,1) noise: `-log(-log U)` with `U ~ U(0,1)`.
pub fn gumbel_noise<R: Rng>(count: usize, rng: &mut R) -> Vec<f64> {
    (0..count)
        .map(|_| {
            let u: f64 = rng.gen::<f64>().max(f64::MIN_POSITIVE);
            -(-u.ln()).ln()
        })
        .collect()
}

/// On-tape Gumbel-softmax relaxation over the two connect categories:
/// `softmax((log(p + epsilon) + g) / gamma)`.
///
/// `noise` holds one Gumbel draw per probability entry (or `None` for
/// deterministic evaluation mode, which skips the noise and softmaxes the
/// log-probability logits at temperature `gamma`). With unit temperature and
/// Gumbel noise this samples each category with probability proportional to
/// `p`. Returns the `[n, m]` connect-channel weights.
pub fn sample_incidence_on(
    tape: &mut Tape,
    probs: TensorId,
    gamma: f64,
    epsilon: f64,
    noise: Option<&[f64]>,
) -> Result<TensorId, StructureError> {
    if gamma <= 0.0 {
        return Err(StructureError::InvalidTemperature(gamma));
    }
    let shape = tape.shape(probs).to_vec();
    if shape.last() != Some(&2) {
        return Err(StructureError::Tensor(TensorError::ShapeMismatch(format!(
            "incidence probabilities need a trailing 2-category axis, got {:?}",
            shape
        ))));
    }
    let shifted = tape.add_scalar(probs, epsilon)?;
    let logp = tape.log(shifted)?;
    let perturbed = match noise {
        Some(g) => {
            let gn = tape.leaf(&shape, g.to_vec())?;
            tape.add(logp, gn)?
        }
        None => logp,
    };
    let logits = tape.scale(perturbed, 1.0 / gamma)?;
    let soft = tape.softmax_lastdim(logits)?;
    Ok(tape.index_axis(soft, shape.len() - 1, 0)?)
}

/// Samples a soft incidence matrix from probabilities.
pub fn sample_incidence<R: Rng>(
    probs: &Tensor,
    gamma: f64,
    epsilon: f64,
    rng: &mut R,
) -> Result<IncidenceMatrix, StructureError> {
    let noise = gumbel_noise(probs.numel(), rng);
    let mut tape = Tape::new();
    let p = tape.place(probs);
    let w = sample_incidence_on(&mut tape, p, gamma, epsilon, Some(&noise))?;
    Ok(IncidenceMatrix {
        weights: tape.to_tensor(w),
        mode: IncidenceMode::Soft,
    })
}

/// Deterministic evaluation-mode incidence: no noise, softmax of the
/// probability logits at temperature `gamma`.
pub fn eval_incidence(
    probs: &Tensor,
    gamma: f64,
    epsilon: f64,
) -> Result<IncidenceMatrix, StructureError> {
    let mut tape = Tape::new();
    let p = tape.place(probs);
    let w = sample_incidence_on(&mut tape, p, gamma, epsilon, None)?;
    Ok(IncidenceMatrix {
        weights: tape.to_tensor(w),
        mode: IncidenceMode::Soft,
    })
}

/// Thresholds a soft incidence into a hard 0/1 matrix. Expects a soft input
/// and a threshold in `(0, 1)`.
pub fn harden_incidence(soft: &IncidenceMatrix, threshold: f64) -> IncidenceMatrix {
    debug_assert!(soft.mode == IncidenceMode::Soft);
    debug_assert!(threshold > 0.0 && threshold < 1.0);
    let values: Vec<f64> = soft
        .weights
        .values()
        .iter()
        .map(|&w| if w >= threshold { 1.0 } else { 0.0 })
        .collect();
    IncidenceMatrix {
        weights: Tensor::new(soft.weights.shape(), values).expect("binary values are finite"),
        mode: IncidenceMode::Hard,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check_many;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn bank_1x1(zi: &[f64], zj: &[f64]) -> EmbeddingBank {
        EmbeddingBank::new(
            Tensor::new(&[1, zi.len()], zi.to_vec()).unwrap(),
            Tensor::new(&[1, zj.len()], zj.to_vec()).unwrap(),
        )
        .unwrap()
    }

    fn similarity(zi: &[f64], zj: &[f64]) -> f64 {
        // Invert sigmoid on channel 0 to recover S for assertions.
        let p = pairwise_probabilities(&bank_1x1(zi, zj)).unwrap();
        let p0 = p.values()[0];
        (p0 / (1.0 - p0)).ln()
    }

    #[test]
    fn parallel_unit_vectors_have_similarity_one() {
        assert!((similarity(&[1.0, 0.0], &[1.0, 0.0]) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn orthogonal_unit_vectors_have_similarity_half() {
        assert!((similarity(&[1.0, 0.0], &[0.0, 1.0]) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn probability_channels_at_s_half_are_sigmoids() {
        let p = pairwise_probabilities(&bank_1x1(&[1.0, 0.0], &[0.0, 1.0])).unwrap();
        assert_eq!(p.shape(), &[1, 1, 2]);
        // S = 0.5, so both channels are sigmoid(0.5).
        let want = 0.622_459_331_201_854_6_f64;
        assert!((p.values()[0] - want).abs() < 1e-9);
        assert!((p.values()[1] - want).abs() < 1e-9);
    }

    #[test]
    fn similarity_is_symmetric_and_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let zi: Vec<f64> = (0..4).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let zj: Vec<f64> = (0..4).map(|_| rng.gen_range(-2.0..2.0)).collect();
            if zi.iter().map(|v| v * v).sum::<f64>().sqrt() < 0.1
                || zj.iter().map(|v| v * v).sum::<f64>().sqrt() < 0.1
            {
                continue;
            }
            let s = similarity(&zi, &zj);
            let swapped = similarity(&zj, &zi);
            assert!((s - swapped).abs() < 1e-12, "symmetry");
            let (a, b) = (rng.gen_range(0.1..10.0), rng.gen_range(0.1..10.0));
            let zi_s: Vec<f64> = zi.iter().map(|v| v * a).collect();
            let zj_s: Vec<f64> = zj.iter().map(|v| v * b).collect();
            assert!(
                (s - similarity(&zi_s, &zj_s)).abs() < 1e-10,
                "scale invariance"
            );
            assert!((0.0..=1.0).contains(&s), "S in unit interval");
        }
    }

    #[test]
    fn zero_norm_embedding_is_rejected() {
        let nodes = Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let edges = Tensor::new(&[1, 2], vec![1.0, 1.0]).unwrap();
        let err = EmbeddingBank::new(nodes, edges).unwrap_err();
        assert!(matches!(
            err,
            StructureError::ZeroNormEmbedding { side: "node", row: 1, .. }
        ));
    }

    #[test]
    fn symmetric_logits_with_zero_noise_give_half() {
        let mut tape = Tape::new();
        let probs = tape.leaf(&[1, 1, 2], vec![0.7, 0.7]).unwrap();
        let w = sample_incidence_on(&mut tape, probs, 0.05, 1e-8, Some(&[0.0, 0.0])).unwrap();
        assert!((tape.values(w)[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn unit_temperature_zero_noise_recovers_normalized_probabilities() {
        let mut tape = Tape::new();
        let probs = tape.leaf(&[1, 1, 2], vec![0.8, 0.2]).unwrap();
        let w = sample_incidence_on(&mut tape, probs, 1.0, 0.0, Some(&[0.0, 0.0])).unwrap();
        // softmax(log p) renormalizes the category weights: 0.8 / (0.8 + 0.2).
        assert!((tape.values(w)[0] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn low_temperature_sharpens_toward_the_larger_category() {
        let mut tape = Tape::new();
        let probs = tape.leaf(&[1, 1, 2], vec![0.8, 0.2]).unwrap();
        let w = sample_incidence_on(&mut tape, probs, 0.05, 0.0, Some(&[0.0, 0.0])).unwrap();
        // softmax(log p / gamma) = p^(1/gamma) normalized; the log-odds gap
        // ln 4 scaled by 20 leaves the losing channel at e^(-20 ln 4).
        let expect = 1.0 / (1.0 + (-20.0 * 4.0_f64.ln()).exp());
        assert!((tape.values(w)[0] - expect).abs() < 1e-14);
    }

    #[test]
    fn non_positive_temperature_is_invalid() {
        let probs = Tensor::new(&[1, 1, 2], vec![0.5, 0.5]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for gamma in [-1.0, 0.0] {
            let err = sample_incidence(&probs, gamma, 1e-8, &mut rng).unwrap_err();
            assert!(matches!(err, StructureError::InvalidTemperature(_)));
        }
    }

    #[test]
    fn low_temperature_saturates_for_any_fixed_distinct_draw() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let probs = Tensor::new(&[2, 3, 2], (0..12).map(|_| rng.gen::<f64>()).collect()).unwrap();
        let noise = gumbel_noise(probs.numel(), &mut rng);
        let mut tape = Tape::new();
        let p = tape.place(&probs);
        let w = sample_incidence_on(&mut tape, p, 1e-3, 1e-8, Some(&noise)).unwrap();
        for &v in tape.values(w) {
            assert!(
                v < 1e-6 || v > 1.0 - 1e-6,
                "temperature 1e-3 should saturate, got {}",
                v
            );
        }
    }

    #[test]
    fn incidence_weights_stay_in_unit_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let bank = EmbeddingBank::init(6, 3, 4, &mut rng);
        let probs = pairwise_probabilities(&bank).unwrap();
        for _ in 0..20 {
            let inc = sample_incidence(&probs, 0.5, 1e-8, &mut rng).unwrap();
            assert_eq!(inc.weights.shape(), &[6, 3]);
            assert!(inc.weights.values().iter().all(|&w| (0.0..=1.0).contains(&w)));
        }
    }

    #[test]
    fn evaluation_mode_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let bank = EmbeddingBank::init(5, 2, 3, &mut rng);
        let probs = pairwise_probabilities(&bank).unwrap();
        let a = eval_incidence(&probs, 0.05, 1e-8).unwrap();
        let b = eval_incidence(&probs, 0.05, 1e-8).unwrap();
        assert_eq!(a.weights.values(), b.weights.values(), "bitwise repeatable");
    }

    #[test]
    fn harden_thresholds_each_entry() {
        let soft = IncidenceMatrix {
            weights: Tensor::new(&[1, 2], vec![0.4, 0.6]).unwrap(),
            mode: IncidenceMode::Soft,
        };
        let hard = harden_incidence(&soft, 0.5);
        assert_eq!(hard.weights.values(), &[0.0, 1.0]);
        assert_eq!(hard.mode, IncidenceMode::Hard);
        let all = harden_incidence(
            &IncidenceMatrix {
                weights: Tensor::new(&[2, 1], vec![0.9, 0.9]).unwrap(),
                mode: IncidenceMode::Soft,
            },
            0.5,
        );
        assert_eq!(all.weights.values(), &[1.0, 1.0]);
        assert!((all.edge_density() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn sampled_weights_differentiate_through_to_embeddings() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let bank = EmbeddingBank::init(3, 2, 4, &mut rng);
        let noise = gumbel_noise(3 * 2 * 2, &mut rng);
        let err = grad_check_many(
            |tape, ids| {
                let probs = pairwise_probabilities_on(tape, ids[0], ids[1])?;
                let w = sample_incidence_on(tape, probs, 0.5, 1e-8, Some(&noise))
                    .map_err(|e| match e {
                        StructureError::Tensor(t) => t,
                        other => TensorError::DomainError(other.to_string()),
                    })?;
                // Non-uniform weighting to exercise every path.
                let coef = tape.leaf(&[3, 2], (1..=6).map(|v| v as f64 / 3.0).collect())?;
                let p = tape.mul(w, coef)?;
                tape.sum_all(p)
            },
            &[bank.node_embeddings.clone(), bank.edge_embeddings.clone()],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "structure sampling grad check: {}", err);
    }
}
