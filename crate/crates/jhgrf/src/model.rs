//! End-to-end forecaster assembly.
//!
//! The pipeline: a gated-linear projection lifts the `[series, lookback,
//! channels(+mask)]` window to `[series, horizon, d]`; two experts transform
//! it — a hypergraph expert (incidence sampling + hypergraph-gated
//! recurrence) and a dual-axis transformer — a learned gate blends them, and
//! a linear readout maps back to channels, optionally alongside a
//! log-variance head for heteroscedastic uncertainty. Ablation switches
//! select sub-paths. Losses (masked MAE and Gaussian negative log
//! likelihood) live here too.

use rand::Rng;
use thiserror::Error;

use crate::hgat::{hgat_forward_on, HgatOptions};
use crate::hgrl::{hgrl_unroll_on, HgrlIds, HgrlParams};
use crate::structure::{
    gumbel_noise, pairwise_probabilities_on, sample_incidence_on, EmbeddingBank, StructureError,
};
use crate::sttn::{encoder_block_on, sttn_forward_on, AttendAxis, SttnError, SttnIds, SttnOptions,
    SttnParams};
use crate::tensor::{Tape, Tensor, TensorError, TensorId};

/// Additive offset applied inside the incidence softmax logits.
const GUMBEL_EPSILON: f64 = 1e-8;
/// Variance floor under the uncertainty head.
const SIGMA_FLOOR: f64 = 1e-6;

/// Errors from model configuration, assembly, or loss evaluation.
#[derive(Debug, Error)]
pub enum ModelError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("empty mask: no observed entries to average over")]
    EmptyMask,
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Structure(#[from] StructureError),
    #[error(transparent)]
    Sttn(#[from] SttnError),
}

/// Which sub-path of the model runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ablation {
    /// Both experts plus gated fusion.
    Full,
    /// Projection straight to readout: no structure, recurrence, or
    /// attention of any kind (strictly per-series).
    NoSpatial,
    /// Drops the recurrence (single hypergraph attention pass instead of the
    /// unroll) and the temporal transformer blocks.
    NoTemporal,
    /// Transformer expert only.
    NoSthgcn,
    /// Hypergraph expert only.
    NoSttn,
}

impl Ablation {
    pub fn as_str(&self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoSpatial => "no_spatial",
            Ablation::NoTemporal => "no_temporal",
            Ablation::NoSthgcn => "no_sthgcn",
            Ablation::NoSttn => "no_sttn",
        }
    }

    pub fn all() -> [Ablation; 5] {
        [
            Ablation::Full,
            Ablation::NoSpatial,
            Ablation::NoTemporal,
            Ablation::NoSthgcn,
            Ablation::NoSttn,
        ]
    }
}

impl std::str::FromStr for Ablation {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, ModelError> {
        match s {
            "full" => Ok(Ablation::Full),
            "no_spatial" => Ok(Ablation::NoSpatial),
            "no_temporal" => Ok(Ablation::NoTemporal),
            "no_sthgcn" => Ok(Ablation::NoSthgcn),
            "no_sttn" => Ok(Ablation::NoSttn),
            other => Err(ModelError::Config(format!(
                "unknown ablation `{other}` (expected full, no_spatial, no_temporal, no_sthgcn, no_sttn)"
            ))),
        }
    }
}

impl std::fmt::Display for Ablation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Activation applied to the fused expert blend.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputActivation {
    /// No activation (appropriate for z-scored targets; default).
    Identity,
    /// Sigmoid blend (appropriate for min-max scaled targets).
    Sigmoid,
}

impl OutputActivation {
    pub fn as_str(&self) -> &'static str {
        match self {
            OutputActivation::Identity => "identity",
            OutputActivation::Sigmoid => "sigmoid",
        }
    }
}

impl std::str::FromStr for OutputActivation {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, ModelError> {
        match s {
            "identity" => Ok(OutputActivation::Identity),
            "sigmoid" => Ok(OutputActivation::Sigmoid),
            other => Err(ModelError::Config(format!(
                "unknown output activation `{other}` (expected identity or sigmoid)"
            ))),
        }
    }
}

impl std::fmt::Display for OutputActivation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Hyperparameters of the forecaster.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Series count.
    pub n: usize,
    /// Channels per series.
    pub c: usize,
    /// Look-back window length.
    pub tau: usize,
    /// Forecast horizon length.
    pub upsilon: usize,
    /// Embedding width.
    pub d: usize,
    /// Hyperedge count.
    pub m: usize,
    /// Hypergraph attention heads.
    pub z: usize,
    /// Transformer heads (must divide `d`).
    pub h: usize,
    /// Gumbel-softmax temperature.
    pub gamma: f64,
    /// Dropout rate (train mode).
    pub dropout: f64,
    /// Active sub-path.
    pub ablation: Ablation,
    /// Emit a log-variance head alongside the point forecast.
    pub uncertainty: bool,
    /// Activation on the fused expert blend.
    pub output_activation: OutputActivation,
    /// Add each encoder block's input to its output once more.
    pub initial_connection: bool,
    /// Post-norm instead of pre-norm encoder blocks.
    pub post_norm: bool,
}

impl ModelConfig {
    /// Configuration with the documented defaults (`d = 18`, `m = 5`,
    /// `gamma = 0.05`, two heads on both attention mechanisms, dropout 0.1,
    /// full path, uncertainty head on, identity output).
    pub fn new(n: usize, c: usize, tau: usize, upsilon: usize) -> Self {
        Self {
            n,
            c,
            tau,
            upsilon,
            d: 18,
            m: 5,
            z: 2,
            h: 2,
            gamma: 0.05,
            dropout: 0.1,
            ablation: Ablation::Full,
            uncertainty: true,
            output_activation: OutputActivation::Identity,
            initial_connection: true,
            post_norm: false,
        }
    }

    /// Check every invariant; returns the first violation.
    pub fn validate(&self) -> Result<(), ModelError> {
        let positive = [
            ("n", self.n),
            ("c", self.c),
            ("tau", self.tau),
            ("upsilon", self.upsilon),
            ("d", self.d),
            ("m", self.m),
            ("z", self.z),
            ("h", self.h),
        ];
        for (name, value) in positive {
            if value < 1 {
                return Err(ModelError::Config(format!("{name} must be >= 1, got {value}")));
            }
        }
        if self.d % self.h != 0 {
            return Err(ModelError::Config(format!(
                "d = {} must be divisible by h = {}",
                self.d, self.h
            )));
        }
        if !(self.gamma > 0.0) || !self.gamma.is_finite() {
            return Err(ModelError::Config(format!(
                "gamma must be a positive finite number, got {}",
                self.gamma
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::Config(format!(
                "dropout must lie in [0, 1), got {}",
                self.dropout
            )));
        }
        Ok(())
    }

    /// Every field as a `(key, value)` pair in a fixed order, suitable for
    /// flat text serialization. [`ModelConfig::set_key`] inverts it.
    pub fn to_key_values(&self) -> Vec<(String, String)> {
        vec![
            ("n".into(), self.n.to_string()),
            ("c".into(), self.c.to_string()),
            ("tau".into(), self.tau.to_string()),
            ("upsilon".into(), self.upsilon.to_string()),
            ("d".into(), self.d.to_string()),
            ("m".into(), self.m.to_string()),
            ("z".into(), self.z.to_string()),
            ("h".into(), self.h.to_string()),
            ("gamma".into(), self.gamma.to_string()),
            ("dropout".into(), self.dropout.to_string()),
            ("ablation".into(), self.ablation.to_string()),
            ("uncertainty".into(), self.uncertainty.to_string()),
            (
                "output_activation".into(),
                self.output_activation.to_string(),
            ),
            (
                "initial_connection".into(),
                self.initial_connection.to_string(),
            ),
            ("post_norm".into(), self.post_norm.to_string()),
        ]
    }

    /// Assign one field by key name (as produced by
    /// [`ModelConfig::to_key_values`]).
    pub fn set_key(&mut self, key: &str, value: &str) -> Result<(), ModelError> {
        fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ModelError>
        where
            T::Err: std::fmt::Display,
        {
            value.parse().map_err(|e| {
                ModelError::Config(format!("invalid value `{value}` for `{key}`: {e}"))
            })
        }
        match key {
            "n" => self.n = parse(key, value)?,
            "c" => self.c = parse(key, value)?,
            "tau" => self.tau = parse(key, value)?,
            "upsilon" => self.upsilon = parse(key, value)?,
            "d" => self.d = parse(key, value)?,
            "m" => self.m = parse(key, value)?,
            "z" => self.z = parse(key, value)?,
            "h" => self.h = parse(key, value)?,
            "gamma" => self.gamma = parse(key, value)?,
            "dropout" => self.dropout = parse(key, value)?,
            "ablation" => self.ablation = value.parse()?,
            "uncertainty" => self.uncertainty = parse(key, value)?,
            "output_activation" => self.output_activation = value.parse()?,
            "initial_connection" => self.initial_connection = parse(key, value)?,
            "post_norm" => self.post_norm = parse(key, value)?,
            other => {
                return Err(ModelError::Config(format!(
                    "unknown model configuration key `{other}`"
                )))
            }
        }
        Ok(())
    }

    fn hgat_options(&self, train: bool) -> HgatOptions {
        HgatOptions {
            dropout: self.dropout,
            train,
            fuse_sigmoid: true,
        }
    }

    fn sttn_options(&self) -> SttnOptions {
        SttnOptions {
            initial_connection: self.initial_connection,
            post_norm: self.post_norm,
        }
    }
}

/// All learnable tensors of the forecaster.
#[derive(Debug, Clone)]
pub struct ModelParams {
    /// Node/hyperedge embeddings driving structure learning.
    pub embeddings: EmbeddingBank,
    /// Gated-linear projection: channel maps (`[c+1, d]`) and time map
    /// (`[tau, upsilon]`).
    pub proj_w0: Tensor,
    pub proj_w1: Tensor,
    pub proj_w2: Tensor,
    /// Hypergraph expert (recurrence + inner attention layer).
    pub hgrl: HgrlParams,
    /// Transformer expert.
    pub sttn: SttnParams,
    /// Expert fusion gate (`[d, d]` weights, `[d]` biases).
    pub fuse_s_w: Tensor,
    pub fuse_s_b: Tensor,
    pub fuse_g_w: Tensor,
    pub fuse_g_b: Tensor,
    /// Point readout (`[d, c]`, `[c]`).
    pub read_w: Tensor,
    pub read_b: Tensor,
    /// Log-variance readout (`[d, c]`, `[c]`), zero-initialized so the
    /// initial predictive variance is 1.
    pub logvar_w: Tensor,
    pub logvar_b: Tensor,
}

/// Tape handles for a placed [`ModelParams`].
#[derive(Debug, Clone)]
pub struct ModelIds {
    pub node_emb: TensorId,
    pub edge_emb: TensorId,
    pub proj_w0: TensorId,
    pub proj_w1: TensorId,
    pub proj_w2: TensorId,
    pub hgrl: HgrlIds,
    pub sttn: SttnIds,
    pub fuse_s_w: TensorId,
    pub fuse_s_b: TensorId,
    pub fuse_g_w: TensorId,
    pub fuse_g_b: TensorId,
    pub read_w: TensorId,
    pub read_b: TensorId,
    pub logvar_w: TensorId,
    pub logvar_b: TensorId,
}

impl ModelParams {
    /// Fresh parameters for `config`, drawn from `rng`.
    pub fn init<R: Rng>(config: &ModelConfig, rng: &mut R) -> Result<Self, ModelError> {
        config.validate()?;
        let (c, d) = (config.c, config.d);
        let cb = 1.0 / ((c + 1) as f64).sqrt();
        let tb = 1.0 / (config.tau as f64).sqrt();
        let db = 1.0 / (d as f64).sqrt();
        Ok(Self {
            embeddings: EmbeddingBank::init(config.n, config.m, d, rng),
            proj_w0: Tensor::uniform(&[c + 1, d], cb, rng),
            proj_w1: Tensor::uniform(&[c + 1, d], cb, rng),
            proj_w2: Tensor::uniform(&[config.tau, config.upsilon], tb, rng),
            hgrl: HgrlParams::init(d, config.z, rng),
            sttn: SttnParams::init(d, config.h, 1, 1, rng)
                .map_err(|e| ModelError::Config(e.to_string()))?,
            fuse_s_w: Tensor::uniform(&[d, d], db, rng),
            fuse_s_b: Tensor::zeros(&[d]),
            fuse_g_w: Tensor::uniform(&[d, d], db, rng),
            fuse_g_b: Tensor::zeros(&[d]),
            read_w: Tensor::uniform(&[d, c], db, rng),
            read_b: Tensor::zeros(&[c]),
            logvar_w: Tensor::zeros(&[d, c]),
            logvar_b: Tensor::zeros(&[c]),
        })
    }

    /// `(name, tensor)` pairs for every parameter in a fixed order shared
    /// with [`ModelParams::place`] and [`ModelParams::ids_from_iter`].
    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = vec![
            ("embeddings.node".to_string(), &mut self.embeddings.node_embeddings),
            ("embeddings.edge".to_string(), &mut self.embeddings.edge_embeddings),
            ("proj.w0".to_string(), &mut self.proj_w0),
            ("proj.w1".to_string(), &mut self.proj_w1),
            ("proj.w2".to_string(), &mut self.proj_w2),
        ];
        self.hgrl.named_params_mut("hgrl", &mut out);
        self.sttn.named_params_mut("sttn", &mut out);
        out.push(("fuse.s_w".to_string(), &mut self.fuse_s_w));
        out.push(("fuse.s_b".to_string(), &mut self.fuse_s_b));
        out.push(("fuse.g_w".to_string(), &mut self.fuse_g_w));
        out.push(("fuse.g_b".to_string(), &mut self.fuse_g_b));
        out.push(("readout.w".to_string(), &mut self.read_w));
        out.push(("readout.b".to_string(), &mut self.read_b));
        out.push(("readout.logvar_w".to_string(), &mut self.logvar_w));
        out.push(("readout.logvar_b".to_string(), &mut self.logvar_b));
        out
    }

    /// Clones of every parameter tensor in the canonical order.
    pub fn tensors_in_order(&self) -> Vec<Tensor> {
        let mut clone = self.clone();
        clone
            .named_params_mut()
            .into_iter()
            .map(|(_, t)| t.clone())
            .collect()
    }

    /// Rebuild the id structure from leaves placed in canonical order.
    pub fn ids_from_iter(&self, it: &mut impl Iterator<Item = TensorId>) -> ModelIds {
        let mut next = || it.next().expect("enough ids for the model");
        let node_emb = next();
        let edge_emb = next();
        let proj_w0 = next();
        let proj_w1 = next();
        let proj_w2 = next();
        drop(next);
        let hgrl = self.hgrl.ids_from_iter(&mut *it);
        let sttn = self.sttn.ids_from_iter(&mut *it);
        let mut next = || it.next().expect("enough ids for the model");
        ModelIds {
            node_emb,
            edge_emb,
            proj_w0,
            proj_w1,
            proj_w2,
            hgrl,
            sttn,
            fuse_s_w: next(),
            fuse_s_b: next(),
            fuse_g_w: next(),
            fuse_g_b: next(),
            read_w: next(),
            read_b: next(),
            logvar_w: next(),
            logvar_b: next(),
        }
    }

    /// Place all parameters on `tape` as untracked leaves.
    pub fn place(&self, tape: &mut Tape) -> ModelIds {
        let mut clone = self.clone();
        let ids: Vec<TensorId> = clone
            .named_params_mut()
            .into_iter()
            .map(|(_, t)| tape.place(t))
            .collect();
        self.ids_from_iter(&mut ids.into_iter())
    }

    /// Place all parameters and record their tape ids for gradient readback.
    pub fn place_tracked(&mut self, tape: &mut Tape) -> ModelIds {
        let ids: Vec<TensorId> = self
            .named_params_mut()
            .into_iter()
            .map(|(_, t)| tape.place_tracked(t))
            .collect();
        self.ids_from_iter(&mut ids.into_iter())
    }
}

/// A multi-horizon forecast: point values and, when the uncertainty head is
/// on, strictly positive standard deviations; both `[series, horizon,
/// channels]` and on whatever scale the inputs were given in.
#[derive(Debug, Clone)]
pub struct Forecast {
    pub point: Tensor,
    pub sigma: Option<Tensor>,
}

fn expect_shape(
    tape: &Tape,
    id: TensorId,
    want: &[usize],
    what: &str,
) -> Result<(), ModelError> {
    let got = tape.shape(id);
    if got != want {
        return Err(ModelError::Tensor(TensorError::ShapeMismatch(format!(
            "{what} must have shape {want:?}, got {got:?}"
        ))));
    }
    Ok(())
}

/// Gated-linear input projection.
///
/// Appends the observation-mask channel (all-ones when `mask` is `None`, the
/// per-step mean observed fraction otherwise), zero-fills masked entries,
/// then computes `((sigmoid(X W0) * (X W1))^T W2)^T`: `W0`/`W1` act on the
/// channel axis, `W2` maps the lookback axis to the horizon axis.
pub fn project_input_on(
    tape: &mut Tape,
    x: TensorId,
    mask: Option<TensorId>,
    w0: TensorId,
    w1: TensorId,
    w2: TensorId,
) -> Result<TensorId, ModelError> {
    let shape = tape.shape(x).to_vec();
    if shape.len() != 3 {
        return Err(ModelError::Tensor(TensorError::ShapeMismatch(format!(
            "input window must have shape [series, lookback, channels], got {shape:?}"
        ))));
    }
    let (n, tau, c) = (shape[0], shape[1], shape[2]);
    let w0_shape = tape.shape(w0).to_vec();
    if w0_shape.len() != 2 || w0_shape[0] != c + 1 {
        return Err(ModelError::Tensor(TensorError::ShapeMismatch(format!(
            "projection weights expect {} input channels (data plus mask), got {w0_shape:?}",
            c + 1
        ))));
    }
    let d = w0_shape[1];
    let w2_shape = tape.shape(w2).to_vec();
    if w2_shape.len() != 2 || w2_shape[0] != tau {
        return Err(ModelError::Tensor(TensorError::ShapeMismatch(format!(
            "time projection expects [{tau}, horizon], got {w2_shape:?}"
        ))));
    }
    let upsilon = w2_shape[1];

    let (filled, mask_channel) = match mask {
        Some(mid) => {
            expect_shape(tape, mid, &[n, tau, c], "observation mask")?;
            let filled = tape.mul(x, mid)?;
            let channel = tape.mean_lastdim(mid)?; // [n, tau, 1]
            (filled, channel)
        }
        None => {
            let ones = tape.leaf(&[n, tau, 1], vec![1.0; n * tau])?;
            (x, ones)
        }
    };
    let augmented = tape.concat_lastdim(filled, mask_channel)?; // [n, tau, c+1]

    let gate_lin = tape.matmul(augmented, w0)?;
    let gate = tape.sigmoid(gate_lin)?;
    let value = tape.matmul(augmented, w1)?;
    let gated = tape.mul(gate, value)?; // [n, tau, d]

    let time_major = tape.permute(gated, &[0, 2, 1])?; // [n, d, tau]
    let horizon = tape.matmul(time_major, w2)?; // [n, d, upsilon]
    let out = tape.permute(horizon, &[0, 2, 1])?; // [n, upsilon, d]
    debug_assert_eq!(tape.shape(out), &[n, upsilon, d][..]);
    Ok(out)
}

/// Plain-tensor wrapper over [`project_input_on`].
pub fn project_input(
    x: &Tensor,
    mask: Option<&Tensor>,
    params: &ModelParams,
) -> Result<Tensor, ModelError> {
    let mut tape = Tape::new();
    let xid = tape.place(x);
    let mid = mask.map(|m| tape.place(m));
    let w0 = tape.place(&params.proj_w0);
    let w1 = tape.place(&params.proj_w1);
    let w2 = tape.place(&params.proj_w2);
    let out = project_input_on(&mut tape, xid, mid, w0, w1, w2)?;
    Ok(tape.to_tensor(out))
}

/// Mixture-of-experts fusion: `g = sigmoid(f_s(H) + f_g(out))`, blend
/// `g * H + (1 - g) * out`, then the configured output activation.
pub fn fuse_experts_on(
    tape: &mut Tape,
    h: TensorId,
    out: TensorId,
    ids: &ModelIds,
    activation: OutputActivation,
) -> Result<TensorId, ModelError> {
    if tape.shape(h) != tape.shape(out) {
        return Err(ModelError::Tensor(TensorError::ShapeMismatch(format!(
            "expert outputs must match, got {:?} vs {:?}",
            tape.shape(h),
            tape.shape(out)
        ))));
    }
    let s_lin = tape.matmul(h, ids.fuse_s_w)?;
    let s_aff = tape.add(s_lin, ids.fuse_s_b)?;
    let g_lin = tape.matmul(out, ids.fuse_g_w)?;
    let g_aff = tape.add(g_lin, ids.fuse_g_b)?;
    let logit = tape.add(s_aff, g_aff)?;
    let gate = tape.sigmoid(logit)?;
    let kept = tape.mul(gate, h)?;
    let neg = tape.scale(gate, -1.0)?;
    let inv = tape.add_scalar(neg, 1.0)?;
    let passed = tape.mul(inv, out)?;
    let blend = tape.add(kept, passed)?;
    match activation {
        OutputActivation::Identity => Ok(blend),
        OutputActivation::Sigmoid => Ok(tape.sigmoid(blend)?),
    }
}

/// Plain-tensor wrapper over [`fuse_experts_on`].
pub fn fuse_experts(
    h: &Tensor,
    out: &Tensor,
    params: &ModelParams,
    activation: OutputActivation,
) -> Result<Tensor, ModelError> {
    let mut tape = Tape::new();
    let hid = tape.place(h);
    let oid = tape.place(out);
    let ids = params.place(&mut tape);
    let fused = fuse_experts_on(&mut tape, hid, oid, &ids, activation)?;
    Ok(tape.to_tensor(fused))
}

/// Linear readout `d -> c` plus, when `uncertainty` is on, a parallel
/// log-variance head.
fn readout_on(
    tape: &mut Tape,
    fused: TensorId,
    ids: &ModelIds,
    uncertainty: bool,
) -> Result<(TensorId, Option<TensorId>), ModelError> {
    let mu_lin = tape.matmul(fused, ids.read_w)?;
    let mu = tape.add(mu_lin, ids.read_b)?;
    let logvar = if uncertainty {
        let lv_lin = tape.matmul(fused, ids.logvar_w)?;
        Some(tape.add(lv_lin, ids.logvar_b)?)
    } else {
        None
    };
    Ok((mu, logvar))
}

/// Standard deviation from a log-variance tensor:
/// `sqrt(exp(logvar) + 1e-6)`.
fn sigma_on(tape: &mut Tape, logvar: TensorId) -> Result<TensorId, TensorError> {
    let var = tape.exp(logvar)?;
    let floored = tape.add_scalar(var, SIGMA_FLOOR)?;
    tape.sqrt(floored)
}

/// Full forward pass on an existing tape.
///
/// `x` is `[n, tau, c]` (masked entries may hold any finite values; they are
/// zero-filled internally when `mask` is given), `mask` is an optional binary
/// `[n, tau, c]` observation indicator. Returns the point-forecast id and,
/// when the uncertainty head is on, the log-variance id (both
/// `[n, upsilon, c]`, normalized scale).
pub fn forward_on<R: Rng>(
    tape: &mut Tape,
    config: &ModelConfig,
    ids: &ModelIds,
    x: TensorId,
    mask: Option<TensorId>,
    train: bool,
    rng: &mut R,
) -> Result<(TensorId, Option<TensorId>), ModelError> {
    config.validate()?;
    expect_shape(tape, x, &[config.n, config.tau, config.c], "input window")?;

    let xbar = project_input_on(tape, x, mask, ids.proj_w0, ids.proj_w1, ids.proj_w2)?;

    let incidence = |tape: &mut Tape, rng: &mut R| -> Result<TensorId, ModelError> {
        let probs = pairwise_probabilities_on(tape, ids.node_emb, ids.edge_emb)?;
        let noise = if train {
            Some(gumbel_noise(config.n * config.m * 2, rng))
        } else {
            None
        };
        Ok(sample_incidence_on(
            tape,
            probs,
            config.gamma,
            GUMBEL_EPSILON,
            noise.as_deref(),
        )?)
    };

    let fused = match config.ablation {
        Ablation::NoSpatial => xbar,
        Ablation::NoSthgcn => sttn_forward_on(tape, xbar, &ids.sttn, config.sttn_options())?,
        Ablation::NoSttn => {
            let inc = incidence(tape, rng)?;
            hgrl_unroll_on(tape, xbar, inc, &ids.hgrl, config.hgat_options(train), rng)?
        }
        Ablation::NoTemporal => {
            let inc = incidence(tape, rng)?;
            let h = hgat_forward_on(
                tape,
                xbar,
                inc,
                &ids.hgrl.inner,
                config.hgat_options(train),
                rng,
            )?;
            let mut out = xbar;
            for block in &ids.sttn.spatial {
                out = encoder_block_on(tape, out, AttendAxis::Nodes, block, config.sttn_options())?;
            }
            fuse_experts_on(tape, h, out, ids, config.output_activation)?
        }
        Ablation::Full => {
            let inc = incidence(tape, rng)?;
            let h = hgrl_unroll_on(tape, xbar, inc, &ids.hgrl, config.hgat_options(train), rng)?;
            let out = sttn_forward_on(tape, xbar, &ids.sttn, config.sttn_options())?;
            fuse_experts_on(tape, h, out, ids, config.output_activation)?
        }
    };
    readout_on(tape, fused, ids, config.uncertainty)
}

/// A forecaster: configuration plus parameters.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams,
}

impl Model {
    /// Validate `config` and draw fresh parameters.
    pub fn init<R: Rng>(config: ModelConfig, rng: &mut R) -> Result<Self, ModelError> {
        let params = ModelParams::init(&config, rng)?;
        Ok(Self { config, params })
    }

    /// Evaluation-mode forward pass: deterministic incidence, no dropout.
    /// Two calls with the same inputs agree bitwise.
    pub fn forward(&self, x: &Tensor, mask: Option<&Tensor>) -> Result<Forecast, ModelError> {
        let mut tape = Tape::new();
        let xid = tape.place(x);
        let mid = mask.map(|m| tape.place(m));
        let ids = self.params.place(&mut tape);
        let mut rng = crate::hgat::eval_rng();
        let (mu, logvar) = forward_on(&mut tape, &self.config, &ids, xid, mid, false, &mut rng)?;
        let sigma = match logvar {
            Some(lv) => {
                let sid = sigma_on(&mut tape, lv)?;
                Some(tape.to_tensor(sid))
            }
            None => None,
        };
        Ok(Forecast {
            point: tape.to_tensor(mu),
            sigma,
        })
    }

    /// Training-mode forward pass on a caller-owned tape: places parameters
    /// tracked (for gradient readback), samples incidence noise and dropout
    /// from `rng`. Returns `(point id, log-variance id)`.
    pub fn forward_training<R: Rng>(
        &mut self,
        tape: &mut Tape,
        x: &Tensor,
        mask: Option<&Tensor>,
        rng: &mut R,
    ) -> Result<(TensorId, Option<TensorId>), ModelError> {
        let xid = tape.place(x);
        let mid = mask.map(|m| tape.place(m));
        let ids = self.params.place_tracked(tape);
        forward_on(tape, &self.config, &ids, xid, mid, true, rng)
    }
}

fn validate_mask(mask: &Tensor, shape: &[usize]) -> Result<(), ModelError> {
    if mask.shape() != shape {
        return Err(ModelError::Tensor(TensorError::ShapeMismatch(format!(
            "mask shape {:?} does not match values {shape:?}",
            mask.shape()
        ))));
    }
    if let Some(bad) = mask.values().iter().find(|v| **v != 0.0 && **v != 1.0) {
        return Err(ModelError::Config(format!(
            "mask entries must be 0 or 1, found {bad}"
        )));
    }
    Ok(())
}

/// Elementwise-loss reduction helper: optionally masks `entries`, returns the
/// scalar sum id and the number of entries that survive the mask.
fn masked_sum_on(
    tape: &mut Tape,
    entries: TensorId,
    mask: Option<TensorId>,
) -> Result<(TensorId, usize), ModelError> {
    let (summed, count) = match mask {
        Some(mid) => {
            let masked = tape.mul(entries, mid)?;
            let observed = tape.values(mid).iter().filter(|v| **v != 0.0).count();
            (tape.sum_all(masked)?, observed)
        }
        None => {
            let count = tape.shape(entries).iter().product();
            (tape.sum_all(entries)?, count)
        }
    };
    Ok((summed, count))
}

/// On-tape masked absolute-error sum: returns `(sum id, observed count)` so
/// batch losses can pool sums and counts before dividing.
pub fn mae_terms_on(
    tape: &mut Tape,
    pred: TensorId,
    target: TensorId,
    mask: Option<TensorId>,
) -> Result<(TensorId, usize), ModelError> {
    if tape.shape(pred) != tape.shape(target) {
        return Err(ModelError::Tensor(TensorError::ShapeMismatch(format!(
            "prediction shape {:?} does not match target {:?}",
            tape.shape(pred),
            tape.shape(target)
        ))));
    }
    let diff = tape.sub(pred, target)?;
    let dev = tape.abs(diff)?;
    masked_sum_on(tape, dev, mask)
}

/// On-tape masked Gaussian negative-log-likelihood sum (constant dropped):
/// per entry `logvar / 2 + (target - mu)^2 / (2 exp(logvar))`. Returns
/// `(sum id, observed count)`.
pub fn nll_terms_on(
    tape: &mut Tape,
    mu: TensorId,
    logvar: TensorId,
    target: TensorId,
    mask: Option<TensorId>,
) -> Result<(TensorId, usize), ModelError> {
    if tape.shape(mu) != tape.shape(target) || tape.shape(mu) != tape.shape(logvar) {
        return Err(ModelError::Tensor(TensorError::ShapeMismatch(format!(
            "mu {:?}, logvar {:?} and target {:?} must share a shape",
            tape.shape(mu),
            tape.shape(logvar),
            tape.shape(target)
        ))));
    }
    let diff = tape.sub(target, mu)?;
    let sq = tape.mul(diff, diff)?;
    let neg_lv = tape.scale(logvar, -1.0)?;
    let precision = tape.exp(neg_lv)?;
    let quad = tape.mul(sq, precision)?;
    let half_quad = tape.scale(quad, 0.5)?;
    let half_lv = tape.scale(logvar, 0.5)?;
    let entry = tape.add(half_lv, half_quad)?;
    masked_sum_on(tape, entry, mask)
}

/// Masked mean absolute error. `mask` entries must be 0 or 1; errors with
/// [`ModelError::EmptyMask`] if nothing is observed.
pub fn mae_loss(
    pred: &Tensor,
    target: &Tensor,
    mask: Option<&Tensor>,
) -> Result<f64, ModelError> {
    if let Some(m) = mask {
        validate_mask(m, pred.shape())?;
    }
    let mut tape = Tape::new();
    let p = tape.place(pred);
    let t = tape.place(target);
    let mid = mask.map(|m| tape.place(m));
    let (sum, count) = mae_terms_on(&mut tape, p, t, mid)?;
    if count == 0 {
        return Err(ModelError::EmptyMask);
    }
    Ok(tape.values(sum)[0] / count as f64)
}

/// Masked Gaussian negative log likelihood (mean over observed entries,
/// additive constant dropped). The variance enters as `exp(logvar)`.
pub fn gaussian_nll_loss(
    mu: &Tensor,
    logvar: &Tensor,
    target: &Tensor,
    mask: Option<&Tensor>,
) -> Result<f64, ModelError> {
    if let Some(m) = mask {
        validate_mask(m, mu.shape())?;
    }
    let mut tape = Tape::new();
    let muid = tape.place(mu);
    let lvid = tape.place(logvar);
    let tid = tape.place(target);
    let mid = mask.map(|m| tape.place(m));
    let (sum, count) = nll_terms_on(&mut tape, muid, lvid, tid, mid)?;
    if count == 0 {
        return Err(ModelError::EmptyMask);
    }
    Ok(tape.values(sum)[0] / count as f64)
}
