//! Hypergraph-gated recurrence.
//!
//! A GRU unrolled over the window's time axis in which the input transform
//! `f(I, X_t)` is a full hypergraph attention pass over the learned incidence
//! matrix (see [`crate::hgat`]). The hypergraph structure is fixed within a
//! window while node attributes change step to step; the hidden state starts
//! at zero and is carried left to right.

use rand::Rng;

use crate::hgat::{hgat_forward_on, HgatLayerIds, HgatLayerParams, HgatOptions};
use crate::structure::IncidenceMatrix;
use crate::tensor::{Tape, Tensor, TensorError, TensorId};

/// Parameters of the recurrent unit: three gate transforms over the
/// concatenation `[f(I, X) || H]` (`[2d, d]` weights, `[d]` biases) plus the
/// inner hypergraph attention layer used as the input transform.
#[derive(Debug, Clone)]
pub struct HgrlParams {
    pub w_u: Tensor,
    pub w_r: Tensor,
    pub w_c: Tensor,
    pub b_u: Tensor,
    pub b_r: Tensor,
    pub b_c: Tensor,
    pub inner: HgatLayerParams,
}

/// Tape handles for a placed [`HgrlParams`].
#[derive(Debug, Clone)]
pub struct HgrlIds {
    pub w_u: TensorId,
    pub w_r: TensorId,
    pub w_c: TensorId,
    pub b_u: TensorId,
    pub b_r: TensorId,
    pub b_c: TensorId,
    pub inner: HgatLayerIds,
}

impl HgrlParams {
    /// Fresh unit of width `d` whose inner attention layer has `z` heads.
    pub fn init<R: Rng>(d: usize, z: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (2.0 * d as f64).sqrt();
        Self {
            w_u: Tensor::uniform(&[2 * d, d], bound, rng),
            w_r: Tensor::uniform(&[2 * d, d], bound, rng),
            w_c: Tensor::uniform(&[2 * d, d], bound, rng),
            b_u: Tensor::zeros(&[d]),
            b_r: Tensor::zeros(&[d]),
            b_c: Tensor::zeros(&[d]),
            inner: HgatLayerParams::init(d, z, rng),
        }
    }

    /// Feature width `d`.
    pub fn dim(&self) -> usize {
        self.b_u.shape()[0]
    }

    /// Place all parameters on `tape` as untracked leaves.
    pub fn place(&self, tape: &mut Tape) -> HgrlIds {
        HgrlIds {
            w_u: tape.place(&self.w_u),
            w_r: tape.place(&self.w_r),
            w_c: tape.place(&self.w_c),
            b_u: tape.place(&self.b_u),
            b_r: tape.place(&self.b_r),
            b_c: tape.place(&self.b_c),
            inner: self.inner.place(tape),
        }
    }

    /// Place all parameters and record their tape ids for gradient readback.
    pub fn place_tracked(&mut self, tape: &mut Tape) -> HgrlIds {
        HgrlIds {
            w_u: tape.place_tracked(&mut self.w_u),
            w_r: tape.place_tracked(&mut self.w_r),
            w_c: tape.place_tracked(&mut self.w_c),
            b_u: tape.place_tracked(&mut self.b_u),
            b_r: tape.place_tracked(&mut self.b_r),
            b_c: tape.place_tracked(&mut self.b_c),
            inner: self.inner.place_tracked(tape),
        }
    }

    /// Rebuild the id structure from leaves supplied in the same order as
    /// [`HgrlParams::place`] / [`HgrlParams::named_params_mut`].
    pub fn ids_from_iter(&self, it: &mut impl Iterator<Item = TensorId>) -> HgrlIds {
        let mut next = || it.next().expect("enough ids for the recurrent unit");
        let (w_u, w_r, w_c) = (next(), next(), next());
        let (b_u, b_r, b_c) = (next(), next(), next());
        HgrlIds {
            w_u,
            w_r,
            w_c,
            b_u,
            b_r,
            b_c,
            inner: self.inner.ids_from_iter(it),
        }
    }

    /// Collect `(name, tensor)` pairs for every parameter.
    pub fn named_params_mut<'a>(
        &'a mut self,
        prefix: &str,
        out: &mut Vec<(String, &'a mut Tensor)>,
    ) {
        out.push((format!("{prefix}.w_u"), &mut self.w_u));
        out.push((format!("{prefix}.w_r"), &mut self.w_r));
        out.push((format!("{prefix}.w_c"), &mut self.w_c));
        out.push((format!("{prefix}.b_u"), &mut self.b_u));
        out.push((format!("{prefix}.b_r"), &mut self.b_r));
        out.push((format!("{prefix}.b_c"), &mut self.b_c));
        self.inner.named_params_mut(&format!("{prefix}.inner"), out);
    }
}

fn expect_state(tape: &Tape, x: TensorId, what: &str) -> Result<[usize; 2], TensorError> {
    let shape = tape.shape(x);
    if shape.len() != 2 {
        return Err(TensorError::ShapeMismatch(format!(
            "{what} must have shape [nodes, features], got {shape:?}"
        )));
    }
    Ok([shape[0], shape[1]])
}

/// One recurrence step.
///
/// `U = sigmoid(W_u [f || H] + B_u)`, `R = sigmoid(W_r [f || H] + B_r)`,
/// `C = tanh(W_c [f || R * H] + B_c)`, `H' = U * H + (1 - U) * C`, where
/// `f = f(I, X_t)` is one hypergraph attention pass over this step's node
/// features (computed once and shared by all three gates).
pub fn gru_step_on<R: Rng>(
    tape: &mut Tape,
    x_t: TensorId,
    h_prev: TensorId,
    incidence: TensorId,
    params: &HgrlIds,
    opts: HgatOptions,
    rng: &mut R,
) -> Result<TensorId, TensorError> {
    let [n, d] = expect_state(tape, x_t, "x_t")?;
    let [hn, hd] = expect_state(tape, h_prev, "h_prev")?;
    if hn != n || hd != d {
        return Err(TensorError::ShapeMismatch(format!(
            "h_prev shape [{hn}, {hd}] does not match x_t [{n}, {d}]"
        )));
    }
    let wu_shape = tape.shape(params.w_u).to_vec();
    if wu_shape != [2 * d, d] {
        return Err(TensorError::ShapeMismatch(format!(
            "gate weights expect width {} but features have width {d}",
            wu_shape[0] / 2
        )));
    }

    let x3 = tape.reshape(x_t, &[n, 1, d])?;
    let f3 = hgat_forward_on(tape, x3, incidence, &params.inner, opts, rng)?;
    let f = tape.reshape(f3, &[n, d])?;

    let fh = tape.concat_lastdim(f, h_prev)?; // [n, 2d]
    let u_lin = tape.matmul(fh, params.w_u)?;
    let u_aff = tape.add(u_lin, params.b_u)?;
    let u = tape.sigmoid(u_aff)?;
    let r_lin = tape.matmul(fh, params.w_r)?;
    let r_aff = tape.add(r_lin, params.b_r)?;
    let r = tape.sigmoid(r_aff)?;

    let gated_h = tape.mul(r, h_prev)?;
    let fc = tape.concat_lastdim(f, gated_h)?;
    let c_lin = tape.matmul(fc, params.w_c)?;
    let c_aff = tape.add(c_lin, params.b_c)?;
    let c = tape.tanh(c_aff)?;

    let kept = tape.mul(u, h_prev)?;
    let neg_u = tape.scale(u, -1.0)?;
    let inv_u = tape.add_scalar(neg_u, 1.0)?;
    let fresh = tape.mul(inv_u, c)?;
    tape.add(kept, fresh)
}

/// Unroll [`gru_step_on`] left-to-right over the window's time axis starting
/// from a zero hidden state, returning the stacked hidden states
/// (`[n, steps, d]` for a `[n, steps, d]` window).
pub fn hgrl_unroll_on<R: Rng>(
    tape: &mut Tape,
    window: TensorId,
    incidence: TensorId,
    params: &HgrlIds,
    opts: HgatOptions,
    rng: &mut R,
) -> Result<TensorId, TensorError> {
    let shape = tape.shape(window).to_vec();
    if shape.len() != 3 {
        return Err(TensorError::ShapeMismatch(format!(
            "window must have shape [nodes, steps, features], got {shape:?}"
        )));
    }
    let (n, steps, d) = (shape[0], shape[1], shape[2]);
    if steps == 0 {
        return Err(TensorError::ShapeMismatch(
            "window must contain at least one step".to_string(),
        ));
    }
    let mut h = tape.leaf(&[n, d], vec![0.0; n * d])?;
    let mut states = Vec::with_capacity(steps);
    for t in 0..steps {
        let x_t = tape.index_axis(window, 1, t)?;
        h = gru_step_on(tape, x_t, h, incidence, params, opts, rng)?;
        states.push(h);
    }
    tape.stack_axis(&states, 1)
}

/// Plain-tensor wrapper over [`gru_step_on`] in evaluation mode.
pub fn gru_step(
    x_t: &Tensor,
    h_prev: &Tensor,
    incidence: &IncidenceMatrix,
    params: &HgrlParams,
) -> Result<Tensor, TensorError> {
    let mut tape = Tape::new();
    let x = tape.place(x_t);
    let h = tape.place(h_prev);
    let inc = tape.place(&incidence.weights);
    let ids = params.place(&mut tape);
    let mut rng = crate::hgat::eval_rng();
    let out = gru_step_on(&mut tape, x, h, inc, &ids, HgatOptions::default(), &mut rng)?;
    Ok(tape.to_tensor(out))
}

/// Plain-tensor wrapper over [`hgrl_unroll_on`] in evaluation mode.
pub fn hgrl_unroll(
    window: &Tensor,
    incidence: &IncidenceMatrix,
    params: &HgrlParams,
) -> Result<Tensor, TensorError> {
    let mut tape = Tape::new();
    let w = tape.place(window);
    let inc = tape.place(&incidence.weights);
    let ids = params.place(&mut tape);
    let mut rng = crate::hgat::eval_rng();
    let out = hgrl_unroll_on(&mut tape, w, inc, &ids, HgatOptions::default(), &mut rng)?;
    Ok(tape.to_tensor(out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::structure::IncidenceMode;
    use crate::tensor::grad_check_many;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn seeded(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn soft_incidence(n: usize, m: usize, rng: &mut ChaCha8Rng) -> IncidenceMatrix {
        let values = (0..n * m).map(|_| rng.gen_range(0.05..1.0)).collect();
        IncidenceMatrix {
            weights: Tensor::new(&[n, m], values).unwrap(),
            mode: IncidenceMode::Soft,
        }
    }

    fn sigmoid(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    #[test]
    fn saturated_update_gate_returns_previous_state_exactly() {
        let mut rng = seeded(3);
        let (n, m, d) = (3, 2, 4);
        let mut params = HgrlParams::init(d, 1, &mut rng);
        params.b_u = Tensor::full(&[d], 60.0).unwrap();
        let x = Tensor::uniform(&[n, d], 1.0, &mut rng);
        let h = Tensor::uniform(&[n, d], 1.0, &mut rng);
        let incidence = soft_incidence(n, m, &mut rng);
        let out = gru_step(&x, &h, &incidence, &params).unwrap();
        assert_eq!(out.values(), h.values(), "U = 1 must return H_prev bitwise");
    }

    #[test]
    fn collapsed_update_gate_returns_candidate() {
        let mut rng = seeded(5);
        let (n, m, d) = (3, 2, 4);
        let mut params = HgrlParams::init(d, 1, &mut rng);
        params.b_u = Tensor::full(&[d], -60.0).unwrap();
        let x = Tensor::uniform(&[n, d], 1.0, &mut rng);
        let h = Tensor::uniform(&[n, d], 1.0, &mut rng);
        let incidence = soft_incidence(n, m, &mut rng);
        let out = gru_step(&x, &h, &incidence, &params).unwrap();

        // Independent candidate computation: C = tanh(W_c [f || R*H] + B_c).
        let mut tape = Tape::new();
        let xid = tape.place(&x);
        let hid = tape.place(&h);
        let inc = tape.place(&incidence.weights);
        let ids = params.place(&mut tape);
        let x3 = tape.reshape(xid, &[n, 1, d]).unwrap();
        let mut r0 = seeded(0);
        let f3 =
            hgat_forward_on(&mut tape, x3, inc, &ids.inner, HgatOptions::default(), &mut r0)
                .unwrap();
        let f = tape.reshape(f3, &[n, d]).unwrap();
        let fh = tape.concat_lastdim(f, hid).unwrap();
        let r_lin = tape.matmul(fh, ids.w_r).unwrap();
        let r_aff = tape.add(r_lin, ids.b_r).unwrap();
        let r = tape.sigmoid(r_aff).unwrap();
        let rh = tape.mul(r, hid).unwrap();
        let fc = tape.concat_lastdim(f, rh).unwrap();
        let c_lin = tape.matmul(fc, ids.w_c).unwrap();
        let c_aff = tape.add(c_lin, ids.b_c).unwrap();
        let c = tape.tanh(c_aff).unwrap();
        let c = tape.to_tensor(c);

        for (got, want) in out.values().iter().zip(c.values()) {
            assert!((got - want).abs() < 1e-12, "U = 0 must return C: {got} vs {want}");
        }
    }

    #[test]
    fn zero_input_zero_state_halves_candidate() {
        let mut rng = seeded(7);
        let (n, m, d) = (3, 2, 4);
        let mut params = HgrlParams::init(d, 1, &mut rng); // biases are zero by init
        // Zero gate transforms so U = R = sigmoid(0) = 0.5 while the
        // candidate path keeps its weights.
        params.w_u = Tensor::zeros(&[2 * d, d]);
        params.w_r = Tensor::zeros(&[2 * d, d]);
        let x = Tensor::zeros(&[n, d]);
        let h = Tensor::zeros(&[n, d]);
        let incidence = soft_incidence(n, m, &mut rng);
        let out = gru_step(&x, &h, &incidence, &params).unwrap();

        // With H = 0 the candidate is C = tanh(W_c_top^T f) where f = f(I, 0),
        // and the output is 0.5 * C because U = sigmoid(0) = 0.5.
        let mut tape = Tape::new();
        let xid = tape.place(&x);
        let inc = tape.place(&incidence.weights);
        let ids = params.place(&mut tape);
        let x3 = tape.reshape(xid, &[n, 1, d]).unwrap();
        let mut r0 = seeded(0);
        let f3 =
            hgat_forward_on(&mut tape, x3, inc, &ids.inner, HgatOptions::default(), &mut r0)
                .unwrap();
        let f = tape.reshape(f3, &[n, d]).unwrap();
        let w_pair = tape.reshape(ids.w_c, &[2, d, d]).unwrap();
        let w_top = tape.index_axis(w_pair, 0, 0).unwrap();
        let c_lin = tape.matmul(f, w_top).unwrap();
        let c = tape.tanh(c_lin).unwrap();
        let half_c = tape.scale(c, 0.5).unwrap();
        let want = tape.to_tensor(half_c);

        for (got, want) in out.values().iter().zip(want.values()) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn unroll_single_step_equals_gru_step() {
        let mut rng = seeded(11);
        let (n, m, d) = (4, 3, 5);
        let params = HgrlParams::init(d, 2, &mut rng);
        let window = Tensor::uniform(&[n, 1, d], 1.0, &mut rng);
        let incidence = soft_incidence(n, m, &mut rng);

        let unrolled = hgrl_unroll(&window, &incidence, &params).unwrap();
        let x0 = Tensor::new(&[n, d], window.values().to_vec()).unwrap();
        let h0 = Tensor::zeros(&[n, d]);
        let step = gru_step(&x0, &h0, &incidence, &params).unwrap();

        assert_eq!(unrolled.shape(), &[n, 1, d]);
        assert_eq!(unrolled.values(), step.values());
    }

    #[test]
    fn zero_window_with_saturated_update_gate_stays_zero() {
        let mut rng = seeded(13);
        let (n, m, d, steps) = (3, 2, 4, 4);
        let mut params = HgrlParams::init(d, 1, &mut rng);
        params.b_u = Tensor::full(&[d], 60.0).unwrap();
        let window = Tensor::zeros(&[n, steps, d]);
        let incidence = soft_incidence(n, m, &mut rng);
        let out = hgrl_unroll(&window, &incidence, &params).unwrap();
        assert!(out.values().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn hidden_states_stay_inside_unit_interval() {
        for seed in 0..10 {
            let mut rng = seeded(seed);
            let (n, m, d, steps) = (4, 3, 6, 5);
            let params = HgrlParams::init(d, 2, &mut rng);
            let window = Tensor::uniform(&[n, steps, d], 3.0, &mut rng);
            let incidence = soft_incidence(n, m, &mut rng);
            let out = hgrl_unroll(&window, &incidence, &params).unwrap();
            for v in out.values() {
                assert!(
                    v.abs() <= 1.0,
                    "hidden state {v} exceeds the convex-combination bound"
                );
            }
        }
    }

    #[test]
    fn unroll_is_permutation_equivariant() {
        let mut rng = seeded(17);
        let (n, m, d, steps) = (5, 3, 4, 3);
        let params = HgrlParams::init(d, 1, &mut rng);
        let window = Tensor::uniform(&[n, steps, d], 1.0, &mut rng);
        let incidence = soft_incidence(n, m, &mut rng);
        let base = hgrl_unroll(&window, &incidence, &params).unwrap();

        let perm: Vec<usize> = (0..n).rev().collect();
        let stride = steps * d;
        let mut wp = vec![0.0; window.values().len()];
        let mut ip = vec![0.0; incidence.weights.values().len()];
        for (new, &old) in perm.iter().enumerate() {
            wp[new * stride..(new + 1) * stride]
                .copy_from_slice(&window.values()[old * stride..(old + 1) * stride]);
            ip[new * m..(new + 1) * m]
                .copy_from_slice(&incidence.weights.values()[old * m..(old + 1) * m]);
        }
        let wp = Tensor::new(&[n, steps, d], wp).unwrap();
        let inc_p = IncidenceMatrix {
            weights: Tensor::new(&[n, m], ip).unwrap(),
            mode: IncidenceMode::Soft,
        };
        let permuted = hgrl_unroll(&wp, &inc_p, &params).unwrap();

        for (new, &old) in perm.iter().enumerate() {
            let got = &permuted.values()[new * stride..(new + 1) * stride];
            let want = &base.values()[old * stride..(old + 1) * stride];
            for (g, w) in got.iter().zip(want) {
                assert!((g - w).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn matches_independent_scalar_gru_oracle() {
        // One node, one feature, zero incidence: the attention layer reduces
        // to a closed-form scalar map, so the whole unroll must match a
        // scalar GRU implemented independently in plain arithmetic.
        let mut rng = seeded(19);
        let (n, d, steps) = (1, 1, 5);
        let params = HgrlParams::init(d, 1, &mut rng);
        let window = Tensor::uniform(&[n, steps, d], 1.5, &mut rng);
        let incidence = IncidenceMatrix {
            weights: Tensor::zeros(&[1, 1]),
            mode: IncidenceMode::Soft,
        };
        let out = hgrl_unroll(&window, &incidence, &params).unwrap();

        // Scalar attention map for n = 1 and an empty hypergraph: the
        // normalization over a single node zeroes the aggregate, leaving the
        // learned shift; the fusion gate then blends it with the raw input.
        let inner = &params.inner;
        let shift = inner.norm_shift.values()[0];
        let ws = inner.fuse_s_w.values()[0];
        let bs = inner.fuse_s_b.values()[0];
        let wg = inner.fuse_g_w.values()[0];
        let bg = inner.fuse_g_b.values()[0];
        let f_map = |x: f64| {
            let g = sigmoid(ws * shift + bs + wg * x + bg);
            sigmoid(g * shift + (1.0 - g) * x)
        };

        let wu = params.w_u.values();
        let wr = params.w_r.values();
        let wc = params.w_c.values();
        let (bu, br, bc) = (
            params.b_u.values()[0],
            params.b_r.values()[0],
            params.b_c.values()[0],
        );
        let mut h = 0.0;
        let mut expected = Vec::new();
        for &x in window.values() {
            let f = f_map(x);
            let u = sigmoid(f * wu[0] + h * wu[1] + bu);
            let r = sigmoid(f * wr[0] + h * wr[1] + br);
            let c = (f * wc[0] + r * h * wc[1] + bc).tanh();
            h = u * h + (1.0 - u) * c;
            expected.push(h);
        }

        for (got, want) in out.values().iter().zip(&expected) {
            assert!(
                (got - want).abs() < 1e-9,
                "scalar GRU oracle mismatch: {got} vs {want}"
            );
        }
    }

    #[test]
    fn three_step_unroll_grad_check() {
        let mut rng = seeded(23);
        let (n, m, d, steps) = (3, 2, 4, 3);
        let params = HgrlParams::init(d, 1, &mut rng);
        let window = Tensor::uniform(&[n, steps, d], 1.0, &mut rng);
        let incidence = soft_incidence(n, m, &mut rng);
        let inner = &params.inner;

        let inputs = vec![
            window,
            incidence.weights.clone(),
            params.w_u.clone(),
            params.w_r.clone(),
            params.w_c.clone(),
            params.b_u.clone(),
            params.b_r.clone(),
            params.b_c.clone(),
            inner.heads[0].w0.clone(),
            inner.heads[0].w1.clone(),
            inner.heads[0].w2.clone(),
            inner.heads[0].w3.clone(),
            inner.fuse_s_w.clone(),
            inner.fuse_s_b.clone(),
            inner.fuse_g_w.clone(),
            inner.fuse_g_b.clone(),
            inner.norm_scale.clone(),
            inner.norm_shift.clone(),
        ];
        let err = grad_check_many(
            |tape, ids| {
                let layer = crate::hgat::HgatLayerIds {
                    heads: vec![crate::hgat::HgatHeadIds {
                        w0: ids[8],
                        w1: ids[9],
                        w2: ids[10],
                        w3: ids[11],
                    }],
                    fuse_s_w: ids[12],
                    fuse_s_b: ids[13],
                    fuse_g_w: ids[14],
                    fuse_g_b: ids[15],
                    norm_scale: ids[16],
                    norm_shift: ids[17],
                };
                let hgrl = HgrlIds {
                    w_u: ids[2],
                    w_r: ids[3],
                    w_c: ids[4],
                    b_u: ids[5],
                    b_r: ids[6],
                    b_c: ids[7],
                    inner: layer,
                };
                let mut r = seeded(0);
                let out = hgrl_unroll_on(
                    tape,
                    ids[0],
                    ids[1],
                    &hgrl,
                    HgatOptions::default(),
                    &mut r,
                )?;
                let w: Vec<f64> = (0..n * steps * d).map(|i| 0.2 + 0.05 * i as f64).collect();
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
    fn shape_mismatches_are_rejected() {
        let mut rng = seeded(29);
        let d = 3;
        let params = HgrlParams::init(d, 1, &mut rng);
        let incidence = soft_incidence(2, 2, &mut rng);
        let x = Tensor::uniform(&[2, d], 1.0, &mut rng);
        let bad_h = Tensor::uniform(&[2, d + 1], 1.0, &mut rng);
        assert!(matches!(
            gru_step(&x, &bad_h, &incidence, &params),
            Err(TensorError::ShapeMismatch(_))
        ));
        let bad_x = Tensor::uniform(&[2, d, 1], 1.0, &mut rng);
        let h = Tensor::uniform(&[2, d], 1.0, &mut rng);
        assert!(matches!(
            gru_step(&bad_x, &h, &incidence, &params),
            Err(TensorError::ShapeMismatch(_))
        ));
        let flat = Tensor::uniform(&[2, d], 1.0, &mut rng);
        assert!(matches!(
            hgrl_unroll(&flat, &incidence, &params),
            Err(TensorError::ShapeMismatch(_))
        ));
    }
}
