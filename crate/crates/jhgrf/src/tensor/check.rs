//! Central-difference verification of tape gradients.

use super::{Tape, Tensor, TensorError, TensorId};

fn eval_scalar<F>(f: &F, params: &[Tensor]) -> Result<f64, TensorError>
where
    F: Fn(&mut Tape, &[TensorId]) -> Result<TensorId, TensorError>,
{
    let mut tape = Tape::new();
    let ids: Vec<TensorId> = params.iter().map(|p| tape.place(p)).collect();
    let loss = f(&mut tape, &ids)?;
    let v = tape.values(loss);
    if v.len() != 1 {
        return Err(TensorError::NotScalar(v.len()));
    }
    Ok(v[0])
}

/// Compares the tape gradient of `f` against central differences, jointly
/// over several input tensors.
///
/// Returns the worst relative error
/// `|analytic - cd| / max(1, |cd|)` over all entries of all inputs. `f` must
/// be deterministic; `eps` must lie in `[1e-7, 1e-3]`.
pub fn grad_check_many<F>(f: F, params: &[Tensor], eps: f64) -> Result<f64, TensorError>
where
    F: Fn(&mut Tape, &[TensorId]) -> Result<TensorId, TensorError>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(TensorError::DomainError(format!(
            "grad_check eps {} outside [1e-7, 1e-3]",
            eps
        )));
    }
    let mut tape = Tape::new();
    let ids: Vec<TensorId> = params.iter().map(|p| tape.place(p)).collect();
    let loss = f(&mut tape, &ids)?;
    if tape.values(loss).len() != 1 {
        return Err(TensorError::NotScalar(tape.values(loss).len()));
    }
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| tape.grad(id).map(<[f64]>::to_vec))
        .collect::<Result<_, _>>()?;

    let mut work = params.to_vec();
    let mut worst = 0.0f64;
    for pi in 0..params.len() {
        for j in 0..params[pi].numel() {
            let orig = params[pi].values()[j];
            work[pi].values_mut()[j] = orig + eps;
            let fp = eval_scalar(&f, &work)?;
            work[pi].values_mut()[j] = orig - eps;
            let fm = eval_scalar(&f, &work)?;
            work[pi].values_mut()[j] = orig;
            let cd = (fp - fm) / (2.0 * eps);
            let err = (analytic[pi][j] - cd).abs() / cd.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

/// Single-input form of [`grad_check_many`].
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64, TensorError>
where
    F: Fn(&mut Tape, TensorId) -> Result<TensorId, TensorError>,
{
    grad_check_many(|tape, ids| f(tape, ids[0]), std::slice::from_ref(x), eps)
}
