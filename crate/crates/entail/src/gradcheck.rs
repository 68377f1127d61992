//! Finite-difference gradient checking.
//!
//! Compares the tape's analytic gradients against central differences with
//! step 1e-5 and reports the worst relative error over all coordinates of
//! the checked parameters. Functions handed in must be deterministic; the
//! checker evaluates twice and rejects anything whose forward value moves
//! between identical calls (e.g. a layer consuming RNG).

use crate::error::{Error, Result};
use crate::tape::{NodeId, ParamId, ParamSet, Tape};
use crate::tensor::Tensor;

pub const CENTRAL_DIFF_STEP: f64 = 1e-5;

/// Max over coordinates of |analytic - numeric| / max(|analytic|, |numeric|, 1e-8)
/// for the parameters in `check_ids`. `f` rebuilds the forward graph from
/// scratch on every call and returns the scalar loss node.
pub fn gradcheck_params<F>(params: &ParamSet, check_ids: &[ParamId], f: F) -> Result<f64>
where
    F: Fn(&mut Tape) -> Result<NodeId>,
{
    let eval = |ps: &ParamSet| -> Result<f64> {
        let mut tape = Tape::new(ps);
        let loss = f(&mut tape)?;
        let v = tape.value(loss);
        if v.len() != 1 {
            return Err(Error::Argument(format!(
                "gradcheck requires a scalar loss, got shape {:?}",
                tape.shape(loss)
            )));
        }
        Ok(v[0])
    };

    // Determinism contract: two evaluations must agree bit for bit.
    let first = eval(params)?;
    let second = eval(params)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic(format!(
            "loss changed between identical evaluations: {first:?} vs {second:?}"
        )));
    }

    // Analytic pass.
    let mut tape = Tape::new(params);
    let loss = f(&mut tape)?;
    tape.backward(loss)?;
    let analytic: Vec<Tensor> = check_ids.iter().map(|&id| tape.param_grad(id)).collect();
    drop(tape);

    // Numeric pass: central differences, one coordinate at a time.
    let mut max_rel = 0.0f64;
    let mut scratch = params.clone();
    for (slot, &pid) in check_ids.iter().enumerate() {
        let n = params.get(pid).numel();
        for coord in 0..n {
            let original = params.get(pid).data()[coord];
            scratch.get_mut(pid).data_mut()[coord] = original + CENTRAL_DIFF_STEP;
            let plus = eval(&scratch)?;
            scratch.get_mut(pid).data_mut()[coord] = original - CENTRAL_DIFF_STEP;
            let minus = eval(&scratch)?;
            scratch.get_mut(pid).data_mut()[coord] = original;

            let numeric = (plus - minus) / (2.0 * CENTRAL_DIFF_STEP);
            let a = analytic[slot].data()[coord];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}

/// Convenience front end taking plain input tensors: registers them as
/// differentiable leaves, hands their node ids to `f`, and checks the
/// gradients with respect to every input.
pub fn gradcheck<F>(inputs: &[Tensor], f: F) -> Result<f64>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    let mut params = ParamSet::new();
    let ids: Vec<ParamId> = inputs
        .iter()
        .enumerate()
        .map(|(i, t)| params.register(format!("input{i}"), t.clone()))
        .collect();
    gradcheck_params(&params, &ids, |tape| {
        let nodes: Vec<NodeId> = ids.iter().map(|&id| tape.param(id)).collect();
        f(tape, &nodes)
    })
}
