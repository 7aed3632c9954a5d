//! Central finite-difference gradient checking.

use super::{ParamStore, Tape, Var};
use crate::error::Result;

/// Largest relative disagreement between the tape gradient and a central
/// finite difference, over every entry of every trainable parameter.
///
/// `build` records a scalar loss on a fresh tape; it is called twice per
/// parameter entry with perturbed values.
pub fn max_relative_error<F>(params: &mut ParamStore, step: f64, build: F) -> Result<f64>
where
    F: Fn(&mut Tape) -> Result<Var>,
{
    let grads = {
        let mut tape = Tape::new(params);
        let loss = build(&mut tape)?;
        tape.backward(loss)?
    };
    let ids: Vec<_> = params
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(id, _)| id)
        .collect();
    let mut worst: f64 = 0.0;
    for id in ids {
        let analytic = match grads.get(id) {
            Some(g) => g.data().to_vec(),
            None => vec![0.0; params.get(id).value.len()],
        };
        for (i, a) in analytic.iter().enumerate() {
            let original = params.get(id).value.data()[i];
            params.get_mut(id).value.data_mut()[i] = original + step;
            let plus = eval(params, &build)?;
            params.get_mut(id).value.data_mut()[i] = original - step;
            let minus = eval(params, &build)?;
            params.get_mut(id).value.data_mut()[i] = original;
            let numeric = (plus - minus) / (2.0 * step);
            let denom = a.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}

fn eval<F>(params: &ParamStore, build: &F) -> Result<f64>
where
    F: Fn(&mut Tape) -> Result<Var>,
{
    let mut tape = Tape::new(params);
    let loss = build(&mut tape)?;
    Ok(tape.value(loss).item())
}
