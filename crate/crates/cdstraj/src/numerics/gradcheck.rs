use crate::error::{CdsError, Result};
use crate::numerics::{ParamStore, Tape, Val};

/// Loss closures evaluated by the checker build a fresh tape per call and
/// return the scalar loss value on it.
pub type LossFn<'a> = dyn Fn(&ParamStore, &mut Tape) -> Result<Val> + 'a;

/// Compare tape gradients against central finite differences
/// (f(θ+h) − f(θ−h)) / 2h for every entry of every parameter, returning the
/// worst relative error. The denominator is floored at 1e-8 so near-zero
/// gradient pairs do not blow up the ratio.
///
/// The loss must be deterministic; it is evaluated twice up front and any
/// mismatch is reported as a determinism error.
pub fn finite_diff_gradcheck(
    loss_fn: &LossFn,
    params: &mut ParamStore,
    h: f64,
) -> Result<f64> {
    let eval = |params: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new();
        let loss = loss_fn(params, &mut tape)?;
        if !tape.value(loss).is_scalar() {
            return Err(CdsError::Contract(
                "gradcheck loss must be scalar".into(),
            ));
        }
        Ok(tape.value(loss).scalar_value())
    };

    let first = eval(params)?;
    let second = eval(params)?;
    if first.to_bits() != second.to_bits() {
        return Err(CdsError::Determinism(format!(
            "loss function is not deterministic: {first} vs {second}"
        )));
    }

    // Analytic gradients from one taped pass.
    params.zero_grads();
    {
        let mut tape = Tape::new();
        let loss = loss_fn(params, &mut tape)?;
        tape.backward(loss, params)?;
    }
    let names = params.names();
    let analytic: Vec<(String, Vec<f64>)> = names
        .iter()
        .map(|n| (n.clone(), params.grad(n).unwrap().data().to_vec()))
        .collect();

    let mut worst = 0.0f64;
    for (name, grad) in &analytic {
        for i in 0..grad.len() {
            let orig = params.get(name)?.data()[i];
            params.get_mut(name)?.data_mut()[i] = orig + h;
            let up = eval(params)?;
            params.get_mut(name)?.data_mut()[i] = orig - h;
            let down = eval(params)?;
            params.get_mut(name)?.data_mut()[i] = orig;

            let fd = (up - down) / (2.0 * h);
            let ad = grad[i];
            let denom = fd.abs().max(ad.abs()).max(1e-8);
            let rel = (fd - ad).abs() / denom;
            if rel > worst {
                worst = rel;
            }
        }
    }
    Ok(worst)
}
