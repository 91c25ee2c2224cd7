use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Central-difference step used by [`check_gradients`].
pub const FD_STEP: f64 = 1e-3;

fn evaluate<F>(f: &F, params: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.constant(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let v = tape.value(out);
    if v.numel() != 1 {
        return Err(Error::Shape(format!(
            "objective must be scalar, got {:?}",
            v.shape()
        )));
    }
    let v = v.item();
    if !v.is_finite() {
        return Err(Error::Numeric(format!("objective is not finite ({v})")));
    }
    Ok(v)
}

/// Largest relative disagreement between tape gradients of the scalar
/// objective `f` and central finite differences, over every element of
/// every tensor in `params`.
///
/// Relative error per element is `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn check_gradients<F>(f: F, params: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    evaluate(&f, params)?;
    let mut tape = Tape::new();
    let vars: Vec<Var> = params
        .iter()
        .map(|p| tape.leaf(&p.clone().with_requires_grad(true)))
        .collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut worst = 0.0f64;
    let mut probe = params.to_vec();
    for (pi, var) in vars.iter().enumerate() {
        let analytic = grads
            .get(*var)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; params[pi].numel()]);
        for (ei, &a) in analytic.iter().enumerate() {
            let orig = params[pi].data()[ei];
            probe[pi].data_mut()[ei] = orig + FD_STEP;
            let up = evaluate(&f, &probe)?;
            probe[pi].data_mut()[ei] = orig - FD_STEP;
            let down = evaluate(&f, &probe)?;
            probe[pi].data_mut()[ei] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}
