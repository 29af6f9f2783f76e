use super::{Result, Tape, Tensor, TensorError, Var};

/// `|a − n| / max(|a|, |n|, 1e-12)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-12)
}

/// Compares tape gradients with central differences of step `step`.
///
/// `f` builds a one-element output from the parameter handles it is given.
/// Returns the maximum relative error over every element of every parameter.
pub fn gradcheck<F>(f: F, params: &[Tensor<f64>], step: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    gradcheck_with_floor(f, params, step, 0.0)
}

/// Like [`gradcheck`], but each element's error is divided by at least
/// `floor × max |analytic gradient|`, so elements far below the
/// finite-difference rounding level of the output are not judged on noise.
pub fn gradcheck_with_floor<F>(f: F, params: &[Tensor<f64>], step: f64, floor: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::strict();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut t = Tape::strict();
        let vs: Vec<Var> = values.iter().map(|p| t.constant(p.clone())).collect();
        let o = f(&mut t, &vs)?;
        let v = t.value(o).data()[0];
        if !v.is_finite() {
            return Err(TensorError::NonFinite("gradcheck"));
        }
        Ok(v)
    };

    let mut scale = 0.0f64;
    for var in &vars {
        let g = grads.get(*var).ok_or(TensorError::ForeignVar)?;
        scale = g.data().iter().fold(scale, |m, x| m.max(x.abs()));
    }
    let scale = floor * scale;
    let mut work: Vec<Tensor<f64>> = params.to_vec();
    let mut worst = 0.0f64;
    for (p, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).ok_or(TensorError::ForeignVar)?.data().to_vec();
        for k in 0..params[p].len() {
            let orig = params[p].data()[k];
            work[p].data_mut()[k] = orig + step;
            let plus = eval(&work)?;
            work[p].data_mut()[k] = orig - step;
            let minus = eval(&work)?;
            work[p].data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic[k];
            worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(scale).max(1e-12));
        }
    }
    Ok(worst)
}
