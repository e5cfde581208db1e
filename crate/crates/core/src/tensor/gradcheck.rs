//! Central-difference gradient oracle.

use super::{Real, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Relative error used by every gradient check: `|a - n| / max(1, |a|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(1.0)
}

/// Central difference `(f(x + h e_i) - f(x - h e_i)) / 2h` for one coordinate.
///
/// `eval` receives the perturbed coordinate value and returns the scalar
/// objective; it must restore any state it mutates.
pub fn central_difference<T: Real>(
    x0: T,
    h: f64,
    mut eval: impl FnMut(T) -> Result<f64>,
) -> Result<f64> {
    let plus = eval(T::lit(x0.as_f64() + h))?;
    let minus = eval(T::lit(x0.as_f64() - h))?;
    if !plus.is_finite() || !minus.is_finite() {
        return Err(Error::numeric(
            "finite_diff_check",
            format!("objective is non-finite at probe point ({plus}, {minus})"),
        ));
    }
    // Divide by the realised step so f32 rounding of x0 +- h does not bias the estimate.
    let step = T::lit(x0.as_f64() + h).as_f64() - T::lit(x0.as_f64() - h).as_f64();
    Ok((plus - minus) / step)
}

/// Maximum relative error between the tape gradient of `f` at `point` and
/// central differences with step `h`, over every coordinate of `point`.
///
/// `f` builds a scalar-valued graph from the leaf it is given.
pub fn finite_diff_check<T, F>(mut f: F, point: &Tensor<T>, h: f64) -> Result<f64>
where
    T: Real,
    F: FnMut(&mut Tape<T>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let x = tape.leaf(point.clone(), true);
    let y = f(&mut tape, x)?;
    let analytic: Vec<f64> = if tape.requires_grad(y) {
        tape.backward(y)?;
        tape.grad(x)
            .map(|g| g.iter().map(|v| v.as_f64()).collect())
            .unwrap_or_else(|| vec![0.0; point.numel()])
    } else {
        vec![0.0; point.numel()]
    };

    let mut probe = point.clone();
    let mut worst = 0.0f64;
    for (i, &a) in analytic.iter().enumerate() {
        let x0 = point.data()[i];
        let numeric = central_difference(x0, h, |xi| {
            probe.data_mut()[i] = xi;
            let mut tape = Tape::inference();
            let x = tape.leaf(probe.clone(), false);
            let y = f(&mut tape, x)?;
            scalar_of(&tape, y)
        })?;
        probe.data_mut()[i] = x0;
        worst = worst.max(relative_error(a, numeric));
    }
    Ok(worst)
}

pub(crate) fn scalar_of<T: Real>(tape: &Tape<T>, y: Var) -> Result<f64> {
    let v = tape.value(y);
    if v.data.len() != 1 {
        return Err(Error::contract(format!(
            "gradient check objective must be scalar, got {:?}",
            v.shape
        )));
    }
    Ok(v.data[0].as_f64())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_matches_closed_form() {
        let x = Tensor::from_vec(vec![1], vec![3.0f64]).unwrap();
        let err = finite_diff_check(|t, v| {
            let sq = t.mul(v, v)?;
            t.sum(sq)
        }, &x, 1e-4)
        .unwrap();
        assert!(err < 1e-7, "err {err}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let x = Tensor::from_vec(vec![2], vec![1.0f64, -2.0]).unwrap();
        let err = finite_diff_check(|t, _| {
            let c = t.constant(Tensor::scalar(4.0));
            Ok(c)
        }, &x, 1e-4)
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn non_finite_probe_is_numeric_error() {
        let x = Tensor::from_vec(vec![1], vec![f64::MAX / 2.0]).unwrap();
        let res = finite_diff_check(|t, v| {
            let s = t.scale(v, 3.0)?;
            t.sum(s)
        }, &x, 1e300);
        assert!(matches!(res, Err(Error::Numeric { .. })));
    }
}
