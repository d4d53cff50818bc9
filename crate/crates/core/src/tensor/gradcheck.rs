use super::{Float, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// `max_i |a_i - n_i| / max(1e-12, |a_i| + |n_i|)`.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / (a.abs() + n.abs()).max(1e-12))
        .fold(0.0, f64::max)
}

/// Compares the tape gradient of a scalar function of `x` against central
/// differences with step `h`. Returns the maximum relative error.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    grad_check_fn(
        |point| {
            let mut tape = Tape::new();
            let v = tape.param(point.clone());
            let loss = f(&mut tape, v)?;
            let value = tape.value(loss).item();
            let grads = tape.backward(loss)?;
            let g = grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(point.shape()));
            Ok((value, g))
        },
        x,
        h,
    )
}

/// Same check for a hand-written `value_and_grad` closure.
pub fn grad_check_fn<F>(value_and_grad: F, x: &Tensor<f64>, h: f64) -> Result<f64>
where
    F: Fn(&Tensor<f64>) -> Result<(f64, Tensor<f64>)>,
{
    if h <= 0.0 {
        return Err(Error::contract("grad_check step must be positive"));
    }
    let (_, analytic) = value_and_grad(x)?;
    if analytic.shape() != x.shape() {
        return Err(Error::dim("grad_check", analytic.shape(), x.shape()));
    }
    let mut numeric = Vec::with_capacity(x.len());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let (fp, _) = value_and_grad(&probe)?;
        probe.data_mut()[i] = orig - h;
        let (fm, _) = value_and_grad(&probe)?;
        probe.data_mut()[i] = orig;
        numeric.push((fp - fm) / (2.0 * h));
    }
    let analytic: Vec<f64> = analytic.data().iter().map(|v| v.as_f64()).collect();
    Ok(max_relative_error(&analytic, &numeric))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_is_exact() {
        let x = Tensor::vector(vec![0.3, -1.2, 2.5, 0.01]).unwrap();
        let err = grad_check(
            |t, v| {
                let sq = t.mul(v, v)?;
                Ok(t.sum(sq))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "err = {err}");
    }

    #[test]
    fn catches_a_wrong_gradient() {
        let x = Tensor::vector(vec![1.0, 2.0]).unwrap();
        let err = grad_check_fn(
            |p| {
                let v: f64 = p.data().iter().map(|a| a * a).sum();
                Ok((v, p.map(|a| 3.0 * a)))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err > 0.1);
    }
}
