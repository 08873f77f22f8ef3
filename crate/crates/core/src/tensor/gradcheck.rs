use super::{Result, Tape, Tensor, TensorError, Var};

/// Compares the taped gradient of `f` at `w` against central differences.
///
/// Returns `max_i |analytic_i - numeric_i| / max(1, |analytic_i|)`.
pub fn grad_check<F>(f: F, w: &[f64], step: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    if !(step > 0.0) {
        return Err(TensorError::invalid("grad_check", "step must be positive"));
    }
    let eval = |point: &[f64]| -> Result<f64> {
        let tape = Tape::new();
        let leaf = tape.param(Tensor::from_vec(point.to_vec()));
        let v = f(&tape, leaf)?.value().item()?;
        if !v.is_finite() {
            return Err(TensorError::NonFinite(format!("objective returned {v}")));
        }
        Ok(v)
    };

    let tape = Tape::new();
    let leaf = tape.param(Tensor::from_vec(w.to_vec()));
    let loss = f(&tape, leaf)?;
    let value = loss.value().item()?;
    if !value.is_finite() {
        return Err(TensorError::NonFinite(format!("objective returned {value}")));
    }
    let analytic = tape.backward(loss)?.wrt(leaf);

    let mut point = w.to_vec();
    let mut worst = 0.0f64;
    for (i, &a) in analytic.data().iter().enumerate() {
        let orig = point[i];
        point[i] = orig + step;
        let plus = eval(&point)?;
        point[i] = orig - step;
        let minus = eval(&point)?;
        point[i] = orig;
        let numeric = (plus - minus) / (2.0 * step);
        worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn sum_of_squares_matches_closed_form() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let w: Vec<f64> = (0..8).map(|_| rng.random_range(-2.0..2.0)).collect();
        let err = grad_check(|_, w| Ok(w.squared_norm()), &w, 1e-6).unwrap();
        assert!(err < 1e-7, "err = {err}");
    }

    #[test]
    fn constant_objective_reports_zero() {
        let err = grad_check(
            |tape, _| Ok(tape.constant(Tensor::scalar(4.2))),
            &[1.0, 2.0, 3.0],
            1e-6,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn non_finite_objective_is_an_error() {
        let res = grad_check(
            |tape, w| {
                let z = tape.constant(Tensor::scalar(f64::INFINITY));
                w.sum().mul(z)
            },
            &[1.0],
            1e-6,
        );
        assert!(matches!(res, Err(TensorError::NonFinite(_))));
    }
}
