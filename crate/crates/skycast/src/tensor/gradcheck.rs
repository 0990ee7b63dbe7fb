//! Finite-difference verification of analytic gradients.
//!
//! The checker runs in f64 only; f32 rounding would drown the central
//! difference long before it said anything about correctness.

use super::tape::{Tape, Var};
use super::{Result, Tensor, TensorError};

/// A differentiable scalar function of one tensor, rebuilt on a fresh
/// tape for every evaluation.
pub trait ScalarFn {
    fn apply(&mut self, tape: &mut Tape<f64>, x: Var) -> Result<Var>;
}

impl<F: FnMut(&mut Tape<f64>, Var) -> Result<Var>> ScalarFn for F {
    fn apply(&mut self, tape: &mut Tape<f64>, x: Var) -> Result<Var> {
        self(tape, x)
    }
}

fn eval<F: ScalarFn>(f: &mut F, x: &Tensor<f64>) -> Result<f64> {
    let mut tape = Tape::new();
    let v = tape.leaf(x.clone(), false);
    let out = f.apply(&mut tape, v)?;
    if tape.value(out).numel() != 1 {
        return Err(TensorError::NonScalarLoss {
            shape: tape.value(out).shape().to_vec(),
        });
    }
    let y = tape.value(out).item();
    if !y.is_finite() {
        return Err(TensorError::NonFinite { op: "gradient_check" });
    }
    Ok(y)
}

fn analytic_grad<F: ScalarFn>(f: &mut F, x: &Tensor<f64>) -> Result<Tensor<f64>> {
    let mut tape = Tape::new();
    let v = tape.leaf(x.clone(), true);
    let out = f.apply(&mut tape, v)?;
    if !tape.value(out).item().is_finite() {
        return Err(TensorError::NonFinite { op: "gradient_check" });
    }
    tape.backward(out)?;
    Ok(tape
        .grad(v)
        .unwrap_or_else(|| Tensor::zeros(x.shape().to_vec())))
}

fn relative_error(analytic: f64, central: f64) -> f64 {
    (analytic - central).abs() / analytic.abs().max(central.abs()).max(1e-12)
}

/// Compares the analytic gradient of `f` at `x` against central finite
/// differences over every element. Returns the maximum relative error
/// |analytic − central| / max(|analytic|, |central|, 1e-12).
pub fn gradient_check<F: ScalarFn>(mut f: F, x: &Tensor<f64>, step: f64) -> Result<f64> {
    let grad = analytic_grad(&mut f, x)?;
    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let plus = eval(&mut f, &probe)?;
        probe.data_mut()[i] = orig - step;
        let minus = eval(&mut f, &probe)?;
        probe.data_mut()[i] = orig;
        let central = (plus - minus) / (2.0 * step);
        worst = worst.max(relative_error(grad.data()[i], central));
    }
    Ok(worst)
}

/// Like [`gradient_check`] but probes at most `max_elements` coordinates,
/// chosen by a deterministic stride. Large parameter tensors inside whole
/// models would otherwise need two forward passes per element.
pub fn gradient_check_sampled<F: ScalarFn>(
    mut f: F,
    x: &Tensor<f64>,
    step: f64,
    max_elements: usize,
) -> Result<f64> {
    let n = x.numel();
    if n <= max_elements {
        return gradient_check(f, x, step);
    }
    let grad = analytic_grad(&mut f, x)?;
    let stride = n / max_elements;
    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for k in 0..max_elements {
        let i = k * stride;
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let plus = eval(&mut f, &probe)?;
        probe.data_mut()[i] = orig - step;
        let minus = eval(&mut f, &probe)?;
        probe.data_mut()[i] = orig;
        let central = (plus - minus) / (2.0 * step);
        worst = worst.max(relative_error(grad.data()[i], central));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_has_exact_gradient() {
        let x = Tensor::from_vec(vec![0.3, -1.2, 2.5]);
        let err = gradient_check(|t: &mut Tape<f64>, v| Ok(t.sum(v)), &x, 1e-6).unwrap();
        assert!(err < 1e-9, "err {err}");
    }

    #[test]
    fn l2_norm_at_3_4() {
        let x = Tensor::from_vec(vec![3.0, 4.0]);
        let err = gradient_check(|t: &mut Tape<f64>, v| Ok(t.l2_norm(v)), &x, 1e-6).unwrap();
        assert!(err < 1e-9, "err {err}");
    }

    #[test]
    fn non_finite_function_is_reported() {
        let x = Tensor::scalar(0.0);
        let res = gradient_check(
            |t: &mut Tape<f64>, v| {
                let inf = t.scale(v, f64::INFINITY);
                Ok(t.sum(inf))
            },
            &x,
            1e-6,
        );
        assert!(matches!(res, Err(TensorError::NonFinite { .. })));
    }

    #[test]
    fn corrupted_rule_is_caught() {
        // Negative control: scale forward by 2 but pretend it is identity
        // by comparing sum(2x) against the analytic gradient of sum(x).
        let x = Tensor::from_vec(vec![1.0, 2.0]);
        let grad_of_sum = analytic_grad(&mut |t: &mut Tape<f64>, v| Ok(t.sum(v)), &x).unwrap();
        // Central difference of sum(2x) is 2, analytic gradient of sum is 1.
        let mut worst = 0.0f64;
        let mut probe = x.clone();
        for i in 0..x.numel() {
            let orig = probe.data()[i];
            probe.data_mut()[i] = orig + 1e-6;
            let plus = eval(
                &mut |t: &mut Tape<f64>, v| {
                    let s = t.scale(v, 2.0);
                    Ok(t.sum(s))
                },
                &probe,
            )
            .unwrap();
            probe.data_mut()[i] = orig - 1e-6;
            let minus = eval(
                &mut |t: &mut Tape<f64>, v| {
                    let s = t.scale(v, 2.0);
                    Ok(t.sum(s))
                },
                &probe,
            )
            .unwrap();
            probe.data_mut()[i] = orig;
            let central = (plus - minus) / 2e-6;
            worst = worst.max(relative_error(grad_of_sum.data()[i], central));
        }
        assert!(worst > 0.3, "corrupted rule should show a large error");
    }
}
