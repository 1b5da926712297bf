//! Finite-difference verification of tape gradients.

use thiserror::Error;

use crate::error::Error;
use crate::tape::{Tape, Var};
use crate::tensor::{Tensor, TensorError};

/// Default probe step.
pub const DEFAULT_STEP: f64 = 1e-4;
/// Floor of the relative-error denominator.
pub const REL_ERROR_FLOOR: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum GradCheckError {
    #[error(transparent)]
    Objective(#[from] Error),
    #[error("objective is not deterministic: {first} != {second}")]
    NonDeterministic { first: f64, second: f64 },
    #[error("objective returned {got} gradients for {expected} parameters")]
    GradientCount { expected: usize, got: usize },
}

/// Per-parameter comparison of analytic and numerical gradients.
#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub index: usize,
    pub max_rel_error: f64,
    pub worst_entry: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_ERROR_FLOOR)
}

/// A scalar function of a list of tensors with a reverse-mode gradient.
pub trait Objective {
    fn value(&self, params: &[Tensor<f64>]) -> Result<f64, Error>;
    fn gradient(&self, params: &[Tensor<f64>]) -> Result<Vec<Tensor<f64>>, Error>;
}

/// Adapts a loss builder into an [`Objective`]: the builder receives the
/// parameters as tape variables and returns the scalar loss node.
pub struct TapeObjective<F>(pub F);

impl<F> Objective for TapeObjective<F>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var, TensorError>,
{
    fn value(&self, params: &[Tensor<f64>]) -> Result<f64, Error> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = params.iter().map(|p| tape.constant(p.clone())).collect();
        let loss = (self.0)(&mut tape, &vars)?;
        Ok(tape.value(loss).data()[0])
    }

    fn gradient(&self, params: &[Tensor<f64>]) -> Result<Vec<Tensor<f64>>, Error> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
        let loss = (self.0)(&mut tape, &vars)?;
        let mut grads = tape.backward(loss)?;
        Ok(vars
            .iter()
            .map(|&v| grads.take(v).expect("parameters are tracked"))
            .collect())
    }
}

/// Compares `objective.gradient` against a fourth-order central difference
/// with step `h`, entry by entry.
pub fn finite_diff_check(
    objective: &impl Objective,
    params: &[Tensor<f64>],
    h: f64,
) -> Result<GradCheckReport, GradCheckError> {
    let first = objective.value(params)?;
    let second = objective.value(params)?;
    if first.to_bits() != second.to_bits() {
        return Err(GradCheckError::NonDeterministic { first, second });
    }

    let analytic = objective.gradient(params)?;
    if analytic.len() != params.len() {
        return Err(GradCheckError::GradientCount {
            expected: params.len(),
            got: analytic.len(),
        });
    }

    let mut probe: Vec<Tensor<f64>> = params.to_vec();
    let mut report = Vec::with_capacity(params.len());
    for (index, grad) in analytic.iter().enumerate() {
        let mut check = ParamCheck {
            index,
            max_rel_error: 0.0,
            worst_entry: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for entry in 0..params[index].len() {
            let x0 = params[index].data()[entry];
            let mut eval = |offset: f64| -> Result<f64, Error> {
                probe[index].data_mut()[entry] = x0 + offset;
                objective.value(&probe)
            };
            let f_p1 = eval(h)?;
            let f_m1 = eval(-h)?;
            let f_p2 = eval(2.0 * h)?;
            let f_m2 = eval(-2.0 * h)?;
            probe[index].data_mut()[entry] = x0;

            let numeric = (8.0 * (f_p1 - f_m1) - (f_p2 - f_m2)) / (12.0 * h);
            let a = grad.data()[entry];
            let err = relative_error(a, numeric);
            if err > check.max_rel_error || entry == 0 {
                check.max_rel_error = check.max_rel_error.max(err);
                check.worst_entry = entry;
                check.analytic = a;
                check.numeric = numeric;
            }
        }
        report.push(check);
    }
    Ok(GradCheckReport { params: report })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_objective_matches_to_machine_noise() {
        let obj = TapeObjective(|tape: &mut Tape<f64>, p: &[Var]| {
            let w = tape.constant(Tensor::vector(vec![0.5, -3.0, 2.0]));
            let prod = tape.mul(p[0], w)?;
            tape.sum(prod)
        });
        let report = finite_diff_check(&obj, &[Tensor::vector(vec![1.0, 2.0, 3.0])], DEFAULT_STEP).unwrap();
        assert!(report.max_rel_error() < 1e-9, "{report:?}");
    }

    #[test]
    fn constant_objective_has_zero_gradients() {
        let obj = TapeObjective(|tape: &mut Tape<f64>, p: &[Var]| {
            let zero = tape.affine(p[0], 0.0, 1.5)?;
            tape.sum(zero)
        });
        let params = [Tensor::vector(vec![1.0, -1.0])];
        let grads = obj.gradient(&params).unwrap();
        assert!(grads[0].data().iter().all(|&g| g == 0.0));
        let report = finite_diff_check(&obj, &params, DEFAULT_STEP).unwrap();
        assert_eq!(report.max_rel_error(), 0.0);
    }

    struct Flaky(std::cell::Cell<f64>);

    impl Objective for Flaky {
        fn value(&self, _: &[Tensor<f64>]) -> Result<f64, Error> {
            let v = self.0.get();
            self.0.set(v + 1.0);
            Ok(v)
        }
        fn gradient(&self, p: &[Tensor<f64>]) -> Result<Vec<Tensor<f64>>, Error> {
            Ok(p.to_vec())
        }
    }

    #[test]
    fn nondeterministic_objective_is_rejected() {
        let err = finite_diff_check(&Flaky(0.0.into()), &[Tensor::scalar(1.0)], DEFAULT_STEP).unwrap_err();
        assert!(matches!(err, GradCheckError::NonDeterministic { .. }));
    }

    #[test]
    fn relative_error_uses_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1e-12, 0.0) - 1e-4).abs() < 1e-18);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
    }
}
