//! Central finite-difference oracle for the differentiation tape.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Largest per-coordinate discrepancy between analytic and numeric gradients.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub coordinates: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

/// Checks a scalar function of one tensor. See [`grad_check_many`].
pub fn grad_check<F>(f: F, theta: &Tensor, eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    grad_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(theta), eps)
}

/// Compares the tape gradient of `f` against central differences with step
/// `eps` at every coordinate of every input. The error per coordinate is
/// `|analytic - numeric| / max(1, |numeric|)`.
pub fn grad_check_many<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let root = f(&mut tape, &vars)?;
    let grads = tape.backward(root)?;
    let analytic: Vec<Tensor> = vars.iter().map(|v| grads.wrt(*v)).collect();

    let eval = |point: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = point.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let v = tape.scalar(out);
        if !v.is_finite() {
            return Err(Error::Degenerate("non-finite function value".into()));
        }
        Ok(v)
    };

    let mut point = inputs.to_vec();
    let mut worst = 0.0f64;
    let mut coordinates = 0;
    for (which, grad) in analytic.iter().enumerate() {
        for i in 0..inputs[which].len() {
            let orig = inputs[which].data()[i];
            point[which].data_mut()[i] = orig + eps;
            let up = eval(&point)?;
            point[which].data_mut()[i] = orig - eps;
            let down = eval(&point)?;
            point[which].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let err = (grad.data()[i] - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
            coordinates += 1;
        }
    }
    Ok(GradCheckReport {
        max_rel_error: worst,
        coordinates,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_is_exact() {
        let r = grad_check(
            |t, x| {
                let y = t.mul(x, x)?;
                Ok(t.sum(y))
            },
            &Tensor::scalar(3.0),
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-8, "{r:?}");
        assert_eq!(r.coordinates, 1);
    }

    #[test]
    fn detects_wrong_gradient() {
        // relu at a kink-free point but checked through a deliberately
        // non-smooth max: analytic picks one branch, numeric sees both.
        let r = grad_check(
            |t, x| Ok(t.max(x)),
            &Tensor::vector(vec![1.0, 1.0]),
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error > 0.4);
    }
}
