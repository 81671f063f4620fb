//! Central-difference gradient checking.

use crate::error::{contract_err, Result};
use crate::params::ParamSet;
use crate::tensor::{Tape, Tensor, Var};

/// Max over entries of `|g_ad - g_fd| / max(1, |g_fd|)` for a scalar function
/// of one tensor. `f` must be deterministic.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut set = ParamSet::new();
    set.push("x", x.clone());
    grad_check_params(|tape, vars| f(tape, vars[0]), &set, h)
}

/// Same as [`grad_check`] over every entry of a parameter set.
pub fn grad_check_params<F>(f: F, params: &ParamSet, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(1e-6..=1e-3).contains(&h) {
        return contract_err(format!("finite-difference step {h} outside [1e-6, 1e-3]"));
    }
    let mut tape = Tape::new();
    let vars = params.load(&mut tape);
    let loss = f(&mut tape, &vars)?;
    let analytic = params.grads_from(&vars, &tape.backward(loss)?)?.flatten();

    let eval = |flat: &[f64]| -> Result<f64> {
        let p = params.unflatten(flat)?;
        let mut tape = Tape::new();
        let vars = p.load_frozen(&mut tape);
        let l = f(&mut tape, &vars)?;
        Ok(tape.item(l))
    };
    let mut flat = params.flatten();
    let mut worst = 0.0f64;
    for i in 0..flat.len() {
        let orig = flat[i];
        flat[i] = orig + h;
        let up = eval(&flat)?;
        flat[i] = orig - h;
        let down = eval(&flat)?;
        flat[i] = orig;
        let fd = (up - down) / (2.0 * h);
        worst = worst.max((analytic[i] - fd).abs() / fd.abs().max(1.0));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares() {
        let x = Tensor::vector(vec![1.0, 2.0, 3.0]).unwrap();
        let err = grad_check(
            |t, x| {
                let s = t.square(x)?;
                t.sum(s)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn sigmoid_composite() {
        let x = Tensor::matrix(2, 2, vec![0.3, -1.2, 0.8, 2.0]).unwrap();
        let w = Tensor::matrix(2, 2, vec![0.5, -0.4, 1.1, 0.2]).unwrap();
        let err = grad_check(
            move |t, x| {
                let w = t.constant(w.clone());
                let h = t.matmul(x, w)?;
                let s = t.sigmoid(h)?;
                let q = t.mul(s, x)?;
                t.mean(q)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn constant_function_has_zero_gradients() {
        let x = Tensor::vector(vec![1.0, -2.0]).unwrap();
        let err = grad_check(
            |t, _x| {
                let c = t.constant(Tensor::scalar(4.0)?);
                Ok(c)
            },
            &x,
            1e-4,
        );
        // the loss does not depend on x: both routes give zero
        assert_eq!(err.unwrap(), 0.0);
    }

    #[test]
    fn step_outside_range_rejected() {
        let x = Tensor::vector(vec![1.0]).unwrap();
        assert!(grad_check(|t, x| t.sum(x), &x, 1e-1).is_err());
    }
}
