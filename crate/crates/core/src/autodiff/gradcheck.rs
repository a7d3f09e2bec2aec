//! Finite-difference verification of tape gradients.

use super::{Tape, Var};
use crate::tensor::{Result, Scalar, Tensor, TensorError};

/// Per-coordinate comparison of the tape gradient against central
/// differences `(f(x+eps*e) - f(x-eps*e)) / (2*eps)`.
#[derive(Debug, Clone)]
pub struct GradcheckReport {
    pub max_rel_err: f64,
    pub worst_coord: usize,
    pub coords_checked: usize,
    pub pass: bool,
    pub tol: f64,
}

impl GradcheckReport {
    fn from_errors(errors: &[(usize, f64)], tol: f64) -> Self {
        let (worst_coord, max_rel_err) = errors
            .iter()
            .cloned()
            .fold((0usize, 0.0f64), |acc, (i, e)| {
                if e > acc.1 {
                    (i, e)
                } else {
                    acc
                }
            });
        Self {
            max_rel_err,
            worst_coord,
            coords_checked: errors.len(),
            pass: max_rel_err < tol,
            tol,
        }
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs()).max(1.0)
}

fn eval_scalar<F>(f: &F, x: &Tensor<f64>) -> Result<f64>
where
    F: Fn(&Tape<f64>, &Var<f64>) -> Result<Var<f64>>,
{
    let tape = Tape::new();
    let xv = tape.constant(x.clone());
    let y = f(&tape, &xv)?;
    y.value().item().map(|v| v.to_f64())
}

/// Checks all coordinates of `x`.
pub fn gradcheck<F>(f: F, x: &Tensor<f64>, eps: f64, tol: f64) -> Result<GradcheckReport>
where
    F: Fn(&Tape<f64>, &Var<f64>) -> Result<Var<f64>>,
{
    let coords: Vec<usize> = (0..x.numel()).collect();
    gradcheck_subset(f, x, &coords, eps, tol)
}

/// Checks only the listed flat coordinates of `x`.
pub fn gradcheck_subset<F>(
    f: F,
    x: &Tensor<f64>,
    coords: &[usize],
    eps: f64,
    tol: f64,
) -> Result<GradcheckReport>
where
    F: Fn(&Tape<f64>, &Var<f64>) -> Result<Var<f64>>,
{
    // determinism probe: a non-deterministic f invalidates the comparison
    let v1 = eval_scalar(&f, x)?;
    let v2 = eval_scalar(&f, x)?;
    if v1.to_bits() != v2.to_bits() {
        return Err(TensorError::Invalid {
            ctx: "gradcheck",
            msg: "non-deterministic function: repeated evaluation mismatch".into(),
        });
    }

    let tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let y = f(&tape, &xv)?;
    let grads = y.backward()?;
    let analytic = grads.wrt(&xv);

    let mut errors = Vec::with_capacity(coords.len());
    for &i in coords {
        if i >= x.numel() {
            return Err(TensorError::Invalid {
                ctx: "gradcheck",
                msg: format!("coordinate {} out of range", i),
            });
        }
        let mut plus = x.data().to_vec();
        plus[i] += eps;
        let mut minus = x.data().to_vec();
        minus[i] -= eps;
        let fp = eval_scalar(&f, &Tensor::new_unchecked(x.shape().to_vec(), plus))?;
        let fm = eval_scalar(&f, &Tensor::new_unchecked(x.shape().to_vec(), minus))?;
        let numeric = (fp - fm) / (2.0 * eps);
        errors.push((i, rel_err(analytic.data()[i], numeric)));
    }
    Ok(GradcheckReport::from_errors(&errors, tol))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_near_exact() {
        let x = Tensor::new(vec![4], vec![0.5, -1.2, 2.0, 0.1]).unwrap();
        let report = gradcheck(
            |_tape, v| v.mul(v)?.sum_all(),
            &x,
            1e-5,
            1e-8,
        )
        .unwrap();
        assert!(report.pass, "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn composite_smooth_function() {
        let x = Tensor::new(vec![3], vec![0.3, -0.7, 1.1]).unwrap();
        let report = gradcheck(
            |_tape, v| v.tanh()?.exp()?.mul(&v.sigmoid()?)?.sum_all(),
            &x,
            1e-5,
            1e-7,
        )
        .unwrap();
        assert!(report.pass, "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn wrong_gradient_rule_is_flagged() {
        // analytic path computes sum(x^2) but we compare against a shifted
        // function value, so the numeric estimate disagrees
        let x = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let report = gradcheck(
            |tape, v| {
                // deliberately inconsistent: gradient flows through 3*x
                // while the value is x^2-like only at the test point
                let three_x = v.scale(3.0)?;
                let _ = tape;
                three_x.sum_all()
            },
            &x,
            1e-5,
            1e-8,
        )
        .unwrap();
        // f = 3*sum(x): gradient 3 matches; now force a real mismatch
        assert!(report.pass);
        let bad = gradcheck(
            |_tape, v| {
                // value sum(x^2), but cut the tape link for half the path:
                // grad recorded is d(sum(x*c))/dx = c with c constant copy
                let c = v.tape().constant(v.value());
                v.mul(&c)?.sum_all()
            },
            &x,
            1e-5,
            1e-8,
        )
        .unwrap();
        assert!(!bad.pass);
    }
}
