use crate::diffcore::tape::{Tape, Var};
use crate::diffcore::tensor::Tensor;
use crate::error::{Error, Result};

/// Compares the tape gradient of a scalar function against central
/// differences at `point` and returns the worst relative error
/// `|analytic - numeric| / max(1, |analytic|)`.
pub fn gradient_check<F>(f: F, point: &Tensor, epsilon: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    gradient_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(point), epsilon)
}

/// Multi-argument variant: every tensor in `points` is perturbed coordinate
/// by coordinate.
pub fn gradient_check_many<F>(f: F, points: &[Tensor], epsilon: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(1e-8..=1e-3).contains(&epsilon) {
        return Err(Error::contract(format!(
            "gradient_check epsilon must lie in [1e-8, 1e-3], got {epsilon}"
        )));
    }
    let eval = |pts: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = pts.iter().map(|p| tape.constant(p)).collect();
        let out = f(&mut tape, &vars)?;
        tape.scalar(out)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = points
        .iter()
        .map(|p| {
            let mut p = p.clone();
            p.set_requires_grad(true);
            tape.leaf(&p)
        })
        .collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor> = points.to_vec();
    #[allow(clippy::needless_range_loop)]
    for (pi, var) in vars.iter().enumerate() {
        let analytic = grads.wrt(*var);
        for i in 0..work[pi].numel() {
            let orig = work[pi].data()[i];
            work[pi].data_mut()[i] = orig + epsilon;
            let up = eval(&work)?;
            work[pi].data_mut()[i] = orig - epsilon;
            let down = eval(&work)?;
            work[pi].data_mut()[i] = orig;
            if !(up.is_finite() && down.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite function value while perturbing argument {pi} coordinate {i}"
                )));
            }
            let numeric = (up - down) / (2.0 * epsilon);
            let err = (analytic[i] - numeric).abs() / analytic[i].abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
