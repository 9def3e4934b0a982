use super::{Tape, Tensor, Var};
use crate::error::Result;

/// Largest mixed relative error between reverse-mode gradients and central
/// finite differences of `f` with respect to every entry of every input.
///
/// Errors are measured as `|a - n| / max(|a|, |n|, floor)`, so entries whose
/// true gradient is near zero are compared on an absolute scale of `floor`.
pub fn max_gradient_error<F>(inputs: &[Tensor], h: f64, floor: f64, f: F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let root = f(&mut tape, &vars)?;
    let grads = tape.backward(root)?;

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| tape.constant(t.clone())).collect();
        let root = f(&mut tape, &vars)?;
        tape.value(root).item()
    };

    let mut worst = 0.0f64;
    let mut work = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).expect("param leaf").clone();
        for j in 0..inputs[i].len() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + h;
            let up = eval(&work)?;
            work[i].data_mut()[j] = orig - h;
            let down = eval(&work)?;
            work[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic.data()[j];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
