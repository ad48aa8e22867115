use super::{Tape, Tensor, Var};
use crate::error::Result;

pub const DEFAULT_EPS: f64 = 1e-5;

/// Max relative error between the tape gradient of scalar `f` at `x` and a
/// central difference with step `eps`. The error for an entry is
/// `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
pub fn gradcheck<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    gradcheck_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), eps)
}

/// [`gradcheck`] over several inputs at once; `f` receives one tape variable
/// per input, in order.
pub fn gradcheck_many<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t)).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| tape.leaf(t)).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.scalar_value(out))
    };

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let analytic: Vec<f64> = match grads.get(*var) {
            Some(g) => g.to_vec(),
            None => vec![0.0; inputs[i].numel()],
        };
        for (j, a) in analytic.iter().enumerate() {
            let orig = inputs[i].data()[j];
            let (hi, lo) = (orig + eps, orig - eps);
            work[i].data_mut()[j] = hi;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = lo;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = orig;

            // The representable step, not the nominal one.
            let numeric = (plus - minus) / (hi - lo);
            let denom = 1f64.max(a.abs()).max(numeric.abs());
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}
