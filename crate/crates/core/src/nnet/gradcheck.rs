//! Central finite-difference checks of tape gradients.

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;

const NORM_FLOOR: f64 = 1e-6;

/// Worst relative error between the tape gradient and central differences
/// over all `inputs`.
///
/// `f` builds a scalar from leaves holding `inputs`. Each input's error is
/// `|g_tape - g_fd| / max(|g_tape|, |g_fd|, 1e-6)` taken over the whole
/// gradient vector (Euclidean norms), so a single element that straddles a
/// kink does not dominate. The floor covers inputs whose true gradient is
/// zero (a bias feeding a batch norm), where differences of nearly equal
/// sums leave ~1e-11 of rounding noise at step 1e-4.
pub fn max_relative_error<F>(inputs: &[Tensor], step: f64, f: F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.leaf(t.clone(), false)).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut worst: f64 = 0.0;
    let mut work = inputs.to_vec();
    for (k, v) in vars.iter().enumerate() {
        let analytic: Vec<f64> = match grads.get(*v) {
            Some(g) => g.to_vec(),
            None => vec![0.0; inputs[k].len()],
        };
        let mut numeric = vec![0.0; inputs[k].len()];
        for e in 0..inputs[k].len() {
            let x0 = inputs[k].data()[e];
            work[k].data_mut()[e] = x0 + step;
            let up = eval(&work)?;
            work[k].data_mut()[e] = x0 - step;
            let down = eval(&work)?;
            work[k].data_mut()[e] = x0;
            numeric[e] = (up - down) / (2.0 * step);
        }
        let diff = analytic.iter().zip(&numeric).map(|(a, n)| (a - n) * (a - n)).sum::<f64>().sqrt();
        let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
        worst = worst.max(diff / na.max(nn).max(NORM_FLOOR));
    }
    Ok(worst)
}
