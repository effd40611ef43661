//! Finite-difference gradient checking against the tape.

use super::{Rng, Tape, Tensor, Var};
use crate::error::Result;

/// Fixed projection used to reduce non-scalar outputs to a scalar loss.
const PROJECTION_SEED: u64 = 99;

/// Central finite differences of `sum(w * f(inputs))` against the tape's
/// analytic gradient, with `w` a fixed random projection. Returns the
/// norm-wise relative error `|g_fd - g| / max(|g_fd|, |g|)` over all inputs.
///
/// The projected loss is accumulated in `f64` from the `f32` outputs, so
/// non-scalar outputs give much cleaner differences than scalar ones.
pub fn fd_check<F>(inputs: &[Tensor], f: F, step: f32) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    fd_check_stencil(inputs, f, step, &[(1.0, 0.5), (-1.0, -0.5)])
}

/// [`fd_check`] with the five-point stencil. Its truncation error is fourth
/// order, so a step near `1e-2` keeps `f32` round-off small without the
/// curvature bias a second-order difference has at that step.
pub fn fd_check4<F>(inputs: &[Tensor], f: F, step: f32) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let (a, b) = (8.0 / 12.0, 1.0 / 12.0);
    fd_check_stencil(inputs, f, step, &[(1.0, a), (-1.0, -a), (2.0, -b), (-2.0, b)])
}

/// `stencil` holds `(offset in steps, weight)`; the derivative estimate is
/// `sum(weight * L(x + offset * step)) / step`.
fn fd_check_stencil<F>(inputs: &[Tensor], f: F, step: f32, stencil: &[(f32, f64)]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let forward = |vals: &[Tensor]| -> Result<(Tape, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let y = f(&mut tape, &vars)?;
        Ok((tape, vars, y))
    };
    let project = |y: &Tensor, w: &Tensor| -> f64 {
        y.data().iter().zip(w.data()).map(|(a, b)| *a as f64 * *b as f64).sum()
    };

    let (mut tape, vars, y) = forward(inputs)?;
    let mut rng = Rng::new(PROJECTION_SEED);
    let w = Tensor::from_fn(tape.shape(y).to_vec(), |_| rng.normal());
    let wv = tape.constant(w.clone());
    let prod = tape.mul(y, wv)?;
    let loss = tape.sum(prod);
    let grads = tape.backward(loss)?;

    let (mut num, mut den_a, mut den_n) = (0.0f64, 0.0f64, 0.0f64);
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads
            .get(vars[k])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(input.shape().to_vec()));
        let mut probe = inputs.to_vec();
        for i in 0..input.numel() {
            let orig = probe[k].data()[i];
            let mut fd = 0.0f64;
            for &(offset, weight) in stencil {
                probe[k].data_mut()[i] = orig + offset * step;
                let (t, _, y) = forward(&probe)?;
                fd += weight * project(t.value(y), &w);
            }
            probe[k].data_mut()[i] = orig;
            let fd = fd / step as f64;
            let an = analytic.data()[i] as f64;
            num += (fd - an).powi(2);
            den_a += an * an;
            den_n += fd * fd;
        }
    }
    let den = den_a.sqrt().max(den_n.sqrt()).max(1e-12);
    Ok(num.sqrt() / den)
}
