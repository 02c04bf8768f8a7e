//! Finite-difference gradient checking.
//!
//! [`central_diff`] evaluates a scalar function twice per coordinate and
//! never looks at the analytic machinery, so tests can use it as an
//! independent oracle: build the same loss once through the tape for
//! analytic gradients and once through a plain closure for numeric ones.
//! [`check_op`] packages the whole comparison for a tape operation: it
//! scalarizes the op's output against a random weight vector, runs the
//! reverse pass, re-evaluates the same scalar under coordinate perturbations,
//! and reports the worst relative error over all differentiable inputs.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::{Tape, Tensor, Var};

/// Central-difference gradient of `f` at `x`: (f(x+h*e_i) - f(x-h*e_i)) / 2h.
pub fn central_diff<F: FnMut(&[f32]) -> f32>(mut f: F, x: &[f32], h: f32) -> Vec<f32> {
    let mut probe = x.to_vec();
    let mut grad = vec![0.0f32; x.len()];
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let fp = f(&probe) as f64;
        probe[i] = orig - h;
        let fm = f(&probe) as f64;
        probe[i] = orig;
        grad[i] = ((fp - fm) / (2.0 * h as f64)) as f32;
    }
    grad
}

/// Maximum elementwise deviation, scaled by the largest magnitude present in
/// either vector (floored at 1 so near-zero gradients compare absolutely).
pub fn max_rel_err(analytic: &[f32], numeric: &[f32]) -> f32 {
    assert_eq!(analytic.len(), numeric.len(), "gradient length mismatch");
    let scale = analytic
        .iter()
        .chain(numeric)
        .fold(1.0f32, |m, v| m.max(v.abs()));
    analytic
        .iter()
        .zip(numeric)
        .fold(0.0f32, |m, (a, n)| m.max((a - n).abs()))
        / scale
}

/// Reduces an arbitrary-shaped op output to a scalar by a fixed random
/// weighting, so every output coordinate influences the check.
fn scalarize(tape: &mut Tape, out: Var, weights: &Tensor) -> Result<Var> {
    let n = tape.value(out).numel();
    let flat = tape.reshape(out, &[1, n])?;
    let w = tape.constant(weights.clone().reshaped(&[1, n])?);
    tape.matmul_nt(flat, w)
}

/// Compares analytic gradients of `builder`'s output against central
/// differences for every entry of every input, returning the worst relative
/// error. `builder` is called once per function evaluation and must be a
/// pure function of the input values.
pub fn check_op<F>(mut builder: F, inputs: &[Tensor], seed: u64, h: f32) -> Result<f32>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t)).collect();
    let out = builder(&mut tape, &vars)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5ca1ab1e);
    let weights = Tensor::randn(&[tape.value(out).numel()], 1.0, &mut rng);
    let loss = scalarize(&mut tape, out, &weights)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f32>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            tape.grad(v)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; t.numel()])
        })
        .collect();

    let mut worst = 0.0f32;
    for i in 0..inputs.len() {
        let mut eval = |probe: &[f32]| -> f32 {
            let mut t = Tape::new();
            let vars: Vec<Var> = inputs
                .iter()
                .enumerate()
                .map(|(j, inp)| {
                    if j == i {
                        t.constant(
                            Tensor::new(inp.shape().to_vec(), probe.to_vec())
                                .expect("probe matches input shape"),
                        )
                    } else {
                        t.constant(inp.clone())
                    }
                })
                .collect();
            let out = builder(&mut t, &vars).expect("op succeeded analytically");
            let loss = scalarize(&mut t, out, &weights).expect("scalarize");
            t.value(loss).item()
        };
        let numeric = central_diff(&mut eval, inputs[i].data(), h);
        worst = worst.max(max_rel_err(&analytic[i], &numeric));
    }
    Ok(worst)
}
