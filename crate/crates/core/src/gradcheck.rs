//! Central-difference gradient oracle. Compiled only for tests and the
//! `oracles` feature; nothing in the training path depends on it.

use crate::error::Result;
use crate::tensor::{Tape, Tensor};

pub const FD_EPS: f64 = 1e-4;

/// Elementwise relative error with a small absolute floor.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Worst elementwise relative error between tape gradients and central
/// differences of `loss`, over every element of every input.
///
/// `loss` must build a one-element tensor from the given inputs and must
/// work on untracked inputs too (it is re-run under a no-grad tape).
pub fn max_rel_error<F>(inputs: &[(Vec<usize>, Vec<f64>)], loss: F) -> Result<f64>
where
    F: Fn(&Tape<f64>, &[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    let tape = Tape::new();
    let params = inputs
        .iter()
        .map(|(s, d)| Tensor::param(s, d.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = loss(&tape, &params)?;
    tape.backward(&out)?;

    let eval = |which: usize, at: usize, delta: f64| -> Result<f64> {
        let consts = inputs
            .iter()
            .enumerate()
            .map(|(i, (s, d))| {
                let mut d = d.clone();
                if i == which {
                    d[at] += delta;
                }
                Tensor::new(s, d)
            })
            .collect::<Result<Vec<_>>>()?;
        loss(&Tape::no_grad(), &consts)?.item()
    };

    let mut worst: f64 = 0.0;
    for (i, p) in params.iter().enumerate() {
        let analytic = p.grad().unwrap_or_else(|| vec![0.0; p.numel()]);
        for (j, &a) in analytic.iter().enumerate() {
            let numeric = (eval(i, j, FD_EPS)? - eval(i, j, -FD_EPS)?) / (2.0 * FD_EPS);
            worst = worst.max(rel_err(a, numeric));
        }
    }
    Ok(worst)
}

/// Projects a tensor to a scalar with fixed pseudo-random weights so every
/// output element contributes a distinct sensitivity.
pub fn project(tape: &Tape<f64>, t: &Tensor<f64>) -> Result<Tensor<f64>> {
    let weights: Vec<f64> = (0..t.numel())
        .map(|i| ((i as f64 + 1.0) * 0.7548776662).sin())
        .collect();
    let w = Tensor::new(t.shape(), weights)?;
    Ok(tape.sum(&tape.mul(t, &w)?))
}
