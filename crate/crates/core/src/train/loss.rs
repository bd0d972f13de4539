use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Tensor};

/// Index of the largest value; ties go to the lowest index.
pub fn argmax<T: PartialOrd + Copy>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Classification + halting loss for one supervision step.
#[derive(Debug, Clone)]
pub struct LossParts<T: Scalar> {
    pub total: Tensor<T>,
    pub cls: Tensor<T>,
    pub halt: Tensor<T>,
    /// Per-example argmax of the logits.
    pub predictions: Vec<usize>,
    /// Per-example halting target: 1 when the prediction equals the hard label.
    pub halt_targets: Vec<T>,
}

/// `CE(logits, soft_target) + BCE(halt_logit, 1{argmax(logits) = hard_label})`.
///
/// The halting target is a constant indicator; no gradient flows through
/// the argmax.
pub fn total_loss<T: Scalar>(
    tape: &Tape<T>,
    logits: &Tensor<T>,
    soft_target: &Tensor<T>,
    hard_labels: &[usize],
    halt_logit: &Tensor<T>,
) -> Result<LossParts<T>> {
    let (batch, classes) = match logits.shape() {
        [b, c] => (*b, *c),
        other => {
            return Err(Error::Dimension {
                op: "total_loss",
                lhs: other.to_vec(),
                rhs: soft_target.shape().to_vec(),
            })
        }
    };
    if hard_labels.len() != batch {
        return Err(Error::Validation(format!(
            "total_loss: {} hard labels for a batch of {batch}",
            hard_labels.len()
        )));
    }
    if let Some(&bad) = hard_labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Validation(format!("hard label {bad} outside [0, {classes})")));
    }
    let predictions: Vec<usize> = logits.data().chunks_exact(classes).map(argmax).collect();
    let halt_targets: Vec<T> = predictions
        .iter()
        .zip(hard_labels)
        .map(|(p, l)| if p == l { T::one() } else { T::zero() })
        .collect();
    let cls = tape.cross_entropy_soft(logits, soft_target)?;
    let halt = tape.bce_with_logits(halt_logit, &Tensor::new(&[batch, 1], halt_targets.clone())?)?;
    let total = tape.add(&cls, &halt)?;
    Ok(LossParts {
        total,
        cls,
        halt,
        predictions,
        halt_targets,
    })
}
