use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Exponential moving average of every trainable array. The shadow is plain
/// data, so no tape can ever reach it.
#[derive(Debug, Clone, PartialEq)]
pub struct EmaState<T: Scalar> {
    pub shadow: Vec<Vec<T>>,
}

impl<T: Scalar> EmaState<T> {
    pub fn new(params: &[&Tensor<T>]) -> Self {
        EmaState {
            shadow: params.iter().map(|p| p.to_vec()).collect(),
        }
    }

    /// `shadow ← decay·shadow + (1 − decay)·param`, per scalar.
    pub fn update(&mut self, params: &[&Tensor<T>], decay: f64) -> Result<()> {
        ema_update(&mut self.shadow, params, decay)
    }
}

pub fn ema_update<T: Scalar>(shadow: &mut [Vec<T>], params: &[&Tensor<T>], decay: f64) -> Result<()> {
    if shadow.len() != params.len() {
        return Err(Error::Validation(format!(
            "ema: {} shadow arrays for {} parameters",
            shadow.len(),
            params.len()
        )));
    }
    let d = T::lit(decay);
    let rest = T::one() - d;
    for (s, p) in shadow.iter_mut().zip(params) {
        let pd = p.data();
        if s.len() != pd.len() {
            return Err(Error::Dimension {
                op: "ema_update",
                lhs: vec![s.len()],
                rhs: p.shape().to_vec(),
            });
        }
        s.iter_mut().zip(pd.iter()).for_each(|(s, &v)| *s = d * *s + rest * v);
    }
    Ok(())
}
