/// Index of the first occurrence of the best accuracy.
pub fn best_epoch(history: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in history.iter().enumerate() {
        if best.is_none_or(|b| v > history[b]) {
            best = Some(i);
        }
    }
    best
}

/// True once `patience` epochs have passed without beating the best
/// validation accuracy. An equal accuracy is not an improvement.
pub fn early_stop(history: &[f64], patience: usize) -> bool {
    match best_epoch(history) {
        Some(best) => history.len() - 1 - best >= patience,
        None => false,
    }
}
