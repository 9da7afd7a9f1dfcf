use super::matrix::{softmax_in_place, Matrix};
use crate::error::{Error, Result};

/// Mean negative log-likelihood of `targets` over the rows selected by `mask`.
///
/// Returns the loss together with its gradient with respect to `logits`;
/// unselected rows carry a zero gradient.
pub fn masked_cross_entropy(
    logits: &Matrix,
    targets: &[u32],
    mask: &[bool],
) -> Result<(f64, Matrix)> {
    let (rows, vocab) = logits.shape();
    if targets.len() != rows || mask.len() != rows {
        return Err(Error::shape(format!(
            "{rows} logit rows, {} targets, {} mask flags",
            targets.len(),
            mask.len()
        )));
    }
    let selected = mask.iter().filter(|&&m| m).count();
    if selected == 0 {
        return Err(Error::invalid("loss mask selects no positions"));
    }
    if !logits.is_finite() {
        return Err(Error::NonFinite("cross-entropy logits".into()));
    }

    let inv_n = 1.0 / selected as f64;
    let mut grad = Matrix::zeros(rows, vocab);
    let mut total = 0.0;
    for r in 0..rows {
        if !mask[r] {
            continue;
        }
        let t = targets[r] as usize;
        if t >= vocab {
            return Err(Error::invalid(format!(
                "target id {t} outside vocabulary {vocab}"
            )));
        }
        let row = grad.row_mut(r);
        row.copy_from_slice(logits.row(r));
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let log_sum = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
        total += log_sum - logits.get(r, t);
        softmax_in_place(row);
        row[t] -= 1.0;
        for g in row.iter_mut() {
            *g *= inv_n;
        }
    }
    Ok((total * inv_n, grad))
}
