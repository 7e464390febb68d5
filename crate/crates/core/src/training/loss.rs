use crate::error::{Error, Result};
use crate::linalg::Tensor2D;

fn check(logits: &Tensor2D, targets: &[usize], mask: &[bool]) -> Result<usize> {
    if targets.len() != logits.rows() || mask.len() != logits.rows() {
        return Err(Error::shape(
            "cross_entropy",
            logits.shape(),
            (targets.len(), mask.len()),
        ));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= logits.cols()) {
        return Err(Error::Input(format!(
            "target {bad} out of range for {} logits",
            logits.cols()
        )));
    }
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(Error::DegenerateBatch("every position is masked out".into()));
    }
    Ok(count)
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Mean negative log-likelihood over the masked-in positions.
pub fn cross_entropy(logits: &Tensor2D, targets: &[usize], mask: &[bool]) -> Result<f64> {
    let count = check(logits, targets, mask)?;
    let total: f64 = (0..logits.rows())
        .filter(|&i| mask[i])
        .map(|i| log_sum_exp(logits.row(i)) - logits.get(i, targets[i]))
        .sum();
    Ok(total / count as f64)
}

/// Loss plus `d loss / d logits`. Rows outside the mask get zero gradient.
pub(crate) fn cross_entropy_with_grad(
    logits: &Tensor2D,
    targets: &[usize],
    mask: &[bool],
) -> Result<(f64, Tensor2D)> {
    let count = check(logits, targets, mask)?;
    let inv = 1.0 / count as f64;
    let mut grad = Tensor2D::zeros(logits.rows(), logits.cols());
    let mut total = 0.0;
    for i in (0..logits.rows()).filter(|&i| mask[i]) {
        let row = logits.row(i);
        let lse = log_sum_exp(row);
        total += lse - row[targets[i]];
        for (g, v) in grad.row_mut(i).iter_mut().zip(row) {
            *g = (v - lse).exp() * inv;
        }
        grad.row_mut(i)[targets[i]] -= inv;
    }
    Ok((total * inv, grad))
}
