//! Cross-entropy with an auxiliary penalty on the softmax normalizer.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

#[derive(Clone, Debug, PartialEq)]
pub struct LossBreakdown {
    /// `ce + z_coeff * z`.
    pub total: f64,
    /// Mean cross-entropy in nats.
    pub ce: f64,
    /// Mean of `lse²` over positions, before scaling by the coefficient.
    pub z: f64,
    /// Cross-entropy at each position.
    pub per_position: Vec<f64>,
}

impl LossBreakdown {
    /// Bits per byte for byte-level models.
    pub fn bpc(&self) -> f64 {
        self.ce / std::f64::consts::LN_2
    }
}

fn log_sum_exp<T: Scalar>(row: &[T]) -> T {
    let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
    let mut s = T::zero();
    for &x in row {
        s += (x - m).exp();
    }
    m + s.ln()
}

fn validate<T: Scalar>(logits: &Matrix<T>, targets: &[u32]) -> Result<()> {
    if logits.rows() != targets.len() || targets.is_empty() {
        return Err(Error::ShapeMismatch {
            op: "loss",
            left: logits.shape(),
            right: (targets.len(), 1),
        });
    }
    if let Some(&t) = targets.iter().find(|&&t| t as usize >= logits.cols()) {
        return Err(Error::TokenOutOfRange {
            token: t,
            vocab: logits.cols(),
        });
    }
    Ok(())
}

/// Mean cross-entropy plus `z_coeff` times the mean squared log-normalizer.
pub fn loss<T: Scalar>(logits: &Matrix<T>, targets: &[u32], z_coeff: f64) -> Result<LossBreakdown> {
    Ok(loss_and_grad(logits, targets, z_coeff, false)?.0)
}

/// Loss and, if requested, its gradient with respect to the logits.
pub(crate) fn loss_and_grad<T: Scalar>(
    logits: &Matrix<T>,
    targets: &[u32],
    z_coeff: f64,
    want_grad: bool,
) -> Result<(LossBreakdown, Option<Matrix<T>>)> {
    validate(logits, targets)?;
    let n = targets.len();
    let inv_n = T::one() / T::of(n as f64);
    let zc = T::of(z_coeff);
    let mut per_position = Vec::with_capacity(n);
    let mut ce_sum = T::zero();
    let mut z_sum = T::zero();
    let mut grad = want_grad.then(|| Matrix::zeros(logits.rows(), logits.cols()));
    for (t, &target) in targets.iter().enumerate() {
        let row = logits.row(t);
        let lse = log_sum_exp(row);
        let ce = lse - row[target as usize];
        per_position.push(ce.f64());
        ce_sum += ce;
        z_sum += lse * lse;
        if let Some(g) = grad.as_mut() {
            // d/dlogit of ce is softmax - onehot; of lse² is 2·lse·softmax.
            let scale = (T::one() + zc * T::of(2.0) * lse) * inv_n;
            for (gj, &xj) in g.row_mut(t).iter_mut().zip(row) {
                *gj = (xj - lse).exp() * scale;
            }
            g.row_mut(t)[target as usize] -= inv_n;
        }
    }
    let ce = (ce_sum * inv_n).f64();
    let z = (z_sum * inv_n).f64();
    Ok((
        LossBreakdown {
            total: ce + z_coeff * z,
            ce,
            z,
            per_position,
        },
        grad,
    ))
}
