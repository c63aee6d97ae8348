//! Whole-model reverse pass.

use crate::blocks::{block_backward, block_forward_cached, BlockCache};
use crate::error::{Error, Result};
use crate::model::{Model, Parameters};
use crate::scalar::Scalar;
use crate::tensor::{matmul, matmul_at, matmul_bt, LnCache, Matrix};
use crate::train::loss::{loss_and_grad, LossBreakdown};

/// Same layout as the parameters they belong to.
pub type Gradients<T> = Parameters<T>;

struct ForwardCache<T> {
    ln0: Vec<LnCache<T>>,
    blocks: Vec<BlockCache<T>>,
    ln_out: Vec<LnCache<T>>,
    normed: Matrix<T>,
}

fn forward_cached<T: Scalar>(model: &Model<T>, tokens: &[u32]) -> Result<(Matrix<T>, ForwardCache<T>)> {
    model.check_sequence(tokens)?;
    let p = &model.params;
    let (mut x, ln0) = p.ln0.forward_rows(&model.embed(tokens));
    let mut blocks = Vec::with_capacity(p.blocks.len());
    for b in &p.blocks {
        let (y, c) = block_forward_cached(&x, b)?;
        blocks.push(c);
        x = y;
    }
    let (normed, ln_out) = p.ln_out.forward_rows(&x);
    let logits = matmul_bt(&normed, &p.head)?;
    Ok((
        logits,
        ForwardCache {
            ln0,
            blocks,
            ln_out,
            normed,
        },
    ))
}

/// Loss on one sequence and gradients accumulated into `grad`.
pub fn backward_sequence<T: Scalar>(
    model: &Model<T>,
    inputs: &[u32],
    targets: &[u32],
    z_coeff: f64,
    grad: &mut Gradients<T>,
) -> Result<LossBreakdown> {
    if inputs.len() != targets.len() {
        return Err(Error::ShapeMismatch {
            op: "backward",
            left: (inputs.len(), 1),
            right: (targets.len(), 1),
        });
    }
    let p = &model.params;
    let (logits, cache) = forward_cached(model, inputs)?;
    let (loss, d_logits) = loss_and_grad(&logits, targets, z_coeff, true)?;
    let d_logits = d_logits.expect("gradient requested");

    let d_head = matmul_at(&d_logits, &cache.normed)?;
    for (g, &d) in grad.head.as_mut_slice().iter_mut().zip(d_head.as_slice()) {
        *g += d;
    }
    let d_normed = matmul(&d_logits, &p.head)?;
    let mut dx = p.ln_out.backward_rows(&d_normed, &cache.ln_out, &mut grad.ln_out);
    for ((b, c), g) in p.blocks.iter().zip(&cache.blocks).zip(grad.blocks.iter_mut()).rev() {
        dx = block_backward(&dx, b, c, g)?;
    }
    let d_emb = p.ln0.backward_rows(&dx, &cache.ln0, &mut grad.ln0);
    for (t, &tok) in inputs.iter().enumerate() {
        for (g, &d) in grad.emb.row_mut(tok as usize).iter_mut().zip(d_emb.row(t)) {
            *g += d;
        }
    }
    Ok(loss)
}

/// Mean loss over the rows of a batch and the matching gradient.
///
/// Each row holds `n + 1` tokens: positions `0..n` are inputs and `1..=n`
/// are targets. Rows are differentiated one at a time into fresh buffers and
/// summed in row order, so the result does not depend on scheduling.
pub fn backward<T: Scalar>(
    model: &Model<T>,
    rows: &[Vec<u32>],
    z_coeff: f64,
) -> Result<(LossBreakdown, Gradients<T>)> {
    if rows.is_empty() {
        return Err(Error::InvalidConfig("empty batch".into()));
    }
    let mut total = model.params.zeros_like();
    let mut per_position = Vec::new();
    let (mut sum_total, mut sum_ce, mut sum_z) = (0.0, 0.0, 0.0);
    for row in rows {
        if row.len() < 2 {
            return Err(Error::InvalidConfig("batch rows need at least two tokens".into()));
        }
        let mut g = model.params.zeros_like();
        let l = backward_sequence(model, &row[..row.len() - 1], &row[1..], z_coeff, &mut g)?;
        for (acc, part) in total.tensors_mut().into_iter().zip(g.tensors()) {
            for (a, &b) in acc.data.iter_mut().zip(part.data) {
                *a += b;
            }
        }
        sum_total += l.total;
        sum_ce += l.ce;
        sum_z += l.z;
        per_position.extend(l.per_position);
    }
    let n = rows.len() as f64;
    let scale = T::one() / T::of(n);
    for t in total.tensors_mut() {
        for a in t.data.iter_mut() {
            *a *= scale;
        }
    }
    Ok((
        LossBreakdown {
            total: sum_total / n,
            ce: sum_ce / n,
            z: sum_z / n,
            per_position,
        },
        total,
    ))
}
