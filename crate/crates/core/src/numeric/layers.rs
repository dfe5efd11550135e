//! Embedding lookup and the fully connected softmax output layer.

use super::param::Param;
use super::tensor::{add_row_bias, col_sum_acc, matmul_acc, matmul_nt_acc, matmul_tn_acc, Tensor2};
use crate::error::{Error, Result};

/// Gathers rows `ids` of the embedding table.
pub fn embedding_forward(table: &Param, ids: &[usize]) -> Result<Tensor2> {
    let (rows, dim) = table.shape();
    let mut out = Tensor2::zeros(ids.len(), dim);
    for (j, &id) in ids.iter().enumerate() {
        if id >= rows {
            return Err(Error::Index {
                what: "embedding table",
                index: id,
                size: rows,
            });
        }
        out.row_mut(j).copy_from_slice(table.value.row(id));
    }
    Ok(out)
}

/// Scatters `d_out` rows back into the table gradient, summing duplicates.
pub fn embedding_backward(table: &mut Param, ids: &[usize], d_out: &Tensor2) -> Result<()> {
    let (rows, dim) = table.shape();
    if d_out.shape() != (ids.len(), dim) {
        return Err(Error::shape(
            "embedding_backward",
            format!("{}x{}", ids.len(), dim),
            format!("{}x{}", d_out.rows(), d_out.cols()),
        ));
    }
    for (j, &id) in ids.iter().enumerate() {
        if id >= rows {
            return Err(Error::Index {
                what: "embedding table",
                index: id,
                size: rows,
            });
        }
        for (g, &d) in table.grad.row_mut(id).iter_mut().zip(d_out.row(j)) {
            *g += d;
        }
    }
    Ok(())
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(logits: &mut Tensor2) {
    for r in 0..logits.rows() {
        let row = logits.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            sum += *x;
        }
        for x in row.iter_mut() {
            *x /= sum;
        }
    }
}

fn check_affine(w: &Param, b: &Param, h: &Tensor2) -> Result<()> {
    let (in_dim, out_dim) = w.shape();
    if h.cols() != in_dim {
        return Err(Error::shape("affine", format!("{in_dim} input cols"), h.cols()));
    }
    if b.shape() != (1, out_dim) {
        return Err(Error::shape(
            "affine bias",
            format!("1x{out_dim}"),
            format!("{}x{}", b.shape().0, b.shape().1),
        ));
    }
    Ok(())
}

/// `softmax(h·W + b)`, inference only.
pub fn affine_softmax(w: &Param, b: &Param, h: &Tensor2) -> Result<Tensor2> {
    check_affine(w, b, h)?;
    let mut logits = Tensor2::zeros(h.rows(), w.shape().1);
    matmul_acc(h, &w.value, &mut logits);
    add_row_bias(&mut logits, &b.value);
    softmax_rows(&mut logits);
    Ok(logits)
}

/// Output of [`affine_softmax_xent`].
#[derive(Clone, Debug)]
pub struct XentOutput {
    pub loss: f64,
    pub probs: Tensor2,
    pub d_h: Tensor2,
}

/// Fully connected layer, softmax and mean cross-entropy against `targets`.
///
/// Accumulates `dL/dW` and `dL/db` into the parameter gradients and returns
/// `dL/dh`, where `L` is the batch mean negative log-likelihood.
pub fn affine_softmax_xent(w: &mut Param, b: &mut Param, h: &Tensor2, targets: &[usize]) -> Result<XentOutput> {
    check_affine(w, b, h)?;
    let n_out = w.shape().1;
    if targets.len() != h.rows() {
        return Err(Error::shape("affine_softmax_xent targets", h.rows(), targets.len()));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= n_out) {
        return Err(Error::Index {
            what: "output classes",
            index: bad,
            size: n_out,
        });
    }
    let probs = affine_softmax(w, b, h)?;
    let batch = h.rows().max(1) as f64;
    let mut loss = 0.0;
    let mut d_logits = probs.clone();
    for (r, &t) in targets.iter().enumerate() {
        loss -= probs.get(r, t).max(f64::MIN_POSITIVE).ln();
        let row = d_logits.row_mut(r);
        row[t] -= 1.0;
        for x in row.iter_mut() {
            *x /= batch;
        }
    }
    loss /= batch;

    matmul_tn_acc(h, &d_logits, &mut w.grad);
    col_sum_acc(&d_logits, &mut b.grad);
    let mut d_h = Tensor2::zeros(h.rows(), h.cols());
    matmul_nt_acc(&d_logits, &w.value, &mut d_h);
    Ok(XentOutput { loss, probs, d_h })
}
