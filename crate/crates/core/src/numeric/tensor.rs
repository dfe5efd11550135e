use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major matrix of `f64`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor2 {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor2 {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor2 {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "Tensor2::from_vec",
                format!("{} values", rows * cols),
                data.len(),
            ));
        }
        Ok(Tensor2 { rows, cols, data })
    }

    /// Builds a tensor from nested rows. Panics on ragged input; intended for
    /// literals and tests.
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Tensor2 {
            rows: rows.len(),
            cols,
            data,
        }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows).map(|r| self.row(r).to_vec()).collect()
    }

    /// Horizontal concatenation `[self | other]`.
    pub fn hconcat(&self, other: &Tensor2) -> Result<Tensor2> {
        if self.rows != other.rows {
            return Err(Error::shape("hconcat", self.rows, other.rows));
        }
        let cols = self.cols + other.cols;
        let mut out = Tensor2::zeros(self.rows, cols);
        for r in 0..self.rows {
            let dst = out.row_mut(r);
            dst[..self.cols].copy_from_slice(self.row(r));
            dst[self.cols..].copy_from_slice(other.row(r));
        }
        Ok(out)
    }

    /// Splits columns at `at`, the inverse of [`Tensor2::hconcat`].
    pub fn hsplit(&self, at: usize) -> (Tensor2, Tensor2) {
        let mut left = Tensor2::zeros(self.rows, at);
        let mut right = Tensor2::zeros(self.rows, self.cols - at);
        for r in 0..self.rows {
            let src = self.row(r);
            left.row_mut(r).copy_from_slice(&src[..at]);
            right.row_mut(r).copy_from_slice(&src[at..]);
        }
        (left, right)
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }
}

/// `out += a · b` where `a` is m×k and `b` is k×n.
pub(crate) fn matmul_acc(a: &Tensor2, b: &Tensor2, out: &mut Tensor2) {
    debug_assert_eq!(a.cols, b.rows);
    debug_assert_eq!(out.shape(), (a.rows, b.cols));
    let n = b.cols;
    for i in 0..a.rows {
        let a_row = a.row(i);
        let o_row = &mut out.data[i * n..(i + 1) * n];
        for (k, &a_ik) in a_row.iter().enumerate() {
            if a_ik == 0.0 {
                continue;
            }
            let b_row = &b.data[k * n..(k + 1) * n];
            for (o, &bv) in o_row.iter_mut().zip(b_row) {
                *o += a_ik * bv;
            }
        }
    }
}

/// `out += aᵀ · b` where `a` is m×k and `b` is m×n (out is k×n).
pub(crate) fn matmul_tn_acc(a: &Tensor2, b: &Tensor2, out: &mut Tensor2) {
    debug_assert_eq!(a.rows, b.rows);
    debug_assert_eq!(out.shape(), (a.cols, b.cols));
    let n = b.cols;
    for i in 0..a.rows {
        let b_row = b.row(i);
        for (k, &a_ik) in a.row(i).iter().enumerate() {
            if a_ik == 0.0 {
                continue;
            }
            let o_row = &mut out.data[k * n..(k + 1) * n];
            for (o, &bv) in o_row.iter_mut().zip(b_row) {
                *o += a_ik * bv;
            }
        }
    }
}

/// `out += a · bᵀ` where `a` is m×n and `b` is k×n (out is m×k).
pub(crate) fn matmul_nt_acc(a: &Tensor2, b: &Tensor2, out: &mut Tensor2) {
    debug_assert_eq!(a.cols, b.cols);
    debug_assert_eq!(out.shape(), (a.rows, b.rows));
    let k_dim = b.rows;
    for i in 0..a.rows {
        let a_row = a.row(i);
        for k in 0..k_dim {
            let dot: f64 = a_row.iter().zip(b.row(k)).map(|(x, y)| x * y).sum();
            out.data[i * k_dim + k] += dot;
        }
    }
}

/// Adds the 1×n `bias` row to every row of `out`.
pub(crate) fn add_row_bias(out: &mut Tensor2, bias: &Tensor2) {
    debug_assert_eq!(bias.rows, 1);
    debug_assert_eq!(bias.cols, out.cols);
    let n = out.cols;
    for row in out.data.chunks_mut(n.max(1)) {
        for (o, &b) in row.iter_mut().zip(&bias.data) {
            *o += b;
        }
    }
}

/// Accumulates the column sums of `d` into the 1×n `out`.
pub(crate) fn col_sum_acc(d: &Tensor2, out: &mut Tensor2) {
    debug_assert_eq!(out.shape(), (1, d.cols));
    let n = d.cols;
    for row in d.data.chunks(n.max(1)) {
        for (o, &v) in out.data.iter_mut().zip(row) {
            *o += v;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_variants_agree_with_naive() {
        let a = Tensor2::from_rows(&[vec![1.0, 2.0, 0.0], vec![-1.0, 0.5, 3.0]]);
        let b = Tensor2::from_rows(&[vec![2.0, 1.0], vec![0.0, -1.0], vec![4.0, 0.25]]);
        let mut ab = Tensor2::zeros(2, 2);
        matmul_acc(&a, &b, &mut ab);
        assert_eq!(ab.to_rows(), vec![vec![2.0, -1.0], vec![10.0, -0.75]]);

        // aᵀ·c with c 2×2
        let c = Tensor2::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let mut atc = Tensor2::zeros(3, 2);
        matmul_tn_acc(&a, &c, &mut atc);
        assert_eq!(atc.to_rows(), vec![vec![1.0, -1.0], vec![2.0, 0.5], vec![0.0, 3.0]]);

        // a·aᵀ
        let mut aat = Tensor2::zeros(2, 2);
        matmul_nt_acc(&a, &a, &mut aat);
        assert_eq!(aat.to_rows(), vec![vec![5.0, 0.0], vec![0.0, 10.25]]);
    }

    #[test]
    fn concat_then_split_is_identity() {
        let a = Tensor2::from_rows(&[vec![1.0], vec![2.0]]);
        let b = Tensor2::from_rows(&[vec![3.0, 4.0], vec![5.0, 6.0]]);
        let ab = a.hconcat(&b).unwrap();
        assert_eq!(ab.row(1), &[2.0, 5.0, 6.0]);
        let (l, r) = ab.hsplit(1);
        assert_eq!(l, a);
        assert_eq!(r, b);
    }

    #[test]
    fn from_vec_checks_length() {
        assert!(Tensor2::from_vec(2, 2, vec![0.0; 3]).is_err());
    }
}
