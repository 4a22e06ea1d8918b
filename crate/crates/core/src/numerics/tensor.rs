//! Dense row-major `f64` matrices and the pure kernels the tape records.

use crate::error::{Error, Result};

/// A dense 2-D tensor of 64-bit floats, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor2D {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor2D {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor2D {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Tensor2D {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Dimension(format!(
                "buffer of length {} cannot form a {rows}x{cols} tensor",
                data.len()
            )));
        }
        Ok(Tensor2D { rows, cols, data })
    }

    /// Builds a tensor from row slices; rows must all share one length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != c {
                return Err(Error::Dimension(format!(
                    "row {i} has {} entries, expected {c}",
                    row.len()
                )));
            }
            data.extend_from_slice(row);
        }
        Ok(Tensor2D { rows: r, cols: c, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor2D {
        Tensor2D {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Keeps only the column range `[start, start+len)`.
    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Tensor2D> {
        if start + len > self.cols {
            return Err(Error::Dimension(format!(
                "column slice {start}..{} exceeds width {}",
                start + len,
                self.cols
            )));
        }
        let mut out = Tensor2D::zeros(self.rows, len);
        for i in 0..self.rows {
            out.row_mut(i).copy_from_slice(&self.row(i)[start..start + len]);
        }
        Ok(out)
    }

    /// Stacks `self[idx[i]]` into a new tensor, one output row per index.
    pub fn gather_rows(&self, idx: &[usize]) -> Result<Tensor2D> {
        let mut out = Tensor2D::zeros(idx.len(), self.cols);
        for (i, &src) in idx.iter().enumerate() {
            if src >= self.rows {
                return Err(Error::Dimension(format!(
                    "row index {src} out of range for {} rows",
                    self.rows
                )));
            }
            out.row_mut(i).copy_from_slice(self.row(src));
        }
        Ok(out)
    }
}

fn check_same_shape(op: &str, a: &Tensor2D, b: &Tensor2D) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension(format!(
            "{op}: {}x{} vs {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    Ok(())
}

pub fn add(a: &Tensor2D, b: &Tensor2D) -> Result<Tensor2D> {
    check_same_shape("add", a, b)?;
    let data = a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect();
    Ok(Tensor2D { rows: a.rows, cols: a.cols, data })
}

pub fn sub(a: &Tensor2D, b: &Tensor2D) -> Result<Tensor2D> {
    check_same_shape("sub", a, b)?;
    let data = a.data.iter().zip(&b.data).map(|(x, y)| x - y).collect();
    Ok(Tensor2D { rows: a.rows, cols: a.cols, data })
}

pub fn mul(a: &Tensor2D, b: &Tensor2D) -> Result<Tensor2D> {
    check_same_shape("mul", a, b)?;
    let data = a.data.iter().zip(&b.data).map(|(x, y)| x * y).collect();
    Ok(Tensor2D { rows: a.rows, cols: a.cols, data })
}

/// `x @ w + b` where `b` is a `1 x cols(w)` row broadcast over rows.
pub fn affine(x: &Tensor2D, w: &Tensor2D, b: &Tensor2D) -> Result<Tensor2D> {
    if x.cols != w.rows {
        return Err(Error::Dimension(format!(
            "affine: input {}x{} does not conform with weights {}x{}",
            x.rows, x.cols, w.rows, w.cols
        )));
    }
    if b.rows != 1 || b.cols != w.cols {
        return Err(Error::Dimension(format!(
            "affine: bias {}x{} does not match output width {}",
            b.rows, b.cols, w.cols
        )));
    }
    let mut out = Tensor2D::zeros(x.rows, w.cols);
    for i in 0..x.rows {
        out.row_mut(i).copy_from_slice(b.row(0));
    }
    matmul_accumulate(x, w, &mut out);
    Ok(out)
}

/// `out += x @ w`, cache-friendly i-k-j order.
fn matmul_accumulate(x: &Tensor2D, w: &Tensor2D, out: &mut Tensor2D) {
    let n = w.cols;
    for i in 0..x.rows {
        let xrow = x.row(i);
        let orow = out.row_mut(i);
        for (k, &xv) in xrow.iter().enumerate() {
            if xv == 0.0 {
                continue;
            }
            let wrow = &w.data[k * n..(k + 1) * n];
            for j in 0..n {
                orow[j] += xv * wrow[j];
            }
        }
    }
}

pub fn matmul(a: &Tensor2D, b: &Tensor2D) -> Result<Tensor2D> {
    if a.cols != b.rows {
        return Err(Error::Dimension(format!(
            "matmul: {}x{} by {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Tensor2D::zeros(a.rows, b.cols);
    matmul_accumulate(a, b, &mut out);
    Ok(out)
}

/// `a @ b^T`; pairwise dot products of the rows of `a` and `b`.
pub fn matmul_nt(a: &Tensor2D, b: &Tensor2D) -> Result<Tensor2D> {
    if a.cols != b.cols {
        return Err(Error::Dimension(format!(
            "matmul_nt: {}x{} by transposed {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Tensor2D::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        let arow = a.row(i);
        let orow = out.row_mut(i);
        for j in 0..b.rows {
            let brow = b.row(j);
            let mut acc = 0.0;
            for k in 0..a.cols {
                acc += arow[k] * brow[k];
            }
            orow[j] = acc;
        }
    }
    Ok(out)
}

/// `a^T @ b`; used by backward passes.
pub fn matmul_tn(a: &Tensor2D, b: &Tensor2D) -> Result<Tensor2D> {
    if a.rows != b.rows {
        return Err(Error::Dimension(format!(
            "matmul_tn: transposed {}x{} by {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Tensor2D::zeros(a.cols, b.cols);
    let n = b.cols;
    for r in 0..a.rows {
        let arow = a.row(r);
        let brow = b.row(r);
        for (k, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out.data[k * n..(k + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    Ok(out)
}

pub fn relu(x: &Tensor2D) -> Tensor2D {
    x.map(|v| if v > 0.0 { v } else { 0.0 })
}

pub fn clamp(x: &Tensor2D, lo: f64, hi: f64) -> Tensor2D {
    x.map(|v| v.clamp(lo, hi))
}

pub fn scale(x: &Tensor2D, c: f64) -> Tensor2D {
    x.map(|v| v * c)
}

pub fn add_scalar(x: &Tensor2D, c: f64) -> Tensor2D {
    x.map(|v| v + c)
}

pub fn exp(x: &Tensor2D) -> Tensor2D {
    x.map(f64::exp)
}

pub fn sqrt(x: &Tensor2D) -> Tensor2D {
    x.map(f64::sqrt)
}

pub fn abs(x: &Tensor2D) -> Tensor2D {
    x.map(f64::abs)
}

pub fn sum_all(x: &Tensor2D) -> f64 {
    x.data.iter().sum()
}

/// Sums each row into a `rows x 1` column.
pub fn row_sum(x: &Tensor2D) -> Tensor2D {
    let mut out = Tensor2D::zeros(x.rows, 1);
    for i in 0..x.rows {
        out.data[i] = x.row(i).iter().sum();
    }
    out
}

pub fn row_norms(x: &Tensor2D) -> Vec<f64> {
    (0..x.rows)
        .map(|i| x.row(i).iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect()
}

/// Divides each row by its Euclidean norm.
///
/// A row with norm below `1e-12` is rejected: it means a latent code has
/// collapsed and the contrastive similarities would be meaningless.
pub fn l2_normalize_rows(x: &Tensor2D) -> Result<Tensor2D> {
    let norms = row_norms(x);
    let mut out = x.clone();
    for (i, &n) in norms.iter().enumerate() {
        if n < 1e-12 {
            return Err(Error::DegenerateVector(format!(
                "row {i} has norm {n:.3e}, cannot normalize"
            )));
        }
        for v in out.row_mut(i) {
            *v /= n;
        }
    }
    Ok(out)
}

/// Row-wise log-sum-exp restricted to entries where `mask > 0`,
/// stabilized by max subtraction. Returns a `rows x 1` column.
pub fn masked_row_lse(x: &Tensor2D, mask: &Tensor2D) -> Result<Tensor2D> {
    check_same_shape("masked_row_lse", x, mask)?;
    let mut out = Tensor2D::zeros(x.rows, 1);
    for i in 0..x.rows {
        let xr = x.row(i);
        let mr = mask.row(i);
        let mut max = f64::NEG_INFINITY;
        for (v, m) in xr.iter().zip(mr) {
            if *m > 0.0 && *v > max {
                max = *v;
            }
        }
        if max == f64::NEG_INFINITY {
            return Err(Error::Precondition(format!(
                "masked_row_lse: row {i} has no unmasked entries"
            )));
        }
        let mut acc = 0.0;
        for (v, m) in xr.iter().zip(mr) {
            if *m > 0.0 {
                acc += (v - max).exp();
            }
        }
        out.data[i] = max + acc.ln();
    }
    Ok(out)
}

/// `sum(w * x)` with a fixed coefficient tensor.
pub fn weighted_sum(x: &Tensor2D, w: &Tensor2D) -> Result<f64> {
    check_same_shape("weighted_sum", x, w)?;
    Ok(x.data.iter().zip(&w.data).map(|(a, b)| a * b).sum())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn affine_identity() {
        let x = Tensor2D::from_rows(&[vec![2.0, 3.0]]).unwrap();
        let w = Tensor2D::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let b = Tensor2D::zeros(1, 2);
        let out = affine(&x, &w, &b).unwrap();
        assert_eq!(out.data(), &[2.0, 3.0]);
    }

    #[test]
    fn affine_collapses_to_sum() {
        let x = Tensor2D::from_rows(&[vec![2.0, 3.0]]).unwrap();
        let w = Tensor2D::from_rows(&[vec![1.0], vec![1.0]]).unwrap();
        let b = Tensor2D::from_rows(&[vec![1.0]]).unwrap();
        let out = affine(&x, &w, &b).unwrap();
        assert_eq!(out.data(), &[6.0]);
    }

    #[test]
    fn affine_shape_mismatch_names_both_shapes() {
        let x = Tensor2D::zeros(2, 3);
        let w = Tensor2D::zeros(4, 2);
        let b = Tensor2D::zeros(1, 2);
        let err = affine(&x, &w, &b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("2x3") && msg.contains("4x2"), "{msg}");
    }

    #[test]
    fn relu_sign_cases() {
        let x = Tensor2D::from_rows(&[vec![-1.0, 0.0, 2.0]]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
        let pos = Tensor2D::from_rows(&[vec![0.5, 3.0]]).unwrap();
        assert_eq!(relu(&pos), pos);
    }

    #[test]
    fn l2_normalize_three_four_five() {
        let x = Tensor2D::from_rows(&[vec![3.0, 4.0]]).unwrap();
        let out = l2_normalize_rows(&x).unwrap();
        assert!((out.get(0, 0) - 0.6).abs() < 1e-15);
        assert!((out.get(0, 1) - 0.8).abs() < 1e-15);
    }

    #[test]
    fn l2_normalize_unit_row_unchanged() {
        let x = Tensor2D::from_rows(&[vec![0.0, 1.0]]).unwrap();
        let out = l2_normalize_rows(&x).unwrap();
        assert!((out.get(0, 1) - 1.0).abs() < 1e-12);
        assert!(out.get(0, 0).abs() < 1e-12);
    }

    #[test]
    fn l2_normalize_zero_row_rejected() {
        let x = Tensor2D::zeros(1, 2);
        assert!(matches!(
            l2_normalize_rows(&x),
            Err(Error::DegenerateVector(_))
        ));
    }

    #[test]
    fn masked_lse_matches_plain_log_sum() {
        let x = Tensor2D::from_rows(&[vec![1.0, 2.0, 3.0]]).unwrap();
        let mask = Tensor2D::from_rows(&[vec![1.0, 0.0, 1.0]]).unwrap();
        let out = masked_row_lse(&x, &mask).unwrap();
        let expect = (1.0f64.exp() + 3.0f64.exp()).ln();
        assert!((out.get(0, 0) - expect).abs() < 1e-12);
    }

    #[test]
    fn gather_and_slice() {
        let x = Tensor2D::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let g = x.gather_rows(&[1, 0, 1]).unwrap();
        assert_eq!(g.row(0), &[3.0, 4.0]);
        assert_eq!(g.row(2), &[3.0, 4.0]);
        let s = x.slice_cols(1, 1).unwrap();
        assert_eq!(s.data(), &[2.0, 4.0]);
    }
}
