//! Dense row-major 2-D tensors and the numeric kernels shared by the
//! autodiff graph and the direct inference path.
//!
//! Everything is `f64`. Vectors are `1 × n` rows, scalars are `1 × 1`.
//! Broadcasting is limited to one pattern: a `1 × n` row vector combined
//! elementwise against every row of an `m × n` matrix. All kernels are plain
//! loops over slices so the whole engine stays auditable; the matmul uses an
//! i-k-j ordering that lets LLVM vectorize the inner row updates.

use alloc::vec;
use alloc::vec::Vec;

use crate::math;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn full(rows: usize, cols: usize, v: f64) -> Self {
        Tensor { rows, cols, data: vec![v; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "data length must equal rows*cols");
        Tensor { rows, cols, data }
    }

    pub fn row_vec(data: Vec<f64>) -> Self {
        Tensor { rows: 1, cols: data.len(), data }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { rows: 1, cols: 1, data: vec![v] }
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
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
        let c = self.cols;
        &mut self.data[r * c..(r + 1) * c]
    }

    pub fn is_finite_all(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Same data, new `rows × cols` interpretation.
    pub fn reshaped(&self, rows: usize, cols: usize) -> Tensor {
        assert_eq!(rows * cols, self.data.len(), "reshape must preserve element count");
        Tensor { rows, cols, data: self.data.clone() }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn transpose(&self) -> Tensor {
        let mut out = Tensor::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }
}

// ── Binary elementwise kernels ───────────────────────────────────────

/// Broadcast relationship of `b` against `a`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Broadcast {
    /// Identical shapes.
    Same,
    /// `b` is a `1 × n` row vector applied to every row of `a`.
    RowVector,
}

pub fn broadcast_kind(a: (usize, usize), b: (usize, usize)) -> Option<Broadcast> {
    if a == b {
        Some(Broadcast::Same)
    } else if b.0 == 1 && b.1 == a.1 {
        Some(Broadcast::RowVector)
    } else {
        None
    }
}

pub fn add(a: &Tensor, b: &Tensor) -> Tensor {
    zip(a, b, |x, y| x + y)
}

pub fn mul(a: &Tensor, b: &Tensor) -> Tensor {
    zip(a, b, |x, y| x * y)
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let kind = broadcast_kind(a.shape(), b.shape())
        .unwrap_or_else(|| panic!("shape mismatch: {:?} vs {:?}", a.shape(), b.shape()));
    let mut out = a.clone();
    match kind {
        Broadcast::Same => {
            for (o, y) in out.data.iter_mut().zip(b.data.iter()) {
                *o = f(*o, *y);
            }
        }
        Broadcast::RowVector => {
            for r in 0..out.rows {
                let row = out.row_mut(r);
                for (o, y) in row.iter_mut().zip(b.data.iter()) {
                    *o = f(*o, *y);
                }
            }
        }
    }
    out
}

pub fn scale(a: &Tensor, c: f64) -> Tensor {
    a.map(|v| v * c)
}

/// Accumulate `src` into `dst` (same shape).
pub fn add_assign(dst: &mut Tensor, src: &Tensor) {
    assert_eq!(dst.shape(), src.shape());
    for (d, s) in dst.data.iter_mut().zip(src.data.iter()) {
        *d += *s;
    }
}

// ── Matrix products ──────────────────────────────────────────────────

/// `a (m×k) · b (k×n)`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.cols, b.rows, "matmul inner dimensions must agree");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    let mut out = Tensor::zeros(m, n);
    for i in 0..m {
        let a_row = a.row(i);
        let o_row = out.row_mut(i);
        for (p, &av) in a_row.iter().enumerate().take(k) {
            if av == 0.0 {
                continue;
            }
            let b_row = b.row(p);
            for (o, &bv) in o_row.iter_mut().zip(b_row.iter()) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a (m×k) · bᵀ` where `b` is `(n×k)`.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.cols, b.cols, "matmul_nt inner dimensions must agree");
    let (m, n) = (a.rows, b.rows);
    let mut out = Tensor::zeros(m, n);
    for i in 0..m {
        let a_row = a.row(i);
        let o_row = out.row_mut(i);
        for (j, o) in o_row.iter_mut().enumerate().take(n) {
            let b_row = b.row(j);
            let mut acc = 0.0;
            for (x, y) in a_row.iter().zip(b_row.iter()) {
                acc += x * y;
            }
            *o = acc;
        }
    }
    out
}

/// `aᵀ · b` where `a` is `(m×k)` and `b` is `(m×n)`; result `(k×n)`.
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.rows, b.rows, "matmul_tn outer dimensions must agree");
    let (k, n) = (a.cols, b.cols);
    let mut out = Tensor::zeros(k, n);
    for i in 0..a.rows {
        let a_row = a.row(i);
        let b_row = b.row(i);
        for (p, &av) in a_row.iter().enumerate().take(k) {
            if av == 0.0 {
                continue;
            }
            let o_row = out.row_mut(p);
            for (o, &bv) in o_row.iter_mut().zip(b_row.iter()) {
                *o += av * bv;
            }
        }
    }
    out
}

// ── Row-structured kernels ───────────────────────────────────────────

/// Softmax applied independently to each row (max-shifted, so any finite
/// logits are safe).
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    for r in 0..out.rows {
        let row = out.row_mut(r);
        let mut m = f64::NEG_INFINITY;
        for &v in row.iter() {
            m = math::max(m, v);
        }
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = math::exp(*v - m);
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

pub const LAYERNORM_EPS: f64 = 1e-8;

/// Per-row standardization to zero mean, unit variance (no affine terms).
pub fn layernorm_rows(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    for r in 0..out.rows {
        let row = out.row_mut(r);
        let n = row.len() as f64;
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv = 1.0 / math::sqrt(var + LAYERNORM_EPS);
        for v in row.iter_mut() {
            *v = (*v - mean) * inv;
        }
    }
    out
}

/// Rows of `table` selected by `ids`.
pub fn gather_rows(table: &Tensor, ids: &[usize]) -> Tensor {
    let mut out = Tensor::zeros(ids.len(), table.cols);
    for (r, &id) in ids.iter().enumerate() {
        assert!(id < table.rows, "gather id {id} out of range {}", table.rows);
        out.row_mut(r).copy_from_slice(table.row(id));
    }
    out
}

pub fn concat_cols(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.rows, b.rows, "concat_cols requires equal row counts");
    let mut out = Tensor::zeros(a.rows, a.cols + b.cols);
    for r in 0..a.rows {
        out.row_mut(r)[..a.cols].copy_from_slice(a.row(r));
        out.row_mut(r)[a.cols..].copy_from_slice(b.row(r));
    }
    out
}

pub fn concat_rows(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.cols, b.cols, "concat_rows requires equal column counts");
    let mut data = Vec::with_capacity(a.numel() + b.numel());
    data.extend_from_slice(a.data());
    data.extend_from_slice(b.data());
    Tensor::from_vec(a.rows + b.rows, a.cols, data)
}

pub fn slice_rows(x: &Tensor, r0: usize, r1: usize) -> Tensor {
    assert!(r0 < r1 && r1 <= x.rows, "row slice {r0}..{r1} out of range");
    Tensor::from_vec(r1 - r0, x.cols, x.data[r0 * x.cols..r1 * x.cols].to_vec())
}

pub fn slice_cols(x: &Tensor, c0: usize, c1: usize) -> Tensor {
    assert!(c0 < c1 && c1 <= x.cols, "col slice {c0}..{c1} out of range");
    let mut out = Tensor::zeros(x.rows, c1 - c0);
    for r in 0..x.rows {
        out.row_mut(r).copy_from_slice(&x.row(r)[c0..c1]);
    }
    out
}

/// Each entry repeated `k` times along the row: `[a, b] → [a,…,a, b,…,b]`.
pub fn repeat_interleave_cols(x: &Tensor, k: usize) -> Tensor {
    let mut out = Tensor::zeros(x.rows, x.cols * k);
    for r in 0..x.rows {
        let src = x.row(r);
        let dst = out.row_mut(r);
        for (c, &v) in src.iter().enumerate() {
            for d in dst[c * k..(c + 1) * k].iter_mut() {
                *d = v;
            }
        }
    }
    out
}

pub fn reduce_sum_all(x: &Tensor) -> f64 {
    x.data.iter().sum()
}

/// Maximum element and its flat index (first occurrence on ties).
pub fn reduce_max_all(x: &Tensor) -> (f64, usize) {
    let mut best = f64::NEG_INFINITY;
    let mut arg = 0;
    for (i, &v) in x.data.iter().enumerate() {
        if v > best {
            best = v;
            arg = i;
        }
    }
    (best, arg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_hand_case() {
        let a = Tensor::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let b = Tensor::from_vec(2, 1, vec![1.0, 1.0]);
        let c = matmul(&a, &b);
        assert_eq!(c.data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_variants_agree() {
        let mut rng = crate::rng::Rng::new(3);
        let a = crate::rng::xavier_normal(4, 6, &mut rng);
        let b = crate::rng::xavier_normal(6, 5, &mut rng);
        let base = matmul(&a, &b);
        let via_nt = matmul_nt(&a, &b.transpose());
        let via_tn = matmul_tn(&a.transpose(), &b);
        for i in 0..base.numel() {
            assert!((base.data()[i] - via_nt.data()[i]).abs() < 1e-12);
            assert!((base.data()[i] - via_tn.data()[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rows_uniform_on_equal_logits() {
        let s = softmax_rows(&Tensor::row_vec(vec![0.0, 0.0]));
        assert_eq!(s.data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_rows_sums_to_one() {
        let s = softmax_rows(&Tensor::from_vec(2, 3, vec![1.0, -2.0, 0.3, 9.0, 9.0, -1.0]));
        for r in 0..2 {
            let sum: f64 = s.row(r).iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn layernorm_rows_standardizes() {
        let y = layernorm_rows(&Tensor::from_vec(1, 4, vec![1.0, 2.0, 3.0, 4.0]));
        let mean: f64 = y.data().iter().sum::<f64>() / 4.0;
        let var: f64 = y.data().iter().map(|v| v * v).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-6);
    }

    #[test]
    fn broadcast_row_vector() {
        let a = Tensor::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let b = Tensor::row_vec(vec![10.0, 20.0]);
        assert_eq!(add(&a, &b).data(), &[11.0, 22.0, 13.0, 24.0]);
        assert_eq!(mul(&a, &b).data(), &[10.0, 40.0, 30.0, 80.0]);
    }

    #[test]
    fn repeat_interleave() {
        let x = Tensor::row_vec(vec![1.0, 2.0]);
        assert_eq!(repeat_interleave_cols(&x, 3).data(), &[1.0, 1.0, 1.0, 2.0, 2.0, 2.0]);
    }

    #[test]
    fn slices_and_concat() {
        let x = Tensor::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(slice_rows(&x, 1, 2).data(), &[4.0, 5.0, 6.0]);
        assert_eq!(slice_cols(&x, 1, 3).data(), &[2.0, 3.0, 5.0, 6.0]);
        let c = concat_cols(&slice_cols(&x, 0, 1), &slice_cols(&x, 1, 3));
        assert_eq!(c.data(), x.data());
        let r = concat_rows(&slice_rows(&x, 0, 1), &slice_rows(&x, 1, 2));
        assert_eq!(r.data(), x.data());
    }

    #[test]
    fn max_tie_takes_first() {
        let (v, i) = reduce_max_all(&Tensor::row_vec(vec![1.0, 7.0, 7.0, 2.0]));
        assert_eq!(v, 7.0);
        assert_eq!(i, 1);
    }
}
