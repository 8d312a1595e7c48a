use std::sync::Arc;

use crate::error::{Error, Result};

/// Numerical guard added to denominators throughout the crate.
pub const EPS_NUM: f64 = 1e-8;

/// Dense row-major tensor of f64 values. Immutable once constructed; clones
/// share the underlying buffer.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.len() <= 16 {
            write!(f, "Tensor{:?}{:?}", self.shape, self.data)
        } else {
            write!(f, "Tensor{:?}[{} values]", self.shape, self.len())
        }
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if numel(&shape) != data.len() {
            return Err(Error::shape(
                "Tensor::new",
                format!("shape {:?} implies {} values, got {}", shape, numel(&shape), data.len()),
            ));
        }
        Ok(Tensor { shape, data: Arc::new(data) })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor { shape: shape.to_vec(), data: Arc::new(vec![0.0; numel(shape)]) }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Tensor { shape: shape.to_vec(), data: Arc::new(vec![value; numel(shape)]) }
    }

    pub fn ones(shape: &[usize]) -> Self {
        Tensor::full(shape, 1.0)
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { shape: vec![1], data: Arc::new(vec![value]) }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n = numel(shape);
        let data: Vec<f64> = (0..n).map(|i| f(i)).collect();
        Tensor { shape: shape.to_vec(), data: Arc::new(data) }
    }

    /// 2D constructor from nested rows; rows must have equal lengths.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(Error::shape("Tensor::from_rows", "ragged rows"));
            }
            data.extend_from_slice(row);
        }
        Tensor::new(vec![r, c], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
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

    /// Number of rows of a matrix (or length of a vector).
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Number of columns of a matrix.
    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    pub fn at2(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.shape[1] + c]
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn row_slice(&self, r: usize) -> &[f64] {
        let c = self.shape[self.rank() - 1];
        &self.data[r * c..(r + 1) * c]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn assert_finite(&self, context: &str) -> Result<()> {
        if self.all_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite { context: context.to_string() })
        }
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Tensor> {
        if numel(&shape) != self.len() {
            return Err(Error::shape(
                "reshape",
                format!("cannot view {:?} as {:?}", self.shape, shape),
            ));
        }
        Ok(Tensor { shape, data: Arc::clone(&self.data) })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|&v| f(v)).collect()),
        }
    }

    fn zip(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::shape(op, format!("{:?} vs {:?}", self.shape, other.shape)));
        }
        let data: Vec<f64> =
            self.data.iter().zip(other.data.iter()).map(|(&a, &b)| f(a, b)).collect();
        Ok(Tensor { shape: self.shape.clone(), data: Arc::new(data) })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, "mul", |a, b| a * b)
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, "div", |a, b| a / b)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map(|v| v * c)
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        self.map(|v| v + c)
    }

    /// Matrix product a[m,k] @ b[k,n] -> [m,n]. Summation runs over k in
    /// increasing order for every output entry, so results are deterministic.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.rank() != 2 || other.rank() != 2 || self.cols() != other.rows() {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}", self.shape, other.shape),
            ));
        }
        let (m, k, n) = (self.rows(), self.cols(), other.cols());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let arow = &self.data[i * k..(i + 1) * k];
            let orow = &mut out[i * n..(i + 1) * n];
            for (p, &a) in arow.iter().enumerate() {
                let brow = &other.data[p * n..(p + 1) * n];
                for (o, &b) in orow.iter_mut().zip(brow.iter()) {
                    *o += a * b;
                }
            }
        }
        Ok(Tensor { shape: vec![m, n], data: Arc::new(out) })
    }

    /// a[m,k] @ b[n,k]^T -> [m,n] without materializing the transpose.
    pub fn matmul_nt(&self, other: &Tensor) -> Result<Tensor> {
        if self.rank() != 2 || other.rank() != 2 || self.cols() != other.cols() {
            return Err(Error::shape(
                "matmul_nt",
                format!("{:?} x {:?}^T", self.shape, other.shape),
            ));
        }
        let (m, k, n) = (self.rows(), self.cols(), other.rows());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let arow = &self.data[i * k..(i + 1) * k];
            for j in 0..n {
                let brow = &other.data[j * k..(j + 1) * k];
                let mut acc = 0.0;
                for (&a, &b) in arow.iter().zip(brow.iter()) {
                    acc += a * b;
                }
                out[i * n + j] = acc;
            }
        }
        Ok(Tensor { shape: vec![m, n], data: Arc::new(out) })
    }

    /// a[k,m]^T @ b[k,n] -> [m,n] without materializing the transpose.
    pub fn matmul_tn(&self, other: &Tensor) -> Result<Tensor> {
        if self.rank() != 2 || other.rank() != 2 || self.rows() != other.rows() {
            return Err(Error::shape(
                "matmul_tn",
                format!("{:?}^T x {:?}", self.shape, other.shape),
            ));
        }
        let (k, m, n) = (self.rows(), self.cols(), other.cols());
        let mut out = vec![0.0; m * n];
        for p in 0..k {
            let arow = &self.data[p * m..(p + 1) * m];
            let brow = &other.data[p * n..(p + 1) * n];
            for (i, &a) in arow.iter().enumerate() {
                let orow = &mut out[i * n..(i + 1) * n];
                for (o, &b) in orow.iter_mut().zip(brow.iter()) {
                    *o += a * b;
                }
            }
        }
        Ok(Tensor { shape: vec![m, n], data: Arc::new(out) })
    }

    pub fn transpose(&self) -> Result<Tensor> {
        if self.rank() != 2 {
            return Err(Error::shape("transpose", format!("rank {} tensor", self.rank())));
        }
        let (m, n) = (self.rows(), self.cols());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(Tensor { shape: vec![n, m], data: Arc::new(out) })
    }

    /// Broadcast-add a length-n vector to every row of an [m,n] matrix.
    pub fn add_row_vec(&self, v: &Tensor) -> Result<Tensor> {
        if self.rank() != 2 || v.len() != self.cols() {
            return Err(Error::shape(
                "add_row_vec",
                format!("{:?} + row {:?}", self.shape, v.shape),
            ));
        }
        let n = self.cols();
        let data: Vec<f64> =
            self.data.iter().enumerate().map(|(i, &x)| x + v.data[i % n]).collect();
        Ok(Tensor { shape: self.shape.clone(), data: Arc::new(data) })
    }

    /// Broadcast-add a length-m vector down the columns of an [m,n] matrix.
    pub fn add_col_vec(&self, v: &Tensor) -> Result<Tensor> {
        if self.rank() != 2 || v.len() != self.rows() {
            return Err(Error::shape(
                "add_col_vec",
                format!("{:?} + col {:?}", self.shape, v.shape),
            ));
        }
        let n = self.cols();
        let data: Vec<f64> =
            self.data.iter().enumerate().map(|(i, &x)| x + v.data[i / n]).collect();
        Ok(Tensor { shape: self.shape.clone(), data: Arc::new(data) })
    }

    pub fn mul_row_vec(&self, v: &Tensor) -> Result<Tensor> {
        if self.rank() != 2 || v.len() != self.cols() {
            return Err(Error::shape(
                "mul_row_vec",
                format!("{:?} * row {:?}", self.shape, v.shape),
            ));
        }
        let n = self.cols();
        let data: Vec<f64> =
            self.data.iter().enumerate().map(|(i, &x)| x * v.data[i % n]).collect();
        Ok(Tensor { shape: self.shape.clone(), data: Arc::new(data) })
    }

    pub fn mul_col_vec(&self, v: &Tensor) -> Result<Tensor> {
        if self.rank() != 2 || v.len() != self.rows() {
            return Err(Error::shape(
                "mul_col_vec",
                format!("{:?} * col {:?}", self.shape, v.shape),
            ));
        }
        let n = self.cols();
        let data: Vec<f64> =
            self.data.iter().enumerate().map(|(i, &x)| x * v.data[i / n]).collect();
        Ok(Tensor { shape: self.shape.clone(), data: Arc::new(data) })
    }

    /// Stack `m` copies of a length-n vector into an [m,n] matrix.
    pub fn repeat_row(&self, m: usize) -> Result<Tensor> {
        if self.rank() != 1 {
            return Err(Error::shape("repeat_row", format!("want vector, got {:?}", self.shape)));
        }
        let n = self.len();
        let mut data = Vec::with_capacity(m * n);
        for _ in 0..m {
            data.extend_from_slice(&self.data);
        }
        Ok(Tensor { shape: vec![m, n], data: Arc::new(data) })
    }

    /// Extract row r of a matrix as a vector.
    pub fn row(&self, r: usize) -> Result<Tensor> {
        if self.rank() != 2 || r >= self.rows() {
            return Err(Error::shape("row", format!("row {r} of {:?}", self.shape)));
        }
        Ok(Tensor {
            shape: vec![self.cols()],
            data: Arc::new(self.row_slice(r).to_vec()),
        })
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.len() as f64
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, &v| m.max(v.abs()))
    }

    /// Sum a matrix along `axis` (0: down columns -> [n]; 1: across rows -> [m]).
    pub fn sum_axis(&self, axis: usize) -> Result<Tensor> {
        if self.rank() != 2 || axis > 1 {
            return Err(Error::shape("sum_axis", format!("axis {axis} of {:?}", self.shape)));
        }
        let (m, n) = (self.rows(), self.cols());
        if axis == 0 {
            let mut out = vec![0.0; n];
            for i in 0..m {
                for (o, &x) in out.iter_mut().zip(self.row_slice(i).iter()) {
                    *o += x;
                }
            }
            Ok(Tensor { shape: vec![n], data: Arc::new(out) })
        } else {
            let out: Vec<f64> = (0..m).map(|i| self.row_slice(i).iter().sum()).collect();
            Ok(Tensor { shape: vec![m], data: Arc::new(out) })
        }
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::shape("dot", format!("{:?} vs {:?}", self.shape, other.shape)));
        }
        Ok(self.data.iter().zip(other.data.iter()).map(|(&a, &b)| a * b).sum())
    }

    pub fn norm_l2(&self) -> f64 {
        self.data.iter().map(|&v| v * v).sum::<f64>().sqrt()
    }

    /// Numerically stabilized softmax along `axis` (max subtraction per line).
    /// Entries along the axis are positive and sum to 1.
    pub fn softmax_axis(&self, axis: usize) -> Result<Tensor> {
        if axis >= self.rank() {
            return Err(Error::shape(
                "softmax_axis",
                format!("axis {axis} of rank-{} tensor", self.rank()),
            ));
        }
        let extent = self.shape[axis];
        let inner: usize = self.shape[axis + 1..].iter().product();
        let outer: usize = self.shape[..axis].iter().product();
        let mut out = self.data.as_ref().clone();
        for k in 0..outer {
            for j in 0..inner {
                let base = k * extent * inner + j;
                let mut mx = f64::NEG_INFINITY;
                for e in 0..extent {
                    mx = mx.max(out[base + e * inner]);
                }
                let mut z = 0.0;
                for e in 0..extent {
                    let idx = base + e * inner;
                    let v = (out[idx] - mx).exp();
                    out[idx] = v;
                    z += v;
                }
                for e in 0..extent {
                    out[base + e * inner] /= z;
                }
            }
        }
        Ok(Tensor { shape: self.shape.clone(), data: Arc::new(out) })
    }
}

/// Cosine similarity with the crate-wide denominator guard. The flag reports
/// the degenerate both-zero case, for which the value is defined as 0.
pub fn cosine_similarity_checked(a: &Tensor, b: &Tensor) -> Result<(f64, bool)> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            "cosine_similarity",
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    let (na, nb) = (a.norm_l2(), b.norm_l2());
    if na == 0.0 && nb == 0.0 {
        return Ok((0.0, true));
    }
    let d = a.dot(b)?;
    Ok(((d / (na * nb + EPS_NUM)).clamp(-1.0, 1.0), false))
}

pub fn cosine_similarity(a: &Tensor, b: &Tensor) -> Result<f64> {
    cosine_similarity_checked(a, b).map(|(v, _)| v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngState;
    use proptest::prelude::*;

    /// Independent scalar triple-loop product used as the matmul oracle.
    fn matmul_oracle(a: &Tensor, b: &Tensor) -> Tensor {
        let (m, k, n) = (a.rows(), a.cols(), b.cols());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for p in 0..k {
                    acc += a.at2(i, p) * b.at2(p, j);
                }
                out[i * n + j] = acc;
            }
        }
        Tensor::new(vec![m, n], out).unwrap()
    }

    fn random_tensor(shape: &[usize], rng: &mut RngState) -> Tensor {
        Tensor::from_fn(shape, |_| rng.uniform_in(-1.0, 1.0))
    }

    #[test]
    fn matmul_identity() {
        let eye = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]).unwrap();
        let c = eye.matmul(&b).unwrap();
        assert_eq!(c, b);
    }

    #[test]
    fn matmul_hand_case() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![1.0], vec![1.0]]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let mut rng = RngState::new(11);
        for trial in 0..1000 {
            let m = 1 + rng.below(16);
            let k = 1 + rng.below(16);
            let n = 1 + rng.below(16);
            let a = random_tensor(&[m, k], &mut rng);
            let b = random_tensor(&[k, n], &mut rng);
            let got = a.matmul(&b).unwrap();
            let want = matmul_oracle(&a, &b);
            for (g, w) in got.data().iter().zip(want.data().iter()) {
                assert!((g - w).abs() <= 1e-12, "trial {trial}: {g} vs {w}");
            }
        }
    }

    #[test]
    fn matmul_variants_match_plain() {
        let mut rng = RngState::new(5);
        let a = random_tensor(&[4, 6], &mut rng);
        let b = random_tensor(&[3, 6], &mut rng);
        let via_t = a.matmul(&b.transpose().unwrap()).unwrap();
        let fused = a.matmul_nt(&b).unwrap();
        assert_eq!(via_t, fused);

        let c = random_tensor(&[6, 4], &mut rng);
        let d = random_tensor(&[6, 5], &mut rng);
        let via_t = c.transpose().unwrap().matmul(&d).unwrap();
        let fused = c.matmul_tn(&d).unwrap();
        for (x, y) in via_t.data().iter().zip(fused.data().iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_shape_mismatch_is_error() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        assert!(a.matmul(&b).is_err());
    }

    #[test]
    fn softmax_all_equal_is_uniform() {
        let t = Tensor::full(&[4], 2.5);
        let s = t.softmax_axis(0).unwrap();
        for &v in s.data() {
            assert!((v - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_large_logit_is_stable() {
        let t = Tensor::new(vec![2], vec![1000.0, 0.0]).unwrap();
        let s = t.softmax_axis(0).unwrap();
        assert!(s.all_finite());
        assert!((s.data()[0] - 1.0).abs() < 1e-12);
        assert!(s.data()[1].abs() < 1e-12);
    }

    #[test]
    fn softmax_columns_sum_to_one() {
        let mut rng = RngState::new(2);
        let t = random_tensor(&[3, 5], &mut rng);
        let s = t.softmax_axis(0).unwrap();
        let sums = s.sum_axis(0).unwrap();
        for &v in sums.data() {
            assert!((v - 1.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn cosine_basic_cases() {
        let a = Tensor::new(vec![3], vec![1.0, 2.0, -1.0]).unwrap();
        let sim = cosine_similarity(&a, &a).unwrap();
        assert!((sim - 1.0).abs() < 1e-7);

        let e1 = Tensor::new(vec![2], vec![1.0, 0.0]).unwrap();
        let e2 = Tensor::new(vec![2], vec![0.0, 1.0]).unwrap();
        assert_eq!(cosine_similarity(&e1, &e2).unwrap(), 0.0);

        let neg = a.scale(-1.0);
        let sim = cosine_similarity(&a, &neg).unwrap();
        assert!((sim + 1.0).abs() < 1e-7);
    }

    #[test]
    fn cosine_both_zero_flags_degenerate() {
        let z = Tensor::zeros(&[4]);
        let (v, degenerate) = cosine_similarity_checked(&z, &z).unwrap();
        assert_eq!(v, 0.0);
        assert!(degenerate);
    }

    #[test]
    fn broadcast_ops() {
        let m = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let v = Tensor::new(vec![2], vec![10.0, 20.0]).unwrap();
        assert_eq!(m.add_row_vec(&v).unwrap().data(), &[11.0, 22.0, 13.0, 24.0]);
        assert_eq!(m.add_col_vec(&v).unwrap().data(), &[11.0, 12.0, 23.0, 24.0]);
        assert_eq!(m.mul_row_vec(&v).unwrap().data(), &[10.0, 40.0, 30.0, 80.0]);
        assert_eq!(m.mul_col_vec(&v).unwrap().data(), &[10.0, 20.0, 60.0, 80.0]);
    }

    proptest! {
        #[test]
        fn softmax_axis_sums_to_one_prop(
            rows in 1usize..6, cols in 1usize..6, seed in 0u64..1000, axis in 0usize..2
        ) {
            let mut rng = RngState::new(seed);
            let t = Tensor::from_fn(&[rows, cols], |_| rng.uniform_in(-30.0, 30.0));
            let s = t.softmax_axis(axis).unwrap();
            let sums = s.sum_axis(axis).unwrap();
            for &v in sums.data() {
                prop_assert!((v - 1.0).abs() <= 1e-9);
            }
        }

        #[test]
        fn transpose_involution(rows in 1usize..8, cols in 1usize..8, seed in 0u64..1000) {
            let mut rng = RngState::new(seed);
            let t = Tensor::from_fn(&[rows, cols], |_| rng.uniform_in(-1.0, 1.0));
            let back = t.transpose().unwrap().transpose().unwrap();
            prop_assert_eq!(t, back);
        }
    }
}
