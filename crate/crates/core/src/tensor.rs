//! Dense row-major tensors and the arithmetic kernels shared by every module.
//!
//! Values are immutable after construction; every operation returns a fresh
//! tensor. Construction rejects NaN/Inf; kernel outputs are re-checked under
//! `debug_assertions`.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T: Scalar = f64> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::Shape(format!(
                "dimensions must be positive, got {shape:?}"
            )));
        }
        let count: usize = shape.iter().product();
        if count != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} implies {count} elements, got {}",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("tensor entry {v}")));
        }
        Ok(Self { shape, data })
    }

    /// Kernel-internal constructor: skips the finite scan in release builds.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        debug_assert!(
            data.iter().all(|v| v.is_finite()),
            "kernel produced a non-finite entry"
        );
        Self { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let count: usize = shape.iter().product();
        assert!(
            !shape.is_empty() && shape.iter().all(|&d| d > 0),
            "dimensions must be positive"
        );
        Self {
            shape,
            data: vec![T::zero(); count],
        }
    }

    pub fn filled(shape: Vec<usize>, v: T) -> Result<Self> {
        let count: usize = shape.iter().product();
        Self::new(shape, vec![v; count])
    }

    pub fn scalar(v: T) -> Self {
        Self::from_parts(vec![1], vec![v])
    }

    pub fn from_rows(rows: Vec<Vec<T>>) -> Result<Self> {
        let m = rows.len();
        let n = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Self::new(vec![m, n], rows.into_iter().flatten().collect())
    }

    pub fn identity(n: usize) -> Self {
        let mut data = vec![T::zero(); n * n];
        for i in 0..n {
            data[i * n + i] = T::one();
        }
        Self::from_parts(vec![n, n], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// (rows, cols) of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [m, n] => Ok((*m, *n)),
            other => Err(Error::Shape(format!("expected a matrix, got {other:?}"))),
        }
    }

    pub fn at(&self, flat: usize) -> T {
        self.data[flat]
    }

    pub fn get2(&self, i: usize, j: usize) -> T {
        let (_, n) = (self.shape[0], self.shape[1]);
        self.data[i * n + j]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self::from_parts(
            self.shape.clone(),
            self.data.iter().map(|&v| f(v)).collect(),
        )
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!(
                "elementwise op on {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Self::from_parts(self.shape.clone(), data))
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, c: T) -> Self {
        self.map(|v| v * c)
    }

    /// Flat dot product over all entries.
    pub fn dot(&self, other: &Self) -> Result<T> {
        if self.shape != other.shape {
            return Err(Error::Shape("dot of different shapes".into()));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |acc, (&a, &b)| acc + a * b))
    }

    pub fn frob_norm(&self) -> T {
        self.data
            .iter()
            .fold(T::zero(), |acc, &v| acc + v * v)
            .sqrt()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc.max(v.abs()))
    }

    pub fn sum(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc + v)
    }

    /// Matrix product of two rank-2 tensors.
    pub fn matmul(&self, rhs: &Self) -> Result<Self> {
        let (m, k) = self.dims2()?;
        let (k2, n) = rhs.dims2()?;
        if k != k2 {
            return Err(Error::Shape(format!("matmul inner dimensions {k} vs {k2}")));
        }
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let arow = &self.data[i * k..(i + 1) * k];
            let orow = &mut out[i * n..(i + 1) * n];
            for (t, &a_it) in arow.iter().enumerate() {
                let brow = &rhs.data[t * n..(t + 1) * n];
                for j in 0..n {
                    orow[j] = orow[j] + a_it * brow[j];
                }
            }
        }
        Ok(Self::from_parts(vec![m, n], out))
    }

    pub fn transposed(&self) -> Result<Self> {
        let (m, n) = self.dims2()?;
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(Self::from_parts(vec![n, m], out))
    }

    /// Adds a length-`n` bias to every row of a `m×n` matrix.
    pub fn add_row(&self, bias: &Self) -> Result<Self> {
        let (m, n) = self.dims2()?;
        if bias.shape != [n] {
            return Err(Error::Shape(format!(
                "bias {:?} against row width {n}",
                bias.shape
            )));
        }
        let mut out = self.data.clone();
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] = out[i * n + j] + bias.data[j];
            }
        }
        Ok(Self::from_parts(self.shape.clone(), out))
    }

    /// Row-wise softmax over the last dimension, max-subtracted for stability.
    pub fn softmax(&self) -> Self {
        let width = *self.shape.last().expect("non-empty shape");
        let mut out = Vec::with_capacity(self.data.len());
        for row in self.data.chunks(width) {
            let m = row.iter().fold(T::neg_infinity(), |acc, &v| acc.max(v));
            let exps: Vec<T> = row.iter().map(|&v| (v - m).exp()).collect();
            let total = exps.iter().fold(T::zero(), |acc, &v| acc + v);
            out.extend(exps.into_iter().map(|v| v / total));
        }
        Self::from_parts(self.shape.clone(), out)
    }

    /// Row-wise log-softmax over the last dimension.
    pub fn log_softmax(&self) -> Self {
        let width = *self.shape.last().expect("non-empty shape");
        let mut out = Vec::with_capacity(self.data.len());
        for row in self.data.chunks(width) {
            let m = row.iter().fold(T::neg_infinity(), |acc, &v| acc.max(v));
            let total = row.iter().fold(T::zero(), |acc, &v| acc + (v - m).exp());
            let log_z = m + total.ln();
            out.extend(row.iter().map(|&v| v - log_z));
        }
        Self::from_parts(self.shape.clone(), out)
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Self> {
        let count: usize = shape.iter().product();
        if count != self.data.len() || shape.contains(&0) {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        Ok(Self::from_parts(shape, self.data.clone()))
    }

    /// Copies the given rows of a matrix, in index order.
    pub fn select_rows(&self, idx: &[usize]) -> Result<Self> {
        let (m, n) = self.dims2()?;
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            if i >= m {
                return Err(Error::Shape(format!("row {i} out of {m}")));
            }
            out.extend_from_slice(&self.data[i * n..(i + 1) * n]);
        }
        Ok(Self::from_parts(vec![idx.len(), n], out))
    }

    pub fn row(&self, i: usize) -> Result<Self> {
        self.select_rows(&[i])
    }

    /// Stacks matrices with equal column counts on top of each other.
    pub fn vconcat(parts: &[&Self]) -> Result<Self> {
        let (_, n) = parts
            .first()
            .ok_or_else(|| Error::Shape("vconcat of nothing".into()))?
            .dims2()?;
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            let (pm, pn) = p.dims2()?;
            if pn != n {
                return Err(Error::Shape("vconcat column mismatch".into()));
            }
            rows += pm;
            data.extend_from_slice(&p.data);
        }
        Ok(Self::from_parts(vec![rows, n], data))
    }

    /// Places matrices with equal row counts side by side.
    pub fn hconcat(parts: &[&Self]) -> Result<Self> {
        let (m, _) = parts
            .first()
            .ok_or_else(|| Error::Shape("hconcat of nothing".into()))?
            .dims2()?;
        let mut widths = Vec::with_capacity(parts.len());
        let mut total = 0;
        for p in parts {
            let (pm, pn) = p.dims2()?;
            if pm != m {
                return Err(Error::Shape("hconcat row mismatch".into()));
            }
            widths.push(pn);
            total += pn;
        }
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for (p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&p.data[i * w..(i + 1) * w]);
            }
        }
        Ok(Self::from_parts(vec![m, total], data))
    }

    /// Columns `[lo, hi)` of a matrix.
    pub fn col_block(&self, lo: usize, hi: usize) -> Result<Self> {
        let (m, n) = self.dims2()?;
        if lo >= hi || hi > n {
            return Err(Error::Shape(format!("column block {lo}..{hi} of {n}")));
        }
        let w = hi - lo;
        let mut data = Vec::with_capacity(m * w);
        for i in 0..m {
            data.extend_from_slice(&self.data[i * n + lo..i * n + hi]);
        }
        Ok(Self::from_parts(vec![m, w], data))
    }
}

/// Sums addends in a canonical order (ascending by value) so the result is
/// independent of the caller's ordering. Used wherever per-coordinate sums
/// over task vectors must be exactly permutation-invariant.
pub fn stable_sum<T: Scalar>(values: &mut [T]) -> T {
    values.sort_unstable_by(|a, b| a.partial_cmp(b).expect("finite"));
    values.iter().fold(T::zero(), |acc, &v| acc + v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Prng;

    fn assert_close(a: f64, b: f64, tol: f64, msg: &str) {
        assert!((a - b).abs() <= tol, "{msg}: {a} vs {b}");
    }

    #[test]
    fn construction_validates() {
        assert!(Tensor::<f64>::new(vec![2, 2], vec![1.0; 4]).is_ok());
        assert!(matches!(
            Tensor::<f64>::new(vec![2, 2], vec![1.0; 3]),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            Tensor::<f64>::new(vec![2, 0], vec![]),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            Tensor::<f64>::new(vec![2], vec![1.0, f64::NAN]),
            Err(Error::NonFinite(_))
        ));
        assert!(matches!(
            Tensor::<f64>::new(vec![1], vec![f64::INFINITY]),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn matmul_identity() {
        let i2 = Tensor::<f64>::identity(2);
        let a = Tensor::from_rows(vec![vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(i2.matmul(&a).unwrap(), a);
    }

    #[test]
    fn matmul_hand_case() {
        let a = Tensor::from_rows(vec![vec![1.0, 2.0]]).unwrap();
        let b = Tensor::from_rows(vec![vec![3.0], vec![4.0]]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.shape(), &[1, 1]);
        assert_eq!(c.at(0), 11.0);
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let mut rng = Prng::seed(42);
        let a: Tensor = rng.gaussian(&[5, 7]);
        let b: Tensor = rng.gaussian(&[7, 3]);
        let c = a.matmul(&b).unwrap();
        // Independent naive oracle.
        for i in 0..5 {
            for j in 0..3 {
                let mut acc = 0.0;
                for t in 0..7 {
                    acc += a.get2(i, t) * b.get2(t, j);
                }
                assert_close(c.get2(i, j), acc, 1e-12, "oracle");
            }
        }
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = Tensor::<f64>::zeros(vec![2, 3]);
        let b = Tensor::<f64>::zeros(vec![4, 2]);
        assert!(matches!(a.matmul(&b), Err(Error::Shape(_))));
    }

    #[test]
    fn matmul_associativity_on_random_triples() {
        let mut rng = Prng::seed(7);
        for _ in 0..20 {
            let a: Tensor = rng.gaussian(&[6, 4]);
            let b: Tensor = rng.gaussian(&[4, 5]);
            let c: Tensor = rng.gaussian(&[5, 3]);
            let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
            let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
            let scale = a.frob_norm() * b.frob_norm() * c.frob_norm();
            let diff = left.sub(&right).unwrap().max_abs();
            assert!(diff <= 1e-9 * scale, "assoc diff {diff} scale {scale}");
        }
    }

    #[test]
    fn softmax_symmetry_and_shift() {
        let t = Tensor::new(vec![2], vec![0.0, 0.0]).unwrap();
        let s = t.softmax();
        assert_eq!(s.data(), &[0.5, 0.5]);

        let big = Tensor::new(vec![2], vec![1000.0, 1000.0]).unwrap();
        let s = big.softmax();
        assert_eq!(s.data(), &[0.5, 0.5]);

        let t = Tensor::new(vec![2], vec![0.0, 3.0f64.ln()]).unwrap();
        let s = t.softmax();
        assert_close(s.at(0), 0.25, 1e-15, "ln1/ln3");
        assert_close(s.at(1), 0.75, 1e-15, "ln1/ln3");
    }

    #[test]
    fn softmax_rows_sum_to_one_and_shift_invariant() {
        let mut rng = Prng::seed(11);
        for _ in 0..50 {
            let t: Tensor = rng.gaussian(&[3, 6]);
            let s = t.softmax();
            for row in s.data().chunks(6) {
                let total: f64 = row.iter().sum();
                assert_close(total, 1.0, 1e-12, "row sum");
            }
            let c = rng.gaussian::<f64>(&[1, 1]).at(0) * 50.0;
            let shifted = t.map(|v| v + c).softmax();
            let diff = shifted.sub(&s).unwrap().max_abs();
            assert!(diff <= 1e-12, "shift invariance {diff}");
        }
    }

    #[test]
    fn stable_sum_is_order_independent() {
        let vals = [0.1f64, -7.3, 1e-9, 2.5, 0.1, 3.3e7];
        let mut a = vals.to_vec();
        let mut b = vals.to_vec();
        b.reverse();
        b.swap(1, 3);
        assert_eq!(stable_sum(&mut a).to_bits(), stable_sum(&mut b).to_bits());
    }

    #[test]
    fn concat_and_blocks() {
        let a = Tensor::from_rows(vec![vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Tensor::from_rows(vec![vec![5.0], vec![6.0]]).unwrap();
        let h = Tensor::hconcat(&[&a, &b]).unwrap();
        assert_eq!(h.shape(), &[2, 3]);
        assert_eq!(h.get2(0, 2), 5.0);
        let back = h.col_block(0, 2).unwrap();
        assert_eq!(back, a);
        let v = Tensor::vconcat(&[&a, &a]).unwrap();
        assert_eq!(v.shape(), &[4, 2]);
    }

    #[test]
    fn f32_kernels_work() {
        let a = Tensor::<f32>::from_rows(vec![vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let c = a.matmul(&Tensor::<f32>::identity(2)).unwrap();
        assert_eq!(c, a);
        let s = Tensor::<f32>::new(vec![2], vec![0.0, 0.0])
            .unwrap()
            .softmax();
        assert_eq!(s.data(), &[0.5f32, 0.5]);
    }
}
