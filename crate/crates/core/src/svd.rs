//! One-sided Jacobi singular value decomposition for small dense matrices.
//!
//! Column pairs of a working copy are orthogonalized with Givens rotations
//! accumulated into V; converged column norms are the singular values and the
//! normalized columns form U. Deterministic, high relative accuracy, and fast
//! enough for the few-hundred-row matrices this crate deals with.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// `A = U · diag(s) · Vᵀ` with `U: m×r`, `s: r` descending non-negative,
/// `V: n×r`, `r = min(m, n)`. Columns of `U`/`V` are orthonormal; the
/// largest-magnitude entry of each `U` column is non-negative.
#[derive(Clone, Debug)]
pub struct SvdResult<T: Scalar = f64> {
    pub u: Tensor<T>,
    pub s: Tensor<T>,
    pub v: Tensor<T>,
}

impl<T: Scalar> SvdResult<T> {
    /// `U · diag(s) · Vᵀ`.
    pub fn reconstruct(&self) -> Result<Tensor<T>> {
        let us = scale_columns(&self.u, self.s.data());
        us.matmul(&self.v.transposed()?)
    }
}

/// Multiplies column `j` by `factors[j]`.
pub fn scale_columns<T: Scalar>(m: &Tensor<T>, factors: &[T]) -> Tensor<T> {
    let (rows, cols) = m.dims2().expect("matrix");
    assert_eq!(cols, factors.len());
    let mut data = m.data().to_vec();
    for i in 0..rows {
        for j in 0..cols {
            data[i * cols + j] = data[i * cols + j] * factors[j];
        }
    }
    Tensor::from_parts(vec![rows, cols], data)
}

const MAX_SWEEPS: usize = 60;

pub fn svd<T: Scalar>(a: &Tensor<T>) -> Result<SvdResult<T>> {
    let (m, n) = a.dims2()?;
    let mut result = if m >= n {
        jacobi_tall(a, m, n)?
    } else {
        // Wide matrices: decompose the transpose and swap the factors.
        let t = jacobi_tall(&a.transposed()?, n, m)?;
        SvdResult {
            u: t.v,
            s: t.s,
            v: t.u,
        }
    };
    fix_column_signs(&mut result);
    Ok(result)
}

/// Column-major scratch matrix.
struct Cols<T> {
    rows: usize,
    cols: Vec<Vec<T>>,
}

impl<T: Scalar> Cols<T> {
    fn from_tensor(t: &Tensor<T>, m: usize, n: usize) -> Self {
        let mut cols = vec![vec![T::zero(); m]; n];
        for i in 0..m {
            for (j, col) in cols.iter_mut().enumerate() {
                col[i] = t.data()[i * n + j];
            }
        }
        Self { rows: m, cols }
    }

    fn identity(n: usize) -> Self {
        let mut cols = vec![vec![T::zero(); n]; n];
        for (j, col) in cols.iter_mut().enumerate() {
            col[j] = T::one();
        }
        Self { rows: n, cols }
    }

    fn dot(&self, p: usize, q: usize) -> T {
        self.cols[p]
            .iter()
            .zip(&self.cols[q])
            .fold(T::zero(), |acc, (&a, &b)| acc + a * b)
    }

    fn rotate(&mut self, p: usize, q: usize, c: T, s: T) {
        for i in 0..self.rows {
            let wp = self.cols[p][i];
            let wq = self.cols[q][i];
            self.cols[p][i] = c * wp - s * wq;
            self.cols[q][i] = s * wp + c * wq;
        }
    }

    fn norm(&self, j: usize) -> T {
        self.cols[j]
            .iter()
            .fold(T::zero(), |acc, &v| acc + v * v)
            .sqrt()
    }
}

fn jacobi_tall<T: Scalar>(a: &Tensor<T>, m: usize, n: usize) -> Result<SvdResult<T>> {
    let mut w = Cols::from_tensor(a, m, n);
    let mut v = Cols::identity(n);

    // Stop once every off-diagonal Gram entry is below 1e-14·‖A‖_F. The
    // relative guard keeps near-null column pairs from being skipped while
    // still badly correlated, which would leave U short of orthonormal.
    let abs_thr = T::of(1e-14) * a.frob_norm();
    let rel_guard = T::of(1e-14);

    let mut converged = n < 2;
    for _sweep in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n.saturating_sub(1) {
            for q in (p + 1)..n {
                let apq = w.dot(p, q);
                let app = w.dot(p, p);
                let aqq = w.dot(q, q);
                let bound = rel_guard * (app.sqrt() * aqq.sqrt());
                if apq.abs() <= abs_thr && apq.abs() <= bound {
                    continue;
                }
                let tau = (aqq - app) / (T::of(2.0) * apq);
                let t = if tau.is_finite() {
                    tau.signum() / (tau.abs() + (T::one() + tau * tau).sqrt())
                } else {
                    T::zero()
                };
                if t == T::zero() {
                    continue;
                }
                let c = T::one() / (T::one() + t * t).sqrt();
                let s = t * c;
                w.rotate(p, q, c, s);
                v.rotate(p, q, c, s);
                rotated = true;
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        let mut residual = 0.0f64;
        for p in 0..n - 1 {
            for q in (p + 1)..n {
                residual = residual.max(w.dot(p, q).abs().f64());
            }
        }
        return Err(Error::SvdNonConvergence {
            residual,
            sweeps: MAX_SWEEPS,
        });
    }

    // Order by singular value, largest first; ties keep the lower index.
    let mut order: Vec<usize> = (0..n).collect();
    let norms: Vec<T> = (0..n).map(|j| w.norm(j)).collect();
    order.sort_by(|&i, &j| {
        norms[j]
            .partial_cmp(&norms[i])
            .expect("finite norms")
            .then(i.cmp(&j))
    });

    let mut s = Vec::with_capacity(n);
    let mut u_cols: Vec<Vec<T>> = Vec::with_capacity(n);
    let mut v_cols: Vec<Vec<T>> = Vec::with_capacity(n);
    for &j in &order {
        s.push(norms[j]);
        v_cols.push(v.cols[j].clone());
        if norms[j] > T::zero() {
            u_cols.push(w.cols[j].iter().map(|&x| x / norms[j]).collect());
        } else {
            u_cols.push(Vec::new()); // completed below
        }
    }

    // Exactly-null columns get an orthonormal completion from canonical
    // basis vectors (largest residual wins, re-orthogonalized twice).
    for j in 0..n {
        if !u_cols[j].is_empty() {
            continue;
        }
        let mut best: Option<(usize, T)> = None;
        for k in 0..m {
            let mut res_sq = T::one();
            for col in u_cols.iter().filter(|c| !c.is_empty()) {
                res_sq = res_sq - col[k] * col[k];
            }
            if best.is_none_or(|(_, b)| res_sq > b) {
                best = Some((k, res_sq));
            }
        }
        let (k, _) = best.expect("m >= 1");
        let mut cand = vec![T::zero(); m];
        cand[k] = T::one();
        for _ in 0..2 {
            for col in u_cols.iter().filter(|c| !c.is_empty()) {
                let proj = col
                    .iter()
                    .zip(&cand)
                    .fold(T::zero(), |acc, (&a, &b)| acc + a * b);
                for (ci, &ui) in cand.iter_mut().zip(col.iter()) {
                    *ci = *ci - proj * ui;
                }
            }
        }
        let nrm = cand.iter().fold(T::zero(), |acc, &x| acc + x * x).sqrt();
        u_cols[j] = cand.into_iter().map(|x| x / nrm).collect();
    }

    Ok(SvdResult {
        u: cols_to_tensor(m, &u_cols),
        s: Tensor::from_parts(vec![n], s),
        v: cols_to_tensor(n, &v_cols),
    })
}

fn cols_to_tensor<T: Scalar>(rows: usize, cols: &[Vec<T>]) -> Tensor<T> {
    let n = cols.len();
    let mut data = vec![T::zero(); rows * n];
    for (j, col) in cols.iter().enumerate() {
        for i in 0..rows {
            data[i * n + j] = col[i];
        }
    }
    Tensor::from_parts(vec![rows, n], data)
}

/// Forces the largest-magnitude entry of each U column non-negative,
/// flipping the matching V column, so decompositions are reproducible.
fn fix_column_signs<T: Scalar>(r: &mut SvdResult<T>) {
    let (m, k) = r.u.dims2().expect("matrix");
    let (n, _) = r.v.dims2().expect("matrix");
    let mut u = r.u.data().to_vec();
    let mut v = r.v.data().to_vec();
    for j in 0..k {
        let mut arg = 0;
        let mut best = T::zero();
        for i in 0..m {
            let a = u[i * k + j].abs();
            if a > best {
                best = a;
                arg = i;
            }
        }
        if u[arg * k + j] < T::zero() {
            for i in 0..m {
                u[i * k + j] = -u[i * k + j];
            }
            for i in 0..n {
                v[i * k + j] = -v[i * k + j];
            }
        }
    }
    r.u = Tensor::from_parts(vec![m, k], u);
    r.v = Tensor::from_parts(vec![n, k], v);
}
