//! Dense three-way arrays and the CP algebra used by the factor updates.
//!
//! Storage is row-major over `(i, j, h)`. Mode-1 matricization flattens the
//! trailing pair `(j, h)` j-major, i.e. column `j * n3 + h`, and
//! [`factor_column_outer`] uses the same order, so that
//!
//! ```text
//! matricize_mode1(cp_compose(F1, F2, F3)) == F1 * factor_column_outer(F2, F3)^T
//! ```

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense `n1 x n2 x n3` array.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Array3 {
    dims: [usize; 3],
    data: Vec<f64>,
}

impl Array3 {
    pub fn zeros(n1: usize, n2: usize, n3: usize) -> Self {
        Self { dims: [n1, n2, n3], data: vec![0.0; n1 * n2 * n3] }
    }

    pub fn from_vec(dims: [usize; 3], data: Vec<f64>) -> Result<Self> {
        if data.len() != dims[0] * dims[1] * dims[2] {
            return Err(Error::Dimension(format!(
                "{} values for a {}x{}x{} array",
                data.len(),
                dims[0],
                dims[1],
                dims[2]
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn from_fn(dims: [usize; 3], mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(dims[0] * dims[1] * dims[2]);
        for i in 0..dims[0] {
            for j in 0..dims[1] {
                for h in 0..dims[2] {
                    data.push(f(i, j, h));
                }
            }
        }
        Self { dims, data }
    }

    #[inline]
    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    #[inline]
    fn offset(&self, i: usize, j: usize, h: usize) -> usize {
        debug_assert!(i < self.dims[0] && j < self.dims[1] && h < self.dims[2]);
        (i * self.dims[1] + j) * self.dims[2] + h
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, h: usize) -> f64 {
        self.data[self.offset(i, j, h)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, h: usize, v: f64) {
        let o = self.offset(i, j, h);
        self.data[o] = v;
    }

    /// The contiguous fibre `A[i, j, :]`.
    #[inline]
    pub fn fiber(&self, i: usize, j: usize) -> &[f64] {
        let start = self.offset(i, j, 0);
        &self.data[start..start + self.dims[2]]
    }

    #[inline]
    pub fn fiber_mut(&mut self, i: usize, j: usize) -> &mut [f64] {
        let start = (i * self.dims[1] + j) * self.dims[2];
        let n3 = self.dims[2];
        &mut self.data[start..start + n3]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn scale(&mut self, c: f64) {
        self.data.iter_mut().for_each(|v| *v *= c);
    }

    pub fn max_abs_diff(&self, other: &Array3) -> f64 {
        assert_eq!(self.dims, other.dims);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Factor matrices of a rank-`R` CP decomposition.
#[derive(Debug, Clone, PartialEq)]
pub struct CpFactors {
    pub f1: DMatrix<f64>,
    pub f2: DMatrix<f64>,
    pub f3: DMatrix<f64>,
}

impl CpFactors {
    pub fn new(f1: DMatrix<f64>, f2: DMatrix<f64>, f3: DMatrix<f64>) -> Result<Self> {
        let r = f1.ncols();
        if f2.ncols() != r || f3.ncols() != r {
            return Err(Error::Dimension(format!(
                "CP factor ranks disagree: {}, {}, {}",
                r,
                f2.ncols(),
                f3.ncols()
            )));
        }
        if r == 0 {
            return Err(Error::Dimension("CP rank must be at least 1".into()));
        }
        Ok(Self { f1, f2, f3 })
    }

    pub fn rank(&self) -> usize {
        self.f1.ncols()
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.f1.nrows(), self.f2.nrows(), self.f3.nrows()]
    }

    pub fn is_finite(&self) -> bool {
        self.f1.iter().chain(self.f2.iter()).chain(self.f3.iter()).all(|v| v.is_finite())
    }

    pub fn compose(&self) -> Array3 {
        cp_compose(self)
    }
}

/// `out[d,j,h] = sum_r F1[d,r] F2[j,r] F3[h,r]`.
pub fn cp_compose(f: &CpFactors) -> Array3 {
    let [n1, n2, n3] = f.dims();
    let rank = f.rank();
    let mut out = Array3::zeros(n1, n2, n3);
    for i in 0..n1 {
        for j in 0..n2 {
            let fiber = out.fiber_mut(i, j);
            for r in 0..rank {
                let a = f.f1[(i, r)] * f.f2[(j, r)];
                if a == 0.0 {
                    continue;
                }
                for (h, v) in fiber.iter_mut().enumerate() {
                    *v += a * f.f3[(h, r)];
                }
            }
        }
    }
    out
}

/// Mode-1 contraction `out[i,j,h] = sum_d X[i,d] B[d,j,h]`.
pub fn contract_mode1(x: &DMatrix<f64>, b: &Array3) -> Result<Array3> {
    let [d, n2, n3] = b.dims();
    if x.ncols() != d {
        return Err(Error::Dimension(format!(
            "contraction over {} columns against an array with leading dimension {d}",
            x.ncols()
        )));
    }
    let n1 = x.nrows();
    let mut out = Array3::zeros(n1, n2, n3);
    let width = n2 * n3;
    for i in 0..n1 {
        let row = &mut out.data[i * width..(i + 1) * width];
        for k in 0..d {
            let xv = x[(i, k)];
            if xv == 0.0 {
                continue;
            }
            let slab = &b.data[k * width..(k + 1) * width];
            for (o, s) in row.iter_mut().zip(slab) {
                *o += xv * s;
            }
        }
    }
    Ok(out)
}

/// Mode-1 unfolding: row `i` is `vec(A[i,:,:])`, column `j * n3 + h`.
pub fn matricize_mode1(a: &Array3) -> DMatrix<f64> {
    let [n1, n2, n3] = a.dims();
    let width = n2 * n3;
    DMatrix::from_fn(n1, width, |i, c| a.data[i * width + c])
}

/// Inverse of [`matricize_mode1`].
pub fn unmatricize_mode1(m: &DMatrix<f64>, n2: usize, n3: usize) -> Result<Array3> {
    if m.ncols() != n2 * n3 {
        return Err(Error::Dimension(format!(
            "{} columns cannot fold into {n2}x{n3}",
            m.ncols()
        )));
    }
    Ok(Array3::from_fn([m.nrows(), n2, n3], |i, j, h| m[(i, j * n3 + h)]))
}

/// Column `r` is `vec(F2[:,r] ⊗ F3[:,r])` in the matricization order.
pub fn factor_column_outer(f2: &DMatrix<f64>, f3: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if f2.ncols() != f3.ncols() {
        return Err(Error::Dimension(format!(
            "factor ranks disagree: {} vs {}",
            f2.ncols(),
            f3.ncols()
        )));
    }
    let (n2, n3) = (f2.nrows(), f3.nrows());
    Ok(DMatrix::from_fn(n2 * n3, f2.ncols(), |row, r| {
        f2[(row / n3, r)] * f3[(row % n3, r)]
    }))
}
