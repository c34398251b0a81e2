//! Small dense matrices of dimension 1 or 2.

use serde::{Deserialize, Serialize};
use std::ops::{Add, Mul, Sub};

/// An `N×N` real matrix with `N ∈ {1, 2}`.
///
/// Entries outside the active `dim×dim` block are kept at zero.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub dim: usize,
    pub m: [[f64; 2]; 2],
}

impl Tensor {
    pub fn zeros(dim: usize) -> Self {
        debug_assert!(dim == 1 || dim == 2);
        Tensor { dim, m: [[0.0; 2]; 2] }
    }

    pub fn identity(dim: usize) -> Self {
        Self::scalar(dim, 1.0)
    }

    pub fn scalar(dim: usize, value: f64) -> Self {
        let mut t = Self::zeros(dim);
        for i in 0..dim {
            t.m[i][i] = value;
        }
        t
    }

    pub fn from_1d(a: f64) -> Self {
        Tensor {
            dim: 1,
            m: [[a, 0.0], [0.0, 0.0]],
        }
    }

    pub fn from_2d(a11: f64, a12: f64, a21: f64, a22: f64) -> Self {
        Tensor {
            dim: 2,
            m: [[a11, a12], [a21, a22]],
        }
    }

    pub fn symmetric_2d(a11: f64, a12: f64, a22: f64) -> Self {
        Self::from_2d(a11, a12, a12, a22)
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.m[i][j]
    }

    #[inline]
    pub fn apply(&self, v: [f64; 2]) -> [f64; 2] {
        if self.dim == 1 {
            [self.m[0][0] * v[0], 0.0]
        } else {
            [
                self.m[0][0] * v[0] + self.m[0][1] * v[1],
                self.m[1][0] * v[0] + self.m[1][1] * v[1],
            ]
        }
    }

    /// `ξ · A ξ`
    pub fn quad(&self, xi: [f64; 2]) -> f64 {
        let ax = self.apply(xi);
        dot(self.dim, ax, xi)
    }

    pub fn transpose(&self) -> Self {
        let mut t = *self;
        t.m[0][1] = self.m[1][0];
        t.m[1][0] = self.m[0][1];
        t
    }

    /// Largest absolute entry.
    pub fn max_abs(&self) -> f64 {
        let mut r: f64 = 0.0;
        for i in 0..self.dim {
            for j in 0..self.dim {
                r = r.max(self.m[i][j].abs());
            }
        }
        r
    }

    /// `‖A − Aᵀ‖_∞` entrywise.
    pub fn asymmetry(&self) -> f64 {
        (*self - self.transpose()).max_abs()
    }

    pub fn sym_part(&self) -> Self {
        (*self + self.transpose()) * 0.5
    }

    pub fn skew_part(&self) -> Self {
        (*self - self.transpose()) * 0.5
    }

    /// Extreme eigenvalues `(min, max)` of the symmetric part.
    pub fn sym_eig_range(&self) -> (f64, f64) {
        if self.dim == 1 {
            return (self.m[0][0], self.m[0][0]);
        }
        let s = self.sym_part();
        let tr = s.m[0][0] + s.m[1][1];
        let det = s.m[0][0] * s.m[1][1] - s.m[0][1] * s.m[1][0];
        let disc = (0.25 * tr * tr - det).max(0.0).sqrt();
        (0.5 * tr - disc, 0.5 * tr + disc)
    }

    pub fn column(&self, k: usize) -> [f64; 2] {
        [self.m[0][k], self.m[1][k]]
    }

    pub fn set_column(&mut self, k: usize, col: [f64; 2]) {
        for i in 0..self.dim {
            self.m[i][k] = col[i];
        }
    }

    pub fn is_finite(&self) -> bool {
        self.m.iter().flatten().all(|x| x.is_finite())
    }
}

impl Add for Tensor {
    type Output = Tensor;
    fn add(mut self, rhs: Tensor) -> Tensor {
        for i in 0..2 {
            for j in 0..2 {
                self.m[i][j] += rhs.m[i][j];
            }
        }
        self
    }
}

impl Sub for Tensor {
    type Output = Tensor;
    fn sub(mut self, rhs: Tensor) -> Tensor {
        for i in 0..2 {
            for j in 0..2 {
                self.m[i][j] -= rhs.m[i][j];
            }
        }
        self
    }
}

impl Mul<f64> for Tensor {
    type Output = Tensor;
    fn mul(mut self, rhs: f64) -> Tensor {
        for row in self.m.iter_mut() {
            for x in row.iter_mut() {
                *x *= rhs;
            }
        }
        self
    }
}

#[inline]
pub fn dot(dim: usize, a: [f64; 2], b: [f64; 2]) -> f64 {
    if dim == 1 {
        a[0] * b[0]
    } else {
        a[0] * b[0] + a[1] * b[1]
    }
}

#[inline]
pub fn unit(dim: usize, k: usize) -> [f64; 2] {
    debug_assert!(k < dim);
    let mut e = [0.0; 2];
    e[k] = 1.0;
    e
}
