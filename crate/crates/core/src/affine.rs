//! Homogeneous 4x4 voxel-to-world transforms.

use crate::error::{Error, Result};

/// Voxel index (homogeneous) to world millimetres. The last row is always
/// `(0, 0, 0, 1)`; it is not stored.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Affine4x4 {
    rows: [[f64; 4]; 3],
}

impl Default for Affine4x4 {
    fn default() -> Self {
        Self::identity()
    }
}

impl Affine4x4 {
    pub const fn identity() -> Self {
        Self {
            rows: [[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0]],
        }
    }

    /// Builds an affine from its first three rows. Fails if the linear part
    /// is singular or any entry is non-finite.
    pub fn from_rows(rows: [[f64; 4]; 3]) -> Result<Self> {
        if rows.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("affine has non-finite entries".into()));
        }
        let a = Self { rows };
        if a.linear_det().abs() < 1e-12 {
            return Err(Error::InvalidArgument("affine linear part is singular".into()));
        }
        Ok(a)
    }

    pub fn diagonal(scale: [f64; 3], translation: [f64; 3]) -> Self {
        Self {
            rows: [
                [scale[0], 0.0, 0.0, translation[0]],
                [0.0, scale[1], 0.0, translation[1]],
                [0.0, 0.0, scale[2], translation[2]],
            ],
        }
    }

    pub fn rows(&self) -> &[[f64; 4]; 3] {
        &self.rows
    }

    /// Full matrix including the implicit last row.
    pub fn to_matrix(&self) -> [[f64; 4]; 4] {
        [self.rows[0], self.rows[1], self.rows[2], [0.0, 0.0, 0.0, 1.0]]
    }

    pub fn translation(&self) -> [f64; 3] {
        [self.rows[0][3], self.rows[1][3], self.rows[2][3]]
    }

    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let r = &self.rows;
        [
            r[0][0] * p[0] + r[0][1] * p[1] + r[0][2] * p[2] + r[0][3],
            r[1][0] * p[0] + r[1][1] * p[1] + r[1][2] * p[2] + r[1][3],
            r[2][0] * p[0] + r[2][1] * p[1] + r[2][2] * p[2] + r[2][3],
        ]
    }

    /// Applies only the linear part (direction vectors).
    pub fn apply_vector(&self, v: [f64; 3]) -> [f64; 3] {
        let r = &self.rows;
        [
            r[0][0] * v[0] + r[0][1] * v[1] + r[0][2] * v[2],
            r[1][0] * v[0] + r[1][1] * v[1] + r[1][2] * v[2],
            r[2][0] * v[0] + r[2][1] * v[1] + r[2][2] * v[2],
        ]
    }

    fn linear_det(&self) -> f64 {
        let m = &self.rows;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    pub fn inverse(&self) -> Result<Self> {
        let det = self.linear_det();
        if det.abs() < 1e-12 || !det.is_finite() {
            return Err(Error::InvalidArgument("affine linear part is singular".into()));
        }
        let m = &self.rows;
        let inv_det = 1.0 / det;
        let mut l = [[0.0; 3]; 3];
        l[0][0] = (m[1][1] * m[2][2] - m[1][2] * m[2][1]) * inv_det;
        l[0][1] = (m[0][2] * m[2][1] - m[0][1] * m[2][2]) * inv_det;
        l[0][2] = (m[0][1] * m[1][2] - m[0][2] * m[1][1]) * inv_det;
        l[1][0] = (m[1][2] * m[2][0] - m[1][0] * m[2][2]) * inv_det;
        l[1][1] = (m[0][0] * m[2][2] - m[0][2] * m[2][0]) * inv_det;
        l[1][2] = (m[0][2] * m[1][0] - m[0][0] * m[1][2]) * inv_det;
        l[2][0] = (m[1][0] * m[2][1] - m[1][1] * m[2][0]) * inv_det;
        l[2][1] = (m[0][1] * m[2][0] - m[0][0] * m[2][1]) * inv_det;
        l[2][2] = (m[0][0] * m[1][1] - m[0][1] * m[1][0]) * inv_det;
        let t = self.translation();
        let mut rows = [[0.0; 4]; 3];
        for i in 0..3 {
            rows[i][..3].copy_from_slice(&l[i]);
            rows[i][3] = -(l[i][0] * t[0] + l[i][1] * t[1] + l[i][2] * t[2]);
        }
        Ok(Self { rows })
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Affine4x4) -> Affine4x4 {
        let a = self.to_matrix();
        let b = other.to_matrix();
        let mut rows = [[0.0; 4]; 3];
        for (i, row) in rows.iter_mut().enumerate() {
            for (j, cell) in row.iter_mut().enumerate() {
                *cell = (0..4).map(|k| a[i][k] * b[k][j]).sum();
            }
        }
        Affine4x4 { rows }
    }

    /// Euclidean length of each voxel axis in world units.
    pub fn column_norms(&self) -> [f64; 3] {
        let r = &self.rows;
        [0, 1, 2].map(|j| (r[0][j].powi(2) + r[1][j].powi(2) + r[2][j].powi(2)).sqrt())
    }
}

/// Homogeneous multiply of `point` by `affine`, dropping w.
pub fn apply_affine(affine: &Affine4x4, point: [f64; 3]) -> [f64; 3] {
    affine.apply(point)
}
