//! Core array types: the reconstruction volume and the projection stack.
//!
//! Volume linearization is x-fastest: index `i + nx * (j + ny * k)` for voxel
//! `(i, j, k)`. Axial slices (constant `k`) are therefore contiguous, which is
//! what the slice-by-slice denoiser iterates over. Projection data is stored
//! view-major: index `col + det_cols * (row + det_rows * view)`.

use crate::error::{Error, Result};

/// A 3D attenuation image x ∈ ℝᴺ on a regular cubic-voxel grid (mm⁻¹).
///
/// Physical volumes are non-negative but intermediate iterates of the solvers
/// may go negative; finiteness and shape are the only structural invariants.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume3D {
    pub dims: (usize, usize, usize),
    /// Cubic voxel edge length, mm.
    pub voxel_size: f64,
    pub data: Vec<f64>,
}

impl Volume3D {
    pub fn new(dims: (usize, usize, usize), voxel_size: f64, data: Vec<f64>) -> Result<Self> {
        let n = dims.0 * dims.1 * dims.2;
        if data.len() != n {
            return Err(Error::DimMismatch(format!(
                "volume data length {} != {}x{}x{} = {}",
                data.len(),
                dims.0,
                dims.1,
                dims.2,
                n
            )));
        }
        if !(voxel_size > 0.0) {
            return Err(Error::InvalidSpec(format!(
                "voxel_size must be positive, got {voxel_size}"
            )));
        }
        Ok(Self { dims, voxel_size, data })
    }

    pub fn zeros(dims: (usize, usize, usize), voxel_size: f64) -> Self {
        Self { dims, voxel_size, data: vec![0.0; dims.0 * dims.1 * dims.2] }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn idx(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims.0 * (j + self.dims.1 * k)
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[self.idx(i, j, k)]
    }

    /// Borrow the contiguous axial slice at height `k` (an nx × ny plane).
    pub fn slice(&self, k: usize) -> &[f64] {
        let plane = self.dims.0 * self.dims.1;
        &self.data[k * plane..(k + 1) * plane]
    }

    pub fn slice_mut(&mut self, k: usize) -> &mut [f64] {
        let plane = self.dims.0 * self.dims.1;
        &mut self.data[k * plane..(k + 1) * plane]
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        ensure_finite(&self.data, what)
    }

    /// Same grid (dims and voxel size), possibly different data.
    pub fn same_grid(&self, other: &Volume3D) -> bool {
        self.dims == other.dims && self.voxel_size == other.voxel_size
    }
}

/// Log-normalized line-integral measurements b ∈ ℝᴹ, views × rows × cols.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionStack {
    pub n_views: usize,
    pub det_rows: usize,
    pub det_cols: usize,
    pub data: Vec<f64>,
}

impl ProjectionStack {
    pub fn new(n_views: usize, det_rows: usize, det_cols: usize, data: Vec<f64>) -> Result<Self> {
        let m = n_views * det_rows * det_cols;
        if data.len() != m {
            return Err(Error::DimMismatch(format!(
                "projection data length {} != {n_views}x{det_rows}x{det_cols} = {m}",
                data.len()
            )));
        }
        Ok(Self { n_views, det_rows, det_cols, data })
    }

    pub fn zeros(n_views: usize, det_rows: usize, det_cols: usize) -> Self {
        Self { n_views, det_rows, det_cols, data: vec![0.0; n_views * det_rows * det_cols] }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn idx(&self, view: usize, row: usize, col: usize) -> usize {
        col + self.det_cols * (row + self.det_rows * view)
    }

    /// Borrow one detector row of one view.
    pub fn row(&self, view: usize, row: usize) -> &[f64] {
        let start = self.idx(view, row, 0);
        &self.data[start..start + self.det_cols]
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        ensure_finite(&self.data, what)
    }
}

pub(crate) fn ensure_finite(data: &[f64], what: &str) -> Result<()> {
    if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!(
            "{what}: element {pos} is {}",
            data[pos]
        )));
    }
    Ok(())
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn volume_length_checked() {
        assert!(Volume3D::new((2, 3, 4), 0.1, vec![0.0; 24]).is_ok());
        assert!(matches!(
            Volume3D::new((2, 3, 4), 0.1, vec![0.0; 23]),
            Err(Error::DimMismatch(_))
        ));
    }

    #[test]
    fn slice_is_axial_plane() {
        let mut v = Volume3D::zeros((2, 2, 3), 1.0);
        let idx = v.idx(1, 0, 2);
        v.data[idx] = 7.0;
        assert_eq!(v.slice(2), &[0.0, 7.0, 0.0, 0.0]);
        assert_eq!(v.at(1, 0, 2), 7.0);
    }

    #[test]
    fn finite_check_reports_position() {
        let v = Volume3D::new((1, 1, 2), 1.0, vec![1.0, f64::NAN]).unwrap();
        assert!(matches!(v.ensure_finite("x"), Err(Error::NonFinite(_))));
    }
}
