//! 2D patch extraction over axial slices and its averaging reassembly.
//!
//! Slices are tiled on a deterministic grid: corners at 0, stride, 2·stride, …
//! plus an edge-aligned final corner so the slice is always fully covered.
//! Reassembly averages overlapping contributions and is the exact inverse for
//! non-overlapping tilings.

use crate::error::{Error, Result};
use crate::types::Volume3D;

/// Where a patch came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchMeta {
    pub volume_id: usize,
    pub slice: usize,
    /// (row, col) of the upper-left corner within the slice.
    pub corner: (usize, usize),
}

/// Patches of one volume (or one half of an (input, target) pair).
#[derive(Clone, Debug)]
pub struct Patches {
    pub patch_size: usize,
    /// Slice dims the patches were cut from: (rows, cols) = (ny, nx).
    pub slice_dims: (usize, usize),
    pub meta: Vec<PatchMeta>,
    pub data: Vec<Vec<f64>>,
}

/// Aligned (input, target) patch pairs for one training stage.
#[derive(Clone, Debug)]
pub struct PatchSet {
    pub inputs: Patches,
    pub targets: Patches,
}

impl PatchSet {
    pub fn len(&self) -> usize {
        self.inputs.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.data.is_empty()
    }

    /// Zip patches of aligned volumes; the grids must match exactly.
    pub fn pair(inputs: Patches, targets: Patches) -> Result<Self> {
        if inputs.meta != targets.meta || inputs.patch_size != targets.patch_size {
            return Err(Error::DimMismatch(
                "input and target patch grids are not aligned".into(),
            ));
        }
        Ok(Self { inputs, targets })
    }
}

/// Corner positions along one axis of length `dim` for patch side `p`.
fn grid_positions(dim: usize, p: usize, stride: usize) -> Vec<usize> {
    let last = dim - p;
    let mut out = Vec::new();
    let mut pos = 0;
    loop {
        out.push(pos.min(last));
        if pos >= last {
            break;
        }
        pos += stride;
    }
    // Edge-align the final patch instead of overshooting.
    if *out.last().unwrap() != last {
        out.push(last);
    }
    out.dedup();
    out
}

/// Tile every axial slice of `vol` with `p × p` patches at the given stride.
pub fn extract_patches(
    vol: &Volume3D,
    p: usize,
    stride: usize,
    volume_id: usize,
) -> Result<Patches> {
    let (nx, ny, nz) = vol.dims;
    if p == 0 || p > nx || p > ny {
        return Err(Error::InvalidSpec(format!(
            "patch size {p} does not fit a {nx}x{ny} slice"
        )));
    }
    if stride == 0 {
        return Err(Error::InvalidSpec("stride must be >= 1".into()));
    }
    let rows = grid_positions(ny, p, stride);
    let cols = grid_positions(nx, p, stride);
    let mut meta = Vec::with_capacity(nz * rows.len() * cols.len());
    let mut data = Vec::with_capacity(meta.capacity());
    for k in 0..nz {
        let slice = vol.slice(k);
        for &r0 in &rows {
            for &c0 in &cols {
                let mut patch = Vec::with_capacity(p * p);
                for r in r0..r0 + p {
                    patch.extend_from_slice(&slice[r * nx + c0..r * nx + c0 + p]);
                }
                meta.push(PatchMeta { volume_id, slice: k, corner: (r0, c0) });
                data.push(patch);
            }
        }
    }
    Ok(Patches { patch_size: p, slice_dims: (ny, nx), meta, data })
}

/// Rebuild a volume from patches, averaging overlaps. Exact inverse of
/// [`extract_patches`] when the tiling does not overlap (and when overlapping
/// patches agree).
pub fn reassemble_patches(
    patches: &Patches,
    dims: (usize, usize, usize),
    voxel_size: f64,
) -> Result<Volume3D> {
    let (nx, ny, nz) = dims;
    if patches.slice_dims != (ny, nx) {
        return Err(Error::DimMismatch(format!(
            "patches cut from {:?} slices cannot fill {nx}x{ny}",
            patches.slice_dims
        )));
    }
    let p = patches.patch_size;
    let mut sum = vec![0.0f64; nx * ny * nz];
    let mut count = vec![0u32; nx * ny * nz];
    for (meta, patch) in patches.meta.iter().zip(&patches.data) {
        if meta.slice >= nz {
            return Err(Error::DimMismatch(format!(
                "patch slice {} out of range {nz}",
                meta.slice
            )));
        }
        let (r0, c0) = meta.corner;
        if r0 + p > ny || c0 + p > nx {
            return Err(Error::DimMismatch(format!(
                "patch corner {:?} + {p} exceeds {nx}x{ny}",
                meta.corner
            )));
        }
        let base = meta.slice * nx * ny;
        for r in 0..p {
            let row = base + (r0 + r) * nx + c0;
            for c in 0..p {
                sum[row + c] += patch[r * p + c];
                count[row + c] += 1;
            }
        }
    }
    for (s, &c) in sum.iter_mut().zip(&count) {
        if c > 0 {
            *s /= c as f64;
        }
    }
    Volume3D::new(dims, voxel_size, sum)
}
