//! Cone-beam forward projector A and its exact numerical adjoint Aᵀ.
//!
//! Ray-driven Joseph-style discretization: one ray per detector pixel (pixel
//! center), sampled at voxel-size steps with trilinear interpolation, each
//! sample weighted by the step length. The adjoint scatters exactly the same
//! sampling weights, so the pair is matched to floating-point accumulation
//! error — which is what keeps the conjugate-gradient data-consistency solves
//! honest. All accumulation is in f64.
//!
//! Both operators are pure functions and internally data-parallel: the forward
//! pass assigns each detector pixel to exactly one worker; the adjoint
//! accumulates into a fixed number of partial volumes (rays striped across
//! slots by index) that are merged in slot order, making the output
//! bit-identical for any worker-thread count.

use rand::{Rng, SeedableRng};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::ConeBeamGeometry;
use crate::types::{dot, norm2, ProjectionStack, Volume3D};

/// Number of independent accumulation buffers used by [`back_project`].
/// Fixed (not tied to the thread count) so results do not depend on it.
const ADJOINT_SLOTS: usize = 16;

#[inline]
fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

/// Entry/exit of the line `origin + s * dir` through an axis-aligned box,
/// in units of `s`. Returns `None` when the ray misses.
fn clip_to_box(origin: [f64; 3], dir: [f64; 3], lo: [f64; 3], hi: [f64; 3]) -> Option<(f64, f64)> {
    let mut s0 = f64::NEG_INFINITY;
    let mut s1 = f64::INFINITY;
    for ax in 0..3 {
        if dir[ax] == 0.0 {
            if origin[ax] < lo[ax] || origin[ax] > hi[ax] {
                return None;
            }
        } else {
            let inv = 1.0 / dir[ax];
            let (a, b) = ((lo[ax] - origin[ax]) * inv, (hi[ax] - origin[ax]) * inv);
            let (near, far) = if a < b { (a, b) } else { (b, a) };
            s0 = s0.max(near);
            s1 = s1.min(far);
        }
    }
    if s1 > s0 {
        Some((s0, s1))
    } else {
        None
    }
}

/// Per-ray sampling shared verbatim by the forward and adjoint operators.
/// Calls `f(i0, j0, k0, wx, wy, wz, weight)` for every sample: the lower
/// corner of the trilinear cell, the fractional weights toward the upper
/// corner, and the integration weight (the step length in mm).
#[inline]
fn walk_ray<F: FnMut(isize, isize, isize, f64, f64, f64, f64)>(
    geom: &ConeBeamGeometry,
    view: usize,
    row: usize,
    col: usize,
    mut f: F,
) {
    let (nx, ny, nz) = geom.vol_dims;
    let vs = geom.voxel_size;
    let src = geom.source_pos(view);
    let pix = geom.det_pixel_pos(view, row, col);
    let d = sub(pix, src);
    let len = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
    let dir = [d[0] / len, d[1] / len, d[2] / len];

    // Work in grid coordinates (voxel (i,j,k) center at (i,j,k)); stepping by
    // one voxel size along the ray is a unit step of `dir` in grid space.
    let src_g = [
        src[0] / vs + (nx as f64 - 1.0) / 2.0,
        src[1] / vs + (ny as f64 - 1.0) / 2.0,
        src[2] / vs + (nz as f64 - 1.0) / 2.0,
    ];
    // Trilinear support reaches one voxel beyond the outermost centers.
    let lo = [-1.0, -1.0, -1.0];
    let hi = [nx as f64, ny as f64, nz as f64];
    let Some((s0, s1)) = clip_to_box(src_g, dir, lo, hi) else {
        return;
    };
    let n_samples = (s1 - s0).floor() as usize;
    for m in 0..n_samples {
        let s = s0 + (m as f64 + 0.5);
        let gx = src_g[0] + s * dir[0];
        let gy = src_g[1] + s * dir[1];
        let gz = src_g[2] + s * dir[2];
        let i0 = gx.floor() as isize;
        let j0 = gy.floor() as isize;
        let k0 = gz.floor() as isize;
        f(i0, j0, k0, gx - i0 as f64, gy - j0 as f64, gz - k0 as f64, vs);
    }
}

fn check_vol_dims(vol: &Volume3D, geom: &ConeBeamGeometry) -> Result<()> {
    if vol.dims != geom.vol_dims || vol.voxel_size != geom.voxel_size {
        return Err(Error::DimMismatch(format!(
            "volume {:?} @ {} mm vs geometry {:?} @ {} mm",
            vol.dims, vol.voxel_size, geom.vol_dims, geom.voxel_size
        )));
    }
    Ok(())
}

fn check_proj_dims(proj: &ProjectionStack, geom: &ConeBeamGeometry) -> Result<()> {
    if proj.n_views != geom.n_views()
        || proj.det_rows != geom.det_rows
        || proj.det_cols != geom.det_cols
    {
        return Err(Error::DimMismatch(format!(
            "projections {}x{}x{} vs geometry {}x{}x{}",
            proj.n_views,
            proj.det_rows,
            proj.det_cols,
            geom.n_views(),
            geom.det_rows,
            geom.det_cols
        )));
    }
    Ok(())
}

/// Discretized line integral from the source through each detector pixel
/// center, in mm⁻¹ · mm. Linear in the volume.
pub fn forward_project(vol: &Volume3D, geom: &ConeBeamGeometry) -> Result<ProjectionStack> {
    check_vol_dims(vol, geom)?;
    let (nx, ny, nz) = geom.vol_dims;
    let (nxi, nyi, nzi) = (nx as isize, ny as isize, nz as isize);
    let row_len = geom.det_cols;
    let view_len = geom.det_rows * row_len;
    let mut out = ProjectionStack::zeros(geom.n_views(), geom.det_rows, geom.det_cols);

    out.data
        .par_chunks_mut(row_len)
        .enumerate()
        .for_each(|(chunk, row_out)| {
            let view = chunk * row_len / view_len;
            let row = (chunk * row_len % view_len) / row_len;
            for (col, pixel) in row_out.iter_mut().enumerate() {
                let mut acc = 0.0f64;
                walk_ray(geom, view, row, col, |i0, j0, k0, wx, wy, wz, w| {
                    let mut val = 0.0;
                    for (dk, wk) in [(0isize, 1.0 - wz), (1, wz)] {
                        let k = k0 + dk;
                        if k < 0 || k >= nzi || wk == 0.0 {
                            continue;
                        }
                        for (dj, wj) in [(0isize, 1.0 - wy), (1, wy)] {
                            let j = j0 + dj;
                            if j < 0 || j >= nyi || wj == 0.0 {
                                continue;
                            }
                            let base = (j as usize + ny * k as usize) * nx;
                            for (di, wi) in [(0isize, 1.0 - wx), (1, wx)] {
                                let i = i0 + di;
                                if i < 0 || i >= nxi || wi == 0.0 {
                                    continue;
                                }
                                val += wk * wj * wi * vol.data[base + i as usize];
                            }
                        }
                    }
                    acc += w * val;
                });
                *pixel = acc;
            }
        });
    Ok(out)
}

/// Exact numerical adjoint of [`forward_project`]: scatters every ray sample's
/// trilinear weights back into the volume. Linear in the projections.
pub fn back_project(proj: &ProjectionStack, geom: &ConeBeamGeometry) -> Result<Volume3D> {
    check_proj_dims(proj, geom)?;
    let (nx, ny, nz) = geom.vol_dims;
    let (nxi, nyi, nzi) = (nx as isize, ny as isize, nz as isize);
    let n = nx * ny * nz;
    let n_rays = proj.len();
    let row_len = geom.det_cols;
    let view_len = geom.det_rows * row_len;

    let partials: Vec<Vec<f64>> = (0..ADJOINT_SLOTS)
        .into_par_iter()
        .map(|slot| {
            let mut acc = vec![0.0f64; n];
            let mut ray = slot;
            while ray < n_rays {
                let y = proj.data[ray];
                if y != 0.0 {
                    let view = ray / view_len;
                    let row = (ray % view_len) / row_len;
                    let col = ray % row_len;
                    walk_ray(geom, view, row, col, |i0, j0, k0, wx, wy, wz, w| {
                        let contrib = w * y;
                        for (dk, wk) in [(0isize, 1.0 - wz), (1, wz)] {
                            let k = k0 + dk;
                            if k < 0 || k >= nzi || wk == 0.0 {
                                continue;
                            }
                            for (dj, wj) in [(0isize, 1.0 - wy), (1, wy)] {
                                let j = j0 + dj;
                                if j < 0 || j >= nyi || wj == 0.0 {
                                    continue;
                                }
                                let base = (j as usize + ny * k as usize) * nx;
                                for (di, wi) in [(0isize, 1.0 - wx), (1, wx)] {
                                    let i = i0 + di;
                                    if i < 0 || i >= nxi || wi == 0.0 {
                                        continue;
                                    }
                                    acc[base + i as usize] += contrib * wk * wj * wi;
                                }
                            }
                        }
                    });
                }
                ray += ADJOINT_SLOTS;
            }
            acc
        })
        .collect();

    let mut out = Volume3D::zeros(geom.vol_dims, geom.voxel_size);
    out.data.par_iter_mut().enumerate().for_each(|(i, v)| {
        let mut s = 0.0;
        for p in &partials {
            s += p[i];
        }
        *v = s;
    });
    Ok(out)
}

/// Relative adjoint mismatch |⟨Ax, y⟩ − ⟨x, Aᵀy⟩| / (‖Ax‖·‖y‖) on
/// pseudo-random x, y drawn from `seed`. Deterministic in the seed.
pub fn adjoint_gap(geom: &ConeBeamGeometry, seed: u64) -> f64 {
    let mut rng = rand::rngs::StdRng::seed_from_u64(seed);
    let (nx, ny, nz) = geom.vol_dims;
    let x: Vec<f64> = (0..nx * ny * nz).map(|_| rng.gen_range(-0.5..0.5)).collect();
    let y: Vec<f64> = (0..geom.n_views() * geom.det_rows * geom.det_cols)
        .map(|_| rng.gen_range(-0.5..0.5))
        .collect();
    let vol = Volume3D { dims: geom.vol_dims, voxel_size: geom.voxel_size, data: x };
    let stack = ProjectionStack {
        n_views: geom.n_views(),
        det_rows: geom.det_rows,
        det_cols: geom.det_cols,
        data: y,
    };
    let ax = forward_project(&vol, geom).expect("dims from geometry");
    let aty = back_project(&stack, geom).expect("dims from geometry");
    let lhs = dot(&ax.data, &stack.data);
    let rhs = dot(&vol.data, &aty.data);
    (lhs - rhs).abs() / (norm2(&ax.data) * norm2(&stack.data))
}

/// Densely materialized system matrix, for oracle tests on tiny geometries.
/// Row-major: `rows` = number of detector pixels, `cols` = number of voxels.
pub struct DenseMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl DenseMatrix {
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.cols);
        self.data.chunks(self.cols).map(|row| dot(row, x)).collect()
    }

    pub fn apply_transpose(&self, y: &[f64]) -> Vec<f64> {
        assert_eq!(y.len(), self.rows);
        let mut out = vec![0.0; self.cols];
        for (row, &yi) in self.data.chunks(self.cols).zip(y) {
            for (o, &a) in out.iter_mut().zip(row) {
                *o += a * yi;
            }
        }
        out
    }
}

/// Materialize A column-by-column by forward-projecting voxel impulses.
/// Testing only; O(M·N) memory.
pub fn materialize_dense(geom: &ConeBeamGeometry) -> DenseMatrix {
    let (nx, ny, nz) = geom.vol_dims;
    let n = nx * ny * nz;
    let m = geom.n_views() * geom.det_rows * geom.det_cols;
    let mut data = vec![0.0f64; m * n];
    for j in 0..n {
        let mut vol = Volume3D::zeros(geom.vol_dims, geom.voxel_size);
        vol.data[j] = 1.0;
        let col = forward_project(&vol, geom).expect("dims from geometry");
        for (i, &v) in col.data.iter().enumerate() {
            data[i * n + j] = v;
        }
    }
    DenseMatrix { rows: m, cols: n, data }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{make_circular_geometry, AngleSpec, GeometrySpec};

    pub(crate) fn tiny_geometry(n_views: usize, det: usize, vol: usize) -> ConeBeamGeometry {
        // Detector sized from the coverage inequality with ~20% margin.
        let voxel = 0.25;
        let r = (vol as f64) * voxel / 2.0 * 3.0f64.sqrt();
        let so = 30.0;
        let sd = 75.0;
        let pitch = 1.2 * 2.0 * sd * (r / so).asin().tan() / det as f64;
        make_circular_geometry(&GeometrySpec {
            source_to_origin: so,
            source_to_detector: sd,
            det_rows: det,
            det_cols: det,
            det_pixel_pitch: pitch,
            angles: AngleSpec::Uniform { n_views, full_revolution: true },
            vol_dims: (vol, vol, vol),
            voxel_size: voxel,
            det_offset: (0.0, 0.0),
        })
        .unwrap()
    }

    fn random_volume(geom: &ConeBeamGeometry, seed: u64) -> Volume3D {
        use rand::Rng;
        let mut rng = rand::rngs::StdRng::seed_from_u64(seed);
        let (nx, ny, nz) = geom.vol_dims;
        let data = (0..nx * ny * nz).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Volume3D { dims: geom.vol_dims, voxel_size: geom.voxel_size, data }
    }

    fn random_stack(geom: &ConeBeamGeometry, seed: u64) -> ProjectionStack {
        use rand::Rng;
        let mut rng = rand::rngs::StdRng::seed_from_u64(seed);
        let m = geom.n_views() * geom.det_rows * geom.det_cols;
        ProjectionStack {
            n_views: geom.n_views(),
            det_rows: geom.det_rows,
            det_cols: geom.det_cols,
            data: (0..m).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        }
    }

    #[test]
    fn zero_volume_projects_to_zero() {
        let geom = tiny_geometry(6, 12, 8);
        let p = forward_project(&Volume3D::zeros(geom.vol_dims, geom.voxel_size), &geom).unwrap();
        assert!(p.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_scaling_is_exact() {
        let geom = tiny_geometry(5, 10, 8);
        let x = random_volume(&geom, 3);
        let mut x2 = x.clone();
        for v in &mut x2.data {
            *v *= 2.0;
        }
        let p1 = forward_project(&x, &geom).unwrap();
        let p2 = forward_project(&x2, &geom).unwrap();
        for (a, b) in p1.data.iter().zip(&p2.data) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn central_ray_matches_cube_chord_length() {
        // Uniform unit-attenuation cube of side 3 mm centered in an
        // 80^3 / 0.05 mm grid; the ray through the detector center at angle 0
        // crosses a chord of exactly the cube side.
        let voxel = 0.05;
        let n = 80usize;
        let geom = make_circular_geometry(&GeometrySpec {
            source_to_origin: 30.0,
            source_to_detector: 75.0,
            det_rows: 25,
            det_cols: 25,
            det_pixel_pitch: 0.8,
            angles: AngleSpec::Explicit(vec![0.0]),
            vol_dims: (n, n, n),
            voxel_size: voxel,
            det_offset: (0.0, 0.0),
        })
        .unwrap();
        let side = 3.0f64;
        let half = side / 2.0;
        let mut vol = Volume3D::zeros(geom.vol_dims, geom.voxel_size);
        let c = (n as f64 - 1.0) / 2.0;
        for k in 0..n {
            for j in 0..n {
                for i in 0..n {
                    let x = (i as f64 - c) * voxel;
                    let y = (j as f64 - c) * voxel;
                    let z = (k as f64 - c) * voxel;
                    if x.abs() <= half && y.abs() <= half && z.abs() <= half {
                        let idx = vol.idx(i, j, k);
                        vol.data[idx] = 1.0;
                    }
                }
            }
        }
        let p = forward_project(&vol, &geom).unwrap();
        let center = p.idx(0, 12, 12);
        let got = p.data[center];
        assert!(
            (got - side).abs() / side < 0.02,
            "chord {got} vs analytic {side}"
        );
    }

    #[test]
    fn zero_projections_backproject_to_zero() {
        let geom = tiny_geometry(6, 12, 8);
        let v = back_project(&ProjectionStack::zeros(6, 12, 12), &geom).unwrap();
        assert!(v.data.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn back_project_is_linear() {
        let geom = tiny_geometry(6, 10, 8);
        let y1 = random_stack(&geom, 11);
        let y2 = random_stack(&geom, 12);
        let a = 3.0;
        let mut combo = y1.clone();
        for (c, (u, v)) in combo.data.iter_mut().zip(y1.data.iter().zip(&y2.data)) {
            *c = a * u + v;
        }
        let lhs = back_project(&combo, &geom).unwrap();
        let b1 = back_project(&y1, &geom).unwrap();
        let b2 = back_project(&y2, &geom).unwrap();
        let scale = lhs.data.iter().map(|v| v.abs()).fold(0.0f64, f64::max);
        for ((l, u), v) in lhs.data.iter().zip(&b1.data).zip(&b2.data) {
            assert!((l - (a * u + v)).abs() <= 1e-12 * scale.max(1.0));
        }
    }

    #[test]
    fn adjoint_gap_small_and_deterministic() {
        let geom = tiny_geometry(8, 14, 10);
        let g1 = adjoint_gap(&geom, 42);
        let g2 = adjoint_gap(&geom, 42);
        assert_eq!(g1, g2);
        assert!(g1 < 1e-10, "gap {g1}");
    }

    #[test]
    fn adjoint_matches_dense_transpose_on_tiny_geometry() {
        let geom = tiny_geometry(12, 16, 8);
        let dense = materialize_dense(&geom);

        let x = random_volume(&geom, 1);
        let ax = forward_project(&x, &geom).unwrap();
        let ax_dense = dense.apply(&x.data);
        let mut max_fwd = 0.0f64;
        for (a, b) in ax.data.iter().zip(&ax_dense) {
            max_fwd = max_fwd.max((a - b).abs());
        }
        assert!(max_fwd < 1e-10, "forward vs dense: {max_fwd}");

        let y = random_stack(&geom, 2);
        let aty = back_project(&y, &geom).unwrap();
        let aty_dense = dense.apply_transpose(&y.data);
        let mut max_adj = 0.0f64;
        for (a, b) in aty.data.iter().zip(&aty_dense) {
            max_adj = max_adj.max((a - b).abs());
        }
        assert!(max_adj < 1e-10, "adjoint vs dense transpose: {max_adj}");
    }

    #[test]
    fn impulse_projection_is_nonnegative_and_local() {
        let geom = tiny_geometry(7, 16, 12);
        let mut vol = Volume3D::zeros(geom.vol_dims, geom.voxel_size);
        let (i, j, k) = (8, 5, 7);
        let idx = vol.idx(i, j, k);
        vol.data[idx] = 1.0;
        let c = (geom.vol_dims.0 as f64 - 1.0) / 2.0;
        let pos = [
            (i as f64 - c) * geom.voxel_size,
            (j as f64 - c) * geom.voxel_size,
            (k as f64 - c) * geom.voxel_size,
        ];
        let p = forward_project(&vol, &geom).unwrap();
        let support = 3.0f64.sqrt() * geom.voxel_size;
        for view in 0..geom.n_views() {
            let src = geom.source_pos(view);
            for row in 0..geom.det_rows {
                for col in 0..geom.det_cols {
                    let v = p.data[p.idx(view, row, col)];
                    assert!(v >= 0.0);
                    if v > 0.0 {
                        let pix = geom.det_pixel_pos(view, row, col);
                        let d = sub(pix, src);
                        let dn = norm2(&d);
                        let rel = sub(pos, src);
                        let t = dot(&rel, &d) / (dn * dn);
                        let closest = [
                            src[0] + t * d[0] - pos[0],
                            src[1] + t * d[1] - pos[1],
                            src[2] + t * d[2] - pos[2],
                        ];
                        let dist = norm2(&closest);
                        assert!(
                            dist <= support + 1e-9,
                            "pixel ({view},{row},{col}) value {v} but ray distance {dist}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let geom = tiny_geometry(4, 8, 8);
        let wrong = Volume3D::zeros((9, 8, 8), geom.voxel_size);
        assert!(matches!(forward_project(&wrong, &geom), Err(Error::DimMismatch(_))));
        let wrong_p = ProjectionStack::zeros(4, 8, 9);
        assert!(matches!(back_project(&wrong_p, &geom), Err(Error::DimMismatch(_))));
    }
}
