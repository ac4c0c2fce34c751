//! Synthetic ground-truth phantoms and scan simulation
//! (Beer–Lambert transmission with optional Poisson counting noise).

use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::ConeBeamGeometry;
use crate::projector::forward_project;
use crate::types::{ProjectionStack, Volume3D};

/// Randomized superposition of ellipsoids, the desk-scale stand-in for a
/// measured specimen.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub n_ellipsoids: usize,
    /// Attenuation draw range, mm⁻¹ (min, max).
    pub attenuation: (f64, f64),
    /// Semi-axis draw range, mm (min, max).
    pub size: (f64, f64),
    /// When set, ellipsoids after the first may subtract (internal voids).
    #[serde(default)]
    pub voids: bool,
    pub seed: u64,
}

impl PhantomSpec {
    fn validate(&self) -> Result<()> {
        let ok = |(lo, hi): (f64, f64)| lo > 0.0 && hi >= lo && hi.is_finite();
        if !ok(self.attenuation) {
            return Err(Error::InvalidSpec(format!(
                "attenuation range {:?} must be positive and ordered",
                self.attenuation
            )));
        }
        if !ok(self.size) {
            return Err(Error::InvalidSpec(format!(
                "size range {:?} must be positive and ordered",
                self.size
            )));
        }
        Ok(())
    }
}

/// Noise applied on top of the ideal line integrals.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum NoiseModel {
    None,
    /// Poisson transmission counts at incident photon count `i0`, clamped to
    /// at least one count before log-normalization.
    PoissonTransmission { i0: f64, seed: u64 },
}

fn rotation_from_rng(rng: &mut impl Rng) -> [[f64; 3]; 3] {
    // Uniform random rotation via a normalized quaternion.
    let q: [f64; 4] = {
        let mut v = [0.0; 4];
        loop {
            for x in &mut v {
                *x = rng.gen_range(-1.0..1.0);
            }
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 1e-3 && n <= 1.0 {
                for x in &mut v {
                    *x /= n;
                }
                break v;
            }
        }
    };
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

/// Superimpose `spec.n_ellipsoids` randomly placed, rotated ellipsoids, all
/// fully inside the volume. Deterministic in the seed; all values >= 0.
pub fn make_ellipsoid_phantom(
    dims: (usize, usize, usize),
    voxel_size: f64,
    spec: &PhantomSpec,
) -> Result<Volume3D> {
    spec.validate()?;
    let mut rng = rand::rngs::StdRng::seed_from_u64(spec.seed);
    let mut vol = Volume3D::zeros(dims, voxel_size);
    let half = [
        dims.0 as f64 * voxel_size / 2.0,
        dims.1 as f64 * voxel_size / 2.0,
        dims.2 as f64 * voxel_size / 2.0,
    ];

    for e in 0..spec.n_ellipsoids {
        let mut placed = false;
        for _attempt in 0..100 {
            let axes = [
                rng.gen_range(spec.size.0..=spec.size.1),
                rng.gen_range(spec.size.0..=spec.size.1),
                rng.gen_range(spec.size.0..=spec.size.1),
            ];
            let bound = axes.iter().cloned().fold(0.0, f64::max);
            let rot = rotation_from_rng(&mut rng);
            let att = rng.gen_range(spec.attenuation.0..=spec.attenuation.1);
            let subtract = spec.voids && e > 0 && rng.gen_bool(0.3);

            if half.iter().any(|&h| h <= bound) {
                continue; // bounding sphere cannot fit; redraw
            }
            let center = [
                rng.gen_range(-(half[0] - bound)..=(half[0] - bound)),
                rng.gen_range(-(half[1] - bound)..=(half[1] - bound)),
                rng.gen_range(-(half[2] - bound)..=(half[2] - bound)),
            ];
            rasterize_ellipsoid(&mut vol, center, axes, &rot, if subtract { -att } else { att });
            placed = true;
            break;
        }
        if !placed {
            return Err(Error::InvalidSpec(format!(
                "ellipsoid {e} cannot fit inside the volume after 100 attempts \
                 (size range {:?} vs half-extents {:?})",
                spec.size, half
            )));
        }
    }
    for v in &mut vol.data {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    Ok(vol)
}

fn rasterize_ellipsoid(
    vol: &mut Volume3D,
    center: [f64; 3],
    axes: [f64; 3],
    rot: &[[f64; 3]; 3],
    att: f64,
) {
    let (nx, ny, nz) = vol.dims;
    let vs = vol.voxel_size;
    let c = [(nx as f64 - 1.0) / 2.0, (ny as f64 - 1.0) / 2.0, (nz as f64 - 1.0) / 2.0];
    let bound = axes.iter().cloned().fold(0.0, f64::max);
    let lo = |dim: usize, n: usize| {
        (((center[dim] - bound) / vs + c[dim]).floor().max(0.0) as usize).min(n - 1)
    };
    let hi =
        |dim: usize, n: usize| (((center[dim] + bound) / vs + c[dim]).ceil().max(0.0) as usize).min(n - 1);
    for k in lo(2, nz)..=hi(2, nz) {
        let dz = (k as f64 - c[2]) * vs - center[2];
        for j in lo(1, ny)..=hi(1, ny) {
            let dy = (j as f64 - c[1]) * vs - center[1];
            for i in lo(0, nx)..=hi(0, nx) {
                let dx = (i as f64 - c[0]) * vs - center[0];
                // Body-frame coordinates: rows of `rot` transposed.
                let bx = rot[0][0] * dx + rot[1][0] * dy + rot[2][0] * dz;
                let by = rot[0][1] * dx + rot[1][1] * dy + rot[2][1] * dz;
                let bz = rot[0][2] * dx + rot[1][2] * dy + rot[2][2] * dz;
                let q = (bx / axes[0]).powi(2) + (by / axes[1]).powi(2) + (bz / axes[2]).powi(2);
                if q <= 1.0 {
                    let idx = vol.idx(i, j, k);
                    vol.data[idx] += att;
                }
            }
        }
    }
}

/// A centered uniform ball, handy as an analytically-known phantom.
pub fn ball_volume(
    dims: (usize, usize, usize),
    voxel_size: f64,
    radius_mm: f64,
    attenuation: f64,
) -> Volume3D {
    let mut vol = Volume3D::zeros(dims, voxel_size);
    let (nx, ny, nz) = dims;
    let c = [(nx as f64 - 1.0) / 2.0, (ny as f64 - 1.0) / 2.0, (nz as f64 - 1.0) / 2.0];
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let dx = (i as f64 - c[0]) * voxel_size;
                let dy = (j as f64 - c[1]) * voxel_size;
                let dz = (k as f64 - c[2]) * voxel_size;
                if dx * dx + dy * dy + dz * dz <= radius_mm * radius_mm {
                    let idx = vol.idx(i, j, k);
                    vol.data[idx] = attenuation;
                }
            }
        }
    }
    vol
}

fn mix_seed(seed: u64, index: u64) -> u64 {
    // splitmix64 finalizer on the (seed, index) pair; gives every pixel an
    // independent stream so the draw order never matters.
    let mut z = seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Forward-project and log-normalize: noiseless mode returns the line
/// integrals exactly; Poisson mode draws `counts ~ Poisson(I0 * exp(-p))`
/// per pixel (clamped to >= 1) and returns `b = -ln(counts / I0)`.
///
/// Noise is drawn from a per-pixel counter-seeded generator in pixel-index
/// order, so the output is independent of worker-thread count.
pub fn simulate_scan(
    vol: &Volume3D,
    geom: &ConeBeamGeometry,
    noise: &NoiseModel,
) -> Result<ProjectionStack> {
    let mut p = forward_project(vol, geom)?;
    match noise {
        NoiseModel::None => Ok(p),
        NoiseModel::PoissonTransmission { i0, seed } => {
            if !(*i0 > 0.0) {
                return Err(Error::InvalidSpec(format!("I0 must be > 0, got {i0}")));
            }
            let i0 = *i0;
            let ln_i0 = i0.ln();
            p.data.par_iter_mut().enumerate().for_each(|(i, v)| {
                let lambda = i0 * (-*v).exp();
                let mut rng = rand::rngs::StdRng::seed_from_u64(mix_seed(*seed, i as u64));
                let counts = if lambda > 0.0 {
                    Poisson::new(lambda).expect("lambda > 0").sample(&mut rng)
                } else {
                    0.0
                };
                *v = ln_i0 - counts.max(1.0).ln();
            });
            Ok(p)
        }
    }
}
