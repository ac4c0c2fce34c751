//! Circular cone-beam acquisition geometry and sparse-view subsampling.
//!
//! World coordinate convention (used everywhere): the rotation axis is z, the
//! frame is right-handed, and at view angle θ the source sits at
//! `source_to_origin · (cos θ, sin θ, 0)`. The flat detector is perpendicular
//! to the central ray at `source_to_detector` from the source, with its u-axis
//! horizontal, `ê_u = (−sin θ, cos θ, 0)`, and its v-axis `ê_v = ẑ` (detector
//! rows index v, columns index u). The voxel grid is centered on the origin.
//! Rotating the source is equivalent to the physical setup where the object
//! rotates in the opposite sense.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::ProjectionStack;

const TWO_PI: f64 = std::f64::consts::TAU;

/// Fully-validated circular cone-beam geometry; the implicit parameters of the
/// forward projector. Immutable after construction and safe to share across
/// worker threads.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConeBeamGeometry {
    /// Source to rotation axis, mm.
    pub source_to_origin: f64,
    /// Source to detector plane, mm.
    pub source_to_detector: f64,
    pub det_rows: usize,
    pub det_cols: usize,
    /// Square detector pixel edge, mm.
    pub det_pixel_pitch: f64,
    /// View angles in radians, strictly increasing within [0, 2π).
    pub angles: Vec<f64>,
    /// Voxel counts (nx, ny, nz).
    pub vol_dims: (usize, usize, usize),
    /// Cubic voxel edge, mm.
    pub voxel_size: f64,
    /// Sub-pixel detector center offset (u₀, v₀), in pixels.
    pub det_offset: (f64, f64),
}

/// How view angles are produced for [`make_circular_geometry`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AngleSpec {
    /// `n_views` uniformly spaced angles starting at 0; over [0, 2π) when
    /// `full_revolution`, else over [0, π).
    Uniform { n_views: usize, full_revolution: bool },
    Explicit(Vec<f64>),
}

/// Unvalidated geometry parameters; [`make_circular_geometry`] turns these
/// into a checked [`ConeBeamGeometry`].
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GeometrySpec {
    pub source_to_origin: f64,
    pub source_to_detector: f64,
    pub det_rows: usize,
    pub det_cols: usize,
    pub det_pixel_pitch: f64,
    pub angles: AngleSpec,
    pub vol_dims: (usize, usize, usize),
    pub voxel_size: f64,
    #[serde(default)]
    pub det_offset: (f64, f64),
}

impl ConeBeamGeometry {
    pub fn n_views(&self) -> usize {
        self.angles.len()
    }

    /// Source position at view `v`.
    pub fn source_pos(&self, v: usize) -> [f64; 3] {
        let th = self.angles[v];
        [self.source_to_origin * th.cos(), self.source_to_origin * th.sin(), 0.0]
    }

    /// Unit vector from the origin toward the source at view `v`.
    pub fn source_dir(&self, v: usize) -> [f64; 3] {
        let th = self.angles[v];
        [th.cos(), th.sin(), 0.0]
    }

    /// Detector u-axis (horizontal, in the rotation plane) at view `v`.
    pub fn det_u_axis(&self, v: usize) -> [f64; 3] {
        let th = self.angles[v];
        [-th.sin(), th.cos(), 0.0]
    }

    /// Position of the center of detector pixel (row, col) at view `v`.
    pub fn det_pixel_pos(&self, view: usize, row: usize, col: usize) -> [f64; 3] {
        let s = self.source_pos(view);
        let e_s = self.source_dir(view);
        let e_u = self.det_u_axis(view);
        let u = (col as f64 - (self.det_cols as f64 - 1.0) / 2.0 - self.det_offset.0)
            * self.det_pixel_pitch;
        let vv = (row as f64 - (self.det_rows as f64 - 1.0) / 2.0 - self.det_offset.1)
            * self.det_pixel_pitch;
        [
            s[0] - self.source_to_detector * e_s[0] + u * e_u[0],
            s[1] - self.source_to_detector * e_s[1] + u * e_u[1],
            vv,
        ]
    }

    /// Radius of the sphere circumscribing the voxel grid, mm.
    pub fn object_radius(&self) -> f64 {
        let (nx, ny, nz) = self.vol_dims;
        let hx = nx as f64 * self.voxel_size / 2.0;
        let hy = ny as f64 * self.voxel_size / 2.0;
        let hz = nz as f64 * self.voxel_size / 2.0;
        (hx * hx + hy * hy + hz * hz).sqrt()
    }

    /// Per-view angular quadrature weight: half the gap between the two
    /// neighbouring views, with full-revolution wraparound. A single view
    /// gets the whole revolution.
    pub fn angular_weight(&self, v: usize) -> f64 {
        let n = self.angles.len();
        if n == 1 {
            return TWO_PI;
        }
        let prev = if v == 0 { n - 1 } else { v - 1 };
        let next = if v + 1 == n { 0 } else { v + 1 };
        let gap = (self.angles[next] - self.angles[prev]).rem_euclid(TWO_PI);
        let gap = if gap == 0.0 { TWO_PI } else { gap };
        gap / 2.0
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("geometry serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let geom: ConeBeamGeometry =
            serde_json::from_str(text).map_err(|e| Error::Format(format!("geometry json: {e}")))?;
        validate(&geom)?;
        Ok(geom)
    }
}

/// Build and validate a circular-trajectory geometry from raw parameters.
pub fn make_circular_geometry(spec: &GeometrySpec) -> Result<ConeBeamGeometry> {
    let angles = match &spec.angles {
        AngleSpec::Uniform { n_views, full_revolution } => {
            if *n_views == 0 {
                return Err(Error::InvalidSpec("n_views must be >= 1".into()));
            }
            let span = if *full_revolution { TWO_PI } else { std::f64::consts::PI };
            (0..*n_views).map(|i| i as f64 * span / *n_views as f64).collect()
        }
        AngleSpec::Explicit(a) => a.clone(),
    };
    let geom = ConeBeamGeometry {
        source_to_origin: spec.source_to_origin,
        source_to_detector: spec.source_to_detector,
        det_rows: spec.det_rows,
        det_cols: spec.det_cols,
        det_pixel_pitch: spec.det_pixel_pitch,
        angles,
        vol_dims: spec.vol_dims,
        voxel_size: spec.voxel_size,
        det_offset: spec.det_offset,
    };
    validate(&geom)?;
    Ok(geom)
}

fn validate(g: &ConeBeamGeometry) -> Result<()> {
    if !(g.source_to_origin > 0.0) {
        return Err(Error::InvalidSpec(format!(
            "source_to_origin must be > 0, got {}",
            g.source_to_origin
        )));
    }
    if !(g.source_to_detector > g.source_to_origin) {
        return Err(Error::InvalidSpec(format!(
            "need source_to_detector > source_to_origin, got {} <= {}",
            g.source_to_detector, g.source_to_origin
        )));
    }
    if g.det_rows == 0 || g.det_cols == 0 {
        return Err(Error::InvalidSpec("detector dimensions must be positive".into()));
    }
    if !(g.det_pixel_pitch > 0.0) {
        return Err(Error::InvalidSpec("det_pixel_pitch must be > 0".into()));
    }
    let (nx, ny, nz) = g.vol_dims;
    if nx == 0 || ny == 0 || nz == 0 {
        return Err(Error::InvalidSpec("vol_dims must be positive".into()));
    }
    if !(g.voxel_size > 0.0) {
        return Err(Error::InvalidSpec("voxel_size must be > 0".into()));
    }
    if g.angles.is_empty() {
        return Err(Error::InvalidSpec("need at least one view angle".into()));
    }
    for (i, &a) in g.angles.iter().enumerate() {
        if !a.is_finite() || !(0.0..TWO_PI).contains(&a) {
            return Err(Error::InvalidSpec(format!("angle {i} = {a} outside [0, 2.PI)")));
        }
        if i > 0 && a <= g.angles[i - 1] {
            return Err(Error::InvalidSpec(format!(
                "angles must be strictly increasing: angle {i} = {a} <= {}",
                g.angles[i - 1]
            )));
        }
    }
    if !g.det_offset.0.is_finite() || !g.det_offset.1.is_finite() {
        return Err(Error::InvalidSpec("det_offset must be finite".into()));
    }
    check_coverage(g)
}

/// The circumscribing sphere of the voxel grid must project inside the
/// detector for every view. For a circular trajectory the condition is
/// view-independent: tangent rays to the sphere diverge from the central ray
/// by `asin(r / source_to_origin)`, so their lateral extent on the detector
/// plane is `source_to_detector * tan(asin(r / source_to_origin))`, which must
/// not exceed the detector half-aperture (reduced by the center offset).
fn check_coverage(g: &ConeBeamGeometry) -> Result<()> {
    let r = g.object_radius();
    if r >= g.source_to_origin {
        return Err(Error::Coverage(format!(
            "object sphere radius {r:.3} mm reaches the source orbit ({} mm)",
            g.source_to_origin
        )));
    }
    let spread = g.source_to_detector * (r / g.source_to_origin).asin().tan();
    let half_u = (g.det_cols as f64 / 2.0 - g.det_offset.0.abs()) * g.det_pixel_pitch;
    let half_v = (g.det_rows as f64 / 2.0 - g.det_offset.1.abs()) * g.det_pixel_pitch;
    if spread > half_u || spread > half_v {
        return Err(Error::Coverage(format!(
            "object sphere (radius {r:.3} mm) projects {spread:.3} mm from the detector \
             center but the usable half-aperture is only {:.3} x {:.3} mm",
            half_u, half_v
        )));
    }
    Ok(())
}

/// Keep every `factor`-th view (indices 0, factor, 2·factor, …) of both the
/// projection stack and the geometry's angle list, preserving order.
pub fn subsample_views(
    proj: &ProjectionStack,
    geom: &ConeBeamGeometry,
    factor: usize,
) -> Result<(ProjectionStack, ConeBeamGeometry)> {
    if proj.n_views != geom.n_views() {
        return Err(Error::DimMismatch(format!(
            "projection stack has {} views, geometry has {}",
            proj.n_views,
            geom.n_views()
        )));
    }
    let sub_geom = subsample_geometry(geom, factor)?;
    let view_len = proj.det_rows * proj.det_cols;
    let mut data = Vec::with_capacity(sub_geom.n_views() * view_len);
    for v in (0..proj.n_views).step_by(factor) {
        data.extend_from_slice(&proj.data[v * view_len..(v + 1) * view_len]);
    }
    let sub = ProjectionStack::new(sub_geom.n_views(), proj.det_rows, proj.det_cols, data)?;
    Ok((sub, sub_geom))
}

/// Geometry half of [`subsample_views`].
pub fn subsample_geometry(geom: &ConeBeamGeometry, factor: usize) -> Result<ConeBeamGeometry> {
    if factor == 0 {
        return Err(Error::InvalidSpec("subsample factor must be >= 1".into()));
    }
    if factor > geom.n_views() {
        return Err(Error::InvalidSpec(format!(
            "subsample factor {factor} exceeds view count {}",
            geom.n_views()
        )));
    }
    let mut g = geom.clone();
    g.angles = geom.angles.iter().copied().step_by(factor).collect();
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn desk_spec() -> GeometrySpec {
        GeometrySpec {
            source_to_origin: 66.0,
            source_to_detector: 199.0,
            det_rows: 96,
            det_cols: 96,
            det_pixel_pitch: 0.36,
            angles: AngleSpec::Uniform { n_views: 1200, full_revolution: true },
            vol_dims: (64, 64, 64),
            voxel_size: 0.1,
            det_offset: (0.0, 0.0),
        }
    }

    #[test]
    fn uniform_angles_start_at_zero_with_even_step() {
        let g = make_circular_geometry(&desk_spec()).unwrap();
        assert_eq!(g.n_views(), 1200);
        assert_eq!(g.angles[0], 0.0);
        let step = TWO_PI / 1200.0;
        for (i, &a) in g.angles.iter().enumerate() {
            assert!((a - i as f64 * step).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_detector_rows_rejected() {
        let mut spec = desk_spec();
        spec.det_rows = 0;
        assert!(matches!(make_circular_geometry(&spec), Err(Error::InvalidSpec(_))));
    }

    #[test]
    fn walnut_scale_desk_volume_is_covered() {
        // 66/199 mm distances with a 64^3 grid of 0.1 mm voxels: the object
        // sphere has radius 3.2*sqrt(3) ~ 5.54 mm, far inside the cone.
        // Hand check: 199 * tan(asin(5.543/66)) = 16.78 mm < 96/2 * 0.36 = 17.28 mm.
        let g = make_circular_geometry(&desk_spec()).unwrap();
        let r = g.object_radius();
        assert!((r - (3.2f64 * 3.0f64.sqrt())).abs() < 1e-12);
        let spread = 199.0 * (r / 66.0).asin().tan();
        assert!(spread < 17.28 && spread > 16.0);
    }

    #[test]
    fn oversized_volume_fails_coverage() {
        let mut spec = desk_spec();
        spec.vol_dims = (256, 256, 256);
        assert!(matches!(make_circular_geometry(&spec), Err(Error::Coverage(_))));
    }

    #[test]
    fn subsample_1200_by_16_gives_75_views() {
        let g = make_circular_geometry(&desk_spec()).unwrap();
        let p = ProjectionStack::zeros(1200, 4, 4);
        let (ps, gs) = subsample_views(&p, &g, 16).unwrap();
        assert_eq!(ps.n_views, 75);
        assert_eq!(gs.n_views(), 75);
        assert_eq!(gs.angles[1], g.angles[16]);
    }

    #[test]
    fn subsample_factor_one_is_identity() {
        let mut spec = desk_spec();
        spec.angles = AngleSpec::Uniform { n_views: 10, full_revolution: true };
        let g = make_circular_geometry(&spec).unwrap();
        let data: Vec<f64> = (0..10 * 16).map(|i| i as f64).collect();
        let p = ProjectionStack::new(10, 4, 4, data).unwrap();
        let (ps, gs) = subsample_views(&p, &g, 1).unwrap();
        assert_eq!(ps, p);
        assert_eq!(gs, g);
    }

    #[test]
    fn subsample_ten_views_by_two() {
        let mut spec = desk_spec();
        spec.angles = AngleSpec::Uniform { n_views: 10, full_revolution: true };
        let g = make_circular_geometry(&spec).unwrap();
        let data: Vec<f64> = (0..10).flat_map(|v| vec![v as f64; 16]).collect();
        let p = ProjectionStack::new(10, 4, 4, data).unwrap();
        let (ps, _) = subsample_views(&p, &g, 2).unwrap();
        assert_eq!(ps.n_views, 5);
        for (v, want) in [0.0, 2.0, 4.0, 6.0, 8.0].into_iter().enumerate() {
            assert!(ps.row(v, 0).iter().all(|&x| x == want));
        }
    }

    #[test]
    fn subsample_factor_larger_than_views_is_error() {
        let mut spec = desk_spec();
        spec.angles = AngleSpec::Uniform { n_views: 10, full_revolution: true };
        let g = make_circular_geometry(&spec).unwrap();
        let p = ProjectionStack::zeros(10, 4, 4);
        assert!(subsample_views(&p, &g, 11).is_err());
        assert!(subsample_views(&p, &g, 0).is_err());
    }

    #[test]
    fn geometry_json_round_trips_bit_exactly() {
        let mut spec = desk_spec();
        spec.angles = AngleSpec::Explicit(vec![0.0, 0.1 + 1e-17, 1.0 / 3.0, 5.9]);
        spec.det_offset = (0.25, -0.125);
        let g = make_circular_geometry(&spec).unwrap();
        let g2 = ConeBeamGeometry::from_json(&g.to_json()).unwrap();
        assert_eq!(g, g2);
    }

    #[test]
    fn angular_weights_cover_the_circle() {
        let g = make_circular_geometry(&desk_spec()).unwrap();
        let total: f64 = (0..g.n_views()).map(|v| g.angular_weight(v)).sum();
        assert!((total - TWO_PI).abs() < 1e-9);
        assert!((g.angular_weight(3) - TWO_PI / 1200.0).abs() < 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn subsample_composes(a in 1usize..4, b in 1usize..4, n in 1usize..40) {
            prop_assume!(a * b <= n.max(1));
            let spec = GeometrySpec {
                angles: AngleSpec::Uniform { n_views: n, full_revolution: true },
                det_rows: 2,
                det_cols: 3,
                vol_dims: (1, 1, 1),
                ..desk_spec()
            };
            let g = make_circular_geometry(&spec).unwrap();
            let data: Vec<f64> = (0..n * 6).map(|i| i as f64).collect();
            let p = ProjectionStack::new(n, 2, 3, data).unwrap();

            let (p_a, g_a) = subsample_views(&p, &g, a).unwrap();
            let (p_ab, g_ab) = subsample_views(&p_a, &g_a, b).unwrap();
            let (p_direct, g_direct) = subsample_views(&p, &g, a * b).unwrap();
            prop_assert_eq!(p_ab, p_direct);
            prop_assert_eq!(g_ab, g_direct);
        }
    }
}
