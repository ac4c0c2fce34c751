//! Data-consistency CG solve, the HQS outer loop, and the quadratically
//! regularized least-squares baseline.
//!
//! The HQS iteration alternates `z = D(x)` (a stage denoiser applied
//! slice-by-slice) with the data-consistency solve
//! `(AᵀA + βI) x = Aᵀb + βz`, approximated by a fixed number of CG steps
//! warm-started from the previous outer iterate. Per outer iteration the
//! trace records the quadratic `½‖Ax−b‖² + (β/2)‖x−z‖²` before/after the DC
//! step and after every CG step.

use serde::{Deserialize, Serialize};

use crate::denoise::{apply_denoiser_volume, DenoiserBank};
use crate::error::{Error, Result};
use crate::geometry::ConeBeamGeometry;
use crate::metrics::psnr;
use crate::projector::{back_project, forward_project};
use crate::types::{dot, ProjectionStack, Volume3D};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightMode {
    /// One parameter set referenced by every stage.
    Shared,
    /// A separately trained parameter set per stage.
    Unshared,
}

/// Configuration of the HQS loop (outer iterations K, penalty β, CG budget,
/// and the denoiser bound to each stage).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HqsConfig {
    /// Outer iteration count K.
    pub outer_iters: usize,
    /// Penalty weight β balancing denoising against data consistency.
    pub beta: f64,
    /// CG steps per data-consistency solve.
    pub cg_iters: usize,
    pub weight_mode: WeightMode,
    /// Stage denoiser references, one per outer iteration (all equal when
    /// shared).
    pub denoiser_ids: Vec<String>,
    /// Clamp negatives in the final volume only; the update equations
    /// themselves never project.
    #[serde(default)]
    pub final_nonneg_clamp: bool,
}

impl Default for HqsConfig {
    fn default() -> Self {
        Self {
            outer_iters: 3,
            beta: 5e-2,
            cg_iters: 10,
            weight_mode: WeightMode::Unshared,
            denoiser_ids: vec!["stage1".into(), "stage2".into(), "stage3".into()],
            final_nonneg_clamp: false,
        }
    }
}

impl HqsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0) {
            return Err(Error::InvalidSpec(format!("beta must be > 0, got {}", self.beta)));
        }
        if self.cg_iters == 0 {
            return Err(Error::InvalidSpec("cg_iters must be >= 1".into()));
        }
        if self.denoiser_ids.len() != self.outer_iters {
            return Err(Error::InvalidSpec(format!(
                "{} denoiser ids for K = {} iterations",
                self.denoiser_ids.len(),
                self.outer_iters
            )));
        }
        if self.weight_mode == WeightMode::Shared
            && self.denoiser_ids.windows(2).any(|w| w[0] != w[1])
        {
            return Err(Error::InvalidSpec(
                "shared weight mode requires identical denoiser ids".into(),
            ));
        }
        Ok(())
    }
}

/// Per-outer-iteration observability record.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    /// ½‖Ax−b‖² + (β/2)‖x−z‖² at the warm start (x = xₙ, z = zₙ₊₁).
    pub objective_before_dc: f64,
    /// Same quadratic at x = xₙ₊₁.
    pub objective_after_dc: f64,
    /// ½‖Axₙ₊₁ − b‖².
    pub data_fidelity: f64,
    /// CG residual norm after each step.
    pub cg_residual_norms: Vec<f64>,
    /// The quadratic after each CG step; non-increasing.
    pub cg_objectives: Vec<f64>,
    pub psnr_db: Option<f64>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct ReconTrace {
    pub records: Vec<IterationRecord>,
}

impl ReconTrace {
    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("iteration,objective_before_dc,objective_after_dc,data_fidelity,psnr\n");
        for r in &self.records {
            let psnr = r.psnr_db.map(|p| format!("{p}")).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.iteration, r.objective_before_dc, r.objective_after_dc, r.data_fidelity, psnr
            ));
        }
        out
    }
}

/// Fixed-iteration CG on an SPD operator. `observe(step, residual_norm, x)`
/// runs after every step. Stops early only on numerical breakdown (zero or
/// non-finite curvature), never on a residual tolerance.
fn cg_fixed<Op>(
    apply: Op,
    rhs: &[f64],
    x0: &[f64],
    iters: usize,
    mut observe: impl FnMut(usize, f64, &[f64]),
) -> Vec<f64>
where
    Op: Fn(&[f64]) -> Vec<f64>,
{
    let mut x = x0.to_vec();
    let ax = apply(&x);
    let mut r: Vec<f64> = rhs.iter().zip(&ax).map(|(b, a)| b - a).collect();
    let mut p = r.clone();
    let mut rs = dot(&r, &r);
    for step in 0..iters {
        if rs == 0.0 || !rs.is_finite() {
            break;
        }
        let ap = apply(&p);
        let pap = dot(&p, &ap);
        if !(pap > 0.0) || !pap.is_finite() {
            break;
        }
        let alpha = rs / pap;
        for (xi, pi) in x.iter_mut().zip(&p) {
            *xi += alpha * pi;
        }
        for (ri, api) in r.iter_mut().zip(&ap) {
            *ri -= alpha * api;
        }
        let rs_new = dot(&r, &r);
        observe(step, rs_new.sqrt(), &x);
        let beta = rs_new / rs;
        for (pi, ri) in p.iter_mut().zip(&r) {
            *pi = ri + beta * *pi;
        }
        rs = rs_new;
    }
    x
}

fn check_problem_dims(
    geom: &ConeBeamGeometry,
    b: &ProjectionStack,
    vols: &[&Volume3D],
) -> Result<()> {
    if b.n_views != geom.n_views() || b.det_rows != geom.det_rows || b.det_cols != geom.det_cols {
        return Err(Error::DimMismatch(format!(
            "measurements {}x{}x{} vs geometry {}x{}x{}",
            b.n_views,
            b.det_rows,
            b.det_cols,
            geom.n_views(),
            geom.det_rows,
            geom.det_cols
        )));
    }
    for v in vols {
        if v.dims != geom.vol_dims || v.voxel_size != geom.voxel_size {
            return Err(Error::DimMismatch(format!(
                "volume {:?} @ {} vs geometry {:?} @ {}",
                v.dims, v.voxel_size, geom.vol_dims, geom.voxel_size
            )));
        }
    }
    Ok(())
}

fn as_volume(geom: &ConeBeamGeometry, data: Vec<f64>) -> Volume3D {
    Volume3D { dims: geom.vol_dims, voxel_size: geom.voxel_size, data }
}

fn apply_normal(geom: &ConeBeamGeometry, beta: f64, x: &[f64]) -> Vec<f64> {
    let vol = as_volume(geom, x.to_vec());
    let ax = forward_project(&vol, geom).expect("dims checked");
    let mut atax = back_project(&ax, geom).expect("dims checked").data;
    for (o, xi) in atax.iter_mut().zip(x) {
        *o += beta * xi;
    }
    atax
}

/// ½‖Ax−b‖² + (β/2)‖x−z‖², the per-iteration HQS quadratic.
pub fn hqs_objective(
    x: &Volume3D,
    z: &Volume3D,
    b: &ProjectionStack,
    geom: &ConeBeamGeometry,
    beta: f64,
) -> Result<f64> {
    let ax = forward_project(x, geom)?;
    let fid: f64 = ax.data.iter().zip(&b.data).map(|(a, bi)| (a - bi) * (a - bi)).sum();
    let prox: f64 = x.data.iter().zip(&z.data).map(|(a, bi)| (a - bi) * (a - bi)).sum();
    Ok(0.5 * fid + 0.5 * beta * prox)
}

/// Per-solve CG observability: residual norms and the HQS quadratic after
/// each step (index 0 is the warm-start value).
#[derive(Clone, Debug, Default)]
pub struct CgTrace {
    pub residual_norms: Vec<f64>,
    pub objectives: Vec<f64>,
}

/// `cg_iters` CG steps on `(AᵀA + βI) x = Aᵀb + βz`, warm-started from `x0`.
pub fn cg_normal_solve(
    z: &Volume3D,
    b: &ProjectionStack,
    geom: &ConeBeamGeometry,
    beta: f64,
    cg_iters: usize,
    x0: &Volume3D,
) -> Result<Volume3D> {
    Ok(cg_normal_solve_traced(z, b, geom, beta, cg_iters, x0, false)?.0)
}

/// [`cg_normal_solve`] that also records the per-step residual norms, and the
/// per-step quadratic when `record_objectives` is set (each evaluation costs
/// one extra forward projection).
pub fn cg_normal_solve_traced(
    z: &Volume3D,
    b: &ProjectionStack,
    geom: &ConeBeamGeometry,
    beta: f64,
    cg_iters: usize,
    x0: &Volume3D,
    record_objectives: bool,
) -> Result<(Volume3D, CgTrace)> {
    if !(beta > 0.0) {
        return Err(Error::InvalidSpec(format!("beta must be > 0, got {beta}")));
    }
    if cg_iters == 0 {
        return Err(Error::InvalidSpec("cg_iters must be >= 1".into()));
    }
    check_problem_dims(geom, b, &[z, x0])?;
    z.ensure_finite("cg_normal_solve z")?;
    b.ensure_finite("cg_normal_solve b")?;
    x0.ensure_finite("cg_normal_solve x0")?;

    let mut rhs = back_project(b, geom)?.data;
    for (r, zi) in rhs.iter_mut().zip(&z.data) {
        *r += beta * zi;
    }

    let mut trace = CgTrace::default();
    if record_objectives {
        trace.objectives.push(hqs_objective(x0, z, b, geom, beta)?);
    }
    let mut objectives = Vec::new();
    let x = cg_fixed(
        |v| apply_normal(geom, beta, v),
        &rhs,
        &x0.data,
        cg_iters,
        |_, rn, xk| {
            trace.residual_norms.push(rn);
            if record_objectives {
                let xv = as_volume(geom, xk.to_vec());
                objectives
                    .push(hqs_objective(&xv, z, b, geom, beta).expect("dims already checked"));
            }
        },
    );
    trace.objectives.extend(objectives);
    Ok((as_volume(geom, x), trace))
}

/// HQS reconstruction with an arbitrary per-stage denoising function
/// (`denoise(stage, x)`); the property tests drive this directly.
pub fn hqs_reconstruct_with<D>(
    b: &ProjectionStack,
    geom: &ConeBeamGeometry,
    outer_iters: usize,
    beta: f64,
    cg_iters: usize,
    denoise: D,
    x_init: &Volume3D,
    reference: Option<&Volume3D>,
) -> Result<(Volume3D, ReconTrace)>
where
    D: Fn(usize, &Volume3D) -> Result<Volume3D>,
{
    check_problem_dims(geom, b, &[x_init])?;
    let data_range = reference.map(|r| r.data.iter().cloned().fold(f64::MIN, f64::max).max(1e-12));
    let mut x = x_init.clone();
    let mut trace = ReconTrace::default();
    for n in 0..outer_iters {
        let z = denoise(n, &x)?;
        if !z.same_grid(&x) {
            return Err(Error::DimMismatch(format!(
                "stage {n} denoiser changed the grid: {:?} -> {:?}",
                x.dims, z.dims
            )));
        }
        let (x_next, cg) = cg_normal_solve_traced(&z, b, geom, beta, cg_iters, &x, true)?;
        let ax = forward_project(&x_next, geom)?;
        let fid: f64 =
            0.5 * ax.data.iter().zip(&b.data).map(|(a, bi)| (a - bi) * (a - bi)).sum::<f64>();
        let psnr_db = match (reference, data_range) {
            (Some(r), Some(l)) => Some(psnr(&x_next.data, &r.data, l)?),
            _ => None,
        };
        trace.records.push(IterationRecord {
            iteration: n + 1,
            objective_before_dc: cg.objectives[0],
            objective_after_dc: *cg.objectives.last().expect("at least the warm start"),
            data_fidelity: fid,
            cg_residual_norms: cg.residual_norms,
            cg_objectives: cg.objectives,
            psnr_db,
        });
        x = x_next;
    }
    Ok((x, trace))
}

/// The learnt HQS loop: for n = 0..K−1, `z = D_{θₙ₊₁}(xₙ)` slice-by-slice,
/// then `xₙ₊₁ = cg_normal_solve(z, b, β, cg_iters, warm start xₙ)`.
/// With K = 0 the initializer is returned unchanged.
pub fn hqs_reconstruct(
    b: &ProjectionStack,
    geom: &ConeBeamGeometry,
    cfg: &HqsConfig,
    denoisers: &DenoiserBank,
    x_init: &Volume3D,
    reference: Option<&Volume3D>,
) -> Result<(Volume3D, ReconTrace)> {
    cfg.validate()?;
    let missing: Vec<String> = cfg
        .denoiser_ids
        .iter()
        .filter(|id| !denoisers.contains(id.as_str()))
        .cloned()
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingDenoiser(missing));
    }
    let (mut x, trace) = hqs_reconstruct_with(
        b,
        geom,
        cfg.outer_iters,
        cfg.beta,
        cfg.cg_iters,
        |stage, xn| {
            let params = denoisers
                .get(&cfg.denoiser_ids[stage])
                .expect("checked above");
            apply_denoiser_volume(params, xn)
        },
        x_init,
        reference,
    )?;
    if cfg.final_nonneg_clamp {
        for v in &mut x.data {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
    }
    Ok((x, trace))
}

/// Forward-difference gradient components of a volume (replicate boundary:
/// the last difference along each axis is zero).
pub fn grad_forward(vol: &Volume3D) -> [Vec<f64>; 3] {
    let (nx, ny, nz) = vol.dims;
    let n = vol.len();
    let mut g = [vec![0.0; n], vec![0.0; n], vec![0.0; n]];
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let idx = vol.idx(i, j, k);
                if i + 1 < nx {
                    g[0][idx] = vol.data[idx + 1] - vol.data[idx];
                }
                if j + 1 < ny {
                    g[1][idx] = vol.data[idx + nx] - vol.data[idx];
                }
                if k + 1 < nz {
                    g[2][idx] = vol.data[idx + nx * ny] - vol.data[idx];
                }
            }
        }
    }
    g
}

/// Exact adjoint of [`grad_forward`].
fn grad_adjoint(g: &[Vec<f64>; 3], dims: (usize, usize, usize)) -> Vec<f64> {
    let (nx, ny, nz) = dims;
    let mut out = vec![0.0; nx * ny * nz];
    let strides = [1usize, nx, nx * ny];
    let counts = [nx, ny, nz];
    for axis in 0..3 {
        let stride = strides[axis];
        for k in 0..nz {
            for j in 0..ny {
                for i in 0..nx {
                    let idx = i + nx * (j + ny * k);
                    let pos = [i, j, k][axis];
                    let v = g[axis][idx];
                    if pos + 1 < counts[axis] {
                        out[idx] -= v;
                        out[idx + stride] += v;
                    }
                }
            }
        }
    }
    out
}

/// ‖Gx‖², the quadratic smoothness energy used by the baseline.
pub fn gradient_energy(vol: &Volume3D) -> f64 {
    grad_forward(vol).iter().map(|g| dot(g, g)).sum()
}

/// Regularized least squares `(AᵀA + λGᵀG) x = Aᵀb` by fixed-iteration CG;
/// G is the 3D forward-difference gradient.
pub fn quadratic_mbir_baseline(
    b: &ProjectionStack,
    geom: &ConeBeamGeometry,
    lambda: f64,
    iters: usize,
    x0: &Volume3D,
) -> Result<Volume3D> {
    if lambda < 0.0 || !lambda.is_finite() {
        return Err(Error::InvalidSpec(format!("lambda must be >= 0, got {lambda}")));
    }
    if iters == 0 {
        return Err(Error::InvalidSpec("iters must be >= 1".into()));
    }
    check_problem_dims(geom, b, &[x0])?;
    b.ensure_finite("baseline b")?;
    x0.ensure_finite("baseline x0")?;

    let rhs = back_project(b, geom)?.data;
    let apply = |x: &[f64]| {
        let vol = as_volume(geom, x.to_vec());
        let ax = forward_project(&vol, geom).expect("dims checked");
        let mut out = back_project(&ax, geom).expect("dims checked").data;
        if lambda > 0.0 {
            let gtg = grad_adjoint(&grad_forward(&vol), geom.vol_dims);
            for (o, g) in out.iter_mut().zip(&gtg) {
                *o += lambda * g;
            }
        }
        out
    };
    let x = cg_fixed(apply, &rhs, &x0.data, iters, |_, _, _| {});
    Ok(as_volume(geom, x))
}
