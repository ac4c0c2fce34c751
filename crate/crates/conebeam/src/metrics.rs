//! PSNR and SSIM image-quality metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::Volume3D;

/// Standard SSIM configuration: 11×11 Gaussian window with σ = 1.5 and
/// stabilizers c₁ = (k₁·L)², c₂ = (k₂·L)².
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct SsimConfig {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub data_range: f64,
}

impl SsimConfig {
    pub fn with_data_range(data_range: f64) -> Self {
        Self { window: 11, sigma: 1.5, k1: 0.01, k2: 0.03, data_range }
    }
}

/// Peak signal-to-noise ratio in dB over all elements:
/// `10 log10(data_range² / MSE)`, with +∞ when the arrays are identical.
pub fn psnr(x: &[f64], reference: &[f64], data_range: f64) -> Result<f64> {
    if x.len() != reference.len() {
        return Err(Error::DimMismatch(format!(
            "psnr inputs: {} vs {} elements",
            x.len(),
            reference.len()
        )));
    }
    if !(data_range > 0.0) {
        return Err(Error::InvalidSpec(format!("data_range must be > 0, got {data_range}")));
    }
    let mse: f64 =
        x.iter().zip(reference).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / x.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (data_range * data_range / mse).log10())
}

fn gaussian_window(n: usize, sigma: f64) -> Vec<f64> {
    let c = (n as f64 - 1.0) / 2.0;
    let mut w: Vec<f64> = (0..n)
        .map(|i| {
            let d = i as f64 - c;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let sum: f64 = w.iter().sum();
    for v in &mut w {
        *v /= sum;
    }
    w
}

/// Mean local SSIM over all positions where the window fits fully inside the
/// image (`height × width`, row-major).
pub fn ssim(
    x: &[f64],
    reference: &[f64],
    height: usize,
    width: usize,
    cfg: &SsimConfig,
) -> Result<f64> {
    if x.len() != height * width || reference.len() != height * width {
        return Err(Error::DimMismatch(format!(
            "ssim inputs: {} and {} elements vs {height}x{width}",
            x.len(),
            reference.len()
        )));
    }
    let w = cfg.window;
    if height < w || width < w {
        return Err(Error::DimMismatch(format!(
            "image {height}x{width} smaller than the {w}x{w} window"
        )));
    }
    if !(cfg.data_range > 0.0) {
        return Err(Error::InvalidSpec("ssim data_range must be > 0".into()));
    }
    let g = gaussian_window(w, cfg.sigma);
    let c1 = (cfg.k1 * cfg.data_range).powi(2);
    let c2 = (cfg.k2 * cfg.data_range).powi(2);

    // Separable Gaussian: filter rows then columns for the five local
    // moments, over valid positions only.
    let oh = height - w + 1;
    let ow = width - w + 1;
    let horiz = |img: &dyn Fn(usize) -> f64| -> Vec<f64> {
        let mut out = vec![0.0; height * ow];
        for r in 0..height {
            for c in 0..ow {
                let mut s = 0.0;
                for (t, gt) in g.iter().enumerate() {
                    s += gt * img(r * width + c + t);
                }
                out[r * ow + c] = s;
            }
        }
        out
    };
    let vert = |tmp: &[f64]| -> Vec<f64> {
        let mut out = vec![0.0; oh * ow];
        for r in 0..oh {
            for c in 0..ow {
                let mut s = 0.0;
                for (t, gt) in g.iter().enumerate() {
                    s += gt * tmp[(r + t) * ow + c];
                }
                out[r * ow + c] = s;
            }
        }
        out
    };
    let mu_x = vert(&horiz(&|i| x[i]));
    let mu_y = vert(&horiz(&|i| reference[i]));
    let xx = vert(&horiz(&|i| x[i] * x[i]));
    let yy = vert(&horiz(&|i| reference[i] * reference[i]));
    let xy = vert(&horiz(&|i| x[i] * reference[i]));

    let mut total = 0.0;
    for i in 0..oh * ow {
        let mx = mu_x[i];
        let my = mu_y[i];
        let vx = xx[i] - mx * mx;
        let vy = yy[i] - my * my;
        let cov = xy[i] - mx * my;
        total += ((2.0 * mx * my + c1) * (2.0 * cov + c2))
            / ((mx * mx + my * my + c1) * (vx + vy + c2));
    }
    Ok(total / (oh * ow) as f64)
}

/// Volume SSIM: mean of the 2D SSIM over the axial slices.
pub fn ssim_volume(x: &Volume3D, reference: &Volume3D, cfg: &SsimConfig) -> Result<f64> {
    if x.dims != reference.dims {
        return Err(Error::DimMismatch(format!(
            "ssim_volume: {:?} vs {:?}",
            x.dims, reference.dims
        )));
    }
    let (nx, ny, nz) = x.dims;
    let mut total = 0.0;
    for k in 0..nz {
        total += ssim(x.slice(k), reference.slice(k), ny, nx, cfg)?;
    }
    Ok(total / nz as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn identical_inputs_hit_the_sentinels() {
        let a = vec![0.3, 0.5, 0.9, 0.1];
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), f64::INFINITY);
        let img: Vec<f64> = (0..16 * 16).map(|i| (i % 7) as f64 / 7.0).collect();
        let s = ssim(&img, &img, 16, 16, &SsimConfig::with_data_range(1.0)).unwrap();
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn uniform_offset_gives_exactly_twenty_db() {
        let a = vec![0.25; 100];
        let b: Vec<f64> = a.iter().map(|v| v + 0.1).collect();
        let p = psnr(&b, &a, 1.0).unwrap();
        assert!((p - 20.0).abs() < 1e-12);
    }

    #[test]
    fn psnr_matches_scalar_reference_and_is_symmetric() {
        let mut rng = rand::rngs::StdRng::seed_from_u64(4);
        let a: Vec<f64> = (0..500).map(|_| rng.gen_range(0.0..1.0)).collect();
        let b: Vec<f64> = (0..500).map(|_| rng.gen_range(0.0..1.0)).collect();
        // Independent scalar route: accumulate MSE one element at a time.
        let mut mse = 0.0;
        for i in 0..a.len() {
            mse += (a[i] - b[i]).powi(2) / a.len() as f64;
        }
        let want = 10.0 * (2.5f64 * 2.5 / mse).log10();
        let got = psnr(&a, &b, 2.5).unwrap();
        assert!((got - want).abs() / want.abs() < 1e-9);
        assert_eq!(got, psnr(&b, &a, 2.5).unwrap());
    }

    #[test]
    fn psnr_decreases_with_noise_amplitude() {
        let mut rng = rand::rngs::StdRng::seed_from_u64(5);
        let img: Vec<f64> = (0..400).map(|_| rng.gen_range(0.0..1.0)).collect();
        let noise: Vec<f64> = (0..400).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut last = f64::INFINITY;
        for amp in [0.01, 0.1, 0.5] {
            let noisy: Vec<f64> =
                img.iter().zip(&noise).map(|(v, n)| v + amp * n).collect();
            let p = psnr(&noisy, &img, 1.0).unwrap();
            assert!(p < last, "psnr {p} not below {last} at amp {amp}");
            last = p;
        }
    }

    #[test]
    fn constant_images_match_the_closed_form() {
        let (a, b) = (0.6, 0.2);
        let x = vec![a; 15 * 15];
        let y = vec![b; 15 * 15];
        let cfg = SsimConfig::with_data_range(1.0);
        let c1 = (cfg.k1 * cfg.data_range).powi(2);
        let want = (2.0 * a * b + c1) / (a * a + b * b + c1);
        let got = ssim(&x, &y, 15, 15, &cfg).unwrap();
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }

    /// Brute-force windowed oracle: direct 2D Gaussian-weighted sums per
    /// position, no separability tricks.
    #[test]
    fn ssim_matches_direct_summation_oracle() {
        let (h, wdt) = (24, 20);
        let mut rng = rand::rngs::StdRng::seed_from_u64(11);
        let x: Vec<f64> = (0..h * wdt).map(|_| rng.gen_range(0.0..1.0)).collect();
        let y: Vec<f64> = x.iter().map(|v| v + rng.gen_range(-0.1..0.1)).collect();
        let cfg = SsimConfig::with_data_range(1.0);

        let g1 = gaussian_window(cfg.window, cfg.sigma);
        let mut g2 = vec![0.0; cfg.window * cfg.window];
        for r in 0..cfg.window {
            for c in 0..cfg.window {
                g2[r * cfg.window + c] = g1[r] * g1[c];
            }
        }
        let c1 = (cfg.k1 * cfg.data_range).powi(2);
        let c2 = (cfg.k2 * cfg.data_range).powi(2);
        let (oh, ow) = (h - cfg.window + 1, wdt - cfg.window + 1);
        let mut total = 0.0;
        for r0 in 0..oh {
            for c0 in 0..ow {
                let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for r in 0..cfg.window {
                    for c in 0..cfg.window {
                        let wg = g2[r * cfg.window + c];
                        let xv = x[(r0 + r) * wdt + c0 + c];
                        let yv = y[(r0 + r) * wdt + c0 + c];
                        mx += wg * xv;
                        my += wg * yv;
                        sxx += wg * xv * xv;
                        syy += wg * yv * yv;
                        sxy += wg * xv * yv;
                    }
                }
                let (vx, vy, cov) = (sxx - mx * mx, syy - my * my, sxy - mx * my);
                total += ((2.0 * mx * my + c1) * (2.0 * cov + c2))
                    / ((mx * mx + my * my + c1) * (vx + vy + c2));
            }
        }
        let want = total / (oh * ow) as f64;
        let got = ssim(&x, &y, h, wdt, &cfg).unwrap();
        assert!((got - want).abs() < 1e-6, "{got} vs oracle {want}");
    }

    #[test]
    fn undersized_image_is_rejected() {
        let img = vec![0.0; 10 * 10];
        assert!(ssim(&img, &img, 10, 10, &SsimConfig::with_data_range(1.0)).is_err());
        assert!(psnr(&img, &img[..99], 1.0).is_err());
    }
}
