//! Image-quality metrics on voxel magnitudes.

use crate::error::{Error, Result};
use crate::volume::Volume;

pub const PSNR_CAP_DB: f64 = 200.0;
pub const SSIM_WINDOW: usize = 8;

fn check(a: &Volume, b: &Volume) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("metric inputs differ: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

pub fn mse(a: &Volume, b: &Volume) -> Result<f64> {
    check(a, b)?;
    let sum: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x.norm() - y.norm()).powi(2)).sum();
    Ok(sum / a.len() as f64)
}

/// `10 log10(peak^2 / MSE)`, capped at [`PSNR_CAP_DB`].
pub fn psnr(a: &Volume, b: &Volume, peak: f64) -> Result<f64> {
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (peak * peak / m).log10()).min(PSNR_CAP_DB))
}

/// `|a - b| / |b|` on magnitudes; `b` is the reference.
pub fn nrmse(a: &Volume, b: &Volume) -> Result<f64> {
    check(a, b)?;
    let num: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x.norm() - y.norm()).powi(2)).sum();
    let den: f64 = b.data().iter().map(|y| y.norm_sqr()).sum();
    if den == 0.0 {
        return Ok(if num == 0.0 { 0.0 } else { f64::INFINITY });
    }
    Ok((num / den).sqrt())
}

/// Mean SSIM over non-overlapping 8x8x8 windows (truncated at the borders).
pub fn ssim(a: &Volume, b: &Volume, peak: f64) -> Result<f64> {
    check(a, b)?;
    let c1 = (0.01 * peak).powi(2);
    let c2 = (0.03 * peak).powi(2);
    let [nx, ny, nz] = a.shape();
    let (ma, mb) = (a.magnitude(), b.magnitude());
    let w = SSIM_WINDOW;
    let mut total = 0.0;
    let mut count = 0usize;
    for z0 in (0..nz).step_by(w) {
        for y0 in (0..ny).step_by(w) {
            for x0 in (0..nx).step_by(w) {
                let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                let mut n = 0usize;
                for z in z0..(z0 + w).min(nz) {
                    for y in y0..(y0 + w).min(ny) {
                        for x in x0..(x0 + w).min(nx) {
                            let i = a.offset(x, y, z);
                            let (p, q) = (ma[i], mb[i]);
                            sa += p;
                            sb += q;
                            saa += p * p;
                            sbb += q * q;
                            sab += p * q;
                            n += 1;
                        }
                    }
                }
                let n = n as f64;
                let (mu_a, mu_b) = (sa / n, sb / n);
                let var_a = (saa / n - mu_a * mu_a).max(0.0);
                let var_b = (sbb / n - mu_b * mu_b).max(0.0);
                let cov = sab / n - mu_a * mu_b;
                total += ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2))
                    / ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2));
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}
