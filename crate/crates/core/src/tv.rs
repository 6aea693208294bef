//! Total-variation denoising used as a plug-and-play prior.
//!
//! Each slice is denoised with Chambolle's dual projection for the isotropic,
//! channel-coupled TV norm `sum_p sqrt(sum_c |grad u_c(p)|^2)`, using forward
//! differences with reflective (Neumann) boundaries. Volumes are processed
//! slice-wise in the three orthogonal planes and the results averaged.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{extract_slices, scatter_slices, Axis, Slice2C, Volume};

/// Dual step size, just under the practical limit of 1/4.
pub const CHAMBOLLE_STEP: f64 = 0.248;
pub const DEFAULT_INNER_ITERS: usize = 30;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum TvMode {
    #[default]
    #[serde(rename = "three-plane-2d")]
    ThreePlane2d,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TvConfig {
    /// Denoising strength (lambda / beta inside ADMM).
    pub weight: f64,
    #[serde(default = "default_inner_iters")]
    pub inner_iters: usize,
    #[serde(default)]
    pub mode: TvMode,
}

fn default_inner_iters() -> usize {
    DEFAULT_INNER_ITERS
}

impl TvConfig {
    pub fn new(weight: f64) -> Self {
        TvConfig {
            weight,
            inner_iters: DEFAULT_INNER_ITERS,
            mode: TvMode::ThreePlane2d,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.weight.is_finite() || self.weight < 0.0 {
            return Err(Error::InvalidParam(format!(
                "TV weight must be finite and >= 0, got {}",
                self.weight
            )));
        }
        if self.inner_iters == 0 {
            return Err(Error::InvalidParam("TV inner_iters must be >= 1".into()));
        }
        Ok(())
    }
}

/// Forward difference along each in-plane direction, zero at the far edge.
fn gradient(u: &[f64], n0: usize, n1: usize, g0: &mut [f64], g1: &mut [f64]) {
    for j in 0..n1 {
        for i in 0..n0 {
            let p = i + n0 * j;
            g0[p] = if i + 1 < n0 { u[p + 1] - u[p] } else { 0.0 };
            g1[p] = if j + 1 < n1 { u[p + n0] - u[p] } else { 0.0 };
        }
    }
}

/// Negative adjoint of [`gradient`].
fn divergence(p0: &[f64], p1: &[f64], n0: usize, n1: usize, out: &mut [f64]) {
    for j in 0..n1 {
        for i in 0..n0 {
            let p = i + n0 * j;
            let mut d = 0.0;
            if i + 1 < n0 {
                d += p0[p];
            }
            if i > 0 {
                d -= p0[p - 1];
            }
            if j + 1 < n1 {
                d += p1[p];
            }
            if j > 0 {
                d -= p1[p - n0];
            }
            out[p] = d;
        }
    }
}

/// Isotropic channel-coupled total variation of a slice.
pub fn tv_value_slice(s: &Slice2C) -> f64 {
    let [n0, n1] = s.shape();
    let n = n0 * n1;
    let mut acc = vec![0.0; n];
    let mut g0 = vec![0.0; n];
    let mut g1 = vec![0.0; n];
    for c in 0..2 {
        gradient(&s.data()[c * n..(c + 1) * n], n0, n1, &mut g0, &mut g1);
        for p in 0..n {
            acc[p] += g0[p] * g0[p] + g1[p] * g1[p];
        }
    }
    acc.iter().map(|v| v.sqrt()).sum()
}

/// Mean over the three axes of the summed per-slice TV.
pub fn tv_value_volume(v: &Volume) -> f64 {
    Axis::ALL
        .iter()
        .map(|&axis| extract_slices(v, axis).iter().map(tv_value_slice).sum::<f64>())
        .sum::<f64>()
        / 3.0
}

/// Approximate minimizer of `1/2 ||u - s||^2 + weight * TV(u)`.
pub fn tv_denoise_slice(s: &Slice2C, weight: f64, inner_iters: usize) -> Slice2C {
    if weight <= 0.0 || inner_iters == 0 {
        return s.clone();
    }
    let [n0, n1] = s.shape();
    let n = n0 * n1;
    let f = s.data();
    // dual field: channel c, direction k at p[(2 * c + k) * n + pixel]
    let mut p = vec![0.0; 4 * n];
    let mut d = vec![0.0; 2 * n];
    let mut g = vec![0.0; 4 * n];
    let tau = CHAMBOLLE_STEP;
    for _ in 0..inner_iters {
        for c in 0..2 {
            let (p0, rest) = p[2 * c * n..].split_at(n);
            divergence(p0, &rest[..n], n0, n1, &mut d[c * n..(c + 1) * n]);
            for (dv, fv) in d[c * n..(c + 1) * n].iter_mut().zip(&f[c * n..(c + 1) * n]) {
                *dv -= fv / weight;
            }
            let (g0, g1) = g[2 * c * n..(2 * c + 2) * n].split_at_mut(n);
            gradient(&d[c * n..(c + 1) * n], n0, n1, g0, g1);
        }
        for px in 0..n {
            let norm = (g[px] * g[px]
                + g[n + px] * g[n + px]
                + g[2 * n + px] * g[2 * n + px]
                + g[3 * n + px] * g[3 * n + px])
                .sqrt();
            let denom = 1.0 + tau * norm;
            for k in 0..4 {
                let i = k * n + px;
                p[i] = (p[i] + tau * g[i]) / denom;
            }
        }
    }
    let mut out = f.to_vec();
    for c in 0..2 {
        let (p0, rest) = p[2 * c * n..].split_at(n);
        divergence(p0, &rest[..n], n0, n1, &mut d[c * n..(c + 1) * n]);
        for (o, dv) in out[c * n..(c + 1) * n].iter_mut().zip(&d[c * n..(c + 1) * n]) {
            *o -= weight * dv;
        }
    }
    Slice2C::from_planes(s.shape(), out).expect("shape preserved")
}

/// Three-plane TV denoising: the average of slice-wise denoising along x, y and z.
pub fn tv_denoise_volume(v: &Volume, cfg: &TvConfig) -> Result<Volume> {
    cfg.validate()?;
    if cfg.weight == 0.0 {
        return Ok(v.clone());
    }
    let mut acc = Volume::zeros(v.shape()).with_voxel_size(v.voxel_size());
    for axis in Axis::ALL {
        let denoised: Vec<Slice2C> = extract_slices(v, axis)
            .iter()
            .map(|s| tv_denoise_slice(s, cfg.weight, cfg.inner_iters))
            .collect();
        acc.axpy(1.0, &scatter_slices(&denoised, axis, v.shape())?);
    }
    let out = acc.scale(1.0 / 3.0);
    out.ensure_finite("TV denoiser output")?;
    Ok(out)
}
