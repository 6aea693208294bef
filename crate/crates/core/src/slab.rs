//! Slab geometry, excitation profiles and the profile-encoding operator.
//!
//! Slab `k` nominally covers global slices `[k*D, (k+1)*D)`. Because every slab
//! is encoded over a field of view of `D` slices, the signal measured at
//! in-slab position `z0` of slab `k` is the profile-weighted sum over the
//! aliasing group `{z0 + m*D : m in 0..n_slab}`:
//!
//! ```text
//! I_k(x, y, z0) = sum_m S_k(z0 + m*D) * rho(x, y, z0 + m*D)
//! ```
//!
//! The operator is block diagonal over `(x, y, z0)`, and for a fixed `z0` every
//! in-plane column shares the same small `K_acq x n_slab` group matrix.

use std::f64::consts::PI;
use std::ops::Range;

use nalgebra::{DMatrix, SymmetricEigen};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::Volume;

/// Upper bound on profile gain; leaves room for main-lobe ripple overshoot.
pub const MAX_PROFILE_GAIN: f64 = 1.25;

/// Relative Tikhonov floor used by unpenalized solves, scaled by the largest
/// squared group-matrix norm.
pub const TIKHONOV_REL: f64 = 1e-10;

/// Main-lobe ripple period, in cycles per slab thickness.
const RIPPLE_CYCLES: f64 = 1.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SlabGeometry {
    pub n_slab: usize,
    pub slices_per_slab: usize,
}

impl SlabGeometry {
    pub fn new(n_slab: usize, slices_per_slab: usize) -> Result<Self> {
        if n_slab == 0 || slices_per_slab == 0 {
            return Err(Error::InvalidParam(format!(
                "slab geometry needs n_slab >= 1 and slices_per_slab >= 1, got {n_slab} x {slices_per_slab}"
            )));
        }
        Ok(SlabGeometry {
            n_slab,
            slices_per_slab,
        })
    }

    /// Total slice count covered without oversampling.
    pub fn nz(&self) -> usize {
        self.n_slab * self.slices_per_slab
    }

    /// Global slice range nominally excited by slab `k`.
    pub fn window(&self, k: usize) -> Range<usize> {
        k * self.slices_per_slab..(k + 1) * self.slices_per_slab
    }

    pub fn full_mask(&self) -> Vec<bool> {
        vec![true; self.n_slab]
    }

    fn check_volume(&self, v: &Volume) -> Result<()> {
        if v.shape()[2] != self.nz() {
            return Err(Error::Shape(format!(
                "volume depth {} does not match {} slabs x {} slices",
                v.shape()[2],
                self.n_slab,
                self.slices_per_slab
            )));
        }
        Ok(())
    }

    fn check_mask(&self, mask: &[bool]) -> Result<()> {
        if mask.len() != self.n_slab {
            return Err(Error::Shape(format!(
                "mask has {} entries for {} slabs",
                mask.len(),
                self.n_slab
            )));
        }
        if !mask.iter().any(|&a| a) {
            return Err(Error::InvalidParam("at least one slab must be acquired".into()));
        }
        Ok(())
    }
}

/// Excitation weights `S_k(z)` for every slab over the full field of view.
#[derive(Clone, Debug, PartialEq)]
pub struct SlabProfileSet {
    geometry: SlabGeometry,
    weights: Vec<f64>,
}

impl SlabProfileSet {
    /// `weights` is slab-major: `weights[k * nz + z]`.
    pub fn new(geometry: SlabGeometry, weights: Vec<f64>) -> Result<Self> {
        let nz = geometry.nz();
        if weights.len() != geometry.n_slab * nz {
            return Err(Error::Shape(format!(
                "{} profile weights for {} slabs x {nz} slices",
                weights.len(),
                geometry.n_slab
            )));
        }
        if let Some(i) = weights
            .iter()
            .position(|w| !w.is_finite() || *w < 0.0 || *w > MAX_PROFILE_GAIN)
        {
            return Err(Error::InvalidParam(format!(
                "profile weight {} at slab {}, slice {} outside [0, {MAX_PROFILE_GAIN}]",
                weights[i],
                i / nz,
                i % nz
            )));
        }
        for k in 0..geometry.n_slab {
            let row = &weights[k * nz..(k + 1) * nz];
            let window = geometry.window(k);
            let inside = row[window.clone()].iter().cloned().fold(0.0, f64::max);
            let outside = row
                .iter()
                .enumerate()
                .filter(|(z, _)| !window.contains(z))
                .map(|(_, &w)| w)
                .fold(0.0, f64::max);
            if outside > inside {
                return Err(Error::InvalidParam(format!(
                    "profile of slab {k} peaks outside its own window ({outside} > {inside})"
                )));
            }
        }
        Ok(SlabProfileSet { geometry, weights })
    }

    /// Ideal rectangular profiles.
    pub fn rect(geometry: SlabGeometry) -> Self {
        let nz = geometry.nz();
        let mut weights = vec![0.0; geometry.n_slab * nz];
        for k in 0..geometry.n_slab {
            for z in geometry.window(k) {
                weights[k * nz + z] = 1.0;
            }
        }
        SlabProfileSet { geometry, weights }
    }

    pub fn geometry(&self) -> SlabGeometry {
        self.geometry
    }

    #[inline]
    pub fn weight(&self, k: usize, z: usize) -> f64 {
        self.weights[k * self.geometry.nz() + z]
    }

    pub fn profile(&self, k: usize) -> &[f64] {
        let nz = self.geometry.nz();
        &self.weights[k * nz..(k + 1) * nz]
    }

    /// Rows: acquired slabs ascending; columns: alias index `m` ascending.
    pub fn group_matrix(&self, z0: usize, mask: &[bool]) -> DMatrix<f64> {
        assert!(z0 < self.geometry.slices_per_slab, "in-slab index out of range");
        let d = self.geometry.slices_per_slab;
        let rows: Vec<usize> = acquired(mask).collect();
        DMatrix::from_fn(rows.len(), self.geometry.n_slab, |r, m| {
            self.weight(rows[r], z0 + m * d)
        })
    }

    /// Absolute Tikhonov floor `TIKHONOV_REL * max_g ||G_g||^2` for a mask.
    pub fn tikhonov_floor(&self, mask: &[bool]) -> f64 {
        (0..self.geometry.slices_per_slab)
            .map(|z0| {
                let g = self.group_matrix(z0, mask);
                spectral_norm_sqr(&g)
            })
            .fold(0.0, f64::max)
            * TIKHONOV_REL
    }

    /// Condition number of every group matrix (`inf` when rank deficient).
    pub fn group_condition_numbers(&self, mask: &[bool]) -> Vec<f64> {
        (0..self.geometry.slices_per_slab)
            .map(|z0| {
                let g = self.group_matrix(z0, mask);
                if g.nrows() < g.ncols() {
                    return f64::INFINITY;
                }
                let sv = g.singular_values();
                let max = sv.iter().cloned().fold(0.0, f64::max);
                let min = sv.iter().cloned().fold(f64::INFINITY, f64::min);
                if min > 0.0 {
                    max / min
                } else {
                    f64::INFINITY
                }
            })
            .collect()
    }
}

fn spectral_norm_sqr(g: &DMatrix<f64>) -> f64 {
    let gtg = g.transpose() * g;
    SymmetricEigen::new(gtg)
        .eigenvalues
        .iter()
        .cloned()
        .fold(0.0, f64::max)
}

fn acquired(mask: &[bool]) -> impl Iterator<Item = usize> + '_ {
    mask.iter().enumerate().filter(|(_, &a)| a).map(|(k, _)| k)
}

/// Free-function form of [`SlabProfileSet::group_matrix`].
pub fn group_matrix(profiles: &SlabProfileSet, z0: usize, mask: &[bool]) -> DMatrix<f64> {
    profiles.group_matrix(z0, mask)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProfileModel {
    Rect,
    Smooth,
}

/// Parametric stand-in for calibrated slab profiles.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
/// Fields missing from a serialized spec take the `Default` values.
#[serde(deny_unknown_fields, default)]
pub struct ProfileSpec {
    pub model: ProfileModel,
    /// Relative main-lobe ripple amplitude.
    pub ripple_amp: f64,
    /// Raised-cosine transition band width, in slices.
    pub transition_width: f64,
    /// Peak gain of the side lobes leaked into adjacent slabs.
    pub sidelobe_amp: f64,
    /// Distance of each side-lobe centre from the slab edge, in slices.
    pub sidelobe_extent: f64,
}

impl ProfileSpec {
    pub fn rect() -> Self {
        ProfileSpec {
            model: ProfileModel::Rect,
            ripple_amp: 0.0,
            transition_width: 0.0,
            sidelobe_amp: 0.0,
            sidelobe_extent: 0.0,
        }
    }

    pub fn smooth(ripple_amp: f64, transition_width: f64, sidelobe_amp: f64, sidelobe_extent: f64) -> Self {
        ProfileSpec {
            model: ProfileModel::Smooth,
            ripple_amp,
            transition_width,
            sidelobe_amp,
            sidelobe_extent,
        }
    }

    /// Rect profiles ignore the shape parameters, so only smooth specs are checked.
    pub fn validate(&self, geometry: &SlabGeometry) -> Result<()> {
        if self.model == ProfileModel::Rect {
            return Ok(());
        }
        let fields = [
            self.ripple_amp,
            self.transition_width,
            self.sidelobe_amp,
            self.sidelobe_extent,
        ];
        if fields.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParam("profile parameters must be finite".into()));
        }
        if !(0.0..=0.25).contains(&self.ripple_amp) {
            return Err(Error::InvalidParam(format!(
                "ripple_amp {} outside [0, 0.25]",
                self.ripple_amp
            )));
        }
        if !(0.0..=0.5).contains(&self.sidelobe_amp) {
            return Err(Error::InvalidParam(format!(
                "sidelobe_amp {} outside [0, 0.5]",
                self.sidelobe_amp
            )));
        }
        let half = geometry.slices_per_slab as f64 / 2.0;
        if self.transition_width < 0.0 || (self.transition_width > 0.0 && self.transition_width >= half) {
            return Err(Error::InvalidParam(format!(
                "transition_width {} must lie in [0, {half})",
                self.transition_width
            )));
        }
        if self.sidelobe_extent < 0.0 {
            return Err(Error::InvalidParam("sidelobe_extent must be non-negative".into()));
        }
        Ok(())
    }
}

impl Default for ProfileSpec {
    fn default() -> Self {
        ProfileSpec::smooth(0.05, 2.0, 0.1, 2.0)
    }
}

/// Generates excitation profiles. The ripple phase of each slab is drawn from `seed`.
pub fn make_profiles(geometry: SlabGeometry, spec: &ProfileSpec, seed: u64) -> Result<SlabProfileSet> {
    spec.validate(&geometry)?;
    if spec.model == ProfileModel::Rect {
        return Ok(SlabProfileSet::rect(geometry));
    }
    let nz = geometry.nz();
    let d = geometry.slices_per_slab as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut weights = vec![0.0; geometry.n_slab * nz];
    let lobe_width = (spec.sidelobe_extent / 2.0).max(0.5);
    for k in 0..geometry.n_slab {
        let phase = rng.random_range(0.0..2.0 * PI);
        let lo = k as f64 * d;
        let hi = lo + d;
        let window = geometry.window(k);
        for z in 0..nz {
            let centre = z as f64 + 0.5;
            let t = centre - lo;
            // signed distance into the window from its nearest edge
            let depth = t.min(d - t);
            let main = transition(depth, spec.transition_width);
            let ripple = 1.0 + spec.ripple_amp * (2.0 * PI * RIPPLE_CYCLES * t / d + phase).sin();
            let mut w = main * ripple;
            if !window.contains(&z) && spec.sidelobe_amp > 0.0 {
                let mut lobes = 0.0;
                if k > 0 {
                    lobes += gaussian(centre, lo - spec.sidelobe_extent, lobe_width);
                }
                if k + 1 < geometry.n_slab {
                    lobes += gaussian(centre, hi + spec.sidelobe_extent, lobe_width);
                }
                w += spec.sidelobe_amp * lobes;
            }
            weights[k * nz + z] = w.clamp(0.0, MAX_PROFILE_GAIN);
        }
    }
    SlabProfileSet::new(geometry, weights)
}

/// Raised-cosine edge centred on the window boundary; a hard step when `width` is 0.
fn transition(depth: f64, width: f64) -> f64 {
    if width <= 0.0 {
        return if depth > 0.0 { 1.0 } else { 0.0 };
    }
    if depth >= width / 2.0 {
        1.0
    } else if depth <= -width / 2.0 {
        0.0
    } else {
        0.5 * (1.0 + (PI * depth / width).sin())
    }
}

fn gaussian(x: f64, centre: f64, width: f64) -> f64 {
    let u = (x - centre) / width;
    (-0.5 * u * u).exp()
}

/// Per-slab aliased sub-volumes `I_k` for the acquired slabs.
#[derive(Clone, Debug, PartialEq)]
pub struct SlabMeasurements {
    geometry: SlabGeometry,
    mask: Vec<bool>,
    slabs: Vec<Volume>,
}

impl SlabMeasurements {
    /// `slabs` holds one `(nx, ny, slices_per_slab)` volume per acquired slab,
    /// in ascending slab order.
    pub fn new(geometry: SlabGeometry, mask: Vec<bool>, slabs: Vec<Volume>) -> Result<Self> {
        geometry.check_mask(&mask)?;
        let n_acq = mask.iter().filter(|&&a| a).count();
        if slabs.len() != n_acq {
            return Err(Error::Shape(format!(
                "{} slab volumes for {n_acq} acquired slabs",
                slabs.len()
            )));
        }
        let shape = slabs[0].shape();
        if shape[2] != geometry.slices_per_slab {
            return Err(Error::Shape(format!(
                "slab depth {} but geometry says {}",
                shape[2], geometry.slices_per_slab
            )));
        }
        if let Some(s) = slabs.iter().find(|s| s.shape() != shape) {
            return Err(Error::Shape(format!(
                "slab volumes differ in shape: {:?} vs {shape:?}",
                s.shape()
            )));
        }
        Ok(SlabMeasurements {
            geometry,
            mask,
            slabs,
        })
    }

    pub fn geometry(&self) -> SlabGeometry {
        self.geometry
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn slabs(&self) -> &[Volume] {
        &self.slabs
    }

    /// Shape of each slab volume.
    pub fn slab_shape(&self) -> [usize; 3] {
        self.slabs[0].shape()
    }

    /// Shape of the full unaliased volume.
    pub fn volume_shape(&self) -> [usize; 3] {
        let [nx, ny, _] = self.slab_shape();
        [nx, ny, self.geometry.nz()]
    }

    pub fn acquired(&self) -> impl Iterator<Item = usize> + '_ {
        acquired(&self.mask)
    }

    /// Measurement for slab `k`, if it was acquired.
    pub fn slab(&self, k: usize) -> Option<&Volume> {
        if !*self.mask.get(k)? {
            return None;
        }
        let pos = self.mask[..k].iter().filter(|&&a| a).count();
        self.slabs.get(pos)
    }

    pub fn map(&self, f: impl Fn(&Volume) -> Volume) -> SlabMeasurements {
        SlabMeasurements {
            geometry: self.geometry,
            mask: self.mask.clone(),
            slabs: self.slabs.iter().map(f).collect(),
        }
    }

    /// Real inner product over all acquired samples.
    pub fn dot(&self, other: &SlabMeasurements) -> f64 {
        crate::volume::compensated_dot(self.slabs.iter().zip(&other.slabs).flat_map(|(a, b)| {
            a.data()
                .iter()
                .zip(b.data())
                .flat_map(|(x, y)| [(x.re, y.re), (x.im, y.im)])
        }))
    }

    pub fn norm_sqr(&self) -> f64 {
        self.slabs.iter().map(Volume::norm_sqr).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.slabs.iter().map(Volume::max_abs).fold(0.0, f64::max)
    }

    pub fn check_profiles(&self, profiles: &SlabProfileSet) -> Result<()> {
        if profiles.geometry() != self.geometry {
            return Err(Error::Shape(format!(
                "measurement geometry {:?} does not match profiles {:?}",
                self.geometry,
                profiles.geometry()
            )));
        }
        Ok(())
    }
}

/// Applies the profile-encoding operator to `rho` for the slabs in `mask`.
pub fn forward_pen(rho: &Volume, profiles: &SlabProfileSet, mask: &[bool]) -> Result<SlabMeasurements> {
    let geometry = profiles.geometry();
    geometry.check_volume(rho)?;
    geometry.check_mask(mask)?;
    let [nx, ny, _] = rho.shape();
    let d = geometry.slices_per_slab;
    let plane = nx * ny;
    let src = rho.data();
    let slabs = acquired(mask)
        .map(|k| {
            let mut data = vec![Complex64::new(0.0, 0.0); plane * d];
            for z0 in 0..d {
                let out = &mut data[z0 * plane..(z0 + 1) * plane];
                for m in 0..geometry.n_slab {
                    let z = z0 + m * d;
                    let w = profiles.weight(k, z);
                    if w == 0.0 {
                        continue;
                    }
                    for (o, r) in out.iter_mut().zip(&src[z * plane..(z + 1) * plane]) {
                        *o += r * w;
                    }
                }
            }
            Ok(Volume::from_vec([nx, ny, d], data)?.with_voxel_size(rho.voxel_size()))
        })
        .collect::<Result<Vec<_>>>()?;
    SlabMeasurements::new(geometry, mask.to_vec(), slabs)
}

/// Adjoint of [`forward_pen`].
pub fn adjoint_pen(meas: &SlabMeasurements, profiles: &SlabProfileSet) -> Result<Volume> {
    meas.check_profiles(profiles)?;
    let geometry = meas.geometry();
    let [nx, ny, d] = meas.slab_shape();
    let plane = nx * ny;
    let mut out = Volume::zeros([nx, ny, geometry.nz()]).with_voxel_size(meas.slabs()[0].voxel_size());
    let dst = out.data_mut();
    for (k, slab) in meas.acquired().zip(meas.slabs()) {
        let src = slab.data();
        for z0 in 0..d {
            let y = &src[z0 * plane..(z0 + 1) * plane];
            for m in 0..geometry.n_slab {
                let z = z0 + m * d;
                let w = profiles.weight(k, z);
                if w == 0.0 {
                    continue;
                }
                for (o, v) in dst[z * plane..(z + 1) * plane].iter_mut().zip(y) {
                    *o += v * w;
                }
            }
        }
    }
    Ok(out)
}

/// Exact minimizer of `||A rho - y||^2 + (beta/2) ||rho - u||^2`.
///
/// Each aliasing group is solved directly, realizing
/// `(2 G^T G + beta I) rho_g = 2 G^T y_g + beta u_g`. With `beta = 0` the
/// penalty is replaced by the Tikhonov floor, `(2 G^T G + 2 eps I)`, and `u`
/// is ignored.
pub fn solve_rho_update(
    meas: &SlabMeasurements,
    profiles: &SlabProfileSet,
    beta: f64,
    u: Option<&Volume>,
) -> Result<Volume> {
    meas.check_profiles(profiles)?;
    if !(beta.is_finite() && beta >= 0.0) {
        return Err(Error::InvalidParam(format!("beta must be finite and >= 0, got {beta}")));
    }
    for s in meas.slabs() {
        s.ensure_finite("measurements")?;
    }
    let shape = meas.volume_shape();
    let u = if beta > 0.0 {
        let u = u.ok_or_else(|| Error::InvalidParam("beta > 0 requires a proximal target".into()))?;
        if u.shape() != shape {
            return Err(Error::Shape(format!(
                "proximal target {:?} does not match volume {shape:?}",
                u.shape()
            )));
        }
        u.ensure_finite("proximal target")?;
        Some(u)
    } else {
        None
    };
    let diag = if beta > 0.0 {
        beta
    } else {
        2.0 * profiles.tikhonov_floor(meas.mask())
    };

    let geometry = meas.geometry();
    let n = geometry.n_slab;
    let d = geometry.slices_per_slab;
    let [nx, ny, _] = shape;
    let plane = nx * ny;
    let mut out = Volume::zeros(shape).with_voxel_size(meas.slabs()[0].voxel_size());

    // (2 G^T G + c I) rho = 2 G^T y + c u is the normal form of the stacked
    // least-squares problem [G; sqrt(c/2) I] rho ~ [y; sqrt(c/2) u], which
    // is solved by QR to avoid squaring the group condition number.
    let root = (diag / 2.0).sqrt();
    for z0 in 0..d {
        let g = profiles.group_matrix(z0, meas.mask());
        let k_acq = g.nrows();
        let mut stacked = DMatrix::<f64>::zeros(k_acq + n, n);
        stacked.view_mut((0, 0), (k_acq, n)).copy_from(&g);
        for i in 0..n {
            stacked[(k_acq + i, i)] = root;
        }
        let qr = stacked.qr();
        let r = qr.r();
        if (0..n).any(|i| r[(i, i)] == 0.0 || !r[(i, i)].is_finite()) {
            return Err(Error::Numerical(format!(
                "aliasing group z0={z0} is singular"
            )));
        }

        // Columns [0, plane) carry real parts, [plane, 2*plane) imaginary parts.
        let mut b = DMatrix::<f64>::zeros(k_acq + n, 2 * plane);
        for (row, slab) in meas.slabs().iter().enumerate() {
            let src = &slab.data()[z0 * plane..(z0 + 1) * plane];
            for (p, c) in src.iter().enumerate() {
                b[(row, p)] = c.re;
                b[(row, plane + p)] = c.im;
            }
        }
        if let Some(u) = u {
            for m in 0..n {
                let src = &u.data()[(z0 + m * d) * plane..(z0 + m * d + 1) * plane];
                for (p, c) in src.iter().enumerate() {
                    b[(k_acq + m, p)] = root * c.re;
                    b[(k_acq + m, plane + p)] = root * c.im;
                }
            }
        }
        let mut rhs = qr.q().transpose() * b;
        if !r.solve_upper_triangular_mut(&mut rhs) {
            return Err(Error::Numerical(format!("aliasing group z0={z0} is singular")));
        }
        let dst = out.data_mut();
        for m in 0..n {
            let z = z0 + m * d;
            for p in 0..plane {
                dst[z * plane + p] = Complex64::new(rhs[(m, p)], rhs[(m, plane + p)]);
            }
        }
    }
    out.ensure_finite("rho update")?;
    Ok(out)
}

/// Unregularized profile-encoding reconstruction (Tikhonov floor only).
pub fn lsq_pen(meas: &SlabMeasurements, profiles: &SlabProfileSet) -> Result<Volume> {
    solve_rho_update(meas, profiles, 0.0, None)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_slab() -> SlabProfileSet {
        SlabProfileSet::new(SlabGeometry::new(2, 1).unwrap(), vec![1.0, 0.2, 0.1, 0.9]).unwrap()
    }

    fn column(a: f64, b: f64) -> Volume {
        Volume::from_vec([1, 1, 2], vec![Complex64::new(a, 0.0), Complex64::new(b, 0.0)]).unwrap()
    }

    #[test]
    fn rect_profiles_are_indicator_windows() {
        let g = SlabGeometry::new(3, 4).unwrap();
        let p = make_profiles(g, &ProfileSpec::rect(), 0).unwrap();
        for k in 0..3 {
            for z in 0..12 {
                let expected = if (4 * k..4 * (k + 1)).contains(&z) { 1.0 } else { 0.0 };
                assert_eq!(p.weight(k, z), expected);
            }
        }
    }

    #[test]
    fn degenerate_smooth_equals_rect() {
        let g = SlabGeometry::new(4, 6).unwrap();
        let smooth = make_profiles(g, &ProfileSpec::smooth(0.0, 0.0, 0.0, 3.0), 11).unwrap();
        assert_eq!(smooth, SlabProfileSet::rect(g));
    }

    #[test]
    fn ripple_is_bounded_on_the_flat_top() {
        let g = SlabGeometry::new(8, 8).unwrap();
        let spec = ProfileSpec::smooth(0.05, 2.0, 0.1, 2.0);
        let p = make_profiles(g, &spec, 5).unwrap();
        for k in 0..8 {
            let row = p.profile(k);
            let max = row.iter().cloned().fold(0.0, f64::max);
            // flat top: voxel centres at least half a transition width inside
            let lo = k as f64 * 8.0;
            let min_top = g
                .window(k)
                .filter(|&z| {
                    let t = z as f64 + 0.5 - lo;
                    t.min(8.0 - t) >= spec.transition_width / 2.0
                })
                .map(|z| row[z])
                .fold(f64::INFINITY, f64::min);
            assert!(max - min_top <= 0.1, "slab {k}: {max} - {min_top}");
        }
    }

    #[test]
    fn smooth_profiles_leak_into_neighbours() {
        let g = SlabGeometry::new(4, 8).unwrap();
        let p = make_profiles(g, &ProfileSpec::smooth(0.05, 2.0, 0.1, 2.0), 1).unwrap();
        // slab 1's side lobes reach into slabs 0 and 2
        assert!(p.weight(1, 5) > 0.01);
        assert!(p.weight(1, 18) > 0.01);
        // and nothing beyond the profile cap
        assert!(p.profile(1).iter().all(|&w| (0.0..=MAX_PROFILE_GAIN).contains(&w)));
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let g = SlabGeometry::new(2, 8).unwrap();
        assert!(make_profiles(g, &ProfileSpec::smooth(0.3, 1.0, 0.1, 1.0), 0).is_err());
        assert!(make_profiles(g, &ProfileSpec::smooth(0.05, 4.0, 0.1, 1.0), 0).is_err());
        assert!(make_profiles(g, &ProfileSpec::smooth(0.05, 1.0, 0.6, 1.0), 0).is_err());
        assert!(SlabGeometry::new(0, 4).is_err());
    }

    #[test]
    fn profile_set_rejects_peak_outside_window() {
        let g = SlabGeometry::new(2, 1).unwrap();
        assert!(SlabProfileSet::new(g, vec![0.2, 1.0, 0.1, 0.9]).is_err());
        assert!(SlabProfileSet::new(g, vec![1.0, 0.2, 0.1, 1.3]).is_err());
    }

    #[test]
    fn group_matrix_reads_weights() {
        let p = two_slab();
        let g = p.group_matrix(0, &[true, true]);
        assert_eq!(g, DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.1, 0.9]));
        let g = p.group_matrix(0, &[true, false]);
        assert_eq!(g, DMatrix::from_row_slice(1, 2, &[1.0, 0.2]));
        let rect = SlabProfileSet::rect(SlabGeometry::new(3, 2).unwrap());
        assert_eq!(rect.group_matrix(1, &[true; 3]), DMatrix::identity(3, 3));
    }

    #[test]
    fn forward_two_term_sum() {
        let (a, b) = (0.7, -1.3);
        let m = forward_pen(&column(a, b), &two_slab(), &[true, true]).unwrap();
        assert!((m.slab(0).unwrap().get(0, 0, 0).re - (a + 0.2 * b)).abs() < 1e-15);
        assert!((m.slab(1).unwrap().get(0, 0, 0).re - (0.1 * a + 0.9 * b)).abs() < 1e-15);
    }

    #[test]
    fn rect_forward_and_adjoint_restack() {
        let g = SlabGeometry::new(3, 2).unwrap();
        let p = SlabProfileSet::rect(g);
        let rho = Volume::from_fn([2, 3, 6], |x, y, z| Complex64::new((x + 2 * y) as f64, z as f64));
        let m = forward_pen(&rho, &p, &g.full_mask()).unwrap();
        for k in 0..3 {
            assert_eq!(m.slab(k).unwrap(), &rho.z_range(2 * k, 2).unwrap());
        }
        assert_eq!(adjoint_pen(&m, &p).unwrap(), rho);
        // exact up to the Tikhonov floor
        let rec = lsq_pen(&m, &p).unwrap();
        assert!(rec.sub(&rho).norm() <= 1e-9 * rho.norm());
    }

    #[test]
    fn zero_in_zero_out() {
        let g = SlabGeometry::new(2, 3).unwrap();
        let p = make_profiles(g, &ProfileSpec::default(), 0).unwrap_or_else(|_| SlabProfileSet::rect(g));
        let m = forward_pen(&Volume::zeros([2, 2, 6]), &p, &g.full_mask()).unwrap();
        assert_eq!(m.norm_sqr(), 0.0);
        assert_eq!(adjoint_pen(&m, &p).unwrap().norm_sqr(), 0.0);
    }

    #[test]
    fn two_by_two_lsq_recovers_ones() {
        let p = two_slab();
        let m = forward_pen(&column(1.0, 1.0), &p, &[true, true]).unwrap();
        assert!((m.slab(0).unwrap().get(0, 0, 0).re - 1.2).abs() < 1e-15);
        assert!((m.slab(1).unwrap().get(0, 0, 0).re - 1.0).abs() < 1e-15);
        let rho = lsq_pen(&m, &p).unwrap();
        assert!((rho.get(0, 0, 0).re - 1.0).abs() < 1e-9);
        assert!((rho.get(0, 0, 1).re - 1.0).abs() < 1e-9);
    }

    #[test]
    fn dropped_slab_matches_scalar_tikhonov() {
        // One row g = [1.0, 0.2], measurement y = 1.2.
        // (g^T g + eps I) rho = g^T y  =>  rho = g y / (|g|^2 + eps).
        let p = two_slab();
        let m = forward_pen(&column(1.0, 1.0), &p, &[true, false]).unwrap();
        let eps = TIKHONOV_REL * 1.04;
        assert!((p.tikhonov_floor(&[true, false]) - eps).abs() < 1e-24);
        let rho = lsq_pen(&m, &p).unwrap();
        let scale = 1.2 / (1.04 + eps);
        assert!((rho.get(0, 0, 0).re - 1.0 * scale).abs() < 1e-14);
        assert!((rho.get(0, 0, 1).re - 0.2 * scale).abs() < 1e-14);
    }

    #[test]
    fn large_beta_pulls_to_target() {
        let p = two_slab();
        let m = forward_pen(&column(1.0, 1.0), &p, &[true, true]).unwrap();
        let u = column(-0.5, 2.0);
        let rho = solve_rho_update(&m, &p, 1e8, Some(&u)).unwrap();
        let diff = rho.sub(&u).data().iter().map(|c| c.norm()).fold(0.0, f64::max);
        assert!(diff < 1e-6, "{diff}");
    }

    #[test]
    fn rho_update_argument_errors() {
        let p = two_slab();
        let m = forward_pen(&column(1.0, 1.0), &p, &[true, true]).unwrap();
        assert!(solve_rho_update(&m, &p, 1.0, None).is_err());
        assert!(solve_rho_update(&m, &p, -1.0, None).is_err());
        assert!(solve_rho_update(&m, &p, 1.0, Some(&Volume::zeros([1, 1, 3]))).is_err());
        let other = SlabProfileSet::rect(SlabGeometry::new(1, 2).unwrap());
        assert!(adjoint_pen(&m, &other).is_err());
        assert!(forward_pen(&Volume::zeros([1, 1, 3]), &p, &[true, true]).is_err());
        assert!(forward_pen(&Volume::zeros([1, 1, 2]), &p, &[false, false]).is_err());
    }

    #[test]
    fn measurement_slab_lookup_follows_mask() {
        let g = SlabGeometry::new(3, 1).unwrap();
        let p = SlabProfileSet::rect(g);
        let rho = Volume::from_fn([1, 1, 3], |_, _, z| Complex64::new(z as f64, 0.0));
        let m = forward_pen(&rho, &p, &[true, false, true]).unwrap();
        assert_eq!(m.slabs().len(), 2);
        assert!(m.slab(1).is_none());
        assert_eq!(m.slab(2).unwrap().get(0, 0, 0).re, 2.0);
        assert_eq!(m.acquired().collect::<Vec<_>>(), vec![0, 2]);
    }

    #[test]
    fn conditioning_report() {
        let g = SlabGeometry::new(8, 8).unwrap();
        let p = make_profiles(g, &ProfileSpec::default(), 3).unwrap();
        let full = p.group_condition_numbers(&g.full_mask());
        assert!(full.iter().all(|c| c.is_finite() && *c >= 1.0));
        assert!(full.iter().cloned().fold(0.0, f64::max) > 1.0);
        let mut mask = g.full_mask();
        mask[3] = false;
        assert!(p.group_condition_numbers(&mask).iter().all(|c| c.is_infinite()));
    }

    #[test]
    fn partial_profile_spec_takes_defaults() {
        let smooth: ProfileSpec = serde_json::from_str(r#"{"model":"smooth"}"#).unwrap();
        assert_eq!(smooth, ProfileSpec::default());
        let rect: ProfileSpec = serde_json::from_str(r#"{"model":"rect"}"#).unwrap();
        let g = SlabGeometry::new(3, 2).unwrap();
        assert_eq!(make_profiles(g, &rect, 0).unwrap(), SlabProfileSet::rect(g));
        assert!(serde_json::from_str::<ProfileSpec>(r#"{"model":"smooth","ripple":0.1}"#).is_err());
    }
}
