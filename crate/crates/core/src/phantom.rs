//! Synthetic ground truth: phantoms, diffusion-tensor fields, DWI synthesis and
//! complex Gaussian noise.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Vector3};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::slab::{forward_pen, SlabMeasurements, SlabProfileSet};
use crate::volume::{extract_slices, Axis, Slice2C, Volume};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PhantomKind {
    SheppLogan3d,
    NestedEllipsoids,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PhasePattern {
    Zero,
    SmoothPolynomial,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomSpec {
    pub shape: [usize; 3],
    pub kind: PhantomKind,
    pub phase: PhasePattern,
    /// Ellipsoid count for the nested kind.
    pub ellipsoids: usize,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            shape: [64, 64, 64],
            kind: PhantomKind::SheppLogan3d,
            phase: PhasePattern::SmoothPolynomial,
            ellipsoids: 6,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.shape.iter().any(|&s| s == 0) {
            return Err(Error::InvalidParam(format!("phantom shape must be positive, got {:?}", self.shape)));
        }
        Ok(())
    }
}

/// Ellipsoid with intensity, semi-axes, centre and z-y-z Euler angles in degrees.
#[derive(Clone, Copy, Debug)]
struct Ellipsoid {
    value: f64,
    axes: [f64; 3],
    centre: [f64; 3],
    rot: [[f64; 3]; 3],
}

impl Ellipsoid {
    fn new(value: f64, axes: [f64; 3], centre: [f64; 3], euler_deg: [f64; 3]) -> Self {
        let [phi, theta, psi] = euler_deg.map(f64::to_radians);
        let (sp, cp) = phi.sin_cos();
        let (st, ct) = theta.sin_cos();
        let (ss, cs) = psi.sin_cos();
        let rot = [
            [cs * cp - ct * sp * ss, cs * sp + ct * cp * ss, ss * st],
            [-ss * cp - ct * sp * cs, -ss * sp + ct * cp * cs, cs * st],
            [st * sp, -st * cp, ct],
        ];
        Ellipsoid {
            value,
            axes,
            centre,
            rot,
        }
    }

    fn contains(&self, p: [f64; 3]) -> bool {
        let d = [p[0] - self.centre[0], p[1] - self.centre[1], p[2] - self.centre[2]];
        let mut q = 0.0;
        for i in 0..3 {
            let r = self.rot[i][0] * d[0] + self.rot[i][1] * d[1] + self.rot[i][2] * d[2];
            q += (r / self.axes[i]).powi(2);
        }
        q <= 1.0
    }
}

/// Modified 3D Shepp-Logan table: value, semi-axes, centre, Euler angles.
const SHEPP_LOGAN: [(f64, [f64; 3], [f64; 3], [f64; 3]); 10] = [
    (1.0, [0.69, 0.92, 0.81], [0.0, 0.0, 0.0], [0.0, 0.0, 0.0]),
    (-0.8, [0.6624, 0.874, 0.78], [0.0, -0.0184, 0.0], [0.0, 0.0, 0.0]),
    (-0.2, [0.11, 0.31, 0.22], [0.22, 0.0, 0.0], [-18.0, 0.0, 10.0]),
    (-0.2, [0.16, 0.41, 0.28], [-0.22, 0.0, 0.0], [18.0, 0.0, 10.0]),
    (0.1, [0.21, 0.25, 0.41], [0.0, 0.35, -0.15], [0.0, 0.0, 0.0]),
    (0.1, [0.046, 0.046, 0.05], [0.0, 0.1, 0.25], [0.0, 0.0, 0.0]),
    (0.1, [0.046, 0.046, 0.05], [0.0, -0.1, 0.25], [0.0, 0.0, 0.0]),
    (0.1, [0.046, 0.023, 0.05], [-0.08, -0.605, 0.0], [0.0, 0.0, 0.0]),
    (0.1, [0.023, 0.023, 0.02], [0.0, -0.606, 0.0], [0.0, 0.0, 0.0]),
    (0.1, [0.023, 0.046, 0.02], [0.06, -0.605, 0.0], [0.0, 0.0, 0.0]),
];

/// Normalized coordinate in `[-1, 1)` with the centre voxel at exactly 0.
pub fn grid_coord(i: usize, n: usize) -> f64 {
    (i as f64 - (n / 2) as f64) * 2.0 / n as f64
}

fn grid_point(shape: [usize; 3], x: usize, y: usize, z: usize) -> [f64; 3] {
    [grid_coord(x, shape[0]), grid_coord(y, shape[1]), grid_coord(z, shape[2])]
}

/// Unclamped sum of the Shepp-Logan ellipsoids containing `p`.
pub fn shepp_logan_value(p: [f64; 3]) -> f64 {
    SHEPP_LOGAN
        .iter()
        .map(|&(v, a, c, e)| Ellipsoid::new(v, a, c, e))
        .filter(|e| e.contains(p))
        .map(|e| e.value)
        .sum()
}

fn nested_ellipsoids(count: usize, rng: &mut ChaCha8Rng) -> Vec<Ellipsoid> {
    let mut out = Vec::with_capacity(count);
    let mut scale = 0.9;
    let mut centre = [0.0; 3];
    for _ in 0..count {
        let axes = [0.0; 3].map(|_| scale * rng.random_range(0.6..1.0));
        let euler = [0.0; 3].map(|_| rng.random_range(-30.0..30.0));
        out.push(Ellipsoid::new(rng.random_range(0.2..1.0), axes, centre, euler));
        let shift = 0.25 * scale;
        centre = centre.map(|c| c + rng.random_range(-shift..shift));
        scale *= rng.random_range(0.45..0.75);
    }
    out
}

/// Piecewise-constant magnitude times an optional smooth phase, magnitude in `[0, 1]`.
pub fn make_phantom(spec: &PhantomSpec) -> Result<Volume> {
    spec.validate()?;
    let shape = spec.shape;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut mag = match spec.kind {
        PhantomKind::SheppLogan3d => {
            let table: Vec<Ellipsoid> = SHEPP_LOGAN.iter().map(|&(v, a, c, e)| Ellipsoid::new(v, a, c, e)).collect();
            Volume::from_fn(shape, |x, y, z| {
                let p = grid_point(shape, x, y, z);
                let v: f64 = table.iter().filter(|e| e.contains(p)).map(|e| e.value).sum();
                Complex64::new(v.clamp(0.0, 1.0), 0.0)
            })
        }
        PhantomKind::NestedEllipsoids => {
            let shells = nested_ellipsoids(spec.ellipsoids, &mut rng);
            let v = Volume::from_fn(shape, |x, y, z| {
                let p = grid_point(shape, x, y, z);
                let inner = shells.iter().rev().find(|e| e.contains(p));
                Complex64::new(inner.map_or(0.0, |e| e.value), 0.0)
            });
            let peak = v.max_abs();
            if peak > 0.0 {
                v.scale(1.0 / peak)
            } else {
                v
            }
        }
    };
    if spec.phase == PhasePattern::SmoothPolynomial {
        let phase = smooth_phase(shape, &mut rng);
        for (m, p) in mag.data_mut().iter_mut().zip(phase) {
            *m = Complex64::from_polar(m.re, p);
        }
    }
    Ok(mag)
}

/// Random quadratic polynomial in the grid coordinates scaled to peak `pi/2`.
fn smooth_phase(shape: [usize; 3], rng: &mut ChaCha8Rng) -> Vec<f64> {
    let c: [f64; 10] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
    let mut out = Vec::with_capacity(shape.iter().product());
    for z in 0..shape[2] {
        for y in 0..shape[1] {
            for x in 0..shape[0] {
                let [u, v, w] = grid_point(shape, x, y, z);
                out.push(
                    c[0] + c[1] * u + c[2] * v + c[3] * w + c[4] * u * u + c[5] * v * v + c[6] * w * w
                        + c[7] * u * v
                        + c[8] * u * w
                        + c[9] * v * w,
                );
            }
        }
    }
    let peak = out.iter().fold(0.0f64, |m, p| m.max(p.abs()));
    if peak > 0.0 {
        let s = 0.5 * PI / peak;
        out.iter_mut().for_each(|p| *p *= s);
    }
    out
}

/// Symmetric tensor components `(Dxx, Dyy, Dzz, Dxy, Dxz, Dyz)` in mm^2/s.
pub type Tensor6 = [f64; 6];

pub const TENSOR_COMPONENTS: [&str; 6] = ["Dxx", "Dyy", "Dzz", "Dxy", "Dxz", "Dyz"];

pub fn tensor_matrix(d: &Tensor6) -> Matrix3<f64> {
    Matrix3::new(d[0], d[3], d[4], d[3], d[1], d[5], d[4], d[5], d[2])
}

pub fn tensor_components(m: &Matrix3<f64>) -> Tensor6 {
    [m[(0, 0)], m[(1, 1)], m[(2, 2)], m[(0, 1)], m[(0, 2)], m[(1, 2)]]
}

/// Axially symmetric tensor `l2 I + (l1 - l2) e e^T`.
pub fn axial_tensor(l1: f64, l2: f64, e: [f64; 3]) -> Tensor6 {
    let e = Vector3::from(e).normalize();
    tensor_components(&(Matrix3::identity() * l2 + e * e.transpose() * (l1 - l2)))
}

/// Fractional anisotropy of eigenvalues `(l1, l2, l2)`.
pub fn axial_fa(l1: f64, l2: f64) -> f64 {
    (l1 - l2).abs() / (l1 * l1 + 2.0 * l2 * l2).sqrt()
}

#[derive(Clone, Debug, PartialEq)]
pub struct TensorField {
    shape: [usize; 3],
    tensors: Vec<Tensor6>,
}

pub const BACKGROUND_DIFFUSIVITY: f64 = 0.8e-3;
pub const BUNDLE_EIGENVALUES: (f64, f64) = (1.7e-3, 0.3e-3);

impl TensorField {
    pub fn new(shape: [usize; 3], tensors: Vec<Tensor6>) -> Result<Self> {
        if tensors.len() != shape.iter().product::<usize>() {
            return Err(Error::Shape(format!(
                "{} tensors for shape {shape:?}",
                tensors.len()
            )));
        }
        if let Some(i) = tensors.iter().position(|t| t.iter().any(|c| !c.is_finite())) {
            return Err(Error::NonFinite {
                what: "tensor component",
                index: i,
            });
        }
        Ok(TensorField { shape, tensors })
    }

    pub fn uniform(shape: [usize; 3], d: Tensor6) -> Self {
        TensorField {
            shape,
            tensors: vec![d; shape.iter().product()],
        }
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn tensors(&self) -> &[Tensor6] {
        &self.tensors
    }

    /// One real volume per component, in [`TENSOR_COMPONENTS`] order.
    pub fn component_volumes(&self) -> Vec<Volume> {
        (0..6)
            .map(|c| {
                Volume::from_real(self.shape, self.tensors.iter().map(|t| t[c]).collect())
                    .expect("shape checked at construction")
            })
            .collect()
    }

    pub fn from_component_volumes(parts: &[Volume]) -> Result<Self> {
        if parts.len() != 6 {
            return Err(Error::Shape(format!("expected 6 component volumes, got {}", parts.len())));
        }
        let shape = parts[0].shape();
        for p in parts {
            p.same_shape(&parts[0])?;
        }
        let tensors = (0..parts[0].len())
            .map(|i| std::array::from_fn(|c| parts[c].data()[i].re))
            .collect();
        TensorField::new(shape, tensors)
    }
}

/// Isotropic background with one anisotropic tube bundle whose principal
/// direction follows the tube's circular centreline.
///
/// The tube circles the z axis in the plane `z = z_c` with radius `R`; the
/// seed perturbs its radius, height and thickness.
pub fn make_tensor_field(shape: [usize; 3], seed: u64) -> TensorField {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let radius = rng.random_range(0.35..0.5);
    let zc = rng.random_range(-0.15..0.15);
    let thickness = rng.random_range(0.12..0.2);
    let (l1, l2) = BUNDLE_EIGENVALUES;
    let iso = [BACKGROUND_DIFFUSIVITY, BACKGROUND_DIFFUSIVITY, BACKGROUND_DIFFUSIVITY, 0.0, 0.0, 0.0];
    let mut tensors = Vec::with_capacity(shape.iter().product());
    for z in 0..shape[2] {
        for y in 0..shape[1] {
            for x in 0..shape[0] {
                let [u, v, w] = grid_point(shape, x, y, z);
                let rho = (u * u + v * v).sqrt();
                let dist = ((rho - radius).powi(2) + (w - zc).powi(2)).sqrt();
                if dist < thickness && rho > 0.0 {
                    tensors.push(axial_tensor(l1, l2, [-v / rho, u / rho, 0.0]));
                } else {
                    tensors.push(iso);
                }
            }
        }
    }
    TensorField { shape, tensors }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiffusionProtocol {
    /// s/mm^2
    pub b_value: f64,
    pub directions: Vec<[f64; 3]>,
    pub includes_b0: bool,
}

impl Default for DiffusionProtocol {
    fn default() -> Self {
        DiffusionProtocol::electrostatic(1000.0, 10, 0)
    }
}

impl DiffusionProtocol {
    /// `count` directions spread by antipodally symmetric electrostatic repulsion.
    pub fn electrostatic(b_value: f64, count: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pts: Vec<Vector3<f64>> = (0..count)
            .map(|_| {
                let v = Vector3::new(
                    StandardNormal.sample(&mut rng),
                    StandardNormal.sample(&mut rng),
                    StandardNormal.sample(&mut rng),
                );
                v.normalize()
            })
            .collect();
        let mut step = 0.1;
        for _ in 0..2000 {
            let forces: Vec<Vector3<f64>> = (0..count)
                .map(|i| {
                    let mut f = Vector3::zeros();
                    for j in 0..count {
                        if i == j {
                            continue;
                        }
                        for q in [pts[j], -pts[j]] {
                            let d = pts[i] - q;
                            let r2 = d.norm_squared().max(1e-12);
                            f += d / (r2 * r2.sqrt());
                        }
                    }
                    f
                })
                .collect();
            let tangential: Vec<Vector3<f64>> = pts.iter().zip(&forces).map(|(p, f)| f - p * p.dot(f)).collect();
            let peak = tangential.iter().fold(0.0f64, |m, t| m.max(t.norm()));
            if peak == 0.0 {
                break;
            }
            for (p, t) in pts.iter_mut().zip(&tangential) {
                *p = (*p + t * (step / peak)).normalize();
            }
            step *= 0.998;
        }
        DiffusionProtocol {
            b_value,
            directions: pts.iter().map(|p| [p.x, p.y, p.z]).collect(),
            includes_b0: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.b_value.is_finite() && self.b_value >= 0.0) {
            return Err(Error::InvalidParam(format!("b_value must be non-negative, got {}", self.b_value)));
        }
        if self.directions.len() < 6 {
            return Err(Error::InvalidParam(format!(
                "need at least 6 directions, got {}",
                self.directions.len()
            )));
        }
        for (i, d) in self.directions.iter().enumerate() {
            let n = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
            if !((n - 1.0).abs() <= 1e-12) {
                return Err(Error::InvalidParam(format!("direction {i} has norm {n}")));
            }
            for (j, e) in self.directions[..i].iter().enumerate() {
                if d == e {
                    return Err(Error::InvalidParam(format!("directions {j} and {i} coincide")));
                }
            }
        }
        Ok(())
    }

    pub fn volume_count(&self) -> usize {
        self.directions.len() + usize::from(self.includes_b0)
    }
}

/// Attenuated copies of `s0`: the b0 volume first when included, then one per direction.
pub fn synth_dwi(s0: &Volume, field: &TensorField, proto: &DiffusionProtocol) -> Result<Vec<Volume>> {
    if s0.shape() != field.shape() {
        return Err(Error::Shape(format!(
            "s0 {:?} does not match tensor field {:?}",
            s0.shape(),
            field.shape()
        )));
    }
    let mut out = Vec::with_capacity(proto.volume_count());
    if proto.includes_b0 {
        out.push(s0.clone());
    }
    for g in &proto.directions {
        let mut v = s0.clone();
        for (s, d) in v.data_mut().iter_mut().zip(field.tensors()) {
            let q = d[0] * g[0] * g[0]
                + d[1] * g[1] * g[1]
                + d[2] * g[2] * g[2]
                + 2.0 * (d[3] * g[0] * g[1] + d[4] * g[0] * g[2] + d[5] * g[1] * g[2]);
            *s *= (-proto.b_value * q).exp();
        }
        out.push(v);
    }
    Ok(out)
}

/// I.i.d. complex Gaussian noise with standard deviation `sigma` per channel.
pub fn add_noise(v: &Volume, sigma: f64, seed: u64) -> Result<Volume> {
    if !(sigma.is_finite() && sigma >= 0.0) {
        return Err(Error::InvalidParam(format!("noise sigma must be non-negative, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(v.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = v.clone();
    for c in out.data_mut() {
        let re: f64 = StandardNormal.sample(&mut rng);
        let im: f64 = StandardNormal.sample(&mut rng);
        *c += Complex64::new(sigma * re, sigma * im);
    }
    Ok(out)
}

/// Simulated acquisition: `forward_pen` plus noise on each acquired slab, the
/// i-th acquired slab seeded with `seed + i`.
pub fn acquire(
    rho: &Volume,
    profiles: &SlabProfileSet,
    mask: &[bool],
    sigma: f64,
    seed: u64,
) -> Result<SlabMeasurements> {
    let clean = forward_pen(rho, profiles, mask)?;
    if sigma == 0.0 {
        return Ok(clean);
    }
    let slabs = clean
        .slabs()
        .iter()
        .enumerate()
        .map(|(i, s)| add_noise(s, sigma, seed.wrapping_add(i as u64)))
        .collect::<Result<Vec<_>>>()?;
    SlabMeasurements::new(clean.geometry(), mask.to_vec(), slabs)
}

/// Axial slices of `count` nested-ellipsoid phantoms (seeds `seed..seed+count`),
/// every `stride`-th slice from the central three quarters in z.
pub fn training_slices(shape: [usize; 3], count: usize, seed: u64, stride: usize) -> Result<Vec<Slice2C>> {
    if count == 0 || stride == 0 {
        return Err(Error::InvalidParam("training corpus needs count >= 1 and stride >= 1".into()));
    }
    let nz = shape[2];
    let mut out = Vec::new();
    for i in 0..count as u64 {
        let v = make_phantom(&PhantomSpec {
            shape,
            kind: PhantomKind::NestedEllipsoids,
            seed: seed.wrapping_add(i),
            ..PhantomSpec::default()
        })?;
        let slices = extract_slices(&v, Axis::Z);
        out.extend(slices.into_iter().take(nz - nz / 8).skip(nz / 8).step_by(stride));
    }
    Ok(out)
}
