//! Complex 3D volumes and per-axis slice extraction.
//!
//! Samples are stored densely with x varying fastest, then y, then z.

use std::fmt;
use std::str::FromStr;

use num_complex::Complex64;

use crate::error::{Error, Result};

/// Spatial axis of a volume.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    pub const ALL: [Axis; 3] = [Axis::X, Axis::Y, Axis::Z];

    pub fn index(self) -> usize {
        match self {
            Axis::X => 0,
            Axis::Y => 1,
            Axis::Z => 2,
        }
    }

    /// The two in-plane axes of a slice normal to `self`, fastest first.
    pub fn in_plane(self) -> (usize, usize) {
        match self {
            Axis::X => (1, 2),
            Axis::Y => (0, 2),
            Axis::Z => (0, 1),
        }
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Axis::X => "x",
            Axis::Y => "y",
            Axis::Z => "z",
        };
        f.write_str(s)
    }
}

impl FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "x" | "X" => Ok(Axis::X),
            "y" | "Y" => Ok(Axis::Y),
            "z" | "Z" => Ok(Axis::Z),
            other => Err(Error::InvalidParam(format!("unknown axis `{other}`"))),
        }
    }
}

/// A complex-valued 3D image grid.
/// `sum a_i b_i` as if accumulated in twice the working precision
/// (Ogita, Rump and Oishi's Dot2: exact products via FMA, error-free sums).
pub(crate) fn compensated_dot(pairs: impl Iterator<Item = (f64, f64)>) -> f64 {
    let (mut s, mut c) = (0.0f64, 0.0f64);
    for (a, b) in pairs {
        let p = a * b;
        let pe = a.mul_add(b, -p);
        let t = s + p;
        let z = t - s;
        let se = (s - (t - z)) + (p - z);
        s = t;
        c += pe + se;
    }
    s + c
}

#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    shape: [usize; 3],
    data: Vec<Complex64>,
    voxel_size: [f64; 3],
}

impl Volume {
    pub fn zeros(shape: [usize; 3]) -> Self {
        Volume {
            shape,
            data: vec![Complex64::new(0.0, 0.0); shape.iter().product()],
            voxel_size: [1.0; 3],
        }
    }

    /// Builds a volume from x-fastest samples. Fails on length mismatch or
    /// non-finite samples.
    pub fn from_vec(shape: [usize; 3], data: Vec<Complex64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if shape.iter().any(|&s| s == 0) {
            return Err(Error::Shape(format!("volume extents must be positive, got {shape:?}")));
        }
        if data.len() != n {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {n} samples, got {}",
                data.len()
            )));
        }
        check_finite(&data, "volume")?;
        Ok(Volume {
            shape,
            data,
            voxel_size: [1.0; 3],
        })
    }

    pub fn from_real(shape: [usize; 3], data: Vec<f64>) -> Result<Self> {
        Self::from_vec(shape, data.into_iter().map(|r| Complex64::new(r, 0.0)).collect())
    }

    /// Evaluates `f(x, y, z)` at every voxel.
    pub fn from_fn(shape: [usize; 3], mut f: impl FnMut(usize, usize, usize) -> Complex64) -> Self {
        let mut data = Vec::with_capacity(shape.iter().product());
        for z in 0..shape[2] {
            for y in 0..shape[1] {
                for x in 0..shape[0] {
                    data.push(f(x, y, z));
                }
            }
        }
        Volume {
            shape,
            data,
            voxel_size: [1.0; 3],
        }
    }

    pub fn with_voxel_size(mut self, voxel_size: [f64; 3]) -> Self {
        self.voxel_size = voxel_size;
        self
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn voxel_size(&self) -> [f64; 3] {
        self.voxel_size
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Complex64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<Complex64> {
        self.data
    }

    #[inline]
    pub fn offset(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.shape[0] * (y + self.shape[1] * z)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> Complex64 {
        self.data[self.offset(x, y, z)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, value: Complex64) {
        let i = self.offset(x, y, z);
        self.data[i] = value;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|c| c.re.is_finite() && c.im.is_finite())
    }

    pub fn ensure_finite(&self, what: &'static str) -> Result<()> {
        check_finite(&self.data, what)
    }

    pub fn same_shape(&self, other: &Volume) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!(
                "volume shapes differ: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(Complex64) -> Complex64) -> Volume {
        Volume {
            shape: self.shape,
            data: self.data.iter().map(|&c| f(c)).collect(),
            voxel_size: self.voxel_size,
        }
    }

    /// Element-wise combination of two volumes of equal shape.
    pub fn zip_map(&self, other: &Volume, f: impl Fn(Complex64, Complex64) -> Complex64) -> Volume {
        assert_eq!(self.shape, other.shape, "zip_map on mismatched shapes");
        Volume {
            shape: self.shape,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
            voxel_size: self.voxel_size,
        }
    }

    pub fn scale(&self, s: f64) -> Volume {
        self.map(|c| c * s)
    }

    pub fn add(&self, other: &Volume) -> Volume {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Volume) -> Volume {
        self.zip_map(other, |a, b| a - b)
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: f64, other: &Volume) {
        assert_eq!(self.shape, other.shape, "axpy on mismatched shapes");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b * alpha;
        }
    }

    /// Real inner product `Re <self, other>`, treating complex samples as real pairs.
    pub fn dot(&self, other: &Volume) -> f64 {
        assert_eq!(self.shape, other.shape, "dot on mismatched shapes");
        compensated_dot(
            self.data
                .iter()
                .zip(&other.data)
                .flat_map(|(a, b)| [(a.re, b.re), (a.im, b.im)]),
        )
    }

    pub fn norm_sqr(&self) -> f64 {
        self.data.iter().map(|c| c.norm_sqr()).sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sqr().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().map(|c| c.norm()).fold(0.0, f64::max)
    }

    /// Magnitude image as real samples.
    pub fn magnitude(&self) -> Vec<f64> {
        self.data.iter().map(|c| c.norm()).collect()
    }

    /// Copies out slab `[z_start, z_start + depth)` along z.
    pub fn z_range(&self, z_start: usize, depth: usize) -> Result<Volume> {
        if z_start + depth > self.shape[2] || depth == 0 {
            return Err(Error::Shape(format!(
                "z range {z_start}..{} outside extent {}",
                z_start + depth,
                self.shape[2]
            )));
        }
        let plane = self.shape[0] * self.shape[1];
        Ok(Volume {
            shape: [self.shape[0], self.shape[1], depth],
            data: self.data[z_start * plane..(z_start + depth) * plane].to_vec(),
            voxel_size: self.voxel_size,
        })
    }

    /// Stacks volumes of equal in-plane shape along z.
    pub fn stack_z(parts: &[Volume]) -> Result<Volume> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("cannot stack zero volumes".into()))?;
        let [nx, ny, _] = first.shape;
        let mut data = Vec::new();
        let mut nz = 0;
        for p in parts {
            if p.shape[0] != nx || p.shape[1] != ny {
                return Err(Error::Shape(format!(
                    "cannot stack {:?} onto in-plane ({nx}, {ny})",
                    p.shape
                )));
            }
            nz += p.shape[2];
            data.extend_from_slice(&p.data);
        }
        Ok(Volume {
            shape: [nx, ny, nz],
            data,
            voxel_size: first.voxel_size,
        })
    }
}

pub(crate) fn check_finite(data: &[Complex64], what: &'static str) -> Result<()> {
    match data.iter().position(|c| !(c.re.is_finite() && c.im.is_finite())) {
        Some(index) => Err(Error::NonFinite { what, index }),
        None => Ok(()),
    }
}

/// A 2D complex slice stored as two real planes (real, imaginary).
///
/// `shape[0]` is the fastest-varying in-plane extent. Samples live in
/// `data` channel-major: `data[c * n + i + shape[0] * j]` with `n = shape[0] * shape[1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Slice2C {
    shape: [usize; 2],
    data: Vec<f64>,
}

impl Slice2C {
    pub fn zeros(shape: [usize; 2]) -> Self {
        Slice2C {
            shape,
            data: vec![0.0; 2 * shape[0] * shape[1]],
        }
    }

    pub fn from_planes(shape: [usize; 2], data: Vec<f64>) -> Result<Self> {
        if data.len() != 2 * shape[0] * shape[1] {
            return Err(Error::Shape(format!(
                "two-channel slice {shape:?} needs {} values, got {}",
                2 * shape[0] * shape[1],
                data.len()
            )));
        }
        Ok(Slice2C { shape, data })
    }

    pub fn from_complex(shape: [usize; 2], values: &[Complex64]) -> Result<Self> {
        let n = shape[0] * shape[1];
        if values.len() != n {
            return Err(Error::Shape(format!(
                "slice {shape:?} needs {n} samples, got {}",
                values.len()
            )));
        }
        let mut data = vec![0.0; 2 * n];
        for (i, c) in values.iter().enumerate() {
            data[i] = c.re;
            data[n + i] = c.im;
        }
        Ok(Slice2C { shape, data })
    }

    pub fn to_complex(&self) -> Vec<Complex64> {
        let n = self.pixels();
        (0..n)
            .map(|i| Complex64::new(self.data[i], self.data[n + i]))
            .collect()
    }

    pub fn shape(&self) -> [usize; 2] {
        self.shape
    }

    pub fn pixels(&self) -> usize {
        self.shape[0] * self.shape[1]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn real(&self) -> &[f64] {
        &self.data[..self.pixels()]
    }

    pub fn imag(&self) -> &[f64] {
        &self.data[self.pixels()..]
    }

    pub fn norm_sqr(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn max_magnitude(&self) -> f64 {
        let n = self.pixels();
        (0..n)
            .map(|i| self.data[i].hypot(self.data[n + i]))
            .fold(0.0, f64::max)
    }
}

/// Extracts every slice normal to `axis`, ordered by index along `axis`.
pub fn extract_slices(v: &Volume, axis: Axis) -> Vec<Slice2C> {
    let (a, b) = axis.in_plane();
    let shape = v.shape();
    (0..shape[axis.index()])
        .map(|i| {
            let plane_shape = [shape[a], shape[b]];
            let n = plane_shape[0] * plane_shape[1];
            let mut data = vec![0.0; 2 * n];
            for jb in 0..shape[b] {
                for ja in 0..shape[a] {
                    let mut idx = [0usize; 3];
                    idx[axis.index()] = i;
                    idx[a] = ja;
                    idx[b] = jb;
                    let c = v.get(idx[0], idx[1], idx[2]);
                    let p = ja + plane_shape[0] * jb;
                    data[p] = c.re;
                    data[n + p] = c.im;
                }
            }
            Slice2C {
                shape: plane_shape,
                data,
            }
        })
        .collect()
}

/// Places each slice back at its index along `axis` (the adjoint of [`extract_slices`]).
pub fn scatter_slices(slices: &[Slice2C], axis: Axis, shape: [usize; 3]) -> Result<Volume> {
    let (a, b) = axis.in_plane();
    if slices.len() != shape[axis.index()] {
        return Err(Error::Shape(format!(
            "{} slices for extent {} along {axis}",
            slices.len(),
            shape[axis.index()]
        )));
    }
    let mut out = Volume::zeros(shape);
    for (i, s) in slices.iter().enumerate() {
        if s.shape != [shape[a], shape[b]] {
            return Err(Error::Shape(format!(
                "slice {i} has shape {:?}, expected {:?}",
                s.shape,
                [shape[a], shape[b]]
            )));
        }
        let n = s.pixels();
        for jb in 0..shape[b] {
            for ja in 0..shape[a] {
                let mut idx = [0usize; 3];
                idx[axis.index()] = i;
                idx[a] = ja;
                idx[b] = jb;
                let p = ja + shape[a] * jb;
                out.set(idx[0], idx[1], idx[2], Complex64::new(s.data[p], s.data[n + p]));
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_volume(shape: [usize; 3], seed: u64) -> Volume {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Volume::from_fn(shape, |_, _, _| {
            Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
        })
    }

    #[test]
    fn slice_counts_and_shapes() {
        let v = Volume::zeros([4, 5, 6]);
        let z = extract_slices(&v, Axis::Z);
        assert_eq!(z.len(), 6);
        assert!(z.iter().all(|s| s.shape() == [4, 5]));
        let x = extract_slices(&v, Axis::X);
        assert_eq!(x.len(), 4);
        assert!(x.iter().all(|s| s.shape() == [5, 6]));
        let y = extract_slices(&v, Axis::Y);
        assert_eq!(y.len(), 5);
        assert!(y.iter().all(|s| s.shape() == [4, 6]));
    }

    #[test]
    fn scatter_inverts_extract() {
        let v = random_volume([4, 5, 6], 3);
        for axis in Axis::ALL {
            let back = scatter_slices(&extract_slices(&v, axis), axis, v.shape()).unwrap();
            assert_eq!(back, v);
        }
    }

    #[test]
    fn single_voxel_is_local() {
        let mut v = Volume::zeros([4, 4, 4]);
        v.set(1, 2, 3, Complex64::new(1.0, -2.0));
        let slices = extract_slices(&v, Axis::X);
        for (i, s) in slices.iter().enumerate() {
            assert_eq!(s.norm_sqr() > 0.0, i == 1, "slice {i}");
        }
    }

    #[test]
    fn zero_slices_give_zero_volume() {
        let slices = vec![Slice2C::zeros([3, 4]); 2];
        let v = scatter_slices(&slices, Axis::Z, [3, 4, 2]).unwrap();
        assert_eq!(v.norm_sqr(), 0.0);
    }

    #[test]
    fn extract_after_scatter_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let slices: Vec<Slice2C> = (0..5)
            .map(|_| {
                let data = (0..2 * 3 * 4).map(|_| rng.random_range(-1.0..1.0)).collect();
                Slice2C::from_planes([3, 4], data).unwrap()
            })
            .collect();
        let v = scatter_slices(&slices, Axis::Y, [3, 5, 4]).unwrap();
        assert_eq!(extract_slices(&v, Axis::Y), slices);
    }

    #[test]
    fn scatter_rejects_bad_shapes() {
        let slices = vec![Slice2C::zeros([3, 4]); 2];
        assert!(scatter_slices(&slices, Axis::Z, [3, 4, 3]).is_err());
        assert!(scatter_slices(&slices, Axis::Z, [4, 3, 2]).is_err());
    }

    #[test]
    fn extract_and_scatter_are_adjoint() {
        let v = random_volume([8, 8, 8], 1);
        let w = random_volume([8, 8, 8], 2);
        for axis in Axis::ALL {
            let cv = extract_slices(&v, axis);
            let s = extract_slices(&w, axis);
            let lhs: f64 = cv
                .iter()
                .zip(&s)
                .map(|(a, b)| a.data().iter().zip(b.data()).map(|(p, q)| p * q).sum::<f64>())
                .sum();
            let rhs = v.dot(&scatter_slices(&s, axis, v.shape()).unwrap());
            assert!((lhs - rhs).abs() <= 1e-12 * lhs.abs().max(rhs.abs()));
        }
    }

    #[test]
    fn complex_two_channel_round_trip() {
        let vals: Vec<Complex64> = (0..12).map(|i| Complex64::new(i as f64, -(i as f64) / 3.0)).collect();
        let s = Slice2C::from_complex([3, 4], &vals).unwrap();
        assert_eq!(s.to_complex(), vals);
        assert_eq!(s.real()[5], 5.0);
    }

    #[test]
    fn from_vec_rejects_nan_and_bad_length() {
        assert!(Volume::from_vec([1, 1, 2], vec![Complex64::new(0.0, 0.0)]).is_err());
        assert!(Volume::from_vec([1, 1, 1], vec![Complex64::new(f64::NAN, 0.0)]).is_err());
    }

    #[test]
    fn compensated_dot_survives_cancellation() {
        let a = [1e16, 1.0, -1e16, 3.0];
        let b = [1.0, 1.0, 1.0, 1.0 / 3.0];
        let naive: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        assert_ne!(naive, 2.0);
        assert_eq!(compensated_dot(a.into_iter().zip(b)), 2.0);
    }
}
