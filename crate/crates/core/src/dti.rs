//! Log-linear diffusion tensor fitting and scalar maps.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::phantom::{tensor_matrix, DiffusionProtocol, Tensor6, TensorField};
use crate::volume::Volume;

/// Fraction of `max |S0|` below which voxels are left unfitted.
pub const DEFAULT_MASK_FRACTION: f64 = 0.05;

/// Smallest singular value ratio accepted for the design matrix.
const DESIGN_RCOND: f64 = 1e-10;

#[derive(Clone, Debug)]
pub struct TensorMaps {
    pub tensor: TensorField,
    pub fa: Volume,
    pub md: Volume,
    pub principal_dir: Vec<[f64; 3]>,
    pub color_fa: Vec<[f64; 3]>,
    pub mask: Vec<bool>,
}

impl TensorMaps {
    pub fn shape(&self) -> [usize; 3] {
        self.fa.shape()
    }
}

/// Eigen-derived quantities of one tensor, negative eigenvalues clamped to 0.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TensorScalars {
    pub eigenvalues: [f64; 3],
    pub fa: f64,
    pub md: f64,
    pub principal_dir: [f64; 3],
}

pub fn tensor_scalars(d: &Tensor6) -> TensorScalars {
    let eig = SymmetricEigen::new(tensor_matrix(d));
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let l: [f64; 3] = std::array::from_fn(|i| eig.eigenvalues[order[i]].max(0.0));
    let md = (l[0] + l[1] + l[2]) / 3.0;
    let den = l.iter().map(|x| x * x).sum::<f64>();
    let fa = if den > 0.0 {
        let num = l.iter().map(|x| (x - md).powi(2)).sum::<f64>();
        ((1.5 * num / den).sqrt()).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let e = eig.eigenvectors.column(order[0]);
    let mut dir = [e[0], e[1], e[2]];
    // sign fixed so the largest-magnitude component is positive
    let k = (0..3).max_by(|&a, &b| dir[a].abs().total_cmp(&dir[b].abs())).unwrap_or(0);
    if dir[k] < 0.0 {
        dir.iter_mut().for_each(|c| *c = -*c);
    }
    TensorScalars {
        eigenvalues: l,
        fa,
        md,
        principal_dir: dir,
    }
}

/// Rows `-b (gx^2, gy^2, gz^2, 2gxgy, 2gxgz, 2gygz)`.
pub fn design_matrix(proto: &DiffusionProtocol) -> DMatrix<f64> {
    let b = proto.b_value;
    DMatrix::from_fn(proto.directions.len(), 6, |r, c| {
        let g = proto.directions[r];
        -b * match c {
            0 => g[0] * g[0],
            1 => g[1] * g[1],
            2 => g[2] * g[2],
            3 => 2.0 * g[0] * g[1],
            4 => 2.0 * g[0] * g[2],
            _ => 2.0 * g[1] * g[2],
        }
    })
}

fn pseudo_inverse(proto: &DiffusionProtocol) -> Result<DMatrix<f64>> {
    let a = design_matrix(proto);
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if !(smax > 0.0) || smin < DESIGN_RCOND * smax {
        return Err(Error::InvalidParam(format!(
            "degenerate diffusion design: singular values {smin:e} .. {smax:e}"
        )));
    }
    svd.pseudo_inverse(0.0).map_err(|e| Error::Numerical(e.to_string()))
}

/// Fits one tensor per voxel from magnitude DWIs (`dwis[0]` is the b0 volume).
///
/// Voxels with `|S0| <= mask_threshold` get a zero tensor and zero maps.
pub fn fit_tensor(dwis: &[Volume], proto: &DiffusionProtocol, mask_threshold: f64) -> Result<TensorMaps> {
    proto.validate()?;
    if !proto.includes_b0 {
        return Err(Error::InvalidParam("tensor fitting needs a b0 volume".into()));
    }
    if dwis.len() != proto.volume_count() {
        return Err(Error::Shape(format!(
            "{} volumes for a protocol of {}",
            dwis.len(),
            proto.volume_count()
        )));
    }
    if !(mask_threshold.is_finite() && mask_threshold >= 0.0) {
        return Err(Error::InvalidParam(format!("mask threshold must be non-negative, got {mask_threshold}")));
    }
    for (i, v) in dwis.iter().enumerate() {
        v.same_shape(&dwis[0])?;
        if !v.is_finite() {
            return Err(Error::NonFinite { what: "diffusion volume", index: i });
        }
    }
    if proto.b_value == 0.0 {
        return Err(Error::InvalidParam("b_value must be positive for tensor fitting".into()));
    }
    let pinv = pseudo_inverse(proto)?;
    let shape = dwis[0].shape();
    let n = dwis[0].len();
    let ng = proto.directions.len();
    let mut tensors = vec![[0.0; 6]; n];
    let mut fa = vec![0.0; n];
    let mut md = vec![0.0; n];
    let mut dirs = vec![[0.0; 3]; n];
    let mut color = vec![[0.0; 3]; n];
    let mut mask = vec![false; n];
    let mut y = DVector::zeros(ng);
    for i in 0..n {
        let s0 = dwis[0].data()[i].norm();
        if s0 <= mask_threshold || s0 == 0.0 {
            continue;
        }
        for g in 0..ng {
            let s = dwis[g + 1].data()[i].norm().max(f64::MIN_POSITIVE);
            y[g] = (s / s0).ln();
        }
        let d = &pinv * &y;
        let t: Tensor6 = std::array::from_fn(|c| d[c]);
        let sc = tensor_scalars(&t);
        tensors[i] = t;
        fa[i] = sc.fa;
        md[i] = sc.md;
        dirs[i] = sc.principal_dir;
        color[i] = sc.principal_dir.map(|c| c.abs() * sc.fa);
        mask[i] = true;
    }
    Ok(TensorMaps {
        tensor: TensorField::new(shape, tensors)?,
        fa: Volume::from_real(shape, fa)?,
        md: Volume::from_real(shape, md)?,
        principal_dir: dirs,
        color_fa: color,
        mask,
    })
}

/// `DEFAULT_MASK_FRACTION * max |S0|`.
pub fn default_mask_threshold(b0: &Volume) -> f64 {
    DEFAULT_MASK_FRACTION * b0.max_abs()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{axial_fa, axial_tensor, make_tensor_field, synth_dwi, tensor_components, BUNDLE_EIGENVALUES};
    use nalgebra::{Matrix3, Rotation3, Vector3};
    use num_complex::Complex64;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn s0(shape: [usize; 3]) -> Volume {
        Volume::from_fn(shape, |x, y, z| Complex64::from_polar(1.0 + 0.01 * (x + y + z) as f64, 0.4))
    }

    fn fit_uniform(d: Tensor6) -> TensorMaps {
        let shape = [2, 2, 2];
        let proto = DiffusionProtocol::default();
        let dwis = synth_dwi(&s0(shape), &TensorField::uniform(shape, d), &proto).unwrap();
        fit_tensor(&dwis, &proto, 0.0).unwrap()
    }

    #[test]
    fn isotropic_tensor() {
        let d = 0.9e-3;
        let maps = fit_uniform([d, d, d, 0.0, 0.0, 0.0]);
        for i in 0..8 {
            assert!(maps.fa.data()[i].re.abs() < 1e-10);
            assert!((maps.md.data()[i].re - d).abs() < 1e-10 * d);
        }
    }

    #[test]
    fn single_eigenvalue_has_unit_fa() {
        let maps = fit_uniform([1.5e-3, 0.0, 0.0, 0.0, 0.0, 0.0]);
        for i in 0..8 {
            assert!((maps.fa.data()[i].re - 1.0).abs() < 1e-8);
            assert_eq!(maps.principal_dir[i].map(|c| (c.abs() - 0.5).signum()), [1.0, -1.0, -1.0]);
        }
    }

    #[test]
    fn bundle_round_trip() {
        let shape = [12, 12, 6];
        let field = make_tensor_field(shape, 2);
        let proto = DiffusionProtocol::default();
        let dwis = synth_dwi(&s0(shape), &field, &proto).unwrap();
        let maps = fit_tensor(&dwis, &proto, 0.0).unwrap();
        for (fit, truth) in maps.tensor.tensors().iter().zip(field.tensors()) {
            let scale = truth.iter().fold(0.0f64, |m, c| m.max(c.abs()));
            for c in 0..6 {
                assert!((fit[c] - truth[c]).abs() <= 1e-8 * scale, "{fit:?} vs {truth:?}");
            }
        }
        let (l1, l2) = BUNDLE_EIGENVALUES;
        let fas: Vec<f64> = maps.fa.data().iter().map(|c| c.re).collect();
        assert!(fas.iter().any(|&f| (f - axial_fa(l1, l2)).abs() < 1e-8));
    }

    #[test]
    fn fa_and_md_rotation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let base = Matrix3::from_diagonal(&Vector3::new(1.6e-3, 0.5e-3, 0.2e-3));
        let reference = tensor_scalars(&tensor_components(&base));
        for _ in 0..20 {
            let axis = Vector3::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5);
            let r = Rotation3::new(axis.normalize() * rng.random_range(0.0..3.0));
            let rotated = tensor_components(&(r.matrix() * base * r.matrix().transpose()));
            let maps = fit_uniform(rotated);
            assert!((maps.fa.data()[0].re - reference.fa).abs() < 1e-8);
            assert!((maps.md.data()[0].re - reference.md).abs() < 1e-8 * reference.md);
            let e = r * Vector3::x();
            let p = Vector3::from(maps.principal_dir[0]);
            assert!((p.dot(&e).abs() - 1.0).abs() < 1e-8);
        }
    }

    #[test]
    fn mask_zeroes_background() {
        let shape = [3, 1, 1];
        let b0 = Volume::from_real(shape, vec![1.0, 0.01, 0.0]).unwrap();
        let proto = DiffusionProtocol::default();
        let d = axial_tensor(1.7e-3, 0.3e-3, [0.0, 0.0, 1.0]);
        let dwis = synth_dwi(&b0, &TensorField::uniform(shape, d), &proto).unwrap();
        let maps = fit_tensor(&dwis, &proto, default_mask_threshold(&b0)).unwrap();
        assert_eq!(maps.mask, vec![true, false, false]);
        assert_eq!(maps.tensor.tensors()[1], [0.0; 6]);
        assert_eq!(maps.color_fa[2], [0.0; 3]);
        assert!((maps.color_fa[0][2] - axial_fa(1.7e-3, 0.3e-3)).abs() < 1e-8);
    }

    #[test]
    fn negative_eigenvalues_are_clamped() {
        let sc = tensor_scalars(&[1e-3, -2e-4, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(sc.eigenvalues, [1e-3, 0.0, 0.0]);
        assert!((sc.fa - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_protocols() {
        let shape = [1, 1, 1];
        let mut proto = DiffusionProtocol::default();
        proto.directions.truncate(5);
        let dwis = vec![Volume::from_real(shape, vec![1.0]).unwrap(); 6];
        assert!(fit_tensor(&dwis, &proto, 0.0).is_err());

        let s = 0.5f64.sqrt();
        let collinear = DiffusionProtocol {
            b_value: 1000.0,
            directions: vec![
                [1.0, 0.0, 0.0],
                [-1.0, 0.0, 0.0],
                [0.0, 1.0, 0.0],
                [0.0, -1.0, 0.0],
                [s, s, 0.0],
                [-s, -s, 0.0],
            ],
            includes_b0: true,
        };
        let dwis = vec![Volume::from_real(shape, vec![1.0]).unwrap(); 7];
        assert!(matches!(fit_tensor(&dwis, &collinear, 0.0), Err(Error::InvalidParam(_))));

        let no_b0 = DiffusionProtocol { includes_b0: false, ..DiffusionProtocol::default() };
        assert!(fit_tensor(&dwis[..1], &no_b0, 0.0).is_err());
    }
}
