//! On-disk formats.
//!
//! `.svol`: one UTF-8 JSON header line
//! `{"shape":[nx,ny,nz],"dtype":"c64","order":"x-fastest","voxel_size":[dx,dy,dz]}`,
//! a single `\n`, then `nx*ny*nz` interleaved little-endian `f32` (re, im) pairs.
//!
//! Profile sets and slab measurements reuse the container and carry their
//! geometry in a JSON sidecar at `<path>.json`. Tensor fields are six real
//! component volumes stacked along z, named in the sidecar.

use std::fs;
use std::path::{Path, PathBuf};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::phantom::{TensorField, TENSOR_COMPONENTS};
use crate::slab::{SlabGeometry, SlabMeasurements, SlabProfileSet};
use crate::volume::Volume;

const DTYPE: &str = "c64";
const ORDER: &str = "x-fastest";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SvolHeader {
    shape: [usize; 3],
    dtype: String,
    order: String,
    voxel_size: [f64; 3],
}

/// Splits `bytes` at the first newline and parses the header line as JSON.
pub(crate) fn split_header<T: for<'de> Deserialize<'de>>(bytes: &[u8]) -> Result<(T, &[u8])> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Header("missing header terminator".into()))?;
    let line = std::str::from_utf8(&bytes[..nl]).map_err(|e| Error::Header(e.to_string()))?;
    let header = serde_json::from_str(line).map_err(|e| Error::Header(e.to_string()))?;
    Ok((header, &bytes[nl + 1..]))
}

pub(crate) fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Serializes a volume to the `.svol` byte layout.
pub fn encode_volume(v: &Volume) -> Result<Vec<u8>> {
    v.ensure_finite("volume")?;
    let header = SvolHeader {
        shape: v.shape(),
        dtype: DTYPE.into(),
        order: ORDER.into(),
        voxel_size: v.voxel_size(),
    };
    let mut out = serde_json::to_vec(&header).map_err(|e| Error::Header(e.to_string()))?;
    out.push(b'\n');
    out.reserve(v.len() * 8);
    for c in v.data() {
        let (re, im) = (c.re as f32, c.im as f32);
        if !(re.is_finite() && im.is_finite()) {
            return Err(Error::InvalidParam(
                "sample overflows single precision".into(),
            ));
        }
        out.extend_from_slice(&re.to_le_bytes());
        out.extend_from_slice(&im.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_volume(bytes: &[u8]) -> Result<Volume> {
    let (header, payload): (SvolHeader, _) = split_header(bytes)?;
    if header.dtype != DTYPE {
        return Err(Error::Dtype(header.dtype));
    }
    if header.order != ORDER {
        return Err(Error::Header(format!("unsupported order `{}`", header.order)));
    }
    if header.shape.iter().any(|&s| s == 0) {
        return Err(Error::Header(format!("non-positive shape {:?}", header.shape)));
    }
    let n: usize = header.shape.iter().product();
    if payload.len() != n * 8 {
        return Err(Error::PayloadSize {
            expected: n * 8,
            found: payload.len(),
        });
    }
    let data = payload
        .chunks_exact(8)
        .map(|ch| {
            let re = f32::from_le_bytes(ch[..4].try_into().unwrap());
            let im = f32::from_le_bytes(ch[4..].try_into().unwrap());
            Complex64::new(re as f64, im as f64)
        })
        .collect();
    Ok(Volume::from_vec(header.shape, data)?.with_voxel_size(header.voxel_size))
}

pub fn write_volume(v: &Volume, path: impl AsRef<Path>) -> Result<()> {
    write_bytes(path.as_ref(), &encode_volume(v)?)
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume> {
    decode_volume(&read_bytes(path.as_ref())?)
}

/// `<path>.json`
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn write_json<T: Serialize>(value: &T, path: impl AsRef<Path>) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| Error::Header(e.to_string()))?;
    bytes.push(b'\n');
    write_bytes(path.as_ref(), &bytes)
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: impl AsRef<Path>) -> Result<T> {
    let bytes = read_bytes(path.as_ref())?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Header(format!("{}: {e}", path.as_ref().display())))
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProfileSidecar {
    n_slab: usize,
    slices_per_slab: usize,
}

/// Writes profiles as a `[nz, n_slab, 1]` real volume plus geometry sidecar.
pub fn write_profiles(p: &SlabProfileSet, path: impl AsRef<Path>) -> Result<()> {
    let g = p.geometry();
    let nz = g.nz();
    let mut data = Vec::with_capacity(nz * g.n_slab);
    for k in 0..g.n_slab {
        data.extend(p.profile(k).iter().map(|&w| Complex64::new(w, 0.0)));
    }
    let v = Volume::from_vec([nz, g.n_slab, 1], data)?;
    write_volume(&v, path.as_ref())?;
    write_json(
        &ProfileSidecar {
            n_slab: g.n_slab,
            slices_per_slab: g.slices_per_slab,
        },
        sidecar_path(path.as_ref()),
    )
}

pub fn read_profiles(path: impl AsRef<Path>) -> Result<SlabProfileSet> {
    let side: ProfileSidecar = read_json(sidecar_path(path.as_ref()))?;
    let geometry = SlabGeometry::new(side.n_slab, side.slices_per_slab)?;
    let v = read_volume(path.as_ref())?;
    if v.shape() != [geometry.nz(), geometry.n_slab, 1] {
        return Err(Error::Shape(format!(
            "profile volume {:?} does not match geometry {geometry:?}",
            v.shape()
        )));
    }
    SlabProfileSet::new(geometry, v.data().iter().map(|c| c.re).collect())
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MeasurementSidecar {
    n_slab: usize,
    slices_per_slab: usize,
    acquired: Vec<bool>,
}

/// Writes acquired slabs stacked along z in ascending slab order, with the
/// geometry and acquisition mask in the sidecar.
pub fn write_measurements(m: &SlabMeasurements, path: impl AsRef<Path>) -> Result<()> {
    let stacked = Volume::stack_z(m.slabs())?;
    write_volume(&stacked, path.as_ref())?;
    write_json(
        &MeasurementSidecar {
            n_slab: m.geometry().n_slab,
            slices_per_slab: m.geometry().slices_per_slab,
            acquired: m.mask().to_vec(),
        },
        sidecar_path(path.as_ref()),
    )
}

pub fn read_measurements(path: impl AsRef<Path>) -> Result<SlabMeasurements> {
    let side: MeasurementSidecar = read_json(sidecar_path(path.as_ref()))?;
    let geometry = SlabGeometry::new(side.n_slab, side.slices_per_slab)?;
    let stacked = read_volume(path.as_ref())?;
    let n_acq = side.acquired.iter().filter(|&&a| a).count();
    let depth = geometry.slices_per_slab;
    if stacked.shape()[2] != n_acq * depth {
        return Err(Error::Shape(format!(
            "measurement stack depth {} does not hold {n_acq} slabs of {depth}",
            stacked.shape()[2]
        )));
    }
    let slabs = (0..n_acq)
        .map(|i| stacked.z_range(i * depth, depth))
        .collect::<Result<Vec<_>>>()?;
    SlabMeasurements::new(geometry, side.acquired, slabs)
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorSidecar {
    components: Vec<String>,
    shape: [usize; 3],
}

pub fn write_tensor_field(field: &TensorField, path: impl AsRef<Path>) -> Result<()> {
    let stacked = Volume::stack_z(&field.component_volumes())?;
    write_volume(&stacked, path.as_ref())?;
    write_json(
        &TensorSidecar {
            components: TENSOR_COMPONENTS.iter().map(|c| c.to_string()).collect(),
            shape: field.shape(),
        },
        sidecar_path(path.as_ref()),
    )
}

pub fn read_tensor_field(path: impl AsRef<Path>) -> Result<TensorField> {
    let side: TensorSidecar = read_json(sidecar_path(path.as_ref()))?;
    if side.components != TENSOR_COMPONENTS {
        return Err(Error::Header(format!("unexpected tensor components {:?}", side.components)));
    }
    let stacked = read_volume(path.as_ref())?;
    let [nx, ny, nz] = side.shape;
    if stacked.shape() != [nx, ny, 6 * nz] {
        return Err(Error::Shape(format!(
            "tensor stack {:?} does not hold six {:?} volumes",
            stacked.shape(),
            side.shape
        )));
    }
    let parts = (0..6).map(|c| stacked.z_range(c * nz, nz)).collect::<Result<Vec<_>>>()?;
    TensorField::from_component_volumes(&parts)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_volume_payload_layout() {
        let v = Volume::from_vec([1, 1, 1], vec![Complex64::new(3.0, 4.0)]).unwrap();
        let bytes = encode_volume(&v).unwrap();
        let nl = bytes.iter().position(|&b| b == b'\n').unwrap();
        let header = std::str::from_utf8(&bytes[..nl]).unwrap();
        assert_eq!(
            header,
            r#"{"shape":[1,1,1],"dtype":"c64","order":"x-fastest","voxel_size":[1.0,1.0,1.0]}"#
        );
        let payload = &bytes[nl + 1..];
        assert_eq!(payload.len(), 8);
        assert_eq!(&payload[..4], &3.0f32.to_le_bytes());
        assert_eq!(&payload[4..], &4.0f32.to_le_bytes());
    }

    #[test]
    fn encoding_is_deterministic() {
        let v = Volume::from_fn([3, 2, 2], |x, y, z| Complex64::new(x as f64 * 0.5, (y + z) as f64));
        assert_eq!(encode_volume(&v).unwrap(), encode_volume(&v).unwrap());
    }

    #[test]
    fn nan_is_rejected() {
        let mut v = Volume::zeros([2, 1, 1]);
        v.data_mut()[1] = Complex64::new(0.0, f64::NAN);
        assert!(matches!(encode_volume(&v), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn short_payload_is_size_mismatch() {
        let mut bytes =
            br#"{"shape":[2,2,2],"dtype":"c64","order":"x-fastest","voxel_size":[1.0,1.0,1.0]}"#.to_vec();
        bytes.push(b'\n');
        bytes.extend(std::iter::repeat(0u8).take(7 * 8));
        assert!(matches!(
            decode_volume(&bytes),
            Err(Error::PayloadSize { expected: 64, found: 56 })
        ));
    }

    #[test]
    fn zero_payload_reads_as_zeros() {
        let mut bytes =
            br#"{"shape":[4,4,4],"dtype":"c64","order":"x-fastest","voxel_size":[1.0,1.0,2.0]}"#.to_vec();
        bytes.push(b'\n');
        bytes.extend(std::iter::repeat(0u8).take(64 * 8));
        let v = decode_volume(&bytes).unwrap();
        assert_eq!(v.shape(), [4, 4, 4]);
        assert_eq!(v.voxel_size(), [1.0, 1.0, 2.0]);
        assert!(v.data().iter().all(|c| c.re == 0.0 && c.im == 0.0));
    }

    #[test]
    fn bad_headers() {
        let dtype = b"{\"shape\":[1,1,1],\"dtype\":\"f64\",\"order\":\"x-fastest\",\"voxel_size\":[1,1,1]}\n\0\0\0\0\0\0\0\0";
        assert!(matches!(decode_volume(dtype), Err(Error::Dtype(_))));
        assert!(matches!(decode_volume(b"not json\n"), Err(Error::Header(_))));
        assert!(matches!(decode_volume(b"{}"), Err(Error::Header(_))));
    }

    #[test]
    fn file_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.svol");
        let v = Volume::from_fn([5, 3, 2], |x, y, z| {
            Complex64::new((x as f32 * 0.1 - y as f32) as f64, (z as f32 / 3.0) as f64)
        })
        .with_voxel_size([1.5, 1.5, 2.0]);
        write_volume(&v, &path).unwrap();
        let back = read_volume(&path).unwrap();
        assert_eq!(back, v);
        for (a, b) in back.data().iter().zip(v.data()) {
            assert_eq!(a.re.to_bits(), b.re.to_bits());
            assert_eq!(a.im.to_bits(), b.im.to_bits());
        }
    }

    #[test]
    fn tensor_field_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.svol");
        let field = crate::phantom::make_tensor_field([6, 5, 4], 1);
        write_tensor_field(&field, &path).unwrap();
        let side = std::fs::read_to_string(sidecar_path(&path)).unwrap();
        assert!(side.contains("\"Dxy\""));
        assert_eq!(read_volume(&path).unwrap().shape(), [6, 5, 24]);
        let back = read_tensor_field(&path).unwrap();
        for (a, b) in back.tensors().iter().zip(field.tensors()) {
            for c in 0..6 {
                assert_eq!(a[c], b[c] as f32 as f64);
            }
        }
    }
}
