//! Parameterized energy model and its `.emdl` container.
//!
//! `.emdl`: one JSON header line
//! `{"arch":{...},"sigma_max":0.1,"param_count":N,"dtype":"f32"}`, a single
//! `\n`, then `N` little-endian `f32` parameters in layer order.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::network::{Architecture, Network};
use crate::error::{Error, Result};
use crate::io::{read_bytes, split_header, write_bytes};

pub const DEFAULT_SIGMA_MAX: f64 = 0.1;

/// Extra gain on the conv that closes each residual branch, so freshly
/// initialized blocks start close to the identity.
const RESIDUAL_INIT_GAIN: f64 = 0.1;

#[derive(Clone, Debug)]
pub struct EnergyModel {
    net: Network,
    params: Vec<f64>,
    sigma_max: f64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EmdlHeader {
    arch: Architecture,
    sigma_max: f64,
    param_count: usize,
    dtype: String,
}

impl EnergyModel {
    pub fn new(arch: &Architecture, params: Vec<f64>, sigma_max: f64) -> Result<Self> {
        let net = Network::new(arch)?;
        if params.len() != net.param_count() {
            return Err(Error::Shape(format!(
                "architecture needs {} parameters, got {}",
                net.param_count(),
                params.len()
            )));
        }
        if let Some(i) = params.iter().position(|p| !p.is_finite()) {
            return Err(Error::NonFinite {
                what: "model parameter",
                index: i,
            });
        }
        if !(sigma_max.is_finite() && sigma_max > 0.0) {
            return Err(Error::InvalidParam(format!("sigma_max must be positive, got {sigma_max}")));
        }
        Ok(EnergyModel {
            net,
            params,
            sigma_max,
        })
    }

    /// All weights zero: `psi = 0` and the energy is `0.5 |s|^2`.
    pub fn zeros(arch: &Architecture) -> Result<Self> {
        let n = Network::new(arch)?.param_count();
        EnergyModel::new(arch, vec![0.0; n], DEFAULT_SIGMA_MAX)
    }

    /// Seeded normal initialization: variance `2/fan_in` after a rectifier,
    /// `1/fan_in` elsewhere.
    pub fn init(arch: &Architecture, seed: u64) -> Result<Self> {
        let net = Network::new(arch)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = vec![0.0; net.param_count()];
        let damped = net.residual_branch_layers();
        for (i, layer) in net.layers().iter().enumerate() {
            let std = if damped.contains(&i) {
                RESIDUAL_INIT_GAIN * (2.0 / layer.fan_in() as f64).sqrt()
            } else {
                (1.0 / layer.fan_in() as f64).sqrt()
            };
            for p in &mut params[layer.offset..layer.offset + layer.weight_count()] {
                let z: f64 = StandardNormal.sample(&mut rng);
                *p = std * z;
            }
        }
        Ok(EnergyModel {
            net,
            params,
            sigma_max: DEFAULT_SIGMA_MAX,
        })
    }

    pub fn with_sigma_max(mut self, sigma_max: f64) -> Result<Self> {
        if !(sigma_max.is_finite() && sigma_max > 0.0) {
            return Err(Error::InvalidParam(format!("sigma_max must be positive, got {sigma_max}")));
        }
        self.sigma_max = sigma_max;
        Ok(self)
    }

    pub fn arch(&self) -> &Architecture {
        self.net.arch()
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn sigma_max(&self) -> f64 {
        self.sigma_max
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let header = EmdlHeader {
            arch: self.arch().clone(),
            sigma_max: self.sigma_max,
            param_count: self.params.len(),
            dtype: "f32".into(),
        };
        let mut out = serde_json::to_vec(&header).map_err(|e| Error::Header(e.to_string()))?;
        out.push(b'\n');
        out.reserve(self.params.len() * 4);
        for &p in &self.params {
            out.extend_from_slice(&(p as f32).to_le_bytes());
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let (header, payload): (EmdlHeader, _) = split_header(bytes)?;
        if header.dtype != "f32" {
            return Err(Error::Dtype(header.dtype));
        }
        if payload.len() != header.param_count * 4 {
            return Err(Error::PayloadSize {
                expected: header.param_count * 4,
                found: payload.len(),
            });
        }
        let params = payload
            .chunks_exact(4)
            .map(|ch| f32::from_le_bytes(ch.try_into().unwrap()) as f64)
            .collect();
        EnergyModel::new(&header.arch, params, header.sigma_max)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        write_bytes(path.as_ref(), &self.encode()?)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        EnergyModel::decode(&read_bytes(path.as_ref())?)
    }

    /// Parameters rounded through single precision, as stored on disk.
    pub fn quantized(&self) -> Self {
        let mut m = self.clone();
        m.params.iter_mut().for_each(|p| *p = *p as f32 as f64);
        m
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Architecture {
        Architecture {
            channels: vec![4, 8],
            blocks_per_scale: 1,
            kernel_size: 3,
        }
    }

    #[test]
    fn init_is_seeded() {
        let a = EnergyModel::init(&small(), 3).unwrap();
        let b = EnergyModel::init(&small(), 3).unwrap();
        let c = EnergyModel::init(&small(), 4).unwrap();
        assert_eq!(a.params(), b.params());
        assert_ne!(a.params(), c.params());
    }

    #[test]
    fn param_count_is_checked() {
        assert!(matches!(
            EnergyModel::new(&small(), vec![0.0; 3], 0.1),
            Err(Error::Shape(_))
        ));
        let n = EnergyModel::zeros(&small()).unwrap().params().len();
        let mut p = vec![0.0; n];
        p[1] = f64::INFINITY;
        assert!(matches!(
            EnergyModel::new(&small(), p, 0.1),
            Err(Error::NonFinite { index: 1, .. })
        ));
    }

    #[test]
    fn emdl_round_trip() {
        let m = EnergyModel::init(&small(), 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.emdl");
        m.write(&path).unwrap();
        let back = EnergyModel::read(&path).unwrap();
        assert_eq!(back.arch(), m.arch());
        assert_eq!(back.sigma_max(), m.sigma_max());
        assert_eq!(back.params(), m.quantized().params());
        assert_eq!(back.encode().unwrap(), m.encode().unwrap());
    }

    #[test]
    fn emdl_header_layout() {
        let m = EnergyModel::zeros(&Architecture {
            channels: vec![1],
            blocks_per_scale: 0,
            kernel_size: 1,
        })
        .unwrap();
        let bytes = m.encode().unwrap();
        let nl = bytes.iter().position(|&b| b == b'\n').unwrap();
        assert_eq!(
            std::str::from_utf8(&bytes[..nl]).unwrap(),
            r#"{"arch":{"channels":[1],"blocks_per_scale":0,"kernel_size":1},"sigma_max":0.1,"param_count":4,"dtype":"f32"}"#
        );
        assert_eq!(bytes.len(), nl + 1 + 16);
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let m = EnergyModel::init(&small(), 1).unwrap();
        let bytes = m.encode().unwrap();
        assert!(matches!(
            EnergyModel::decode(&bytes[..bytes.len() - 4]),
            Err(Error::PayloadSize { .. })
        ));
    }
}
