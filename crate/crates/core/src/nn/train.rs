//! Denoising score matching.
//!
//! Per patch the loss is the mean over elements of `(sigma * grad E(x + sigma n) - n)^2`.
//! Its parameter gradient needs the mixed derivative of the score. With
//! `r = x~ - psi(x~)`, `s = r - J^T r` and `v = dL/ds`:
//!
//! ```text
//! dL/dtheta = -(v - J v)^T dpsi/dtheta - r^T d(J v)/dtheta
//! ```
//!
//! `J v` comes from one tangent pass; the two terms are reverse passes over the
//! primal and tangent activation streams with shared rectifier masks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::conv::Tensor;
use super::model::EnergyModel;
use super::network::Architecture;
use crate::error::{Error, Result};
use crate::volume::Slice2C;

const CLIP_NORM: f64 = 1.0;
const RUNNING_DECAY: f64 = 0.95;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DsmConfig {
    pub arch: Architecture,
    pub sigma_range: [f64; 2],
    /// Patches per step.
    pub batch: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub patch_size: usize,
    pub seed: u64,
}

impl Default for DsmConfig {
    fn default() -> Self {
        DsmConfig {
            arch: Architecture::default(),
            sigma_range: [0.0, 0.1],
            batch: 4,
            steps: 2000,
            learning_rate: 0.01,
            patch_size: 32,
            seed: 0,
        }
    }
}

impl DsmConfig {
    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        let [lo, hi] = self.sigma_range;
        if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
            return Err(Error::InvalidParam(format!(
                "sigma_range must satisfy 0 <= lo <= hi <= 1, got {:?}",
                self.sigma_range
            )));
        }
        if self.batch == 0 {
            return Err(Error::InvalidParam("batch must be at least 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::InvalidParam(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        let m = self.arch.size_multiple().max(4);
        if self.patch_size < 16 || self.patch_size % m != 0 {
            return Err(Error::InvalidParam(format!(
                "patch_size must be >= 16 and divisible by {m}, got {}",
                self.patch_size
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub model: EnergyModel,
    /// Mean batch loss per step.
    pub losses: Vec<f64>,
    /// Exponential moving average of the batch loss after the last step.
    pub running_loss: f64,
}

/// Trains a freshly initialized model; initialization is seeded from `cfg.seed`.
pub fn train_dsm(slices: &[Slice2C], cfg: &DsmConfig) -> Result<TrainReport> {
    cfg.validate()?;
    let model = EnergyModel::init(&cfg.arch, cfg.seed)?.with_sigma_max(cfg.sigma_range[1].max(f64::MIN_POSITIVE))?;
    train_dsm_from(model, slices, cfg)
}

/// Continues training `model`; `cfg.arch` is ignored in favour of the model's own.
pub fn train_dsm_from(mut model: EnergyModel, slices: &[Slice2C], cfg: &DsmConfig) -> Result<TrainReport> {
    cfg.validate()?;
    if slices.is_empty() {
        return Err(Error::InvalidParam("training set is empty".into()));
    }
    let p = cfg.patch_size;
    if let Some(s) = slices.iter().find(|s| s.shape()[0] < p || s.shape()[1] < p) {
        return Err(Error::Shape(format!(
            "training slice {:?} is smaller than patch size {p}",
            s.shape()
        )));
    }
    let data: Vec<Slice2C> = slices.iter().map(normalized).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_d5a0);
    let mut grad = vec![0.0; model.params().len()];
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut running = f64::NAN;
    for step in 0..cfg.steps {
        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut loss = 0.0;
        for _ in 0..cfg.batch {
            let clean = sample_patch(&data, p, &mut rng);
            let sigma = if cfg.sigma_range[0] < cfg.sigma_range[1] {
                rng.random_range(cfg.sigma_range[0]..cfg.sigma_range[1])
            } else {
                cfg.sigma_range[0]
            };
            let noise: Vec<f64> = (0..clean.len()).map(|_| StandardNormal.sample(&mut rng)).collect();
            loss += dsm_patch_grad(&model, &clean, &noise, sigma, &mut grad);
        }
        let inv = 1.0 / cfg.batch as f64;
        loss *= inv;
        grad.iter_mut().for_each(|g| *g *= inv);
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numerical(format!(
                "training diverged at step {step}: loss {loss}"
            )));
        }
        let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        let scale = if norm > CLIP_NORM { CLIP_NORM / norm } else { 1.0 };
        for (w, g) in model.params_mut().iter_mut().zip(&grad) {
            *w -= cfg.learning_rate * scale * g;
        }
        running = if running.is_nan() {
            loss
        } else {
            RUNNING_DECAY * running + (1.0 - RUNNING_DECAY) * loss
        };
        losses.push(loss);
    }
    Ok(TrainReport {
        model,
        losses,
        running_loss: running,
    })
}

fn normalized(s: &Slice2C) -> Slice2C {
    let peak = s.max_magnitude();
    if peak == 0.0 {
        return s.clone();
    }
    Slice2C::from_planes(s.shape(), s.data().iter().map(|v| v / peak).collect()).expect("same shape")
}

/// Random crop with one of the eight square symmetries and a random global phase.
fn sample_patch(data: &[Slice2C], p: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let s = &data[rng.random_range(0..data.len())];
    let [n0, n1] = s.shape();
    let x0 = rng.random_range(0..=n0 - p);
    let y0 = rng.random_range(0..=n1 - p);
    let sym = rng.random_range(0..8u8);
    let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let (sn, cs) = phase.sin_cos();
    let (re, im) = (s.real(), s.imag());
    let mut out = Tensor::zeros(2, p, p);
    let plane = p * p;
    for y in 0..p {
        for x in 0..p {
            let (mut u, mut v) = (x, y);
            if sym & 1 != 0 {
                u = p - 1 - u;
            }
            if sym & 2 != 0 {
                v = p - 1 - v;
            }
            if sym & 4 != 0 {
                std::mem::swap(&mut u, &mut v);
            }
            let src = (x0 + u) + n0 * (y0 + v);
            let (a, b) = (re[src], im[src]);
            out.data[y * p + x] = cs * a - sn * b;
            out.data[plane + y * p + x] = sn * a + cs * b;
        }
    }
    out
}

/// Adds the parameter gradient of one patch's loss to `grad` and returns the loss.
pub(crate) fn dsm_patch_grad(model: &EnergyModel, clean: &Tensor, noise: &[f64], sigma: f64, grad: &mut [f64]) -> f64 {
    let net = model.network();
    let params = model.params();
    let count = clean.len() as f64;
    let mut x = clean.clone();
    for (a, n) in x.data.iter_mut().zip(noise) {
        *a += sigma * n;
    }
    let values = net.forward(params, x.clone());
    let psi = values.last().expect("network output");
    let mut r = x;
    for (a, b) in r.data.iter_mut().zip(&psi.data) {
        *a -= b;
    }
    let jt = net
        .reverse(params, &values, &values, r.clone(), None, true)
        .expect("input gradient");
    let mut loss = 0.0;
    let mut v = r.clone();
    for ((vi, ji), ni) in v.data.iter_mut().zip(&jt.data).zip(noise) {
        let u = sigma * (*vi - ji) - ni;
        loss += u * u;
        *vi = 2.0 * sigma * u / count;
    }
    if sigma != 0.0 {
        let tangents = net.tangent(params, &values, v.clone());
        let mut seed = v;
        for (a, b) in seed.data.iter_mut().zip(&tangents.last().expect("tangent output").data) {
            *a = b - *a;
        }
        net.reverse(params, &values, &values, seed, Some(grad), false);
        let mut seed = r;
        seed.data.iter_mut().for_each(|a| *a = -*a);
        net.reverse(params, &values, &tangents, seed, Some(grad), false);
    }
    loss / count
}

/// One-patch loss without gradients, for checks.
#[cfg(test)]
pub(crate) fn dsm_patch_loss(model: &EnergyModel, clean: &Tensor, noise: &[f64], sigma: f64) -> f64 {
    let mut x = clean.clone();
    for (a, n) in x.data.iter_mut().zip(noise) {
        *a += sigma * n;
    }
    let s = super::energy::score_slice(&super::energy::tensor_to_slice(x), model).expect("divisible patch");
    s.data()
        .iter()
        .zip(noise)
        .map(|(si, ni)| (sigma * si - ni).powi(2))
        .sum::<f64>()
        / clean.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Architecture {
        Architecture {
            channels: vec![3, 4, 4],
            blocks_per_scale: 1,
            kernel_size: 3,
        }
    }

    fn random_tensor(len: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn parameter_gradient_matches_finite_differences() {
        let model = EnergyModel::init(&small(), 31).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let clean = Tensor::from_vec(2, 8, 8, random_tensor(128, &mut rng));
        let noise: Vec<f64> = (0..128).map(|_| StandardNormal.sample(&mut rng)).collect();
        let sigma = 0.07;
        let mut grad = vec![0.0; model.params().len()];
        let loss = dsm_patch_grad(&model, &clean, &noise, sigma, &mut grad);
        assert!((loss - dsm_patch_loss(&model, &clean, &noise, sigma)).abs() < 1e-12 * loss);
        let h = 1e-5;
        let mut fd = vec![0.0; grad.len()];
        for i in 0..grad.len() {
            let mut p = model.clone();
            p.params_mut()[i] += h;
            let mut m = model.clone();
            m.params_mut()[i] -= h;
            fd[i] = (dsm_patch_loss(&p, &clean, &noise, sigma) - dsm_patch_loss(&m, &clean, &noise, sigma)) / (2.0 * h);
        }
        let num: f64 = grad.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum();
        let den: f64 = fd.iter().map(|b| b * b).sum();
        let err = (num / den).sqrt();
        assert!(err < 1e-5, "relative error {err}");
    }

    fn phantom_slices() -> Vec<Slice2C> {
        (0..3)
            .map(|k| {
                let n = 16;
                let mut data = vec![0.0; 2 * n * n];
                for y in 0..n {
                    for x in 0..n {
                        data[x + n * y] = if (x + k) / 5 == y / 4 { 1.0 } else { 0.3 };
                    }
                }
                Slice2C::from_planes([n, n], data).unwrap()
            })
            .collect()
    }

    #[test]
    fn zero_steps_returns_initialization() {
        let cfg = DsmConfig {
            arch: small(),
            steps: 0,
            patch_size: 16,
            ..DsmConfig::default()
        };
        let report = train_dsm(&phantom_slices(), &cfg).unwrap();
        assert_eq!(report.model.params(), EnergyModel::init(&small(), cfg.seed).unwrap().params());
        assert!(report.losses.is_empty());
    }

    #[test]
    fn training_is_reproducible() {
        let cfg = DsmConfig {
            arch: small(),
            steps: 3,
            batch: 2,
            patch_size: 16,
            seed: 4,
            ..DsmConfig::default()
        };
        let a = train_dsm(&phantom_slices(), &cfg).unwrap();
        let b = train_dsm(&phantom_slices(), &cfg).unwrap();
        assert_eq!(a.model.params(), b.model.params());
        assert_eq!(a.losses, b.losses);
        assert_eq!(a.losses.len(), 3);
    }

    #[test]
    fn pure_noise_loss_stays_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let slices: Vec<Slice2C> = (0..2)
            .map(|_| Slice2C::from_planes([16, 16], random_tensor(512, &mut rng)).unwrap())
            .collect();
        let cfg = DsmConfig {
            arch: small(),
            steps: 10,
            batch: 2,
            patch_size: 16,
            ..DsmConfig::default()
        };
        let report = train_dsm(&slices, &cfg).unwrap();
        assert!(report.losses.iter().all(|l| l.is_finite() && *l > 0.0 && *l < 100.0));
        assert!(report.running_loss.is_finite());
    }

    #[test]
    fn rejects_bad_inputs() {
        let cfg = DsmConfig {
            arch: small(),
            patch_size: 16,
            ..DsmConfig::default()
        };
        assert!(train_dsm(&[], &cfg).is_err());
        assert!(train_dsm(&[Slice2C::zeros([8, 8])], &cfg).is_err());
        let bad = DsmConfig {
            sigma_range: [0.2, 0.1],
            ..cfg.clone()
        };
        assert!(bad.validate().is_err());
        let bad = DsmConfig {
            patch_size: 18,
            ..cfg
        };
        assert!(bad.validate().is_err());
    }
}
