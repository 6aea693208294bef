//! Plug-and-play ADMM for profile-encoded slab combination.
//!
//! With the augmented Lagrangian
//! `|A rho - y|^2 + lambda E(v) + <gamma, v - rho> + (beta/2) |v - rho|^2`
//! each outer iteration performs
//!
//! ```text
//! rho <- argmin |A rho - y|^2 + (beta/2) |rho - (v + gamma/beta)|^2   exact per group
//! v   <- argmin lambda E(v) + (beta/2) |v - (rho - gamma/beta)|^2     prior step
//! gamma <- gamma + beta (v - rho)
//! ```
//!
//! Data are scaled to unit peak magnitude before solving and the result is
//! scaled back, so `lambda` and `beta` are independent of the input scale.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::io::write_bytes;
use crate::nn::{energy_and_score_volume, energy_volume, score_volume, EnergyModel};
use crate::slab::{forward_pen, lsq_pen, solve_rho_update, SlabMeasurements, SlabProfileSet};
use crate::tv::{tv_denoise_volume, tv_value_volume, TvConfig};
use crate::volume::Volume;

/// Halvings allowed per steepest-descent step before giving up on it.
const MAX_BACKTRACKS: usize = 40;

#[derive(Clone, Debug)]
pub enum Prior {
    None,
    Tv(TvConfig),
    Muse(EnergyModel),
}

#[derive(Clone, Debug)]
pub struct AdmmConfig {
    pub lambda: f64,
    pub beta: f64,
    pub outer_iters: usize,
    /// Steepest-descent steps per v-update (learned prior only).
    pub sd_steps: usize,
    /// Initial descent step; estimated from the score when `None`.
    pub sd_step_size: Option<f64>,
    /// Stop once `|rho_new - rho| / |rho|` falls below this.
    pub tol: f64,
    pub prior: Prior,
}

pub const DEFAULT_BETA: f64 = 1.0;
pub const DEFAULT_LAMBDA_TV: f64 = 0.05;
pub const DEFAULT_LAMBDA_MUSE: f64 = 0.5;
pub const DEFAULT_OUTER_ITERS: usize = 20;
pub const DEFAULT_SD_STEPS: usize = 5;
pub const DEFAULT_TOL: f64 = 1e-5;

impl AdmmConfig {
    pub fn new(prior: Prior) -> Self {
        let lambda = match prior {
            Prior::None => 0.0,
            Prior::Tv(_) => DEFAULT_LAMBDA_TV,
            Prior::Muse(_) => DEFAULT_LAMBDA_MUSE,
        };
        AdmmConfig {
            lambda,
            beta: DEFAULT_BETA,
            outer_iters: DEFAULT_OUTER_ITERS,
            sd_steps: DEFAULT_SD_STEPS,
            sd_step_size: None,
            tol: DEFAULT_TOL,
            prior,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::InvalidParam(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.beta.is_finite() && self.beta > 0.0) {
            return Err(Error::InvalidParam(format!("beta must be > 0, got {}", self.beta)));
        }
        if self.outer_iters == 0 {
            return Err(Error::InvalidParam("outer_iters must be >= 1".into()));
        }
        if !(self.tol.is_finite() && self.tol >= 0.0) {
            return Err(Error::InvalidParam(format!("tol must be >= 0, got {}", self.tol)));
        }
        if let Some(t) = self.sd_step_size {
            if !(t.is_finite() && t > 0.0) {
                return Err(Error::InvalidParam(format!("sd_step_size must be > 0, got {t}")));
            }
        }
        if let Prior::Tv(tv) = &self.prior {
            tv.validate()?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IterRecord {
    pub iter: usize,
    /// `|A rho - y|^2` in normalized units.
    pub fidelity: f64,
    /// Prior energy of `v` in normalized units (zero without a prior).
    pub energy: f64,
    /// `|v - rho|`
    pub primal_residual: f64,
    pub rel_change: f64,
}

#[derive(Clone, Debug)]
pub struct AdmmState {
    pub rho: Volume,
    pub v: Volume,
    pub gamma: Volume,
    pub iteration: usize,
    pub history: Vec<IterRecord>,
}

impl AdmmState {
    /// `gamma <- gamma + beta (v - rho)`
    pub fn dual_ascent(&mut self, beta: f64) {
        let diff = self.v.sub(&self.rho);
        self.gamma.axpy(beta, &diff);
    }
}

#[derive(Clone, Debug)]
pub struct AdmmOutput {
    /// Reconstruction in the input's intensity scale.
    pub volume: Volume,
    /// Final iterates in normalized units.
    pub state: AdmmState,
    /// Whether the relative-change criterion was met before `outer_iters`.
    pub converged: bool,
    /// Data scale divided out before solving.
    pub scale: f64,
}

#[derive(Clone, Debug)]
pub struct CgOutcome {
    pub x: Volume,
    pub iterations: usize,
    pub rel_residual: f64,
    pub converged: bool,
}

/// Conjugate gradients for a symmetric positive-definite map under the real
/// inner product `Re <a, b>`.
pub fn cg_solve(
    mut apply: impl FnMut(&Volume) -> Result<Volume>,
    rhs: &Volume,
    tol: f64,
    max_iters: usize,
) -> Result<CgOutcome> {
    rhs.ensure_finite("CG right-hand side")?;
    let rhs_norm = rhs.norm();
    let mut x = Volume::zeros(rhs.shape()).with_voxel_size(rhs.voxel_size());
    if rhs_norm == 0.0 {
        return Ok(CgOutcome {
            x,
            iterations: 0,
            rel_residual: 0.0,
            converged: true,
        });
    }
    let mut r = rhs.clone();
    let mut p = r.clone();
    let mut rr = r.norm_sqr();
    let mut iterations = 0;
    while iterations < max_iters && rr.sqrt() > tol * rhs_norm {
        let ap = apply(&p)?;
        let pap = p.dot(&ap);
        if !(pap.is_finite() && pap > 0.0) {
            return Err(Error::Numerical(format!(
                "CG breakdown at iteration {iterations}: p^T M p = {pap}"
            )));
        }
        let alpha = rr / pap;
        x.axpy(alpha, &p);
        r.axpy(-alpha, &ap);
        let rr_new = r.norm_sqr();
        if !rr_new.is_finite() {
            return Err(Error::Numerical(format!("CG residual is not finite at iteration {iterations}")));
        }
        let beta = rr_new / rr;
        p = r.zip_map(&p, |ri, pi| ri + beta * pi);
        rr = rr_new;
        iterations += 1;
    }
    let rel_residual = rr.sqrt() / rhs_norm;
    Ok(CgOutcome {
        x,
        iterations,
        rel_residual,
        converged: rel_residual <= tol,
    })
}

/// Score-Lipschitz estimate `|score(r + eps d) - score(r)| / eps` along the
/// normalized score direction.
pub fn estimate_score_lipschitz(r: &Volume, model: &EnergyModel, score_r: &Volume) -> Result<f64> {
    let norm = score_r.norm();
    if norm == 0.0 {
        return Ok(0.0);
    }
    let eps = 1e-3 * r.norm().max(1.0);
    let mut probe = r.clone();
    probe.axpy(eps / norm, score_r);
    let diff = score_volume(&probe, model)?.sub(score_r);
    Ok(diff.norm() / eps)
}

fn v_objective(lambda: f64, beta: f64, energy: f64, v: &Volume, r: &Volume) -> f64 {
    lambda * energy + 0.5 * beta * v.sub(r).norm_sqr()
}

/// Result of the prior step.
#[derive(Clone, Debug)]
pub struct VUpdate {
    pub v: Volume,
    /// Prior energy of `v` (zero without a prior).
    pub energy: f64,
    /// Last accepted descent step, if any.
    pub step: Option<f64>,
}

/// `argmin_v lambda E(v) + (beta/2) |v - r|^2` for the configured prior.
pub fn v_update(r: &Volume, cfg: &AdmmConfig) -> Result<VUpdate> {
    v_update_with_step(r, cfg, cfg.sd_step_size)
}

fn v_update_with_step(r: &Volume, cfg: &AdmmConfig, tau0: Option<f64>) -> Result<VUpdate> {
    cfg.validate()?;
    r.ensure_finite("v-update input")?;
    let (lambda, beta) = (cfg.lambda, cfg.beta);
    match &cfg.prior {
        Prior::None => Ok(VUpdate {
            v: r.clone(),
            energy: 0.0,
            step: None,
        }),
        Prior::Tv(tv) => {
            if lambda == 0.0 {
                return Ok(VUpdate {
                    v: r.clone(),
                    energy: tv_value_volume(r),
                    step: None,
                });
            }
            let v = tv_denoise_volume(r, &TvConfig { weight: lambda / beta, ..*tv })?;
            let energy = tv_value_volume(&v);
            Ok(VUpdate { v, energy, step: None })
        }
        Prior::Muse(model) => {
            let (e0, g0) = energy_and_score_volume(r, model)?;
            if lambda == 0.0 || cfg.sd_steps == 0 {
                return Ok(VUpdate {
                    v: r.clone(),
                    energy: e0,
                    step: None,
                });
            }
            let tau0 = match tau0 {
                Some(t) => t,
                None => 1.0 / (lambda * estimate_score_lipschitz(r, model, &g0)? + beta),
            };
            muse_descent(r, model, lambda, beta, cfg.sd_steps, tau0, e0, g0)
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn muse_descent(
    r: &Volume,
    model: &EnergyModel,
    lambda: f64,
    beta: f64,
    steps: usize,
    tau0: f64,
    e0: f64,
    g0: Volume,
) -> Result<VUpdate> {
    let mut v = r.clone();
    let mut energy = e0;
    let mut score = g0;
    let mut obj = v_objective(lambda, beta, energy, &v, r);
    let mut tau = tau0;
    let mut last = None;
    for step in 0..steps {
        let mut grad = score.scale(lambda);
        grad.axpy(beta, &v.sub(r));
        // the score at the final iterate is never used
        let need_score = step + 1 < steps;
        let mut accepted = false;
        for _ in 0..MAX_BACKTRACKS {
            let mut cand = v.clone();
            cand.axpy(-tau, &grad);
            let (ec, gc) = if need_score {
                let (e, g) = energy_and_score_volume(&cand, model)?;
                (e, Some(g))
            } else {
                (energy_volume(&cand, model)?, None)
            };
            let oc = v_objective(lambda, beta, ec, &cand, r);
            if oc <= obj {
                v = cand;
                energy = ec;
                if let Some(gc) = gc {
                    score = gc;
                }
                obj = oc;
                last = Some(tau);
                accepted = true;
                break;
            }
            tau *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    v.ensure_finite("v-update output")?;
    Ok(VUpdate { v, energy, step: last })
}

fn rel_change(new: &Volume, old: &Volume) -> f64 {
    let d = new.sub(old).norm();
    let n = old.norm();
    if n == 0.0 {
        if d == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        d / n
    }
}

/// Runs ADMM from the unregularized reconstruction.
pub fn admm_reconstruct(meas: &SlabMeasurements, profiles: &SlabProfileSet, cfg: &AdmmConfig) -> Result<AdmmOutput> {
    admm_reconstruct_with(meas, profiles, cfg, |_, _| {})
}

/// As [`admm_reconstruct`], calling `progress` after every outer iteration.
pub fn admm_reconstruct_with(
    meas: &SlabMeasurements,
    profiles: &SlabProfileSet,
    cfg: &AdmmConfig,
    mut progress: impl FnMut(&IterRecord, &AdmmState),
) -> Result<AdmmOutput> {
    cfg.validate()?;
    meas.check_profiles(profiles)?;
    let peak = meas.max_abs();
    let scale = if peak > 0.0 { peak } else { 1.0 };
    let y = meas.map(|s| s.scale(1.0 / scale));
    let rho0 = lsq_pen(&y, profiles)?;
    let mut state = AdmmState {
        v: rho0.clone(),
        gamma: Volume::zeros(rho0.shape()).with_voxel_size(rho0.voxel_size()),
        rho: rho0,
        iteration: 0,
        history: Vec::with_capacity(cfg.outer_iters),
    };
    let beta = cfg.beta;
    let mut tau = cfg.sd_step_size;
    let mut converged = false;
    for iter in 1..=cfg.outer_iters {
        let mut u = state.gamma.scale(1.0 / beta);
        u.axpy(1.0, &state.v);
        let rho = solve_rho_update(&y, profiles, beta, Some(&u))?;
        let change = rel_change(&rho, &state.rho);
        state.rho = rho;

        let mut r = state.rho.clone();
        r.axpy(-1.0 / beta, &state.gamma);
        let upd = v_update_with_step(&r, cfg, tau)?;
        if tau.is_none() {
            tau = upd.step;
        }
        state.v = upd.v;
        state.dual_ascent(beta);
        state.iteration = iter;

        let residual = forward_pen(&state.rho, profiles, y.mask())?;
        let fidelity = residual
            .slabs()
            .iter()
            .zip(y.slabs())
            .map(|(a, b)| a.sub(b).norm_sqr())
            .sum::<f64>();
        let record = IterRecord {
            iter,
            fidelity,
            energy: upd.energy,
            primal_residual: state.v.sub(&state.rho).norm(),
            rel_change: change,
        };
        if ![record.fidelity, record.energy, record.primal_residual].iter().all(|x| x.is_finite()) {
            return Err(Error::Numerical(format!("ADMM iterate became non-finite at iteration {iter}")));
        }
        state.history.push(record);
        progress(&record, &state);
        // the first rho-update starts from the lsq solution and may not move
        // before the prior has acted, so the test begins at the second iterate
        if iter > 1 && change < cfg.tol {
            converged = true;
            break;
        }
    }
    Ok(AdmmOutput {
        volume: state.rho.scale(scale),
        state,
        converged,
        scale,
    })
}

pub fn history_csv(history: &[IterRecord]) -> String {
    let mut out = String::from("iter,fidelity,energy,primal_residual,rel_change\n");
    for r in history {
        let _ = writeln!(
            out,
            "{},{:e},{:e},{:e},{:e}",
            r.iter, r.fidelity, r.energy, r.primal_residual, r.rel_change
        );
    }
    out
}

pub fn write_history_csv(history: &[IterRecord], path: impl AsRef<Path>) -> Result<()> {
    write_bytes(path.as_ref(), history_csv(history).as_bytes())
}
