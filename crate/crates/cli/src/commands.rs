use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use slabpen::admm::history_csv;
use slabpen::dti::fit_tensor;
use slabpen::io::{
    read_measurements, read_profiles, read_volume, sidecar_path, write_json, write_measurements, write_profiles,
    write_tensor_field, write_volume,
};
use slabpen::phantom::{acquire, training_slices, BACKGROUND_DIFFUSIVITY};
use slabpen::{
    admm_reconstruct, forward_pen, lsq_pen, make_phantom, make_profiles, make_tensor_field, nrmse, psnr, ssim,
    synth_dwi, train_dsm, EnergyModel, Prior, ProfileModel, SlabMeasurements, TensorField, TensorMaps, TvConfig,
    Volume,
};

use crate::config::{FieldKind, Method, RunConfig};
use crate::error::CliError;
use crate::png;

/// Output directory guard: refuses to overwrite existing files without `--force`.
pub struct Outputs {
    dir: PathBuf,
    force: bool,
}

impl Outputs {
    pub fn new(dir: &Path, force: bool) -> Self {
        Outputs {
            dir: dir.to_path_buf(),
            force,
        }
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// Checks all `names` up front, then creates the directory.
    pub fn claim(&self, names: &[String]) -> Result<(), CliError> {
        if !self.force {
            if let Some(p) = names.iter().map(|n| self.path(n)).find(|p| p.exists()) {
                return Err(CliError::Config(format!(
                    "{} exists; pass --force to overwrite",
                    p.display()
                )));
            }
        }
        fs::create_dir_all(&self.dir).map_err(|e| CliError::Data(format!("{}: {e}", self.dir.display())))
    }
}

fn with_sidecar(name: &str) -> [String; 2] {
    [name.to_string(), format!("{name}.json")]
}

fn dwi_name(kind: &str, j: usize) -> String {
    format!("dwi_{kind}_{j:02}.svol")
}

fn dwi_recon_name(m: Method, j: usize) -> String {
    format!("dwi_recon_{}_{j:02}.svol", m.name())
}

/// Noise seed of series volume `j` (0 = anatomical phantom, then DWIs); slab `i`
/// adds `i`.
fn noise_seed(seed: u64, j: usize) -> u64 {
    seed.wrapping_mul(1 << 20).wrapping_add((j as u64) << 10)
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn read_existing(path: &Path, what: &str) -> Result<Volume, CliError> {
    if !path.exists() {
        return Err(CliError::Data(format!("missing {what}: {}", path.display())));
    }
    Ok(read_volume(path)?)
}

fn middle_slab_centre(cfg: &RunConfig) -> usize {
    let d = cfg.geometry.slices_per_slab;
    (cfg.geometry.n_slab / 2) * d + d / 2
}

#[derive(Debug, Serialize)]
struct ConditionRange {
    /// `null` when some group is rank deficient.
    min: Option<f64>,
    max: Option<f64>,
}

impl ConditionRange {
    fn of(values: &[f64]) -> Self {
        let finite = |x: f64| x.is_finite().then_some(x);
        ConditionRange {
            min: finite(values.iter().cloned().fold(f64::INFINITY, f64::min)),
            max: finite(values.iter().cloned().fold(0.0, f64::max)),
        }
    }

    fn describe(&self) -> String {
        let f = |x: Option<f64>| x.map_or("inf".to_string(), |v| format!("{v:.4}"));
        format!("min {} max {}", f(self.min), f(self.max))
    }
}

#[derive(Debug, Serialize)]
struct ConditioningReport {
    full_sampling: ConditionRange,
    acquired: ConditionRange,
    acquired_slabs: usize,
}

fn tensor_field(cfg: &RunConfig, kind: FieldKind) -> TensorField {
    let shape = cfg.phantom.shape;
    match kind {
        FieldKind::Bundle => make_tensor_field(shape, cfg.seed),
        FieldKind::Isotropic => {
            let d = BACKGROUND_DIFFUSIVITY;
            TensorField::uniform(shape, [d, d, d, 0.0, 0.0, 0.0])
        }
    }
}

pub fn simulate(cfg: &RunConfig, force: bool, self_check: bool) -> Result<(), CliError> {
    let geometry = cfg.slab_geometry()?;
    let mask = cfg.mask();
    let out = Outputs::new(&cfg.out_dir, force);
    let mut names = vec!["truth.svol".to_string(), "conditioning.json".to_string()];
    names.extend(with_sidecar("profiles.svol"));
    names.extend(with_sidecar("meas.svol"));
    if let Some(d) = &cfg.diffusion {
        names.extend(with_sidecar("tensor.svol"));
        for j in 0..d.protocol.volume_count() {
            names.push(dwi_name("truth", j));
            names.extend(with_sidecar(&dwi_name("meas", j)));
        }
    }
    out.claim(&names)?;

    let truth = make_phantom(&cfg.phantom)?;
    let profiles = make_profiles(geometry, &cfg.profiles, cfg.seed)?;
    let sigma = cfg.acquisition.noise_sigma;
    let meas = acquire(&truth, &profiles, &mask, sigma, noise_seed(cfg.seed, 0))?;
    write_volume(&truth, out.path("truth.svol"))?;
    write_profiles(&profiles, out.path("profiles.svol"))?;
    write_measurements(&meas, out.path("meas.svol"))?;

    let report = ConditioningReport {
        full_sampling: ConditionRange::of(&profiles.group_condition_numbers(&geometry.full_mask())),
        acquired: ConditionRange::of(&profiles.group_condition_numbers(&mask)),
        acquired_slabs: meas.slabs().len(),
    };
    write_json(&report, out.path("conditioning.json"))?;
    println!("group condition number, full sampling: {}", report.full_sampling.describe());
    println!(
        "group condition number, {} of {} slabs acquired: {}",
        report.acquired_slabs,
        geometry.n_slab,
        report.acquired.describe()
    );

    if let Some(d) = &cfg.diffusion {
        let field = tensor_field(cfg, d.field);
        write_tensor_field(&field, out.path("tensor.svol"))?;
        for (j, dwi) in synth_dwi(&truth, &field, &d.protocol)?.iter().enumerate() {
            write_volume(dwi, out.path(&dwi_name("truth", j)))?;
            let m = acquire(dwi, &profiles, &mask, sigma, noise_seed(cfg.seed, j + 1))?;
            write_measurements(&m, out.path(&dwi_name("meas", j)))?;
        }
    }

    if self_check {
        check_measurements(cfg, &out)?;
        println!("self-check passed");
    }
    Ok(())
}

/// Re-reads the written files and checks them against the forward model.
fn check_measurements(cfg: &RunConfig, out: &Outputs) -> Result<(), CliError> {
    let truth = read_volume(out.path("truth.svol"))?;
    let profiles = read_profiles(out.path("profiles.svol"))?;
    let meas = read_measurements(out.path("meas.svol"))?;
    let expected = forward_pen(&truth, &profiles, meas.mask())?;
    let sigma = cfg.acquisition.noise_sigma;
    // files hold f32 samples
    let tol = 1e-6 * expected.max_abs().max(f64::MIN_POSITIVE);
    let fail = |msg: String| Err(CliError::Data(format!("self-check failed: {msg}")));
    if sigma == 0.0 {
        let err = max_abs_diff(&meas, &expected);
        if err > tol {
            return fail(format!("measurements deviate from the forward model by {err:e}"));
        }
        if cfg.profiles.model == ProfileModel::Rect {
            let g = meas.geometry();
            for (slab, k) in meas.slabs().iter().zip(meas.acquired()) {
                let part = truth.z_range(g.window(k).start, g.slices_per_slab)?;
                let err = slab.sub(&part).max_abs();
                if err > tol {
                    return fail(format!("slab {k} differs from the phantom by {err:e}"));
                }
            }
        }
    } else {
        let residual = meas.norm_sqr() - 2.0 * meas.dot(&expected) + expected.norm_sqr();
        let samples = 2 * meas.slabs().iter().map(Volume::len).sum::<usize>();
        let std = (residual / samples as f64).sqrt();
        if (std - sigma).abs() > 0.1 * sigma {
            return fail(format!("noise level {std:e} does not match sigma {sigma:e}"));
        }
    }
    Ok(())
}

fn max_abs_diff(a: &SlabMeasurements, b: &SlabMeasurements) -> f64 {
    a.slabs()
        .iter()
        .zip(b.slabs())
        .map(|(x, y)| x.sub(y).max_abs())
        .fold(0.0, f64::max)
}

pub fn train(cfg: &RunConfig, force: bool) -> Result<(), CliError> {
    cfg.validate_training()?;
    let out = Outputs::new(&cfg.out_dir, force);
    out.claim(&["model.emdl".to_string(), "loss.csv".to_string()])?;
    let t = &cfg.train;
    let slices = training_slices(cfg.phantom.shape, t.phantoms, cfg.seed, t.slice_stride)?;
    eprintln!("training on {} slices for {} steps", slices.len(), t.dsm.steps);
    let report = train_dsm(&slices, &t.dsm)?;
    report.model.write(out.path("model.emdl"))?;
    let mut csv = String::from("step,loss\n");
    for (i, l) in report.losses.iter().enumerate() {
        writeln!(csv, "{},{l:e}", i + 1).expect("string write");
    }
    write_text(&out.path("loss.csv"), &csv)?;
    println!("running loss {:.6}", report.running_loss);
    Ok(())
}

fn reconstruct_one(
    meas: &SlabMeasurements,
    profiles: &slabpen::SlabProfileSet,
    cfg: &RunConfig,
    method: Method,
    model: Option<&EnergyModel>,
) -> Result<(Volume, String), CliError> {
    let r = &cfg.reconstruct;
    let prior = match method {
        Method::Lsq => return Ok((lsq_pen(meas, profiles)?, history_csv(&[]))),
        Method::Tv => Prior::Tv(TvConfig::new(0.0)),
        Method::Muse => Prior::Muse(model.expect("model loaded for muse").clone()),
    };
    let out = admm_reconstruct(meas, profiles, &r.admm(method, prior))?;
    eprintln!(
        "{}: {} iterations, converged {}",
        method.name(),
        out.state.iteration,
        out.converged
    );
    Ok((out.volume, history_csv(&out.state.history)))
}

pub fn reconstruct(cfg: &RunConfig, method: Method, force: bool) -> Result<(), CliError> {
    let out = Outputs::new(&cfg.out_dir, force);
    let m = method.name();
    let dwi_count = cfg.diffusion.as_ref().map_or(0, |d| d.protocol.volume_count());
    let mut names = vec![format!("recon_{m}.svol"), format!("history_{m}.csv")];
    if cfg.reconstruct.png {
        names.push(format!("recon_{m}.png"));
    }
    names.extend((0..dwi_count).map(|j| dwi_recon_name(method, j)));

    let meas_path = out.path("meas.svol");
    if !meas_path.exists() || !sidecar_path(&meas_path).exists() {
        return Err(CliError::Data(format!("missing measurements: {}", meas_path.display())));
    }
    let model = if method == Method::Muse {
        let path = cfg.reconstruct.model.clone().unwrap_or_else(|| out.path("model.emdl"));
        if !path.exists() {
            return Err(CliError::Data(format!("missing model file: {}", path.display())));
        }
        Some(EnergyModel::read(&path)?)
    } else {
        None
    };
    out.claim(&names)?;

    let profiles = read_profiles(out.path("profiles.svol"))?;
    let meas = read_measurements(&meas_path)?;
    meas.check_profiles(&profiles)?;
    let (recon, history) = reconstruct_one(&meas, &profiles, cfg, method, model.as_ref())?;
    write_volume(&recon, out.path(&format!("recon_{m}.svol")))?;
    write_text(&out.path(&format!("history_{m}.csv")), &history)?;
    if cfg.reconstruct.png {
        let img = png::orthogonal_triptych(&recon, middle_slab_centre(cfg).min(recon.shape()[2] - 1));
        png::save_gray(&img, &out.path(&format!("recon_{m}.png")))?;
    }
    for j in 0..dwi_count {
        let path = out.path(&dwi_name("meas", j));
        if !path.exists() {
            return Err(CliError::Data(format!("missing diffusion measurements: {}", path.display())));
        }
        let dm = read_measurements(&path)?;
        let (v, _) = reconstruct_one(&dm, &profiles, cfg, method, model.as_ref())?;
        write_volume(&v, out.path(&dwi_recon_name(method, j)))?;
    }
    println!("wrote recon_{m}.svol");
    Ok(())
}

struct MetricRow {
    method: String,
    volume: String,
    psnr: f64,
    ssim: f64,
    nrmse: f64,
}

fn metric_row(method: &str, volume: &str, recon: &Volume, truth: &Volume, peak: f64) -> Result<MetricRow, CliError> {
    if recon.shape() != truth.shape() {
        return Err(CliError::Data(format!(
            "{method}/{volume}: shape {:?} does not match ground truth {:?}",
            recon.shape(),
            truth.shape()
        )));
    }
    Ok(MetricRow {
        method: method.into(),
        volume: volume.into(),
        psnr: psnr(recon, truth, peak)?,
        ssim: ssim(recon, truth, peak)?,
        nrmse: nrmse(recon, truth)?,
    })
}

fn write_dti(out: &Outputs, label: &str, maps: &TensorMaps) -> Result<(), CliError> {
    write_volume(&maps.fa, out.path(&format!("fa_{label}.svol")))?;
    write_volume(&maps.md, out.path(&format!("md_{label}.svol")))?;
    let shape = maps.shape();
    let img = png::rgb_axial(shape, &maps.color_fa, shape[2] / 2);
    png::save_rgb(&img, &out.path(&format!("colorfa_{label}.png")))
}

fn dti_names(label: &str) -> [String; 3] {
    [
        format!("fa_{label}.svol"),
        format!("md_{label}.svol"),
        format!("colorfa_{label}.png"),
    ]
}

pub fn evaluate(cfg: &RunConfig, only: Option<Method>, force: bool) -> Result<(), CliError> {
    let out = Outputs::new(&cfg.out_dir, force);
    let truth = read_existing(&out.path("truth.svol"), "ground truth")?;
    let methods: Vec<Method> = match (only, &cfg.evaluate.methods) {
        (Some(m), _) => vec![m],
        (None, Some(list)) => list.clone(),
        (None, None) => Method::ALL
            .into_iter()
            .filter(|m| out.path(&format!("recon_{}.svol", m.name())).exists())
            .collect(),
    };
    if methods.is_empty() {
        return Err(CliError::Data("no reconstructions to evaluate".into()));
    }
    let dwi_count = cfg.diffusion.as_ref().map_or(0, |d| d.protocol.volume_count());
    let has_dwi = |m: Method| dwi_count > 0 && (0..dwi_count).all(|j| out.path(&dwi_recon_name(m, j)).exists());
    let mut names = vec!["metrics.csv".to_string()];
    if dwi_count > 0 {
        names.extend(dti_names("truth"));
        for &m in methods.iter().filter(|&&m| has_dwi(m)) {
            names.extend(dti_names(m.name()));
        }
    }
    out.claim(&names)?;

    let peak = truth.max_abs();
    let mut rows = Vec::new();
    for &m in &methods {
        let recon = read_existing(&out.path(&format!("recon_{}.svol", m.name())), "reconstruction")?;
        rows.push(metric_row(m.name(), "phantom", &recon, &truth, peak)?);
    }
    if let Some(d) = cfg.diffusion.as_ref().filter(|_| dwi_count > 0) {
        let truth_dwis = (0..dwi_count)
            .map(|j| read_existing(&out.path(&dwi_name("truth", j)), "diffusion ground truth"))
            .collect::<Result<Vec<_>, _>>()?;
        let threshold = cfg.evaluate.mask_fraction * truth_dwis[0].max_abs();
        let truth_maps = fit_tensor(&truth_dwis, &d.protocol, threshold)?;
        write_dti(&out, "truth", &truth_maps)?;
        for &m in methods.iter().filter(|&&m| has_dwi(m)) {
            let dwis = (0..dwi_count)
                .map(|j| read_existing(&out.path(&dwi_recon_name(m, j)), "diffusion reconstruction"))
                .collect::<Result<Vec<_>, _>>()?;
            let dpeak = truth_dwis[0].max_abs();
            for (j, (r, t)) in dwis.iter().zip(&truth_dwis).enumerate() {
                rows.push(metric_row(m.name(), &format!("dwi_{j:02}"), r, t, dpeak)?);
            }
            let maps = fit_tensor(&dwis, &d.protocol, threshold)?;
            write_dti(&out, m.name(), &maps)?;
            rows.push(metric_row(m.name(), "fa", &maps.fa, &truth_maps.fa, 1.0)?);
        }
    }
    let mut csv = String::from("method,volume,psnr,ssim,nrmse\n");
    for r in &rows {
        writeln!(csv, "{},{},{},{},{}", r.method, r.volume, r.psnr, r.ssim, r.nrmse).expect("string write");
    }
    write_text(&out.path("metrics.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}
