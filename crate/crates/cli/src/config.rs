use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use slabpen::admm::{DEFAULT_BETA, DEFAULT_LAMBDA_MUSE, DEFAULT_LAMBDA_TV, DEFAULT_OUTER_ITERS, DEFAULT_SD_STEPS, DEFAULT_TOL};
use slabpen::tv::DEFAULT_INNER_ITERS;
use slabpen::{AdmmConfig, DiffusionProtocol, DsmConfig, PhantomSpec, Prior, ProfileSpec, SlabGeometry, TvConfig};

use crate::error::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Lsq,
    Tv,
    Muse,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Lsq, Method::Tv, Method::Muse];

    pub fn name(self) -> &'static str {
        match self {
            Method::Lsq => "lsq",
            Method::Tv => "tv",
            Method::Muse => "muse",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FieldKind {
    #[default]
    Bundle,
    Isotropic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeometryConfig {
    pub n_slab: usize,
    pub slices_per_slab: usize,
}

impl Default for GeometryConfig {
    fn default() -> Self {
        GeometryConfig {
            n_slab: 8,
            slices_per_slab: 8,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AcquisitionConfig {
    /// Per-channel noise standard deviation added to every acquired slab.
    pub noise_sigma: f64,
    /// Indices of slabs that are not acquired.
    pub dropped_slabs: Vec<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffusionConfig {
    pub protocol: DiffusionProtocol,
    pub field: FieldKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub dsm: DsmConfig,
    /// Nested-ellipsoid phantoms in the training corpus.
    pub phantoms: usize,
    pub slice_stride: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            dsm: DsmConfig::default(),
            phantoms: 8,
            slice_stride: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReconstructConfig {
    pub method: Method,
    /// Defaults depend on the method.
    pub lambda: Option<f64>,
    pub beta: f64,
    pub outer_iters: usize,
    pub sd_steps: usize,
    pub sd_step_size: Option<f64>,
    pub tol: f64,
    pub tv_inner_iters: usize,
    /// Defaults to `model.emdl` in the output directory.
    pub model: Option<PathBuf>,
    pub png: bool,
}

impl Default for ReconstructConfig {
    fn default() -> Self {
        ReconstructConfig {
            method: Method::Lsq,
            lambda: None,
            beta: DEFAULT_BETA,
            outer_iters: DEFAULT_OUTER_ITERS,
            sd_steps: DEFAULT_SD_STEPS,
            sd_step_size: None,
            tol: DEFAULT_TOL,
            tv_inner_iters: DEFAULT_INNER_ITERS,
            model: None,
            png: true,
        }
    }
}

impl ReconstructConfig {
    pub fn lambda_for(&self, method: Method) -> f64 {
        self.lambda.unwrap_or(match method {
            Method::Lsq => 0.0,
            Method::Tv => DEFAULT_LAMBDA_TV,
            Method::Muse => DEFAULT_LAMBDA_MUSE,
        })
    }

    /// ADMM settings with the given prior; TV weight is `lambda / beta`.
    pub fn admm(&self, method: Method, prior: Prior) -> AdmmConfig {
        let lambda = self.lambda_for(method);
        let prior = match prior {
            Prior::Tv(_) => Prior::Tv(TvConfig {
                inner_iters: self.tv_inner_iters,
                ..TvConfig::new(lambda / self.beta)
            }),
            p => p,
        };
        AdmmConfig {
            lambda,
            beta: self.beta,
            outer_iters: self.outer_iters,
            sd_steps: self.sd_steps,
            sd_step_size: self.sd_step_size,
            tol: self.tol,
            prior,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluateConfig {
    /// Methods to score; every reconstruction present on disk when absent.
    pub methods: Option<Vec<Method>>,
    /// Tensor-fit mask as a fraction of `max |S0|`.
    pub mask_fraction: f64,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        EvaluateConfig {
            methods: None,
            mask_fraction: slabpen::dti::DEFAULT_MASK_FRACTION,
        }
    }
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub phantom: PhantomSpec,
    #[serde(default)]
    pub geometry: GeometryConfig,
    #[serde(default)]
    pub profiles: ProfileSpec,
    #[serde(default)]
    pub acquisition: AcquisitionConfig,
    #[serde(default)]
    pub diffusion: Option<DiffusionConfig>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub reconstruct: ReconstructConfig,
    #[serde(default)]
    pub evaluate: EvaluateConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out_dir: default_out_dir(),
            phantom: PhantomSpec::default(),
            geometry: GeometryConfig::default(),
            profiles: ProfileSpec::default(),
            acquisition: AcquisitionConfig::default(),
            diffusion: None,
            train: TrainConfig::default(),
            reconstruct: ReconstructConfig::default(),
            evaluate: EvaluateConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    /// `--seed` replaces every seed in the document.
    pub fn override_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.phantom.seed = seed;
        self.train.dsm.seed = seed;
    }

    pub fn slab_geometry(&self) -> Result<SlabGeometry, CliError> {
        SlabGeometry::new(self.geometry.n_slab, self.geometry.slices_per_slab).map_err(CliError::config)
    }

    pub fn mask(&self) -> Vec<bool> {
        let mut mask = vec![true; self.geometry.n_slab];
        for &k in &self.acquisition.dropped_slabs {
            if let Some(m) = mask.get_mut(k) {
                *m = false;
            }
        }
        mask
    }

    /// Training-only check: patches must fit the phantom slices.
    pub fn validate_training(&self) -> Result<(), CliError> {
        let p = self.train.dsm.patch_size;
        if p > self.phantom.shape[0] || p > self.phantom.shape[1] {
            return Err(CliError::Config(format!(
                "patch_size {p} exceeds the in-plane phantom size {:?}",
                &self.phantom.shape[..2]
            )));
        }
        Ok(())
    }

    /// Checks every section before any computation runs.
    pub fn validate(&self) -> Result<(), CliError> {
        let geometry = self.slab_geometry()?;
        self.profiles.validate(&geometry).map_err(CliError::config)?;
        self.phantom.validate().map_err(CliError::config)?;
        if self.phantom.shape[2] != geometry.nz() {
            return Err(CliError::Config(format!(
                "phantom depth {} does not equal n_slab * slices_per_slab = {}",
                self.phantom.shape[2],
                geometry.nz()
            )));
        }
        let acq = &self.acquisition;
        if !(acq.noise_sigma.is_finite() && acq.noise_sigma >= 0.0) {
            return Err(CliError::Config(format!("noise_sigma must be >= 0, got {}", acq.noise_sigma)));
        }
        if let Some(&k) = acq.dropped_slabs.iter().find(|&&k| k >= geometry.n_slab) {
            return Err(CliError::Config(format!("dropped slab {k} out of range 0..{}", geometry.n_slab)));
        }
        if !self.mask().iter().any(|&a| a) {
            return Err(CliError::Config("every slab is dropped".into()));
        }
        if let Some(d) = &self.diffusion {
            d.protocol.validate().map_err(CliError::config)?;
            if !d.protocol.includes_b0 {
                return Err(CliError::Config("diffusion protocol must include a b0 volume".into()));
            }
        }
        self.train.dsm.validate().map_err(CliError::config)?;
        if self.train.phantoms == 0 || self.train.slice_stride == 0 {
            return Err(CliError::Config("train.phantoms and train.slice_stride must be >= 1".into()));
        }
        let r = &self.reconstruct;
        for m in Method::ALL {
            let prior = if m == Method::Tv { Prior::Tv(TvConfig::new(0.0)) } else { Prior::None };
            r.admm(m, prior).validate().map_err(CliError::config)?;
        }
        let f = self.evaluate.mask_fraction;
        if !(0.0..1.0).contains(&f) {
            return Err(CliError::Config(format!("mask_fraction must lie in [0, 1), got {f}")));
        }
        Ok(())
    }
}
