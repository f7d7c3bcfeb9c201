//! Run configuration, read from TOML.
//!
//! ```toml
//! version = 1
//! seed = 7
//! output_dir = "runs/checkerboard"
//!
//! [data]
//! name = "checkerboard"
//! n_samples = 10000
//!
//! [train]
//! epochs_per_block = 100
//!
//! [trajectory]
//! reparam_iters = 4
//! ```
//!
//! Every section but `data` is optional and every key has a default; unknown
//! keys are errors. `JKOFLOW_OUTPUT_ROOT`, when set, prefixes a relative
//! `output_dir`.

use std::path::{Path, PathBuf};

use jkoflow_core::datasets::{DatasetKind, DatasetSpec};
use jkoflow_core::mmd::{BandwidthRule, MmdConfig};
use jkoflow_core::optim::AdamConfig;
use jkoflow_core::trajectory::ReparamConfig;
use jkoflow_core::{ArchSpec, DivergenceMode, IntegratorConfig, Potential, TrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    #[serde(default)]
    pub seed: u64,
    pub output_dir: PathBuf,
    pub data: DataConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub potential: PotentialConfig,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub trajectory: TrajectorySection,
    #[serde(default)]
    pub eval: EvalSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// A toy generator name, or `csv`.
    pub name: String,
    /// Samples per epoch for generators; ignored for CSV input.
    #[serde(default = "defaults::n_samples")]
    pub n_samples: usize,
    pub noise: Option<f64>,
    #[serde(default)]
    pub labeled: bool,
    pub path: Option<PathBuf>,
    #[serde(default = "defaults::delimiter")]
    pub delimiter: char,
    #[serde(default = "defaults::yes")]
    pub has_header: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub width: usize,
    pub depth: usize,
    pub beta: f64,
    pub time_input: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            width: 128,
            depth: 2,
            beta: 20.0,
            time_input: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PotentialConfig {
    /// `standard_gaussian` or `mixture`.
    pub kind: String,
    pub means: Option<Vec<Vec<f64>>>,
    pub variance: f64,
}

impl Default for PotentialConfig {
    fn default() -> Self {
        PotentialConfig {
            kind: "standard_gaussian".into(),
            means: None,
            variance: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub h0: f64,
    pub rho: f64,
    pub h_max: f64,
    pub epsilon: f64,
    pub max_blocks: usize,
    pub epochs_per_block: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub free_block: bool,
    pub free_block_h: Option<f64>,
    pub substeps: usize,
    /// `exact` or `hutchinson_fd`; chosen from the dimension when absent.
    pub divergence: Option<String>,
    pub probes: usize,
    pub sigma0: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::toy(2);
        TrainSection {
            h0: t.h0,
            rho: t.rho,
            h_max: t.h_max,
            epsilon: t.epsilon,
            max_blocks: t.max_blocks,
            epochs_per_block: t.epochs_per_block,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            free_block: false,
            free_block_h: None,
            substeps: t.integrator.substeps,
            divergence: None,
            probes: t.integrator.n_probes,
            sigma0: t.integrator.sigma0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrajectorySection {
    pub reparam_iters: usize,
    pub eta: f64,
    pub cv_tol: f64,
    pub retrain_epochs: Option<usize>,
    pub refine: bool,
    /// Reparameterization iterations after refinement.
    pub refined_iters: usize,
    pub reference_size: usize,
}

impl Default for TrajectorySection {
    fn default() -> Self {
        let r = ReparamConfig::default();
        TrajectorySection {
            reparam_iters: 0,
            eta: r.eta,
            cv_tol: r.cv_tol,
            retrain_epochs: None,
            refine: false,
            refined_iters: 0,
            reference_size: r.reference_size,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub n_test: usize,
    pub n_generated: usize,
    /// MMD bandwidth as a multiple of the median pairwise distance.
    pub bandwidth_scale: f64,
    pub n_bootstrap: usize,
    pub alpha: f64,
    pub inversion_points: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            n_test: 8000,
            n_generated: 10_000,
            bandwidth_scale: 0.1,
            n_bootstrap: 1000,
            alpha: 0.05,
            inversion_points: 1000,
        }
    }
}

mod defaults {
    pub fn n_samples() -> usize {
        10_000
    }
    pub fn delimiter() -> char {
        ','
    }
    pub fn yes() -> bool {
        true
    }
}

/// Where the training samples come from.
#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Toy(DatasetSpec),
    Csv { path: PathBuf, delimiter: u8, has_header: bool },
}

fn invalid(key: &str, msg: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("`{key}`: {msg}"))
}

impl RunConfig {
    pub fn parse(text: &str) -> CliResult<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Checks everything that can be checked without touching data files.
    pub fn validate(&self) -> CliResult<()> {
        if self.version != CONFIG_VERSION {
            return Err(invalid(
                "version",
                format!("schema version {} is not supported (expected {CONFIG_VERSION})", self.version),
            ));
        }
        let source = self.data_source()?;
        let arch = self.arch(2);
        arch.validate().map_err(|e| invalid("model", e))?;
        // csv dimensions are only known once the file is read
        if matches!(source, DataSource::Toy(_)) {
            self.potential(2)?;
        }
        self.train_config(2).validate().map_err(|e| invalid("train", e))?;
        if let Some(d) = self.train.divergence.as_deref() {
            if d != "exact" && d != "hutchinson_fd" {
                return Err(invalid("train.divergence", format!("expected `exact` or `hutchinson_fd`, got `{d}`")));
            }
        }
        let t = &self.trajectory;
        if !(t.eta > 0.0 && t.eta < 1.0) {
            return Err(invalid("trajectory.eta", "must lie in (0, 1)"));
        }
        if !(t.cv_tol > 0.0) {
            return Err(invalid("trajectory.cv_tol", "must be positive"));
        }
        if t.reference_size == 0 {
            return Err(invalid("trajectory.reference_size", "must be positive"));
        }
        if t.retrain_epochs == Some(0) {
            return Err(invalid("trajectory.retrain_epochs", "must be positive"));
        }
        let e = &self.eval;
        if e.n_test == 0 || e.n_generated == 0 || e.inversion_points == 0 {
            return Err(invalid("eval", "sample counts must be positive"));
        }
        self.mmd_config().validate().map_err(|e| invalid("eval", e))?;
        Ok(())
    }

    pub fn data_source(&self) -> CliResult<DataSource> {
        let d = &self.data;
        if d.name == "csv" {
            let path = d.path.clone().ok_or_else(|| invalid("data.path", "required for csv input"))?;
            if !d.delimiter.is_ascii() {
                return Err(invalid("data.delimiter", "must be a single ASCII character"));
            }
            if d.labeled {
                return Err(invalid("data.labeled", "labels are read from a `label` column in csv input"));
            }
            return Ok(DataSource::Csv {
                path,
                delimiter: d.delimiter as u8,
                has_header: d.has_header,
            });
        }
        let kind: DatasetKind = d.name.parse().map_err(|e| invalid("data.name", e))?;
        if d.n_samples == 0 {
            return Err(invalid("data.n_samples", "must be at least 1"));
        }
        let spec = DatasetSpec {
            kind,
            noise: d.noise,
            labeled: d.labeled,
        };
        spec.validate().map_err(|e| invalid("data", e))?;
        Ok(DataSource::Toy(spec))
    }

    pub fn arch(&self, dim: usize) -> ArchSpec {
        ArchSpec {
            input_dim: dim,
            hidden_widths: vec![self.model.width; self.model.depth],
            beta: self.model.beta,
            time_input: self.model.time_input,
        }
    }

    /// The equilibrium target. Labeled two-moons defaults to the mixture
    /// with means `(±2, 0)` and unit variance.
    pub fn potential(&self, dim: usize) -> CliResult<Potential> {
        let p = &self.potential;
        match p.kind.as_str() {
            "standard_gaussian" => {
                if p.means.is_some() {
                    return Err(invalid("potential.means", "only valid for a mixture"));
                }
                if self.data.labeled && self.data.name == "two_moons" {
                    return Ok(Potential::mixture(vec![vec![2.0, 0.0], vec![-2.0, 0.0]], 1.0)?);
                }
                Ok(Potential::StandardGaussian)
            }
            "mixture" => {
                let means = p.means.clone().ok_or_else(|| invalid("potential.means", "required for a mixture"))?;
                if means.iter().any(|m| m.len() != dim) {
                    return Err(invalid("potential.means", format!("every mean must have {dim} coordinates")));
                }
                Potential::mixture(means, p.variance).map_err(|e| invalid("potential", e))
            }
            other => Err(invalid("potential.kind", format!("unknown potential `{other}`"))),
        }
    }

    pub fn integrator(&self, dim: usize) -> IntegratorConfig {
        let t = &self.train;
        let base = IntegratorConfig::for_dim(dim);
        IntegratorConfig {
            substeps: t.substeps,
            divergence_mode: match t.divergence.as_deref() {
                Some("exact") => DivergenceMode::Exact,
                Some(_) => DivergenceMode::HutchinsonFd,
                None => base.divergence_mode,
            },
            n_probes: t.probes,
            sigma0: t.sigma0,
        }
    }

    pub fn train_config(&self, dim: usize) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            h0: t.h0,
            rho: t.rho,
            h_max: t.h_max,
            epsilon: t.epsilon,
            max_blocks: t.max_blocks,
            epochs_per_block: t.epochs_per_block,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            adam: AdamConfig::default(),
            use_free_block: t.free_block,
            free_block_h: t.free_block_h,
            integrator: self.integrator(dim),
            seed: self.seed,
        }
    }

    pub fn reparam_config(&self, iters: usize) -> ReparamConfig {
        let t = &self.trajectory;
        ReparamConfig {
            eta: t.eta,
            max_iters: iters,
            cv_tol: t.cv_tol,
            retrain_epochs: t.retrain_epochs,
            reference_size: t.reference_size,
        }
    }

    pub fn mmd_config(&self) -> MmdConfig {
        MmdConfig {
            bandwidth: BandwidthRule::ScaledMedian(self.eval.bandwidth_scale),
            n_bootstrap: self.eval.n_bootstrap,
            alpha: self.eval.alpha,
            seed: self.seed,
            ..MmdConfig::default()
        }
    }

    /// `output_dir`, under `JKOFLOW_OUTPUT_ROOT` when that is set and the
    /// path is relative.
    pub fn output_dir(&self) -> PathBuf {
        match std::env::var_os("JKOFLOW_OUTPUT_ROOT") {
            Some(root) if self.output_dir.is_relative() => Path::new(&root).join(&self.output_dir),
            _ => self.output_dir.clone(),
        }
    }

    /// First 8 bytes of the SHA-256 of the normalized configuration.
    pub fn hash(&self) -> u64 {
        let text = toml::to_string(self).expect("config serializes");
        let digest = Sha256::digest(text.as_bytes());
        u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
    }
}
