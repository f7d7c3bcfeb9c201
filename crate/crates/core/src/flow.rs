//! The trained transport `T_θ`: standardization followed by the blocks in order.

use alloc::vec::Vec;
use core::f64::consts::PI;

use crate::datasets::Standardizer;
use crate::error::{Error, Result};
use crate::matrix::Mat;
use crate::net::{ArchSpec, ResidualVectorField};
use crate::objective::{Batch, Potential};
use crate::ode::{self, BlockInterval, DivergenceMode, IntegratorConfig, ProbeSeed};
use crate::rng;

/// Rows processed per integration call; bounds peak memory on large sets.
const CHUNK: usize = 2048;

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FlowMetadata {
    pub seed: u64,
    pub config_hash: u64,
    /// Training hit the block cap before the termination ratio fell below ε.
    pub unterminated: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlowNetwork {
    pub arch: ArchSpec,
    /// JKO blocks in time order.
    pub blocks: Vec<ResidualVectorField>,
    /// Trained on the KL term alone; always integrated after the JKO blocks.
    pub free_block: Option<ResidualVectorField>,
    pub standardizer: Standardizer,
    pub potential: Potential,
    pub integrator: IntegratorConfig,
    pub metadata: FlowMetadata,
}

/// Rewrites the block index of integration faults raised by [`ode`].
pub(crate) fn at_block(e: Error, block: usize) -> Error {
    match e {
        Error::NonFiniteState { substep, .. } => Error::NonFiniteState { block, substep },
        Error::NonFiniteOutput => Error::NonFiniteState { block, substep: 0 },
        other => other,
    }
}

impl FlowNetwork {
    /// A flow with no blocks: the standardization alone.
    pub fn empty(arch: ArchSpec, standardizer: Standardizer, potential: Potential, integrator: IntegratorConfig) -> Self {
        FlowNetwork {
            arch,
            blocks: Vec::new(),
            free_block: None,
            standardizer,
            potential,
            integrator,
            metadata: FlowMetadata::default(),
        }
    }

    pub fn dim(&self) -> usize {
        self.arch.input_dim
    }

    /// JKO blocks then the free block.
    pub fn all_blocks(&self) -> impl DoubleEndedIterator<Item = &ResidualVectorField> {
        self.blocks.iter().chain(self.free_block.iter())
    }

    pub fn block_count(&self) -> usize {
        self.blocks.len() + usize::from(self.free_block.is_some())
    }

    /// Step sizes of the JKO blocks.
    pub fn steps(&self) -> Vec<f64> {
        self.blocks.iter().map(|b| b.interval.h()).collect()
    }

    /// End time of the last block, 0 when empty.
    pub fn t_end(&self) -> f64 {
        self.all_blocks().last().map_or(0.0, |b| b.interval.t_end)
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        self.integrator.validate()?;
        self.standardizer.validate()?;
        if self.standardizer.dim() != self.dim() {
            return Err(Error::Shape("standardizer dimension differs from the architecture".into()));
        }
        let mut t = 0.0;
        for b in self.all_blocks() {
            if b.arch != self.arch {
                return Err(Error::InvalidArch("blocks must share one architecture".into()));
            }
            b.params.check_len(&self.arch)?;
            if b.interval.t_start != t {
                return Err(Error::InvalidConfig("block intervals are not contiguous from 0".into()));
            }
            t = b.interval.t_end;
        }
        Ok(())
    }

    /// Pushes standardized points through blocks `0..k` (JKO blocks only).
    pub fn push_standardized(&self, z: &Mat, k: usize) -> Result<Mat> {
        let mut x = z.clone();
        for (i, b) in self.blocks[..k].iter().enumerate() {
            x = chunked(&x, |c| ode::push_block(b, b.interval, c, &self.integrator)).map_err(|e| at_block(e, i))?;
        }
        Ok(x)
    }

    /// Standardizes `x` and integrates forward through every block. Returns
    /// the codes and the per-row divergence integral `Σ_k ∫ ∇·f`.
    ///
    /// The divergence is always exact here so likelihoods are deterministic;
    /// the substep count is the training one.
    pub fn encode(&self, x: &Mat) -> Result<(Mat, Vec<f64>)> {
        let mut z = self.standardizer.apply(x)?;
        let mut ell = alloc::vec![0.0; z.rows()];
        let cfg = IntegratorConfig {
            divergence_mode: DivergenceMode::Exact,
            ..self.integrator.clone()
        };
        for (i, b) in self.all_blocks().enumerate() {
            let mut parts = Vec::new();
            let mut start = 0;
            while start < z.rows() {
                let end = (start + CHUNK).min(z.rows());
                let s = ode::integrate_block(b, b.interval, &z.row_range(start, end), &cfg, ProbeSeed::new(0))
                    .map_err(|e| at_block(e, i))?;
                for (l, v) in ell[start..end].iter_mut().zip(&s.ell) {
                    *l += v;
                }
                parts.push(s.x);
                start = end;
            }
            if !parts.is_empty() {
                z = Mat::vstack(&parts)?;
            }
        }
        Ok((z, ell))
    }

    /// Integrates codes backward through the blocks in reverse order, in
    /// standardized space.
    pub fn decode_standardized(&self, z: &Mat) -> Result<Mat> {
        if z.cols() != self.dim() {
            return Err(Error::Shape("codes have the wrong dimension".into()));
        }
        let mut x = z.clone();
        let n = self.block_count();
        for (j, b) in self.all_blocks().rev().enumerate() {
            x = chunked(&x, |c| ode::invert_block(b, b.interval, c, &self.integrator))
                .map_err(|e| at_block(e, n - 1 - j))?;
        }
        Ok(x)
    }

    pub fn decode(&self, z: &Mat) -> Result<Mat> {
        self.standardizer.invert(&self.decode_standardized(z)?)
    }

    /// Draws `n` codes from the target and decodes them. With a mixture
    /// target the component of each code comes from `labels`, or uniformly
    /// at random when `labels` is `None`.
    pub fn sample(&self, n: usize, labels: Option<&[usize]>, seed: u64) -> Result<Mat> {
        let mut r = rng::stream(seed, &[0x7361_6d70]);
        let mut z = rng::normal_matrix(&mut r, n, self.dim());
        if let Potential::GaussianMixture { means, variance } = &self.potential {
            let sd = libm::sqrt(*variance);
            for i in 0..n {
                let label = match labels {
                    Some(l) => *l.get(i).ok_or(Error::MissingLabel)?,
                    None => rand::Rng::random_range(&mut r, 0..means.len()),
                };
                let mu = means.get(label).ok_or(Error::LabelOutOfRange {
                    label,
                    components: means.len(),
                })?;
                for (v, m) in z.row_mut(i).iter_mut().zip(mu) {
                    *v = m + sd * *v;
                }
            }
        } else if labels.is_some() {
            return Err(Error::UnexpectedLabel);
        }
        self.decode(&z)
    }

    /// Per-row log-density in nats, in the original data units. Labels pick
    /// the mixture component; an unlabeled batch under a mixture target uses
    /// the equal-weight mixture density.
    pub fn log_likelihood(&self, batch: &Batch) -> Result<Vec<f64>> {
        let (z, ell) = self.encode(&batch.x)?;
        let d = self.dim() as f64;
        let log_det = self.standardizer.log_det_jacobian();
        let mut out = Vec::with_capacity(z.rows());
        for (i, row) in z.iter_rows().enumerate() {
            let log_pz = match &self.potential {
                Potential::StandardGaussian => gaussian_log_density(row, None, 1.0, d),
                Potential::GaussianMixture { means, variance } => match batch.label(i) {
                    Some(label) => {
                        let mu = means.get(label).ok_or(Error::LabelOutOfRange {
                            label,
                            components: means.len(),
                        })?;
                        gaussian_log_density(row, Some(mu), *variance, d)
                    }
                    None => {
                        let logs: Vec<f64> = means
                            .iter()
                            .map(|mu| gaussian_log_density(row, Some(mu), *variance, d))
                            .collect();
                        log_sum_exp(&logs) - libm::log(means.len() as f64)
                    }
                },
            };
            out.push(log_pz + ell[i] + log_det);
        }
        Ok(out)
    }

    /// `−mean LL`, nats.
    pub fn nll_mean(&self, batch: &Batch) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::Empty("likelihood batch"));
        }
        let ll = self.log_likelihood(batch)?;
        Ok(-ll.iter().sum::<f64>() / ll.len() as f64)
    }

    /// Mean squared round-trip error `‖T⁻¹(T(x)) − x‖²` in standardized space.
    pub fn inversion_error(&self, x: &Mat) -> Result<f64> {
        if x.rows() == 0 {
            return Ok(0.0);
        }
        let z0 = self.standardizer.apply(x)?;
        let mut z = z0.clone();
        for (i, b) in self.all_blocks().enumerate() {
            z = chunked(&z, |c| ode::push_block(b, b.interval, c, &self.integrator)).map_err(|e| at_block(e, i))?;
        }
        let back = self.decode_standardized(&z)?;
        let diff = back.zip_map(&z0, |a, b| a - b);
        Ok(diff.row_sq_norms().iter().sum::<f64>() / x.rows() as f64)
    }

    /// Intervals of the JKO blocks laid end to end from `t = 0` with steps `h`.
    pub fn intervals_from_steps(h: &[f64]) -> Result<Vec<BlockInterval>> {
        let mut t = 0.0;
        h.iter()
            .map(|&hk| {
                let iv = BlockInterval::new(t, t + hk)?;
                t += hk;
                Ok(iv)
            })
            .collect()
    }
}

fn chunked(x: &Mat, mut f: impl FnMut(&Mat) -> Result<Mat>) -> Result<Mat> {
    if x.rows() <= CHUNK {
        return f(x);
    }
    let mut parts = Vec::new();
    let mut start = 0;
    while start < x.rows() {
        let end = (start + CHUNK).min(x.rows());
        parts.push(f(&x.row_range(start, end))?);
        start = end;
    }
    Mat::vstack(&parts)
}

fn gaussian_log_density(z: &[f64], mean: Option<&[f64]>, var: f64, d: f64) -> f64 {
    let sq: f64 = match mean {
        Some(mu) => z.iter().zip(mu).map(|(a, m)| (a - m) * (a - m)).sum(),
        None => z.iter().map(|a| a * a).sum(),
    };
    -0.5 * (sq / var + d * libm::log(2.0 * PI * var))
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + libm::log(v.iter().map(|x| libm::exp(x - m)).sum::<f64>())
}
