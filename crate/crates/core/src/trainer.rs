//! Block-wise training: each block minimizes its own JKO loss on samples
//! already transported by its predecessors, which are held fixed.

use alloc::vec::Vec;

use rand::seq::SliceRandom;

use crate::datasets::{self, DatasetSpec, Standardizer};
use crate::error::{Error, Result};
use crate::flow::{at_block, FlowMetadata, FlowNetwork};
use crate::matrix::Mat;
use crate::net::{init_params, ArchSpec, ParamVector, ResidualVectorField};
use crate::objective::{loss_and_grad_with_offset, Batch, BlockLossBreakdown, Potential};
use crate::ode::{self, BlockInterval, IntegratorConfig, ProbeSeed};
use crate::optim::{adam_update, AdamConfig, AdamState};
use crate::rng;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub h0: f64,
    pub rho: f64,
    pub h_max: f64,
    /// Training stops once the termination ratio falls below this.
    pub epsilon: f64,
    pub max_blocks: usize,
    pub epochs_per_block: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam: AdamConfig,
    pub use_free_block: bool,
    /// Length of the free block's interval; the last JKO step when `None`.
    pub free_block_h: Option<f64>,
    pub integrator: IntegratorConfig,
    pub seed: u64,
}

impl TrainConfig {
    /// Toy-data defaults: `h₀ = 0.75`, `ρ = 1.2`, `h_max = 5`, 9 blocks,
    /// 100 epochs of batch 500, learning rate 5e-3.
    pub fn toy(d: usize) -> Self {
        TrainConfig {
            h0: 0.75,
            rho: 1.2,
            h_max: 5.0,
            epsilon: 0.01,
            max_blocks: 9,
            epochs_per_block: 100,
            batch_size: 500,
            learning_rate: 5e-3,
            adam: AdamConfig::default(),
            use_free_block: false,
            free_block_h: None,
            integrator: IntegratorConfig::for_dim(d),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if !(self.h0 > 0.0 && self.h0.is_finite()) {
            return bad("h0 must be positive");
        }
        if !(self.rho >= 1.0 && self.rho.is_finite()) {
            return bad("rho must be at least 1");
        }
        if !(self.h_max >= self.h0 && self.h_max.is_finite()) {
            return bad("h_max must be at least h0");
        }
        if !(self.epsilon > 0.0) {
            return bad("epsilon must be positive");
        }
        if self.max_blocks == 0 {
            return bad("max_blocks must be at least 1");
        }
        if self.epochs_per_block == 0 || self.batch_size == 0 {
            return bad("epochs_per_block and batch_size must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if self.free_block_h.is_some_and(|h| !(h > 0.0 && h.is_finite())) {
            return bad("free_block_h must be positive");
        }
        self.integrator.validate()
    }
}

/// `h_k = min(ρᵏ h₀, h_max)`
pub fn step_schedule(cfg: &TrainConfig, k: usize) -> f64 {
    let mut h = cfg.h0;
    for _ in 0..k {
        h *= cfg.rho;
        if h >= cfg.h_max {
            return cfg.h_max;
        }
    }
    h.min(cfg.h_max)
}

/// `E‖x − T(x)‖² / E‖T(x)‖²` from paired inputs and outputs.
pub fn movement_ratio(x0: &Mat, x1: &Mat) -> Result<f64> {
    let (num, den) = movement_sums(x0, x1);
    ratio_from_sums(num, den)
}

fn movement_sums(x0: &Mat, x1: &Mat) -> (f64, f64) {
    let mut num = 0.0;
    let mut den = 0.0;
    for (a, b) in x0.iter_rows().zip(x1.iter_rows()) {
        num += a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum::<f64>();
        den += b.iter().map(|v| v * v).sum::<f64>();
    }
    (num, den)
}

fn ratio_from_sums(num: f64, den: f64) -> Result<f64> {
    if den <= 0.0 {
        return Err(Error::ZeroDenominator);
    }
    Ok(num / den)
}

/// Termination ratio of `block` on `x` (already in the block's input space).
pub fn termination_ratio(block: &ResidualVectorField, x: &Mat, cfg: &IntegratorConfig) -> Result<f64> {
    if x.rows() == 0 {
        return Err(Error::Empty("termination ratio batch"));
    }
    let x1 = ode::push_block(block, block.interval, x, cfg)?;
    movement_ratio(x, &x1)
}

/// Where training samples come from. Samples are in data units;
/// standardization happens inside training.
#[derive(Clone, Debug, PartialEq)]
pub enum DataProvider {
    /// One fixed training set, pushed through each new block once.
    Fixed(Batch),
    /// Fresh samples every epoch, pushed through every earlier block.
    Generator {
        spec: DatasetSpec,
        samples_per_epoch: usize,
        /// Samples drawn once to fit the standardizer.
        fit_samples: usize,
    },
}

impl DataProvider {
    pub fn generator(spec: DatasetSpec, samples_per_epoch: usize) -> Self {
        DataProvider::Generator {
            spec,
            samples_per_epoch,
            fit_samples: 10_000,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            DataProvider::Fixed(b) => b.x.cols(),
            DataProvider::Generator { .. } => 2,
        }
    }

    pub fn labeled(&self) -> bool {
        match self {
            DataProvider::Fixed(b) => b.labels.is_some(),
            DataProvider::Generator { spec, .. } => spec.labeled,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            DataProvider::Fixed(b) if b.is_empty() => Err(Error::Empty("training set")),
            DataProvider::Fixed(_) => Ok(()),
            DataProvider::Generator {
                spec,
                samples_per_epoch,
                fit_samples,
            } => {
                if *samples_per_epoch == 0 || *fit_samples < 2 {
                    return Err(Error::InvalidConfig("generator sample counts are too small".into()));
                }
                spec.validate()
            }
        }
    }

    pub fn fit_standardizer(&self, seed: u64) -> Result<Standardizer> {
        match self {
            DataProvider::Fixed(b) => Standardizer::fit(&b.x),
            DataProvider::Generator { spec, fit_samples, .. } => {
                let mut r = rng::stream(seed, &[0x66_6974]);
                Standardizer::fit(&datasets::generate(spec, *fit_samples, &mut r)?.x)
            }
        }
    }

    /// Up to `n` standardized samples held fixed across reparameterization
    /// iterations: the leading rows of a fixed set, or one seeded draw.
    pub fn reference_batch(&self, stdz: &Standardizer, n: usize, seed: u64) -> Result<Batch> {
        let raw = match self {
            DataProvider::Fixed(b) => {
                let idx: Vec<usize> = (0..b.len().min(n)).collect();
                b.select(&idx)
            }
            DataProvider::Generator { spec, .. } => {
                let mut r = rng::stream(seed, &[0x72_6566]);
                datasets::generate(spec, n, &mut r)?
            }
        };
        standardized(stdz, raw)
    }

    fn fresh(&self, stdz: &Standardizer, counters: &[u64], seed: u64) -> Result<Batch> {
        match self {
            DataProvider::Fixed(b) => standardized(stdz, b.clone()),
            DataProvider::Generator {
                spec, samples_per_epoch, ..
            } => {
                let mut r = rng::stream(seed, counters);
                standardized(stdz, datasets::generate(spec, *samples_per_epoch, &mut r)?)
            }
        }
    }
}

fn standardized(stdz: &Standardizer, b: Batch) -> Result<Batch> {
    Ok(Batch {
        x: stdz.apply(&b.x)?,
        labels: b.labels,
    })
}

/// Pushes a standardized batch through `blocks` in order.
pub fn push_through(blocks: &[ResidualVectorField], batch: &Batch, cfg: &IntegratorConfig) -> Result<Batch> {
    let mut x = batch.x.clone();
    for (k, b) in blocks.iter().enumerate() {
        x = ode::push_block(b, b.interval, &x, cfg).map_err(|e| at_block(e, k))?;
    }
    Ok(Batch {
        x,
        labels: batch.labels.clone(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    /// Training pass: 0 for the initial run, then one per reparameterization
    /// or refinement pass.
    pub pass: usize,
    pub block: usize,
    pub epoch: usize,
    pub loss: BlockLossBreakdown,
    pub ratio: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockTrainReport {
    pub block: usize,
    pub h: f64,
    pub free: bool,
    pub final_loss: BlockLossBreakdown,
    pub termination_ratio: f64,
    pub epochs: usize,
    /// Seconds, when the observer provides a clock.
    pub wall_time: Option<f64>,
    pub epoch_log: Vec<EpochRecord>,
}

/// Progress callbacks. The core has no clock; callers with one supply it.
pub trait TrainObserver {
    fn now(&self) -> Option<f64> {
        None
    }
    fn on_epoch(&mut self, _record: &EpochRecord) {}
    fn on_block(&mut self, _report: &BlockTrainReport) {}
}

#[derive(Clone, Copy, Debug, Default)]
pub struct Silent;

impl TrainObserver for Silent {}

/// Shared inputs for training the blocks of one flow.
#[derive(Debug)]
pub struct BlockTrainer<'a> {
    pub provider: &'a DataProvider,
    pub standardizer: &'a Standardizer,
    pub potential: &'a Potential,
    pub arch: &'a ArchSpec,
    pub cfg: &'a TrainConfig,
    pub pass: usize,
}

impl BlockTrainer<'_> {
    /// Trains the block that follows `prefix` over `interval`, starting from
    /// `init`. `cache` holds samples already pushed through `prefix` for a
    /// fixed training set; generator data is drawn and pushed every epoch.
    #[allow(clippy::too_many_arguments)]
    pub fn train(
        &self,
        prefix: &[ResidualVectorField],
        cache: Option<&Batch>,
        interval: BlockInterval,
        init: ParamVector,
        free: bool,
        epochs: usize,
        observer: &mut dyn TrainObserver,
    ) -> Result<(ResidualVectorField, BlockTrainReport)> {
        let cfg = self.cfg;
        let k = prefix.len();
        let started = observer.now();
        let mut block = ResidualVectorField::new(self.arch.clone(), init, interval)?;
        let mut adam = AdamState::new(block.params.len(), cfg.adam);
        let mut log = Vec::with_capacity(epochs);
        let pass = self.pass as u64;
        let seed = cfg.seed;

        for epoch in 0..epochs {
            let owned;
            let data = match (cache, self.provider) {
                (Some(c), DataProvider::Fixed(_)) => c,
                _ => {
                    let fresh = self
                        .provider
                        .fresh(self.standardizer, &[0x6461_7461, pass, k as u64, epoch as u64], seed)?;
                    owned = push_through(prefix, &fresh, &cfg.integrator)?;
                    &owned
                }
            };
            if data.is_empty() {
                return Err(Error::Empty("training batch"));
            }
            let mut order: Vec<usize> = (0..data.len()).collect();
            order.shuffle(&mut rng::stream(seed, &[0x7368_7566, pass, k as u64, epoch as u64]));

            let (mut kl, mut w2, mut total) = (0.0, 0.0, 0.0);
            let (mut num, mut den) = (0.0, 0.0);
            for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
                let batch = data.select(idx);
                let probes = ProbeSeed::new(rng::derive_seed(seed, &[0x7072_6f62, pass, k as u64, epoch as u64, b as u64]));
                let (loss, grad, x1) =
                    loss_and_grad_with_offset(&block, interval, &batch, self.potential, &cfg.integrator, probes, !free, 0.0)
                        .map_err(|e| match e {
                            Error::NonFiniteOutput | Error::NonFiniteState { .. } => Error::DivergentLoss { block: k, epoch },
                            other => other,
                        })?;
                adam_update(&mut adam, &mut block.params, &grad, cfg.learning_rate).map_err(|e| match e {
                    Error::NonFiniteGradient { .. } => Error::NonFiniteGradient { block: k },
                    other => other,
                })?;
                let w = idx.len() as f64;
                kl += w * loss.kl_term;
                w2 += w * loss.w2_term;
                total += w * loss.total;
                let (a, c) = movement_sums(&batch.x, &x1);
                num += a;
                den += c;
            }
            let n = data.len() as f64;
            let record = EpochRecord {
                pass: self.pass,
                block: k,
                epoch,
                loss: BlockLossBreakdown {
                    kl_term: kl / n,
                    w2_term: w2 / n,
                    total: total / n,
                },
                ratio: ratio_from_sums(num, den)?,
            };
            if !(record.loss.total.is_finite()) {
                return Err(Error::DivergentLoss { block: k, epoch });
            }
            observer.on_epoch(&record);
            log.push(record);
        }

        let last = *log.last().ok_or(Error::InvalidConfig("at least one epoch is required".into()))?;
        let report = BlockTrainReport {
            block: k,
            h: interval.h(),
            free,
            final_loss: last.loss,
            termination_ratio: last.ratio,
            epochs,
            wall_time: match (started, observer.now()) {
                (Some(a), Some(b)) => Some(b - a),
                _ => None,
            },
            epoch_log: log,
        };
        observer.on_block(&report);
        Ok((block, report))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub blocks: Vec<BlockTrainReport>,
    /// The block cap was reached with the ratio still above ε.
    pub unterminated: bool,
}

/// Algorithm 1: add blocks with steps `h_k` until the termination ratio of
/// the newest block drops below ε or `max_blocks` is reached, then train the
/// free block if enabled.
pub fn train_flow(
    provider: &DataProvider,
    arch: &ArchSpec,
    potential: &Potential,
    cfg: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<(FlowNetwork, TrainReport)> {
    cfg.validate()?;
    arch.validate()?;
    provider.validate()?;
    if provider.dim() != arch.input_dim {
        return Err(Error::Shape("data dimension differs from the architecture".into()));
    }
    let stdz = provider.fit_standardizer(cfg.seed)?;
    let trainer = BlockTrainer {
        provider,
        standardizer: &stdz,
        potential,
        arch,
        cfg,
        pass: 0,
    };
    let mut cache = match provider {
        DataProvider::Fixed(b) => Some(standardized(&stdz, b.clone())?),
        DataProvider::Generator { .. } => None,
    };
    let mut blocks: Vec<ResidualVectorField> = Vec::new();
    let mut reports = Vec::new();
    let mut t = 0.0;
    let mut unterminated = false;
    for k in 0..cfg.max_blocks {
        let h = step_schedule(cfg, k);
        let interval = BlockInterval::new(t, t + h)?;
        let init = init_params(arch, rng::derive_seed(cfg.seed, &[0x62_6c6b, k as u64]))?;
        let (block, report) = trainer.train(&blocks, cache.as_ref(), interval, init, false, cfg.epochs_per_block, observer)?;
        if let Some(c) = cache.as_mut() {
            *c = push_through(core::slice::from_ref(&block), c, &cfg.integrator).map_err(|e| at_block(e, k))?;
        }
        t = interval.t_end;
        let ratio = report.termination_ratio;
        blocks.push(block);
        reports.push(report);
        if ratio < cfg.epsilon {
            break;
        }
        unterminated = k + 1 == cfg.max_blocks;
    }

    let mut flow = FlowNetwork {
        arch: arch.clone(),
        blocks,
        free_block: None,
        standardizer: stdz.clone(),
        potential: potential.clone(),
        integrator: cfg.integrator.clone(),
        metadata: FlowMetadata {
            seed: cfg.seed,
            config_hash: 0,
            unterminated,
        },
    };
    if cfg.use_free_block {
        let report = train_free_block(&mut flow, provider, cfg, 0, None, observer)?;
        reports.push(report);
    }
    Ok((flow, TrainReport { blocks: reports, unterminated }))
}

/// (Re)trains the free block after the JKO blocks of `flow`, warm-starting
/// from the existing free block when present.
pub fn train_free_block(
    flow: &mut FlowNetwork,
    provider: &DataProvider,
    cfg: &TrainConfig,
    pass: usize,
    epochs: Option<usize>,
    observer: &mut dyn TrainObserver,
) -> Result<BlockTrainReport> {
    let h = cfg
        .free_block_h
        .or_else(|| flow.blocks.last().map(|b| b.interval.h()))
        .unwrap_or(cfg.h0);
    let t = flow.blocks.last().map_or(0.0, |b| b.interval.t_end);
    let interval = BlockInterval::new(t, t + h)?;
    let init = match &flow.free_block {
        Some(b) => b.params.clone(),
        None => init_params(&flow.arch, rng::derive_seed(cfg.seed, &[0x6672_6565]))?,
    };
    let cache = match provider {
        DataProvider::Fixed(b) => Some(push_through(&flow.blocks, &standardized(&flow.standardizer, b.clone())?, &cfg.integrator)?),
        DataProvider::Generator { .. } => None,
    };
    let trainer = BlockTrainer {
        provider,
        standardizer: &flow.standardizer,
        potential: &flow.potential,
        arch: &flow.arch,
        cfg,
        pass,
    };
    let (block, report) = trainer.train(
        &flow.blocks,
        cache.as_ref(),
        interval,
        init,
        true,
        epochs.unwrap_or(cfg.epochs_per_block),
        observer,
    )?;
    flow.free_block = Some(block);
    Ok(report)
}
