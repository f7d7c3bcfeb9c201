//! Target potentials and the per-block JKO loss
//!
//! `mean[ V(x₁) − ℓ + ‖x₁ − x₀‖² / (2h) ]`
//!
//! where `x₁` is the block's pushforward of `x₀` and `ℓ` the integrated
//! divergence along the way. The additive constant of the KL term is dropped.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::matrix::Mat;
use crate::net::{NetVars, ParamVector, ResidualVectorField};
use crate::ode::{integrate_taped, BlockInterval, IntegratorConfig, ProbeSeed, TapedField};
use crate::tape::{Tape, Var};

/// Equilibrium target `p_Z ∝ exp(−V)`.
#[derive(Clone, Debug, PartialEq)]
pub enum Potential {
    /// `V(x) = ‖x‖²/2`
    StandardGaussian,
    /// Class `k` uses `V_k(x) = ‖x − μ_k‖² / (2s²)`.
    GaussianMixture { means: Vec<Vec<f64>>, variance: f64 },
}

impl Potential {
    pub fn mixture(means: Vec<Vec<f64>>, variance: f64) -> Result<Self> {
        if means.is_empty() {
            return Err(Error::InvalidConfig("mixture needs at least one component".into()));
        }
        if !(variance > 0.0 && variance.is_finite()) {
            return Err(Error::InvalidConfig(format!("mixture variance must be positive, got {variance}")));
        }
        let d = means[0].len();
        if means.iter().any(|m| m.len() != d) {
            return Err(Error::InvalidConfig("mixture means differ in dimension".into()));
        }
        Ok(Potential::GaussianMixture { means, variance })
    }

    pub fn is_mixture(&self) -> bool {
        matches!(self, Potential::GaussianMixture { .. })
    }

    /// Center of the potential for `label`, and its variance.
    pub fn center(&self, label: Option<usize>) -> Result<(Option<&[f64]>, f64)> {
        match (self, label) {
            (Potential::StandardGaussian, None) => Ok((None, 1.0)),
            (Potential::StandardGaussian, Some(_)) => Err(Error::UnexpectedLabel),
            (Potential::GaussianMixture { .. }, None) => Err(Error::MissingLabel),
            (Potential::GaussianMixture { means, variance }, Some(k)) => {
                let mu = means.get(k).ok_or(Error::LabelOutOfRange {
                    label: k,
                    components: means.len(),
                })?;
                Ok((Some(mu.as_slice()), *variance))
            }
        }
    }
}

pub fn potential_value(pot: &Potential, x: &[f64], label: Option<usize>) -> Result<f64> {
    let (mu, var) = pot.center(label)?;
    let sq: f64 = match mu {
        None => x.iter().map(|v| v * v).sum(),
        Some(mu) => {
            if mu.len() != x.len() {
                return Err(Error::Shape("point and mixture mean differ in dimension".into()));
            }
            x.iter().zip(mu).map(|(a, b)| (a - b) * (a - b)).sum()
        }
    };
    Ok(sq / (2.0 * var))
}

/// Samples of one training batch, optionally labeled for mixture targets.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub x: Mat,
    pub labels: Option<Vec<usize>>,
}

impl Batch {
    pub fn unlabeled(x: Mat) -> Self {
        Batch { x, labels: None }
    }

    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.rows() == 0
    }

    pub fn select(&self, idx: &[usize]) -> Batch {
        Batch {
            x: self.x.select_rows(idx),
            labels: self
                .labels
                .as_ref()
                .map(|l| idx.iter().map(|&i| l[i]).collect()),
        }
    }

    pub fn label(&self, i: usize) -> Option<usize> {
        self.labels.as_ref().map(|l| l[i])
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlockLossBreakdown {
    /// `mean V(x₁) − ℓ`, nats up to an additive constant.
    pub kl_term: f64,
    /// `mean ‖x₁ − x₀‖² / (2h)`
    pub w2_term: f64,
    pub total: f64,
}

/// Loss nodes recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub kl: Var,
    pub w2: Var,
    pub total: Var,
    pub x1: Var,
}

/// Per-row centers of the potential, or `None` for the standard Gaussian.
fn centers(pot: &Potential, batch: &Batch) -> Result<(Option<Mat>, f64)> {
    // Labels of a labeled dataset are ignored by the standard Gaussian target.
    if !pot.is_mixture() {
        return Ok((None, 1.0));
    }
    let mut c = Mat::zeros(batch.len(), batch.x.cols());
    let mut var = 1.0;
    for i in 0..batch.len() {
        let (mu, v) = pot.center(batch.label(i))?;
        let mu = mu.expect("mixture center");
        if mu.len() != batch.x.cols() {
            return Err(Error::Shape("batch and mixture means differ in dimension".into()));
        }
        c.row_mut(i).copy_from_slice(mu);
        var = v;
    }
    Ok((Some(c), var))
}

/// Records the block loss on `tape`. The W2 term is always recorded; `total`
/// includes it only when `with_w2` is set (the free block omits it).
#[allow(clippy::too_many_arguments)]
pub(crate) fn loss_on_tape<F: TapedField + ?Sized>(
    tape: &mut Tape,
    field: &F,
    interval: BlockInterval,
    batch: &Batch,
    pot: &Potential,
    cfg: &IntegratorConfig,
    probes: ProbeSeed,
    with_w2: bool,
    potential_offset: f64,
) -> Result<LossVars> {
    if batch.is_empty() {
        return Err(Error::Empty("block loss batch"));
    }
    cfg.validate()?;
    let (centers, var) = centers(pot, batch)?;
    let x0 = tape.constant(batch.x.clone());
    let (x1, ell) = integrate_taped(tape, field, interval, x0, cfg, probes);

    let diff = match centers {
        Some(c) => {
            let c = tape.constant(c);
            tape.sub(x1, c)
        }
        None => x1,
    };
    let sq = tape.square(diff);
    let v = tape.row_sum(sq);
    let mut kl_terms = alloc::vec![(v, 1.0 / (2.0 * var)), (ell, -1.0)];
    if potential_offset != 0.0 {
        let off = tape.constant(Mat::filled(batch.len(), 1, potential_offset));
        kl_terms.push((off, 1.0));
    }
    let per_sample_kl = tape.lin_comb(&kl_terms);
    let kl = tape.mean(per_sample_kl);

    let disp = tape.sub(x1, x0);
    let disp_sq = tape.square(disp);
    let disp_rows = tape.row_sum(disp_sq);
    let mean_disp = tape.mean(disp_rows);
    let w2 = tape.scale(mean_disp, 1.0 / (2.0 * interval.h()));

    let total = if with_w2 { tape.add(kl, w2) } else { tape.scale(kl, 1.0) };
    Ok(LossVars { kl, w2, total, x1 })
}

fn breakdown(tape: &Tape, vars: &LossVars, with_w2: bool) -> Result<BlockLossBreakdown> {
    let b = BlockLossBreakdown {
        kl_term: tape.value(vars.kl).get(0, 0),
        w2_term: tape.value(vars.w2).get(0, 0),
        total: tape.value(vars.total).get(0, 0),
    };
    if !(b.kl_term.is_finite() && b.w2_term.is_finite() && b.total.is_finite()) {
        return Err(Error::NonFiniteOutput);
    }
    debug_assert!(with_w2 || b.total == b.kl_term);
    Ok(b)
}

/// Loss of an arbitrary taped field, e.g. an implanted analytic field.
pub fn field_loss<F: TapedField + ?Sized>(
    field: &F,
    interval: BlockInterval,
    batch: &Batch,
    pot: &Potential,
    cfg: &IntegratorConfig,
    probes: ProbeSeed,
) -> Result<BlockLossBreakdown> {
    let mut tape = Tape::new();
    let vars = loss_on_tape(&mut tape, field, interval, batch, pot, cfg, probes, true, 0.0)?;
    breakdown(&tape, &vars, true)
}

/// The JKO loss of `block` on `batch`, integrating over `interval`.
pub fn block_loss(
    block: &ResidualVectorField,
    interval: BlockInterval,
    batch: &Batch,
    pot: &Potential,
    cfg: &IntegratorConfig,
    probes: ProbeSeed,
) -> Result<BlockLossBreakdown> {
    let mut tape = Tape::new();
    let net = NetVars::constant(&mut tape, &block.arch, &block.params);
    let vars = loss_on_tape(&mut tape, &net, interval, batch, pot, cfg, probes, true, 0.0)?;
    breakdown(&tape, &vars, true)
}

/// The free-block loss: the KL term alone.
pub fn free_block_loss(
    block: &ResidualVectorField,
    interval: BlockInterval,
    batch: &Batch,
    pot: &Potential,
    cfg: &IntegratorConfig,
    probes: ProbeSeed,
) -> Result<f64> {
    let mut tape = Tape::new();
    let net = NetVars::constant(&mut tape, &block.arch, &block.params);
    let vars = loss_on_tape(&mut tape, &net, interval, batch, pot, cfg, probes, false, 0.0)?;
    Ok(breakdown(&tape, &vars, false)?.total)
}

/// Loss breakdown and the gradient of the loss with respect to the block
/// parameters. `with_w2 = false` differentiates the free-block loss.
#[allow(clippy::too_many_arguments)]
pub fn block_loss_and_grad(
    block: &ResidualVectorField,
    interval: BlockInterval,
    batch: &Batch,
    pot: &Potential,
    cfg: &IntegratorConfig,
    probes: ProbeSeed,
    with_w2: bool,
) -> Result<(BlockLossBreakdown, ParamVector)> {
    let (b, g, _) = loss_and_grad_with_offset(block, interval, batch, pot, cfg, probes, with_w2, 0.0)?;
    Ok((b, g))
}

/// Also returns the pushed batch `x₁`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn loss_and_grad_with_offset(
    block: &ResidualVectorField,
    interval: BlockInterval,
    batch: &Batch,
    pot: &Potential,
    cfg: &IntegratorConfig,
    probes: ProbeSeed,
    with_w2: bool,
    potential_offset: f64,
) -> Result<(BlockLossBreakdown, ParamVector, Mat)> {
    let mut tape = Tape::new();
    let p = tape.variable(block.params.as_row());
    let net = NetVars::load(&mut tape, &block.arch, p);
    let vars = loss_on_tape(
        &mut tape,
        &net,
        interval,
        batch,
        pot,
        cfg,
        probes,
        with_w2,
        potential_offset,
    )?;
    let b = breakdown(&tape, &vars, with_w2)?;
    let grads = tape.backward(vars.total);
    let g = grads
        .get(p)
        .map(|g| g.as_slice().to_vec())
        .unwrap_or_else(|| alloc::vec![0.0; block.params.len()]);
    Ok((b, ParamVector(g), tape.value(vars.x1).clone()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{init_params, ArchSpec};
    use crate::ode::LinearField;
    use alloc::vec;

    #[test]
    fn potential_values() {
        assert_eq!(potential_value(&Potential::StandardGaussian, &[3.0, 4.0], None).unwrap(), 12.5);
        let mix = Potential::mixture(vec![vec![2.0, 0.0], vec![-2.0, 0.0]], 1.0).unwrap();
        assert_eq!(potential_value(&mix, &[2.0, 0.0], Some(0)).unwrap(), 0.0);
        assert_eq!(potential_value(&mix, &[0.0, 0.0], Some(1)).unwrap(), 2.0);
        assert_eq!(potential_value(&mix, &[0.0, 0.0], None), Err(Error::MissingLabel));
        assert!(matches!(
            potential_value(&mix, &[0.0, 0.0], Some(2)),
            Err(Error::LabelOutOfRange { .. })
        ));
        assert!(Potential::mixture(vec![], 1.0).is_err());
        assert!(Potential::mixture(vec![vec![0.0]], 0.0).is_err());
    }

    fn unit() -> BlockInterval {
        BlockInterval::new(0.0, 1.0).unwrap()
    }

    #[test]
    fn identity_block_loss() {
        let arch = ArchSpec::mlp(2, 8);
        let block = ResidualVectorField::new(arch.clone(), init_params(&arch, 0).unwrap(), unit()).unwrap();
        let batch = Batch::unlabeled(Mat::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap());
        let cfg = IntegratorConfig::default();
        let b = block_loss(&block, unit(), &batch, &Potential::StandardGaussian, &cfg, ProbeSeed::new(0)).unwrap();
        assert_eq!(b.kl_term, 0.5);
        assert_eq!(b.w2_term, 0.0);
        assert_eq!(b.total, 0.5);
        let free = free_block_loss(&block, unit(), &batch, &Potential::StandardGaussian, &cfg, ProbeSeed::new(0)).unwrap();
        assert_eq!(free, b.kl_term);
    }

    #[test]
    fn decay_field_loss_matches_hand_evaluation() {
        let f = LinearField::scaled_identity(1, -1.0);
        let batch = Batch::unlabeled(Mat::column(&[2.0]));
        let cfg = IntegratorConfig {
            substeps: 40,
            ..Default::default()
        };
        let b = field_loss(&f, unit(), &batch, &Potential::StandardGaussian, &cfg, ProbeSeed::new(0)).unwrap();
        let x1 = 2.0 * libm::exp(-1.0);
        let expected = 0.5 * x1 * x1 + 1.0 + 0.5 * (2.0 - x1) * (2.0 - x1);
        // 0.27067 + 1 + 0.79915
        assert!((expected - 2.06982).abs() < 1e-5);
        assert!((b.kl_term - (0.5 * x1 * x1 + 1.0)).abs() < 1e-8, "{b:?}");
        assert!((b.total - expected).abs() < 1e-8, "{} vs {expected}", b.total);
    }

    #[test]
    fn centered_unit_mixture_equals_standard_bitwise() {
        let arch = ArchSpec::mlp(2, 8);
        let mut p = init_params(&arch, 2).unwrap();
        p.0.iter_mut().enumerate().for_each(|(i, v)| *v += 0.01 * (i % 7) as f64);
        let block = ResidualVectorField::new(arch, p, unit()).unwrap();
        let x = Mat::from_rows(&[[0.3, -0.4], [1.0, 2.0]]).unwrap();
        let cfg = IntegratorConfig::default();
        let std_loss = block_loss(&block, unit(), &Batch::unlabeled(x.clone()), &Potential::StandardGaussian, &cfg, ProbeSeed::new(0)).unwrap();
        let mix = Potential::mixture(vec![vec![0.0, 0.0]], 1.0).unwrap();
        let labeled = Batch {
            x,
            labels: Some(vec![0, 0]),
        };
        let mix_loss = block_loss(&block, unit(), &labeled, &mix, &cfg, ProbeSeed::new(0)).unwrap();
        assert_eq!(std_loss, mix_loss);
    }

    #[test]
    fn free_loss_is_total_minus_w2() {
        let arch = ArchSpec::mlp(2, 8);
        let mut p = init_params(&arch, 3).unwrap();
        p.0.iter_mut().enumerate().for_each(|(i, v)| *v += 0.02 * ((i % 5) as f64 - 2.0));
        let block = ResidualVectorField::new(arch, p, unit()).unwrap();
        let batch = Batch::unlabeled(Mat::from_rows(&[[0.3, -0.4], [1.0, 2.0], [-1.5, 0.2]]).unwrap());
        let cfg = IntegratorConfig::default();
        let b = block_loss(&block, unit(), &batch, &Potential::StandardGaussian, &cfg, ProbeSeed::new(0)).unwrap();
        let free = free_block_loss(&block, unit(), &batch, &Potential::StandardGaussian, &cfg, ProbeSeed::new(0)).unwrap();
        assert_eq!(free, b.kl_term);
        assert!(((b.total - b.w2_term) - free).abs() <= 1e-15 * b.total.abs().max(1.0));
        assert!(b.w2_term > 0.0);
    }

    #[test]
    fn constant_shift_of_potential_leaves_gradient_unchanged() {
        let arch = ArchSpec::mlp(2, 8);
        let mut p = init_params(&arch, 3).unwrap();
        p.0.iter_mut().enumerate().for_each(|(i, v)| *v += 0.02 * ((i % 5) as f64 - 2.0));
        let block = ResidualVectorField::new(arch, p, unit()).unwrap();
        let batch = Batch::unlabeled(Mat::from_rows(&[[0.3, -0.4], [1.0, 2.0]]).unwrap());
        let cfg = IntegratorConfig::default();
        let pot = Potential::StandardGaussian;
        let (b0, g0, _) = loss_and_grad_with_offset(&block, unit(), &batch, &pot, &cfg, ProbeSeed::new(0), true, 0.0).unwrap();
        let (b1, g1, _) = loss_and_grad_with_offset(&block, unit(), &batch, &pot, &cfg, ProbeSeed::new(0), true, 10.0).unwrap();
        assert!((b1.total - b0.total - 10.0).abs() < 1e-12);
        assert_eq!(g0, g1);
    }

    #[test]
    fn empty_batch_is_rejected() {
        let f = LinearField::scaled_identity(1, -1.0);
        let batch = Batch::unlabeled(Mat::zeros(0, 1));
        assert!(field_loss(&f, unit(), &batch, &Potential::StandardGaussian, &IntegratorConfig::default(), ProbeSeed::new(0)).is_err());
    }
}
