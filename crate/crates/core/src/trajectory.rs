//! Step-size control along the trajectory: reparameterization equalizes the
//! per-block movements, refinement splits every block in two. The Euclidean
//! lab runs both procedures on proximal-point trajectories of analytic
//! potentials.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::flow::{at_block, FlowNetwork};
use crate::matrix::Mat;
use crate::net::ResidualVectorField;
use crate::objective::Batch;
use crate::ode::{self, BlockInterval, IntegratorConfig};
use crate::trainer::{self, BlockTrainer, DataProvider, TrainConfig, TrainObserver};

/// Root-mean-square displacement `(E‖x − T(x)‖²)^{1/2}` of one block on `x`.
pub fn block_movement(block: &ResidualVectorField, x: &Mat, cfg: &IntegratorConfig) -> Result<f64> {
    Ok(movement_and_push(block, x, cfg)?.0)
}

fn movement_and_push(block: &ResidualVectorField, x: &Mat, cfg: &IntegratorConfig) -> Result<(f64, Mat)> {
    if x.rows() == 0 {
        return Err(Error::Empty("movement batch"));
    }
    let x1 = ode::push_block(block, block.interval, x, cfg)?;
    let sq: f64 = x1.zip_map(x, |a, b| a - b).row_sq_norms().iter().sum();
    Ok((libm::sqrt(sq / x.rows() as f64), x1))
}

/// `S_k` of every JKO block of `flow`, with `x` standardized data pushed
/// block by block.
pub fn flow_movements(flow: &FlowNetwork, x: &Mat) -> Result<Vec<f64>> {
    let mut cur = x.clone();
    let mut out = Vec::with_capacity(flow.blocks.len());
    for (k, b) in flow.blocks.iter().enumerate() {
        let (s, next) = movement_and_push(b, &cur, &flow.integrator).map_err(|e| at_block(e, k))?;
        out.push(s);
        cur = next;
    }
    Ok(out)
}

/// `h'_k = min(h_k + η(S̄ h_k / S_k − h_k), h_max)`
pub fn reparameterize_steps(s: &[f64], h: &[f64], eta: f64, h_max: f64) -> Result<Vec<f64>> {
    if s.len() != h.len() || s.is_empty() {
        return Err(Error::Shape("movements and steps must be nonempty and equally long".into()));
    }
    if !(eta > 0.0 && eta < 1.0) {
        return Err(Error::InvalidConfig("eta must lie in (0, 1)".into()));
    }
    if let Some(k) = s.iter().position(|&v| !(v > 0.0)) {
        return Err(Error::DegenerateMovement(k));
    }
    let mean = s.iter().sum::<f64>() / s.len() as f64;
    Ok(s.iter()
        .zip(h)
        .map(|(&sk, &hk)| {
            if sk == mean {
                hk.min(h_max)
            } else {
                (hk + eta * (mean * hk / sk - hk)).min(h_max)
            }
        })
        .collect())
}

/// Population standard deviation over mean.
pub fn coefficient_of_variation(s: &[f64]) -> f64 {
    if s.is_empty() {
        return 0.0;
    }
    let n = s.len() as f64;
    let mean = s.iter().sum::<f64>() / n;
    let var = s.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    libm::sqrt(var) / mean
}

/// Each step halved and duplicated.
pub fn refine_steps(h: &[f64]) -> Vec<f64> {
    h.iter().flat_map(|&v| [v / 2.0, v / 2.0]).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReparamConfig {
    pub eta: f64,
    pub max_iters: usize,
    /// Iterations stop once the coefficient of variation of `S` is below this.
    pub cv_tol: f64,
    /// Epochs per block when retraining; the initial count when `None`.
    pub retrain_epochs: Option<usize>,
    /// Size of the fixed batch on which `S_k` is measured.
    pub reference_size: usize,
}

impl Default for ReparamConfig {
    fn default() -> Self {
        ReparamConfig {
            eta: 0.5,
            max_iters: 4,
            cv_tol: 0.1,
            retrain_epochs: None,
            reference_size: 10_000,
        }
    }
}

/// Movements and steps at one iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryStats {
    pub iter: usize,
    pub movements: Vec<f64>,
    pub steps: Vec<f64>,
}

impl TrajectoryStats {
    pub fn cv(&self) -> f64 {
        coefficient_of_variation(&self.movements)
    }
}

/// Reparameterization iterations on a trained flow: measure `S_k` on a fixed
/// reference batch, update the steps, retrain every block warm-started from
/// its current parameters, and retrain the free block last. The returned
/// statistics start with the incoming flow and end with the final one.
///
/// `pass0` numbers the training passes (and their random streams) so
/// repeated calls do not reuse samples.
pub fn reparameterize_flow(
    flow: &mut FlowNetwork,
    provider: &DataProvider,
    train: &TrainConfig,
    cfg: &ReparamConfig,
    pass0: usize,
    observer: &mut dyn TrainObserver,
) -> Result<Vec<TrajectoryStats>> {
    if flow.blocks.is_empty() {
        return Err(Error::Empty("flow has no blocks to reparameterize"));
    }
    let reference = provider.reference_batch(&flow.standardizer, cfg.reference_size, train.seed)?;
    let mut stats = Vec::new();
    for j in 0..=cfg.max_iters {
        let s = flow_movements(flow, &reference.x)?;
        let entry = TrajectoryStats {
            iter: j,
            movements: s,
            steps: flow.steps(),
        };
        let done = j == cfg.max_iters || entry.cv() < cfg.cv_tol;
        let new_h = if done {
            None
        } else {
            Some(reparameterize_steps(&entry.movements, &entry.steps, cfg.eta, train.h_max)?)
        };
        stats.push(entry);
        match new_h {
            Some(h) => retrain(flow, provider, train, &h, cfg.retrain_epochs, pass0 + j + 1, observer)?,
            None => break,
        }
    }
    Ok(stats)
}

/// Retrains all JKO blocks of `flow` on new steps `h`, warm-started.
pub fn retrain(
    flow: &mut FlowNetwork,
    provider: &DataProvider,
    train: &TrainConfig,
    h: &[f64],
    epochs: Option<usize>,
    pass: usize,
    observer: &mut dyn TrainObserver,
) -> Result<()> {
    let intervals = FlowNetwork::intervals_from_steps(h)?;
    let epochs = epochs.unwrap_or(train.epochs_per_block);
    let stdz = flow.standardizer.clone();
    let trainer = BlockTrainer {
        provider,
        standardizer: &stdz,
        potential: &flow.potential,
        arch: &flow.arch,
        cfg: train,
        pass,
    };
    let mut cache = match provider {
        DataProvider::Fixed(b) => Some(Batch {
            x: stdz.apply(&b.x)?,
            labels: b.labels.clone(),
        }),
        DataProvider::Generator { .. } => None,
    };
    let old = core::mem::take(&mut flow.blocks);
    let mut fresh: Vec<ResidualVectorField> = Vec::with_capacity(old.len());
    for (k, (b, iv)) in old.into_iter().zip(intervals).enumerate() {
        let (nb, _) = trainer.train(&fresh, cache.as_ref(), iv, b.params, false, epochs, observer)?;
        if let Some(c) = cache.as_mut() {
            *c = trainer::push_through(core::slice::from_ref(&nb), c, &train.integrator).map_err(|e| at_block(e, k))?;
        }
        fresh.push(nb);
    }
    flow.blocks = fresh;
    if flow.free_block.is_some() {
        trainer::train_free_block(flow, provider, train, pass, Some(epochs), observer)?;
    }
    Ok(())
}

/// Splits every JKO block in two halves, both children inheriting the
/// parent's parameters. The free block is kept as is.
pub fn refine_blocks(flow: &FlowNetwork) -> Result<FlowNetwork> {
    let mut out = flow.clone();
    out.blocks = Vec::with_capacity(2 * flow.blocks.len());
    for b in &flow.blocks {
        let BlockInterval { t_start, t_end } = b.interval;
        let mid = t_start + (t_end - t_start) / 2.0;
        for iv in [BlockInterval::new(t_start, mid)?, BlockInterval::new(mid, t_end)?] {
            let mut child = b.clone();
            child.interval = iv;
            out.blocks.push(child);
        }
    }
    Ok(out)
}

/// Refinement followed by reparameterization at the fine level.
pub fn refine_flow(
    flow: &FlowNetwork,
    provider: &DataProvider,
    train: &TrainConfig,
    cfg: &ReparamConfig,
    pass0: usize,
    observer: &mut dyn TrainObserver,
) -> Result<(FlowNetwork, Vec<TrajectoryStats>)> {
    let mut fine = refine_blocks(flow)?;
    // one retraining pass at the fine level before the movements are compared
    let h = fine.steps();
    retrain(&mut fine, provider, train, &h, cfg.retrain_epochs, pass0, observer)?;
    let stats = reparameterize_flow(&mut fine, provider, train, cfg, pass0 + 1, observer)?;
    Ok((fine, stats))
}

/// Analytic landscapes for the proximal-point lab.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LabPotential {
    /// `F(x) = ‖x‖² / 2`
    Quadratic,
    /// Müller-Brown surface, 2-D.
    MuellerBrown,
}

/// Müller-Brown constants: `F(x, y) = Σ A_i exp(a_i (x − x0_i)² + b_i (x − x0_i)(y − y0_i) + c_i (y − y0_i)²)`.
pub mod mueller_brown {
    pub const A: [f64; 4] = [-200.0, -100.0, -170.0, 15.0];
    pub const A_X: [f64; 4] = [-1.0, -1.0, -6.5, 0.7];
    pub const B_XY: [f64; 4] = [0.0, 0.0, 11.0, 0.6];
    pub const C_Y: [f64; 4] = [-10.0, -10.0, -6.5, 0.7];
    pub const X0: [f64; 4] = [1.0, 0.0, -0.5, -1.0];
    pub const Y0: [f64; 4] = [0.0, 0.5, 1.5, 1.0];
}

impl LabPotential {
    pub fn name(self) -> &'static str {
        match self {
            LabPotential::Quadratic => "quadratic",
            LabPotential::MuellerBrown => "mueller_brown",
        }
    }

    fn check(self, x: &[f64]) -> Result<()> {
        if self == LabPotential::MuellerBrown && x.len() != 2 {
            return Err(Error::Shape("the Müller-Brown surface is two-dimensional".into()));
        }
        Ok(())
    }

    pub fn value(self, x: &[f64]) -> f64 {
        match self {
            LabPotential::Quadratic => 0.5 * x.iter().map(|v| v * v).sum::<f64>(),
            LabPotential::MuellerBrown => {
                use mueller_brown::*;
                (0..4)
                    .map(|i| {
                        let (dx, dy) = (x[0] - X0[i], x[1] - Y0[i]);
                        A[i] * libm::exp(A_X[i] * dx * dx + B_XY[i] * dx * dy + C_Y[i] * dy * dy)
                    })
                    .sum()
            }
        }
    }

    /// Row-major `d×d` Hessian.
    pub fn hessian(self, x: &[f64]) -> Vec<f64> {
        match self {
            LabPotential::Quadratic => {
                let d = x.len();
                (0..d * d).map(|i| if i % (d + 1) == 0 { 1.0 } else { 0.0 }).collect()
            }
            LabPotential::MuellerBrown => {
                use mueller_brown::*;
                let mut h = alloc::vec![0.0; 4];
                for i in 0..4 {
                    let (dx, dy) = (x[0] - X0[i], x[1] - Y0[i]);
                    let e = A[i] * libm::exp(A_X[i] * dx * dx + B_XY[i] * dx * dy + C_Y[i] * dy * dy);
                    let q = [2.0 * A_X[i] * dx + B_XY[i] * dy, B_XY[i] * dx + 2.0 * C_Y[i] * dy];
                    let qq = [2.0 * A_X[i], B_XY[i], B_XY[i], 2.0 * C_Y[i]];
                    for r in 0..2 {
                        for c in 0..2 {
                            h[r * 2 + c] += e * (q[r] * q[c] + qq[r * 2 + c]);
                        }
                    }
                }
                h
            }
        }
    }

    pub fn grad(self, x: &[f64]) -> Vec<f64> {
        match self {
            LabPotential::Quadratic => x.to_vec(),
            LabPotential::MuellerBrown => {
                use mueller_brown::*;
                let mut g = alloc::vec![0.0; 2];
                for i in 0..4 {
                    let (dx, dy) = (x[0] - X0[i], x[1] - Y0[i]);
                    let e = A[i] * libm::exp(A_X[i] * dx * dx + B_XY[i] * dx * dy + C_Y[i] * dy * dy);
                    g[0] += e * (2.0 * A_X[i] * dx + B_XY[i] * dy);
                    g[1] += e * (B_XY[i] * dx + 2.0 * C_Y[i] * dy);
                }
                g
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProxSolver {
    /// Step of the gradient fallback, used where the proximal objective is
    /// not locally convex; grown after accepted steps and halved otherwise.
    pub lr: f64,
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for ProxSolver {
    fn default() -> Self {
        ProxSolver {
            lr: 1e-3,
            max_iters: 10_000,
            tol: 1e-6,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProxStep {
    pub x: Vec<f64>,
    pub grad_norm: f64,
    pub iters: usize,
    pub converged: bool,
}

fn norm(v: &[f64]) -> f64 {
    libm::sqrt(v.iter().map(|a| a * a).sum())
}

/// Solves `A p = b` for symmetric `A` (row-major `d×d`) by Cholesky; `None`
/// unless `A` is positive definite.
fn cholesky_solve(a: &[f64], b: &[f64]) -> Option<Vec<f64>> {
    let d = b.len();
    let mut l = alloc::vec![0.0; d * d];
    for i in 0..d {
        for j in 0..=i {
            let s = a[i * d + j] - (0..j).map(|k| l[i * d + k] * l[j * d + k]).sum::<f64>();
            if i == j {
                if !(s > 0.0) {
                    return None;
                }
                l[i * d + i] = libm::sqrt(s);
            } else {
                l[i * d + j] = s / l[j * d + j];
            }
        }
    }
    let mut y = b.to_vec();
    for i in 0..d {
        y[i] = (y[i] - (0..i).map(|k| l[i * d + k] * y[k]).sum::<f64>()) / l[i * d + i];
    }
    for i in (0..d).rev() {
        y[i] = (y[i] - (i + 1..d).map(|k| l[k * d + i] * y[k]).sum::<f64>()) / l[i * d + i];
    }
    Some(y)
}

/// Minimizes `G(x) = F(x) + w‖x − anchor‖²/2` from `start`; `w = 1/h`, or 0
/// to minimize `F` alone. Newton steps with backtracking where the Hessian
/// of `G` is positive definite, gradient steps elsewhere.
fn descend(pot: LabPotential, anchor: &[f64], w: f64, start: &[f64], solver: &ProxSolver) -> ProxStep {
    let d = start.len();
    let objective = |x: &[f64]| pot.value(x) + 0.5 * w * x.iter().zip(anchor).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    let gradient = |x: &[f64]| -> Vec<f64> {
        pot.grad(x)
            .iter()
            .zip(x.iter().zip(anchor))
            .map(|(g, (a, b))| g + w * (a - b))
            .collect()
    };
    let mut x = start.to_vec();
    let mut fx = objective(&x);
    let mut g = gradient(&x);
    let mut lr = solver.lr;
    let mut iters = 0;
    while iters < solver.max_iters && norm(&g) >= solver.tol {
        iters += 1;
        let mut hess = pot.hessian(&x);
        (0..d).for_each(|i| hess[i * d + i] += w);
        let (dir, newton) = match cholesky_solve(&hess, &g) {
            Some(p) => (p, true),
            None => (g.iter().map(|v| lr * v).collect(), false),
        };
        let mut t = 1.0;
        let accepted = loop {
            let trial: Vec<f64> = x.iter().zip(&dir).map(|(a, p)| a - t * p).collect();
            let ft = objective(&trial);
            let gt = gradient(&trial);
            // near the minimum the decrease drops below the rounding of G;
            // the gradient norm still orders the iterates there
            let flat = ft <= fx + 4.0 * f64::EPSILON * fx.abs() && norm(&gt) < norm(&g);
            if ft < fx || flat {
                x = trial;
                fx = ft;
                g = gt;
                break true;
            }
            t /= 2.0;
            if t < 1e-12 {
                break false;
            }
        };
        if !newton {
            lr = if t == 1.0 { lr * 1.25 } else { lr * t };
        }
        if !accepted {
            break;
        }
    }
    let grad_norm = norm(&g);
    ProxStep {
        x,
        grad_norm,
        iters,
        converged: grad_norm < solver.tol,
    }
}

/// `argmin_x F(x) + ‖x − x_k‖²/(2h)` by gradient descent from `start`
/// (`x_k` when `None`).
pub fn prox_step(pot: LabPotential, x_k: &[f64], h: f64, start: Option<&[f64]>, solver: &ProxSolver) -> Result<ProxStep> {
    pot.check(x_k)?;
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::InvalidConfig("proximal step size must be positive".into()));
    }
    Ok(descend(pot, x_k, 1.0 / h, start.unwrap_or(x_k), solver))
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabConfig {
    pub potential: LabPotential,
    pub x0: Vec<f64>,
    /// Initial steps `h_k`; `L` is their count.
    pub steps: Vec<f64>,
    pub h_max: f64,
    pub eta: f64,
    pub reparam_iters: usize,
    pub refine: bool,
    /// Iterations after refinement.
    pub refined_iters: usize,
    pub solver: ProxSolver,
}

impl LabConfig {
    /// 8 geometric steps `h_k = min(1e-3·1.2ᵏ, 3e-3)` from `(−1.2, 0.5)`,
    /// `η = 0.3`, 12 iterations, one refinement, then 10 more.
    pub fn mueller_brown() -> Self {
        let h_max = 3e-3;
        LabConfig {
            potential: LabPotential::MuellerBrown,
            x0: alloc::vec![-1.2, 0.5],
            steps: (0..8).map(|k| (1e-3 * libm::pow(1.2, k as f64)).min(h_max)).collect(),
            h_max,
            eta: 0.3,
            reparam_iters: 12,
            refine: true,
            refined_iters: 10,
            solver: ProxSolver::default(),
        }
    }

    /// 8 steps `h_k = 0.1·1.2ᵏ` from `(2, 0)`, 12 iterations, no refinement.
    pub fn quadratic() -> Self {
        LabConfig {
            potential: LabPotential::Quadratic,
            x0: alloc::vec![2.0, 0.0],
            steps: (0..8).map(|k| 0.1 * libm::pow(1.2, k as f64)).collect(),
            h_max: 10.0,
            eta: 0.3,
            reparam_iters: 12,
            refine: false,
            refined_iters: 0,
            solver: ProxSolver::default(),
        }
    }
}

/// Points `x_0 … x_L` with their steps, plus the free endpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct ProxTrajectory {
    pub potential: LabPotential,
    pub points: Vec<Vec<f64>>,
    pub steps: Vec<f64>,
    pub free_endpoint: Vec<f64>,
    /// One entry per iteration, refinement included.
    pub history: Vec<LabIterate>,
    /// Every inner solve reached the gradient tolerance.
    pub converged: bool,
}

impl ProxTrajectory {
    pub fn arclengths(&self) -> Vec<f64> {
        arclengths(&self.points)
    }
}

/// The trajectory after one iteration of the lab.
#[derive(Clone, Debug, PartialEq)]
pub struct LabIterate {
    pub points: Vec<Vec<f64>>,
    pub stats: TrajectoryStats,
}

fn arclengths(points: &[Vec<f64>]) -> Vec<f64> {
    points
        .windows(2)
        .map(|w| norm(&w[0].iter().zip(&w[1]).map(|(a, b)| a - b).collect::<Vec<_>>()))
        .collect()
}

/// Solves the trajectory for `steps`, warm-starting point `k` from `warm[k]`.
fn solve_points(
    cfg: &LabConfig,
    steps: &[f64],
    warm: Option<&[Vec<f64>]>,
    converged: &mut bool,
) -> Result<Vec<Vec<f64>>> {
    let mut points = alloc::vec![cfg.x0.clone()];
    for (k, &h) in steps.iter().enumerate() {
        let prev = points.last().expect("x0").clone();
        let start = warm.map(|w| w[k + 1].as_slice());
        let step = prox_step(cfg.potential, &prev, h, start, &cfg.solver)?;
        *converged &= step.converged;
        points.push(step.x);
    }
    Ok(points)
}

fn iterate(iter: usize, points: &[Vec<f64>], steps: &[f64]) -> LabIterate {
    LabIterate {
        points: points.to_vec(),
        stats: TrajectoryStats {
            iter,
            movements: arclengths(points),
            steps: steps.to_vec(),
        },
    }
}

fn reparam_loop(
    cfg: &LabConfig,
    points: &mut Vec<Vec<f64>>,
    steps: &mut Vec<f64>,
    iters: usize,
    history: &mut Vec<LabIterate>,
    converged: &mut bool,
) -> Result<()> {
    for _ in 0..iters {
        let s = arclengths(points);
        *steps = reparameterize_steps(&s, steps, cfg.eta, cfg.h_max)?;
        *points = solve_points(cfg, steps, Some(points), converged)?;
        history.push(iterate(history.len(), points, steps));
    }
    Ok(())
}

/// Builds the proximal trajectory, runs the reparameterization iterations,
/// optionally refines and iterates again, then appends the free endpoint:
/// the local minimizer of `F` reached by gradient descent from `x_L`.
pub fn prox_trajectory_lab(cfg: &LabConfig) -> Result<ProxTrajectory> {
    cfg.potential.check(&cfg.x0)?;
    if cfg.steps.is_empty() {
        return Err(Error::Empty("lab needs at least one step"));
    }
    if !(cfg.eta > 0.0 && cfg.eta < 1.0) {
        return Err(Error::InvalidConfig("eta must lie in (0, 1)".into()));
    }
    let mut converged = true;
    let mut steps = cfg.steps.clone();
    let mut points = solve_points(cfg, &steps, None, &mut converged)?;
    let mut history = alloc::vec![iterate(0, &points, &steps)];
    reparam_loop(cfg, &mut points, &mut steps, cfg.reparam_iters, &mut history, &mut converged)?;

    if cfg.refine {
        let fine = refine_steps(&steps);
        // x̃_{2k} = x_k, x̃_{2k−1} = (x_{k−1} + x_k)/2
        let mut warm = alloc::vec![cfg.x0.clone()];
        for w in points.windows(2) {
            warm.push(w[0].iter().zip(&w[1]).map(|(a, b)| 0.5 * (a + b)).collect());
            warm.push(w[1].clone());
        }
        steps = fine;
        points = solve_points(cfg, &steps, Some(&warm), &mut converged)?;
        history.push(iterate(history.len(), &points, &steps));
        reparam_loop(cfg, &mut points, &mut steps, cfg.refined_iters, &mut history, &mut converged)?;
    }

    let last = points.last().expect("x0").clone();
    let free = descend(cfg.potential, &last, 0.0, &last, &cfg.solver);
    converged &= free.converged;
    Ok(ProxTrajectory {
        potential: cfg.potential,
        points,
        steps,
        free_endpoint: free.x,
        history,
        converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::Standardizer;
    use crate::net::{affine_params, ArchSpec};
    use crate::objective::Potential;
    use alloc::vec;

    #[test]
    fn reparam_step_examples() {
        assert_eq!(reparameterize_steps(&[2.0; 3], &[0.3, 0.7, 1.1], 0.5, 5.0).unwrap(), vec![0.3, 0.7, 1.1]);
        let h = reparameterize_steps(&[4.0, 2.0, 2.0], &[1.0; 3], 0.5, 5.0).unwrap();
        assert!((h[0] - 5.0 / 6.0).abs() < 1e-15);
        assert!((h[1] - 7.0 / 6.0).abs() < 1e-15 && (h[2] - 7.0 / 6.0).abs() < 1e-15);
        let h = reparameterize_steps(&[10.0, 1.0], &[1.0, 1.0], 0.5, 1.2).unwrap();
        assert_eq!(h[1], 1.2);
        assert_eq!(reparameterize_steps(&[1.0, 0.0], &[1.0, 1.0], 0.5, 2.0), Err(Error::DegenerateMovement(1)));
    }

    #[test]
    fn refine_examples() {
        assert_eq!(refine_steps(&[1.0]), vec![0.5, 0.5]);
        assert_eq!(refine_steps(&[0.75, 0.9]), vec![0.375, 0.375, 0.45, 0.45]);
    }

    #[test]
    fn cv_examples() {
        assert_eq!(coefficient_of_variation(&[2.0, 2.0]), 0.0);
        assert!((coefficient_of_variation(&[1.0, 3.0]) - 0.5).abs() < 1e-15);
    }

    fn decay_flow(h: &[f64]) -> FlowNetwork {
        let arch = ArchSpec::mlp(1, 4);
        let p = affine_params(&arch, &Mat::column(&[-1.0]), &[0.0]).unwrap();
        let mut flow = FlowNetwork::empty(
            arch.clone(),
            Standardizer::identity(1),
            Potential::StandardGaussian,
            IntegratorConfig {
                substeps: 40,
                ..IntegratorConfig::for_dim(1)
            },
        );
        for iv in FlowNetwork::intervals_from_steps(h).unwrap() {
            flow.blocks.push(ResidualVectorField::new(arch.clone(), p.clone(), iv).unwrap());
        }
        flow
    }

    #[test]
    fn movement_examples() {
        let flow = decay_flow(&[1.0]);
        let s = block_movement(&flow.blocks[0], &Mat::column(&[1.0, -1.0]), &flow.integrator).unwrap();
        assert!((s - (1.0 - libm::exp(-1.0))).abs() < 1e-8);

        let arch = ArchSpec::mlp(2, 4);
        let shift = affine_params(&arch, &Mat::zeros(2, 2), &[1.0, 0.0]).unwrap();
        let b = ResidualVectorField::new(arch.clone(), shift, BlockInterval::new(0.0, 1.0).unwrap()).unwrap();
        let x = Mat::from_rows(&[[0.3, -2.0], [5.0, 1.0], [0.0, 0.0]]).unwrap();
        assert!((block_movement(&b, &x, &IntegratorConfig::default()).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn refinement_preserves_the_pushforward() {
        let flow = decay_flow(&[0.5, 0.8]);
        let fine = refine_blocks(&flow).unwrap();
        assert_eq!(fine.blocks.len(), 4);
        assert_eq!(fine.steps().iter().sum::<f64>(), flow.steps().iter().sum::<f64>());
        assert!(fine.validate().is_ok());
        let x = Mat::column(&[-1.5, 0.2, 2.0]);
        let (a, _) = flow.encode(&x).unwrap();
        let (b, _) = fine.encode(&x).unwrap();
        for (u, v) in a.as_slice().iter().zip(b.as_slice()) {
            assert!((u - v).abs() < 1e-9);
        }
    }

    #[test]
    fn prox_examples() {
        let s = ProxSolver::default();
        let q = prox_step(LabPotential::Quadratic, &[2.0, 0.0], 1.0, None, &s).unwrap();
        assert!((q.x[0] - 1.0).abs() < 1e-5 && q.x[1].abs() < 1e-12 && q.converged);
        let mb = prox_step(LabPotential::MuellerBrown, &[0.0, 0.5], 0.01, None, &s).unwrap();
        assert!(mb.converged && mb.grad_norm < 1e-6);
        assert!(prox_step(LabPotential::MuellerBrown, &[0.0], 0.1, None, &s).is_err());
    }

    #[test]
    fn mueller_brown_gradient_matches_differences() {
        let p = LabPotential::MuellerBrown;
        for x in [[0.0, 0.5], [-0.5, 1.2], [0.6, 0.1]] {
            let g = p.grad(&x);
            for i in 0..2 {
                let mut a = x;
                let mut b = x;
                a[i] += 1e-6;
                b[i] -= 1e-6;
                let fd = (p.value(&a) - p.value(&b)) / 2e-6;
                assert!((fd - g[i]).abs() < 1e-5 * fd.abs().max(1.0));
            }
        }
        for x in [[0.0, 0.5], [-0.5, 1.2]] {
            let h = p.hessian(&x);
            for i in 0..2 {
                let mut a = x;
                let mut b = x;
                a[i] += 1e-6;
                b[i] -= 1e-6;
                let (ga, gb) = (p.grad(&a), p.grad(&b));
                for j in 0..2 {
                    let fd = (ga[j] - gb[j]) / 2e-6;
                    assert!((fd - h[j * 2 + i]).abs() < 1e-4 * fd.abs().max(1.0));
                }
            }
        }
        // known minimum of the surface
        assert!(norm(&p.grad(&[-0.558_224, 1.441_726])) < 1e-2);
    }

    #[test]
    fn single_step_lab() {
        let cfg = LabConfig {
            steps: vec![0.5],
            reparam_iters: 0,
            ..LabConfig::quadratic()
        };
        let t = prox_trajectory_lab(&cfg).unwrap();
        assert_eq!(t.points.len(), 2);
        assert!((t.points[1][0] - 2.0 / 1.5).abs() < 1e-5);
        assert!(norm(&t.free_endpoint) < 1e-5);
    }

    #[test]
    fn quadratic_lab_equalizes_arclengths() {
        let t = prox_trajectory_lab(&LabConfig::quadratic()).unwrap();
        let cvs: Vec<f64> = t.history.iter().map(|s| s.stats.cv()).collect();
        for w in cvs[..6].windows(2) {
            assert!(w[1] < w[0], "{cvs:?}");
        }
        assert!(*cvs.last().unwrap() < 0.05, "{cvs:?}");
        assert!(t.converged);
    }
}
