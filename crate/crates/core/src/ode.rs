//! Fixed-step RK4 integration of one block on the augmented system
//! `ẋ = f(x, t)`, `ℓ̇ = ∇·f(x, t)`, and its time reversal.
//!
//! Two paths exist. [`integrate_block`] and [`invert_block`] work on plain
//! matrices through the [`VectorField`] trait and are used for evaluation.
//! [`integrate_taped`] records the same scheme on a [`Tape`] through the
//! [`TapedField`] trait so the block loss can be differentiated with respect to
//! the field parameters. Both evaluate the divergence at all four RK4 stages
//! and combine it with the RK4 weights.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::matrix::Mat;
use crate::net::{self, NetVars, ResidualVectorField};
use crate::rng;
use crate::tape::{Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlockInterval {
    pub t_start: f64,
    pub t_end: f64,
}

impl BlockInterval {
    pub fn new(t_start: f64, t_end: f64) -> Result<Self> {
        let h = t_end - t_start;
        if !(h > 0.0 && h.is_finite() && t_start.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "block interval [{t_start}, {t_end}) must have positive finite length"
            )));
        }
        Ok(BlockInterval { t_start, t_end })
    }

    #[inline]
    pub fn h(&self) -> f64 {
        self.t_end - self.t_start
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DivergenceMode {
    /// Jacobian trace from `d` tangents along the coordinate axes.
    Exact,
    /// `E[εᵀ(f(x + σε) − f(x))/σ]` with Rademacher `ε` and `σ = σ₀/√d`.
    HutchinsonFd,
}

#[derive(Clone, Debug, PartialEq)]
pub struct IntegratorConfig {
    pub substeps: usize,
    pub divergence_mode: DivergenceMode,
    pub n_probes: usize,
    pub sigma0: f64,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        IntegratorConfig {
            substeps: 3,
            divergence_mode: DivergenceMode::Exact,
            n_probes: 1,
            sigma0: 0.02,
        }
    }
}

impl IntegratorConfig {
    /// Exact trace up to `d = 8`, finite-difference Hutchinson above.
    pub fn for_dim(d: usize) -> Self {
        IntegratorConfig {
            divergence_mode: if d <= 8 {
                DivergenceMode::Exact
            } else {
                DivergenceMode::HutchinsonFd
            },
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.substeps == 0 {
            return Err(Error::InvalidConfig("substeps must be at least 1".into()));
        }
        if !(self.sigma0 > 0.0 && self.sigma0.is_finite()) {
            return Err(Error::InvalidConfig("sigma0 must be positive".into()));
        }
        if self.n_probes == 0 {
            return Err(Error::InvalidConfig("n_probes must be at least 1".into()));
        }
        Ok(())
    }

    pub fn sigma(&self, d: usize) -> f64 {
        self.sigma0 / libm::sqrt(d as f64)
    }
}

/// Counter-based source of Hutchinson probes: sample `i` of a batch at RK4
/// substep `s` draws from the stream `(seed, first_sample + i, s, probe)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ProbeSeed {
    pub seed: u64,
    pub first_sample: u64,
}

impl ProbeSeed {
    pub fn new(seed: u64) -> Self {
        ProbeSeed {
            seed,
            first_sample: 0,
        }
    }

    pub fn offset(self, by: usize) -> Self {
        ProbeSeed {
            first_sample: self.first_sample + by as u64,
            ..self
        }
    }

    fn probes(&self, n: usize, d: usize, substep: usize, n_probes: usize) -> Vec<Mat> {
        (0..n_probes)
            .map(|p| {
                let mut m = Mat::zeros(n, d);
                for i in 0..n {
                    let mut r = rng::stream(
                        self.seed,
                        &[self.first_sample + i as u64, substep as u64, p as u64],
                    );
                    m.row_mut(i).iter_mut().for_each(|v| *v = rng::rademacher(&mut r));
                }
                m
            })
            .collect()
    }
}

/// Batch state carried through integration: positions and the accumulated
/// divergence integral `ℓ` of each row.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedState {
    pub x: Mat,
    pub ell: Vec<f64>,
}

/// A velocity field evaluated on plain matrices.
pub trait VectorField {
    fn dim(&self) -> usize;

    /// `f(x, t)` for every row of `x`.
    fn eval(&self, x: &Mat, t: f64) -> Result<Mat>;

    /// `(∂f/∂x)·ε` for every row pair of `x` and `dir`.
    fn jvp(&self, x: &Mat, t: f64, dir: &Mat) -> Result<Mat>;

    /// `f(x, t)` and the exact divergence.
    fn eval_with_divergence(&self, x: &Mat, t: f64) -> Result<(Mat, Vec<f64>)> {
        Ok((self.eval(x, t)?, divergence_exact(self, x, t)?))
    }
}

/// A velocity field that can be recorded on a tape.
pub trait TapedField {
    fn dim(&self) -> usize;
    fn field(&self, tape: &mut Tape, x: Var, t: f64) -> Var;
    /// `f(x, t)` and its exact divergence (`B × 1`).
    fn field_and_divergence(&self, tape: &mut Tape, x: Var, t: f64) -> (Var, Var);
}

impl TapedField for NetVars {
    fn dim(&self) -> usize {
        NetVars::dim(self)
    }
    fn field(&self, tape: &mut Tape, x: Var, t: f64) -> Var {
        NetVars::field(self, tape, x, t)
    }
    fn field_and_divergence(&self, tape: &mut Tape, x: Var, t: f64) -> (Var, Var) {
        NetVars::field_and_divergence(self, tape, x, t)
    }
}

impl VectorField for ResidualVectorField {
    fn dim(&self) -> usize {
        self.arch.input_dim
    }

    fn eval(&self, x: &Mat, t: f64) -> Result<Mat> {
        net::forward(&self.params, &self.arch, x, t)
    }

    fn jvp(&self, x: &Mat, t: f64, dir: &Mat) -> Result<Mat> {
        net::jvp(&self.params, &self.arch, x, t, dir)
    }

    fn eval_with_divergence(&self, x: &Mat, t: f64) -> Result<(Mat, Vec<f64>)> {
        let mut tape = Tape::new();
        let net = NetVars::constant(&mut tape, &self.arch, &self.params);
        let xv = tape.constant(x.clone());
        let (f, div) = net.field_and_divergence(&mut tape, xv, t);
        let f = tape.value(f).clone();
        if !f.is_finite() {
            return Err(Error::NonFiniteOutput);
        }
        Ok((f, tape.value(div).as_slice().to_vec()))
    }
}

/// The linear field `f(x) = A x`, independent of time.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearField {
    a: Mat,
    a_t: Mat,
    trace: f64,
}

impl LinearField {
    pub fn new(a: Mat) -> Result<Self> {
        if a.rows() != a.cols() || a.rows() == 0 {
            return Err(Error::Shape("linear field needs a square matrix".into()));
        }
        let trace = (0..a.rows()).map(|i| a.get(i, i)).sum();
        Ok(LinearField {
            a_t: a.transpose(),
            a,
            trace,
        })
    }

    /// `f(x) = c · x` in `d` dimensions.
    pub fn scaled_identity(d: usize, c: f64) -> Self {
        let mut a = Mat::zeros(d, d);
        (0..d).for_each(|i| a.set(i, i, c));
        Self::new(a).expect("square")
    }

    pub fn matrix(&self) -> &Mat {
        &self.a
    }
}

impl VectorField for LinearField {
    fn dim(&self) -> usize {
        self.a.rows()
    }
    fn eval(&self, x: &Mat, _t: f64) -> Result<Mat> {
        Ok(x.matmul(&self.a_t))
    }
    fn jvp(&self, _x: &Mat, _t: f64, dir: &Mat) -> Result<Mat> {
        Ok(dir.matmul(&self.a_t))
    }
}

impl TapedField for LinearField {
    fn dim(&self) -> usize {
        self.a.rows()
    }
    fn field(&self, tape: &mut Tape, x: Var, _t: f64) -> Var {
        let a_t = tape.constant(self.a_t.clone());
        tape.matmul(x, a_t)
    }
    fn field_and_divergence(&self, tape: &mut Tape, x: Var, t: f64) -> (Var, Var) {
        let f = TapedField::field(self, tape, x, t);
        let rows = tape.value(x).rows();
        (f, tape.constant(Mat::filled(rows, 1, self.trace)))
    }
}

/// Exact `Tr(∂f/∂x)` per row, from `d` JVPs against the coordinate axes.
pub fn divergence_exact<F: VectorField + ?Sized>(field: &F, x: &Mat, t: f64) -> Result<Vec<f64>> {
    let d = field.dim();
    let mut div = vec![0.0; x.rows()];
    let mut e = Mat::zeros(x.rows(), d);
    for i in 0..d {
        for r in 0..x.rows() {
            e.row_mut(r).iter_mut().for_each(|v| *v = 0.0);
            e.set(r, i, 1.0);
        }
        let j = field.jvp(x, t, &e)?;
        for (r, acc) in div.iter_mut().enumerate() {
            *acc += j.get(r, i);
        }
    }
    Ok(div)
}

fn hutchinson_with_probes<F: VectorField + ?Sized>(
    field: &F,
    x: &Mat,
    fx: &Mat,
    t: f64,
    sigma: f64,
    probes: &[Mat],
) -> Result<Vec<f64>> {
    let mut div = vec![0.0; x.rows()];
    for eps in probes {
        let mut xp = x.clone();
        xp.axpy(sigma, eps);
        let fp = field.eval(&xp, t)?;
        for (r, acc) in div.iter_mut().enumerate() {
            let s: f64 = fp
                .row(r)
                .iter()
                .zip(fx.row(r))
                .zip(eps.row(r))
                .map(|((a, b), e)| e * (a - b) / sigma)
                .sum();
            *acc += s;
        }
    }
    let n = probes.len() as f64;
    div.iter_mut().for_each(|v| *v /= n);
    Ok(div)
}

/// Finite-difference Hutchinson estimate of `∇·f` per row, averaged over
/// `cfg.n_probes` fresh Rademacher probes drawn from `rng`.
pub fn divergence_hutchinson_fd<F: VectorField + ?Sized, R: Rng + ?Sized>(
    field: &F,
    x: &Mat,
    t: f64,
    cfg: &IntegratorConfig,
    rng: &mut R,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    let d = field.dim();
    let probes: Vec<Mat> = (0..cfg.n_probes)
        .map(|_| {
            let mut m = Mat::zeros(x.rows(), d);
            m.as_mut_slice().iter_mut().for_each(|v| *v = rng::rademacher(rng));
            m
        })
        .collect();
    let fx = field.eval(x, t)?;
    hutchinson_with_probes(field, x, &fx, t, cfg.sigma(d), &probes)
}

fn check_state(x: &Mat, ell: &[f64], substep: usize) -> Result<()> {
    if !x.is_finite() || !ell.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFiniteState { block: 0, substep });
    }
    Ok(())
}

fn check_input(x0: &Mat, d: usize) -> Result<()> {
    if x0.cols() != d {
        return Err(Error::Shape(format!("points have {} columns, field has dimension {d}", x0.cols())));
    }
    if !x0.is_finite() {
        return Err(Error::NonFiniteState { block: 0, substep: 0 });
    }
    Ok(())
}

/// Pushes `x0` through the block with RK4 on the augmented system and returns
/// the final positions with `ℓ = ∫ ∇·f ds` per row.
///
/// Non-finite states are reported as [`Error::NonFiniteState`] with block 0;
/// callers that know the block index rewrite it.
pub fn integrate_block<F: VectorField + ?Sized>(
    field: &F,
    interval: BlockInterval,
    x0: &Mat,
    cfg: &IntegratorConfig,
    probes: ProbeSeed,
) -> Result<AugmentedState> {
    cfg.validate()?;
    let d = field.dim();
    check_input(x0, d)?;
    let n = x0.rows();
    let dt = interval.h() / cfg.substeps as f64;
    let sigma = cfg.sigma(d);
    let mut x = x0.clone();
    let mut ell = vec![0.0; n];

    for s in 0..cfg.substeps {
        let t = interval.t_start + s as f64 * dt;
        let step_probes = match cfg.divergence_mode {
            DivergenceMode::Exact => Vec::new(),
            DivergenceMode::HutchinsonFd => probes.probes(n, d, s, cfg.n_probes),
        };
        let stage = |xs: &Mat, ts: f64| -> Result<(Mat, Vec<f64>)> {
            match cfg.divergence_mode {
                DivergenceMode::Exact => field.eval_with_divergence(xs, ts),
                DivergenceMode::HutchinsonFd => {
                    let f = field.eval(xs, ts)?;
                    let div = hutchinson_with_probes(field, xs, &f, ts, sigma, &step_probes)?;
                    Ok((f, div))
                }
            }
        };
        let (k1, d1) = stage(&x, t)?;
        let mut x2 = x.clone();
        x2.axpy(dt / 2.0, &k1);
        let (k2, d2) = stage(&x2, t + dt / 2.0)?;
        let mut x3 = x.clone();
        x3.axpy(dt / 2.0, &k2);
        let (k3, d3) = stage(&x3, t + dt / 2.0)?;
        let mut x4 = x.clone();
        x4.axpy(dt, &k3);
        let (k4, d4) = stage(&x4, t + dt)?;

        x.axpy(dt / 6.0, &k1);
        x.axpy(dt / 3.0, &k2);
        x.axpy(dt / 3.0, &k3);
        x.axpy(dt / 6.0, &k4);
        for (i, l) in ell.iter_mut().enumerate() {
            *l += dt / 6.0 * (d1[i] + 2.0 * d2[i] + 2.0 * d3[i] + d4[i]);
        }
        check_state(&x, &ell, s)?;
    }
    Ok(AugmentedState { x, ell })
}

/// Positions only: RK4 on `ẋ = f(x, t)` without divergence bookkeeping.
pub fn push_block<F: VectorField + ?Sized>(
    field: &F,
    interval: BlockInterval,
    x0: &Mat,
    cfg: &IntegratorConfig,
) -> Result<Mat> {
    cfg.validate()?;
    check_input(x0, field.dim())?;
    let dt = interval.h() / cfg.substeps as f64;
    rk4_positions(field, x0, interval.t_start, dt, cfg.substeps)
}

fn rk4_positions<F: VectorField + ?Sized>(
    field: &F,
    x0: &Mat,
    t0: f64,
    dt: f64,
    substeps: usize,
) -> Result<Mat> {
    let mut x = x0.clone();
    for s in 0..substeps {
        let t = t0 + s as f64 * dt;
        let k1 = field.eval(&x, t)?;
        let mut x2 = x.clone();
        x2.axpy(dt / 2.0, &k1);
        let k2 = field.eval(&x2, t + dt / 2.0)?;
        let mut x3 = x.clone();
        x3.axpy(dt / 2.0, &k2);
        let k3 = field.eval(&x3, t + dt / 2.0)?;
        let mut x4 = x.clone();
        x4.axpy(dt, &k3);
        let k4 = field.eval(&x4, t + dt)?;
        x.axpy(dt / 6.0, &k1);
        x.axpy(dt / 3.0, &k2);
        x.axpy(dt / 3.0, &k3);
        x.axpy(dt / 6.0, &k4);
        check_state(&x, &[], s)?;
    }
    Ok(x)
}

/// Integrates the time-reversed ODE `ẋ(s) = −f(x, t_end − s)` over the block
/// with the same number of RK4 substeps.
pub fn invert_block<F: VectorField + ?Sized>(
    field: &F,
    interval: BlockInterval,
    y: &Mat,
    cfg: &IntegratorConfig,
) -> Result<Mat> {
    cfg.validate()?;
    check_input(y, field.dim())?;
    let dt = interval.h() / cfg.substeps as f64;
    // RK4 with a negative step from t_end is the same scheme as the reversed ODE.
    rk4_positions(field, y, interval.t_end, -dt, cfg.substeps)
}

/// Taped RK4 on the augmented system. Returns `(x(t_end), ℓ)` as `B × d` and
/// `B × 1` nodes.
pub fn integrate_taped<F: TapedField + ?Sized>(
    tape: &mut Tape,
    field: &F,
    interval: BlockInterval,
    x0: Var,
    cfg: &IntegratorConfig,
    probes: ProbeSeed,
) -> (Var, Var) {
    let d = field.dim();
    let n = tape.value(x0).rows();
    let dt = interval.h() / cfg.substeps as f64;
    let sigma = cfg.sigma(d);
    let mut x = x0;
    let mut ell: Option<Var> = None;

    for s in 0..cfg.substeps {
        let t = interval.t_start + s as f64 * dt;
        let step_probes: Vec<Var> = match cfg.divergence_mode {
            DivergenceMode::Exact => Vec::new(),
            DivergenceMode::HutchinsonFd => probes
                .probes(n, d, s, cfg.n_probes)
                .into_iter()
                .map(|m| tape.constant(m))
                .collect(),
        };
        let stage = |tape: &mut Tape, xs: Var, ts: f64| -> (Var, Var) {
            match cfg.divergence_mode {
                DivergenceMode::Exact => field.field_and_divergence(tape, xs, ts),
                DivergenceMode::HutchinsonFd => {
                    let f = field.field(tape, xs, ts);
                    let mut terms = Vec::with_capacity(step_probes.len());
                    for &eps in &step_probes {
                        let xp = tape.lin_comb(&[(xs, 1.0), (eps, sigma)]);
                        let fp = field.field(tape, xp, ts);
                        let diff = tape.lin_comb(&[(fp, 1.0 / sigma), (f, -1.0 / sigma)]);
                        let prod = tape.mul(diff, eps);
                        terms.push((tape.row_sum(prod), 1.0 / step_probes.len() as f64));
                    }
                    (f, tape.lin_comb(&terms))
                }
            }
        };
        let (k1, d1) = stage(tape, x, t);
        let x2 = tape.lin_comb(&[(x, 1.0), (k1, dt / 2.0)]);
        let (k2, d2) = stage(tape, x2, t + dt / 2.0);
        let x3 = tape.lin_comb(&[(x, 1.0), (k2, dt / 2.0)]);
        let (k3, d3) = stage(tape, x3, t + dt / 2.0);
        let x4 = tape.lin_comb(&[(x, 1.0), (k3, dt)]);
        let (k4, d4) = stage(tape, x4, t + dt);
        x = tape.lin_comb(&[
            (x, 1.0),
            (k1, dt / 6.0),
            (k2, dt / 3.0),
            (k3, dt / 3.0),
            (k4, dt / 6.0),
        ]);
        let mut terms = vec![(d1, dt / 6.0), (d2, dt / 3.0), (d3, dt / 3.0), (d4, dt / 6.0)];
        if let Some(prev) = ell {
            terms.push((prev, 1.0));
        }
        ell = Some(tape.lin_comb(&terms));
    }
    let ell = ell.expect("at least one substep");
    (x, ell)
}
