//! Gaussian-kernel MMD two-sample statistic and its permutation threshold.
//!
//! `k(x, y) = exp(−‖x − y‖² / 2h²)`. The statistic is the biased V-statistic,
//! diagonal terms included.

use alloc::vec::Vec;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::flow::FlowNetwork;
use crate::math;
use crate::matrix::Mat;
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BandwidthRule {
    Constant(f64),
    Median,
    /// `factor × median`
    ScaledMedian(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct MmdConfig {
    pub bandwidth: BandwidthRule,
    pub n_bootstrap: usize,
    pub alpha: f64,
    pub seed: u64,
    /// Median computed on a uniform subsample of this many points; `None`
    /// uses every pair.
    pub median_cap: Option<usize>,
}

impl Default for MmdConfig {
    fn default() -> Self {
        MmdConfig {
            bandwidth: BandwidthRule::ScaledMedian(0.1),
            n_bootstrap: 1000,
            alpha: 0.05,
            seed: 0,
            median_cap: Some(4096),
        }
    }
}

impl MmdConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = match self.bandwidth {
            BandwidthRule::Constant(h) | BandwidthRule::ScaledMedian(h) => h > 0.0 && h.is_finite(),
            BandwidthRule::Median => true,
        };
        if !ok {
            return Err(Error::InvalidConfig("bandwidth must be positive".into()));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::InvalidConfig("alpha must lie in (0, 1)".into()));
        }
        if self.n_bootstrap == 0 {
            return Err(Error::InvalidConfig("at least one bootstrap round is required".into()));
        }
        if self.median_cap.is_some_and(|c| c < 2) {
            return Err(Error::InvalidConfig("median subsample cap must be at least 2".into()));
        }
        Ok(())
    }

    /// Bandwidth for reference data `x`.
    pub fn bandwidth_for(&self, x: &Mat) -> Result<f64> {
        match self.bandwidth {
            BandwidthRule::Constant(h) => Ok(h),
            BandwidthRule::Median => median_bandwidth(x, self.median_cap, self.seed),
            BandwidthRule::ScaledMedian(f) => Ok(f * median_bandwidth(x, self.median_cap, self.seed)?),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MmdReport {
    pub mmd2: f64,
    pub bandwidth: f64,
    pub tau: f64,
    pub reject: bool,
    pub n: usize,
    pub m: usize,
}

/// Median of `‖x_i − x_j‖` over distinct pairs. Above `cap` points the median
/// is taken over a uniform subsample of `cap` points drawn with `seed`.
pub fn median_bandwidth(x: &Mat, cap: Option<usize>, seed: u64) -> Result<f64> {
    if x.rows() < 2 {
        return Err(Error::Empty("median bandwidth needs two points"));
    }
    let sub;
    let pts = match cap {
        Some(c) if x.rows() > c => {
            let mut idx: Vec<usize> = (0..x.rows()).collect();
            let mut r = rng::stream(seed, &[0x6d65_6469]);
            idx.partial_shuffle(&mut r, c);
            sub = x.select_rows(&idx[..c]);
            &sub
        }
        _ => x,
    };
    let n = pts.rows();
    let mut dist = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            dist.push(libm::sqrt(sq_dist(pts.row(i), pts.row(j))));
        }
    }
    let m = dist.len();
    let mid = m / 2;
    let (_, &mut upper, _) = dist.select_nth_unstable_by(mid, f64::total_cmp);
    let med = if m % 2 == 1 {
        upper
    } else {
        let lower = dist[..mid].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lower + upper)
    };
    if med <= 0.0 {
        return Err(Error::DegenerateBandwidth);
    }
    Ok(med)
}

#[inline]
fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum()
}

/// Compensated running sum.
#[derive(Default)]
struct Neumaier {
    sum: f64,
    c: f64,
}

impl Neumaier {
    fn add(&mut self, v: f64) {
        let t = self.sum + v;
        if self.sum.abs() >= v.abs() {
            self.c += (self.sum - t) + v;
        } else {
            self.c += (v - t) + self.sum;
        }
        self.sum = t;
    }

    fn total(&self) -> f64 {
        self.sum + self.c
    }
}

fn kernel_sum(a: &Mat, b: &Mat, gamma: f64) -> f64 {
    let mut s = Neumaier::default();
    for x in a.iter_rows() {
        for y in b.iter_rows() {
            s.add(math::exp(-gamma * sq_dist(x, y)));
        }
    }
    s.total()
}

/// Total order on point sets so the cross term is summed the same way
/// whichever argument comes first.
fn precedes(a: &Mat, b: &Mat) -> bool {
    let ka = (a.rows(), a.as_slice().iter().map(|v| v.to_bits()));
    let kb = (b.rows(), b.as_slice().iter().map(|v| v.to_bits()));
    ka.0 < kb.0 || (ka.0 == kb.0 && ka.1.le(kb.1))
}

fn check_sets(x: &Mat, y: &Mat, h: f64) -> Result<()> {
    if x.rows() == 0 || y.rows() == 0 {
        return Err(Error::Empty("mmd sample sets"));
    }
    if x.cols() != y.cols() {
        return Err(Error::Shape("mmd sample sets differ in dimension".into()));
    }
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::InvalidConfig("bandwidth must be positive".into()));
    }
    Ok(())
}

/// `(1/N²)Σk(xᵢ,xⱼ) + (1/M²)Σk(x̃ᵢ,x̃ⱼ) − (2/NM)Σk(xᵢ,x̃ⱼ)`
pub fn mmd2(x: &Mat, y: &Mat, h: f64) -> Result<f64> {
    check_sets(x, y, h)?;
    let gamma = 1.0 / (2.0 * h * h);
    let (n, m) = (x.rows() as f64, y.rows() as f64);
    let cross = if precedes(x, y) { kernel_sum(x, y, gamma) } else { kernel_sum(y, x, gamma) };
    Ok(kernel_sum(x, x, gamma) / (n * n) + kernel_sum(y, y, gamma) / (m * m) - 2.0 * cross / (n * m))
}

/// Rows of the pooled Gram matrix computed per tile.
const TILE: usize = 256;

/// Empirical `(1 − α)`-quantile of the statistic under random relabelings of
/// the pooled sample: each round permutes `X ∪ X̃` and splits it into sets of
/// sizes `N` and `M`.
///
/// All rounds are evaluated together as `wᵀKw` with one signed weight vector
/// per round, in single precision.
pub fn bootstrap_threshold(x: &Mat, y: &Mat, h: f64, cfg: &MmdConfig) -> Result<f64> {
    cfg.validate()?;
    let stats = bootstrap_null(x, y, h, cfg.n_bootstrap, cfg.seed)?;
    Ok(upper_quantile(stats, cfg.alpha))
}

/// `(1 − α)`-quantile as the order statistic `⌈(1 − α)B⌉`.
fn upper_quantile(mut stats: Vec<f64>, alpha: f64) -> f64 {
    stats.sort_by(f64::total_cmp);
    let b = stats.len();
    let k = (libm::ceil((1.0 - alpha) * b as f64) as usize).clamp(1, b);
    stats[k - 1].max(0.0)
}

/// Null distribution of the statistic over `rounds` relabelings.
pub fn bootstrap_null(x: &Mat, y: &Mat, h: f64, rounds: usize, seed: u64) -> Result<Vec<f64>> {
    check_sets(x, y, h)?;
    let pool = Mat::vstack(&[x.clone(), y.clone()])?;
    let (n, m) = (x.rows(), y.rows());
    let total = n + m;
    let gamma = 1.0 / (2.0 * h * h);

    // w[i, b]: 1/N when pooled point i lands in the pseudo-X of round b, else −1/M
    let mut w = alloc::vec![0f32; total * rounds];
    let mut idx: Vec<usize> = (0..total).collect();
    let (wx, wy) = (1.0 / n as f32, -1.0 / m as f32);
    for b in 0..rounds {
        let mut r = rng::stream(seed, &[0x626f_6f74, b as u64]);
        idx.iter_mut().enumerate().for_each(|(i, v)| *v = i);
        idx.shuffle(&mut r);
        for (pos, &i) in idx.iter().enumerate() {
            w[i * rounds + b] = if pos < n { wx } else { wy };
        }
    }

    let mut acc = alloc::vec![0f64; rounds];
    let mut k = alloc::vec![0f32; TILE * total];
    let mut kw = alloc::vec![0f32; TILE * rounds];
    let mut start = 0;
    while start < total {
        let rows = TILE.min(total - start);
        for r in 0..rows {
            let p = pool.row(start + r);
            for (j, q) in pool.iter_rows().enumerate() {
                let v = math::exp(-gamma * sq_dist(p, q)) as f32;
                // subnormal entries stall the multiply-add kernel
                k[r * total + j] = if v < f32::MIN_POSITIVE { 0.0 } else { v };
            }
        }
        // SAFETY: k is rows×total, w is total×rounds and kw is rows×rounds,
        // all row-major with the strides given.
        unsafe {
            matrixmultiply::sgemm(
                rows,
                total,
                rounds,
                1.0,
                k.as_ptr(),
                total as isize,
                1,
                w.as_ptr(),
                rounds as isize,
                1,
                0.0,
                kw.as_mut_ptr(),
                rounds as isize,
                1,
            );
        }
        for r in 0..rows {
            let wr = &w[(start + r) * rounds..(start + r + 1) * rounds];
            let kr = &kw[r * rounds..(r + 1) * rounds];
            for ((a, &u), &v) in acc.iter_mut().zip(wr).zip(kr) {
                *a += f64::from(u) * f64::from(v);
            }
        }
        start += rows;
    }
    Ok(acc)
}

/// Statistic, bandwidth and threshold for `x` against `y`, the bandwidth
/// taken from the reference set `x`.
pub fn two_sample_test(x: &Mat, y: &Mat, cfg: &MmdConfig) -> Result<MmdReport> {
    cfg.validate()?;
    let h = cfg.bandwidth_for(x)?;
    let stat = mmd2(x, y, h)?;
    let tau = bootstrap_threshold(x, y, h, cfg)?;
    Ok(MmdReport {
        mmd2: stat,
        bandwidth: h,
        tau,
        reject: stat > tau,
        n: x.rows(),
        m: y.rows(),
    })
}

/// Draws `m` samples from `flow` and tests them against held-out `test` data.
pub fn evaluate_generation(flow: &FlowNetwork, test: &Mat, m: usize, cfg: &MmdConfig) -> Result<MmdReport> {
    let generated = flow.sample(m, None, rng::derive_seed(cfg.seed, &[0x67_656e]))?;
    two_sample_test(test, &generated, cfg)
}
