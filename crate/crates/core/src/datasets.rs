//! Toy 2-D generators and per-dimension standardization.
//!
//! The shapes are fixed reconstructions:
//!
//! | name            | geometry                                                        | default noise σ |
//! |-----------------|-----------------------------------------------------------------|-----------------|
//! | `checkerboard`  | 4×4 alternating board on `[−2, 2]²`, uniform in the 8 on-squares | 0               |
//! | `two_moons`     | interleaved unit half-circles, second shifted by `(1, −0.5)`    | 0.1             |
//! | `two_circles`   | concentric circles of radius 1 and 2, radial noise              | 0.05            |
//! | `rose`          | `r = cos 3θ`, arc-length uniform                                | 0.02            |
//! | `fractal_tree`  | 7 levels of binary branching, ratio 0.7, angle ±π/5             | 0.01            |
//! | `olympic_rings` | five unit circles in the ring layout                            | 0.05            |

use alloc::format;
use alloc::vec::Vec;
use core::f64::consts::PI;
use core::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::matrix::Mat;
use crate::objective::Batch;
use crate::rng::{self, FlowRng};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetKind {
    Checkerboard,
    TwoMoons,
    TwoCircles,
    Rose,
    FractalTree,
    OlympicRings,
}

impl DatasetKind {
    pub const ALL: [DatasetKind; 6] = [
        DatasetKind::Checkerboard,
        DatasetKind::TwoMoons,
        DatasetKind::TwoCircles,
        DatasetKind::Rose,
        DatasetKind::FractalTree,
        DatasetKind::OlympicRings,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DatasetKind::Checkerboard => "checkerboard",
            DatasetKind::TwoMoons => "two_moons",
            DatasetKind::TwoCircles => "two_circles",
            DatasetKind::Rose => "rose",
            DatasetKind::FractalTree => "fractal_tree",
            DatasetKind::OlympicRings => "olympic_rings",
        }
    }

    pub fn default_noise(self) -> f64 {
        match self {
            DatasetKind::Checkerboard => 0.0,
            DatasetKind::TwoMoons => 0.1,
            DatasetKind::TwoCircles => 0.05,
            DatasetKind::Rose => 0.02,
            DatasetKind::FractalTree => 0.01,
            DatasetKind::OlympicRings => 0.05,
        }
    }

    /// Number of classes when sampled with labels, if the shape has natural classes.
    pub fn classes(self) -> Option<usize> {
        match self {
            DatasetKind::TwoMoons | DatasetKind::TwoCircles => Some(2),
            DatasetKind::OlympicRings => Some(5),
            _ => None,
        }
    }
}

impl FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        DatasetKind::ALL
            .iter()
            .copied()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown dataset `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    /// `None` uses the kind's default.
    pub noise: Option<f64>,
    pub labeled: bool,
}

impl DatasetSpec {
    pub fn new(kind: DatasetKind) -> Self {
        DatasetSpec {
            kind,
            noise: None,
            labeled: false,
        }
    }

    pub fn noise(&self) -> f64 {
        self.noise.unwrap_or(self.kind.default_noise())
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.noise() >= 0.0 && self.noise().is_finite()) {
            return Err(Error::InvalidConfig("dataset noise must be non-negative".into()));
        }
        if self.labeled && self.kind.classes().is_none() {
            return Err(Error::InvalidConfig(format!("dataset `{}` has no class labels", self.kind.name())));
        }
        Ok(())
    }
}

pub const OLYMPIC_CENTERS: [(f64, f64); 5] = [(-2.2, 0.5), (0.0, 0.5), (2.2, 0.5), (-1.1, -0.5), (1.1, -0.5)];

/// `n` i.i.d. samples (and labels when `spec.labeled`).
pub fn generate<R: Rng + ?Sized>(spec: &DatasetSpec, n: usize, rng: &mut R) -> Result<Batch> {
    spec.validate()?;
    let noise = spec.noise();
    let mut x = Mat::zeros(n, 2);
    let mut labels = Vec::with_capacity(n);
    let tree = match spec.kind {
        DatasetKind::FractalTree => Some(fractal_tree_segments(7, 0.7, PI / 5.0)),
        _ => None,
    };
    for i in 0..n {
        let (p, label) = match spec.kind {
            DatasetKind::Checkerboard => (checkerboard(rng), 0),
            DatasetKind::TwoMoons => two_moons(rng),
            DatasetKind::TwoCircles => {
                let class = usize::from(rng.random::<bool>());
                let r = (class + 1) as f64 + noise * rng::standard_normal(rng);
                let th = rng.random_range(0.0..2.0 * PI);
                ([r * libm::cos(th), r * libm::sin(th)], class)
            }
            DatasetKind::Rose => (rose(rng), 0),
            DatasetKind::FractalTree => (tree.as_ref().expect("tree").sample(rng), 0),
            DatasetKind::OlympicRings => {
                let ring = rng.random_range(0..OLYMPIC_CENTERS.len());
                let (cx, cy) = OLYMPIC_CENTERS[ring];
                let th = rng.random_range(0.0..2.0 * PI);
                ([cx + libm::cos(th), cy + libm::sin(th)], ring)
            }
        };
        let row = x.row_mut(i);
        row.copy_from_slice(&p);
        // two_circles carries its noise radially
        if noise > 0.0 && spec.kind != DatasetKind::TwoCircles {
            row[0] += noise * rng::standard_normal(rng);
            row[1] += noise * rng::standard_normal(rng);
        }
        labels.push(label);
    }
    Ok(Batch {
        x,
        labels: spec.labeled.then_some(labels),
    })
}

/// Deterministic sample set for `(spec, n, seed)`.
pub fn generate_seeded(spec: &DatasetSpec, n: usize, seed: u64) -> Result<Batch> {
    let mut r: FlowRng = rng::stream(seed, &[0x6461_7461]);
    generate(spec, n, &mut r)
}

fn checkerboard<R: Rng + ?Sized>(rng: &mut R) -> [f64; 2] {
    let x: f64 = rng.random_range(-2.0..2.0);
    let col = libm::floor(x + 2.0).clamp(0.0, 3.0) as usize;
    // rows j with col + j even are on
    let row = 2 * rng.random_range(0..2usize) + (col % 2);
    let y = -2.0 + row as f64 + rng.random_range(0.0..1.0);
    [x, y]
}

/// `true` when `p` lies in one of the on-squares of the board.
pub fn checkerboard_contains(p: &[f64]) -> bool {
    let (x, y) = (p[0], p[1]);
    if !(-2.0..=2.0).contains(&x) || !(-2.0..=2.0).contains(&y) {
        return false;
    }
    let col = libm::floor(x + 2.0).clamp(0.0, 3.0) as usize;
    let row = libm::floor(y + 2.0).clamp(0.0, 3.0) as usize;
    (col + row).is_multiple_of(2)
}

fn two_moons<R: Rng + ?Sized>(rng: &mut R) -> ([f64; 2], usize) {
    let th = rng.random_range(0.0..PI);
    if rng.random::<bool>() {
        ([libm::cos(th), libm::sin(th)], 0)
    } else {
        ([1.0 - libm::cos(th), 0.5 - libm::sin(th)], 1)
    }
}

fn rose<R: Rng + ?Sized>(rng: &mut R) -> [f64; 2] {
    // speed |dγ/dθ| = sqrt(r² + r'²) ∈ [1, 3]; rejection makes the arc length uniform
    loop {
        let th = rng.random_range(0.0..PI);
        let r = libm::cos(3.0 * th);
        let dr = -3.0 * libm::sin(3.0 * th);
        let speed = libm::sqrt(r * r + dr * dr);
        if rng.random_range(0.0..3.0) <= speed {
            return [r * libm::cos(th), r * libm::sin(th)];
        }
    }
}

/// Line segments of the branching tree with their cumulative lengths.
#[derive(Clone, Debug)]
pub struct TreeSegments {
    pub segments: Vec<([f64; 2], [f64; 2])>,
    cumulative: Vec<f64>,
}

impl TreeSegments {
    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> [f64; 2] {
        let total = *self.cumulative.last().expect("nonempty tree");
        let u = rng.random_range(0.0..total);
        let k = self.cumulative.partition_point(|&c| c <= u).min(self.segments.len() - 1);
        let (a, b) = self.segments[k];
        let s: f64 = rng.random_range(0.0..1.0);
        [a[0] + s * (b[0] - a[0]), a[1] + s * (b[1] - a[1])]
    }

    /// Distance from `p` to the nearest segment.
    pub fn distance(&self, p: &[f64]) -> f64 {
        self.segments
            .iter()
            .map(|(a, b)| {
                let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
                let len2 = dx * dx + dy * dy;
                let s = (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2).clamp(0.0, 1.0);
                let (qx, qy) = (a[0] + s * dx - p[0], a[1] + s * dy - p[1]);
                libm::sqrt(qx * qx + qy * qy)
            })
            .fold(f64::INFINITY, f64::min)
    }
}

/// Unit trunk from `(0, −1)` upward; every segment spawns two children rotated
/// by `±angle` and scaled by `ratio`, for `levels` levels in total.
pub fn fractal_tree_segments(levels: usize, ratio: f64, angle: f64) -> TreeSegments {
    let mut segments = Vec::new();
    let mut frontier = alloc::vec![([0.0, -1.0], PI / 2.0, 1.0)];
    for _ in 0..levels {
        let mut next = Vec::with_capacity(frontier.len() * 2);
        for (start, dir, len) in frontier {
            let end = [start[0] + len * libm::cos(dir), start[1] + len * libm::sin(dir)];
            segments.push((start, end));
            next.push((end, dir + angle, len * ratio));
            next.push((end, dir - angle, len * ratio));
        }
        frontier = next;
    }
    let mut acc = 0.0;
    let cumulative = segments
        .iter()
        .map(|(a, b)| {
            acc += libm::hypot(b[0] - a[0], b[1] - a[1]);
            acc
        })
        .collect();
    TreeSegments { segments, cumulative }
}

/// Per-dimension affine map `z = (x − mean) / scale`.
#[derive(Clone, Debug, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    pub fitted_on: usize,
}

impl Standardizer {
    pub fn identity(d: usize) -> Self {
        Standardizer {
            mean: alloc::vec![0.0; d],
            scale: alloc::vec![1.0; d],
            fitted_on: 0,
        }
    }

    /// Column means and population standard deviations.
    pub fn fit(samples: &Mat) -> Result<Self> {
        let n = samples.rows();
        if n < 2 {
            return Err(Error::Empty("standardizer needs at least two samples"));
        }
        let mean = samples.col_means();
        let mut var = alloc::vec![0.0; samples.cols()];
        for r in samples.iter_rows() {
            for ((v, x), m) in var.iter_mut().zip(r).zip(&mean) {
                *v += (x - m) * (x - m);
            }
        }
        let mut scale = Vec::with_capacity(var.len());
        for (j, v) in var.iter().enumerate() {
            let s = libm::sqrt(v / n as f64);
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::ZeroVariance(j));
            }
            scale.push(s);
        }
        Ok(Standardizer {
            mean,
            scale,
            fitted_on: n,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.mean.len() != self.scale.len() {
            return Err(Error::Shape("standardizer mean and scale lengths differ".into()));
        }
        if let Some(j) = self.scale.iter().position(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(Error::ZeroVariance(j));
        }
        Ok(())
    }

    pub fn apply(&self, x: &Mat) -> Result<Mat> {
        self.check(x)?;
        let mut out = x.clone();
        for r in 0..out.rows() {
            for ((v, m), s) in out.row_mut(r).iter_mut().zip(&self.mean).zip(&self.scale) {
                *v = (*v - m) / s;
            }
        }
        Ok(out)
    }

    pub fn invert(&self, z: &Mat) -> Result<Mat> {
        self.check(z)?;
        let mut out = z.clone();
        for r in 0..out.rows() {
            for ((v, m), s) in out.row_mut(r).iter_mut().zip(&self.mean).zip(&self.scale) {
                *v = *v * s + m;
            }
        }
        Ok(out)
    }

    /// `log |det ∂z/∂x| = −Σ log scale_j`
    pub fn log_det_jacobian(&self) -> f64 {
        -self.scale.iter().map(|s| libm::log(*s)).sum::<f64>()
    }

    fn check(&self, x: &Mat) -> Result<()> {
        if x.cols() != self.dim() {
            return Err(Error::Shape(format!(
                "points have {} columns, standardizer has {}",
                x.cols(),
                self.dim()
            )));
        }
        Ok(())
    }
}
