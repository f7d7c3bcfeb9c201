//! The MLP residual vector field `f_θ(x, t)` of one flow block.
//!
//! Parameters live in one flat [`ParamVector`]. Layer `l` stores its weight
//! matrix `W_l` (`fan_in × fan_out`, row-major) followed by its bias `b_l`, so
//! a batch `X` (one point per row) maps to `X · W_l + b_l`. When the
//! architecture is time-conditioned the scalar `t` is appended to every input
//! row; the last row of `W_0` is therefore the time weight.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::matrix::{gemm, Mat};
use crate::ode::BlockInterval;
use crate::rng;
use crate::tape::{self, Tape, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct ArchSpec {
    pub input_dim: usize,
    pub hidden_widths: Vec<usize>,
    /// Softplus sharpness β.
    pub beta: f64,
    pub time_input: bool,
}

impl ArchSpec {
    /// Two hidden layers of `width` units, softplus β = 20, time-conditioned.
    pub fn mlp(input_dim: usize, width: usize) -> Self {
        ArchSpec {
            input_dim,
            hidden_widths: alloc::vec![width, width],
            beta: 20.0,
            time_input: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::InvalidArch("input dimension must be positive".into()));
        }
        if self.hidden_widths.is_empty() {
            return Err(Error::InvalidArch("at least one hidden layer is required".into()));
        }
        if self.hidden_widths.contains(&0) {
            return Err(Error::InvalidArch("hidden widths must be positive".into()));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::InvalidArch(format!("softplus beta must be positive, got {}", self.beta)));
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` of every linear layer, first to last.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_widths.len() + 1);
        let mut fan_in = self.input_dim + usize::from(self.time_input);
        for &w in &self.hidden_widths {
            dims.push((fan_in, w));
            fan_in = w;
        }
        dims.push((fan_in, self.input_dim));
        dims
    }

    pub fn layout(&self) -> Vec<LayerLayout> {
        let mut offset = 0;
        self.layer_dims()
            .into_iter()
            .map(|(fan_in, fan_out)| {
                let l = LayerLayout {
                    fan_in,
                    fan_out,
                    weight_offset: offset,
                    bias_offset: offset + fan_in * fan_out,
                };
                offset += fan_in * fan_out + fan_out;
                l
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layer_dims().iter().map(|(i, o)| i * o + o).sum()
    }
}

/// Where one linear layer sits inside a [`ParamVector`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerLayout {
    pub fan_in: usize,
    pub fan_out: usize,
    pub weight_offset: usize,
    pub bias_offset: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamVector(pub Vec<f64>);

impl ParamVector {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn as_row(&self) -> Mat {
        Mat::from_vec(1, self.0.len(), self.0.clone()).expect("row shape")
    }

    /// Copy with the final linear layer set to zero (the identity transport).
    pub fn with_zero_output_layer(&self, arch: &ArchSpec) -> ParamVector {
        let mut p = self.clone();
        let last = *arch.layout().last().expect("at least one layer");
        p.0[last.weight_offset..].iter_mut().for_each(|v| *v = 0.0);
        p
    }

    pub fn check_len(&self, arch: &ArchSpec) -> Result<()> {
        if self.0.len() != arch.param_count() {
            return Err(Error::Shape(format!(
                "parameter vector has {} entries, architecture needs {}",
                self.0.len(),
                arch.param_count()
            )));
        }
        Ok(())
    }
}

/// Hidden layers drawn from `U(-1/√fan_in, 1/√fan_in)`; the output layer is zero,
/// so the fresh field is identically zero.
pub fn init_params(arch: &ArchSpec, seed: u64) -> Result<ParamVector> {
    arch.validate()?;
    let mut rng = rng::stream(seed, &[0x696e_6974]);
    let layout = arch.layout();
    let mut p = alloc::vec![0.0; arch.param_count()];
    for l in &layout[..layout.len() - 1] {
        let bound = 1.0 / libm::sqrt(l.fan_in as f64);
        let end = l.bias_offset + l.fan_out;
        for v in &mut p[l.weight_offset..end] {
            *v = rng.random_range(-bound..bound);
        }
    }
    Ok(ParamVector(p))
}

/// Parameters that realize the affine field `f(x) = A x + c` exactly for
/// inputs with `|x_i| < 16`: the first `d` units of every hidden layer carry
/// `x + offset` deep in the linear regime of the softplus.
pub fn affine_params(arch: &ArchSpec, a: &Mat, c: &[f64]) -> Result<ParamVector> {
    arch.validate()?;
    let d = arch.input_dim;
    if a.shape() != (d, d) || c.len() != d {
        return Err(Error::Shape(format!("affine field must be {d}×{d} with a length-{d} shift")));
    }
    if arch.hidden_widths.iter().any(|&w| w < d) {
        return Err(Error::InvalidArch("hidden layers narrower than the input cannot carry an affine map".into()));
    }
    let offset = 40.0 / arch.beta + 16.0;
    let layout = arch.layout();
    let mut p = alloc::vec![0.0; arch.param_count()];
    let (last, hidden) = layout.split_last().expect("at least one layer");
    for (l, layer) in hidden.iter().enumerate() {
        for i in 0..d {
            p[layer.weight_offset + i * layer.fan_out + i] = 1.0;
            if l == 0 {
                p[layer.bias_offset + i] = offset;
            }
        }
    }
    for j in 0..d {
        let mut row_sum = 0.0;
        for i in 0..d {
            p[last.weight_offset + i * last.fan_out + j] = a.get(j, i);
            row_sum += a.get(j, i);
        }
        p[last.bias_offset + j] = c[j] - offset * row_sum;
    }
    Ok(ParamVector(p))
}

/// One block: field parameters plus the time interval it is integrated over.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualVectorField {
    pub arch: ArchSpec,
    pub params: ParamVector,
    pub interval: BlockInterval,
}

impl ResidualVectorField {
    pub fn new(arch: ArchSpec, params: ParamVector, interval: BlockInterval) -> Result<Self> {
        arch.validate()?;
        params.check_len(&arch)?;
        Ok(ResidualVectorField {
            arch,
            params,
            interval,
        })
    }

    pub fn dim(&self) -> usize {
        self.arch.input_dim
    }
}

/// Network parameters loaded onto a tape, one `(W, b)` pair per layer.
#[derive(Clone, Debug)]
pub struct NetVars {
    layers: Vec<(Var, Var)>,
    beta: f64,
    time_input: bool,
    dim: usize,
}

impl NetVars {
    /// Slices the flat parameter node `params` (`1 × P`) into per-layer views.
    pub fn load(tape: &mut Tape, arch: &ArchSpec, params: Var) -> Self {
        let layers = arch
            .layout()
            .iter()
            .map(|l| {
                let w = tape.slice(params, l.weight_offset, l.fan_in, l.fan_out);
                let b = tape.slice(params, l.bias_offset, 1, l.fan_out);
                (w, b)
            })
            .collect();
        NetVars {
            layers,
            beta: arch.beta,
            time_input: arch.time_input,
            dim: arch.input_dim,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Parameters as constants (no gradient).
    pub fn constant(tape: &mut Tape, arch: &ArchSpec, params: &ParamVector) -> Self {
        let p = tape.constant(params.as_row());
        Self::load(tape, arch, p)
    }

    fn input(&self, tape: &mut Tape, x: Var, t: f64) -> Var {
        if self.time_input {
            let rows = tape.value(x).rows();
            let tcol = tape.constant(Mat::filled(rows, 1, t));
            tape.concat_cols(x, tcol)
        } else {
            x
        }
    }

    /// Pre-activations and activation slopes of every hidden layer, and the output.
    fn forward_full(&self, tape: &mut Tape, x: Var, t: f64, want_slopes: bool) -> (Var, Vec<Var>) {
        let mut h = self.input(tape, x, t);
        let mut slopes = Vec::new();
        let n_hidden = self.layers.len() - 1;
        for &(w, b) in &self.layers[..n_hidden] {
            let z = tape.matmul(h, w);
            let z = tape.add_row(z, b);
            h = if want_slopes {
                let s = tape.sigmoid(z, self.beta);
                slopes.push(s);
                tape.softplus_with_slope(z, s, self.beta)
            } else {
                tape.softplus(z, self.beta)
            };
        }
        let (w, b) = self.layers[n_hidden];
        let out = tape.matmul(h, w);
        (tape.add_row(out, b), slopes)
    }

    /// `f(x, t)` for a batch `x` (`B × d`).
    pub fn field(&self, tape: &mut Tape, x: Var, t: f64) -> Var {
        self.forward_full(tape, x, t, false).0
    }

    /// `f(x, t)` and `Tr ∂f/∂x` (`B × 1`), the trace from `d` forward-mode
    /// tangents along the coordinate axes.
    pub fn field_and_divergence(&self, tape: &mut Tape, x: Var, t: f64) -> (Var, Var) {
        let (out, slopes) = self.forward_full(tape, x, t, true);
        let mut terms = Vec::with_capacity(self.dim);
        let (w0, _) = self.layers[0];
        let fan_out0 = tape.value(w0).cols();
        for i in 0..self.dim {
            // ∂z₀/∂xᵢ is row i of W₀, the same for every sample.
            let w_row = tape.slice(w0, i * fan_out0, 1, fan_out0);
            let mut tangent = tape.mul_row(slopes[0], w_row);
            for (l, &(w, _)) in self.layers.iter().enumerate().skip(1) {
                let dz = tape.matmul(tangent, w);
                tangent = if l < self.layers.len() - 1 {
                    tape.mul(slopes[l], dz)
                } else {
                    dz
                };
            }
            terms.push((tape.select_col(tangent, i), 1.0));
        }
        (out, tape.lin_comb(&terms))
    }
}

/// `f_θ(x, t)` for a batch of points (one per row).
pub fn forward(params: &ParamVector, arch: &ArchSpec, x: &Mat, t: f64) -> Result<Mat> {
    params.check_len(arch)?;
    if x.cols() != arch.input_dim {
        return Err(Error::Shape(format!("points have {} columns, field expects {}", x.cols(), arch.input_dim)));
    }
    let layout = arch.layout();
    let p = params.as_slice();
    let n = x.rows();
    let mut h = input_rows(arch, x, t);
    for (idx, l) in layout.iter().enumerate() {
        let w = Mat::from_vec(l.fan_in, l.fan_out, p[l.weight_offset..l.bias_offset].to_vec()).expect("layer slice");
        let bias = &p[l.bias_offset..l.bias_offset + l.fan_out];
        let mut z = Mat::zeros(n, l.fan_out);
        for r in 0..n {
            z.row_mut(r).copy_from_slice(bias);
        }
        gemm(1.0, &h, false, &w, false, 1.0, &mut z);
        if idx < layout.len() - 1 {
            z.as_mut_slice().iter_mut().for_each(|v| *v = tape::softplus(*v, arch.beta));
        }
        h = z;
    }
    if !h.is_finite() {
        return Err(Error::NonFiniteOutput);
    }
    Ok(h)
}

/// Network input rows: `x`, with `t` appended when time-conditioned.
fn input_rows(arch: &ArchSpec, x: &Mat, t: f64) -> Mat {
    if !arch.time_input {
        return x.clone();
    }
    let d = arch.input_dim;
    let mut h = Mat::zeros(x.rows(), d + 1);
    for r in 0..x.rows() {
        let row = h.row_mut(r);
        row[..d].copy_from_slice(x.row(r));
        row[d] = t;
    }
    h
}

/// Forward-mode directional derivative `(∂f/∂x) · ε`, row by row.
///
/// Propagates the tangent through the layers directly, without the tape.
pub fn jvp(params: &ParamVector, arch: &ArchSpec, x: &Mat, t: f64, eps: &Mat) -> Result<Mat> {
    params.check_len(arch)?;
    if x.shape() != eps.shape() || x.cols() != arch.input_dim {
        return Err(Error::Shape("jvp point and direction shapes differ".into()));
    }
    let layout = arch.layout();
    let p = params.as_slice();
    let n = x.rows();
    let weight = |l: &LayerLayout, rows: usize| {
        Mat::from_vec(rows, l.fan_out, p[l.weight_offset..l.weight_offset + rows * l.fan_out].to_vec())
            .expect("layer slice")
    };

    let first = &layout[0];
    let h = input_rows(arch, x, t);
    let w_full = weight(first, first.fan_in);
    let w_x = weight(first, arch.input_dim);
    let mut dh = Mat::zeros(n, first.fan_out);
    gemm(1.0, eps, false, &w_x, false, 0.0, &mut dh);
    let mut z = h.matmul(&w_full);

    for (idx, l) in layout.iter().enumerate() {
        let bias = &p[l.bias_offset..l.bias_offset + l.fan_out];
        for r in 0..n {
            for (v, b) in z.row_mut(r).iter_mut().zip(bias) {
                *v += b;
            }
        }
        if idx == layout.len() - 1 {
            break;
        }
        // activation and its slope
        let a = z.map(|v| tape::softplus(v, arch.beta));
        let da = dh.zip_map(&z, |d, v| d * tape::sigmoid(arch.beta * v));
        let next = &layout[idx + 1];
        let w = weight(next, next.fan_in);
        z = a.matmul(&w);
        dh = da.matmul(&w);
    }
    Ok(dh)
}

/// Value and gradient of a scalar objective built on a tape from the flat
/// parameter node (`1 × P`).
pub fn value_and_grad<F>(params: &ParamVector, objective: F) -> (f64, ParamVector)
where
    F: FnOnce(&mut Tape, Var) -> Var,
{
    let mut tape = Tape::new();
    let p = tape.variable(params.as_row());
    let out = objective(&mut tape, p);
    let value = tape.value(out).get(0, 0);
    let grads = tape.backward(out);
    let g = grads
        .get(p)
        .map(|g| g.as_slice().to_vec())
        .unwrap_or_else(|| alloc::vec![0.0; params.len()]);
    (value, ParamVector(g))
}
