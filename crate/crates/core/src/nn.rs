//! Dense layers, PReLU, and L2 normalization with hand-derived gradients.
//!
//! Every primitive comes as a forward function plus a vector-Jacobian
//! product (`*_backward`). Backward functions take the upstream gradient and
//! the values cached from the forward pass, accumulate parameter gradients
//! into a caller-provided buffer, and return the gradient w.r.t. the input.
//!
//! All arithmetic is `f64`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_dim, Error, Result};

/// Norms at or below this are treated as a dead output by [`l2_normalize`].
pub const NORM_EPSILON: f64 = 1e-12;

/// Initial PReLU slope for every unit.
pub const DEFAULT_PRELU_SLOPE: f64 = 0.25;

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(x: &[f64]) -> f64 {
    dot(x, x).sqrt()
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = x - y;
            d * d
        })
        .sum()
}

pub fn all_finite(x: &[f64]) -> bool {
    x.iter().all(|v| v.is_finite())
}

/// Affine map `W·x + b` with `W` stored row-major as `out_dim × in_dim`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    in_dim: usize,
    out_dim: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Linear {
    pub fn new(in_dim: usize, out_dim: usize, weights: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        if in_dim == 0 || out_dim == 0 {
            return Err(Error::Config(format!(
                "layer dims must be positive, got {in_dim}->{out_dim}"
            )));
        }
        ensure_dim("linear weights", in_dim * out_dim, weights.len())?;
        ensure_dim("linear bias", out_dim, bias.len())?;
        if !all_finite(&weights) || !all_finite(&bias) {
            return Err(Error::Numerical("non-finite layer parameter".into()));
        }
        Ok(Linear {
            in_dim,
            out_dim,
            weights,
            bias,
        })
    }

    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Linear {
            in_dim,
            out_dim,
            weights: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
        }
    }

    /// Glorot-uniform weights, zero bias.
    pub fn glorot<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let weights = (0..in_dim * out_dim)
            .map(|_| rng.random_range(-limit..=limit))
            .collect();
        Linear {
            in_dim,
            out_dim,
            weights,
            bias: vec![0.0; out_dim],
        }
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.weights[i * self.in_dim..(i + 1) * self.in_dim]
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        ensure_dim("linear input", self.in_dim, x.len())?;
        Ok((0..self.out_dim)
            .map(|i| dot(self.row(i), x) + self.bias[i])
            .collect())
    }

    /// Accumulates `dW += g ⊗ x`, `db += g` into `grads`; returns `Wᵀ·g`.
    pub fn backward(&self, x: &[f64], grad_out: &[f64], grads: &mut Linear) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.in_dim);
        debug_assert_eq!(grad_out.len(), self.out_dim);
        let mut grad_in = vec![0.0; self.in_dim];
        for (i, &g) in grad_out.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            grads.bias[i] += g;
            let row = self.row(i);
            let grow = &mut grads.weights[i * self.in_dim..(i + 1) * self.in_dim];
            for j in 0..self.in_dim {
                grow[j] += g * x[j];
                grad_in[j] += g * row[j];
            }
        }
        grad_in
    }

    pub(crate) fn tensors(&self) -> [&[f64]; 2] {
        [&self.weights, &self.bias]
    }

    pub(crate) fn tensors_mut(&mut self) -> [&mut [f64]; 2] {
        [&mut self.weights, &mut self.bias]
    }
}

/// A linear layer followed by a PReLU with one learnable slope per output unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub linear: Linear,
    pub slopes: Vec<f64>,
}

impl DenseLayer {
    pub fn new(linear: Linear, slopes: Vec<f64>) -> Result<Self> {
        ensure_dim("prelu slopes", linear.out_dim(), slopes.len())?;
        if !all_finite(&slopes) {
            return Err(Error::Numerical("non-finite prelu slope".into()));
        }
        Ok(DenseLayer { linear, slopes })
    }

    pub fn glorot<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        DenseLayer {
            linear: Linear::glorot(in_dim, out_dim, rng),
            slopes: vec![DEFAULT_PRELU_SLOPE; out_dim],
        }
    }

    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        DenseLayer {
            linear: Linear::zeros(in_dim, out_dim),
            slopes: vec![0.0; out_dim],
        }
    }

    pub fn in_dim(&self) -> usize {
        self.linear.in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.linear.out_dim()
    }
}

/// `W·x + b` for a dense layer (the activation is not applied).
pub fn linear_forward(layer: &DenseLayer, x: &[f64]) -> Result<Vec<f64>> {
    layer.linear.forward(x)
}

pub fn prelu(slopes: &[f64], x: &[f64]) -> Result<Vec<f64>> {
    ensure_dim("prelu input", slopes.len(), x.len())?;
    Ok(x.iter()
        .zip(slopes)
        .map(|(&v, &a)| if v > 0.0 { v } else { a * v })
        .collect())
}

/// Gradient of [`prelu`] given the pre-activation `x`. At `x == 0` the slope
/// branch is taken. Accumulates the slope gradient into `grad_slopes`.
pub fn prelu_backward(
    slopes: &[f64],
    x: &[f64],
    grad_out: &[f64],
    grad_slopes: &mut [f64],
) -> Vec<f64> {
    x.iter()
        .zip(slopes)
        .zip(grad_out)
        .zip(grad_slopes.iter_mut())
        .map(|(((&v, &a), &g), gs)| {
            if v > 0.0 {
                g
            } else {
                *gs += g * v;
                g * a
            }
        })
        .collect()
}

pub fn relu(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect()
}

pub fn relu_backward(x: &[f64], grad_out: &[f64]) -> Vec<f64> {
    x.iter()
        .zip(grad_out)
        .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
        .collect()
}

pub fn l2_normalize(x: &[f64]) -> Result<Vec<f64>> {
    let n = norm(x);
    if !(n > NORM_EPSILON) {
        return Err(Error::DegenerateVector { norm: n });
    }
    Ok(x.iter().map(|v| v / n).collect())
}

/// Gradient of `x / ||x||` given the input `x` and its normalized value `y`:
/// `(g − y·(y·g)) / ||x||`.
pub fn l2_normalize_backward(x: &[f64], y: &[f64], grad_out: &[f64]) -> Vec<f64> {
    let n = norm(x);
    let yg = dot(y, grad_out);
    grad_out
        .iter()
        .zip(y)
        .map(|(g, yi)| (g - yi * yg) / n)
        .collect()
}

/// Central finite-difference gradient of a scalar function.
pub fn finite_diff_grad<F>(mut f: F, x: &[f64], eps: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(eps > 0.0) {
        return Err(Error::Domain(format!(
            "finite-difference step must be positive, got {eps}"
        )));
    }
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + eps;
        let up = f(&probe);
        probe[i] = orig - eps;
        let down = f(&probe);
        probe[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite function value while differencing coordinate {i}"
            )));
        }
        grad.push((up - down) / (2.0 * eps));
    }
    Ok(grad)
}

/// Relative error with a floor on the denominator, as used by gradient checks.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(floor);
    (analytic - numeric).abs() / denom
}
