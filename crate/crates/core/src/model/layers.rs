//! Differentiable building blocks for the toy encoders.
//!
//! Every layer exposes a `forward` that records what `backward` needs, and a
//! `backward` that accumulates parameter gradients into a same-shaped layer
//! and returns the gradient with respect to its input. All math is `f64`.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, Axis, Zip};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

pub type Matrix = Array2<f64>;

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

pub(crate) fn randn<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Matrix {
    Matrix::from_shape_simple_fn((rows, cols), || {
        let z: f64 = rng.sample(StandardNormal);
        z * std
    })
}

/// Affine map `y = x W + b` with `W` stored as `in × out`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: Matrix,
    pub bias: Matrix,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, input: usize, output: usize, gain: f64) -> Self {
        Self {
            weight: randn(rng, input, output, gain / (input as f64).sqrt()),
            bias: Matrix::zeros((1, output)),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn forward(&self, x: &Matrix) -> Matrix {
        let mut y = Matrix::zeros((x.nrows(), self.output_dim()));
        y += &self.bias;
        general_mat_mul(1.0, x, &self.weight, 1.0, &mut y);
        y
    }

    /// Accumulates `dW`, `db` into `grad` and returns `dx`.
    pub fn backward(&self, x: &Matrix, dy: &Matrix, grad: &mut Linear) -> Matrix {
        general_mat_mul(1.0, &x.t(), dy, 1.0, &mut grad.weight);
        grad.bias += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
        dy.dot(&self.weight.t())
    }

    pub(crate) fn tensors(&self) -> [&Matrix; 2] {
        [&self.weight, &self.bias]
    }

    pub(crate) fn tensors_mut(&mut self) -> [&mut Matrix; 2] {
        [&mut self.weight, &mut self.bias]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerNorm {
    pub gain: Matrix,
    pub bias: Matrix,
}

#[derive(Clone, Debug)]
pub struct LayerNormCache {
    normalized: Matrix,
    inv_std: Vec<f64>,
}

impl LayerNorm {
    pub fn new(width: usize) -> Self {
        Self {
            gain: Matrix::ones((1, width)),
            bias: Matrix::zeros((1, width)),
        }
    }

    pub fn forward(&self, x: &Matrix) -> (Matrix, LayerNormCache) {
        let width = x.ncols() as f64;
        let mut normalized = x.clone();
        let mut inv_std = Vec::with_capacity(x.nrows());
        for mut row in normalized.rows_mut() {
            let mean = row.sum() / width;
            row -= mean;
            let var = row.iter().map(|v| v * v).sum::<f64>() / width;
            let s = 1.0 / (var + LN_EPS).sqrt();
            row *= s;
            inv_std.push(s);
        }
        let mut y = &normalized * &self.gain;
        y += &self.bias;
        (y, LayerNormCache { normalized, inv_std })
    }

    pub fn backward(&self, cache: &LayerNormCache, dy: &Matrix, grad: &mut LayerNorm) -> Matrix {
        grad.gain += &(dy * &cache.normalized).sum_axis(Axis(0)).insert_axis(Axis(0));
        grad.bias += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));

        let width = dy.ncols() as f64;
        let mut dx = dy * &self.gain;
        for ((mut row, xhat), &s) in dx
            .rows_mut()
            .into_iter()
            .zip(cache.normalized.rows())
            .zip(&cache.inv_std)
        {
            let sum_d = row.sum();
            let sum_dx = row.iter().zip(xhat.iter()).map(|(d, x)| d * x).sum::<f64>();
            Zip::from(&mut row).and(&xhat).for_each(|d, &x| {
                *d = s * (*d - sum_d / width - x * sum_dx / width);
            });
        }
        dx
    }

    pub(crate) fn tensors(&self) -> [&Matrix; 2] {
        [&self.gain, &self.bias]
    }

    pub(crate) fn tensors_mut(&mut self) -> [&mut Matrix; 2] {
        [&mut self.gain, &mut self.bias]
    }
}

fn gelu(a: f64) -> f64 {
    0.5 * a * (1.0 + (GELU_C * (a + GELU_K * a * a * a)).tanh())
}

fn gelu_grad(a: f64) -> f64 {
    let t = (GELU_C * (a + GELU_K * a * a * a)).tanh();
    0.5 * (1.0 + t) + 0.5 * a * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * a * a)
}

/// Pre-norm residual MLP block: `y = x + W2 · gelu(W1 · LN(x))`.
///
/// This is the freezing unit: one block is one trainable group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub norm: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

#[derive(Clone, Debug)]
pub struct BlockCache {
    norm: LayerNormCache,
    normed: Matrix,
    pre_act: Matrix,
    act: Matrix,
}

impl Block {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, width: usize, hidden: usize) -> Self {
        Self {
            norm: LayerNorm::new(width),
            fc1: Linear::new(rng, width, hidden, 1.0),
            fc2: Linear::new(rng, hidden, width, 0.5),
        }
    }

    pub fn forward(&self, x: &Matrix) -> Matrix {
        self.forward_cached(x).0
    }

    pub fn forward_cached(&self, x: &Matrix) -> (Matrix, BlockCache) {
        let (normed, norm) = self.norm.forward(x);
        let pre_act = self.fc1.forward(&normed);
        let act = pre_act.mapv(gelu);
        let y = x + &self.fc2.forward(&act);
        (
            y,
            BlockCache {
                norm,
                normed,
                pre_act,
                act,
            },
        )
    }

    pub fn backward(&self, cache: &BlockCache, dy: &Matrix, grad: &mut Block) -> Matrix {
        let mut d_act = self.fc2.backward(&cache.act, dy, &mut grad.fc2);
        Zip::from(&mut d_act)
            .and(&cache.pre_act)
            .for_each(|d, &a| *d *= gelu_grad(a));
        let d_normed = self.fc1.backward(&cache.normed, &d_act, &mut grad.fc1);
        dy + &self.norm.backward(&cache.norm, &d_normed, &mut grad.norm)
    }

    pub(crate) const NAMES: [&'static str; 6] = [
        "norm.gain",
        "norm.bias",
        "fc1.weight",
        "fc1.bias",
        "fc2.weight",
        "fc2.bias",
    ];

    pub(crate) fn tensors(&self) -> [&Matrix; 6] {
        let [a, b] = self.norm.tensors();
        let [c, d] = self.fc1.tensors();
        let [e, f] = self.fc2.tensors();
        [a, b, c, d, e, f]
    }

    pub(crate) fn tensors_mut(&mut self) -> [&mut Matrix; 6] {
        let [a, b] = self.norm.tensors_mut();
        let [c, d] = self.fc1.tensors_mut();
        let [e, f] = self.fc2.tensors_mut();
        [a, b, c, d, e, f]
    }
}

/// Final norm + bias-free projection + row-wise L2 normalization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Head {
    pub norm: LayerNorm,
    pub proj: Matrix,
}

#[derive(Clone, Debug)]
pub struct HeadCache {
    norm: LayerNormCache,
    normed: Matrix,
    output: Matrix,
    norms: Vec<f64>,
}

impl Head {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, width: usize, embed_dim: usize) -> Self {
        Self {
            norm: LayerNorm::new(width),
            proj: randn(rng, width, embed_dim, 1.0 / (width as f64).sqrt()),
        }
    }

    pub fn forward(&self, h: &Matrix) -> Matrix {
        self.forward_cached(h).0
    }

    pub fn forward_cached(&self, h: &Matrix) -> (Matrix, HeadCache) {
        let (normed, norm) = self.norm.forward(h);
        let mut output = normed.dot(&self.proj);
        let norms = l2_normalize_rows(&mut output);
        (
            output.clone(),
            HeadCache {
                norm,
                normed,
                output,
                norms,
            },
        )
    }

    pub fn backward(&self, cache: &HeadCache, dz: &Matrix, grad: &mut Head) -> Matrix {
        let mut dp = dz.clone();
        for ((mut row, z), &n) in dp.rows_mut().into_iter().zip(cache.output.rows()).zip(&cache.norms) {
            if n == 0.0 {
                row.fill(0.0);
                continue;
            }
            let dot = row.dot(&z);
            Zip::from(&mut row).and(&z).for_each(|d, &zi| *d = (*d - zi * dot) / n);
        }
        general_mat_mul(1.0, &cache.normed.t(), &dp, 1.0, &mut grad.proj);
        let d_normed = dp.dot(&self.proj.t());
        self.norm.backward(&cache.norm, &d_normed, &mut grad.norm)
    }

    pub(crate) const NAMES: [&'static str; 3] = ["norm.gain", "norm.bias", "proj"];

    pub(crate) fn tensors(&self) -> [&Matrix; 3] {
        let [a, b] = self.norm.tensors();
        [a, b, &self.proj]
    }

    pub(crate) fn tensors_mut(&mut self) -> [&mut Matrix; 3] {
        let [a, b] = self.norm.tensors_mut();
        [a, b, &mut self.proj]
    }
}

/// Normalizes each row to unit L2 norm in place and returns the original norms.
///
/// A zero row has no direction; it is mapped to the first basis vector so
/// that every emitted embedding is unit-norm.
pub fn l2_normalize_rows(m: &mut Matrix) -> Vec<f64> {
    let mut norms = Vec::with_capacity(m.nrows());
    for mut row in m.rows_mut() {
        let n = row.dot(&row).sqrt();
        if n > 0.0 {
            row /= n;
        } else {
            row.fill(0.0);
            if let Some(first) = row.first_mut() {
                *first = 1.0;
            }
        }
        norms.push(n);
    }
    norms
}
