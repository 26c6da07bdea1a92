#![allow(dead_code, clippy::needless_range_loop)]

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use srapf::data::{generate_shift_benchmark, BenchmarkConfig, ShiftBenchmark};
use srapf::model::{DualEncoderModel, ModelConfig};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn((r, c), || scale * rng.sample::<f64, _>(StandardNormal))
}

pub fn unit_rows(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
    let mut m = normal(rng, r, c, 1.0);
    for mut row in m.rows_mut() {
        let n = row.dot(&row).sqrt();
        row /= n;
    }
    m
}

/// Naive mean cross-entropy with explicit loops and no stabilization.
pub fn brute_ce(x: &Array2<f64>, labels: &[usize], w: &Array2<f64>) -> f64 {
    let (n, d) = x.dim();
    let k = w.ncols();
    let mut total = 0.0;
    for i in 0..n {
        let mut logits = vec![0.0; k];
        for (j, l) in logits.iter_mut().enumerate() {
            for t in 0..d {
                *l += x[[i, t]] * w[[t, j]];
            }
        }
        let denom: f64 = logits.iter().map(|l| l.exp()).sum();
        total -= (logits[labels[i]].exp() / denom).ln();
    }
    total / n as f64
}

/// Naive symmetric InfoNCE.
pub fn brute_contrastive(img: &Array2<f64>, txt: &Array2<f64>, tau: f64) -> f64 {
    let (n, d) = img.dim();
    let mut s = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            for t in 0..d {
                s[i][j] += img[[i, t]] * txt[[j, t]];
            }
            s[i][j] /= tau;
        }
    }
    let mut total = 0.0;
    for i in 0..n {
        let row: f64 = (0..n).map(|j| s[i][j].exp()).sum();
        let col: f64 = (0..n).map(|j| s[j][i].exp()).sum();
        total -= (s[i][i].exp() / row).ln() + (s[i][i].exp() / col).ln();
    }
    total / n as f64
}

/// Five-point central finite-difference gradient of `f` at `x`.
pub fn fd_grad(x: &Array2<f64>, h: f64, mut f: impl FnMut(&Array2<f64>) -> f64) -> Array2<f64> {
    let mut g = Array2::zeros(x.dim());
    let mut xp = x.clone();
    for idx in 0..x.len() {
        let (r, c) = (idx / x.ncols(), idx % x.ncols());
        let orig = xp[[r, c]];
        let mut at = |t: f64| {
            xp[[r, c]] = orig + t;
            f(&xp)
        };
        let (p1, m1, p2, m2) = (at(h), at(-h), at(2.0 * h), at(-2.0 * h));
        xp[[r, c]] = orig;
        g[[r, c]] = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h);
    }
    g
}

/// Largest elementwise relative error with a 1e-6 absolute floor.
pub fn max_rel_err(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-6))
        .fold(0.0, f64::max)
}

pub fn tiny_model_config(k: usize) -> ModelConfig {
    ModelConfig {
        input_dim: 8,
        width: 12,
        hidden: 16,
        visual_blocks: 4,
        text_blocks: 3,
        embed_dim: 8,
        num_classes: k,
        vocab_size: 64,
    }
}

/// Small benchmark that trains in well under a second per run.
pub fn small_benchmark(seed: u64) -> ShiftBenchmark {
    generate_shift_benchmark(&BenchmarkConfig {
        num_classes: 4,
        raw_dim: 8,
        latent_dim: 4,
        n_per_class: 20,
        n_test_per_class: 20,
        corpus_size: 300,
        extra_concepts: 2,
        seed,
        ..BenchmarkConfig::default()
    })
    .unwrap()
}

pub fn small_model(bench: &ShiftBenchmark, seed: u64) -> DualEncoderModel {
    let mut m = DualEncoderModel::new(tiny_model_config(bench.class_names.len()), seed).unwrap();
    m.init_classifier_from_text(&bench.class_names, &["a photo of a {}."])
        .unwrap();
    m
}

pub fn bits(model: &DualEncoderModel) -> Vec<Vec<u64>> {
    model
        .tensors()
        .into_iter()
        .map(|t| t.iter().map(|v| v.to_bits()).collect())
        .collect()
}
