//! Feature-space PGD: `x^t = x^{t-1} + α·sign(∇_x CE(x^{t-1}, y))` with the
//! cumulative displacement clamped to the L∞ ball of radius ε.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::EvalReport;
use crate::losses::log_softmax_nll;
use crate::model::{classify, DualEncoderModel, Matrix};
use crate::pipeline::{run_stages, FewShotTask, StageConfig};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbationConfig {
    /// Maximum number of sign-gradient iterations `T`.
    pub steps: usize,
    /// L∞ radius.
    pub epsilon: f64,
    /// Step size. `None` means `2.5 · ε / T`.
    #[serde(default)]
    pub alpha: Option<f64>,
    #[serde(default)]
    pub random_start: bool,
    /// Seed for the random start when no RNG is supplied.
    #[serde(default)]
    pub seed: u64,
}

impl Default for PerturbationConfig {
    fn default() -> Self {
        Self::new(10, 0.01)
    }
}

impl PerturbationConfig {
    pub fn new(steps: usize, epsilon: f64) -> Self {
        Self {
            steps,
            epsilon,
            alpha: None,
            random_start: false,
            seed: 0,
        }
    }

    pub fn with_alpha(mut self, alpha: f64) -> Self {
        self.alpha = Some(alpha);
        self
    }

    /// Effective step size.
    pub fn step_size(&self) -> f64 {
        match self.alpha {
            Some(a) => a,
            None if self.steps == 0 => 0.0,
            None => 2.5 * self.epsilon / self.steps as f64,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.steps == 0 || self.epsilon == 0.0
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::arg(format!("epsilon = {} must be >= 0", self.epsilon)));
        }
        if let Some(a) = self.alpha {
            if !(a > 0.0 && a.is_finite()) {
                return Err(Error::arg(format!("alpha = {a} must be > 0")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PerturbationResult {
    pub perturbed: Matrix,
    pub delta: Matrix,
    pub iterations_run: usize,
}

/// Per-sample gradient of CE with respect to the feature: `W (p - e_y)`.
fn input_gradient(x: &Matrix, labels: &[usize], classifier: &Matrix) -> Result<Matrix> {
    let logits = classify(x, classifier)?;
    let mut d_logits = Matrix::zeros(logits.dim());
    for (i, &y) in labels.iter().enumerate() {
        let (_, probs) = log_softmax_nll(logits.row(i), y);
        for (j, p) in probs.into_iter().enumerate() {
            d_logits[[i, j]] = p - f64::from(u8::from(j == y));
        }
    }
    Ok(d_logits.dot(&classifier.t()))
}

/// Runs PGD with the seeded RNG in `config` for the optional random start.
pub fn perturb(
    features: &Matrix,
    labels: &[usize],
    classifier: &Matrix,
    config: &PerturbationConfig,
) -> Result<PerturbationResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    perturb_with_rng(features, labels, classifier, config, &mut rng)
}

/// PGD depending only on `(features, labels, classifier)`; no encoder
/// parameter is read or written.
pub fn perturb_with_rng(
    features: &Matrix,
    labels: &[usize],
    classifier: &Matrix,
    config: &PerturbationConfig,
    rng: &mut dyn RngCore,
) -> Result<PerturbationResult> {
    config.validate()?;
    if features.nrows() != labels.len() {
        return Err(Error::shape(format!(
            "{} feature rows for {} labels",
            features.nrows(),
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= classifier.ncols()) {
        return Err(Error::arg(format!("label {bad} outside classifier range")));
    }
    if features.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite input feature".into()));
    }
    let eps = config.epsilon;
    let mut delta = Matrix::zeros(features.dim());
    if config.is_identity() {
        return Ok(PerturbationResult {
            perturbed: features.clone(),
            delta,
            iterations_run: 0,
        });
    }
    if config.random_start {
        delta.mapv_inplace(|_| rng.random_range(-eps..=eps));
    }
    let alpha = config.step_size();
    for t in 0..config.steps {
        let current = features + &delta;
        let grad = input_gradient(&current, labels, classifier)?;
        if let Some(pos) = grad.iter().position(|g| !g.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite feature gradient at iteration {t}, row {}",
                pos / grad.ncols()
            )));
        }
        ndarray::Zip::from(&mut delta).and(&grad).for_each(|d, &g| {
            let sign = if g > 0.0 {
                1.0
            } else if g < 0.0 {
                -1.0
            } else {
                0.0
            };
            *d = (*d + alpha * sign).clamp(-eps, eps);
        });
    }
    Ok(PerturbationResult {
        perturbed: features + &delta,
        delta,
        iterations_run: config.steps,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub epsilon: f64,
    pub report: EvalReport,
}

/// Trains `base` once per radius with AP enabled; a zero radius disables AP
/// entirely, so that row is plain partial finetuning.
pub fn sweep_epsilon(
    pretrained: &DualEncoderModel,
    task: &FewShotTask,
    base: &StageConfig,
    epsilons: &[f64],
) -> Result<Vec<SweepRow>> {
    if let Some(&bad) = epsilons.iter().find(|e| !(**e >= 0.0 && e.is_finite())) {
        return Err(Error::arg(format!("epsilon {bad} must be finite and >= 0")));
    }
    let mut rows = Vec::with_capacity(epsilons.len());
    for &epsilon in epsilons {
        let mut cfg = base.clone();
        cfg.use_ra = false;
        cfg.weights.lambda_ra = 0.0;
        cfg.perturbation.epsilon = epsilon;
        cfg.use_ap = epsilon > 0.0;
        if !cfg.use_ap {
            cfg.weights.lambda_ap = 0.0;
        }
        cfg.name = format!("eps_{epsilon}");
        let outcome = run_stages(&cfg.name.clone(), pretrained, task, None, &[cfg])?;
        rows.push(SweepRow {
            epsilon,
            report: outcome.report().clone(),
        });
    }
    Ok(rows)
}

/// `epsilon  id_top1  ood_mean_top1  <per-dataset top-1>` as TSV.
pub fn sweep_table(rows: &[SweepRow]) -> String {
    let Some(first) = rows.first() else {
        return String::new();
    };
    let mut out = format!("epsilon\t{}\n", first.report.tsv_header());
    for r in rows {
        out.push_str(&format!("{}\t{}\n", r.epsilon, r.report.tsv_values()));
    }
    out
}
