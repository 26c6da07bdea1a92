//! Training objectives over embedding features.
//!
//! Every loss returns its value together with gradients with respect to its
//! feature inputs and the classifier, so trainers can backpropagate into the
//! encoders. Reductions are arithmetic means over the batch.

use ndarray::{concatenate, s, Axis};
use serde::{Deserialize, Serialize};

use crate::adversarial::{perturb, PerturbationConfig};
use crate::error::{Error, Result};
use crate::model::{classify, Matrix};

/// Weights of the combined objective `CE + λ_AP·AP + λ_RA·RA` and the
/// contrastive temperature.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_ap: f64,
    pub lambda_ra: f64,
    pub tau: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_ap: 1.0,
            lambda_ra: 1.0,
            tau: 0.01,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::arg(format!("tau = {} must be positive", self.tau)));
        }
        for (name, v) in [("lambda_ap", self.lambda_ap), ("lambda_ra", self.lambda_ra)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::arg(format!("{name} = {v} must be >= 0")));
            }
        }
        Ok(())
    }
}

/// Labeled features, optionally paired with text features.
#[derive(Clone, Copy, Debug)]
pub struct Batch<'a> {
    pub features: &'a Matrix,
    pub labels: &'a [usize],
    pub text: Option<&'a Matrix>,
}

impl<'a> Batch<'a> {
    pub fn new(features: &'a Matrix, labels: &'a [usize]) -> Self {
        Self {
            features,
            labels,
            text: None,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// A scalar loss with its gradients.
#[derive(Clone, Debug)]
pub struct LossValue {
    pub value: f64,
    pub d_features: Matrix,
    pub d_classifier: Matrix,
}

fn check_labeled(features: &Matrix, labels: &[usize], classifier: &Matrix) -> Result<()> {
    if labels.is_empty() {
        return Err(Error::arg("empty batch"));
    }
    if features.nrows() != labels.len() {
        return Err(Error::shape(format!(
            "{} feature rows for {} labels",
            features.nrows(),
            labels.len()
        )));
    }
    let k = classifier.ncols();
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::arg(format!("label {bad} outside [0, {k})")));
    }
    Ok(())
}

/// Negative log-softmax of entry `y` and the softmax itself.
pub(crate) fn log_softmax_nll(logits: ndarray::ArrayView1<f64>, y: usize) -> (f64, Vec<f64>) {
    let max = logits.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let probs = exps.iter().map(|e| e / sum).collect();
    let ly = logits[y];
    let nll = if ly == max {
        // log(1 + sum_{j != y} exp(l_j - l_y)) stays accurate near zero.
        let rest: f64 = logits
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != y)
            .map(|(_, &l)| (l - ly).exp())
            .sum();
        rest.ln_1p()
    } else {
        sum.ln() + max - ly
    };
    (nll, probs)
}

/// Mean cross-entropy of `softmax(W^T x_i)` against `y_i`.
pub fn ce_loss(features: &Matrix, labels: &[usize], classifier: &Matrix) -> Result<LossValue> {
    check_labeled(features, labels, classifier)?;
    let logits = classify(features, classifier)?;
    let n = labels.len() as f64;
    let mut value = 0.0;
    let mut d_logits = Matrix::zeros(logits.dim());
    for (i, &y) in labels.iter().enumerate() {
        let (nll, probs) = log_softmax_nll(logits.row(i), y);
        value += nll;
        for (j, p) in probs.into_iter().enumerate() {
            d_logits[[i, j]] = (p - f64::from(u8::from(j == y))) / n;
        }
    }
    Ok(LossValue {
        value: value / n,
        d_features: d_logits.dot(&classifier.t()),
        d_classifier: features.t().dot(&d_logits),
    })
}

/// Cross-entropy over retrieved examples; identical to [`ce_loss`].
pub fn ra_loss(features: &Matrix, labels: &[usize], classifier: &Matrix) -> Result<LossValue> {
    if labels.is_empty() {
        return Err(Error::arg("empty retrieved set"));
    }
    ce_loss(features, labels, classifier)
}

/// Cross-entropy on PGD-perturbed features. The perturbation is a constant
/// with respect to the returned gradients, so `d_features` flows into the
/// clean features unchanged.
pub fn ap_loss(
    features: &Matrix,
    labels: &[usize],
    classifier: &Matrix,
    perturber: &PerturbationConfig,
) -> Result<LossValue> {
    check_labeled(features, labels, classifier)?;
    let adv = perturb(features, labels, classifier, perturber)?;
    ce_loss(&adv.perturbed, labels, classifier)
}

#[derive(Clone, Debug)]
pub struct ContrastiveValue {
    pub value: f64,
    pub d_image: Matrix,
    pub d_text: Matrix,
}

fn logsumexp<'a>(it: impl Iterator<Item = &'a f64> + Clone) -> f64 {
    let max = it.clone().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    max + it.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Bidirectional InfoNCE over matched pairs `(x_i, t_i)`:
/// `-1/|B| Σ_i [log softmax_j(x_i·t_j/τ)_i + log softmax_j(x_j·t_i/τ)_i]`.
pub fn contrastive_loss(image: &Matrix, text: &Matrix, tau: f64) -> Result<ContrastiveValue> {
    if image.nrows() != text.nrows() {
        return Err(Error::arg(format!(
            "{} image rows vs {} text rows",
            image.nrows(),
            text.nrows()
        )));
    }
    if image.nrows() == 0 {
        return Err(Error::arg("empty batch"));
    }
    if image.ncols() != text.ncols() {
        return Err(Error::shape(format!(
            "image dim {} vs text dim {}",
            image.ncols(),
            text.ncols()
        )));
    }
    if tau.is_nan() || tau <= 0.0 {
        return Err(Error::arg(format!("tau = {tau} must be positive")));
    }
    let n = image.nrows();
    let sim = image.dot(&text.t()) / tau;
    let mut value = 0.0;
    let mut d_sim = Matrix::zeros((n, n));
    for i in 0..n {
        let row = sim.row(i);
        let lse = logsumexp(row.iter());
        value -= sim[[i, i]] - lse;
        for j in 0..n {
            d_sim[[i, j]] += (sim[[i, j]] - lse).exp();
        }
        d_sim[[i, i]] -= 1.0;
    }
    for j in 0..n {
        let col = sim.column(j);
        let lse = logsumexp(col.iter());
        value -= sim[[j, j]] - lse;
        for i in 0..n {
            d_sim[[i, j]] += (sim[[i, j]] - lse).exp();
        }
        d_sim[[j, j]] -= 1.0;
    }
    let scale = 1.0 / (n as f64 * tau);
    d_sim *= scale;
    Ok(ContrastiveValue {
        value: value / n as f64,
        d_image: d_sim.dot(text),
        d_text: d_sim.t().dot(image),
    })
}

/// Value and gradients of `CE(id) + λ_AP·AP + λ_RA·RA(retrieved)`.
#[derive(Clone, Debug)]
pub struct CombinedLoss {
    pub value: f64,
    pub ce: f64,
    pub ap: Option<f64>,
    pub ra: Option<f64>,
    pub d_id: Matrix,
    pub d_retrieved: Option<Matrix>,
    pub d_classifier: Matrix,
}

/// Each term is a mean over its own batch. The AP term, when a perturber is
/// given, covers the ID and retrieved features together (one adversarial
/// counterpart per clean feature).
pub fn combined_loss(
    id: &Batch<'_>,
    retrieved: Option<&Batch<'_>>,
    classifier: &Matrix,
    weights: &LossWeights,
    perturber: Option<&PerturbationConfig>,
) -> Result<CombinedLoss> {
    weights.validate()?;
    let retrieved = retrieved.filter(|r| !r.is_empty());
    if weights.lambda_ra > 0.0 && retrieved.is_none() {
        return Err(Error::arg("lambda_ra > 0 requires a retrieved batch"));
    }
    if weights.lambda_ap > 0.0 && perturber.is_none() {
        return Err(Error::arg("lambda_ap > 0 requires a perturbation config"));
    }

    let ce = ce_loss(id.features, id.labels, classifier)?;
    let mut value = ce.value;
    let mut d_id = ce.d_features;
    let mut d_classifier = ce.d_classifier;

    let mut ra_value = None;
    let mut d_retrieved = None;
    if let Some(r) = retrieved {
        let ra = ra_loss(r.features, r.labels, classifier)?;
        value += weights.lambda_ra * ra.value;
        d_classifier.scaled_add(weights.lambda_ra, &ra.d_classifier);
        d_retrieved = Some(ra.d_features * weights.lambda_ra);
        ra_value = Some(ra.value);
    }

    let mut ap_value = None;
    if let Some(cfg) = perturber {
        let n_id = id.len();
        let (features, labels) = match retrieved {
            Some(r) => (
                concatenate(Axis(0), &[id.features.view(), r.features.view()])
                    .map_err(|e| Error::shape(e.to_string()))?,
                id.labels.iter().chain(r.labels).copied().collect::<Vec<_>>(),
            ),
            None => (id.features.clone(), id.labels.to_vec()),
        };
        let ap = ap_loss(&features, &labels, classifier, cfg)?;
        value += weights.lambda_ap * ap.value;
        d_classifier.scaled_add(weights.lambda_ap, &ap.d_classifier);
        d_id.scaled_add(weights.lambda_ap, &ap.d_features.slice(s![..n_id, ..]));
        if let Some(d) = d_retrieved.as_mut() {
            d.scaled_add(weights.lambda_ap, &ap.d_features.slice(s![n_id.., ..]));
        }
        ap_value = Some(ap.value);
    }

    Ok(CombinedLoss {
        value,
        ce: ce.value,
        ap: ap_value,
        ra: ra_value,
        d_id,
        d_retrieved,
        d_classifier,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn single_class_ce_is_zero() {
        let x = array![[0.3, -0.2], [1.0, 0.5]];
        let w = array![[2.0], [-1.0]];
        let l = ce_loss(&x, &[0, 0], &w).unwrap();
        assert_eq!(l.value, 0.0);
    }

    #[test]
    fn uniform_logits_give_ln_k() {
        let x = array![[1.0, 0.0, 0.0]];
        let w = Matrix::zeros((3, 5));
        let l = ce_loss(&x, &[3], &w).unwrap();
        assert!((l.value - 5f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn ce_matches_explicit_softmax() {
        let x = array![[1.0, -0.5], [0.25, 2.0]];
        let w = array![[0.5, -1.0, 0.2], [0.3, 0.8, -0.4]];
        let labels = [2, 1];
        let mut expected = 0.0;
        for i in 0..2 {
            let logits: Vec<f64> = (0..3).map(|j| x[[i, 0]] * w[[0, j]] + x[[i, 1]] * w[[1, j]]).collect();
            let denom: f64 = logits.iter().map(|l| l.exp()).sum();
            expected -= (logits[labels[i]].exp() / denom).ln();
        }
        expected /= 2.0;
        let l = ce_loss(&x, &labels, &w).unwrap();
        assert!((l.value - expected).abs() < 1e-12);
    }

    #[test]
    fn ce_rejects_bad_batches() {
        let w = Matrix::zeros((2, 2));
        assert!(ce_loss(&Matrix::zeros((0, 2)), &[], &w).is_err());
        assert!(ce_loss(&Matrix::zeros((1, 2)), &[2], &w).is_err());
        assert!(ce_loss(&Matrix::zeros((2, 2)), &[0], &w).is_err());
    }

    #[test]
    fn contrastive_single_pair_is_zero() {
        let x = array![[0.6, 0.8]];
        let t = array![[0.0, 1.0]];
        assert_eq!(contrastive_loss(&x, &t, 0.01).unwrap().value, 0.0);
    }

    #[test]
    fn contrastive_orthogonal_pairs_by_hand() {
        // Sim matrix at tau = 1 is the identity: each direction is a 2-way
        // softmax with logits (1, 0).
        let x = array![[1.0, 0.0], [0.0, 1.0]];
        let t = x.clone();
        let one_term = -(1f64.exp() / (1f64.exp() + 1.0)).ln();
        let expected = (4.0 * one_term) / 2.0;
        let l = contrastive_loss(&x, &t, 1.0).unwrap();
        assert!((l.value - expected).abs() < 1e-14);
    }

    #[test]
    fn contrastive_is_role_symmetric() {
        let x = array![[0.6, 0.8], [1.0, 0.0], [0.0, -1.0]];
        let t = array![[0.8, 0.6], [0.0, 1.0], [-0.6, -0.8]];
        let a = contrastive_loss(&x, &t, 0.1).unwrap().value;
        let b = contrastive_loss(&t, &x, 0.1).unwrap().value;
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn contrastive_length_mismatch() {
        let x = Matrix::zeros((2, 2));
        let t = Matrix::zeros((3, 2));
        assert!(matches!(contrastive_loss(&x, &t, 0.01), Err(Error::Argument(_))));
    }

    #[test]
    fn ra_on_id_batch_equals_ce() {
        let x = array![[1.0, -0.5], [0.25, 2.0]];
        let w = array![[0.5, -1.0], [0.3, 0.8]];
        let a = ce_loss(&x, &[1, 0], &w).unwrap().value;
        let b = ra_loss(&x, &[1, 0], &w).unwrap().value;
        assert_eq!(a, b);
        assert!(ra_loss(&Matrix::zeros((0, 2)), &[], &w).is_err());
    }

    #[test]
    fn ap_with_degenerate_perturber_equals_ce() {
        let x = array![[1.0, -0.5], [0.25, 2.0]];
        let w = array![[0.5, -1.0], [0.3, 0.8]];
        let ce = ce_loss(&x, &[1, 0], &w).unwrap().value;
        let zero_eps = PerturbationConfig::new(10, 0.0);
        let zero_steps = PerturbationConfig::new(0, 0.01);
        assert_eq!(ap_loss(&x, &[1, 0], &w, &zero_eps).unwrap().value, ce);
        assert_eq!(ap_loss(&x, &[1, 0], &w, &zero_steps).unwrap().value, ce);
    }

    #[test]
    fn combined_requires_retrieved_when_weighted() {
        let x = array![[1.0, 0.0]];
        let w = Matrix::eye(2);
        let b = Batch::new(&x, &[0]);
        let weights = LossWeights {
            lambda_ap: 0.0,
            lambda_ra: 1.0,
            tau: 0.01,
        };
        assert!(combined_loss(&b, None, &w, &weights, None).is_err());
    }

    #[test]
    fn combined_with_zero_weights_is_ce() {
        let x = array![[1.0, -0.5], [0.25, 2.0]];
        let r = array![[0.1, 0.9]];
        let w = array![[0.5, -1.0], [0.3, 0.8]];
        let weights = LossWeights {
            lambda_ap: 0.0,
            lambda_ra: 0.0,
            tau: 0.01,
        };
        let id = Batch::new(&x, &[1, 0]);
        let ret = Batch::new(&r, &[1]);
        let cfg = PerturbationConfig::new(10, 0.01);
        let c = combined_loss(&id, Some(&ret), &w, &weights, Some(&cfg)).unwrap();
        let ce = ce_loss(&x, &[1, 0], &w).unwrap().value;
        assert!((c.value - ce).abs() <= 1e-12);
    }
}
