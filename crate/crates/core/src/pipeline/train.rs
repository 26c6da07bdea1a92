use ndarray::{concatenate, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{LossMode, StageConfig};
use super::optim::{make_optimizer, AdamWConfig, LrSchedule};
use crate::adversarial::perturb_with_rng;
use crate::checkpoint::Checkpoint;
use crate::data::{LabeledDataset, PayloadStore};
use crate::error::{Error, Result};
use crate::evaluation::accuracy;
use crate::losses::{ce_loss, contrastive_loss};
use crate::model::{build_freeze_plan, render_template, DualEncoderModel, FreezePlan, Matrix, VisualCache};
use crate::retrieval::RetrievedDataset;

/// Training rows with a per-row provenance flag.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSet {
    pub inputs: Matrix,
    pub labels: Vec<usize>,
    pub retrieved: Vec<bool>,
}

impl TrainSet {
    pub fn from_dataset(ds: &LabeledDataset) -> Self {
        Self {
            inputs: ds.inputs.clone(),
            labels: ds.labels.clone(),
            retrieved: vec![false; ds.len()],
        }
    }

    /// Resolves retrieved entries to their payloads.
    pub fn materialize(retrieved: &RetrievedDataset, payloads: &PayloadStore) -> Result<Self> {
        let refs: Vec<&str> = retrieved
            .entries
            .iter()
            .map(|e| e.record.payload_ref.as_str())
            .collect();
        Ok(Self {
            inputs: payloads.gather(&refs)?,
            labels: retrieved.entries.iter().map(|e| e.label).collect(),
            retrieved: vec![true; refs.len()],
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn concat(&self, other: &Self) -> Result<Self> {
        let inputs = concatenate(Axis(0), &[self.inputs.view(), other.inputs.view()])
            .map_err(|e| Error::shape(e.to_string()))?;
        Ok(Self {
            inputs,
            labels: self.labels.iter().chain(&other.labels).copied().collect(),
            retrieved: self.retrieved.iter().chain(&other.retrieved).copied().collect(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub id_val_top1: f64,
    /// Retrieved rows drawn into batches during this epoch.
    pub retrieved_seen: usize,
}

#[derive(Clone, Debug)]
pub struct StageOutcome {
    pub best: Checkpoint,
    pub last: DualEncoderModel,
    pub history: Vec<EpochRecord>,
    pub plan: FreezePlan,
}

/// Epoch of the highest `id_val_top1`, earliest on ties.
pub fn select_checkpoint(history: &[EpochRecord]) -> Option<usize> {
    let mut best: Option<&EpochRecord> = None;
    for r in history {
        if best.is_none_or(|b| r.id_val_top1 > b.id_val_top1) {
            best = Some(r);
        }
    }
    best.map(|r| r.epoch)
}

pub fn train_stage(
    init: &DualEncoderModel,
    train: &LabeledDataset,
    val: &LabeledDataset,
    retrieved: Option<&TrainSet>,
    config: &StageConfig,
) -> Result<StageOutcome> {
    train_stage_observed(init, train, val, retrieved, config, &mut |_, _| {})
}

/// Like [`train_stage`], calling `observer(step, model)` after every
/// optimizer step.
pub fn train_stage_observed(
    init: &DualEncoderModel,
    train: &LabeledDataset,
    val: &LabeledDataset,
    retrieved: Option<&TrainSet>,
    config: &StageConfig,
    observer: &mut dyn FnMut(usize, &DualEncoderModel),
) -> Result<StageOutcome> {
    config.validate()?;
    if train.num_classes() != init.num_classes() {
        return Err(Error::Config(format!(
            "task has {} classes, classifier has {}",
            train.num_classes(),
            init.num_classes()
        )));
    }
    let text_k = match config.loss {
        LossMode::CrossEntropy => 0,
        LossMode::Contrastive => config.top_k_text,
    };
    let plan = build_freeze_plan(
        init,
        config.top_k_visual,
        text_k,
        config.lr_backbone,
        config.lr_classifier,
    )?;

    let id_set = TrainSet::from_dataset(train);
    let data = if config.use_ra {
        let r = retrieved
            .ok_or_else(|| Error::Config(format!("stage {} uses RA but got no retrieved set", config.name)))?;
        if let Some(&bad) = r.labels.iter().find(|&&y| y >= init.num_classes()) {
            return Err(Error::Config(format!("retrieved label {bad} outside the label space")));
        }
        id_set.concat(r)?
    } else {
        id_set
    };
    if data.is_empty() {
        return Err(Error::arg("empty training set"));
    }

    let steps_per_epoch = data.len().div_ceil(config.batch_size);
    let schedule = LrSchedule {
        warmup_iters: config.warmup_iters,
        warmup_lr: config.warmup_lr,
        total_steps: steps_per_epoch * config.epochs,
    };
    let adam = AdamWConfig {
        weight_decay: config.weight_decay,
        ..AdamWConfig::default()
    };
    let mut model = init.clone();
    let mut optimizer = make_optimizer(&model, &plan, adam, schedule)?;
    let mut grads = model.zeros_like();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let prompts = train
        .class_names
        .iter()
        .map(|c| render_template(&config.prompt_template, c))
        .collect::<Result<Vec<_>>>()?;

    let config_hash = config.config_hash();
    let mut history = Vec::with_capacity(config.epochs);
    let mut best: Option<Checkpoint> = None;
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut seen = 0;
        for (b, idx) in order.chunks(config.batch_size).enumerate() {
            let x = data.inputs.select(Axis(0), idx);
            let labels: Vec<usize> = idx.iter().map(|&i| data.labels[i]).collect();
            let flags: Vec<bool> = idx.iter().map(|&i| data.retrieved[i]).collect();
            seen += flags.iter().filter(|&&f| f).count();
            for g in grads.tensors_mut() {
                g.fill(0.0);
            }
            let loss = match config.loss {
                LossMode::CrossEntropy => ce_step(&model, &mut grads, &plan, &x, &labels, &flags, config, &mut rng)?,
                LossMode::Contrastive => {
                    contrastive_step(&model, &mut grads, &plan, &x, &prompts, &labels, config.weights.tau)?
                }
            };
            let step = (epoch - 1) * steps_per_epoch + b;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, step, loss });
            }
            loss_sum += loss * idx.len() as f64;
            optimizer.step(&mut model, &grads);
            observer(step, &model);
        }
        if config.loss == LossMode::Contrastive {
            model.classifier = model.text_classifier(&train.class_names, &[&config.prompt_template])?;
        }
        let id_val_top1 = accuracy(&model, val)?;
        history.push(EpochRecord {
            epoch,
            train_loss: loss_sum / data.len() as f64,
            id_val_top1,
            retrieved_seen: seen,
        });
        if best.as_ref().is_none_or(|c| id_val_top1 > c.id_val_top1) {
            best = Some(Checkpoint {
                model: model.clone(),
                stage: config.name.clone(),
                epoch,
                id_val_top1,
                config_hash: config_hash.clone(),
                freeze_plan: Some(plan.clone()),
            });
        }
    }
    let best = best.expect("epochs >= 1");
    debug_assert_eq!(select_checkpoint(&history), Some(best.epoch));
    Ok(StageOutcome {
        best,
        last: model,
        history,
        plan,
    })
}

/// Encodes `x`, keeping a cache only when some visual block trains.
fn encode(model: &DualEncoderModel, plan: &FreezePlan, x: &Matrix) -> Result<(Matrix, Option<VisualCache>)> {
    if plan.lowest_visual().is_some() {
        let (z, cache) = model.visual.forward_cached(x)?;
        Ok((z, Some(cache)))
    } else {
        Ok((model.visual.forward(x)?, None))
    }
}

#[allow(clippy::too_many_arguments)]
fn ce_step(
    model: &DualEncoderModel,
    grads: &mut DualEncoderModel,
    plan: &FreezePlan,
    x: &Matrix,
    labels: &[usize],
    retrieved: &[bool],
    config: &StageConfig,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let (z, cache) = encode(model, plan, x)?;
    let w = &model.classifier;
    let mut value = 0.0;
    let mut dz = Matrix::zeros(z.dim());
    let lambda_ra = config.weights.lambda_ra;
    if config.use_ra && lambda_ra != 1.0 {
        // Separate means over the ID and retrieved parts of the batch.
        for (want, weight) in [(false, 1.0), (true, lambda_ra)] {
            let rows: Vec<usize> = (0..labels.len()).filter(|&i| retrieved[i] == want).collect();
            if rows.is_empty() || weight == 0.0 {
                continue;
            }
            let part_labels: Vec<usize> = rows.iter().map(|&i| labels[i]).collect();
            let l = ce_loss(&z.select(Axis(0), &rows), &part_labels, w)?;
            value += weight * l.value;
            grads.classifier.scaled_add(weight, &l.d_classifier);
            for (r, &i) in rows.iter().enumerate() {
                dz.row_mut(i).scaled_add(weight, &l.d_features.row(r));
            }
        }
    } else {
        let l = ce_loss(&z, labels, w)?;
        value += l.value;
        grads.classifier += &l.d_classifier;
        dz += &l.d_features;
    }
    if config.use_ap {
        let lambda = config.weights.lambda_ap;
        let adv = perturb_with_rng(&z, labels, w, &config.perturbation, rng)?;
        let l = ce_loss(&adv.perturbed, labels, w)?;
        value += lambda * l.value;
        grads.classifier.scaled_add(lambda, &l.d_classifier);
        dz.scaled_add(lambda, &l.d_features);
    }
    if let (Some(cache), Some(lowest)) = (cache, plan.lowest_visual()) {
        model.visual.backward(&cache, &dz, lowest, &mut grads.visual);
    }
    Ok(value)
}

/// Contrastive step pairing each image with `prompts[targets[i]]`.
fn contrastive_step<S: AsRef<str>>(
    model: &DualEncoderModel,
    grads: &mut DualEncoderModel,
    plan: &FreezePlan,
    x: &Matrix,
    prompts: &[S],
    targets: &[usize],
    tau: f64,
) -> Result<f64> {
    let (z, vcache) = encode(model, plan, x)?;
    let (t_all, tcache) = if plan.lowest_text().is_some() {
        let (t, c) = model.text.forward_cached(prompts)?;
        (t, Some(c))
    } else {
        (model.text.forward(prompts)?, None)
    };
    let t = t_all.select(Axis(0), targets);
    let cl = contrastive_loss(&z, &t, tau)?;
    if let (Some(cache), Some(lowest)) = (vcache, plan.lowest_visual()) {
        model.visual.backward(&cache, &cl.d_image, lowest, &mut grads.visual);
    }
    if let (Some(cache), Some(lowest)) = (tcache, plan.lowest_text()) {
        let mut d_all = Matrix::zeros(t_all.dim());
        for (row, &k) in cl.d_text.rows().into_iter().zip(targets) {
            d_all.row_mut(k).scaled_add(1.0, &row);
        }
        model.text.backward(&cache, &d_all, lowest, &mut grads.text);
    }
    Ok(cl.value)
}

/// Contrastive pretraining of every block of both towers on image/caption
/// pairs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_iters: usize,
    pub tau: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_size: 128,
            lr: 1e-3,
            weight_decay: 0.1,
            warmup_iters: 50,
            tau: 0.07,
            seed: 0,
        }
    }
}

/// Returns the mean loss of each epoch.
pub fn pretrain_contrastive<S: AsRef<str>>(
    model: &mut DualEncoderModel,
    images: &Matrix,
    captions: &[S],
    config: &PretrainConfig,
) -> Result<Vec<f64>> {
    if images.nrows() != captions.len() || captions.is_empty() {
        return Err(Error::arg("need one caption per image and at least one pair"));
    }
    if config.epochs == 0 || config.batch_size < 2 {
        return Err(Error::Config(
            "pretraining needs epochs >= 1 and batch_size >= 2".into(),
        ));
    }
    let plan = build_freeze_plan(model, model.visual_depth(), model.text_depth(), config.lr, 0.0)?;
    let steps_per_epoch = captions.len().div_ceil(config.batch_size);
    let schedule = LrSchedule {
        warmup_iters: config.warmup_iters,
        warmup_lr: 0.0,
        total_steps: steps_per_epoch * config.epochs,
    };
    let adam = AdamWConfig {
        weight_decay: config.weight_decay,
        ..AdamWConfig::default()
    };
    let mut optimizer = make_optimizer(model, &plan, adam, schedule)?;
    let mut grads = model.zeros_like();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..captions.len()).collect();
    let mut losses = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for (b, idx) in order.chunks(config.batch_size).enumerate() {
            let x = images.select(Axis(0), idx);
            let texts: Vec<&str> = idx.iter().map(|&i| captions[i].as_ref()).collect();
            let targets: Vec<usize> = (0..idx.len()).collect();
            for g in grads.tensors_mut() {
                g.fill(0.0);
            }
            let loss = contrastive_step(model, &mut grads, &plan, &x, &texts, &targets, config.tau)?;
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    step: (epoch - 1) * steps_per_epoch + b,
                    loss,
                });
            }
            sum += loss * idx.len() as f64;
            optimizer.step(model, &grads);
        }
        losses.push(sum / captions.len() as f64);
    }
    Ok(losses)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(epoch: usize, acc: f64) -> EpochRecord {
        EpochRecord {
            epoch,
            train_loss: 0.0,
            id_val_top1: acc,
            retrieved_seen: 0,
        }
    }

    #[test]
    fn selection_prefers_earliest_maximum() {
        let h = [rec(1, 0.5), rec(2, 0.7), rec(3, 0.7), rec(4, 0.6)];
        assert_eq!(select_checkpoint(&h), Some(2));
        assert_eq!(select_checkpoint(&[]), None);
        assert_eq!(select_checkpoint(&[rec(1, 0.0)]), Some(1));
    }
}
