use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{DualEncoderModel, ParamGroup};
use crate::error::{Error, Result};

/// Which parameter groups train, and at what base learning rate.
///
/// Groups absent from `trainable_groups` are never touched by the optimizer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FreezePlan {
    pub trainable_groups: BTreeSet<ParamGroup>,
    pub group_learning_rates: BTreeMap<ParamGroup, f64>,
}

/// Top-k freezing: the classifier plus the `top_k_visual` (and
/// `top_k_text`) blocks closest to each head are trainable.
///
/// `top_k_visual = 0` with no text tuning is linear probing; `top_k_visual`
/// equal to the visual depth is full finetuning.
pub fn build_freeze_plan(
    model: &DualEncoderModel,
    top_k_visual: usize,
    top_k_text: usize,
    lr_backbone: f64,
    lr_classifier: f64,
) -> Result<FreezePlan> {
    let vd = model.visual_depth();
    let td = model.text_depth();
    if top_k_visual > vd {
        return Err(Error::arg(format!(
            "top_k_visual = {top_k_visual} exceeds {vd} visual blocks"
        )));
    }
    if top_k_text > td {
        return Err(Error::arg(format!(
            "top_k_text = {top_k_text} exceeds {td} text blocks"
        )));
    }
    for (name, lr) in [("lr_backbone", lr_backbone), ("lr_classifier", lr_classifier)] {
        if !lr.is_finite() || lr < 0.0 {
            return Err(Error::arg(format!("{name} = {lr} must be finite and >= 0")));
        }
    }
    let mut plan = FreezePlan {
        trainable_groups: BTreeSet::new(),
        group_learning_rates: BTreeMap::new(),
    };
    plan.insert(ParamGroup::Classifier, lr_classifier);
    for b in vd - top_k_visual..vd {
        plan.insert(ParamGroup::Visual(b), lr_backbone);
    }
    for b in td - top_k_text..td {
        plan.insert(ParamGroup::Text(b), lr_backbone);
    }
    Ok(plan)
}

impl FreezePlan {
    fn insert(&mut self, group: ParamGroup, lr: f64) {
        self.trainable_groups.insert(group);
        self.group_learning_rates.insert(group, lr);
    }

    pub fn is_trainable(&self, group: ParamGroup) -> bool {
        self.trainable_groups.contains(&group)
    }

    pub fn learning_rate(&self, group: ParamGroup) -> Option<f64> {
        self.group_learning_rates.get(&group).copied()
    }

    /// Lowest trainable visual block, if any visual block trains.
    pub fn lowest_visual(&self) -> Option<usize> {
        self.trainable_groups.iter().find_map(|g| match g {
            ParamGroup::Visual(i) => Some(*i),
            _ => None,
        })
    }

    pub fn lowest_text(&self) -> Option<usize> {
        self.trainable_groups.iter().find_map(|g| match g {
            ParamGroup::Text(i) => Some(*i),
            _ => None,
        })
    }

    /// Number of scalar parameters the plan leaves trainable.
    pub fn trainable_param_count(&self, model: &DualEncoderModel) -> usize {
        model
            .param_info()
            .iter()
            .filter(|p| self.is_trainable(p.group))
            .map(|p| p.shape.0 * p.shape.1)
            .sum()
    }

    /// Checks that the plan only names groups the model has, and that every
    /// trainable group has a learning rate.
    pub fn validate(&self, model: &DualEncoderModel) -> Result<()> {
        let groups: BTreeSet<_> = model.groups().into_iter().collect();
        for g in &self.trainable_groups {
            if !groups.contains(g) {
                return Err(Error::Config(format!("freeze plan names unknown group {g}")));
            }
            match self.learning_rate(*g) {
                Some(lr) if lr.is_finite() && lr >= 0.0 => {}
                Some(lr) => return Err(Error::Config(format!("group {g} has bad lr {lr}"))),
                None => return Err(Error::Config(format!("group {g} has no learning rate"))),
            }
        }
        Ok(())
    }
}
