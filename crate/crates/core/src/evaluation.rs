//! Top-1 accuracy over ID and OOD test sets, seed aggregation, and report
//! emission.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::{LabeledDataset, ShiftTag};
use crate::error::{Error, Result};
use crate::model::{DualEncoderModel, Matrix};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetAccuracy {
    pub name: String,
    pub shift: ShiftTag,
    pub correct: usize,
    pub total: usize,
    pub top1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_dataset: Vec<DatasetAccuracy>,
    /// Mean top-1 over OOD-tagged sets; `None` when there are none.
    pub ood_mean: Option<f64>,
    pub seed: Option<u64>,
    pub checkpoint: Option<String>,
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(row: ndarray::ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// Number of rows of `logits` whose argmax equals the label.
pub fn count_correct(logits: &Matrix, labels: &[usize]) -> usize {
    logits
        .rows()
        .into_iter()
        .zip(labels)
        .filter(|(row, &y)| argmax(row.view()) == y)
        .count()
}

pub fn accuracy(model: &DualEncoderModel, dataset: &LabeledDataset) -> Result<f64> {
    check_label_space(model, dataset)?;
    if dataset.is_empty() {
        return Err(Error::Evaluation(format!("{} is empty", dataset.name)));
    }
    let logits = model.logits(&dataset.inputs)?;
    Ok(count_correct(&logits, &dataset.labels) as f64 / dataset.len() as f64)
}

fn check_label_space(model: &DualEncoderModel, dataset: &LabeledDataset) -> Result<()> {
    if dataset.num_classes() != model.num_classes() {
        return Err(Error::Evaluation(format!(
            "{} has {} classes, model has {}",
            dataset.name,
            dataset.num_classes(),
            model.num_classes()
        )));
    }
    Ok(())
}

/// Evaluates every dataset; all must share one label space.
pub fn evaluate(model: &DualEncoderModel, datasets: &[&LabeledDataset]) -> Result<EvalReport> {
    if let Some(first) = datasets.first() {
        if let Some(other) = datasets.iter().find(|d| d.class_names != first.class_names) {
            return Err(Error::Evaluation(format!(
                "{} and {} have different label spaces",
                first.name, other.name
            )));
        }
    }
    let mut per_dataset = Vec::with_capacity(datasets.len());
    for ds in datasets {
        check_label_space(model, ds)?;
        if ds.is_empty() {
            return Err(Error::Evaluation(format!("{} is empty", ds.name)));
        }
        let logits = model.logits(&ds.inputs)?;
        let correct = count_correct(&logits, &ds.labels);
        per_dataset.push(DatasetAccuracy {
            name: ds.name.clone(),
            shift: ds.shift.clone(),
            correct,
            total: ds.len(),
            top1: correct as f64 / ds.len() as f64,
        });
    }
    Ok(EvalReport::from_entries(per_dataset))
}

impl EvalReport {
    pub fn from_entries(per_dataset: Vec<DatasetAccuracy>) -> Self {
        let ood: Vec<f64> = per_dataset
            .iter()
            .filter(|d| d.shift.is_ood())
            .map(|d| d.top1)
            .collect();
        let ood_mean = (!ood.is_empty()).then(|| ood.iter().sum::<f64>() / ood.len() as f64);
        Self {
            per_dataset,
            ood_mean,
            seed: None,
            checkpoint: None,
        }
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.per_dataset.iter().find(|d| d.name == name).map(|d| d.top1)
    }

    /// Top-1 of the first ID-tagged set.
    pub fn id_top1(&self) -> Option<f64> {
        self.per_dataset.iter().find(|d| !d.shift.is_ood()).map(|d| d.top1)
    }

    pub fn tsv_header(&self) -> String {
        let mut h = String::from("id_top1\tood_mean_top1");
        for d in &self.per_dataset {
            h.push('\t');
            h.push_str(&d.name);
        }
        h
    }

    /// Values matching [`tsv_header`](Self::tsv_header).
    pub fn tsv_values(&self) -> String {
        let mut s = format!("{}\t{}", fmt_opt(self.id_top1()), fmt_opt(self.ood_mean));
        for d in &self.per_dataset {
            let _ = write!(s, "\t{}", d.top1);
        }
        s
    }

    /// Human-readable percentages.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<20} {:>8}", "dataset", "top-1 %");
        for d in &self.per_dataset {
            let _ = writeln!(out, "{:<20} {:>8.2}", d.name, 100.0 * d.top1);
        }
        if let Some(m) = self.ood_mean {
            let _ = writeln!(out, "{:<20} {:>8.2}", "ood mean", 100.0 * m);
        }
        out
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "nan".to_string(), |x| x.to_string())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub name: String,
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    /// Per-dataset rows, then an `ood_mean` row when OOD sets are present.
    pub rows: Vec<SummaryRow>,
    pub runs: usize,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Per-dataset sample mean and standard deviation (n−1 denominator, 0 for a
/// single run).
pub fn summarize_seeds(reports: &[EvalReport]) -> Result<SeedSummary> {
    let first = reports.first().ok_or_else(|| Error::Aggregation("no reports".into()))?;
    let keys: Vec<&str> = first.per_dataset.iter().map(|d| d.name.as_str()).collect();
    for (i, r) in reports.iter().enumerate() {
        let k: Vec<&str> = r.per_dataset.iter().map(|d| d.name.as_str()).collect();
        if k != keys {
            return Err(Error::Aggregation(format!(
                "report {i} has datasets {k:?}, expected {keys:?}"
            )));
        }
    }
    let mut rows = Vec::with_capacity(keys.len() + 1);
    for (j, name) in keys.iter().enumerate() {
        let vals: Vec<f64> = reports.iter().map(|r| r.per_dataset[j].top1).collect();
        let (mean, std) = mean_std(&vals);
        rows.push(SummaryRow {
            name: name.to_string(),
            mean,
            std,
        });
    }
    if first.ood_mean.is_some() {
        let vals: Vec<f64> = reports.iter().filter_map(|r| r.ood_mean).collect();
        let (mean, std) = mean_std(&vals);
        rows.push(SummaryRow {
            name: "ood_mean".into(),
            mean,
            std,
        });
    }
    Ok(SeedSummary {
        rows,
        runs: reports.len(),
    })
}

impl SeedSummary {
    pub fn get(&self, name: &str) -> Option<&SummaryRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from("dataset\tmean\tstd\n");
        for r in &self.rows {
            let _ = writeln!(out, "{}\t{}\t{}", r.name, r.mean, r.std);
        }
        out
    }

    pub fn to_table(&self) -> String {
        let mut out = format!("{:<20} {:>16}   ({} runs)\n", "dataset", "top-1 %", self.runs);
        for r in &self.rows {
            let _ = writeln!(out, "{:<20} {:>7.2} ± {:<6.2}", r.name, 100.0 * r.mean, 100.0 * r.std);
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScatterRow {
    pub method: String,
    pub params_trained: usize,
    pub id_acc: f64,
    pub ood_mean: f64,
}

/// One row per method: trainable-parameter count against ID and mean OOD
/// accuracy.
pub fn emit_scatter(entries: &[(String, usize, EvalReport)]) -> Vec<ScatterRow> {
    entries
        .iter()
        .map(|(method, params, report)| ScatterRow {
            method: method.clone(),
            params_trained: *params,
            id_acc: report.id_top1().unwrap_or(f64::NAN),
            ood_mean: report.ood_mean.unwrap_or(f64::NAN),
        })
        .collect()
}

pub fn scatter_tsv(rows: &[ScatterRow]) -> String {
    let mut out = String::from("method\tparams_trained\tid_acc\tood_mean\n");
    for r in rows {
        let _ = writeln!(out, "{}\t{}\t{}\t{}", r.method, r.params_trained, r.id_acc, r.ood_mean);
    }
    out
}

/// Methods as rows, datasets as columns, in percent.
pub fn comparison_table(entries: &[(String, EvalReport)]) -> String {
    let Some((_, first)) = entries.first() else {
        return String::new();
    };
    let mut out = format!("{:<14} {:>8} {:>8}", "method", "ID", "OOD avg");
    for d in first.per_dataset.iter().filter(|d| d.shift.is_ood()) {
        let _ = write!(out, " {:>14}", d.name);
    }
    out.push('\n');
    for (method, r) in entries {
        let _ = write!(
            out,
            "{:<14} {:>8.2} {:>8.2}",
            method,
            100.0 * r.id_top1().unwrap_or(f64::NAN),
            100.0 * r.ood_mean.unwrap_or(f64::NAN)
        );
        for d in r.per_dataset.iter().filter(|d| d.shift.is_ood()) {
            let _ = write!(out, " {:>14.2}", 100.0 * d.top1);
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Split;
    use crate::model::ModelConfig;
    use ndarray::array;

    fn entry(name: &str, ood: bool, top1: f64) -> DatasetAccuracy {
        DatasetAccuracy {
            name: name.into(),
            shift: if ood { ShiftTag::Ood(name.into()) } else { ShiftTag::Id },
            correct: 0,
            total: 0,
            top1,
        }
    }

    fn model_with_identity_head() -> DualEncoderModel {
        let mut m = DualEncoderModel::new(
            ModelConfig {
                input_dim: 3,
                width: 4,
                hidden: 4,
                visual_blocks: 1,
                text_blocks: 1,
                embed_dim: 3,
                num_classes: 3,
                vocab_size: 16,
            },
            0,
        )
        .unwrap();
        m.classifier = Matrix::eye(3);
        m
    }

    #[test]
    fn argmax_ties_to_lowest() {
        assert_eq!(argmax(array![1.0, 3.0, 3.0].view()), 1);
        assert_eq!(argmax(array![0.0, 0.0].view()), 0);
    }

    #[test]
    fn zero_classifier_predicts_class_zero() {
        let mut m = model_with_identity_head();
        m.classifier.fill(0.0);
        let ds = LabeledDataset::new(
            "t",
            Split::Test,
            ShiftTag::Id,
            vec!["a".into(), "b".into(), "c".into()],
            Matrix::ones((5, 3)),
            vec![0, 1, 0, 2, 0],
        )
        .unwrap();
        assert_eq!(accuracy(&m, &ds).unwrap(), 0.6);
    }

    #[test]
    fn label_space_mismatch() {
        let m = model_with_identity_head();
        let ds = LabeledDataset::new(
            "t",
            Split::Test,
            ShiftTag::Id,
            vec!["a".into(), "b".into()],
            Matrix::ones((1, 3)),
            vec![0],
        )
        .unwrap();
        assert!(matches!(evaluate(&m, &[&ds]), Err(Error::Evaluation(_))));
    }

    #[test]
    fn ood_mean_excludes_id() {
        let r = EvalReport::from_entries(vec![
            entry("id_test", false, 0.9),
            entry("a", true, 0.5),
            entry("b", true, 0.7),
        ]);
        assert!((r.ood_mean.unwrap() - 0.6).abs() < 1e-15);
        assert_eq!(r.id_top1(), Some(0.9));
    }

    #[test]
    fn seed_summary_conventions() {
        let r1 = EvalReport::from_entries(vec![entry("id_test", false, 0.5)]);
        let r2 = EvalReport::from_entries(vec![entry("id_test", false, 0.7)]);
        let s = summarize_seeds(&[r1.clone(), r2]).unwrap();
        let row = s.get("id_test").unwrap();
        assert!((row.mean - 0.6).abs() < 1e-15);
        assert!((row.std - 0.02f64.sqrt()).abs() < 1e-15);

        let s = summarize_seeds(&[r1.clone(), r1.clone(), r1.clone()]).unwrap();
        assert_eq!(s.get("id_test").unwrap().std, 0.0);
        let s = summarize_seeds(std::slice::from_ref(&r1)).unwrap();
        assert_eq!(s.get("id_test").unwrap().mean, 0.5);
        assert_eq!(s.get("id_test").unwrap().std, 0.0);

        let other = EvalReport::from_entries(vec![entry("x", false, 0.7)]);
        assert!(matches!(summarize_seeds(&[r1, other]), Err(Error::Aggregation(_))));
        assert!(summarize_seeds(&[]).is_err());
    }
}
