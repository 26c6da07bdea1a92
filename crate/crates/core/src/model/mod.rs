//! Block-structured dual encoder with a linear classifier head.

mod encoder;
mod freeze;
pub mod layers;

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use encoder::{token_bucket, tokenize, TextCache, TextEncoder, VisualCache, VisualEncoder};
pub use freeze::{build_freeze_plan, FreezePlan};
pub use layers::{l2_normalize_rows, Matrix};

use crate::error::{Error, Result};

/// CLIP-style prompt templates; `{}` is the class-name slot.
pub const DEFAULT_TEMPLATES: &[&str] = &[
    "a photo of a {}.",
    "a bad photo of a {}.",
    "a photo of the large {}.",
    "a photo of the small {}.",
    "a sketch of a {}.",
    "a rendering of a {}.",
    "a blurry photo of a {}.",
    "a close-up photo of a {}.",
    "art of the {}.",
    "a drawing of a {}.",
];

/// Renders a template with its `{}` slot replaced by `class_name`.
pub fn render_template(template: &str, class_name: &str) -> Result<String> {
    if !template.contains("{}") {
        return Err(Error::Format {
            template: template.to_string(),
        });
    }
    Ok(template.replacen("{}", class_name, 1))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub width: usize,
    pub hidden: usize,
    pub visual_blocks: usize,
    pub text_blocks: usize,
    pub embed_dim: usize,
    pub num_classes: usize,
    pub vocab_size: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_dim: 32,
            width: 64,
            hidden: 128,
            visual_blocks: 6,
            text_blocks: 6,
            embed_dim: 64,
            num_classes: 10,
            vocab_size: 4096,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("input_dim", self.input_dim),
            ("width", self.width),
            ("hidden", self.hidden),
            ("visual_blocks", self.visual_blocks),
            ("text_blocks", self.text_blocks),
            ("embed_dim", self.embed_dim),
            ("num_classes", self.num_classes),
            ("vocab_size", self.vocab_size),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Config(format!("model {name} must be positive")));
            }
        }
        Ok(())
    }
}

/// A freezing unit. Stems belong to block 0 of their tower, heads to the
/// topmost block; the classifier is always its own group.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ParamGroup {
    Visual(usize),
    Text(usize),
    Classifier,
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParamGroup::Visual(i) => write!(f, "visual.{i}"),
            ParamGroup::Text(i) => write!(f, "text.{i}"),
            ParamGroup::Classifier => f.write_str("classifier"),
        }
    }
}

impl FromStr for ParamGroup {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "classifier" {
            return Ok(ParamGroup::Classifier);
        }
        let parse = |idx: &str| {
            idx.parse::<usize>()
                .map_err(|_| Error::arg(format!("bad parameter group {s:?}")))
        };
        match s.split_once('.') {
            Some(("visual", idx)) => Ok(ParamGroup::Visual(parse(idx)?)),
            Some(("text", idx)) => Ok(ParamGroup::Text(parse(idx)?)),
            _ => Err(Error::arg(format!("bad parameter group {s:?}"))),
        }
    }
}

impl Serialize for ParamGroup {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ParamGroup {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Name and group of one parameter tensor, in canonical order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamInfo {
    pub name: String,
    pub group: ParamGroup,
    pub shape: (usize, usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DualEncoderModel {
    pub config: ModelConfig,
    pub visual: VisualEncoder,
    pub text: TextEncoder,
    /// `embed_dim × num_classes`; column `k` is the weight vector of class `k`.
    pub classifier: Matrix,
}

impl DualEncoderModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let visual = VisualEncoder::new(
            &mut rng,
            config.input_dim,
            config.width,
            config.hidden,
            config.visual_blocks,
            config.embed_dim,
        );
        let text = TextEncoder::new(
            &mut rng,
            config.vocab_size,
            config.width,
            config.hidden,
            config.text_blocks,
            config.embed_dim,
        );
        let classifier = layers::randn(
            &mut rng,
            config.embed_dim,
            config.num_classes,
            1.0 / (config.embed_dim as f64).sqrt(),
        );
        Ok(Self {
            config,
            visual,
            text,
            classifier,
        })
    }

    /// Same architecture, every parameter zero. Used as a gradient buffer.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.tensors_mut().into_iter().for_each(|t| t.fill(0.0));
        z
    }

    pub fn embed_dim(&self) -> usize {
        self.config.embed_dim
    }

    pub fn num_classes(&self) -> usize {
        self.classifier.ncols()
    }

    pub fn visual_depth(&self) -> usize {
        self.visual.blocks.len()
    }

    pub fn text_depth(&self) -> usize {
        self.text.blocks.len()
    }

    /// Every group in the model, in canonical order.
    pub fn groups(&self) -> Vec<ParamGroup> {
        (0..self.visual_depth())
            .map(ParamGroup::Visual)
            .chain((0..self.text_depth()).map(ParamGroup::Text))
            .chain(std::iter::once(ParamGroup::Classifier))
            .collect()
    }

    pub fn param_info(&self) -> Vec<ParamInfo> {
        let mut out = Vec::new();
        let top_v = self.visual_depth() - 1;
        let top_t = self.text_depth() - 1;
        let mut push = |name: String, group, t: &Matrix| {
            out.push(ParamInfo {
                name,
                group,
                shape: t.dim(),
            })
        };
        push(
            "visual.stem.weight".into(),
            ParamGroup::Visual(0),
            &self.visual.stem.weight,
        );
        push("visual.stem.bias".into(), ParamGroup::Visual(0), &self.visual.stem.bias);
        for (i, block) in self.visual.blocks.iter().enumerate() {
            for (n, t) in layers::Block::NAMES.iter().zip(block.tensors()) {
                push(format!("visual.blocks.{i}.{n}"), ParamGroup::Visual(i), t);
            }
        }
        for (n, t) in layers::Head::NAMES.iter().zip(self.visual.head.tensors()) {
            push(format!("visual.head.{n}"), ParamGroup::Visual(top_v), t);
        }
        push("text.embedding".into(), ParamGroup::Text(0), &self.text.embedding);
        for (i, block) in self.text.blocks.iter().enumerate() {
            for (n, t) in layers::Block::NAMES.iter().zip(block.tensors()) {
                push(format!("text.blocks.{i}.{n}"), ParamGroup::Text(i), t);
            }
        }
        for (n, t) in layers::Head::NAMES.iter().zip(self.text.head.tensors()) {
            push(format!("text.head.{n}"), ParamGroup::Text(top_t), t);
        }
        push("classifier".into(), ParamGroup::Classifier, &self.classifier);
        out
    }

    /// Parameter tensors in the same order as [`param_info`](Self::param_info).
    pub fn tensors(&self) -> Vec<&Matrix> {
        let mut out = vec![&self.visual.stem.weight, &self.visual.stem.bias];
        for block in &self.visual.blocks {
            out.extend(block.tensors());
        }
        out.extend(self.visual.head.tensors());
        out.push(&self.text.embedding);
        for block in &self.text.blocks {
            out.extend(block.tensors());
        }
        out.extend(self.text.head.tensors());
        out.push(&self.classifier);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = vec![&mut self.visual.stem.weight, &mut self.visual.stem.bias];
        for block in &mut self.visual.blocks {
            out.extend(block.tensors_mut());
        }
        out.extend(self.visual.head.tensors_mut());
        out.push(&mut self.text.embedding);
        for block in &mut self.text.blocks {
            out.extend(block.tensors_mut());
        }
        out.extend(self.text.head.tensors_mut());
        out.push(&mut self.classifier);
        out
    }

    pub fn param_count(&self, group: ParamGroup) -> usize {
        self.param_info()
            .iter()
            .filter(|p| p.group == group)
            .map(|p| p.shape.0 * p.shape.1)
            .sum()
    }

    /// `f(I)`: unit-norm image embeddings, one row per input row.
    pub fn encode_image(&self, batch: &Matrix) -> Result<Matrix> {
        self.visual.forward(batch)
    }

    /// `g(T)`: unit-norm text embeddings, one row per prompt.
    pub fn encode_text<S: AsRef<str>>(&self, prompts: &[S]) -> Result<Matrix> {
        self.text.forward(prompts)
    }

    /// Zero-shot classifier: column `k` is the normalized mean over templates
    /// of the text embedding of `template(class_k)`.
    pub fn text_classifier<S: AsRef<str>, T: AsRef<str>>(&self, class_names: &[S], templates: &[T]) -> Result<Matrix> {
        if templates.is_empty() {
            return Err(Error::arg("at least one prompt template is required"));
        }
        if class_names.is_empty() {
            return Err(Error::arg("no class names"));
        }
        let mut w = Matrix::zeros((self.embed_dim(), class_names.len()));
        for (k, name) in class_names.iter().enumerate() {
            let prompts = templates
                .iter()
                .map(|t| render_template(t.as_ref(), name.as_ref()))
                .collect::<Result<Vec<_>>>()?;
            let emb = self.encode_text(&prompts)?;
            let mut mean = emb
                .mean_axis(ndarray::Axis(0))
                .expect("non-empty")
                .insert_axis(ndarray::Axis(0));
            l2_normalize_rows(&mut mean);
            w.column_mut(k).assign(&mean.row(0));
        }
        Ok(w)
    }

    /// Replaces the classifier with [`text_classifier`](Self::text_classifier).
    pub fn init_classifier_from_text<S: AsRef<str>, T: AsRef<str>>(
        &mut self,
        class_names: &[S],
        templates: &[T],
    ) -> Result<()> {
        if class_names.len() != self.num_classes() {
            return Err(Error::shape(format!(
                "{} class names for a {}-way classifier",
                class_names.len(),
                self.num_classes()
            )));
        }
        self.classifier = self.text_classifier(class_names, templates)?;
        Ok(())
    }

    /// Logits for raw inputs.
    pub fn logits(&self, batch: &Matrix) -> Result<Matrix> {
        classify(&self.encode_image(batch)?, &self.classifier)
    }

    fn check_same_architecture(&self, other: &Self) -> Result<()> {
        if self.config != other.config {
            return Err(Error::Structure(format!(
                "model configs differ: {:?} vs {:?}",
                self.config, other.config
            )));
        }
        for (a, b) in self.param_info().iter().zip(other.param_info()) {
            if a.shape != b.shape {
                return Err(Error::Structure(format!(
                    "{} has shape {:?} vs {:?}",
                    a.name, a.shape, b.shape
                )));
            }
        }
        Ok(())
    }
}

/// `logits[i][j] = w_j^T x_i`.
pub fn classify(features: &Matrix, classifier: &Matrix) -> Result<Matrix> {
    if features.ncols() != classifier.nrows() {
        return Err(Error::shape(format!(
            "features have dim {}, classifier expects {}",
            features.ncols(),
            classifier.nrows()
        )));
    }
    Ok(features.dot(classifier))
}

/// Weight-space interpolation `alpha * finetuned + (1 - alpha) * pretrained`.
pub fn wise_ft_interpolate(
    finetuned: &DualEncoderModel,
    pretrained: &DualEncoderModel,
    alpha: f64,
) -> Result<DualEncoderModel> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::arg(format!("alpha {alpha} outside [0, 1]")));
    }
    finetuned.check_same_architecture(pretrained)?;
    if alpha == 1.0 {
        return Ok(finetuned.clone());
    }
    let mut out = pretrained.clone();
    for (o, f) in out.tensors_mut().into_iter().zip(finetuned.tensors()) {
        // p + alpha (f - p) keeps interpolate(m, m, alpha) == m bit-exactly.
        ndarray::Zip::from(o).and(f).for_each(|p, &fv| *p += alpha * (fv - *p));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn tiny() -> ModelConfig {
        ModelConfig {
            input_dim: 5,
            width: 8,
            hidden: 12,
            visual_blocks: 3,
            text_blocks: 2,
            embed_dim: 4,
            num_classes: 3,
            vocab_size: 64,
        }
    }

    fn assert_unit_rows(m: &Matrix) {
        for row in m.rows() {
            assert!((row.dot(&row).sqrt() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn image_embeddings_are_unit_norm_and_shaped() {
        let model = DualEncoderModel::new(tiny(), 1).unwrap();
        let x = Matrix::from_shape_fn((7, 5), |(i, j)| (i * 5 + j) as f64 * 0.1 - 1.0);
        let z = model.encode_image(&x).unwrap();
        assert_eq!(z.dim(), (7, 4));
        assert_unit_rows(&z);
    }

    #[test]
    fn zero_parameter_model_still_emits_unit_rows() {
        let model = DualEncoderModel::new(tiny(), 1).unwrap().zeros_like();
        let z = model.encode_image(&Matrix::ones((3, 5))).unwrap();
        assert_unit_rows(&z);
        let t = model.encode_text(&["a dog"]).unwrap();
        assert_unit_rows(&t);
    }

    #[test]
    fn image_encoding_is_deterministic() {
        let a = DualEncoderModel::new(tiny(), 9).unwrap();
        let b = DualEncoderModel::new(tiny(), 9).unwrap();
        let x = Matrix::from_shape_fn((2, 5), |(i, j)| (i as f64) - (j as f64) * 0.3);
        let za = a.encode_image(&x).unwrap();
        let zb = b.encode_image(&x).unwrap();
        let za2 = a.encode_image(&x).unwrap();
        assert_eq!(za, zb);
        assert_eq!(za, za2);
    }

    #[test]
    fn image_shape_mismatch_is_rejected() {
        let model = DualEncoderModel::new(tiny(), 1).unwrap();
        assert!(matches!(
            model.encode_image(&Matrix::zeros((2, 4))),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn text_encoding_contracts() {
        let model = DualEncoderModel::new(tiny(), 2).unwrap();
        let t = model
            .encode_text(&["a photo of a dog", "a photo of a dog", "a lemon"])
            .unwrap();
        assert_eq!(t.dim(), (3, 4));
        assert_eq!(t.row(0), t.row(1));
        assert_unit_rows(&t);
        let empty: [&str; 0] = [];
        assert!(matches!(model.encode_text(&empty), Err(Error::Argument(_))));
    }

    #[test]
    fn classifier_init_single_template_is_prompt_embedding() {
        let mut model = DualEncoderModel::new(tiny(), 3).unwrap();
        model
            .init_classifier_from_text(&["dog", "cat", "lemon"], &["a photo of a {}."])
            .unwrap();
        let t = model.encode_text(&["a photo of a cat."]).unwrap();
        for (a, b) in model.classifier.column(1).iter().zip(t.row(0)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn classifier_init_matches_hand_average() {
        let model = DualEncoderModel::new(tiny(), 4).unwrap();
        let templates = ["a photo of a {}.", "a sketch of a {}.", "art of the {}."];
        let classes = ["dog", "lemon"];
        let w = model.text_classifier(&classes, &templates).unwrap();
        for (k, class) in classes.iter().enumerate() {
            let mut acc = [0.0; 4];
            for t in templates {
                let e = model.encode_text(&[t.replace("{}", class)]).unwrap();
                for (a, v) in acc.iter_mut().zip(e.row(0)) {
                    *a += v / 3.0;
                }
            }
            let n = acc.iter().map(|v| v * v).sum::<f64>().sqrt();
            for (j, a) in acc.iter().enumerate() {
                assert!((w[[j, k]] - a / n).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn duplicated_template_mean_is_idempotent() {
        let model = DualEncoderModel::new(tiny(), 4).unwrap();
        let once = model.text_classifier(&["dog"], &["a photo of a {}."]).unwrap();
        let twice = model
            .text_classifier(&["dog"], &["a photo of a {}.", "a photo of a {}."])
            .unwrap();
        for (a, b) in once.iter().zip(twice.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn template_without_slot_is_format_error() {
        let mut model = DualEncoderModel::new(tiny(), 4).unwrap();
        let err = model
            .init_classifier_from_text(&["a", "b", "c"], &["a photo"])
            .unwrap_err();
        assert!(matches!(err, Error::Format { .. }));
    }

    #[test]
    fn classify_contracts() {
        let w = array![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]];
        let x = array![[0.0, 1.0]];
        let logits = classify(&x, &w).unwrap();
        assert_eq!(logits, array![[0.0, 1.0, 0.0]]);
        assert_eq!(classify(&x, &Matrix::zeros((2, 3))).unwrap(), Matrix::zeros((1, 3)));
        assert!(classify(&array![[1.0, 2.0, 3.0]], &w).is_err());

        // 2x3 case by hand
        let x = array![[1.0, 2.0], [-0.5, 3.0]];
        let w = array![[0.5, -1.0, 2.0], [1.5, 0.25, -0.75]];
        let expected = array![
            [1.0 * 0.5 + 2.0 * 1.5, -1.0 + 0.5, 2.0 - 1.5],
            [-0.25 + 4.5, 0.5 + 0.75, -1.0 - 2.25]
        ];
        assert_eq!(classify(&x, &w).unwrap(), expected);
    }

    #[test]
    fn interpolation_endpoints_and_midpoint() {
        let a = DualEncoderModel::new(tiny(), 5).unwrap();
        let b = DualEncoderModel::new(tiny(), 6).unwrap();
        assert_eq!(wise_ft_interpolate(&a, &b, 1.0).unwrap(), a);
        assert_eq!(wise_ft_interpolate(&a, &b, 0.0).unwrap(), b);
        assert_eq!(wise_ft_interpolate(&a, &a, 0.37).unwrap(), a);

        let mut f = a.zeros_like();
        let mut p = a.zeros_like();
        f.classifier.fill(4.0);
        p.classifier.fill(2.0);
        let mid = wise_ft_interpolate(&f, &p, 0.5).unwrap();
        assert!(mid.classifier.iter().all(|&v| v == 3.0));
    }

    #[test]
    fn interpolation_rejects_mismatched_architectures() {
        let a = DualEncoderModel::new(tiny(), 5).unwrap();
        let b = DualEncoderModel::new(
            ModelConfig {
                visual_blocks: 2,
                ..tiny()
            },
            5,
        )
        .unwrap();
        assert!(matches!(wise_ft_interpolate(&a, &b, 0.5), Err(Error::Structure(_))));
    }

    #[test]
    fn param_listing_is_consistent() {
        let model = DualEncoderModel::new(tiny(), 5).unwrap();
        let info = model.param_info();
        let tensors = model.tensors();
        assert_eq!(info.len(), tensors.len());
        for (i, t) in info.iter().zip(&tensors) {
            assert_eq!(i.shape, t.dim());
        }
        assert_eq!(model.param_count(ParamGroup::Classifier), 4 * 3);
        for g in model.groups() {
            assert_eq!(g.to_string().parse::<ParamGroup>().unwrap(), g);
        }
    }
}
