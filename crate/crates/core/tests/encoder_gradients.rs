//! Backprop through both towers against finite differences of the
//! forward pass.

mod common;

use common::*;
use srapf::losses::{ce_loss, contrastive_loss};
use srapf::model::DualEncoderModel;

const H: f64 = 1e-5;

/// CE on image embeddings plus contrastive between images and captions.
fn objective(model: &DualEncoderModel, x: &ndarray::Array2<f64>, labels: &[usize], captions: &[&str]) -> f64 {
    let img = model.encode_image(x).unwrap();
    let txt = model.encode_text(captions).unwrap();
    ce_loss(&img, labels, &model.classifier).unwrap().value + contrastive_loss(&img, &txt, 0.5).unwrap().value
}

fn analytic(
    model: &DualEncoderModel,
    x: &ndarray::Array2<f64>,
    labels: &[usize],
    captions: &[&str],
    lowest: usize,
) -> DualEncoderModel {
    let mut grad = model.zeros_like();
    let (img, vcache) = model.visual.forward_cached(x).unwrap();
    let (txt, tcache) = model.text.forward_cached(captions).unwrap();
    let ce = ce_loss(&img, labels, &model.classifier).unwrap();
    let cl = contrastive_loss(&img, &txt, 0.5).unwrap();
    let d_img = ce.d_features + cl.d_image;
    model.visual.backward(&vcache, &d_img, lowest, &mut grad.visual);
    model.text.backward(&tcache, &cl.d_text, lowest, &mut grad.text);
    grad.classifier = ce.d_classifier;
    grad
}

fn setup() -> (DualEncoderModel, ndarray::Array2<f64>, Vec<usize>, Vec<&'static str>) {
    let model = DualEncoderModel::new(tiny_model_config(3), 11).unwrap();
    let mut r = rng(12);
    let x = normal(&mut r, 3, 8, 1.0);
    let labels = vec![0, 2, 1];
    let captions = vec!["a photo of a cat", "a sketch of a dog dog", "red fox in snow"];
    (model, x, labels, captions)
}

#[test]
fn every_parameter_matches_finite_differences() {
    let (model, x, labels, captions) = setup();
    let grad = analytic(&model, &x, &labels, &captions, 0);
    let info = model.param_info();
    let mut probe = model.clone();
    let mut checked = 0;
    for (t, (g, p)) in grad.tensors().into_iter().zip(&info).enumerate() {
        // Every entry of small tensors, a strided sample of large ones.
        let stride = (g.len() / 40).max(1);
        for idx in (0..g.len()).step_by(stride) {
            let (r, c) = (idx / g.ncols(), idx % g.ncols());
            let orig = model.tensors()[t][[r, c]];
            let mut at = |delta: f64| {
                probe.tensors_mut()[t][[r, c]] = orig + delta;
                objective(&probe, &x, &labels, &captions)
            };
            let fd = (8.0 * (at(H) - at(-H)) - (at(2.0 * H) - at(-2.0 * H))) / (12.0 * H);
            probe.tensors_mut()[t][[r, c]] = orig;
            let a = g[[r, c]];
            assert!(
                (a - fd).abs() <= 1e-7 + 1e-5 * a.abs().max(fd.abs()),
                "{}[{r},{c}]: analytic {a}, numeric {fd}",
                p.name
            );
            checked += 1;
        }
    }
    assert!(checked > 500, "only {checked} entries checked");
}

#[test]
fn backward_stops_at_the_lowest_block() {
    let (model, x, labels, captions) = setup();
    let grad = analytic(&model, &x, &labels, &captions, 2);
    let full = analytic(&model, &x, &labels, &captions, 0);
    for ((p, g), f) in model.param_info().iter().zip(grad.tensors()).zip(full.tensors()) {
        let below = match p.group {
            srapf::model::ParamGroup::Visual(b) | srapf::model::ParamGroup::Text(b) => b < 2,
            srapf::model::ParamGroup::Classifier => false,
        };
        if below {
            assert!(g.iter().all(|v| *v == 0.0), "{} received gradient", p.name);
        } else {
            assert_eq!(g, f, "{} differs from the full backward pass", p.name);
        }
    }
}
