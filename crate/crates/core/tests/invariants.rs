mod common;

use proptest::prelude::*;
use rand::Rng;

use common::*;
use srapf::adversarial::{perturb, PerturbationConfig};
use srapf::checkpoint::Checkpoint;
use srapf::data::{LabeledDataset, ShiftTag, Split};
use srapf::evaluation::{evaluate, DatasetAccuracy, EvalReport};
use srapf::model::{build_freeze_plan, DualEncoderModel, ParamGroup};
use srapf::pipeline::{train_stage, LrSchedule, Profile, Recipe};
use srapf::retrieval::{retrieve_all, Corpus, CorpusRecord};

fn dataset(model: &DualEncoderModel, seed: u64, n: usize, name: &str, shift: ShiftTag) -> LabeledDataset {
    let mut r = rng(seed);
    let k = model.num_classes();
    let inputs = normal(&mut r, n, model.config.input_dim, 1.0);
    let labels = (0..n).map(|_| r.random_range(0..k)).collect();
    let names = (0..k).map(|i| format!("class{i}")).collect();
    LabeledDataset::new(name, Split::Test, shift, names, inputs, labels).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn schedule_warms_up_then_decays(
        warmup in 0usize..30,
        extra in 0usize..200,
        base in 1e-6f64..1.0,
        warmup_lr in 0.0f64..1e-3,
    ) {
        let total = warmup + extra + 1;
        let s = LrSchedule { warmup_iters: warmup, warmup_lr, total_steps: total };
        let lrs: Vec<f64> = (0..total).map(|t| s.lr(base, t)).collect();
        prop_assert!(lrs.iter().all(|&l| (0.0..=base * (1.0 + 1e-12)).contains(&l)));
        if warmup > 0 {
            prop_assert_eq!(lrs[0], warmup_lr.min(base));
        }
        for w in lrs[..warmup.min(total)].windows(2) {
            prop_assert!(w[1] >= w[0]);
        }
        for w in lrs[warmup..].windows(2) {
            prop_assert!(w[1] <= w[0]);
        }
        prop_assert!(lrs[total - 1].abs() < 1e-15 * base.max(1.0) || total - 1 < warmup);
        prop_assert_eq!(s.lr(0.0, warmup / 2), 0.0);
    }

    #[test]
    fn pgd_stays_in_the_box(seed in any::<u64>(), eps in 0.0f64..1.0, steps in 0usize..12, random_start in any::<bool>()) {
        let mut r = rng(seed);
        let x = normal(&mut r, 5, 6, 1.0);
        let w = normal(&mut r, 6, 4, 2.0);
        let labels: Vec<usize> = (0..5).map(|_| r.random_range(0..4)).collect();
        let cfg = PerturbationConfig { random_start, seed, ..PerturbationConfig::new(steps, eps) };
        let out = perturb(&x, &labels, &w, &cfg).unwrap();
        prop_assert!(out.delta.iter().all(|d| d.abs() <= eps + 1e-12));
        let recomputed = &x + &out.delta;
        prop_assert!(out.perturbed.iter().zip(recomputed.iter()).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn freeze_plan_trains_exactly_the_top_blocks(k in 0usize..=4, kt in 0usize..=3) {
        let model = DualEncoderModel::new(tiny_model_config(3), 1).unwrap();
        let plan = build_freeze_plan(&model, k, kt, 1e-3, 1e-2).unwrap();
        for g in model.groups() {
            let want = match g {
                ParamGroup::Classifier => true,
                ParamGroup::Visual(b) => b + k >= 4,
                ParamGroup::Text(b) => b + kt >= 3,
            };
            prop_assert_eq!(plan.is_trainable(g), want, "{}", g);
        }
        let counted: usize = model.groups().into_iter().filter(|g| plan.is_trainable(*g)).map(|g| model.param_count(g)).sum();
        prop_assert_eq!(plan.trainable_param_count(&model), counted);
    }

    #[test]
    fn retrieval_caps_are_prefixes(seed in any::<u64>(), small in 1usize..6, extra in 1usize..20) {
        let mut r = rng(seed);
        let words = ["cat", "dog", "owl", "a", "the", "photo", "of", "sketch", "snow"];
        let records = (0..60).map(|i| {
            let len = r.random_range(1..6);
            let caption = (0..len).map(|_| words[r.random_range(0..words.len())]).collect::<Vec<_>>().join(" ");
            CorpusRecord { id: format!("r{i}"), caption, payload_ref: format!("p{i}") }
        }).collect();
        let corpus = Corpus::from_records(records).unwrap();
        let classes = ["cat", "dog", "owl"];
        let model = DualEncoderModel::new(tiny_model_config(3), seed).unwrap();
        let a = retrieve_all(&corpus, &classes, &model, Some(small)).unwrap();
        let b = retrieve_all(&corpus, &classes, &model, Some(small + extra)).unwrap();
        let all = retrieve_all(&corpus, &classes, &model, None).unwrap();
        for label in 0..classes.len() {
            let ids = |d: &srapf::retrieval::RetrievedDataset| -> Vec<String> {
                d.entries.iter().filter(|e| e.label == label).map(|e| e.record.id.clone()).collect()
            };
            prop_assert!(ids(&b).starts_with(&ids(&a)));
            prop_assert!(ids(&all).starts_with(&ids(&b)));
            prop_assert_eq!(all.per_class_counts[label].retained, all.per_class_counts[label].matched);
        }
    }

    #[test]
    fn accuracy_is_permutation_invariant_and_k_over_n(seed in any::<u64>(), n in 1usize..40) {
        let model = DualEncoderModel::new(tiny_model_config(4), seed).unwrap();
        let ds = dataset(&model, seed ^ 1, n, "id_test", ShiftTag::Id);
        let rep = evaluate(&model, &[&ds]).unwrap();
        let acc = &rep.per_dataset[0];
        prop_assert_eq!(acc.total, n);
        prop_assert_eq!(acc.top1, acc.correct as f64 / n as f64);

        let mut order: Vec<usize> = (0..n).collect();
        order.reverse();
        order.rotate_left(n / 3);
        let shuffled = ds.subset(&order, "id_test");
        let rep2 = evaluate(&model, &[&shuffled]).unwrap();
        prop_assert_eq!(rep2.per_dataset[0].correct, acc.correct);
    }

    #[test]
    fn ood_mean_is_the_mean_of_ood_rows(values in proptest::collection::vec((0.0f64..=1.0, any::<bool>()), 1..8)) {
        let entries: Vec<DatasetAccuracy> = values.iter().enumerate().map(|(i, &(top1, ood))| DatasetAccuracy {
            name: format!("d{i}"),
            shift: if ood { ShiftTag::Ood(format!("s{i}")) } else { ShiftTag::Id },
            correct: 0,
            total: 0,
            top1,
        }).collect();
        let rep = EvalReport::from_entries(entries);
        let ood: Vec<f64> = values.iter().filter(|v| v.1).map(|v| v.0).collect();
        match rep.ood_mean {
            None => prop_assert!(ood.is_empty()),
            Some(m) => prop_assert!((m - ood.iter().sum::<f64>() / ood.len() as f64).abs() < 1e-15),
        }
    }

    #[test]
    fn checkpoints_round_trip_bit_exactly(seed in any::<u64>(), epoch in 0usize..100, acc in 0.0f64..=1.0) {
        let model = DualEncoderModel::new(tiny_model_config(3), seed).unwrap();
        let plan = build_freeze_plan(&model, 2, 0, 1e-4, 1e-2).unwrap();
        let ckpt = Checkpoint {
            model,
            stage: "stage1".into(),
            epoch,
            id_val_top1: acc,
            config_hash: format!("{seed:016x}"),
            freeze_plan: Some(plan),
        };
        let back = Checkpoint::from_bytes(&ckpt.to_bytes().unwrap()).unwrap();
        prop_assert_eq!(bits(&back.model), bits(&ckpt.model));
        prop_assert_eq!(back, ckpt);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn training_never_moves_frozen_groups(k in 0usize..=4, seed in 0u64..1000) {
        let bench = small_benchmark(seed);
        let model = small_model(&bench, seed);
        let mut cfg = Recipe::Pft.stages(&Profile::toy(), 4, 3, seed).remove(0);
        cfg.top_k_visual = k;
        cfg.epochs = 2;
        cfg.batch_size = 16;
        cfg.lr_backbone = 1e-2;
        let out = train_stage(&model, &bench.id_train, &bench.id_val, None, &cfg).unwrap();
        for ((p, before), after) in model.param_info().iter().zip(bits(&model)).zip(bits(&out.last)) {
            if !out.plan.is_trainable(p.group) {
                prop_assert_eq!(before, after, "{} moved", p.name);
            }
        }
    }
}
