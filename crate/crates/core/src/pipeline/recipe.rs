use super::config::{Profile, Recipe, StageConfig};
use super::train::{pretrain_contrastive, train_stage, PretrainConfig, StageOutcome, TrainSet};
use crate::checkpoint::Checkpoint;
use crate::data::{sample_few_shot, FewShotSplit, LabeledDataset, PayloadStore, ShiftBenchmark};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, EvalReport};
use crate::model::{DualEncoderModel, ModelConfig, DEFAULT_TEMPLATES};
use crate::retrieval::{retrieve_all, Corpus, RetrievedDataset};

/// A few-shot training split with the validation and test sets it is
/// scored on.
#[derive(Clone, Debug)]
pub struct FewShotTask {
    pub class_names: Vec<String>,
    pub train: LabeledDataset,
    pub val: LabeledDataset,
    /// ID test first, then the OOD sets.
    pub tests: Vec<LabeledDataset>,
    pub split: FewShotSplit,
}

impl FewShotTask {
    pub fn from_benchmark(bench: &ShiftBenchmark, shots: usize, seed: u64) -> Result<Self> {
        let split = sample_few_shot(&bench.id_train, shots, seed)?;
        Ok(Self {
            class_names: bench.class_names.clone(),
            train: split.apply(&bench.id_train),
            val: bench.id_val.clone(),
            tests: bench.test_sets().into_iter().cloned().collect(),
            split,
        })
    }

    pub fn evaluate(&self, model: &DualEncoderModel) -> Result<EvalReport> {
        let refs: Vec<&LabeledDataset> = self.tests.iter().collect();
        evaluate(model, &refs)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct RetrievalSource<'a> {
    pub corpus: &'a Corpus,
    pub payloads: &'a PayloadStore,
}

impl<'a> RetrievalSource<'a> {
    pub fn from_benchmark(bench: &'a ShiftBenchmark) -> Self {
        Self {
            corpus: &bench.corpus,
            payloads: &bench.payloads,
        }
    }
}

#[derive(Clone, Debug)]
pub struct RecipeOutcome {
    pub name: String,
    pub configs: Vec<StageConfig>,
    pub stages: Vec<StageOutcome>,
    /// Test report of each stage's selected checkpoint.
    pub stage_reports: Vec<EvalReport>,
    pub retrieved: Option<RetrievedDataset>,
    pub params_trained: usize,
}

impl RecipeOutcome {
    pub fn final_checkpoint(&self) -> &Checkpoint {
        &self.stages.last().expect("at least one stage").best
    }

    pub fn report(&self) -> &EvalReport {
        self.stage_reports.last().expect("at least one stage")
    }
}

/// Builds a dual encoder sized for `bench` and pretrains it contrastively on
/// the corpus image/caption pairs. The returned head is zero-shot.
pub fn pretrain_on_corpus(
    bench: &ShiftBenchmark,
    mut model_config: ModelConfig,
    config: &PretrainConfig,
) -> Result<(DualEncoderModel, Vec<f64>)> {
    model_config.input_dim = bench.config.raw_dim;
    model_config.num_classes = bench.class_names.len();
    let mut model = DualEncoderModel::new(model_config, config.seed)?;
    let records = bench.corpus.records();
    let refs: Vec<&str> = records.iter().map(|r| r.payload_ref.as_str()).collect();
    let captions: Vec<&str> = records.iter().map(|r| r.caption.as_str()).collect();
    let images = bench.payloads.gather(&refs)?;
    let losses = pretrain_contrastive(&mut model, &images, &captions, config)?;
    model.init_classifier_from_text(&bench.class_names, DEFAULT_TEMPLATES)?;
    Ok((model, losses))
}

/// Copy of `pretrained` with the zero-shot head for `class_names`.
pub fn zero_shot_model<S: AsRef<str>>(pretrained: &DualEncoderModel, class_names: &[S]) -> Result<DualEncoderModel> {
    let mut model = pretrained.clone();
    model.init_classifier_from_text(class_names, DEFAULT_TEMPLATES)?;
    Ok(model)
}

/// Retrieves with `model`'s text encoder and resolves payloads.
pub fn retrieve_for_task<S: AsRef<str>>(
    model: &DualEncoderModel,
    class_names: &[S],
    source: RetrievalSource<'_>,
    cap: Option<usize>,
) -> Result<(RetrievedDataset, TrainSet)> {
    let retrieved = retrieve_all(source.corpus, class_names, model, cap)?;
    let set = TrainSet::materialize(&retrieved, source.payloads)?;
    Ok((retrieved, set))
}

/// Runs `configs` in order, each stage starting from the previous stage's
/// selected checkpoint. Only stages with `use_ra` are handed retrieved data.
pub fn run_stages(
    name: &str,
    pretrained: &DualEncoderModel,
    task: &FewShotTask,
    source: Option<RetrievalSource<'_>>,
    configs: &[StageConfig],
) -> Result<RecipeOutcome> {
    if configs.is_empty() {
        return Err(Error::Config("no stages".into()));
    }
    let init = zero_shot_model(pretrained, &task.class_names)?;
    let retrieval = match configs.iter().find(|c| c.use_ra) {
        Some(cfg) => {
            let source = source.ok_or_else(|| Error::arg(format!("{name} needs a retrieval corpus")))?;
            Some(retrieve_for_task(
                pretrained,
                &task.class_names,
                source,
                cfg.retrieval_cap,
            )?)
        }
        None => None,
    };

    let mut stages: Vec<StageOutcome> = Vec::with_capacity(configs.len());
    let mut stage_reports = Vec::with_capacity(configs.len());
    let mut params_trained = 0;
    for cfg in configs {
        let start = stages.last().map_or(&init, |s| &s.best.model);
        let retrieved = if cfg.use_ra {
            retrieval.as_ref().map(|(_, set)| set)
        } else {
            None
        };
        let outcome = train_stage(start, &task.train, &task.val, retrieved, cfg)?;
        let mut report = task.evaluate(&outcome.best.model)?;
        report.seed = Some(cfg.seed);
        report.checkpoint = Some(format!("{}@{}", cfg.name, outcome.best.epoch));
        params_trained = params_trained.max(outcome.plan.trainable_param_count(start));
        stage_reports.push(report);
        stages.push(outcome);
    }
    Ok(RecipeOutcome {
        name: name.to_string(),
        configs: configs.to_vec(),
        stages,
        stage_reports,
        retrieved: retrieval.map(|(r, _)| r),
        params_trained,
    })
}

/// Stage 1 finetunes on ID plus retrieved data; stage 2 starts from the
/// stage-1 selection and trains with feature perturbation on ID data only.
pub fn run_srapf(
    pretrained: &DualEncoderModel,
    task: &FewShotTask,
    source: RetrievalSource<'_>,
    stage1: &StageConfig,
    stage2: &StageConfig,
) -> Result<RecipeOutcome> {
    if !stage1.use_ra || stage2.use_ra {
        return Err(Error::Config("SRAPF needs RA in stage 1 and not in stage 2".into()));
    }
    run_stages(
        "SRAPF",
        pretrained,
        task,
        Some(source),
        &[stage1.clone(), stage2.clone()],
    )
}

pub fn run_recipe(
    recipe: Recipe,
    pretrained: &DualEncoderModel,
    task: &FewShotTask,
    source: Option<RetrievalSource<'_>>,
    profile: &Profile,
    seed: u64,
) -> Result<RecipeOutcome> {
    if recipe.uses_retrieval() && source.is_none() {
        return Err(Error::arg(format!("{recipe} needs a retrieval corpus")));
    }
    let configs = recipe.stages(profile, pretrained.visual_depth(), pretrained.text_depth(), seed);
    run_stages(recipe.name(), pretrained, task, source, &configs)
}
