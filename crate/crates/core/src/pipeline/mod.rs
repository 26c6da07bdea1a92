//! Stage training, the two-stage recipe, and the recipe table.

mod config;
mod optim;
mod recipe;
mod train;

pub use config::{LossMode, Profile, Recipe, StageConfig};
pub use optim::{make_optimizer, AdamW, AdamWConfig, LrSchedule};
pub use recipe::{
    pretrain_on_corpus, retrieve_for_task, run_recipe, run_srapf, run_stages, zero_shot_model, FewShotTask,
    RecipeOutcome, RetrievalSource,
};
pub use train::{
    pretrain_contrastive, select_checkpoint, train_stage, train_stage_observed, EpochRecord, PretrainConfig,
    StageOutcome, TrainSet,
};
