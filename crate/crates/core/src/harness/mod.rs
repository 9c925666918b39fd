//! Training orchestration: CE training, train-and-refine for every loss
//! variant, d-1 driven scheduling, evaluation and analysis.

mod config;
mod eval;
mod train;

pub use config::{Phase, TrainConfig, REFINE_BATCH_SIZE, TRAIN_BATCH_SIZE};
pub use eval::{
    analyze, build_vocab, dataset_from_text, evaluate, load_dataset, read_responses, synth_splits, weight_dump,
    write_synth, Evaluation, SplitSizes,
};
pub use train::{
    decode_responses, refine, run, train, validation_diversity, Dataset, EvalRecord, PlateauScheduler, RunOutcome,
    SchedulerEvent, WeightAudit, RUN_LOG_HEADER,
};
