//! The staged training procedure: schedules, losses, batching, and the
//! three fine-tuning stages.

pub mod data;
pub mod loss;
pub mod schedule;
pub mod trainer;

pub use data::{bptt_batchify, BpttBatches, BpttWindow, LabeledDataset};
pub use loss::label_smoothed_loss;
pub use schedule::{discriminative_lr_groups, one_cycle_cosine, ScheduleConfig};
pub use trainer::{
    classifier_accuracy, corpus_to_stream, finetune_classifier, finetune_lm, lm_stream_loss,
    pretrain_lm, split_validation_lines, ClassifierReport, ClfEpochMetrics, LmEpochMetrics,
    LmStageReport, MemoryObserver, MetricRecord, NullObserver, TrainConfig, TrainObserver,
};
