pub mod autodiff;
pub mod data;
pub mod error;
pub mod model;
pub mod optim;
pub mod params;
pub mod runner;
pub mod seed;
pub mod stats;
pub mod surgery;
pub mod tensor;
pub mod train;

pub use data::{LabeledExample, Task, TaskDataset};
pub use error::{
    CheckpointError, DataError, ModelError, RunnerError, StatsError, SurgeryError, TensorError, TrainError,
};
pub use model::{Checkpoint, ModelConfig};
pub use runner::{ExperimentKind, ExperimentManifest, RunOptions, RunSummary};
pub use stats::{CorrelationMethod, CorrelationResult, IntervalEstimate, IntervalKind};
pub use surgery::{PlanKind, SurgeryPlan, SurgeryReport};
pub use tensor::Tensor;
pub use train::{FinetuneHyper, Metrics, TrialRecord};
