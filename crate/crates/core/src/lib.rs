//! Continual learning with weight factorization and elastic weight
//! consolidation, at desk scale.

pub mod bench;
pub mod cli;
pub mod error;
pub mod ewc;
pub mod factorized;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod params;
pub mod seed;
pub mod tasks;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use ewc::{EwcSchedule, EwcState, FisherDiagonal, FisherEstimator};
pub use factorized::{param_overhead, FactorRole, FactorSet, FactorizedLinear, ParamOverhead};
pub use model::{Activation, Batch, ModelConfig, ToyEncoderClassifier};
pub use params::{ParamMap, Parameterized};
pub use metrics::{degradation, evaluate, EvalReport, EvalRow};
pub use tasks::{generate_suite, Corpus, Dataset, Sample, Split, SuiteConfig, TaskSpec, TaskSuite};
pub use tensor::{Graph, Primitive, Tensor, Var};
pub use trainer::{continual_step, train_initial, train_joint, Phase, Strategy, TrainPlan, TrainState};
