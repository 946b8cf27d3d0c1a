//! Meta-learning with an adversarially trained feature-wise shift layer.
//!
//! The crate bundles a small reverse-mode autodiff engine, the episodic task
//! generators, four base learners and the adversarial meta-training loop.

pub mod adversarial;
pub mod autodiff;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod meta;
pub mod models;
pub mod optim;
pub mod tasks;

pub use autodiff::{ParamSet, Tape, Tensor, Var, VarMap};
pub use error::{Error, Result};
pub use meta::{baseline_meta_step, inner_adapt, query_loss, BaseLearner, InnerConfig, LearnerKind, TaskReduction};
pub use models::{fisl_transform_task, FislParams, Model, PseudoTask, RoutedTask};
pub use optim::Adam;
pub use tasks::{Split, Targets, Task};
