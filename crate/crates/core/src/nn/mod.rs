//! Minimal tensor and network engine: layers with exact backward passes,
//! Adam/AdamW, the plateau scheduler and a finite-difference checker.

pub mod gradcheck;
pub mod layers;
pub mod model;
pub mod ntf;
pub mod optim;
pub mod scheduler;
pub mod tensor;

pub use gradcheck::{analytic_gradients, finite_diff_check, finite_diff_check_with, GradCheckConfig, GradCheckReport};
pub use layers::{Cache, Layer, LayerSpec, Mode};
pub use model::{build_backbone, BackboneKind, BackboneSpec, Gradients, Model, DEFAULT_EMBEDDING_DIM};
pub use optim::{adam_step, adamw_step, Algorithm, OptimConfig, OptimizerState};
pub use scheduler::{plateau_step, SchedulerState};
pub use tensor::{Real, Tensor};
