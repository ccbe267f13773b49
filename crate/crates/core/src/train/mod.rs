//! Optimisation: Adam, the photometric loss, field distillation and the
//! toy end-to-end trainer.

mod adam;
mod distill;
mod e2e;
mod loss;

pub use adam::{adam_step, Adam, LrSchedule, BETA1, BETA2, EPS_DEFAULT, EPS_POSITION};
pub use distill::{attribute_rmse, distill, masks_for_scene, AttributeRmse, DistillConfig, DistillLog, DistillReport};
pub use e2e::{prune_model, train_e2e, LocoModel, ModelGrad, PruneEvent, StepLog, TrainConfig, TrainReport, Variant, View};
pub use loss::{image_loss, total_loss, LossGrad, LossTerms, LossWeights};

use crate::field::FieldError;
use crate::model::ModelError;
use crate::render::RenderError;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error("training diverged at step {step} (loss {loss}): {detail}")]
    Diverged { step: usize, loss: f64, detail: String },
    #[error("no Gaussians left")]
    EmptyScene,
    #[error("invalid configuration: {0}")]
    Config(String),
}

#[cfg(test)]
mod tests;
