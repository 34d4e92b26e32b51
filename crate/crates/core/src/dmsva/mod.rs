//! Four-bank decoupled alignment model and its losses.
//!
//! Two key banks (character, environment) are queried by a visual embedding;
//! two value banks (timbre, sound) are queried by an auditory embedding and
//! also serve as the read-out for both pathways. The visual pathway therefore
//! recalls an auditory embedding from keys it never reads values from.

mod loss;
mod model;
pub mod objective;

pub use loss::{
    batch_objective, loss_align, loss_env_consistency, loss_imi, loss_rec, loss_timbre_consistency, total_loss,
    LossBreakdown, LossWeights,
};
pub use model::{
    attend, AttentionWeights, BankRole, DmsvaModel, MemoryBank, ModelError, PathwayOutput, DEFAULT_TEMPERATURE,
    SLOT_NORM_FLOOR,
};
pub(crate) use model::enforce_norm_floor;
