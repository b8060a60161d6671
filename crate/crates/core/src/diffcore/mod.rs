//! Reverse-mode differentiation over small feed-forward networks, the Adam
//! optimizer, EMA shadow parameters, finite-difference gradient checks and the
//! binary checkpoint format.

mod adam;
mod checkpoint;
mod ema;
mod gradcheck;
mod nn;
mod param;
mod tape;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use ema::{ema_update, EmaState};
pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use nn::{mlp_apply, Activation, DenseLayer, Linear, Mlp};
pub use param::{GradientRecord, ParamArray, ParamId, ParamSet};
pub use tape::{Gradients, Mat, Tape, Var};
