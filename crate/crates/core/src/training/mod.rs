//! Composite MSE + mass-conservation loss and the Adam training loop.

mod adam;
mod error;
mod loss;
mod train;

pub use adam::{Adam, AdamConfig};
pub use error::TrainError;
pub use loss::{
    mass_loss, mse_loss, total_loss, LossConfig, LossTerms, MassConvention, MassUnits,
};
pub use train::{
    evaluate_losses, prepare_pairs, train, EpochRecord, LossBreakdown, LossLog, TrainConfig,
    TrainOutcome, TrainingPair,
};
