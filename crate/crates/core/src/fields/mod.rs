//! Gridded climate variables, the coarsening operator, a synthetic field
//! generator and the `.grd` container format.

mod error;
mod grid;
pub mod io;
mod norm;
pub mod synth;
mod variable;

pub use error::FieldError;
pub use grid::{FieldStack, GridField};
pub use norm::NormStats;
pub use synth::{gaussian_random_field, synth_stack, GrfParams, SynthProfile};
pub use variable::{ChannelMask, PressureLevel, UpperAirVar, VariableId};
