//! Minimal tape-based autodiff over `f64` matrices, plus the parameter
//! store and optimizer used by the sequence model.

pub mod adam;
pub mod params;
pub mod tape;

pub use adam::Adam;
pub use params::{Grads, ParamEntry, ParamId, ParamStore};
pub use tape::{Tape, Tx};
