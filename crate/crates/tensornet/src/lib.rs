//! A deliberately small neural-network core with hand-written backward
//! passes. Everything is `f64` so gradients can be checked against finite
//! differences and checkpoints round-trip bit-exactly.

pub mod array;
pub mod checkpoint;
pub mod dense;
pub mod error;
pub mod gradcheck;
pub mod loss;
pub mod lstm;
pub mod optim;
pub mod params;

pub use array::NumArray;
pub use checkpoint::Checkpoint;
pub use dense::{Activation, Dense, DenseCache, Mlp, MlpCache};
pub use error::{NetError, Result};
pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use loss::{mape_loss, mse_loss};
pub use lstm::{BatchTrace, LstmCell, LstmTrace};
pub use optim::Adam;
pub use params::{ParamId, Parameter, ParameterStore};
