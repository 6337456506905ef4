//! Event-stream transformer: autodiff, model, training, generation and evaluation.

pub mod checkpoint;
pub mod diagnostics;
pub mod evaluate;
pub mod generate;
pub mod model;
pub mod optim;
pub mod tape;
pub mod temporal;
pub mod tensor;
pub mod train;

pub use model::{EventStreamModel, ModelError};

/// Default-precision model.
pub type Model = EventStreamModel<f64>;
/// Default-precision trainer.
pub type Trainer = train::Trainer<f64>;
