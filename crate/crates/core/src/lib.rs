pub mod autodiff;
pub mod checkpoint;
pub mod complexity;
pub mod config;
pub mod data;
pub mod dgt;
pub mod error;
pub mod flow;
pub mod gradcheck;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod side;
pub mod tensor;
pub mod train;
pub mod verify;

pub use autodiff::{concat_channels, Gradients, Tape, Var};
pub use config::{ModelConfig, RunConfig, SideConfig, SideKind};
pub use error::{Error, Result};
pub use model::DualGlowModel;
pub use tensor::{Scalar, Tensor};
