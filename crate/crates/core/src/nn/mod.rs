//! Reverse-mode autodiff core, network blocks, the dual-branch model and
//! its optimizer.

pub mod layers;
pub mod model;
pub mod optim;
pub mod params;
pub mod tape;

pub use model::{Model, ModelConfig, Variant};
pub use params::ParamStore;
pub use tape::{Mat, Tape, Var};
