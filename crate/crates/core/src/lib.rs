pub mod ablation;
pub mod cha;
pub mod cli;
pub mod error;
pub mod eval;
pub mod model;
pub mod numerics;
pub mod ot;
pub mod pipeline;
pub mod synth;
pub mod text;
pub mod training;
pub mod visual;

pub use error::{Error, Result};
