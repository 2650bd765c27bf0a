pub mod error;
pub mod evidence;
pub mod fitter;
pub mod geometry;
pub mod hand_model;
pub mod io;
pub mod mask;
pub mod metrics;
pub mod objective;
pub mod render;
pub mod sdf;
pub mod state;
pub mod synth;
pub mod tracking;

pub use error::{Error, Result};
