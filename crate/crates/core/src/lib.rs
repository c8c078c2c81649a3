//! Multi-view echocardiogram video segmentation with global and local fusion.

pub mod backbone;
pub mod cycle;
pub mod data;
mod document;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod mgfm;
pub mod mlfm;
pub mod model;
pub mod phantom;
pub mod train;

pub use error::{Error, Result};
pub use model::{GlFusion, InputSpec, ModelConfig};

pub type GlFusion32 = GlFusion<f32>;
pub type GlFusion64 = GlFusion<f64>;
