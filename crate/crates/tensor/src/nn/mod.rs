//! Parameters, layers and optimisation.

mod layers;
mod optim;
mod param;

pub use layers::{Conv2d, Init, Linear};
pub use optim::{Adam, AdamConfig, CosineAnnealing};
pub use param::{Bound, ParamId, ParamStore};
