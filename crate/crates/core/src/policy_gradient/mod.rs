//! REINFORCE gradients, agent variants, training and the coalition value.

mod gradient;
mod training;

pub use gradient::*;
pub use training::*;
