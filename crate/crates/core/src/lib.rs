pub mod attack;
pub mod data;
pub mod error;
pub mod eval;
pub mod fairness;
pub mod network;
pub mod pacbayes;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use network::{FeedForwardNet, ForwardTrace, GradBundle, WeightStats};
pub use tensor::{Matrix, SingularTriplet};
