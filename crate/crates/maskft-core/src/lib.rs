pub mod baselines;
pub mod bits;
pub mod checkpoint;
pub mod corpus;
pub mod error;
pub mod gradcheck;
pub mod mask;
pub mod model;
pub mod optim;
pub mod record;
pub mod tape;
pub mod tensor;
pub mod trainer;
pub mod util;

pub use error::{Error, Result};
pub use tensor::Tensor;
