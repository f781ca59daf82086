pub mod autodiff;
pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod networks;
pub mod optim;
pub mod psi;
pub mod random;
pub mod synth;
pub mod stn;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
