pub mod autodiff;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod experiments;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod optim;
pub mod reference;
pub mod scm;
pub mod segmenter;
pub mod spectral;
pub mod tensor;
pub mod trainer;

pub use error::{ExcapError, Result};
