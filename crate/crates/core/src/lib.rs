pub mod allocator;
pub mod bench;
pub mod calibration;
pub mod corpus;
pub mod decomposer;
pub mod error;
pub mod io;
pub mod linalg;
pub mod model;
pub mod pipeline;
pub mod verify;

pub use error::{Result, SlimError};
pub use linalg::Matrix;
