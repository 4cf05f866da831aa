pub mod atlas;
pub mod cohort;
pub mod error;
pub mod global;
pub mod local;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod volume;

pub use error::{Error, Result};
pub use volume::{Dims, Volume3D};
