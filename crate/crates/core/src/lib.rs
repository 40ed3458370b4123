//! Loop-closure detection for LiDAR sequences via learned range-image overlap.

pub mod cli;
pub mod dataset;
pub mod error;
pub mod net;
pub mod overlap;
pub mod pipeline;
pub mod pose;
pub mod projection;
pub mod registration;
pub mod synthetic;
pub mod tensor_blob;
pub mod uncertainty;

pub use error::{Error, Result};
pub use pose::Pose;
