//! Deformable registration with weighted window attention.

pub mod error;
pub mod gradcheck;
pub mod init;
pub mod layers;
pub mod loss;
pub mod metrics;
pub mod phantom;
pub mod rfrnet;
pub mod spatial;
pub mod swin;
pub mod train;
pub mod volume;
pub mod windowing;
pub mod wwa;

pub use error::{Error, Result};
