pub mod device;
pub mod dynamics;
pub mod error;
pub mod measurement;
pub mod optimize;
pub mod pulses;
pub mod spectroscopy;
pub mod stability;
pub mod tomography;

pub use error::{Error, Result};
