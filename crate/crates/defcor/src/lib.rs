//! Pressure-induced deformation correction for single ultrasound B-mode
//! images.
//!
//! The toolkit predicts a dense pixel-wise displacement field from a single
//! deformed image, the measured contact force, and a palpation-calibrated
//! global stiffness, then warps the image back to its uncompressed geometry.
//! A synthetic phantom pipeline generates force-parameterized datasets so
//! the whole stack can be trained and verified at desk scale.

pub mod adam;
pub mod calib;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod flow;
pub mod gradcheck;
pub mod image;
pub mod loss;
pub mod net;
pub mod phantom;
pub mod tape;
pub mod train;

pub use error::{Error, Result};

pub use rayon;
