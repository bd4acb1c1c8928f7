//! Width-adaptive image restoration.
//!
//! * [`tensor`]: dense tensors, reverse-mode tape, Adam.
//! * [`degrade`]: procedural clean images and the noise / rain / haze lab.
//! * [`wab`]: the width-adaptive backbone sharing one prefix-sliced weight store.
//! * [`selector`]: the two-branch width router.
//! * [`metrics`]: PSNR, SSIM, FLOPs and parameter accounting.

pub mod degrade;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod selector;
pub mod tensor;
pub mod wab;

pub use error::{Error, Result};
