//! Single-image multi-scale adversarial training for blind motion
//! deblurring, with a synthetic blur generator and PSNR/SSIM evaluation.
//!
//! A pyramid of per-scale generator/critic pairs is trained on one sharp
//! image; at inference the finest-scale generator is applied iteratively to
//! progressively upsampled versions of the blurry input.

pub mod blur;
pub mod error;
pub mod imaging;
pub mod metrics;
pub mod networks;
pub mod training;
pub mod parallel;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
