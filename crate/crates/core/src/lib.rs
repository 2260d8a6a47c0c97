//! Motion-guided object discovery on paired camera and LiDAR sequences.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the precision for common uses.

pub mod dataset;
pub mod distill;
pub mod evalfuse;
pub mod losses;
pub mod pcproj;
pub mod pseudolabel;
pub mod reference;
pub mod scalar;
pub mod slotcore;
pub mod synthgen;
pub mod tensor;

pub use scalar::Scalar;
pub use tensor::{ShapeError, Tensor};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type FrontView32 = pcproj::FrontViewImage<f32>;
pub type FrontView64 = pcproj::FrontViewImage<f64>;
pub type Model32 = slotcore::SlotModel<f32>;
pub type Model64 = slotcore::SlotModel<f64>;
