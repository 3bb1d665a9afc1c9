//! Blind non-uniform motion deblurring with atrous spatial pyramid
//! deformable convolutions, a dynamic-filter reblurring network and
//! deblurring-reblurring consistency fine-tuning, on a small CPU autodiff
//! engine.

pub mod aspdc;
pub mod checkpoint;
pub mod config;
pub mod deblur;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod image;
pub mod kernels;
pub mod layers;
pub mod metrics;
pub mod params;
pub mod reblur;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use image::Image;
pub use params::{Bound, Init, ParamId, ParamStore};
pub use tensor::{Real, Shape, Tensor};
