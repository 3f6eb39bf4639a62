pub mod autodiff;
pub mod cluster;
pub mod diffusion;
pub mod error;
pub mod features;
pub mod io;
pub mod labeled;
pub mod metrics;
pub mod nn;
pub mod repaint;
pub mod seed;
pub mod seg;
pub mod style;
pub mod tensor;
pub mod toy;

pub use error::{Error, Result};
pub use labeled::{LabeledImage, Sample};
pub use tensor::{Element, Tensor};
