pub mod autograd;
pub mod config;
pub mod flow;
pub mod image;
pub mod inspect;
pub mod kstm;
pub mod losses;
pub mod ops;
pub mod optim;
pub mod perceptual;
pub mod pipeline;
pub mod rng;
pub mod stylenet;
pub mod tensor;
pub mod trainer;

pub use flow::{FlowField, OcclusionMask};
pub use stylenet::{ArchConfig, StyleNetModel, Variant};
pub use tensor::{Scalar, Shape, Tensor};
