//! Prompt-module architecture search over a frozen vision transformer.
//!
//! Adapter, LoRA and VPT modules are inserted into a small pretrained ViT.
//! A weight-entangled supernet holding all three at maximal size is trained
//! by sampling a random subnet per step, an evolutionary search picks the
//! best subnet under a parameter budget using inherited weights, and the
//! winner is retrained.
//!
//! Numeric code is generic over [`Scalar`]; training uses `f32` and the
//! gradient checks run the same code in `f64`.

pub mod autodiff;
pub mod backbone;
pub mod data;
pub mod error;
pub mod evolution;
pub mod prompt;
pub mod scalar;
pub mod search_space;
pub mod supernet;
pub mod tensor;
pub mod training;

pub use autodiff::{Graph, Var};
pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::{Tensor, TensorError};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Graph32 = Graph<f32>;
pub type Graph64 = Graph<f64>;
pub type Backbone32 = backbone::Backbone<f32>;
pub type Supernet32 = supernet::Supernet<f32>;
pub type Subnet32 = supernet::Subnet<f32>;
pub type PatchSet32 = data::PatchSet<f32>;
