//! Attribute-conditioned garment synthesis with Gram-matrix style losses.
//!
//! A closet of garment photos is turned into a [`store::StyleStore`] of Gram
//! matrices keyed by texture/fabric attributes. [`generate::generate_design`]
//! then paints a user-chosen outline with the requested attributes by
//! minimizing a content/style loss over pixels with L-BFGS.

pub mod container;
pub mod error;
pub mod eval;
pub mod generate;
pub mod imaging;
pub mod nn;
pub mod optim;
pub mod store;
pub mod style;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
pub use generate::{generate_design, GenerationConfig};
pub use nn::Network;
pub use store::StyleStore;
pub use tensor::Tensor;
