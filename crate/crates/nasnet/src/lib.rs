//! Searchable UNet backbone.
//!
//! The crate bundles a small reverse-mode autograd engine (3D convolution,
//! normalization, pooling and the losses the branches need), the six-op
//! search space with its softmax relaxation, and the encoder-decoder network
//! built from searchable blocks. Everything is generic over [`Scalar`] so the
//! same code trains in `f32` and is gradient-checked in `f64`.

pub mod arch;
pub mod checkpoint;
pub mod conv;
pub mod error;
pub mod graph;
pub mod ops;
pub mod optim;
pub mod params;
pub mod scalar;
pub mod search;
pub mod tensor;
pub mod toy;
pub mod unet;

pub use arch::{derive_architecture, softmax_weights, ArchParams, DerivedArch};
pub use error::{NasError, Result};
pub use graph::{Graph, Var};
pub use ops::{mixed_forward, op_forward, Mode, OpKind, OpWeights};
pub use optim::{Adam, AdamConfig, ParamKindTag};
pub use params::{ParamId, ParamKind, ParamStore};
pub use scalar::Scalar;
pub use search::{search_step, train_step, Batch, SearchMode, SearchState, Target};
pub use tensor::Tensor;
pub use unet::{build_unet, ArchChoice, BlockNet, HeadKind, NasUNet, NasUNetConfig, Network};
