//! Aspect-ratio-aware vehicle re-identification pipeline.
//!
//! Stages, in pipeline order:
//!
//! - [`aspect`]: corpus scanning, aspect-ratio K-means and resize plans
//! - [`patchify`]: patch grids with independent vertical/horizontal strides
//! - [`mixup`]: attention-guided intra-image patch mixup
//! - [`vit`]: forward-only transformer encoder
//! - [`losses`]: ID and soft-margin triplet losses with gradient checks
//! - [`fusion`]: adaptive weighted fusion of per-aspect-ratio features
//! - [`eval`] and [`store`]: feature stores, ranking, mAP and CMC
//! - [`pipeline`]: config-driven commands used by the CLI

pub mod aspect;
pub mod config;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod losses;
pub mod mixup;
pub mod patchify;
pub mod pipeline;
pub mod seed;
pub mod store;
pub mod synth;
pub mod tensor;
pub mod vit;

pub use error::{Error, Result};
pub use tensor::ImageTensor;
