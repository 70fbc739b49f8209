//! segkit: a config-driven semantic segmentation micro-framework.
//!
//! The crate is layered bottom-up:
//!
//! - [`tensor`]: dense tensors with reverse-mode automatic differentiation.
//! - [`layers`], [`backbones`], [`heads`]: differentiable building blocks, feature
//!   extractors and segmentation heads, assembled into a [`model::SegModel`].
//! - [`registry`]: name-to-builder maps for models, backbones, losses, transforms and
//!   datasets.
//! - [`data`], [`training`], [`eval`]: ingestion and augmentation, the optimization loop
//!   with checkpoints, and mIoU evaluation.
//! - [`config`], [`cli`]: the YAML-subset run configuration and command-line entry points.

pub mod backbones;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod heads;
pub mod layers;
pub mod model;
pub mod registry;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Element, Graph, Mode, Tensor, Var};
