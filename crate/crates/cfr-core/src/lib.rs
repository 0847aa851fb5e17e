//! Coarse-to-fine multimodal reasoning engine for visual question
//! answering: predicate-guided information filtering, two-level
//! bilinear attention fusion, and an adaptive reasoning head, with
//! hand-derived gradients verified by finite differences.

pub mod data;
pub mod error;
pub mod filtering;
pub mod fusion;
pub mod gradcheck;
pub mod gru;
pub mod head;
pub mod matrix;
pub mod model;
pub mod text;
pub mod train;

pub use error::{CfrError, Result};
pub use matrix::Matrix;
pub use model::{AblationMode, CfrConfig, CfrParams, Explanation, TextContext};
