//! Dynamic prior-knowledge distillation.
//!
//! The student's feature maps are partially replaced by teacher features
//! before a small transformation network predicts the teacher map. The
//! fraction replaced follows the measured student/teacher similarity (CKA).

pub mod ablation;
pub mod analysis;
pub mod archive;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod harness;
pub mod heatmap;
pub mod losses;
pub mod masking;
pub mod models;
pub mod seed;
pub mod similarity;
pub mod transform;

pub use error::{DpkError, Result};
