//! Audio-visual quadruped motion capture at desk scale.
//!
//! A parametric quadruped mesh, crop and full-frame cameras, a soft
//! silhouette rasterizer, the fitting losses, a small reverse-mode tape with
//! Adam, log-mel audio features, evaluation metrics, a synthetic gait
//! generator and fusion regressors that combine visual and audio evidence.

pub mod audio;
pub mod body;
pub mod camera;
pub mod cli;
pub mod data;
pub mod diffopt;
pub mod error;
pub mod gradsuite;
pub mod fusion;
pub mod losses;
pub mod metrics;
pub mod render;

pub use error::{Error, Result};
