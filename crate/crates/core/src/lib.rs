//! Language-guided diffusion over bounding boxes for visual grounding.
//!
//! A decoder learns to refine noisy boxes toward the regions described by a
//! set of phrases. Training diffuses padded ground-truth box sets forward in
//! time; inference starts from Gaussian boxes and walks a DDIM reverse plan.
//! Scenes, phrase embeddings and region features come from a synthetic
//! generator so the whole pipeline runs without pretrained encoders.

pub mod autodiff;
pub mod config;
pub mod diffusion;
pub mod engine;
pub mod error;
pub mod geometry;
pub mod io;
pub mod model;
pub mod objective;
pub mod pipeline;
pub mod proposals;
pub mod synthetic;

pub use error::{Error, Result};
