//! Facial landmark localization on depth images.
//!
//! Two landmarkers share one pipeline (detect, preprocess to normal-z,
//! initialise from a mean shape, refine in K stages):
//!
//! * **GRID**: ridge-regression descent maps over HOG (or LBP) features, one
//!   cascade per pose subset, with a gating function that picks the cascade.
//! * **SMUF**: descent maps over learned binary codes, where each stage learns
//!   a sign-hash projection of depth-difference vectors jointly with its map.
//!
//! A deterministic synthetic depth-face generator, evaluation metrics and a
//! checksummed model container round the toolkit out.

pub mod cascade;
pub mod cli;
pub mod config;
pub mod detect;
pub mod error;
pub mod eval;
pub mod features;
pub mod gating;
pub mod image;
pub mod io;
pub mod linalg;
pub mod model_io;
pub mod pipeline;
pub mod preprocess;
pub mod rng;
pub mod smuf;
pub mod synth;
pub mod timing;

pub use error::{Error, Result};
pub use image::{DepthImage, FaceBox, LandmarkTable, Shape};
