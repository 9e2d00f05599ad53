//! Real-time multi-pipette tip localization.
//!
//! The pipeline mirrors the acquisition-to-coordinates dataflow:
//!
//! 1. [`synthdata`] renders labelled two-photon-style scenes (or reads a dataset
//!    written earlier).
//! 2. [`enhancer`] crops 80×80 patches around every tip, translates them with a
//!    CycleGAN generator towards the clean domain and pastes them back.
//! 3. [`localizer`] predicts a full-resolution tip [`heatmap`] with a patch-token
//!    attention encoder, then regresses tip coordinates from that heatmap with a
//!    residual decoder.
//! 4. [`trainer`] runs the three-stage schedule with the Dice + Hungarian
//!    objective from [`losses`], matching predictions to labels through
//!    [`assignment`].
//! 5. [`evaluation`] reports matched distances, Acc@e, heatmap IoU and latency;
//!    [`ablation`] compares the component toggles.

pub mod ablation;
pub mod assignment;
pub mod config;
pub mod enhancer;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod heatmap;
pub mod image;
pub mod localizer;
pub mod losses;
pub mod nn;
pub mod synthdata;
pub mod trainer;

pub use error::{Error, Result};
pub use geometry::Point;
pub use heatmap::Heatmap;
pub use image::GrayImage;
pub use synthdata::{Domain, LabeledScene};
