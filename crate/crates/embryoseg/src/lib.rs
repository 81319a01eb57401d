//! Coarse-to-fine volumetric segmentation of a small inner structure and a
//! large enclosing structure in 3D ultrasound-like images.
//!
//! The pipeline runs a low-resolution network over the whole volume to
//! jointly segment both objects, localizes each object with a fixed-size
//! bounding box centered on the probability-mass centroid of its up-sampled
//! probability map, and refines each object at full resolution from a
//! two-channel crop (image + probability). Refined maps are zero-padded back
//! to the full grid and fused into one label volume. Training is staged:
//! low-resolution network first, refinement networks with the first network
//! frozen, then joint end-to-end fine-tuning in which refinement gradients
//! flow back into the low-resolution network through the probability channel.

pub mod augment;
pub mod cascade;
pub mod cli;
pub mod config;
pub mod error;
pub mod grad;
pub mod io;
pub mod losses;
pub mod net;
pub mod phantom;
pub mod render;
pub mod trainer;
pub mod vol;

pub use error::{Result, SegError};
