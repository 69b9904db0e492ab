//! Disentangled camera/time rotary attention for multi-view video diffusion.
//!
//! The crate covers camera geometry and Plücker ray maps, axis-factored
//! rotary embeddings, the camera fusion variants for self-attention, a
//! desk-scale rectified-flow transformer, a procedural 4D world to train it
//! on, multitask sampling, and image and trajectory metrics.

pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod episode;
pub mod camera_attention;
pub mod error;
pub mod evaluate;
pub mod geometry;
pub mod image;
pub mod io;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod rope;
pub mod tasking;
pub mod tensor;
pub mod train;
pub mod world;

pub use error::{Error, Result};
