//! Semi-supervised 2D segmentation by joint training of a segmentation
//! network and a multi-resolution registration network, fused through soft
//! pseudo-masks.

pub mod config;
pub mod dataset;
pub mod error;
pub mod graph;
pub mod losses;
pub mod metrics;
pub mod models;
pub mod nn;
pub mod panel;
pub mod plane;
pub mod pseudo;
pub mod report;
pub mod stats;
pub mod tensor;
pub mod trainer;
pub mod warp;

pub use error::{Error, Result};
pub use plane::{BinaryMask, GrayImage, Plane, SoftMask};
