//! Scene-level 3D affordance segmentation.
//!
//! The pipeline ranks RGB-D frames against a task instruction, asks a vision-language
//! bridge for manipulable points and 2D masks on the chosen frames, lifts those masks
//! into the point cloud, and refines the lifted region with a point-transformer network.

pub mod autodiff;
pub mod bridge;
pub mod lift;
pub mod metrics;
pub mod net;
pub mod pipeline;
pub mod scene;
pub mod select;
pub mod spatial;
pub mod synth;
