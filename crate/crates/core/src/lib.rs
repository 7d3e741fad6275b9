pub mod error;
pub mod nn;

pub use error::{Error, Result};
pub mod silhouette;
pub mod synth;
pub mod checkpoint;
pub mod keypose;
pub mod pose_graph;
pub mod occlusion;
pub mod cvae;
pub mod temporal;
pub mod recognizer;
pub mod evaluation;
pub mod pipeline;
pub mod config;
pub mod plot;
