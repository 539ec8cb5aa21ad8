pub mod tensor;
pub mod nn;
pub mod cues;
pub mod fusion;
pub mod decoder;
pub mod metrics;
pub mod model;
pub mod harness;
