pub mod analysis;
pub mod config;
pub mod gdn;
pub mod graph;
pub mod metrics;
pub mod models;
pub mod splits;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use graph::MultiRelationGraph;
pub use tensor::Tensor;
