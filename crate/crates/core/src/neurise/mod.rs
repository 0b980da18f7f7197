//! Learned single-site conditionals.

pub mod adam;
pub mod checkpoint;
pub mod embedding;
pub mod mlp;
pub mod model;
pub mod search;
pub mod train;

pub use embedding::{encode_input, phi};
pub use model::{loss_gradient, neurise_loss, ConditionalModel, Topology, TrainingPair};
pub use search::{random_search, SearchResult};
pub use train::{train, TrainConfig};
