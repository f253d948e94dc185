//! Dense upscaled multibox detector trainable from scratch on a CPU, with
//! streaming replay, live-capture augmentation and evaluation tooling.

pub mod augment;
pub mod checkpoint;
pub mod dataset;
pub mod detector;
pub mod geometry;
pub mod graph;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod preprocess;
pub mod stream;
pub mod tensor;
pub mod train;

pub use geometry::{BBox, Detection};
pub use graph::{Graph, NodeId};
pub use model::{build_dunet, Dunet, DunetConfig};
pub use tensor::{Mode, Tensor};
