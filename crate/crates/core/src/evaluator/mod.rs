//! Discrete evaluation networks built from genotypes, their training loop, metrics and
//! subject-independent split protocols.

mod metrics;
mod network;
mod protocol;
mod train;

pub use metrics::{evaluate, hardware_string, measure_fps, pool_confusions, predict, Metrics, Throughput, FPS_RUNS, FPS_WARMUP};
pub use network::{EvalCell, EvalNetwork, NetworkConfig};
pub use protocol::{split_protocol, Fold, Protocol};
pub use train::{build_network, train_model, EpochStats, ModelCheckpoint, TrainConfig};
