//! PPCNN++: the PointNet++-shaped encoder/decoder assembled from PPConv
//! layers, plus sampling, interpolation, the training loss, checkpoints and
//! the optimizer.

pub mod checkpoint;
pub mod network;
pub mod optim;
pub mod sampling;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use network::{
    build_network, cross_entropy_loss, ForwardTrace, FpSpec, ModelSpec, Network, NetworkSpec,
    PPConvTemplate, PpLayersSpec, SaSpec,
};
pub use optim::{Adam, OptimizerConfig};
pub use sampling::{ball_query, farthest_point_sampling, three_nn_interpolate, three_nn_weights};
