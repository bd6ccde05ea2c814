//! Sparse convolutional networks with stochastically realized connectivity.
//!
//! The crate implements networks whose conv and dense weights are gated by
//! binary connection masks sampled from a calibrated Gaussian probability
//! model over each receptive field, plus everything needed to run a
//! conv-transfer experiment end to end: hand-written forward/backward
//! passes, SGD training with frozen-layer support, bit-exact checkpoints,
//! dataset ingestion (CIFAR-10 / STL-10 binary formats), and a synthetic
//! two-domain benchmark.
//!
//! Everything is deterministic given explicit seeds: masks and weight
//! initialization come from a counter-based splitmix64 stream, so identical
//! seeds reproduce identical networks, logs, and checkpoints bit for bit.

pub mod connectivity;
pub mod data;
pub mod network;
pub mod rng;
pub mod tensor;
pub mod training;
pub mod transfer;

pub use connectivity::{
    probability_map, realize_conv_mask, realize_dense_mask, ConnectivityError, ConnectivityMask,
    GaussianConnectivityModel, ProbabilityMap,
};
pub use data::{
    generate_synthetic_domains, load_cifar10, load_stl10, read_records, write_records, DataError,
    Dataset, SyntheticDomains,
};
pub use network::{
    build_paper_architecture, loss_forward, Layer, LayerGrads, Network, NetworkError,
    SparseConvLayer, SparseDenseLayer,
};
pub use tensor::{Shape, Tensor, TensorError};
pub use training::{
    evaluate, freeze_report, train, EpochRecord, FreezeEntry, SgdConfig, TrainError, TrainingLog,
};
pub use transfer::{
    conv_payload_digests, load, run_paper_protocol, save, transfer_conv, ProtocolOutcome,
    ProtocolSeeds, TransferError,
};
