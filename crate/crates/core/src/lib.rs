//! Vascular-topology-guided toy segmentation pipeline.
//!
//! The crate covers the full computational chain: voxel phantoms and RVOL
//! file I/O ([`volume`]), the exact Euclidean distance transform ([`edt`]),
//! centerline skeletonization and keypoint sampling ([`skeleton`]), kNN vessel
//! graphs ([`vasgraph`]), a small reverse-mode tensor framework ([`tensor`]),
//! the structural contrastive loss with a memory bank ([`scl`]), the token
//! backbone with topology fusion and training ([`pipeline`]), and evaluation
//! metrics ([`metrics`]).

pub mod edt;
pub mod error;
pub mod jsonw;
pub mod metrics;
pub mod pipeline;
pub mod rng;
pub mod scl;
pub mod skeleton;
pub mod tensor;
pub mod vasgraph;
pub mod volume;

pub use edt::{brute_force_edt, edt_gradient, exact_edt, DistanceField};
pub use error::{Error, Result};
pub use metrics::{evaluate, MetricReport};
pub use pipeline::{ablate, infer, train, BackboneConfig, Fusion, TopoConfig, TrainConfig};
pub use scl::{
    class_centers, scl_loss, select_anchors, MemoryBank, MemoryStrategy, NegativeSet, SclConfig,
};
pub use skeleton::{sample_keypoints, skeletonize, KeypointSet, Skeleton};
pub use tensor::{grad_check, Graph, ParamStore, Tensor};
pub use vasgraph::{build_knn, init_node_features, normalize_adjacency, VesselGraph};
pub use volume::{connected_components, load_rvol, make_phantom, save_rvol};
pub use volume::{Connectivity, PhantomSpec, RvolVolume, Volume};
