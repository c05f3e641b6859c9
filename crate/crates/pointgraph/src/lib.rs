//! Point-cloud classification with graphs built in a learned feature space.
//!
//! The pipeline: sample clouds from triangle meshes (or generate synthetic
//! shapes), map each point through a small MLP, connect every point to its k
//! nearest neighbors in the mapped space, run T edge-featured message-passing
//! blocks over that graph, max-pool a fused per-node representation, and
//! classify. A Kruskal-stress penalty can pull the mapping toward an isometry
//! of the input so the learned graph stays close to the spatial one.
//!
//! Everything is double precision with hand-written reverse-mode gradients,
//! seeded end to end with [`rand_chacha::ChaCha8Rng`], and deterministic at
//! the byte level for a fixed configuration and seed.

pub mod checkpoint;
pub mod cloud;
pub mod config;
pub mod dataset;
pub mod harness;
pub mod knn;
pub mod mesh;
pub mod model;
pub mod nn;
pub mod project;
pub mod stress;
pub mod synth;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointError};
pub use cloud::{CloudError, PointCloud};
pub use config::{load_config, save_config, ConfigError, DatasetConfig, ExperimentConfig};
pub use dataset::{load_dataset, DatasetError, DatasetSplit, SplitKind};
pub use harness::{
    evaluate, lr_schedule, seed_average, sweep, train, AggregateMetrics, EpochRecord, EvalMetrics,
    HarnessError, RunMetrics, SweepAxis, SweepRow, SweepTable, TrainOutput,
};
pub use knn::{
    knn_brute, knn_kdtree, shared_edge_percentage, DirectedGraph, FeatureSet, GraphError, KdTree,
};
pub use mesh::{parse_off, sample_surface, write_off, MeshError, TriangleMesh};
pub use model::{
    backward, forward, ForwardCaches, GradBundle, GraphMode, ModelDims, ModelError, ModelParams,
    ModelWidths,
};
pub use nn::{finite_diff_check, softmax_cross_entropy, AdamState, Mlp, MlpTape, NnError};
pub use project::{project, Projection, ProjectError, ProjectedPoint};
pub use stress::{
    combined_loss, pairwise_distances, stress, stress_squared_grad, StressError, StressGrad,
    StressValue,
};
pub use synth::{generate_synthetic, SynthError, SyntheticSpec};
