//! Analytic models, planners, and deterministic message-level simulators for
//! hybrid tensor/expert/data-parallel neural-network training.
//!
//! The crate is organized around a single decomposition type
//! ([`ParallelConfig`]) that every model consumes:
//!
//! - [`config`] / [`grid`]: decomposition validation and the 2D rank grid
//!   topology with its communicator groups.
//! - [`memory`]: parameter-split and per-GPU memory accounting for
//!   optimizer-state sharding, including the transient optimizer spike.
//! - [`volume`]: closed-form communication-volume models (ring all-reduce
//!   lower bound, per-layer 2D tensor-parallel volumes, whole-network
//!   transformer/U-Net models, weak-scaling curves).
//! - [`planner`]: enumeration of GPU decompositions and selection of
//!   communication-optimal, memory-feasible plans.
//! - [`simnet`]: exact byte counting for collectives plus a two-stream
//!   timeline scheduler for compute/communication overlap.
//! - [`tpsim`]: numerical execution of the 2D tensor-parallel FC
//!   forward/backward on the simulated grid, checked against serial matmul.
//! - [`moesim`]: communication pattern of one MoE layer under combined
//!   tensor + expert parallelism, with duplicate-token dropping and
//!   communication-aware checkpointing as toggleable variants.
//! - [`tiledopt`]: desk-scale mixed-precision optimizer with a tiled 32-bit
//!   gradient upcast buffer.
//! - [`fixtures`]: canonical named configurations used by tests and docs.

pub mod config;
pub mod exact;
pub mod fixtures;
pub mod grid;
pub mod memory;
pub mod moesim;
pub mod planner;
pub mod simnet;
pub mod tiledopt;
pub mod tpsim;
pub mod volume;

pub use config::{ConfigError, ModelSpec, ParallelConfig};
pub use exact::{Exact, Rat};
pub use grid::{Coord, GridError, Neighbors, RankGrid};
pub use memory::{MemoryReport, ParamSplit};
pub use planner::{Plan, PlanRequest};
pub use simnet::{CollectiveEvent, CollectiveKind, CostModel, Timeline, VolumeReport};
pub use volume::{LayerShape, VolumePrediction, WeakScalingCurve};
