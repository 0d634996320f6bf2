//! Analytic per-GPU memory accounting for mixed-precision training with
//! optimizer-state sharding across data-parallel ranks.
//!
//! Mixed-precision byte constants (fixed, not configurable): 2 bytes each for
//! the 16-bit parameters and gradients (4 bytes persistent per parameter),
//! and 12 bytes of sharded optimizer state per parameter (4 for the 32-bit
//! master copy, 8 for the two moment vectors). All formula evaluation uses
//! exact rational arithmetic; byte outputs round half-up at the boundary.

use crate::config::ParallelConfig;
use crate::exact::{frac, rat, round_half_up, Exact, Rat};
use num_traits::Zero;
use serde::Serialize;
use std::collections::BTreeMap;
use thiserror::Error;

/// Persistent bytes per parameter (16-bit weights + 16-bit gradients).
pub const PERSISTENT_BYTES_PER_PARAM: u64 = 4;
/// Sharded optimizer-state bytes per parameter (32-bit master + two moments).
pub const OPTIMIZER_BYTES_PER_PARAM: u64 = 12;
/// Bytes per element of the transient 32-bit gradient upcast buffer.
pub const UPCAST_BYTES_PER_PARAM: u64 = 4;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MemError {
    #[error("base parameter count must be positive")]
    ZeroParams,
    #[error("expert count must be at least 1")]
    ZeroExperts,
    #[error("config expert degree {config} does not match split expert count {split}")]
    ExpertMismatch { config: u64, split: u64 },
    #[error("tile size must be at least 1")]
    ZeroTileSize,
    #[error("invalid decomposition: {0}")]
    BadConfig(#[from] crate::config::ConfigError),
}

/// Expert / non-expert parameter split for a sparsely activated model where
/// every alternate feed-forward block is an expert block.
///
/// With two thirds of the dense parameters in feed-forward blocks and half of
/// those blocks expert-designated:
/// `p_e = (E/3) * p_base`, `p_ne = (2/3) * p_base`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSplit {
    pub expert_params: Rat,
    pub nonexpert_params: Rat,
    pub base_params: u64,
    pub experts: u64,
}

impl ParamSplit {
    pub fn total_params(&self) -> Rat {
        self.expert_params + self.nonexpert_params
    }
}

/// Split a base-model parameter count into expert and non-expert groups.
pub fn split_params(base_params: u64, experts: u64) -> Result<ParamSplit, MemError> {
    if base_params == 0 {
        return Err(MemError::ZeroParams);
    }
    if experts == 0 {
        return Err(MemError::ZeroExperts);
    }
    let p = rat(base_params as i128);
    Ok(ParamSplit {
        expert_params: p * frac(experts as i128, 3),
        nonexpert_params: p * frac(2, 3),
        base_params,
        experts,
    })
}

/// The sharded-optimizer memory floor, broken into the expert and non-expert
/// terms so intermediates stay reportable.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Zero1Bound {
    /// `(4 + 12/G_data^ne) * p_ne / G_tensor`
    pub nonexpert_bytes: Rat,
    /// `(4 + 12/G_data^e) * p_e / (G_tensor * E)`
    pub expert_bytes: Rat,
    /// Effective data-parallel degree of the non-expert parameters.
    pub nonexpert_data_degree: u64,
    /// Effective data-parallel degree of the expert parameters.
    pub expert_data_degree: u64,
}

impl Zero1Bound {
    pub fn total(&self) -> Rat {
        self.nonexpert_bytes + self.expert_bytes
    }

    pub fn total_bytes(&self) -> u64 {
        round_half_up(self.total()) as u64
    }
}

/// Lower bound on per-GPU memory with stage-1 optimizer-state sharding.
///
/// Expert parameters see a reduced data-parallel degree
/// `G_data^e = G / (G_tensor * E)`; non-expert parameters see
/// `G_data^ne = G / G_tensor`. The total simplifies to
/// `4 * p_base / G_tensor + 4 * (E + 2) / G * p_base`.
pub fn zero1_lower_bound(cfg: &ParallelConfig, split: &ParamSplit) -> Result<Zero1Bound, MemError> {
    cfg.validate()?;
    if cfg.expert_degree != split.experts {
        return Err(MemError::ExpertMismatch {
            config: cfg.expert_degree,
            split: split.experts,
        });
    }
    let g_tensor = cfg.tensor_degree();
    // both divisions are exact for any valid decomposition
    let g_ne_data = cfg.total_gpus / g_tensor;
    let g_e_data = cfg.total_gpus / (g_tensor * cfg.expert_degree);
    let persist = rat(PERSISTENT_BYTES_PER_PARAM as i128);
    let opt = rat(OPTIMIZER_BYTES_PER_PARAM as i128);
    let nonexpert_bytes = (persist + opt / rat(g_ne_data as i128)) * split.nonexpert_params
        / rat(g_tensor as i128);
    let expert_bytes = (persist + opt / rat(g_e_data as i128)) * split.expert_params
        / rat((g_tensor * cfg.expert_degree) as i128);
    Ok(Zero1Bound {
        nonexpert_bytes,
        expert_bytes,
        nonexpert_data_degree: g_ne_data,
        expert_data_degree: g_e_data,
    })
}

/// Largest base model trainable in `mem_per_gpu` bytes at a given
/// tensor-parallel degree: `(G_tensor / 4) * mem_per_gpu` parameters.
pub fn max_base_model(mem_per_gpu: u64, g_tensor: u64) -> Rat {
    rat(g_tensor as i128) * rat(mem_per_gpu as i128) / rat(PERSISTENT_BYTES_PER_PARAM as i128)
}

/// Transient memory of the optimizer's 16-to-32-bit gradient upcast.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OptimizerSpike {
    /// Expert parameters whose optimizer step runs on one GPU:
    /// `p_e / (G_tensor * E * G_data^e)`.
    pub expert_shard_params: Rat,
    /// `4 * expert_shard_params` bytes.
    pub spike_untiled_bytes: Rat,
    /// `4 * min(tile_size, expert_shard_params)` bytes.
    pub spike_tiled_bytes: Rat,
    /// Upcast buffer for the non-expert shard, reported separately:
    /// `4 * p_ne / (G_tensor * G_data^ne)`.
    pub nonexpert_upcast_bytes: Rat,
}

/// Size of the optimizer-step memory spike, with and without tiling.
pub fn optimizer_spike(
    cfg: &ParallelConfig,
    split: &ParamSplit,
    tile_size: Option<u64>,
) -> Result<OptimizerSpike, MemError> {
    cfg.validate()?;
    if cfg.expert_degree != split.experts {
        return Err(MemError::ExpertMismatch {
            config: cfg.expert_degree,
            split: split.experts,
        });
    }
    if tile_size == Some(0) {
        return Err(MemError::ZeroTileSize);
    }
    let g_tensor = cfg.tensor_degree();
    let g_ne_data = cfg.total_gpus / g_tensor;
    let g_e_data = cfg.total_gpus / (g_tensor * cfg.expert_degree);
    let expert_shard =
        split.expert_params / rat((g_tensor * cfg.expert_degree * g_e_data) as i128);
    let upcast = rat(UPCAST_BYTES_PER_PARAM as i128);
    let spike_untiled = upcast * expert_shard;
    let spike_tiled = match tile_size {
        Some(ts) => upcast * expert_shard.min(rat(ts as i128)),
        None => spike_untiled,
    };
    let nonexpert_upcast =
        upcast * split.nonexpert_params / rat((g_tensor * g_ne_data) as i128);
    Ok(OptimizerSpike {
        expert_shard_params: expert_shard,
        spike_untiled_bytes: spike_untiled,
        spike_tiled_bytes: spike_tiled,
        nonexpert_upcast_bytes: nonexpert_upcast,
    })
}

/// Per-GPU memory report, all values in integer bytes (rounded half-up).
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct MemoryReport {
    pub per_gpu_lower_bound: u64,
    pub persistent_params: u64,
    pub optimizer_states: u64,
    pub spike_untiled: u64,
    pub spike_tiled: u64,
    pub expert_upcast_bytes: u64,
    pub nonexpert_upcast_bytes: u64,
    pub nonexpert_data_degree: u64,
    pub expert_data_degree: u64,
    /// Peak bytes per training phase.
    pub phases: BTreeMap<String, u64>,
}

/// Assemble the full per-GPU memory report for a decomposition.
pub fn memory_report(
    cfg: &ParallelConfig,
    split: &ParamSplit,
    tile_size: Option<u64>,
) -> Result<MemoryReport, MemError> {
    let bound = zero1_lower_bound(cfg, split)?;
    let spike = optimizer_spike(cfg, split, tile_size)?;
    let g_tensor = cfg.tensor_degree();
    let persistent = rat(PERSISTENT_BYTES_PER_PARAM as i128)
        * (split.nonexpert_params + split.expert_params / rat(cfg.expert_degree as i128))
        / rat(g_tensor as i128);
    let optimizer_states = bound.total() - persistent;
    let active_spike = if tile_size.is_some() {
        spike.spike_tiled_bytes
    } else {
        spike.spike_untiled_bytes
    };
    let mut phases = BTreeMap::new();
    phases.insert("forward".to_string(), round_half_up(persistent) as u64);
    phases.insert("backward".to_string(), round_half_up(persistent) as u64);
    phases.insert(
        "optimizer".to_string(),
        round_half_up(bound.total() + active_spike) as u64,
    );
    Ok(MemoryReport {
        per_gpu_lower_bound: bound.total_bytes(),
        persistent_params: round_half_up(persistent) as u64,
        optimizer_states: round_half_up(optimizer_states) as u64,
        spike_untiled: round_half_up(spike.spike_untiled_bytes) as u64,
        spike_tiled: round_half_up(spike.spike_tiled_bytes) as u64,
        expert_upcast_bytes: round_half_up(spike.spike_untiled_bytes) as u64,
        nonexpert_upcast_bytes: round_half_up(spike.nonexpert_upcast_bytes) as u64,
        nonexpert_data_degree: bound.nonexpert_data_degree,
        expert_data_degree: bound.expert_data_degree,
        phases,
    })
}

/// Report rationals as [`Exact`] for serialization elsewhere.
pub fn as_exact(r: Rat) -> Exact {
    Exact(r)
}

#[allow(unused)]
fn is_zero(r: &Rat) -> bool {
    r.is_zero()
}
