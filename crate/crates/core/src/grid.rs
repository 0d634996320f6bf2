//! Rank-id layout and communicator groups on the virtual 2D grid.
//!
//! Rank-id layout (fixed, because reports key on rank ids): the expert index
//! is the slowest-varying coordinate, then the data index, then row-major
//! `(row, col)` within a tensor grid:
//!
//! `rank = ((expert * G_data + data) * G_r + row) * G_c + col`

use crate::config::{ConfigError, ParallelConfig};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum GridError {
    #[error("rank {rank} out of range for {total} GPUs")]
    RankOutOfRange { rank: u64, total: u64 },
    #[error(transparent)]
    Config(#[from] ConfigError),
}

/// Coordinates of a rank: expert slice, data group, tensor-grid row/col.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Coord {
    pub expert: u64,
    pub data: u64,
    pub row: u64,
    pub col: u64,
}

/// Communicator membership for every collective the algorithms issue.
/// Each group contains the querying rank itself.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Neighbors {
    /// Ranks in the same grid column (fixed `col`, varying `row`).
    pub column_group: Vec<u64>,
    /// Ranks in the same grid row (fixed `row`, varying `col`).
    pub row_group: Vec<u64>,
    /// Ranks across expert slices with identical tensor/data coordinates.
    pub expert_group: Vec<u64>,
    /// Ranks across data groups with identical tensor/expert coordinates.
    pub data_group: Vec<u64>,
}

/// Bijection between rank ids `[0, G)` and coordinate tuples for a valid
/// decomposition. Immutable after construction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RankGrid {
    cfg: ParallelConfig,
}

impl RankGrid {
    pub fn new(cfg: ParallelConfig) -> Result<Self, GridError> {
        cfg.validate()?;
        Ok(RankGrid { cfg })
    }

    pub fn config(&self) -> &ParallelConfig {
        &self.cfg
    }

    pub fn total_ranks(&self) -> u64 {
        self.cfg.total_gpus
    }

    pub fn rank_of(&self, coord: Coord) -> u64 {
        let c = &self.cfg;
        ((coord.expert * c.data_degree + coord.data) * c.tensor_rows + coord.row) * c.tensor_cols
            + coord.col
    }

    pub fn coord_of(&self, rank: u64) -> Result<Coord, GridError> {
        let c = &self.cfg;
        if rank >= c.total_gpus {
            return Err(GridError::RankOutOfRange {
                rank,
                total: c.total_gpus,
            });
        }
        let col = rank % c.tensor_cols;
        let rest = rank / c.tensor_cols;
        let row = rest % c.tensor_rows;
        let rest = rest / c.tensor_rows;
        let data = rest % c.data_degree;
        let expert = rest / c.data_degree;
        Ok(Coord {
            expert,
            data,
            row,
            col,
        })
    }

    /// Communicator membership for each collective, from `rank`'s view.
    pub fn neighbors(&self, rank: u64) -> Result<Neighbors, GridError> {
        let me = self.coord_of(rank)?;
        let c = &self.cfg;
        let column_group = (0..c.tensor_rows)
            .map(|row| self.rank_of(Coord { row, ..me }))
            .collect();
        let row_group = (0..c.tensor_cols)
            .map(|col| self.rank_of(Coord { col, ..me }))
            .collect();
        let expert_group = (0..c.expert_degree)
            .map(|expert| self.rank_of(Coord { expert, ..me }))
            .collect();
        let data_group = (0..c.data_degree)
            .map(|data| self.rank_of(Coord { data, ..me }))
            .collect();
        Ok(Neighbors {
            column_group,
            row_group,
            expert_group,
            data_group,
        })
    }
}

/// See [`RankGrid::neighbors`].
pub fn grid_neighbors(grid: &RankGrid, rank: u64) -> Result<Neighbors, GridError> {
    grid.neighbors(rank)
}
