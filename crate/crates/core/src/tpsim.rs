//! Desk-scale numerical execution of the 2D tensor-parallel fully connected
//! forward and backward passes on the simulated rank grid, verified against
//! a serial dense-matmul oracle.
//!
//! An untransposed layer consumes an input column-sharded by row index,
//! multiplies against the 2D-partitioned weights, all-reduces partial
//! outputs over column groups, and emits an output column-sharded by column
//! index. A transposed layer is the mirror image (weights partitioned
//! `G_c x G_r`, all-reduce over row groups), which is exactly what lets
//! alternating layers chain with zero redistribution communication.
//!
//! Reduction order inside the simulated all-reduce is fixed (ascending rank
//! id), so floating-point runs are deterministic; integer-valued inputs at
//! desk scale are exact in 64-bit reals, making oracle comparisons
//! bit-identical.

use crate::exact::rat;
use crate::grid::{Coord, RankGrid};
use crate::simnet::{run_collective, CollectiveEvent, CollectiveKind, SimError, VolumeReport};
use crate::volume::LayerShape;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum TpError {
    #[error("shape mismatch: expected {expected_rows}x{expected_cols}, got {rows}x{cols}")]
    ShapeMismatch {
        expected_rows: u64,
        expected_cols: u64,
        rows: u64,
        cols: u64,
    },
    #[error("dims ({rows}x{cols}) not divisible by grid factor {parts}")]
    IndivisibleShape { rows: u64, cols: u64, parts: u64 },
    #[error("backward called without a cached forward")]
    MissingCache,
    #[error("input layout {got:?} does not match the layout this layer consumes ({expected:?}); \
             a non-alternating transpose pattern requires redistribution")]
    LayoutMismatch { expected: Layout, got: Layout },
    #[error("matrix fixture has {data} entries for a {rows}x{cols} shape")]
    BadFixture { rows: u64, cols: u64, data: usize },
    #[error(transparent)]
    Sim(#[from] SimError),
}

/// Row-major dense matrix of 64-bit reals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub rows: u64,
    pub cols: u64,
    pub data: Vec<f64>,
}

impl Dense {
    pub fn new(rows: u64, cols: u64, data: Vec<f64>) -> Result<Self, TpError> {
        if data.len() as u64 != rows * cols {
            return Err(TpError::BadFixture {
                rows,
                cols,
                data: data.len(),
            });
        }
        Ok(Dense { rows, cols, data })
    }

    pub fn zeros(rows: u64, cols: u64) -> Self {
        Dense {
            rows,
            cols,
            data: vec![0.0; (rows * cols) as usize],
        }
    }

    pub fn ones(rows: u64, cols: u64) -> Self {
        Dense {
            rows,
            cols,
            data: vec![1.0; (rows * cols) as usize],
        }
    }

    pub fn at(&self, r: u64, c: u64) -> f64 {
        self.data[(r * self.cols + c) as usize]
    }

    pub fn set(&mut self, r: u64, c: u64, v: f64) {
        self.data[(r * self.cols + c) as usize] = v;
    }

    pub fn matmul(&self, rhs: &Dense) -> Result<Dense, TpError> {
        if self.cols != rhs.rows {
            return Err(TpError::ShapeMismatch {
                expected_rows: self.cols,
                expected_cols: rhs.cols,
                rows: rhs.rows,
                cols: rhs.cols,
            });
        }
        let mut out = Dense::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            for l in 0..self.cols {
                let a = self.at(i, l);
                if a == 0.0 {
                    continue;
                }
                for j in 0..rhs.cols {
                    let v = out.at(i, j) + a * rhs.at(l, j);
                    out.set(i, j, v);
                }
            }
        }
        Ok(out)
    }

    pub fn transpose(&self) -> Dense {
        let mut out = Dense::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.set(c, r, self.at(r, c));
            }
        }
        out
    }

    fn add_assign(&mut self, rhs: &Dense) {
        debug_assert_eq!((self.rows, self.cols), (rhs.rows, rhs.cols));
        for (a, b) in self.data.iter_mut().zip(&rhs.data) {
            *a += *b;
        }
    }

    /// Column block `idx` of `parts` equal vertical slices.
    fn col_block(&self, idx: u64, parts: u64) -> Dense {
        let w = self.cols / parts;
        let mut out = Dense::zeros(self.rows, w);
        for r in 0..self.rows {
            for c in 0..w {
                out.set(r, c, self.at(r, idx * w + c));
            }
        }
        out
    }

    /// Submatrix at block `(bi, bj)` of a `p x q` partition.
    fn block(&self, bi: u64, bj: u64, p: u64, q: u64) -> Dense {
        let h = self.rows / p;
        let w = self.cols / q;
        let mut out = Dense::zeros(h, w);
        for r in 0..h {
            for c in 0..w {
                out.set(r, c, self.at(bi * h + r, bj * w + c));
            }
        }
        out
    }
}

/// How a logical matrix is distributed over the tensor grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Layout {
    /// Column blocks indexed by the grid row coordinate (`G_r` blocks);
    /// rank `(i, j)` holds block `i`.
    ColShardByRow,
    /// Column blocks indexed by the grid column coordinate (`G_c` blocks);
    /// rank `(i, j)` holds block `j`.
    ColShardByCol,
    /// Full 2D partition; rank `(i, j)` holds block `(i, j)`, or `(j, i)`
    /// of a `G_c x G_r` partition when the layer is transposed.
    Grid2D,
}

/// A logically whole matrix stored as per-shard blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct ShardedMatrix {
    pub rows: u64,
    pub cols: u64,
    pub layout: Layout,
    /// Shard-major blocks: one per column shard, or row-major `(p, q)`
    /// blocks for `Grid2D`.
    pub blocks: Vec<Dense>,
    /// Block-grid dims: `(parts, 1)` for column shards, `(p, q)` for 2D.
    pub grid: (u64, u64),
}

impl ShardedMatrix {
    /// Shard a dense matrix into `parts` column blocks.
    pub fn shard_columns(m: &Dense, parts: u64, layout: Layout) -> Result<Self, TpError> {
        if m.cols % parts != 0 {
            return Err(TpError::IndivisibleShape {
                rows: m.rows,
                cols: m.cols,
                parts,
            });
        }
        let blocks = (0..parts).map(|i| m.col_block(i, parts)).collect();
        Ok(ShardedMatrix {
            rows: m.rows,
            cols: m.cols,
            layout,
            blocks,
            grid: (parts, 1),
        })
    }

    /// Partition a dense matrix into a `p x q` grid of blocks (row-major).
    pub fn shard_grid(m: &Dense, p: u64, q: u64) -> Result<Self, TpError> {
        if m.rows % p != 0 || m.cols % q != 0 {
            return Err(TpError::IndivisibleShape {
                rows: m.rows,
                cols: m.cols,
                parts: p * q,
            });
        }
        let mut blocks = Vec::with_capacity((p * q) as usize);
        for i in 0..p {
            for j in 0..q {
                blocks.push(m.block(i, j, p, q));
            }
        }
        Ok(ShardedMatrix {
            rows: m.rows,
            cols: m.cols,
            layout: Layout::Grid2D,
            blocks,
            grid: (p, q),
        })
    }

    pub fn block_at(&self, i: u64, j: u64) -> &Dense {
        &self.blocks[(i * self.grid.1 + j) as usize]
    }

    /// Reassemble the logical matrix from its blocks.
    pub fn assemble(&self) -> Dense {
        match self.layout {
            Layout::ColShardByRow | Layout::ColShardByCol => {
                let mut out = Dense::zeros(self.rows, self.cols);
                let w = self.cols / self.grid.0;
                for (idx, b) in self.blocks.iter().enumerate() {
                    for r in 0..b.rows {
                        for c in 0..b.cols {
                            out.set(r, idx as u64 * w + c, b.at(r, c));
                        }
                    }
                }
                out
            }
            Layout::Grid2D => {
                let (p, q) = self.grid;
                let h = self.rows / p;
                let w = self.cols / q;
                let mut out = Dense::zeros(self.rows, self.cols);
                for i in 0..p {
                    for j in 0..q {
                        let b = self.block_at(i, j);
                        for r in 0..h {
                            for c in 0..w {
                                out.set(i * h + r, j * w + c, b.at(r, c));
                            }
                        }
                    }
                }
                out
            }
        }
    }
}

/// One FC layer: the 2D-sharded weights plus the forward cache the backward
/// pass consumes.
#[derive(Debug, Clone)]
pub struct LayerState {
    pub shape: LayerShape,
    pub weights: ShardedMatrix,
    cache: Option<ShardedMatrix>,
}

impl LayerState {
    /// Shard a dense `k x n` weight matrix for the grid. Transposed layers
    /// partition as `G_c x G_r` with rank `(i, j)` owning block `(j, i)`.
    pub fn new(shape: LayerShape, weights: &Dense, grid: &RankGrid) -> Result<Self, TpError> {
        if (weights.rows, weights.cols) != (shape.k, shape.n) {
            return Err(TpError::ShapeMismatch {
                expected_rows: shape.k,
                expected_cols: shape.n,
                rows: weights.rows,
                cols: weights.cols,
            });
        }
        let cfg = grid.config();
        let (p, q) = if shape.transposed {
            (cfg.tensor_cols, cfg.tensor_rows)
        } else {
            (cfg.tensor_rows, cfg.tensor_cols)
        };
        Ok(LayerState {
            shape,
            weights: ShardedMatrix::shard_grid(weights, p, q)?,
            cache: None,
        })
    }

    /// The input layout this layer consumes.
    pub fn input_layout(&self) -> Layout {
        if self.shape.transposed {
            Layout::ColShardByCol
        } else {
            Layout::ColShardByRow
        }
    }

    /// The output layout this layer produces.
    pub fn output_layout(&self) -> Layout {
        if self.shape.transposed {
            Layout::ColShardByRow
        } else {
            Layout::ColShardByCol
        }
    }
}

fn layout_compatible(expected: Layout, got: Layout, grid: &RankGrid) -> bool {
    // on a degenerate 1x1 tensor grid both column layouts are one whole block
    expected == got
        || (grid.config().tensor_rows == 1
            && grid.config().tensor_cols == 1
            && got != Layout::Grid2D
            && expected != Layout::Grid2D)
}

/// Ranks of tensor-grid column `j` (data/expert coordinate 0).
fn column_group(grid: &RankGrid, j: u64) -> Vec<u64> {
    (0..grid.config().tensor_rows)
        .map(|i| {
            grid.rank_of(Coord {
                expert: 0,
                data: 0,
                row: i,
                col: j,
            })
        })
        .collect()
}

/// Ranks of tensor-grid row `i` (data/expert coordinate 0).
fn row_group(grid: &RankGrid, i: u64) -> Vec<u64> {
    (0..grid.config().tensor_cols)
        .map(|j| {
            grid.rank_of(Coord {
                expert: 0,
                data: 0,
                row: i,
                col: j,
            })
        })
        .collect()
}

/// Simulated all-reduce over one rank group: sums the partial blocks in
/// ascending rank order and logs the collective.
fn allreduce_blocks(
    partials: Vec<Dense>,
    kind: CollectiveKind,
    group: Vec<u64>,
    elems: u64,
    element_bytes: u64,
    tag: &str,
    report: &mut VolumeReport,
) -> Result<Dense, TpError> {
    let mut acc = partials[0].clone();
    for p in &partials[1..] {
        acc.add_assign(p);
    }
    let event = CollectiveEvent::new(
        kind,
        group,
        rat((elems * element_bytes) as i128),
        tag,
    )?;
    run_collective(event, report)?;
    Ok(acc)
}

/// Forward pass of one FC layer: partial products per rank, one all-reduce
/// per output shard group, output re-sharded for the next layer.
pub fn fc_forward(
    layer: &mut LayerState,
    x: &ShardedMatrix,
    grid: &RankGrid,
    element_bytes: u64,
    tag: &str,
    report: &mut VolumeReport,
) -> Result<ShardedMatrix, TpError> {
    let expected = layer.input_layout();
    if !layout_compatible(expected, x.layout, grid) {
        return Err(TpError::LayoutMismatch {
            expected,
            got: x.layout,
        });
    }
    if (x.rows, x.cols) != (x.rows, layer.shape.k) {
        return Err(TpError::ShapeMismatch {
            expected_rows: x.rows,
            expected_cols: layer.shape.k,
            rows: x.rows,
            cols: x.cols,
        });
    }
    let (p, q) = layer.weights.grid; // shard count of input, of output
    if x.grid.0 != p {
        return Err(TpError::IndivisibleShape {
            rows: x.rows,
            cols: x.cols,
            parts: p,
        });
    }
    let kind = if layer.shape.transposed {
        CollectiveKind::AllReduceRow
    } else {
        CollectiveKind::AllReduceCol
    };
    let out_cols = layer.shape.n / q;
    let mut out_blocks = Vec::with_capacity(q as usize);
    for out_idx in 0..q {
        let partials: Vec<Dense> = (0..p)
            .map(|in_idx| x.blocks[in_idx as usize].matmul(layer.weights.block_at(in_idx, out_idx)))
            .collect::<Result<_, _>>()?;
        let group = if layer.shape.transposed {
            row_group(grid, out_idx)
        } else {
            column_group(grid, out_idx)
        };
        let y = allreduce_blocks(
            partials,
            kind,
            group,
            x.rows * out_cols,
            element_bytes,
            &format!("{tag}/fwd"),
            report,
        )?;
        out_blocks.push(y);
    }
    layer.cache = Some(x.clone());
    Ok(ShardedMatrix {
        rows: x.rows,
        cols: layer.shape.n,
        layout: layer.output_layout(),
        blocks: out_blocks,
        grid: (q, 1),
    })
}

/// Backward pass: `dX` via one all-reduce per input shard group, `dW`
/// computed entirely locally from the cached input.
pub fn fc_backward(
    layer: &mut LayerState,
    dy: &ShardedMatrix,
    grid: &RankGrid,
    element_bytes: u64,
    tag: &str,
    report: &mut VolumeReport,
) -> Result<(ShardedMatrix, ShardedMatrix), TpError> {
    let x = layer.cache.take().ok_or(TpError::MissingCache)?;
    let expected = layer.output_layout();
    if !layout_compatible(expected, dy.layout, grid) {
        return Err(TpError::LayoutMismatch {
            expected,
            got: dy.layout,
        });
    }
    if (dy.rows, dy.cols) != (x.rows, layer.shape.n) {
        return Err(TpError::ShapeMismatch {
            expected_rows: x.rows,
            expected_cols: layer.shape.n,
            rows: dy.rows,
            cols: dy.cols,
        });
    }
    let (p, q) = layer.weights.grid;
    let kind = if layer.shape.transposed {
        CollectiveKind::AllReduceCol
    } else {
        CollectiveKind::AllReduceRow
    };
    // dX_in = sum over out shards of dY_out * W_{in,out}^T
    let in_cols = layer.shape.k / p;
    let mut dx_blocks = Vec::with_capacity(p as usize);
    for in_idx in 0..p {
        let partials: Vec<Dense> = (0..q)
            .map(|out_idx| {
                dy.blocks[out_idx as usize]
                    .matmul(&layer.weights.block_at(in_idx, out_idx).transpose())
            })
            .collect::<Result<_, _>>()?;
        let group = if layer.shape.transposed {
            column_group(grid, in_idx)
        } else {
            row_group(grid, in_idx)
        };
        let dx = allreduce_blocks(
            partials,
            kind,
            group,
            dy.rows * in_cols,
            element_bytes,
            &format!("{tag}/bwd"),
            report,
        )?;
        dx_blocks.push(dx);
    }
    let dx = ShardedMatrix {
        rows: dy.rows,
        cols: layer.shape.k,
        layout: layer.input_layout(),
        blocks: dx_blocks,
        grid: (p, 1),
    };
    // dW_{in,out} = X_in^T * dY_out, local to each rank, no communication
    let mut dw_blocks = Vec::with_capacity((p * q) as usize);
    for in_idx in 0..p {
        for out_idx in 0..q {
            dw_blocks.push(
                x.blocks[in_idx as usize]
                    .transpose()
                    .matmul(&dy.blocks[out_idx as usize])?,
            );
        }
    }
    let dw = ShardedMatrix {
        rows: layer.shape.k,
        cols: layer.shape.n,
        layout: Layout::Grid2D,
        blocks: dw_blocks,
        grid: (p, q),
    };
    Ok((dx, dw))
}

/// Forward-chain several layers. Alternating transposed layers consume each
/// other's output layouts directly; a non-alternating pattern surfaces as
/// [`TpError::LayoutMismatch`] — the detection mechanism for layouts that
/// would need redistribution communication.
pub fn chain_layers(
    layers: &mut [LayerState],
    x0: &ShardedMatrix,
    grid: &RankGrid,
    element_bytes: u64,
    report: &mut VolumeReport,
) -> Result<ShardedMatrix, TpError> {
    let mut x = x0.clone();
    for (idx, layer) in layers.iter_mut().enumerate() {
        x = fc_forward(layer, &x, grid, element_bytes, &format!("layer{idx}"), report)?;
    }
    Ok(x)
}

/// Max relative error of the parallel backward gradients against central
/// finite differences of the scalar loss `sum(Y)`.
pub fn finite_difference_check(
    shape: LayerShape,
    x: &Dense,
    w: &Dense,
    grid: &RankGrid,
    epsilon: f64,
) -> Result<f64, TpError> {
    let run = |w: &Dense| -> Result<f64, TpError> {
        let mut report = VolumeReport::new();
        let mut layer = LayerState::new(shape, w, grid)?;
        let xs = ShardedMatrix::shard_columns(x, layer.weights.grid.0, layer.input_layout())?;
        let y = fc_forward(&mut layer, &xs, grid, 8, "fd", &mut report)?;
        Ok(y.assemble().data.iter().sum())
    };
    // analytic gradients
    let mut report = VolumeReport::new();
    let mut layer = LayerState::new(shape, w, grid)?;
    let xs = ShardedMatrix::shard_columns(x, layer.weights.grid.0, layer.input_layout())?;
    let y = fc_forward(&mut layer, &xs, grid, 8, "fd", &mut report)?;
    let ones = Dense::ones(y.rows, y.cols);
    let dy = ShardedMatrix::shard_columns(&ones, y.grid.0, y.layout)?;
    let (dx, dw) = fc_backward(&mut layer, &dy, grid, 8, "fd", &mut report)?;
    let dw_full = dw.assemble();
    let dx_full = dx.assemble();

    let mut max_rel = 0.0f64;
    let mut check = |analytic: f64, numeric: f64| {
        let denom = analytic.abs().max(numeric.abs()).max(1.0);
        max_rel = max_rel.max((analytic - numeric).abs() / denom);
    };
    for r in 0..w.rows {
        for c in 0..w.cols {
            let mut wp = w.clone();
            wp.set(r, c, w.at(r, c) + epsilon);
            let lp = run(&wp)?;
            wp.set(r, c, w.at(r, c) - epsilon);
            let lm = run(&wp)?;
            check(dw_full.at(r, c), (lp - lm) / (2.0 * epsilon));
        }
    }
    let run_x = |x2: &Dense| -> Result<f64, TpError> {
        let mut report = VolumeReport::new();
        let mut layer = LayerState::new(shape, w, grid)?;
        let xs = ShardedMatrix::shard_columns(x2, layer.weights.grid.0, layer.input_layout())?;
        let y = fc_forward(&mut layer, &xs, grid, 8, "fd", &mut report)?;
        Ok(y.assemble().data.iter().sum())
    };
    for r in 0..x.rows {
        for c in 0..x.cols {
            let mut xp = x.clone();
            xp.set(r, c, x.at(r, c) + epsilon);
            let lp = run_x(&xp)?;
            xp.set(r, c, x.at(r, c) - epsilon);
            let lm = run_x(&xp)?;
            check(dx_full.at(r, c), (lp - lm) / (2.0 * epsilon));
        }
    }
    Ok(max_rel)
}

/// Load a dense matrix from a JSON object `{rows, cols, data}`.
pub fn dense_from_json(json: &str) -> Result<Dense, TpError> {
    let m: Dense = serde_json::from_str(json).map_err(|_| TpError::BadFixture {
        rows: 0,
        cols: 0,
        data: 0,
    })?;
    Dense::new(m.rows, m.cols, m.data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ParallelConfig;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn grid(r: u64, c: u64) -> RankGrid {
        RankGrid::new(ParallelConfig::dense(1, r, c)).unwrap()
    }

    fn random_int_matrix(rng: &mut StdRng, rows: u64, cols: u64) -> Dense {
        let data = (0..rows * cols)
            .map(|_| rng.gen_range(-8..=8) as f64)
            .collect();
        Dense::new(rows, cols, data).unwrap()
    }

    fn forward_full(
        shape: LayerShape,
        x: &Dense,
        w: &Dense,
        g: &RankGrid,
        report: &mut VolumeReport,
    ) -> (LayerState, ShardedMatrix) {
        let mut layer = LayerState::new(shape, w, g).unwrap();
        let xs = ShardedMatrix::shard_columns(x, layer.weights.grid.0, layer.input_layout()).unwrap();
        let y = fc_forward(&mut layer, &xs, g, 2, "l0", report).unwrap();
        (layer, y)
    }

    #[test]
    fn hand_evaluated_forward() {
        // X = [[1, 2]], W = [[3, 4], [5, 6]] on a 2x2 grid
        let g = grid(2, 2);
        let x = Dense::new(1, 2, vec![1.0, 2.0]).unwrap();
        let w = Dense::new(2, 2, vec![3.0, 4.0, 5.0, 6.0]).unwrap();
        let mut report = VolumeReport::new();
        let (_, y) = forward_full(LayerShape::new(2, 2), &x, &w, &g, &mut report);
        assert_eq!(y.assemble(), Dense::new(1, 2, vec![13.0, 16.0]).unwrap());
        // partial on (0,0): 1*3 = 3; on (1,0): 2*5 = 10; column sum 13
        assert_eq!(report.events.len(), 2);
    }

    #[test]
    fn hand_evaluated_backward() {
        let g = grid(2, 2);
        let x = Dense::new(1, 2, vec![1.0, 2.0]).unwrap();
        let w = Dense::new(2, 2, vec![3.0, 4.0, 5.0, 6.0]).unwrap();
        let mut report = VolumeReport::new();
        let (mut layer, y) = forward_full(LayerShape::new(2, 2), &x, &w, &g, &mut report);
        let ones = Dense::ones(1, 2);
        let dy = ShardedMatrix::shard_columns(&ones, y.grid.0, y.layout).unwrap();
        let (dx, dw) = fc_backward(&mut layer, &dy, &g, 2, "l0", &mut report).unwrap();
        assert_eq!(dx.assemble(), Dense::new(1, 2, vec![7.0, 11.0]).unwrap());
        assert_eq!(
            dw.assemble(),
            Dense::new(2, 2, vec![1.0, 1.0, 2.0, 2.0]).unwrap()
        );
    }

    #[test]
    fn zero_upstream_gradient() {
        let g = grid(2, 2);
        let x = Dense::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let w = Dense::new(2, 2, vec![3.0, 4.0, 5.0, 6.0]).unwrap();
        let mut report = VolumeReport::new();
        let (mut layer, y) = forward_full(LayerShape::new(2, 2), &x, &w, &g, &mut report);
        let dy = ShardedMatrix::shard_columns(&Dense::zeros(2, 2), y.grid.0, y.layout).unwrap();
        let (dx, dw) = fc_backward(&mut layer, &dy, &g, 2, "l0", &mut report).unwrap();
        assert_eq!(dx.assemble(), Dense::zeros(2, 2));
        assert_eq!(dw.assemble(), Dense::zeros(2, 2));
    }

    #[test]
    fn singleton_grid_no_communication() {
        let g = grid(1, 1);
        let x = Dense::new(2, 3, vec![1.0; 6]).unwrap();
        let w = Dense::new(3, 2, vec![2.0; 6]).unwrap();
        let mut report = VolumeReport::new();
        let (_, y) = forward_full(LayerShape::new(3, 2), &x, &w, &g, &mut report);
        assert_eq!(y.assemble(), x.matmul(&w).unwrap());
        assert_eq!(report.rank_total(0), rat(0));
    }

    #[test]
    fn oracle_equivalence_random_grids() {
        let mut rng = StdRng::seed_from_u64(7);
        for (r, c) in [(1u64, 2u64), (2, 1), (2, 2), (2, 4), (4, 2), (4, 4)] {
            for transposed in [false, true] {
                let (k, n) = (8, 8);
                let b = 4;
                let shape = if transposed {
                    LayerShape::transposed(k, n)
                } else {
                    LayerShape::new(k, n)
                };
                let g = grid(r, c);
                let x = random_int_matrix(&mut rng, b, k);
                let w = random_int_matrix(&mut rng, k, n);
                let mut report = VolumeReport::new();
                let (mut layer, y) = forward_full(shape, &x, &w, &g, &mut report);
                assert_eq!(y.assemble(), x.matmul(&w).unwrap(), "fwd {r}x{c} T={transposed}");
                let dyd = random_int_matrix(&mut rng, b, n);
                let dy = ShardedMatrix::shard_columns(&dyd, y.grid.0, y.layout).unwrap();
                let (dx, dw) = fc_backward(&mut layer, &dy, &g, 2, "l0", &mut report).unwrap();
                assert_eq!(dx.assemble(), dyd.matmul(&w.transpose()).unwrap());
                assert_eq!(dw.assemble(), x.transpose().matmul(&dyd).unwrap());
            }
        }
    }

    #[test]
    fn communication_matches_volume_model() {
        use crate::volume::layer_volume;
        let mut rng = StdRng::seed_from_u64(11);
        for (r, c) in [(2u64, 2u64), (2, 4), (4, 2)] {
            let g = grid(r, c);
            let cfg = *g.config();
            let (b, k, n) = (8, 16, 8);
            let x = random_int_matrix(&mut rng, b, k);
            let w = random_int_matrix(&mut rng, k, n);
            let mut report = VolumeReport::new();
            let (mut layer, y) = forward_full(LayerShape::new(k, n), &x, &w, &g, &mut report);
            let dy = ShardedMatrix::shard_columns(&Dense::ones(b, n), y.grid.0, y.layout).unwrap();
            fc_backward(&mut layer, &dy, &g, 2, "l0", &mut report).unwrap();
            let predict = layer_volume(LayerShape::new(k, n), &cfg, b).unwrap();
            assert_eq!(
                report.rank_bytes(0, CollectiveKind::AllReduceCol),
                predict.v_fp.0 * rat(2)
            );
            assert_eq!(
                report.rank_bytes(0, CollectiveKind::AllReduceRow),
                predict.v_bp.0 * rat(2)
            );
        }
    }

    #[test]
    fn alternating_chain_no_redistribution() {
        let g = grid(2, 2);
        let mut rng = StdRng::seed_from_u64(3);
        let x0 = random_int_matrix(&mut rng, 4, 4);
        let mut layers = Vec::new();
        let mut serial = x0.clone();
        for i in 0..2u64 {
            let w = random_int_matrix(&mut rng, 4, 4);
            serial = serial.matmul(&w).unwrap();
            let shape = if i % 2 == 0 {
                LayerShape::new(4, 4)
            } else {
                LayerShape::transposed(4, 4)
            };
            layers.push(LayerState::new(shape, &w, &g).unwrap());
        }
        let xs = ShardedMatrix::shard_columns(&x0, 2, Layout::ColShardByRow).unwrap();
        let mut report = VolumeReport::new();
        let y = chain_layers(&mut layers, &xs, &g, 2, &mut report).unwrap();
        assert_eq!(y.assemble(), serial);
        // one all-reduce per disjoint group per layer, nothing else
        assert_eq!(report.events.len(), 4);
        assert!(report
            .events
            .iter()
            .all(|e| matches!(e.kind, CollectiveKind::AllReduceCol | CollectiveKind::AllReduceRow)));
    }

    #[test]
    fn non_alternating_chain_is_rejected() {
        let g = grid(2, 2);
        let w = Dense::ones(4, 4);
        let mut layers = vec![
            LayerState::new(LayerShape::new(4, 4), &w, &g).unwrap(),
            LayerState::new(LayerShape::new(4, 4), &w, &g).unwrap(),
        ];
        let xs = ShardedMatrix::shard_columns(&Dense::ones(4, 4), 2, Layout::ColShardByRow).unwrap();
        let mut report = VolumeReport::new();
        assert!(matches!(
            chain_layers(&mut layers, &xs, &g, 2, &mut report),
            Err(TpError::LayoutMismatch { .. })
        ));
    }

    #[test]
    fn backward_without_forward_fails() {
        let g = grid(2, 2);
        let w = Dense::ones(4, 4);
        let mut layer = LayerState::new(LayerShape::new(4, 4), &w, &g).unwrap();
        let dy = ShardedMatrix::shard_columns(&Dense::ones(2, 4), 2, Layout::ColShardByCol).unwrap();
        let mut report = VolumeReport::new();
        assert!(matches!(
            fc_backward(&mut layer, &dy, &g, 2, "l0", &mut report),
            Err(TpError::MissingCache)
        ));
    }

    #[test]
    fn finite_difference_linear_layer() {
        let g = grid(2, 2);
        let mut rng = StdRng::seed_from_u64(5);
        let x = random_int_matrix(&mut rng, 4, 4);
        let w = random_int_matrix(&mut rng, 4, 4);
        let err = finite_difference_check(LayerShape::new(4, 4), &x, &w, &g, 1e-4).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn json_fixture_round_trip() {
        let m = dense_from_json(r#"{"rows":2,"cols":2,"data":[1,2,3,4]}"#).unwrap();
        assert_eq!(m.at(1, 0), 3.0);
        assert!(dense_from_json(r#"{"rows":2,"cols":2,"data":[1]}"#).is_err());
    }
}
