//! Desk-scale mixed-precision optimizer with a tiled 32-bit gradient upcast
//! buffer.
//!
//! The step keeps 32-bit master weights and moments, receives 16-bit (IEEE
//! half) gradients, and upcasts them to 32-bit before the update. The
//! untiled baseline materializes the whole upcast at once (4 bytes per
//! parameter); the tiled variant reuses one `tile_size` buffer across
//! contiguous tiles, capping the transient at `4 * tile_size` bytes. The
//! update rule is the standard decoupled-weight-decay adaptive-moment
//! method with bias correction; because it is element-wise, the tiled and
//! untiled paths are bit-identical by construction, and the tests assert
//! it.
//!
//! Transient memory is measured by an internal allocation accountant rather
//! than OS-level profiling, keeping the numbers deterministic and portable.

use half::f16;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde::Serialize;
use thiserror::Error;

/// Default tile size: 1.8 million parameters.
pub const DEFAULT_TILE_SIZE: u64 = 1_800_000;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum OptError {
    #[error("tile plan does not tile [0, {len}): ranges {ranges:?}")]
    BadTilePlan {
        len: u64,
        ranges: Vec<(u64, u64)>,
    },
    #[error("vector lengths differ: weights {weights}, grads {grads}, moments {m1}/{m2}")]
    LengthMismatch {
        weights: usize,
        grads: usize,
        m1: usize,
        m2: usize,
    },
    #[error("tile size must be at least 1")]
    ZeroTileSize,
}

/// Optimizer hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Hyper {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
}

impl Default for Hyper {
    fn default() -> Self {
        Hyper {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// One parameter group: 32-bit master weights and moments, 16-bit gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGroup {
    pub master_weights: Vec<f32>,
    pub grads_16: Vec<f16>,
    pub exp_avg: Vec<f32>,
    pub exp_avg_sq: Vec<f32>,
    pub step_count: u64,
}

impl ParamGroup {
    pub fn new(weights: Vec<f32>, grads: Vec<f16>) -> Result<Self, OptError> {
        let n = weights.len();
        if grads.len() != n {
            return Err(OptError::LengthMismatch {
                weights: n,
                grads: grads.len(),
                m1: n,
                m2: n,
            });
        }
        Ok(ParamGroup {
            master_weights: weights,
            grads_16: grads,
            exp_avg: vec![0.0; n],
            exp_avg_sq: vec![0.0; n],
            step_count: 0,
        })
    }

    /// Deterministic random group for tests and benchmarks.
    pub fn random(len: usize, seed: u64) -> Self {
        let mut rng = StdRng::seed_from_u64(seed);
        let weights = (0..len).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        let grads = (0..len)
            .map(|_| f16::from_f32(rng.gen_range(-0.5f32..0.5)))
            .collect();
        let mut g = ParamGroup::new(weights, grads).expect("equal lengths");
        for i in 0..len {
            g.exp_avg[i] = rng.gen_range(-0.1f32..0.1);
            g.exp_avg_sq[i] = rng.gen_range(0.0f32..0.01);
        }
        g
    }

    pub fn len(&self) -> usize {
        self.master_weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.master_weights.is_empty()
    }

    fn check_lengths(&self) -> Result<(), OptError> {
        let n = self.master_weights.len();
        if self.grads_16.len() != n || self.exp_avg.len() != n || self.exp_avg_sq.len() != n {
            return Err(OptError::LengthMismatch {
                weights: n,
                grads: self.grads_16.len(),
                m1: self.exp_avg.len(),
                m2: self.exp_avg_sq.len(),
            });
        }
        Ok(())
    }
}

/// Contiguous tile ranges covering a parameter group.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TilePlan {
    pub tile_size: u64,
    pub ranges: Vec<(u64, u64)>,
}

/// `ceil(group_len / ts)` contiguous ranges; the last may be shorter.
pub fn make_tile_plan(group_len: u64, ts: u64) -> Result<TilePlan, OptError> {
    if ts == 0 {
        return Err(OptError::ZeroTileSize);
    }
    let mut ranges = Vec::new();
    let mut start = 0;
    while start < group_len {
        let end = (start + ts).min(group_len);
        ranges.push((start, end));
        start = end;
    }
    Ok(TilePlan {
        tile_size: ts,
        ranges,
    })
}

impl TilePlan {
    fn validate(&self, len: u64) -> Result<(), OptError> {
        let mut cursor = 0;
        for &(s, e) in &self.ranges {
            if s != cursor || e <= s || e - s > self.tile_size {
                return Err(OptError::BadTilePlan {
                    len,
                    ranges: self.ranges.clone(),
                });
            }
            cursor = e;
        }
        if cursor != len {
            return Err(OptError::BadTilePlan {
                len,
                ranges: self.ranges.clone(),
            });
        }
        Ok(())
    }
}

/// Transient-allocation accounting for one optimizer step.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct MemoryTrace {
    pub peak_transient_bytes: u64,
    /// Bytes live after each allocate/free transition.
    pub samples: Vec<u64>,
}

/// Tracks the upcast buffers the step allocates, recording the peak.
#[derive(Debug, Default)]
struct TransientAccountant {
    current: u64,
    trace: MemoryTrace,
}

impl TransientAccountant {
    fn alloc(&mut self, bytes: u64) {
        self.current += bytes;
        self.trace.peak_transient_bytes = self.trace.peak_transient_bytes.max(self.current);
        self.trace.samples.push(self.current);
    }

    fn free(&mut self, bytes: u64) {
        self.current -= bytes;
        self.trace.samples.push(self.current);
    }
}

/// The shared element-wise update. Both step variants funnel through this
/// single function, which is what makes them bit-identical.
#[allow(clippy::too_many_arguments)]
fn update_element(
    w: &mut f32,
    g32: f32,
    m: &mut f32,
    v: &mut f32,
    hyper: &Hyper,
    bias1: f32,
    bias2: f32,
) {
    *m = hyper.beta1 * *m + (1.0 - hyper.beta1) * g32;
    *v = hyper.beta2 * *v + (1.0 - hyper.beta2) * g32 * g32;
    let m_hat = *m / bias1;
    let v_hat = *v / bias2;
    *w -= hyper.lr * (m_hat / (v_hat.sqrt() + hyper.eps) + hyper.weight_decay * *w);
}

fn apply_range(group: &mut ParamGroup, buf: &mut [f32], lo: usize, hi: usize, hyper: &Hyper) {
    let bias1 = 1.0 - hyper.beta1.powi(group.step_count as i32);
    let bias2 = 1.0 - hyper.beta2.powi(group.step_count as i32);
    // upcast into the 32-bit buffer (exact: every half value is
    // representable), then update element-wise
    for (slot, g) in buf[..hi - lo].iter_mut().zip(&group.grads_16[lo..hi]) {
        *slot = g.to_f32();
    }
    for i in lo..hi {
        update_element(
            &mut group.master_weights[i],
            buf[i - lo],
            &mut group.exp_avg[i],
            &mut group.exp_avg_sq[i],
            hyper,
            bias1,
            bias2,
        );
    }
}

/// Baseline step: one full-length 32-bit upcast buffer, so the transient
/// peak is `4 * group_len` bytes.
pub fn step_untiled(group: &mut ParamGroup, hyper: &Hyper) -> Result<MemoryTrace, OptError> {
    group.check_lengths()?;
    group.step_count += 1;
    let n = group.len();
    let mut acct = TransientAccountant::default();
    acct.alloc(4 * n as u64);
    let mut buf = vec![0.0f32; n];
    apply_range(group, &mut buf, 0, n, hyper);
    drop(buf);
    acct.free(4 * n as u64);
    Ok(acct.trace)
}

/// Tiled step: one `tile_size` buffer reused across tiles in ascending
/// order, capping the transient peak at `4 * min(tile_size, group_len)`
/// bytes while producing bit-identical results to [`step_untiled`].
pub fn step_tiled(
    group: &mut ParamGroup,
    plan: &TilePlan,
    hyper: &Hyper,
) -> Result<MemoryTrace, OptError> {
    group.check_lengths()?;
    plan.validate(group.len() as u64)?;
    group.step_count += 1;
    let buf_len = plan
        .ranges
        .iter()
        .map(|&(s, e)| e - s)
        .max()
        .unwrap_or(0);
    let mut acct = TransientAccountant::default();
    acct.alloc(4 * buf_len);
    let mut buf = vec![0.0f32; buf_len as usize];
    for &(s, e) in &plan.ranges {
        apply_range(group, &mut buf, s as usize, e as usize, hyper);
    }
    drop(buf);
    acct.free(4 * buf_len);
    Ok(acct.trace)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plan_examples() {
        assert_eq!(
            make_tile_plan(10, 4).unwrap().ranges,
            vec![(0, 4), (4, 8), (8, 10)]
        );
        assert_eq!(make_tile_plan(10, 10).unwrap().ranges, vec![(0, 10)]);
        assert!(make_tile_plan(0, 4).unwrap().ranges.is_empty());
        assert_eq!(make_tile_plan(5, 0), Err(OptError::ZeroTileSize));
    }

    #[test]
    fn bad_plans_rejected() {
        let mut g = ParamGroup::random(10, 1);
        let plan = TilePlan {
            tile_size: 4,
            ranges: vec![(0, 4), (5, 10)], // gap
        };
        assert!(matches!(
            step_tiled(&mut g, &plan, &Hyper::default()),
            Err(OptError::BadTilePlan { .. })
        ));
        let plan = TilePlan {
            tile_size: 4,
            ranges: vec![(0, 4), (3, 10)], // overlap
        };
        assert!(matches!(
            step_tiled(&mut g, &plan, &Hyper::default()),
            Err(OptError::BadTilePlan { .. })
        ));
    }

    #[test]
    fn untiled_peak_is_four_bytes_per_param() {
        let mut g = ParamGroup::random(1_000_000, 2);
        let trace = step_untiled(&mut g, &Hyper::default()).unwrap();
        assert_eq!(trace.peak_transient_bytes, 4_000_000);
    }

    #[test]
    fn zero_gradients_leave_only_weight_decay() {
        let weights = vec![2.0f32; 8];
        let grads = vec![f16::from_f32(0.0); 8];
        let mut g = ParamGroup::new(weights, grads).unwrap();
        let hyper = Hyper {
            weight_decay: 0.5,
            ..Hyper::default()
        };
        step_untiled(&mut g, &hyper).unwrap();
        // m and v stay zero, so the update is pure decay: w -= lr * wd * w
        let expect = 2.0 - hyper.lr * 0.5 * 2.0;
        assert!(g.master_weights.iter().all(|&w| w == expect));
        assert!(g.exp_avg.iter().all(|&m| m == 0.0));
    }

    #[test]
    fn tiled_matches_untiled_bitwise() {
        for ts in [1u64, 2, 3, 7, 64, 1000, 4096] {
            let mut a = ParamGroup::random(4096, 42);
            let mut b = a.clone();
            let t1 = step_untiled(&mut a, &Hyper::default()).unwrap();
            let plan = make_tile_plan(4096, ts).unwrap();
            let t2 = step_tiled(&mut b, &plan, &Hyper::default()).unwrap();
            assert_eq!(a.master_weights, b.master_weights, "ts={ts}");
            assert_eq!(a.exp_avg, b.exp_avg);
            assert_eq!(a.exp_avg_sq, b.exp_avg_sq);
            assert_eq!(t1.peak_transient_bytes, 16384);
            assert_eq!(t2.peak_transient_bytes, 4 * ts.min(4096));
        }
    }

    #[test]
    fn multi_step_equivalence() {
        let mut a = ParamGroup::random(257, 7);
        let mut b = a.clone();
        let plan = make_tile_plan(257, 100).unwrap();
        for _ in 0..5 {
            step_untiled(&mut a, &Hyper::default()).unwrap();
            step_tiled(&mut b, &plan, &Hyper::default()).unwrap();
        }
        assert_eq!(a, b);
    }

    #[test]
    fn transient_independent_of_group_length() {
        let plan_small = make_tile_plan(10_000, 1_800).unwrap();
        let plan_large = make_tile_plan(100_000, 1_800).unwrap();
        let mut small = ParamGroup::random(10_000, 3);
        let mut large = ParamGroup::random(100_000, 3);
        let ts_small = step_tiled(&mut small, &plan_small, &Hyper::default()).unwrap();
        let ts_large = step_tiled(&mut large, &plan_large, &Hyper::default()).unwrap();
        assert_eq!(ts_small.peak_transient_bytes, ts_large.peak_transient_bytes);
        assert_eq!(ts_large.peak_transient_bytes, 4 * 1_800);
    }

    #[test]
    fn determinism_across_runs() {
        let mut a = ParamGroup::random(512, 9);
        let mut b = ParamGroup::random(512, 9);
        assert_eq!(a, b);
        step_untiled(&mut a, &Hyper::default()).unwrap();
        step_untiled(&mut b, &Hyper::default()).unwrap();
        assert_eq!(a, b);
    }
}
