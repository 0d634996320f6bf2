//! Enumeration of GPU decompositions and selection of communication-optimal,
//! memory-feasible plans, plus the closed-form grid optima the enumeration
//! is validated against.

use crate::config::{ModelSpec, ParallelConfig};
use crate::exact::{rat, round_half_up, Exact, Rat};
use crate::memory::{memory_report, split_params, MemError};
use crate::volume::{transformer_total, unet_total};
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PlanError {
    #[error("no decomposition of {gpus} GPUs fits the model in {mem_per_gpu} bytes per GPU")]
    Infeasible { gpus: u64, mem_per_gpu: u64 },
    #[error(transparent)]
    Config(#[from] crate::config::ConfigError),
    #[error(transparent)]
    Memory(#[from] MemError),
}

/// What to plan for: a model, a GPU budget, and the per-GPU memory limit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PlanRequest {
    pub model: ModelSpec,
    pub gpus: u64,
    pub gpus_per_node: u64,
    pub mem_per_gpu: u64,
    /// Tensor parallelism is confined to a node; defaults to gpus_per_node.
    pub max_tensor_degree: u64,
}

impl PlanRequest {
    pub fn new(model: ModelSpec, gpus: u64, gpus_per_node: u64, mem_per_gpu: u64) -> Self {
        PlanRequest {
            model,
            gpus,
            gpus_per_node,
            mem_per_gpu,
            max_tensor_degree: gpus_per_node,
        }
    }
}

/// One candidate decomposition with its predicted cost and feasibility.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Plan {
    pub config: ParallelConfig,
    pub predicted_volume: Exact,
    pub predicted_memory: u64,
    pub feasible: bool,
    /// Position in the sorted candidate list (0 = best).
    pub rank: usize,
}

fn divisors(n: u64) -> Vec<u64> {
    let mut ds: Vec<u64> = (1..=n).filter(|d| n % d == 0).collect();
    ds.sort_unstable();
    ds
}

/// Predicted per-rank tensor-parallel volume of the model on a
/// decomposition, using the closed-form network aggregates (defined for any
/// divisor triple, independent of per-layer divisibility).
pub fn predicted_volume(model: &ModelSpec, cfg: &ParallelConfig) -> Rat {
    match *model {
        ModelSpec::Transformer {
            hidden_size, layers, ..
        }
        | ModelSpec::MoE {
            hidden_size, layers, ..
        } => rat(layers as i128) * transformer_total(hidden_size, model.batch_rows(), cfg),
        ModelSpec::UNet {
            channels, batch_size, ..
        } => unet_total(channels, batch_size, cfg),
    }
}

/// Predicted per-GPU memory for the model on a decomposition, in bytes.
pub fn predicted_memory(model: &ModelSpec, cfg: &ParallelConfig) -> Result<u64, MemError> {
    let split = split_params(model.param_count(), model.experts())?;
    Ok(memory_report(cfg, &split, None)?.per_gpu_lower_bound)
}

/// Enumerate every ordered divisor triple `(G_data, G_r, G_c)` of `G`
/// (times expert divisors for expert models), with predicted volume and
/// memory. Sorted ascending by volume; ties broken by larger `G_data`, then
/// smaller `G_r`. Infeasible plans are included but flagged.
pub fn enumerate_plans(req: &PlanRequest) -> Result<Vec<Plan>, PlanError> {
    req.model.validate()?;
    let g = req.gpus;
    let expert_choices: Vec<u64> = match req.model {
        ModelSpec::MoE { experts, .. } => vec![experts],
        _ => vec![1],
    };
    let mut plans = Vec::new();
    for &e in &expert_choices {
        if g % e != 0 {
            continue;
        }
        let g_dense = g / e;
        for d in divisors(g_dense) {
            let gt = g_dense / d;
            for r in divisors(gt) {
                let c = gt / r;
                let cfg = ParallelConfig {
                    total_gpus: g,
                    data_degree: d,
                    tensor_rows: r,
                    tensor_cols: c,
                    expert_degree: e,
                    gpus_per_node: req.gpus_per_node,
                };
                let volume = predicted_volume(&req.model, &cfg);
                let memory = predicted_memory(&req.model, &cfg)?;
                let feasible =
                    memory <= req.mem_per_gpu && cfg.tensor_degree() <= req.max_tensor_degree;
                plans.push(Plan {
                    config: cfg,
                    predicted_volume: Exact(volume),
                    predicted_memory: memory,
                    feasible,
                    rank: 0,
                });
            }
        }
    }
    plans.sort_by(|a, b| {
        a.predicted_volume
            .cmp(&b.predicted_volume)
            .then(b.config.data_degree.cmp(&a.config.data_degree))
            .then(a.config.tensor_rows.cmp(&b.config.tensor_rows))
    });
    for (i, p) in plans.iter_mut().enumerate() {
        p.rank = i;
    }
    Ok(plans)
}

/// The best feasible plan, if any.
pub fn choose_plan(req: &PlanRequest) -> Result<Plan, PlanError> {
    enumerate_plans(req)?
        .into_iter()
        .find(|p| p.feasible)
        .ok_or(PlanError::Infeasible {
            gpus: req.gpus,
            mem_per_gpu: req.mem_per_gpu,
        })
}

/// Which network aggregate a closed-form optimum refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum NetworkKind {
    Transformer,
    UNet,
}

/// The real-valued and divisor-feasible column-degree optima for a fixed
/// tensor-parallel degree.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClosedFormOptimum {
    pub gc_star: f64,
    pub gc_feasible: u64,
}

/// Closed-form optimal column degree: `sqrt(3 G_tensor)` for transformers,
/// `sqrt(G_tensor / 1.98)` for U-Nets. `gc_feasible` is chosen by
/// evaluating the volume formula at every divisor of `G_tensor` (not by
/// rounding `gc_star`, which can pick a non-divisor or the wrong neighbor).
pub fn closed_form_optimum(kind: NetworkKind, g_tensor: u64) -> ClosedFormOptimum {
    let gc_star = match kind {
        NetworkKind::Transformer => (3.0 * g_tensor as f64).sqrt(),
        NetworkKind::UNet => (g_tensor as f64 / 1.98).sqrt(),
    };
    // reference shape; the argmin over G_c is independent of B, H, C
    let (h, b) = (1_000u64, 1_000u64);
    let mut best: Option<(Rat, u64)> = None;
    for c in divisors(g_tensor) {
        let cfg = ParallelConfig::dense(1, g_tensor / c, c);
        let v = match kind {
            NetworkKind::Transformer => transformer_total(h, b, &cfg),
            NetworkKind::UNet => unet_total(h, b, &cfg),
        };
        // ties go to the larger column degree, matching enumerate_plans'
        // smaller-G_r preference
        let better = match &best {
            None => true,
            Some((bv, bc)) => v < *bv || (v == *bv && c > *bc),
        };
        if better {
            best = Some((v, c));
        }
    }
    ClosedFormOptimum {
        gc_star,
        gc_feasible: best.expect("G_tensor >= 1 has at least divisor 1").1,
    }
}

/// Largest data-parallel degree with a memory-feasible `(G_r, G_c)`
/// factorization of the remaining GPUs.
pub fn best_data_degree(req: &PlanRequest) -> Result<u64, PlanError> {
    let plans = enumerate_plans(req)?;
    plans
        .iter()
        .filter(|p| p.predicted_memory <= req.mem_per_gpu)
        .map(|p| p.config.data_degree)
        .max()
        .ok_or(PlanError::Infeasible {
            gpus: req.gpus,
            mem_per_gpu: req.mem_per_gpu,
        })
}

/// Convenience: bytes needed per GPU to hold the model at `G_tensor = g`.
pub fn min_mem_at_tensor_degree(model: &ModelSpec, g_tensor: u64, total: u64) -> u64 {
    let cfg = ParallelConfig {
        total_gpus: total,
        data_degree: total / g_tensor,
        tensor_rows: 1,
        tensor_cols: g_tensor,
        expert_degree: 1,
        gpus_per_node: g_tensor,
    };
    let split = split_params(model.param_count(), 1).expect("positive params");
    memory_report(&cfg, &split, None)
        .map(|r| r.per_gpu_lower_bound)
        .unwrap_or(u64::MAX)
}

#[allow(unused)]
fn bytes(r: Rat) -> u64 {
    round_half_up(r) as u64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn transformer(h: u64) -> ModelSpec {
        ModelSpec::Transformer {
            hidden_size: h,
            layers: 24,
            batch_size: 1024,
            seq_len: 2048,
            element_bytes: 2,
        }
    }

    #[test]
    fn ordered_triple_count() {
        // 16 factors into 15 ordered triples of positive divisors
        let req = PlanRequest::new(transformer(4096), 16, 8, u64::MAX);
        assert_eq!(enumerate_plans(&req).unwrap().len(), 15);
    }

    #[test]
    fn single_gpu_plan() {
        let req = PlanRequest::new(transformer(4096), 1, 8, u64::MAX);
        let plans = enumerate_plans(&req).unwrap();
        assert_eq!(plans.len(), 1);
        assert_eq!(
            (
                plans[0].config.data_degree,
                plans[0].config.tensor_rows,
                plans[0].config.tensor_cols
            ),
            (1, 1, 1)
        );
        assert_eq!(plans[0].predicted_volume, Exact(rat(0)));
    }

    #[test]
    fn memory_forces_known_sixteen_gpu_optimum() {
        // a ~9B model whose lower bound fits only at G_tensor >= 8
        let model = transformer(5632);
        let need8 = min_mem_at_tensor_degree(&model, 8, 16);
        let need4 = min_mem_at_tensor_degree(&model, 4, 16);
        let mem = (need8 + need4) / 2;
        let req = PlanRequest::new(model, 16, 8, mem);
        let best = choose_plan(&req).unwrap();
        assert_eq!(best.config.data_degree, 2);
        assert_eq!(best.config.tensor_rows, 2);
        assert_eq!(best.config.tensor_cols, 4);
    }

    #[test]
    fn infeasible_memory_is_reported() {
        let req = PlanRequest::new(transformer(8192), 16, 8, 1);
        assert!(matches!(
            choose_plan(&req),
            Err(PlanError::Infeasible { .. })
        ));
        // infeasible candidates are still enumerated, just flagged
        let plans = enumerate_plans(&req).unwrap();
        assert!(plans.iter().all(|p| !p.feasible));
    }

    #[test]
    fn closed_form_transformer_examples() {
        let o = closed_form_optimum(NetworkKind::Transformer, 8);
        assert!((o.gc_star - 4.899).abs() < 1e-3);
        assert_eq!(o.gc_feasible, 4);
        let o1 = closed_form_optimum(NetworkKind::Transformer, 1);
        assert!((o1.gc_star - 1.732).abs() < 1e-3);
        assert_eq!(o1.gc_feasible, 1);
    }

    #[test]
    fn closed_form_unet_example() {
        let o = closed_form_optimum(NetworkKind::UNet, 8);
        assert!((o.gc_star - 2.010).abs() < 1e-3);
        assert_eq!(o.gc_feasible, 2);
    }

    #[test]
    fn enumeration_agrees_with_closed_form() {
        for g_tensor in 1..=64u64 {
            for kind in [NetworkKind::Transformer, NetworkKind::UNet] {
                let opt = closed_form_optimum(kind, g_tensor);
                // brute force over (G_r, G_c) at fixed G_tensor
                let (h, b) = (840u64, 840u64);
                let best_c = divisors(g_tensor)
                    .into_iter()
                    .map(|c| {
                        let cfg = ParallelConfig::dense(1, g_tensor / c, c);
                        let v = match kind {
                            NetworkKind::Transformer => transformer_total(h, b, &cfg),
                            NetworkKind::UNet => unet_total(h, b, &cfg),
                        };
                        (v, c)
                    })
                    .min_by(|a, b| a.0.cmp(&b.0).then(b.1.cmp(&a.1)))
                    .unwrap()
                    .1;
                assert_eq!(opt.gc_feasible, best_c, "{kind:?} G_tensor={g_tensor}");
            }
        }
    }

    #[test]
    fn pure_data_parallelism_when_model_fits() {
        let model = transformer(256);
        let req = PlanRequest::new(model, 16, 16, u64::MAX);
        assert_eq!(best_data_degree(&req).unwrap(), 16);
    }

    #[test]
    fn best_data_degree_examples() {
        // ~9B model, fits only at G_tensor >= 8 on this budget
        let model = transformer(5632);
        let need8 = min_mem_at_tensor_degree(&model, 8, 16);
        let need4 = min_mem_at_tensor_degree(&model, 4, 16);
        let req = PlanRequest::new(model.clone(), 16, 8, (need8 + need4) / 2);
        assert_eq!(best_data_degree(&req).unwrap(), 2);
        // model needing all 16 GPUs
        let need16 = min_mem_at_tensor_degree(&model, 16, 16);
        let req = PlanRequest::new(model, 16, 16, (need16 + need8) / 2);
        assert_eq!(best_data_degree(&req).unwrap(), 1);
    }

    #[test]
    fn higher_data_degree_never_hurts_volume() {
        // among feasible plans, the minimum-volume plan at a larger G_data
        // is never worse than at a smaller one (same G_tensor budget)
        let req = PlanRequest::new(transformer(4096), 32, 32, u64::MAX);
        let plans = enumerate_plans(&req).unwrap();
        for d in [1u64, 2, 4, 8] {
            let best_lo = plans
                .iter()
                .filter(|p| p.config.data_degree == d)
                .map(|p| p.predicted_volume)
                .min()
                .unwrap();
            let best_hi = plans
                .iter()
                .filter(|p| p.config.data_degree == 2 * d)
                .map(|p| p.predicted_volume)
                .min()
                .unwrap();
            assert!(best_hi <= best_lo);
        }
    }

    #[test]
    fn determinism() {
        let req = PlanRequest::new(transformer(4096), 64, 8, u64::MAX);
        let a = enumerate_plans(&req).unwrap();
        let b = enumerate_plans(&req).unwrap();
        assert_eq!(a, b);
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
    }
}
