use criterion::{criterion_group, criterion_main, Criterion};
use parsim_core::config::ModelSpec;
use parsim_core::moesim::{moe_layer_pass, MoELayerPlan};
use parsim_core::planner::{enumerate_plans, PlanRequest};
use parsim_core::simnet::VolumeReport;
use parsim_core::tiledopt::{make_tile_plan, step_tiled, Hyper, ParamGroup};
use parsim_core::tpsim::{fc_backward, fc_forward, Dense, LayerState, ShardedMatrix};
use parsim_core::volume::LayerShape;
use parsim_core::{ParallelConfig, RankGrid};
use std::hint::black_box;

fn bench_planner(c: &mut Criterion) {
    let model = ModelSpec::Transformer {
        hidden_size: 4096,
        layers: 24,
        batch_size: 1024,
        seq_len: 2048,
        element_bytes: 2,
    };
    let req = PlanRequest::new(model, 256, 8, u64::MAX);
    c.bench_function("planner/enumerate-256gpu", |b| {
        b.iter(|| enumerate_plans(black_box(&req)).unwrap())
    });
}

fn bench_tpsim(c: &mut Criterion) {
    let grid = RankGrid::new(ParallelConfig::dense(1, 2, 2)).unwrap();
    let x = Dense::new(32, 64, (0..32 * 64).map(|i| (i % 17) as f64 - 8.0).collect()).unwrap();
    let w = Dense::new(64, 64, (0..64 * 64).map(|i| (i % 13) as f64 - 6.0).collect()).unwrap();
    c.bench_function("tpsim/fwd-bwd-64x64", |b| {
        b.iter(|| {
            let mut report = VolumeReport::new();
            let mut layer = LayerState::new(LayerShape::new(64, 64), &w, &grid).unwrap();
            let xs = ShardedMatrix::shard_columns(&x, 2, layer.input_layout()).unwrap();
            let y = fc_forward(&mut layer, &xs, &grid, 2, "l0", &mut report).unwrap();
            let dy = ShardedMatrix::shard_columns(&Dense::ones(y.rows, y.cols), 2, y.layout).unwrap();
            fc_backward(&mut layer, &dy, &grid, 2, "l0", &mut report).unwrap()
        })
    });
}

fn bench_tiledopt(c: &mut Criterion) {
    let plan = make_tile_plan(1 << 20, 100_000).unwrap();
    c.bench_function("tiledopt/step-1m", |b| {
        b.iter_with_setup(
            || ParamGroup::random(1 << 20, 1),
            |mut g| step_tiled(&mut g, &plan, &Hyper::default()).unwrap(),
        )
    });
}

fn bench_moe(c: &mut Criterion) {
    let plan = MoELayerPlan {
        tokens_per_group: 256,
        hidden: 64,
        cfg: ParallelConfig {
            total_gpus: 32,
            data_degree: 1,
            tensor_rows: 2,
            tensor_cols: 2,
            expert_degree: 8,
            gpus_per_node: 8,
        },
        element_bytes: 2,
        dtd_enabled: true,
        cac_enabled: true,
        checkpointing: true,
    };
    c.bench_function("moesim/layer-pass", |b| {
        b.iter(|| {
            let mut report = VolumeReport::new();
            moe_layer_pass(black_box(&plan), &mut report).unwrap()
        })
    });
}

criterion_group!(benches, bench_planner, bench_tpsim, bench_tiledopt, bench_moe);
criterion_main!(benches);
