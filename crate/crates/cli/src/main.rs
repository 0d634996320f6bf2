//! `parsim`: planner, analytic models, and deterministic simulators for
//! hybrid tensor/expert/data-parallel training, exposed as machine-readable
//! reports.
//!
//! Contract: JSON on stdout (CSV for `curves`), diagnostics on stderr, and
//! exit codes 0 (ok), 1 (usage), 2 (infeasible), 3 (verification failure).
//! Every JSON output embeds a RunManifest so identical invocations are
//! byte-identical end to end.

use clap::{Args, Parser, Subcommand};
use parsim_core::config::{ModelSpec, ParallelConfig};
use parsim_core::exact::Exact;
use parsim_core::grid::RankGrid;
use parsim_core::memory::{max_base_model, memory_report, split_params};
use parsim_core::moesim::{moe_layer_pass, MoELayerPlan};
use parsim_core::planner::{choose_plan, enumerate_plans, PlanError, PlanRequest};
use parsim_core::simnet::VolumeReport;
use parsim_core::tiledopt::{make_tile_plan, step_tiled, step_untiled, Hyper, ParamGroup};
use parsim_core::tpsim::{chain_layers, fc_backward, Dense, LayerState, ShardedMatrix};
use parsim_core::volume::{
    layer_volume, transformer_volume, unet_volume, weak_scaling_curves, LayerShape,
};
use serde::Serialize;
use sha2::{Digest, Sha256};
use std::fs;
use std::process::ExitCode;

const EXIT_OK: u8 = 0;
const EXIT_USAGE: u8 = 1;
const EXIT_INFEASIBLE: u8 = 2;
const EXIT_VERIFY: u8 = 3;

#[derive(Parser)]
#[command(name = "parsim", version, about, disable_help_subcommand = true)]
struct Cli {
    /// JSON config file (schema depends on the subcommand).
    #[arg(long, global = true)]
    config: Option<String>,
    /// Seed for randomized workloads.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Write the report here instead of stdout.
    #[arg(long, global = true)]
    output: Option<String>,
    /// Output format where the subcommand supports both.
    #[arg(long, global = true, value_parser = ["json", "csv"])]
    format: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Enumerate decompositions and pick the communication-optimal feasible one.
    Plan(PlanArgs),
    /// Run a desk-scale FC-layer simulation, optionally verifying it against
    /// the analytic models.
    Simulate(SimulateArgs),
    /// Per-GPU memory report for a sharded-optimizer configuration.
    Memory(MemoryArgs),
    /// Largest base model trainable at a given per-GPU memory budget.
    Maxmodel(MaxmodelArgs),
    /// Closed-form communication-volume prediction for one network.
    Volume(VolumeArgs),
    /// Weak-scaling message-size curves (CSV).
    Curves(CurvesArgs),
    /// MoE-layer communication tally with DTD/CAC toggles.
    Moe(MoeArgs),
    /// Tiled-optimizer transient-memory benchmark.
    TiledoptBench(TiledoptArgs),
}

#[derive(Args, Serialize)]
struct PlanArgs {
    #[arg(long)]
    gpus: Option<u64>,
    #[arg(long, value_parser = ["transformer", "unet"])]
    model: Option<String>,
    #[arg(long)]
    hidden: Option<u64>,
    #[arg(long)]
    channels: Option<u64>,
    #[arg(long, default_value_t = 24)]
    layers: u64,
    #[arg(long, default_value_t = 1024)]
    batch: u64,
    #[arg(long, default_value_t = 2048)]
    seq: u64,
    #[arg(long)]
    mem_per_gpu: Option<u64>,
    #[arg(long, default_value_t = 8)]
    gpus_per_node: u64,
    #[arg(long)]
    max_tensor: Option<u64>,
}

#[derive(Args, Serialize)]
struct SimulateArgs {
    /// Tensor-grid rows (ignored when --config is given).
    #[arg(long, default_value_t = 2)]
    rows: u64,
    #[arg(long, default_value_t = 2)]
    cols: u64,
    #[arg(long, default_value_t = 1)]
    data: u64,
    /// Batch rows fed through the layer chain.
    #[arg(long, default_value_t = 8)]
    batch: u64,
    #[arg(long, default_value_t = 8)]
    k: u64,
    #[arg(long, default_value_t = 8)]
    n: u64,
    /// Number of alternating FC layers to chain.
    #[arg(long, default_value_t = 2)]
    layers: u64,
    #[arg(long, default_value_t = 2)]
    element_bytes: u64,
    /// Cross-check measured bytes and numerics against the analytic models.
    #[arg(long)]
    verify: bool,
    /// Corrupt the analytic prediction before comparing (negative-path test
    /// hook).
    #[arg(long, hide = true)]
    corrupt_prediction: bool,
}

#[derive(Args, Serialize)]
struct MemoryArgs {
    #[arg(long)]
    base_params: u64,
    #[arg(long, default_value_t = 1)]
    experts: u64,
    #[arg(long)]
    tile_size: Option<u64>,
    #[arg(long)]
    gpus: Option<u64>,
    #[arg(long, default_value_t = 1)]
    data: u64,
    #[arg(long, default_value_t = 1)]
    rows: u64,
    #[arg(long, default_value_t = 1)]
    cols: u64,
    #[arg(long, default_value_t = 8)]
    gpus_per_node: u64,
}

#[derive(Args, Serialize)]
struct MaxmodelArgs {
    /// Per-GPU memory budget in bytes.
    #[arg(long)]
    mem: u64,
    /// Tensor-parallel degree.
    #[arg(long)]
    tensor: u64,
}

#[derive(Args, Serialize)]
struct VolumeArgs {
    #[arg(long, value_parser = ["transformer", "unet", "layer"])]
    model: String,
    #[arg(long)]
    hidden: Option<u64>,
    #[arg(long)]
    channels: Option<u64>,
    #[arg(long)]
    k: Option<u64>,
    #[arg(long)]
    n: Option<u64>,
    #[arg(long)]
    batch: u64,
    #[arg(long, default_value_t = 1)]
    seq: u64,
    #[arg(long, default_value_t = 1)]
    data: u64,
    #[arg(long, default_value_t = 1)]
    rows: u64,
    #[arg(long, default_value_t = 1)]
    cols: u64,
}

#[derive(Args, Serialize)]
struct CurvesArgs {
    /// Token rows per iteration at the base point.
    #[arg(long)]
    batch_rows: u64,
    #[arg(long)]
    base_hidden: u64,
    #[arg(long)]
    base_gpus: u64,
    #[arg(long, default_value_t = 8)]
    data: u64,
    /// GPU counts to sample, comma-separated.
    #[arg(long, value_delimiter = ',', default_values_t = vec![32u64, 64, 128, 256])]
    gpu_counts: Vec<u64>,
}

#[derive(Args, Serialize)]
struct MoeArgs {
    #[arg(long)]
    experts: u64,
    #[arg(long, default_value_t = 1)]
    tensor_rows: u64,
    #[arg(long, default_value_t = 1)]
    tensor_cols: u64,
    #[arg(long)]
    tokens: u64,
    #[arg(long)]
    hidden: u64,
    #[arg(long, default_value_t = 2)]
    element_bytes: u64,
    #[arg(long)]
    dtd: bool,
    #[arg(long)]
    cac: bool,
    #[arg(long)]
    checkpointing: bool,
}

#[derive(Args, Serialize)]
struct TiledoptArgs {
    #[arg(long)]
    params: u64,
    #[arg(long, default_value_t = parsim_core::tiledopt::DEFAULT_TILE_SIZE)]
    tile_size: u64,
}

/// Identifies one invocation; embedded in every JSON report so identical
/// invocations are byte-identical.
#[derive(Serialize)]
struct RunManifest {
    subcommand: &'static str,
    config_digest: String,
    version: &'static str,
    seed: u64,
}

fn manifest(subcommand: &'static str, input: &impl Serialize, seed: u64) -> RunManifest {
    let encoded = serde_json::to_vec(input).expect("serializable input");
    let digest = hex::encode(Sha256::digest(&encoded));
    RunManifest {
        subcommand,
        config_digest: digest,
        version: env!("CARGO_PKG_VERSION"),
        seed,
    }
}

#[derive(Serialize)]
struct Report<T: Serialize> {
    manifest: RunManifest,
    report: T,
}

fn emit(cli_output: &Option<String>, body: String) -> ExitCode {
    match cli_output {
        Some(path) => {
            if let Err(e) = fs::write(path, body) {
                eprintln!("error: cannot write {path}: {e}");
                return ExitCode::from(EXIT_USAGE);
            }
            ExitCode::from(EXIT_OK)
        }
        None => {
            println!("{body}");
            ExitCode::from(EXIT_OK)
        }
    }
}

fn emit_json<T: Serialize>(cli: &Cli, subcommand: &'static str, input: &impl Serialize, report: T) -> ExitCode {
    let wrapped = Report {
        manifest: manifest(subcommand, input, cli.seed),
        report,
    };
    let body = serde_json::to_string_pretty(&wrapped).expect("serializable report");
    emit(&cli.output, body)
}

fn usage(msg: impl std::fmt::Display) -> ExitCode {
    eprintln!("error: {msg}");
    ExitCode::from(EXIT_USAGE)
}

fn read_config_json<T: serde::de::DeserializeOwned>(path: &str) -> Result<T, String> {
    let raw = fs::read_to_string(path).map_err(|e| format!("cannot read {path}: {e}"))?;
    serde_json::from_str(&raw).map_err(|e| format!("bad config {path}: {e}"))
}

fn cmd_plan(cli: &Cli, args: &PlanArgs) -> ExitCode {
    #[derive(serde::Deserialize, Serialize)]
    struct PlanFile {
        model: ModelSpec,
        gpus: u64,
        gpus_per_node: u64,
        mem_per_gpu: u64,
        max_tensor_degree: Option<u64>,
    }
    let req = if let Some(path) = &cli.config {
        let file: PlanFile = match read_config_json(path) {
            Ok(f) => f,
            Err(e) => return usage(e),
        };
        let mut req = PlanRequest::new(file.model, file.gpus, file.gpus_per_node, file.mem_per_gpu);
        if let Some(mt) = file.max_tensor_degree {
            req.max_tensor_degree = mt;
        }
        req
    } else {
        let gpus = match args.gpus {
            Some(g) => g,
            None => return usage("--gpus (or --config) is required"),
        };
        let model = match args.model.as_deref() {
            Some("unet") => ModelSpec::UNet {
                channels: match args.channels {
                    Some(c) => c,
                    None => return usage("--channels is required for unet"),
                },
                layers: args.layers,
                batch_size: args.batch,
                element_bytes: 2,
            },
            _ => ModelSpec::Transformer {
                hidden_size: match args.hidden {
                    Some(h) => h,
                    None => return usage("--hidden is required for transformer"),
                },
                layers: args.layers,
                batch_size: args.batch,
                seq_len: args.seq,
                element_bytes: 2,
            },
        };
        let mut req = PlanRequest::new(
            model,
            gpus,
            args.gpus_per_node,
            args.mem_per_gpu.unwrap_or(u64::MAX),
        );
        if let Some(mt) = args.max_tensor {
            req.max_tensor_degree = mt;
        }
        req
    };
    let plans = match enumerate_plans(&req) {
        Ok(p) => p,
        Err(e) => return usage(e),
    };
    let chosen = match choose_plan(&req) {
        Ok(p) => Some(p),
        Err(PlanError::Infeasible { .. }) => None,
        Err(e) => return usage(e),
    };
    #[derive(Serialize)]
    struct PlanReport {
        chosen: Option<parsim_core::planner::Plan>,
        plans: Vec<parsim_core::planner::Plan>,
    }
    let infeasible = chosen.is_none();
    let code = emit_json(cli, "plan", &req, PlanReport { chosen, plans });
    if infeasible {
        eprintln!("error: no memory-feasible decomposition");
        return ExitCode::from(EXIT_INFEASIBLE);
    }
    code
}

fn cmd_simulate(cli: &Cli, args: &SimulateArgs) -> ExitCode {
    let cfg = if let Some(path) = &cli.config {
        match read_config_json::<ParallelConfig>(path) {
            Ok(c) => c,
            Err(e) => return usage(e),
        }
    } else {
        ParallelConfig::dense(args.data, args.rows, args.cols)
    };
    let grid = match RankGrid::new(cfg) {
        Ok(g) => g,
        Err(e) => return usage(e),
    };
    if args.k != args.n && args.layers > 1 {
        return usage("chained layers require --k equal to --n");
    }
    // deterministic integer-valued matrices derived from the seed
    let fill = |rows: u64, cols: u64, salt: u64| -> Dense {
        let data = (0..rows * cols)
            .map(|i| (((i * 7 + salt * 13 + cli.seed * 31) % 17) as i64 - 8) as f64)
            .collect();
        Dense::new(rows, cols, data).expect("consistent dims")
    };
    let local_batch = args.batch / cfg.data_degree;
    let x0 = fill(local_batch, args.k, 1);
    let mut serial = x0.clone();
    let mut layers = Vec::new();
    for i in 0..args.layers {
        let shape = if i % 2 == 0 {
            LayerShape::new(args.k, args.n)
        } else {
            LayerShape::transposed(args.k, args.n)
        };
        let w = fill(args.k, args.n, 2 + i);
        serial = match serial.matmul(&w) {
            Ok(s) => s,
            Err(e) => return usage(e),
        };
        match LayerState::new(shape, &w, &grid) {
            Ok(l) => layers.push(l),
            Err(e) => return usage(e),
        }
    }
    let mut report = VolumeReport::new();
    let first_parts = layers
        .first()
        .map(|l| l.weights.grid.0)
        .unwrap_or(1);
    let first_layout = layers
        .first()
        .map(|l| l.input_layout())
        .unwrap_or(parsim_core::tpsim::Layout::ColShardByRow);
    let xs = match ShardedMatrix::shard_columns(&x0, first_parts, first_layout) {
        Ok(x) => x,
        Err(e) => return usage(e),
    };
    let y = match chain_layers(&mut layers, &xs, &grid, args.element_bytes, &mut report) {
        Ok(y) => y,
        Err(e) => return usage(e),
    };
    // backward through the chain to exercise both collective directions
    let dy_dense = Dense::ones(y.rows, y.cols);
    let mut dy = match ShardedMatrix::shard_columns(&dy_dense, y.grid.0, y.layout) {
        Ok(d) => d,
        Err(e) => return usage(e),
    };
    for (i, layer) in layers.iter_mut().enumerate().rev() {
        let (dx, _dw) = match fc_backward(layer, &dy, &grid, args.element_bytes, &format!("layer{i}"), &mut report) {
            Ok(p) => p,
            Err(e) => return usage(e),
        };
        dy = dx;
    }

    #[derive(Serialize)]
    struct Verification {
        check: &'static str,
        passed: bool,
        detail: String,
    }
    let mut checks = Vec::new();
    if args.verify {
        // measured bytes vs analytic per-layer prediction
        let mut predicted = Exact::zero();
        for layer in &layers {
            match layer_volume(layer.shape, &cfg, args.batch) {
                Ok(p) => predicted += p.v_total,
                Err(e) => return usage(e),
            }
        }
        let mut predicted_bytes = predicted * Exact::from(args.element_bytes);
        if args.corrupt_prediction {
            predicted_bytes += Exact::from(1u64);
        }
        let measured = report.rank_total(0);
        checks.push(Verification {
            check: "measured-bytes-match-prediction",
            passed: Exact(measured) == predicted_bytes,
            detail: format!("measured {} predicted {}", Exact(measured), predicted_bytes),
        });
        let numeric_ok = y.assemble() == serial;
        checks.push(Verification {
            check: "parallel-output-matches-serial",
            passed: numeric_ok,
            detail: "dense matmul oracle".to_string(),
        });
    }
    let failed = checks.iter().any(|c| !c.passed);
    #[derive(Serialize)]
    struct SimReport {
        config: ParallelConfig,
        volume: VolumeReport,
        verification: Vec<Verification>,
    }
    let code = emit_json(
        cli,
        "simulate",
        args,
        SimReport {
            config: cfg,
            volume: report,
            verification: checks,
        },
    );
    if failed {
        eprintln!("error: verification failed");
        return ExitCode::from(EXIT_VERIFY);
    }
    code
}

fn cmd_memory(cli: &Cli, args: &MemoryArgs) -> ExitCode {
    let cfg = if let Some(path) = &cli.config {
        match read_config_json::<ParallelConfig>(path) {
            Ok(c) => c,
            Err(e) => return usage(e),
        }
    } else {
        ParallelConfig {
            total_gpus: args
                .gpus
                .unwrap_or(args.data * args.rows * args.cols * args.experts),
            data_degree: args.data,
            tensor_rows: args.rows,
            tensor_cols: args.cols,
            expert_degree: args.experts,
            gpus_per_node: args.gpus_per_node,
        }
    };
    let split = match split_params(args.base_params, cfg.expert_degree) {
        Ok(s) => s,
        Err(e) => return usage(e),
    };
    match memory_report(&cfg, &split, args.tile_size) {
        Ok(r) => emit_json(cli, "memory", args, r),
        Err(e) => usage(e),
    }
}

fn cmd_maxmodel(cli: &Cli, args: &MaxmodelArgs) -> ExitCode {
    if args.tensor == 0 {
        return usage("--tensor must be at least 1");
    }
    #[derive(Serialize)]
    struct MaxModelReport {
        mem_per_gpu: u64,
        tensor_degree: u64,
        max_base_model_params: Exact,
    }
    emit_json(
        cli,
        "maxmodel",
        args,
        MaxModelReport {
            mem_per_gpu: args.mem,
            tensor_degree: args.tensor,
            max_base_model_params: Exact(max_base_model(args.mem, args.tensor)),
        },
    )
}

fn cmd_volume(cli: &Cli, args: &VolumeArgs) -> ExitCode {
    let cfg = ParallelConfig::dense(args.data, args.rows, args.cols);
    let result = match args.model.as_str() {
        "transformer" => match args.hidden {
            Some(h) => transformer_volume(h, args.batch * args.seq, &cfg),
            None => return usage("--hidden is required for transformer"),
        },
        "unet" => match args.channels {
            Some(c) => unet_volume(c, args.batch, &cfg),
            None => return usage("--channels is required for unet"),
        },
        _ => match (args.k, args.n) {
            (Some(k), Some(n)) => layer_volume(LayerShape::new(k, n), &cfg, args.batch),
            _ => return usage("--k and --n are required for layer"),
        },
    };
    match result {
        Ok(p) => emit_json(cli, "volume", args, p),
        Err(e) => usage(e),
    }
}

fn cmd_curves(cli: &Cli, args: &CurvesArgs) -> ExitCode {
    if matches!(cli.format.as_deref(), Some("json")) {
        let curve = weak_scaling_curves(
            args.batch_rows,
            args.base_hidden,
            args.base_gpus,
            args.data,
            &args.gpu_counts,
        );
        return emit_json(cli, "curves", args, curve);
    }
    let curve = weak_scaling_curves(
        args.batch_rows,
        args.base_hidden,
        args.base_gpus,
        args.data,
        &args.gpu_counts,
    );
    let mut body = String::from("G,ours_elements,megatron_elements\n");
    for (g, ours, meg) in &curve.samples {
        body.push_str(&format!("{g},{ours:.6},{meg:.6}\n"));
    }
    body.pop();
    emit(&cli.output, body)
}

fn cmd_moe(cli: &Cli, args: &MoeArgs) -> ExitCode {
    let plan = MoELayerPlan {
        tokens_per_group: args.tokens,
        hidden: args.hidden,
        cfg: ParallelConfig {
            total_gpus: args.experts * args.tensor_rows * args.tensor_cols,
            data_degree: 1,
            tensor_rows: args.tensor_rows,
            tensor_cols: args.tensor_cols,
            expert_degree: args.experts,
            gpus_per_node: 8,
        },
        element_bytes: args.element_bytes,
        dtd_enabled: args.dtd,
        cac_enabled: args.cac,
        checkpointing: args.checkpointing,
    };
    let mut report = VolumeReport::new();
    match moe_layer_pass(&plan, &mut report) {
        Ok(tally) => emit_json(cli, "moe", args, tally),
        Err(e) => usage(e),
    }
}

fn cmd_tiledopt_bench(cli: &Cli, args: &TiledoptArgs) -> ExitCode {
    if args.params == 0 {
        return usage("--params must be at least 1");
    }
    let mut untiled = ParamGroup::random(args.params as usize, cli.seed);
    let mut tiled = untiled.clone();
    let hyper = Hyper::default();
    let trace_untiled = match step_untiled(&mut untiled, &hyper) {
        Ok(t) => t,
        Err(e) => return usage(e),
    };
    let plan = match make_tile_plan(args.params, args.tile_size) {
        Ok(p) => p,
        Err(e) => return usage(e),
    };
    let trace_tiled = match step_tiled(&mut tiled, &plan, &hyper) {
        Ok(t) => t,
        Err(e) => return usage(e),
    };
    #[derive(Serialize)]
    struct TiledReport {
        peak_transient_bytes_tiled: u64,
        peak_transient_bytes_untiled: u64,
        bit_identical: bool,
    }
    emit_json(
        cli,
        "tiledopt-bench",
        args,
        TiledReport {
            peak_transient_bytes_tiled: trace_tiled.peak_transient_bytes,
            peak_transient_bytes_untiled: trace_untiled.peak_transient_bytes,
            bit_identical: untiled == tiled,
        },
    )
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // help/version requests are success, bad flags are usage errors
            use clap::error::ErrorKind;
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::from(EXIT_OK),
                _ => ExitCode::from(EXIT_USAGE),
            };
        }
    };
    match &cli.command {
        Command::Plan(args) => cmd_plan(&cli, args),
        Command::Simulate(args) => cmd_simulate(&cli, args),
        Command::Memory(args) => cmd_memory(&cli, args),
        Command::Maxmodel(args) => cmd_maxmodel(&cli, args),
        Command::Volume(args) => cmd_volume(&cli, args),
        Command::Curves(args) => cmd_curves(&cli, args),
        Command::Moe(args) => cmd_moe(&cli, args),
        Command::TiledoptBench(args) => cmd_tiledopt_bench(&cli, args),
    }
}
