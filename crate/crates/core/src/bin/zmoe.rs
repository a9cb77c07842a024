use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use zmoe_core::cache::{EvictionPolicy, Pool, PoolPlan};
use zmoe_core::codec::{compression_report, Bf16Buffer, Codec};
use zmoe_core::container::{pack_container, Container, ExpertKey, FRAME_HEADER_LEN};
use zmoe_core::harness::trace::{activation_counts, infer_k, num_experts_in};
use zmoe_core::harness::{
    ablation, full_only_plan, gen_trace, measure_profile, pipeline_bench, read_trace, render, run_simulation_observed,
    write_trace, PipelineOptions, ReportFormat, SimulationConfig, SimulationReport, TraceSpec,
};
use zmoe_core::planner::{
    build_rank_model, fit_selection_probs, plan_pools, pool_layer_counts, DEFAULT_MAX_ITER, DEFAULT_TOL,
};
use zmoe_core::{Error, ExecutionProfile, IoModel, Result};

#[derive(Parser)]
#[command(name = "zmoe", version, about = "Compressed MoE expert storage, scheduling and cache planning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pack raw BF16 tensor files into a container.
    Compress(CompressArgs),
    /// Print a container's header summary.
    Inspect(InspectArgs),
    /// Fit the selection model to a trace and search the pool layout.
    Plan(PlanArgs),
    /// Trace-driven simulation of the cache and scheduler.
    Simulate(SimulateArgs),
    /// Reconstruct experts with real reader and worker threads.
    PipelineBench(PipelineArgs),
    /// Render a saved simulation report.
    Report(ReportArgs),
    /// Write a synthetic Zipf routing trace.
    GenTrace(GenTraceArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum CodecArg {
    Store,
    Order0,
    Lz4,
}

impl CodecArg {
    fn codec(self) -> Result<Codec> {
        let name = match self {
            CodecArg::Store => "store",
            CodecArg::Order0 => "order0",
            CodecArg::Lz4 => "lz4",
        };
        Codec::all()
            .iter()
            .copied()
            .find(|c| c.name() == name)
            .ok_or_else(|| Error::InvalidArgument(format!("backend {name} is not compiled in")))
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Separate,
    Consolidated,
}

impl From<ModeArg> for IoModel {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Separate => IoModel::Separate,
            ModeArg::Consolidated => IoModel::Consolidated,
        }
    }
}

#[derive(Args)]
struct CompressArgs {
    /// Directory of `l{layer}_e{expert}_t{tensor}.bf16` files (little-endian u16).
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[arg(long, default_value_t = 4)]
    k: usize,
    #[arg(long, value_enum, default_value = "order0")]
    codec: CodecArg,
}

#[derive(Args)]
struct InspectArgs {
    container: PathBuf,
    /// Reconstruct every tensor and check all checksums.
    #[arg(long)]
    verify: bool,
}

/// Where the execution profile comes from.
#[derive(Args)]
struct ProfileArgs {
    /// JSON profile file.
    #[arg(long, conflicts_with = "container")]
    profile: Option<PathBuf>,
    /// Measure u, v, c and rho on this container instead.
    #[arg(long)]
    container: Option<PathBuf>,
    /// Tensors sampled by the micro-profiler.
    #[arg(long, default_value_t = 16)]
    sample: usize,
    /// Expert execution time used with a measured profile, seconds.
    #[arg(long, default_value_t = 0.0)]
    p_default: f64,
    /// Worker threads; overrides the profile's `l`.
    #[arg(long, env = "ZMOE_WORKERS")]
    workers: Option<usize>,
}

impl ProfileArgs {
    fn load(&self) -> Result<ExecutionProfile> {
        let mut profile = match (&self.profile, &self.container) {
            (Some(path), _) => serde_json::from_str(&fs::read_to_string(path)?)?,
            (None, Some(path)) => {
                let c = Container::open(path)?;
                let mut p = measure_profile(&c, self.sample, self.workers.unwrap_or(1))?;
                p.p_default = self.p_default;
                p
            }
            (None, None) => return Err(Error::InvalidArgument("either --profile or --container is required".into())),
        };
        if let Some(l) = self.workers {
            profile.l = l;
        }
        profile.validate()?;
        Ok(profile)
    }
}

#[derive(Args)]
struct PlanArgs {
    #[arg(long)]
    trace: PathBuf,
    #[command(flatten)]
    profile: ProfileArgs,
    /// Memory budget per layer in bytes.
    #[arg(long)]
    budget: u64,
    /// Grid resolution of the memory ratios; must divide 1.
    #[arg(long, default_value_t = 0.1)]
    step: f64,
    /// Pools to search over, e.g. `F,C,E`.
    #[arg(long, default_value = "F,C,S,E")]
    pools: String,
    /// Experts per layer; inferred from the trace when absent.
    #[arg(long)]
    num_experts: Option<usize>,
    /// Routed experts per step; inferred from the trace when absent.
    #[arg(long)]
    k: Option<usize>,
    /// Estimate the rank model from this layer only instead of pooling all layers.
    #[arg(long)]
    layer: Option<u32>,
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    trace: PathBuf,
    /// Pool plan JSON; every expert misses when absent.
    #[arg(long)]
    plan: Option<PathBuf>,
    #[command(flatten)]
    profile: ProfileArgs,
    #[arg(long, default_value = "frequency")]
    policy: EvictionPolicy,
    #[arg(long, value_enum, default_value = "separate")]
    io_model: ModeArg,
    #[arg(long)]
    num_experts: Option<usize>,
    #[arg(long, default_value = "json")]
    format: ReportFormat,
    #[arg(long)]
    output: Option<PathBuf>,
    /// Write every step's timeline as JSON lines.
    #[arg(long)]
    dump_timeline: Option<PathBuf>,
    /// Write the final pool contents of every layer as JSON.
    #[arg(long)]
    dump_cache: Option<PathBuf>,
    /// Also run every eviction policy with and without the plan and write the table here.
    #[arg(long)]
    ablation: Option<PathBuf>,
    /// Budget for the full-experts-only baseline of the ablation; defaults to the plan's footprint.
    #[arg(long)]
    baseline_budget: Option<u64>,
}

#[derive(Args)]
struct PipelineArgs {
    container: PathBuf,
    /// `layer:expert` pairs separated by commas; all experts when absent.
    #[arg(long)]
    experts: Option<String>,
    #[arg(long, env = "ZMOE_WORKERS", default_value_t = 1)]
    workers: usize,
    #[arg(long, value_enum, default_value = "separate")]
    mode: ModeArg,
    #[arg(long, default_value_t = 120)]
    watchdog_secs: u64,
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    input: PathBuf,
    #[arg(long, default_value = "md")]
    format: ReportFormat,
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct GenTraceArgs {
    #[arg(long)]
    num_experts: usize,
    #[arg(long)]
    k: usize,
    #[arg(long)]
    steps: usize,
    /// Zipf exponent of expert popularity.
    #[arg(long, default_value_t = 1.0)]
    skew: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    layers: usize,
    #[arg(long, default_value_t = 1)]
    batch: usize,
    #[arg(long)]
    output: PathBuf,
}

fn emit(output: Option<&Path>, text: &str) -> Result<()> {
    match output {
        Some(path) => fs::write(path, text)?,
        None => std::io::stdout().lock().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn parse_raw_name(name: &str) -> Option<ExpertKey> {
    let stem = name.strip_suffix(".bf16")?;
    let mut parts = stem.split('_');
    let layer = parts.next()?.strip_prefix('l')?.parse().ok()?;
    let expert = parts.next()?.strip_prefix('e')?.parse().ok()?;
    let tensor = parts.next()?.strip_prefix('t')?.parse().ok()?;
    parts.next().is_none().then(|| ExpertKey::new(layer, expert, tensor))
}

fn compress(args: CompressArgs) -> Result<()> {
    let codec = args.codec.codec()?;
    let mut tensors = BTreeMap::new();
    for entry in fs::read_dir(&args.input)? {
        let entry = entry?;
        let name = entry.file_name();
        let Some(key) = name.to_str().and_then(parse_raw_name) else {
            log::warn!("skipping {}", entry.path().display());
            continue;
        };
        tensors.insert(key, Bf16Buffer::from_le_bytes(&fs::read(entry.path())?)?);
    }
    let header = pack_container(&tensors, args.k, codec, &args.output)?;
    let all: Vec<Bf16Buffer> = tensors.into_values().collect();
    let report = compression_report(&all, codec, args.k)?;
    let summary = serde_json::json!({
        "experts": header.experts.len(),
        "tensors_per_expert": header.tensors_per_expert,
        "k": header.k,
        "codec": codec.name(),
        "file_bytes": fs::metadata(&args.output)?.len(),
        "rho": report.rho,
        "total_ratio": report.total_ratio,
        "exponent_entropy": report.entropy,
    });
    emit(None, &(serde_json::to_string_pretty(&summary)? + "\n"))
}

fn inspect(args: InspectArgs) -> Result<()> {
    let c = Container::open(&args.container)?;
    let h = c.header();
    let (mut elements, mut e_bytes) = (0u64, 0u64);
    for rec in h.experts.iter().flat_map(|e| &e.tensors) {
        elements += rec.element_count;
        e_bytes += rec.e_chunk_lengths.iter().map(|&l| l.saturating_sub(FRAME_HEADER_LEN as u64)).sum::<u64>();
    }
    if args.verify {
        for (layer, e) in c.experts().collect::<Vec<_>>() {
            for t in 0..c.tensors_per_expert() as u16 {
                c.reconstruct(ExpertKey::new(layer, e, t))?;
            }
        }
    }
    let layers: std::collections::BTreeSet<u32> = c.experts().map(|(l, _)| l).collect();
    let summary = serde_json::json!({
        "version": h.version,
        "codec": c.codec()?.name(),
        "k": h.k,
        "tensors_per_expert": h.tensors_per_expert,
        "experts": h.experts.len(),
        "layers": layers,
        "elements": elements,
        "rho": if elements > 0 { e_bytes as f64 / elements as f64 } else { 0.0 },
        "file_bytes": fs::metadata(&args.container)?.len(),
        "verified": args.verify,
    });
    emit(None, &(serde_json::to_string_pretty(&summary)? + "\n"))
}

fn plan(args: PlanArgs) -> Result<()> {
    let trace = read_trace(&args.trace)?;
    let profile = args.profile.load()?;
    let n = args.num_experts.unwrap_or_else(|| num_experts_in(&trace));
    let k = match args.k {
        Some(k) => k,
        None => infer_k(&trace).ok_or_else(|| Error::InvalidArgument("empty trace".into()))?,
    };
    let per_layer = activation_counts(&trace, n)?;
    let counts = match args.layer {
        Some(l) => per_layer.get(l as usize).cloned().ok_or_else(|| Error::NotFound(format!("layer {l} in trace")))?,
        None => pool_layer_counts(&per_layer),
    };
    let model = build_rank_model(&counts, k)?;
    let selection = fit_selection_probs(&model, DEFAULT_TOL, DEFAULT_MAX_ITER)?;
    log::info!("selection model converged in {} iterations", selection.iterations);
    let pools = Pool::parse_list(&args.pools)?;
    let plan = plan_pools(&model, &selection, &pools, args.budget, &profile, args.step)?;
    if let Some(w) = &plan.warning {
        log::warn!("{w}");
    }
    emit(args.output.as_deref(), &(plan.to_json()? + "\n"))
}

fn simulate(args: SimulateArgs) -> Result<()> {
    let trace = read_trace(&args.trace)?;
    let profile = args.profile.load()?;
    let n = args.num_experts.unwrap_or_else(|| num_experts_in(&trace));
    let plan = match &args.plan {
        Some(path) => PoolPlan::from_json(&fs::read_to_string(path)?)?,
        None => PoolPlan::empty(n),
    };
    let mut config = SimulationConfig::new(n);
    config.policy = args.policy;
    config.io_model = args.io_model.into();
    if let Some(path) = &args.profile.container {
        config.available = Some(Container::open(path)?.experts().collect());
    }

    let mut timeline = match &args.dump_timeline {
        Some(path) => Some(std::io::BufWriter::new(fs::File::create(path)?)),
        None => None,
    };
    let mut caches: BTreeMap<u32, serde_json::Value> = BTreeMap::new();
    let report: SimulationReport =
        run_simulation_observed(&trace, &plan, &profile, &config, |rec, schedule, pools| {
            if let Some(w) = timeline.as_mut() {
                let line = serde_json::json!({
                    "layer": rec.layer,
                    "step": rec.step,
                    "blocks": schedule.blocks,
                    "timeline": schedule.timeline,
                });
                writeln!(w, "{}", serde_json::to_string(&line)?)?;
            }
            if args.dump_cache.is_some() {
                caches.insert(rec.layer, serde_json::from_str(&pools.dump_json()?)?);
            }
            Ok(())
        })?;
    if let Some(mut w) = timeline {
        w.flush()?;
    }
    if let Some(path) = &args.dump_cache {
        fs::write(path, serde_json::to_string_pretty(&caches)? + "\n")?;
    }
    if let Some(path) = &args.ablation {
        let budget = match args.baseline_budget {
            Some(b) => b,
            None => {
                let elements = profile
                    .elements_per_tensor
                    .ok_or_else(|| Error::InvalidArgument("profile lacks elements_per_tensor".into()))?;
                plan.footprint(profile.n, elements, profile.rho).ceil() as u64
            }
        };
        let baseline = full_only_plan(budget, n, &profile)?;
        let rows = ablation(&trace, &plan, &baseline, &profile, &config)?;
        fs::write(path, serde_json::to_string_pretty(&rows)? + "\n")?;
    }
    emit(args.output.as_deref(), &render(&report, args.format)?)
}

fn parse_experts(s: &str) -> Result<Vec<(u32, u32)>> {
    s.split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|p| {
            let (l, e) = p
                .trim()
                .split_once(':')
                .ok_or_else(|| Error::InvalidArgument(format!("expected layer:expert, got '{p}'")))?;
            let parse = |x: &str| x.parse::<u32>().map_err(|_| Error::InvalidArgument(format!("bad id '{x}'")));
            Ok((parse(l)?, parse(e)?))
        })
        .collect()
}

fn pipeline(args: PipelineArgs) -> Result<()> {
    let c = Container::open(&args.container)?;
    let experts = match &args.experts {
        Some(s) => parse_experts(s)?,
        None => c.experts().collect(),
    };
    // decompression timings only steer block construction here
    let profile = ExecutionProfile::new(1.0, 1.0, 0.5, c.k(), args.workers.max(1), c.tensors_per_expert());
    let mut options = PipelineOptions::new(args.workers, args.mode.into());
    options.watchdog = std::time::Duration::from_secs(args.watchdog_secs);
    let report = pipeline_bench(&c, &experts, &profile, options, None)?;
    emit(args.output.as_deref(), &(serde_json::to_string_pretty(&report)? + "\n"))
}

fn report(args: ReportArgs) -> Result<()> {
    let r: SimulationReport = serde_json::from_str(&fs::read_to_string(&args.input)?)?;
    emit(args.output.as_deref(), &render(&r, args.format)?)
}

fn gen(args: GenTraceArgs) -> Result<()> {
    let mut spec = TraceSpec::new(args.num_experts, args.k, args.steps, args.skew, args.seed);
    spec.layers = args.layers;
    spec.batch = args.batch;
    write_trace(&args.output, &gen_trace(&spec)?)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Compress(a) => compress(a),
        Command::Inspect(a) => inspect(a),
        Command::Plan(a) => plan(a),
        Command::Simulate(a) => simulate(a),
        Command::PipelineBench(a) => pipeline(a),
        Command::Report(a) => report(a),
        Command::GenTrace(a) => gen(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("zmoe: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
