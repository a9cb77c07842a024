//! Traces, trace-driven simulation, the threaded pipeline and reports.

pub mod pipeline;
pub mod profiler;
pub mod report;
pub mod sim;
pub mod trace;

pub use pipeline::{pipeline_bench, PipelineOptions, PipelineReport};
pub use profiler::measure_profile;
pub use report::{render, ReportFormat};
pub use sim::{
    ablation, full_only_plan, run_simulation, run_simulation_observed, AblationRow, SimulationConfig, SimulationReport,
    StepReport,
};
pub use trace::{gen_trace, read_trace, write_trace, TraceRecord, TraceSpec};
