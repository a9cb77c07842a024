use std::fmt::Write as _;
use std::str::FromStr;

use super::sim::SimulationReport;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
    Md,
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "json" => Ok(Self::Json),
            "csv" => Ok(Self::Csv),
            "md" | "markdown" => Ok(Self::Md),
            _ => Err(Error::invalid(format!("unknown report format '{s}'"))),
        }
    }
}

pub const CSV_HEADER: &str =
    "layer,step,makespan,charge,io_busy,sequential_sum,overlap_ratio,hits_f,hits_c,hits_s,hits_e,hits_m,tasks";

pub fn render(report: &SimulationReport, format: ReportFormat) -> Result<String> {
    match format {
        ReportFormat::Json => Ok(serde_json::to_string_pretty(report)? + "\n"),
        ReportFormat::Csv => {
            let mut out = String::from(CSV_HEADER);
            out.push('\n');
            for s in &report.steps {
                let [f, c, sm, e, m] = s.hits;
                writeln!(
                    out,
                    "{},{},{},{},{},{},{},{f},{c},{sm},{e},{m},{}",
                    s.layer, s.step, s.makespan, s.charge, s.io_busy, s.sequential_sum, s.overlap_ratio, s.tasks
                )
                .unwrap();
            }
            Ok(out)
        }
        ReportFormat::Md => {
            let s = &report.summary;
            let mut out = String::from("# Simulation report\n\n## Configuration\n\n```json\n");
            out += &serde_json::to_string_pretty(&(&report.config, &report.profile, &report.plan))?;
            out += "\n```\n\n## Makespan (s)\n\n| steps | mean | p50 | p90 | p99 | max |\n|---|---|---|---|---|---|\n";
            writeln!(
                out,
                "| {} | {:.6} | {:.6} | {:.6} | {:.6} | {:.6} |",
                s.steps, s.mean_makespan, s.p50, s.p90, s.p99, s.max_makespan
            )
            .unwrap();
            writeln!(
                out,
                "\n## Pipeline\n\n- total charge: {:.6} s\n- I/O busy fraction: {:.4}\n- overlap ratio: {:.4}\n- tokens: {}",
                s.total_charge, s.io_busy_fraction, s.overlap_ratio, s.tokens
            )
            .unwrap();
            out += "\n## Hit patterns\n\n| pattern | steps |\n|---|---|\n";
            for (k, v) in &s.hit_histogram {
                writeln!(out, "| {k} | {v} |").unwrap();
            }
            Ok(out)
        }
    }
}
