use std::fs::File;
use std::io::BufWriter;
use std::path::PathBuf;

use clap::Args;
use maxmatch_core::convergence::{
    horizon_sweep, run_convergence_experiment, ConvergenceSpec, ConvergenceTrace,
};
use maxmatch_core::plot::{LinePlot, Series};
use serde::Serialize;

use crate::error::{CliError, CliResult};
use crate::manifest::{
    emit_json, now_ms, output_dir, read_json_or_default, write_json, write_text, RunManifest,
    SeedTriple,
};
use crate::Global;

#[derive(Debug, Args)]
pub struct ConvergeArgs {
    /// Experiment description as JSON.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the noise and start-point seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Comma-separated horizons; runs each with its own step size and fits the slope across them.
    #[arg(long, value_delimiter = ',')]
    pub sweep: Vec<u64>,
    /// Also write a log-log SVG of the trace.
    #[arg(long)]
    pub plot: bool,
}

#[derive(Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
struct HorizonRow {
    horizon: u64,
    eta: f64,
    running_avg_sq: f64,
    rhs_bound: f64,
}

#[derive(Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct ConvergeSummary {
    pub steps: u64,
    pub eta: f64,
    pub lipschitz: f64,
    pub b: f64,
    pub initial_gap: f64,
    pub running_avg_sq: f64,
    pub rhs: f64,
    pub slope: f64,
    pub bound_holds: bool,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub horizons: Vec<u64>,
}

const TRACE_COLUMNS: [&str; 4] = ["step", "envelope-grad-norm", "running-avg-sq", "rhs-bound"];

fn write_trace(path: &std::path::Path, trace: &ConvergenceTrace) -> CliResult<()> {
    let file = File::create(path).map_err(CliError::io(path))?;
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(BufWriter::new(file));
    w.write_record(TRACE_COLUMNS)?;
    for p in &trace.points {
        w.write_record([
            p.step.to_string(),
            p.envelope_grad_norm.to_string(),
            p.running_avg_sq.to_string(),
            p.rhs_bound.to_string(),
        ])?;
    }
    w.flush().map_err(CliError::io(path))
}

fn trace_plot(trace: &ConvergenceTrace) -> LinePlot {
    let series = |label: &str, f: fn(&maxmatch_core::convergence::TracePoint) -> f64| {
        Series::new(
            label,
            trace.points.iter().map(|p| (p.step as f64, f(p))).collect(),
        )
    };
    let mut plot = LinePlot::new("envelope gradient", "step", "value")
        .with_series(series("running-avg-sq", |p| p.running_avg_sq))
        .with_series(series("rhs-bound", |p| p.rhs_bound))
        .with_series(series("envelope-grad-norm", |p| p.envelope_grad_norm));
    plot.log_x = true;
    plot.log_y = true;
    plot
}

pub fn run(args: &ConvergeArgs, g: &Global) -> CliResult<()> {
    let mut spec: ConvergenceSpec = read_json_or_default(args.config.as_deref())?;
    if let Some(s) = args.seed {
        spec.seed = s;
    }
    if args.sweep.contains(&0) {
        return Err(CliError::Config("sweep horizons must be positive".into()));
    }
    let dir = output_dir(args.out.as_deref(), &g.out_root, "converge")?;
    let seeds = SeedTriple {
        model: spec.center_seed,
        data: spec.seed,
        augment: 0,
    };
    let mut manifest = RunManifest::new("converge", &spec, seeds)?;
    manifest
        .outputs
        .insert("trace".into(), dir.join("trace.csv"));
    manifest
        .outputs
        .insert("summary".into(), dir.join("summary.json"));
    if !args.sweep.is_empty() {
        manifest
            .outputs
            .insert("sweep".into(), dir.join("sweep.csv"));
    }
    if args.plot {
        manifest
            .outputs
            .insert("plot".into(), dir.join("trace.svg"));
    }
    manifest.write(&dir)?;

    let trace = run_convergence_experiment(&spec)?;
    let mut slope = trace.slope;
    if !args.sweep.is_empty() {
        let (runs, fitted) = horizon_sweep(&spec, &args.sweep)?;
        slope = fitted;
        let path = dir.join("sweep.csv");
        let file = File::create(&path).map_err(CliError::io(&path))?;
        let mut w = csv::Writer::from_writer(BufWriter::new(file));
        for (&horizon, r) in args.sweep.iter().zip(&runs) {
            w.serialize(HorizonRow {
                horizon,
                eta: r.eta,
                running_avg_sq: r.running_avg_sq,
                rhs_bound: r.rhs,
            })?;
        }
        w.flush().map_err(CliError::io(&path))?;
        if !g.quiet {
            for (&horizon, r) in args.sweep.iter().zip(&runs) {
                eprintln!(
                    "T {horizon:>8}  avg {:.4e}  rhs {:.4e}",
                    r.running_avg_sq, r.rhs
                );
            }
        }
    }

    write_trace(&dir.join("trace.csv"), &trace)?;
    if args.plot {
        write_text(&dir.join("trace.svg"), &trace_plot(&trace).to_svg())?;
    }
    let summary = ConvergeSummary {
        steps: spec.steps,
        eta: trace.eta,
        lipschitz: trace.lipschitz,
        b: trace.b,
        initial_gap: trace.initial_gap,
        running_avg_sq: trace.running_avg_sq,
        rhs: trace.rhs,
        slope,
        bound_holds: trace.running_avg_sq <= trace.rhs,
        horizons: args.sweep.clone(),
    };
    write_json(&dir.join("summary.json"), &summary)?;
    manifest.finished_at = Some(now_ms());
    manifest.write(&dir)?;
    emit_json(&summary)?;
    Ok(())
}
