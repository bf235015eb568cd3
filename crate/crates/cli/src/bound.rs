use std::io::Write;
use std::path::{Path, PathBuf};

use clap::Args;
use maxmatch_core::augment::build_uncertainty_set;
use maxmatch_core::autodiff::Tensor;
use maxmatch_core::model::{Network, ParamSnapshot};
use maxmatch_core::theory::{
    empirical_risk_labeled, empirical_risk_unlabeled_worst, generalization_bound,
    measure_norm_bounds, BoundConfig, BoundReport, NormBounds,
};
use maxmatch_core::trainer::TrainData;
use serde::Serialize;

use crate::error::{CliError, CliResult};
use crate::manifest::{emit_json, read_json_or_default, write_json, RunManifest, MANIFEST_FILE};
use crate::train::TrainJob;

#[derive(Debug, Args)]
pub struct BoundArgs {
    /// Bound configuration as JSON.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 0.0)]
    pub risk_labeled: f64,
    #[arg(long, default_value_t = 0.0)]
    pub risk_unlabeled: f64,
    /// Training output directory to measure risks, sizes and norms from.
    #[arg(long)]
    pub run: Option<PathBuf>,
    /// Cap on the unlabeled samples used for the measured risk.
    #[arg(long, default_value_t = 1000)]
    pub max_unlabeled: usize,
    /// `field=start:stop:points`; emits one CSV row per grid value.
    #[arg(long)]
    pub sweep: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
struct BoundOutput {
    config: BoundConfig,
    measured: Option<NormBounds>,
    report: BoundReport,
}

#[derive(Debug, PartialEq)]
pub struct Sweep {
    pub field: String,
    pub values: Vec<f64>,
}

pub fn parse_sweep(spec: &str) -> CliResult<Sweep> {
    let bad = || {
        CliError::Config(format!(
            "sweep `{spec}` is not of the form field=start:stop:points"
        ))
    };
    let (field, range) = spec.split_once('=').ok_or_else(bad)?;
    let parts: Vec<&str> = range.split(':').collect();
    let [start, stop, points] = parts[..] else {
        return Err(bad());
    };
    let start: f64 = start.trim().parse().map_err(|_| bad())?;
    let stop: f64 = stop.trim().parse().map_err(|_| bad())?;
    let points: usize = points.trim().parse().map_err(|_| bad())?;
    if points == 0 {
        return Err(bad());
    }
    let values = (0..points)
        .map(|i| {
            if points == 1 {
                start
            } else {
                start + (stop - start) * i as f64 / (points - 1) as f64
            }
        })
        .collect();
    Ok(Sweep {
        field: field.trim().to_string(),
        values,
    })
}

/// Fills the data-dependent fields of `cfg` from a finished training run
/// and returns the measured risks.
fn measure_run(
    dir: &Path,
    cfg: &mut BoundConfig,
    max_unlabeled: usize,
) -> CliResult<(f64, f64, NormBounds)> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let job: TrainJob = RunManifest::read(&manifest_path)?.config_as(&manifest_path)?;
    let net = Network::from_snapshot(ParamSnapshot::load(&dir.join("model.snap"))?)?;
    let init = Network::init(&net.architecture(), job.train.model_seed)?;
    let data = TrainData::from_spec(&job.dataset)?;
    let shape = data.train.sample_shape;
    let labeled = data.labeled();
    let risk_l = empirical_risk_labeled(&net, &labeled.features, &labeled.labels)?;

    let k = cfg.k.round().max(1.0) as usize;
    let ids: Vec<usize> = data
        .split
        .unlabeled
        .iter()
        .copied()
        .take(max_unlabeled)
        .collect();
    let x_u = data.train.gather(&ids);
    let usets = ids
        .iter()
        .map(|&i| {
            build_uncertainty_set(
                data.train.sample(i),
                shape,
                k,
                job.train.augment_seed,
                i as u64,
                0,
                &job.train.augment,
            )
        })
        .collect::<maxmatch_core::Result<Vec<_>>>()?;
    let risk_u = empirical_risk_unlabeled_worst(&net, &x_u, &usets, cfg.eps)?;
    let variants: Vec<f64> = usets.iter().flat_map(|u| u.variants.concat()).collect();
    let transformed = Tensor::new(vec![variants.len() / shape.len(), shape.len()], variants)?;
    let norms = measure_norm_bounds(&init, &net, &data.train.features, &transformed)?;

    cfg.n_labeled = labeled.len() as f64;
    cfg.n_unlabeled = data.split.unlabeled.len() as f64;
    cfg.n_classes = data.train.n_classes as f64;
    cfg.params = net.param_count() as f64;
    cfg.params_single = net.single_output_param_count() as f64;
    cfg.chi = norms.chi;
    cfg.chi_tau = norms.chi_tau;
    cfg.nu = norms.nu;
    cfg.beta_dist = norms.beta_dist;
    Ok((risk_l, risk_u, norms))
}

fn report_fields(r: &BoundReport) -> [(&'static str, f64); 15] {
    [
        ("c1", r.c1),
        ("c2", r.c2),
        ("c-n", r.c_n),
        ("c-m", r.c_m),
        ("psi-small", r.psi_small),
        ("psi-big", r.psi_big),
        ("risk-labeled", r.risk_labeled),
        ("risk-unlabeled", r.risk_unlabeled),
        ("term-unlabeled-risk", r.term_unlabeled_risk),
        ("term-labeled-risk", r.term_labeled_risk),
        ("term-unlabeled-complexity", r.term_unlabeled_complexity),
        ("k-summand", r.k_summand),
        ("unlabeled-deviation", r.unlabeled_deviation),
        ("term-labeled-complexity", r.term_labeled_complexity),
        ("total", r.total),
    ]
}

fn table(r: &BoundReport) -> String {
    report_fields(r)
        .iter()
        .map(|(name, v)| format!("{name:<26} {v:>16.6e}\n"))
        .collect()
}

pub fn run(args: &BoundArgs, quiet: bool) -> CliResult<()> {
    let mut cfg: BoundConfig = read_json_or_default(args.config.as_deref())?;
    let (mut risk_l, mut risk_u) = (args.risk_labeled, args.risk_unlabeled);
    let mut measured = None;
    if let Some(dir) = &args.run {
        let (l, u, norms) = measure_run(dir, &mut cfg, args.max_unlabeled)?;
        risk_l = l;
        risk_u = u;
        measured = Some(norms);
    }
    if let Some(out) = &args.out {
        std::fs::create_dir_all(out).map_err(CliError::io(out))?;
    }

    if let Some(spec) = &args.sweep {
        let sweep = parse_sweep(spec)?;
        let mut buf = Vec::new();
        {
            let mut w = csv::WriterBuilder::new()
                .has_headers(false)
                .from_writer(&mut buf);
            for (i, &v) in sweep.values.iter().enumerate() {
                let mut point = cfg.clone();
                point.set(&sweep.field, v)?;
                let fields = report_fields(&generalization_bound(&point, risk_l, risk_u)?);
                if i == 0 {
                    let names = fields.iter().map(|f| f.0);
                    w.write_record(std::iter::once(sweep.field.as_str()).chain(names))?;
                }
                w.write_record(
                    std::iter::once(v.to_string()).chain(fields.iter().map(|f| f.1.to_string())),
                )?;
            }
            w.flush().map_err(CliError::io("<sweep>"))?;
        }
        match &args.out {
            Some(out) => {
                let path = out.join("sweep.csv");
                std::fs::write(&path, &buf).map_err(CliError::io(&path))?;
            }
            None => std::io::stdout()
                .write_all(&buf)
                .map_err(CliError::io("<stdout>"))?,
        }
        return Ok(());
    }

    let report = generalization_bound(&cfg, risk_l, risk_u)?;
    if !quiet {
        eprint!("{}", table(&report));
    }
    let output = BoundOutput {
        config: cfg,
        measured,
        report,
    };
    if let Some(out) = &args.out {
        write_json(&out.join("bound.json"), &output)?;
    }
    emit_json(&output)?;
    Ok(())
}
