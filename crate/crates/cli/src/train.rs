use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use clap::Args;
use maxmatch_core::data::DatasetSpec;
use maxmatch_core::plot::{LinePlot, Series};
use maxmatch_core::rng::derive;
use maxmatch_core::trainer::{write_metrics_csv, MetricsRow, TrainConfig, TrainData, Trainer};
use maxmatch_core::Error;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};
use crate::manifest::{
    emit_json, now_ms, output_dir, read_json_or_default, write_json, write_text, RunManifest,
    SeedTriple,
};
use crate::Global;

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training job as JSON (`dataset` and `train` sections).
    #[arg(long, conflicts_with = "manifest")]
    pub config: Option<PathBuf>,
    /// Re-run exactly the job recorded in a manifest.
    #[arg(long, conflicts_with = "seed")]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Sets the model, data and augmentation seeds.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of folds, each with seeds derived from the base seeds.
    #[arg(long, default_value_t = 1)]
    pub folds: usize,
    /// Also write an SVG of the losses and test error.
    #[arg(long)]
    pub plot: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", default, deny_unknown_fields)]
pub struct TrainJob {
    pub dataset: DatasetSpec,
    pub train: TrainConfig,
}

impl TrainJob {
    pub fn seeds(&self) -> SeedTriple {
        SeedTriple {
            model: self.train.model_seed,
            data: self.train.data_seed,
            augment: self.train.augment_seed,
        }
    }

    fn fold(&self, f: u64) -> TrainJob {
        let mut job = self.clone();
        job.dataset.fold_seed = derive(self.dataset.fold_seed, &[f]);
        job.train.model_seed = derive(self.train.model_seed, &[f]);
        job.train.data_seed = derive(self.train.data_seed, &[f]);
        job.train.augment_seed = derive(self.train.augment_seed, &[f]);
        job
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation; zero for a single value.
    pub std: f64,
    pub values: Vec<f64>,
}

impl MeanStd {
    pub fn of(values: Vec<f64>) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = if values.len() > 1 {
            values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        Self {
            mean,
            std: var.sqrt(),
            values,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct FoldSummary {
    pub folds: usize,
    pub test_err: MeanStd,
    pub ema_test_err: MeanStd,
}

pub fn run(args: &TrainArgs, g: &Global) -> CliResult<()> {
    let quiet = g.quiet;
    let (job, folds) = match &args.manifest {
        Some(path) => {
            let m = RunManifest::read(path)?;
            if m.subcommand != "train" {
                return Err(CliError::Config(format!(
                    "{} records a `{}` run, not `train`",
                    path.display(),
                    m.subcommand
                )));
            }
            (m.config_as::<TrainJob>(path)?, m.folds)
        }
        None => {
            let mut job: TrainJob = read_json_or_default(args.config.as_deref())?;
            if let Some(s) = args.seed {
                job.train.model_seed = s;
                job.train.data_seed = s;
                job.train.augment_seed = s;
            }
            (job, args.folds)
        }
    };
    if folds == 0 {
        return Err(CliError::Config("--folds must be at least 1".into()));
    }
    job.train.validate()?;
    let dir = output_dir(args.out.as_deref(), &g.out_root, "train")?;

    if folds == 1 {
        let last = run_one(&job, &dir, args.plot, quiet)?;
        emit_json(&last)?;
        return Ok(());
    }

    let mut manifest = RunManifest::new("train", &job, job.seeds())?;
    manifest.folds = folds;
    for f in 0..folds {
        manifest
            .outputs
            .insert(format!("fold-{f}"), dir.join(format!("fold-{f}")));
    }
    manifest
        .outputs
        .insert("summary".into(), dir.join("summary.json"));
    manifest.write(&dir)?;
    let mut finals = Vec::with_capacity(folds);
    for f in 0..folds {
        if !quiet {
            eprintln!("fold {}/{folds}", f + 1);
        }
        let fold_dir = dir.join(format!("fold-{f}"));
        std::fs::create_dir_all(&fold_dir).map_err(CliError::io(&fold_dir))?;
        finals.push(run_one(&job.fold(f as u64), &fold_dir, args.plot, quiet)?);
    }
    let summary = FoldSummary {
        folds,
        test_err: MeanStd::of(finals.iter().map(|r| r.test_err).collect()),
        ema_test_err: MeanStd::of(finals.iter().map(|r| r.ema_test_err).collect()),
    };
    write_json(&dir.join("summary.json"), &summary)?;
    manifest.finished_at = Some(now_ms());
    manifest.write(&dir)?;
    emit_json(&summary)?;
    if !quiet {
        eprintln!(
            "test error {:.2} ± {:.2} %, EMA {:.2} ± {:.2} %",
            100.0 * summary.test_err.mean,
            100.0 * summary.test_err.std,
            100.0 * summary.ema_test_err.mean,
            100.0 * summary.ema_test_err.std
        );
    }
    Ok(())
}

/// Trains one job into `dir` and returns its last logged row.
fn run_one(job: &TrainJob, dir: &Path, plot: bool, quiet: bool) -> CliResult<MetricsRow> {
    let mut manifest = RunManifest::new("train", job, job.seeds())?;
    let metrics_path = dir.join("metrics.csv");
    manifest
        .outputs
        .insert("metrics".into(), metrics_path.clone());
    manifest
        .outputs
        .insert("model".into(), dir.join("model.snap"));
    manifest.outputs.insert("ema".into(), dir.join("ema.snap"));
    if plot {
        manifest
            .outputs
            .insert("plot".into(), dir.join("metrics.svg"));
    }
    manifest.write(dir)?;

    let data = TrainData::from_spec(&job.dataset)?;
    let mut trainer = Trainer::new(job.train.clone(), &data)?;
    let rows = trainer
        .run(|r| {
            if !quiet {
                eprintln!(
                    "step {:>6}  loss_l {:.4}  loss_u {:.4}  mask {:.2}  test_err {:.4}",
                    r.step, r.loss_l, r.loss_u, r.mask_rate, r.test_err
                );
            }
        })
        .map_err(|e| match e {
            Error::NanLoss { step, snapshot } => {
                let path = dir.join("nan-snapshot.snap");
                if let Err(save) = snapshot.save(&path) {
                    eprintln!("could not save the failing snapshot: {save}");
                }
                CliError::Core(Error::NanLoss { step, snapshot })
            }
            other => other.into(),
        })?;

    let file = File::create(&metrics_path).map_err(CliError::io(&metrics_path))?;
    write_metrics_csv(&rows, BufWriter::new(file))?;
    let state = trainer.state();
    state.network.snapshot().save(&dir.join("model.snap"))?;
    state.ema.snapshot().save(&dir.join("ema.snap"))?;
    if plot {
        write_text(&dir.join("metrics.svg"), &metrics_plot(&rows).to_svg())?;
    }
    manifest.finished_at = Some(now_ms());
    manifest.write(dir)?;
    rows.last()
        .cloned()
        .ok_or_else(|| CliError::Config("no steps were run; set steps above 0".into()))
}

fn metrics_plot(rows: &[MetricsRow]) -> LinePlot {
    let series = |label: &str, f: fn(&MetricsRow) -> f64| {
        Series::new(label, rows.iter().map(|r| (r.step as f64, f(r))).collect())
    };
    LinePlot::new("training curves", "step", "value")
        .with_series(series("loss_l", |r| r.loss_l))
        .with_series(series("loss_u_max", |r| r.loss_u_max))
        .with_series(series("loss_u_mean", |r| r.loss_u_mean))
        .with_series(series("loss_u_min", |r| r.loss_u_min))
        .with_series(series("test_err", |r| r.test_err))
}
