use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use maxmatch_core::data::{Dataset, DatasetSpec};
use maxmatch_core::model::{Network, ParamSnapshot};
use maxmatch_core::trainer::TrainData;
use maxmatch_core::Error;
use serde::{Deserialize, Serialize};

use crate::error::CliResult;
use crate::manifest::{emit_json, read_json, write_json, RunManifest, MANIFEST_FILE};
use crate::train::TrainJob;

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// A snapshot file, or a training output directory.
    pub snapshot: PathBuf,
    /// EMA snapshot; taken from the run directory when omitted.
    #[arg(long)]
    pub ema: Option<PathBuf>,
    /// Dataset spec as JSON; defaults to the run's dataset.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = EvalSplit::Test)]
    pub split: EvalSplit,
    /// Also write the report to this directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum EvalSplit {
    Test,
    Train,
    Labeled,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct ErrorReport {
    pub error_rate: f64,
    pub per_class_errors: Vec<usize>,
    pub per_class_counts: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct EvalReport {
    pub samples: usize,
    pub raw: ErrorReport,
    pub ema: Option<ErrorReport>,
}

pub fn error_report(net: &Network, ds: &Dataset) -> CliResult<ErrorReport> {
    if net.input_len() != ds.sample_shape.len() || net.classes() != ds.n_classes {
        return Err(Error::Architecture(format!(
            "snapshot maps {} inputs to {} classes but the data has {} features and {} classes",
            net.input_len(),
            net.classes(),
            ds.sample_shape.len(),
            ds.n_classes
        ))
        .into());
    }
    let preds = net.forward(&ds.features)?.argmax_rows();
    let mut errors = vec![0; ds.n_classes];
    let mut counts = vec![0; ds.n_classes];
    for (&p, &y) in preds.iter().zip(&ds.labels) {
        counts[y] += 1;
        if p != y {
            errors[y] += 1;
        }
    }
    let wrong: usize = errors.iter().sum();
    Ok(ErrorReport {
        error_rate: if ds.is_empty() {
            0.0
        } else {
            wrong as f64 / ds.len() as f64
        },
        per_class_errors: errors,
        per_class_counts: counts,
    })
}

fn load_net(path: &Path) -> CliResult<Network> {
    Ok(Network::from_snapshot(ParamSnapshot::load(path)?)?)
}

pub fn run(args: &EvalArgs) -> CliResult<()> {
    let run_dir = args.snapshot.is_dir().then(|| args.snapshot.clone());
    let model_path = match &run_dir {
        Some(d) => d.join("model.snap"),
        None => args.snapshot.clone(),
    };
    let ema_path = args.ema.clone().or_else(|| {
        run_dir
            .as_ref()
            .map(|d| d.join("ema.snap"))
            .filter(|p| p.exists())
    });
    let spec: DatasetSpec = match (&args.data, &run_dir) {
        (Some(p), _) => read_json(p)?,
        (None, Some(d)) if d.join(MANIFEST_FILE).exists() => {
            let path = d.join(MANIFEST_FILE);
            RunManifest::read(&path)?
                .config_as::<TrainJob>(&path)?
                .dataset
        }
        _ => DatasetSpec::default(),
    };

    let net = load_net(&model_path)?;
    let ema = ema_path.as_deref().map(load_net).transpose()?;
    let data = TrainData::from_spec(&spec)?;
    let ds = match args.split {
        EvalSplit::Test => data.test.clone(),
        EvalSplit::Train => data.train.clone(),
        EvalSplit::Labeled => data.labeled(),
    };
    let report = EvalReport {
        samples: ds.len(),
        raw: error_report(&net, &ds)?,
        ema: ema.as_ref().map(|e| error_report(e, &ds)).transpose()?,
    };
    if let Some(out) = &args.out {
        std::fs::create_dir_all(out).map_err(crate::error::CliError::io(out))?;
        write_json(&out.join("eval.json"), &report)?;
    }
    emit_json(&report)?;
    Ok(())
}
