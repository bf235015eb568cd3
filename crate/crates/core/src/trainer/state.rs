//! Resumable training state.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::model::{Network, ParamSnapshot};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub network: Network,
    pub ema: Network,
    /// Momentum buffers in parameter order.
    pub velocity: Vec<Tensor>,
    /// Number of completed steps.
    pub step: u64,
}

#[derive(Serialize, Deserialize)]
struct StateHeader {
    step: u64,
}

const MODEL_FILE: &str = "model.snap";
const EMA_FILE: &str = "ema.snap";
const VELOCITY_FILE: &str = "velocity.snap";
const HEADER_FILE: &str = "state.json";

impl TrainState {
    pub fn fresh(network: Network) -> Self {
        let velocity = network.params().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            ema: network.clone(),
            network,
            velocity,
            step: 0,
        }
    }

    fn velocity_snapshot(&self) -> ParamSnapshot {
        let mut snap = self.network.snapshot();
        for (layer, pair) in snap.layers.iter_mut().zip(self.velocity.chunks(2)) {
            layer.weight = pair[0].clone();
            layer.bias = pair[1].clone();
        }
        snap
    }

    /// Writes the state into `dir` (created if missing).
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        self.network.snapshot().save(&dir.join(MODEL_FILE))?;
        self.ema.snapshot().save(&dir.join(EMA_FILE))?;
        self.velocity_snapshot().save(&dir.join(VELOCITY_FILE))?;
        fs::write(
            dir.join(HEADER_FILE),
            serde_json::to_vec_pretty(&StateHeader { step: self.step })?,
        )?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let network = Network::from_snapshot(ParamSnapshot::load(&dir.join(MODEL_FILE))?)?;
        let ema = Network::from_snapshot(ParamSnapshot::load(&dir.join(EMA_FILE))?)?;
        let vel = ParamSnapshot::load(&dir.join(VELOCITY_FILE))?;
        if ema.architecture() != network.architecture()
            || vel.architecture() != network.architecture()
        {
            return Err(Error::Architecture(
                "state files disagree on the layout".into(),
            ));
        }
        let header_path = dir.join(HEADER_FILE);
        let header: StateHeader =
            serde_json::from_slice(&fs::read(&header_path)?).map_err(|e| Error::Format {
                path: header_path.clone(),
                detail: e.to_string(),
            })?;
        let velocity = vel
            .layers
            .into_iter()
            .flat_map(|l| [l.weight, l.bias])
            .collect();
        Ok(Self {
            network,
            ema,
            velocity,
            step: header.step,
        })
    }
}
