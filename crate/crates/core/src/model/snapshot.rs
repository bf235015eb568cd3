//! Parameter snapshots and the network distance.
//!
//! File layout: the 8-byte magic `MXSNAP01`, a little-endian `u64` header
//! length, a JSON header listing the layer kinds, then every weight and bias
//! value as little-endian `f64` in layer order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use super::operator::conv_operator_norm;
use super::spectral_norm;
use super::Architecture;
use crate::autodiff::Tensor;
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"MXSNAP01";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum LayerKind {
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        height: usize,
        width: usize,
        padding: usize,
    },
    Dense {
        inputs: usize,
        outputs: usize,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub kind: LayerKind,
    pub weight: Tensor,
    pub bias: Tensor,
}

/// A full copy of a network's parameters (also used for optimizer buffers).
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSnapshot {
    pub layers: Vec<Layer>,
}

impl ParamSnapshot {
    pub fn architecture(&self) -> Architecture {
        Architecture {
            layers: self.layers.iter().map(|l| l.kind.clone()).collect(),
        }
    }

    pub(crate) fn validate(&self) -> Result<()> {
        for (i, l) in self.layers.iter().enumerate() {
            if l.weight.shape() != l.kind.weight_shape().as_slice() {
                return Err(Error::Architecture(format!(
                    "layer {i} weight has shape {:?}, expected {:?}",
                    l.weight.shape(),
                    l.kind.weight_shape()
                )));
            }
            if l.bias.shape() != l.kind.bias_shape().as_slice() {
                return Err(Error::Architecture(format!(
                    "layer {i} bias has shape {:?}, expected {:?}",
                    l.bias.shape(),
                    l.kind.bias_shape()
                )));
            }
        }
        Ok(())
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let header = serde_json::to_vec(&self.architecture())?;
        w.write_all(MAGIC)?;
        w.write_u64::<LittleEndian>(header.len() as u64)?;
        w.write_all(&header)?;
        for layer in &self.layers {
            for &v in layer.weight.data().iter().chain(layer.bias.data()) {
                w.write_f64::<LittleEndian>(v)?;
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let r = BufReader::new(File::open(path)?);
        Self::read_from(r).map_err(|e| match e {
            Error::Format { detail, .. } => Error::Format {
                path: path.to_path_buf(),
                detail,
            },
            other => other,
        })
    }

    /// Decodes a snapshot; truncation and malformed headers are format errors.
    pub fn read_from(r: impl Read) -> Result<Self> {
        Self::decode(r).map_err(|e| match e {
            Error::Io(io) if io.kind() == std::io::ErrorKind::UnexpectedEof => Error::Format {
                path: Default::default(),
                detail: "truncated snapshot".into(),
            },
            Error::Json(j) => Error::Format {
                path: Default::default(),
                detail: format!("bad header: {j}"),
            },
            other => other,
        })
    }

    fn decode(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format {
                path: Default::default(),
                detail: "not a parameter snapshot".into(),
            });
        }
        let len = r.read_u64::<LittleEndian>()?;
        if len > 1 << 24 {
            return Err(Error::Format {
                path: Default::default(),
                detail: format!("implausible header length {len}"),
            });
        }
        let mut header = vec![0u8; len as usize];
        r.read_exact(&mut header)?;
        let arch: Architecture = serde_json::from_slice(&header)?;
        let mut layers = Vec::with_capacity(arch.layers.len());
        for kind in arch.layers {
            let mut read = |shape: Vec<usize>| -> Result<Tensor> {
                let n = shape.iter().product();
                let mut data = vec![0.0; n];
                r.read_f64_into::<LittleEndian>(&mut data)?;
                Tensor::new(shape, data)
            };
            let weight = read(kind.weight_shape())?;
            let bias = read(kind.bias_shape())?;
            layers.push(Layer { kind, weight, bias });
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(Error::Format {
                path: Default::default(),
                detail: "trailing bytes after snapshot payload".into(),
            });
        }
        Ok(Self { layers })
    }

    /// Same layout, every value zero.
    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    kind: l.kind.clone(),
                    weight: Tensor::zeros(l.weight.shape()),
                    bias: Tensor::zeros(l.bias.shape()),
                })
                .collect(),
        }
    }
}

/// Per-layer operator-norm distances between two networks of the same
/// architecture. Biases are ignored.
pub fn layer_distances(a: &ParamSnapshot, b: &ParamSnapshot) -> Result<Vec<f64>> {
    if a.architecture() != b.architecture() {
        return Err(Error::Architecture(
            "network distance needs identical architectures".into(),
        ));
    }
    a.layers
        .iter()
        .zip(&b.layers)
        .map(|(la, lb)| {
            let diff: Vec<f64> = la
                .weight
                .data()
                .iter()
                .zip(lb.weight.data())
                .map(|(x, y)| x - y)
                .collect();
            let diff = Tensor::new(la.weight.shape().to_vec(), diff)?;
            match &la.kind {
                LayerKind::Conv {
                    height,
                    width,
                    padding,
                    ..
                } => conv_operator_norm(&diff, *height, *width, *padding),
                LayerKind::Dense { .. } => spectral_norm(&diff),
            }
        })
        .collect()
}

/// Sum of the per-layer distances.
pub fn network_distance(a: &ParamSnapshot, b: &ParamSnapshot) -> Result<f64> {
    Ok(layer_distances(a, b)?.iter().sum())
}
