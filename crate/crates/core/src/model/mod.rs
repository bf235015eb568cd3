//! Classifier architectures and parameter-space metrics.
//!
//! A network is an ordered list of convolutional and fully-connected layers
//! with ReLU between them and raw class scores at the output. Biases are
//! trainable but do not enter the network distance, which only looks at the
//! convolution operators and weight matrices.

mod operator;
mod snapshot;

pub use operator::{
    conv_operator_matrix, conv_operator_norm, spectral_norm, POWER_MAX_ITERS, POWER_TOLERANCE,
};
pub use snapshot::{layer_distances, network_distance, Layer, LayerKind, ParamSnapshot};

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::kernels::{self, ConvGeometry};
use crate::autodiff::{Tape, Tensor, Var};
use crate::rng::rng_from;
use crate::{Error, Result};

/// Layer layout without parameter values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct Architecture {
    pub layers: Vec<LayerKind>,
}

impl Architecture {
    /// Fully-connected network `input → hidden… → classes`.
    pub fn mlp(input: usize, hidden: &[usize], classes: usize) -> Self {
        let mut dims = vec![input];
        dims.extend_from_slice(hidden);
        dims.push(classes);
        let layers = dims
            .windows(2)
            .map(|w| LayerKind::Dense {
                inputs: w[0],
                outputs: w[1],
            })
            .collect();
        Self { layers }
    }

    /// One same-padded convolution followed by fully-connected layers.
    pub fn conv_net(
        (channels, height, width): (usize, usize, usize),
        filters: usize,
        kernel: usize,
        hidden: &[usize],
        classes: usize,
    ) -> Self {
        let conv = LayerKind::Conv {
            in_channels: channels,
            out_channels: filters,
            kernel,
            height,
            width,
            padding: kernel / 2,
        };
        let flat = conv.output_len();
        let mut layers = vec![conv];
        layers.extend(Self::mlp(flat, hidden, classes).layers);
        Self { layers }
    }

    /// The default desk-scale architecture for a sample shape.
    pub fn default_for(sample_shape: &[usize], classes: usize) -> Self {
        match sample_shape {
            [c, h, w] => Self::conv_net((*c, *h, *w), 8, 3, &[64], classes),
            shape => Self::mlp(shape.iter().product(), &[64, 64], classes),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::config("network needs at least one layer"));
        }
        for (i, pair) in self.layers.windows(2).enumerate() {
            if pair[0].output_len() != pair[1].input_len() {
                return Err(Error::Architecture(format!(
                    "layer {i} produces {} values but layer {} expects {}",
                    pair[0].output_len(),
                    i + 1,
                    pair[1].input_len()
                )));
            }
        }
        for layer in &self.layers {
            if let LayerKind::Conv { .. } = layer {
                if layer.output_len() == 0 {
                    return Err(Error::config("convolution kernel larger than padded input"));
                }
            }
        }
        Ok(())
    }

    pub fn input_len(&self) -> usize {
        self.layers.first().map_or(0, LayerKind::input_len)
    }

    pub fn classes(&self) -> usize {
        self.layers.last().map_or(0, LayerKind::output_len)
    }
}

/// A classifier `f: R^d → R^{n_c}` producing raw scores (logits).
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    layers: Vec<Layer>,
}

impl Network {
    /// He-normal weights from a seed, zero biases.
    pub fn init(arch: &Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = rng_from(seed);
        let layers = arch
            .layers
            .iter()
            .map(|kind| {
                let std = (2.0 / kind.fan_in() as f64).sqrt();
                let normal = Normal::new(0.0, std).expect("positive std");
                let mut weight = Tensor::zeros(&kind.weight_shape());
                for v in weight.data_mut() {
                    *v = normal.sample(&mut rng);
                }
                Layer {
                    kind: kind.clone(),
                    weight,
                    bias: Tensor::zeros(&kind.bias_shape()),
                }
            })
            .collect();
        Ok(Self { layers })
    }

    /// All parameters set to zero.
    pub fn zeros(arch: &Architecture) -> Result<Self> {
        arch.validate()?;
        let layers = arch
            .layers
            .iter()
            .map(|kind| Layer {
                kind: kind.clone(),
                weight: Tensor::zeros(&kind.weight_shape()),
                bias: Tensor::zeros(&kind.bias_shape()),
            })
            .collect();
        Ok(Self { layers })
    }

    pub fn from_snapshot(snapshot: ParamSnapshot) -> Result<Self> {
        snapshot.validate()?;
        snapshot.architecture().validate()?;
        Ok(Self {
            layers: snapshot.layers,
        })
    }

    pub fn snapshot(&self) -> ParamSnapshot {
        ParamSnapshot {
            layers: self.layers.clone(),
        }
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            layers: self.layers.iter().map(|l| l.kind.clone()).collect(),
        }
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn input_len(&self) -> usize {
        self.layers[0].kind.input_len()
    }

    pub fn classes(&self) -> usize {
        self.layers.last().expect("nonempty").kind.output_len()
    }

    /// Total parameter count `W`.
    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    /// Parameter count `W_g` of the same network with a single output unit.
    pub fn single_output_param_count(&self) -> usize {
        let last = self.layers.last().expect("nonempty");
        let fan_in = last.kind.input_len();
        self.param_count() - last.weight.len() - last.bias.len() + fan_in + 1
    }

    /// Parameters in a fixed order: weight then bias for each layer.
    pub fn params(&self) -> impl Iterator<Item = &Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias])
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
    }

    fn check_input(&self, x: &Tensor) -> Result<usize> {
        let d = self.input_len();
        if x.shape().len() < 2 || x.row_len() != d {
            return Err(Error::shape("network input", x.shape(), &[x.rows(), d]));
        }
        Ok(x.rows())
    }

    /// Scores for a batch `(n, d)` without recording gradients.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let n = self.check_input(x)?;
        let mut h = x.data().to_vec();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = match &layer.kind {
                LayerKind::Dense { inputs, outputs } => {
                    let mut z = kernels::matmul(&h, layer.weight.data(), n, *inputs, *outputs);
                    kernels::add_row_bias(&mut z, layer.bias.data());
                    z
                }
                kind @ LayerKind::Conv { .. } => {
                    let geom = kind.geometry().expect("conv layer");
                    let (oh, ow) = geom.output_hw().expect("validated");
                    let mut z = kernels::conv2d(&h, layer.weight.data(), &geom);
                    kernels::add_channel_bias(&mut z, layer.bias.data(), oh * ow);
                    z
                }
            };
            if i != last {
                kernels::relu(&mut h);
            }
        }
        Tensor::new(vec![n, self.classes()], h)
    }

    /// Class probabilities for a batch without recording gradients.
    pub fn predict_proba(&self, x: &Tensor) -> Result<Tensor> {
        let z = self.forward(x)?;
        Tensor::new(
            z.shape().to_vec(),
            kernels::softmax_rows(z.data(), self.classes()),
        )
    }

    /// Registers every parameter on the tape in [`Network::params`] order.
    pub fn register(&self, tape: &mut Tape) -> Vec<Var> {
        self.params().map(|p| tape.param(p.clone())).collect()
    }

    /// Registers every parameter as a constant (frozen copy).
    pub fn register_frozen(&self, tape: &mut Tape) -> Vec<Var> {
        self.params().map(|p| tape.constant(p.clone())).collect()
    }

    /// Records a forward pass over `x: (n, d)` using previously registered
    /// parameters.
    pub fn forward_on_tape(&self, tape: &mut Tape, params: &[Var], x: Var) -> Result<Var> {
        let n = self.check_input(tape.value(x))?;
        let last = self.layers.len() - 1;
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            let (w, b) = (params[2 * i], params[2 * i + 1]);
            h = match &layer.kind {
                LayerKind::Dense { inputs, .. } => {
                    let h2 = tape.reshape(h, vec![n, *inputs])?;
                    let z = tape.matmul(h2, w)?;
                    tape.add_bias(z, b)?
                }
                LayerKind::Conv {
                    in_channels,
                    height,
                    width,
                    padding,
                    ..
                } => {
                    let h4 = tape.reshape(h, vec![n, *in_channels, *height, *width])?;
                    let z = tape.conv2d(h4, w, *padding)?;
                    let z = tape.add_channel_bias(z, b)?;
                    tape.flatten(z)?
                }
            };
            if i != last {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }

    /// Fraction of rows whose argmax score differs from the label.
    pub fn error_rate(&self, x: &Tensor, labels: &[usize]) -> Result<f64> {
        if labels.is_empty() {
            return Ok(0.0);
        }
        let preds = self.forward(x)?.argmax_rows();
        let wrong = preds.iter().zip(labels).filter(|(p, y)| p != y).count();
        Ok(wrong as f64 / labels.len() as f64)
    }
}

impl LayerKind {
    pub fn input_len(&self) -> usize {
        match self {
            LayerKind::Dense { inputs, .. } => *inputs,
            LayerKind::Conv {
                in_channels,
                height,
                width,
                ..
            } => in_channels * height * width,
        }
    }

    pub fn output_len(&self) -> usize {
        match self {
            LayerKind::Dense { outputs, .. } => *outputs,
            LayerKind::Conv { .. } => self.geometry().map_or(0, |g| g.output_len()),
        }
    }

    pub fn fan_in(&self) -> usize {
        match self {
            LayerKind::Dense { inputs, .. } => *inputs,
            LayerKind::Conv {
                in_channels,
                kernel,
                ..
            } => in_channels * kernel * kernel,
        }
    }

    pub fn weight_shape(&self) -> Vec<usize> {
        match self {
            LayerKind::Dense { inputs, outputs } => vec![*inputs, *outputs],
            LayerKind::Conv {
                in_channels,
                out_channels,
                kernel,
                ..
            } => vec![*out_channels, *in_channels, *kernel, *kernel],
        }
    }

    pub fn bias_shape(&self) -> Vec<usize> {
        match self {
            LayerKind::Dense { outputs, .. } => vec![*outputs],
            LayerKind::Conv { out_channels, .. } => vec![*out_channels],
        }
    }

    pub(crate) fn geometry(&self) -> Option<ConvGeometry> {
        match self {
            LayerKind::Conv {
                in_channels,
                out_channels,
                kernel,
                height,
                width,
                padding,
            } => Some(ConvGeometry {
                in_channels: *in_channels,
                out_channels: *out_channels,
                height: *height,
                width: *width,
                kernel: *kernel,
                padding: *padding,
            }),
            LayerKind::Dense { .. } => None,
        }
    }
}
