use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use super::tape::ConvGeometry;
use super::{init, Real, Tape, Tensor, Var};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
    Sigmoid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    MaxPool2d {
        kernel: usize,
        stride: usize,
    },
    FullyConnected {
        in_features: usize,
        out_features: usize,
    },
    Activation(Activation),
}

impl LayerKind {
    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Conv2d { .. } => "conv2d",
            LayerKind::MaxPool2d { .. } => "maxpool2d",
            LayerKind::FullyConnected { .. } => "fully_connected",
            LayerKind::Activation(Activation::Relu) => "relu",
            LayerKind::Activation(Activation::Tanh) => "tanh",
            LayerKind::Activation(Activation::Sigmoid) => "sigmoid",
        }
    }

    /// Output shape for an input shape, without running the layer.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let bad = |expected: &str| Err(Error::dimension(self.name(), expected, format!("{input:?}")));
        match *self {
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                if input.len() != 4 || input[1] != in_channels {
                    return bad("4-D N×C×H×W input with matching channels");
                }
                let ext = |n: usize| (n + 2 * padding).checked_sub(kernel).map(|d| d / stride + 1);
                match (ext(input[2]), ext(input[3])) {
                    (Some(h), Some(w)) => Ok(alloc::vec![input[0], out_channels, h, w]),
                    _ => bad("spatial extent ≥ kernel"),
                }
            }
            LayerKind::MaxPool2d { kernel, stride } => {
                if input.len() != 4 {
                    return bad("4-D N×C×H×W input");
                }
                let ext = |n: usize| n.checked_sub(kernel).map(|d| d / stride + 1);
                match (ext(input[2]), ext(input[3])) {
                    (Some(h), Some(w)) => Ok(alloc::vec![input[0], input[1], h, w]),
                    _ => bad("spatial extent ≥ kernel"),
                }
            }
            LayerKind::FullyConnected {
                in_features,
                out_features,
            } => {
                if input.len() != 2 || input[1] != in_features {
                    return bad("2-D N×in input");
                }
                Ok(alloc::vec![input[0], out_features])
            }
            LayerKind::Activation(_) => Ok(input.to_vec()),
        }
    }
}

/// One layer with its (possibly absent) weight and bias tensors.
///
/// Conv weights are `out × in × k × k`; fully connected weights are
/// `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    pub kind: LayerKind,
    pub weight: Option<Tensor<T>>,
    pub bias: Option<Tensor<T>>,
}

/// Tape handles for one layer's parameters.
#[derive(Debug, Clone, Copy)]
pub struct BoundLayer {
    pub kind: LayerKind,
    pub weight: Option<Var>,
    pub bias: Option<Var>,
}

impl<T: Real> LayerParams<T> {
    /// Glorot-uniform weights, zero biases.
    pub fn init<R: Rng + ?Sized>(kind: LayerKind, rng: &mut R) -> Self {
        match kind {
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => {
                let shape = [out_channels, in_channels, kernel, kernel];
                let area = kernel * kernel;
                Self {
                    kind,
                    weight: Some(init::glorot_uniform(
                        &shape,
                        in_channels * area,
                        out_channels * area,
                        rng,
                    )),
                    bias: Some(Tensor::zeros(&[out_channels]).with_grad()),
                }
            }
            LayerKind::FullyConnected {
                in_features,
                out_features,
            } => Self {
                kind,
                weight: Some(init::glorot_uniform(
                    &[out_features, in_features],
                    in_features,
                    out_features,
                    rng,
                )),
                bias: Some(Tensor::zeros(&[out_features]).with_grad()),
            },
            LayerKind::MaxPool2d { .. } | LayerKind::Activation(_) => Self {
                kind,
                weight: None,
                bias: None,
            },
        }
    }

    pub fn activation(act: Activation) -> Self {
        Self {
            kind: LayerKind::Activation(act),
            weight: None,
            bias: None,
        }
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> BoundLayer {
        BoundLayer {
            kind: self.kind,
            weight: self.weight.as_ref().map(|w| tape.param(w)),
            bias: self.bias.as_ref().map(|b| tape.param(b)),
        }
    }

    /// Adds the tape gradients of a bound copy into this layer's accumulators.
    pub fn absorb_grads(&mut self, tape: &Tape<T>, bound: &BoundLayer) {
        for (tensor, var) in [(&mut self.weight, bound.weight), (&mut self.bias, bound.bias)] {
            if let (Some(t), Some(v)) = (tensor.as_mut(), var) {
                if let Some(g) = tape.grad(v) {
                    t.accumulate_grad(g);
                }
            }
        }
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.weight.iter_mut().chain(self.bias.iter_mut())
    }

    pub fn params(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.weight.iter().chain(self.bias.iter())
    }
}

/// Applies one layer on the tape.
pub fn forward_layer<T: Real>(tape: &mut Tape<T>, input: Var, layer: &BoundLayer) -> Result<Var> {
    let expected = layer.kind.output_shape(tape.shape(input))?;
    let missing = || Error::contract(format!("{} layer has no weight", layer.kind.name()));
    let out = match layer.kind {
        LayerKind::Conv2d { stride, padding, .. } => {
            let weight = layer.weight.ok_or_else(missing)?;
            tape.conv2d(input, weight, layer.bias, ConvGeometry { stride, padding })?
        }
        LayerKind::MaxPool2d { kernel, stride } => tape.max_pool2d(input, kernel, stride)?,
        LayerKind::FullyConnected { .. } => {
            let weight = layer.weight.ok_or_else(missing)?;
            tape.linear(input, weight, layer.bias)?
        }
        LayerKind::Activation(Activation::Relu) => tape.relu(input),
        LayerKind::Activation(Activation::Tanh) => tape.tanh(input),
        LayerKind::Activation(Activation::Sigmoid) => tape.sigmoid(input),
    };
    debug_assert_eq!(tape.shape(out), expected.as_slice());
    Ok(out)
}

/// Runs a single layer outside of any training graph.
pub fn forward_layer_eager<T: Real>(input: &Tensor<T>, layer: &LayerParams<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let x = tape.constant(input.clone());
    let bound = layer.bind(&mut tape);
    let y = forward_layer(&mut tape, x, &bound)?;
    Ok(tape.value(y).clone())
}
