use rand::Rng;
use serde::{Deserialize, Serialize};

use super::graph::{Graph, Var};
use super::params::{ParamId, ParameterSet};
use super::tensor::Tensor;
use crate::error::{invalid, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    LeakyRelu(f64),
    Tanh,
    Sigmoid,
}

impl Activation {
    pub fn apply(self, g: &mut Graph, x: Var) -> Var {
        match self {
            Activation::Identity => x,
            Activation::LeakyRelu(s) => g.leaky_relu(x, s),
            Activation::Tanh => g.tanh(x),
            Activation::Sigmoid => g.sigmoid(x),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Dense {
        units: usize,
        activation: Activation,
    },
    Conv {
        channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        activation: Activation,
    },
    /// Collapses a `[C, H, W]` volume into a single `[1, C*H*W]` row.
    Flatten,
}

/// Layer list plus the input shape it expects: `[features]` for dense
/// stacks, `[channels, height, width]` for convolutional ones.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input: Vec<usize>,
    pub layers: Vec<LayerSpec>,
}

impl NetworkSpec {
    /// Dense stack `input -> hidden... -> output`.
    pub fn mlp(input: usize, hidden: &[usize], output: usize, hidden_act: Activation, out_act: Activation) -> Self {
        let mut layers: Vec<LayerSpec> = hidden
            .iter()
            .map(|&units| LayerSpec::Dense {
                units,
                activation: hidden_act,
            })
            .collect();
        layers.push(LayerSpec::Dense {
            units: output,
            activation: out_act,
        });
        Self {
            input: vec![input],
            layers,
        }
    }

    /// Output shape after every layer, or an error naming the first
    /// incompatible layer.
    pub fn shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut cur = self.input.clone();
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            cur = match layer {
                LayerSpec::Dense { units, .. } => {
                    if cur.len() != 1 {
                        return invalid(format!("layer {i}: dense layer needs a flat input, got {cur:?}"));
                    }
                    vec![*units]
                }
                LayerSpec::Conv {
                    channels,
                    kernel,
                    stride,
                    padding,
                    ..
                } => {
                    if cur.len() != 3 || *stride == 0 || *kernel == 0 {
                        return invalid(format!("layer {i}: conv layer needs [C,H,W], got {cur:?}"));
                    }
                    if cur[1] + 2 * padding < *kernel || cur[2] + 2 * padding < *kernel {
                        return invalid(format!("layer {i}: kernel larger than input"));
                    }
                    vec![
                        *channels,
                        (cur[1] + 2 * padding - kernel) / stride + 1,
                        (cur[2] + 2 * padding - kernel) / stride + 1,
                    ]
                }
                LayerSpec::Flatten => {
                    if cur.len() != 3 {
                        return invalid(format!("layer {i}: flatten needs [C,H,W], got {cur:?}"));
                    }
                    vec![cur.iter().product()]
                }
            };
            out.push(cur.clone());
        }
        Ok(out)
    }

    pub fn output_width(&self) -> Result<usize> {
        Ok(self.shapes()?.last().map_or(self.input.iter().product(), |s| s.iter().product()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
enum Layer {
    Dense {
        w: ParamId,
        b: ParamId,
        act: Activation,
    },
    Conv {
        w: ParamId,
        b: ParamId,
        stride: usize,
        padding: usize,
        act: Activation,
    },
    Flatten,
}

/// A network whose parameters live in a shared [`ParameterSet`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub name: String,
    pub spec: NetworkSpec,
    layers: Vec<Layer>,
}

impl Network {
    pub fn build<R: Rng>(
        params: &mut ParameterSet,
        name: &str,
        group: &str,
        spec: &NetworkSpec,
        rng: &mut R,
    ) -> Result<Self> {
        let shapes = spec.shapes()?;
        let mut prev = spec.input.clone();
        let mut layers = Vec::with_capacity(spec.layers.len());
        for (i, (layer, shape)) in spec.layers.iter().zip(&shapes).enumerate() {
            layers.push(match layer {
                LayerSpec::Dense { units, activation } => {
                    let fan_in = prev[0];
                    let w = params.add_glorot(format!("{name}.{i}.w"), group, vec![fan_in, *units], fan_in, *units, rng);
                    let b = params.add(format!("{name}.{i}.b"), group, Tensor::zeros(vec![*units]));
                    Layer::Dense { w, b, act: *activation }
                }
                LayerSpec::Conv {
                    channels,
                    kernel,
                    stride,
                    padding,
                    activation,
                } => {
                    let c = prev[0];
                    let fan_in = c * kernel * kernel;
                    let fan_out = channels * kernel * kernel;
                    let w = params.add_glorot(
                        format!("{name}.{i}.w"),
                        group,
                        vec![*channels, c, *kernel, *kernel],
                        fan_in,
                        fan_out,
                        rng,
                    );
                    let b = params.add(format!("{name}.{i}.b"), group, Tensor::zeros(vec![*channels]));
                    Layer::Conv {
                        w,
                        b,
                        stride: *stride,
                        padding: *padding,
                        act: *activation,
                    }
                }
                LayerSpec::Flatten => Layer::Flatten,
            });
            prev = shape.clone();
        }
        Ok(Self {
            name: name.to_string(),
            spec: spec.clone(),
            layers,
        })
    }

    /// Records the network on `g`. Dense stacks take `[batch, features]`;
    /// convolutional stacks take one `[C, H, W]` sample.
    pub fn apply(&self, g: &mut Graph, params: &ParameterSet, x: Var) -> Result<Var> {
        let in_shape = g.shape(x).to_vec();
        let expected = &self.spec.input;
        let ok = if expected.len() == 1 {
            in_shape.len() == 2 && in_shape[1] == expected[0]
        } else {
            in_shape == *expected
        };
        if !ok {
            return invalid(format!(
                "{}: input shape {in_shape:?} does not match {expected:?}",
                self.name
            ));
        }
        let mut h = x;
        for layer in &self.layers {
            h = match *layer {
                Layer::Dense { w, b, act } => {
                    let wv = g.param(params, w)?;
                    let bv = g.param(params, b)?;
                    let z = g.matmul(h, wv)?;
                    let z = g.add_bias(z, bv)?;
                    act.apply(g, z)
                }
                Layer::Conv {
                    w,
                    b,
                    stride,
                    padding,
                    act,
                } => {
                    let wv = g.param(params, w)?;
                    let bv = g.param(params, b)?;
                    let z = g.conv2d(h, wv, bv, stride, padding)?;
                    act.apply(g, z)
                }
                Layer::Flatten => {
                    let n = g.value(h).numel();
                    g.reshape(h, vec![1, n])?
                }
            };
        }
        Ok(h)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.layers
            .iter()
            .flat_map(|l| match *l {
                Layer::Dense { w, b, .. } | Layer::Conv { w, b, .. } => vec![w, b],
                Layer::Flatten => vec![],
            })
            .collect()
    }
}

/// Runs `net` on a fresh tape.
pub fn forward(net: &Network, params: &ParameterSet, input: &Tensor) -> Result<(Var, Graph)> {
    let mut g = Graph::new();
    let x = g.input(input.clone());
    let y = net.apply(&mut g, params, x)?;
    Ok((y, g))
}
