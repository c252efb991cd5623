//! Declarative layer graphs, shape inference and the forward pass.

use std::collections::HashMap;
use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::graph::{Graph, Var};
use super::params::ParamStore;
use super::scalar::Scalar;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Init {
    /// He-normal, for weights feeding a rectifier.
    He,
    /// Xavier-normal, for weights feeding tanh/sigmoid or a linear output.
    Xavier,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv2d {
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        init: Init,
    },
    TransposedConv2d {
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        init: Init,
    },
    Dense {
        in_units: usize,
        out_units: usize,
        init: Init,
    },
    BatchNorm {
        channels: usize,
    },
    Relu,
    LeakyRelu {
        slope: f64,
    },
    Tanh,
    Sigmoid,
    Dropout {
        rate: f64,
    },
    AvgPool {
        kernel: usize,
    },
    GlobalAvgPool,
    /// Reshape each sample to the given shape.
    Reshape {
        shape: Vec<usize>,
    },
}

impl LayerSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::TransposedConv2d { .. } => "transposed_conv2d",
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::BatchNorm { .. } => "batch_norm",
            LayerSpec::Relu => "relu",
            LayerSpec::LeakyRelu { .. } => "leaky_relu",
            LayerSpec::Tanh => "tanh",
            LayerSpec::Sigmoid => "sigmoid",
            LayerSpec::Dropout { .. } => "dropout",
            LayerSpec::AvgPool { .. } => "avg_pool",
            LayerSpec::GlobalAvgPool => "global_avg_pool",
            LayerSpec::Reshape { .. } => "reshape",
        }
    }

    /// Per-sample output shape for a per-sample input shape.
    pub fn output_shape(&self, name: &str, input: &[usize]) -> Result<Vec<usize>> {
        let mismatch = |expected: Vec<usize>| Error::Shape {
            layer: name.to_string(),
            expected,
            got: input.to_vec(),
        };
        match *self {
            LayerSpec::Conv2d {
                in_ch,
                out_ch,
                kernel,
                stride,
                pad,
                ..
            } => {
                if input.len() != 3 || input[0] != in_ch || input[1] + 2 * pad < kernel {
                    return Err(mismatch(vec![in_ch, kernel, kernel]));
                }
                let oh = (input[1] + 2 * pad - kernel) / stride + 1;
                let ow = (input[2] + 2 * pad - kernel) / stride + 1;
                Ok(vec![out_ch, oh, ow])
            }
            LayerSpec::TransposedConv2d {
                in_ch,
                out_ch,
                kernel,
                stride,
                pad,
                ..
            } => {
                if input.len() != 3 || input[0] != in_ch {
                    return Err(mismatch(vec![in_ch, 0, 0]));
                }
                let oh = (input[1] - 1) * stride + kernel - 2 * pad;
                let ow = (input[2] - 1) * stride + kernel - 2 * pad;
                Ok(vec![out_ch, oh, ow])
            }
            LayerSpec::Dense {
                in_units,
                out_units,
                ..
            } => {
                if input != [in_units] {
                    return Err(mismatch(vec![in_units]));
                }
                Ok(vec![out_units])
            }
            LayerSpec::BatchNorm { channels } => {
                if input.is_empty() || input[0] != channels {
                    return Err(mismatch(vec![channels]));
                }
                Ok(input.to_vec())
            }
            LayerSpec::Relu
            | LayerSpec::LeakyRelu { .. }
            | LayerSpec::Tanh
            | LayerSpec::Sigmoid
            | LayerSpec::Dropout { .. } => Ok(input.to_vec()),
            LayerSpec::AvgPool { kernel } => {
                if input.len() != 3 || input[1] < kernel || input[2] < kernel {
                    return Err(mismatch(vec![0, kernel, kernel]));
                }
                Ok(vec![input[0], input[1] / kernel, input[2] / kernel])
            }
            LayerSpec::GlobalAvgPool => {
                if input.len() != 3 {
                    return Err(mismatch(vec![0, 0, 0]));
                }
                Ok(vec![input[0]])
            }
            LayerSpec::Reshape { ref shape } => {
                if shape.iter().product::<usize>() != input.iter().product::<usize>() {
                    return Err(mismatch(shape.clone()));
                }
                Ok(shape.clone())
            }
        }
    }
}

/// One step of a network: a plain layer, or a densely connected block where
/// each composite layer's output is concatenated onto its input along the
/// channel axis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "stage", rename_all = "snake_case")]
pub enum Stage {
    Layer(LayerSpec),
    DenseBlock { layers: Vec<Vec<LayerSpec>> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub name: String,
    /// Per-sample input shape.
    pub input: Vec<usize>,
    pub stages: Vec<Stage>,
}

/// Everything a training-mode forward pass needs besides parameters.
pub struct ForwardCtx<'a, R: Rng> {
    pub training: bool,
    pub rng: &'a mut R,
    /// Batch-norm statistics observed during a training forward pass, keyed
    /// by parameter prefix.
    pub bn_updates: Vec<(String, Vec<f64>, Vec<f64>)>,
}

impl<'a, R: Rng> ForwardCtx<'a, R> {
    pub fn new(training: bool, rng: &'a mut R) -> Self {
        ForwardCtx {
            training,
            rng,
            bn_updates: Vec::new(),
        }
    }
}

/// Parameters bound as leaves of one graph.
pub struct Bound {
    vars: HashMap<String, Var>,
}

impl Bound {
    pub fn bind<T: Scalar>(graph: &Graph<T>, store: &ParamStore<T>) -> Self {
        let vars = store
            .params()
            .map(|(name, t)| (name.to_string(), graph.leaf(t.clone())))
            .collect();
        Bound { vars }
    }

    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, Var)>) -> Self {
        Bound {
            vars: pairs.into_iter().collect(),
        }
    }

    pub fn get(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} not bound"))
    }

    /// Vars in the store's parameter order.
    pub fn ordered<T: Scalar>(&self, store: &ParamStore<T>) -> Vec<Var> {
        store.params().map(|(n, _)| self.get(n)).collect()
    }
}

impl Network {
    /// Walk every layer with its parameter prefix and per-sample input shape.
    pub fn trace(&self) -> Result<Vec<(String, LayerSpec, Vec<usize>)>> {
        let mut out = Vec::new();
        let mut shape = self.input.clone();
        for (i, stage) in self.stages.iter().enumerate() {
            match stage {
                Stage::Layer(l) => {
                    let name = format!("s{i}");
                    let next = l.output_shape(&name, &shape)?;
                    out.push((name, l.clone(), shape));
                    shape = next;
                }
                Stage::DenseBlock { layers } => {
                    for (j, composite) in layers.iter().enumerate() {
                        let mut inner = shape.clone();
                        for (k, l) in composite.iter().enumerate() {
                            let name = format!("s{i}.l{j}.{k}");
                            let next = l.output_shape(&name, &inner)?;
                            out.push((name, l.clone(), inner));
                            inner = next;
                        }
                        if inner.len() != 3 || inner[1..] != shape[1..] {
                            return Err(Error::Shape {
                                layer: format!("s{i}.l{j}.concat"),
                                expected: shape.clone(),
                                got: inner,
                            });
                        }
                        shape[0] += inner[0];
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn output_shape(&self) -> Result<Vec<usize>> {
        Ok(self
            .stage_shapes()?
            .pop()
            .unwrap_or_else(|| self.input.clone()))
    }

    /// Per-sample shape after each stage.
    pub fn stage_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut shapes = Vec::with_capacity(self.stages.len());
        let mut shape = self.input.clone();
        for (i, stage) in self.stages.iter().enumerate() {
            match stage {
                Stage::Layer(l) => shape = l.output_shape(&format!("s{i}"), &shape)?,
                Stage::DenseBlock { layers } => {
                    for (j, composite) in layers.iter().enumerate() {
                        let mut inner = shape.clone();
                        for (k, l) in composite.iter().enumerate() {
                            inner = l.output_shape(&format!("s{i}.l{j}.{k}"), &inner)?;
                        }
                        shape[0] += inner[0];
                    }
                }
            }
            shapes.push(shape.clone());
        }
        Ok(shapes)
    }

    pub fn init_params<T: Scalar, R: Rng>(&self, rng: &mut R) -> Result<ParamStore<T>> {
        let mut store = ParamStore::new();
        for (name, layer, _) in self.trace()? {
            match layer {
                LayerSpec::Conv2d {
                    in_ch,
                    out_ch,
                    kernel,
                    bias,
                    init,
                    ..
                } => {
                    let fan_in = in_ch * kernel * kernel;
                    let fan_out = out_ch * kernel * kernel;
                    let std = init_std(init, fan_in, fan_out);
                    store.insert_param(
                        format!("{name}.w"),
                        Tensor::randn(&[out_ch, in_ch, kernel, kernel], std, rng),
                    );
                    if bias {
                        store.insert_param(format!("{name}.b"), Tensor::zeros(&[out_ch]));
                    }
                }
                LayerSpec::TransposedConv2d {
                    in_ch,
                    out_ch,
                    kernel,
                    bias,
                    init,
                    ..
                } => {
                    let fan_in = in_ch * kernel * kernel;
                    let fan_out = out_ch * kernel * kernel;
                    let std = init_std(init, fan_in, fan_out);
                    store.insert_param(
                        format!("{name}.w"),
                        Tensor::randn(&[in_ch, out_ch, kernel, kernel], std, rng),
                    );
                    if bias {
                        store.insert_param(format!("{name}.b"), Tensor::zeros(&[out_ch]));
                    }
                }
                LayerSpec::Dense {
                    in_units,
                    out_units,
                    init,
                } => {
                    let std = init_std(init, in_units, out_units);
                    store.insert_param(
                        format!("{name}.w"),
                        Tensor::randn(&[out_units, in_units], std, rng),
                    );
                    store.insert_param(format!("{name}.b"), Tensor::zeros(&[out_units]));
                }
                LayerSpec::BatchNorm { channels } => {
                    store.insert_param(format!("{name}.gamma"), Tensor::full(&[channels], T::one()));
                    store.insert_param(format!("{name}.beta"), Tensor::zeros(&[channels]));
                    store.insert_buffer(format!("{name}.running_mean"), Tensor::zeros(&[channels]));
                    store.insert_buffer(
                        format!("{name}.running_var"),
                        Tensor::full(&[channels], T::one()),
                    );
                }
                _ => {}
            }
        }
        Ok(store)
    }

    /// Forward a batch `[N, ...input]`.
    pub fn forward<T: Scalar, R: Rng>(
        &self,
        graph: &Graph<T>,
        store: &ParamStore<T>,
        params: &Bound,
        x: Var,
        ctx: &mut ForwardCtx<'_, R>,
    ) -> Result<Var> {
        let got = graph.shape(x);
        if got.len() != self.input.len() + 1 || got[1..] != self.input[..] {
            let mut expected = vec![got.first().copied().unwrap_or(0)];
            expected.extend(&self.input);
            return Err(Error::Shape {
                layer: format!("{}.input", self.name),
                expected,
                got,
            });
        }
        let mut h = x;
        for (i, stage) in self.stages.iter().enumerate() {
            match stage {
                Stage::Layer(l) => {
                    h = apply_layer(graph, store, params, &format!("s{i}"), l, h, ctx)?;
                }
                Stage::DenseBlock { layers } => {
                    for (j, composite) in layers.iter().enumerate() {
                        let mut inner = h;
                        for (k, l) in composite.iter().enumerate() {
                            inner = apply_layer(
                                graph,
                                store,
                                params,
                                &format!("s{i}.l{j}.{k}"),
                                l,
                                inner,
                                ctx,
                            )?;
                        }
                        h = graph.concat_channels(&[h, inner]);
                    }
                }
            }
        }
        Ok(h)
    }
}

fn init_std(init: Init, fan_in: usize, fan_out: usize) -> f64 {
    match init {
        Init::He => (2.0 / fan_in as f64).sqrt(),
        Init::Xavier => (2.0 / (fan_in + fan_out) as f64).sqrt(),
    }
}

fn apply_layer<T: Scalar, R: Rng>(
    graph: &Graph<T>,
    store: &ParamStore<T>,
    params: &Bound,
    name: &str,
    layer: &LayerSpec,
    x: Var,
    ctx: &mut ForwardCtx<'_, R>,
) -> Result<Var> {
    let in_shape = graph.shape(x);
    layer.output_shape(name, &in_shape[1..])?;
    Ok(match *layer {
        LayerSpec::Conv2d {
            stride, pad, bias, ..
        } => {
            let y = graph.conv2d(x, params.get(&format!("{name}.w")), stride, pad);
            if bias {
                graph.add_bias(y, params.get(&format!("{name}.b")))
            } else {
                y
            }
        }
        LayerSpec::TransposedConv2d {
            kernel,
            stride,
            pad,
            bias,
            ..
        } => {
            let oh = (in_shape[2] - 1) * stride + kernel - 2 * pad;
            let ow = (in_shape[3] - 1) * stride + kernel - 2 * pad;
            let y = graph.conv_transpose2d(
                x,
                params.get(&format!("{name}.w")),
                stride,
                pad,
                (oh, ow),
            );
            if bias {
                graph.add_bias(y, params.get(&format!("{name}.b")))
            } else {
                y
            }
        }
        LayerSpec::Dense { .. } => {
            let y = graph.matmul(x, params.get(&format!("{name}.w")), false, true);
            graph.add_bias(y, params.get(&format!("{name}.b")))
        }
        LayerSpec::BatchNorm { .. } => {
            let gamma = params.get(&format!("{name}.gamma"));
            let beta = params.get(&format!("{name}.beta"));
            if ctx.training {
                let (y, stats) = graph.batch_norm(x, gamma, beta, None, BN_EPS);
                if let Some(s) = stats {
                    ctx.bn_updates.push((
                        name.to_string(),
                        s.mean.iter().map(|v| v.as_f64()).collect(),
                        s.var.iter().map(|v| v.as_f64()).collect(),
                    ));
                }
                y
            } else {
                let rm = store.buffer(&format!("{name}.running_mean"));
                let rv = store.buffer(&format!("{name}.running_var"));
                graph
                    .batch_norm(x, gamma, beta, Some((rm.data(), rv.data())), BN_EPS)
                    .0
            }
        }
        LayerSpec::Relu => graph.relu(x),
        LayerSpec::LeakyRelu { slope } => graph.leaky_relu(x, T::from_f64(slope)),
        LayerSpec::Tanh => graph.tanh(x),
        LayerSpec::Sigmoid => graph.sigmoid(x),
        LayerSpec::Dropout { rate } => {
            if !ctx.training || rate <= 0.0 {
                x
            } else {
                let keep = 1.0 - rate;
                let scale = T::from_f64(1.0 / keep);
                let n: usize = in_shape.iter().product();
                let mask: Vec<T> = (0..n)
                    .map(|_| {
                        if ctx.rng.gen::<f64>() < keep {
                            scale
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                graph.mul_const(x, Rc::new(Tensor::from_vec(&in_shape, mask)))
            }
        }
        LayerSpec::AvgPool { kernel } => graph.avg_pool(x, kernel),
        LayerSpec::GlobalAvgPool => graph.global_avg_pool(x),
        LayerSpec::Reshape { ref shape } => {
            let mut full = vec![in_shape[0]];
            full.extend(shape);
            graph.reshape(x, &full)
        }
    })
}
