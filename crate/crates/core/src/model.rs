//! Sequential model assembly.
//!
//! Two architectures are supported. The convolutional one is
//! `Conv(ReLU) -> ... -> global average pool -> FC-2 -> softmax`, by default
//! Conv-768 then Conv-384 with stride 2. The dense one flattens the image and
//! runs `Dense(ReLU) -> ... -> FC-2 -> softmax`, by default one hidden layer of
//! 768 units.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::layers::{
    self, conv2d_backward_inner, dense_backward, dense_forward, global_avg_pool_backward,
    global_avg_pool_forward, relu_backward, relu_forward, softmax, ConvLayer, DenseLayer, KERNEL,
};
use crate::tensor::{Scalar, Tensor};

pub const NUM_CLASSES: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Conv,
    Dense,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Conv => "conv",
            Variant::Dense => "dense",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "conv" => Ok(Variant::Conv),
            "dense" => Ok(Variant::Dense),
            other => Err(Error::usage(format!(
                "unknown architecture {other:?} (expected conv or dense)"
            ))),
        }
    }
}

/// Height, width and channel count of one input image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct InputSize {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl InputSize {
    pub fn square_rgb(side: usize) -> Self {
        InputSize {
            height: side,
            width: side,
            channels: 3,
        }
    }

    pub fn numel(&self) -> usize {
        self.height * self.width * self.channels
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub variant: Variant,
    pub input_size: InputSize,
    pub conv_channels: Vec<usize>,
    pub conv_strides: Vec<usize>,
    pub dense_hidden: Vec<usize>,
    pub num_classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::conv(InputSize::square_rgb(128), &[768, 384])
    }
}

/// Stride 1 for the first convolution and 2 for every later one.
pub fn default_strides(layers: usize) -> Vec<usize> {
    (0..layers).map(|i| if i == 0 { 1 } else { 2 }).collect()
}

impl ModelConfig {
    pub fn conv(input_size: InputSize, channels: &[usize]) -> Self {
        ModelConfig {
            variant: Variant::Conv,
            input_size,
            conv_channels: channels.to_vec(),
            conv_strides: default_strides(channels.len()),
            dense_hidden: Vec::new(),
            num_classes: NUM_CLASSES,
        }
    }

    pub fn dense(input_size: InputSize, hidden: &[usize]) -> Self {
        ModelConfig {
            variant: Variant::Dense,
            input_size,
            conv_channels: Vec::new(),
            conv_strides: Vec::new(),
            dense_hidden: hidden.to_vec(),
            num_classes: NUM_CLASSES,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let InputSize {
            height,
            width,
            channels,
        } = self.input_size;
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::usage(format!(
                "input size {height}x{width}x{channels} has a zero extent"
            )));
        }
        if self.num_classes != NUM_CLASSES {
            return Err(Error::usage(format!(
                "exactly {NUM_CLASSES} classes are supported, got {}",
                self.num_classes
            )));
        }
        if self.conv_channels.len() != self.conv_strides.len() {
            return Err(Error::usage(format!(
                "{} conv channel widths but {} strides",
                self.conv_channels.len(),
                self.conv_strides.len()
            )));
        }
        if self.conv_channels.contains(&0) || self.conv_strides.contains(&0) {
            return Err(Error::usage("conv channel widths and strides must be positive"));
        }
        if self.dense_hidden.contains(&0) {
            return Err(Error::usage("hidden layer widths must be positive"));
        }
        match self.variant {
            Variant::Conv if !self.dense_hidden.is_empty() => Err(Error::usage(
                "the conv architecture takes no hidden dense layers",
            )),
            Variant::Dense if !self.conv_channels.is_empty() => {
                Err(Error::usage("the dense architecture takes no conv layers"))
            }
            _ => Ok(()),
        }
    }

    /// The layer sequence this configuration describes.
    pub fn layers(&self) -> Result<Vec<LayerSpec>> {
        self.validate()?;
        let mut specs = Vec::new();
        let mut features = self.input_size.channels;
        match self.variant {
            Variant::Conv => {
                for (&out, &stride) in self.conv_channels.iter().zip(&self.conv_strides) {
                    specs.push(LayerSpec::Conv {
                        in_channels: features,
                        out_channels: out,
                        stride,
                    });
                    specs.push(LayerSpec::Relu);
                    features = out;
                }
                specs.push(LayerSpec::GlobalAvgPool);
            }
            Variant::Dense => {
                features = self.input_size.numel();
                specs.push(LayerSpec::Flatten);
                for &out in &self.dense_hidden {
                    specs.push(LayerSpec::Dense {
                        inputs: features,
                        outputs: out,
                    });
                    specs.push(LayerSpec::Relu);
                    features = out;
                }
            }
        }
        specs.push(LayerSpec::Dense {
            inputs: features,
            outputs: self.num_classes,
        });
        Ok(specs)
    }

    /// Short human-readable form, e.g. `Conv-768, Conv-384/2, FC-2`.
    pub fn describe(&self) -> String {
        let mut parts = Vec::new();
        for (&c, &s) in self.conv_channels.iter().zip(&self.conv_strides) {
            parts.push(if s == 1 {
                format!("Conv-{c}")
            } else {
                format!("Conv-{c}/{s}")
            });
        }
        for &h in &self.dense_hidden {
            parts.push(format!("Dense-{h}"));
        }
        parts.push(format!("FC-{}", self.num_classes));
        parts.join(", ")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerSpec {
    Conv {
        in_channels: usize,
        out_channels: usize,
        stride: usize,
    },
    Dense {
        inputs: usize,
        outputs: usize,
    },
    Relu,
    GlobalAvgPool,
    Flatten,
}

impl LayerSpec {
    pub fn param_count(&self) -> usize {
        match *self {
            LayerSpec::Conv {
                in_channels,
                out_channels,
                ..
            } => KERNEL * KERNEL * in_channels * out_channels + out_channels,
            LayerSpec::Dense { inputs, outputs } => inputs * outputs + outputs,
            _ => 0,
        }
    }

    pub fn has_params(&self) -> bool {
        matches!(self, LayerSpec::Conv { .. } | LayerSpec::Dense { .. })
    }
}

/// Exact number of learnable scalars (weights plus biases).
pub fn param_count(config: &ModelConfig) -> Result<usize> {
    Ok(config.layers()?.iter().map(LayerSpec::param_count).sum())
}

#[derive(Clone, Debug, PartialEq)]
pub enum ParamLayer<T> {
    Conv(ConvLayer<T>),
    Dense(DenseLayer<T>),
}

impl<T: Scalar> ParamLayer<T> {
    pub fn weights(&self) -> &Tensor<T> {
        match self {
            ParamLayer::Conv(l) => &l.weights,
            ParamLayer::Dense(l) => &l.weights,
        }
    }

    pub fn bias(&self) -> &Tensor<T> {
        match self {
            ParamLayer::Conv(l) => &l.bias,
            ParamLayer::Dense(l) => &l.bias,
        }
    }

    pub(crate) fn tensors_mut(&mut self) -> [&mut Tensor<T>; 2] {
        match self {
            ParamLayer::Conv(l) => [&mut l.weights, &mut l.bias],
            ParamLayer::Dense(l) => [&mut l.weights, &mut l.bias],
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            ParamLayer::Conv(_) => "conv",
            ParamLayer::Dense(_) => "dense",
        }
    }
}

/// Learnable parameters of every conv and dense layer, in layer order.
/// Gradients use the same type.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub layers: Vec<ParamLayer<T>>,
}

impl<T: Scalar> ModelParams<T> {
    /// Parameters for `config` with every weight and bias set to zero.
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        Self::build(config, |_, dims| Tensor::zeros(dims))
    }

    fn build(
        config: &ModelConfig,
        mut weights: impl FnMut(&LayerSpec, &[usize]) -> Result<Tensor<T>>,
    ) -> Result<Self> {
        let mut layers = Vec::new();
        for spec in config.layers()? {
            match spec {
                LayerSpec::Conv {
                    in_channels,
                    out_channels,
                    stride,
                } => {
                    let w = weights(&spec, &[KERNEL, KERNEL, in_channels, out_channels])?;
                    layers.push(ParamLayer::Conv(ConvLayer::new(
                        w,
                        Tensor::zeros(&[out_channels])?,
                        stride,
                    )?));
                }
                LayerSpec::Dense { inputs, outputs } => {
                    let w = weights(&spec, &[inputs, outputs])?;
                    layers.push(ParamLayer::Dense(DenseLayer::new(
                        w,
                        Tensor::zeros(&[outputs])?,
                    )?));
                }
                _ => {}
            }
        }
        Ok(ModelParams { layers })
    }

    pub fn num_scalars(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights().len() + l.bias().len())
            .sum()
    }

    /// All scalars in layer order, weights before bias within each layer.
    pub fn flatten(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.num_scalars());
        for l in &self.layers {
            out.extend_from_slice(l.weights().data());
            out.extend_from_slice(l.bias().data());
        }
        out
    }

    /// Inverse of [`flatten`](Self::flatten) for a given configuration.
    pub fn from_flat(config: &ModelConfig, values: &[T]) -> Result<Self> {
        let mut params = Self::zeros(config)?;
        if values.len() != params.num_scalars() {
            return Err(Error::shape(format!(
                "configuration needs {} parameters, got {}",
                params.num_scalars(),
                values.len()
            )));
        }
        let mut rest = values;
        for layer in &mut params.layers {
            for t in layer.tensors_mut() {
                let (head, tail) = rest.split_at(t.len());
                t.data_mut().copy_from_slice(head);
                rest = tail;
            }
        }
        Ok(params)
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        let layers = self
            .layers
            .iter()
            .map(|l| match l {
                ParamLayer::Conv(c) => ParamLayer::Conv(ConvLayer {
                    weights: c.weights.cast(),
                    bias: c.bias.cast(),
                    stride: c.stride,
                }),
                ParamLayer::Dense(d) => ParamLayer::Dense(DenseLayer {
                    weights: d.weights.cast(),
                    bias: d.bias.cast(),
                }),
            })
            .collect();
        ModelParams { layers }
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights().is_finite() && l.bias().is_finite())
    }

    /// Checks that every layer has the kind and shape `config` calls for.
    pub fn check_matches(&self, config: &ModelConfig) -> Result<()> {
        let expected = Self::zeros(config)?;
        let ok = expected.layers.len() == self.layers.len()
            && expected.layers.iter().zip(&self.layers).all(|(e, p)| {
                e.weights().shape() == p.weights().shape()
                    && e.bias().shape() == p.bias().shape()
                    && match (e, p) {
                        (ParamLayer::Conv(a), ParamLayer::Conv(b)) => a.stride == b.stride,
                        (ParamLayer::Dense(_), ParamLayer::Dense(_)) => true,
                        _ => false,
                    }
            });
        if ok {
            Ok(())
        } else {
            Err(Error::usage(format!(
                "parameters do not match the {} configuration",
                config.describe()
            )))
        }
    }

    pub(crate) fn pairs_mut<'a>(
        &'a mut self,
        other: &'a ModelParams<T>,
    ) -> Result<impl Iterator<Item = (&'a mut [T], &'a [T])> + 'a> {
        let same = self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| {
                a.weights().shape() == b.weights().shape() && a.bias().shape() == b.bias().shape()
            });
        if !same {
            return Err(Error::usage("gradient set is not shaped like the parameters"));
        }
        Ok(self
            .layers
            .iter_mut()
            .zip(&other.layers)
            .flat_map(|(a, b)| {
                let [aw, ab] = a.tensors_mut();
                [
                    (aw.data_mut(), b.weights().data()),
                    (ab.data_mut(), b.bias().data()),
                ]
            }))
    }
}

/// He-normal weights (std `sqrt(2 / fan_in)`) and zero biases. Draws are made
/// in `f64` so both precisions start from the same values up to rounding.
pub fn init_params<T: Scalar>(config: &ModelConfig, seed: u64) -> Result<ModelParams<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ModelParams::build(config, |spec, dims| {
        let fan_in = match *spec {
            LayerSpec::Conv { in_channels, .. } => KERNEL * KERNEL * in_channels,
            LayerSpec::Dense { inputs, .. } => inputs,
            _ => unreachable!("only parametric layers get weights"),
        };
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt())
            .map_err(|e| Error::Numeric(e.to_string()))?;
        Tensor::from_fn(dims, |_| T::of(normal.sample(&mut rng)))
    })
}

/// Intermediate values kept by [`model_forward`] for the backward pass.
pub struct ForwardCache<T> {
    specs: Vec<LayerSpec>,
    inputs: Vec<Tensor<T>>,
    pub logits: Tensor<T>,
}

pub fn model_forward<T: Scalar>(
    config: &ModelConfig,
    params: &ModelParams<T>,
    batch: &Tensor<T>,
) -> Result<(Tensor<T>, ForwardCache<T>)> {
    let specs = config.layers()?;
    params.check_matches(config)?;
    let InputSize {
        height,
        width,
        channels,
    } = config.input_size;
    match *batch.dims() {
        [_, h, w, c] if (h, w, c) == (height, width, channels) => {}
        _ => {
            return Err(Error::shape(format!(
                "batch must be (n,{height},{width},{channels}), got {}",
                batch.shape()
            )))
        }
    }

    let mut inputs = Vec::with_capacity(specs.len());
    let mut current = batch.clone();
    let mut param_layers = params.layers.iter();
    for spec in &specs {
        let next = match spec {
            LayerSpec::Conv { .. } => match param_layers.next() {
                Some(ParamLayer::Conv(layer)) => layers::conv2d_forward(&current, layer)?,
                _ => unreachable!("checked by check_matches"),
            },
            LayerSpec::Dense { .. } => match param_layers.next() {
                Some(ParamLayer::Dense(layer)) => dense_forward(&current, layer)?,
                _ => unreachable!("checked by check_matches"),
            },
            LayerSpec::Relu => relu_forward(&current),
            LayerSpec::GlobalAvgPool => global_avg_pool_forward(&current)?,
            LayerSpec::Flatten => {
                let n = current.dims()[0];
                current.reshape(&[n, current.len() / n])?
            }
        };
        inputs.push(std::mem::replace(&mut current, next));
    }
    let probs = softmax(&current)?;
    Ok((
        probs,
        ForwardCache {
            specs,
            inputs,
            logits: current,
        },
    ))
}

/// Gradient of the loss with respect to every parameter, given the gradient
/// of that loss with respect to the logits.
pub fn model_backward<T: Scalar>(
    config: &ModelConfig,
    params: &ModelParams<T>,
    cache: &ForwardCache<T>,
    grad_logits: &Tensor<T>,
) -> Result<ModelParams<T>> {
    if cache.specs != config.layers()? || cache.inputs.len() != cache.specs.len() {
        return Err(Error::usage(
            "forward cache was produced by a different model configuration",
        ));
    }
    params.check_matches(config)?;
    if grad_logits.shape() != cache.logits.shape() {
        return Err(Error::usage(format!(
            "logit gradient {} does not match cached logits {}",
            grad_logits.shape(),
            cache.logits.shape()
        )));
    }

    let mut grads = Vec::with_capacity(params.layers.len());
    let mut param_layers = params.layers.iter().rev();
    let mut g = grad_logits.clone();
    for (i, (spec, input)) in cache.specs.iter().zip(&cache.inputs).enumerate().rev() {
        // the image itself needs no gradient
        let need_input = i > 0;
        g = match spec {
            LayerSpec::Conv { .. } => {
                let Some(ParamLayer::Conv(layer)) = param_layers.next() else {
                    unreachable!("checked by check_matches")
                };
                let cg = conv2d_backward_inner(input, layer, &g, need_input)?;
                grads.push(ParamLayer::Conv(ConvLayer {
                    weights: cg.weights,
                    bias: cg.bias,
                    stride: layer.stride,
                }));
                cg.input
            }
            LayerSpec::Dense { .. } => {
                let Some(ParamLayer::Dense(layer)) = param_layers.next() else {
                    unreachable!("checked by check_matches")
                };
                let dg = dense_backward(input, layer, &g)?;
                grads.push(ParamLayer::Dense(DenseLayer {
                    weights: dg.weights,
                    bias: dg.bias,
                }));
                dg.input
            }
            LayerSpec::Relu => relu_backward(input, &g)?,
            LayerSpec::GlobalAvgPool => global_avg_pool_backward(input, &g)?,
            LayerSpec::Flatten => g.reshape(input.dims())?,
        };
    }
    grads.reverse();

    #[cfg(feature = "perturb-backward")]
    if let Some(first) = grads.first_mut() {
        for v in first.tensors_mut()[0].data_mut() {
            *v = *v * T::of(1.01);
        }
    }

    Ok(ModelParams { layers: grads })
}
