use rand::Rng;

use super::layer::{Cache, Conv2d, Dense, Layer, LayerSpec};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Anything that owns trainable parameters with matching gradient buffers.
pub trait Parameterized {
    /// Visits every `(parameter, gradient)` pair in a stable order.
    fn for_each_param(&mut self, f: &mut dyn FnMut(&mut [f32], &[f32]));

    fn zero_grad(&mut self);
}

/// Sequential stack of layers operating on batched tensors `[batch, ..]`.
///
/// `forward` caches whatever `backward` needs; `infer` does not touch the
/// cache and can be shared across threads.
#[derive(Debug, Clone)]
pub struct Network {
    input_shape: Vec<usize>,
    layers: Vec<Layer>,
    caches: Vec<Option<Cache>>,
    cached_batch: Option<usize>,
}

impl PartialEq for Network {
    fn eq(&self, other: &Self) -> bool {
        self.input_shape == other.input_shape && self.layers == other.layers
    }
}

impl Network {
    pub fn new<R: Rng + ?Sized>(
        input_shape: &[usize],
        specs: &[LayerSpec],
        rng: &mut R,
    ) -> Result<Self> {
        if input_shape.is_empty() || input_shape.contains(&0) {
            return Err(Error::InvalidConfig(format!(
                "network input shape {input_shape:?} must be non-empty and positive"
            )));
        }
        let mut shape = input_shape.to_vec();
        let mut layers = Vec::with_capacity(specs.len());
        for (i, spec) in specs.iter().enumerate() {
            let layer = match *spec {
                LayerSpec::Conv2d {
                    out_channels,
                    kernel,
                    stride,
                    padding,
                } => Layer::Conv2d(
                    Conv2d::new(&shape, out_channels, kernel, stride, padding, rng).ok_or_else(
                        || Error::Shape {
                            layer: i,
                            kind: "conv2d",
                            detail: format!("cannot convolve input {shape:?} with kernel {kernel}"),
                        },
                    )?,
                ),
                LayerSpec::Dense { out_features } => {
                    if shape.len() != 1 {
                        return Err(Error::Shape {
                            layer: i,
                            kind: "dense",
                            detail: format!("expects a flat input, got {shape:?}"),
                        });
                    }
                    Layer::Dense(Dense::new(shape[0], out_features, rng).ok_or_else(|| {
                        Error::Shape {
                            layer: i,
                            kind: "dense",
                            detail: "zero-sized dense layer".into(),
                        }
                    })?)
                }
                LayerSpec::Relu => Layer::Relu(shape.clone()),
                LayerSpec::Flatten => Layer::Flatten(shape.clone()),
            };
            shape = layer.output_shape();
            layers.push(layer);
        }
        Self::from_layers(layers)
    }

    /// Assembles a network from already-built layers, validating that
    /// consecutive shapes chain.
    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        let first = layers
            .first()
            .ok_or_else(|| Error::InvalidConfig("network needs at least one layer".into()))?;
        let input_shape = first.input_shape();
        let mut shape = input_shape.clone();
        for (i, layer) in layers.iter().enumerate() {
            if layer.input_shape() != shape {
                return Err(Error::Shape {
                    layer: i,
                    kind: layer.kind(),
                    detail: format!(
                        "expects {:?}, previous layer yields {shape:?}",
                        layer.input_shape()
                    ),
                });
            }
            shape = layer.output_shape();
        }
        let n = layers.len();
        Ok(Self {
            input_shape,
            layers,
            caches: vec![None; n],
            cached_batch: None,
        })
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_shape(&self) -> Vec<usize> {
        self.layers
            .last()
            .map(Layer::output_shape)
            .unwrap_or_default()
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .flat_map(|l| l.params())
            .map(Tensor::len)
            .sum()
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.shape().len() != self.input_shape.len() + 1 || x.shape()[1..] != self.input_shape[..] {
            let layer = &self.layers[0];
            return Err(Error::Shape {
                layer: 0,
                kind: layer.kind(),
                detail: format!(
                    "expects [batch, {}], got {:?}",
                    self.input_shape
                        .iter()
                        .map(ToString::to_string)
                        .collect::<Vec<_>>()
                        .join(", "),
                    x.shape()
                ),
            });
        }
        Ok(())
    }

    /// Forward pass that caches activations for a following `backward`.
    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let mut current = x.clone();
        for (layer, cache) in self.layers.iter().zip(self.caches.iter_mut()) {
            let (out, c) = layer.forward_owned(current);
            *cache = Some(c);
            current = out;
        }
        self.cached_batch = Some(x.rows());
        Ok(current)
    }

    /// Forward pass without caching; safe to call concurrently.
    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let mut iter = self.layers.iter();
        let first = iter.next().expect("non-empty network");
        let (mut current, _) = first.forward(x, false);
        for layer in iter {
            current = layer.forward(&current, false).0;
        }
        Ok(current)
    }

    /// Backpropagates `upstream` through the cached forward pass, overwriting
    /// every parameter gradient, and returns the gradient w.r.t. the input.
    pub fn backward(&mut self, upstream: &Tensor) -> Result<Tensor> {
        Ok(self
            .backward_inner(upstream, true)?
            .expect("input gradient"))
    }

    /// Same as `backward` but skips the input gradient of the first layer.
    pub fn backward_params(&mut self, upstream: &Tensor) -> Result<()> {
        self.backward_inner(upstream, false).map(|_| ())
    }

    fn backward_inner(
        &mut self,
        upstream: &Tensor,
        want_input_grad: bool,
    ) -> Result<Option<Tensor>> {
        let batch = self
            .cached_batch
            .take()
            .ok_or(Error::BackwardBeforeForward)?;
        let mut expected = vec![batch];
        expected.extend(self.output_shape());
        if upstream.shape() != expected.as_slice() {
            self.caches.iter_mut().for_each(|c| *c = None);
            let last = self.layers.len() - 1;
            return Err(Error::Shape {
                layer: last,
                kind: self.layers[last].kind(),
                detail: format!(
                    "upstream gradient {:?}, expected {expected:?}",
                    upstream.shape()
                ),
            });
        }
        let mut grad = Some(upstream.clone());
        for i in (0..self.layers.len()).rev() {
            let cache = self.caches[i].take().ok_or(Error::BackwardBeforeForward)?;
            let want = i > 0 || want_input_grad;
            let g = grad.take().expect("gradient flows down");
            grad = self.layers[i].backward(cache, &g, want);
        }
        Ok(grad)
    }

    pub fn clear_cache(&mut self) {
        self.caches.iter_mut().for_each(|c| *c = None);
        self.cached_batch = None;
    }
}

impl Parameterized for Network {
    fn for_each_param(&mut self, f: &mut dyn FnMut(&mut [f32], &[f32])) {
        for layer in &mut self.layers {
            for (p, g) in layer.params_mut() {
                f(p.data_mut(), g.data());
            }
        }
    }

    fn zero_grad(&mut self) {
        for layer in &mut self.layers {
            for (_, g) in layer.params_mut() {
                g.fill(0.0);
            }
        }
    }
}
