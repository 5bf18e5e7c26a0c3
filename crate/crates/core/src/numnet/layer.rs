use rand::Rng;

use super::gemm::{gemm, View};
use crate::tensor::Tensor;

/// Architecture-level description of a layer, before shapes are resolved.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerSpec {
    Conv2d {
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Dense {
        out_features: usize,
    },
    Relu,
    Flatten,
}

/// Direct 2-D correlation over `[batch, channels, height, width]` input with
/// explicit zero padding. Weight layout is `[out, in, k, k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub weight: Tensor,
    pub bias: Tensor,
    pub grad_weight: Tensor,
    pub grad_bias: Tensor,
}

/// Affine map `y = W x + b`, weight layout `[out, in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub in_features: usize,
    pub out_features: usize,
    pub weight: Tensor,
    pub bias: Tensor,
    pub grad_weight: Tensor,
    pub grad_bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv2d(Conv2d),
    Dense(Dense),
    /// Element-wise max(0, x); carries its per-sample input shape.
    Relu(Vec<usize>),
    /// Collapses everything but the batch axis; carries its per-sample input shape.
    Flatten(Vec<usize>),
}

/// Activations retained between forward and backward.
#[derive(Debug, Clone)]
pub(crate) enum Cache {
    /// im2col matrices for every sample, `[batch][c*k*k, out_h*out_w]`.
    Cols {
        batch: usize,
        cols: Vec<f32>,
    },
    Input(Tensor),
    Batch(usize),
}

fn he_uniform<R: Rng + ?Sized>(len: usize, fan_in: usize, rng: &mut R) -> Vec<f32> {
    let limit = (6.0 / fan_in as f64).sqrt() as f32;
    (0..len).map(|_| rng.random_range(-limit..=limit)).collect()
}

impl Conv2d {
    pub fn new<R: Rng + ?Sized>(
        in_shape: &[usize],
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Option<Self> {
        let [in_channels, in_h, in_w] = <[usize; 3]>::try_from(in_shape).ok()?;
        if out_channels == 0 || kernel == 0 || stride == 0 {
            return None;
        }
        if in_h + 2 * padding < kernel || in_w + 2 * padding < kernel {
            return None;
        }
        let fan_in = in_channels * kernel * kernel;
        let wlen = out_channels * fan_in;
        let wshape = [out_channels, in_channels, kernel, kernel];
        Some(Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            in_h,
            in_w,
            weight: Tensor::new(wshape.to_vec(), he_uniform(wlen, fan_in, rng)).ok()?,
            bias: Tensor::zeros(&[out_channels]),
            grad_weight: Tensor::zeros(&wshape),
            grad_bias: Tensor::zeros(&[out_channels]),
        })
    }

    pub fn out_hw(&self) -> (usize, usize) {
        (
            (self.in_h + 2 * self.padding - self.kernel) / self.stride + 1,
            (self.in_w + 2 * self.padding - self.kernel) / self.stride + 1,
        )
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn im2col(&self, x: &[f32], cols: &mut [f32]) {
        let (oh, ow) = self.out_hw();
        let k = self.kernel;
        let spatial = oh * ow;
        for c in 0..self.in_channels {
            let plane = &x[c * self.in_h * self.in_w..(c + 1) * self.in_h * self.in_w];
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    let dst = &mut cols[row * spatial..(row + 1) * spatial];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ki) as isize - self.padding as isize;
                        let line = &mut dst[oy * ow..(oy + 1) * ow];
                        if iy < 0 || iy >= self.in_h as isize {
                            line.fill(0.0);
                            continue;
                        }
                        let src = &plane[iy as usize * self.in_w..(iy as usize + 1) * self.in_w];
                        for (ox, v) in line.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kj) as isize - self.padding as isize;
                            *v = if ix < 0 || ix >= self.in_w as isize {
                                0.0
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f32], dx: &mut [f32]) {
        let (oh, ow) = self.out_hw();
        let k = self.kernel;
        let spatial = oh * ow;
        for c in 0..self.in_channels {
            let plane = &mut dx[c * self.in_h * self.in_w..(c + 1) * self.in_h * self.in_w];
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    let src = &cols[row * spatial..(row + 1) * spatial];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ki) as isize - self.padding as isize;
                        if iy < 0 || iy >= self.in_h as isize {
                            continue;
                        }
                        let base = iy as usize * self.in_w;
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kj) as isize - self.padding as isize;
                            if ix >= 0 && ix < self.in_w as isize {
                                plane[base + ix as usize] += src[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }

    fn forward(&self, x: &Tensor, keep: bool) -> (Tensor, Option<Cache>) {
        let batch = x.rows();
        let (oh, ow) = self.out_hw();
        let spatial = oh * ow;
        let plen = self.patch_len();
        let in_len = self.in_channels * self.in_h * self.in_w;
        let out_len = self.out_channels * spatial;
        let mut out = vec![0.0f32; batch * out_len];
        let mut cols = vec![0.0f32; if keep { batch } else { 1 } * plen * spatial];
        for n in 0..batch {
            let slot = if keep { n } else { 0 };
            let col = &mut cols[slot * plen * spatial..(slot + 1) * plen * spatial];
            self.im2col(&x.data()[n * in_len..(n + 1) * in_len], col);
            let dst = &mut out[n * out_len..(n + 1) * out_len];
            for (o, chunk) in dst.chunks_mut(spatial).enumerate() {
                chunk.fill(self.bias.data()[o]);
            }
            gemm(
                1.0,
                View::new(self.weight.data(), self.out_channels, plen),
                View::new(col, plen, spatial),
                1.0,
                dst,
            );
        }
        let out = Tensor::new(vec![batch, self.out_channels, oh, ow], out).expect("conv output");
        (out, keep.then_some(Cache::Cols { batch, cols }))
    }

    fn backward(
        &mut self,
        cols: &[f32],
        batch: usize,
        dy: &Tensor,
        want_dx: bool,
    ) -> Option<Tensor> {
        let (oh, ow) = self.out_hw();
        let spatial = oh * ow;
        let plen = self.patch_len();
        let out_len = self.out_channels * spatial;
        let in_len = self.in_channels * self.in_h * self.in_w;
        self.grad_weight.fill(0.0);
        self.grad_bias.fill(0.0);
        let mut dx = want_dx.then(|| vec![0.0f32; batch * in_len]);
        let mut dcols = vec![0.0f32; if want_dx { plen * spatial } else { 0 }];
        for n in 0..batch {
            let g = &dy.data()[n * out_len..(n + 1) * out_len];
            let col = &cols[n * plen * spatial..(n + 1) * plen * spatial];
            for (o, chunk) in g.chunks(spatial).enumerate() {
                self.grad_bias.data_mut()[o] += chunk.iter().sum::<f32>();
            }
            gemm(
                1.0,
                View::new(g, self.out_channels, spatial),
                View::new(col, plen, spatial).t(),
                1.0,
                self.grad_weight.data_mut(),
            );
            if let Some(dx) = dx.as_mut() {
                gemm(
                    1.0,
                    View::new(self.weight.data(), self.out_channels, plen).t(),
                    View::new(g, self.out_channels, spatial),
                    0.0,
                    &mut dcols,
                );
                self.col2im(&dcols, &mut dx[n * in_len..(n + 1) * in_len]);
            }
        }
        dx.map(|d| {
            Tensor::new(vec![batch, self.in_channels, self.in_h, self.in_w], d).expect("conv dx")
        })
    }
}

/// Batches up to this size use row-wise dot products in `Dense::forward`.
const SMALL_BATCH: usize = 8;

fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = [0.0f32; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: f32 = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .map(|(x, y)| x * y)
        .sum();
    for (x, y) in ca.zip(cb) {
        for k in 0..8 {
            acc[k] += x[k] * y[k];
        }
    }
    acc.iter().sum::<f32>() + tail
}

impl Dense {
    pub fn new<R: Rng + ?Sized>(
        in_features: usize,
        out_features: usize,
        rng: &mut R,
    ) -> Option<Self> {
        if in_features == 0 || out_features == 0 {
            return None;
        }
        let wshape = [out_features, in_features];
        Some(Self {
            in_features,
            out_features,
            weight: Tensor::new(
                wshape.to_vec(),
                he_uniform(in_features * out_features, in_features, rng),
            )
            .ok()?,
            bias: Tensor::zeros(&[out_features]),
            grad_weight: Tensor::zeros(&wshape),
            grad_bias: Tensor::zeros(&[out_features]),
        })
    }

    /// Multiplies every weight by `gain`; used for near-uniform policy heads.
    pub fn scale_weights(&mut self, gain: f32) {
        self.weight.data_mut().iter_mut().for_each(|w| *w *= gain);
    }

    fn forward(&self, x: &Tensor) -> Tensor {
        let batch = x.rows();
        let mut out = vec![0.0f32; batch * self.out_features];
        for row in out.chunks_mut(self.out_features) {
            row.copy_from_slice(self.bias.data());
        }
        if batch <= SMALL_BATCH {
            // GEMM would repack the whole weight matrix for a handful of rows;
            // stream each weight row once instead.
            let w = self.weight.data();
            for (o, w_row) in w.chunks_exact(self.in_features).enumerate() {
                for (b, x_row) in x.data().chunks_exact(self.in_features).enumerate() {
                    out[b * self.out_features + o] += dot(w_row, x_row);
                }
            }
            return Tensor::new(vec![batch, self.out_features], out).expect("dense output");
        }
        gemm(
            1.0,
            View::new(x.data(), batch, self.in_features),
            View::new(self.weight.data(), self.out_features, self.in_features).t(),
            1.0,
            &mut out,
        );
        Tensor::new(vec![batch, self.out_features], out).expect("dense output")
    }

    fn backward(&mut self, x: &Tensor, dy: &Tensor, want_dx: bool) -> Option<Tensor> {
        let batch = x.rows();
        gemm(
            1.0,
            View::new(dy.data(), batch, self.out_features).t(),
            View::new(x.data(), batch, self.in_features),
            0.0,
            self.grad_weight.data_mut(),
        );
        let gb = self.grad_bias.data_mut();
        gb.fill(0.0);
        for row in dy.data().chunks(self.out_features) {
            for (b, g) in gb.iter_mut().zip(row) {
                *b += g;
            }
        }
        want_dx.then(|| {
            let mut dx = vec![0.0f32; batch * self.in_features];
            gemm(
                1.0,
                View::new(dy.data(), batch, self.out_features),
                View::new(self.weight.data(), self.out_features, self.in_features),
                0.0,
                &mut dx,
            );
            Tensor::new(vec![batch, self.in_features], dx).expect("dense dx")
        })
    }
}

impl Layer {
    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Conv2d(_) => "conv2d",
            Layer::Dense(_) => "dense",
            Layer::Relu(_) => "relu",
            Layer::Flatten(_) => "flatten",
        }
    }

    /// Per-sample input shape.
    pub fn input_shape(&self) -> Vec<usize> {
        match self {
            Layer::Conv2d(c) => vec![c.in_channels, c.in_h, c.in_w],
            Layer::Dense(d) => vec![d.in_features],
            Layer::Relu(s) | Layer::Flatten(s) => s.clone(),
        }
    }

    /// Per-sample output shape.
    pub fn output_shape(&self) -> Vec<usize> {
        match self {
            Layer::Conv2d(c) => {
                let (h, w) = c.out_hw();
                vec![c.out_channels, h, w]
            }
            Layer::Dense(d) => vec![d.out_features],
            Layer::Relu(s) => s.clone(),
            Layer::Flatten(s) => vec![s.iter().product()],
        }
    }

    pub(crate) fn forward(&self, x: &Tensor, keep: bool) -> (Tensor, Option<Cache>) {
        match self {
            Layer::Conv2d(c) => c.forward(x, keep),
            Layer::Dense(d) => (d.forward(x), keep.then(|| Cache::Input(x.clone()))),
            Layer::Relu(_) => {
                let data = x.data().iter().map(|v| v.max(0.0)).collect();
                let out = Tensor::new(x.shape().to_vec(), data).expect("relu output");
                (out, keep.then(|| Cache::Input(x.clone())))
            }
            Layer::Flatten(_) => {
                let batch = x.rows();
                let width = x.len() / batch;
                let out = x.clone().reshape(vec![batch, width]).expect("flatten");
                (out, keep.then_some(Cache::Batch(batch)))
            }
        }
    }

    /// Like `forward` with caching, but takes ownership of the input so dense
    /// and relu layers can keep it without copying.
    pub(crate) fn forward_owned(&self, x: Tensor) -> (Tensor, Cache) {
        match self {
            Layer::Dense(d) => {
                let out = d.forward(&x);
                (out, Cache::Input(x))
            }
            Layer::Relu(_) => {
                let data = x.data().iter().map(|v| v.max(0.0)).collect();
                let out = Tensor::new(x.shape().to_vec(), data).expect("relu output");
                (out, Cache::Input(x))
            }
            Layer::Flatten(_) => {
                let batch = x.rows();
                let width = x.len() / batch;
                (
                    x.reshape(vec![batch, width]).expect("flatten"),
                    Cache::Batch(batch),
                )
            }
            Layer::Conv2d(_) => {
                let (out, cache) = self.forward(&x, true);
                (out, cache.expect("conv cache"))
            }
        }
    }

    pub(crate) fn backward(&mut self, cache: Cache, dy: &Tensor, want_dx: bool) -> Option<Tensor> {
        match (self, cache) {
            (Layer::Conv2d(c), Cache::Cols { batch, cols }) => {
                c.backward(&cols, batch, dy, want_dx)
            }
            (Layer::Dense(d), Cache::Input(x)) => d.backward(&x, dy, want_dx),
            (Layer::Relu(_), Cache::Input(x)) => want_dx.then(|| {
                let data = x
                    .data()
                    .iter()
                    .zip(dy.data())
                    .map(|(xi, gi)| if *xi > 0.0 { *gi } else { 0.0 })
                    .collect();
                Tensor::new(x.shape().to_vec(), data).expect("relu dx")
            }),
            (Layer::Flatten(shape), Cache::Batch(batch)) => want_dx.then(|| {
                let mut full = vec![batch];
                full.extend_from_slice(shape);
                dy.clone().reshape(full).expect("flatten dx")
            }),
            _ => unreachable!("cache variant does not match layer"),
        }
    }

    /// Parameter tensors paired with their gradients: weight first, then bias.
    pub fn params_mut(&mut self) -> Vec<(&mut Tensor, &mut Tensor)> {
        match self {
            Layer::Conv2d(c) => vec![
                (&mut c.weight, &mut c.grad_weight),
                (&mut c.bias, &mut c.grad_bias),
            ],
            Layer::Dense(d) => vec![
                (&mut d.weight, &mut d.grad_weight),
                (&mut d.bias, &mut d.grad_bias),
            ],
            _ => Vec::new(),
        }
    }

    pub fn params(&self) -> Vec<&Tensor> {
        match self {
            Layer::Conv2d(c) => vec![&c.weight, &c.bias],
            Layer::Dense(d) => vec![&d.weight, &d.bias],
            _ => Vec::new(),
        }
    }

    pub fn grads(&self) -> Vec<&Tensor> {
        match self {
            Layer::Conv2d(c) => vec![&c.grad_weight, &c.grad_bias],
            Layer::Dense(d) => vec![&d.grad_weight, &d.grad_bias],
            _ => Vec::new(),
        }
    }
}
