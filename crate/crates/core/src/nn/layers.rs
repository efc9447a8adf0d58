//! Layer kinds with exact forward and backward passes.
//!
//! Activations are batch-first and channels-last: images are `[N, H, W, C]`,
//! token sequences `[N, T, D]`, feature vectors `[N, D]`. Dense and batchnorm
//! act on the trailing axis and treat every leading position as a row.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tensor::{axpy, dot, Real, Tensor};
use crate::error::{Error, Result};

pub const BATCHNORM_EPS: f64 = 1e-5;
pub const BATCHNORM_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum LayerSpec {
    #[serde(rename = "dense")]
    Dense { fan_in: usize, fan_out: usize },
    #[serde(rename = "conv3x3")]
    Conv3x3 {
        in_channels: usize,
        out_channels: usize,
    },
    #[serde(rename = "conv5x5")]
    Conv5x5 {
        in_channels: usize,
        out_channels: usize,
    },
    #[serde(rename = "batchnorm")]
    BatchNorm { channels: usize },
    #[serde(rename = "dropout")]
    Dropout { p: f32 },
    #[serde(rename = "relu")]
    Relu,
    #[serde(rename = "maxpool2")]
    MaxPool2,
    #[serde(rename = "global_avg_pool")]
    GlobalAvgPool,
    #[serde(rename = "patchify")]
    Patchify { patch: usize },
}

impl LayerSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Conv3x3 { .. } => "conv3x3",
            LayerSpec::Conv5x5 { .. } => "conv5x5",
            LayerSpec::BatchNorm { .. } => "batchnorm",
            LayerSpec::Dropout { .. } => "dropout",
            LayerSpec::Relu => "relu",
            LayerSpec::MaxPool2 => "maxpool2",
            LayerSpec::GlobalAvgPool => "global_avg_pool",
            LayerSpec::Patchify { .. } => "patchify",
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |v: usize, name: &str| {
            if v == 0 {
                Err(Error::Spec(format!("{}: {name} must be positive", self.kind())))
            } else {
                Ok(())
            }
        };
        match *self {
            LayerSpec::Dense { fan_in, fan_out } => {
                positive(fan_in, "fan_in")?;
                positive(fan_out, "fan_out")
            }
            LayerSpec::Conv3x3 {
                in_channels,
                out_channels,
            }
            | LayerSpec::Conv5x5 {
                in_channels,
                out_channels,
            } => {
                positive(in_channels, "in_channels")?;
                positive(out_channels, "out_channels")
            }
            LayerSpec::BatchNorm { channels } => positive(channels, "channels"),
            LayerSpec::Dropout { p } => {
                if (0.0..1.0).contains(&p) {
                    Ok(())
                } else {
                    Err(Error::Spec(format!("dropout: p={p} outside [0, 1)")))
                }
            }
            LayerSpec::Patchify { patch } => positive(patch, "patch"),
            LayerSpec::Relu | LayerSpec::MaxPool2 | LayerSpec::GlobalAvgPool => Ok(()),
        }
    }

    fn kernel(&self) -> Option<(usize, usize, usize)> {
        match *self {
            LayerSpec::Conv3x3 {
                in_channels,
                out_channels,
            } => Some((3, in_channels, out_channels)),
            LayerSpec::Conv5x5 {
                in_channels,
                out_channels,
            } => Some((5, in_channels, out_channels)),
            _ => None,
        }
    }

    /// Per-sample output shape for a per-sample input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        self.validate()?;
        let mismatch = |why: String| Err(Error::Spec(format!("{}: {why}", self.kind())));
        match *self {
            LayerSpec::Dense { fan_in, fan_out } => {
                if input.last() != Some(&fan_in) {
                    return mismatch(format!("fan_in {fan_in} but input shape is {input:?}"));
                }
                let mut out = input.to_vec();
                *out.last_mut().unwrap() = fan_out;
                Ok(out)
            }
            LayerSpec::Conv3x3 { .. } | LayerSpec::Conv5x5 { .. } => {
                let (_, cin, cout) = self.kernel().unwrap();
                if input.len() != 3 || input[2] != cin {
                    return mismatch(format!("expects [H, W, {cin}], got {input:?}"));
                }
                Ok(vec![input[0], input[1], cout])
            }
            LayerSpec::BatchNorm { channels } => {
                if input.last() != Some(&channels) {
                    return mismatch(format!("{channels} channels but input shape is {input:?}"));
                }
                Ok(input.to_vec())
            }
            LayerSpec::Dropout { .. } | LayerSpec::Relu => Ok(input.to_vec()),
            LayerSpec::MaxPool2 => {
                if input.len() != 3 || !input[0].is_multiple_of(2) || !input[1].is_multiple_of(2) {
                    return mismatch(format!("expects [H, W, C] with even H, W, got {input:?}"));
                }
                Ok(vec![input[0] / 2, input[1] / 2, input[2]])
            }
            LayerSpec::GlobalAvgPool => {
                if input.len() < 2 {
                    return mismatch(format!("needs at least one pooled axis, got {input:?}"));
                }
                Ok(vec![*input.last().unwrap()])
            }
            LayerSpec::Patchify { patch } => {
                if input.len() != 3 || !input[0].is_multiple_of(patch) || !input[1].is_multiple_of(patch) {
                    return mismatch(format!("patch {patch} does not tile {input:?}"));
                }
                Ok(vec![input[0] / patch, input[1] / patch, patch * patch * input[2]])
            }
        }
    }

    /// Trainable parameter names and shapes, with the fan-in used for init.
    fn param_layout(&self) -> Vec<(&'static str, Vec<usize>)> {
        match *self {
            LayerSpec::Dense { fan_in, fan_out } => {
                vec![("weight", vec![fan_out, fan_in]), ("bias", vec![fan_out])]
            }
            LayerSpec::Conv3x3 { .. } | LayerSpec::Conv5x5 { .. } => {
                let (k, cin, cout) = self.kernel().unwrap();
                vec![("weight", vec![cout, k * k * cin]), ("bias", vec![cout])]
            }
            LayerSpec::BatchNorm { channels } => {
                vec![("gamma", vec![channels]), ("beta", vec![channels])]
            }
            _ => Vec::new(),
        }
    }
}

/// Everything a backward pass needs from its forward call.
#[derive(Clone, Debug)]
pub enum Cache<T: Real = f32> {
    Dense { input: Tensor<T> },
    Conv { cols: Vec<T>, in_shape: Vec<usize> },
    BatchNorm { xhat: Vec<T>, inv_std: Vec<T>, train: bool },
    Dropout { scale: Option<Vec<T>> },
    Relu { input: Vec<T> },
    MaxPool { argmax: Vec<usize>, in_shape: Vec<usize> },
    GlobalAvgPool { in_shape: Vec<usize> },
    Patchify { in_shape: Vec<usize> },
    /// Forward ran without keeping a cache (inference).
    Empty,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer<T: Real = f32> {
    pub(crate) spec: LayerSpec,
    pub(crate) params: Vec<Tensor<T>>,
    /// Batchnorm running mean and variance; empty for every other kind.
    pub(crate) buffers: Vec<Tensor<T>>,
}

impl<T: Real> Layer<T> {
    /// He-uniform (fan-in) weights, zero biases, unit gamma.
    pub fn init<R: Rng + ?Sized>(spec: LayerSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let mut params = Vec::new();
        for (name, shape) in spec.param_layout() {
            let t = match name {
                "weight" => {
                    let fan_in = shape[1];
                    let bound = (6.0 / fan_in as f64).sqrt();
                    let n: usize = shape.iter().product();
                    let data = (0..n)
                        .map(|_| T::of(rng.random_range(-bound..bound)))
                        .collect();
                    Tensor::new(shape, data)?
                }
                "gamma" => Tensor::filled(&shape, T::one()),
                _ => Tensor::zeros(&shape),
            };
            params.push(t);
        }
        let buffers = match spec {
            LayerSpec::BatchNorm { channels } => vec![
                Tensor::zeros(&[channels]),
                Tensor::filled(&[channels], T::one()),
            ],
            _ => Vec::new(),
        };
        Ok(Self {
            spec,
            params,
            buffers,
        })
    }

    pub fn from_parts(spec: LayerSpec, params: Vec<Tensor<T>>, buffers: Vec<Tensor<T>>) -> Result<Self> {
        spec.validate()?;
        let layout = spec.param_layout();
        if layout.len() != params.len() {
            return Err(Error::Spec(format!(
                "{}: expected {} parameter tensors, got {}",
                spec.kind(),
                layout.len(),
                params.len()
            )));
        }
        for ((name, shape), p) in layout.iter().zip(&params) {
            p.check_shape(shape, name)?;
        }
        let nbuf = if matches!(spec, LayerSpec::BatchNorm { .. }) { 2 } else { 0 };
        if buffers.len() != nbuf {
            return Err(Error::Spec(format!("{}: expected {nbuf} buffers", spec.kind())));
        }
        Ok(Self {
            spec,
            params,
            buffers,
        })
    }

    pub fn spec(&self) -> &LayerSpec {
        &self.spec
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn buffers(&self) -> &[Tensor<T>] {
        &self.buffers
    }

    pub fn param_names(&self) -> Vec<&'static str> {
        self.spec.param_layout().into_iter().map(|(n, _)| n).collect()
    }

    pub fn cast<U: Real>(&self) -> Layer<U> {
        Layer {
            spec: self.spec.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
            buffers: self.buffers.iter().map(Tensor::cast).collect(),
        }
    }

    /// Forward pass. In train mode batchnorm also folds the batch statistics
    /// into its running estimates.
    pub fn forward<R: Rng + ?Sized>(
        &mut self,
        input: &Tensor<T>,
        mode: Mode,
        rng: &mut R,
    ) -> Result<(Tensor<T>, Cache<T>)> {
        let (out, cache, stats) = self.forward_impl(input, mode, rng, true)?;
        if let Some((mean, var)) = stats {
            self.update_running(&mean, &var, input.len() / input.last_dim());
        }
        Ok((out, cache))
    }

    pub(crate) fn update_running(&mut self, mean: &[f64], var: &[f64], rows: usize) {
        let m = BATCHNORM_MOMENTUM;
        let unbias = if rows > 1 {
            rows as f64 / (rows as f64 - 1.0)
        } else {
            1.0
        };
        let (rm, rv) = self.buffers.split_at_mut(1);
        for (r, &b) in rm[0].data_mut().iter_mut().zip(mean) {
            *r = T::of((1.0 - m) * r.f64() + m * b);
        }
        for (r, &b) in rv[0].data_mut().iter_mut().zip(var) {
            *r = T::of((1.0 - m) * r.f64() + m * b * unbias);
        }
    }

    /// Stateless forward; batch statistics (train-mode batchnorm) are returned
    /// rather than applied.
    #[allow(clippy::type_complexity)]
    pub(crate) fn forward_impl<R: Rng + ?Sized>(
        &self,
        input: &Tensor<T>,
        mode: Mode,
        rng: &mut R,
        keep_cache: bool,
    ) -> Result<(Tensor<T>, Cache<T>, Option<(Vec<f64>, Vec<f64>)>)> {
        if input.shape().is_empty() {
            return Err(Error::Shape("input has no batch axis".into()));
        }
        let n = input.batch();
        let out_sample = self.spec.output_shape(&input.shape()[1..]).map_err(|e| {
            Error::Shape(format!("{} forward: {e}", self.spec.kind()))
        })?;
        let mut out_shape = vec![n];
        out_shape.extend_from_slice(&out_sample);
        let x = input.data();

        match self.spec {
            LayerSpec::Dense { fan_in, fan_out } => {
                let rows = x.len() / fan_in;
                let mut out = vec![T::zero(); rows * fan_out];
                matmul_bias(x, rows, fan_in, self.params[0].data(), self.params[1].data(), &mut out);
                let cache = if keep_cache {
                    Cache::Dense {
                        input: input.clone(),
                    }
                } else {
                    Cache::Empty
                };
                Ok((Tensor::new(out_shape, out)?, cache, None))
            }
            LayerSpec::Conv3x3 { .. } | LayerSpec::Conv5x5 { .. } => {
                let (k, _, cout) = self.spec.kernel().unwrap();
                let shape = input.shape();
                let (h, w, c) = (shape[1], shape[2], shape[3]);
                let kk = k * k * c;
                let cols = im2col(x, n, h, w, c, k);
                let rows = n * h * w;
                let mut out = vec![T::zero(); rows * cout];
                matmul_bias(&cols, rows, kk, self.params[0].data(), self.params[1].data(), &mut out);
                let cache = if keep_cache {
                    Cache::Conv {
                        cols,
                        in_shape: shape.to_vec(),
                    }
                } else {
                    Cache::Empty
                };
                Ok((Tensor::new(out_shape, out)?, cache, None))
            }
            LayerSpec::BatchNorm { channels } => {
                let rows = x.len() / channels;
                let gamma = self.params[0].data();
                let beta = self.params[1].data();
                let (mean, var, stats) = match mode {
                    Mode::Train => {
                        let mut mean = vec![0.0f64; channels];
                        for r in 0..rows {
                            for (m, v) in mean.iter_mut().zip(&x[r * channels..(r + 1) * channels]) {
                                *m += v.f64();
                            }
                        }
                        mean.iter_mut().for_each(|m| *m /= rows as f64);
                        let mut var = vec![0.0f64; channels];
                        for r in 0..rows {
                            for ((s, v), m) in var
                                .iter_mut()
                                .zip(&x[r * channels..(r + 1) * channels])
                                .zip(&mean)
                            {
                                let d = v.f64() - m;
                                *s += d * d;
                            }
                        }
                        var.iter_mut().for_each(|s| *s /= rows as f64);
                        (mean.clone(), var.clone(), Some((mean, var)))
                    }
                    Mode::Eval => (
                        self.buffers[0].data().iter().map(|v| v.f64()).collect(),
                        self.buffers[1].data().iter().map(|v| v.f64()).collect(),
                        None,
                    ),
                };
                let inv_std: Vec<T> = var
                    .iter()
                    .map(|v| T::of(1.0 / (v + BATCHNORM_EPS).sqrt()))
                    .collect();
                let mean_t: Vec<T> = mean.iter().map(|&m| T::of(m)).collect();
                let mut xhat = vec![T::zero(); x.len()];
                let mut out = vec![T::zero(); x.len()];
                for r in 0..rows {
                    for ch in 0..channels {
                        let i = r * channels + ch;
                        let xh = (x[i] - mean_t[ch]) * inv_std[ch];
                        xhat[i] = xh;
                        out[i] = gamma[ch] * xh + beta[ch];
                    }
                }
                let cache = if keep_cache {
                    Cache::BatchNorm {
                        xhat,
                        inv_std,
                        train: mode == Mode::Train,
                    }
                } else {
                    Cache::Empty
                };
                Ok((Tensor::new(out_shape, out)?, cache, stats))
            }
            LayerSpec::Dropout { p } => match mode {
                Mode::Eval => Ok((input.clone(), Cache::Dropout { scale: None }, None)),
                Mode::Train => {
                    let keep = T::of(1.0 / (1.0 - p as f64));
                    let scale: Vec<T> = (0..x.len())
                        .map(|_| {
                            if rng.random::<f32>() < p {
                                T::zero()
                            } else {
                                keep
                            }
                        })
                        .collect();
                    let out = x.iter().zip(&scale).map(|(&v, &s)| v * s).collect();
                    Ok((
                        Tensor::new(out_shape, out)?,
                        Cache::Dropout { scale: Some(scale) },
                        None,
                    ))
                }
            },
            LayerSpec::Relu => {
                let out = x
                    .iter()
                    .map(|&v| if v > T::zero() { v } else { T::zero() })
                    .collect();
                let cache = if keep_cache {
                    Cache::Relu { input: x.to_vec() }
                } else {
                    Cache::Empty
                };
                Ok((Tensor::new(out_shape, out)?, cache, None))
            }
            LayerSpec::MaxPool2 => {
                let shape = input.shape();
                let (h, w, c) = (shape[1], shape[2], shape[3]);
                let (oh, ow) = (h / 2, w / 2);
                let mut out = vec![T::zero(); n * oh * ow * c];
                let mut argmax = vec![0usize; out.len()];
                for b in 0..n {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            for ch in 0..c {
                                let mut best = usize::MAX;
                                let mut best_v = T::neg_infinity();
                                for dy in 0..2 {
                                    for dx in 0..2 {
                                        let i = ((b * h + 2 * oy + dy) * w + 2 * ox + dx) * c + ch;
                                        if best == usize::MAX || x[i] > best_v {
                                            best = i;
                                            best_v = x[i];
                                        }
                                    }
                                }
                                let o = ((b * oh + oy) * ow + ox) * c + ch;
                                out[o] = best_v;
                                argmax[o] = best;
                            }
                        }
                    }
                }
                Ok((
                    Tensor::new(out_shape, out)?,
                    Cache::MaxPool {
                        argmax,
                        in_shape: shape.to_vec(),
                    },
                    None,
                ))
            }
            LayerSpec::GlobalAvgPool => {
                let c = input.last_dim();
                let per = x.len() / (n * c);
                let inv = T::of(1.0 / per as f64);
                let mut out = vec![T::zero(); n * c];
                for b in 0..n {
                    let dst = &mut out[b * c..(b + 1) * c];
                    for s in 0..per {
                        let src = &x[(b * per + s) * c..(b * per + s + 1) * c];
                        for (d, &v) in dst.iter_mut().zip(src) {
                            *d += v;
                        }
                    }
                    dst.iter_mut().for_each(|d| *d *= inv);
                }
                Ok((
                    Tensor::new(out_shape, out)?,
                    Cache::GlobalAvgPool {
                        in_shape: input.shape().to_vec(),
                    },
                    None,
                ))
            }
            LayerSpec::Patchify { patch } => {
                let shape = input.shape();
                let out = patchify(x, shape, patch, false);
                Ok((
                    Tensor::new(out_shape, out)?,
                    Cache::Patchify {
                        in_shape: shape.to_vec(),
                    },
                    None,
                ))
            }
        }
    }

    /// Backward pass: gradient w.r.t. the layer input plus one gradient per
    /// parameter tensor (same order as [`Layer::params`]).
    pub fn backward(&self, cache: &Cache<T>, grad_out: &Tensor<T>) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
        let g = grad_out.data();
        let mismatch = || {
            Error::Shape(format!(
                "{} backward: cache does not match this layer",
                self.spec.kind()
            ))
        };
        match (&self.spec, cache) {
            (&LayerSpec::Dense { fan_in, fan_out }, Cache::Dense { input }) => {
                let rows = input.len() / fan_in;
                if g.len() != rows * fan_out {
                    return Err(Error::Shape(format!(
                        "dense backward: grad has {} values, expected {}",
                        g.len(),
                        rows * fan_out
                    )));
                }
                let (gx, gw, gb) = matmul_backward(input.data(), g, rows, fan_in, fan_out, self.params[0].data());
                Ok((
                    Tensor::new(input.shape().to_vec(), gx)?,
                    vec![
                        Tensor::new(vec![fan_out, fan_in], gw)?,
                        Tensor::new(vec![fan_out], gb)?,
                    ],
                ))
            }
            (LayerSpec::Conv3x3 { .. } | LayerSpec::Conv5x5 { .. }, Cache::Conv { cols, in_shape }) => {
                let (k, cin, cout) = self.spec.kernel().unwrap();
                let (n, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
                let rows = n * h * w;
                let kk = k * k * cin;
                if g.len() != rows * cout {
                    return Err(Error::Shape(format!(
                        "conv backward: grad has {} values, expected {}",
                        g.len(),
                        rows * cout
                    )));
                }
                let (gcols, gw, gb) = matmul_backward(cols, g, rows, kk, cout, self.params[0].data());
                let gx = col2im(&gcols, n, h, w, cin, k);
                Ok((
                    Tensor::new(in_shape.clone(), gx)?,
                    vec![Tensor::new(vec![cout, kk], gw)?, Tensor::new(vec![cout], gb)?],
                ))
            }
            (&LayerSpec::BatchNorm { channels }, Cache::BatchNorm { xhat, inv_std, train }) => {
                if g.len() != xhat.len() {
                    return Err(Error::Shape("batchnorm backward: grad size mismatch".into()));
                }
                let rows = g.len() / channels;
                let gamma = self.params[0].data();
                let mut ggamma = vec![T::zero(); channels];
                let mut gbeta = vec![T::zero(); channels];
                for r in 0..rows {
                    for ch in 0..channels {
                        let i = r * channels + ch;
                        ggamma[ch] += g[i] * xhat[i];
                        gbeta[ch] += g[i];
                    }
                }
                let mut gx = vec![T::zero(); g.len()];
                if *train {
                    // batch statistics depend on the input
                    let m = T::of(rows as f64);
                    for r in 0..rows {
                        for ch in 0..channels {
                            let i = r * channels + ch;
                            // dxhat = g * gamma; sums of dxhat and dxhat*xhat are
                            // gamma * gbeta and gamma * ggamma.
                            let dxh = g[i] * gamma[ch];
                            gx[i] = inv_std[ch] / m
                                * (m * dxh - gamma[ch] * gbeta[ch] - xhat[i] * gamma[ch] * ggamma[ch]);
                        }
                    }
                } else {
                    for (i, d) in gx.iter_mut().enumerate() {
                        let ch = i % channels;
                        *d = g[i] * gamma[ch] * inv_std[ch];
                    }
                }
                Ok((
                    Tensor::new(grad_out.shape().to_vec(), gx)?,
                    vec![
                        Tensor::new(vec![channels], ggamma)?,
                        Tensor::new(vec![channels], gbeta)?,
                    ],
                ))
            }
            (LayerSpec::Dropout { .. }, Cache::Dropout { scale }) => {
                let gx = match scale {
                    None => g.to_vec(),
                    Some(s) => {
                        if s.len() != g.len() {
                            return Err(mismatch());
                        }
                        g.iter().zip(s).map(|(&a, &b)| a * b).collect()
                    }
                };
                Ok((Tensor::new(grad_out.shape().to_vec(), gx)?, Vec::new()))
            }
            (LayerSpec::Relu, Cache::Relu { input }) => {
                if input.len() != g.len() {
                    return Err(mismatch());
                }
                let gx = input
                    .iter()
                    .zip(g)
                    .map(|(&x, &d)| if x > T::zero() { d } else { T::zero() })
                    .collect();
                Ok((Tensor::new(grad_out.shape().to_vec(), gx)?, Vec::new()))
            }
            (LayerSpec::MaxPool2, Cache::MaxPool { argmax, in_shape }) => {
                if argmax.len() != g.len() {
                    return Err(mismatch());
                }
                let mut gx = vec![T::zero(); in_shape.iter().product()];
                for (&i, &d) in argmax.iter().zip(g) {
                    gx[i] += d;
                }
                Ok((Tensor::new(in_shape.clone(), gx)?, Vec::new()))
            }
            (LayerSpec::GlobalAvgPool, Cache::GlobalAvgPool { in_shape }) => {
                let n = in_shape[0];
                let c = *in_shape.last().unwrap();
                if g.len() != n * c {
                    return Err(mismatch());
                }
                let total: usize = in_shape.iter().product();
                let per = total / (n * c);
                let inv = T::of(1.0 / per as f64);
                let mut gx = vec![T::zero(); total];
                for b in 0..n {
                    let src = &g[b * c..(b + 1) * c];
                    for s in 0..per {
                        let dst = &mut gx[(b * per + s) * c..(b * per + s + 1) * c];
                        for (d, &v) in dst.iter_mut().zip(src) {
                            *d = v * inv;
                        }
                    }
                }
                Ok((Tensor::new(in_shape.clone(), gx)?, Vec::new()))
            }
            (&LayerSpec::Patchify { patch }, Cache::Patchify { in_shape }) => {
                if g.len() != in_shape.iter().product::<usize>() {
                    return Err(mismatch());
                }
                let gx = patchify(g, in_shape, patch, true);
                Ok((Tensor::new(in_shape.clone(), gx)?, Vec::new()))
            }
            (_, Cache::Empty) => Err(Error::Shape(format!(
                "{} backward: forward ran without a cache",
                self.spec.kind()
            ))),
            _ => Err(mismatch()),
        }
    }
}

/// `out[r, o] = bias[o] + sum_i x[r, i] * w[o, i]`
fn matmul_bias<T: Real>(x: &[T], rows: usize, k: usize, w: &[T], bias: &[T], out: &mut [T]) {
    let o_dim = bias.len();
    for r in 0..rows {
        let xr = &x[r * k..(r + 1) * k];
        let dst = &mut out[r * o_dim..(r + 1) * o_dim];
        for (o, d) in dst.iter_mut().enumerate() {
            *d = bias[o] + dot(xr, &w[o * k..(o + 1) * k]);
        }
    }
}

/// Gradients of [`matmul_bias`] w.r.t. input, weight and bias.
fn matmul_backward<T: Real>(
    x: &[T],
    g: &[T],
    rows: usize,
    k: usize,
    o_dim: usize,
    w: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut gx = vec![T::zero(); rows * k];
    let mut gw = vec![T::zero(); o_dim * k];
    let mut gb = vec![T::zero(); o_dim];
    for r in 0..rows {
        let xr = &x[r * k..(r + 1) * k];
        let gr = &g[r * o_dim..(r + 1) * o_dim];
        let gxr = &mut gx[r * k..(r + 1) * k];
        for (o, &d) in gr.iter().enumerate() {
            if d == T::zero() {
                continue;
            }
            gb[o] += d;
            axpy(d, xr, &mut gw[o * k..(o + 1) * k]);
            axpy(d, &w[o * k..(o + 1) * k], gxr);
        }
    }
    (gx, gw, gb)
}

/// Zero-padded "same" patches: row `(n, y, x)` holds the `k x k x c`
/// neighbourhood ordered `(ky, kx, c)`.
fn im2col<T: Real>(x: &[T], n: usize, h: usize, w: usize, c: usize, k: usize) -> Vec<T> {
    let pad = (k / 2) as isize;
    let kk = k * k * c;
    let mut cols = vec![T::zero(); n * h * w * kk];
    for b in 0..n {
        for y in 0..h {
            for xx in 0..w {
                let row = ((b * h + y) * w + xx) * kk;
                for ky in 0..k {
                    let sy = y as isize + ky as isize - pad;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let sx = xx as isize + kx as isize - pad;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let src = ((b * h + sy as usize) * w + sx as usize) * c;
                        let dst = row + (ky * k + kx) * c;
                        cols[dst..dst + c].copy_from_slice(&x[src..src + c]);
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Real>(cols: &[T], n: usize, h: usize, w: usize, c: usize, k: usize) -> Vec<T> {
    let pad = (k / 2) as isize;
    let kk = k * k * c;
    let mut x = vec![T::zero(); n * h * w * c];
    for b in 0..n {
        for y in 0..h {
            for xx in 0..w {
                let row = ((b * h + y) * w + xx) * kk;
                for ky in 0..k {
                    let sy = y as isize + ky as isize - pad;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let sx = xx as isize + kx as isize - pad;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let dst = ((b * h + sy as usize) * w + sx as usize) * c;
                        let src = row + (ky * k + kx) * c;
                        for ch in 0..c {
                            x[dst + ch] += cols[src + ch];
                        }
                    }
                }
            }
        }
    }
    x
}

/// `[N, H, W, C]` to the patch grid `[N, H/p, W/p, p*p*C]`, each patch
/// ordered `(dy, dx, c)`. With `inverse`, maps grid-layout values back.
fn patchify<T: Real>(src: &[T], in_shape: &[usize], p: usize, inverse: bool) -> Vec<T> {
    let (n, h, w, c) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
    let (ph, pw) = (h / p, w / p);
    let mut dst = vec![T::zero(); src.len()];
    for b in 0..n {
        for py in 0..ph {
            for px in 0..pw {
                for dy in 0..p {
                    let img = ((b * h + py * p + dy) * w + px * p) * c;
                    let tok = (((b * ph + py) * pw + px) * p + dy) * p * c;
                    let len = p * c;
                    if inverse {
                        dst[img..img + len].copy_from_slice(&src[tok..tok + len]);
                    } else {
                        dst[tok..tok + len].copy_from_slice(&src[img..img + len]);
                    }
                }
            }
        }
    }
    dst
}
