use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{Cache, Layer, LayerSpec, Mode};
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};
use crate::rng::seeded;

pub const DEFAULT_EMBEDDING_DIM: usize = 64;

/// The three toy backbone families.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BackboneKind {
    /// Full-resolution 3x3 convolutions: local texture detectors.
    #[serde(rename = "local-cnn")]
    LocalCnn,
    /// 5x5 kernels on a half-resolution view, then 3x3: coarse plus fine.
    #[serde(rename = "multiscale-cnn")]
    MultiscaleCnn,
    /// Patch tokens, a shared token MLP and global pooling.
    #[serde(rename = "global-mlp")]
    GlobalMlp,
}

impl BackboneKind {
    pub const ALL: [BackboneKind; 3] = [
        BackboneKind::LocalCnn,
        BackboneKind::MultiscaleCnn,
        BackboneKind::GlobalMlp,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BackboneKind::LocalCnn => "local-cnn",
            BackboneKind::MultiscaleCnn => "multiscale-cnn",
            BackboneKind::GlobalMlp => "global-mlp",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == name)
            .ok_or_else(|| Error::Spec(format!("unknown backbone `{name}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneSpec {
    pub name: BackboneKind,
    /// Per-sample input shape `[H, W, C]`.
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
    pub embedding_dim: usize,
}

impl BackboneSpec {
    /// Preset architecture for a `size x size x 3` input. `size` must be a
    /// multiple of 8.
    pub fn preset(kind: BackboneKind, size: usize, embedding_dim: usize) -> Self {
        use LayerSpec::*;
        let layers = match kind {
            BackboneKind::LocalCnn => vec![
                Conv3x3 {
                    in_channels: 3,
                    out_channels: 4,
                },
                Relu,
                MaxPool2,
                Conv3x3 {
                    in_channels: 4,
                    out_channels: 8,
                },
                BatchNorm { channels: 8 },
                Relu,
                MaxPool2,
                Conv3x3 {
                    in_channels: 8,
                    out_channels: 16,
                },
                Relu,
                GlobalAvgPool,
                Dense {
                    fan_in: 16,
                    fan_out: embedding_dim,
                },
            ],
            BackboneKind::MultiscaleCnn => vec![
                MaxPool2,
                Conv5x5 {
                    in_channels: 3,
                    out_channels: 8,
                },
                BatchNorm { channels: 8 },
                Relu,
                MaxPool2,
                Conv3x3 {
                    in_channels: 8,
                    out_channels: 16,
                },
                Relu,
                MaxPool2,
                Conv3x3 {
                    in_channels: 16,
                    out_channels: 32,
                },
                Relu,
                GlobalAvgPool,
                Dense {
                    fan_in: 32,
                    fan_out: embedding_dim,
                },
            ],
            BackboneKind::GlobalMlp => vec![
                Patchify { patch: 4 },
                Dense {
                    fan_in: 48,
                    fan_out: 64,
                },
                BatchNorm { channels: 64 },
                Relu,
                Dense {
                    fan_in: 64,
                    fan_out: 64,
                },
                Relu,
                GlobalAvgPool,
                Dense {
                    fan_in: 64,
                    fan_out: embedding_dim,
                },
            ],
        };
        Self {
            name: kind,
            input_shape: vec![size, size, 3],
            layers,
            embedding_dim,
        }
    }

    /// Walks the layer list and returns the per-sample output shape.
    pub fn output_shape(&self) -> Result<Vec<usize>> {
        let mut shape = self.input_shape.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            shape = layer
                .output_shape(&shape)
                .map_err(|e| Error::Spec(format!("layer {i}: {e}")))?;
        }
        Ok(shape)
    }

    /// Multiply-accumulates of one forward pass per sample, counting dense
    /// and convolution layers only.
    pub fn macs(&self) -> Result<usize> {
        let mut shape = self.input_shape.clone();
        let mut total = 0;
        for layer in &self.layers {
            let out = layer.output_shape(&shape)?;
            total += match *layer {
                LayerSpec::Dense { fan_in, fan_out } => out.iter().product::<usize>() / fan_out * fan_in * fan_out,
                LayerSpec::Conv3x3 {
                    in_channels,
                    out_channels,
                } => out[0] * out[1] * 9 * in_channels * out_channels,
                LayerSpec::Conv5x5 {
                    in_channels,
                    out_channels,
                } => out[0] * out[1] * 25 * in_channels * out_channels,
                _ => 0,
            };
            shape = out;
        }
        Ok(total)
    }

    pub fn validate(&self) -> Result<()> {
        let out = self.output_shape()?;
        if out != [self.embedding_dim] {
            return Err(Error::Spec(format!(
                "{} outputs {out:?}, expected [{}]",
                self.name.name(),
                self.embedding_dim
            )));
        }
        Ok(())
    }
}

/// Seeded He-uniform initialization of a backbone.
pub fn build_backbone(spec: &BackboneSpec, seed: u64) -> Result<Model> {
    spec.validate()?;
    Model::build(&spec.input_shape, &spec.layers, seed)
}

/// A feed-forward stack of layers.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T: Real = f32> {
    input_shape: Vec<usize>,
    layers: Vec<Layer<T>>,
}

/// Per-layer parameter gradients, in layer order.
pub type Gradients<T = f32> = Vec<Vec<Tensor<T>>>;

impl<T: Real> Model<T> {
    pub fn build(input_shape: &[usize], specs: &[LayerSpec], seed: u64) -> Result<Self> {
        let mut shape = input_shape.to_vec();
        for (i, s) in specs.iter().enumerate() {
            shape = s
                .output_shape(&shape)
                .map_err(|e| Error::Spec(format!("layer {i}: {e}")))?;
        }
        let mut rng = seeded(seed);
        let layers = specs
            .iter()
            .map(|s| Layer::init(s.clone(), &mut rng))
            .collect::<Result<_>>()?;
        Ok(Self {
            input_shape: input_shape.to_vec(),
            layers,
        })
    }

    pub fn from_layers(input_shape: Vec<usize>, layers: Vec<Layer<T>>) -> Result<Self> {
        let mut shape = input_shape.clone();
        for (i, l) in layers.iter().enumerate() {
            shape = l
                .spec()
                .output_shape(&shape)
                .map_err(|e| Error::Spec(format!("layer {i}: {e}")))?;
        }
        Ok(Self {
            input_shape,
            layers,
        })
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer<T>] {
        &mut self.layers
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| l.spec().clone()).collect()
    }

    pub fn output_shape(&self) -> Vec<usize> {
        let mut shape = self.input_shape.clone();
        for l in &self.layers {
            shape = l.spec().output_shape(&shape).expect("validated at construction");
        }
        shape
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            input_shape: self.input_shape.clone(),
            layers: self.layers.iter().map(Layer::cast).collect(),
        }
    }

    /// `layers.{i}.{name}` for every trainable tensor, in order.
    pub fn param_names(&self) -> Vec<String> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| {
                l.param_names()
                    .into_iter()
                    .map(move |n| format!("layers.{i}.{n}"))
            })
            .collect()
    }

    pub fn params(&self) -> Vec<&Tensor<T>> {
        self.layers.iter().flat_map(|l| l.params().iter()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.params_mut().iter_mut())
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        if x.shape().len() != self.input_shape.len() + 1 || x.shape()[1..] != self.input_shape[..] {
            return Err(Error::Shape(format!(
                "model expects [N, {:?}], got {:?}",
                self.input_shape,
                x.shape()
            )));
        }
        Ok(())
    }

    /// Forward pass keeping every layer cache for [`Model::backward`].
    pub fn forward<R: Rng + ?Sized>(
        &mut self,
        x: &Tensor<T>,
        mode: Mode,
        rng: &mut R,
    ) -> Result<(Tensor<T>, Vec<Cache<T>>)> {
        self.check_input(x)?;
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for layer in &mut self.layers {
            let (out, cache) = layer.forward(&h, mode, rng)?;
            caches.push(cache);
            h = out;
        }
        Ok((h, caches))
    }

    /// Eval-mode forward without caches or state updates.
    pub fn predict(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let mut rng = seeded(0);
        let mut h = x.clone();
        for layer in &self.layers {
            h = layer.forward_impl(&h, Mode::Eval, &mut rng, false)?.0;
        }
        Ok(h)
    }

    pub fn backward(&self, caches: &[Cache<T>], grad_out: &Tensor<T>) -> Result<(Tensor<T>, Gradients<T>)> {
        if caches.len() != self.layers.len() {
            return Err(Error::Shape(format!(
                "{} caches for {} layers",
                caches.len(),
                self.layers.len()
            )));
        }
        let mut grads = vec![Vec::new(); self.layers.len()];
        let mut g = grad_out.clone();
        for (i, (layer, cache)) in self.layers.iter().zip(caches).enumerate().rev() {
            let (gx, pg) = layer.backward(cache, &g)?;
            grads[i] = pg;
            g = gx;
        }
        Ok((g, grads))
    }
}
