//! Checkpoint files: one line of compact JSON describing the contents,
//! terminated by `\n`, followed by every tensor as an NTF record.

use std::fs;
use std::io::{BufRead, Cursor, Read};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ClassifierHeadSpec, Stage, StageConfig};
use crate::error::{Error, Result};
use crate::nn::ntf::{read_tensor, write_tensor};
use crate::nn::{BackboneSpec, Layer, LayerSpec, Model, OptimConfig, OptimizerState, SchedulerState, Tensor};

const FORMAT: &str = "dfdetect-checkpoint/1";

/// One per-epoch loss entry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpochLog {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerRecord {
    pub config: OptimConfig,
    pub state: OptimizerState,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelCheckpoint {
    pub stage: Stage,
    pub backbone_spec: BackboneSpec,
    pub backbone: Model,
    /// Hash of the backbone tensors this checkpoint was trained on top of
    /// (stage 2) or produced (stage 1).
    pub backbone_sha256: String,
    pub head: Option<(ClassifierHeadSpec, Model)>,
    pub config: StageConfig,
    pub optimizer: Option<OptimizerRecord>,
    pub scheduler: Option<SchedulerState>,
    pub log: Vec<EpochLog>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OptimizerHeader {
    config: OptimConfig,
    t: u64,
    names: Vec<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    stage: Stage,
    backbone: BackboneSpec,
    backbone_sha256: String,
    head: Option<ClassifierHeadSpec>,
    config: StageConfig,
    optimizer: Option<OptimizerHeader>,
    scheduler: Option<SchedulerState>,
    log: Vec<EpochLog>,
    tensors: Vec<TensorEntry>,
}

fn buffer_name(j: usize) -> &'static str {
    ["running_mean", "running_var"][j]
}

fn model_tensors<'a>(prefix: &str, model: &'a Model) -> Vec<(String, &'a Tensor)> {
    let mut out = Vec::new();
    for (i, layer) in model.layers().iter().enumerate() {
        for (name, t) in layer.param_names().into_iter().zip(layer.params()) {
            out.push((format!("{prefix}.layers.{i}.{name}"), t));
        }
        for (j, t) in layer.buffers().iter().enumerate() {
            out.push((format!("{prefix}.layers.{i}.{}", buffer_name(j)), t));
        }
    }
    out
}

/// SHA-256 over the NTF encoding of every backbone parameter and buffer.
pub fn backbone_hash(model: &Model) -> String {
    let mut hasher = Sha256::new();
    let mut buf = Vec::new();
    for (_, t) in model_tensors("backbone", model) {
        buf.clear();
        write_tensor(&mut buf, t).expect("writing to memory");
        hasher.update(&buf);
    }
    hex::encode(hasher.finalize())
}

impl ModelCheckpoint {
    fn tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = model_tensors("backbone", &self.backbone);
        if let Some((_, head)) = &self.head {
            out.extend(model_tensors("head", head));
        }
        if let Some(opt) = &self.optimizer {
            for (name, t) in opt.state.names.iter().zip(&opt.state.m) {
                out.push((format!("optim.m.{name}"), t));
            }
            for (name, t) in opt.state.names.iter().zip(&opt.state.v) {
                out.push((format!("optim.v.{name}"), t));
            }
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let tensors = self.tensors();
        let header = Header {
            format: FORMAT.into(),
            stage: self.stage,
            backbone: self.backbone_spec.clone(),
            backbone_sha256: self.backbone_sha256.clone(),
            head: self.head.as_ref().map(|(s, _)| s.clone()),
            config: self.config.clone(),
            optimizer: self.optimizer.as_ref().map(|o| OptimizerHeader {
                config: o.config.clone(),
                t: o.state.t,
                names: o.state.names.clone(),
            }),
            scheduler: self.scheduler.clone(),
            log: self.log.clone(),
            tensors: tensors
                .iter()
                .map(|(name, t)| TensorEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let mut out = serde_json::to_vec(&header).expect("header serializes");
        out.push(b'\n');
        for (_, t) in tensors {
            write_tensor(&mut out, t).expect("writing to memory");
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor::new(bytes);
        let mut line = Vec::new();
        cur.read_until(b'\n', &mut line)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        if line.last() != Some(&b'\n') {
            return Err(Error::Checkpoint("missing header line".into()));
        }
        let header: Header = serde_json::from_slice(&line[..line.len() - 1])
            .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
        if header.format != FORMAT {
            return Err(Error::Checkpoint(format!("unsupported format `{}`", header.format)));
        }
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for entry in &header.tensors {
            let t = read_tensor(&mut cur)
                .map_err(|e| Error::Checkpoint(format!("tensor `{}`: {e}", entry.name)))?;
            if t.shape() != entry.shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{}`: shape {:?}, header says {:?}",
                    entry.name,
                    t.shape(),
                    entry.shape
                )));
            }
            tensors.push(t);
        }
        let mut rest = Vec::new();
        cur.read_to_end(&mut rest)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        if !rest.is_empty() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", rest.len())));
        }

        let mut it = tensors.into_iter();
        let backbone = rebuild(&header.backbone.input_shape, &header.backbone.layers, &mut it)?;
        let head = match header.head {
            Some(spec) => {
                let model = rebuild(&[header.backbone.embedding_dim], &spec.layers(header.backbone.embedding_dim), &mut it)?;
                Some((spec, model))
            }
            None => None,
        };
        let optimizer = match header.optimizer {
            Some(h) => {
                let n = h.names.len();
                let m: Vec<Tensor> = it.by_ref().take(n).collect();
                let v: Vec<Tensor> = it.by_ref().take(n).collect();
                if m.len() != n || v.len() != n {
                    return Err(Error::Checkpoint("missing optimizer moments".into()));
                }
                Some(OptimizerRecord {
                    config: h.config,
                    state: OptimizerState {
                        names: h.names,
                        m,
                        v,
                        t: h.t,
                    },
                })
            }
            None => None,
        };
        if it.next().is_some() {
            return Err(Error::Checkpoint("more tensors than the header accounts for".into()));
        }

        let actual = backbone_hash(&backbone);
        if actual != header.backbone_sha256 {
            return Err(Error::Checkpoint(format!(
                "backbone hash mismatch: header {}, tensors {actual}",
                header.backbone_sha256
            )));
        }
        Ok(Self {
            stage: header.stage,
            backbone_spec: header.backbone,
            backbone,
            backbone_sha256: header.backbone_sha256,
            head,
            config: header.config,
            optimizer,
            scheduler: header.scheduler,
            log: header.log,
        })
    }
}

fn rebuild(input_shape: &[usize], specs: &[LayerSpec], it: &mut impl Iterator<Item = Tensor>) -> Result<Model> {
    let skeleton: Model = Model::build(input_shape, specs, 0)?;
    let mut layers = Vec::with_capacity(specs.len());
    for l in skeleton.layers() {
        let params: Vec<Tensor> = it.by_ref().take(l.params().len()).collect();
        let buffers: Vec<Tensor> = it.by_ref().take(l.buffers().len()).collect();
        if params.len() != l.params().len() || buffers.len() != l.buffers().len() {
            return Err(Error::Checkpoint("fewer tensors than the architecture needs".into()));
        }
        layers.push(
            Layer::from_parts(l.spec().clone(), params, buffers)
                .map_err(|e| Error::Checkpoint(e.to_string()))?,
        );
    }
    Model::from_layers(input_shape.to_vec(), layers)
}

pub fn save_checkpoint(c: &ModelCheckpoint, path: &Path) -> Result<()> {
    fs::write(path, c.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelCheckpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    ModelCheckpoint::from_bytes(&bytes)
}
