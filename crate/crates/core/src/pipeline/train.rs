use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::checkpoint::{backbone_hash, EpochLog, ModelCheckpoint, OptimizerRecord};
use super::{ClassifierHeadSpec, Dataset, Stage, Stage1Loss, StageConfig};
use crate::augment::{online_augment, online_rng};
use crate::error::{Error, Result};
use crate::image::stack;
use crate::losses::{bce_logits_loss, l2_normalize_rows, l2_normalize_rows_backward, sigmoid, supcon_loss, SupConConfig};
use crate::nn::{
    adam_step, adamw_step, build_backbone, plateau_step, Algorithm, BackboneSpec, LayerSpec, Mode, Model,
    OptimConfig, OptimizerState, SchedulerState, Tensor,
};
use crate::rng::{derive_seed, rng_for};

const EMBED_CHUNK: usize = 256;

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub checkpoint: ModelCheckpoint,
    /// Milliseconds since training started, one per log entry.
    pub wall_ms: Vec<u64>,
    /// Batches skipped because they held a single class or one sample.
    pub skipped_batches: usize,
}

#[derive(Serialize)]
struct LogLine<'a> {
    epoch: usize,
    split: &'a str,
    loss: f64,
    lr: f64,
    wall_ms: u64,
}

impl TrainOutput {
    /// Training log as JSON lines `{epoch, split, loss, lr, wall_ms}`.
    pub fn log_jsonl(&self) -> String {
        let mut out = String::new();
        for (e, &wall_ms) in self.checkpoint.log.iter().zip(&self.wall_ms) {
            let line = LogLine {
                epoch: e.epoch,
                split: &e.split,
                loss: e.loss,
                lr: e.lr,
                wall_ms,
            };
            out.push_str(&serde_json::to_string(&line).expect("log serializes"));
            out.push('\n');
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub label: u8,
    pub prob: f64,
}

/// The backbone as initialized by [`train_stage1`] for this config, before
/// any update.
pub fn init_backbone(spec: &BackboneSpec, seed: u64) -> Result<Model> {
    build_backbone(spec, derive_seed(seed, &["backbone-init", spec.name.name()]))
}

/// Eval-mode embeddings `[N, d]` for every sample, in dataset order.
pub fn embed(model: &Model, data: &Dataset) -> Result<Tensor> {
    let d = *model.output_shape().last().expect("non-empty output");
    let mut out = Vec::with_capacity(data.len() * d);
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(EMBED_CHUNK) {
        out.extend_from_slice(model.predict(&data.batch(chunk)?)?.data());
    }
    Tensor::new(vec![data.len(), d], out)
}

fn gather_rows(x: &Tensor, rows: &[usize]) -> Tensor {
    let d = x.last_dim();
    let mut data = Vec::with_capacity(rows.len() * d);
    for &r in rows {
        data.extend_from_slice(x.row(r));
    }
    Tensor::new(vec![rows.len(), d], data).expect("consistent rows")
}

fn optimizer_step(params: Vec<&mut Tensor>, grads: &[&Tensor], state: &mut OptimizerState, cfg: &OptimConfig) -> Result<()> {
    let mut params = params;
    match cfg.algorithm {
        Algorithm::Adamw => adamw_step(&mut params, grads, state, cfg),
        Algorithm::Adam => adam_step(&mut params, grads, state, cfg),
    }
}

fn prefixed(prefix: &str, names: Vec<String>) -> Vec<String> {
    names.into_iter().map(|n| format!("{prefix}.{n}")).collect()
}

fn shuffled(n: usize, seed: u64, parts: &[&str]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_for(seed, parts));
    order
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

struct Stage1Model {
    backbone: Model,
    temp_head: Option<Model>,
}

impl Stage1Model {
    /// Loss and parameter gradients for one training batch, or `None` when
    /// the batch carries no signal.
    fn train_batch(
        &mut self,
        x: &Tensor,
        labels: &[u8],
        cfg: &StageConfig,
        rng_seed: u64,
    ) -> Result<Option<(f64, Vec<Tensor>)>> {
        let mut rng = crate::rng::seeded(rng_seed);
        let (z, caches) = self.backbone.forward(x, Mode::Train, &mut rng)?;
        let (loss, gz, head_grads) = match &mut self.temp_head {
            None => {
                let u = l2_normalize_rows(&z)?;
                let res = supcon_loss(&u, labels, &SupConConfig { temperature: cfg.temperature })?;
                if res.warning {
                    return Ok(None);
                }
                (res.loss, l2_normalize_rows_backward(&z, &res.grad)?, Vec::new())
            }
            Some(head) => {
                let (logits, hc) = head.forward(&z, Mode::Train, &mut rng)?;
                let res = bce_logits_loss(&logits, labels)?;
                let (gz, hg) = head.backward(&hc, &res.grad)?;
                (res.loss, gz, hg.into_iter().flatten().collect())
            }
        };
        if !loss.is_finite() {
            return Ok(Some((loss, Vec::new())));
        }
        let (_, grads) = self.backbone.backward(&caches, &gz)?;
        let mut all: Vec<Tensor> = grads.into_iter().flatten().collect();
        all.extend(head_grads);
        Ok(Some((loss, all)))
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = self.backbone.params_mut();
        if let Some(h) = &mut self.temp_head {
            p.extend(h.params_mut());
        }
        p
    }

    fn names(&self) -> Vec<String> {
        let mut n = prefixed("backbone", self.backbone.param_names());
        if let Some(h) = &self.temp_head {
            n.extend(prefixed("temp_head", h.param_names()));
        }
        n
    }

    /// Mean validation loss in eval mode over fixed batches.
    fn val_loss(&self, val: &Dataset, order: &[usize], cfg: &StageConfig) -> Result<f64> {
        let mut losses = Vec::new();
        for chunk in order.chunks(cfg.batch_size) {
            let x = val.batch(chunk)?;
            let labels: Vec<u8> = chunk.iter().map(|&i| val.samples[i].label).collect();
            let z = self.backbone.predict(&x)?;
            match &self.temp_head {
                None => {
                    if chunk.len() < 2 {
                        continue;
                    }
                    let res = supcon_loss(&l2_normalize_rows(&z)?, &labels, &SupConConfig {
                        temperature: cfg.temperature,
                    })?;
                    if !res.warning {
                        losses.push(res.loss);
                    }
                }
                Some(head) => {
                    let res = bce_logits_loss(&head.predict(&z)?, &labels)?;
                    losses.push(res.loss);
                }
            }
        }
        if losses.is_empty() {
            return Err(Error::InvalidInput("validation set yields no usable batch".into()));
        }
        Ok(mean(&losses))
    }
}

/// Stage 1: train a backbone from scratch with online augmentation, the
/// configured loss, the configured optimizer and the plateau scheduler.
pub fn train_stage1(train: &Dataset, val: &Dataset, spec: &BackboneSpec, cfg: &StageConfig) -> Result<TrainOutput> {
    cfg.validate()?;
    if cfg.stage != Stage::Backbone {
        return Err(Error::config("stage", "stage 1 needs stage = backbone"));
    }
    if train.is_empty() || val.is_empty() {
        return Err(Error::InvalidInput("stage 1 needs non-empty train and validation sets".into()));
    }
    let seed = cfg.seed;
    let backbone = init_backbone(spec, seed)?;
    let temp_head = match cfg.loss {
        Stage1Loss::Supcon => None,
        Stage1Loss::Bce => Some(Model::build(
            &[spec.embedding_dim],
            &[LayerSpec::Dense {
                fan_in: spec.embedding_dim,
                fan_out: 1,
            }],
            derive_seed(seed, &["temp-head-init"]),
        )?),
    };
    let mut model = Stage1Model { backbone, temp_head };
    let names = model.names();
    let mut opt = {
        let params: Vec<&Tensor> = model.params_mut().into_iter().map(|p| &*p).collect();
        OptimizerState::new(names, &params)
    };
    let mut sched = SchedulerState::new(cfg.optimizer.lr, cfg.scheduler.factor, cfg.scheduler.patience)?;
    let val_order = shuffled(val.len(), seed, &["val-order"]);

    let start = Instant::now();
    let mut log = Vec::new();
    let mut wall_ms = Vec::new();
    let mut skipped = 0;
    for epoch in 1..=cfg.epochs {
        let lr = sched.current_lr;
        let opt_cfg = OptimConfig { lr, ..cfg.optimizer.clone() };
        let order = shuffled(train.len(), seed, &["shuffle", &epoch.to_string()]);
        let mut losses = Vec::new();
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            if chunk.len() < 2 && model.temp_head.is_none() {
                skipped += 1;
                continue;
            }
            let mut images = Vec::with_capacity(chunk.len());
            let mut labels = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let s = &train.samples[i];
                let mut rng = online_rng(seed, &s.id, epoch);
                images.push(online_augment(s, &cfg.online_aug, &mut rng)?.0.image);
                labels.push(s.label);
            }
            let x = stack(&images.iter().collect::<Vec<_>>())?;
            let batch_seed = derive_seed(seed, &["batch", &epoch.to_string(), &b.to_string()]);
            let Some((loss, grads)) = model.train_batch(&x, &labels, cfg, batch_seed)? else {
                skipped += 1;
                continue;
            };
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: b });
            }
            let grads: Vec<&Tensor> = grads.iter().collect();
            optimizer_step(model.params_mut(), &grads, &mut opt, &opt_cfg)?;
            losses.push(loss);
        }
        if losses.is_empty() {
            return Err(Error::InvalidInput(format!("epoch {epoch}: every batch was skipped")));
        }
        let train_loss = mean(&losses);
        log.push(EpochLog {
            epoch,
            split: "train".into(),
            loss: train_loss,
            lr,
        });
        wall_ms.push(start.elapsed().as_millis() as u64);

        let val_loss = model.val_loss(val, &val_order, cfg)?;
        log.push(EpochLog {
            epoch,
            split: "val".into(),
            loss: val_loss,
            lr,
        });
        wall_ms.push(start.elapsed().as_millis() as u64);
        sched = plateau_step(sched, val_loss);
    }

    let backbone = model.backbone;
    Ok(TrainOutput {
        checkpoint: ModelCheckpoint {
            stage: Stage::Backbone,
            backbone_spec: spec.clone(),
            backbone_sha256: backbone_hash(&backbone),
            backbone,
            head: None,
            config: cfg.clone(),
            optimizer: Some(OptimizerRecord {
                config: cfg.optimizer.clone(),
                state: opt,
            }),
            scheduler: Some(sched),
            log,
        },
        wall_ms,
        skipped_batches: skipped,
    })
}

/// Stage 2: train a classifier head on embeddings of the frozen backbone.
pub fn train_stage2(
    checkpoint: &ModelCheckpoint,
    train: &Dataset,
    val: &Dataset,
    head_spec: &ClassifierHeadSpec,
    cfg: &StageConfig,
) -> Result<TrainOutput> {
    cfg.validate()?;
    if cfg.stage != Stage::Classifier {
        return Err(Error::config("stage", "stage 2 needs stage = classifier"));
    }
    if train.is_empty() || val.is_empty() {
        return Err(Error::InvalidInput("stage 2 needs non-empty train and validation sets".into()));
    }
    let backbone = &checkpoint.backbone;
    let hash = backbone_hash(backbone);
    if hash != checkpoint.backbone_sha256 {
        return Err(Error::Checkpoint("backbone does not match its recorded hash".into()));
    }
    let seed = cfg.seed;
    let d = checkpoint.backbone_spec.embedding_dim;
    let train_z = embed(backbone, train)?;
    let val_z = embed(backbone, val)?;
    let train_y = train.labels();
    let val_y = val.labels();

    let mut head = Model::build(&[d], &head_spec.layers(d), derive_seed(seed, &["head-init"]))?;
    let mut opt = OptimizerState::new(prefixed("head", head.param_names()), &head.params());
    let mut sched = SchedulerState::new(cfg.optimizer.lr, cfg.scheduler.factor, cfg.scheduler.patience)?;

    let start = Instant::now();
    let mut log = Vec::new();
    let mut wall_ms = Vec::new();
    for epoch in 1..=cfg.epochs {
        let lr = sched.current_lr;
        let opt_cfg = OptimConfig { lr, ..cfg.optimizer.clone() };
        let order = shuffled(train.len(), seed, &["stage2-shuffle", &epoch.to_string()]);
        let mut losses = Vec::new();
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let x = gather_rows(&train_z, chunk);
            let labels: Vec<u8> = chunk.iter().map(|&i| train_y[i]).collect();
            let mut rng = rng_for(seed, &["stage2-batch", &epoch.to_string(), &b.to_string()]);
            let (logits, caches) = head.forward(&x, Mode::Train, &mut rng)?;
            let res = bce_logits_loss(&logits, &labels)?;
            if !res.loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: b });
            }
            let (_, grads) = head.backward(&caches, &res.grad)?;
            let grads: Vec<&Tensor> = grads.iter().flatten().collect();
            optimizer_step(head.params_mut(), &grads, &mut opt, &opt_cfg)?;
            losses.push(res.loss);
        }
        log.push(EpochLog {
            epoch,
            split: "train".into(),
            loss: mean(&losses),
            lr,
        });
        wall_ms.push(start.elapsed().as_millis() as u64);

        let val_loss = bce_logits_loss(&head.predict(&val_z)?, &val_y)?.loss;
        log.push(EpochLog {
            epoch,
            split: "val".into(),
            loss: val_loss,
            lr,
        });
        wall_ms.push(start.elapsed().as_millis() as u64);
        sched = plateau_step(sched, val_loss);
    }

    Ok(TrainOutput {
        checkpoint: ModelCheckpoint {
            stage: Stage::Classifier,
            backbone_spec: checkpoint.backbone_spec.clone(),
            backbone: backbone.clone(),
            backbone_sha256: hash,
            head: Some((head_spec.clone(), head)),
            config: cfg.clone(),
            optimizer: Some(OptimizerRecord {
                config: cfg.optimizer.clone(),
                state: opt,
            }),
            scheduler: Some(sched),
            log,
        },
        wall_ms,
        skipped_batches: 0,
    })
}

/// Probability of "real" for every sample: sigmoid of the head logit, eval
/// mode, no augmentation.
pub fn evaluate(checkpoint: &ModelCheckpoint, data: &Dataset) -> Result<Vec<Prediction>> {
    let (_, head) = checkpoint
        .head
        .as_ref()
        .ok_or_else(|| Error::InvalidInput("checkpoint has no classifier head".into()))?;
    let z = embed(&checkpoint.backbone, data)?;
    let logits = head.predict(&z)?;
    Ok(data
        .samples
        .iter()
        .zip(logits.data())
        .map(|(s, &l)| Prediction {
            id: s.id.clone(),
            label: s.label,
            prob: sigmoid(l as f64),
        })
        .collect())
}
