use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use candle_core::backprop::GradStore;
use candle_core::{DType, Device, Tensor};
use candle_nn::optim::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{self, CheckpointMeta};
use crate::config::Config;
use crate::data::{augment, derive_seed, normalize, AugmentationPolicy, Normalization, Sample};
use crate::error::{Error, Result};
use crate::losses::total_loss;
use crate::metrics::{self, ImageMetrics, MetricReport, BinaryMask};
use crate::network::PBNet;
use crate::nn::{Ctx, ParamStore};

use super::log::{LogEntry, RunLog};
use super::{poly_lr, Schedule};

pub struct Batch {
    /// `(B, 3, H, W)`, standardized.
    pub images: Tensor,
    /// `(B, 1, H, W)` in `{0, 1}`.
    pub masks: Tensor,
    pub ids: Vec<String>,
}

/// Stack samples into a batch; with `seeds`, sample `i` is augmented from a
/// generator seeded by `seeds[i]`.
pub fn make_batch(
    samples: &[&Sample],
    seeds: Option<&[u64]>,
    policy: &AugmentationPolicy,
    norm: &Normalization,
    device: &Device,
) -> Result<Batch> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Data("cannot build an empty batch".into()))?;
    let (c, h, w) = (first.image.channels, first.image.height, first.image.width);
    let mut images = Vec::with_capacity(samples.len() * c * h * w);
    let mut masks = Vec::with_capacity(samples.len() * h * w);
    for (i, s) in samples.iter().enumerate() {
        if (s.image.channels, s.image.height, s.image.width) != (c, h, w) {
            return Err(Error::Shape(format!(
                "sample '{}' is {}x{} but the batch is {h}x{w}",
                s.id, s.image.height, s.image.width
            )));
        }
        let (img, mask) = match seeds {
            Some(seeds) => {
                let mut rng = ChaCha8Rng::seed_from_u64(seeds[i]);
                augment(&s.image, &s.mask, policy, &mut rng)
            }
            None => (s.image.clone(), s.mask.clone()),
        };
        images.extend_from_slice(&normalize(&img, norm)?.data);
        masks.extend(mask.to_f32());
    }
    let b = samples.len();
    Ok(Batch {
        images: Tensor::from_vec(images, (b, c, h, w), device)?,
        masks: Tensor::from_vec(masks, (b, 1, h, w), device)?,
        ids: samples.iter().map(|s| s.id.clone()).collect(),
    })
}

/// Final probability map `(1, 1, H, W)` of one raw sample.
pub fn predict(net: &PBNet, image: &crate::data::ImageBuf, norm: &Normalization) -> Result<Tensor> {
    let x = normalize(image, norm)?.to_tensor(net.device())?.to_dtype(net.dtype())?;
    Ok(net.forward(&Ctx::eval(), &x)?.p0)
}

pub fn evaluate(
    net: &PBNet,
    samples: &[Sample],
    norm: &Normalization,
    fold: usize,
    threshold: f64,
) -> Result<Vec<ImageMetrics>> {
    samples
        .iter()
        .map(|s| {
            let p = predict(net, &s.image, norm)?;
            let pred = BinaryMask::from_tensor(&p, threshold)?;
            metrics::evaluate_masks(&s.id, fold, &pred, &s.mask)
        })
        .collect()
}

/// Copy of every variable's current value.
pub fn snapshot(store: &ParamStore) -> Result<BTreeMap<String, Tensor>> {
    store
        .all()
        .into_iter()
        .map(|(n, v, _)| Ok((n, v.as_tensor().copy()?)))
        .collect()
}

pub fn restore(store: &ParamStore, snap: &BTreeMap<String, Tensor>) -> Result<()> {
    store.load_from(snap, "")?;
    Ok(())
}

pub struct StepResult {
    /// Every loss term plus `total`.
    pub terms: BTreeMap<String, f64>,
    pub grads: GradStore,
}

/// A model and its optimizer.
pub struct Trainer {
    cfg: Config,
    net: PBNet,
    opt: AdamW,
    steps: u64,
}

fn fnv1a(bytes: impl Iterator<Item = u8>) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for b in bytes {
        h = (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn input_hash(batch: &Batch) -> Result<u64> {
    let v = batch.images.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?;
    Ok(fnv1a(v.iter().flat_map(|x| x.to_le_bytes())))
}

impl Trainer {
    pub fn new(cfg: &Config) -> Result<Self> {
        cfg.validate()?;
        let net = PBNet::new(cfg.model.clone(), cfg.train.seed, DType::F32, cfg.train.device()?)?;
        let o = &cfg.train.optimizer;
        let vars = net.store().trainable().into_iter().map(|(_, v)| v).collect();
        let opt = AdamW::new(
            vars,
            ParamsAdamW {
                lr: cfg.train.base_lr,
                beta1: o.beta1,
                beta2: o.beta2,
                eps: o.eps,
                weight_decay: o.weight_decay,
            },
        )?;
        Ok(Self {
            cfg: cfg.clone(),
            net,
            opt,
            steps: 0,
        })
    }

    pub fn net(&self) -> &PBNet {
        &self.net
    }

    pub fn into_net(self) -> PBNet {
        self.net
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Forward, loss, backward and one optimizer update at `lr`.
    pub fn step(&mut self, batch: &Batch, lr: f64) -> Result<StepResult> {
        let ctx = Ctx::train();
        let out = self.net.forward(&ctx, &batch.images)?;
        let diagnose = |what: String| -> Result<Error> {
            Ok(Error::Numeric(format!(
                "{what} at step {} (lr {lr:e}, inputs hash {:016x}, ids {:?})",
                self.steps,
                input_hash(batch)?,
                batch.ids
            )))
        };
        let bundle = match total_loss(&out, &batch.masks, &self.cfg.loss, self.cfg.model.modules.supervision()) {
            Ok(b) => b,
            Err(Error::Numeric(m)) => return Err(diagnose(m)?),
            Err(e) => return Err(e),
        };
        let total = bundle.total_value()?;
        if !total.is_finite() {
            return Err(diagnose(format!("non-finite loss {total}"))?);
        }
        let grads = bundle.total.backward()?;
        self.opt.set_learning_rate(lr);
        self.opt.step(&grads)?;
        self.steps += 1;
        let mut terms = bundle.per_term;
        terms.insert("total".into(), total);
        Ok(StepResult { terms, grads })
    }
}

pub struct FoldOutcome {
    /// Weights after the last step.
    pub net: PBNet,
    /// Weights with the best validation Dice (the last weights without
    /// validation data).
    pub best_weights: BTreeMap<String, Tensor>,
    pub best_epoch: usize,
    pub best_dice: Option<f64>,
    pub log: RunLog,
    pub steps: u64,
}

fn summary_values(rows: Vec<ImageMetrics>) -> Result<BTreeMap<String, f64>> {
    let report: MetricReport = metrics::aggregate(rows)?;
    Ok(report
        .pooled
        .metrics
        .iter()
        .map(|(k, s)| (k.clone(), s.mean))
        .collect())
}

fn meta_for(cfg: &Config, norm: &Normalization, fold: Option<usize>, epoch: usize, step: u64, m: &BTreeMap<String, f64>) -> Result<CheckpointMeta> {
    let mut meta = CheckpointMeta::new(cfg.model.clone());
    meta.config = serde_json::to_value(cfg)?;
    meta.fold = fold;
    meta.epoch = epoch;
    meta.step = step;
    meta.metrics = m.clone();
    meta.normalization = Some(norm.clone());
    Ok(meta)
}

/// Train one model on `train`, validating on `val`. With `out_dir`, writes
/// `runlog.jsonl`, `best.safetensors` and `last.safetensors` there.
pub fn train_fold(
    cfg: &Config,
    train: &[Sample],
    val: &[Sample],
    norm: &Normalization,
    fold: Option<usize>,
    out_dir: Option<&Path>,
) -> Result<FoldOutcome> {
    if train.is_empty() {
        return Err(Error::Data("no training samples".into()));
    }
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tc = &cfg.train;
    let mut trainer = Trainer::new(cfg)?;
    let mut log = match out_dir {
        Some(d) => RunLog::to_file(&d.join("runlog.jsonl"))?,
        None => RunLog::new(),
    };
    let device = trainer.net().device().clone();
    let steps_per_epoch = train.len().div_ceil(tc.batch_size);
    let total_steps = (tc.epochs * steps_per_epoch) as u64;
    let started = Instant::now();
    let mut best_weights = None;
    let mut best_dice: Option<f64> = None;
    let mut best_epoch = 0;
    let mut last_metrics = BTreeMap::new();
    let mut last_epoch = 0;
    'epochs: for epoch in 0..tc.epochs {
        last_epoch = epoch;
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(tc.seed, epoch as u64, u64::MAX)));
        let mut epoch_loss = 0.0;
        let mut epoch_steps = 0;
        let mut stop = false;
        for chunk in order.chunks(tc.batch_size) {
            if tc.max_steps.is_some_and(|m| trainer.steps() >= m) {
                stop = true;
                break;
            }
            let t = match tc.schedule {
                Schedule::PerEpoch => epoch as f64 / tc.epochs as f64,
                Schedule::PerStep => trainer.steps() as f64 / total_steps as f64,
            };
            let lr = poly_lr(t, tc.base_lr, tc.poly_power);
            let samples: Vec<&Sample> = chunk.iter().map(|i| &train[*i]).collect();
            let seeds: Vec<u64> = chunk.iter().map(|i| derive_seed(tc.seed, epoch as u64, *i as u64)).collect();
            let batch = make_batch(&samples, Some(&seeds), &cfg.augment, norm, &device)?;
            let step = trainer.steps();
            let res = match trainer.step(&batch, lr) {
                Ok(r) => r,
                Err(Error::Numeric(msg)) => {
                    log.flush()?;
                    if let Some(dir) = out_dir {
                        let path = dir.join("nan_dump.json");
                        let dump = serde_json::json!({
                            "error": msg, "step": step, "epoch": epoch, "lr": lr, "ids": batch.ids,
                        });
                        std::fs::write(&path, serde_json::to_string_pretty(&dump)?)
                            .map_err(|e| Error::io(&path, e))?;
                    }
                    return Err(Error::Numeric(msg));
                }
                Err(e) => return Err(e),
            };
            epoch_loss += res.terms["total"];
            epoch_steps += 1;
            log.push(LogEntry::Step {
                step,
                epoch,
                lr,
                terms: res.terms,
            })?;
        }
        let is_last = epoch + 1 == tc.epochs || stop;
        let due = tc.eval_every > 0 && (epoch + 1) % tc.eval_every == 0;
        let mut val_values = None;
        if !val.is_empty() && (due || is_last) {
            let values = summary_values(evaluate(trainer.net(), val, norm, fold.unwrap_or(0), cfg.data.threshold)?)?;
            let dice = values["dice"];
            if best_dice.is_none_or(|b| dice > b) {
                best_dice = Some(dice);
                best_epoch = epoch;
                best_weights = Some(snapshot(trainer.net().store())?);
                if let Some(dir) = out_dir {
                    let meta = meta_for(cfg, norm, fold, epoch, trainer.steps(), &values)?;
                    checkpoint::save(trainer.net(), &meta, &dir.join("best.safetensors"))?;
                }
            }
            last_metrics = values.clone();
            val_values = Some(values);
        }
        log.push(LogEntry::Epoch {
            epoch,
            train_loss: if epoch_steps > 0 { epoch_loss / epoch_steps as f64 } else { f64::NAN },
            val: val_values,
            wall_clock_s: started.elapsed().as_secs_f64(),
        })?;
        if stop {
            break 'epochs;
        }
    }
    log.flush()?;
    let steps = trainer.steps();
    let best_weights = match best_weights {
        Some(w) => w,
        None => {
            best_epoch = last_epoch;
            snapshot(trainer.net().store())?
        }
    };
    if let Some(dir) = out_dir {
        let meta = meta_for(cfg, norm, fold, last_epoch, steps, &last_metrics)?;
        checkpoint::save(trainer.net(), &meta, &dir.join("last.safetensors"))?;
        if best_dice.is_none() {
            checkpoint::save(trainer.net(), &meta, &dir.join("best.safetensors"))?;
        }
    }
    Ok(FoldOutcome {
        net: trainer.into_net(),
        best_weights,
        best_epoch,
        best_dice,
        log,
        steps,
    })
}
