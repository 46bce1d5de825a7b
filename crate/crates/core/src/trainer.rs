//! Joint training of the phrase and box objectives.
//!
//! One *step* is one micro-batch. Gradients are summed over
//! `accumulation_steps` micro-batches and averaged before each AdamW update,
//! so an accumulated update equals one update on the concatenated batch.
//! The learning rate warms up linearly to its peak and then decays linearly
//! to zero at `total_steps`.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use candle_core::{Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::box_math::{box_loss_weighted, mean_iou, BoxLossWeights};
use crate::checkpoint::{restore, save_snapshot, snapshot, Snapshot};
use crate::domain::{BoundingBox, GroundingSample, Prediction};
use crate::error::{Error, Result};
use crate::grounding::{box_from_raw, raw_gradient, raw_to_array};
use crate::image::GrayImage;
use crate::model::{EncodedSample, GroundingModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub accumulation_steps: usize,
    pub micro_batch_size: usize,
    pub seed: u64,
    pub lambda_phrase: f64,
    pub lambda_l1: f64,
    pub lambda_giou: f64,
    pub smooth_l1_beta: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Validation interval in steps.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 5e-5,
            warmup_steps: 100,
            total_steps: 500,
            accumulation_steps: 10,
            micro_batch_size: 2,
            seed: 0,
            lambda_phrase: 1.0,
            lambda_l1: 1.0,
            lambda_giou: 1.0,
            smooth_l1_beta: 1.0,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            eval_every: 50,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.lr > 0.0) {
            return bad("lr must be positive");
        }
        if self.accumulation_steps == 0 || self.micro_batch_size == 0 || self.eval_every == 0 {
            return bad("accumulation_steps, micro_batch_size and eval_every must be positive");
        }
        if self.warmup_steps > self.total_steps {
            return bad("warmup_steps exceeds total_steps");
        }
        for (name, v) in [
            ("lambda_phrase", self.lambda_phrase),
            ("lambda_l1", self.lambda_l1),
            ("lambda_giou", self.lambda_giou),
            ("weight_decay", self.weight_decay),
        ] {
            if !(v >= 0.0) {
                return Err(Error::Config(format!("{name} must be non-negative")));
            }
        }
        if !(self.smooth_l1_beta > 0.0) {
            return bad("smooth_l1_beta must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0, 1)");
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn box_weights(&self) -> BoxLossWeights {
        BoxLossWeights {
            l1: self.lambda_l1,
            giou: self.lambda_giou,
            beta: self.smooth_l1_beta,
        }
    }
}

/// Learning rate after `step` completed steps.
pub fn lr_at(step: usize, config: &TrainConfig) -> Result<f64> {
    let (warm, total) = (config.warmup_steps, config.total_steps);
    if step > total {
        return Err(Error::Config(format!("step {step} is past total_steps {total}")));
    }
    if step < warm {
        return Ok(config.lr * step as f64 / warm as f64);
    }
    if total == warm {
        return Ok(config.lr);
    }
    Ok(config.lr * (total - step) as f64 / (total - warm) as f64)
}

/// AdamW with decoupled weight decay. Decay applies to matrices only, not to
/// biases or norm gains.
pub struct AdamW {
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    t: i32,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl AdamW {
    pub fn new(config: &TrainConfig) -> Self {
        AdamW {
            beta1: config.beta1,
            beta2: config.beta2,
            eps: config.eps,
            weight_decay: config.weight_decay,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn updates(&self) -> i32 {
        self.t
    }

    pub fn step(&mut self, vars: &[(String, Var)], grads: &BTreeMap<String, Tensor>, lr: f64) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for (name, var) in vars {
            let Some(g) = grads.get(name) else { continue };
            let m = match self.m.get(name) {
                Some(m) => ((m * self.beta1)? + (g * (1.0 - self.beta1))?)?,
                None => (g * (1.0 - self.beta1))?,
            };
            let v = match self.v.get(name) {
                Some(v) => ((v * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?,
                None => (g.sqr()? * (1.0 - self.beta2))?,
            };
            let m_hat = (&m / bc1)?;
            let v_hat = (&v / bc2)?;
            let update = m_hat.div(&(v_hat.sqrt()? + self.eps)?)?;
            let theta = var.as_tensor();
            let mut next = (theta - (update * lr)?)?;
            if self.weight_decay > 0.0 && theta.rank() >= 2 {
                next = (next - (theta * (lr * self.weight_decay))?)?;
            }
            var.set(&next.detach())?;
            self.m.insert(name.clone(), m.detach());
            self.v.insert(name.clone(), v.detach());
        }
        Ok(())
    }
}

/// Losses of one step, each the mean over the micro-batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub l_p: f64,
    pub l_l1: f64,
    pub l_giou: f64,
    /// `lambda_p l_p + lambda_l1 l_l1 + lambda_giou l_giou`
    pub l_all: f64,
}

impl StepLosses {
    pub fn l_b(&self) -> f64 {
        self.l_l1 + self.l_giou
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: usize,
    #[serde(rename = "L_p")]
    pub l_p: f64,
    #[serde(rename = "L_l1")]
    pub l_l1: f64,
    #[serde(rename = "L_giou")]
    pub l_giou: f64,
    #[serde(rename = "L_all")]
    pub l_all: f64,
    pub lr: f64,
}

/// Mutable training loop state around a model.
pub struct Trainer<'a> {
    model: &'a GroundingModel,
    config: TrainConfig,
    vars: Vec<(String, Var)>,
    optimizer: AdamW,
    accumulated: BTreeMap<String, Tensor>,
    pending: usize,
    step: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(model: &'a GroundingModel, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        Ok(Trainer {
            model,
            vars: model.vars(),
            optimizer: AdamW::new(&config),
            config,
            accumulated: BTreeMap::new(),
            pending: 0,
            step: 0,
        })
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn optimizer_updates(&self) -> i32 {
        self.optimizer.updates()
    }

    /// Forward and backward over one micro-batch. Returns the losses and the
    /// raw gradients of the micro-batch objective, without touching the
    /// accumulator.
    pub fn compute_gradients(&self, batch: &[&EncodedSample]) -> Result<(StepLosses, BTreeMap<String, Tensor>)> {
        if batch.is_empty() {
            return Err(Error::Empty("train_step batch"));
        }
        let cfg = &self.config;
        let weights = cfg.box_weights();
        let n = batch.len() as f64;
        let (mut l_p, mut l_l1, mut l_giou) = (0.0, 0.0, 0.0);
        let mut objective: Option<Tensor> = None;
        for sample in batch {
            let pass = self.model.training_pass(sample)?;
            let lp = pass.phrase_loss.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
            if !lp.is_finite() {
                return Err(Error::NonFinite { term: "L_p", step: self.step });
            }
            let raw = raw_to_array(&pass.raw_box)?;
            if raw.iter().any(|r| !r.is_finite()) {
                return Err(Error::NonFinite { term: "L_b", step: self.step });
            }
            let pred = box_from_raw(&raw)?;
            let bl = box_loss_weighted(&pred, &sample.target, weights)?;
            let g_raw = raw_gradient(&raw, &bl.gradient);
            let g = Tensor::new(&g_raw, pass.raw_box.device())?.to_dtype(pass.raw_box.dtype())?;
            // Its gradient with respect to the raw box is exactly g_raw.
            let box_surrogate = pass.raw_box.mul(&g)?.sum_all()?;
            l_p += lp;
            l_l1 += bl.l1_term;
            l_giou += bl.giou_term;
            let term = ((&pass.phrase_loss * cfg.lambda_phrase)? + box_surrogate)?;
            objective = Some(match objective {
                Some(o) => (o + term)?,
                None => term,
            });
        }
        let (l_p, l_l1, l_giou) = (l_p / n, l_l1 / n, l_giou / n);
        let losses = StepLosses {
            l_p,
            l_l1,
            l_giou,
            l_all: cfg.lambda_phrase * l_p + cfg.lambda_l1 * l_l1 + cfg.lambda_giou * l_giou,
        };
        for (term, v) in [("L_p", losses.l_p), ("L_l1", losses.l_l1), ("L_giou", losses.l_giou)] {
            if !v.is_finite() {
                return Err(Error::NonFinite { term, step: self.step });
            }
        }
        let objective = (objective.expect("nonempty batch") / n)?;
        let grads = objective.backward()?;
        let mut out = BTreeMap::new();
        for (name, var) in &self.vars {
            if let Some(g) = grads.get(var.as_tensor()) {
                out.insert(name.clone(), g.detach());
            }
        }
        Ok((losses, out))
    }

    /// One micro-batch: accumulate gradients, update on accumulation
    /// boundaries.
    pub fn train_step(&mut self, batch: &[&EncodedSample]) -> Result<StepLosses> {
        if self.step >= self.config.total_steps {
            return Err(Error::Config(format!("all {} steps already taken", self.config.total_steps)));
        }
        let (losses, grads) = self.compute_gradients(batch)?;
        for (name, g) in grads {
            let sum = match self.accumulated.remove(&name) {
                Some(acc) => (acc + g)?,
                None => g,
            };
            self.accumulated.insert(name, sum);
        }
        self.pending += 1;
        self.step += 1;
        if self.pending == self.config.accumulation_steps || self.step == self.config.total_steps {
            self.apply_update()?;
        }
        Ok(losses)
    }

    fn apply_update(&mut self) -> Result<()> {
        let lr = lr_at(self.step, &self.config)?;
        let scale = 1.0 / self.pending as f64;
        let averaged = std::mem::take(&mut self.accumulated)
            .into_iter()
            .map(|(k, g)| Ok((k, (g * scale)?)))
            .collect::<Result<BTreeMap<_, _>>>()?;
        self.optimizer.step(&self.vars, &averaged, lr)?;
        self.pending = 0;
        Ok(())
    }
}

/// Where `fit` writes its artifacts. All optional.
#[derive(Debug, Clone, Default)]
pub struct FitOutputs {
    pub checkpoint: Option<PathBuf>,
    pub log: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub step: usize,
    /// Best validation mIoU seen at an evaluation point.
    pub best_val_miou: Option<f64>,
    pub best_step: usize,
    pub best_checkpoint: Option<PathBuf>,
    pub history: Vec<LogEntry>,
    /// `(step, validation mIoU)` at every evaluation.
    pub evaluations: Vec<(usize, f64)>,
}

struct BatchOrder {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
}

impl BatchOrder {
    fn new(n: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        BatchOrder { rng, order, cursor: 0 }
    }

    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        (0..size)
            .map(|_| {
                if self.cursor == self.order.len() {
                    self.order.shuffle(&mut self.rng);
                    self.cursor = 0;
                }
                self.cursor += 1;
                self.order[self.cursor - 1]
            })
            .collect()
    }
}

fn open_log(path: &Path) -> Result<BufWriter<File>> {
    let file = OpenOptions::new()
        .create(true)
        .write(true)
        .truncate(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    Ok(BufWriter::new(file))
}

/// Trains for `config.total_steps` steps. Every `eval_every` steps (and at
/// step 0 and the last step) validation mIoU is measured with the full
/// predict path; the best snapshot is kept, ties keeping the earlier one.
/// On return the model holds the best parameters. With an empty
/// validation set the final parameters are kept.
pub fn fit(
    model: &GroundingModel,
    train: &[EncodedSample],
    val: &[EncodedSample],
    config: &TrainConfig,
    outputs: &FitOutputs,
) -> Result<TrainState> {
    config.validate()?;
    if train.is_empty() && config.total_steps > 0 {
        return Err(Error::Empty("fit training set"));
    }
    let mut trainer = Trainer::new(model, config.clone())?;
    let mut order = BatchOrder::new(train.len(), config.seed);
    let mut log = outputs.log.as_deref().map(open_log).transpose()?;
    let mut state = TrainState {
        step: 0,
        best_val_miou: None,
        best_step: 0,
        best_checkpoint: outputs.checkpoint.clone(),
        history: Vec::with_capacity(config.total_steps),
        evaluations: Vec::new(),
    };
    let mut best: Option<Snapshot> = None;

    let mut consider = |state: &mut TrainState, step: usize| -> Result<()> {
        if val.is_empty() {
            return Ok(());
        }
        let miou = validation_miou(model, val)?;
        state.evaluations.push((step, miou));
        if state.best_val_miou.is_none_or(|b| miou > b) {
            state.best_val_miou = Some(miou);
            state.best_step = step;
            best = Some(snapshot(model)?);
        }
        Ok(())
    };

    consider(&mut state, 0)?;
    for _ in 0..config.total_steps {
        let idx = order.next_batch(config.micro_batch_size);
        let batch: Vec<&EncodedSample> = idx.iter().map(|&i| &train[i]).collect();
        let losses = trainer.train_step(&batch)?;
        let step = trainer.step();
        let entry = LogEntry {
            step,
            l_p: losses.l_p,
            l_l1: losses.l_l1,
            l_giou: losses.l_giou,
            l_all: losses.l_all,
            lr: lr_at(step, config)?,
        };
        if let Some(w) = log.as_mut() {
            let line = serde_json::to_string(&entry).expect("log entry serializes");
            let path = outputs.log.as_deref().unwrap();
            writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
        }
        state.history.push(entry);
        state.step = step;
        if step % config.eval_every == 0 || step == config.total_steps {
            consider(&mut state, step)?;
        }
    }
    if let (Some(w), Some(path)) = (log.as_mut(), outputs.log.as_deref()) {
        w.flush().map_err(|e| Error::io(path, e))?;
    }
    if let Some(snap) = &best {
        restore(model, snap)?;
    }
    if let Some(path) = &outputs.checkpoint {
        let snap = match best {
            Some(s) => s,
            None => snapshot(model)?,
        };
        save_snapshot(model.config(), model.vocab(), &snap, path)?;
    }
    Ok(state)
}

pub fn predict(model: &GroundingModel, samples: &[EncodedSample]) -> Result<Vec<Prediction>> {
    samples.iter().map(|s| model.predict(s)).collect()
}

pub fn validation_miou(model: &GroundingModel, samples: &[EncodedSample]) -> Result<f64> {
    let preds = predict(model, samples)?;
    let pairs: Vec<(Option<BoundingBox>, BoundingBox)> =
        preds.iter().zip(samples).map(|(p, s)| (p.bbox, s.target)).collect();
    mean_iou(&pairs)
}

/// Reads each sample's image (relative paths resolve against `base_dir`)
/// and tokenizes its text with the model vocabulary.
pub fn encode_samples(model: &GroundingModel, samples: &[GroundingSample], base_dir: &Path) -> Result<Vec<EncodedSample>> {
    samples
        .iter()
        .map(|s| {
            let path = base_dir.join(&s.image);
            let image = GrayImage::read_pgm(&path)?;
            if image.width != s.width as usize || image.height != s.height as usize {
                return Err(Error::validation(&s.id, format!(
                    "image is {}x{} but the record says {}x{}",
                    image.width, image.height, s.width, s.height
                )));
            }
            Ok(model.encode(&s.id, image, &s.report, &s.phrase, s.normalized_box()?))
        })
        .collect()
}
