//! Cloze-task training with Adam, checkpoint/resume and synthetic data.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{grad, Var};
use crate::data::{cloze_batches, ClozeConfig, EvalCase, ItemSequence, Vocabulary};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, EvalResult};
use crate::model::checkpoint::Checkpoint;
use crate::model::{Mode, Model, TokenBatch, PAD};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Rescale the global gradient norm down to this value when exceeded.
    pub max_grad_norm: Option<f64>,
    pub mask_prob: f64,
    /// Validate every this many epochs; 0 disables validation.
    pub eval_every: usize,
    pub eval_k: usize,
    pub eval_batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 128,
            learning_rate: 1e-3,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            max_grad_norm: None,
            mask_prob: 0.1,
            eval_every: 1,
            eval_k: 10,
            eval_batch_size: 256,
        }
    }
}

impl TrainConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.epochs == 0 {
            v.push("epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            v.push("batch_size must be at least 1".into());
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            v.push(format!("learning_rate ({}) must be finite and non-negative", self.learning_rate));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                v.push(format!("{name} ({b}) must lie in [0, 1)"));
            }
        }
        if !(self.adam_eps > 0.0) {
            v.push("adam_eps must be positive".into());
        }
        if let Some(n) = self.max_grad_norm {
            if !(n > 0.0) {
                v.push("max_grad_norm must be positive".into());
            }
        }
        if !(self.mask_prob > 0.0 && self.mask_prob < 1.0) {
            v.push(format!("mask_prob ({}) must lie in (0, 1)", self.mask_prob));
        }
        if self.eval_k == 0 {
            v.push("eval_k must be positive".into());
        }
        if self.eval_batch_size == 0 {
            v.push("eval_batch_size must be positive".into());
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v))
        }
    }
}

/// Mean negative log-likelihood of the labelled positions. `logits` is
/// `[B, N, V]` (or `[B·N, V]`); `labels` is `B·N` long with 0 meaning "no
/// target".
pub fn cloze_loss(logits: &Var<f32>, labels: &[usize]) -> Result<Var<f32>> {
    let v = *logits.shape().last().ok_or_else(|| Error::Input("scalar logits".into()))?;
    let rows = logits.value().numel() / v.max(1);
    let flat = logits.reshape(&[rows, v])?;
    let labels: Vec<Option<usize>> = labels.iter().map(|&l| (l != PAD).then_some(l)).collect();
    flat.masked_cross_entropy(&labels)
}

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
}

impl Adam {
    pub fn new(shapes: &[Tensor<f32>], beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            step: 0,
            m: shapes.iter().map(|t| Tensor::zeros(t.shape())).collect(),
            v: shapes.iter().map(|t| Tensor::zeros(t.shape())).collect(),
        }
    }

    pub fn update(&mut self, params: &mut [(String, Tensor<f32>)], grads: &[Tensor<f32>], lr: f64) {
        self.step += 1;
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let c1 = 1.0 - self.beta1.powf(self.step as f64);
        let c2 = 1.0 - self.beta2.powf(self.step as f64);
        let step_size = (lr / c1) as f32;
        let c2_sqrt = c2.sqrt() as f32;
        let eps = self.eps as f32;
        for (((_, p), g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            let (p, m, v) = (p.data_mut(), m.data_mut(), v.data_mut());
            for i in 0..p.len() {
                let gi = g.data()[i];
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                p[i] -= step_size * m[i] / (v[i].sqrt() / c2_sqrt + eps);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub steps: u64,
    pub wall_seconds: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub metrics: Option<EvalResult>,
}

/// Model plus optimizer state; everything needed to resume bit-exactly.
pub struct Trainer {
    pub model: Model<f32>,
    pub config: TrainConfig,
    pub adam: Adam,
    /// Completed epochs.
    pub epoch: usize,
    pub log: Vec<EpochRecord>,
    pub best: Option<(f64, Model<f32>)>,
}

impl Trainer {
    pub fn new(model: Model<f32>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let tensors: Vec<Tensor<f32>> = model.params().iter().map(|(_, t)| t.clone()).collect();
        let adam = Adam::new(&tensors, config.beta1, config.beta2, config.adam_eps);
        Ok(Self {
            model,
            config,
            adam,
            epoch: 0,
            log: Vec::new(),
            best: None,
        })
    }

    fn cloze(&self) -> ClozeConfig {
        ClozeConfig {
            max_len: self.model.config.max_len,
            mask_prob: self.config.mask_prob,
            batch_size: self.config.batch_size,
            seed: self.config.seed,
        }
    }

    /// One pass over `train`. On a non-finite loss or gradient the step is
    /// not applied and the model keeps its last good parameters.
    pub fn train_epoch(&mut self, train: &[Vec<usize>]) -> Result<f64> {
        let epoch = self.epoch as u64;
        let mask = self.model.config.mask_token();
        let batches = cloze_batches(train, mask, &self.cloze(), epoch)?;
        if batches.is_empty() {
            return Err(Error::Data("no training sequences".into()));
        }
        let mut dropout_rng = ChaCha8Rng::seed_from_u64(self.config.seed.wrapping_add(0x5EED) ^ epoch.rotate_left(32));
        let mut total = 0.0;
        for b in &batches {
            let vars = self.model.bind(true);
            let batch = TokenBatch {
                tokens: &b.tokens,
                valid: &b.valid,
                rows: b.rows,
                len: b.len,
            };
            let positions = b.positions();
            let logits = self.model.forward_at(&vars, &batch, &positions, Mode::Train(&mut dropout_rng))?;
            let targets: Vec<Option<usize>> = b.targets().into_iter().map(Some).collect();
            let loss = logits.masked_cross_entropy(&targets)?;
            let value = loss.value().item()? as f64;
            if !value.is_finite() {
                return Err(Error::NonFinite(format!(
                    "loss {value} at epoch {} step {}",
                    self.epoch + 1,
                    self.adam.step + 1
                )));
            }
            let mut grads = grad(&loss, &vars)?;
            if let Some((i, _)) = grads.iter().enumerate().find(|(_, g)| !g.all_finite()) {
                return Err(Error::NonFinite(format!(
                    "gradient of {} at epoch {} step {}",
                    self.model.params()[i].0,
                    self.epoch + 1,
                    self.adam.step + 1
                )));
            }
            if let Some(max) = self.config.max_grad_norm {
                clip_global_norm(&mut grads, max);
            }
            let lr = self.config.learning_rate;
            self.adam.update(self.model.params_mut(), &grads, lr);
            total += value;
        }
        self.epoch += 1;
        Ok(total / batches.len() as f64)
    }

    /// Runs the remaining epochs, validating every `eval_every` epochs and
    /// keeping the best model by validation NDCG. `on_epoch` sees each
    /// record as it is produced.
    pub fn fit(
        &mut self,
        train: &[Vec<usize>],
        valid: &[EvalCase],
        mut on_epoch: impl FnMut(&EpochRecord, &Trainer) -> Result<()>,
    ) -> Result<()> {
        while self.epoch < self.config.epochs {
            let start = Instant::now();
            let loss = self.train_epoch(train)?;
            let wall_seconds = start.elapsed().as_secs_f64();
            let metrics = if self.config.eval_every > 0 && !valid.is_empty() && self.epoch.is_multiple_of(self.config.eval_every) {
                let r = evaluate(&self.model, valid, self.config.eval_k, self.config.eval_batch_size)?;
                if self.best.as_ref().is_none_or(|(b, _)| r.ndcg > *b) {
                    self.best = Some((r.ndcg, self.model.clone()));
                }
                Some(r)
            } else {
                None
            };
            let record = EpochRecord {
                epoch: self.epoch,
                loss,
                steps: self.adam.step,
                wall_seconds,
                metrics,
            };
            log::info!("epoch {} loss {:.5}", record.epoch, record.loss);
            self.log.push(record.clone());
            on_epoch(&record, self)?;
        }
        Ok(())
    }

    /// Model parameters, Adam moments and progress counters.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::from_model(
            &self.model,
            serde_json::json!({
                "epoch": self.epoch,
                "adam_step": self.adam.step,
                "train": self.config,
            }),
        );
        for (i, (name, _)) in self.model.params().iter().enumerate() {
            ck.tensors.push((format!("adam.m.{name}"), self.adam.m[i].clone()));
            ck.tensors.push((format!("adam.v.{name}"), self.adam.v[i].clone()));
        }
        ck
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.checkpoint().save(path)
    }

    /// Restores a trainer written by [`checkpoint`](Self::checkpoint).
    /// `config` replaces the stored training config (to extend `epochs`,
    /// say); the optimizer state and counters come from the file.
    pub fn resume(ck: &Checkpoint, config: TrainConfig) -> Result<Self> {
        let model = ck.model()?;
        let mut t = Trainer::new(model, config)?;
        let meta = &ck.metadata;
        let field = |k: &str| {
            meta.get(k)
                .and_then(|v| v.as_u64())
                .ok_or_else(|| Error::Checkpoint(format!("metadata lacks `{k}`")))
        };
        t.epoch = field("epoch")? as usize;
        t.adam.step = field("adam_step")?;
        for (i, (name, _)) in ck.config.param_shapes().iter().enumerate() {
            let get = |prefix: &str| {
                ck.tensor(&format!("{prefix}.{name}"))
                    .cloned()
                    .ok_or_else(|| Error::Checkpoint(format!("missing {prefix}.{name}")))
            };
            t.adam.m[i] = get("adam.m")?;
            t.adam.v[i] = get("adam.v")?;
        }
        Ok(t)
    }
}

pub fn clip_global_norm(grads: &mut [Tensor<f32>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|&x| (x as f64) * (x as f64))
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = (max_norm / norm) as f32;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

/// Generators for pattern datasets whose optimal predictor is known.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Synthetic {
    /// Each user walks `1, 2, …, catalog, 1, …` from a uniformly random
    /// start for `length` steps.
    Cyclic { users: usize, catalog: usize, length: usize },
    /// Each item has `fanout` successors: a dominant one taken with
    /// probability `p` and the others sharing `1 − p` uniformly. Starts
    /// are uniform.
    Markov {
        users: usize,
        catalog: usize,
        length: usize,
        fanout: usize,
        p: f64,
    },
}

/// Row-stochastic sparse transitions over items `1..=catalog`.
#[derive(Clone, Debug, PartialEq)]
pub struct Transitions {
    /// `rows[i - 1]` lists `(successor, probability)` for item `i`.
    pub rows: Vec<Vec<(usize, f64)>>,
}

impl Transitions {
    /// Hit rate at `k` of the predictor that ranks successors by their true
    /// probability, averaged over `states` (the items predictions are made
    /// from).
    pub fn bayes_hr_at_k(&self, states: &[usize], k: usize) -> f64 {
        let mass: f64 = states
            .iter()
            .map(|&s| {
                let mut p: Vec<f64> = self.rows[s - 1].iter().map(|x| x.1).collect();
                p.sort_by(|a, b| b.total_cmp(a));
                p.iter().take(k).sum::<f64>()
            })
            .sum();
        mass / states.len().max(1) as f64
    }

    fn sample(&self, from: usize, rng: &mut impl Rng) -> usize {
        let mut u: f64 = rng.gen();
        let row = &self.rows[from - 1];
        for &(to, p) in row {
            if u < p {
                return to;
            }
            u -= p;
        }
        row.last().expect("non-empty row").0
    }
}

impl Synthetic {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        let (users, catalog, length) = match *self {
            Synthetic::Cyclic { users, catalog, length } => (users, catalog, length),
            Synthetic::Markov { users, catalog, length, fanout, p } => {
                if fanout == 0 || fanout > catalog {
                    v.push(format!("fanout ({fanout}) must lie in 1..={catalog}"));
                }
                if !(0.0..=1.0).contains(&p) {
                    v.push(format!("p ({p}) must lie in [0, 1]"));
                }
                (users, catalog, length)
            }
        };
        if users == 0 {
            v.push("users must be positive".into());
        }
        if catalog < 2 {
            v.push("catalog must be at least 2".into());
        }
        if length < 3 {
            v.push("length must be at least 3".into());
        }
        v
    }

    /// Sequences over tokens `1..=catalog` (raw id `i` is token `i`), plus
    /// the transition matrix for Markov data.
    pub fn generate(&self, seed: u64) -> Result<(Vec<ItemSequence>, Vocabulary, Option<Transitions>)> {
        let v = self.violations();
        if !v.is_empty() {
            return Err(Error::Config(v));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (seqs, catalog, trans) = match *self {
            Synthetic::Cyclic { users, catalog, length } => {
                let seqs = (0..users)
                    .map(|_| {
                        let off = rng.gen_range(0..catalog);
                        (0..length).map(|t| (off + t) % catalog + 1).collect()
                    })
                    .collect::<Vec<Vec<usize>>>();
                (seqs, catalog, None)
            }
            Synthetic::Markov { users, catalog, length, fanout, p } => {
                let items: Vec<usize> = (1..=catalog).collect();
                let rows = (1..=catalog)
                    .map(|_| {
                        let succ: Vec<usize> = items.choose_multiple(&mut rng, fanout).copied().collect();
                        let rest = if fanout > 1 { (1.0 - p) / (fanout - 1) as f64 } else { 0.0 };
                        let head = if fanout > 1 { p } else { 1.0 };
                        succ.iter()
                            .enumerate()
                            .map(|(j, &s)| (s, if j == 0 { head } else { rest }))
                            .collect()
                    })
                    .collect();
                let t = Transitions { rows };
                let seqs = (0..users)
                    .map(|_| {
                        let mut cur = rng.gen_range(1..=catalog);
                        let mut s = vec![cur];
                        for _ in 1..length {
                            cur = t.sample(cur, &mut rng);
                            s.push(cur);
                        }
                        s
                    })
                    .collect();
                (seqs, catalog, Some(t))
            }
        };
        let mut vocab = Vocabulary::default();
        for i in 1..=catalog {
            vocab.insert(&i.to_string());
        }
        let seqs = seqs
            .into_iter()
            .enumerate()
            .map(|(u, items)| ItemSequence { user: u.to_string(), items })
            .collect();
        Ok((seqs, vocab, trans))
    }
}
