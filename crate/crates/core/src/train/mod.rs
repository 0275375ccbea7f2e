//! ADAM training through the unrolled iterations: the unsupervised loop,
//! the semi-supervised phase with a class head, checkpoints and metrics.

mod adam;
mod checkpoint;
mod config;

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;

pub use adam::{Adam, AdamConfig};
pub use checkpoint::{named_params, Checkpoint};
pub use config::{CorruptionKind, TrainConfig, PRESETS};

use crate::autodiff::{Graph, Tensor};
use crate::data::{DatasetBundle, DatasetKind};
use crate::error::{Error, Result};
use crate::eval::{self, EvalOptions};
use crate::ladder::{ClassHead, LadderConfig, TaggerParams};
use crate::model::{ModelConfig, Tagger};
use crate::rng::{self, fork};
use crate::tag::EvalNoise;

/// Added inside the log of class probabilities so an underflowed class
/// cannot produce an infinite cross-entropy.
const CE_FLOOR: f64 = 1e-12;

const SALT_MODEL: u64 = 0;
const SALT_SHUFFLE: u64 = 1;
const SALT_STEP: u64 = 2;
const SALT_VALIDATION: u64 = 3;
const SALT_LABELS: u64 = 4;
const SALT_HEAD: u64 = 5;
const SALT_CALIBRATION: u64 = 6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Unsupervised,
    Supervised,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Unsupervised => "unsupervised",
            Phase::Supervised => "supervised",
        }
    }

    pub fn from_name(s: &str) -> Result<Self> {
        match s {
            "unsupervised" => Ok(Phase::Unsupervised),
            "supervised" => Ok(Phase::Supervised),
            _ => Err(Error::Data(format!("unknown phase {s:?}"))),
        }
    }
}

/// One row of the metrics file.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: Phase,
    /// Optimizer steps taken so far.
    pub steps: u64,
    /// Mean training objective `Σ_i C_i / T` over the epoch's steps.
    pub train_cost: f64,
    /// Mean class cross-entropy over steps with labeled examples.
    pub train_ce: Option<f64>,
    /// Validation `C_i` for each evaluation iteration.
    pub val_costs: Vec<f64>,
}

impl EpochRecord {
    pub fn tsv_header(eval_iterations: usize) -> String {
        let mut s = String::from("epoch\tphase\tsteps\ttrain_cost\ttrain_class_ce");
        for i in 1..=eval_iterations {
            let _ = write!(s, "\tval_cost_{i}");
        }
        s.push('\n');
        s
    }

    pub fn tsv_row(&self) -> String {
        let mut s = format!(
            "{}\t{}\t{}\t{:.9}\t{}",
            self.epoch,
            self.phase.name(),
            self.steps,
            self.train_cost,
            self.train_ce.map_or("-".to_string(), |c| format!("{c:.9}"))
        );
        for c in &self.val_costs {
            let _ = write!(s, "\t{c:.9}");
        }
        s.push('\n');
        s
    }
}

/// Loss terms of one step.
#[derive(Clone, Copy, Debug)]
pub struct StepStats {
    pub cost: f64,
    pub ce: Option<f64>,
}

/// Model, optimizer and schedule position.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: TrainConfig,
    pub model: Tagger,
    pub adam: Adam,
    /// Epochs completed across both phases.
    pub epoch: usize,
    pub phase: Phase,
    pub dataset: DatasetKind,
}

impl Trainer {
    pub fn new(config: TrainConfig, dataset: DatasetKind, input_size: usize) -> Result<Self> {
        config.validate()?;
        let model_config = ModelConfig {
            input_size,
            corruption: config.corruption_for(dataset)?,
            ladder: LadderConfig {
                layers: config.layers.clone(),
                norm: config.norm,
                classes: 0,
            },
            data_mean: dataset.data_mean(),
            groups: config.groups,
            iterations: config.iterations,
        };
        let model = Tagger::new(model_config, &mut rng::seeded(fork(config.seed, SALT_MODEL)))?;
        let adam = Adam::new(&model.params);
        Ok(Trainer {
            config,
            model,
            adam,
            epoch: 0,
            phase: Phase::Unsupervised,
            dataset,
        })
    }

    /// Continues from `ckpt` under `config`, which must agree with the
    /// checkpoint's architecture and training K/T.
    pub fn resume(config: TrainConfig, ckpt: Checkpoint) -> Result<Self> {
        config.validate()?;
        let mc = &ckpt.model.config;
        let conflicts = [
            ("groups", mc.groups != config.groups),
            ("iterations", mc.iterations != config.iterations),
            ("layers", mc.ladder.layers != config.layers),
            ("norm", mc.ladder.norm != config.norm),
        ];
        if let Some((name, _)) = conflicts.iter().find(|c| c.1) {
            return Err(Error::Config(format!("{name} in the config conflicts with the checkpoint")));
        }
        let dataset = ckpt
            .dataset
            .ok_or_else(|| Error::Config("checkpoint does not record its dataset".into()))?;
        let mut adam = ckpt.adam.unwrap_or_else(|| Adam::new(&ckpt.model.params));
        adam.sync(&ckpt.model.params);
        Ok(Trainer {
            config,
            model: ckpt.model,
            adam,
            epoch: ckpt.epoch,
            phase: ckpt.phase,
            dataset,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            adam: Some(self.adam.clone()),
            epoch: self.epoch,
            phase: self.phase,
            dataset: Some(self.dataset),
            train: Some(self.config.clone()),
        }
    }

    /// Adds two fresh layers and a per-group softmax over `classes + 1`
    /// units on top of the encoder, if not already present.
    pub fn enable_class_head(&mut self) {
        if self.model.params.class_head.is_none() {
            let classes = self.config.classes;
            let top = self.model.config.ladder.top_width();
            let mut r = rng::seeded(fork(self.config.seed, SALT_HEAD));
            self.model.params.class_head = Some(ClassHead::init(top, classes, &mut r));
            self.model.config.ladder.classes = classes;
            self.adam.sync(&self.model.params);
        }
        self.phase = Phase::Supervised;
    }

    /// One optimization step on clean batch `x`. `labels` carries class
    /// targets `[B, C]` and per-example weights (zero for unlabeled rows).
    pub fn step(&mut self, x: &Tensor, labels: Option<(&Tensor, &[f64])>) -> Result<StepStats> {
        let (stats, grads) = self.gradients(x, labels)?;
        self.adam.update(&mut self.model.params, &grads, &self.config.adam)?;
        Ok(stats)
    }

    /// Loss terms and parameter gradients for one training pass; running
    /// normalization statistics advance but parameters do not change.
    pub fn gradients(
        &mut self,
        x: &Tensor,
        labels: Option<(&Tensor, &[f64])>,
    ) -> Result<(StepStats, TaggerParams)> {
        let mut r = rng::derived(fork(self.config.seed, SALT_STEP), self.adam.step);
        let mut g = Graph::new();
        let mut opts = self.model.training_options();
        opts.class_iterations = self.config.class_iterations;
        let (bound, unrolled) = self.model.forward(&mut g, x, &mut r, &opts)?;
        let t = unrolled.iterations.len() as f64;
        let mut loss = g.scale(unrolled.total_cost, 1.0 / t);
        let cost = g.value(loss).data()[0];
        let mut ce_value = None;
        if let (Some((targets, weights)), true) = (labels, self.phase == Phase::Supervised) {
            let probs: Vec<_> = unrolled.iterations.iter().filter_map(|it| it.class_probs).collect();
            if probs.is_empty() {
                return Err(Error::contract("supervised step without class predictions"));
            }
            let b = x.dims()[0];
            let weighted = Tensor::from_fn(targets.dims(), |i| {
                targets.data()[i] * weights[i / targets.dims()[1]]
            });
            if weights.len() != b || targets.dims()[0] != b {
                return Err(Error::shape("class targets do not match the batch"));
            }
            let tw = g.constant(weighted);
            let mut total = None;
            for p in &probs {
                let shifted = g.offset(*p, CE_FLOOR);
                let logp = g.log(shifted)?;
                let prod = g.mul(logp, tw)?;
                let s = g.sum_all(prod);
                total = Some(match total {
                    None => s,
                    Some(acc) => g.add(acc, s)?,
                });
            }
            let ce = g.scale(total.expect("non-empty"), -1.0 / probs.len() as f64);
            ce_value = Some(g.value(ce).data()[0]);
            let scaled = g.scale(ce, self.config.class_weight);
            loss = g.add(loss, scaled)?;
        }
        if !g.value(loss).all_finite() {
            return Err(Error::NonFinite("training cost".into()));
        }
        let grads = g.backward(loss)?;
        let grad_tree = bound.map(|_, v| grads.wrt(*v));
        Ok((StepStats { cost, ce: ce_value }, grad_tree))
    }

    fn run_epoch(&mut self, data: &DatasetBundle, labeled: Option<&[bool]>) -> Result<(f64, Option<f64>)> {
        let n = data.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng::derived(fork(self.config.seed, SALT_SHUFFLE), self.epoch as u64));
        let batch = self.config.batch.min(n);
        let mut chunks: Vec<&[usize]> = order.chunks(batch).collect();
        if chunks.len() > 1 && chunks.last().is_some_and(|c| c.len() < batch) {
            chunks.pop();
        }
        let (mut cost_sum, mut ce_sum, mut ce_steps) = (0.0, 0.0, 0);
        for idx in &chunks {
            let x = data.batch(idx);
            let stats = match (labeled, self.phase) {
                (Some(mask), Phase::Supervised) => {
                    let rows: Vec<usize> = idx.iter().copied().filter(|&i| mask[i]).collect();
                    if rows.is_empty() {
                        self.step(&x, None)?
                    } else {
                        let classes = self.config.classes;
                        let mut targets = Tensor::zeros(&[idx.len(), classes]);
                        let mut weights = vec![0.0; idx.len()];
                        for (r, &i) in idx.iter().enumerate() {
                            if mask[i] {
                                let t = data.class_targets(&[i], classes)?;
                                targets.data_mut()[r * classes..(r + 1) * classes].copy_from_slice(t.data());
                                weights[r] = 1.0 / rows.len() as f64;
                            }
                        }
                        self.step(&x, Some((&targets, &weights)))?
                    }
                }
                _ => self.step(&x, None)?,
            };
            cost_sum += stats.cost;
            if let Some(ce) = stats.ce {
                ce_sum += ce;
                ce_steps += 1;
            }
        }
        Ok((
            cost_sum / chunks.len() as f64,
            (ce_steps > 0).then(|| ce_sum / ce_steps as f64),
        ))
    }

    /// Re-estimates batch-norm statistics on up to `norm_calibration`
    /// training examples drawn afresh each epoch.
    pub fn recalibrate_norm(&mut self, data: &DatasetBundle) -> Result<()> {
        let count = self.config.norm_calibration.min(data.len());
        if count == 0 {
            return Ok(());
        }
        let mut r = rng::derived(fork(self.config.seed, SALT_CALIBRATION), self.epoch as u64);
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut r);
        let batch = self.config.batch.clamp(2, count.max(2));
        let batches: Vec<Tensor> = order[..count]
            .chunks(batch)
            .filter(|c| c.len() >= 2)
            .map(|c| data.batch(c))
            .collect();
        self.model.recalibrate_norm(&batches, &mut r)
    }

    /// Validation `C_i` at the evaluation iteration count.
    pub fn validate(&self, val: &DatasetBundle) -> Result<Vec<f64>> {
        let limit = match self.config.validation_limit {
            0 => val.len(),
            l => l.min(val.len()),
        };
        let subset = val.subset(0..limit)?;
        let report = eval::evaluate(
            &self.model,
            &subset,
            &EvalOptions {
                groups: self.config.groups,
                iterations: self.config.eval_iterations,
                batch: self.config.batch,
                seed: fork(self.config.seed, SALT_VALIDATION),
                eval_noise: EvalNoise::Keep,
            },
        )?;
        Ok(report.denoising_costs)
    }

    /// Total epochs in the schedule.
    pub fn scheduled_epochs(&self, semi_supervised: bool) -> usize {
        self.config.epochs + if semi_supervised { self.config.supervised_epochs } else { 0 }
    }

    /// Runs the remaining schedule. `labeled` switches on the
    /// semi-supervised phase; `on_epoch` sees the trainer after every
    /// completed epoch (checkpointing goes there). On divergence the
    /// trainer is rolled back to the last completed epoch and
    /// [`Error::Diverged`] is returned.
    pub fn train(
        &mut self,
        data: &DatasetBundle,
        val: Option<&DatasetBundle>,
        labeled: Option<&[usize]>,
        mut on_epoch: impl FnMut(&Trainer, &EpochRecord) -> Result<()>,
    ) -> Result<Vec<EpochRecord>> {
        if data.input_size() != self.model.config.input_size {
            return Err(Error::shape(format!(
                "data has {} elements per example, model expects {}",
                data.input_size(),
                self.model.config.input_size
            )));
        }
        if data.kind.is_binary() != self.dataset.is_binary() {
            return Err(Error::Config(format!(
                "model was built for {} data, got {}",
                self.dataset, data.kind
            )));
        }
        let mask = match labeled {
            None => None,
            Some(idx) => {
                if idx.is_empty() {
                    return Err(Error::Data("the labeled set is empty".into()));
                }
                if data.classes.is_none() {
                    return Err(Error::Data("dataset has no class labels".into()));
                }
                let mut mask = vec![false; data.len()];
                for &i in idx {
                    if i >= data.len() {
                        return Err(Error::Data(format!("labeled index {i} outside 0..{}", data.len())));
                    }
                    data.class_targets(&[i], self.config.classes)?;
                    mask[i] = true;
                }
                Some(mask)
            }
        };
        let total = self.scheduled_epochs(mask.is_some());
        let mut records = Vec::new();
        while self.epoch < total {
            if mask.is_some() && self.epoch >= self.config.epochs {
                self.enable_class_head();
            }
            let snapshot = (self.model.clone(), self.adam.clone(), self.phase, self.epoch);
            let result = self.run_epoch(data, mask.as_deref()).and_then(|(cost, ce)| {
                if !cost.is_finite() {
                    return Err(Error::NonFinite("epoch cost".into()));
                }
                self.epoch += 1;
                self.recalibrate_norm(data)?;
                let val_costs = match val {
                    Some(v) => self.validate(v)?,
                    None => Vec::new(),
                };
                Ok(EpochRecord {
                    epoch: self.epoch,
                    phase: self.phase,
                    steps: self.adam.step,
                    train_cost: cost,
                    train_ce: ce,
                    val_costs,
                })
            });
            let record = match result {
                Ok(r) => r,
                Err(e) if e.is_numeric() => {
                    let step = self.adam.step;
                    (self.model, self.adam, self.phase, self.epoch) = snapshot;
                    return Err(Error::Diverged {
                        epoch: self.epoch + 1,
                        step,
                    });
                }
                Err(e) => return Err(e),
            };
            on_epoch(self, &record)?;
            records.push(record);
        }
        Ok(records)
    }
}

/// `budget` example indices drawn without replacement, sorted.
pub fn label_budget_indices(count: usize, budget: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..count).collect();
    idx.shuffle(&mut rng::seeded(fork(seed, SALT_LABELS)));
    idx.truncate(budget.min(count));
    idx.sort_unstable();
    idx
}

/// One example index per line; `#` starts a comment.
pub fn read_label_indices(path: impl AsRef<Path>) -> Result<Vec<usize>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter_map(|(no, l)| {
            let l = l.split('#').next().unwrap_or("").trim();
            (!l.is_empty()).then(|| {
                l.parse()
                    .map_err(|_| Error::Data(format!("{}:{}: bad index {l:?}", path.display(), no + 1)))
            })
        })
        .collect()
}

#[cfg(test)]
mod tests;
