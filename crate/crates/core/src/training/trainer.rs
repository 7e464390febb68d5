use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::model::{CheckpointExtras, ToyModel};
use crate::tasks::{evaluate_accuracy, LabeledExample};

use super::backward::{backward, GradientSet};
use super::optim::{clip_grad_norm, Optimizer, OptimizerConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_input_length: usize,
    /// Exactly one of `steps` and `epochs` may be set; neither means one epoch.
    pub steps: Option<usize>,
    pub epochs: Option<usize>,
    pub optimizer: OptimizerConfig,
    pub grad_clip: Option<f64>,
    pub seed: u64,
    pub eval_every: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            batch_size: 64,
            max_input_length: 128,
            steps: None,
            epochs: None,
            optimizer: OptimizerConfig::default(),
            grad_clip: None,
            seed: 0,
            eval_every: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be finite and >= 0", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.steps.is_some() && self.epochs.is_some() {
            return Err(Error::Config("set steps or epochs, not both".into()));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::Config("grad_clip must be positive".into()));
            }
        }
        if self.eval_every == Some(0) {
            return Err(Error::Config("eval_every must be positive".into()));
        }
        Ok(())
    }

    pub fn total_steps(&self, dataset_len: usize) -> usize {
        match (self.steps, self.epochs) {
            (Some(s), _) => s,
            (None, e) => e.unwrap_or(1) * dataset_len.div_ceil(self.batch_size),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub accuracy: f64,
    pub evaluated: usize,
}

/// One optimizer step. `loss` and `grad_norm` are measured before the
/// update; `lambda` and `eval` after it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub lambda: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub eval: Option<EvalRecord>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsHistory {
    pub records: Vec<StepRecord>,
}

impl MetricsHistory {
    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.loss).collect()
    }

    pub fn lambda_trajectory(&self) -> Vec<Vec<f64>> {
        self.records.iter().map(|r| r.lambda.clone()).collect()
    }

    pub fn last_eval(&self) -> Option<&EvalRecord> {
        self.records.iter().rev().find_map(|r| r.eval.as_ref())
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        for r in &self.records {
            serde_json::to_writer(&mut out, r)?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Loss and gradient averaged over a batch, reduced in batch order.
pub fn batch_gradients(model: &ToyModel, batch: &[&LabeledExample]) -> Result<(f64, GradientSet)> {
    let mut total = GradientSet::default();
    let mut loss = 0.0;
    for ex in batch {
        let (inputs, targets, mask) = ex.shifted();
        let (l, g) = backward(model, inputs, targets, mask)?;
        loss += l;
        total.add_scaled(&g, 1.0)?;
    }
    let inv = 1.0 / batch.len() as f64;
    total.scale_in_place(inv);
    Ok((loss * inv, total))
}

/// Optimizer state plus the step counter. Batch order is a pure function of
/// (seed, step), so nothing else is needed to resume.
pub struct Trainer {
    pub config: TrainConfig,
    pub step: usize,
    pub optimizer: Optimizer,
    epoch_cache: Option<(usize, Vec<usize>)>,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let optimizer = Optimizer::new(config.optimizer);
        Ok(Trainer { config, step: 0, optimizer, epoch_cache: None })
    }

    /// Rebuilds a trainer from state saved by [`Trainer::extras`].
    pub fn resume(config: TrainConfig, extras: &CheckpointExtras) -> Result<Self> {
        let state = extras
            .metadata
            .get("trainer")
            .ok_or_else(|| Error::State("checkpoint has no trainer state".into()))?;
        let field = |k: &str| {
            state
                .get(k)
                .and_then(|v| v.as_u64())
                .ok_or_else(|| Error::State(format!("trainer state lacks {k}")))
        };
        if field("seed")? != config.seed {
            return Err(Error::State("resume seed differs from the saved run".into()));
        }
        let mut trainer = Trainer::new(config)?;
        trainer.step = field("step")? as usize;
        trainer.optimizer = Optimizer::restore(trainer.config.optimizer, field("optimizer_t")?, &extras.tensors);
        Ok(trainer)
    }

    pub fn extras(&self) -> CheckpointExtras {
        CheckpointExtras {
            metadata: json!({
                "trainer": {
                    "step": self.step,
                    "seed": self.config.seed,
                    "optimizer_t": self.optimizer.t,
                }
            }),
            tensors: self.optimizer.state_tensors(),
        }
    }

    fn epoch_order(&mut self, epoch: usize, n: usize) -> &[usize] {
        if self.epoch_cache.as_ref().map(|(e, _)| *e) != Some(epoch) {
            let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
            rng.set_stream(epoch as u64);
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng);
            self.epoch_cache = Some((epoch, order));
        }
        &self.epoch_cache.as_ref().expect("just filled").1
    }

    /// Dataset indices used at `step`: a fresh shuffle every epoch.
    pub fn batch_indices(&mut self, step: usize, n: usize) -> Vec<usize> {
        let b = self.config.batch_size;
        (step * b..(step + 1) * b)
            .map(|p| self.epoch_order(p / n, n)[p % n])
            .collect()
    }

    fn check_dataset(&self, model: &ToyModel, dataset: &[LabeledExample]) -> Result<()> {
        if dataset.is_empty() {
            return Err(Error::Input("empty training set".into()));
        }
        let limit = self.config.max_input_length.min(model.config.max_seq_len);
        for (i, ex) in dataset.iter().enumerate() {
            ex.validate()?;
            if ex.tokens.len() - 1 > limit {
                return Err(Error::Input(format!(
                    "example {i} has {} input tokens, limit is {limit}",
                    ex.tokens.len() - 1
                )));
            }
        }
        Ok(())
    }

    fn diverged(&self, model: &ToyModel, loss: f64) -> Error {
        Error::Divergence { step: self.step, loss, lambda: model.lambdas() }
    }

    /// One update on the next batch.
    pub fn train_step(&mut self, model: &mut ToyModel, dataset: &[LabeledExample]) -> Result<StepRecord> {
        let idx = self.batch_indices(self.step, dataset.len());
        let batch: Vec<&LabeledExample> = idx.iter().map(|&i| &dataset[i]).collect();
        let (loss, mut grads) = match batch_gradients(model, &batch) {
            Ok(v) => v,
            Err(Error::NonFinite(_)) => return Err(self.diverged(model, f64::NAN)),
            Err(e) => return Err(e),
        };
        if !loss.is_finite() || !grads.is_finite() {
            return Err(self.diverged(model, loss));
        }
        let grad_norm = match self.config.grad_clip {
            Some(c) => clip_grad_norm(&mut grads, c),
            None => grads.global_norm(),
        };
        self.optimizer.step(model, &grads, self.config.learning_rate)?;
        let record = StepRecord { step: self.step, loss, grad_norm, lambda: model.lambdas(), eval: None };
        self.step += 1;
        Ok(record)
    }

    /// Runs until the configured step count, evaluating on `eval_set` every
    /// `eval_every` steps and after the last one.
    pub fn run(
        &mut self,
        model: &mut ToyModel,
        dataset: &[LabeledExample],
        eval_set: Option<&[LabeledExample]>,
        mut on_record: impl FnMut(&StepRecord),
    ) -> Result<MetricsHistory> {
        self.check_dataset(model, dataset)?;
        let total = self.config.total_steps(dataset.len());
        let mut history = MetricsHistory::default();
        while self.step < total {
            let mut record = self.train_step(model, dataset)?;
            let done = self.step == total;
            let due = self.config.eval_every.is_some_and(|k| self.step % k == 0);
            if let Some(eval) = eval_set.filter(|_| done || due) {
                let report = evaluate_accuracy(&*model, eval)?;
                record.eval = Some(EvalRecord { accuracy: report.accuracy, evaluated: report.evaluated });
            }
            on_record(&record);
            history.records.push(record);
        }
        Ok(history)
    }
}

/// Trains the model's trainable parameters on `dataset`.
pub fn train(model: &mut ToyModel, dataset: &[LabeledExample], config: &TrainConfig) -> Result<MetricsHistory> {
    Trainer::new(config.clone())?.run(model, dataset, None, |_| {})
}
