//! Fine-tuning harness: dropout+softmax head on the pooled [CLS] state,
//! ADAM with the paper protocol defaults (lr 1e-5, betas 0.9/0.99, batch 8,
//! up to 30 epochs), dev-set early stopping, and run-directory persistence.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::encoder::{EncodedBatch, Model};
use crate::error::{Error, Result};
use crate::eval::evaluate;
use crate::seeding::rng_from;
use crate::tensor::{adam_step, cross_entropy, dropout, dropout_backward, AdamState, Real, Tensor};
use crate::tokenizer::EncodedInput;

const ROLE_SHUFFLE: u64 = 11;
const ROLE_DROPOUT: u64 = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EarlyStopMetric {
    DevLoss,
    DevAccuracy,
}

impl std::str::FromStr for EarlyStopMetric {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dev_loss" => Ok(EarlyStopMetric::DevLoss),
            "dev_accuracy" => Ok(EarlyStopMetric::DevAccuracy),
            other => Err(Error::Config(format!(
                "unknown early-stop metric '{other}' (dev_loss|dev_accuracy)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    LinearDecay,
}

impl std::str::FromStr for LrSchedule {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(LrSchedule::Constant),
            "linear_decay" => Ok(LrSchedule::LinearDecay),
            other => Err(Error::Config(format!(
                "unknown lr schedule '{other}' (constant|linear_decay)"
            ))),
        }
    }
}

/// Effective learning rate for `epoch` under the chosen schedule.
pub fn lr_schedule_value(
    schedule: LrSchedule,
    base_lr: f64,
    epoch: usize,
    max_epochs: usize,
) -> f64 {
    match schedule {
        LrSchedule::Constant => base_lr,
        LrSchedule::LinearDecay => base_lr * (1.0 - epoch as f64 / max_epochs as f64),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Head dropout probability on the pooled [CLS] vector.
    pub dropout_p: f64,
    pub early_stop_patience: usize,
    pub early_stop_metric: EarlyStopMetric,
    pub lr_schedule: LrSchedule,
    pub grad_accum_steps: usize,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-5,
            beta1: 0.9,
            beta2: 0.99,
            epsilon: 1e-8,
            batch_size: 8,
            max_epochs: 30,
            dropout_p: 0.1,
            early_stop_patience: 3,
            early_stop_metric: EarlyStopMetric::DevLoss,
            lr_schedule: LrSchedule::Constant,
            grad_accum_steps: 1,
            seed: 0,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0
            || !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
            || self.epsilon <= 0.0
        {
            return Err(Error::Config("optimizer rates must be positive".into()));
        }
        if self.batch_size == 0 || self.grad_accum_steps == 0 {
            return Err(Error::Config("batch_size and grad_accum_steps must be >= 1".into()));
        }
        if self.max_epochs < 1 {
            return Err(Error::Config("max_epochs must be >= 1".into()));
        }
        if self.early_stop_patience < 1 {
            return Err(Error::Config("early_stop_patience must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Config("dropout_p must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochEntry {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub dev_loss: f64,
    pub dev_accuracy: f64,
    pub epoch_seconds: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainRunRecord {
    pub entries: Vec<EpochEntry>,
    pub best_epoch: usize,
    pub stopped_early: bool,
    pub parameter_count: u64,
    pub optimizer_steps: u64,
    pub checkpoint: Option<PathBuf>,
    /// Filled in once the best checkpoint is evaluated on the test split.
    pub test_loss: Option<f64>,
    pub test_accuracy: Option<f64>,
}

impl TrainRunRecord {
    pub fn metrics_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,train_acc,dev_loss,dev_acc,epoch_seconds\n");
        for e in &self.entries {
            s.push_str(&format!(
                "{},{:.6},{:.6},{:.6},{:.6},{:.3}\n",
                e.epoch, e.train_loss, e.train_accuracy, e.dev_loss, e.dev_accuracy,
                e.epoch_seconds
            ));
        }
        s
    }
}

/// Attaches the dropout+softmax classification head.
pub fn build_classifier<T: Real>(
    model: &mut Model<T>,
    num_classes: usize,
    seed: u64,
) -> Result<()> {
    model.attach_classifier(num_classes, seed)
}

/// Early-stopping decision: stop once the last `patience` epochs all fail to
/// improve on the best value seen. `best_epoch` is the first index achieving
/// the best value (ties are not improvements).
pub fn early_stop_check(
    history: &[f64],
    patience: usize,
    metric: EarlyStopMetric,
) -> Result<(bool, usize)> {
    if history.is_empty() {
        return Err(Error::Data("early_stop_check needs a non-empty history".into()));
    }
    let better = |a: f64, b: f64| match metric {
        EarlyStopMetric::DevLoss => a < b,
        EarlyStopMetric::DevAccuracy => a > b,
    };
    let mut best_epoch = 0usize;
    for (i, &v) in history.iter().enumerate() {
        if better(v, history[best_epoch]) {
            best_epoch = i;
        }
    }
    let stop = history.len() - 1 - best_epoch >= patience;
    Ok((stop, best_epoch))
}

struct BatchOutcome {
    loss_sum: f64,
    correct: usize,
}

fn train_batch<T: Real>(
    model: &mut Model<T>,
    inputs: &[&EncodedInput],
    dropout_rng: &mut rand_chacha::ChaCha8Rng,
    head_dropout_p: f64,
) -> Result<BatchOutcome> {
    let batch = EncodedBatch::from_inputs(inputs, true)?;
    let (out, trace) = model.forward_trace(&batch, Some(dropout_rng))?;

    // head: dropout on pooled [CLS], then linear, then softmax via the loss
    let mut pooled = out.pooled.clone();
    let drop_mask = dropout(pooled.data_mut(), head_dropout_p, Some(dropout_rng))?;
    let classifier = model
        .classifier
        .as_ref()
        .ok_or_else(|| Error::Config("model has no classification head".into()))?;
    let num_classes = classifier.out_dim();
    let logits = classifier.forward(&pooled)?;

    let bsz = batch.batch_size;
    let mut loss_sum = 0.0f64;
    let mut correct = 0usize;
    let mut d_logits = vec![T::zero(); bsz * num_classes];
    for bi in 0..bsz {
        let label = batch.labels[bi]
            .ok_or_else(|| Error::Data("training example has no label".into()))?
            as usize;
        if label >= num_classes {
            return Err(Error::Index(format!(
                "label {label} out of range for {num_classes} classes"
            )));
        }
        let row = logits.row(bi);
        let (loss, probs) = cross_entropy(row, label)?;
        loss_sum += loss.as_f64();
        let mut best = 0usize;
        for c in 1..num_classes {
            if row[c] > row[best] {
                best = c;
            }
        }
        if best == label {
            correct += 1;
        }
        for c in 0..num_classes {
            let one_hot = if c == label { 1.0 } else { 0.0 };
            d_logits[bi * num_classes + c] =
                T::from_f64((probs[c].as_f64() - one_hot) / bsz as f64);
        }
    }
    let d_logits = Tensor::from_vec(vec![bsz, num_classes], d_logits)?;
    let mut d_pooled = model
        .classifier
        .as_mut()
        .expect("checked above")
        .backward(&d_logits, &pooled)?;
    dropout_backward(d_pooled.data_mut(), drop_mask.as_ref(), head_dropout_p);
    model.backward(&batch, &trace, None, Some(&d_pooled))?;
    Ok(BatchOutcome { loss_sum, correct })
}

/// Fine-tunes on `train`, evaluating `dev` after every epoch, checkpointing
/// on improvement, and stopping early per the configured metric.
pub fn finetune<T: Real>(
    model: &mut Model<T>,
    train: &[EncodedInput],
    dev: &[EncodedInput],
    config: &FinetuneConfig,
    run_dir: Option<&Path>,
) -> Result<TrainRunRecord> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Data("empty training set".into()));
    }
    if dev.is_empty() {
        return Err(Error::Data("empty dev set".into()));
    }
    if model.classifier.is_none() {
        return Err(Error::Config("attach a classification head before fine-tuning".into()));
    }
    if let Some(dir) = run_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let checkpoint_path = run_dir.map(|d| d.join("checkpoint_best.mbrt"));

    let mut optimizer = AdamState::new(
        T::from_f64(config.learning_rate),
        T::from_f64(config.beta1),
        T::from_f64(config.beta2),
        T::from_f64(config.epsilon),
    );
    let mut entries: Vec<EpochEntry> = Vec::new();
    let mut metric_history: Vec<f64> = Vec::new();
    let mut best_value: Option<f64> = None;
    let mut stopped_early = false;

    for epoch in 0..config.max_epochs {
        let started = Instant::now();
        optimizer.learning_rate = T::from_f64(lr_schedule_value(
            config.lr_schedule,
            config.learning_rate,
            epoch,
            config.max_epochs,
        ));

        let mut order: Vec<usize> = (0..train.len()).collect();
        use rand::seq::SliceRandom;
        order.shuffle(&mut rng_from(config.seed, &[ROLE_SHUFFLE, epoch as u64]));

        let mut loss_sum = 0.0f64;
        let mut correct = 0usize;
        let batches: Vec<&[usize]> = order.chunks(config.batch_size).collect();
        let mut window = 0usize;
        model.zero_grads();
        for (batch_idx, chunk) in batches.iter().enumerate() {
            let inputs: Vec<&EncodedInput> = chunk.iter().map(|&i| &train[i]).collect();
            let mut dropout_rng =
                rng_from(config.seed, &[ROLE_DROPOUT, epoch as u64, batch_idx as u64]);
            let outcome = train_batch(model, &inputs, &mut dropout_rng, config.dropout_p)?;
            if !outcome.loss_sum.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss at epoch {epoch}, batch {batch_idx}"
                )));
            }
            loss_sum += outcome.loss_sum;
            correct += outcome.correct;
            window += 1;
            let last = batch_idx + 1 == batches.len();
            if window == config.grad_accum_steps || last {
                if window > 1 {
                    model.scale_grads(window as f64);
                }
                let mut params: Vec<&mut Tensor<T>> =
                    model.param_refs_mut().into_iter().map(|(_, t)| t).collect();
                adam_step(&mut params, &mut optimizer)?;
                model.zero_grads();
                window = 0;
            }
        }
        let train_loss = loss_sum / train.len() as f64;
        let train_accuracy = correct as f64 / train.len() as f64;

        let dev_eval = evaluate(model, dev, config.batch_size)?;
        let entry = EpochEntry {
            epoch,
            train_loss,
            train_accuracy,
            dev_loss: dev_eval.mean_loss,
            dev_accuracy: dev_eval.accuracy,
            epoch_seconds: started.elapsed().as_secs_f64(),
        };
        entries.push(entry);
        let metric_value = match config.early_stop_metric {
            EarlyStopMetric::DevLoss => dev_eval.mean_loss,
            EarlyStopMetric::DevAccuracy => dev_eval.accuracy,
        };
        metric_history.push(metric_value);

        let improved = match (best_value, config.early_stop_metric) {
            (None, _) => true,
            (Some(best), EarlyStopMetric::DevLoss) => metric_value < best,
            (Some(best), EarlyStopMetric::DevAccuracy) => metric_value > best,
        };
        if improved {
            best_value = Some(metric_value);
            if let Some(path) = &checkpoint_path {
                checkpoint::save(model, path)?;
            }
        }

        let (stop, _) = early_stop_check(
            &metric_history,
            config.early_stop_patience,
            config.early_stop_metric,
        )?;
        if stop {
            stopped_early = true;
            break;
        }
    }

    let (_, best_epoch) = early_stop_check(
        &metric_history,
        config.early_stop_patience,
        config.early_stop_metric,
    )?;
    let record = TrainRunRecord {
        entries,
        best_epoch,
        stopped_early,
        parameter_count: model.total_parameter_count(),
        optimizer_steps: optimizer.t,
        checkpoint: checkpoint_path,
        test_loss: None,
        test_accuracy: None,
    };
    if let Some(dir) = run_dir {
        persist_record(&record, dir, config)?;
    }
    Ok(record)
}

/// Writes `metrics.csv` and `run.json` into the run directory.
pub fn persist_record(
    record: &TrainRunRecord,
    dir: &Path,
    config: &FinetuneConfig,
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let metrics = dir.join("metrics.csv");
    std::fs::write(&metrics, record.metrics_csv()).map_err(|e| Error::io(&metrics, e))?;
    #[derive(Serialize)]
    struct RunJson<'a> {
        config: &'a FinetuneConfig,
        #[serde(flatten)]
        record: &'a TrainRunRecord,
    }
    let run = dir.join("run.json");
    let body = serde_json::to_string_pretty(&RunJson { config, record })
        .map_err(|e| Error::Data(format!("serializing run record: {e}")))?;
    std::fs::write(&run, body).map_err(|e| Error::io(&run, e))
}

/// Reads the `run.json` a run directory persisted.
pub fn load_record(dir: &Path) -> Result<(TrainRunRecord, FinetuneConfig)> {
    let path = dir.join("run.json");
    let body = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    #[derive(Deserialize)]
    struct RunJson {
        config: FinetuneConfig,
        #[serde(flatten)]
        record: TrainRunRecord,
    }
    let parsed: RunJson = serde_json::from_str(&body)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    Ok((parsed.record, parsed.config))
}
