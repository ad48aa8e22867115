//! AdamW with decoupled weight decay, reduce-on-plateau scheduling and the
//! epoch loop.

use std::collections::hash_map::DefaultHasher;
use std::fs::File;
use std::hash::{Hash, Hasher};
use std::io::{BufWriter, Write};
use std::path::Path;

use log::{debug, info};
use serde::{Deserialize, Serialize};

use crate::batching::{chronological_batches, plan_epoch, Strategy};
use crate::checkpoint;
use crate::data::{Dataset, Frame};
use crate::error::{Error, Result};
use crate::loss::{combined_loss, LossConfig};
use crate::metrics::{MetricsAccumulator, MetricsRecord, MetricsReport};
use crate::model::{Component, Model, ParamStore};
use crate::seed::{derive_seed, rng_for, streams};
use crate::tensor::Tape;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;
/// Minimum decrease of the monitored loss that counts as an improvement.
pub const PLATEAU_THRESHOLD: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub plateau_patience: usize,
    pub lr_factor: f64,
    pub min_lr: f64,
    pub loss: LossConfig,
    pub strategy: Strategy,
    pub seed: u64,
    /// Global L2 norm cap on the gradient, off when absent.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 150,
            batch_size: 128,
            lr: 1e-3,
            weight_decay: 1e-2,
            plateau_patience: 10,
            lr_factor: 0.5,
            min_lr: 1e-6,
            loss: LossConfig::default(),
            strategy: Strategy::TimeSequential,
            seed: 0,
            grad_clip: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.lr > 0.0) {
            return fail(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.lr_factor > 0.0 && self.lr_factor < 1.0) {
            return fail(format!("lr_factor {} outside (0, 1)", self.lr_factor));
        }
        if self.plateau_patience == 0 {
            return fail("plateau_patience must be >= 1".into());
        }
        if self.batch_size == 0 {
            return fail("batch size must be >= 1".into());
        }
        if !(self.min_lr >= 0.0) || !(self.weight_decay >= 0.0) {
            return fail("min_lr and weight_decay must be nonnegative".into());
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return fail(format!("grad_clip must be positive, got {c}"));
            }
        }
        self.loss.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
    pub lr: f64,
    pub plateau_counter: usize,
    pub best_loss: f64,
}

impl OptimState {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|p| vec![0.0; p.tensor.numel()]).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
            lr,
            plateau_counter: 0,
            best_loss: f64::INFINITY,
        }
    }
}

/// One AdamW update from the gradients stored on the parameters. Decay is
/// applied only to parameters flagged for it.
pub fn adamw_step(store: &mut ParamStore, state: &mut OptimState, weight_decay: f64) -> Result<()> {
    if state.m.len() != store.len() {
        return Err(Error::Contract(format!(
            "optimizer tracks {} tensors, model has {}",
            state.m.len(),
            store.len()
        )));
    }
    state.t += 1;
    let bc1 = 1.0 - BETA1.powi(state.t as i32);
    let bc2 = 1.0 - BETA2.powi(state.t as i32);
    let lr = state.lr;
    for ((p, m), v) in store.iter_mut().zip(&mut state.m).zip(&mut state.v) {
        let decay = if p.decay { weight_decay } else { 0.0 };
        let name = &p.name;
        let (theta, grad) = p.tensor.data_and_grad();
        let Some(grad) = grad else { continue };
        if m.len() != theta.len() || grad.len() != theta.len() {
            return Err(Error::Contract(format!(
                "moment/gradient size mismatch for `{name}`: {} vs {}",
                m.len(),
                theta.len()
            )));
        }
        for i in 0..theta.len() {
            let g = grad[i];
            m[i] = BETA1 * m[i] + (1.0 - BETA1) * g;
            v[i] = BETA2 * v[i] + (1.0 - BETA2) * g * g;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            theta[i] -= lr * m_hat / (v_hat.sqrt() + EPSILON) + lr * decay * theta[i];
        }
    }
    Ok(())
}

/// Feeds one epoch's monitored loss to the scheduler. Returns whether the
/// learning rate was reduced.
pub fn plateau_step(state: &mut OptimState, loss: f64, cfg: &TrainConfig) -> bool {
    if loss < state.best_loss - PLATEAU_THRESHOLD {
        state.best_loss = loss;
        state.plateau_counter = 0;
        return false;
    }
    state.plateau_counter += 1;
    if state.plateau_counter >= cfg.plateau_patience {
        state.plateau_counter = 0;
        let old = state.lr;
        state.lr = (state.lr * cfg.lr_factor).max(cfg.min_lr);
        return state.lr < old;
    }
    false
}

/// Rescales gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(store: &mut ParamStore, max_norm: f64) -> f64 {
    let norm = store
        .iter()
        .filter_map(|p| p.tensor.grad())
        .flat_map(|g| g.iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for p in store.iter_mut() {
            if let Some(g) = p.tensor.grad_mut() {
                g.iter_mut().for_each(|v| *v *= s);
            }
        }
    }
    norm
}

/// Order-sensitive hash of parameter values and optimizer state.
pub fn state_hash(store: &ParamStore, state: &OptimState) -> u64 {
    let mut h = DefaultHasher::new();
    for p in store.iter() {
        p.name.hash(&mut h);
        p.tensor.data().iter().for_each(|v| v.to_bits().hash(&mut h));
    }
    for buf in state.m.iter().chain(&state.v) {
        buf.iter().for_each(|v| v.to_bits().hash(&mut h));
    }
    (state.t, state.lr.to_bits(), state.plateau_counter, state.best_loss.to_bits()).hash(&mut h);
    h.finish()
}

/// The loss actually optimized: the focal term is dropped when disabled.
pub fn effective_loss(model: &Model, loss: &LossConfig) -> LossConfig {
    if model.config().disable.contains(Component::Focal) {
        LossConfig { lambda: 0.0, ..*loss }
    } else {
        *loss
    }
}

fn argmax_rows(logits: &[f64], classes: usize) -> Vec<usize> {
    logits
        .chunks(classes)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub report: MetricsReport,
    pub loss: f64,
    pub predictions: Vec<usize>,
}

/// Eval-mode pass over `frames` in chronological batches of `batch_size`.
/// Predictions are returned in the order of `frames`.
pub fn evaluate(
    model: &Model,
    store: &ParamStore,
    frames: &[Frame],
    batch_size: usize,
    loss: &LossConfig,
) -> Result<Evaluation> {
    if frames.is_empty() {
        return Err(Error::Data("cannot evaluate an empty split".into()));
    }
    let classes = model.config().classes;
    let loss_cfg = effective_loss(model, loss);
    let mut predictions = vec![0; frames.len()];
    let mut acc = MetricsAccumulator::new(classes);
    let mut total = 0.0;
    let mut rng = rng_for(0, streams::DROPOUT);
    for batch in chronological_batches(frames, batch_size)? {
        let refs: Vec<&Frame> = batch.iter().map(|&i| &frames[i]).collect();
        let labels: Vec<usize> = refs.iter().map(|f| f.label).collect();
        let mut tape = Tape::new();
        let trace = model.forward(&mut tape, store, &refs, false, &mut rng)?;
        let l = combined_loss(&mut tape, trace.logits, &labels, &loss_cfg)?;
        total += tape.scalar_value(l) * batch.len() as f64;
        let preds = argmax_rows(tape.value(trace.logits), classes);
        acc.extend(&preds, &labels)?;
        for (&i, p) in batch.iter().zip(preds) {
            predictions[i] = p;
        }
    }
    Ok(Evaluation {
        report: acc.report(),
        loss: total / frames.len() as f64,
        predictions,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub history: Vec<MetricsRecord>,
    pub best_epoch: usize,
    pub best_validation_f1: f64,
    pub test: Evaluation,
    pub final_lr: f64,
}

struct MetricsSink(Option<BufWriter<File>>);

impl MetricsSink {
    fn write(&mut self, record: &MetricsRecord, path: &Path) -> Result<()> {
        if let Some(w) = self.0.as_mut() {
            serde_json::to_writer(&mut *w, record)?;
            w.write_all(b"\n").and_then(|_| w.flush()).map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }
}

/// Trains `store` in place. On return it holds the parameters of the epoch
/// with the best validation mean F1, which are also used for the test
/// report. With `out`, metrics go to `out/metrics.jsonl` and the best
/// parameters to `out/model.ckpt`.
pub fn train(
    model: &Model,
    store: &mut ParamStore,
    data: &Dataset,
    cfg: &TrainConfig,
    out: Option<&Path>,
) -> Result<TrainReport> {
    cfg.validate()?;
    if data.classes != model.config().classes {
        return Err(Error::Config(format!(
            "data has {} classes, model expects {}",
            data.classes,
            model.config().classes
        )));
    }
    if data.train.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    let metrics_path = out.map(|d| d.join("metrics.jsonl")).unwrap_or_default();
    let mut sink = MetricsSink(match out {
        Some(_) => Some(BufWriter::new(
            File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?,
        )),
        None => None,
    });
    let strategy = cfg.strategy.to_string();
    let loss_cfg = effective_loss(model, &cfg.loss);
    let classes = model.config().classes;
    let mut state = OptimState::new(store, cfg.lr);
    let mut history = Vec::new();
    let mut best: Option<(usize, f64, ParamStore)> = None;

    for epoch in 0..cfg.epochs {
        let plan = plan_epoch(&data.train, cfg.batch_size, cfg.strategy, cfg.seed, epoch)?;
        let mut rng = rng_for(derive_seed(cfg.seed, epoch as u64), streams::DROPOUT);
        let mut acc = MetricsAccumulator::new(classes);
        let mut total = 0.0;
        for (bi, batch) in plan.batches.iter().enumerate() {
            let refs: Vec<&Frame> = batch.iter().map(|&i| &data.train[i]).collect();
            let labels: Vec<usize> = refs.iter().map(|f| f.label).collect();
            let mut tape = Tape::new();
            let trace = model.forward(&mut tape, store, &refs, true, &mut rng)?;
            let loss = combined_loss(&mut tape, trace.logits, &labels, &loss_cfg)?;
            let value = tape.scalar_value(loss);
            if !value.is_finite() {
                return Err(Error::NonFinite {
                    epoch,
                    batch: bi,
                    lr: state.lr,
                    loss: value,
                });
            }
            total += value * batch.len() as f64;
            acc.extend(&argmax_rows(tape.value(trace.logits), classes), &labels)?;

            let grads = tape.backward(loss)?;
            store.zero_grad();
            for (param, &var) in store.iter_mut().zip(&trace.params) {
                grads.accumulate_into(var, &mut param.tensor)?;
            }
            if let Some(max) = cfg.grad_clip {
                clip_grad_norm(store, max);
            }
            adamw_step(store, &mut state, cfg.weight_decay)?;
        }

        let lr = state.lr;
        let train_loss = total / data.train.len() as f64;
        let train_report = acc.report();
        let val = evaluate(model, store, &data.validation, cfg.batch_size, &cfg.loss)?;
        let records = [
            ("train", train_report.mean_f1, train_report.per_class_f1, train_loss),
            ("validation", val.report.mean_f1, val.report.per_class_f1.clone(), val.loss),
        ];
        for (split, mean_f1, per_class_f1, loss) in records {
            let record = MetricsRecord {
                epoch,
                split: split.into(),
                strategy: strategy.clone(),
                mean_f1,
                per_class_f1,
                loss,
                lr,
            };
            sink.write(&record, &metrics_path)?;
            history.push(record);
        }
        info!(
            "epoch {epoch}: train loss {train_loss:.4}, validation loss {:.4}, validation F1 {:.4}, lr {lr:e}",
            val.loss, val.report.mean_f1
        );

        if best.as_ref().is_none_or(|b| val.report.mean_f1 > b.1) {
            if let Some(dir) = out {
                checkpoint::save(store, &dir.join("model.ckpt"))?;
            }
            best = Some((epoch, val.report.mean_f1, store.clone()));
        }
        if plateau_step(&mut state, val.loss, cfg) {
            debug!("learning rate reduced to {:e}", state.lr);
        }
    }

    let (best_epoch, best_validation_f1) = match best {
        Some((epoch, f1, params)) => {
            store.copy_values_from(&params)?;
            (epoch, f1)
        }
        None => (0, f64::NAN),
    };
    if out.is_some() && cfg.epochs == 0 {
        checkpoint::save(store, &out.unwrap().join("model.ckpt"))?;
    }
    let test = evaluate(model, store, &data.test, cfg.batch_size, &cfg.loss)?;
    let record = MetricsRecord {
        epoch: best_epoch,
        split: "test".into(),
        strategy,
        mean_f1: test.report.mean_f1,
        per_class_f1: test.report.per_class_f1.clone(),
        loss: test.loss,
        lr: state.lr,
    };
    sink.write(&record, &metrics_path)?;
    history.push(record);
    info!("test mean F1 {:.4} (best validation epoch {best_epoch})", test.report.mean_f1);

    Ok(TrainReport {
        history,
        best_epoch,
        best_validation_f1,
        test,
        final_lr: state.lr,
    })
}
