// SPDX-License-Identifier: MIT OR Apache-2.0

//! AdamW fine-tuning on the next token at END, plus task metrics.

pub mod checkpoint;

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use milab_tensor::{Graph, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, PromptSample, Task, Vocabulary};
use crate::error::{Error, Result};
use crate::model::{end_rows, forward_graph, NoHook, RunOptions, TokenBatch, TransformerModel};

pub use checkpoint::{Checkpoint, Lineage};

/// Samples per inference batch.
pub const EVAL_BATCH: usize = 128;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyper {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    pub grad_clip: Option<f64>,
    /// Next-token loss at every position instead of only at END.
    #[serde(default)]
    pub full_sequence_loss: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Paper,
    Toy,
}

impl FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Preset::Paper),
            "toy" => Ok(Preset::Toy),
            other => Err(Error::Hyper(format!("unknown preset {other:?}"))),
        }
    }
}

impl Hyper {
    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Paper => Self::paper(),
            Preset::Toy => Self::toy(),
        }
    }

    /// Reference fine-tuning settings.
    pub fn paper() -> Self {
        Hyper {
            learning_rate: 1e-5,
            weight_decay: 0.1,
            batch_size: 10,
            epochs: 1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            grad_clip: None,
            full_sequence_loss: false,
        }
    }

    /// Settings for training the toy model from scratch.
    pub fn toy() -> Self {
        Hyper { learning_rate: 1e-3, weight_decay: 0.0, batch_size: 32, grad_clip: Some(1.0), ..Self::paper() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Hyper(m.to_string()));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be finite and non-negative");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0, 1)");
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return bad("eps must be positive and weight_decay non-negative");
        }
        if matches!(self.grad_clip, Some(c) if !(c > 0.0)) {
            return bad("grad_clip must be positive");
        }
        Ok(())
    }
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: i32,
}

impl AdamW {
    pub fn new(model: &TransformerModel) -> Self {
        let zeros: Vec<Tensor> = model.weights().tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        AdamW { m: zeros.clone(), v: zeros, t: 0 }
    }

    pub fn step(&mut self, model: &mut TransformerModel, grads: &[Tensor], h: &Hyper) {
        self.t += 1;
        let bc1 = 1.0 - h.beta1.powi(self.t);
        let bc2 = 1.0 - h.beta2.powi(self.t);
        let decay = 1.0 - h.learning_rate * h.weight_decay;
        let params = model.weights_mut().tensors_mut();
        for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((pv, &gv), mv), vv) in
                p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut())
            {
                *pv *= decay;
                *mv = h.beta1 * *mv + (1.0 - h.beta1) * gv;
                *vv = h.beta2 * *vv + (1.0 - h.beta2) * gv * gv;
                *pv -= h.learning_rate * (*mv / bc1) / ((*vv / bc2).sqrt() + h.eps);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    LogitDiff,
    Accuracy,
    ProbDiff,
}

impl Metric {
    pub fn default_for(task: Task) -> Metric {
        match task {
            Task::Ioi => Metric::LogitDiff,
            Task::GreaterThan => Metric::ProbDiff,
        }
    }

    pub fn task(self) -> Task {
        match self {
            Metric::LogitDiff | Metric::Accuracy => Task::Ioi,
            Metric::ProbDiff => Task::GreaterThan,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Metric::LogitDiff => "logit_diff",
            Metric::Accuracy => "accuracy",
            Metric::ProbDiff => "prob_diff",
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Metric {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "logit_diff" => Ok(Metric::LogitDiff),
            "accuracy" => Ok(Metric::Accuracy),
            "prob_diff" => Ok(Metric::ProbDiff),
            other => Err(Error::Dataset(format!("unknown metric {other:?}"))),
        }
    }
}

/// Metric of one sample from its END-position logits.
pub fn sample_metric(metric: Metric, s: &PromptSample, row: &[f64]) -> Result<f64> {
    let vocab = Vocabulary::standard();
    if s.task != metric.task() {
        return Err(Error::TaskMismatch(format!("{metric} needs {} data, got {}", metric.task(), s.task)));
    }
    Ok(match metric {
        Metric::LogitDiff => row[s.io_token()?] - row[s.s_token()?],
        Metric::Accuracy => {
            let best = vocab
                .name_ids()
                .iter()
                .copied()
                .reduce(|a, b| if row[b] > row[a] { b } else { a })
                .expect("names");
            f64::from(best == s.io_token()?)
        }
        Metric::ProbDiff => {
            let xx = s.xx.ok_or_else(|| Error::Dataset("greater-than sample without XX".into()))?;
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let mut diff = 0.0;
            for &id in vocab.year_ids() {
                let p = (row[id] - max).exp() / z;
                if vocab.year_of(id).expect("year id") > xx {
                    diff += p;
                } else {
                    diff -= p;
                }
            }
            diff
        }
    })
}

/// END-position logits `[N, V]`, computed in fixed-size batches.
pub fn end_logits(model: &TransformerModel, samples: &[PromptSample]) -> Result<Tensor> {
    let v = model.config().vocab_size;
    let mut data = Vec::with_capacity(samples.len() * v);
    for chunk in samples.chunks(EVAL_BATCH) {
        let batch = TokenBatch::from_samples(chunk)?;
        let ends: Vec<usize> = chunk.iter().map(|s| s.end()).collect();
        let out = model.run(&batch, &mut NoHook, &RunOptions::rows(end_rows(&batch, &ends)))?;
        data.extend_from_slice(out.data());
    }
    Ok(Tensor::new(vec![samples.len(), v], data)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric: Metric,
    pub mean: f64,
    pub per_sample: Vec<f64>,
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len().max(1) as f64
}

pub fn metric_from_logits(metric: Metric, samples: &[PromptSample], logits: &Tensor) -> Result<MetricReport> {
    let per_sample = samples
        .iter()
        .enumerate()
        .map(|(i, s)| sample_metric(metric, s, logits.row(&[i])))
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricReport { metric, mean: mean(&per_sample), per_sample })
}

pub fn eval_metric(model: &TransformerModel, d: &Dataset, metric: Metric) -> Result<MetricReport> {
    d.require_task(metric.task())?;
    let logits = end_logits(model, &d.samples)?;
    metric_from_logits(metric, &d.samples, &logits)
}

/// Mean over samples of the gap between the largest and fifth-largest name
/// logits at END.
pub fn top5_name_spread(model: &TransformerModel, d: &Dataset) -> Result<f64> {
    d.require_task(Task::Ioi)?;
    let logits = end_logits(model, &d.samples)?;
    let names = Vocabulary::standard().name_ids();
    let spreads: Vec<f64> = (0..d.len())
        .map(|i| {
            let row = logits.row(&[i]);
            let mut v: Vec<f64> = names.iter().map(|&n| row[n]).collect();
            v.sort_by(|a, b| b.total_cmp(a));
            v[0] - v[4]
        })
        .collect();
    Ok(mean(&spreads))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub metric: f64,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub metric: Metric,
    pub initial_metric: f64,
    pub epochs: Vec<EpochLog>,
}

/// Loss rows and targets for one batch.
fn loss_targets(batch: &TokenBatch, samples: &[&PromptSample], full: bool) -> (Vec<usize>, Vec<usize>) {
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    for (b, s) in samples.iter().enumerate() {
        if full {
            for t in 0..s.end() {
                rows.push(b * batch.seq + t);
                targets.push(s.tokens[t + 1]);
            }
        }
        rows.push(b * batch.seq + s.end());
        targets.push(s.label);
    }
    (rows, targets)
}

/// Loss and parameter gradients (canonical order) for one batch.
pub fn loss_and_grads(
    model: &TransformerModel,
    samples: &[&PromptSample],
    full_sequence: bool,
) -> Result<(f64, Vec<Tensor>)> {
    let seqs: Vec<&[usize]> = samples.iter().map(|s| s.tokens.as_slice()).collect();
    let batch = TokenBatch::new(&seqs)?;
    model.check_batch(&batch)?;
    let (rows, targets) = loss_targets(&batch, samples, full_sequence);
    let mut g = Graph::new();
    let w = model.weights().map(|t| g.param(t.clone()));
    let logits = forward_graph(&mut g, &w, model.config(), &batch, &mut NoHook, &RunOptions::rows(rows))?;
    let loss = g.cross_entropy(logits, &targets)?;
    let value = g.value(loss)?.item()?;
    let grads = g.backward(loss, &Tensor::scalar(1.0))?;
    let ordered = w
        .tensors()
        .iter()
        .map(|v| grads.get(v).cloned().ok_or_else(|| Error::Hyper("missing gradient".into())))
        .collect::<Result<Vec<_>>>()?;
    Ok((value, ordered))
}

fn clip(grads: &mut [Tensor], max_norm: f64) {
    let norm = grads.iter().flat_map(|g| g.data()).map(|v| v * v).sum::<f64>().sqrt();
    if norm > max_norm {
        let f = max_norm / norm;
        for g in grads {
            for v in g.data_mut() {
                *v *= f;
            }
        }
    }
}

/// Trains for `hyper.epochs` epochs on next-token cross-entropy at END.
///
/// The task metric is measured on `eval` before training and after every
/// epoch; `on_epoch` runs after each epoch's metric is logged.
pub fn fit(
    model: &mut TransformerModel,
    data: &Dataset,
    eval: &Dataset,
    hyper: &Hyper,
    mut on_epoch: impl FnMut(&TransformerModel, &EpochLog) -> Result<()>,
) -> Result<TrainLog> {
    hyper.validate()?;
    if data.is_empty() {
        return Err(Error::Dataset("cannot train on an empty dataset".into()));
    }
    let task = data.task()?;
    eval.require_task(task)?;
    let metric = Metric::default_for(task);
    let initial_metric = eval_metric(model, eval, metric)?.mean;
    let mut opt = AdamW::new(model);
    let mut log = TrainLog { metric, initial_metric, epochs: Vec::new() };
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 1..=hyper.epochs {
        let start = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
        rng.set_stream(epoch as u64);
        order.sort_unstable();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut steps = 0usize;
        for (step, chunk) in order.chunks(hyper.batch_size).enumerate() {
            let samples: Vec<&PromptSample> = chunk.iter().map(|&i| &data.samples[i]).collect();
            let (loss, mut grads) = match loss_and_grads(model, &samples, hyper.full_sequence_loss) {
                Err(Error::Tensor(milab_tensor::TensorError::NonFinite { .. })) => {
                    return Err(Error::NonFiniteLoss { epoch, step })
                }
                other => other?,
            };
            if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteLoss { epoch, step });
            }
            if let Some(c) = hyper.grad_clip {
                clip(&mut grads, c);
            }
            opt.step(model, &grads, hyper);
            total += loss;
            steps += 1;
        }
        let metric_value = eval_metric(model, eval, metric)?.mean;
        let entry = EpochLog {
            epoch,
            loss: total / steps as f64,
            metric: metric_value,
            wall_seconds: start.elapsed().as_secs_f64(),
        };
        on_epoch(model, &entry)?;
        log.epochs.push(entry);
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_greater_than, gen_ioi, Positions};
    use crate::model::ModelConfig;

    fn tiny() -> TransformerModel {
        TransformerModel::new(ModelConfig {
            n_layers: 1,
            n_heads: 2,
            d_model: 16,
            d_head: 8,
            d_mlp: 32,
            vocab_size: 384,
            max_seq: 24,
            seed: 3,
        })
        .unwrap()
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let mut m = tiny();
        let before = m.clone();
        let d = gen_ioi(40, 1).unwrap();
        let h = Hyper { learning_rate: 0.0, epochs: 3, batch_size: 8, ..Hyper::toy() };
        let log = fit(&mut m, &d, &d, &h, |_, _| Ok(())).unwrap();
        assert_eq!(m, before);
        // the shuffle changes the summation order, nothing else
        let l0 = log.epochs[0].loss;
        assert!(log.epochs.iter().all(|e| (e.loss - l0).abs() < 1e-12));
        assert_eq!(log.epochs.len(), 3);
    }

    #[test]
    fn weight_decay_is_geometric_without_gradients() {
        let mut m = tiny();
        let before = m.clone();
        let h = Hyper { learning_rate: 0.01, weight_decay: 0.1, ..Hyper::toy() };
        let zeros: Vec<Tensor> = m.weights().tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        let mut opt = AdamW::new(&m);
        for _ in 0..5 {
            opt.step(&mut m, &zeros, &h);
        }
        let f = (1.0f64 - 0.01 * 0.1).powi(5);
        for (a, b) in m.weights().tensors().iter().zip(before.weights().tensors()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y * f).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn training_is_deterministic() {
        let d = gen_ioi(30, 2).unwrap();
        let h = Hyper { epochs: 2, batch_size: 7, ..Hyper::toy() };
        let run = || {
            let mut m = tiny();
            fit(&mut m, &d, &d, &h, |_, _| Ok(())).unwrap();
            m.payload()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn empty_and_mismatched_data_are_rejected() {
        let mut m = tiny();
        let d = gen_ioi(5, 2).unwrap();
        let empty = Dataset { samples: vec![], ..d.clone() };
        assert!(fit(&mut m, &empty, &d, &Hyper::toy(), |_, _| Ok(())).is_err());
        let g = gen_greater_than(5, 2).unwrap();
        assert!(matches!(fit(&mut m, &d, &g, &Hyper::toy(), |_, _| Ok(())), Err(Error::TaskMismatch(_))));
        assert!(matches!(eval_metric(&m, &g, Metric::LogitDiff), Err(Error::TaskMismatch(_))));
    }

    #[test]
    fn non_finite_weights_abort_with_diagnostic() {
        let mut m = tiny();
        m.weights_mut().w_u.data_mut()[0] = f64::NAN;
        let d = gen_ioi(5, 2).unwrap();
        let h = Hyper { epochs: 1, ..Hyper::toy() };
        let mut ran = false;
        let err = fit(&mut m, &d, &gen_ioi(1, 9).unwrap(), &h, |_, _| {
            ran = true;
            Ok(())
        });
        assert!(err.is_err());
        assert!(err.unwrap_err().is_numeric());
        assert!(!ran);
    }

    fn gt_sample(xx: u32) -> PromptSample {
        let mut s = gen_greater_than(1, 0).unwrap().samples.remove(0);
        s.xx = Some(xx);
        s.positions = Positions { xx: s.positions.xx, ..s.positions };
        s
    }

    #[test]
    fn prob_diff_closed_forms() {
        let vocab = Vocabulary::standard();
        let s = gt_sample(50);
        // uniform over the full vocabulary: 48 greater years minus 49 others
        let uniform = vec![0.0; 384];
        let expect = (48.0 - 49.0) / 384.0;
        assert!((sample_metric(Metric::ProbDiff, &s, &uniform).unwrap() - expect).abs() < 1e-15);
        // uniform over year tokens only
        let mut years = vec![-1e4; 384];
        for &id in vocab.year_ids() {
            years[id] = 0.0;
        }
        let expect = (48.0 - 49.0) / 97.0;
        assert!((sample_metric(Metric::ProbDiff, &s, &years).unwrap() - expect).abs() < 1e-12);
        // all mass on a later year
        let mut peak = vec![-1e4; 384];
        peak[vocab.year_id(77).unwrap()] = 0.0;
        assert!((sample_metric(Metric::ProbDiff, &s, &peak).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn uniform_logits_give_zero_logit_diff_and_chance_accuracy() {
        let s = &gen_ioi(1, 0).unwrap().samples[0];
        let row = vec![0.25; 384];
        assert_eq!(sample_metric(Metric::LogitDiff, s, &row).unwrap(), 0.0);
        let mut row = vec![0.0; 384];
        row[s.io_token().unwrap()] = 1.0;
        assert_eq!(sample_metric(Metric::Accuracy, s, &row).unwrap(), 1.0);
        row[s.s_token().unwrap()] = 2.0;
        assert_eq!(sample_metric(Metric::Accuracy, s, &row).unwrap(), 0.0);
    }

    #[test]
    fn full_sequence_loss_covers_every_position() {
        let d = gen_ioi(3, 0).unwrap();
        let refs: Vec<&PromptSample> = d.samples.iter().collect();
        let batch = TokenBatch::from_samples(&d.samples).unwrap();
        let (rows, targets) = loss_targets(&batch, &refs, true);
        let total: usize = d.samples.iter().map(|s| s.len()).sum();
        assert_eq!(rows.len(), total);
        assert_eq!(targets.len(), total);
        let (rows, _) = loss_targets(&batch, &refs, false);
        assert_eq!(rows.len(), 3);
    }
}
