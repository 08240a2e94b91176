// SPDX-License-Identifier: MIT OR Apache-2.0

//! Interventions: mean-ablation knockout, activation patching, three-pass
//! path patching and cross-model activation patching.

use std::collections::BTreeMap;
use std::fmt;
use std::ops::Range;

use milab_tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::data::{self, Dataset, PositionRole, PromptSample, Task};
use crate::error::{Error, Result};
use crate::model::{
    end_rows, CacheHook, Chain, HeadRef, Hook, HookPoint, ModelConfig, NodeRef, Output, RunOptions, TokenBatch,
    TransformerModel,
};
use crate::train::{metric_from_logits, Metric, MetricReport, EVAL_BATCH};

/// Effects smaller than this fraction of the baseline metric are noise.
pub const NOISE_FLOOR: f64 = 0.02;

/// Reference samples per template for mean ablation.
pub const MEAN_REFERENCE_PER_TEMPLATE: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricDelta {
    pub metric: Metric,
    pub baseline: f64,
    pub patched: f64,
    pub delta: f64,
}

impl MetricDelta {
    pub fn new(metric: Metric, baseline: f64, patched: f64) -> Self {
        MetricDelta { metric, baseline, patched, delta: patched - baseline }
    }

    /// Whether `|delta|` clears the noise floor relative to the baseline.
    pub fn significant(&self) -> bool {
        self.delta.abs() >= NOISE_FLOOR * self.baseline.abs()
    }
}

/// Mean node outputs for one template.
#[derive(Debug, Clone, PartialEq)]
pub struct TemplateMeans {
    pub seq_len: usize,
    pub count: usize,
    /// `[S, d]`
    pub embed: Tensor,
    /// `[L, H, S, d]`
    pub head_result: Tensor,
    /// `[L, S, d]`
    pub mlp_out: Tensor,
}

/// Mean node outputs per (template, position) over a reference dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanCache {
    pub task: Task,
    pub reference_size: usize,
    pub templates: BTreeMap<usize, TemplateMeans>,
}

impl MeanCache {
    /// Mean output row of `node` at `pos` for the sample's template.
    pub fn row(&self, sample: &PromptSample, node: NodeRef, pos: usize) -> Result<&[f64]> {
        let missing = || Error::MissingMean(format!("{node} at template {} position {pos}", sample.template_id));
        let t = self.templates.get(&sample.template_id).ok_or_else(missing)?;
        if pos >= t.seq_len || sample.task != self.task {
            return Err(missing());
        }
        Ok(match node {
            NodeRef::Embed => t.embed.row(&[pos]),
            NodeRef::Head(h) => t.head_result.row(&[h.layer, h.head, pos]),
            NodeRef::Mlp(l) => t.mlp_out.row(&[l, pos]),
        })
    }
}

/// The default reference distribution: fresh clean prompts, the same number
/// for every template.
pub fn reference_dataset(task: Task, per_template: usize, seed: u64) -> Result<Dataset> {
    match task {
        Task::Ioi => data::gen_ioi_per_template(per_template, seed),
        Task::GreaterThan => data::gen_greater_than(per_template, seed),
    }
}

fn node_cache_filter(p: HookPoint) -> bool {
    matches!(p, HookPoint::Embed | HookPoint::HeadResult(_) | HookPoint::MlpOut(_))
}

/// Averages node outputs per template and aligned position, summing samples
/// in dataset order.
pub fn compute_mean_cache(model: &TransformerModel, reference: &Dataset) -> Result<MeanCache> {
    let task = reference.task()?;
    let cfg = model.config();
    let (l, h, d) = (cfg.n_layers, cfg.n_heads, cfg.d_model);
    let mut groups: BTreeMap<usize, Vec<&PromptSample>> = BTreeMap::new();
    for s in &reference.samples {
        groups.entry(s.template_id).or_default().push(s);
    }
    let mut templates = BTreeMap::new();
    for (tid, samples) in groups {
        let seq_len = samples[0].len();
        if samples.iter().any(|s| s.len() != seq_len) {
            return Err(Error::Dataset(format!("template {tid} has samples of different lengths")));
        }
        let mut m = TemplateMeans {
            seq_len,
            count: samples.len(),
            embed: Tensor::zeros(&[seq_len, d]),
            head_result: Tensor::zeros(&[l, h, seq_len, d]),
            mlp_out: Tensor::zeros(&[l, seq_len, d]),
        };
        for chunk in samples.chunks(EVAL_BATCH) {
            let seqs: Vec<&[usize]> = chunk.iter().map(|s| s.tokens.as_slice()).collect();
            let batch = TokenBatch::new(&seqs)?;
            let mut rec = CacheHook::only(node_cache_filter);
            model.run(&batch, &mut rec, &RunOptions { output: Output::Residual, start: None, stop_after: None })?;
            let cache = rec.into_cache();
            let embed = cache.embed()?;
            for b in 0..chunk.len() {
                for p in 0..seq_len {
                    add_into(m.embed.row_mut(&[p]), embed.row(&[b, p]));
                }
            }
            for layer in 0..l {
                let (res, mlp) = (cache.result(layer)?, cache.mlp_out(layer)?);
                for b in 0..chunk.len() {
                    for p in 0..seq_len {
                        for head in 0..h {
                            add_into(m.head_result.row_mut(&[layer, head, p]), res.row(&[b, head, p]));
                        }
                        add_into(m.mlp_out.row_mut(&[layer, p]), mlp.row(&[b, p]));
                    }
                }
            }
        }
        let n = m.count as f64;
        for t in [&mut m.embed, &mut m.head_result, &mut m.mlp_out] {
            for v in t.data_mut() {
                *v /= n;
            }
        }
        templates.insert(tid, m);
    }
    Ok(MeanCache { task, reference_size: reference.len(), templates })
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// One row overwrite at a hook point.
#[derive(Debug, Clone, Copy)]
pub struct Substitution<'a> {
    pub b: usize,
    pub head: Option<usize>,
    pub pos: usize,
    pub row: &'a [f64],
}

/// Overwrites rows of activations with borrowed values.
#[derive(Default)]
pub struct SubstituteHook<'a> {
    subs: BTreeMap<HookPoint, Vec<Substitution<'a>>>,
}

impl<'a> SubstituteHook<'a> {
    pub fn push(&mut self, point: HookPoint, sub: Substitution<'a>) {
        self.subs.entry(point).or_default().push(sub);
    }

    pub fn is_empty(&self) -> bool {
        self.subs.is_empty()
    }

    /// Earliest layer touched, if any.
    pub fn first_layer(&self) -> Option<usize> {
        self.subs.keys().map(|p| p.layer().unwrap_or(0)).min()
    }
}

impl Hook for SubstituteHook<'_> {
    fn visit(&mut self, point: HookPoint, value: &Tensor) -> Result<Option<Tensor>> {
        let Some(list) = self.subs.get(&point) else {
            return Ok(None);
        };
        let mut t = value.clone();
        for s in list {
            let dst = match s.head {
                Some(h) => t.row_mut(&[s.b, h, s.pos]),
                None => t.row_mut(&[s.b, s.pos]),
            };
            dst.copy_from_slice(s.row);
        }
        Ok(Some(t))
    }
}

fn node_point(node: NodeRef) -> (HookPoint, Option<usize>) {
    match node {
        NodeRef::Embed => (HookPoint::Embed, None),
        NodeRef::Head(h) => (HookPoint::HeadResult(h.layer), Some(h.head)),
        NodeRef::Mlp(l) => (HookPoint::MlpOut(l), None),
    }
}

/// A node output at a set of positions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeAt {
    pub node: NodeRef,
    pub positions: PositionRole,
}

impl NodeAt {
    pub fn new(node: NodeRef, positions: PositionRole) -> Self {
        NodeAt { node, positions }
    }
}

impl fmt::Display for NodeAt {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}@{}", self.node, self.positions)
    }
}

/// Per-sample node-position sets to mean-ablate.
pub type AblationSelector<'s> = dyn Fn(&PromptSample) -> Result<Vec<(NodeRef, Vec<usize>)>> + 's;

/// Evaluates the task metric with selected node outputs replaced by means.
pub fn ablated_metric(
    model: &TransformerModel,
    d: &Dataset,
    means: &MeanCache,
    select: &AblationSelector<'_>,
) -> Result<MetricReport> {
    let task = d.task()?;
    let metric = Metric::default_for(task);
    let mut per_sample = Vec::with_capacity(d.len());
    for chunk in d.samples.chunks(EVAL_BATCH) {
        let batch = TokenBatch::from_samples(chunk)?;
        let mut hook = SubstituteHook::default();
        for (b, s) in chunk.iter().enumerate() {
            for (node, positions) in select(s)? {
                node.check(model.config())?;
                let (point, head) = node_point(node);
                for pos in positions {
                    hook.push(point, Substitution { b, head, pos, row: means.row(s, node, pos)? });
                }
            }
        }
        let ends: Vec<usize> = chunk.iter().map(|s| s.end()).collect();
        let logits = model.run(&batch, &mut hook, &RunOptions::rows(end_rows(&batch, &ends)))?;
        per_sample.extend(metric_from_logits(metric, chunk, &logits)?.per_sample);
    }
    Ok(MetricReport { metric, mean: crate::train::mean(&per_sample), per_sample })
}

/// Mean task metric with every node in `k` mean-ablated at its positions.
pub fn knockout(model: &TransformerModel, d: &Dataset, k: &[NodeAt], means: &MeanCache) -> Result<f64> {
    Ok(knockout_report(model, d, k, means)?.mean)
}

pub fn knockout_report(
    model: &TransformerModel,
    d: &Dataset,
    k: &[NodeAt],
    means: &MeanCache,
) -> Result<MetricReport> {
    let select = |s: &PromptSample| -> Result<Vec<(NodeRef, Vec<usize>)>> {
        k.iter().map(|n| Ok((n.node, s.resolve(n.positions)?))).collect()
    };
    ablated_metric(model, d, means, &select)
}

/// A site to patch in activation patching.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActSite {
    pub point: HookPoint,
    pub head: Option<usize>,
    pub positions: PositionRole,
}

impl ActSite {
    pub fn node(node: NodeRef, positions: PositionRole) -> Self {
        let (point, head) = node_point(node);
        ActSite { point, head, positions }
    }
}

fn check_pair(x_orig: &Dataset, x_new: &Dataset) -> Result<()> {
    if x_orig.len() != x_new.len() {
        return Err(Error::Patch(format!("{} original vs {} new samples", x_orig.len(), x_new.len())));
    }
    for (i, (a, b)) in x_orig.samples.iter().zip(&x_new.samples).enumerate() {
        if a.len() != b.len() {
            return Err(Error::Patch(format!("sample {i}: lengths {} and {} differ", a.len(), b.len())));
        }
    }
    x_orig.task()?;
    Ok(())
}

/// Runs `x_orig` with the listed sites overwritten by values cached on
/// `x_new`; the metric is read with `x_orig`'s labels.
pub fn activation_patch(
    model: &TransformerModel,
    x_orig: &Dataset,
    x_new: &Dataset,
    sites: &[ActSite],
) -> Result<MetricDelta> {
    check_pair(x_orig, x_new)?;
    let metric = Metric::default_for(x_orig.task()?);
    let (mut base, mut patched) = (Vec::new(), Vec::new());
    for range in chunk_ranges(x_orig.len()) {
        let orig = &x_orig.samples[range.clone()];
        let batch = TokenBatch::from_samples(orig)?;
        let new_batch = TokenBatch::from_samples(&x_new.samples[range])?;
        for s in sites {
            s.point.check(model.config())?;
        }
        let points: Vec<HookPoint> = sites.iter().map(|s| s.point).collect();
        let mut rec = CacheHook::only(move |p| points.contains(&p));
        model.run(&new_batch, &mut rec, &RunOptions { output: Output::Residual, start: None, stop_after: None })?;
        let new_cache = rec.into_cache();
        let mut hook = SubstituteHook::default();
        for site in sites {
            let src = new_cache.get(site.point)?;
            for (b, s) in orig.iter().enumerate() {
                for pos in s.resolve(site.positions)? {
                    let row = match site.head {
                        Some(h) => src.row(&[b, h, pos]),
                        None => src.row(&[b, pos]),
                    };
                    hook.push(site.point, Substitution { b, head: site.head, pos, row });
                }
            }
        }
        let ends: Vec<usize> = orig.iter().map(|s| s.end()).collect();
        let rows = RunOptions::rows(end_rows(&batch, &ends));
        let clean = model.run(&batch, &mut crate::model::NoHook, &rows)?;
        let out = model.run(&batch, &mut hook, &rows)?;
        base.extend(metric_from_logits(metric, orig, &clean)?.per_sample);
        patched.extend(metric_from_logits(metric, orig, &out)?.per_sample);
    }
    Ok(MetricDelta::new(metric, crate::train::mean(&base), crate::train::mean(&patched)))
}

fn chunk_ranges(n: usize) -> Vec<Range<usize>> {
    (0..n).step_by(EVAL_BATCH).map(|s| s..(s + EVAL_BATCH).min(n)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QkvSite {
    Q,
    K,
    V,
}

impl QkvSite {
    pub const ALL: [QkvSite; 3] = [QkvSite::Q, QkvSite::K, QkvSite::V];

    fn point(self, layer: usize) -> HookPoint {
        match self {
            QkvSite::Q => HookPoint::Q(layer),
            QkvSite::K => HookPoint::K(layer),
            QkvSite::V => HookPoint::V(layer),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Receiver {
    Logits,
    Head { head: HeadRef, site: QkvSite, positions: PositionRole },
    /// The MLP's normalised input.
    Mlp { layer: usize, positions: PositionRole },
}

impl Receiver {
    fn layer(&self) -> Option<usize> {
        match self {
            Receiver::Logits => None,
            Receiver::Head { head, .. } => Some(head.layer),
            Receiver::Mlp { layer, .. } => Some(*layer),
        }
    }

    /// Whether `sender` writes into this receiver's input through the
    /// residual stream.
    pub fn downstream_of(&self, sender: NodeRef) -> bool {
        match (self, sender) {
            (Receiver::Logits, _) | (_, NodeRef::Embed) => true,
            (Receiver::Head { head, .. }, s) => s.layer().is_some_and(|l| l < head.layer),
            (Receiver::Mlp { layer, .. }, NodeRef::Head(h)) => h.layer <= *layer,
            (Receiver::Mlp { layer, .. }, NodeRef::Mlp(l)) => l < *layer,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchSpec {
    pub sender: NodeRef,
    pub sender_positions: PositionRole,
    pub receivers: Vec<Receiver>,
}

impl PatchSpec {
    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        self.sender.check(cfg)?;
        if self.receivers.is_empty() {
            return Err(Error::Patch("no receivers".into()));
        }
        let logits = self.receivers.iter().any(|r| matches!(r, Receiver::Logits));
        if logits && self.receivers.len() > 1 {
            return Err(Error::Patch("final logits cannot be combined with other receivers".into()));
        }
        for r in &self.receivers {
            match r {
                Receiver::Head { head, .. } => head.check(cfg)?,
                Receiver::Mlp { layer, .. } => NodeRef::Mlp(*layer).check(cfg)?,
                Receiver::Logits => {}
            }
            if !r.downstream_of(self.sender) {
                return Err(Error::Patch(format!("receiver {r:?} is not downstream of {}", self.sender)));
            }
        }
        Ok(())
    }
}

struct PatchChunk {
    range: Range<usize>,
    batch: TokenBatch,
    orig: crate::model::ActivationCache,
    new: crate::model::ActivationCache,
}

/// Cached clean and counterfactual runs shared by many path patches over the
/// same `(x_orig, x_new)` pair.
pub struct PatchContext<'a> {
    model: &'a TransformerModel,
    orig: &'a Dataset,
    metric: Metric,
    chunks: Vec<PatchChunk>,
    pub baseline: MetricReport,
}

impl<'a> PatchContext<'a> {
    pub fn new(model: &'a TransformerModel, x_orig: &'a Dataset, x_new: &Dataset) -> Result<Self> {
        check_pair(x_orig, x_new)?;
        let metric = Metric::default_for(x_orig.task()?);
        let mut chunks = Vec::new();
        let mut base = Vec::new();
        for range in chunk_ranges(x_orig.len()) {
            let samples = &x_orig.samples[range.clone()];
            let batch = TokenBatch::from_samples(samples)?;
            let new_batch = TokenBatch::from_samples(&x_new.samples[range.clone()])?;
            let ends: Vec<usize> = samples.iter().map(|s| s.end()).collect();
            let mut rec = CacheHook::only(|p| node_cache_filter(p) || matches!(p, HookPoint::ResidPre(_)));
            let logits = model.run(&batch, &mut rec, &RunOptions::rows(end_rows(&batch, &ends)))?;
            base.extend(metric_from_logits(metric, samples, &logits)?.per_sample);
            let mut rec_new = CacheHook::only(node_cache_filter);
            model.run(&new_batch, &mut rec_new, &RunOptions { output: Output::Residual, start: None, stop_after: None })?;
            chunks.push(PatchChunk { range, batch, orig: rec.into_cache(), new: rec_new.into_cache() });
        }
        let baseline = MetricReport { metric, mean: crate::train::mean(&base), per_sample: base };
        Ok(PatchContext { model, orig: x_orig, metric, chunks, baseline })
    }

    pub fn metric(&self) -> Metric {
        self.metric
    }

    /// Three-pass path patch of `spec`.
    pub fn path_patch(&self, spec: &PatchSpec) -> Result<MetricDelta> {
        let report = self.path_patch_report(spec)?;
        Ok(MetricDelta::new(self.metric, self.baseline.mean, report.mean))
    }

    pub fn path_patch_report(&self, spec: &PatchSpec) -> Result<MetricReport> {
        let cfg = self.model.config();
        spec.validate(cfg)?;
        let mut per_sample = Vec::with_capacity(self.orig.len());
        for chunk in &self.chunks {
            let samples = &self.orig.samples[chunk.range.clone()];
            let ends: Vec<usize> = samples.iter().map(|s| s.end()).collect();
            let rows = end_rows(&chunk.batch, &ends);

            // pass 2: sender from x_new, later heads frozen to x_orig, MLPs recompute
            let mut hook = SubstituteHook::default();
            let sender_layer = spec.sender.layer();
            let (sender_point, sender_head) = node_point(spec.sender);
            let sender_src = chunk.new.get(sender_point)?;
            for (b, s) in samples.iter().enumerate() {
                for pos in s.resolve(spec.sender_positions)? {
                    let row = match sender_head {
                        Some(h) => sender_src.row(&[b, h, pos]),
                        None => sender_src.row(&[b, pos]),
                    };
                    hook.push(sender_point, Substitution { b, head: sender_head, pos, row });
                }
            }
            let freeze_from = sender_layer.map_or(0, |l| l + 1);
            for layer in freeze_from..cfg.n_layers {
                let res = chunk.orig.result(layer)?;
                for b in 0..samples.len() {
                    for h in 0..cfg.n_heads {
                        for pos in 0..chunk.batch.seq {
                            let row = res.row(&[b, h, pos]);
                            hook.push(HookPoint::HeadResult(layer), Substitution { b, head: Some(h), pos, row });
                        }
                    }
                }
            }
            let start = match sender_layer {
                Some(l) => Some((l, chunk.orig.resid_pre(l)?.clone())),
                None => None,
            };

            if spec.receivers == [Receiver::Logits] {
                let opts = RunOptions { output: Output::Rows(rows), start, stop_after: None };
                let logits = self.model.run(&chunk.batch, &mut hook, &opts)?;
                per_sample.extend(metric_from_logits(self.metric, samples, &logits)?.per_sample);
                continue;
            }

            let max_layer = spec.receivers.iter().filter_map(Receiver::layer).max().expect("receivers");
            let points: Vec<HookPoint> = spec
                .receivers
                .iter()
                .map(|r| match r {
                    Receiver::Head { head, site, .. } => site.point(head.layer),
                    Receiver::Mlp { layer, .. } => HookPoint::MlpIn(*layer),
                    Receiver::Logits => unreachable!(),
                })
                .collect();
            let wanted = points.clone();
            let mut rec = CacheHook::only(move |p| wanted.contains(&p));
            let opts = RunOptions { output: Output::Residual, start, stop_after: Some(max_layer) };
            self.model.run(&chunk.batch, &mut Chain(&mut hook, &mut rec), &opts)?;
            let recorded = rec.into_cache();

            // pass 3: only the receivers' inputs take the recorded values
            let mut hook3 = SubstituteHook::default();
            for (r, point) in spec.receivers.iter().zip(&points) {
                let src = recorded.get(*point)?;
                let (head, role) = match r {
                    Receiver::Head { head, positions, .. } => (Some(head.head), *positions),
                    Receiver::Mlp { positions, .. } => (None, *positions),
                    Receiver::Logits => unreachable!(),
                };
                for (b, s) in samples.iter().enumerate() {
                    for pos in s.resolve(role)? {
                        let row = match head {
                            Some(h) => src.row(&[b, h, pos]),
                            None => src.row(&[b, pos]),
                        };
                        hook3.push(*point, Substitution { b, head, pos, row });
                    }
                }
            }
            let first = hook3.first_layer().unwrap_or(0);
            let opts = RunOptions {
                output: Output::Rows(rows),
                start: Some((first, chunk.orig.resid_pre(first)?.clone())),
                stop_after: None,
            };
            let logits = self.model.run(&chunk.batch, &mut hook3, &opts)?;
            per_sample.extend(metric_from_logits(self.metric, samples, &logits)?.per_sample);
        }
        Ok(MetricReport { metric: self.metric, mean: crate::train::mean(&per_sample), per_sample })
    }
}

pub fn path_patch(
    model: &TransformerModel,
    x_orig: &Dataset,
    x_new: &Dataset,
    spec: &PatchSpec,
) -> Result<MetricDelta> {
    PatchContext::new(model, x_orig, x_new)?.path_patch(spec)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CmapMode {
    /// Overwrite attention probabilities.
    Pattern,
    /// Overwrite head outputs.
    Output,
}

impl std::str::FromStr for CmapMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pattern" => Ok(CmapMode::Pattern),
            "output" => Ok(CmapMode::Output),
            other => Err(Error::Patch(format!("unknown CMAP mode {other:?}"))),
        }
    }
}

fn same_architecture(a: &ModelConfig, b: &ModelConfig) -> bool {
    ModelConfig { seed: 0, ..a.clone() } == ModelConfig { seed: 0, ..b.clone() }
}

/// Cross-model activation patching: every head set in `head_sets` is patched
/// jointly from `donor` into `base` on the same inputs, one set at a time.
pub fn cmap(
    base: &TransformerModel,
    donor: &TransformerModel,
    d: &Dataset,
    head_sets: &[Vec<HeadRef>],
    mode: CmapMode,
) -> Result<Vec<MetricDelta>> {
    if !same_architecture(base.config(), donor.config()) {
        return Err(Error::Patch("base and donor configs differ".into()));
    }
    for h in head_sets.iter().flatten() {
        h.check(base.config())?;
    }
    let metric = Metric::default_for(d.task()?);
    let mut base_vals = Vec::new();
    let mut patched: Vec<Vec<f64>> = vec![Vec::new(); head_sets.len()];
    let site = |l| match mode {
        CmapMode::Pattern => HookPoint::Pattern(l),
        CmapMode::Output => HookPoint::HeadResult(l),
    };
    for range in chunk_ranges(d.len()) {
        let samples = &d.samples[range];
        let batch = TokenBatch::from_samples(samples)?;
        let ends: Vec<usize> = samples.iter().map(|s| s.end()).collect();
        let rows = RunOptions::rows(end_rows(&batch, &ends));
        let mut rec = CacheHook::only(move |p| matches!(p, HookPoint::Pattern(_) | HookPoint::HeadResult(_)));
        donor.run(&batch, &mut rec, &RunOptions { output: Output::Residual, start: None, stop_after: None })?;
        let donor_cache = rec.into_cache();
        let clean = base.run(&batch, &mut crate::model::NoHook, &rows)?;
        base_vals.extend(metric_from_logits(metric, samples, &clean)?.per_sample);
        for (set, out) in head_sets.iter().zip(&mut patched) {
            let mut hook = SubstituteHook::default();
            for h in set {
                let src = donor_cache.get(site(h.layer))?;
                for (b, s) in samples.iter().enumerate() {
                    for pos in 0..s.len() {
                        let row = src.row(&[b, h.head, pos]);
                        hook.push(site(h.layer), Substitution { b, head: Some(h.head), pos, row });
                    }
                }
            }
            let logits = base.run(&batch, &mut hook, &rows)?;
            out.extend(metric_from_logits(metric, samples, &logits)?.per_sample);
        }
    }
    let b = crate::train::mean(&base_vals);
    Ok(patched.iter().map(|p| MetricDelta::new(metric, b, crate::train::mean(p))).collect())
}

pub fn cmap_pattern(
    base: &TransformerModel,
    donor: &TransformerModel,
    d: &Dataset,
    heads: &[HeadRef],
) -> Result<MetricDelta> {
    Ok(cmap(base, donor, d, &[heads.to_vec()], CmapMode::Pattern)?[0])
}

pub fn cmap_output(
    base: &TransformerModel,
    donor: &TransformerModel,
    d: &Dataset,
    heads: &[HeadRef],
) -> Result<MetricDelta> {
    Ok(cmap(base, donor, d, &[heads.to_vec()], CmapMode::Output)?[0])
}
