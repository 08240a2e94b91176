// SPDX-License-Identifier: MIT OR Apache-2.0

//! Diagnostics on trained models: direct logit attribution, attention versus
//! projection scatter data, attention differences between models, group
//! ablations, logit lens grids and self-repair.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::circuit::{Circuit, RoleClass};
use crate::data::{Dataset, PositionRole, PromptSample, Task, Vocabulary};
use crate::error::{Error, Result};
use crate::model::{dot, CacheHook, Chain, HeadRef, HookPoint, ModelConfig, NodeRef, Output, RunOptions, TokenBatch, TransformerModel};
use crate::patch::{knockout, MeanCache, NodeAt, SubstituteHook, Substitution};
use crate::train::{mean, EVAL_BATCH};

/// Formats a float with 17 significant digits.
pub fn fmt_float(x: f64) -> String {
    format!("{x:.16e}")
}

fn check_same_architecture(a: &ModelConfig, b: &ModelConfig) -> Result<()> {
    if (ModelConfig { seed: 0, ..a.clone() }) != (ModelConfig { seed: 0, ..b.clone() }) {
        return Err(Error::Config("models have different architectures".into()));
    }
    Ok(())
}

/// Builds the hook that mean-ablates `nodes` for the samples of one chunk.
fn ablation_hook<'a>(
    chunk: &[PromptSample],
    nodes: &[NodeAt],
    means: Option<&'a MeanCache>,
) -> Result<SubstituteHook<'a>> {
    let mut hook = SubstituteHook::default();
    if nodes.is_empty() {
        return Ok(hook);
    }
    let means = means.ok_or_else(|| Error::MissingMean("no mean cache for ablation".into()))?;
    for (b, s) in chunk.iter().enumerate() {
        for n in nodes {
            let (point, head) = match n.node {
                NodeRef::Embed => (HookPoint::Embed, None),
                NodeRef::Head(h) => (HookPoint::HeadResult(h.layer), Some(h.head)),
                NodeRef::Mlp(l) => (HookPoint::MlpOut(l), None),
            };
            for pos in s.resolve(n.positions)? {
                hook.push(point, Substitution { b, head, pos, row: means.row(s, n.node, pos)? });
            }
        }
    }
    Ok(hook)
}

/// Tokens whose logit difference is attributed: IO over S for IOI, and the
/// label year over the XX year for greater-than.
pub fn attribution_tokens(s: &PromptSample) -> Result<(usize, usize)> {
    match s.task {
        Task::Ioi => Ok((s.io_token()?, s.s_token()?)),
        Task::GreaterThan => {
            let xx = s.xx.ok_or_else(|| Error::Dataset("greater-than sample without XX".into()))?;
            Ok((s.label, Vocabulary::standard().year_id(xx)?))
        }
    }
}

/// Mean END-position attribution of every node to the logit difference of
/// [`attribution_tokens`].
#[derive(Debug, Clone, PartialEq)]
pub struct Attribution {
    pub per_node: BTreeMap<NodeRef, f64>,
    pub logit_diff: f64,
}

impl Attribution {
    pub fn get(&self, node: NodeRef) -> f64 {
        self.per_node.get(&node).copied().unwrap_or(0.0)
    }
}

/// Direct logit attribution of every node with the final layer-norm scale
/// frozen, optionally after mean-ablating `ablate`.
pub fn end_attributions(
    model: &TransformerModel,
    d: &Dataset,
    ablate: &[NodeAt],
    means: Option<&MeanCache>,
) -> Result<Attribution> {
    d.task()?;
    let nodes = NodeRef::all(model.config());
    let mut sums: Vec<Vec<f64>> = vec![Vec::with_capacity(d.len()); nodes.len()];
    let mut diffs = Vec::with_capacity(d.len());
    for chunk in d.samples.chunks(EVAL_BATCH) {
        let batch = TokenBatch::from_samples(chunk)?;
        let mut sub = ablation_hook(chunk, ablate, means)?;
        let mut rec = CacheHook::only(|p| {
            matches!(p, HookPoint::Embed | HookPoint::HeadResult(_) | HookPoint::MlpOut(_) | HookPoint::FinalResid)
        });
        let logits = model.run(&batch, &mut Chain(&mut sub, &mut rec), &RunOptions::logits())?;
        let cache = rec.into_cache();
        let scale = cache.final_scale()?;
        for (b, s) in chunk.iter().enumerate() {
            let (io, st) = attribution_tokens(s)?;
            let dir: Vec<f64> = model
                .unembed_direction(io)?
                .iter()
                .zip(model.unembed_direction(st)?)
                .map(|(a, b)| a - b)
                .collect();
            let inv = scale.get(&[b, s.end()]);
            for (i, &n) in nodes.iter().enumerate() {
                sums[i].push(inv * dot(cache.node_output(n, b, s.end())?, &dir));
            }
            let row = logits.row(&[b, s.end()]);
            diffs.push(row[io] - row[st]);
        }
    }
    let per_node = nodes.into_iter().zip(sums).map(|(n, v)| (n, mean(&v))).collect();
    Ok(Attribution { per_node, logit_diff: mean(&diffs) })
}

/// Mean direct logit attribution of one node at END; positive favours IO.
pub fn logit_attribution(model: &TransformerModel, d: &Dataset, node: NodeRef) -> Result<f64> {
    d.require_task(Task::Ioi)?;
    node.check(model.config())?;
    Ok(end_attributions(model, d, &[], None)?.get(node))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum NameToken {
    #[serde(rename = "IO")]
    Io,
    #[serde(rename = "S")]
    S,
}

impl NameToken {
    pub fn as_str(self) -> &'static str {
        match self {
            NameToken::Io => "IO",
            NameToken::S => "S",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScatterPoint {
    pub sample: usize,
    pub token: NameToken,
    /// Attention from END to the token's positions (S counts both copies).
    pub attention: f64,
    /// Projection of the head's END output onto the token's unembedding.
    pub projection: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScatterData {
    pub head: HeadRef,
    pub model_tag: String,
    pub points: Vec<ScatterPoint>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScatterSummary {
    pub mean_attention: f64,
    pub mean_projection: f64,
}

impl ScatterData {
    pub fn summary(&self, token: NameToken) -> ScatterSummary {
        let pts: Vec<&ScatterPoint> = self.points.iter().filter(|p| p.token == token).collect();
        let att: Vec<f64> = pts.iter().map(|p| p.attention).collect();
        let proj: Vec<f64> = pts.iter().map(|p| p.projection).collect();
        ScatterSummary { mean_attention: mean(&att), mean_projection: mean(&proj) }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("sample,token,attention,projection\n");
        for p in &self.points {
            let _ = writeln!(
                out,
                "{},{},{},{}",
                p.sample,
                p.token.as_str(),
                fmt_float(p.attention),
                fmt_float(p.projection)
            );
        }
        out
    }
}

/// Per-sample END attention to IO and S against the head's projection on
/// each token.
pub fn attn_vs_projection(model: &TransformerModel, d: &Dataset, h: HeadRef, model_tag: &str) -> Result<ScatterData> {
    d.require_task(Task::Ioi)?;
    h.check(model.config())?;
    let mut points = Vec::with_capacity(2 * d.len());
    let mut offset = 0;
    for chunk in d.samples.chunks(EVAL_BATCH) {
        let batch = TokenBatch::from_samples(chunk)?;
        let layer = h.layer;
        let mut rec = CacheHook::only(move |p| {
            p == HookPoint::Pattern(layer) || p == HookPoint::HeadResult(layer) || p == HookPoint::FinalResid
        });
        model.run(&batch, &mut rec, &RunOptions { output: Output::Residual, start: None, stop_after: None })?;
        let cache = rec.into_cache();
        let scale = cache.final_scale()?;
        let pattern = cache.pattern(layer)?;
        let result = cache.result(layer)?;
        for (b, s) in chunk.iter().enumerate() {
            let end = s.end();
            let att = pattern.row(&[b, h.head, end]);
            let out = result.row(&[b, h.head, end]);
            let inv = scale.get(&[b, end]);
            let io_att = att[s.io_pos()?];
            let s_att = att[s.s1_pos()?] + att[s.s2_pos()?];
            points.push(ScatterPoint {
                sample: offset + b,
                token: NameToken::Io,
                attention: io_att,
                projection: model.unembed_projection(out, s.io_token()?, inv)?,
            });
            points.push(ScatterPoint {
                sample: offset + b,
                token: NameToken::S,
                attention: s_att,
                projection: model.unembed_projection(out, s.s_token()?, inv)?,
            });
        }
        offset += chunk.len();
    }
    Ok(ScatterData { head: h, model_tag: model_tag.to_string(), points })
}

/// Mean attention of each head from query positions `dst` to key positions
/// `src`, summed over the key positions and averaged over query positions.
pub fn mean_attention(
    model: &TransformerModel,
    d: &Dataset,
    heads: &[HeadRef],
    src: PositionRole,
    dst: PositionRole,
) -> Result<Vec<f64>> {
    for h in heads {
        h.check(model.config())?;
    }
    let layers: Vec<usize> = heads.iter().map(|h| h.layer).collect();
    let mut per_head: Vec<Vec<f64>> = vec![Vec::with_capacity(d.len()); heads.len()];
    for chunk in d.samples.chunks(EVAL_BATCH) {
        let batch = TokenBatch::from_samples(chunk)?;
        let wanted = layers.clone();
        let max_layer = *layers.iter().max().unwrap_or(&0);
        let mut rec = CacheHook::only(move |p| matches!(p, HookPoint::Pattern(l) if wanted.contains(&l)));
        model.run(&batch, &mut rec, &RunOptions { output: Output::Residual, start: None, stop_after: Some(max_layer) })?;
        let cache = rec.into_cache();
        for (i, h) in heads.iter().enumerate() {
            let pattern = cache.pattern(h.layer)?;
            for (b, s) in chunk.iter().enumerate() {
                let (srcs, dsts) = (s.resolve(src)?, s.resolve(dst)?);
                let total: f64 = dsts
                    .iter()
                    .map(|&q| srcs.iter().filter(|&&k| k <= q).map(|&k| pattern.get(&[b, h.head, q, k])).sum::<f64>())
                    .sum();
                per_head[i].push(total / dsts.len() as f64);
            }
        }
    }
    Ok(per_head.iter().map(|v| mean(v)).collect())
}

/// Mean of `pattern_a[dst][src] − pattern_b[dst][src]` per head.
pub fn attention_difference(
    model_a: &TransformerModel,
    model_b: &TransformerModel,
    d: &Dataset,
    heads: &[HeadRef],
    src: PositionRole,
    dst: PositionRole,
) -> Result<Vec<f64>> {
    check_same_architecture(model_a.config(), model_b.config())?;
    let a = mean_attention(model_a, d, heads, src, dst)?;
    let b = mean_attention(model_b, d, heads, src, dst)?;
    Ok(a.iter().zip(&b).map(|(x, y)| x - y).collect())
}

/// Absolute metric change from mean-ablating the circuit's `class` heads in
/// each of two models, each against its own mean cache.
pub fn group_ablation_compare(
    model_a: &TransformerModel,
    model_b: &TransformerModel,
    circuit: &Circuit,
    class: RoleClass,
    d: &Dataset,
    means_a: &MeanCache,
    means_b: &MeanCache,
) -> Result<(f64, f64)> {
    check_same_architecture(model_a.config(), model_b.config())?;
    let nodes: Vec<NodeAt> = circuit.class_nodes(class).collect();
    if nodes.is_empty() {
        return Ok((0.0, 0.0));
    }
    let effect = |m: &TransformerModel, means: &MeanCache| -> Result<f64> {
        Ok((knockout(m, d, &nodes, means)? - knockout(m, d, &[], means)?).abs())
    };
    Ok((effect(model_a, means_a)?, effect(model_b, means_b)?))
}

/// Projections of a component's END output onto year unembeddings, averaged
/// per XX value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LensGrid {
    pub component: NodeRef,
    /// XX value of each row.
    pub rows: Vec<u32>,
    /// Token of each column.
    pub cols: Vec<usize>,
    /// Year of each column, when the column is a year token.
    pub col_years: Vec<Option<u32>>,
    pub values: Vec<Vec<f64>>,
}

impl LensGrid {
    /// Mean over cells with column year above the row's XX, and mean over
    /// cells at or below it. Non-year columns are skipped.
    pub fn triangle_means(&self) -> (f64, f64) {
        let (mut upper, mut lower) = (Vec::new(), Vec::new());
        for (r, &xx) in self.rows.iter().enumerate() {
            for (c, year) in self.col_years.iter().enumerate() {
                match year {
                    Some(y) if *y > xx => upper.push(self.values[r][c]),
                    Some(_) => lower.push(self.values[r][c]),
                    None => {}
                }
            }
        }
        (mean(&upper), mean(&lower))
    }

    pub fn upper_dominant(&self) -> bool {
        let (u, l) = self.triangle_means();
        u > l
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().flatten().all(|v| v.is_finite())
    }

    pub fn to_csv(&self) -> Result<String> {
        let vocab = Vocabulary::standard();
        let mut out = String::from("xx");
        for &c in &self.cols {
            let _ = write!(out, ",{}", vocab.word(c)?);
        }
        out.push('\n');
        for (r, xx) in self.rows.iter().enumerate() {
            let _ = write!(out, "{xx:02}");
            for v in &self.values[r] {
                let _ = write!(out, ",{}", fmt_float(*v));
            }
            out.push('\n');
        }
        Ok(out)
    }
}

/// Logit lens over the year tokens.
pub fn logit_lens(model: &TransformerModel, component: NodeRef, d: &Dataset) -> Result<LensGrid> {
    logit_lens_tokens(model, component, d, Vocabulary::standard().year_ids())
}

/// Logit lens over the whole vocabulary.
pub fn logit_lens_full(model: &TransformerModel, component: NodeRef, d: &Dataset) -> Result<LensGrid> {
    let cols: Vec<usize> = (0..model.config().vocab_size).collect();
    logit_lens_tokens(model, component, d, &cols)
}

pub fn logit_lens_tokens(model: &TransformerModel, component: NodeRef, d: &Dataset, cols: &[usize]) -> Result<LensGrid> {
    d.require_task(Task::GreaterThan)?;
    component.check(model.config())?;
    let vocab = Vocabulary::standard();
    let dirs = cols.iter().map(|&t| model.unembed_direction(t)).collect::<Result<Vec<_>>>()?;
    let mut buckets: BTreeMap<u32, Vec<Vec<f64>>> = BTreeMap::new();
    for chunk in d.samples.chunks(EVAL_BATCH) {
        let batch = TokenBatch::from_samples(chunk)?;
        let mut rec = CacheHook::only(|p| {
            matches!(p, HookPoint::Embed | HookPoint::HeadResult(_) | HookPoint::MlpOut(_) | HookPoint::FinalResid)
        });
        model.run(&batch, &mut rec, &RunOptions { output: Output::Residual, start: None, stop_after: None })?;
        let cache = rec.into_cache();
        let scale = cache.final_scale()?;
        for (b, s) in chunk.iter().enumerate() {
            let xx = s.xx.ok_or_else(|| Error::Dataset("greater-than sample without XX".into()))?;
            let out = cache.node_output(component, b, s.end())?;
            let inv = scale.get(&[b, s.end()]);
            buckets.entry(xx).or_default().push(dirs.iter().map(|dir| inv * dot(out, dir)).collect());
        }
    }
    let mut rows = Vec::new();
    let mut values = Vec::new();
    for (xx, samples) in buckets {
        let n = samples.len() as f64;
        let mut acc = vec![0.0; cols.len()];
        for v in &samples {
            for (a, x) in acc.iter_mut().zip(v) {
                *a += x;
            }
        }
        rows.push(xx);
        values.push(acc.into_iter().map(|a| a / n).collect());
    }
    Ok(LensGrid {
        component,
        rows,
        cols: cols.to_vec(),
        col_years: cols.iter().map(|&c| vocab.year_of(c)).collect(),
        values,
    })
}

/// Ablation effect of a head split into its direct effect and the
/// compensation by the rest of the model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelfRepairRecord {
    pub head: HeadRef,
    /// Ablated minus baseline mean logit difference.
    pub delta_logit: f64,
    /// Direct logit attribution lost by replacing the head's END output with
    /// its mean, at the baseline final scale.
    pub direct_effect: f64,
    pub self_repair: f64,
}

pub fn self_repair(model: &TransformerModel, d: &Dataset, h: HeadRef, means: &MeanCache) -> Result<SelfRepairRecord> {
    d.require_task(Task::Ioi)?;
    h.check(model.config())?;
    let node = NodeRef::Head(h);
    let baseline = knockout(model, d, &[], means)?;
    let ablated = knockout(model, d, &[NodeAt::new(node, PositionRole::All)], means)?;
    let mut effects = Vec::with_capacity(d.len());
    for chunk in d.samples.chunks(EVAL_BATCH) {
        let batch = TokenBatch::from_samples(chunk)?;
        let layer = h.layer;
        let mut rec = CacheHook::only(move |p| p == HookPoint::HeadResult(layer) || p == HookPoint::FinalResid);
        model.run(&batch, &mut rec, &RunOptions { output: Output::Residual, start: None, stop_after: None })?;
        let cache = rec.into_cache();
        let scale = cache.final_scale()?;
        for (b, s) in chunk.iter().enumerate() {
            let end = s.end();
            let out = cache.node_output(node, b, end)?;
            let m = means.row(s, node, end)?;
            let diff: Vec<f64> = out.iter().zip(m).map(|(a, b)| a - b).collect();
            let inv = scale.get(&[b, end]);
            let io = model.unembed_projection(&diff, s.io_token()?, inv)?;
            let st = model.unembed_projection(&diff, s.s_token()?, inv)?;
            effects.push(io - st);
        }
    }
    let delta_logit = ablated - baseline;
    let direct_effect = mean(&effects);
    Ok(SelfRepairRecord { head: h, delta_logit, direct_effect, self_repair: delta_logit + direct_effect })
}
