// SPDX-License-Identifier: MIT OR Apache-2.0

//! Decoder-only transformer with named hook points.
//!
//! Each block is pre-norm: attention reads `LN1(resid_pre)`, the MLP reads
//! `LN2(resid_mid)`. Attention has no biases, so the per-head `result`
//! tensors sum exactly to the attention output. The final layer norm has a
//! scale but no shift and the unembedding has no bias, which makes direct
//! logit attribution over nodes telescope to the logits.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use milab_tensor::kernels::layer_norm_stats;
use milab_tensor::{Graph, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{PromptSample, PAD_ID};
use crate::error::{Error, Result};

pub const LN_EPS: f64 = 1e-5;
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_head: usize,
    pub d_mlp: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_layers: 4,
            n_heads: 4,
            d_model: 64,
            d_head: 16,
            d_mlp: 256,
            vocab_size: 384,
            max_seq: 24,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_layers == 0 || self.n_heads == 0 || self.d_head == 0 || self.d_mlp == 0 {
            return bad("layer, head, d_head and d_mlp sizes must be positive".into());
        }
        if self.d_head * self.n_heads != self.d_model {
            return bad(format!(
                "d_head {} x n_heads {} != d_model {}",
                self.d_head, self.n_heads, self.d_model
            ));
        }
        if self.vocab_size == 0 || self.max_seq == 0 {
            return bad("vocab_size and max_seq must be positive".into());
        }
        Ok(())
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> usize {
        let (v, s, d, h, dh, dm) =
            (self.vocab_size, self.max_seq, self.d_model, self.n_heads, self.d_head, self.d_mlp);
        let block = 2 * d + 4 * h * d * dh + 2 * d + d * dm + dm + dm * d + d;
        v * d + s * d + self.n_layers * block + d + d * v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct HeadRef {
    pub layer: usize,
    pub head: usize,
}

impl HeadRef {
    pub fn new(layer: usize, head: usize) -> Self {
        HeadRef { layer, head }
    }

    /// Every head of a model in layer-major order.
    pub fn all(cfg: &ModelConfig) -> Vec<HeadRef> {
        (0..cfg.n_layers).flat_map(|l| (0..cfg.n_heads).map(move |h| HeadRef::new(l, h))).collect()
    }

    pub fn check(self, cfg: &ModelConfig) -> Result<()> {
        if self.layer >= cfg.n_layers || self.head >= cfg.n_heads {
            return Err(Error::UnknownSite(format!("head {self}")));
        }
        Ok(())
    }
}

impl fmt::Display for HeadRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "L{}H{}", self.layer, self.head)
    }
}

impl FromStr for HeadRef {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::UnknownSite(format!("cannot parse head {s:?}"));
        let rest = s.strip_prefix('L').ok_or_else(bad)?;
        let (l, h) = rest.split_once('H').ok_or_else(bad)?;
        Ok(HeadRef { layer: l.parse().map_err(|_| bad())?, head: h.parse().map_err(|_| bad())? })
    }
}

/// A writer into the residual stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum NodeRef {
    Embed,
    Head(HeadRef),
    Mlp(usize),
}

impl NodeRef {
    pub fn head(&self) -> Option<HeadRef> {
        match self {
            NodeRef::Head(h) => Some(*h),
            _ => None,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            NodeRef::Embed => "embed",
            NodeRef::Head(_) => "head",
            NodeRef::Mlp(_) => "mlp",
        }
    }

    pub fn layer(&self) -> Option<usize> {
        match self {
            NodeRef::Embed => None,
            NodeRef::Head(h) => Some(h.layer),
            NodeRef::Mlp(l) => Some(*l),
        }
    }

    pub fn check(&self, cfg: &ModelConfig) -> Result<()> {
        match self {
            NodeRef::Embed => Ok(()),
            NodeRef::Head(h) => h.check(cfg),
            NodeRef::Mlp(l) if *l < cfg.n_layers => Ok(()),
            NodeRef::Mlp(l) => Err(Error::UnknownSite(format!("MLP{l}"))),
        }
    }

    /// Every node of a model in forward order.
    pub fn all(cfg: &ModelConfig) -> Vec<NodeRef> {
        let mut v = vec![NodeRef::Embed];
        for l in 0..cfg.n_layers {
            v.extend((0..cfg.n_heads).map(|h| NodeRef::Head(HeadRef::new(l, h))));
            v.push(NodeRef::Mlp(l));
        }
        v
    }
}

impl fmt::Display for NodeRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NodeRef::Embed => f.write_str("embed"),
            NodeRef::Head(h) => h.fmt(f),
            NodeRef::Mlp(l) => write!(f, "MLP{l}"),
        }
    }
}

impl FromStr for NodeRef {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        if s == "embed" {
            return Ok(NodeRef::Embed);
        }
        if let Some(l) = s.strip_prefix("MLP") {
            return l.parse().map(NodeRef::Mlp).map_err(|_| Error::UnknownSite(s.to_string()));
        }
        s.parse().map(NodeRef::Head)
    }
}

impl Serialize for NodeRef {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for NodeRef {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Named activation sites, in forward order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum HookPoint {
    Embed,
    ResidPre(usize),
    AttnIn(usize),
    Q(usize),
    K(usize),
    V(usize),
    Pattern(usize),
    Z(usize),
    HeadResult(usize),
    ResidMid(usize),
    MlpIn(usize),
    MlpOut(usize),
    ResidPost(usize),
    FinalResid,
}

impl HookPoint {
    pub fn layer(self) -> Option<usize> {
        use HookPoint::*;
        match self {
            Embed | FinalResid => None,
            ResidPre(l) | AttnIn(l) | Q(l) | K(l) | V(l) | Pattern(l) | Z(l) | HeadResult(l) | ResidMid(l)
            | MlpIn(l) | MlpOut(l) | ResidPost(l) => Some(l),
        }
    }

    /// Per-head sites carry a head axis at position 1.
    pub fn is_per_head(self) -> bool {
        use HookPoint::*;
        matches!(self, Q(_) | K(_) | V(_) | Pattern(_) | Z(_) | HeadResult(_))
    }

    /// Size of the innermost axis.
    pub fn width(self, cfg: &ModelConfig, seq: usize) -> usize {
        use HookPoint::*;
        match self {
            Q(_) | K(_) | V(_) | Z(_) => cfg.d_head,
            Pattern(_) => seq,
            _ => cfg.d_model,
        }
    }

    pub fn shape(self, cfg: &ModelConfig, batch: usize, seq: usize) -> Vec<usize> {
        let w = self.width(cfg, seq);
        if self.is_per_head() {
            vec![batch, cfg.n_heads, seq, w]
        } else {
            vec![batch, seq, w]
        }
    }

    pub fn check(self, cfg: &ModelConfig) -> Result<()> {
        match self.layer() {
            Some(l) if l >= cfg.n_layers => Err(Error::UnknownSite(self.to_string())),
            _ => Ok(()),
        }
    }
}

impl fmt::Display for HookPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        use HookPoint::*;
        match self {
            Embed => f.write_str("hook_embed"),
            FinalResid => f.write_str("ln_final.hook_in"),
            ResidPre(l) => write!(f, "blocks.{l}.hook_resid_pre"),
            AttnIn(l) => write!(f, "blocks.{l}.ln1.hook_normalized"),
            Q(l) => write!(f, "blocks.{l}.attn.hook_q"),
            K(l) => write!(f, "blocks.{l}.attn.hook_k"),
            V(l) => write!(f, "blocks.{l}.attn.hook_v"),
            Pattern(l) => write!(f, "blocks.{l}.attn.hook_pattern"),
            Z(l) => write!(f, "blocks.{l}.attn.hook_z"),
            HeadResult(l) => write!(f, "blocks.{l}.attn.hook_result"),
            ResidMid(l) => write!(f, "blocks.{l}.hook_resid_mid"),
            MlpIn(l) => write!(f, "blocks.{l}.ln2.hook_normalized"),
            MlpOut(l) => write!(f, "blocks.{l}.hook_mlp_out"),
            ResidPost(l) => write!(f, "blocks.{l}.hook_resid_post"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block<T> {
    pub ln1_w: T,
    pub ln1_b: T,
    /// `[H, d_model, d_head]`
    pub w_q: T,
    pub w_k: T,
    pub w_v: T,
    /// `[H, d_head, d_model]`
    pub w_o: T,
    pub ln2_w: T,
    pub ln2_b: T,
    pub w_in: T,
    pub b_in: T,
    pub w_out: T,
    pub b_out: T,
}

const BLOCK_FIELDS: [&str; 12] = [
    "ln1.w", "ln1.b", "attn.W_Q", "attn.W_K", "attn.W_V", "attn.W_O", "ln2.w", "ln2.b", "mlp.W_in", "mlp.b_in",
    "mlp.W_out", "mlp.b_out",
];

/// Model parameters, generic so the same layout can hold tensors or graph
/// variables.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights<T> {
    pub w_e: T,
    pub w_pos: T,
    pub blocks: Vec<Block<T>>,
    pub ln_f_w: T,
    pub w_u: T,
}

impl<T> Weights<T> {
    /// Parameter names in canonical order.
    pub fn names(&self) -> Vec<String> {
        let mut v = vec!["embed.W_E".to_string(), "embed.W_pos".to_string()];
        for l in 0..self.blocks.len() {
            v.extend(BLOCK_FIELDS.iter().map(|f| format!("blocks.{l}.{f}")));
        }
        v.push("ln_final.w".into());
        v.push("unembed.W_U".into());
        v
    }

    pub fn tensors(&self) -> Vec<&T> {
        let mut v = vec![&self.w_e, &self.w_pos];
        for b in &self.blocks {
            v.extend([
                &b.ln1_w, &b.ln1_b, &b.w_q, &b.w_k, &b.w_v, &b.w_o, &b.ln2_w, &b.ln2_b, &b.w_in, &b.b_in, &b.w_out,
                &b.b_out,
            ]);
        }
        v.extend([&self.ln_f_w, &self.w_u]);
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut T> {
        let mut v = vec![&mut self.w_e, &mut self.w_pos];
        for b in &mut self.blocks {
            v.extend([
                &mut b.ln1_w,
                &mut b.ln1_b,
                &mut b.w_q,
                &mut b.w_k,
                &mut b.w_v,
                &mut b.w_o,
                &mut b.ln2_w,
                &mut b.ln2_b,
                &mut b.w_in,
                &mut b.b_in,
                &mut b.w_out,
                &mut b.b_out,
            ]);
        }
        v.extend([&mut self.ln_f_w, &mut self.w_u]);
        v
    }

    /// Rebuilds a layout from values listed in canonical order.
    pub fn from_flat(values: Vec<T>, n_layers: usize) -> Result<Weights<T>> {
        let expected = 4 + 12 * n_layers;
        if values.len() != expected {
            return Err(Error::Config(format!("expected {expected} parameter tensors, got {}", values.len())));
        }
        let mut it = values.into_iter();
        let mut next = || it.next().expect("length checked");
        let w_e = next();
        let w_pos = next();
        let blocks = (0..n_layers)
            .map(|_| Block {
                ln1_w: next(),
                ln1_b: next(),
                w_q: next(),
                w_k: next(),
                w_v: next(),
                w_o: next(),
                ln2_w: next(),
                ln2_b: next(),
                w_in: next(),
                b_in: next(),
                w_out: next(),
                b_out: next(),
            })
            .collect();
        let ln_f_w = next();
        let w_u = next();
        Ok(Weights { w_e, w_pos, blocks, ln_f_w, w_u })
    }

    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> Weights<U> {
        let vals = self.tensors().into_iter().map(&mut f).collect();
        Weights::from_flat(vals, self.blocks.len()).expect("same layout")
    }
}

/// Expected shape of every parameter, in canonical order.
pub fn param_shapes(cfg: &ModelConfig) -> Vec<Vec<usize>> {
    let (d, h, dh, dm) = (cfg.d_model, cfg.n_heads, cfg.d_head, cfg.d_mlp);
    let mut v = vec![vec![cfg.vocab_size, d], vec![cfg.max_seq, d]];
    for _ in 0..cfg.n_layers {
        v.extend([
            vec![d],
            vec![d],
            vec![h, d, dh],
            vec![h, d, dh],
            vec![h, d, dh],
            vec![h, dh, d],
            vec![d],
            vec![d],
            vec![d, dm],
            vec![dm],
            vec![dm, d],
            vec![d],
        ]);
    }
    v.push(vec![d]);
    v.push(vec![d, cfg.vocab_size]);
    v
}

/// A right-padded batch of token sequences.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenBatch {
    pub tokens: Vec<usize>,
    pub batch: usize,
    pub seq: usize,
    pub lengths: Vec<usize>,
}

impl TokenBatch {
    /// Pads every sequence on the right. Causal attention keeps the padding
    /// invisible to real positions.
    pub fn new<S: AsRef<[usize]>>(seqs: &[S]) -> Result<Self> {
        if seqs.is_empty() {
            return Err(Error::Dataset("empty batch".into()));
        }
        let seq = seqs.iter().map(|s| s.as_ref().len()).max().unwrap_or(0);
        if seq == 0 {
            return Err(Error::Dataset("empty sequence".into()));
        }
        let mut tokens = Vec::with_capacity(seqs.len() * seq);
        let mut lengths = Vec::with_capacity(seqs.len());
        for s in seqs {
            let s = s.as_ref();
            tokens.extend_from_slice(s);
            tokens.extend(std::iter::repeat(PAD_ID).take(seq - s.len()));
            lengths.push(s.len());
        }
        Ok(TokenBatch { tokens, batch: seqs.len(), seq, lengths })
    }

    pub fn from_samples(samples: &[PromptSample]) -> Result<Self> {
        let seqs: Vec<&[usize]> = samples.iter().map(|s| s.tokens.as_slice()).collect();
        Self::new(&seqs)
    }
}

/// Observes and optionally replaces activations during a forward pass.
pub trait Hook {
    fn visit(&mut self, point: HookPoint, value: &Tensor) -> Result<Option<Tensor>>;
}

pub struct NoHook;

impl Hook for NoHook {
    fn visit(&mut self, _: HookPoint, _: &Tensor) -> Result<Option<Tensor>> {
        Ok(None)
    }
}

/// Applies `first`, then lets `second` see (and replace) the result.
pub struct Chain<'a>(pub &'a mut dyn Hook, pub &'a mut dyn Hook);

impl Hook for Chain<'_> {
    fn visit(&mut self, point: HookPoint, value: &Tensor) -> Result<Option<Tensor>> {
        let first = self.0.visit(point, value)?;
        let second = self.1.visit(point, first.as_ref().unwrap_or(value))?;
        Ok(second.or(first))
    }
}

/// What a forward pass returns.
#[derive(Debug, Clone, PartialEq)]
pub enum Output {
    /// `[B, S, V]` logits.
    Logits,
    /// Logits `[R, V]` for rows of the flattened `[B*S]` position axis.
    Rows(Vec<usize>),
    /// The residual stream after the last executed layer.
    Residual,
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub output: Output,
    /// Start at this layer from a given `resid_pre`, skipping earlier work.
    pub start: Option<(usize, Tensor)>,
    /// Stop after this layer's `resid_post`; implies a residual output.
    pub stop_after: Option<usize>,
}

impl RunOptions {
    pub fn logits() -> Self {
        RunOptions { output: Output::Logits, start: None, stop_after: None }
    }

    pub fn rows(rows: Vec<usize>) -> Self {
        RunOptions { output: Output::Rows(rows), start: None, stop_after: None }
    }
}

/// Flat `[B*S]` row index of each sample's END position.
pub fn end_rows(batch: &TokenBatch, ends: &[usize]) -> Vec<usize> {
    ends.iter().enumerate().map(|(b, &e)| b * batch.seq + e).collect()
}

fn hooked(g: &mut Graph, hook: &mut dyn Hook, point: HookPoint, v: Var) -> Result<Var> {
    let replacement = hook.visit(point, g.value(v)?)?;
    match replacement {
        None => Ok(v),
        Some(t) => {
            let expected = g.shape(v)?.to_vec();
            if t.shape() != expected.as_slice() {
                return Err(Error::SiteShape { site: point.to_string(), expected, got: t.shape().to_vec() });
            }
            Ok(g.input(t))
        }
    }
}

fn affine(g: &mut Graph, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
    let y = g.mul(x, w)?;
    Ok(match b {
        Some(b) => g.add(y, b)?,
        None => y,
    })
}

/// Builds the forward pass on `g` and returns the output variable.
pub fn forward_graph(
    g: &mut Graph,
    w: &Weights<Var>,
    cfg: &ModelConfig,
    batch: &TokenBatch,
    hook: &mut dyn Hook,
    opts: &RunOptions,
) -> Result<Var> {
    let (b, s, d) = (batch.batch, batch.seq, cfg.d_model);
    let (first, mut x) = match &opts.start {
        Some((l, resid)) => {
            if resid.shape() != [b, s, d] {
                return Err(Error::SiteShape {
                    site: HookPoint::ResidPre(*l).to_string(),
                    expected: vec![b, s, d],
                    got: resid.shape().to_vec(),
                });
            }
            (*l, g.input(resid.clone()))
        }
        None => {
            let tok = g.embedding(w.w_e, &batch.tokens, &[b, s])?;
            let pos = g.narrow(w.w_pos, 0, 0, s)?;
            let x = g.add(tok, pos)?;
            (0, hooked(g, hook, HookPoint::Embed, x)?)
        }
    };
    let scale = 1.0 / (cfg.d_head as f64).sqrt();
    for l in first..cfg.n_layers {
        let blk = &w.blocks[l];
        x = hooked(g, hook, HookPoint::ResidPre(l), x)?;
        let n1 = g.layer_norm(x, LN_EPS)?;
        let a_in = affine(g, n1, blk.ln1_w, Some(blk.ln1_b))?;
        let a_in = hooked(g, hook, HookPoint::AttnIn(l), a_in)?;
        let x4 = g.reshape(a_in, &[b, 1, s, d])?;
        let q = g.matmul(x4, blk.w_q)?;
        let q = hooked(g, hook, HookPoint::Q(l), q)?;
        let k = g.matmul(x4, blk.w_k)?;
        let k = hooked(g, hook, HookPoint::K(l), k)?;
        let v = g.matmul(x4, blk.w_v)?;
        let v = hooked(g, hook, HookPoint::V(l), v)?;
        let kt = g.transpose(k)?;
        let scores = g.matmul(q, kt)?;
        let scores = g.scale(scores, scale)?;
        let pattern = g.causal_softmax(scores)?;
        let pattern = hooked(g, hook, HookPoint::Pattern(l), pattern)?;
        let z = g.matmul(pattern, v)?;
        let z = hooked(g, hook, HookPoint::Z(l), z)?;
        let result = g.matmul(z, blk.w_o)?;
        let result = hooked(g, hook, HookPoint::HeadResult(l), result)?;
        let attn_out = g.sum_axis(result, 1)?;
        let mid = g.add(x, attn_out)?;
        let mid = hooked(g, hook, HookPoint::ResidMid(l), mid)?;
        let n2 = g.layer_norm(mid, LN_EPS)?;
        let m_in = affine(g, n2, blk.ln2_w, Some(blk.ln2_b))?;
        let m_in = hooked(g, hook, HookPoint::MlpIn(l), m_in)?;
        let pre = g.matmul(m_in, blk.w_in)?;
        let pre = g.add(pre, blk.b_in)?;
        let act = g.gelu(pre)?;
        let out = g.matmul(act, blk.w_out)?;
        let out = g.add(out, blk.b_out)?;
        let out = hooked(g, hook, HookPoint::MlpOut(l), out)?;
        let post = g.add(mid, out)?;
        x = hooked(g, hook, HookPoint::ResidPost(l), post)?;
        if opts.stop_after == Some(l) {
            return Ok(x);
        }
    }
    x = hooked(g, hook, HookPoint::FinalResid, x)?;
    let rows = match &opts.output {
        Output::Residual => return Ok(x),
        Output::Logits => x,
        Output::Rows(rows) => {
            let flat = g.reshape(x, &[b * s, d])?;
            g.select(flat, 0, rows)?
        }
    };
    let nf = g.layer_norm(rows, LN_EPS)?;
    let nf = affine(g, nf, w.ln_f_w, None)?;
    Ok(g.matmul(nf, w.w_u)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransformerModel {
    config: ModelConfig,
    weights: Weights<Tensor>,
}

impl TransformerModel {
    /// Seeded normal initialisation. Output-facing maps (`W_O`, `W_out`) use
    /// a standard deviation shrunk by `sqrt(2 * n_layers)`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let base = Normal::new(0.0, INIT_STD).expect("valid std");
        let out = Normal::new(0.0, INIT_STD / (2.0 * config.n_layers as f64).sqrt()).expect("valid std");
        let shapes = param_shapes(&config);
        let names = Weights::<()>::from_flat(vec![(); shapes.len()], config.n_layers)?.names();
        let values = names
            .iter()
            .zip(&shapes)
            .map(|(name, shape)| {
                let leaf = name.rsplit('.').next().unwrap_or_default();
                if leaf == "w" {
                    Tensor::ones(shape)
                } else if leaf == "b" || leaf.starts_with("b_") {
                    Tensor::zeros(shape)
                } else if leaf == "W_O" || leaf == "W_out" {
                    Tensor::from_fn(shape, |_| out.sample(&mut rng))
                } else {
                    Tensor::from_fn(shape, |_| base.sample(&mut rng))
                }
            })
            .collect();
        let weights = Weights::from_flat(values, config.n_layers)?;
        Ok(TransformerModel { config, weights })
    }

    pub fn from_weights(config: ModelConfig, weights: Weights<Tensor>) -> Result<Self> {
        config.validate()?;
        if weights.blocks.len() != config.n_layers {
            return Err(Error::Config("block count does not match n_layers".into()));
        }
        for ((name, t), shape) in weights.names().iter().zip(weights.tensors()).zip(param_shapes(&config)) {
            if t.shape() != shape.as_slice() {
                return Err(Error::Config(format!("{name} has shape {:?}, expected {shape:?}", t.shape())));
            }
            if !t.is_finite() {
                return Err(Error::Config(format!("{name} has non-finite entries")));
            }
        }
        Ok(TransformerModel { config, weights })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn weights(&self) -> &Weights<Tensor> {
        &self.weights
    }

    /// Mutable parameter access, used by training and by tests that hand-set
    /// weights.
    pub fn weights_mut(&mut self) -> &mut Weights<Tensor> {
        &mut self.weights
    }

    pub fn param_count(&self) -> usize {
        self.weights.tensors().iter().map(|t| t.numel()).sum()
    }

    /// Little-endian bytes of every parameter in canonical order.
    pub fn payload(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.param_count() * 8);
        for t in self.weights.tensors() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn check_batch(&self, batch: &TokenBatch) -> Result<()> {
        if batch.seq > self.config.max_seq {
            return Err(Error::SequenceTooLong { len: batch.seq, max: self.config.max_seq });
        }
        if let Some(&id) = batch.tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::TokenOutOfRange { id, vocab: self.config.vocab_size });
        }
        Ok(())
    }

    /// Runs the forward pass with a hook, returning the requested output.
    pub fn run(&self, batch: &TokenBatch, hook: &mut dyn Hook, opts: &RunOptions) -> Result<Tensor> {
        self.check_batch(batch)?;
        let mut g = Graph::new();
        let w = self.weights.map(|t| g.input(t.clone()));
        let out = forward_graph(&mut g, &w, &self.config, batch, hook, opts)?;
        Ok(g.value(out)?.clone())
    }

    pub fn logits(&self, batch: &TokenBatch) -> Result<Tensor> {
        self.run(batch, &mut NoHook, &RunOptions::logits())
    }

    pub fn run_with_cache(&self, batch: &TokenBatch) -> Result<(Tensor, ActivationCache)> {
        let mut rec = CacheHook::all();
        let logits = self.run(batch, &mut rec, &RunOptions::logits())?;
        Ok((logits, rec.into_cache()))
    }

    pub fn run_with_interventions(&self, batch: &TokenBatch, interventions: &[Intervention]) -> Result<Tensor> {
        let mut hook = InterventionHook::new(self, batch, interventions)?;
        self.run(batch, &mut hook, &RunOptions::logits())
    }

    /// Like [`run_with_interventions`](Self::run_with_interventions), also
    /// caching the intervened run.
    pub fn run_with_interventions_cached(
        &self,
        batch: &TokenBatch,
        interventions: &[Intervention],
    ) -> Result<(Tensor, ActivationCache)> {
        let mut hook = InterventionHook::new(self, batch, interventions)?;
        let mut rec = CacheHook::all();
        let logits = self.run(batch, &mut Chain(&mut hook, &mut rec), &RunOptions::logits())?;
        Ok((logits, rec.into_cache()))
    }

    fn head_matrix(&self, t: &Tensor, h: usize) -> Tensor {
        let shape = t.shape()[1..].to_vec();
        Tensor::new(shape, t.slab_data(h).to_vec()).expect("slab shape")
    }

    /// `W_V · W_O` for one head, `[d_model, d_model]`.
    pub fn ov_matrix(&self, h: HeadRef) -> Result<Tensor> {
        h.check(&self.config)?;
        let b = &self.weights.blocks[h.layer];
        Ok(self.head_matrix(&b.w_v, h.head).matmul(&self.head_matrix(&b.w_o, h.head))?)
    }

    /// `W_Q · W_Kᵀ` for one head, `[d_model, d_model]`; a query row `x_q`
    /// and key row `x_k` score `x_q · W_QK · x_kᵀ`.
    pub fn qk_matrix(&self, h: HeadRef) -> Result<Tensor> {
        h.check(&self.config)?;
        let b = &self.weights.blocks[h.layer];
        Ok(self.head_matrix(&b.w_q, h.head).matmul(&self.head_matrix(&b.w_k, h.head).t()?)?)
    }

    /// Centred `ln_final.w ⊙ W_U[:, token]`; dotting a residual vector with it
    /// and multiplying by the frozen inverse scale gives the token's logit
    /// contribution.
    pub fn unembed_direction(&self, token: usize) -> Result<Vec<f64>> {
        if token >= self.config.vocab_size {
            return Err(Error::TokenOutOfRange { id: token, vocab: self.config.vocab_size });
        }
        let d = self.config.d_model;
        let wu = &self.weights.w_u;
        let a: Vec<f64> = (0..d).map(|i| self.weights.ln_f_w.data()[i] * wu.get(&[i, token])).collect();
        let mean = a.iter().sum::<f64>() / d as f64;
        Ok(a.into_iter().map(|v| v - mean).collect())
    }

    /// Projection of a residual-space vector onto `W_U[token]` through the
    /// final layer norm with its inverse scale frozen at `inv_scale`.
    pub fn unembed_projection(&self, vector: &[f64], token: usize, inv_scale: f64) -> Result<f64> {
        if vector.len() != self.config.d_model {
            return Err(Error::SiteShape {
                site: "unembed_projection".into(),
                expected: vec![self.config.d_model],
                got: vec![vector.len()],
            });
        }
        let dir = self.unembed_direction(token)?;
        Ok(inv_scale * dot(vector, &dir))
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Activations recorded from one forward pass.
#[derive(Debug, Clone, Default)]
pub struct ActivationCache {
    sites: BTreeMap<HookPoint, Tensor>,
}

impl ActivationCache {
    pub fn get(&self, point: HookPoint) -> Result<&Tensor> {
        self.sites.get(&point).ok_or_else(|| Error::UnknownSite(format!("{point} not cached")))
    }

    pub fn contains(&self, point: HookPoint) -> bool {
        self.sites.contains_key(&point)
    }

    pub fn insert(&mut self, point: HookPoint, value: Tensor) {
        self.sites.insert(point, value);
    }

    pub fn points(&self) -> impl Iterator<Item = &HookPoint> {
        self.sites.keys()
    }

    pub fn embed(&self) -> Result<&Tensor> {
        self.get(HookPoint::Embed)
    }

    pub fn resid_pre(&self, l: usize) -> Result<&Tensor> {
        self.get(HookPoint::ResidPre(l))
    }

    pub fn resid_mid(&self, l: usize) -> Result<&Tensor> {
        self.get(HookPoint::ResidMid(l))
    }

    pub fn resid_post(&self, l: usize) -> Result<&Tensor> {
        self.get(HookPoint::ResidPost(l))
    }

    pub fn attn_in(&self, l: usize) -> Result<&Tensor> {
        self.get(HookPoint::AttnIn(l))
    }

    pub fn q(&self, l: usize) -> Result<&Tensor> {
        self.get(HookPoint::Q(l))
    }

    pub fn k(&self, l: usize) -> Result<&Tensor> {
        self.get(HookPoint::K(l))
    }

    pub fn v(&self, l: usize) -> Result<&Tensor> {
        self.get(HookPoint::V(l))
    }

    pub fn pattern(&self, l: usize) -> Result<&Tensor> {
        self.get(HookPoint::Pattern(l))
    }

    pub fn z(&self, l: usize) -> Result<&Tensor> {
        self.get(HookPoint::Z(l))
    }

    pub fn result(&self, l: usize) -> Result<&Tensor> {
        self.get(HookPoint::HeadResult(l))
    }

    pub fn mlp_out(&self, l: usize) -> Result<&Tensor> {
        self.get(HookPoint::MlpOut(l))
    }

    pub fn final_resid(&self) -> Result<&Tensor> {
        self.get(HookPoint::FinalResid)
    }

    /// Inverse standard deviation of the final layer norm, `[B, S]`.
    pub fn final_scale(&self) -> Result<Tensor> {
        let fr = self.final_resid()?;
        let inv: Vec<f64> = layer_norm_stats(fr, LN_EPS).into_iter().map(|(_, inv)| inv).collect();
        Ok(Tensor::new(fr.shape()[..2].to_vec(), inv)?)
    }

    /// Output vector written by `node` at `(b, pos)`.
    pub fn node_output(&self, node: NodeRef, b: usize, pos: usize) -> Result<&[f64]> {
        Ok(match node {
            NodeRef::Embed => self.embed()?.row(&[b, pos]),
            NodeRef::Mlp(l) => self.mlp_out(l)?.row(&[b, pos]),
            NodeRef::Head(h) => self.result(h.layer)?.row(&[b, h.head, pos]),
        })
    }
}

/// Records sites into an [`ActivationCache`].
pub struct CacheHook {
    filter: Option<Box<dyn Fn(HookPoint) -> bool>>,
    cache: ActivationCache,
}

impl CacheHook {
    pub fn all() -> Self {
        CacheHook { filter: None, cache: ActivationCache::default() }
    }

    pub fn only(filter: impl Fn(HookPoint) -> bool + 'static) -> Self {
        CacheHook { filter: Some(Box::new(filter)), cache: ActivationCache::default() }
    }

    pub fn into_cache(self) -> ActivationCache {
        self.cache
    }
}

impl Hook for CacheHook {
    fn visit(&mut self, point: HookPoint, value: &Tensor) -> Result<Option<Tensor>> {
        if self.filter.as_ref().map_or(true, |f| f(point)) {
            self.cache.insert(point, value.clone());
        }
        Ok(None)
    }
}

/// Overwrites a site at explicit per-sample positions.
///
/// `values` is `[B, S, width]`; only the listed positions are read. For
/// per-head sites `head` selects the head.
#[derive(Debug, Clone, PartialEq)]
pub struct Intervention {
    pub point: HookPoint,
    pub head: Option<usize>,
    pub positions: Vec<Vec<usize>>,
    pub values: Tensor,
}

impl Intervention {
    /// Replacement values taken from a prior cache of the same batch shape.
    pub fn from_cache(
        cache: &ActivationCache,
        point: HookPoint,
        head: Option<usize>,
        positions: Vec<Vec<usize>>,
    ) -> Result<Self> {
        let src = cache.get(point)?;
        let values = match (point.is_per_head(), head) {
            (true, Some(h)) => head_slice(src, h)?,
            (false, None) => src.clone(),
            _ => return Err(Error::UnknownSite(format!("{point} with head {head:?}"))),
        };
        Ok(Intervention { point, head, positions, values })
    }

    /// Zeros at the listed positions.
    pub fn zero(
        cfg: &ModelConfig,
        batch: &TokenBatch,
        point: HookPoint,
        head: Option<usize>,
        positions: Vec<Vec<usize>>,
    ) -> Self {
        let w = point.width(cfg, batch.seq);
        Intervention { point, head, positions, values: Tensor::zeros(&[batch.batch, batch.seq, w]) }
    }

    /// Every position of every sample.
    pub fn all_positions(batch: &TokenBatch) -> Vec<Vec<usize>> {
        vec![(0..batch.seq).collect(); batch.batch]
    }

    fn validate(&self, cfg: &ModelConfig, batch: &TokenBatch) -> Result<()> {
        self.point.check(cfg)?;
        match (self.point.is_per_head(), self.head) {
            (true, Some(h)) if h < cfg.n_heads => {}
            (false, None) => {}
            _ => return Err(Error::UnknownSite(format!("{} with head {:?}", self.point, self.head))),
        }
        let expected = vec![batch.batch, batch.seq, self.point.width(cfg, batch.seq)];
        if self.values.shape() != expected.as_slice() {
            return Err(Error::SiteShape {
                site: self.point.to_string(),
                expected,
                got: self.values.shape().to_vec(),
            });
        }
        if self.positions.len() != batch.batch {
            return Err(Error::Patch(format!(
                "{} position lists for a batch of {}",
                self.positions.len(),
                batch.batch
            )));
        }
        if self.positions.iter().flatten().any(|&p| p >= batch.seq) {
            return Err(Error::Patch(format!("position outside sequence of {}", batch.seq)));
        }
        Ok(())
    }

    fn apply(&self, target: &mut Tensor) {
        let w = *target.shape().last().expect("rank >= 3");
        let per_head = self.point.is_per_head();
        for (b, positions) in self.positions.iter().enumerate() {
            for &p in positions {
                let src = self.values.row(&[b, p]);
                let dst = if per_head {
                    target.row_mut(&[b, self.head.expect("validated"), p])
                } else {
                    target.row_mut(&[b, p])
                };
                dst[..w].copy_from_slice(src);
            }
        }
    }
}

/// `[B, S, w]` slice of a per-head site `[B, H, S, w]`.
pub fn head_slice(t: &Tensor, head: usize) -> Result<Tensor> {
    let s = t.shape();
    if s.len() != 4 || head >= s[1] {
        return Err(Error::UnknownSite(format!("head {head} of tensor {s:?}")));
    }
    let (b, seq, w) = (s[0], s[2], s[3]);
    let mut out = Tensor::zeros(&[b, seq, w]);
    for i in 0..b {
        for p in 0..seq {
            out.row_mut(&[i, p]).copy_from_slice(t.row(&[i, head, p]));
        }
    }
    Ok(out)
}

pub struct InterventionHook<'a> {
    by_point: BTreeMap<HookPoint, Vec<&'a Intervention>>,
}

impl<'a> InterventionHook<'a> {
    pub fn new(model: &TransformerModel, batch: &TokenBatch, list: &'a [Intervention]) -> Result<Self> {
        let mut by_point: BTreeMap<HookPoint, Vec<&Intervention>> = BTreeMap::new();
        for iv in list {
            iv.validate(model.config(), batch)?;
            by_point.entry(iv.point).or_default().push(iv);
        }
        Ok(InterventionHook { by_point })
    }
}

impl Hook for InterventionHook<'_> {
    fn visit(&mut self, point: HookPoint, value: &Tensor) -> Result<Option<Tensor>> {
        let Some(list) = self.by_point.get(&point) else {
            return Ok(None);
        };
        let mut t = value.clone();
        for iv in list {
            iv.apply(&mut t);
        }
        Ok(Some(t))
    }
}
