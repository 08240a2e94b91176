// SPDX-License-Identifier: MIT OR Apache-2.0

//! Circuits as sets of node-position pairs, their evaluation by complement
//! mean-ablation, greedy path-patching discovery and head role rules.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::analysis::{end_attributions, mean_attention};
use crate::data::{self, Dataset, PositionRole, PromptSample, Task};
use crate::error::{Error, Result};
use crate::model::{HeadRef, ModelConfig, NodeRef, TransformerModel};
use crate::patch::{ablated_metric, knockout, MeanCache, NodeAt, PatchContext, PatchSpec, QkvSite, Receiver};
use crate::train::checkpoint::model_hash;
use crate::train::{eval_metric, Metric};

/// Models whose metric magnitude is below this have no circuit to find.
pub const MIN_MODEL_METRIC: f64 = 0.1;

/// Default keep threshold as a fraction of `|F_model|`.
pub const DEFAULT_THRESHOLD: f64 = 0.02;

/// Attention mass a positional head role needs on its target.
const ATTENTION_FLOOR: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoleClass {
    NameMover,
    NegativeNameMover,
    SInhibition,
    DuplicateToken,
    PreviousToken,
    Induction,
    BackupNameMover,
    Mlp,
    Other,
}

impl RoleClass {
    pub const ALL: [RoleClass; 9] = [
        RoleClass::NameMover,
        RoleClass::NegativeNameMover,
        RoleClass::SInhibition,
        RoleClass::DuplicateToken,
        RoleClass::PreviousToken,
        RoleClass::Induction,
        RoleClass::BackupNameMover,
        RoleClass::Mlp,
        RoleClass::Other,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            RoleClass::NameMover => "name_mover",
            RoleClass::NegativeNameMover => "negative_name_mover",
            RoleClass::SInhibition => "s_inhibition",
            RoleClass::DuplicateToken => "duplicate_token",
            RoleClass::PreviousToken => "previous_token",
            RoleClass::Induction => "induction",
            RoleClass::BackupNameMover => "backup_name_mover",
            RoleClass::Mlp => "mlp",
            RoleClass::Other => "other",
        }
    }
}

impl fmt::Display for RoleClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RoleClass {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        RoleClass::ALL
            .into_iter()
            .find(|r| r.as_str() == s.replace('-', "_"))
            .ok_or_else(|| Error::Circuit(format!("unknown role {s:?}")))
    }
}

/// Position-qualified node key.
pub type NodeKey = (NodeRef, PositionRole);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CircuitNode {
    pub node: NodeRef,
    pub position: PositionRole,
    pub role: RoleClass,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct NodeJson {
    layer: usize,
    head: Option<usize>,
    kind: String,
    position: PositionRole,
    role: RoleClass,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CircuitJson {
    model_hash: String,
    task: Task,
    nodes: Vec<NodeJson>,
    threshold: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Circuit {
    pub model_hash: String,
    pub task: Task,
    pub threshold: f64,
    nodes: BTreeMap<NodeKey, RoleClass>,
}

impl Circuit {
    pub fn new(model: &TransformerModel, task: Task, threshold: f64) -> Self {
        Circuit { model_hash: model_hash(model), task, threshold, nodes: BTreeMap::new() }
    }

    /// Every head at every position; MLPs too for greater-than.
    pub fn all_nodes(model: &TransformerModel, task: Task) -> Self {
        let mut c = Circuit::new(model, task, 0.0);
        for n in NodeRef::all(model.config()) {
            match n {
                NodeRef::Head(_) => c.nodes.insert((n, PositionRole::All), RoleClass::Other),
                NodeRef::Mlp(_) if task == Task::GreaterThan => c.nodes.insert((n, PositionRole::All), RoleClass::Mlp),
                _ => None,
            };
        }
        c
    }

    pub fn insert(&mut self, node: NodeRef, position: PositionRole, role: RoleClass) -> Result<()> {
        if node == NodeRef::Embed {
            return Err(Error::Circuit("the embedding is not a circuit node".into()));
        }
        if position != PositionRole::All && !PositionRole::roles_for(self.task).contains(&position) {
            return Err(Error::Circuit(format!("position {position} is not used by {}", self.task)));
        }
        if self.nodes.insert((node, position), role).is_some() {
            return Err(Error::Circuit(format!("duplicate node {node}@{position}")));
        }
        Ok(())
    }

    pub fn set_role(&mut self, key: NodeKey, role: RoleClass) -> Result<()> {
        let slot = self.nodes.get_mut(&key).ok_or_else(|| Error::Circuit(format!("{}@{} not in circuit", key.0, key.1)))?;
        *slot = role;
        Ok(())
    }

    pub fn contains(&self, node: NodeRef, position: PositionRole) -> bool {
        self.nodes.contains_key(&(node, position))
    }

    pub fn role(&self, key: NodeKey) -> Option<RoleClass> {
        self.nodes.get(&key).copied()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> impl Iterator<Item = CircuitNode> + '_ {
        self.nodes.iter().map(|(&(node, position), &role)| CircuitNode { node, position, role })
    }

    pub fn keys(&self) -> BTreeSet<NodeKey> {
        self.nodes.keys().copied().collect()
    }

    /// Distinct heads in the circuit.
    pub fn heads(&self) -> Vec<HeadRef> {
        let set: BTreeSet<HeadRef> = self
            .nodes
            .keys()
            .filter_map(|(n, _)| match n {
                NodeRef::Head(h) => Some(*h),
                _ => None,
            })
            .collect();
        set.into_iter().collect()
    }

    pub fn class_nodes(&self, class: RoleClass) -> impl Iterator<Item = NodeAt> + '_ {
        self.nodes.iter().filter(move |(_, &r)| r == class).map(|(&(n, p), _)| NodeAt::new(n, p))
    }

    pub fn without(&self, remove: &[NodeKey]) -> Circuit {
        let mut c = self.clone();
        for k in remove {
            c.nodes.remove(k);
        }
        c
    }

    pub fn check_model(&self, model: &TransformerModel) -> Result<()> {
        let actual = model_hash(model);
        if actual != self.model_hash {
            return Err(Error::StaleCircuit { circuit: self.model_hash.clone(), model: actual });
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        let nodes = self
            .nodes()
            .map(|n| NodeJson {
                layer: n.node.layer().unwrap_or(0),
                head: match n.node {
                    NodeRef::Head(h) => Some(h.head),
                    _ => None,
                },
                kind: n.node.kind().to_string(),
                position: n.position,
                role: n.role,
            })
            .collect();
        let j = CircuitJson { model_hash: self.model_hash.clone(), task: self.task, nodes, threshold: self.threshold };
        Ok(serde_json::to_string_pretty(&j)?)
    }

    pub fn from_json(text: &str) -> Result<Circuit> {
        let j: CircuitJson = serde_json::from_str(text)?;
        let mut c = Circuit { model_hash: j.model_hash, task: j.task, threshold: j.threshold, nodes: BTreeMap::new() };
        for n in j.nodes {
            let node = match (n.kind.as_str(), n.head) {
                ("head", Some(h)) => NodeRef::Head(HeadRef::new(n.layer, h)),
                ("mlp", None) => NodeRef::Mlp(n.layer),
                _ => return Err(Error::Circuit(format!("bad node kind {:?}", n.kind))),
            };
            c.insert(node, n.position, n.role)?;
        }
        Ok(c)
    }
}

/// Node-level changes between two circuits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CircuitDiff {
    pub added: Vec<String>,
    pub removed: Vec<String>,
    pub reclassified: Vec<Reclassified>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reclassified {
    pub node: String,
    pub from: RoleClass,
    pub to: RoleClass,
}

fn key_name(k: &NodeKey) -> String {
    format!("{}@{}", k.0, k.1)
}

/// Changes from `parent` to `child`.
pub fn diff(parent: &Circuit, child: &Circuit) -> CircuitDiff {
    let added = child.nodes.keys().filter(|k| !parent.nodes.contains_key(k)).map(key_name).collect();
    let removed = parent.nodes.keys().filter(|k| !child.nodes.contains_key(k)).map(key_name).collect();
    let reclassified = child
        .nodes
        .iter()
        .filter_map(|(k, &to)| match parent.nodes.get(k) {
            Some(&from) if from != to => Some(Reclassified { node: key_name(k), from, to }),
            _ => None,
        })
        .collect();
    CircuitDiff { added, removed, reclassified }
}

/// Share of `a`'s nodes, ignoring roles and positions, that are also in `b`.
pub fn node_overlap(a: &Circuit, b: &Circuit) -> f64 {
    let na: BTreeSet<NodeRef> = a.nodes.keys().map(|k| k.0).collect();
    let nb: BTreeSet<NodeRef> = b.nodes.keys().map(|k| k.0).collect();
    if na.is_empty() {
        return if nb.is_empty() { 1.0 } else { 0.0 };
    }
    na.intersection(&nb).count() as f64 / na.len() as f64
}

fn ablates_mlps(task: Task) -> bool {
    task == Task::GreaterThan
}

/// Per-sample complement of a node set: every head (and MLP, for
/// greater-than) at every position not covered by the set.
fn complement(cfg: &ModelConfig, task: Task, keep: &BTreeSet<NodeKey>, s: &PromptSample) -> Result<Vec<(NodeRef, Vec<usize>)>> {
    let mut out = Vec::new();
    for node in NodeRef::all(cfg) {
        let candidate = match node {
            NodeRef::Head(_) => true,
            NodeRef::Mlp(_) => ablates_mlps(task),
            NodeRef::Embed => false,
        };
        if !candidate {
            continue;
        }
        let mut kept = vec![false; s.len()];
        for (_, role) in keep.range((node, PositionRole::Io)..=(node, PositionRole::All)) {
            for p in s.resolve(*role)? {
                kept[p] = true;
            }
        }
        let positions: Vec<usize> = (0..s.len()).filter(|&p| !kept[p]).collect();
        if !positions.is_empty() {
            out.push((node, positions));
        }
    }
    Ok(out)
}

fn run_keys(model: &TransformerModel, task: Task, keep: &BTreeSet<NodeKey>, d: &Dataset, means: &MeanCache) -> Result<f64> {
    d.require_task(task)?;
    let cfg = model.config();
    let select = |s: &PromptSample| complement(cfg, task, keep, s);
    Ok(ablated_metric(model, d, means, &select)?.mean)
}

/// `F(C)`: mean task metric with everything outside the circuit
/// mean-ablated. MLPs stay intact for IOI.
pub fn run_circuit(model: &TransformerModel, c: &Circuit, d: &Dataset, means: &MeanCache) -> Result<f64> {
    c.check_model(model)?;
    run_keys(model, c.task, &c.keys(), d, means)
}

/// `F(M)` measured through the same ablation path as circuits.
pub fn model_metric(model: &TransformerModel, d: &Dataset, means: &MeanCache) -> Result<f64> {
    knockout(model, d, &[], means)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Faithfulness {
    pub f_model: f64,
    pub f_circuit: f64,
    /// `|F_model − F_circuit|`
    pub absolute: f64,
    /// `F_circuit / F_model`, undefined when the model scores zero.
    pub ratio: Option<f64>,
}

pub fn faithfulness(model: &TransformerModel, c: &Circuit, d: &Dataset, means: &MeanCache) -> Result<Faithfulness> {
    let f_circuit = run_circuit(model, c, d, means)?;
    let f_model = model_metric(model, d, means)?;
    Ok(Faithfulness {
        f_model,
        f_circuit,
        absolute: (f_model - f_circuit).abs(),
        ratio: (f_model != 0.0).then(|| f_circuit / f_model),
    })
}

fn check_subset(c: &Circuit, k: &[NodeKey]) -> Result<()> {
    for key in k {
        if !c.nodes.contains_key(key) {
            return Err(Error::Circuit(format!("{} is not in the circuit", key_name(key))));
        }
    }
    Ok(())
}

/// `|F(C \ (K ∪ {v})) − F(C \ K)|`. `K` defaults to the other nodes of `v`'s
/// role class.
pub fn minimality(
    model: &TransformerModel,
    c: &Circuit,
    v: NodeKey,
    k: Option<&[NodeKey]>,
    d: &Dataset,
    means: &MeanCache,
) -> Result<f64> {
    let role = c.role(v).ok_or_else(|| Error::Circuit(format!("{} is not in the circuit", key_name(&v))))?;
    let k: Vec<NodeKey> = match k {
        Some(k) => k.to_vec(),
        None => c.nodes.iter().filter(|(key, &r)| r == role && **key != v).map(|(key, _)| *key).collect(),
    };
    check_subset(c, &k)?;
    if k.contains(&v) {
        return Err(Error::Circuit("K must not contain v".into()));
    }
    let without_k = c.without(&k);
    let mut kv = k.clone();
    kv.push(v);
    let without_kv = c.without(&kv);
    Ok((run_circuit(model, &without_kv, d, means)? - run_circuit(model, &without_k, d, means)?).abs())
}

/// `|F(C \ K) − F(M \ K)|`.
pub fn completeness(model: &TransformerModel, c: &Circuit, k: &[NodeKey], d: &Dataset, means: &MeanCache) -> Result<f64> {
    check_subset(c, k)?;
    let f_c = run_circuit(model, &c.without(k), d, means)?;
    let knocked: Vec<NodeAt> = k.iter().map(|&(n, p)| NodeAt::new(n, p)).collect();
    let f_m = knockout(model, d, &knocked, means)?;
    Ok((f_m - f_c).abs())
}

/// Head-position pairs in the circuit over all head-position pairs; a head
/// at `all` counts every position role.
pub fn sparsity(c: &Circuit, cfg: &ModelConfig, n_positions: usize) -> f64 {
    let mut per_head: BTreeMap<HeadRef, BTreeSet<PositionRole>> = BTreeMap::new();
    for (n, p) in c.nodes.keys() {
        if let NodeRef::Head(h) = n {
            per_head.entry(*h).or_default().insert(*p);
        }
    }
    let pairs: usize = per_head
        .values()
        .map(|roles| if roles.contains(&PositionRole::All) { n_positions } else { roles.len().min(n_positions) })
        .sum();
    pairs as f64 / (cfg.n_layers * cfg.n_heads * n_positions) as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CircuitEval {
    pub f_model: f64,
    pub f_circuit: f64,
    pub faithfulness: f64,
    pub ratio: Option<f64>,
    pub sparsity: f64,
    pub minimality: BTreeMap<String, f64>,
    pub incompleteness: BTreeMap<RoleClass, f64>,
}

/// All four circuit metrics; incompleteness sweeps each role class present.
pub fn evaluate(model: &TransformerModel, c: &Circuit, d: &Dataset, means: &MeanCache) -> Result<CircuitEval> {
    let f = faithfulness(model, c, d, means)?;
    let mut minimality_scores = BTreeMap::new();
    for key in c.nodes.keys() {
        minimality_scores.insert(key_name(key), minimality(model, c, *key, None, d, means)?);
    }
    let mut incompleteness = BTreeMap::new();
    for class in RoleClass::ALL {
        let k: Vec<NodeKey> = c.nodes.iter().filter(|(_, &r)| r == class).map(|(k, _)| *k).collect();
        if !k.is_empty() {
            incompleteness.insert(class, completeness(model, c, &k, d, means)?);
        }
    }
    Ok(CircuitEval {
        f_model: f.f_model,
        f_circuit: f.f_circuit,
        faithfulness: f.absolute,
        ratio: f.ratio,
        sparsity: sparsity(c, model.config(), PositionRole::roles_for(c.task).len()),
        minimality: minimality_scores,
        incompleteness,
    })
}

/// Attention and attribution measurements behind a head's role.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadDiagnostics {
    /// Direct logit attribution at END.
    pub attribution: f64,
    pub end_to_io: f64,
    /// END attention on both subject positions.
    pub end_to_s: f64,
    pub s2_to_s1: f64,
    pub s2_to_s1_plus_1: f64,
    pub s1_plus_1_to_s1: f64,
}

/// Role rules for a head acting at `position`. `floor` is the attribution
/// magnitude that counts as writing to the logits.
///
/// END heads that write to the logits are movers by the sign of their
/// attribution; attention on the name tokens themselves is not required,
/// since a mover may read a name from a later position it was copied to.
pub fn classify(diag: &HeadDiagnostics, position: PositionRole, floor: f64) -> RoleClass {
    let positional = |d: &HeadDiagnostics, s2: bool, s1_plus_1: bool| {
        if s2 && d.s2_to_s1_plus_1 >= ATTENTION_FLOOR && d.s2_to_s1_plus_1 > d.s2_to_s1 {
            Some(RoleClass::Induction)
        } else if s2 && d.s2_to_s1 >= ATTENTION_FLOOR {
            Some(RoleClass::DuplicateToken)
        } else if s1_plus_1 && d.s1_plus_1_to_s1 >= ATTENTION_FLOOR {
            Some(RoleClass::PreviousToken)
        } else {
            None
        }
    };
    let role = match position {
        PositionRole::End => {
            if diag.attribution >= floor {
                Some(RoleClass::NameMover)
            } else if diag.attribution <= -floor {
                Some(RoleClass::NegativeNameMover)
            } else if diag.end_to_s > diag.end_to_io {
                Some(RoleClass::SInhibition)
            } else {
                None
            }
        }
        PositionRole::S2 => positional(diag, true, false),
        PositionRole::S1Plus1 => positional(diag, false, true),
        PositionRole::All => positional(diag, true, true),
        _ => None,
    };
    role.unwrap_or(RoleClass::Other)
}

pub fn head_diagnostics(model: &TransformerModel, heads: &[HeadRef], d: &Dataset) -> Result<Vec<HeadDiagnostics>> {
    d.require_task(Task::Ioi)?;
    let attr = end_attributions(model, d, &[], None)?;
    use PositionRole as P;
    let att = |src, dst| mean_attention(model, d, heads, src, dst);
    let (io, s1, s2) = (att(P::Io, P::End)?, att(P::S1, P::End)?, att(P::S2, P::End)?);
    let (dup, ind, prev) = (att(P::S1, P::S2)?, att(P::S1Plus1, P::S2)?, att(P::S1, P::S1Plus1)?);
    Ok(heads
        .iter()
        .enumerate()
        .map(|(i, h)| HeadDiagnostics {
            attribution: attr.get(NodeRef::Head(*h)),
            end_to_io: io[i],
            end_to_s: s1[i] + s2[i],
            s2_to_s1: dup[i],
            s2_to_s1_plus_1: ind[i],
            s1_plus_1_to_s1: prev[i],
        })
        .collect())
}

/// Classifies one head acting at `position` on IOI data.
pub fn classify_head(
    model: &TransformerModel,
    h: HeadRef,
    position: PositionRole,
    d: &Dataset,
) -> Result<(RoleClass, HeadDiagnostics)> {
    h.check(model.config())?;
    let diag = head_diagnostics(model, &[h], d)?[0];
    let f = eval_metric(model, d, Metric::LogitDiff)?.mean;
    Ok((classify(&diag, position, DEFAULT_THRESHOLD * f.abs()), diag))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiscoverOptions {
    /// Keep a sender when `|delta| > threshold · |F_model|`.
    pub threshold: f64,
    /// Rounds of receivers, counting the logits round.
    pub max_depth: usize,
    /// Seed of the counterfactual names.
    pub seed: u64,
}

impl Default for DiscoverOptions {
    fn default() -> Self {
        DiscoverOptions { threshold: DEFAULT_THRESHOLD, max_depth: 4, seed: 0 }
    }
}

pub fn discover(model: &TransformerModel, d: &Dataset, means: &MeanCache, threshold: f64) -> Result<Circuit> {
    discover_with(model, d, means, &DiscoverOptions { threshold, ..DiscoverOptions::default() })
}

fn receivers_of(node: NodeRef, position: PositionRole) -> Vec<Receiver> {
    match node {
        NodeRef::Head(head) => vec![
            Receiver::Head { head, site: QkvSite::Q, positions: position },
            Receiver::Head { head, site: QkvSite::K, positions: PositionRole::All },
            Receiver::Head { head, site: QkvSite::V, positions: PositionRole::All },
        ],
        NodeRef::Mlp(layer) => vec![Receiver::Mlp { layer, positions: position }],
        NodeRef::Embed => Vec::new(),
    }
}

/// Mean over samples of the absolute per-sample metric change.
fn mean_abs_delta(ctx: &PatchContext<'_>, spec: &PatchSpec) -> Result<f64> {
    let patched = ctx.path_patch_report(spec)?;
    let deltas: Vec<f64> =
        patched.per_sample.iter().zip(&ctx.baseline.per_sample).map(|(p, b)| (p - b).abs()).collect();
    Ok(crate::train::mean(&deltas))
}

/// Greedy discovery: senders to the logits first, then senders to the
/// q/k/v inputs of the previous round's heads, then role rules and backup
/// movers.
pub fn discover_with(model: &TransformerModel, d: &Dataset, means: &MeanCache, opts: &DiscoverOptions) -> Result<Circuit> {
    let task = d.task()?;
    let f_model = eval_metric(model, d, Metric::default_for(task))?.mean;
    if !(f_model.abs() >= MIN_MODEL_METRIC) {
        return Err(Error::Divergent(f_model));
    }
    let mut c = Circuit::new(model, task, opts.threshold);
    let cut = opts.threshold * f_model.abs();
    if !cut.is_finite() || opts.max_depth == 0 {
        return Ok(c);
    }
    let x_new = match task {
        Task::Ioi => data::resample_names(d, opts.seed)?,
        Task::GreaterThan => data::lowest_year_counterfactual(d)?,
    };
    let ctx = PatchContext::new(model, d, &x_new)?;
    let senders: Vec<NodeRef> = NodeRef::all(model.config())
        .into_iter()
        .filter(|n| match n {
            NodeRef::Head(_) => true,
            NodeRef::Mlp(_) => ablates_mlps(task),
            NodeRef::Embed => false,
        })
        .collect();

    let mut round: Vec<(NodeRef, PositionRole, f64)> = Vec::new();
    for &s in &senders {
        let spec = PatchSpec { sender: s, sender_positions: PositionRole::End, receivers: vec![Receiver::Logits] };
        let delta = mean_abs_delta(&ctx, &spec)?;
        if delta.abs() > cut {
            round.push((s, PositionRole::End, delta));
        }
    }
    let mut depth = 1;
    loop {
        round.sort_by(|a, b| b.2.abs().total_cmp(&a.2.abs()));
        for &(n, p, _) in &round {
            let role = if matches!(n, NodeRef::Mlp(_)) { RoleClass::Mlp } else { RoleClass::Other };
            c.insert(n, p, role)?;
        }
        if round.is_empty() || depth >= opts.max_depth {
            break;
        }
        let receivers: Vec<Receiver> = round.iter().flat_map(|&(n, p, _)| receivers_of(n, p)).collect();
        let mut next = Vec::new();
        for &s in &senders {
            let downstream: Vec<Receiver> = receivers.iter().copied().filter(|r| r.downstream_of(s)).collect();
            if downstream.is_empty() {
                continue;
            }
            for &p in PositionRole::roles_for(task).iter().chain([&PositionRole::All]) {
                if c.contains(s, p) {
                    continue;
                }
                let spec = PatchSpec { sender: s, sender_positions: p, receivers: downstream.clone() };
                let delta = mean_abs_delta(&ctx, &spec)?;
                if delta.abs() > cut {
                    next.push((s, p, delta));
                }
            }
        }
        round = next;
        depth += 1;
    }

    if task == Task::Ioi && !c.is_empty() {
        assign_roles(model, &mut c, d, cut)?;
        attach_backups(model, &mut c, d, means, cut)?;
    }
    Ok(c)
}

fn assign_roles(model: &TransformerModel, c: &mut Circuit, d: &Dataset, floor: f64) -> Result<()> {
    let heads = c.heads();
    let diags = head_diagnostics(model, &heads, d)?;
    let by_head: BTreeMap<HeadRef, HeadDiagnostics> = heads.into_iter().zip(diags).collect();
    let keys: Vec<NodeKey> = c.nodes.keys().copied().collect();
    for key in keys {
        if let NodeRef::Head(h) = key.0 {
            c.set_role(key, classify(&by_head[&h], key.1, floor))?;
        }
    }
    Ok(())
}

/// Heads whose END attribution rises by more than `cut` when a single name
/// mover is mean-ablated.
fn attach_backups(model: &TransformerModel, c: &mut Circuit, d: &Dataset, means: &MeanCache, cut: f64) -> Result<()> {
    let movers: Vec<NodeAt> = c.class_nodes(RoleClass::NameMover).collect();
    if movers.is_empty() {
        return Ok(());
    }
    let base = end_attributions(model, d, &[], None)?;
    let mut backups = BTreeSet::new();
    for m in &movers {
        let ablated = end_attributions(model, d, std::slice::from_ref(m), Some(means))?;
        for (&node, &a) in &ablated.per_node {
            let NodeRef::Head(_) = node else { continue };
            let role = c.role((node, PositionRole::End));
            if matches!(role, Some(RoleClass::NameMover | RoleClass::NegativeNameMover)) {
                continue;
            }
            if a - base.get(node) > cut {
                backups.insert(node);
            }
        }
    }
    for node in backups {
        match c.role((node, PositionRole::End)) {
            None => c.insert(node, PositionRole::End, RoleClass::BackupNameMover)?,
            Some(RoleClass::Other) => c.set_role((node, PositionRole::End), RoleClass::BackupNameMover)?,
            Some(_) => {}
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_ioi;
    use crate::model::{ModelConfig, TokenBatch};
    use crate::patch::{compute_mean_cache, reference_dataset};
    use milab_tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn model(layers: usize, heads: usize, seed: u64) -> TransformerModel {
        let cfg = ModelConfig {
            n_layers: layers,
            n_heads: heads,
            d_model: 16,
            d_head: 8,
            d_mlp: 32,
            vocab_size: 384,
            max_seq: 24,
            seed,
        };
        let mut m = TransformerModel::new(cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for t in m.weights_mut().tensors_mut() {
            for v in t.data_mut() {
                *v += rng.gen_range(-0.3..0.3);
            }
        }
        m
    }

    fn setup(seed: u64) -> (TransformerModel, Dataset, MeanCache) {
        let m = model(2, 2, seed);
        let d = gen_ioi(24, seed).unwrap();
        let means = compute_mean_cache(&m, &reference_dataset(Task::Ioi, 3, seed + 1).unwrap()).unwrap();
        (m, d, means)
    }

    #[test]
    fn all_nodes_circuit_matches_the_model() {
        let (m, d, means) = setup(1);
        let c = Circuit::all_nodes(&m, Task::Ioi);
        let f = faithfulness(&m, &c, &d, &means).unwrap();
        assert!(f.absolute < 1e-10);
        for class in RoleClass::ALL {
            let k: Vec<NodeKey> = c.class_nodes(class).map(|n| (n.node, n.positions)).collect();
            assert!(completeness(&m, &c, &k, &d, &means).unwrap() < 1e-10);
        }
        assert_eq!(sparsity(&c, m.config(), 5), 1.0);
    }

    #[test]
    fn empty_circuit_is_the_full_knockout() {
        let (m, d, means) = setup(2);
        let c = Circuit::new(&m, Task::Ioi, 0.02);
        let all: Vec<NodeAt> = (0..2)
            .flat_map(|l| (0..2).map(move |h| NodeAt::new(NodeRef::Head(HeadRef::new(l, h)), PositionRole::All)))
            .collect();
        let a = run_circuit(&m, &c, &d, &means).unwrap();
        let b = knockout(&m, &d, &all, &means).unwrap();
        assert!((a - b).abs() < 1e-10);
    }

    #[test]
    fn completeness_of_nothing_is_faithfulness() {
        let (m, d, means) = setup(3);
        let mut c = Circuit::new(&m, Task::Ioi, 0.02);
        c.insert(NodeRef::Head(HeadRef::new(1, 0)), PositionRole::End, RoleClass::NameMover).unwrap();
        c.insert(NodeRef::Head(HeadRef::new(0, 1)), PositionRole::S2, RoleClass::DuplicateToken).unwrap();
        let f = faithfulness(&m, &c, &d, &means).unwrap();
        assert_eq!(completeness(&m, &c, &[], &d, &means).unwrap().to_bits(), f.absolute.to_bits());
    }

    #[test]
    fn stale_and_malformed_circuits_are_rejected() {
        let (m, d, means) = setup(4);
        let c = Circuit::new(&model(2, 2, 99), Task::Ioi, 0.02);
        assert!(matches!(run_circuit(&m, &c, &d, &means), Err(Error::StaleCircuit { .. })));
        let mut c = Circuit::new(&m, Task::Ioi, 0.02);
        let h = NodeRef::Head(HeadRef::new(0, 0));
        c.insert(h, PositionRole::End, RoleClass::Other).unwrap();
        assert!(c.insert(h, PositionRole::End, RoleClass::Other).is_err());
        assert!(c.insert(h, PositionRole::Xx, RoleClass::Other).is_err());
        assert!(c.insert(NodeRef::Embed, PositionRole::End, RoleClass::Other).is_err());
        assert!(minimality(&m, &c, (h, PositionRole::S1), None, &d, &means).is_err());
    }

    #[test]
    fn inert_head_has_zero_minimality() {
        let (mut m, d, _) = setup(5);
        {
            let blk = &mut m.weights_mut().blocks[0];
            blk.w_o.slab_data_mut(0).fill(0.0);
            blk.w_q.slab_data_mut(0).fill(0.0);
        }
        let means = compute_mean_cache(&m, &reference_dataset(Task::Ioi, 3, 6).unwrap()).unwrap();
        let mut c = Circuit::new(&m, Task::Ioi, 0.02);
        let v = (NodeRef::Head(HeadRef::new(0, 0)), PositionRole::All);
        c.insert(v.0, v.1, RoleClass::Other).unwrap();
        c.insert(NodeRef::Head(HeadRef::new(1, 1)), PositionRole::End, RoleClass::NameMover).unwrap();
        let f = model_metric(&m, &d, &means).unwrap();
        let score = minimality(&m, &c, v, None, &d, &means).unwrap();
        assert!(score < crate::patch::NOISE_FLOOR * f.abs());
        assert_eq!(score.to_bits(), minimality(&m, &c, v, None, &d, &means).unwrap().to_bits());
    }

    #[test]
    fn sparsity_counts_head_position_pairs() {
        let cfg = ModelConfig::default();
        let m = model(1, 2, 0);
        let mut c = Circuit::new(&m, Task::Ioi, 0.02);
        let roles = [PositionRole::End, PositionRole::S2, PositionRole::S1, PositionRole::Io, PositionRole::S1Plus1];
        for (i, (l, h)) in [(0, 0), (1, 2), (2, 3), (3, 1), (3, 3), (2, 0)].into_iter().enumerate() {
            c.nodes.insert((NodeRef::Head(HeadRef::new(l, h)), roles[i % 5]), RoleClass::Other);
        }
        assert_eq!(sparsity(&c, &cfg, 5), 6.0 / 80.0);
    }

    #[test]
    fn json_round_trip_and_diff() {
        let (m, _, _) = setup(6);
        let mut c = Circuit::new(&m, Task::Ioi, 0.02);
        c.insert(NodeRef::Head(HeadRef::new(1, 0)), PositionRole::End, RoleClass::NameMover).unwrap();
        c.insert(NodeRef::Head(HeadRef::new(0, 1)), PositionRole::S1Plus1, RoleClass::PreviousToken).unwrap();
        let text = c.to_json().unwrap();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v["task"], "ioi");
        assert_eq!(v["nodes"][0]["position"], "S1+1");
        assert_eq!(v["nodes"][0]["role"], "previous_token");
        assert_eq!(v["nodes"][0]["kind"], "head");
        let back = Circuit::from_json(&text).unwrap();
        assert_eq!(back, c);
        let same = diff(&c, &back);
        assert!(same.added.is_empty() && same.removed.is_empty() && same.reclassified.is_empty());
        let mut grown = c.clone();
        grown.insert(NodeRef::Head(HeadRef::new(1, 1)), PositionRole::End, RoleClass::BackupNameMover).unwrap();
        grown.set_role((NodeRef::Head(HeadRef::new(1, 0)), PositionRole::End), RoleClass::Other).unwrap();
        let dd = diff(&c, &grown);
        assert_eq!(dd.added, vec!["L1H1@END".to_string()]);
        assert_eq!(dd.reclassified.len(), 1);
        assert_eq!(node_overlap(&c, &grown), 1.0);
    }

    #[test]
    fn role_rules() {
        let base = HeadDiagnostics {
            attribution: 0.0,
            end_to_io: 0.0,
            end_to_s: 0.0,
            s2_to_s1: 0.0,
            s2_to_s1_plus_1: 0.0,
            s1_plus_1_to_s1: 0.0,
        };
        let mover = HeadDiagnostics { attribution: 1.0, end_to_io: 0.7, end_to_s: 0.1, ..base };
        assert_eq!(classify(&mover, PositionRole::End, 0.1), RoleClass::NameMover);
        let negative = HeadDiagnostics { attribution: -1.0, ..mover };
        assert_eq!(classify(&negative, PositionRole::End, 0.1), RoleClass::NegativeNameMover);
        let inhibition = HeadDiagnostics { attribution: 0.05, end_to_io: 0.1, end_to_s: 0.6, ..base };
        assert_eq!(classify(&inhibition, PositionRole::End, 0.1), RoleClass::SInhibition);
        let dup = HeadDiagnostics { s2_to_s1: 0.8, ..base };
        assert_eq!(classify(&dup, PositionRole::S2, 0.1), RoleClass::DuplicateToken);
        let ind = HeadDiagnostics { s2_to_s1_plus_1: 0.6, s2_to_s1: 0.2, ..base };
        assert_eq!(classify(&ind, PositionRole::S2, 0.1), RoleClass::Induction);
        let prev = HeadDiagnostics { s1_plus_1_to_s1: 0.9, ..base };
        assert_eq!(classify(&prev, PositionRole::S1Plus1, 0.1), RoleClass::PreviousToken);
        assert_eq!(classify(&base, PositionRole::Io, 0.1), RoleClass::Other);
        assert_eq!(classify(&prev, PositionRole::All, 0.1), RoleClass::PreviousToken);
        assert_eq!(classify(&base, PositionRole::End, 0.1), RoleClass::Other);
    }

    /// One layer, one head: queries and keys match on token identity and
    /// repel on equal position, so a repeated token attends its earlier copy.
    fn duplicate_token_model() -> TransformerModel {
        let (tok, pos) = (24, 24);
        let d = tok + pos;
        let cfg = ModelConfig {
            n_layers: 1,
            n_heads: 1,
            d_model: d,
            d_head: d,
            d_mlp: 4,
            vocab_size: 384,
            max_seq: 24,
            seed: 0,
        };
        let mut m = TransformerModel::new(cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let w = m.weights_mut();
        w.w_e = Tensor::from_fn(&[384, d], |i| if i % d >= pos { rng.sample(StandardNormal) } else { 0.0 });
        w.w_pos = Tensor::from_fn(&[24, d], |i| if i % d == i / d { 5.0 } else { 0.0 });
        let (alpha, beta) = (3.0, 6.0);
        let blk = &mut w.blocks[0];
        blk.w_q = Tensor::from_fn(&[1, d, d], |i| {
            let (r, c) = (i / d, i % d);
            if r != c { 0.0 } else if r >= pos { alpha } else { beta }
        });
        blk.w_k = Tensor::from_fn(&[1, d, d], |i| {
            let (r, c) = (i / d, i % d);
            if r != c { 0.0 } else if r >= pos { alpha } else { -beta }
        });
        blk.w_v = Tensor::from_fn(&[1, d, d], |i| if i / d == i % d { 1.0 } else { 0.0 });
        blk.w_o = blk.w_v.clone();
        blk.w_out.data_mut().fill(0.0);
        blk.b_out.data_mut().fill(0.0);
        m
    }

    #[test]
    fn constructed_duplicate_token_head_is_recognised() {
        let m = duplicate_token_model();
        let d = gen_ioi(40, 3).unwrap();
        let (role, diag) = classify_head(&m, HeadRef::new(0, 0), PositionRole::S2, &d).unwrap();
        assert!(diag.s2_to_s1 > 0.9, "{diag:?}");
        assert_eq!(role, RoleClass::DuplicateToken);
        let batch = TokenBatch::from_samples(&d.samples[..1]).unwrap();
        assert!(m.logits(&batch).unwrap().is_finite());
    }

    #[test]
    fn discovery_edges() {
        let (m, d, means) = setup(7);
        let untrained = TransformerModel::new(ModelConfig { seed: 3, ..m.config().clone() }).unwrap();
        assert!(matches!(discover(&untrained, &d, &means, 0.02), Err(Error::Divergent(_))));
        let f = eval_metric(&m, &d, Metric::LogitDiff).unwrap().mean;
        if f.abs() >= MIN_MODEL_METRIC {
            assert!(discover(&m, &d, &means, f64::INFINITY).unwrap().is_empty());
            let a = discover(&m, &d, &means, 0.05).unwrap();
            let b = discover(&m, &d, &means, 0.05).unwrap();
            assert_eq!(a, b);
        }
    }
}
