// SPDX-License-Identifier: MIT OR Apache-2.0

//! Plain-loop reference forward pass with editable sites, used as an
//! independent oracle for the patching and circuit code.

#![allow(dead_code)]

use milab::data::{PromptSample, Task};
use milab::model::{ModelConfig, TransformerModel};
use milab::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub const EPS: f64 = 1e-5;

/// A site the reference forward pass exposes to an editor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Site {
    Embed,
    Q(usize, usize),
    K(usize, usize),
    V(usize, usize),
    Head(usize, usize),
    MlpIn(usize),
    Mlp(usize),
    Final,
}

/// Values of one sequence's forward pass after edits, indexed by position.
#[derive(Debug, Clone, Default)]
pub struct Trace {
    pub embed: Vec<Vec<f64>>,
    pub resid_pre: Vec<Vec<Vec<f64>>>,
    pub q: Vec<Vec<Vec<Vec<f64>>>>,
    pub k: Vec<Vec<Vec<Vec<f64>>>>,
    pub v: Vec<Vec<Vec<Vec<f64>>>>,
    pub head: Vec<Vec<Vec<Vec<f64>>>>,
    pub mlp_in: Vec<Vec<Vec<f64>>>,
    pub mlp: Vec<Vec<Vec<f64>>>,
    pub final_resid: Vec<Vec<f64>>,
}

impl Trace {
    pub fn site(&self, site: Site, pos: usize) -> &[f64] {
        match site {
            Site::Embed => &self.embed[pos],
            Site::Q(l, h) => &self.q[l][h][pos],
            Site::K(l, h) => &self.k[l][h][pos],
            Site::V(l, h) => &self.v[l][h][pos],
            Site::Head(l, h) => &self.head[l][h][pos],
            Site::MlpIn(l) => &self.mlp_in[l][pos],
            Site::Mlp(l) => &self.mlp[l][pos],
            Site::Final => &self.final_resid[pos],
        }
    }
}

/// Parameters copied out of a model into nested vectors.
pub struct RefModel {
    pub cfg: ModelConfig,
    w_e: Vec<Vec<f64>>,
    w_pos: Vec<Vec<f64>>,
    blocks: Vec<RefBlock>,
    ln_f_w: Vec<f64>,
    w_u: Vec<Vec<f64>>,
}

struct RefBlock {
    ln1_w: Vec<f64>,
    ln1_b: Vec<f64>,
    w_q: Vec<Vec<Vec<f64>>>,
    w_k: Vec<Vec<Vec<f64>>>,
    w_v: Vec<Vec<Vec<f64>>>,
    w_o: Vec<Vec<Vec<f64>>>,
    ln2_w: Vec<f64>,
    ln2_b: Vec<f64>,
    w_in: Vec<Vec<f64>>,
    b_in: Vec<f64>,
    w_out: Vec<Vec<f64>>,
    b_out: Vec<f64>,
}

fn mat(t: &Tensor) -> Vec<Vec<f64>> {
    let cols = t.shape()[1];
    t.data().chunks(cols).map(|r| r.to_vec()).collect()
}

fn mat3(t: &Tensor) -> Vec<Vec<Vec<f64>>> {
    let (a, b, c) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    (0..a).map(|i| (0..b).map(|j| t.data()[(i * b + j) * c..(i * b + j + 1) * c].to_vec()).collect()).collect()
}

fn layer_norm(x: &[f64], w: &[f64], b: Option<&[f64]>) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + EPS).sqrt();
    (0..x.len()).map(|i| (x[i] - mean) * inv * w[i] + b.map_or(0.0, |b| b[i])).collect()
}

fn gelu(v: f64) -> f64 {
    0.5 * v * (1.0 + libm::erf(v / std::f64::consts::SQRT_2))
}

/// `x · m` for a row vector and an `[in][out]` matrix.
fn vecmat(x: &[f64], m: &[Vec<f64>]) -> Vec<f64> {
    let mut out = vec![0.0; m[0].len()];
    for (i, xi) in x.iter().enumerate() {
        for (j, o) in out.iter_mut().enumerate() {
            *o += xi * m[i][j];
        }
    }
    out
}

impl RefModel {
    pub fn new(model: &TransformerModel) -> Self {
        let w = model.weights();
        RefModel {
            cfg: model.config().clone(),
            w_e: mat(&w.w_e),
            w_pos: mat(&w.w_pos),
            blocks: w
                .blocks
                .iter()
                .map(|b| RefBlock {
                    ln1_w: b.ln1_w.data().to_vec(),
                    ln1_b: b.ln1_b.data().to_vec(),
                    w_q: mat3(&b.w_q),
                    w_k: mat3(&b.w_k),
                    w_v: mat3(&b.w_v),
                    w_o: mat3(&b.w_o),
                    ln2_w: b.ln2_w.data().to_vec(),
                    ln2_b: b.ln2_b.data().to_vec(),
                    w_in: mat(&b.w_in),
                    b_in: b.b_in.data().to_vec(),
                    w_out: mat(&b.w_out),
                    b_out: b.b_out.data().to_vec(),
                })
                .collect(),
            ln_f_w: w.ln_f_w.data().to_vec(),
            w_u: mat(&w.w_u),
        }
    }

    /// Runs one sequence; `edit` may rewrite every site value in place
    /// before it is used downstream.
    pub fn forward(&self, tokens: &[usize], edit: &mut dyn FnMut(Site, usize, &mut Vec<f64>)) -> Trace {
        let (n, nl, nh, d) = (tokens.len(), self.cfg.n_layers, self.cfg.n_heads, self.cfg.d_model);
        let mut t = Trace::default();
        let mut x: Vec<Vec<f64>> = Vec::new();
        for (p, &tok) in tokens.iter().enumerate() {
            let mut e: Vec<f64> = (0..d).map(|i| self.w_e[tok][i] + self.w_pos[p][i]).collect();
            edit(Site::Embed, p, &mut e);
            x.push(e.clone());
            t.embed.push(e);
        }
        let scale = 1.0 / (self.cfg.d_head as f64).sqrt();
        for l in 0..nl {
            let blk = &self.blocks[l];
            t.resid_pre.push(x.clone());
            let a_in: Vec<Vec<f64>> = x.iter().map(|r| layer_norm(r, &blk.ln1_w, Some(&blk.ln1_b))).collect();
            let (mut ql, mut kl, mut vl, mut hl) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
            for h in 0..nh {
                let mut proj = |w: &Vec<Vec<f64>>, site: Site| -> Vec<Vec<f64>> {
                    (0..n)
                        .map(|p| {
                            let mut r = vecmat(&a_in[p], w);
                            edit(site, p, &mut r);
                            r
                        })
                        .collect()
                };
                let q = proj(&blk.w_q[h], Site::Q(l, h));
                let k = proj(&blk.w_k[h], Site::K(l, h));
                let v = proj(&blk.w_v[h], Site::V(l, h));
                let mut out = Vec::new();
                for p in 0..n {
                    let scores: Vec<f64> = (0..=p)
                        .map(|j| q[p].iter().zip(&k[j]).map(|(a, b)| a * b).sum::<f64>() * scale)
                        .collect();
                    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
                    let mut zv = vec![0.0; self.cfg.d_head];
                    for j in 0..=p {
                        let a = (scores[j] - m).exp() / z;
                        for (zi, vi) in zv.iter_mut().zip(&v[j]) {
                            *zi += a * vi;
                        }
                    }
                    let mut r = vecmat(&zv, &blk.w_o[h]);
                    edit(Site::Head(l, h), p, &mut r);
                    out.push(r);
                }
                ql.push(q);
                kl.push(k);
                vl.push(v);
                hl.push(out);
            }
            for p in 0..n {
                for h in 0..nh {
                    for i in 0..d {
                        x[p][i] += hl[h][p][i];
                    }
                }
            }
            let mut mins = Vec::new();
            let mut mouts = Vec::new();
            for p in 0..n {
                let mut m_in = layer_norm(&x[p], &blk.ln2_w, Some(&blk.ln2_b));
                edit(Site::MlpIn(l), p, &mut m_in);
                let hidden: Vec<f64> =
                    vecmat(&m_in, &blk.w_in).iter().zip(&blk.b_in).map(|(a, b)| gelu(a + b)).collect();
                let mut out: Vec<f64> = vecmat(&hidden, &blk.w_out).iter().zip(&blk.b_out).map(|(a, b)| a + b).collect();
                edit(Site::Mlp(l), p, &mut out);
                for i in 0..d {
                    x[p][i] += out[i];
                }
                mins.push(m_in);
                mouts.push(out);
            }
            t.q.push(ql);
            t.k.push(kl);
            t.v.push(vl);
            t.head.push(hl);
            t.mlp_in.push(mins);
            t.mlp.push(mouts);
        }
        for (p, row) in x.iter_mut().enumerate() {
            edit(Site::Final, p, row);
        }
        t.final_resid = x;
        t
    }

    pub fn logits(&self, final_resid: &[f64]) -> Vec<f64> {
        vecmat(&layer_norm(final_resid, &self.ln_f_w, None), &self.w_u)
    }

    pub fn run(&self, tokens: &[usize]) -> Trace {
        self.forward(tokens, &mut |_, _, _| {})
    }
}

/// Task metric of one sample from END logits.
pub fn sample_metric(s: &PromptSample, logits: &[f64]) -> f64 {
    match s.task {
        Task::Ioi => logits[s.io_token().unwrap()] - logits[s.s_token().unwrap()],
        Task::GreaterThan => {
            let vocab = milab::data::Vocabulary::standard();
            let xx = s.xx.unwrap() as u32;
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|v| (v - m).exp()).sum();
            vocab
                .year_ids()
                .iter()
                .map(|&id| {
                    let p = (logits[id] - m).exp() / z;
                    if vocab.year_of(id).unwrap() > xx {
                        p
                    } else {
                        -p
                    }
                })
                .sum()
        }
    }
}

/// Small model with weights drawn at a scale large enough for nontrivial
/// attention and MLP effects.
pub fn random_model(rng: &mut ChaCha8Rng, n_layers: usize, n_heads: usize) -> TransformerModel {
    let d_head = 4;
    let cfg = ModelConfig {
        n_layers,
        n_heads,
        d_model: d_head * n_heads,
        d_head,
        d_mlp: 8,
        vocab_size: milab::data::Vocabulary::standard().len(),
        max_seq: 24,
        seed: rng.gen(),
    };
    let mut model = TransformerModel::new(cfg).unwrap();
    let std = rng.gen_range(0.3..0.9);
    let normal = Normal::new(0.0, std).unwrap();
    let mut wrng = ChaCha8Rng::seed_from_u64(rng.gen());
    for t in model.weights_mut().tensors_mut() {
        let offset = if t.rank() == 1 { 1.0 } else { 0.0 };
        for v in t.data_mut() {
            *v = normal.sample(&mut wrng) + offset;
        }
    }
    model
}

use milab::data::{Dataset, PositionRole};
use milab::model::NodeRef;
use milab::patch::{PatchSpec, QkvSite, Receiver};

fn node_site(node: NodeRef) -> Site {
    match node {
        NodeRef::Embed => Site::Embed,
        NodeRef::Head(h) => Site::Head(h.layer, h.head),
        NodeRef::Mlp(l) => Site::Mlp(l),
    }
}

/// Mean metric over the dataset, unpatched.
pub fn clean_metric(m: &RefModel, d: &Dataset) -> f64 {
    let total: f64 = d
        .samples
        .iter()
        .map(|s| sample_metric(s, &m.logits(&m.run(&s.tokens).final_resid[s.end()])))
        .sum();
    total / d.len() as f64
}

/// Path patching by explicit surgery on three full forward passes per
/// sample: the sender is swapped to its counterfactual value while every
/// head above the sender layer is pinned to its clean output, receiver
/// inputs are read off that run, and a final clean run has only those
/// receiver inputs overwritten.
pub fn oracle_path_patch(m: &RefModel, x_orig: &Dataset, x_new: &Dataset, spec: &PatchSpec) -> f64 {
    let sender = node_site(spec.sender);
    let sender_layer = spec.sender.layer();
    let mut total = 0.0;
    for (s, sn) in x_orig.samples.iter().zip(&x_new.samples) {
        let orig = m.run(&s.tokens);
        let new = m.run(&sn.tokens);
        let sender_pos = s.resolve(spec.sender_positions).unwrap();
        let frozen = |l: usize| sender_layer.map_or(true, |sl| l > sl);
        let mid = m.forward(&s.tokens, &mut |site, p, v| {
            if site == sender && sender_pos.contains(&p) {
                *v = new.site(sender, p).to_vec();
            } else if let Site::Head(l, _) = site {
                if frozen(l) {
                    *v = orig.site(site, p).to_vec();
                }
            }
        });
        let mut targets: Vec<(Site, Vec<usize>)> = Vec::new();
        for r in &spec.receivers {
            match *r {
                Receiver::Logits => targets.push((Site::Final, vec![s.end()])),
                Receiver::Head { head, site, positions } => {
                    let st = match site {
                        QkvSite::Q => Site::Q(head.layer, head.head),
                        QkvSite::K => Site::K(head.layer, head.head),
                        QkvSite::V => Site::V(head.layer, head.head),
                    };
                    targets.push((st, s.resolve(positions).unwrap()));
                }
                Receiver::Mlp { layer, positions } => targets.push((Site::MlpIn(layer), s.resolve(positions).unwrap())),
            }
        }
        let out = m.forward(&s.tokens, &mut |site, p, v| {
            if targets.iter().any(|(t, ps)| *t == site && ps.contains(&p)) {
                *v = mid.site(site, p).to_vec();
            }
        });
        total += sample_metric(s, &m.logits(&out.final_resid[s.end()]));
    }
    total / x_orig.len() as f64
}

/// Per-template, per-position mean outputs of every node over a reference
/// set, keyed by template id.
pub struct RefMeans {
    pub per_template: std::collections::BTreeMap<usize, Vec<(Site, Vec<Vec<f64>>)>>,
}

impl RefMeans {
    pub fn new(m: &RefModel, reference: &Dataset) -> Self {
        let mut sums: std::collections::BTreeMap<usize, (usize, Vec<(Site, Vec<Vec<f64>>)>)> = Default::default();
        let sites: Vec<Site> = NodeRef::all(&m.cfg).into_iter().map(node_site).collect();
        for s in &reference.samples {
            let t = m.run(&s.tokens);
            let entry = sums
                .entry(s.template_id)
                .or_insert_with(|| (0, sites.iter().map(|&site| (site, vec![vec![0.0; m.cfg.d_model]; s.len()])).collect()));
            entry.0 += 1;
            for (site, rows) in entry.1.iter_mut() {
                for (p, row) in rows.iter_mut().enumerate() {
                    for (a, b) in row.iter_mut().zip(t.site(*site, p)) {
                        *a += b;
                    }
                }
            }
        }
        let per_template = sums
            .into_iter()
            .map(|(id, (n, mut v))| {
                for (_, rows) in v.iter_mut() {
                    for row in rows.iter_mut() {
                        for a in row.iter_mut() {
                            *a /= n as f64;
                        }
                    }
                }
                (id, v)
            })
            .collect();
        RefMeans { per_template }
    }

    pub fn row(&self, template: usize, site: Site, pos: usize) -> &[f64] {
        let v = &self.per_template[&template];
        &v.iter().find(|(s, _)| *s == site).unwrap().1[pos]
    }
}

/// Mean metric with `ablate(sample)` listing (node, positions) to replace by
/// their reference means.
pub fn oracle_ablated(
    m: &RefModel,
    d: &Dataset,
    means: &RefMeans,
    ablate: &dyn Fn(&PromptSample) -> Vec<(NodeRef, Vec<usize>)>,
) -> f64 {
    let mut total = 0.0;
    for s in &d.samples {
        let list: Vec<(Site, Vec<usize>)> = ablate(s).into_iter().map(|(n, ps)| (node_site(n), ps)).collect();
        let out = m.forward(&s.tokens, &mut |site, p, v| {
            if list.iter().any(|(t, ps)| *t == site && ps.contains(&p)) {
                *v = means.row(s.template_id, site, p).to_vec();
            }
        });
        total += sample_metric(s, &m.logits(&out.final_resid[s.end()]));
    }
    total / d.len() as f64
}

/// Positions of `s` covered by any of the roles.
pub fn covered(s: &PromptSample, roles: &[PositionRole]) -> Vec<bool> {
    let mut kept = vec![false; s.len()];
    for r in roles {
        for p in s.resolve(*r).unwrap() {
            kept[p] = true;
        }
    }
    kept
}

use milab::circuit::{self, Circuit, NodeKey, RoleClass};
use milab::model::HeadRef;
use milab::patch;

fn small_task_data(task: Task, n: usize, seed: u64) -> (Dataset, Dataset) {
    match task {
        Task::Ioi => {
            let d = milab::data::gen_ioi(n, seed).unwrap();
            let x_new = milab::data::resample_names(&d, seed + 1).unwrap();
            (d, x_new)
        }
        Task::GreaterThan => {
            let d = milab::data::gen_greater_than(n, seed).unwrap();
            let x_new = milab::data::lowest_year_counterfactual(&d).unwrap();
            (d, x_new)
        }
    }
}

fn random_receivers(rng: &mut ChaCha8Rng, cfg: &ModelConfig, task: Task, sender: NodeRef) -> Vec<Receiver> {
    let roles: Vec<PositionRole> = PositionRole::roles_for(task).iter().copied().chain([PositionRole::All; 3]).collect();
    let mut pool = Vec::new();
    for h in HeadRef::all(cfg) {
        for site in [QkvSite::Q, QkvSite::K, QkvSite::V] {
            let r = Receiver::Head { head: h, site, positions: roles[rng.gen_range(0..roles.len())] };
            if r.downstream_of(sender) {
                pool.push(r);
            }
        }
    }
    for layer in 0..cfg.n_layers {
        let r = Receiver::Mlp { layer, positions: roles[rng.gen_range(0..roles.len())] };
        if r.downstream_of(sender) {
            pool.push(r);
        }
    }
    if pool.is_empty() || rng.gen_bool(0.15) {
        return vec![Receiver::Logits];
    }
    let k = rng.gen_range(1..=pool.len().min(2));
    let mut out = Vec::new();
    while out.len() < k {
        let r = pool[rng.gen_range(0..pool.len())];
        if !out.contains(&r) {
            out.push(r);
        }
    }
    out
}

/// Largest gap between the library's path patching and the surgery oracle
/// over `draws` random models, datasets and patch specs, and the number of
/// draws whose patch moved the metric by more than 1e-3.
pub fn path_patch_max_error(draws: usize, seed: u64) -> (f64, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let mut moved = 0;
    for i in 0..draws {
        let (layers, heads) = (rng.gen_range(1..=2), rng.gen_range(1..=2));
        let model = random_model(&mut rng, layers, heads);
        let r = RefModel::new(&model);
        let task = if i % 5 == 4 { Task::GreaterThan } else { Task::Ioi };
        let (d, x_new) = small_task_data(task, 3, rng.gen());
        let nodes = NodeRef::all(model.config());
        let sender = nodes[rng.gen_range(0..nodes.len())];
        let roles: Vec<PositionRole> = PositionRole::roles_for(task).iter().copied().chain([PositionRole::All]).collect();
        // Most draws patch every position so most patches carry signal.
        let sender_positions =
            if rng.gen_bool(0.7) { PositionRole::All } else { roles[rng.gen_range(0..roles.len())] };
        let spec = PatchSpec {
            sender,
            sender_positions,
            receivers: random_receivers(&mut rng, model.config(), task, sender),
        };
        let got = patch::path_patch(&model, &d, &x_new, &spec).unwrap();
        let want = oracle_path_patch(&r, &d, &x_new, &spec);
        let base = clean_metric(&r, &d);
        worst = worst.max((got.patched - want).abs()).max((got.baseline - base).abs());
        moved += usize::from((want - base).abs() > 1e-3);
    }
    (worst, moved)
}

/// Oracle `F` of a node set: complement heads (and MLPs for greater-than)
/// replaced by reference means, extra `knocked` nodes ablated too.
fn oracle_circuit_metric(m: &RefModel, task: Task, keep: &[NodeKey], d: &Dataset, means: &RefMeans) -> f64 {
    oracle_ablated(m, d, means, &|s: &PromptSample| {
        let mut out = Vec::new();
        for node in NodeRef::all(&m.cfg) {
            let eligible = match node {
                NodeRef::Head(_) => true,
                NodeRef::Mlp(_) => task == Task::GreaterThan,
                NodeRef::Embed => false,
            };
            if !eligible {
                continue;
            }
            let roles: Vec<PositionRole> = keep.iter().filter(|(n, _)| *n == node).map(|(_, r)| *r).collect();
            let kept = covered(s, &roles);
            let ps: Vec<usize> = (0..s.len()).filter(|&p| !kept[p]).collect();
            out.push((node, ps));
        }
        out
    })
}

fn oracle_knockout(m: &RefModel, k: &[NodeKey], d: &Dataset, means: &RefMeans) -> f64 {
    oracle_ablated(m, d, means, &|s: &PromptSample| {
        k.iter().map(|(n, r)| (*n, s.resolve(*r).unwrap())).collect()
    })
}

/// Random circuit over heads (and MLPs for greater-than) with random classes.
fn random_circuit(rng: &mut ChaCha8Rng, model: &TransformerModel, task: Task) -> Circuit {
    let mut c = Circuit::new(model, task, 0.02);
    let roles: Vec<PositionRole> = PositionRole::roles_for(task).iter().copied().chain([PositionRole::All]).collect();
    let classes = RoleClass::ALL;
    let mut nodes: Vec<NodeRef> = HeadRef::all(model.config()).into_iter().map(NodeRef::Head).collect();
    if task == Task::GreaterThan {
        nodes.extend((0..model.config().n_layers).map(NodeRef::Mlp));
    }
    for n in nodes {
        for &r in &roles {
            if rng.gen_bool(0.35) {
                let _ = c.insert(n, r, classes[rng.gen_range(0..classes.len())]);
            }
        }
    }
    if c.is_empty() {
        c.insert(nodes_first(model), PositionRole::End, classes[0]).unwrap();
    }
    c
}

fn nodes_first(model: &TransformerModel) -> NodeRef {
    NodeRef::Head(HeadRef::all(model.config())[0])
}

/// Largest gap between library minimality/completeness and direct
/// double-knockout oracles over random small models and circuits.
pub fn circuit_metric_max_error(draws: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for i in 0..draws {
        let (layers, heads) = (rng.gen_range(1..=2), rng.gen_range(1..=2));
        let model = random_model(&mut rng, layers, heads);
        let r = RefModel::new(&model);
        let task = if i % 3 == 2 { Task::GreaterThan } else { Task::Ioi };
        let (d, _) = small_task_data(task, 4, rng.gen());
        let reference = patch::reference_dataset(task, 2, rng.gen()).unwrap();
        let lib_means = patch::compute_mean_cache(&model, &reference).unwrap();
        let means = RefMeans::new(&r, &reference);
        let c = random_circuit(&mut rng, &model, task);
        let keys: Vec<NodeKey> = c.keys().into_iter().collect();
        let v = keys[rng.gen_range(0..keys.len())];
        let k: Vec<NodeKey> = keys.iter().copied().filter(|key| *key != v && rng.gen_bool(0.5)).collect();

        let without = |drop: &[NodeKey]| -> Vec<NodeKey> { keys.iter().copied().filter(|x| !drop.contains(x)).collect() };
        let mut kv = k.clone();
        kv.push(v);
        let f_ck = oracle_circuit_metric(&r, task, &without(&k), &d, &means);
        let f_ckv = oracle_circuit_metric(&r, task, &without(&kv), &d, &means);
        let want_min = (f_ckv - f_ck).abs();
        let got_min = circuit::minimality(&model, &c, v, Some(&k), &d, &lib_means).unwrap();
        let f_mk = oracle_knockout(&r, &k, &d, &means);
        let want_comp = (f_ck - f_mk).abs();
        let got_comp = circuit::completeness(&model, &c, &k, &d, &lib_means).unwrap();
        worst = worst.max((got_min - want_min).abs()).max((got_comp - want_comp).abs());
    }
    worst
}
