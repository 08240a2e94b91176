// SPDX-License-Identifier: MIT OR Apache-2.0

//! Experiment pipelines over a content-addressed run registry.
//!
//! A pipeline is a chain of stages (`pretrain`, then `amplify` or
//! `corrupt` followed by `reverse`). Each stage is a run whose id is the
//! hash of the configuration fields it depends on, so stages shared between
//! pipelines are computed once. A run lives in `runs/<id>/` and is written
//! into a temporary directory that is renamed into place when complete.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis::{self, fmt_float, SelfRepairRecord};
use crate::circuit::{self, Circuit, CircuitEval, DiscoverOptions, RoleClass};
use crate::data::{self, Corruption, Dataset, PositionRole, Task};
use crate::error::{Error, Result};
use crate::model::{HeadRef, ModelConfig, NodeRef, TransformerModel};
use crate::patch::{self, CmapMode, MeanCache, MetricDelta, NodeAt};
use crate::train::checkpoint::{self, Lineage};
use crate::train::{self, EpochLog, Hyper, Metric, Preset};

pub const TOOL_VERSION: &str = concat!("milab ", env!("CARGO_PKG_VERSION"));

/// Training stage of a pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pretrain,
    Amplify,
    Corrupt,
    Reverse,
}

impl Stage {
    pub fn parent(self) -> Option<Stage> {
        match self {
            Stage::Pretrain => None,
            Stage::Amplify | Stage::Corrupt => Some(Stage::Pretrain),
            Stage::Reverse => Some(Stage::Corrupt),
        }
    }

    /// Stages from `pretrain` up to and including `self`.
    pub fn chain(self) -> Vec<Stage> {
        let mut out = vec![self];
        while let Some(p) = out.last().and_then(|s| s.parent()) {
            out.push(p);
        }
        out.reverse();
        out
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Amplify => "amplify",
            Stage::Corrupt => "corrupt",
            Stage::Reverse => "reverse",
        }
    }

    fn seed_offset(self) -> u64 {
        match self {
            Stage::Pretrain => 0,
            Stage::Amplify => 1,
            Stage::Corrupt => 2,
            Stage::Reverse => 3,
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pretrain" => Ok(Stage::Pretrain),
            "amplify" => Ok(Stage::Amplify),
            "corrupt" => Ok(Stage::Corrupt),
            "reverse" => Ok(Stage::Reverse),
            other => Err(Error::Pipeline(format!("unknown pipeline {other:?}"))),
        }
    }
}

/// Work recorded in a run, in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Step {
    Pretrain,
    Amplify,
    Corrupt,
    Reverse,
    Evaluate,
    Discover,
    Analyze,
    Cmap,
}

impl From<Stage> for Step {
    fn from(s: Stage) -> Step {
        match s {
            Stage::Pretrain => Step::Pretrain,
            Stage::Amplify => Step::Amplify,
            Stage::Corrupt => Step::Corrupt,
            Stage::Reverse => Step::Reverse,
        }
    }
}

/// Scheduled checkpoint epochs. `pretrain` is a single final epoch; the
/// other stages train up to their largest listed epoch.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Schedules {
    pub pretrain: usize,
    pub amplify: Vec<usize>,
    pub corrupt: Vec<usize>,
    pub reverse: Vec<usize>,
}

impl Default for Schedules {
    fn default() -> Self {
        Schedules { pretrain: 30, amplify: vec![1, 3, 5, 10, 20], corrupt: vec![10], reverse: vec![10] }
    }
}

impl Schedules {
    pub fn for_stage(&self, stage: Stage) -> Vec<usize> {
        match stage {
            Stage::Pretrain => vec![self.pretrain],
            Stage::Amplify => self.amplify.clone(),
            Stage::Corrupt => self.corrupt.clone(),
            Stage::Reverse => self.reverse.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSizes {
    pub train: usize,
    pub eval: usize,
    /// Samples used for path-patching discovery.
    pub discover: usize,
    /// Reference samples per template for mean ablation.
    pub mean_per_template: usize,
}

impl Default for DataSizes {
    fn default() -> Self {
        DataSizes {
            train: data::DEFAULT_IOI_SIZE,
            eval: 256,
            discover: 128,
            mean_per_template: patch::MEAN_REFERENCE_PER_TEMPLATE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Seeds {
    pub data: u64,
    pub eval: u64,
    pub discover: u64,
    pub means: u64,
    pub train: u64,
    pub corrupt: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Seeds { data: 1, eval: 2, discover: 3, means: 4, train: 5, corrupt: 6 }
    }
}

fn default_threshold() -> f64 {
    circuit::DEFAULT_THRESHOLD
}

fn default_preset() -> Preset {
    Preset::Toy
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub task: Task,
    pub pipeline: Stage,
    #[serde(default)]
    pub corruption: Option<Corruption>,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default = "default_preset")]
    pub preset: Preset,
    #[serde(default)]
    pub schedules: Schedules,
    #[serde(default)]
    pub data: DataSizes,
    #[serde(default)]
    pub seeds: Seeds,
    /// Discovery threshold as a fraction of the model metric.
    #[serde(default = "default_threshold")]
    pub threshold: f64,
}

impl PipelineConfig {
    /// Toy defaults for a task and pipeline.
    pub fn new(task: Task, pipeline: Stage, corruption: Option<Corruption>) -> Self {
        PipelineConfig {
            task,
            pipeline,
            corruption,
            model: ModelConfig::default(),
            preset: Preset::Toy,
            schedules: Schedules::default(),
            data: DataSizes::default(),
            seeds: Seeds::default(),
            threshold: circuit::DEFAULT_THRESHOLD,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: PipelineConfig =
            serde_json::from_str(text).map_err(|e| Error::Pipeline(format!("invalid pipeline config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Pipeline(m));
        self.model.validate()?;
        let vocab = data::Vocabulary::standard().len();
        if self.model.vocab_size < vocab {
            return bad(format!("vocab_size {} is below the vocabulary size {vocab}", self.model.vocab_size));
        }
        for stage in self.pipeline.chain() {
            let sched = self.schedules.for_stage(stage);
            if sched.is_empty() || sched.contains(&0) {
                return bad(format!("{stage} schedule must be nonempty with positive epochs"));
            }
            if sched.windows(2).any(|w| w[0] >= w[1]) {
                return bad(format!("{stage} schedule must be strictly increasing"));
            }
        }
        let needs_corruption = matches!(self.pipeline, Stage::Corrupt | Stage::Reverse);
        match (self.corruption, needs_corruption) {
            (None | Some(Corruption::None), true) => {
                return bad(format!("{} pipeline needs a corruption mode", self.pipeline))
            }
            (Some(c), true) if c.task() != Some(self.task) => {
                return bad(format!("corruption {c} is not valid for task {}", self.task))
            }
            (Some(c), false) if c != Corruption::None => {
                return bad(format!("{} pipeline takes no corruption mode", self.pipeline))
            }
            _ => {}
        }
        if self.data.train == 0 || self.data.eval == 0 || self.data.discover == 0 || self.data.mean_per_template == 0 {
            return bad("dataset sizes must be positive".into());
        }
        if !(self.threshold >= 0.0 && self.threshold.is_finite()) {
            return bad("threshold must be finite and non-negative".into());
        }
        Ok(())
    }

    /// The configuration of one stage with fields of other stages cleared.
    pub fn stage_config(&self, stage: Stage) -> PipelineConfig {
        let mut c = self.clone();
        c.pipeline = stage;
        let keep: Vec<Stage> = stage.chain();
        if !keep.contains(&Stage::Corrupt) {
            c.corruption = None;
        }
        if !keep.contains(&Stage::Amplify) {
            c.schedules.amplify.clear();
        }
        if !keep.contains(&Stage::Corrupt) {
            c.schedules.corrupt.clear();
        }
        if !keep.contains(&Stage::Reverse) {
            c.schedules.reverse.clear();
        }
        c
    }

    /// Content hash of the stage configuration, its resolved training
    /// settings and the tool version.
    pub fn run_id(&self) -> Result<String> {
        let stage = self.stage_config(self.pipeline);
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&stage)?);
        h.update(serde_json::to_vec(&stage.hyper())?);
        h.update(TOOL_VERSION.as_bytes());
        Ok(hex::encode(h.finalize())[..16].to_string())
    }

    fn hyper(&self) -> Hyper {
        let mut h = Hyper::preset(self.preset);
        h.epochs = *self.schedules.for_stage(self.pipeline).last().unwrap_or(&0);
        h.seed = self.seeds.train.wrapping_add(self.pipeline.seed_offset());
        h
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training loss; absent for the untrained starting point.
    pub loss: Option<f64>,
    pub metric: f64,
}

/// Measurements taken at one scheduled checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointRecord {
    pub epoch: usize,
    pub path: String,
    pub model_hash: String,
    pub metric: f64,
    pub accuracy: Option<f64>,
    pub top5_spread: Option<f64>,
    /// Sum of per-node direct attributions and its gap to the logit difference.
    pub attribution_sum: f64,
    pub attribution_error: f64,
    pub circuit: Option<String>,
    pub circuit_eval: Option<CircuitEval>,
    pub discovery_error: Option<String>,
    pub scatter: Option<String>,
    pub self_repair: Option<SelfRepairRecord>,
    /// END attention of the tracked mover to the IO token and to both S tokens.
    pub mover_end_to_io: Option<f64>,
    pub mover_end_to_s: Option<f64>,
    pub lens: Option<String>,
    pub lens_upper: Option<f64>,
    pub lens_lower: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CmapRecord {
    pub mode: CmapMode,
    pub base_hash: String,
    pub donor_hash: String,
    pub donor_epoch: usize,
    pub head: HeadRef,
    pub in_parent_circuit: bool,
    pub delta: MetricDelta,
}

/// Comparisons of a stage's final model against its parent's.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    /// Class to (parent effect, final effect) of mean-ablating the parent
    /// circuit's heads of that class.
    pub group_ablation: BTreeMap<RoleClass, (f64, f64)>,
    /// Per parent-circuit S-inhibition head: final minus parent END
    /// attention to the S tokens and to the IO token.
    pub inhibition_attention_shift: Vec<(HeadRef, f64, f64)>,
}

/// Persisted record of one stage run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub tool_version: String,
    pub pipeline: Stage,
    pub steps: Vec<Step>,
    pub config: PipelineConfig,
    pub parent: Option<String>,
    pub input_checkpoints: Vec<String>,
    pub dataset_hashes: BTreeMap<String, String>,
    pub metric: Metric,
    pub epochs: Vec<EpochRecord>,
    pub checkpoints: Vec<CheckpointRecord>,
    /// Head whose scatter and self-repair are tracked across the lineage.
    pub tracked_mover: Option<HeadRef>,
    /// MLP whose logit lens is tracked across the lineage.
    pub tracked_mlp: Option<usize>,
    pub cmap: Vec<CmapRecord>,
    pub comparison: Option<Comparison>,
    /// Relative artifact path to hex SHA-256 of its bytes.
    pub artifacts: BTreeMap<String, String>,
}

impl RunRecord {
    pub fn final_checkpoint(&self) -> Result<&CheckpointRecord> {
        self.checkpoints.last().ok_or_else(|| Error::Pipeline(format!("run {} has no checkpoints", self.run_id)))
    }

    pub fn checkpoint_at(&self, epoch: usize) -> Option<&CheckpointRecord> {
        self.checkpoints.iter().find(|c| c.epoch == epoch)
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Directory of runs and reports.
#[derive(Debug, Clone)]
pub struct Registry {
    root: PathBuf,
}

impl Registry {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(root.join("runs"))?;
        Ok(Registry { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn run_dir(&self, id: &str) -> PathBuf {
        self.root.join("runs").join(id)
    }

    pub fn report_dir(&self, id: &str) -> PathBuf {
        self.root.join("reports").join(id)
    }

    pub fn exists(&self, id: &str) -> bool {
        self.run_dir(id).join("manifest.json").is_file()
    }

    pub fn load(&self, id: &str) -> Result<RunRecord> {
        let valid = !id.is_empty() && id.chars().all(|c| c.is_ascii_hexdigit());
        if !valid || !self.exists(id) {
            return Err(Error::UnknownRun(id.to_string()));
        }
        let text = fs::read_to_string(self.run_dir(id).join("manifest.json"))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Checks every recorded artifact against its hash.
    pub fn verify(&self, record: &RunRecord) -> Result<()> {
        let dir = self.run_dir(&record.run_id);
        for (rel, hash) in &record.artifacts {
            let bytes = fs::read(dir.join(rel))
                .map_err(|e| Error::Pipeline(format!("run {}: artifact {rel}: {e}", record.run_id)))?;
            if sha256_hex(&bytes) != *hash {
                return Err(Error::Pipeline(format!("run {}: artifact {rel} does not match its hash", record.run_id)));
            }
        }
        Ok(())
    }

    pub fn load_model(&self, record: &RunRecord, ck: &CheckpointRecord) -> Result<TransformerModel> {
        let loaded = checkpoint::load(&self.run_dir(&record.run_id).join(&ck.path))?;
        if loaded.hash != ck.model_hash {
            return Err(Error::Pipeline(format!("checkpoint {} does not match its recorded hash", ck.path)));
        }
        Ok(loaded.model)
    }

    pub fn load_circuit(&self, record: &RunRecord, ck: &CheckpointRecord) -> Result<Option<Circuit>> {
        match &ck.circuit {
            Some(rel) => Ok(Some(Circuit::from_json(&fs::read_to_string(self.run_dir(&record.run_id).join(rel))?)?)),
            None => Ok(None),
        }
    }

    /// Records from the root pretrain run down to `id`.
    pub fn lineage(&self, id: &str) -> Result<Vec<RunRecord>> {
        let mut chain = vec![self.load(id)?];
        while let Some(parent) = chain.last().and_then(|r| r.parent.clone()) {
            chain.push(self.load(&parent)?);
        }
        chain.reverse();
        Ok(chain)
    }
}

/// Stage output being assembled in a temporary directory.
struct Staging {
    dir: PathBuf,
    artifacts: BTreeMap<String, String>,
}

impl Staging {
    fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<String> {
        fs::write(self.dir.join(rel), bytes)?;
        self.artifacts.insert(rel.to_string(), sha256_hex(bytes));
        Ok(rel.to_string())
    }
}

struct StageData {
    train: Dataset,
    eval: Dataset,
    discover: Dataset,
    reference: Dataset,
}

fn generate(task: Task, n: usize, seed: u64) -> Result<Dataset> {
    match task {
        Task::Ioi => data::gen_ioi(n, seed),
        Task::GreaterThan => data::gen_greater_than(n, seed),
    }
}

fn stage_data(cfg: &PipelineConfig) -> Result<StageData> {
    let clean = generate(cfg.task, cfg.data.train, cfg.seeds.data)?;
    let train = match (cfg.pipeline, cfg.corruption) {
        (Stage::Corrupt, Some(mode)) => data::corrupt(&clean, mode, cfg.seeds.corrupt)?,
        _ => clean,
    };
    Ok(StageData {
        train,
        eval: generate(cfg.task, cfg.data.eval, cfg.seeds.eval)?,
        discover: generate(cfg.task, cfg.data.discover, cfg.seeds.discover)?,
        reference: patch::reference_dataset(cfg.task, cfg.data.mean_per_template, cfg.seeds.means)?,
    })
}

/// Head with the largest END attribution among the circuit's name movers,
/// or among all heads when the circuit has none.
fn pick_mover(model: &TransformerModel, circuit: Option<&Circuit>, d: &Dataset) -> Result<HeadRef> {
    let attr = analysis::end_attributions(model, d, &[], None)?;
    let movers: Vec<HeadRef> = circuit
        .map(|c| c.class_nodes(RoleClass::NameMover).filter_map(|n| n.node.head()).collect())
        .unwrap_or_default();
    let pool = if movers.is_empty() { HeadRef::all(model.config()) } else { movers };
    Ok(pool
        .into_iter()
        .reduce(|a, b| if attr.get(NodeRef::Head(b)) > attr.get(NodeRef::Head(a)) { b } else { a })
        .expect("models have at least one head"))
}

/// MLP whose mean ablation moves the metric most.
fn pick_mlp(model: &TransformerModel, d: &Dataset, means: &MeanCache) -> Result<usize> {
    let base = patch::knockout(model, d, &[], means)?;
    let mut best = (0, f64::NEG_INFINITY);
    for l in 0..model.config().n_layers {
        let effect = (patch::knockout(model, d, &[NodeAt::new(NodeRef::Mlp(l), PositionRole::All)], means)? - base).abs();
        if effect > best.1 {
            best = (l, effect);
        }
    }
    Ok(best.0)
}

/// END attention to both S tokens.
fn s_attention(model: &TransformerModel, d: &Dataset, heads: &[HeadRef]) -> Result<Vec<f64>> {
    let s1 = analysis::mean_attention(model, d, heads, PositionRole::S1, PositionRole::End)?;
    let s2 = analysis::mean_attention(model, d, heads, PositionRole::S2, PositionRole::End)?;
    Ok(s1.iter().zip(&s2).map(|(a, b)| a + b).collect())
}

struct Tracked {
    mover: Option<HeadRef>,
    mlp: Option<usize>,
}

/// Evaluation, discovery and analysis of one checkpoint.
fn analyze_checkpoint(
    cfg: &PipelineConfig,
    model: &TransformerModel,
    epoch: usize,
    sd: &StageData,
    tracked: &mut Tracked,
    staging: &mut Staging,
    progress: &mut dyn FnMut(&str),
) -> Result<(CheckpointRecord, Option<Circuit>, MeanCache)> {
    let metric = Metric::default_for(cfg.task);
    let metric_value = train::eval_metric(model, &sd.eval, metric)?.mean;
    if !metric_value.is_finite() {
        return Err(Error::Pipeline(format!("metric is not finite at epoch {epoch}")));
    }
    let (accuracy, top5_spread) = match cfg.task {
        Task::Ioi => (
            Some(train::eval_metric(model, &sd.eval, Metric::Accuracy)?.mean),
            Some(train::top5_name_spread(model, &sd.eval)?),
        ),
        Task::GreaterThan => (None, None),
    };
    let attr = analysis::end_attributions(model, &sd.eval, &[], None)?;
    let attribution_sum: f64 = attr.per_node.values().sum();

    progress(&format!("epoch {epoch}: means and discovery"));
    let means = patch::compute_mean_cache(model, &sd.reference)?;
    let opts = DiscoverOptions { threshold: cfg.threshold, seed: cfg.seeds.discover, ..DiscoverOptions::default() };
    let (circuit, discovery_error) = match circuit::discover_with(model, &sd.discover, &means, &opts) {
        Ok(c) => (Some(c), None),
        Err(e @ Error::Divergent(_)) => (None, Some(e.to_string())),
        Err(e) => return Err(e),
    };
    let mut rec = CheckpointRecord {
        epoch,
        path: String::new(),
        model_hash: checkpoint::model_hash(model),
        metric: metric_value,
        accuracy,
        top5_spread,
        attribution_sum,
        attribution_error: (attribution_sum - attr.logit_diff).abs(),
        circuit: None,
        circuit_eval: None,
        discovery_error,
        scatter: None,
        self_repair: None,
        mover_end_to_io: None,
        mover_end_to_s: None,
        lens: None,
        lens_upper: None,
        lens_lower: None,
    };
    if let Some(c) = &circuit {
        progress(&format!("epoch {epoch}: circuit of {} nodes, evaluating", c.len()));
        rec.circuit = Some(staging.write(&format!("circuit_e{epoch:03}.json"), c.to_json()?.as_bytes())?);
        rec.circuit_eval = Some(circuit::evaluate(model, c, &sd.eval, &means)?);
    }

    match cfg.task {
        Task::Ioi => {
            let mover = match tracked.mover {
                Some(h) => h,
                None => *tracked.mover.insert(pick_mover(model, circuit.as_ref(), &sd.eval)?),
            };
            let scatter = analysis::attn_vs_projection(model, &sd.eval, mover, &format!("{}_e{epoch:03}", cfg.pipeline))?;
            rec.scatter = Some(staging.write(&format!("scatter_e{epoch:03}.csv"), scatter.to_csv().as_bytes())?);
            rec.self_repair = Some(analysis::self_repair(model, &sd.eval, mover, &means)?);
            rec.mover_end_to_io =
                Some(analysis::mean_attention(model, &sd.eval, &[mover], PositionRole::Io, PositionRole::End)?[0]);
            rec.mover_end_to_s = Some(s_attention(model, &sd.eval, &[mover])?[0]);
        }
        Task::GreaterThan => {
            let mlp = match tracked.mlp {
                Some(l) => l,
                None => *tracked.mlp.insert(pick_mlp(model, &sd.eval, &means)?),
            };
            let grid = analysis::logit_lens(model, NodeRef::Mlp(mlp), &sd.eval)?;
            let (upper, lower) = grid.triangle_means();
            rec.lens = Some(staging.write(&format!("lens_e{epoch:03}.csv"), grid.to_csv()?.as_bytes())?);
            rec.lens_upper = Some(upper);
            rec.lens_lower = Some(lower);
        }
    }
    Ok((rec, circuit, means))
}

fn write_checkpoint(
    staging: &mut Staging,
    model: &TransformerModel,
    hyper: &Hyper,
    lineage: &Lineage,
) -> Result<String> {
    let bytes = checkpoint::to_bytes(model, Some(hyper), lineage)?;
    staging.write(&format!("ckpt_e{:03}.bin", lineage.epoch), &bytes)
}

/// Runs one stage whose parent run already exists, or returns the existing
/// run when this configuration has been executed before.
pub fn run_stage(reg: &Registry, cfg: &PipelineConfig, progress: &mut dyn FnMut(&str)) -> Result<RunRecord> {
    cfg.validate()?;
    let cfg = cfg.stage_config(cfg.pipeline);
    let id = cfg.run_id()?;
    if reg.exists(&id) {
        let record = reg.load(&id)?;
        reg.verify(&record)?;
        progress(&format!("{}: reusing run {id}", cfg.pipeline));
        return Ok(record);
    }
    let parent = match cfg.pipeline.parent() {
        None => None,
        Some(stage) => {
            let pid = cfg.stage_config(stage).run_id()?;
            let record = reg.load(&pid).map_err(|e| match e {
                Error::UnknownRun(_) => Error::Pipeline(format!("{} needs parent {stage} run {pid}", cfg.pipeline)),
                other => other,
            })?;
            reg.verify(&record)?;
            Some(record)
        }
    };
    let parent_root = match &parent {
        Some(p) => Some(reg.lineage(&p.run_id)?.remove(0)),
        None => None,
    };

    let tmp = reg.root().join("runs").join(format!(".tmp-{id}"));
    if tmp.exists() {
        fs::remove_dir_all(&tmp)?;
    }
    fs::create_dir_all(&tmp)?;
    let mut staging = Staging { dir: tmp.clone(), artifacts: BTreeMap::new() };

    progress(&format!("{}: run {id}, generating data", cfg.pipeline));
    let sd = stage_data(&cfg)?;
    let mut dataset_hashes = BTreeMap::new();
    dataset_hashes.insert("train".to_string(), sd.train.hash()?);
    dataset_hashes.insert("eval".to_string(), sd.eval.hash()?);
    dataset_hashes.insert("discover".to_string(), sd.discover.hash()?);
    dataset_hashes.insert("reference".to_string(), sd.reference.hash()?);

    let (mut model, parent_final) = match &parent {
        None => (TransformerModel::new(cfg.model.clone())?, None),
        Some(p) => {
            let ck = p.final_checkpoint()?;
            (reg.load_model(p, ck)?, Some(ck.clone()))
        }
    };
    let mut tracked = Tracked {
        mover: parent_root.as_ref().and_then(|r| r.tracked_mover),
        mlp: parent_root.as_ref().and_then(|r| r.tracked_mlp),
    };

    let hyper = cfg.hyper();
    let schedule = cfg.schedules.for_stage(cfg.pipeline);
    let mut checkpoints = Vec::new();
    let mut models = Vec::new();
    let mut steps = vec![Step::from(cfg.pipeline), Step::Evaluate, Step::Discover, Step::Analyze];
    let parent_hash = parent_final.as_ref().map(|c| c.model_hash.clone());
    let tag = cfg.pipeline.as_str();
    let log = train::fit(&mut model, &sd.train, &sd.eval, &hyper, |m, e: &EpochLog| {
        progress(&format!("{tag}: epoch {} loss {:.4} metric {:.4} ({:.1}s)", e.epoch, e.loss, e.metric, e.wall_seconds));
        if !e.metric.is_finite() {
            return Err(Error::NonFiniteLoss { epoch: e.epoch, step: 0 });
        }
        if !schedule.contains(&e.epoch) {
            return Ok(());
        }
        let lineage = Lineage { tag: tag.to_string(), parent: parent_hash.clone(), epoch: e.epoch };
        let mut run = || -> Result<()> {
            let path = write_checkpoint(&mut staging, m, &hyper, &lineage)?;
            let (mut rec, _, _) = analyze_checkpoint(&cfg, m, e.epoch, &sd, &mut tracked, &mut staging, progress)?;
            rec.path = path;
            checkpoints.push(rec);
            models.push((e.epoch, m.clone()));
            Ok(())
        };
        run()
    });
    let log = match log {
        Ok(l) => l,
        Err(e) => {
            progress(&format!("{tag}: failed, partial output left in {}", tmp.display()));
            return Err(e);
        }
    };

    let mut cmap_records = Vec::new();
    let mut comparison = None;
    if let (Some(p), Some(pf)) = (&parent, &parent_final) {
        let base = reg.load_model(p, pf)?;
        let parent_circuit = reg.load_circuit(p, pf)?;
        let circuit_heads = parent_circuit.as_ref().map(|c| c.heads()).unwrap_or_default();
        let (donors, heads): (Vec<&(usize, TransformerModel)>, Vec<HeadRef>) = match cfg.pipeline {
            Stage::Amplify => (models.iter().collect(), circuit_heads.clone()),
            Stage::Corrupt => (models.last().into_iter().collect(), HeadRef::all(base.config())),
            _ => (Vec::new(), Vec::new()),
        };
        if !donors.is_empty() && !heads.is_empty() {
            steps.push(Step::Cmap);
            progress(&format!("{tag}: cross-model patching over {} heads", heads.len()));
            let sets: Vec<Vec<HeadRef>> = heads.iter().map(|h| vec![*h]).collect();
            for (epoch, donor) in donors {
                let deltas = patch::cmap(&base, donor, &sd.eval, &sets, CmapMode::Pattern)?;
                for (h, delta) in heads.iter().zip(deltas) {
                    cmap_records.push(CmapRecord {
                        mode: CmapMode::Pattern,
                        base_hash: pf.model_hash.clone(),
                        donor_hash: checkpoint::model_hash(donor),
                        donor_epoch: *epoch,
                        head: *h,
                        in_parent_circuit: circuit_heads.contains(h),
                        delta,
                    });
                }
            }
        }
        if let (Some(pc), Some((_, last))) = (&parent_circuit, models.last()) {
            progress(&format!("{tag}: comparing against parent"));
            let parent_means = patch::compute_mean_cache(&base, &sd.reference)?;
            let final_means = patch::compute_mean_cache(last, &sd.reference)?;
            let mut cmp = Comparison::default();
            for class in RoleClass::ALL {
                if pc.class_nodes(class).next().is_some() {
                    let pair =
                        analysis::group_ablation_compare(&base, last, pc, class, &sd.eval, &parent_means, &final_means)?;
                    cmp.group_ablation.insert(class, pair);
                }
            }
            if cfg.task == Task::Ioi {
                let inhibition: Vec<HeadRef> = pc.class_nodes(RoleClass::SInhibition).filter_map(|n| n.node.head()).collect();
                if !inhibition.is_empty() {
                    let (after, before) = (s_attention(last, &sd.eval, &inhibition)?, s_attention(&base, &sd.eval, &inhibition)?);
                    let ds: Vec<f64> = after.iter().zip(&before).map(|(a, b)| a - b).collect();
                    let di =
                        analysis::attention_difference(last, &base, &sd.eval, &inhibition, PositionRole::Io, PositionRole::End)?;
                    cmp.inhibition_attention_shift = inhibition.iter().zip(ds).zip(di).map(|((h, s), i)| (*h, s, i)).collect();
                }
            }
            comparison = Some(cmp);
        }
    }

    let mut epochs = vec![EpochRecord { epoch: 0, loss: None, metric: log.initial_metric }];
    epochs.extend(log.epochs.iter().map(|e| EpochRecord { epoch: e.epoch, loss: Some(e.loss), metric: e.metric }));
    let record = RunRecord {
        run_id: id.clone(),
        tool_version: TOOL_VERSION.to_string(),
        pipeline: cfg.pipeline,
        steps,
        parent: parent.as_ref().map(|p| p.run_id.clone()),
        input_checkpoints: parent_hash.into_iter().collect(),
        config: cfg.clone(),
        dataset_hashes,
        metric: log.metric,
        epochs,
        checkpoints,
        tracked_mover: tracked.mover,
        tracked_mlp: tracked.mlp,
        cmap: cmap_records,
        comparison,
        artifacts: staging.artifacts,
    };
    fs::write(tmp.join("manifest.json"), serde_json::to_string_pretty(&record)?)?;
    let dest = reg.run_dir(&id);
    match fs::rename(&tmp, &dest) {
        Ok(()) => {}
        // Another process committed the same run first.
        Err(_) if reg.exists(&id) => {
            fs::remove_dir_all(&tmp)?;
            return reg.load(&id);
        }
        Err(e) => return Err(e.into()),
    }
    progress(&format!("{}: wrote run {id}", cfg.pipeline));
    Ok(record)
}

/// Runs every stage of the pipeline in order, reusing completed runs, and
/// returns the record of the last stage.
pub fn run_pipeline(reg: &Registry, cfg: &PipelineConfig, progress: &mut dyn FnMut(&str)) -> Result<RunRecord> {
    cfg.validate()?;
    let mut last = None;
    for stage in cfg.pipeline.chain() {
        last = Some(run_stage(reg, &cfg.stage_config(stage), progress)?);
    }
    Ok(last.expect("chains are nonempty"))
}

fn opt_float(x: Option<f64>) -> String {
    x.map(fmt_float).unwrap_or_default()
}

/// Epoch-by-metric table of a run.
pub fn metrics_csv(record: &RunRecord) -> String {
    let mut out = String::from(
        "epoch,loss,metric,accuracy,top5_spread,attribution_error,f_model,f_circuit,faithfulness_ratio,sparsity,circuit_nodes\n",
    );
    for e in &record.epochs {
        let ck = record.checkpoint_at(e.epoch).filter(|_| e.epoch > 0);
        let eval = ck.and_then(|c| c.circuit_eval.as_ref());
        let nodes = ck.and_then(|c| c.circuit_eval.as_ref().map(|ev| ev.minimality.len()));
        let cols = [
            e.epoch.to_string(),
            opt_float(e.loss),
            fmt_float(e.metric),
            opt_float(ck.and_then(|c| c.accuracy)),
            opt_float(ck.and_then(|c| c.top5_spread)),
            opt_float(ck.map(|c| c.attribution_error)),
            opt_float(eval.map(|v| v.f_model)),
            opt_float(eval.map(|v| v.f_circuit)),
            opt_float(eval.and_then(|v| v.ratio)),
            opt_float(eval.map(|v| v.sparsity)),
            nodes.map(|n| n.to_string()).unwrap_or_default(),
        ];
        out.push_str(&cols.join(","));
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochDiff {
    pub epoch: usize,
    /// Epoch of the reference circuit; 0 is the parent run's final circuit.
    pub against_epoch: usize,
    pub diff: circuit::CircuitDiff,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CircuitDiffReport {
    pub run_id: String,
    pub parent_run: Option<String>,
    /// Each checkpoint's circuit against the parent's final circuit.
    pub vs_parent: Vec<EpochDiff>,
    /// Each checkpoint's circuit against the previous checkpoint's.
    pub consecutive: Vec<EpochDiff>,
}

/// Writes the report files of a run into `reports/<id>/` and returns their
/// paths. Re-emission produces identical bytes.
pub fn report(reg: &Registry, id: &str) -> Result<Vec<PathBuf>> {
    let record = reg.load(id)?;
    reg.verify(&record)?;
    let out_dir = reg.report_dir(id);
    fs::create_dir_all(&out_dir)?;
    let mut written = Vec::new();
    let mut emit = |name: &str, bytes: &[u8]| -> Result<()> {
        let path = out_dir.join(name);
        fs::write(&path, bytes)?;
        written.push(path);
        Ok(())
    };
    emit("metrics.csv", metrics_csv(&record).as_bytes())?;

    let parent = record.parent.as_deref().map(|p| reg.load(p)).transpose()?;
    let parent_circuit = match &parent {
        Some(p) => reg.load_circuit(p, p.final_checkpoint()?)?,
        None => None,
    };
    let mut previous: Option<(usize, Circuit)> = parent_circuit.clone().map(|c| (0, c));
    let mut vs_parent = Vec::new();
    let mut consecutive = Vec::new();
    for ck in &record.checkpoints {
        let Some(c) = reg.load_circuit(&record, ck)? else { continue };
        if let Some(pc) = &parent_circuit {
            vs_parent.push(EpochDiff { epoch: ck.epoch, against_epoch: 0, diff: circuit::diff(pc, &c) });
        }
        if let Some((epoch, prev)) = &previous {
            consecutive.push(EpochDiff { epoch: ck.epoch, against_epoch: *epoch, diff: circuit::diff(prev, &c) });
        }
        previous = Some((ck.epoch, c));
    }
    let diffs = CircuitDiffReport { run_id: record.run_id.clone(), parent_run: record.parent.clone(), vs_parent, consecutive };
    emit("circuit_diff.json", serde_json::to_string_pretty(&diffs)?.as_bytes())?;

    let mut summary = String::from("epoch,head,delta_logit,direct_effect,self_repair,end_to_io,end_to_s,lens_upper,lens_lower\n");
    for ck in &record.checkpoints {
        let sr = ck.self_repair.as_ref();
        let cols = [
            ck.epoch.to_string(),
            sr.map(|s| s.head.to_string()).unwrap_or_default(),
            opt_float(sr.map(|s| s.delta_logit)),
            opt_float(sr.map(|s| s.direct_effect)),
            opt_float(sr.map(|s| s.self_repair)),
            opt_float(ck.mover_end_to_io),
            opt_float(ck.mover_end_to_s),
            opt_float(ck.lens_upper),
            opt_float(ck.lens_lower),
        ];
        summary.push_str(&cols.join(","));
        summary.push('\n');
    }
    emit("analysis.csv", summary.as_bytes())?;

    if !record.cmap.is_empty() {
        let mut csv = String::from("donor_epoch,head,in_parent_circuit,baseline,patched,delta\n");
        for c in &record.cmap {
            csv.push_str(&format!(
                "{},{},{},{},{},{}\n",
                c.donor_epoch,
                c.head,
                c.in_parent_circuit,
                fmt_float(c.delta.baseline),
                fmt_float(c.delta.patched),
                fmt_float(c.delta.delta)
            ));
        }
        emit("cmap.csv", csv.as_bytes())?;
    }

    let run_dir = reg.run_dir(id);
    for ck in &record.checkpoints {
        for rel in ck.scatter.iter().chain(&ck.lens) {
            emit(rel, &fs::read(run_dir.join(rel))?)?;
        }
    }
    Ok(written)
}
