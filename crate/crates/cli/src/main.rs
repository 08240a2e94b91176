// SPDX-License-Identifier: MIT OR Apache-2.0

//! `milab` command-line front end.
//!
//! Exit codes: 0 on success, 2 on invalid input, 3 on numeric failure,
//! 1 on I/O and other failures.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use milab::circuit::{self, Circuit, DiscoverOptions};
use milab::data::{self, Corruption, Dataset, PositionRole, Task};
use milab::model::{HeadRef, ModelConfig, NodeRef, TransformerModel};
use milab::patch::{self, ActSite, CmapMode, NodeAt, PatchSpec, QkvSite, Receiver};
use milab::pipeline::{self, PipelineConfig, Registry};
use milab::train::checkpoint::{self, Lineage};
use milab::train::{self, Hyper, Metric, Preset};
use serde_json::json;

#[derive(Parser)]
#[command(name = "milab", version, about = "Toy transformer circuit laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a dataset as JSON lines.
    GenData(GenData),
    /// Train or fine-tune a model.
    Train(TrainArgs),
    /// Evaluate a task metric.
    Eval(EvalArgs),
    /// Activation patching, path patching or mean-ablation knockout.
    Patch(PatchArgs),
    /// Cross-model activation patching, one head at a time.
    Cmap(CmapArgs),
    /// Discover or evaluate a circuit.
    Circuit {
        #[command(subcommand)]
        command: CircuitCommand,
    },
    /// Run an experiment pipeline into a registry.
    Pipeline(PipelineArgs),
    /// Emit the report files of a run.
    Report(ReportArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    Ioi,
    Gt,
}

impl From<TaskArg> for Task {
    fn from(t: TaskArg) -> Task {
        match t {
            TaskArg::Ioi => Task::Ioi,
            TaskArg::Gt => Task::GreaterThan,
        }
    }
}

#[derive(Args)]
struct GenData {
    #[arg(long, value_enum)]
    task: TaskArg,
    /// name-moving, subject-duplication, duplication or lower-than.
    #[arg(long)]
    corrupt: Option<String>,
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Model config JSON; ignored when resuming.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    /// Evaluation data; defaults to the first 256 training samples.
    #[arg(long)]
    eval: Option<PathBuf>,
    #[arg(long)]
    epochs: usize,
    #[arg(long, default_value = "toy")]
    preset: String,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    /// Checkpoint to continue from.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// logit-diff, accuracy or prob-diff; defaults to the task's metric.
    #[arg(long)]
    metric: Option<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum PatchKind {
    Act,
    Path,
    Knockout,
}

#[derive(Args)]
struct MeanArgs {
    /// Reference samples per template for mean ablation.
    #[arg(long, default_value_t = patch::MEAN_REFERENCE_PER_TEMPLATE)]
    mean_per_template: usize,
    #[arg(long, default_value_t = 0)]
    mean_seed: u64,
}

#[derive(Args)]
struct PatchArgs {
    #[arg(long, value_enum)]
    kind: PatchKind,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Counterfactual inputs; defaults to resampled names or the lowest-year
    /// counterfactual.
    #[arg(long)]
    counterfactual: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Comma-separated `NODE@ROLE` list for act and knockout, e.g. `L0H1@END,MLP2@all`.
    #[arg(long, default_value = "")]
    nodes: String,
    /// Sender node for path patching.
    #[arg(long)]
    sender: Option<String>,
    #[arg(long, default_value = "all")]
    sender_pos: String,
    /// `logits`, or comma-separated `LxHy.q@ROLE` / `MLPl@ROLE` receivers.
    #[arg(long, default_value = "logits")]
    receivers: String,
    #[command(flatten)]
    means: MeanArgs,
}

#[derive(Args)]
struct CmapArgs {
    #[arg(long)]
    base: PathBuf,
    #[arg(long)]
    donor: PathBuf,
    #[arg(long, default_value = "pattern")]
    mode: String,
    #[arg(long)]
    data: PathBuf,
    /// Comma-separated heads; defaults to every head.
    #[arg(long)]
    heads: Option<String>,
}

#[derive(Subcommand)]
enum CircuitCommand {
    Discover {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = circuit::DEFAULT_THRESHOLD)]
        threshold: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        means: MeanArgs,
    },
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        circuit: PathBuf,
        #[command(flatten)]
        means: MeanArgs,
    },
}

#[derive(Args)]
struct PipelineArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, default_value = ".")]
    registry: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    run: String,
    #[arg(long, default_value = ".")]
    registry: PathBuf,
}

fn read_dataset(path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(Dataset::from_jsonl(&text)?)
}

fn read_model(path: &Path) -> Result<TransformerModel> {
    Ok(checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?.model)
}

fn print(value: serde_json::Value) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(&value)?);
    Ok(())
}

fn split_list(s: &str) -> impl Iterator<Item = &str> {
    s.split(',').map(str::trim).filter(|x| !x.is_empty())
}

fn parse_node_at(s: &str) -> Result<NodeAt> {
    let (node, role) = s.split_once('@').unwrap_or((s, "all"));
    Ok(NodeAt::new(node.parse()?, role.parse()?))
}

fn parse_receiver(s: &str) -> Result<Receiver> {
    if s == "logits" {
        return Ok(Receiver::Logits);
    }
    let (target, role) = s.split_once('@').unwrap_or((s, "all"));
    let positions: PositionRole = role.parse()?;
    if let Some((head, site)) = target.split_once('.') {
        let site = match site {
            "q" => QkvSite::Q,
            "k" => QkvSite::K,
            "v" => QkvSite::V,
            other => bail!(milab::Error::Patch(format!("unknown receiver site {other:?}"))),
        };
        return Ok(Receiver::Head { head: head.parse()?, site, positions });
    }
    match target.parse::<NodeRef>()? {
        NodeRef::Mlp(layer) => Ok(Receiver::Mlp { layer, positions }),
        _ => bail!(milab::Error::Patch(format!("receiver {s:?} needs a q/k/v site or an MLP"))),
    }
}

fn counterfactual(d: &Dataset, path: Option<&Path>, seed: u64) -> Result<Dataset> {
    match path {
        Some(p) => read_dataset(p),
        None => Ok(match d.task()? {
            Task::Ioi => data::resample_names(d, seed)?,
            Task::GreaterThan => data::lowest_year_counterfactual(d)?,
        }),
    }
}

fn mean_cache(model: &TransformerModel, d: &Dataset, args: &MeanArgs) -> Result<patch::MeanCache> {
    let reference = patch::reference_dataset(d.task()?, args.mean_per_template, args.mean_seed)?;
    Ok(patch::compute_mean_cache(model, &reference)?)
}

fn gen_data(a: GenData) -> Result<()> {
    let task = Task::from(a.task);
    let d = match task {
        Task::Ioi => data::gen_ioi(a.n, a.seed)?,
        Task::GreaterThan => data::gen_greater_than(a.n, a.seed)?,
    };
    let d = match &a.corrupt {
        Some(mode) => {
            let mode: Corruption = mode.parse()?;
            if mode.task() != Some(task) {
                bail!(milab::Error::Dataset(format!("corruption {mode} is not valid for task {task}")));
            }
            data::corrupt(&d, mode, a.seed)?
        }
        None => d,
    };
    fs::write(&a.out, d.to_jsonl()?)?;
    print(json!({ "samples": d.len(), "hash": d.hash()?, "out": a.out }))
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let data = read_dataset(&a.data)?;
    let eval = match &a.eval {
        Some(p) => read_dataset(p)?,
        None => data.subset(0..data.len().min(256)),
    };
    let preset: Preset = a.preset.parse()?;
    let (mut model, parent) = match &a.resume {
        Some(p) => {
            let ck = checkpoint::load(p)?;
            (ck.model, Some(ck.hash))
        }
        None => {
            let cfg: ModelConfig = match &a.config {
                Some(p) => serde_json::from_str(&fs::read_to_string(p)?)
                    .map_err(|e| milab::Error::Config(format!("{}: {e}", p.display())))?,
                None => ModelConfig::default(),
            };
            (TransformerModel::new(cfg)?, None)
        }
    };
    let mut hyper = Hyper::preset(preset);
    hyper.epochs = a.epochs;
    if let Some(s) = a.seed {
        hyper.seed = s;
    }
    let log = train::fit(&mut model, &data, &eval, &hyper, |_, e| {
        eprintln!("epoch {} loss {:.6} metric {:.6} ({:.1}s)", e.epoch, e.loss, e.metric, e.wall_seconds);
        Ok(())
    })?;
    let lineage = Lineage { tag: "train".into(), parent, epoch: a.epochs };
    let hash = checkpoint::save(&model, Some(&hyper), &lineage, &a.out)?;
    print(json!({
        "out": a.out,
        "hash": hash,
        "metric": log.metric,
        "initial": log.initial_metric,
        "final": log.epochs.last().map_or(log.initial_metric, |e| e.metric),
    }))
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let model = read_model(&a.model)?;
    let d = read_dataset(&a.data)?;
    let metric = match &a.metric {
        Some(m) => m.parse()?,
        None => Metric::default_for(d.task()?),
    };
    let r = train::eval_metric(&model, &d, metric)?;
    print(json!({ "metric": metric, "mean": r.mean, "samples": d.len() }))
}

fn patch_cmd(a: PatchArgs) -> Result<()> {
    let model = read_model(&a.model)?;
    let d = read_dataset(&a.data)?;
    let nodes: Vec<NodeAt> = split_list(&a.nodes).map(parse_node_at).collect::<Result<_>>()?;
    match a.kind {
        PatchKind::Knockout => {
            let means = mean_cache(&model, &d, &a.means)?;
            let r = patch::knockout_report(&model, &d, &nodes, &means)?;
            let base = patch::knockout(&model, &d, &[], &means)?;
            print(json!({
                "nodes": nodes.iter().map(|n| n.to_string()).collect::<Vec<_>>(),
                "metric": r.metric,
                "baseline": base,
                "ablated": r.mean,
                "delta": r.mean - base,
            }))
        }
        PatchKind::Act => {
            if nodes.is_empty() {
                bail!(milab::Error::Patch("--nodes is required for activation patching".into()));
            }
            let x_new = counterfactual(&d, a.counterfactual.as_deref(), a.seed)?;
            let sites: Vec<ActSite> = nodes.iter().map(|n| ActSite::node(n.node, n.positions)).collect();
            print(serde_json::to_value(patch::activation_patch(&model, &d, &x_new, &sites)?)?)
        }
        PatchKind::Path => {
            let Some(sender) = &a.sender else {
                bail!(milab::Error::Patch("--sender is required for path patching".into()));
            };
            let spec = PatchSpec {
                sender: sender.parse()?,
                sender_positions: a.sender_pos.parse()?,
                receivers: split_list(&a.receivers).map(parse_receiver).collect::<Result<_>>()?,
            };
            let x_new = counterfactual(&d, a.counterfactual.as_deref(), a.seed)?;
            print(serde_json::to_value(patch::path_patch(&model, &d, &x_new, &spec)?)?)
        }
    }
}

fn cmap_cmd(a: CmapArgs) -> Result<()> {
    let base = read_model(&a.base)?;
    let donor = read_model(&a.donor)?;
    let d = read_dataset(&a.data)?;
    let mode: CmapMode = a.mode.parse()?;
    let heads: Vec<HeadRef> = match &a.heads {
        Some(list) => split_list(list).map(|h| h.parse().map_err(anyhow::Error::from)).collect::<Result<_>>()?,
        None => HeadRef::all(base.config()),
    };
    let sets: Vec<Vec<HeadRef>> = heads.iter().map(|h| vec![*h]).collect();
    let deltas = patch::cmap(&base, &donor, &d, &sets, mode)?;
    let rows: Vec<_> = heads
        .iter()
        .zip(&deltas)
        .map(|(h, r)| json!({ "head": h.to_string(), "baseline": r.baseline, "patched": r.patched, "delta": r.delta }))
        .collect();
    print(json!({ "mode": mode, "heads": rows }))
}

fn circuit_cmd(c: CircuitCommand) -> Result<()> {
    match c {
        CircuitCommand::Discover { model, data, threshold, seed, out, means } => {
            let m = read_model(&model)?;
            let d = read_dataset(&data)?;
            let mc = mean_cache(&m, &d, &means)?;
            let opts = DiscoverOptions { threshold, seed, ..DiscoverOptions::default() };
            let found = circuit::discover_with(&m, &d, &mc, &opts)?;
            let text = found.to_json()?;
            match out {
                Some(p) => {
                    fs::write(&p, &text)?;
                    print(json!({ "nodes": found.len(), "out": p }))
                }
                None => {
                    println!("{text}");
                    Ok(())
                }
            }
        }
        CircuitCommand::Eval { model, data, circuit: path, means } => {
            let m = read_model(&model)?;
            let d = read_dataset(&data)?;
            let c = Circuit::from_json(&fs::read_to_string(&path)?)?;
            let mc = mean_cache(&m, &d, &means)?;
            print(serde_json::to_value(circuit::evaluate(&m, &c, &d, &mc)?)?)
        }
    }
}

fn pipeline_cmd(a: PipelineArgs) -> Result<()> {
    let cfg = PipelineConfig::from_json(&fs::read_to_string(&a.config)?)?;
    let reg = Registry::open(&a.registry)?;
    let record = pipeline::run_pipeline(&reg, &cfg, &mut |msg: &str| eprintln!("{msg}"))?;
    let chain: Vec<String> = reg.lineage(&record.run_id)?.iter().map(|r| format!("{}:{}", r.pipeline, r.run_id)).collect();
    print(json!({ "run_id": record.run_id, "lineage": chain, "manifest": reg.run_dir(&record.run_id).join("manifest.json") }))
}

fn report_cmd(a: ReportArgs) -> Result<()> {
    let reg = Registry::open(&a.registry)?;
    let files = pipeline::report(&reg, &a.run)?;
    print(json!({ "run_id": a.run, "files": files }))
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<milab::Error>() {
            return match e {
                e if e.is_numeric() => 3,
                milab::Error::Io(_) => 1,
                _ => 2,
            };
        }
        if cause.downcast_ref::<serde_json::Error>().is_some() {
            return 2;
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Patch(a) => patch_cmd(a),
        Command::Cmap(a) => cmap_cmd(a),
        Command::Circuit { command } => circuit_cmd(command),
        Command::Pipeline(a) => pipeline_cmd(a),
        Command::Report(a) => report_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
