// SPDX-License-Identifier: MIT OR Apache-2.0

//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion and
//! exits nonzero when any criterion fails.
//!
//! The pipelines run in a fresh temporary registry unless
//! `MILAB_ACCEPTANCE_REGISTRY` names a directory to reuse.

mod common;

use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use milab::circuit::{self, Circuit};
use milab::data::{Corruption, PositionRole, Task, Vocabulary};
use milab::model::{HeadRef, NodeRef, TransformerModel};
use milab::patch::{self, ActSite, PatchSpec, Receiver};
use milab::pipeline::{self, DataSizes, PipelineConfig, Registry, RunRecord, Schedules, Stage};
use milab::train::{eval_metric, Metric};

struct Outcome {
    criterion: u8,
    pass: bool,
    detail: String,
}

struct Suite {
    outcomes: Vec<Outcome>,
}

impl Suite {
    fn record(&mut self, criterion: u8, pass: bool, detail: String) {
        println!("criterion {criterion}: {} {detail}", if pass { "PASS" } else { "FAIL" });
        self.outcomes.push(Outcome { criterion, pass, detail });
    }

    fn note(&self, msg: String) {
        println!("  note: {msg}");
    }
}

fn progress(msg: &str) {
    eprintln!("  [pipeline] {msg}");
}

fn gradients(suite: &mut Suite) {
    let start = Instant::now();
    let checks = milab_tensor::gradcheck::check_all(20, 7, 1e-4).expect("gradient checks run");
    let secs = start.elapsed().as_secs_f64();
    let worst = checks.iter().map(|c| c.max_rel_error).fold(0.0, f64::max);
    let failing: Vec<&str> = checks.iter().filter(|c| !(c.max_rel_error < 1e-3)).map(|c| c.primitive).collect();
    suite.record(
        1,
        failing.is_empty() && secs < 30.0,
        format!(
            "{} primitives x 20 instances, worst relative error {worst:.2e}, failing {failing:?}, {secs:.1}s",
            checks.len()
        ),
    );
}

/// Largest self-intervention delta on one model.
fn identity_deltas(model: &TransformerModel, task: Task) -> f64 {
    let d = match task {
        Task::Ioi => milab::data::gen_ioi(64, 21).unwrap(),
        Task::GreaterThan => milab::data::gen_greater_than(64, 21).unwrap(),
    };
    let cfg = model.config();
    let sites: Vec<ActSite> = NodeRef::all(cfg).into_iter().map(|n| ActSite::node(n, PositionRole::All)).collect();
    let mut worst: f64 = patch::activation_patch(model, &d, &d, &sites).unwrap().delta.abs();
    for sender in NodeRef::all(cfg) {
        let spec = PatchSpec { sender, sender_positions: PositionRole::All, receivers: vec![Receiver::Logits] };
        worst = worst.max(patch::path_patch(model, &d, &d, &spec).unwrap().delta.abs());
    }
    let heads = HeadRef::all(cfg);
    worst = worst.max(patch::cmap_pattern(model, model, &d, &heads).unwrap().delta.abs());
    worst = worst.max(patch::cmap_output(model, model, &d, &heads).unwrap().delta.abs());
    let means = patch::compute_mean_cache(model, &patch::reference_dataset(task, 4, 3).unwrap()).unwrap();
    let clean = eval_metric(model, &d, Metric::default_for(task)).unwrap().mean;
    worst.max((patch::knockout(model, &d, &[], &means).unwrap() - clean).abs())
}

fn interventions(suite: &mut Suite, trained: &TransformerModel) {
    let start = Instant::now();
    let identity = identity_deltas(trained, Task::Ioi);
    let (oracle, moved) = common::path_patch_max_error(50, 2024);
    let secs = start.elapsed().as_secs_f64();
    suite.record(
        2,
        identity <= 1e-10 && oracle < 1e-8 && secs < 120.0,
        format!(
            "self-intervention max |delta| {identity:.2e}; path patching vs surgery oracle over 50 random models max error {oracle:.2e} ({moved} with nonzero effect); {secs:.1}s"
        ),
    );
}

fn metric_definitions(suite: &mut Suite, reg: &Registry, pretrain: &RunRecord) {
    let ck = pretrain.final_checkpoint().unwrap();
    let model = reg.load_model(pretrain, ck).unwrap();
    let d = milab::data::gen_ioi(128, 31).unwrap();
    let means = patch::compute_mean_cache(&model, &patch::reference_dataset(Task::Ioi, 32, 9).unwrap()).unwrap();
    let c = reg.load_circuit(pretrain, ck).unwrap().unwrap_or_else(|| Circuit::all_nodes(&model, Task::Ioi));
    let f = circuit::faithfulness(&model, &c, &d, &means).unwrap();
    let comp = circuit::completeness(&model, &c, &[], &d, &means).unwrap();
    let bitwise = comp.to_bits() == f.absolute.to_bits();
    let all = Circuit::all_nodes(&model, Task::Ioi);
    let s_ioi = circuit::sparsity(&all, model.config(), PositionRole::IOI.len());
    let s_gt = circuit::sparsity(
        &Circuit::all_nodes(&model, Task::GreaterThan),
        model.config(),
        PositionRole::GREATER_THAN.len(),
    );
    let oracle = common::circuit_metric_max_error(30, 77);
    suite.record(
        9,
        bitwise && s_ioi == 1.0 && s_gt == 1.0 && oracle < 1e-8,
        format!(
            "completeness(empty) {} faithfulness ({comp:e} vs {:e}); all-nodes sparsity {s_ioi} / {s_gt}; minimality and completeness vs double-knockout oracle over 30 random models max error {oracle:.2e}",
            if bitwise { "==" } else { "!=" },
            f.absolute
        ),
    );
}

fn all_checkpoints(reg: &Registry, records: &[&RunRecord]) -> Vec<(String, usize, f64)> {
    let mut out = Vec::new();
    let mut seen = std::collections::BTreeSet::new();
    for r in records {
        for rec in reg.lineage(&r.run_id).unwrap() {
            if seen.insert(rec.run_id.clone()) {
                for ck in &rec.checkpoints {
                    out.push((format!("{}:{}", rec.pipeline, rec.run_id), ck.epoch, ck.attribution_error));
                }
            }
        }
    }
    out
}

fn telescoping(suite: &mut Suite, reg: &Registry, records: &[&RunRecord]) {
    let cks = all_checkpoints(reg, records);
    let worst = cks.iter().map(|c| c.2).fold(0.0, f64::max);
    let bad: Vec<String> = cks.iter().filter(|c| !(c.2 < 1e-6)).map(|c| format!("{}@{}", c.0, c.1)).collect();
    suite.record(
        3,
        bad.is_empty() && !cks.is_empty(),
        format!("{} checkpoints, worst |sum of attributions - logit difference| {worst:.2e}, failing {bad:?}", cks.len()),
    );
}

fn parent(reg: &Registry, r: &RunRecord) -> RunRecord {
    reg.load(r.parent.as_deref().expect("stage has a parent")).unwrap()
}

fn final_metric(r: &RunRecord) -> f64 {
    r.final_checkpoint().unwrap().metric
}

fn amplification(suite: &mut Suite, reg: &Registry, amp: &RunRecord, wall: Option<f64>) {
    let metrics: Vec<(usize, f64)> = amp.checkpoints.iter().map(|c| (c.epoch, c.metric)).collect();
    let violations = metrics.windows(2).filter(|w| w[1].1 < w[0].1).count();
    let ratios: Vec<Option<f64>> =
        amp.checkpoints.iter().map(|c| c.circuit_eval.as_ref().and_then(|e| e.ratio)).collect();
    let faithful = ratios.iter().all(|r| matches!(r, Some(x) if *x >= 0.90));
    let last_epoch = amp.checkpoints.last().map(|c| c.epoch).unwrap_or(0);
    let finals: Vec<f64> = amp
        .cmap
        .iter()
        .filter(|c| c.donor_epoch == last_epoch && c.in_parent_circuit)
        .map(|c| c.delta.delta)
        .collect();
    let positive = finals.iter().filter(|d| **d > 0.0).count();
    let cmap_ok = !finals.is_empty() && 2 * positive > finals.len();
    let schedule_ok = metrics.iter().map(|m| m.0).collect::<Vec<_>>() == vec![1, 3, 5, 10, 20];
    suite.record(
        4,
        schedule_ok && violations <= 1 && faithful && cmap_ok && wall.map_or(true, |w| w <= 1200.0),
        format!(
            "logit difference by epoch {:?} ({violations} decreasing steps); faithfulness ratios {:?}; CMAP pattern epoch {last_epoch} into parent: {positive}/{} circuit heads positive; pretrain+amplify wall time {}",
            metrics.iter().map(|(e, m)| format!("{e}:{m:.3}")).collect::<Vec<_>>(),
            ratios.iter().map(|r| r.map_or("none".to_string(), |x| format!("{x:.3}"))).collect::<Vec<_>>(),
            finals.len(),
            wall.map_or("not measured (runs reused from the registry)".to_string(), |w| format!("{:.1} min", w / 60.0))
        ),
    );
    let p = parent(reg, amp);
    let pc = reg.load_circuit(&p, p.final_checkpoint().unwrap()).unwrap();
    if let (Some(pc), Some(ck3)) = (pc, amp.checkpoint_at(3)) {
        if let Some(c3) = reg.load_circuit(amp, ck3).unwrap() {
            let diff = circuit::diff(&pc, &c3);
            suite.note(format!(
                "amplify circuit diff epoch 3 vs epoch 0: {} added, {} removed, {} reclassified",
                diff.added.len(),
                diff.removed.len(),
                diff.reclassified.len()
            ));
        }
    }
    let sr: Vec<String> = amp
        .checkpoints
        .iter()
        .filter_map(|c| c.self_repair.map(|s| format!("{}:{:.3}", c.epoch, s.self_repair)))
        .collect();
    suite.note(format!("self-repair of tracked mover {:?} by epoch {sr:?}", amp.tracked_mover.map(|h| h.to_string())));
    let att: Vec<String> = std::iter::once(p.final_checkpoint().unwrap())
        .chain(&amp.checkpoints)
        .filter_map(|c| c.mover_end_to_s.map(|a| format!("{}:{a:.4}", c.epoch)))
        .collect();
    suite.note(format!("tracked mover END->S attention (pretrain, then amplify epochs) {att:?}"));
    if let Some(cmp) = &amp.comparison {
        suite.note(format!("group ablation |dF| (parent, amplified) {:?}", cmp.group_ablation));
    }
}

/// Share of above-floor CMAP heads that belong to the clean circuit.
fn localization(r: &RunRecord) -> (usize, usize) {
    let sig: Vec<_> = r.cmap.iter().filter(|c| c.delta.significant()).collect();
    (sig.iter().filter(|c| c.in_parent_circuit).count(), sig.len())
}

fn corruption(suite: &mut Suite, reg: &Registry, sd: &RunRecord, nm: &RunRecord) {
    let clean = parent(reg, sd);
    let clean_ld = final_metric(&clean);
    let sd_ld: Vec<(usize, f64)> = sd.epochs.iter().filter(|e| e.epoch > 0).map(|e| (e.epoch, e.metric)).collect();
    let flipped = clean_ld > 0.0 && sd_ld.iter().any(|(e, m)| *e <= 10 && *m < 0.0) && final_metric(sd) < 0.0;
    let nm_ck = nm.final_checkpoint().unwrap();
    let clean_ck = clean.final_checkpoint().unwrap();
    let floor = 5.0 / Vocabulary::standard().name_ids().len() as f64;
    let acc = nm_ck.accuracy.unwrap_or(f64::NAN);
    let spread_ratio = nm_ck.top5_spread.unwrap_or(f64::NAN) / clean_ck.top5_spread.unwrap_or(f64::NAN);
    let nm_ok = acc < floor && spread_ratio <= 0.5;
    let (sd_in, sd_all) = localization(sd);
    let (nm_in, nm_all) = localization(nm);
    let local_ok = sd_all > 0 && nm_all > 0 && sd_in as f64 >= 0.7 * sd_all as f64 && nm_in as f64 >= 0.7 * nm_all as f64;
    suite.record(
        5,
        flipped && nm_ok && local_ok,
        format!(
            "subject duplication: clean {clean_ld:.3}, by epoch {:?}; name moving: accuracy {acc:.4} (< {floor}), top-5 spread {:.3} -> {:.3} (ratio {spread_ratio:.3}); CMAP heads above floor in clean circuit: subject duplication {sd_in}/{sd_all}, name moving {nm_in}/{nm_all}",
            sd_ld.iter().map(|(e, m)| format!("{e}:{m:.3}")).collect::<Vec<_>>(),
            clean_ck.top5_spread.unwrap_or(f64::NAN),
            nm_ck.top5_spread.unwrap_or(f64::NAN),
        ),
    );
    for (name, r) in [("subject duplication", sd), ("name moving", nm)] {
        if let Some(cmp) = &r.comparison {
            suite.note(format!(
                "{name}: group ablation |dF| (clean, corrupted) {:?}; S-inhibition END attention shift (S, IO) {:?}",
                cmp.group_ablation,
                cmp.inhibition_attention_shift.iter().map(|(h, s, i)| format!("{h}:{s:.3},{i:.3}")).collect::<Vec<_>>()
            ));
        }
    }
}

fn node_set_overlap(reg: &Registry, post: &RunRecord, pre: &RunRecord) -> Option<f64> {
    let a = reg.load_circuit(post, post.final_checkpoint().ok()?).ok()??;
    let b = reg.load_circuit(pre, pre.final_checkpoint().ok()?).ok()??;
    Some(circuit::node_overlap(&a, &b))
}

fn neuroplasticity(suite: &mut Suite, reg: &Registry, rev: &RunRecord) {
    let corrupt = parent(reg, rev);
    let clean = parent(reg, &corrupt);
    let (pre, post) = (final_metric(&clean), final_metric(rev));
    let within = rev.epochs.iter().filter(|e| e.epoch <= 10).any(|e| e.epoch > 0 && e.metric >= 0.9 * pre);
    let overlap = node_set_overlap(reg, rev, &clean);
    suite.record(
        6,
        pre > 0.0 && post >= 0.9 * pre && within && matches!(overlap, Some(o) if o >= 0.6),
        format!(
            "pre-corruption {pre:.3}, corrupted {:.3}, post-reversal {post:.3} ({:.1}%); post-reversal circuit nodes shared with clean circuit {}",
            final_metric(&corrupt),
            100.0 * post / pre,
            overlap.map_or("n/a".into(), |o| format!("{:.1}%", 100.0 * o))
        ),
    );
}

fn greater_than(suite: &mut Suite, reg: &Registry, rev: &RunRecord) {
    let corrupt = parent(reg, rev);
    let clean = parent(reg, &corrupt);
    let lens = |r: &RunRecord| {
        let c = r.final_checkpoint().unwrap();
        (c.lens_upper.unwrap_or(f64::NAN), c.lens_lower.unwrap_or(f64::NAN))
    };
    let (cu, cl) = lens(&clean);
    let (ku, kl) = lens(&corrupt);
    let (ru, rl) = lens(rev);
    let (m0, m1, m2) = (final_metric(&clean), final_metric(&corrupt), final_metric(rev));
    suite.record(
        7,
        m0 > 0.5 && m1 < -0.5 && m2 > 0.5 && cu > cl && kl > ku && ru > rl,
        format!(
            "prob_diff clean {m0:.3}, lower-than {m1:.3}, reversed {m2:.3}; MLP{} lens mean above/below diagonal: clean {cu:.3}/{cl:.3}, corrupted {ku:.3}/{kl:.3}, reversed {ru:.3}/{rl:.3}",
            clean.tracked_mlp.map_or("?".into(), |l| l.to_string())
        ),
    );
}

fn reduced_config() -> PipelineConfig {
    let mut cfg = PipelineConfig::new(Task::Ioi, Stage::Amplify, None);
    cfg.schedules = Schedules { pretrain: 3, amplify: vec![1, 2], ..Schedules::default() };
    cfg.data = DataSizes { train: 640, eval: 64, discover: 32, mean_per_template: 8 };
    cfg
}

fn report_bytes(reg: &Registry, id: &str) -> Vec<(String, Vec<u8>)> {
    pipeline::report(reg, id)
        .unwrap()
        .into_iter()
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect()
}

fn determinism(suite: &mut Suite, main: &Registry, amp_cfg: &PipelineConfig, amp: &RunRecord) {
    let cfg = reduced_config();
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let mut runs = Vec::new();
    for dir in &dirs {
        let reg = Registry::open(dir.path()).unwrap();
        let rec = pipeline::run_pipeline(&reg, &cfg, &mut progress).unwrap();
        let chain = reg.lineage(&rec.run_id).unwrap();
        let reports: Vec<_> = chain.iter().map(|r| (r.run_id.clone(), report_bytes(&reg, &r.run_id))).collect();
        let manifests: Vec<Vec<u8>> =
            chain.iter().map(|r| fs::read(reg.run_dir(&r.run_id).join("manifest.json")).unwrap()).collect();
        runs.push((reports, manifests));
    }
    let same_reports = runs[0].0 == runs[1].0;
    let same_manifests = runs[0].1 == runs[1].1;
    let metrics_equal = runs[0].0.iter().zip(&runs[1].0).all(|(a, b)| {
        let pick = |v: &Vec<(String, Vec<u8>)>| v.iter().find(|(n, _)| n == "metrics.csv").map(|x| x.1.clone());
        a.0 == b.0 && pick(&a.1).is_some() && pick(&a.1) == pick(&b.1)
    });
    let rerun = pipeline::run_pipeline(main, amp_cfg, &mut progress).unwrap();
    let main_reports_stable = report_bytes(main, &amp.run_id) == report_bytes(main, &amp.run_id);
    suite.record(
        8,
        metrics_equal && same_reports && same_manifests && rerun.run_id == amp.run_id && main_reports_stable,
        format!(
            "two fresh executions of a reduced config: run ids {:?}, metrics.csv identical {metrics_equal}, all report files identical {same_reports}, manifests identical {same_manifests}; full amplify config re-run gives run id {} (expected {})",
            runs[0].0.iter().map(|r| r.0.clone()).collect::<Vec<_>>(),
            rerun.run_id,
            amp.run_id
        ),
    );
}

fn main() -> ExitCode {
    let mut suite = Suite { outcomes: Vec::new() };
    let tmp;
    let root = match std::env::var_os("MILAB_ACCEPTANCE_REGISTRY") {
        Some(p) => Path::new(&p).to_path_buf(),
        None => {
            tmp = tempfile::tempdir().expect("temporary registry");
            tmp.path().to_path_buf()
        }
    };
    let reg = Registry::open(&root).expect("registry");
    println!("acceptance registry: {}", root.display());

    gradients(&mut suite);

    let amp_cfg = PipelineConfig::new(Task::Ioi, Stage::Amplify, None);
    let fresh = !reg.exists(&amp_cfg.stage_config(Stage::Pretrain).run_id().expect("run id"));
    let start = Instant::now();
    let amp = pipeline::run_pipeline(&reg, &amp_cfg, &mut progress).expect("amplify pipeline");
    let amp_wall = fresh.then(|| start.elapsed().as_secs_f64());
    let pretrain = parent(&reg, &amp);
    let trained = reg.load_model(&pretrain, pretrain.final_checkpoint().unwrap()).unwrap();

    interventions(&mut suite, &trained);
    metric_definitions(&mut suite, &reg, &pretrain);

    let sd_cfg = PipelineConfig::new(Task::Ioi, Stage::Reverse, Some(Corruption::SubjectDuplication));
    let rev = pipeline::run_pipeline(&reg, &sd_cfg, &mut progress).expect("subject-duplication pipeline");
    let sd = parent(&reg, &rev);
    let nm_cfg = PipelineConfig::new(Task::Ioi, Stage::Corrupt, Some(Corruption::NameMoving));
    let nm = pipeline::run_pipeline(&reg, &nm_cfg, &mut progress).expect("name-moving pipeline");
    let gt_cfg = PipelineConfig::new(Task::GreaterThan, Stage::Reverse, Some(Corruption::LowerThan));
    let gt = pipeline::run_pipeline(&reg, &gt_cfg, &mut progress).expect("greater-than pipeline");

    telescoping(&mut suite, &reg, &[&amp, &rev, &nm, &gt]);
    amplification(&mut suite, &reg, &amp, amp_wall);
    corruption(&mut suite, &reg, &sd, &nm);
    neuroplasticity(&mut suite, &reg, &rev);
    greater_than(&mut suite, &reg, &gt);
    determinism(&mut suite, &reg, &amp_cfg, &amp);

    suite.outcomes.sort_by_key(|o| o.criterion);
    println!("summary:");
    for o in &suite.outcomes {
        println!("  {} criterion {}", if o.pass { "PASS" } else { "FAIL" }, o.criterion);
    }
    let failed: Vec<&Outcome> = suite.outcomes.iter().filter(|o| !o.pass).collect();
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        for o in failed {
            eprintln!("criterion {} failed: {}", o.criterion, o.detail);
        }
        ExitCode::FAILURE
    }
}
