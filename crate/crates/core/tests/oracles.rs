// SPDX-License-Identifier: MIT OR Apache-2.0

mod common;

use common::*;
use milab::circuit::{self, Circuit};
use milab::data::{gen_ioi, PositionRole};
use milab::model::{HeadRef, NodeRef};
use milab::patch::{self, ActSite, NodeAt, PatchSpec, Receiver};
use milab::train::{eval_metric, Metric};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn reference_forward_matches_library_logits() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..5 {
        let model = random_model(&mut rng, 2, 2);
        let r = RefModel::new(&model);
        let d = gen_ioi(4, 3).unwrap();
        let lib = eval_metric(&model, &d, Metric::LogitDiff).unwrap().mean;
        assert!((lib - clean_metric(&r, &d)).abs() < 1e-10);
    }
}

#[test]
fn path_patch_matches_surgery_oracle() {
    let (err, moved) = path_patch_max_error(20, 1);
    assert!(err < 1e-8, "max error {err}");
    assert!(moved >= 10, "only {moved} of 20 patches changed the metric");
}

#[test]
fn minimality_and_completeness_match_double_knockout() {
    let err = circuit_metric_max_error(12, 2);
    assert!(err < 1e-8, "max error {err}");
}

#[test]
fn self_interventions_are_identities() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let model = random_model(&mut rng, 2, 2);
    let d = gen_ioi(6, 9).unwrap();
    let sites: Vec<ActSite> = NodeRef::all(model.config()).into_iter().map(|n| ActSite::node(n, PositionRole::All)).collect();
    assert!(patch::activation_patch(&model, &d, &d, &sites).unwrap().delta.abs() <= 1e-10);
    let spec = PatchSpec { sender: NodeRef::Embed, sender_positions: PositionRole::All, receivers: vec![Receiver::Logits] };
    assert!(patch::path_patch(&model, &d, &d, &spec).unwrap().delta.abs() <= 1e-10);
    let heads = HeadRef::all(model.config());
    assert!(patch::cmap_pattern(&model, &model, &d, &heads).unwrap().delta.abs() <= 1e-10);
    assert!(patch::cmap_output(&model, &model, &d, &heads).unwrap().delta.abs() <= 1e-10);
    let means = patch::compute_mean_cache(&model, &patch::reference_dataset(d.task().unwrap(), 2, 1).unwrap()).unwrap();
    let clean = eval_metric(&model, &d, Metric::LogitDiff).unwrap().mean;
    assert!((patch::knockout(&model, &d, &[], &means).unwrap() - clean).abs() <= 1e-10);
}

#[test]
fn completeness_of_empty_set_is_faithfulness() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let model = random_model(&mut rng, 2, 2);
    let d = gen_ioi(6, 2).unwrap();
    let means = patch::compute_mean_cache(&model, &patch::reference_dataset(d.task().unwrap(), 2, 4).unwrap()).unwrap();
    let mut c = Circuit::new(&model, d.task().unwrap(), 0.02);
    c.insert(NodeRef::Head(HeadRef::new(1, 0)), PositionRole::End, circuit::RoleClass::NameMover).unwrap();
    c.insert(NodeRef::Head(HeadRef::new(0, 1)), PositionRole::S2, circuit::RoleClass::DuplicateToken).unwrap();
    let f = circuit::faithfulness(&model, &c, &d, &means).unwrap();
    let comp = circuit::completeness(&model, &c, &[], &d, &means).unwrap();
    assert_eq!(comp.to_bits(), f.absolute.to_bits());
    let all = Circuit::all_nodes(&model, d.task().unwrap());
    assert_eq!(circuit::sparsity(&all, model.config(), PositionRole::IOI.len()), 1.0);
    let _ = NodeAt::new(NodeRef::Embed, PositionRole::All);
}
