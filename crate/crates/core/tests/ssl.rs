use std::path::Path;

use ihd_autodiff::Tape;
use ihd_core::dataset::{LabeledSeries, Manifest, Split};
use ihd_core::ensemble::PredictionTable;
use ihd_core::model::{Model, ModelConfig};
use ihd_core::preprocess::PreprocessConfig;
use ihd_core::ssl::{
    binarize, confidence, run_ssl, select_series, selection_csv, series_confidence, ssl_round, unlabeled_loss,
    PseudoLabeledSet, SslConfig, Zoo, ZooMember,
};
use ihd_core::synth::{labeled_series, SynthSpec};
use ihd_core::training::{AugmentKind, AugmentPolicy, TrainConfig};
use ihd_core::{Error, LabelVector};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const STATIC: [f64; 6] = [1.0, 1.0, 1.0, 1.0, 1.0, 2.0];

fn table(series: &[(&str, Vec<[f64; 6]>)]) -> PredictionTable {
    let mut t = PredictionTable::new();
    for (id, rows) in series {
        t.insert_series(id, rows).unwrap();
    }
    t
}

#[test]
fn confidence_examples() {
    assert!((confidence(0.2).unwrap() - 0.8).abs() < 1e-15);
    assert_eq!(confidence(0.5).unwrap(), 0.5);
    assert_eq!(confidence(1.0).unwrap(), 1.0);
    assert!(matches!(confidence(1.5), Err(Error::Validation(_))));
    assert!(matches!(confidence(-0.1), Err(Error::Validation(_))));
}

#[test]
fn selection_gate_examples() {
    let sure = vec![[0.01, 0.99, 0.01, 0.01, 0.99, 0.99]; 3];
    let mut shaky = sure.clone();
    shaky[1][3] = 0.6;
    let t = table(&[("A", sure), ("B", shaky)]);
    assert_eq!(select_series(&t, 0.9).unwrap(), vec!["A".to_string()]);
}

#[test]
fn three_series_fixture_matches_brute_force() {
    let fixture: Vec<(&str, Vec<[f64; 6]>)> = vec![
        ("S1", vec![[0.02, 0.97, 0.05, 0.03, 0.01, 0.98], [0.04, 0.93, 0.02, 0.01, 0.06, 0.95]]),
        ("S2", vec![[0.2, 0.1, 0.05, 0.01, 0.01, 0.3], [0.01, 0.01, 0.01, 0.01, 0.01, 0.01]]),
        ("S3", vec![[0.001, 0.999, 0.0, 1.0, 0.08, 0.92]]),
    ];
    // Minimum confidences by hand: S1 0.93, S2 0.7, S3 0.92.
    let expected = [(0.9, vec!["S1", "S3"]), (0.925, vec!["S1"]), (0.6, vec!["S1", "S2", "S3"]), (0.95, vec![])];
    let t = table(&fixture);
    for (tau, want) in expected {
        let brute: Vec<&str> = fixture
            .iter()
            .filter(|(_, rows)| rows.iter().flatten().all(|&p| p.max(1.0 - p) > tau))
            .map(|(id, _)| *id)
            .collect();
        assert_eq!(brute, want);
        assert_eq!(select_series(&t, tau).unwrap(), want);
    }
    let conf = series_confidence(&t).unwrap();
    assert!((conf["S2"] - 0.7).abs() < 1e-15);
}

#[test]
fn selection_is_strict_at_threshold() {
    let t = table(&[("A", vec![[0.1; 6]])]);
    assert!(select_series(&t, 0.9).unwrap().is_empty());
}

#[test]
fn gapped_series_is_a_data_error() {
    let mut t = PredictionTable::new();
    t.insert("A", 0, [0.1; 6]).unwrap();
    t.insert("A", 2, [0.1; 6]).unwrap();
    assert!(matches!(select_series(&t, 0.6), Err(Error::Data(_))));
}

#[test]
fn binarize_examples() {
    let l = binarize(&[0.7, 0.5, 0.0, 0.51, 1.0, 0.49], 0.5);
    assert_eq!(l, LabelVector([true, false, false, true, true, false]));
}

proptest! {
    #[test]
    fn confidence_is_symmetric(p in 0.0f64..=1.0) {
        prop_assert_eq!(confidence(p).unwrap(), confidence(1.0 - p).unwrap());
        prop_assert!(confidence(p).unwrap() >= 0.5);
    }

    #[test]
    fn selection_is_monotone_in_tau(
        probs in proptest::collection::vec(proptest::array::uniform6(0.0f64..=1.0), 1..12),
        a in 0.5f64..1.0,
        b in 0.5f64..1.0,
    ) {
        let rows: Vec<(String, Vec<[f64; 6]>)> = probs.chunks(2).enumerate().map(|(i, c)| (format!("S{i}"), c.to_vec())).collect();
        let refs: Vec<(&str, Vec<[f64; 6]>)> = rows.iter().map(|(id, r)| (id.as_str(), r.clone())).collect();
        let t = table(&refs);
        let (lo, hi) = (a.min(b), a.max(b));
        let strict = select_series(&t, hi).unwrap();
        let loose = select_series(&t, lo).unwrap();
        prop_assert!(strict.iter().all(|s| loose.contains(s)));
    }

    #[test]
    fn binarize_is_idempotent_on_binary_input(bits in proptest::array::uniform6(any::<bool>()), tau in 0.01f64..0.99) {
        let once = binarize(&bits.map(|b| if b { 1.0 } else { 0.0 }), tau);
        prop_assert_eq!(once, LabelVector(bits));
        prop_assert_eq!(binarize(&once.as_f64(), tau), once);
    }
}

fn series(range: std::ops::Range<usize>, seed: u64) -> Vec<LabeledSeries> {
    let spec = SynthSpec {
        seed,
        num_series: range.end,
        min_slices: 3,
        max_slices: 5,
        frame: 32,
        ..SynthSpec::default()
    };
    labeled_series(&spec, range, &PreprocessConfig::with_size(32)).unwrap()
}

#[test]
fn unlabeled_loss_closed_form_and_stochasticity() {
    let s = &series(0..1, 1)[0];
    let mut model = Model::new(ModelConfig::tiny()).unwrap();
    // Zero heads give zero logits on every slice.
    for name in ["head_main.weight", "head_main.bias"] {
        let id = model.params.id(name).unwrap();
        let shape = model.params.value(id).shape().to_vec();
        model.params.set(id, ihd_autodiff::DenseArray::zeros(&shape)).unwrap();
    }
    let zeros = vec![LabelVector::NEGATIVE; s.batch.num_slices];
    let tape = Tape::no_grad();
    let vars = model.params.bind(&tape);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let lu = unlabeled_loss(&model, &tape, &vars, &s.batch, &zeros, &AugmentPolicy::strong(), &STATIC, &mut rng).unwrap();
    assert!((lu.value().item().unwrap() - std::f64::consts::LN_2).abs() < 1e-12);

    let model = Model::new(ModelConfig::tiny()).unwrap();
    let vars = model.params.bind(&tape);
    let draw = |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        unlabeled_loss(&model, &tape, &vars, &s.batch, &s.labels, &AugmentPolicy::strong(), &STATIC, &mut rng)
            .unwrap()
            .value()
            .item()
            .unwrap()
    };
    assert_ne!(draw(1), draw(2));
    assert_eq!(draw(3), draw(3));
}

#[test]
fn saturated_model_has_near_zero_unlabeled_loss() {
    let s = &series(0..1, 2)[0];
    let mut model = Model::new(ModelConfig::tiny()).unwrap();
    let w = model.params.id("head_main.weight").unwrap();
    let shape = model.params.value(w).shape().to_vec();
    model.params.set(w, ihd_autodiff::DenseArray::zeros(&shape)).unwrap();
    let b = model.params.id("head_main.bias").unwrap();
    model.params.set(b, ihd_autodiff::DenseArray::full(&[6], -50.0)).unwrap();
    let zeros = vec![LabelVector::NEGATIVE; s.batch.num_slices];
    let tape = Tape::no_grad();
    let vars = model.params.bind(&tape);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let lu = unlabeled_loss(&model, &tape, &vars, &s.batch, &zeros, &AugmentPolicy::strong(), &STATIC, &mut rng).unwrap();
    assert!(lu.value().item().unwrap() < 1e-15);
}

#[test]
fn pseudo_manifest_carries_provenance() {
    let t = table(&[("A", vec![[0.99, 0.01, 0.01, 0.01, 0.01, 0.99], [0.01; 6]]), ("B", vec![[0.6; 6]])]);
    let selected = select_series(&t, 0.9).unwrap();
    let set = PseudoLabeledSet::from_table(&t, &selected, 0.5, 2, "zoo");
    assert_eq!(set.series.len(), 1);
    assert_eq!(set.prevalence(), [0.5, 0.0, 0.0, 0.0, 0.0, 0.5]);
    let m = set.to_manifest();
    assert!(m.rows.iter().all(|r| r.split == Split::Unlabeled && r.provenance.as_deref() == Some("zoo;round=2")));
    let back = Manifest::parse(&m.to_csv(), Path::new("pseudo.csv")).unwrap();
    assert_eq!(back, m);
}

fn tiny_member(name: &str, rank: u32, seed: u64) -> ZooMember {
    let config = ModelConfig {
        init_seed: seed,
        ..ModelConfig::tiny()
    };
    let mut model = Model::new(config).unwrap();
    // A negative prior keeps predictions away from 0.5 so some series pass the gate.
    let b = model.params.id("head_main.bias").unwrap();
    model.params.set(b, ihd_autodiff::DenseArray::full(&[6], -3.0)).unwrap();
    ZooMember {
        name: name.into(),
        rank,
        model,
    }
}

fn train_config() -> TrainConfig {
    TrainConfig {
        iterations: 12,
        warmup: 2,
        peak_lr: 0.05,
        augment: AugmentKind::Weak,
        ..TrainConfig::default()
    }
}

#[test]
fn impossible_gate_trains_supervised_only() {
    let labeled = series(0..3, 3);
    let validation = series(3..5, 3);
    let unlabeled: Vec<_> = series(5..8, 3).into_iter().map(|s| s.batch).collect();
    let mut zoo = Zoo::new(vec![tiny_member("a", 1, 1)], None).unwrap();
    let ssl = SslConfig {
        tau_s: 0.999999,
        ..SslConfig::default()
    };
    let out = ssl_round(&mut zoo, &labeled, &unlabeled, &validation, &ssl, &train_config(), 0).unwrap();
    assert_eq!(out.report.num_selected(), 0);
    assert!(out.report.warning.is_some());
    assert!(out.report.fit.history.iter().all(|r| r.loss.lu == 0.0));
    assert_eq!(out.report.selection.len(), 3);
    assert_eq!(out.ensemble.by_series().len(), 3);
}

#[test]
fn round_is_deterministic_and_leaves_labels_alone() {
    let labeled = series(0..3, 4);
    let validation = series(3..5, 4);
    let unlabeled: Vec<_> = series(5..8, 4).into_iter().map(|s| s.batch).collect();
    let before: Vec<_> = labeled.iter().map(|s| s.labels.clone()).collect();
    let ssl = SslConfig {
        tau_s: 0.9,
        ..SslConfig::default()
    };
    let run = || {
        let mut zoo = Zoo::new(vec![tiny_member("a", 1, 1), tiny_member("b", 2, 2)], None).unwrap();
        let out = ssl_round(&mut zoo, &labeled, &unlabeled, &validation, &ssl, &train_config(), 0).unwrap();
        (out, zoo)
    };
    let (a, zoo_a) = run();
    let (b, _) = run();
    assert_eq!(a.ensemble, b.ensemble);
    assert_eq!(selection_csv(std::slice::from_ref(&a.report)), selection_csv(std::slice::from_ref(&b.report)));
    assert_eq!(a.report.new_model_loss, b.report.new_model_loss);
    assert_eq!(a.model.params.value(0), b.model.params.value(0));
    assert_eq!(labeled.iter().map(|s| s.labels.clone()).collect::<Vec<_>>(), before);
    assert!(a.report.num_selected() > 0);
    assert!(a.report.fit.history.iter().any(|r| r.loss.lu > 0.0));

    // The zoo keeps its rank set whether or not the new model got in.
    let mut ranks: Vec<u32> = zoo_a.members.iter().map(|m| m.rank).collect();
    ranks.sort_unstable();
    assert_eq!(ranks, vec![1, 2]);
    let worst = a.report.member_losses.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(a.report.replacement.is_some(), a.report.new_model_loss.unwrap() < worst);

    let csv = selection_csv(&[a.report]);
    assert!(csv.starts_with("round,series_id,min_confidence,selected\n"));
    assert_eq!(csv.lines().count(), 4);
}

#[test]
fn rounds_stop_within_budget() {
    let labeled = series(0..2, 5);
    let unlabeled: Vec<_> = series(2..4, 5).into_iter().map(|s| s.batch).collect();
    let mut zoo = Zoo::new(vec![tiny_member("a", 1, 1)], None).unwrap();
    let ssl = SslConfig {
        rounds: 3,
        tau_s: 0.51,
        ..SslConfig::default()
    };
    let outs = run_ssl(&mut zoo, &labeled, &unlabeled, &[], &ssl, &train_config()).unwrap();
    assert!(!outs.is_empty() && outs.len() <= 3);
    assert!(outs.iter().enumerate().all(|(i, o)| o.report.round == i));
}

#[test]
fn zoo_weights_follow_rank_nesting() {
    let zoo = Zoo::new(vec![tiny_member("b", 2, 2), tiny_member("a", 1, 1), tiny_member("c", 33, 3)], None).unwrap();
    let w = zoo.weights().unwrap();
    assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    assert!(w[1] > w[0] && w[0] > w[2]);

    let tree = ihd_core::ensemble::RankTree::parse("((1,2),33)").unwrap();
    let zoo = Zoo::new(zoo.members, Some(tree)).unwrap();
    let w = zoo.weights().unwrap();
    assert!((w[1] - 22.0 / 36.0).abs() < 1e-15 && (w[0] - 11.0 / 36.0).abs() < 1e-15);
    assert!((w[2] - 3.0 / 36.0).abs() < 1e-15);

    let bad = ihd_core::ensemble::RankTree::parse("(1,2)").unwrap();
    assert!(Zoo::new(zoo.members, Some(bad)).is_err());
    assert!(Zoo::new(Vec::new(), None).is_err());
}
