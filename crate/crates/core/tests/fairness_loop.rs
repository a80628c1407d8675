mod common;

use fairloop_core::bundle::{load_bundle, save_bundle, BundleError};
use fairloop_core::distillation::TreeNode;
use fairloop_core::encoding::PrefixDataset;
use fairloop_core::fairness_loop::{
    bootstrap, relabel_dataset, run_iteration, run_iteration_with_progress, LoopConfig, LoopState, ModelConfig,
};
use fairloop_core::metrics::{
    classification_metrics, compute_metrics, demographic_parity, MetricsError, ParityProbe, ProbeScope, RateKind,
};
use fairloop_core::neural::{MlpModel, TrainConfig};
use fairloop_core::simulator::{REFUSE, REGISTER};
use fairloop_core::surgery::{routed_samples, EditAction};

fn config() -> LoopConfig {
    LoopConfig {
        model: ModelConfig {
            hidden_layers: vec![32],
            seed: 42,
        },
        train: TrainConfig {
            epochs: 10,
            learning_rate: 0.005,
            ..TrainConfig::default()
        },
        finetune: TrainConfig {
            epochs: 5,
            learning_rate: 0.005,
            ..TrainConfig::default()
        },
        probes: vec![ParityProbe {
            attribute: "gender".into(),
            groups: ["female".into(), "male".into()],
            target: REFUSE.into(),
            scope: ProbeScope::DecisionContext,
            rate: RateKind::Probability,
        }],
        ..LoopConfig::default()
    }
}

fn state() -> LoopState {
    bootstrap(&common::cancer_log(300, 42), &config()).unwrap()
}

/// The internal node testing gender among prefixes ending in registration.
fn refusal_node(s: &LoopState) -> u64 {
    let gender = s.dataset.spec.attribute_columns("gender");
    let refuse = s.dataset.spec.class_of(REFUSE).unwrap();
    s.tree
        .nodes()
        .into_iter()
        .find(|n| {
            n.split().is_some_and(|(f, _)| gender.contains(&f)) && n.histogram()[refuse] > 0 && {
                let (l, r) = n.children().unwrap();
                l.majority() == refuse || r.majority() == refuse
            }
        })
        .expect("tree has a gender-conditioned refusal split")
        .id()
}

#[test]
fn bootstrap_is_deterministic() {
    let a = state();
    let b = state();
    assert_eq!(a, b);
    assert_eq!(a.iteration, 0);
    assert_eq!(a.metrics_history.len(), 1);
}

#[test]
fn iteration_relabels_with_the_edited_tree_and_keeps_input() {
    let s0 = state();
    let snapshot = s0.clone();
    let node = refusal_node(&s0);
    let edits = [EditAction::Remove { node_id: node }];
    let outcome = run_iteration_with_progress(&s0, &edits, &s0.config.finetune, &s0.config.tree, &mut |_| {}).unwrap();
    assert_eq!(s0, snapshot);
    let s1 = &outcome.state;
    assert_eq!(s1.iteration, 1);
    assert_eq!(s1.metrics_history.len(), 2);
    assert_eq!(s1.metrics_history[0], s0.metrics_history[0]);
    let edited = &s1.iterations[0].edited_tree;
    let predicted = edited.predict_all(outcome.relabeled.features());
    assert_eq!(outcome.relabeled.labels(), predicted);
    // original labels ride along untouched
    assert_eq!(s1.dataset, s0.dataset);

    // changed samples are the ones through the removed node whose prediction moved
    let routed = routed_samples(&s0.tree, node, &s0.distill_data).unwrap();
    let before = s0.tree.predict_all(s0.dataset.features());
    let expected: usize = routed.iter().filter(|&&i| before[i] != predicted[i]).count();
    let outside_changed = (0..before.len())
        .filter(|i| !routed.contains(i) && before[*i] != predicted[*i])
        .count();
    assert_eq!(outside_changed, 0);
    assert_eq!(s1.iterations[0].diff.changed, expected);

    let replay = run_iteration(&s0, &edits, &s0.config.finetune, &s0.config.tree).unwrap();
    assert_eq!(&replay, s1);
}

#[test]
fn metrics_use_original_labels() {
    let s0 = state();
    let s1 = run_iteration(
        &s0,
        &[EditAction::Remove {
            node_id: refusal_node(&s0),
        }],
        &s0.config.finetune,
        &s0.config.tree,
    )
    .unwrap();
    let truth = s0.dataset.labels();
    let pred = s1.model.predict_all(s1.dataset.features()).unwrap();
    let m = classification_metrics(&truth, &pred, &s1.dataset.class_names);
    let report = &s1.metrics_history[1];
    assert_eq!(report.accuracy, m.accuracy);
    assert_eq!(report.macro_f1, m.macro_f1);
    let again = compute_metrics(&s1.model, &s0.dataset, &s1.tree, &s1.config.probes, 1).unwrap();
    assert_eq!(&again, report);
}

#[test]
fn relabel_of_unedited_tree_counts_ground_truth_disagreements() {
    let s0 = state();
    let r = relabel_dataset(&s0.tree, &s0.dataset).unwrap();
    let tree_pred = s0.tree.predict_all(s0.dataset.features());
    let disagreements = tree_pred
        .iter()
        .zip(s0.dataset.labels())
        .filter(|(a, b)| **a != *b)
        .count();
    assert_eq!(r.diff.changed, disagreements);
    assert_eq!(r.diff.total, s0.dataset.len());
    assert_eq!(r.dataset.labels(), tree_pred);
}

#[test]
fn permuting_samples_keeps_metrics() {
    let s0 = state();
    let mut shuffled = s0.dataset.clone();
    shuffled.samples.reverse();
    let a = compute_metrics(&s0.model, &s0.dataset, &s0.tree, &[], 0).unwrap();
    let b = compute_metrics(&s0.model, &shuffled, &s0.tree, &[], 0).unwrap();
    assert_eq!(a.accuracy, b.accuracy);
    assert_eq!(a.macro_f1, b.macro_f1);
    assert_eq!(a.per_class, b.per_class);
    assert_eq!(a.fidelity, b.fidelity);
}

fn parity_dataset(state: &LoopState) -> PrefixDataset {
    // symmetric copy: every sample appears once per gender
    let cols = state.dataset.spec.attribute_columns("gender");
    let mut d = state.dataset.clone();
    let mut mirrored = d.samples.clone();
    for s in &mut mirrored {
        let (a, b) = (s.features[cols[0]], s.features[cols[1]]);
        s.features[cols[0]] = b;
        s.features[cols[1]] = a;
    }
    d.samples.extend(mirrored);
    d
}

#[test]
fn parity_probe_oracles() {
    let s0 = state();
    let probe = |rate| ParityProbe {
        attribute: "gender".into(),
        groups: ["female".into(), "male".into()],
        target: REFUSE.into(),
        scope: ProbeScope::AllPrefixes,
        rate,
    };
    // a model that ignores gender on a gender-symmetric dataset shows no gap
    let mut blind: MlpModel = s0.model.clone();
    let cols = s0.dataset.spec.attribute_columns("gender");
    let dim = s0.dataset.spec.dimension();
    for o in 0..blind.layers[0].fan_out {
        for &c in &cols {
            blind.layers[0].weights[o * dim + c] = 0.0;
        }
    }
    let symmetric = parity_dataset(&s0);
    for rate in [RateKind::Probability, RateKind::Prediction] {
        assert!(demographic_parity(&blind, &symmetric, &probe(rate)).unwrap().gap < 0.05);
    }

    // a model predicting the target exactly for females scores 1.0
    let mut extreme = s0.model.clone();
    let refuse = s0.dataset.spec.class_of(REFUSE).unwrap();
    let last = extreme.layers.len() - 1;
    extreme.layers.iter_mut().for_each(|l| {
        l.weights.iter_mut().for_each(|w| *w = 0.0);
        l.biases.iter_mut().for_each(|b| *b = 0.0);
    });
    // hidden unit 0 copies the female column, the output layer votes on it
    let female = cols[0];
    extreme.layers[0].weights[female] = 1.0;
    for l in 1..last {
        extreme.layers[l].weights[0] = 1.0;
    }
    let fan_in = extreme.layers[last].fan_in;
    extreme.layers[last].weights[refuse * fan_in] = 100.0;
    extreme.layers[last].biases[0] = 50.0;
    let r = demographic_parity(&extreme, &s0.dataset, &probe(RateKind::Prediction)).unwrap();
    assert_eq!(r.gap, 1.0);

    let bad = ParityProbe {
        attribute: "age".into(),
        ..probe(RateKind::Prediction)
    };
    assert_eq!(
        demographic_parity(&s0.model, &s0.dataset, &bad).unwrap_err(),
        MetricsError::UnknownAttribute("age".into())
    );
}

#[test]
fn bundles_round_trip_and_resume() {
    let log = common::cancer_log(300, 42);
    let s0 = bootstrap(&log, &config()).unwrap();
    let s1 = run_iteration(
        &s0,
        &[EditAction::Remove {
            node_id: refusal_node(&s0),
        }],
        &s0.config.finetune,
        &s0.config.tree,
    )
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    save_bundle(&a, &s1, Some(&log)).unwrap();
    let (loaded, loaded_log) = load_bundle(&a).unwrap();
    assert_eq!(loaded, s1);
    assert_eq!(loaded_log.as_ref(), Some(&log));
    save_bundle(&b, &loaded, loaded_log.as_ref()).unwrap();
    for file in [
        "log.xes",
        "dataset.json",
        "model.json",
        "tree.json",
        "edits.json",
        "metrics.json",
        "state.json",
    ] {
        assert_eq!(
            std::fs::read(a.join(file)).unwrap(),
            std::fs::read(b.join(file)).unwrap(),
            "{file}"
        );
    }

    let cfg = TrainConfig {
        epochs: 3,
        ..s1.config.finetune.clone()
    };
    let next_saved = run_iteration(&loaded, &[], &cfg, &s1.config.tree).unwrap();
    let next_live = run_iteration(&s1, &[], &cfg, &s1.config.tree).unwrap();
    assert_eq!(next_saved.metrics_history, next_live.metrics_history);

    let model = std::fs::read(a.join("model.json")).unwrap();
    std::fs::write(a.join("model.json"), &model[..model.len() / 2]).unwrap();
    match load_bundle(&a) {
        Err(e @ BundleError::CorruptBundle { .. }) => assert_eq!(e.component(), Some("model")),
        other => panic!("expected a corrupt model, got {other:?}"),
    }
}

#[test]
fn single_trace_log_bootstraps() {
    use fairloop_core::event_log::{Event, EventLog, Trace};
    let log = EventLog::new(vec![Trace {
        case_id: "only".into(),
        case_attributes: Default::default(),
        events: vec![Event {
            activity: REGISTER.into(),
            timestamp: chrono::DateTime::<chrono::Utc>::from_timestamp(0, 0).unwrap(),
            attributes: Default::default(),
        }],
    }])
    .unwrap();
    let cfg = LoopConfig {
        probes: vec![],
        ..config()
    };
    let s = bootstrap(&log, &cfg).unwrap();
    assert_eq!(s.metrics_history[0].accuracy, 1.0);
    assert!(matches!(s.tree.root, TreeNode::Leaf { predicted, .. } if predicted == s.dataset.spec.end_class()));
}
