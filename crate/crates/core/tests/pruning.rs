use layerlens::adversarial::{build_binary, build_binary_with_inert, AdversarialSpec};
use layerlens::metrics::{evaluate_accuracy, score_all, MetricKind, ScoreOptions};
use layerlens::model::{ModelConfig, PassCounter};
use layerlens::pruning::{
    exhaustive_best_subset, iterative_prune, one_shot_prune, prune, Amount, PruneConfig,
    PruneTrace, Strategy,
};
use layerlens::tasks::{generate, CalibrationDataset, TaskKind, TaskSpec};
use layerlens::trainer::{train, TrainConfig};
use layerlens::{Error, Model, Tensor};

fn parity() -> CalibrationDataset {
    generate(&TaskSpec::new(TaskKind::Parity, 3, 6, 0, 2), 40, 4).unwrap().0
}

fn cfg(metric: MetricKind, strategy: Strategy, k: usize) -> PruneConfig {
    PruneConfig::new(metric, strategy, Amount::Layers(k))
}

fn acc(m: &Model, d: &CalibrationDataset) -> f64 {
    evaluate_accuracy(m, d, &PassCounter::new()).unwrap()
}

fn small_trained(layers: usize, seed: u64) -> (Model, CalibrationDataset) {
    let (train_set, _) =
        generate(&TaskSpec::new(TaskKind::Majority, 5, 7, 0, seed), 96, 8).unwrap();
    let hp = TrainConfig { epochs: 4, seed, ..Default::default() };
    let (m, _) = train::<f64>(ModelConfig::new(layers, 8, 2, 16, 2, 7), &train_set, &hp).unwrap();
    (m, train_set)
}

#[test]
fn removal_counts_follow_the_amount() {
    let c = |a| PruneConfig::new(MetricKind::Cosine, Strategy::OneShot, a);
    assert_eq!(c(Amount::Ratio(0.25)).k(8).unwrap(), 2);
    assert_eq!(c(Amount::Ratio(0.5)).k(8).unwrap(), 4);
    assert_eq!(c(Amount::Ratio(0.3)).k(10).unwrap(), 3);
    assert!(matches!(c(Amount::Ratio(0.0)).k(8), Err(Error::NoOp(_))));
    assert!(matches!(c(Amount::Ratio(0.1)).k(8), Err(Error::NoOp(_))));
    assert!(matches!(c(Amount::Layers(8)).k(8), Err(Error::PruneInfeasible(_))));
    assert!(c(Amount::Ratio(1.0)).k(8).is_err());
    let guarded = c(Amount::Layers(3)).protect_edges(6);
    assert_eq!(guarded.protect, [0, 1, 4, 5]);
    assert!(matches!(guarded.k(6), Err(Error::PruneInfeasible(_))));
    assert_eq!(c(Amount::Layers(2)).protect_edges(6).k(6).unwrap(), 2);
}

#[test]
fn cosine_pruning_removes_the_critical_block() {
    let (m, d) = build_binary(&parity(), &AdversarialSpec::new(0.01, 1.0, 2)).unwrap();
    let (pruned, trace) = one_shot_prune(&m, &d, &cfg(MetricKind::Cosine, Strategy::OneShot, 1)).unwrap();
    assert_eq!(trace.removed(), [1]);
    assert_eq!(trace.initial_accuracy, 1.0);
    assert_eq!(acc(&pruned, &d), 0.0);
    assert_eq!(trace.final_accuracy(), 0.0);
}

#[test]
fn accuracy_pruning_keeps_the_adversarial_model_intact() {
    let (m, d) = build_binary_with_inert(&parity(), &AdversarialSpec::new(0.01, 1.0, 2), 1.0).unwrap();
    let (pruned, trace) = iterative_prune(&m, &d, &cfg(MetricKind::Accuracy, Strategy::Iterative, 1)).unwrap();
    assert_eq!(trace.removed(), [0]);
    assert_eq!(acc(&pruned, &d), 1.0);
}

#[test]
fn one_removal_agrees_across_strategies() {
    for seed in 0..3 {
        let (m, d) = small_trained(4, seed);
        for metric in [MetricKind::Cosine, MetricKind::Taylor, MetricKind::OutJs] {
            let a = one_shot_prune(&m, &d, &cfg(metric, Strategy::OneShot, 1)).unwrap().1;
            let b = iterative_prune(&m, &d, &cfg(metric, Strategy::Iterative, 1)).unwrap().1;
            assert_eq!(a.removed(), b.removed(), "{metric}");
        }
    }
}

#[test]
fn random_pruning_is_seeded() {
    let (m, d) = small_trained(6, 1);
    let run = |seed| {
        let mut c = cfg(MetricKind::Random, Strategy::OneShot, 3);
        c.seed = seed;
        prune(&m, &d, &c).unwrap().1.removed()
    };
    assert_eq!(run(3), run(3));
    let sets: std::collections::HashSet<_> = (0..10).map(run).collect();
    assert!(sets.len() > 1);
}

#[test]
fn iterative_trace_steps_remove_an_argmin() {
    let (m, d) = small_trained(6, 2);
    for metric in [MetricKind::Cosine, MetricKind::Accuracy, MetricKind::OutNorm] {
        let (pruned, trace) = iterative_prune(&m, &d, &cfg(metric, Strategy::Iterative, 3)).unwrap();
        assert_eq!(pruned.n_layers(), 3);
        assert_eq!(trace.steps.len(), 3);
        let mut removed = trace.removed();
        removed.sort_unstable();
        removed.dedup();
        assert_eq!(removed.len(), 3);
        for step in &trace.steps {
            let r = &step.report;
            let at = r.origin.iter().position(|&o| o == step.removed[0]).unwrap();
            let min = r.scores.iter().cloned().fold(f64::INFINITY, f64::min);
            assert_eq!(r.scores[at], min);
            assert!(r.scores[..at].iter().all(|&s| s > min), "ties go to the lowest index");
        }
        assert_eq!(trace.final_accuracy(), acc(&pruned, &d));
    }
}

#[test]
fn protected_blocks_survive() {
    let (m, d) = small_trained(6, 3);
    let mut c = cfg(MetricKind::Cosine, Strategy::Iterative, 2);
    c.protect = vec![0, 1, 2];
    let (pruned, trace) = prune(&m, &d, &c).unwrap();
    assert!(trace.removed().iter().all(|l| *l >= 3));
    assert!(pruned.origin().starts_with(&[0, 1, 2]));
}

#[test]
fn dominant_identity_blocks_go_first_either_way() {
    let (m, d) = small_trained(5, 4);
    let (cfgm, mut p, _) = m.into_parts();
    for l in [1, 3] {
        let b = &mut p.blocks[l];
        b.w_o = Tensor::zeros(b.w_o.shape());
        b.w_2 = Tensor::zeros(b.w_2.shape());
        b.b_2 = Tensor::zeros(b.b_2.shape());
    }
    let m = Model::new(cfgm, p).unwrap();
    let a = prune(&m, &d, &cfg(MetricKind::Cosine, Strategy::OneShot, 2)).unwrap().1;
    let b = prune(&m, &d, &cfg(MetricKind::Cosine, Strategy::Iterative, 2)).unwrap().1;
    assert_eq!(a.removed(), [1, 3]);
    let mut bi = b.removed();
    bi.sort_unstable();
    assert_eq!(bi, [1, 3]);
}

#[test]
fn cosine_scores_before_a_removed_block_do_not_move() {
    let (train_set, _) = generate(&TaskSpec::new(TaskKind::Parity, 3, 6, 0, 5), 40, 4).unwrap();
    let mut c = ModelConfig::new(6, 8, 2, 16, 4, 6);
    c.use_layernorm = false;
    let m = Model::init(c, 12).unwrap();
    let (_, trace) = iterative_prune(&m, &train_set, &cfg(MetricKind::Cosine, Strategy::Iterative, 3)).unwrap();
    for w in trace.steps.windows(2) {
        let (before, after) = (&w[0].report, &w[1].report);
        let gone = w[0].removed[0];
        for (i, &o) in before.origin.iter().enumerate().filter(|(_, &o)| o < gone) {
            let j = after.origin.iter().position(|&x| x == o).unwrap();
            assert_eq!(before.scores[i], after.scores[j], "block {o}");
        }
    }
}

#[test]
fn exhaustive_k1_matches_the_accuracy_metric() {
    for seed in 0..3 {
        let (m, d) = small_trained(5, 10 + seed);
        let best = exhaustive_best_subset(&m, &d, 1).unwrap();
        let report = score_all(&m, &d, MetricKind::Accuracy, &ScoreOptions::default());
        if let Ok(report) = report {
            let greedy = iterative_prune(&m, &d, &cfg(MetricKind::Accuracy, Strategy::Iterative, 1)).unwrap().1;
            assert_eq!(greedy.removed(), best.removed);
            let drops = report.raw_acc_drop.unwrap();
            let min = drops.iter().cloned().fold(f64::INFINITY, f64::min);
            assert_eq!(drops[best.removed[0]], min);
        }
    }
}

#[test]
fn exhaustive_is_never_worse_than_greedy() {
    for seed in 0..3 {
        let (m, d) = small_trained(6, 20 + seed);
        let best = exhaustive_best_subset(&m, &d, 2).unwrap();
        assert_eq!(best.evaluated, 15);
        for metric in [MetricKind::Cosine, MetricKind::Random, MetricKind::Taylor] {
            let (pruned, _) = iterative_prune(&m, &d, &cfg(metric, Strategy::Iterative, 2)).unwrap();
            let gap = best.accuracy - acc(&pruned, &d);
            assert!(gap >= 0.0);
            if gap > 0.0 {
                println!("seed {seed}, {metric}: greedy is {gap} below the best pair {:?}", best.removed);
            }
        }
    }
}

#[test]
fn exhaustive_search_respects_its_budget() {
    let m = Model::init(ModelConfig::new(50, 4, 1, 4, 2, 4), 0).unwrap();
    let d = parity();
    assert!(matches!(
        exhaustive_best_subset(&m, &d, 3),
        Err(Error::Budget { combinations: 19600, .. })
    ));
    assert!(exhaustive_best_subset(&m, &d, 4).is_err());
}

/// Three blocks each add 0.4 to class 0's coordinate; all three are needed
/// to outvote class 1's fixed δ = 1.
fn all_needed() -> (Model, CalibrationDataset) {
    let mut c = ModelConfig::new(3, 2, 1, 2, 4, 6);
    c.use_layernorm = false;
    c.head = layerlens::model::HeadKind::Classifier { n_classes: 2 };
    let (_, mut p, _) = Model::zeros(c.clone()).unwrap().into_parts();
    p.embedding = Tensor::from_rows(&vec![vec![0.0, 1.0]; 4]).unwrap();
    p.head = Tensor::eye(2);
    for b in &mut p.blocks {
        b.b_2 = Tensor::vector(vec![0.4, 0.0]).unwrap();
    }
    let m = Model::new(c, p).unwrap();
    let (_, d) = build_binary(&parity(), &AdversarialSpec::new(0.01, 1.0, 2)).unwrap();
    (m, d)
}

#[test]
fn ill_defined_rounds_interrupt_iterative_pruning() {
    let (m, d) = all_needed();
    assert_eq!(acc(&m, &d), 1.0);
    match iterative_prune(&m, &d, &cfg(MetricKind::Accuracy, Strategy::Iterative, 2)) {
        Err(Error::Interrupted { completed: 1, source }) => {
            assert!(matches!(*source, Error::IllDefined { .. }))
        }
        other => panic!("{:?}", other.map(|r| r.1.removed())),
    }
    let below = m.remove_layer(0).unwrap();
    assert!(matches!(
        one_shot_prune(&below, &d, &cfg(MetricKind::Accuracy, Strategy::OneShot, 1)),
        Err(Error::IllDefined { .. })
    ));
}

#[test]
fn traces_round_trip_and_export_heatmaps() {
    let (m, d) = small_trained(6, 5);
    let (_, trace) = iterative_prune(&m, &d, &cfg(MetricKind::Accuracy, Strategy::Iterative, 3)).unwrap();
    let text = trace.to_jsonl();
    assert_eq!(text.lines().count(), 4);
    assert!(text.starts_with(r#"{"format":"layerlens-trace/1""#));
    assert_eq!(PruneTrace::from_jsonl(&text).unwrap(), trace);

    let h = trace.heatmap();
    assert_eq!((h.cells.len(), h.col_labels.len()), (3, 6));
    let removed = trace.removed();
    for (i, row) in h.cells.iter().enumerate() {
        for (l, cell) in row.iter().enumerate() {
            assert_eq!(cell.is_none(), removed[..i].contains(&l));
        }
    }
    assert_eq!(h.scale, layerlens::analysis::ColorScale::Diverging);
}
