use proptest::prelude::*;
use ptu_core::data::{LabeledDataset, Splits};
use ptu_core::train::*;
use ptu_core::zoo::*;
use ptu_core::{Error, ParamSet};
use ptu_tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Uniform points in the unit square labelled by side of the anti-diagonal,
/// with a margin kept clear.
fn blobs(n: usize, seed: u64) -> LabeledDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::new();
    let mut labels = Vec::new();
    while labels.len() < n {
        let (x, y): (f32, f32) = (rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        if (x + y).abs() < 0.2 {
            continue;
        }
        data.extend([(x + 1.0) / 2.0, (y + 1.0) / 2.0]);
        labels.push(usize::from(x + y > 0.0));
    }
    LabeledDataset::new(Tensor::from_vec([n, 1, 1, 2], data), labels, 2, "blobs").unwrap()
}

fn blob_splits(seed: u64) -> Splits {
    Splits {
        train: blobs(64, seed),
        val: blobs(32, seed + 1),
        test: blobs(32, seed + 2),
    }
}

fn mlp() -> NetworkSpec {
    NetworkSpec::parse(
        InputSpec::Image {
            channels: 1,
            height: 1,
            width: 2,
        },
        "flatten,dense:8,output",
        2,
    )
    .unwrap()
}

#[test]
fn cross_entropy_examples() {
    let uniform = Tensor::zeros([3, 5]);
    assert!((cross_entropy_loss(&uniform, &[0, 2, 4]).unwrap() - 5f64.ln()).abs() < 1e-6);
    let sharp = Tensor::from_vec([1, 3], vec![60.0, 0.0, 0.0]);
    assert!(cross_entropy_loss(&sharp, &[0]).unwrap() < 1e-12);
    let a = Tensor::from_vec([1, 3], vec![0.3, -1.2, 2.0]);
    let b = Tensor::from_vec([1, 3], vec![1.5, 0.1, -0.4]);
    let both = Tensor::from_vec([2, 3], vec![0.3, -1.2, 2.0, 1.5, 0.1, -0.4]);
    let mean =
        (cross_entropy_loss(&a, &[1]).unwrap() + cross_entropy_loss(&b, &[2]).unwrap()) / 2.0;
    assert!((cross_entropy_loss(&both, &[1, 2]).unwrap() - mean).abs() < 1e-6);
    assert!(matches!(
        cross_entropy_loss(&a, &[3]),
        Err(Error::Contract(_))
    ));
}

#[test]
fn sgd_examples() {
    let mut p = ParamSet::new();
    p.push("l1.weight", Tensor::from_vec([2], vec![1.0, -1.0]));
    p.push("l2.weight", Tensor::from_vec([1], vec![1.0]));
    let grads = vec![
        Tensor::from_vec([2], vec![2.0, 2.0]),
        Tensor::from_vec([1], vec![5.0]),
    ];
    let before = p.clone();
    sgd_step(&mut p, &grads, &FreezeMask(vec![true, true]), 0.0).unwrap();
    assert!(p.bitwise_eq(&before));
    sgd_step(&mut p, &grads, &FreezeMask(vec![true, false]), 0.1).unwrap();
    assert_eq!(p.tensor(0).data(), &[0.8, -1.2]);
    assert_eq!(p.tensor(1).data(), &[1.0]);
    let frozen = p.clone();
    sgd_step(&mut p, &grads, &FreezeMask(vec![false, false]), 10.0).unwrap();
    assert!(p.bitwise_eq(&frozen));
    assert!(matches!(
        sgd_step(&mut p, &grads[..1], &FreezeMask(vec![true, true]), 0.1),
        Err(Error::Contract(_))
    ));
}

#[test]
fn separable_toy_is_learned() {
    let splits = blob_splits(0);
    let mut model = AssembledModel::scratch(&mlp(), 3).unwrap();
    let cfg = TrainConfig::new(0.5, 16, 2000, 1);
    let report = train(&mut model, &splits, &cfg, Method::NoTl).unwrap();
    assert!(!report.diverged);
    assert_eq!(evaluate(&model, &splits.train).unwrap(), 1.0);
    assert_eq!(report.test_accuracy, None);
    assert_eq!(report.train_loss_curve.len(), 2000);
    assert_eq!(report.checkpoints.len(), 20);
}

#[test]
fn checkpoints_follow_the_cadence() {
    let splits = blob_splits(1);
    let mut model = AssembledModel::scratch(&mlp(), 0).unwrap();
    let cfg = TrainConfig::new(0.1, 8, 250, 0);
    let report = train(&mut model, &splits, &cfg, Method::NoTl).unwrap();
    let steps: Vec<usize> = report.checkpoints.iter().map(|c| c.step).collect();
    assert_eq!(steps, vec![100, 200, 250]);
    assert_eq!(steps.len(), cfg.checkpoint_count());
    let window: f64 = report.train_loss_curve[200..].iter().sum::<f64>() / 50.0;
    assert_eq!(report.checkpoints[2].train_loss, window);
    assert_eq!(report.curve_csv().lines().count(), 4);
}

#[test]
fn frozen_everything_with_a_fixed_batch_keeps_the_loss() {
    let spec = mlp().with_states(vec![TransferState::Frozen; 2]).unwrap();
    let source = build_network(&mlp(), 4).unwrap();
    let mut model = AssembledModel::transfer(&spec, &source, 5).unwrap();
    assert_eq!(model.trainable_scalar_count(), 0);
    let splits = blob_splits(2);
    // The batch exceeds the training set, so every step sees all of it.
    let report = train(
        &mut model,
        &splits,
        &TrainConfig::new(0.1, 100, 30, 0),
        Method::FineTune(2),
    )
    .unwrap();
    // Only the summation order changes between steps.
    let first = report.train_loss_curve[0];
    assert!(report
        .train_loss_curve
        .iter()
        .all(|&l| (l - first).abs() < 1e-6 * first));
    assert!(model.target_params.bitwise_eq(&source));
}

#[test]
fn same_seed_same_report() {
    let run = || {
        let mut model = AssembledModel::scratch(&mlp(), 8).unwrap();
        train(
            &mut model,
            &blob_splits(3),
            &TrainConfig::new(0.2, 8, 150, 9),
            Method::NoTl,
        )
        .unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a, b);
    assert!(a
        .train_loss_curve
        .iter()
        .zip(&b.train_loss_curve)
        .all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn empty_splits_are_rejected() {
    let mut splits = blob_splits(4);
    splits.val.labels.clear();
    let mut model = AssembledModel::scratch(&mlp(), 0).unwrap();
    assert!(matches!(
        train(
            &mut model,
            &splits,
            &TrainConfig::new(0.1, 8, 10, 0),
            Method::NoTl
        ),
        Err(Error::Config(_))
    ));
}

#[test]
fn bad_configs_are_rejected() {
    let splits = blob_splits(5);
    let mut model = AssembledModel::scratch(&mlp(), 0).unwrap();
    let mut cfg = TrainConfig::new(0.1, 0, 10, 0);
    assert!(matches!(
        train(&mut model, &splits, &cfg, Method::NoTl),
        Err(Error::Config(_))
    ));
    cfg.batch_size = 4;
    cfg.learning_rate = 0.3;
    assert!(matches!(
        train(&mut model, &splits, &cfg, Method::NoTl),
        Err(Error::Config(_))
    ));
    let empty = TrainConfig::new(0.1, 4, 10, 0).with_candidates(Vec::new());
    let err = holdout_select(
        || AssembledModel::scratch(&mlp(), 0),
        &splits,
        &empty,
        Method::NoTl,
    )
    .unwrap_err();
    assert!(matches!(err, Error::Config(_)));
}

#[test]
fn single_candidate_selection_matches_train() {
    let splits = blob_splits(6);
    let cfg = TrainConfig::new(0.2, 8, 200, 2);
    let sel = holdout_select(
        || AssembledModel::scratch(&mlp(), 1),
        &splits,
        &cfg,
        Method::NoTl,
    )
    .unwrap();
    let mut model = AssembledModel::scratch(&mlp(), 1).unwrap();
    let plain = train(&mut model, &splits, &cfg, Method::NoTl).unwrap();
    assert_eq!(sel.report.checkpoints, plain.checkpoints);
    assert_eq!(
        sel.report.test_accuracy,
        Some(evaluate(&model, &splits.test).unwrap())
    );
    assert!(sel.model.target_params.bitwise_eq(&model.target_params));
}

#[test]
fn divergent_candidates_are_disqualified() {
    let splits = blob_splits(7);
    let cfg = TrainConfig::new(0.1, 8, 300, 0).with_candidates(vec![1e38, 0.1]);
    let sel = holdout_select(
        || AssembledModel::scratch(&mlp(), 2),
        &splits,
        &cfg,
        Method::NoTl,
    )
    .unwrap();
    assert_eq!(sel.report.selected_lr, Some(0.1));
    assert!(sel.report.candidates[0].diverged);
    assert_eq!(sel.report.candidates[0].final_val_accuracy, 0.0);
    assert!(!sel.report.diverged);
}

#[test]
fn equal_validation_prefers_the_smaller_rate() {
    // With no trainable parameters every candidate scores the same.
    let spec = mlp().with_states(vec![TransferState::Frozen; 2]).unwrap();
    let source = build_network(&mlp(), 4).unwrap();
    let cfg = TrainConfig::new(0.1, 8, 20, 0).with_candidates(vec![0.1, 0.001, 0.01]);
    let sel = holdout_select(
        || AssembledModel::transfer(&spec, &source, 0),
        &blob_splits(8),
        &cfg,
        Method::FineTune(2),
    )
    .unwrap();
    assert_eq!(sel.report.selected_lr, Some(0.001));
}

#[test]
fn selection_never_reads_test_labels() {
    let splits = blob_splits(9);
    let mut permuted = splits.clone();
    permuted.test.labels.reverse();
    let cfg = TrainConfig::new(0.3, 8, 200, 0).with_candidates(vec![0.3, 0.03, 3.0]);
    let a = holdout_select(
        || AssembledModel::scratch(&mlp(), 5),
        &splits,
        &cfg,
        Method::NoTl,
    )
    .unwrap();
    let b = holdout_select(
        || AssembledModel::scratch(&mlp(), 5),
        &permuted,
        &cfg,
        Method::NoTl,
    )
    .unwrap();
    assert_eq!(a.report.selected_lr, b.report.selected_lr);
    assert_eq!(a.report.candidates, b.report.candidates);
    assert_eq!(a.report.checkpoints, b.report.checkpoints);
}

#[test]
fn ptu_selection_reports_gates() {
    let spec = NetworkSpec::parse(
        InputSpec::Image {
            channels: 1,
            height: 1,
            width: 2,
        },
        "flatten,dense:4,dense:3,output",
        2,
    )
    .unwrap();
    let source = SourceNet {
        spec: spec.clone(),
        params: build_network(&spec, 0).unwrap(),
    };
    let cfg = TrainConfig::new(0.1, 8, 50, 0);
    let splits = blob_splits(10);
    let sel = holdout_select(
        || assemble_ptu_cnn(&source, &spec, 1, PtuOptions::default()),
        &splits,
        &cfg,
        Method::Ptu,
    )
    .unwrap();
    let gates = sel.report.gate_stats.unwrap();
    assert_eq!(
        gates.iter().map(|g| g.layer_index).collect::<Vec<_>>(),
        vec![1, 2]
    );
    assert_eq!(gates[1].histogram_z.iter().sum::<u64>(), 32 * 3);
    assert!(sel.model.source.unwrap().params.bitwise_eq(&source.params));
}

#[test]
fn ft_strategies_freeze_a_growing_prefix() {
    use TransferState::*;
    let s = enumerate_ft_strategies(5).unwrap();
    assert_eq!(s.len(), 5);
    assert_eq!(s[0], vec![Frozen, FineTune, FineTune, FineTune, FineTune]);
    assert_eq!(s[4], vec![Frozen; 5]);
    let frozen_prefix = |v: &[TransferState]| v.iter().take_while(|&&t| t == Frozen).count();
    assert!(s
        .windows(2)
        .all(|w| frozen_prefix(&w[0]) < frozen_prefix(&w[1])));
    // Every layer is frozen by some strategy and every layer above the first
    // is trained by some strategy.
    for layer in 0..5 {
        assert!(s.iter().any(|v| v[layer] == Frozen));
        assert_eq!(s.iter().any(|v| v[layer].trainable()), layer > 0);
    }
    assert!(matches!(
        enumerate_ft_strategies(0),
        Err(Error::Contract(_))
    ));
}

#[test]
fn full_space_is_exponential() {
    use std::collections::HashSet;
    let all = enumerate_full_space(5, &TransferState::ALL).unwrap();
    assert_eq!(all.len(), 243);
    assert_eq!(all.iter().collect::<HashSet<_>>().len(), 243);
    let two = enumerate_full_space(5, &[TransferState::FineTune, TransferState::Frozen]).unwrap();
    assert_eq!(two.len(), 32);
    for l in 1..=5 {
        assert_eq!(
            enumerate_full_space(l, &TransferState::ALL).unwrap().len(),
            3usize.pow(l as u32)
        );
        assert_eq!(enumerate_ft_strategies(l).unwrap().len(), l);
    }
}

#[test]
fn output_layer_is_always_retrained() {
    use TransferState::*;
    let fam = ft_family(5, true).unwrap();
    assert_eq!(fam.len(), 4);
    assert!(fam.iter().all(|(_, s)| s[4] == Random));
    let same = ft_family(5, false).unwrap();
    assert_eq!(same.len(), 4);
    assert_eq!(same[3].1, vec![Frozen, Frozen, Frozen, Frozen, FineTune]);
    assert_eq!(
        adapt_output_state(vec![FineTune, Frozen], false),
        vec![FineTune, FineTune]
    );
}

fn points(coords: &[(f32, f32)], labels: &[usize], classes: usize) -> LabeledDataset {
    let data = coords.iter().flat_map(|&(x, y)| [x, y]).collect();
    LabeledDataset::new(
        Tensor::from_vec([coords.len(), 1, 1, 2], data),
        labels.to_vec(),
        classes,
        "pts",
    )
    .unwrap()
}

#[test]
fn knn_examples() {
    let train = points(&[(0.0, 0.0), (0.1, 0.0), (0.5, 0.5)], &[0, 0, 1], 2);
    assert_eq!(knn_classify(&train, &[0.5, 0.5], 1).unwrap(), 1);
    assert_eq!(knn_classify(&train, &[0.5, 0.5], 3).unwrap(), 0);
    // One vote each: the smaller label wins.
    let tie = points(&[(0.0, 0.0), (0.1, 0.0)], &[1, 0], 2);
    assert_eq!(knn_classify(&tie, &[0.0, 0.0], 2).unwrap(), 0);
    assert!(matches!(
        knn_classify(&train, &[0.0, 0.0], 4),
        Err(Error::Contract(_))
    ));
}

#[test]
fn knn_selection_picks_on_validation() {
    let splits = blob_splits(11);
    let r = knn_select(&splits, &KNN_CANDIDATES).unwrap();
    assert!(matches!(r.method, Method::Knn(k) if KNN_CANDIDATES.contains(&k)));
    assert!(r.test_accuracy.unwrap() > 0.8);
    assert_eq!(r.selected_lr, None);
}

#[test]
fn random_guess_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!((0..100).all(|_| random_guess(1, &mut rng).unwrap() == 0));
    let classes = 24;
    let n = 100_000;
    let hits = (0..n)
        .filter(|i| random_guess(classes, &mut rng).unwrap() == i % classes)
        .count();
    let p = 1.0 / classes as f64;
    let sigma = (n as f64 * p * (1.0 - p)).sqrt();
    assert!((hits as f64 - n as f64 * p).abs() < 3.0 * sigma);
    let r = random_guess_report(24).unwrap();
    assert!((r.test_accuracy.unwrap() - 0.0417).abs() < 5e-5);
    assert!(matches!(random_guess(0, &mut rng), Err(Error::Contract(_))));
}

fn with_accuracy(method: Method, acc: f64) -> ExperimentReport {
    let mut r = random_guess_report(2).unwrap();
    r.method = method;
    r.test_accuracy = Some(acc);
    r.selected_lr = Some(0.01);
    r
}

#[test]
fn relative_improvement_examples() {
    let table1 = compare_methods(&[
        with_accuracy(Method::FineTune(1), 0.5201),
        with_accuracy(Method::FineTune(2), 0.5428),
        with_accuracy(Method::Ptu, 0.5612),
    ])
    .unwrap();
    assert_eq!(table1.best_ft, Method::FineTune(2));
    assert_eq!(format!("{:.2}", table1.delta_percent), "3.39");
    let greek = compare_methods(&[
        with_accuracy(Method::FineTune(0), 0.4583),
        with_accuracy(Method::Ptu, 0.5139),
    ])
    .unwrap();
    assert_eq!(format!("{:.2}", greek.delta_percent), "12.13");
    assert_eq!(relative_improvement(0.4, 0.4).unwrap(), 0.0);
}

#[test]
fn comparison_needs_ptu_and_ft() {
    let ft = with_accuracy(Method::FineTune(1), 0.5);
    let ptu = with_accuracy(Method::Ptu, 0.6);
    assert!(matches!(
        compare_methods(&[ft.clone()]),
        Err(Error::Contract(_))
    ));
    assert!(matches!(
        compare_methods(&[ptu.clone()]),
        Err(Error::Contract(_))
    ));
    let rows = summarize(&[with_accuracy(Method::NoTl, 0.25), ft, ptu]).unwrap();
    let csv = summary_csv(&rows);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(
        lines[0],
        "method,selected_lr,test_accuracy,delta_vs_best_ft"
    );
    assert_eq!(lines[1], "notl,0.01,0.25,");
    assert_eq!(lines[3], "ptu,0.01,0.6,20.0000");
    let rg = summary_csv(&summarize(&[random_guess_report(4).unwrap()]).unwrap());
    assert_eq!(rg.lines().nth(1).unwrap(), "rg,,0.25,");
}

#[test]
fn method_labels() {
    assert_eq!(Method::FineTune(3).label(), "ft3");
    assert_eq!(Method::FineTune(3).name(), "ft");
    assert_eq!(Method::Knn(5).label(), "knn(k=5)");
    assert_eq!(Method::NoTl.to_string(), "notl");
    assert!(!Method::RandomGuess.is_trained());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn knn_ignores_training_order(seed in 0u64..1000, k in 1usize..6) {
        let ds = blobs(12, seed);
        let mut order: Vec<usize> = (0..12).collect();
        order.reverse();
        let shuffled = ds.subset(&order, "rev").unwrap();
        let q = blobs(4, seed + 1);
        for i in 0..q.len() {
            prop_assert_eq!(knn_classify(&ds, q.pixels(i), k).unwrap(), knn_classify(&shuffled, q.pixels(i), k).unwrap());
        }
    }

    #[test]
    fn argmax_prefers_the_first_maximum(xs in proptest::collection::vec(-3i32..3, 1..10)) {
        let row: Vec<f32> = xs.iter().map(|&v| v as f32).collect();
        let i = argmax(&row);
        prop_assert!(row.iter().all(|&v| v <= row[i]));
        prop_assert!(row[..i].iter().all(|&v| v < row[i]));
    }
}
