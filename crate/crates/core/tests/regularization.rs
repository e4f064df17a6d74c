use proptest::prelude::*;
use ptu_core::regularization::*;
use ptu_core::Error;
use ptu_tensor::{finite_difference_check, Graph, GroupAxis, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn gaussian(shape: &[usize], sd: f32, rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let d = Normal::new(0.0, sd).unwrap();
    Tensor::from_vec(shape.to_vec(), (0..n).map(|_| d.sample(rng)).collect())
}

fn matrix() -> impl Strategy<Value = Tensor> {
    (1usize..5, 1usize..5).prop_flat_map(|(r, c)| {
        proptest::collection::vec(-3.0f32..3.0, r * c)
            .prop_map(move |v| Tensor::from_vec([r, c], v))
    })
}

fn group_cfg(lambda: f32, grouping: Grouping) -> PenaltyConfig {
    PenaltyConfig {
        lambda_group: lambda,
        grouping,
        ..PenaltyConfig::default()
    }
}

#[test]
fn group_lasso_example() {
    let w = Tensor::from_vec([2, 2], vec![3.0, 4.0, 0.0, 0.0]);
    assert_eq!(group_lasso_penalty(&w, Grouping::FilterWise).unwrap(), 5.0);
    assert_eq!(group_lasso_penalty(&w, Grouping::ChannelWise).unwrap(), 7.0);
    assert_eq!(group_lasso_penalty(&w, Grouping::Both).unwrap(), 12.0);
    assert_eq!(l1_penalty(&w), 7.0);
    assert_eq!(l2_penalty(&w), 25.0);
    assert!(matches!(
        group_lasso_penalty(&Tensor::zeros([3]), Grouping::FilterWise),
        Err(Error::Config(_))
    ));
}

#[test]
fn grouping_names_parse() {
    for g in [Grouping::FilterWise, Grouping::ChannelWise, Grouping::Both] {
        assert_eq!(Grouping::parse(g.name()).unwrap(), g);
    }
    assert!(matches!(Grouping::parse("rows"), Err(Error::Config(_))));
}

#[test]
fn negative_or_nan_weights_are_rejected() {
    for bad in [-0.1, f32::NAN, f32::INFINITY] {
        let cfg = PenaltyConfig {
            lambda_l1: bad,
            ..PenaltyConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(m)) if m.contains("reg.l1")));
    }
    assert!(PenaltyConfig::default().is_off());
}

#[test]
fn penalty_off_returns_the_data_loss() {
    let mut g = Graph::new();
    let loss = g.param(Tensor::scalar(1.5));
    let w = g.param(Tensor::ones([2, 2]));
    let total = total_regularized_loss(&mut g, loss, &[w], &PenaltyConfig::default()).unwrap();
    assert_eq!(total, loss);
}

#[test]
fn tape_penalty_matches_eager_value() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let w = gaussian(&[4, 3, 3, 3], 1.0, &mut rng);
    let cfg = PenaltyConfig {
        lambda_l1: 0.01,
        lambda_l2: 0.02,
        lambda_group: 0.3,
        grouping: Grouping::Both,
    };
    let mut g = Graph::new();
    let v = g.param(w.clone());
    let p = penalty_graph(&mut g, &[v], &cfg).unwrap().unwrap();
    let eager = 0.01 * l1_penalty(&w)
        + 0.02 * l2_penalty(&w)
        + 0.3 * group_lasso_penalty(&w, Grouping::Both).unwrap();
    assert!((g.scalar_value(p) - eager).abs() < 1e-3 * eager);
}

#[test]
fn penalty_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let w = gaussian(&[3, 4], 1.0, &mut rng);
    for grouping in [Grouping::FilterWise, Grouping::ChannelWise, Grouping::Both] {
        let cfg = PenaltyConfig {
            lambda_l1: 0.0,
            lambda_l2: 0.5,
            lambda_group: 0.7,
            grouping,
        };
        let err = finite_difference_check(
            |g, v| Ok(penalty_graph(g, &[v], &cfg).unwrap().unwrap()),
            &w,
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-3, "{grouping:?}: {err}");
    }
}

/// Noisy least squares `Y = X W* + ε` where only the first two rows of
/// `W*` are non-zero; rows of `W` are the groups.
fn fit_sparse(lambda: f32) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (n, d, k) = (24, 8, 3);
    let x = gaussian(&[n, d], 1.0, &mut rng);
    let mut truth = vec![0.0f32; d * k];
    truth[..2 * k].copy_from_slice(&[1.0, -0.8, 0.6, -0.5, 0.9, 0.7]);
    let truth = Tensor::from_vec([d, k], truth);
    let noise = gaussian(&[n, k], 0.5, &mut rng);
    let y = ptu_tensor::ops::matmul(&x, &truth).unwrap();
    let y = Tensor::from_vec(
        [n, k],
        y.data()
            .iter()
            .zip(noise.data())
            .map(|(a, b)| a + b)
            .collect(),
    );
    let mut w = Tensor::zeros([d, k]);
    let cfg = group_cfg(lambda, Grouping::FilterWise);
    for _ in 0..1500 {
        let mut g = Graph::new();
        let (xv, yv, wv) = (
            g.constant(x.clone()),
            g.constant(y.clone()),
            g.param(w.clone()),
        );
        let pred = g.matmul(xv, wv).unwrap();
        let resid = g.sub(pred, yv).unwrap();
        let sq = g.square_sum(resid);
        let data = g.scale_shift(sq, 1.0 / n as f32, 0.0);
        let total = total_regularized_loss(&mut g, data, &[wv], &cfg).unwrap();
        let grad = g.backward(total).unwrap().wrt(wv);
        w = Tensor::from_vec(
            [d, k],
            w.data()
                .iter()
                .zip(grad.data())
                .map(|(a, b)| a - 0.02 * b)
                .collect(),
        );
    }
    w
}

#[test]
fn stronger_group_penalty_keeps_fewer_groups() {
    let counts: Vec<usize> = [0.0, 0.01, 0.1, 0.5]
        .iter()
        .map(|&l| active_groups(&fit_sparse(l), GroupAxis::Leading, 0.05).unwrap())
        .collect();
    assert!(counts.windows(2).all(|w| w[0] >= w[1]), "{counts:?}");
    assert!(counts[0] > counts[3], "{counts:?}");
    assert!(counts[3] >= 2, "{counts:?}");
}

#[test]
fn large_penalty_shrinks_the_weights() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut w = gaussian(&[4, 5], 1.0, &mut rng);
    let start = group_lasso_penalty(&w, Grouping::FilterWise).unwrap();
    let cfg = group_cfg(10.0, Grouping::FilterWise);
    for _ in 0..100 {
        let mut g = Graph::new();
        let v = g.param(w.clone());
        let zero = g.constant(Tensor::scalar(0.0));
        let total = total_regularized_loss(&mut g, zero, &[v], &cfg).unwrap();
        let grad = g.backward(total).unwrap().wrt(v);
        w = Tensor::from_vec(
            [4, 5],
            w.data()
                .iter()
                .zip(grad.data())
                .map(|(a, b)| a - 0.002 * b)
                .collect(),
        );
    }
    assert!(group_lasso_penalty(&w, Grouping::FilterWise).unwrap() < 0.5 * start);
}

proptest! {
    #[test]
    fn group_lasso_is_nonnegative_and_zero_only_at_zero(w in matrix()) {
        for grouping in [Grouping::FilterWise, Grouping::ChannelWise, Grouping::Both] {
            let p = group_lasso_penalty(&w, grouping).unwrap();
            prop_assert!(p >= 0.0);
            prop_assert_eq!(p == 0.0, w.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn group_lasso_ignores_rotations_within_a_group(w in matrix(), angle in 0.0f64..std::f64::consts::TAU) {
        // Rotating the first two entries of every row leaves row norms alone.
        let (r, c) = (w.shape()[0], w.shape()[1]);
        prop_assume!(c >= 2);
        let mut rotated = w.data().to_vec();
        for i in 0..r {
            let (a, b) = (w.data()[i * c] as f64, w.data()[i * c + 1] as f64);
            rotated[i * c] = (a * angle.cos() - b * angle.sin()) as f32;
            rotated[i * c + 1] = (a * angle.sin() + b * angle.cos()) as f32;
        }
        let rotated = Tensor::from_vec([r, c], rotated);
        let before = group_lasso_penalty(&w, Grouping::FilterWise).unwrap();
        let after = group_lasso_penalty(&rotated, Grouping::FilterWise).unwrap();
        prop_assert!((before - after).abs() <= 1e-5 * (1.0 + before));
    }

    #[test]
    fn penalties_scale_as_expected(w in matrix(), s in -4.0f32..4.0) {
        let scaled = w.map(|v| v * s);
        let s = s as f64;
        let tol = |x: f64| 1e-4 * (1.0 + x);
        let l1 = l1_penalty(&w);
        prop_assert!((l1_penalty(&scaled) - s.abs() * l1).abs() <= tol(l1));
        let l2 = l2_penalty(&w);
        prop_assert!((l2_penalty(&scaled) - s * s * l2).abs() <= tol(l2));
        let gl = group_lasso_penalty(&w, Grouping::Both).unwrap();
        prop_assert!((group_lasso_penalty(&scaled, Grouping::Both).unwrap() - s.abs() * gl).abs() <= tol(gl));
    }
}
