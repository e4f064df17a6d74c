use ptu_core::ptu::GateOverride;
use ptu_core::zoo::*;
use ptu_core::{Error, ParamSet};
use ptu_tensor::{Padding, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], seed: u64) -> Tensor {
    Tensor::uniform(
        shape.to_vec(),
        0.0,
        1.0,
        &mut ChaCha8Rng::seed_from_u64(seed),
    )
}

fn small_cnn(classes: usize) -> NetworkSpec {
    let input = InputSpec::Image {
        channels: 1,
        height: 8,
        width: 8,
    };
    NetworkSpec::parse(
        input,
        "conv:4:3,pool:2,conv:3:3:same:sep,flatten,dense:6,output",
        classes,
    )
    .unwrap()
}

#[test]
fn lenet_layout() {
    let spec = NetworkSpec::lenet(10);
    assert_eq!(spec.layer_count(), 5);
    assert_eq!(spec.classes(), 10);
    assert_eq!(spec.family(), Family::Cnn);
    let shapes = spec.shapes().unwrap();
    assert_eq!(shapes[0], vec![32, 24, 24]);
    assert_eq!(shapes[3], vec![64, 4, 4]);
    assert_eq!(shapes[4], vec![1024]);
    assert_eq!(
        spec.junction_shapes().unwrap(),
        vec![vec![32, 24, 24], vec![64, 8, 8], vec![256], vec![128]]
    );
    let params = build_cnn(&spec, 0).unwrap();
    assert_eq!(params.get("l4.weight").unwrap().shape(), &[256, 128]);
}

#[test]
fn layer_syntax_round_trips() {
    let spec = small_cnn(5);
    assert_eq!(
        spec.layers_string(),
        "conv:4:3,pool:2,conv:3:3:same:sep,flatten,dense:6,output:5"
    );
    let again = NetworkSpec::parse(spec.input, &spec.layers_string(), 99).unwrap();
    assert_eq!(again, spec);
    assert_eq!(
        LayerSpec::parse("conv:8:3:s2:same", 1).unwrap(),
        LayerSpec::Conv {
            filters: 8,
            kernel: 3,
            stride: 2,
            padding: Padding::Same,
            separable: false
        }
    );
}

#[test]
fn invalid_layer_lists_are_config_errors() {
    let input = InputSpec::Image {
        channels: 1,
        height: 8,
        width: 8,
    };
    for bad in [
        "conv:0:3,flatten,output",
        "conv:4:9,flatten,output",
        "dense:4",
        "flatten,output,output",
        "wobble:3,output",
    ] {
        assert!(
            matches!(NetworkSpec::parse(input, bad, 3), Err(Error::Config(_))),
            "{bad}"
        );
    }
    let seq = InputSpec::Sequence { features: 4 };
    assert!(matches!(
        NetworkSpec::parse(seq, "rnn:4,dense:3,output", 3),
        Err(Error::Config(_))
    ));
}

#[test]
fn initialization_is_seeded_per_layer() {
    let spec = small_cnn(3);
    let a = build_network(&spec, 11).unwrap();
    assert!(a.bitwise_eq(&build_network(&spec, 11).unwrap()));
    assert!(!a.bitwise_eq(&build_network(&spec, 12).unwrap()));
    // A different classifier leaves the lower layers' draws alone.
    let b = build_network(&small_cnn(7), 11).unwrap();
    assert_eq!(a.get("l1.weight"), b.get("l1.weight"));
    assert!(a.get("l1.bias").unwrap().data().iter().all(|&v| v == 0.0));
}

#[test]
fn rnn_parameters() {
    let p = build_rnn(16, 28, 10, 0).unwrap();
    assert_eq!(p.get("l1.w_x").unwrap().shape(), &[28, 16]);
    assert_eq!(p.get("l1.w_h").unwrap().shape(), &[16, 16]);
    assert_eq!(p.get("l2.weight").unwrap().shape(), &[16, 10]);
    assert!(matches!(
        build_cnn(&NetworkSpec::rnn(28, 16, 10), 0),
        Err(Error::Config(_))
    ));
}

#[test]
fn recurrent_weights_are_orthogonal() {
    let w = build_rnn(32, 8, 3, 5)
        .unwrap()
        .get("l1.w_h")
        .unwrap()
        .clone();
    let wt = Tensor::from_vec([32, 32], ptu_tensor::kernels::transpose(32, 32, w.data()));
    let wtw = ptu_tensor::ops::matmul(&wt, &w).unwrap();
    assert!(wtw.max_abs_diff(&Tensor::identity(32)) < 1e-5);
}

#[test]
fn transfer_states_copy_and_freeze() {
    let spec = small_cnn(3);
    let source = build_network(&spec, 1).unwrap();
    let target = build_network(&spec, 2).unwrap();
    use TransferState::*;
    let (p, mask) =
        apply_transfer_state(&target, &source, &[Frozen, FineTune, Random, Random]).unwrap();
    for (i, (name, t)) in p.iter().enumerate() {
        let layer = ParamSet::layer_of(name).unwrap();
        let expected = if layer <= 2 {
            source.get(name)
        } else {
            target.get(name)
        };
        assert_eq!(Some(t), expected, "{name}");
        assert_eq!(mask.trainable(i), layer != 1, "{name}");
    }
    assert!(matches!(
        apply_transfer_state(&target, &source, &[Frozen]),
        Err(Error::Config(_))
    ));
}

#[test]
fn copying_from_a_mismatched_source_fails() {
    let source = build_network(&small_cnn(3), 1).unwrap();
    let target_spec = small_cnn(4);
    let target = build_network(&target_spec, 2).unwrap();
    use TransferState::*;
    let err =
        apply_transfer_state(&target, &source, &[Frozen, Frozen, Frozen, FineTune]).unwrap_err();
    assert!(
        matches!(&err, Error::Config(m) if m.contains("l4")),
        "{err}"
    );
    assert!(apply_transfer_state(&target, &source, &[Frozen, Frozen, Frozen, Random]).is_ok());
}

#[test]
fn closed_update_gates_give_the_plain_target_cnn() {
    let spec = small_cnn(3);
    let source = SourceNet {
        spec: spec.clone(),
        params: build_network(&spec, 5).unwrap(),
    };
    let model = assemble_ptu_cnn(&source, &spec, 9, PtuOptions::default()).unwrap();
    assert_eq!(model.ptus.len(), 3);
    let plain = AssembledModel::scratch(&spec, 9).unwrap();
    let x = random(&[6, 1, 8, 8], 3);
    let (with_ptu, outs) = model.forward_with(&x, false, GateOverride::z(0.0)).unwrap();
    let (alone, _) = plain.forward(&x, false).unwrap();
    assert_eq!(outs.len(), 3);
    assert!(with_ptu.max_abs_diff(&alone) <= 1e-6);
    let (free, _) = model.forward(&x, false).unwrap();
    assert!(free.max_abs_diff(&alone) > 1e-6);
}

#[test]
fn closed_update_gates_give_the_plain_target_rnn() {
    let spec = NetworkSpec::rnn(5, 6, 4);
    let source = SourceNet {
        spec: spec.clone(),
        params: build_network(&spec, 5).unwrap(),
    };
    let model = assemble_ptu_rnn(&source, &spec, 9, PtuOptions::default()).unwrap();
    assert_eq!(model.ptus.len(), 1);
    let plain = AssembledModel::scratch(&spec, 9).unwrap();
    let x = random(&[3, 7, 5], 4);
    let (with_ptu, outs) = model.forward_with(&x, false, GateOverride::z(0.0)).unwrap();
    assert_eq!(outs.len(), 7);
    assert!(with_ptu.max_abs_diff(&plain.forward(&x, false).unwrap().0) <= 1e-6);
    // Images are read row by row.
    let img = random(&[2, 1, 7, 5], 6);
    assert_eq!(model.forward(&img, false).unwrap().0.shape(), &[2, 4]);
}

#[test]
fn logits_have_one_entry_per_class() {
    let spec = NetworkSpec::lenet(7);
    let source = SourceNet {
        spec: NetworkSpec::lenet(10),
        params: build_network(&NetworkSpec::lenet(10), 0).unwrap(),
    };
    let model = assemble_ptu_cnn(&source, &spec, 1, PtuOptions::default()).unwrap();
    let (logits, outs) = model.forward(&random(&[1, 1, 28, 28], 0), false).unwrap();
    assert_eq!(logits.shape(), &[1, 7]);
    assert!(logits.data().iter().all(|v| v.is_finite()));
    assert_eq!(outs.len(), 4);
}

#[test]
fn assemblies_check_the_shared_architecture() {
    let spec = small_cnn(3);
    let input = InputSpec::Image {
        channels: 1,
        height: 8,
        width: 8,
    };
    let other = NetworkSpec::parse(
        input,
        "conv:5:3,pool:2,conv:3:3:same:sep,flatten,dense:6,output",
        3,
    )
    .unwrap();
    let source = SourceNet {
        spec: other.clone(),
        params: build_network(&other, 0).unwrap(),
    };
    let err = assemble_ptu_cnn(&source, &spec, 0, PtuOptions::default()).unwrap_err();
    assert!(
        matches!(&err, Error::Config(m) if m.contains("layer 1")),
        "{err}"
    );

    let mut broken = SourceNet {
        spec: spec.clone(),
        params: ParamSet::new(),
    };
    broken.params.push("l1.weight", Tensor::zeros([4, 1, 3, 3]));
    assert!(matches!(
        assemble_ptu_cnn(&broken, &spec, 0, PtuOptions::default()),
        Err(Error::Config(_))
    ));

    let rnn = NetworkSpec::rnn(4, 6, 2);
    let src = SourceNet {
        spec: NetworkSpec::rnn(4, 5, 2),
        params: build_network(&NetworkSpec::rnn(4, 5, 2), 0).unwrap(),
    };
    assert!(matches!(
        assemble_ptu_rnn(&src, &rnn, 0, PtuOptions::default()),
        Err(Error::Config(_))
    ));
}

#[test]
fn batches_must_match_the_input() {
    let model = AssembledModel::scratch(&small_cnn(3), 0).unwrap();
    assert!(matches!(
        model.forward(&Tensor::zeros([2, 1, 9, 8]), false),
        Err(Error::Config(_))
    ));
    let rnn = AssembledModel::scratch(&NetworkSpec::rnn(4, 3, 2), 0).unwrap();
    assert!(matches!(
        rnn.forward(&Tensor::zeros([2, 5, 3]), false),
        Err(Error::Config(_))
    ));
}

#[test]
fn trainable_tensors_follow_the_mask() {
    let spec = small_cnn(3);
    let source = build_network(&spec, 1).unwrap();
    use TransferState::*;
    let ft = spec
        .clone()
        .with_states(vec![Frozen, Frozen, FineTune, FineTune])
        .unwrap();
    let mut model = AssembledModel::transfer(&ft, &source, 2).unwrap();
    let expected: usize = ["l3.weight", "l3.bias", "l4.weight", "l4.bias"]
        .iter()
        .map(|n| model.target_params.get(n).unwrap().len())
        .sum();
    assert_eq!(model.trainable_scalar_count(), expected);
    assert_eq!(model.trainable_tensors_mut().len(), 4);
}

#[test]
fn checkpoints_round_trip() {
    let p = build_network(&small_cnn(3), 4).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("net.ptuc");
    p.save(&path).unwrap();
    let back = ParamSet::load(&path).unwrap();
    assert!(p.bitwise_eq(&back));
    assert_eq!(std::fs::read(&path).unwrap(), p.to_bytes().unwrap());
    assert!(matches!(
        ParamSet::load(&dir.path().join("missing")),
        Err(Error::Io { .. })
    ));
}

#[test]
fn corrupt_checkpoints_report_offsets() {
    let p = build_network(&NetworkSpec::rnn(2, 2, 2), 0).unwrap();
    let bytes = p.to_bytes().unwrap();
    let err = ParamSet::from_bytes(&bytes[..bytes.len() - 1], "ckpt").unwrap_err();
    assert!(matches!(err, Error::Parse { .. }), "{err}");
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(
        ParamSet::from_bytes(&bad, "ckpt"),
        Err(Error::Parse { offset: 0, .. })
    ));
}
