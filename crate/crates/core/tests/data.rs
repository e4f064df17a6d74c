use proptest::prelude::*;
use ptu_core::data::*;
use ptu_core::Error;
use ptu_tensor::Tensor;

fn be(v: u32) -> [u8; 4] {
    v.to_be_bytes()
}

/// Two 2×3 images and their labels.
fn fixture() -> (Vec<u8>, Vec<u8>) {
    let mut img = Vec::new();
    for v in [0x803, 2, 2, 3] {
        img.extend(be(v));
    }
    img.extend([0, 51, 102, 153, 204, 255, 255, 0, 0, 0, 0, 255]);
    let mut lab = Vec::new();
    for v in [0x801, 2] {
        lab.extend(be(v));
    }
    lab.extend([3, 1]);
    (img, lab)
}

fn write_pair(
    dir: &std::path::Path,
    img: &[u8],
    lab: &[u8],
) -> (std::path::PathBuf, std::path::PathBuf) {
    let (ip, lp) = (dir.join("set-images.idx"), dir.join("set-labels.idx"));
    std::fs::write(&ip, img).unwrap();
    std::fs::write(&lp, lab).unwrap();
    (ip, lp)
}

#[test]
fn idx_fixture_parses() {
    let (img, lab) = fixture();
    let t = parse_idx_images(&img, "img").unwrap();
    assert_eq!(t.shape(), &[2, 1, 2, 3]);
    assert_eq!(&t.data()[..3], &[0.0, 0.2, 0.4]);
    assert_eq!(t.data()[5], 1.0);
    assert_eq!(parse_idx_labels(&lab, "lab").unwrap(), vec![3, 1]);

    let dir = tempfile::tempdir().unwrap();
    let (ip, lp) = write_pair(dir.path(), &img, &lab);
    let ds = load_idx(&ip, &lp).unwrap();
    assert_eq!(
        (ds.len(), ds.class_count, ds.name.as_str()),
        (2, 4, "set-images")
    );
    let named = load_idx_with_classes(&ip, &lp, 10, "digits").unwrap();
    assert_eq!((named.class_count, named.name.as_str()), (10, "digits"));
    let err = load_idx_with_classes(&ip, &lp, 3, "digits").unwrap_err();
    assert!(matches!(err, Error::Parse { offset: 8, .. }), "{err}");
}

#[test]
fn idx_errors_carry_offsets() {
    let (img, lab) = fixture();
    let mut bad = img.clone();
    bad[3] = 0x01;
    assert!(matches!(
        parse_idx_images(&bad, "x"),
        Err(Error::Parse { offset: 0, .. })
    ));
    assert!(matches!(
        parse_idx_images(&img[..10], "x"),
        Err(Error::Parse { offset: 10, .. })
    ));
    assert!(matches!(
        parse_idx_images(&img[..27], "x"),
        Err(Error::Parse { offset: 27, .. })
    ));
    let mut long = img.clone();
    long.push(0);
    assert!(matches!(
        parse_idx_images(&long, "x"),
        Err(Error::Parse { offset: 28, .. })
    ));
    assert!(matches!(
        parse_idx_labels(&img, "x"),
        Err(Error::Parse { offset: 0, .. })
    ));

    // One label more than there are images.
    let mut extra = Vec::new();
    for v in [0x801, 3] {
        extra.extend(be(v));
    }
    extra.extend([3, 1, 0]);
    let dir = tempfile::tempdir().unwrap();
    let (ip, lp) = write_pair(dir.path(), &img, &extra);
    let err = load_idx(&ip, &lp).unwrap_err();
    assert!(
        matches!(&err, Error::Parse { file, .. } if file.ends_with("set-labels.idx")),
        "{err}"
    );
    assert!(matches!(
        load_idx(&dir.path().join("nope"), &lp),
        Err(Error::Io { .. })
    ));
    let _ = lab;
}

fn grid(n: usize, classes: usize) -> LabeledDataset {
    let data = (0..n * 4).map(|i| (i % 256) as f32 / 255.0).collect();
    LabeledDataset::new(
        Tensor::from_vec([n, 1, 2, 2], data),
        (0..n).map(|i| i % classes).collect(),
        classes,
        "grid",
    )
    .unwrap()
}

#[test]
fn stratified_split_counts() {
    let ds = grid(100, 5);
    let s = split(&ds, &SplitSpec::new(0.7, 0.15, 0.15, 3)).unwrap();
    assert_eq!(s.train.class_histogram(), vec![14; 5]);
    assert_eq!(s.val.class_histogram(), vec![3; 5]);
    assert_eq!(s.test.class_histogram(), vec![3; 5]);
    assert_eq!(s, split(&ds, &SplitSpec::new(0.7, 0.15, 0.15, 3)).unwrap());
    assert_ne!(s, split(&ds, &SplitSpec::new(0.7, 0.15, 0.15, 4)).unwrap());
}

#[test]
fn impossible_splits_are_config_errors() {
    let ds = grid(10, 5);
    let err = split(&ds, &SplitSpec::new(0.7, 0.15, 0.15, 0)).unwrap_err();
    assert!(
        matches!(&err, Error::Config(m) if m.contains("class 0")),
        "{err}"
    );
    assert!(matches!(
        split(&ds, &SplitSpec::new(0.5, 0.5, 0.5, 0)),
        Err(Error::Config(_))
    ));
    assert!(matches!(
        split(&ds, &SplitSpec::new(1.0, 0.0, 0.0, 0)),
        Err(Error::Config(_))
    ));
}

#[test]
fn resize_examples() {
    let ds = grid(3, 2);
    assert_eq!(resize_bilinear(&ds, 2, 2).unwrap(), ds);
    let checker = LabeledDataset::new(
        Tensor::from_vec([1, 1, 2, 2], vec![0.0, 1.0, 1.0, 0.0]),
        vec![0],
        1,
        "c",
    )
    .unwrap();
    let centre = resize_bilinear(&checker, 1, 1).unwrap();
    assert_eq!(centre.images.data(), &[0.5]);
    let big = resize_bilinear(&checker, 5, 5).unwrap();
    assert_eq!(big.image_shape(), [1, 5, 5]);
    assert_eq!(big.pixels(0)[0], 0.0);
    assert_eq!(big.pixels(0)[4], 1.0);
    let flat = LabeledDataset::new(Tensor::full([1, 1, 3, 4], 0.3), vec![0], 1, "f").unwrap();
    assert!(resize_bilinear(&flat, 7, 2)
        .unwrap()
        .images
        .data()
        .iter()
        .all(|&v| (v - 0.3).abs() < 1e-6));
    assert!(matches!(
        resize_bilinear(&flat, 0, 2),
        Err(Error::Config(_))
    ));
}

#[test]
fn quantize_rounds_to_bytes() {
    assert_eq!(quantize(-0.5), 0.0);
    assert_eq!(quantize(2.0), 1.0);
    assert_eq!(quantize(0.5), 128.0 / 255.0);
}

/// Nearest class mean, fitted on `fit` and scored on `eval`.
fn centroid_accuracy(fit: &LabeledDataset, eval: &LabeledDataset) -> f64 {
    let d = fit.pixels(0).len();
    let mut means = vec![vec![0.0f64; d]; fit.class_count];
    for (i, &l) in fit.labels.iter().enumerate() {
        for (m, &p) in means[l].iter_mut().zip(fit.pixels(i)) {
            *m += p as f64;
        }
    }
    for (m, &n) in means.iter_mut().zip(&fit.class_histogram()) {
        m.iter_mut().for_each(|v| *v /= n as f64);
    }
    let hits = (0..eval.len())
        .filter(|&i| {
            let x = eval.pixels(i);
            let dist = |m: &Vec<f64>| {
                m.iter()
                    .zip(x)
                    .map(|(a, &b)| (a - b as f64).powi(2))
                    .sum::<f64>()
            };
            let best = (0..means.len())
                .min_by(|&a, &b| dist(&means[a]).total_cmp(&dist(&means[b])))
                .unwrap();
            best == eval.labels[i]
        })
        .count();
    hits as f64 / eval.len() as f64
}

#[test]
fn synthetic_pair_is_seeded() {
    let a = synth_transfer_pair(4, 3, 0.5, 20, 9).unwrap();
    assert_eq!(a, synth_transfer_pair(4, 3, 0.5, 20, 9).unwrap());
    assert_ne!(a.0, synth_transfer_pair(4, 3, 0.5, 20, 10).unwrap().0);
    assert_eq!(
        (a.0.len(), a.1.len(), a.0.class_count, a.1.class_count),
        (80, 60, 4, 3)
    );
    assert_eq!(a.0.image_shape(), [1, 12, 12]);
    assert!(matches!(
        synth_transfer_pair(4, 3, 1.5, 20, 9),
        Err(Error::Config(_))
    ));
    assert!(matches!(
        synth_transfer_pair(1, 3, 0.5, 20, 9),
        Err(Error::Config(_))
    ));
}

#[test]
fn shared_factors_carry_across_domains() {
    let classes = 10;
    let n = 100;
    let (src, tgt) = synth_transfer_pair(classes, classes, 1.0, n, 5).unwrap();
    let within = centroid_accuracy(&src, &src);
    let across = centroid_accuracy(&src, &tgt);
    assert!(across > 0.5 * within, "{across} vs {within}");

    let (src, tgt) = synth_transfer_pair(classes, classes, 0.0, n, 5).unwrap();
    assert!(centroid_accuracy(&tgt, &tgt) > 0.3);
    let chance = 1.0 / classes as f64;
    let sigma = (chance * (1.0 - chance) / (classes * n) as f64).sqrt();
    let across = centroid_accuracy(&src, &tgt);
    assert!((across - chance).abs() < 3.0 * sigma, "{across}");
}

#[test]
fn glyph_sets_are_seeded_and_in_range() {
    let d = glyph_digits(3, 1).unwrap();
    assert_eq!(
        (d.len(), d.class_count, d.image_shape()),
        (30, 10, [1, 28, 28])
    );
    assert_eq!(d, glyph_digits(3, 1).unwrap());
    assert_ne!(d, glyph_digits(3, 2).unwrap());
    assert!(d.images.data().iter().all(|&v| v == quantize(v)));
    let (name, classes) = ALPHABETS[0];
    let a = glyph_alphabet(name, classes, 2, 1).unwrap();
    assert_eq!(
        (a.len(), a.class_count, a.name.as_str()),
        (2 * classes, classes, name)
    );
    assert_ne!(
        a.images,
        glyph_alphabet(ALPHABETS[1].0, classes, 2, 1)
            .unwrap()
            .images
    );
    // Every glyph has ink on it and background around it.
    for i in 0..a.len() {
        let px = a.pixels(i);
        assert!(
            px.iter().any(|&v| v > 0.9) && px.iter().filter(|&&v| v == 0.0).count() > px.len() / 2
        );
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn idx_round_trips(n in 1usize..6, h in 1usize..5, w in 1usize..5, classes in 1usize..7, seed in 0u64..100) {
        let data: Vec<f32> = (0..n * h * w).map(|i| ((i as u64 * 37 + seed) % 256) as f32 / 255.0).collect();
        let labels: Vec<usize> = (0..n).map(|i| (i + seed as usize) % classes).collect();
        let ds = LabeledDataset::new(Tensor::from_vec([n, 1, h, w], data), labels, classes, "p").unwrap();
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("i"), dir.path().join("l"));
        write_idx(&ds, &ip, &lp).unwrap();
        let back = load_idx_with_classes(&ip, &lp, classes, "p").unwrap();
        prop_assert_eq!(back, ds);
    }

    #[test]
    fn splits_partition_the_dataset(n in 30usize..80, classes in 1usize..4, seed in 0u64..1000) {
        let ds = grid(n, classes);
        let s = split(&ds, &SplitSpec::new(0.6, 0.2, 0.2, seed)).unwrap();
        prop_assert_eq!(s.train.len() + s.val.len() + s.test.len(), n);
        let mut all: Vec<Vec<f32>> = [&s.train, &s.val, &s.test]
            .iter()
            .flat_map(|d| (0..d.len()).map(|i| d.pixels(i).to_vec()).collect::<Vec<_>>())
            .collect();
        let mut orig: Vec<Vec<f32>> = (0..n).map(|i| ds.pixels(i).to_vec()).collect();
        all.sort_by(|a, b| a.partial_cmp(b).unwrap());
        orig.sort_by(|a, b| a.partial_cmp(b).unwrap());
        prop_assert_eq!(all, orig);
    }

    #[test]
    fn resize_stays_in_range(h in 1usize..6, w in 1usize..6, oh in 1usize..9, ow in 1usize..9, seed in 0u64..50) {
        let data = (0..h * w).map(|i| ((i as u64 * 91 + seed * 7) % 256) as f32 / 255.0).collect();
        let ds = LabeledDataset::new(Tensor::from_vec([1, 1, h, w], data), vec![0], 1, "r").unwrap();
        let out = resize_bilinear(&ds, oh, ow).unwrap();
        let (lo, hi) = ds.images.data().iter().fold((1f32, 0f32), |(a, b), &v| (a.min(v), b.max(v)));
        prop_assert!(out.images.data().iter().all(|&v| v >= lo - 1e-6 && v <= hi + 1e-6));
    }
}
