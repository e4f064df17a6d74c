//! Labelled image datasets: IDX files, splits, resizing and synthetic
//! generators.

mod glyphs;
mod idx;
mod synth;

use ptu_tensor::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{config, contract, Result};

pub use glyphs::{glyph_alphabet, glyph_digits, glyph_set, GlyphStyle, ALPHABETS};
pub use idx::{load_idx, load_idx_with_classes, parse_idx_images, parse_idx_labels, write_idx};
pub use synth::{synth_transfer_pair, synth_transfer_pair_with, SynthPairSpec};

/// Images `[n×C×H×W]` with pixels in `[0, 1]` and one label per image.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub class_count: usize,
    pub name: String,
}

impl LabeledDataset {
    pub fn new(
        images: Tensor,
        labels: Vec<usize>,
        class_count: usize,
        name: impl Into<String>,
    ) -> Result<Self> {
        let name = name.into();
        if images.rank() != 4 {
            return contract(format!(
                "{name}: images must be [n×C×H×W], got {:?}",
                images.shape()
            ));
        }
        if images.shape()[0] != labels.len() || labels.is_empty() {
            return contract(format!(
                "{name}: {} images but {} labels",
                images.shape()[0],
                labels.len()
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_count) {
            return contract(format!("{name}: label {bad} outside [0, {class_count})"));
        }
        if images.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return contract(format!("{name}: pixel values must lie in [0, 1]"));
        }
        Ok(LabeledDataset {
            images,
            labels,
            class_count,
            name,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[C, H, W]` of one image.
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    /// All `C·H·W` values of image `i`.
    pub fn pixels(&self, i: usize) -> &[f32] {
        let per: usize = self.image_shape().iter().product();
        &self.images.data()[i * per..(i + 1) * per]
    }

    pub fn subset(&self, indices: &[usize], name: impl Into<String>) -> Result<Self> {
        Ok(LabeledDataset {
            images: self.images.gather_leading(indices)?,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            class_count: self.class_count,
            name: name.into(),
        })
    }

    /// Samples per class.
    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.class_count];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: LabeledDataset,
    pub val: LabeledDataset,
    pub test: LabeledDataset,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitSpec {
    pub train_frac: f64,
    pub val_frac: f64,
    pub test_frac: f64,
    pub seed: u64,
    pub stratified: bool,
}

impl SplitSpec {
    pub fn new(train_frac: f64, val_frac: f64, test_frac: f64, seed: u64) -> Self {
        SplitSpec {
            train_frac,
            val_frac,
            test_frac,
            seed,
            stratified: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, f) in [
            ("train", self.train_frac),
            ("val", self.val_frac),
            ("test", self.test_frac),
        ] {
            if !(f > 0.0 && f < 1.0) {
                return config(format!("split fraction {name}={f} must lie in (0, 1)"));
            }
        }
        let sum = self.train_frac + self.val_frac + self.test_frac;
        if (sum - 1.0).abs() > 1e-9 {
            return config(format!("split fractions sum to {sum}, not 1"));
        }
        Ok(())
    }

    /// `(train, val, test)` counts for `n` items: train and validation are
    /// rounded, test takes the rest.
    fn counts(&self, n: usize) -> (usize, usize, usize) {
        let tr = ((n as f64 * self.train_frac).round() as usize).min(n);
        let va = ((n as f64 * self.val_frac).round() as usize).min(n - tr);
        (tr, va, n - tr - va)
    }
}

/// Disjoint, exhaustive partition. Stratified splits apply the fractions per
/// class; every split keeps its indices in ascending order.
pub fn split(ds: &LabeledDataset, spec: &SplitSpec) -> Result<Splits> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let groups: Vec<Vec<usize>> = if spec.stratified {
        let mut by_class = vec![Vec::new(); ds.class_count];
        for (i, &l) in ds.labels.iter().enumerate() {
            by_class[l].push(i);
        }
        by_class.into_iter().filter(|g| !g.is_empty()).collect()
    } else {
        vec![(0..ds.len()).collect()]
    };
    let (mut tr, mut va, mut te) = (Vec::new(), Vec::new(), Vec::new());
    for mut g in groups {
        let (a, b, c) = spec.counts(g.len());
        if a == 0 || b == 0 || c == 0 {
            let what = if spec.stratified {
                format!("class {}", ds.labels[g[0]])
            } else {
                "the dataset".to_string()
            };
            return config(format!(
                "{}: {what} has {} samples, too few for a {}/{}/{} split",
                ds.name,
                g.len(),
                spec.train_frac,
                spec.val_frac,
                spec.test_frac
            ));
        }
        g.shuffle(&mut rng);
        tr.extend_from_slice(&g[..a]);
        va.extend_from_slice(&g[a..a + b]);
        te.extend_from_slice(&g[a + b..]);
    }
    for v in [&mut tr, &mut va, &mut te] {
        v.sort_unstable();
    }
    Ok(Splits {
        train: ds.subset(&tr, format!("{}/train", ds.name))?,
        val: ds.subset(&va, format!("{}/val", ds.name))?,
        test: ds.subset(&te, format!("{}/test", ds.name))?,
    })
}

/// Bilinear resize with aligned corners: output corners sample input corners
/// exactly, and a length-1 axis samples the input centre.
pub fn resize_bilinear(ds: &LabeledDataset, height: usize, width: usize) -> Result<LabeledDataset> {
    if height < 1 || width < 1 {
        return config(format!(
            "resize target {height}×{width} must be at least 1×1"
        ));
    }
    let [c, h, w] = ds.image_shape();
    if (h, w) == (height, width) {
        return Ok(ds.clone());
    }
    let coords = |out: usize, inp: usize| -> Vec<(usize, usize, f32)> {
        (0..out)
            .map(|i| {
                let pos = if out == 1 {
                    (inp - 1) as f64 / 2.0
                } else {
                    i as f64 * (inp - 1) as f64 / (out - 1) as f64
                };
                let lo = (pos.floor() as usize).min(inp - 1);
                let hi = (lo + 1).min(inp - 1);
                (lo, hi, (pos - lo as f64) as f32)
            })
            .collect()
    };
    let (ys, xs) = (coords(height, h), coords(width, w));
    let src = ds.images.data();
    let mut out = Vec::with_capacity(ds.len() * c * height * width);
    for plane in src.chunks_exact(h * w) {
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let p = |y: usize, x: usize| plane[y * w + x];
                let top = p(y0, x0) + fx * (p(y0, x1) - p(y0, x0));
                let bot = p(y1, x0) + fx * (p(y1, x1) - p(y1, x0));
                out.push((top + fy * (bot - top)).clamp(0.0, 1.0));
            }
        }
    }
    LabeledDataset::new(
        Tensor::from_vec([ds.len(), c, height, width], out),
        ds.labels.clone(),
        ds.class_count,
        ds.name.clone(),
    )
}

/// Rounds pixels to the 8-bit grid an IDX file stores.
pub fn quantize(v: f32) -> f32 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}
