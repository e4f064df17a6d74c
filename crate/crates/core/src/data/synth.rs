//! Class-conditional images built from latent factors, with a dial for how
//! many factors two domains share.
//!
//! Factors are orthonormal 2-D cosine patterns. Each domain draws `factors`
//! of them: the first `round(shared · factors)` are common to both domains,
//! the rest are private and disjoint, so a private direction of one domain is
//! orthogonal to everything the other domain contains. A class is a Gaussian
//! in factor space, its mean fixed by the class index alone, so equal class
//! counts give both domains the same class map. Each class is a mixture of
//! `modes` such Gaussians.

use std::f64::consts::PI;

use ptu_tensor::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{quantize, LabeledDataset};
use crate::error::{config, Result};
use crate::seeds::derive_seed;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthPairSpec {
    pub source_classes: usize,
    pub target_classes: usize,
    pub shared_fraction: f64,
    pub source_per_class: usize,
    pub target_per_class: usize,
    pub seed: u64,
    /// Square image side.
    pub side: usize,
    /// Latent factors per domain.
    pub factors: usize,
    /// Highest cosine frequency per axis used for factors.
    pub max_frequency: usize,
    /// Mixture components per class.
    pub modes: usize,
    /// Within-component standard deviation of factor coefficients.
    pub latent_noise: f64,
    /// Per-pixel Gaussian noise.
    pub pixel_noise: f64,
    /// Pixel contrast of a unit coefficient.
    pub contrast: f64,
}

impl SynthPairSpec {
    pub fn new(
        source_classes: usize,
        target_classes: usize,
        shared_fraction: f64,
        n_per_class: usize,
        seed: u64,
    ) -> Self {
        SynthPairSpec {
            source_classes,
            target_classes,
            shared_fraction,
            source_per_class: n_per_class,
            target_per_class: n_per_class,
            seed,
            side: 12,
            factors: 16,
            max_frequency: 6,
            modes: 6,
            latent_noise: 0.6,
            pixel_noise: 0.3,
            contrast: 0.35,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.source_classes < 2 || self.target_classes < 2 {
            return config("synthetic domains need at least 2 classes");
        }
        if !(0.0..=1.0).contains(&self.shared_fraction) {
            return config(format!(
                "shared factor fraction {} outside [0, 1]",
                self.shared_fraction
            ));
        }
        if self.source_per_class < 1
            || self.target_per_class < 1
            || self.factors < 1
            || self.modes < 1
            || self.side < 2
        {
            return config("synthetic sizes must be positive");
        }
        let available = self.max_frequency * self.max_frequency - 1;
        if 2 * self.factors - self.shared() > available || self.max_frequency > self.side {
            return config(format!(
                "{} factors per domain need more than the {available} cosine patterns up to frequency {}",
                self.factors, self.max_frequency
            ));
        }
        Ok(())
    }

    fn shared(&self) -> usize {
        (self.shared_fraction * self.factors as f64).round() as usize
    }
}

/// Orthonormal separable cosine pattern `(u, v)` on a `side×side` grid.
fn cosine_pattern(u: usize, v: usize, side: usize) -> Vec<f64> {
    let basis = |k: usize, i: usize| {
        let norm = if k == 0 {
            (1.0 / side as f64).sqrt()
        } else {
            (2.0 / side as f64).sqrt()
        };
        norm * (PI * (i as f64 + 0.5) * k as f64 / side as f64).cos()
    };
    let mut p = Vec::with_capacity(side * side);
    for y in 0..side {
        for x in 0..side {
            p.push(basis(u, y) * basis(v, x));
        }
    }
    p
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn render(
    spec: &SynthPairSpec,
    patterns: &[Vec<f64>],
    classes: usize,
    per_class: usize,
    domain_tag: u64,
    name: &str,
) -> Result<LabeledDataset> {
    let px = spec.side * spec.side;
    // Scale so a unit coefficient moves pixels by about `contrast`.
    let gain = spec.contrast * spec.side as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, domain_tag));
    let mut data = Vec::with_capacity(classes * per_class * px);
    let mut labels = Vec::with_capacity(classes * per_class);
    for c in 0..classes {
        let means: Vec<Vec<f64>> = (0..spec.modes)
            .map(|m| {
                let mut mean_rng = ChaCha8Rng::seed_from_u64(derive_seed(
                    derive_seed(spec.seed, 10_000 + c as u64),
                    m as u64,
                ));
                (0..spec.factors).map(|_| normal(&mut mean_rng)).collect()
            })
            .collect();
        for _ in 0..per_class {
            let mean = &means[rng.gen_range(0..spec.modes)];
            let coef: Vec<f64> = mean
                .iter()
                .map(|m| m + spec.latent_noise * normal(&mut rng))
                .collect();
            for p in 0..px {
                let signal: f64 = coef.iter().zip(patterns).map(|(a, pat)| a * pat[p]).sum();
                let v = 0.5 + gain * signal + spec.pixel_noise * normal(&mut rng);
                data.push(quantize(v as f32));
            }
            labels.push(c);
        }
    }
    let images = Tensor::from_vec([classes * per_class, 1, spec.side, spec.side], data);
    LabeledDataset::new(images, labels, classes, name)
}

/// Source and target datasets whose factors overlap by `shared_factor_fraction`.
pub fn synth_transfer_pair(
    source_classes: usize,
    target_classes: usize,
    shared_factor_fraction: f64,
    n_per_class: usize,
    seed: u64,
) -> Result<(LabeledDataset, LabeledDataset)> {
    synth_transfer_pair_with(&SynthPairSpec::new(
        source_classes,
        target_classes,
        shared_factor_fraction,
        n_per_class,
        seed,
    ))
}

pub fn synth_transfer_pair_with(spec: &SynthPairSpec) -> Result<(LabeledDataset, LabeledDataset)> {
    spec.validate()?;
    let mut freqs: Vec<(usize, usize)> = (0..spec.max_frequency)
        .flat_map(|u| (0..spec.max_frequency).map(move |v| (u, v)))
        .filter(|&f| f != (0, 0))
        .collect();
    freqs.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, 1)));
    let shared = spec.shared();
    let private = spec.factors - shared;
    let pick = |range: std::ops::Range<usize>| -> Vec<Vec<f64>> {
        freqs[range]
            .iter()
            .map(|&(u, v)| cosine_pattern(u, v, spec.side))
            .collect()
    };
    let mut src_patterns = pick(0..shared);
    src_patterns.extend(pick(shared..shared + private));
    let mut tgt_patterns = pick(0..shared);
    tgt_patterns.extend(pick(shared + private..shared + 2 * private));
    let src = render(
        spec,
        &src_patterns,
        spec.source_classes,
        spec.source_per_class,
        2,
        "synth-source",
    )?;
    let tgt = render(
        spec,
        &tgt_patterns,
        spec.target_classes,
        spec.target_per_class,
        3,
        "synth-target",
    )?;
    Ok((src, tgt))
}
