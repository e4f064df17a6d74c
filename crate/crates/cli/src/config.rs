//! Flat `key = value` experiment configs with dotted sections.
//!
//! Blank lines and lines starting with `#` are ignored. Relative paths are
//! resolved against the directory holding the config file. Unknown keys are
//! rejected so that typos surface as errors instead of silent defaults.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ptu_core::data::{SplitSpec, SynthPairSpec};
use ptu_core::regularization::{Grouping, PenaltyConfig};
use ptu_core::train::{TrainConfig, DEFAULT_EVAL_EVERY, KNN_CANDIDATES};
use ptu_core::zoo::PtuOptions;
use ptu_tensor::Activation;

use crate::error::{config, io_err, Result};

pub const LENET_LAYERS: &str =
    "conv:32:5,pool:2,conv:64:5,pool:2,flatten,dense:256,dense:128,output";

#[derive(Clone, Debug, PartialEq)]
pub enum Arch {
    /// Layer list in the model-zoo syntax.
    Cnn {
        layers: String,
    },
    Rnn {
        hidden: usize,
    },
}

impl Arch {
    pub fn name(&self) -> &'static str {
        match self {
            Arch::Cnn { .. } => "cnn",
            Arch::Rnn { .. } => "rnn",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum MethodKind {
    NoTl,
    Ft,
    Ptu,
    Rg,
    Knn,
}

impl MethodKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "notl" => Ok(MethodKind::NoTl),
            "ft" => Ok(MethodKind::Ft),
            "ptu" => Ok(MethodKind::Ptu),
            "rg" => Ok(MethodKind::Rg),
            "knn" => Ok(MethodKind::Knn),
            other => config(format!("unknown method `{other}` (notl, ft, ptu, rg, knn)")),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            MethodKind::NoTl => "notl",
            MethodKind::Ft => "ft",
            MethodKind::Ptu => "ptu",
            MethodKind::Rg => "rg",
            MethodKind::Knn => "knn",
        }
    }

    pub fn needs_source(self) -> bool {
        matches!(self, MethodKind::Ft | MethodKind::Ptu)
    }
}

/// An IDX image/label pair in the registry.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetRef {
    pub images: PathBuf,
    pub labels: PathBuf,
    /// One past the largest label when absent.
    pub classes: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum SynthConfig {
    /// A source/target pair with a controlled share of latent factors.
    Pair(SynthPairSpec),
    /// Digit-like source glyphs and alphabet-like target sets.
    Glyphs {
        digits_per_class: usize,
        alphabets: Vec<(String, usize)>,
        per_class: usize,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub setting: String,
    pub seed: u64,
    pub out: PathBuf,
    pub arch: Arch,
    pub source: Option<String>,
    pub target: Option<String>,
    pub checkpoint: PathBuf,
    pub datasets: BTreeMap<String, DatasetRef>,
    pub methods: Vec<MethodKind>,
    pub train: TrainConfig,
    pub source_train: TrainConfig,
    pub split: SplitSpec,
    pub source_split: SplitSpec,
    pub ptu: PtuOptions,
    pub knn_candidates: Vec<usize>,
    pub report_svg: bool,
    pub synth: Option<SynthConfig>,
}

const KEYS: &[&str] = &[
    "setting",
    "seed",
    "out",
    "methods",
    "model.arch",
    "model.layers",
    "model.hidden",
    "source.dataset",
    "source.checkpoint",
    "source.batch_size",
    "source.max_steps",
    "source.lr_candidates",
    "source.eval_every",
    "source.split.train",
    "source.split.val",
    "source.split.test",
    "target.dataset",
    "train.batch_size",
    "train.max_steps",
    "train.lr_candidates",
    "train.eval_every",
    "split.train",
    "split.val",
    "split.test",
    "split.stratified",
    "reg.l1",
    "reg.l2",
    "reg.group",
    "reg.grouping",
    "ptu.scale",
    "ptu.kernel",
    "ptu.separable",
    "ptu.phi",
    "knn.k",
    "report.svg",
    "synth.kind",
    "synth.source_classes",
    "synth.target_classes",
    "synth.shared_fraction",
    "synth.source_per_class",
    "synth.target_per_class",
    "synth.side",
    "synth.factors",
    "synth.modes",
    "synth.latent_noise",
    "synth.pixel_noise",
    "synth.contrast",
    "synth.digits_per_class",
    "synth.alphabets",
    "synth.per_class",
];

/// Raw entries with the line each came from.
struct Entries {
    map: BTreeMap<String, (String, usize)>,
}

impl Entries {
    fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return config(format!(
                    "line {}: expected `key = value`, got `{line}`",
                    i + 1
                ));
            };
            let (k, v) = (k.trim().to_string(), v.trim().to_string());
            if k.is_empty() {
                return config(format!("line {}: empty key", i + 1));
            }
            if let Some((_, first)) = map.get(&k) {
                return config(format!("line {}: `{k}` already set on line {first}", i + 1));
            }
            map.insert(k, (v, i + 1));
        }
        for (k, (_, line)) in &map {
            if !KEYS.contains(&k.as_str()) && !is_dataset_key(k) {
                return config(format!("line {line}: unknown key `{k}`"));
            }
        }
        Ok(Entries { map })
    }

    fn raw(&self, key: &str) -> Option<&str> {
        self.map.get(key).map(|(v, _)| v.as_str())
    }

    fn get<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.map.get(key) {
            None => Ok(None),
            Some((v, line)) => v.parse().map(Some).map_err(|_| {
                crate::error::CliError::Config(format!("line {line}: cannot parse `{key} = {v}`"))
            }),
        }
    }

    fn or<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T> {
        Ok(self.get(key)?.unwrap_or(default))
    }

    fn list<T: std::str::FromStr>(&self, key: &str) -> Result<Option<Vec<T>>> {
        let Some((v, line)) = self.map.get(key) else {
            return Ok(None);
        };
        v.split(',')
            .map(|s| s.trim())
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse().map_err(|_| {
                    crate::error::CliError::Config(format!(
                        "line {line}: cannot parse `{s}` in `{key}`"
                    ))
                })
            })
            .collect::<Result<Vec<T>>>()
            .map(Some)
    }

    fn flag(&self, key: &str, default: bool) -> Result<bool> {
        match self.raw(key) {
            None => Ok(default),
            Some("true") => Ok(true),
            Some("false") => Ok(false),
            Some(v) => config(format!("`{key}` must be true or false, got `{v}`")),
        }
    }
}

fn is_dataset_key(k: &str) -> bool {
    let parts: Vec<&str> = k.split('.').collect();
    parts.len() == 3
        && parts[0] == "dataset"
        && !parts[1].is_empty()
        && ["images", "labels", "classes"].contains(&parts[2])
}

fn resolve(base: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn train_config(
    e: &Entries,
    prefix: &str,
    fallback: Option<&TrainConfig>,
    seed: u64,
) -> Result<TrainConfig> {
    let key = |k: &str| format!("{prefix}.{k}");
    let batch = e
        .get(&key("batch_size"))?
        .or(fallback.map(|f| f.batch_size))
        .unwrap_or(32);
    let steps = e
        .get(&key("max_steps"))?
        .or(fallback.map(|f| f.max_steps))
        .unwrap_or(1000);
    let lrs = e
        .list(&key("lr_candidates"))?
        .or(fallback.map(|f| f.lr_candidates.clone()))
        .unwrap_or_else(|| vec![0.1, 0.01]);
    if lrs.is_empty() {
        return config(format!(
            "`{}` lists no learning rates",
            key("lr_candidates")
        ));
    }
    let mut cfg = TrainConfig::new(lrs[0], batch, steps, seed).with_candidates(lrs);
    cfg.eval_every = e
        .get(&key("eval_every"))?
        .or(fallback.map(|f| f.eval_every))
        .unwrap_or(DEFAULT_EVAL_EVERY);
    Ok(cfg)
}

fn split_spec(
    e: &Entries,
    prefix: &str,
    fallback: Option<&SplitSpec>,
    seed: u64,
) -> Result<SplitSpec> {
    let key = |k: &str| format!("{prefix}.{k}");
    let f = |k: &str, d: f64, pick: fn(&SplitSpec) -> f64| -> Result<f64> {
        Ok(e.get(&key(k))?.or(fallback.map(pick)).unwrap_or(d))
    };
    let mut s = SplitSpec::new(
        f("train", 0.7, |s| s.train_frac)?,
        f("val", 0.15, |s| s.val_frac)?,
        f("test", 0.15, |s| s.test_frac)?,
        seed,
    );
    s.stratified = e.flag("split.stratified", true)?;
    s.validate()?;
    Ok(s)
}

fn arch(e: &Entries) -> Result<Arch> {
    match e.raw("model.arch").unwrap_or("cnn") {
        "cnn" => {
            if e.raw("model.hidden").is_some() {
                return config("`model.hidden` applies to rnn models");
            }
            Ok(Arch::Cnn {
                layers: e.raw("model.layers").unwrap_or(LENET_LAYERS).to_string(),
            })
        }
        "rnn" => {
            if e.raw("model.layers").is_some() {
                return config("`model.layers` applies to cnn models");
            }
            let hidden = e.or("model.hidden", 128usize)?;
            if hidden < 1 {
                return config("`model.hidden` must be at least 1");
            }
            Ok(Arch::Rnn { hidden })
        }
        other => config(format!("model.arch must be cnn or rnn, got `{other}`")),
    }
}

fn ptu_options(e: &Entries) -> Result<PtuOptions> {
    let d = PtuOptions::default();
    let phi = match e.raw("ptu.phi") {
        None => None,
        Some("relu") => Some(Activation::Relu),
        Some("tanh") => Some(Activation::Tanh),
        Some("sigmoid") => Some(Activation::Sigmoid),
        Some(v) => return config(format!("ptu.phi must be relu, tanh or sigmoid, got `{v}`")),
    };
    let opts = PtuOptions {
        scale: e.or("ptu.scale", d.scale)?,
        phi,
        kernel: e.or("ptu.kernel", d.kernel)?,
        separable: e.flag("ptu.separable", d.separable)?,
    };
    if !(opts.scale >= 0.0 && opts.scale.is_finite()) || opts.kernel < 1 || opts.kernel % 2 == 0 {
        return config("ptu.scale must be finite and non-negative and ptu.kernel odd");
    }
    Ok(opts)
}

fn synth(e: &Entries, seed: u64) -> Result<Option<SynthConfig>> {
    let Some(kind) = e.raw("synth.kind") else {
        if let Some(k) = e.map.keys().find(|k| k.starts_with("synth.")) {
            return config(format!("`{k}` needs `synth.kind`"));
        }
        return Ok(None);
    };
    match kind {
        "pair" => {
            let mut s = SynthPairSpec::new(
                e.or("synth.source_classes", 10)?,
                e.or("synth.target_classes", 10)?,
                e.or("synth.shared_fraction", 0.5)?,
                e.or("synth.source_per_class", 300)?,
                seed,
            );
            s.target_per_class = e.or("synth.target_per_class", s.source_per_class)?;
            s.side = e.or("synth.side", s.side)?;
            s.factors = e.or("synth.factors", s.factors)?;
            s.modes = e.or("synth.modes", s.modes)?;
            s.latent_noise = e.or("synth.latent_noise", s.latent_noise)?;
            s.pixel_noise = e.or("synth.pixel_noise", s.pixel_noise)?;
            s.contrast = e.or("synth.contrast", s.contrast)?;
            Ok(Some(SynthConfig::Pair(s)))
        }
        "glyphs" => {
            let names: Vec<String> = e.list("synth.alphabets")?.unwrap_or_else(|| {
                ptu_core::data::ALPHABETS
                    .iter()
                    .map(|(n, _)| n.to_string())
                    .collect()
            });
            let mut alphabets = Vec::new();
            for n in names {
                let Some(&(_, c)) = ptu_core::data::ALPHABETS.iter().find(|(a, _)| *a == n) else {
                    return config(format!("unknown alphabet `{n}`"));
                };
                alphabets.push((n, c));
            }
            Ok(Some(SynthConfig::Glyphs {
                digits_per_class: e.or("synth.digits_per_class", 500)?,
                alphabets,
                per_class: e.or("synth.per_class", 20)?,
            }))
        }
        other => config(format!("synth.kind must be pair or glyphs, got `{other}`")),
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path, seed: Option<u64>, out: Option<&Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let base = path.parent().unwrap_or(Path::new("."));
        ExperimentConfig::parse(&text, base, seed, out)
    }

    /// `seed` and `out` override the config's values.
    pub fn parse(text: &str, base: &Path, seed: Option<u64>, out: Option<&Path>) -> Result<Self> {
        let e = Entries::parse(text)?;
        let seed = match seed {
            Some(s) => s,
            None => e.or("seed", 0u64)?,
        };
        let setting = e.raw("setting").unwrap_or("run").to_string();
        if setting.is_empty()
            || !setting
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
        {
            return config(format!(
                "setting `{setting}` must be non-empty and use only letters, digits, `-` and `_`"
            ));
        }
        let out = match out {
            Some(o) => o.to_path_buf(),
            None => resolve(base, e.raw("out").unwrap_or("out")),
        };
        let mut datasets: BTreeMap<String, DatasetRef> = BTreeMap::new();
        let names: BTreeSet<&str> = e
            .map
            .keys()
            .filter(|k| is_dataset_key(k))
            .map(|k| k.split('.').nth(1).unwrap())
            .collect();
        for name in names {
            let key = |f: &str| format!("dataset.{name}.{f}");
            let (Some(images), Some(labels)) = (e.raw(&key("images")), e.raw(&key("labels")))
            else {
                return config(format!("dataset `{name}` needs both images and labels"));
            };
            datasets.insert(
                name.to_string(),
                DatasetRef {
                    images: resolve(base, images),
                    labels: resolve(base, labels),
                    classes: e.get(&key("classes"))?,
                },
            );
        }
        let source = e.raw("source.dataset").map(String::from);
        let target = e.raw("target.dataset").map(String::from);
        for name in source.iter().chain(&target) {
            if !datasets.contains_key(name) {
                return config(format!("dataset `{name}` is not in the registry (add dataset.{name}.images and .labels)"));
            }
        }
        let mut methods = Vec::new();
        for m in e.list::<String>("methods")?.unwrap_or_else(|| {
            vec![
                "notl".into(),
                "ft".into(),
                "ptu".into(),
                "rg".into(),
                "knn".into(),
            ]
        }) {
            let m = MethodKind::parse(&m)?;
            if methods.contains(&m) {
                return config(format!("method `{}` listed twice", m.name()));
            }
            methods.push(m);
        }
        if methods.is_empty() {
            return config("`methods` lists no methods");
        }
        let mut train = train_config(&e, "train", None, seed)?;
        train.penalty = PenaltyConfig {
            lambda_l1: e.or("reg.l1", 0.0)?,
            lambda_l2: e.or("reg.l2", 0.0)?,
            lambda_group: e.or("reg.group", 0.0)?,
            grouping: match e.raw("reg.grouping") {
                Some(g) => Grouping::parse(g)?,
                None => Grouping::FilterWise,
            },
        };
        train.validate()?;
        let mut source_train = train_config(&e, "source", Some(&train), seed)?;
        source_train.penalty = PenaltyConfig::default();
        source_train.validate()?;
        let split = split_spec(&e, "split", None, seed)?;
        let source_split = split_spec(&e, "source.split", Some(&split), seed)?;
        let knn_candidates = e.list("knn.k")?.unwrap_or_else(|| KNN_CANDIDATES.to_vec());
        if knn_candidates.is_empty() || knn_candidates.contains(&0) {
            return config("knn.k must list positive neighbour counts");
        }
        let checkpoint = match e.raw("source.checkpoint") {
            Some(c) => resolve(base, c),
            None => out.join("source.ptuc"),
        };
        Ok(ExperimentConfig {
            setting,
            seed,
            out,
            arch: arch(&e)?,
            source,
            target,
            checkpoint,
            datasets,
            methods,
            train,
            source_train,
            split,
            source_split,
            ptu: ptu_options(&e)?,
            knn_candidates,
            report_svg: e.flag("report.svg", true)?,
            synth: synth(&e, seed)?,
        })
    }

    pub fn dataset(&self, name: &str) -> &DatasetRef {
        &self.datasets[name]
    }

    /// Human-readable summary of the resolved settings.
    pub fn describe(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "setting     {}", self.setting);
        let _ = writeln!(s, "seed        {}", self.seed);
        let _ = writeln!(s, "out         {}", self.out.display());
        let _ = match &self.arch {
            Arch::Cnn { layers } => writeln!(s, "model       cnn [{layers}]"),
            Arch::Rnn { hidden } => writeln!(s, "model       rnn, {hidden} hidden units"),
        };
        for (role, name) in [("source", &self.source), ("target", &self.target)] {
            if let Some(n) = name {
                let d = self.dataset(n);
                let _ = writeln!(
                    s,
                    "{role:<11} {n} ({}, {})",
                    d.images.display(),
                    d.labels.display()
                );
            }
        }
        let _ = writeln!(s, "checkpoint  {}", self.checkpoint.display());
        let t = &self.train;
        let _ = writeln!(
            s,
            "train       batch {}, {} steps, lr {:?}, eval every {}",
            t.batch_size, t.max_steps, t.lr_candidates, t.eval_every
        );
        let t = &self.source_train;
        let _ = writeln!(
            s,
            "source run  batch {}, {} steps, lr {:?}, eval every {}",
            t.batch_size, t.max_steps, t.lr_candidates, t.eval_every
        );
        let _ = writeln!(
            s,
            "split       {}/{}/{}",
            self.split.train_frac, self.split.val_frac, self.split.test_frac
        );
        let p = &self.train.penalty;
        if !p.is_off() {
            let _ = writeln!(
                s,
                "penalty     l1 {}, l2 {}, group {} ({})",
                p.lambda_l1,
                p.lambda_l2,
                p.lambda_group,
                p.grouping.name()
            );
        }
        s
    }
}
