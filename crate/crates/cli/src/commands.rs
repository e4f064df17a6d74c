use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ptu_core::data::{
    glyph_alphabet, glyph_digits, load_idx, load_idx_with_classes, split, synth_transfer_pair_with,
    write_idx, LabeledDataset, Splits,
};
use ptu_core::ptu::gate_stats_csv;
use ptu_core::seeds::derive_seed;
use ptu_core::train::{
    adapt_output_state, ft_family, holdout_select, knn_select, random_guess_report, summarize,
    summary_csv, ExperimentReport, Method, Selection, TrainConfig,
};
use ptu_core::zoo::{
    assemble_ptu_cnn, assemble_ptu_rnn, AssembledModel, InputSpec, LayerSpec, NetworkSpec,
    SourceNet, TransferState,
};
use ptu_core::ParamSet;

use crate::config::{Arch, DatasetRef, ExperimentConfig, MethodKind, SynthConfig};
use crate::error::{config, io_err, CliError, Result};

const SOURCE_SPLIT: u64 = 0x5011;
const TARGET_SPLIT: u64 = 0x7011;
const SOURCE_INIT: u64 = 0x5117;
const TARGET_INIT: u64 = 0x7117;
const SOURCE_SAMPLER: u64 = 0x5BA7;
const TARGET_SAMPLER: u64 = 0x7BA7;

pub const SELECTION_HEADER: &str = "method,learning_rate,final_val_accuracy,diverged";
pub const SUMMARY_FILE: &str = "summary.csv";

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(io_err(path))
}

/// `say!(log, ...)` writes one line of progress; a closed log is not an error.
macro_rules! say {
    ($log:expr, $($arg:tt)*) => {{
        let _ = writeln!($log, $($arg)*);
    }};
}

fn load_dataset(name: &str, d: &DatasetRef) -> Result<LabeledDataset> {
    for p in [&d.images, &d.labels] {
        if !p.exists() {
            return Err(CliError::Missing(format!(
                "dataset `{name}`: {} does not exist",
                p.display()
            )));
        }
    }
    Ok(match d.classes {
        Some(c) => load_idx_with_classes(&d.images, &d.labels, c, name)?,
        None => {
            let mut ds = load_idx(&d.images, &d.labels)?;
            ds.name = name.to_string();
            ds
        }
    })
}

fn network(arch: &Arch, image: [usize; 3], classes: usize) -> Result<NetworkSpec> {
    let [channels, height, width] = image;
    match arch {
        Arch::Cnn { layers } => Ok(NetworkSpec::parse(
            InputSpec::Image {
                channels,
                height,
                width,
            },
            layers,
            classes,
        )?),
        Arch::Rnn { hidden } => {
            if channels != 1 {
                return config(format!(
                    "rnn models read single-channel images row by row, got {channels} channels"
                ));
            }
            Ok(NetworkSpec::rnn(width, *hidden, classes))
        }
    }
}

/// Parameterized layer count of the configured architecture.
fn layer_count(arch: &Arch) -> Result<usize> {
    match arch {
        Arch::Cnn { layers } => {
            let mut n = 0;
            for tok in layers.split(',') {
                if LayerSpec::parse(tok.trim(), 2)?.has_params() {
                    n += 1;
                }
            }
            Ok(n)
        }
        Arch::Rnn { .. } => Ok(2),
    }
}

/// FT strategies for the target: FT-l, l = 1..L, for CNNs; for RNNs a single
/// strategy fine-tuning the transferred recurrent layer.
fn ft_strategies(arch: &Arch, classes_differ: bool) -> Result<Vec<(usize, Vec<TransferState>)>> {
    match arch {
        Arch::Cnn { .. } => Ok(ft_family(layer_count(arch)?, classes_differ)?),
        Arch::Rnn { .. } => Ok(vec![(
            0,
            adapt_output_state(vec![TransferState::FineTune; 2], classes_differ),
        )]),
    }
}

fn source_train_config(cfg: &ExperimentConfig) -> TrainConfig {
    TrainConfig {
        seed: derive_seed(cfg.seed, SOURCE_SAMPLER),
        ..cfg.source_train.clone()
    }
}

fn target_train_config(cfg: &ExperimentConfig) -> TrainConfig {
    TrainConfig {
        seed: derive_seed(cfg.seed, TARGET_SAMPLER),
        ..cfg.train.clone()
    }
}

fn split_of(ds: &LabeledDataset, spec: &ptu_core::data::SplitSpec, seed: u64) -> Result<Splits> {
    Ok(split(ds, &ptu_core::data::SplitSpec { seed, ..*spec })?)
}

/// Writes the configured synthetic datasets as IDX files under the output
/// directory and returns the registry lines that reference them.
pub fn cmd_synth(
    cfg: &ExperimentConfig,
    dry_run: bool,
    log: &mut dyn Write,
) -> Result<Vec<String>> {
    let Some(synth) = &cfg.synth else {
        return config("`synth.kind` is not set");
    };
    let names: Vec<String> = match synth {
        SynthConfig::Pair(_) => vec!["synth-source".into(), "synth-target".into()],
        SynthConfig::Glyphs { alphabets, .. } => std::iter::once("digits".to_string())
            .chain(alphabets.iter().map(|(n, _)| n.clone()))
            .collect(),
    };
    let paths = |n: &str| {
        (
            cfg.out.join(format!("{n}-images.idx")),
            cfg.out.join(format!("{n}-labels.idx")),
        )
    };
    let registry: Vec<String> = names
        .iter()
        .flat_map(|n| {
            let (i, l) = paths(n);
            [
                format!("dataset.{n}.images = {}", i.display()),
                format!("dataset.{n}.labels = {}", l.display()),
            ]
        })
        .collect();
    if dry_run {
        say!(
            log,
            "would write {} datasets to {}:",
            names.len(),
            cfg.out.display()
        );
        for line in &registry {
            say!(log, "  {line}");
        }
        return Ok(registry);
    }
    let sets: Vec<LabeledDataset> = match synth {
        SynthConfig::Pair(spec) => {
            let (s, t) = synth_transfer_pair_with(spec)?;
            vec![s, t]
        }
        SynthConfig::Glyphs {
            digits_per_class,
            alphabets,
            per_class,
        } => {
            let mut v = vec![glyph_digits(*digits_per_class, cfg.seed)?];
            for (name, classes) in alphabets {
                v.push(glyph_alphabet(name, *classes, *per_class, cfg.seed)?);
            }
            v
        }
    };
    create_dir(&cfg.out)?;
    for (name, ds) in names.iter().zip(&sets) {
        let (i, l) = paths(name);
        write_idx(ds, &i, &l)?;
        say!(
            log,
            "{name}: {} images, {} classes",
            ds.len(),
            ds.class_count
        );
    }
    write_file(&cfg.out.join("datasets.cfg"), registry.join("\n") + "\n")?;
    Ok(registry)
}

#[derive(Clone, Debug)]
pub struct SourceOutcome {
    pub checkpoint: PathBuf,
    pub test_accuracy: f64,
    pub report: ExperimentReport,
}

/// Trains the source network on its own dataset and writes its parameters.
pub fn cmd_train_source(
    cfg: &ExperimentConfig,
    dry_run: bool,
    log: &mut dyn Write,
) -> Result<Option<SourceOutcome>> {
    let Some(name) = &cfg.source else {
        return config("`source.dataset` is not set");
    };
    if dry_run {
        say!(log, "{}", cfg.describe());
        say!(
            log,
            "would train the source network on `{name}` and write {}",
            cfg.checkpoint.display()
        );
        return Ok(None);
    }
    let t0 = Instant::now();
    let ds = load_dataset(name, cfg.dataset(name))?;
    let splits = split_of(&ds, &cfg.source_split, derive_seed(cfg.seed, SOURCE_SPLIT))?;
    let spec = network(&cfg.arch, ds.image_shape(), ds.class_count)?;
    let init = derive_seed(cfg.seed, SOURCE_INIT);
    let Selection { report, model } = holdout_select(
        || AssembledModel::scratch(&spec, init),
        &splits,
        &source_train_config(cfg),
        Method::NoTl,
    )?;
    if let Some(dir) = cfg.checkpoint.parent() {
        create_dir(dir)?;
    }
    model.target_params.save(&cfg.checkpoint)?;
    create_dir(&cfg.out)?;
    write_file(
        &cfg.out.join(format!("{}_source.csv", cfg.setting)),
        report.curve_csv(),
    )?;
    let acc = report.test_accuracy.unwrap_or(0.0);
    say!(
        log,
        "source `{name}`: test accuracy {acc:.4} (lr {}, {:.1}s) -> {}",
        report
            .selected_lr
            .map(|l| l.to_string())
            .unwrap_or_default(),
        t0.elapsed().as_secs_f64(),
        cfg.checkpoint.display()
    );
    Ok(Some(SourceOutcome {
        checkpoint: cfg.checkpoint.clone(),
        test_accuracy: acc,
        report,
    }))
}

/// Output width of a checkpoint's final layer.
fn checkpoint_classes(params: &ParamSet, layers: usize, file: &Path) -> Result<usize> {
    let name = format!("l{layers}.weight");
    match params.get(&name).map(|t| t.shape().to_vec()) {
        Some(s) if s.len() == 2 => Ok(s[1]),
        _ => Err(CliError::Malformed {
            file: file.display().to_string(),
            line: 0,
            msg: format!("no 2-d `{name}` output weight"),
        }),
    }
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub reports: Vec<ExperimentReport>,
    pub summary: PathBuf,
}

/// Runs every configured method on the target through hold-out selection and
/// writes per-method curves, a selection log, gate statistics and the summary.
pub fn cmd_run(
    cfg: &ExperimentConfig,
    dry_run: bool,
    log: &mut dyn Write,
) -> Result<Option<RunOutcome>> {
    let Some(name) = &cfg.target else {
        return config("`target.dataset` is not set");
    };
    let needs_source = cfg.methods.iter().any(|m| m.needs_source());
    if dry_run {
        say!(log, "{}", cfg.describe());
        say!(log, "plan:");
        for m in &cfg.methods {
            match m {
                MethodKind::Ft => {
                    // Whether the output is re-initialized depends on the data.
                    for (l, s) in ft_strategies(&cfg.arch, true)? {
                        let states: Vec<&str> = s.iter().map(|t| t.name()).collect();
                        say!(log, "  ft{l}  [{}]", states.join(", "));
                    }
                }
                m => say!(log, "  {}", m.name()),
            }
        }
        if needs_source {
            say!(log, "source checkpoint {}", cfg.checkpoint.display());
        }
        say!(
            log,
            "would write {}_<method>.csv, {}_selection.csv and {SUMMARY_FILE} to {}",
            cfg.setting,
            cfg.setting,
            cfg.out.display()
        );
        return Ok(None);
    }
    let source_params = if needs_source {
        if !cfg.checkpoint.exists() {
            return Err(CliError::Missing(format!(
                "source checkpoint {} not found; run `ptu train-source` first",
                cfg.checkpoint.display()
            )));
        }
        Some(ParamSet::load(&cfg.checkpoint)?)
    } else {
        None
    };
    let ds = load_dataset(name, cfg.dataset(name))?;
    let splits = split_of(&ds, &cfg.split, derive_seed(cfg.seed, TARGET_SPLIT))?;
    let spec = network(&cfg.arch, ds.image_shape(), ds.class_count)?;
    let source = match source_params {
        Some(params) => {
            let classes = checkpoint_classes(&params, spec.layer_count(), &cfg.checkpoint)?;
            let spec = network(&cfg.arch, ds.image_shape(), classes)?;
            Some(SourceNet { spec, params })
        }
        None => None,
    };
    let init = derive_seed(cfg.seed, TARGET_INIT);
    let tcfg = target_train_config(cfg);
    create_dir(&cfg.out)?;
    let mut reports = Vec::new();
    for &m in &cfg.methods {
        let t0 = Instant::now();
        let mut batch: Vec<ExperimentReport> = Vec::new();
        match m {
            MethodKind::NoTl => batch.push(
                holdout_select(
                    || AssembledModel::scratch(&spec, init),
                    &splits,
                    &tcfg,
                    Method::NoTl,
                )?
                .report,
            ),
            MethodKind::Ft => {
                let src = source.as_ref().expect("loaded above");
                for (l, states) in ft_strategies(&cfg.arch, src.spec.classes() != spec.classes())? {
                    let ft = spec.clone().with_states(states)?;
                    let sel = holdout_select(
                        || AssembledModel::transfer(&ft, &src.params, init),
                        &splits,
                        &tcfg,
                        Method::FineTune(l),
                    )?;
                    batch.push(sel.report);
                }
            }
            MethodKind::Ptu => {
                let src = source.as_ref().expect("loaded above");
                let sel = match cfg.arch {
                    Arch::Cnn { .. } => holdout_select(
                        || assemble_ptu_cnn(src, &spec, init, cfg.ptu),
                        &splits,
                        &tcfg,
                        Method::Ptu,
                    )?,
                    Arch::Rnn { .. } => holdout_select(
                        || assemble_ptu_rnn(src, &spec, init, cfg.ptu),
                        &splits,
                        &tcfg,
                        Method::Ptu,
                    )?,
                };
                if let Some(stats) = &sel.report.gate_stats {
                    write_file(
                        &cfg.out.join(format!("{}_ptu_gates.csv", cfg.setting)),
                        gate_stats_csv(stats),
                    )?;
                }
                batch.push(sel.report);
            }
            MethodKind::Rg => batch.push(random_guess_report(ds.class_count)?),
            MethodKind::Knn => batch.push(knn_select(&splits, &cfg.knn_candidates)?),
        }
        for r in &batch {
            if r.method.is_trained() {
                write_file(
                    &cfg.out
                        .join(format!("{}_{}.csv", cfg.setting, r.method.label())),
                    r.curve_csv(),
                )?;
            }
            let lr = r
                .selected_lr
                .map(|l| format!(" lr {l}"))
                .unwrap_or_default();
            say!(
                log,
                "{:<10} test {:.4}{lr} ({:.1}s)",
                r.method.label(),
                r.test_accuracy.unwrap_or(0.0),
                t0.elapsed().as_secs_f64()
            );
        }
        reports.extend(batch);
    }
    let mut selection = format!("{SELECTION_HEADER}\n");
    for r in &reports {
        for c in &r.candidates {
            selection += &format!(
                "{},{},{},{}\n",
                r.method.label(),
                c.learning_rate,
                c.final_val_accuracy,
                c.diverged
            );
        }
    }
    write_file(
        &cfg.out.join(format!("{}_selection.csv", cfg.setting)),
        selection,
    )?;
    let rows = summarize(&reports)?;
    let summary = cfg.out.join(SUMMARY_FILE);
    write_file(&summary, summary_csv(&rows))?;
    if let Some(d) = rows.iter().find_map(|r| r.delta_vs_best_ft) {
        say!(log, "ptu vs best ft: {d:+.2}%");
    }
    say!(log, "wrote {}", summary.display());
    Ok(Some(RunOutcome { reports, summary }))
}
