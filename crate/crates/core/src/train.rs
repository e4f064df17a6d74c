//! SGD training, evaluation, hold-out learning-rate selection, the FT-l
//! family, the non-parametric baselines and the method comparison table.

use std::fmt::{self, Write as _};

use ptu_tensor::{Graph, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{LabeledDataset, Splits};
use crate::error::{config, contract, Result};
use crate::params::ParamSet;
use crate::ptu::{GateAccumulator, GateOverride, GateStats};
use crate::regularization::{total_regularized_loss, PenaltyConfig};
use crate::seeds::derive_seed;
use crate::zoo::{AssembledModel, Assembly, FreezeMask, TransferState};

pub const DEFAULT_EVAL_EVERY: usize = 100;
/// Rows per forward pass during evaluation.
pub const EVAL_CHUNK: usize = 256;
pub const KNN_CANDIDATES: [usize; 4] = [1, 3, 5, 10];

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f32,
    pub batch_size: usize,
    pub max_steps: usize,
    pub seed: u64,
    pub penalty: PenaltyConfig,
    pub lr_candidates: Vec<f32>,
    pub eval_every: usize,
}

impl TrainConfig {
    /// A config whose only candidate is `learning_rate`.
    pub fn new(learning_rate: f32, batch_size: usize, max_steps: usize, seed: u64) -> Self {
        TrainConfig {
            learning_rate,
            batch_size,
            max_steps,
            seed,
            penalty: PenaltyConfig::default(),
            lr_candidates: vec![learning_rate],
            eval_every: DEFAULT_EVAL_EVERY,
        }
    }

    pub fn with_candidates(mut self, candidates: Vec<f32>) -> Self {
        if let Some(&first) = candidates.first() {
            self.learning_rate = first;
        }
        self.lr_candidates = candidates;
        self
    }

    pub fn with_lr(&self, lr: f32) -> Self {
        TrainConfig {
            learning_rate: lr,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 1 {
            return config("train.batch_size must be at least 1");
        }
        if self.max_steps < 1 {
            return config("train.max_steps must be at least 1");
        }
        if self.eval_every < 1 {
            return config("train.eval_every must be at least 1");
        }
        if !self.lr_candidates.contains(&self.learning_rate) {
            return config(format!(
                "learning rate {} is not among the candidates {:?}",
                self.learning_rate, self.lr_candidates
            ));
        }
        if let Some(bad) = self
            .lr_candidates
            .iter()
            .find(|lr| !(lr.is_finite() && **lr >= 0.0))
        {
            return config(format!(
                "learning rate {bad} must be finite and non-negative"
            ));
        }
        self.penalty.validate()
    }

    /// Number of validation checkpoints one full run records.
    pub fn checkpoint_count(&self) -> usize {
        self.max_steps.div_ceil(self.eval_every)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Method {
    NoTl,
    /// Transfer with the first `l` layers frozen.
    FineTune(usize),
    Ptu,
    RandomGuess,
    Knn(usize),
}

impl Method {
    /// Family key: `notl`, `ft`, `ptu`, `rg` or `knn`.
    pub fn name(self) -> &'static str {
        match self {
            Method::NoTl => "notl",
            Method::FineTune(_) => "ft",
            Method::Ptu => "ptu",
            Method::RandomGuess => "rg",
            Method::Knn(_) => "knn",
        }
    }

    pub fn label(self) -> String {
        match self {
            Method::FineTune(l) => format!("ft{l}"),
            Method::Knn(k) => format!("knn(k={k})"),
            m => m.name().to_string(),
        }
    }

    pub fn is_trained(self) -> bool {
        matches!(self, Method::NoTl | Method::FineTune(_) | Method::Ptu)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Checkpoint {
    pub step: usize,
    /// Mean training loss over the steps since the previous checkpoint.
    pub train_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CandidateResult {
    pub learning_rate: f32,
    pub final_val_accuracy: f64,
    pub diverged: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentReport {
    pub method: Method,
    pub selected_lr: Option<f32>,
    /// Data loss of every step taken, in order.
    pub train_loss_curve: Vec<f64>,
    pub checkpoints: Vec<Checkpoint>,
    pub final_val_accuracy: f64,
    pub diverged: bool,
    /// Set once, by selection, after training has finished.
    pub test_accuracy: Option<f64>,
    pub gate_stats: Option<Vec<GateStats>>,
    pub candidates: Vec<CandidateResult>,
}

impl ExperimentReport {
    fn untrained(method: Method, val: f64, test: f64) -> Self {
        ExperimentReport {
            method,
            selected_lr: None,
            train_loss_curve: Vec::new(),
            checkpoints: Vec::new(),
            final_val_accuracy: val,
            diverged: false,
            test_accuracy: Some(test),
            gate_stats: None,
            candidates: Vec::new(),
        }
    }

    pub fn val_acc_curve(&self) -> Vec<(usize, f64)> {
        self.checkpoints
            .iter()
            .map(|c| (c.step, c.val_accuracy))
            .collect()
    }

    /// `step,train_loss,val_acc`, one row per checkpoint.
    pub fn curve_csv(&self) -> String {
        let mut out = String::from("step,train_loss,val_acc\n");
        for c in &self.checkpoints {
            writeln!(out, "{},{},{}", c.step, c.train_loss, c.val_accuracy).unwrap();
        }
        out
    }
}

/// Mean cross-entropy of `logits` against `labels`, evaluated eagerly.
pub fn cross_entropy_loss(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let shape = logits.shape();
    if shape.len() != 2 || shape[0] != labels.len() {
        return contract(format!("logits {shape:?} for {} labels", labels.len()));
    }
    if let Some(bad) = labels.iter().find(|&&l| l >= shape[1]) {
        return contract(format!("label {bad} outside 0..{}", shape[1]));
    }
    let mut g = Graph::new();
    let v = g.constant(logits.clone());
    let loss = g.cross_entropy(v, labels)?;
    Ok(g.scalar_value(loss))
}

/// `p ← p − lr·g` for every trainable entry; frozen entries are untouched.
pub fn sgd_step(params: &mut ParamSet, grads: &[Tensor], mask: &FreezeMask, lr: f32) -> Result<()> {
    if grads.len() != params.len() || mask.0.len() != params.len() {
        return contract(format!(
            "{} parameters, {} gradients and a mask of {} entries",
            params.len(),
            grads.len(),
            mask.0.len()
        ));
    }
    for (i, g) in grads.iter().enumerate() {
        if !mask.trainable(i) {
            continue;
        }
        let p = params.tensor_mut(i);
        if p.shape() != g.shape() {
            return contract(format!(
                "gradient {:?} does not match parameter {:?}",
                g.shape(),
                p.shape()
            ));
        }
        descend(p, g, lr);
    }
    Ok(())
}

fn descend(p: &mut Tensor, g: &Tensor, lr: f32) {
    for (w, d) in p.data_mut().iter_mut().zip(g.data()) {
        *w -= lr * d;
    }
}

/// Shuffles once per epoch and drops the incomplete tail. A training set
/// smaller than the batch is used whole.
struct BatchSampler {
    order: Vec<usize>,
    batch: usize,
    pos: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    fn new(n: usize, batch: usize, seed: u64) -> Self {
        let batch = batch.min(n);
        BatchSampler {
            order: (0..n).collect(),
            batch,
            pos: n,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn next_batch(&mut self) -> &[usize] {
        if self.pos + self.batch > self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let b = &self.order[self.pos..self.pos + self.batch];
        self.pos += self.batch;
        b
    }
}

fn check_splits(splits: &Splits) -> Result<()> {
    for (name, ds) in [
        ("train", &splits.train),
        ("validation", &splits.val),
        ("test", &splits.test),
    ] {
        if ds.is_empty() {
            return config(format!("{name} split is empty"));
        }
    }
    Ok(())
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn each_chunk(
    model: &AssembledModel,
    ds: &LabeledDataset,
    mut f: impl FnMut(usize, &Graph, &crate::zoo::ForwardPass) -> Result<()>,
) -> Result<()> {
    let mut start = 0;
    while start < ds.len() {
        let count = EVAL_CHUNK.min(ds.len() - start);
        let x = ds.images.narrow_leading(start, count)?;
        let mut g = Graph::new();
        let pass = model.record(&mut g, &x, false, GateOverride::NONE)?;
        f(start, &g, &pass)?;
        start += count;
    }
    Ok(())
}

pub fn predict(model: &AssembledModel, ds: &LabeledDataset) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(ds.len());
    each_chunk(model, ds, |_, g, pass| {
        let logits = g.value(pass.logits);
        out.extend((0..logits.shape()[0]).map(|i| argmax(logits.row(i))));
        Ok(())
    })?;
    Ok(out)
}

fn accuracy(predicted: &[usize], labels: &[usize]) -> f64 {
    let hits = predicted.iter().zip(labels).filter(|(p, l)| p == l).count();
    hits as f64 / labels.len() as f64
}

pub fn evaluate(model: &AssembledModel, ds: &LabeledDataset) -> Result<f64> {
    Ok(accuracy(&predict(model, ds)?, &ds.labels))
}

/// Accuracy plus per-PTU gate statistics over `ds`.
pub fn evaluate_with_gates(
    model: &AssembledModel,
    ds: &LabeledDataset,
) -> Result<(f64, Vec<GateStats>)> {
    let mut accs: Vec<GateAccumulator> = model
        .ptus
        .iter()
        .map(|p| GateAccumulator::new(p.layer))
        .collect();
    let mut predicted = Vec::with_capacity(ds.len());
    each_chunk(model, ds, |_, g, pass| {
        let logits = g.value(pass.logits);
        predicted.extend((0..logits.shape()[0]).map(|i| argmax(logits.row(i))));
        for (j, n) in pass.junctions.iter().enumerate() {
            // Recurrent assemblies apply their single unit at every step.
            let unit = if model.kind == Assembly::PtuRnn { 0 } else { j };
            accs[unit].add(g.value(n.r), g.value(n.z));
        }
        Ok(())
    })?;
    let stats = accs
        .iter()
        .map(GateAccumulator::finish)
        .collect::<Result<Vec<_>>>()?;
    Ok((accuracy(&predicted, &ds.labels), stats))
}

/// Trains `model` in place with plain SGD, validating every
/// `cfg.eval_every` steps and at the last step. The test split is not read.
/// A non-finite loss stops the run and scores it zero.
pub fn train(
    model: &mut AssembledModel,
    splits: &Splits,
    cfg: &TrainConfig,
    method: Method,
) -> Result<ExperimentReport> {
    cfg.validate()?;
    check_splits(splits)?;
    let train = &splits.train;
    let mut sampler = BatchSampler::new(train.len(), cfg.batch_size, derive_seed(cfg.seed, 0xBA7C));
    let mut losses = Vec::with_capacity(cfg.max_steps);
    let mut checkpoints = Vec::with_capacity(cfg.checkpoint_count());
    let mut window_start = 0;
    let mut diverged = false;
    for step in 1..=cfg.max_steps {
        let idx = sampler.next_batch();
        let x = train.images.gather_leading(idx)?;
        let labels: Vec<usize> = idx.iter().map(|&i| train.labels[i]).collect();
        let mut g = Graph::new();
        let pass = model.record(&mut g, &x, true, GateOverride::NONE)?;
        let data_loss = g.cross_entropy(pass.logits, &labels)?;
        let ptu_weights: Vec<_> = pass.ptu_vars.iter().flatten().copied().collect();
        let total = total_regularized_loss(&mut g, data_loss, &ptu_weights, &cfg.penalty)?;
        let loss = g.scalar_value(data_loss);
        losses.push(loss);
        if !loss.is_finite() || !g.scalar_value(total).is_finite() {
            diverged = true;
            checkpoints.push(Checkpoint {
                step,
                train_loss: window_mean(&losses[window_start..]),
                val_accuracy: 0.0,
            });
            break;
        }
        let grads = g.backward(total)?;
        for (t, v) in model
            .trainable_tensors_mut()
            .into_iter()
            .zip(&pass.trainable)
        {
            descend(t, &grads.wrt(*v), cfg.learning_rate);
        }
        if step % cfg.eval_every == 0 || step == cfg.max_steps {
            let val_accuracy = evaluate(model, &splits.val)?;
            checkpoints.push(Checkpoint {
                step,
                train_loss: window_mean(&losses[window_start..]),
                val_accuracy,
            });
            window_start = losses.len();
        }
    }
    let final_val_accuracy = checkpoints.last().map_or(0.0, |c| c.val_accuracy);
    Ok(ExperimentReport {
        method,
        selected_lr: Some(cfg.learning_rate),
        train_loss_curve: losses,
        checkpoints,
        final_val_accuracy,
        diverged,
        test_accuracy: None,
        gate_stats: None,
        candidates: Vec::new(),
    })
}

fn window_mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// The winning report and its trained model.
#[derive(Clone, Debug)]
pub struct Selection {
    pub report: ExperimentReport,
    pub model: AssembledModel,
}

/// Trains a fresh model per candidate learning rate and keeps the one with
/// the highest final validation accuracy (ties go to the smaller rate).
/// Test accuracy, and gate statistics for PTU assemblies, are measured on
/// the winner only.
pub fn holdout_select<F>(
    mut factory: F,
    splits: &Splits,
    cfg: &TrainConfig,
    method: Method,
) -> Result<Selection>
where
    F: FnMut() -> Result<AssembledModel>,
{
    if cfg.lr_candidates.is_empty() {
        return config("no learning-rate candidates");
    }
    check_splits(splits)?;
    let mut best: Option<(ExperimentReport, AssembledModel)> = None;
    let mut candidates = Vec::with_capacity(cfg.lr_candidates.len());
    for &lr in &cfg.lr_candidates {
        let mut model = factory()?;
        let report = train(&mut model, splits, &cfg.with_lr(lr), method)?;
        candidates.push(CandidateResult {
            learning_rate: lr,
            final_val_accuracy: report.final_val_accuracy,
            diverged: report.diverged,
        });
        let better = match &best {
            None => true,
            Some((b, _)) => {
                let (va, vb) = (report.final_val_accuracy, b.final_val_accuracy);
                va > vb || (va == vb && lr < b.selected_lr.unwrap_or(f32::INFINITY))
            }
        };
        if better {
            best = Some((report, model));
        }
    }
    let (mut report, model) = best.expect("at least one candidate");
    report.candidates = candidates;
    if model.ptus.is_empty() {
        report.test_accuracy = Some(evaluate(&model, &splits.test)?);
    } else {
        let (acc, stats) = evaluate_with_gates(&model, &splits.test)?;
        report.test_accuracy = Some(acc);
        report.gate_stats = Some(stats);
    }
    Ok(Selection { report, model })
}

/// Strategy `l` (for `l = 1..=L`) freezes layers `1..=l` and fine-tunes the
/// rest.
pub fn enumerate_ft_strategies(layers: usize) -> Result<Vec<Vec<TransferState>>> {
    if layers < 1 {
        return contract("a network needs at least one layer");
    }
    Ok((1..=layers)
        .map(|l| {
            (1..=layers)
                .map(|i| {
                    if i <= l {
                        TransferState::Frozen
                    } else {
                        TransferState::FineTune
                    }
                })
                .collect()
        })
        .collect())
}

/// Every assignment of `states` to `layers` layers, in lexicographic order.
pub fn enumerate_full_space(
    layers: usize,
    states: &[TransferState],
) -> Result<Vec<Vec<TransferState>>> {
    if layers < 1 || states.is_empty() {
        return contract("the strategy space needs at least one layer and one state");
    }
    let mut out: Vec<Vec<TransferState>> = vec![Vec::new()];
    for _ in 0..layers {
        out = out
            .into_iter()
            .flat_map(|prefix| {
                states.iter().map(move |&s| {
                    let mut v = prefix.clone();
                    v.push(s);
                    v
                })
            })
            .collect();
    }
    Ok(out)
}

/// Makes a strategy usable on a target: the output layer is re-initialized
/// when the class counts differ and is always trained.
pub fn adapt_output_state(
    mut states: Vec<TransferState>,
    classes_differ: bool,
) -> Vec<TransferState> {
    if let Some(last) = states.last_mut() {
        if classes_differ {
            *last = TransferState::Random;
        } else if *last == TransferState::Frozen {
            *last = TransferState::FineTune;
        }
    }
    states
}

/// FT-l strategies adapted to the target, dropping any that coincide after
/// adaptation. Each entry is `(l, states)`.
pub fn ft_family(layers: usize, classes_differ: bool) -> Result<Vec<(usize, Vec<TransferState>)>> {
    let mut out: Vec<(usize, Vec<TransferState>)> = Vec::new();
    for (i, s) in enumerate_ft_strategies(layers)?.into_iter().enumerate() {
        let s = adapt_output_state(s, classes_differ);
        if !out.iter().any(|(_, t)| *t == s) {
            out.push((i + 1, s));
        }
    }
    Ok(out)
}

fn squared_distance(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| ((x - y) as f64).powi(2)).sum()
}

/// Majority label among the `k` training images nearest to `query`
/// (Euclidean on raw pixels). Equal distances keep training order; equal
/// votes go to the smallest label.
pub fn knn_classify(train: &LabeledDataset, query: &[f32], k: usize) -> Result<usize> {
    Ok(knn_classify_many(train, &[query], k)?[0])
}

fn knn_classify_many(train: &LabeledDataset, queries: &[&[f32]], k: usize) -> Result<Vec<usize>> {
    if train.is_empty() {
        return contract("k-NN needs a non-empty training set");
    }
    if k < 1 || k > train.len() {
        return contract(format!("k = {k} outside 1..={}", train.len()));
    }
    let mut out = Vec::with_capacity(queries.len());
    let mut order: Vec<(f64, usize)> = Vec::with_capacity(train.len());
    for q in queries {
        if q.len() != train.pixels(0).len() {
            return contract(format!(
                "query has {} values, training images {}",
                q.len(),
                train.pixels(0).len()
            ));
        }
        order.clear();
        order.extend((0..train.len()).map(|i| (squared_distance(q, train.pixels(i)), i)));
        order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut votes = vec![0usize; train.class_count];
        for &(_, i) in &order[..k] {
            votes[train.labels[i]] += 1;
        }
        let top = *votes.iter().max().expect("at least one class");
        out.push(
            votes
                .iter()
                .position(|&v| v == top)
                .expect("max is present"),
        );
    }
    Ok(out)
}

fn knn_accuracy(train: &LabeledDataset, eval: &LabeledDataset, k: usize) -> Result<f64> {
    let queries: Vec<&[f32]> = (0..eval.len()).map(|i| eval.pixels(i)).collect();
    Ok(accuracy(
        &knn_classify_many(train, &queries, k)?,
        &eval.labels,
    ))
}

/// Picks `k` from `candidates` by validation accuracy (ties go to the smaller
/// `k`) and scores it once on the test split.
pub fn knn_select(splits: &Splits, candidates: &[usize]) -> Result<ExperimentReport> {
    check_splits(splits)?;
    let mut best: Option<(usize, f64)> = None;
    for &k in candidates
        .iter()
        .filter(|&&k| k >= 1 && k <= splits.train.len())
    {
        let acc = knn_accuracy(&splits.train, &splits.val, k)?;
        if best.map_or(true, |(bk, ba)| acc > ba || (acc == ba && k < bk)) {
            best = Some((k, acc));
        }
    }
    let Some((k, val)) = best else {
        return config(format!(
            "no k-NN candidate in {candidates:?} fits {} training images",
            splits.train.len()
        ));
    };
    let test = knn_accuracy(&splits.train, &splits.test, k)?;
    Ok(ExperimentReport::untrained(Method::Knn(k), val, test))
}

pub fn random_guess<R: Rng + ?Sized>(classes: usize, rng: &mut R) -> Result<usize> {
    if classes < 1 {
        return contract("random guessing needs at least one class");
    }
    Ok(rng.gen_range(0..classes))
}

/// The random-guess baseline, reported at its expected accuracy.
pub fn random_guess_report(classes: usize) -> Result<ExperimentReport> {
    if classes < 1 {
        return contract("random guessing needs at least one class");
    }
    let acc = 1.0 / classes as f64;
    Ok(ExperimentReport::untrained(Method::RandomGuess, acc, acc))
}

/// `100·(ptu − ft)/ft`.
pub fn relative_improvement(ptu: f64, ft: f64) -> Result<f64> {
    if !(ft > 0.0) {
        return contract(format!("relative improvement over an FT accuracy of {ft}"));
    }
    Ok(100.0 * (ptu - ft) / ft)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Comparison {
    pub ptu_accuracy: f64,
    pub best_ft: Method,
    pub best_ft_accuracy: f64,
    pub delta_percent: f64,
}

fn tested(r: &ExperimentReport) -> Result<f64> {
    r.test_accuracy
        .ok_or_else(|| crate::Error::Contract(format!("{} has no test accuracy", r.method)))
}

/// Δ of the PTU report over the best FT-l report.
pub fn compare_methods(reports: &[ExperimentReport]) -> Result<Comparison> {
    let Some(ptu) = reports.iter().find(|r| r.method == Method::Ptu) else {
        return contract("comparison needs a PTU report");
    };
    let mut best: Option<(Method, f64)> = None;
    for r in reports
        .iter()
        .filter(|r| matches!(r.method, Method::FineTune(_)))
    {
        let acc = tested(r)?;
        if best.map_or(true, |(_, b)| acc > b) {
            best = Some((r.method, acc));
        }
    }
    let Some((best_ft, best_ft_accuracy)) = best else {
        return contract("comparison needs at least one FT report");
    };
    let ptu_accuracy = tested(ptu)?;
    Ok(Comparison {
        ptu_accuracy,
        best_ft,
        best_ft_accuracy,
        delta_percent: relative_improvement(ptu_accuracy, best_ft_accuracy)?,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub method: String,
    pub selected_lr: Option<f32>,
    pub test_accuracy: f64,
    pub delta_vs_best_ft: Option<f64>,
}

/// One row per report, with Δ on the PTU row whenever a comparison exists.
pub fn summarize(reports: &[ExperimentReport]) -> Result<Vec<SummaryRow>> {
    let delta = match compare_methods(reports) {
        Ok(c) => Some(c.delta_percent),
        Err(crate::Error::Contract(_)) if reports.iter().all(|r| r.test_accuracy.is_some()) => None,
        Err(e) => return Err(e),
    };
    reports
        .iter()
        .map(|r| {
            Ok(SummaryRow {
                method: r.method.label(),
                selected_lr: r.selected_lr,
                test_accuracy: tested(r)?,
                delta_vs_best_ft: if r.method == Method::Ptu { delta } else { None },
            })
        })
        .collect()
}

pub const SUMMARY_HEADER: &str = "method,selected_lr,test_accuracy,delta_vs_best_ft";

pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut out = format!("{SUMMARY_HEADER}\n");
    for r in rows {
        let lr = r.selected_lr.map(|v| v.to_string()).unwrap_or_default();
        let delta = r
            .delta_vs_best_ft
            .map(|d| format!("{d:.4}"))
            .unwrap_or_default();
        writeln!(out, "{},{},{},{}", r.method, lr, r.test_accuracy, delta).unwrap();
    }
    out
}
