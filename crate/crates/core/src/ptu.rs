//! The parameter transfer unit: two gates blending a frozen source activation
//! with the target activation of the same layer.
//!
//! With row-major batches `h` of shape `[B×d]`:
//!
//! ```text
//! r   = σ([h_s, h_t] W_r)          z = σ([h_s, h_t] W_z)
//! h_f = (1 − r) ∗ h_s + r ∗ φ(h_s W_h)
//! h̃   = (1 − z) ∗ h_t + z ∗ h_f
//! ```
//!
//! Convolutional junctions replace the products by `same`-padded convolutions
//! over the channel-concatenated maps, optionally depthwise-separable.

use std::fmt::Write as _;

use ptu_tensor::{Activation, Graph, Padding, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{config, contract, Result};

pub const HISTOGRAM_BINS: usize = 10;

/// One learnable map inside a PTU.
#[derive(Clone, Debug, PartialEq)]
pub enum PtuWeight {
    /// `[in × out]`, applied to `[B×in]` rows.
    Dense(Tensor),
    /// `[out × in × K × K]` filters.
    Conv(Tensor),
    /// Depthwise `[in × K × K]` then pointwise `[out × in × 1 × 1]`.
    Separable { depth: Tensor, point: Tensor },
}

impl PtuWeight {
    pub fn tensors(&self) -> Vec<&Tensor> {
        match self {
            PtuWeight::Dense(w) | PtuWeight::Conv(w) => vec![w],
            PtuWeight::Separable { depth, point } => vec![depth, point],
        }
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            PtuWeight::Dense(w) | PtuWeight::Conv(w) => vec![w],
            PtuWeight::Separable { depth, point } => vec![depth, point],
        }
    }

    /// `(in, out)` feature or channel counts.
    pub fn io(&self) -> (usize, usize) {
        match self {
            PtuWeight::Dense(w) => (w.shape()[0], w.shape()[1]),
            PtuWeight::Conv(w) => (w.shape()[1], w.shape()[0]),
            PtuWeight::Separable { point, .. } => (point.shape()[1], point.shape()[0]),
        }
    }

    fn is_dense(&self) -> bool {
        matches!(self, PtuWeight::Dense(_))
    }

    fn bind(&self, g: &mut Graph, trainable: bool) -> BoundWeight {
        let mut leaf = |t: &Tensor| {
            if trainable {
                g.param(t.clone())
            } else {
                g.constant(t.clone())
            }
        };
        match self {
            PtuWeight::Dense(w) => BoundWeight::Dense(leaf(w)),
            PtuWeight::Conv(w) => BoundWeight::Conv(leaf(w)),
            PtuWeight::Separable { depth, point } => {
                BoundWeight::Separable(leaf(depth), leaf(point))
            }
        }
    }
}

#[derive(Clone, Copy, Debug)]
enum BoundWeight {
    Dense(Var),
    Conv(Var),
    Separable(Var, Var),
}

impl BoundWeight {
    fn apply(self, g: &mut Graph, x: Var) -> Result<Var> {
        Ok(match self {
            BoundWeight::Dense(w) => g.matmul(x, w)?,
            BoundWeight::Conv(w) => g.conv2d(x, w, 1, Padding::Same)?,
            BoundWeight::Separable(d, p) => {
                g.depthwise_separable_conv2d(x, d, p, 1, Padding::Same)?
            }
        })
    }

    fn vars(self) -> Vec<Var> {
        match self {
            BoundWeight::Dense(w) | BoundWeight::Conv(w) => vec![w],
            BoundWeight::Separable(d, p) => vec![d, p],
        }
    }
}

/// Weights of one junction. `layer` is the 1-based junction index, used in
/// error messages and gate tables.
#[derive(Clone, Debug, PartialEq)]
pub struct PtuParams {
    pub layer: usize,
    pub w_r: PtuWeight,
    pub w_z: PtuWeight,
    pub w_h: PtuWeight,
    pub phi: Activation,
}

impl PtuParams {
    /// Activation width (features or channels) this unit combines.
    pub fn dim(&self) -> usize {
        self.w_h.io().1
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut v = self.w_r.tensors();
        v.extend(self.w_z.tensors());
        v.extend(self.w_h.tensors());
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = self.w_r.tensors_mut();
        v.extend(self.w_z.tensors_mut());
        v.extend(self.w_h.tensors_mut());
        v
    }

    /// Checkpoint names matching the order of [`Self::tensors`].
    pub fn tensor_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for (gate, w) in [("w_r", &self.w_r), ("w_z", &self.w_z), ("w_h", &self.w_h)] {
            match w {
                PtuWeight::Separable { .. } => {
                    names.push(format!("ptu{}.{gate}.depth", self.layer));
                    names.push(format!("ptu{}.{gate}.point", self.layer));
                }
                _ => names.push(format!("ptu{}.{gate}", self.layer)),
            }
        }
        names
    }

    fn validate(&self) -> Result<()> {
        let d = self.dim();
        let ok =
            self.w_r.io() == (2 * d, d) && self.w_z.io() == (2 * d, d) && self.w_h.io() == (d, d);
        if !ok {
            return config(format!(
                "PTU {}: gate maps must be {}→{d} and the adaptation map {d}→{d}",
                self.layer,
                2 * d
            ));
        }
        Ok(())
    }

    /// Adds the weights to `g`, as parameters when `trainable`.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundPtu {
        BoundPtu {
            layer: self.layer,
            phi: self.phi,
            dense: self.w_h.is_dense(),
            dim: self.dim(),
            w_r: self.w_r.bind(g, trainable),
            w_z: self.w_z.bind(g, trainable),
            w_h: self.w_h.bind(g, trainable),
        }
    }
}

impl PtuParams {
    /// Uses existing tape leaves, in [`Self::tensors`] order, as the weights.
    pub fn bind_to(&self, g: &Graph, leaves: &[Var]) -> Result<BoundPtu> {
        let expected = self.tensors();
        if leaves.len() != expected.len() {
            return contract(format!(
                "PTU {}: {} leaves for {} weight tensors",
                self.layer,
                leaves.len(),
                expected.len()
            ));
        }
        for (v, t) in leaves.iter().zip(&expected) {
            if g.shape(*v) != t.shape() {
                return contract(format!(
                    "PTU {}: leaf {:?} does not match weight {:?}",
                    self.layer,
                    g.shape(*v),
                    t.shape()
                ));
            }
        }
        let mut it = leaves.iter().copied();
        let mut take = |w: &PtuWeight| match w {
            PtuWeight::Dense(_) => BoundWeight::Dense(it.next().unwrap()),
            PtuWeight::Conv(_) => BoundWeight::Conv(it.next().unwrap()),
            PtuWeight::Separable { .. } => {
                BoundWeight::Separable(it.next().unwrap(), it.next().unwrap())
            }
        };
        Ok(BoundPtu {
            layer: self.layer,
            phi: self.phi,
            dense: self.w_h.is_dense(),
            dim: self.dim(),
            w_r: take(&self.w_r),
            w_z: take(&self.w_z),
            w_h: take(&self.w_h),
        })
    }
}

/// A [`PtuParams`] living on a tape.
#[derive(Clone, Copy, Debug)]
pub struct BoundPtu {
    pub layer: usize,
    phi: Activation,
    dense: bool,
    dim: usize,
    w_r: BoundWeight,
    w_z: BoundWeight,
    w_h: BoundWeight,
}

impl BoundPtu {
    /// Leaves in the order of [`PtuParams::tensors`].
    pub fn vars(&self) -> Vec<Var> {
        let mut v = self.w_r.vars();
        v.extend(self.w_z.vars());
        v.extend(self.w_h.vars());
        v
    }
}

/// Forces gate values, bypassing the learned maps. Used to pin the unit to the
/// discrete transfer states.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GateOverride {
    pub r: Option<f32>,
    pub z: Option<f32>,
}

impl GateOverride {
    pub const NONE: GateOverride = GateOverride { r: None, z: None };

    pub fn z(z: f32) -> Self {
        GateOverride {
            r: None,
            z: Some(z),
        }
    }

    pub fn rz(r: f32, z: f32) -> Self {
        GateOverride {
            r: Some(r),
            z: Some(z),
        }
    }

    fn validate(&self) -> Result<()> {
        for v in [self.r, self.z].into_iter().flatten() {
            if !(0.0..=1.0).contains(&v) {
                return config(format!("forced gate value {v} outside [0, 1]"));
            }
        }
        Ok(())
    }
}

/// Tape nodes of one PTU application.
#[derive(Clone, Copy, Debug)]
pub struct PtuNodes {
    pub combined: Var,
    pub r: Var,
    pub z: Var,
    pub h_f: Var,
}

impl PtuNodes {
    pub fn output(&self, g: &Graph) -> PtuOutput {
        PtuOutput {
            combined: g.value(self.combined).clone(),
            r_gate: g.value(self.r).clone(),
            z_gate: g.value(self.z).clone(),
            h_f: g.value(self.h_f).clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PtuOutput {
    pub combined: Tensor,
    pub r_gate: Tensor,
    pub z_gate: Tensor,
    pub h_f: Tensor,
}

fn check_activation(ptu: &BoundPtu, g: &Graph, h: Var, which: &str) -> Result<()> {
    let s = g.shape(h);
    let ok = if ptu.dense {
        s.len() == 2 && s[1] == ptu.dim
    } else {
        s.len() == 4 && s[1] == ptu.dim
    };
    if !ok {
        return config(format!(
            "PTU {}: {which} activation {s:?} does not match unit width {} ({})",
            ptu.layer,
            ptu.dim,
            if ptu.dense {
                "[B×d] expected"
            } else {
                "[B×C×H×W] expected"
            }
        ));
    }
    Ok(())
}

/// Records one PTU application. `h_s` should be a constant: the source
/// network supplies it and is never updated.
pub fn ptu_graph(
    g: &mut Graph,
    ptu: &BoundPtu,
    h_s: Var,
    h_t: Var,
    gates: GateOverride,
) -> Result<PtuNodes> {
    gates.validate()?;
    check_activation(ptu, g, h_s, "source")?;
    check_activation(ptu, g, h_t, "target")?;
    if g.shape(h_s) != g.shape(h_t) {
        return config(format!(
            "PTU {}: source activation {:?} and target activation {:?} differ",
            ptu.layer,
            g.shape(h_s),
            g.shape(h_t)
        ));
    }
    let needs_cat = gates.r.is_none() || gates.z.is_none();
    let cat = if needs_cat {
        Some(g.concat(h_s, h_t, 1)?)
    } else {
        None
    };
    let gate = |g: &mut Graph, forced: Option<f32>, w: BoundWeight| -> Result<Var> {
        match (forced, cat) {
            (Some(v), _) => {
                let shape = g.shape(h_t).to_vec();
                Ok(g.constant(Tensor::full(shape, v)))
            }
            (None, Some(cat)) => {
                let pre = w.apply(g, cat)?;
                Ok(g.sigmoid(pre))
            }
            (None, None) => unreachable!(),
        }
    };
    let r = gate(g, gates.r, ptu.w_r)?;
    let z = gate(g, gates.z, ptu.w_z)?;

    let adapted = ptu.w_h.apply(g, h_s)?;
    let adapted = g.activation(ptu.phi, adapted);
    let keep_r = g.one_minus(r);
    let raw = g.mul(keep_r, h_s)?;
    let tuned = g.mul(r, adapted)?;
    let h_f = g.add(raw, tuned)?;

    let keep_z = g.one_minus(z);
    let target = g.mul(keep_z, h_t)?;
    let transferred = g.mul(z, h_f)?;
    let combined = g.add(target, transferred)?;
    Ok(PtuNodes {
        combined,
        r,
        z,
        h_f,
    })
}

/// Eager evaluation with learned gates.
pub fn ptu_forward(params: &PtuParams, h_s: &Tensor, h_t: &Tensor) -> Result<PtuOutput> {
    ptu_forward_with(params, h_s, h_t, GateOverride::NONE)
}

pub fn ptu_forward_with(
    params: &PtuParams,
    h_s: &Tensor,
    h_t: &Tensor,
    gates: GateOverride,
) -> Result<PtuOutput> {
    params.validate()?;
    let mut g = Graph::new();
    let bound = params.bind(&mut g, false);
    let s = g.constant(h_s.clone());
    let t = g.constant(h_t.clone());
    let nodes = ptu_graph(&mut g, &bound, s, t, gates)?;
    Ok(nodes.output(&g))
}

fn uniform(shape: Vec<usize>, scale: f32, rng: &mut ChaCha8Rng) -> Tensor {
    if scale == 0.0 {
        Tensor::zeros(shape)
    } else {
        Tensor::uniform(shape, -scale, scale, rng)
    }
}

/// Dense unit for `[B×dim]` activations, weights uniform in `[−scale, scale]`.
pub fn ptu_init(dim: usize, phi: Activation, seed: u64, scale: f32) -> Result<PtuParams> {
    if dim < 1 {
        return config("PTU dimension must be at least 1");
    }
    if !(scale >= 0.0 && scale.is_finite()) {
        return config(format!(
            "PTU init scale must be finite and non-negative, got {scale}"
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(PtuParams {
        layer: 1,
        w_r: PtuWeight::Dense(uniform(vec![2 * dim, dim], scale, &mut rng)),
        w_z: PtuWeight::Dense(uniform(vec![2 * dim, dim], scale, &mut rng)),
        w_h: PtuWeight::Dense(uniform(vec![dim, dim], scale, &mut rng)),
        phi,
    })
}

/// Convolutional unit for `[B×channels×H×W]` activations.
pub fn ptu_init_conv(
    channels: usize,
    kernel: usize,
    separable: bool,
    phi: Activation,
    seed: u64,
    scale: f32,
) -> Result<PtuParams> {
    if channels < 1 || kernel < 1 {
        return config("PTU channel count and kernel size must be at least 1");
    }
    if !(scale >= 0.0 && scale.is_finite()) {
        return config(format!(
            "PTU init scale must be finite and non-negative, got {scale}"
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut make = |cin: usize, cout: usize| {
        if separable {
            PtuWeight::Separable {
                depth: uniform(vec![cin, kernel, kernel], scale, &mut rng),
                point: uniform(vec![cout, cin, 1, 1], scale, &mut rng),
            }
        } else {
            PtuWeight::Conv(uniform(vec![cout, cin, kernel, kernel], scale, &mut rng))
        }
    };
    let c = channels;
    Ok(PtuParams {
        layer: 1,
        w_r: make(2 * c, c),
        w_z: make(2 * c, c),
        w_h: make(c, c),
        phi,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct GateStats {
    pub layer_index: usize,
    pub mean_r: f64,
    pub mean_z: f64,
    pub histogram_r: [u64; HISTOGRAM_BINS],
    pub histogram_z: [u64; HISTOGRAM_BINS],
}

fn bin(v: f32) -> usize {
    ((v.clamp(0.0, 1.0) * HISTOGRAM_BINS as f32) as usize).min(HISTOGRAM_BINS - 1)
}

fn accumulate(t: &Tensor, hist: &mut [u64; HISTOGRAM_BINS]) -> f64 {
    let mut sum = 0.0;
    for &v in t.data() {
        sum += v as f64;
        hist[bin(v)] += 1;
    }
    sum
}

/// Gate means and histograms built up batch by batch.
#[derive(Clone, Debug)]
pub struct GateAccumulator {
    layer_index: usize,
    sum_r: f64,
    sum_z: f64,
    count_r: usize,
    count_z: usize,
    histogram_r: [u64; HISTOGRAM_BINS],
    histogram_z: [u64; HISTOGRAM_BINS],
}

impl GateAccumulator {
    pub fn new(layer_index: usize) -> Self {
        GateAccumulator {
            layer_index,
            sum_r: 0.0,
            sum_z: 0.0,
            count_r: 0,
            count_z: 0,
            histogram_r: [0; HISTOGRAM_BINS],
            histogram_z: [0; HISTOGRAM_BINS],
        }
    }

    pub fn add(&mut self, r_gate: &Tensor, z_gate: &Tensor) {
        self.sum_r += accumulate(r_gate, &mut self.histogram_r);
        self.sum_z += accumulate(z_gate, &mut self.histogram_z);
        self.count_r += r_gate.len();
        self.count_z += z_gate.len();
    }

    pub fn finish(&self) -> Result<GateStats> {
        if self.count_r == 0 || self.count_z == 0 {
            return contract(format!("no PTU outputs for layer {}", self.layer_index));
        }
        Ok(GateStats {
            layer_index: self.layer_index,
            mean_r: self.sum_r / self.count_r as f64,
            mean_z: self.sum_z / self.count_z as f64,
            histogram_r: self.histogram_r,
            histogram_z: self.histogram_z,
        })
    }
}

/// Means and 10-bin histograms over every gate element of `outputs`.
pub fn gate_statistics(outputs: &[PtuOutput], layer_index: usize) -> Result<GateStats> {
    let mut acc = GateAccumulator::new(layer_index);
    for o in outputs {
        acc.add(&o.r_gate, &o.z_gate);
    }
    acc.finish()
}

pub fn gate_csv_header() -> String {
    let mut h = String::from("layer,mean_r,mean_z");
    for g in ["r", "z"] {
        for b in 0..HISTOGRAM_BINS {
            write!(h, ",bin{b}_{g}").unwrap();
        }
    }
    h
}

pub fn gate_stats_csv(stats: &[GateStats]) -> String {
    let mut out = gate_csv_header();
    out.push('\n');
    for s in stats {
        write!(out, "{},{},{}", s.layer_index, s.mean_r, s.mean_z).unwrap();
        for c in s.histogram_r.iter().chain(&s.histogram_z) {
            write!(out, ",{c}").unwrap();
        }
        out.push('\n');
    }
    out
}
