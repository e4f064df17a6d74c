use ptu_tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::spec::{Family, InputSpec, LayerSpec, NetworkSpec, TransferState};
use crate::error::{config, Result};
use crate::params::ParamSet;

/// Name, shape and Glorot fan-in/fan-out of every tensor of layer `l`.
pub(crate) fn layer_tensors(
    l: usize,
    layer: &LayerSpec,
    input: &[usize],
) -> Vec<(String, Vec<usize>, usize, usize)> {
    let name = |role: &str| format!("l{l}.{role}");
    match *layer {
        LayerSpec::Conv {
            filters: n,
            kernel: k,
            separable: false,
            ..
        } => {
            let c = input[0];
            vec![
                (name("weight"), vec![n, c, k, k], c * k * k, n * k * k),
                (name("bias"), vec![n], 0, 0),
            ]
        }
        LayerSpec::Conv {
            filters: n,
            kernel: k,
            separable: true,
            ..
        } => {
            let c = input[0];
            vec![
                (name("depth"), vec![c, k, k], k * k, k * k),
                (name("point"), vec![n, c, 1, 1], c, n),
                (name("bias"), vec![n], 0, 0),
            ]
        }
        LayerSpec::Dense { out } | LayerSpec::Output { classes: out } => {
            let i = input[0];
            vec![
                (name("weight"), vec![i, out], i, out),
                (name("bias"), vec![out], 0, 0),
            ]
        }
        LayerSpec::RnnCell { hidden: h } => {
            let f = input[0];
            vec![
                (name("w_x"), vec![f, h], f, h),
                (name("w_h"), vec![h, h], h, h),
                (name("bias"), vec![h], 0, 0),
            ]
        }
        LayerSpec::Pool { .. } | LayerSpec::Flatten => Vec::new(),
    }
}

/// Initial tensors of layer `l`. Each layer draws from its own stream, so a
/// layer's values depend only on `(seed, l)`.
fn init_layer(seed: u64, l: usize, layer: &LayerSpec, input: &[usize], out: &mut ParamSet) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(l as u64);
    for (name, shape, fan_in, fan_out) in layer_tensors(l, layer, input) {
        let t = if fan_in == 0 {
            Tensor::zeros(shape)
        } else if name.ends_with(".w_h") {
            orthogonal(shape[0], &mut rng)
        } else {
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt() as f32;
            Tensor::uniform(shape, -a, a, &mut rng)
        };
        out.push(name, t);
    }
}

/// Random orthogonal `n × n` matrix: Gram-Schmidt on Gaussian rows.
fn orthogonal(n: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let normal = rand_distr::StandardNormal;
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(n);
    while rows.len() < n {
        let mut v: Vec<f64> = (0..n).map(|_| rng.sample(normal)).collect();
        for _ in 0..2 {
            for q in &rows {
                let d: f64 = v.iter().zip(q).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(q).for_each(|(a, b)| *a -= d * b);
            }
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-6 {
            rows.push(v.into_iter().map(|a| a / norm).collect());
        }
    }
    Tensor::from_vec(
        vec![n, n],
        rows.into_iter().flatten().map(|a| a as f32).collect(),
    )
}

/// Random parameters for any valid spec: Glorot-uniform weights, orthogonal
/// recurrent weights, zero biases.
pub fn build_network(spec: &NetworkSpec, seed: u64) -> Result<ParamSet> {
    let inputs = spec.layer_inputs()?;
    let mut out = ParamSet::new();
    let param_layers = spec.layers.iter().filter(|l| l.has_params());
    for (i, (layer, input)) in param_layers.zip(&inputs).enumerate() {
        init_layer(seed, i + 1, layer, input, &mut out);
    }
    Ok(out)
}

pub fn build_cnn(spec: &NetworkSpec, seed: u64) -> Result<ParamSet> {
    if spec.family() != Family::Cnn || matches!(spec.input, InputSpec::Sequence { .. }) {
        return config(
            "build_cnn: spec contains layers that are not legal in a convolutional network",
        );
    }
    build_network(spec, seed)
}

/// Vanilla recurrent classifier `h_t = tanh(x_t W_x + h_{t−1} W_h + b)` with a
/// dense head on the last state.
pub fn build_rnn(hidden: usize, input_dim: usize, classes: usize, seed: u64) -> Result<ParamSet> {
    if hidden < 1 || input_dim < 1 || classes < 1 {
        return config(format!(
            "rnn dimensions must be positive (hidden {hidden}, input {input_dim}, classes {classes})"
        ));
    }
    build_network(&NetworkSpec::rnn(input_dim, hidden, classes), seed)
}

/// Which target tensors receive gradient updates, aligned with a [`ParamSet`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FreezeMask(pub Vec<bool>);

impl FreezeMask {
    pub fn trainable(&self, i: usize) -> bool {
        self.0[i]
    }

    pub fn trainable_count(&self) -> usize {
        self.0.iter().filter(|&&t| t).count()
    }
}

/// Applies one transfer state per layer: `Random` keeps the target's values,
/// `FineTune` and `Frozen` copy the source's, and `Frozen` clears the
/// trainable flag.
pub fn apply_transfer_state(
    target: &ParamSet,
    source: &ParamSet,
    states: &[TransferState],
) -> Result<(ParamSet, FreezeMask)> {
    let mut out = ParamSet::new();
    let mut mask = Vec::with_capacity(target.len());
    for (name, t) in target.iter() {
        let Some(l) = ParamSet::layer_of(name) else {
            return config(format!("parameter {name} has no layer number"));
        };
        let Some(&state) = states.get(l - 1) else {
            return config(format!("no transfer state for layer {l}"));
        };
        let value = if state.copies_source() {
            source.expect_shape(name, t.shape(), l)?.clone()
        } else {
            t.clone()
        };
        out.push(name, value);
        mask.push(state.trainable());
    }
    Ok((out, FreezeMask(mask)))
}
