use ptu_tensor::{Activation, Graph, Tensor, Var};

use super::build::{apply_transfer_state, build_network, FreezeMask};
use super::spec::{Family, InputSpec, LayerSpec, NetworkSpec};
use crate::error::{config, Result};
use crate::params::ParamSet;
use crate::ptu::{
    ptu_graph, ptu_init, ptu_init_conv, BoundPtu, GateOverride, PtuNodes, PtuOutput, PtuParams,
};
use crate::seeds::derive_seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Assembly {
    /// A single network, possibly initialized from a source.
    Plain,
    /// One PTU after each parameterized layer below the output.
    PtuCnn,
    /// One PTU shared by every time step.
    PtuRnn,
}

/// How PTUs are built for an assembly.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PtuOptions {
    pub scale: f32,
    /// Defaults to relu for convolutional and tanh for recurrent assemblies.
    pub phi: Option<Activation>,
    /// Spatial kernel of convolutional junctions.
    pub kernel: usize,
    pub separable: bool,
}

impl Default for PtuOptions {
    fn default() -> Self {
        PtuOptions {
            scale: 0.1,
            phi: None,
            kernel: 3,
            separable: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SourceNet {
    pub spec: NetworkSpec,
    pub params: ParamSet,
}

#[derive(Clone, Debug)]
pub struct AssembledModel {
    pub kind: Assembly,
    pub topology: NetworkSpec,
    pub target_params: ParamSet,
    pub mask: FreezeMask,
    pub ptus: Vec<PtuParams>,
    /// Frozen; read but never written by training.
    pub source: Option<SourceNet>,
}

/// Everything recorded by one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardPass {
    pub logits: Var,
    pub junctions: Vec<PtuNodes>,
    /// Trainable leaves in [`AssembledModel::trainable_tensors_mut`] order.
    pub trainable: Vec<Var>,
    /// PTU weight leaves, per unit.
    pub ptu_vars: Vec<Vec<Var>>,
}

impl AssembledModel {
    /// A randomly initialized network with every layer trainable.
    pub fn scratch(spec: &NetworkSpec, seed: u64) -> Result<Self> {
        let params = build_network(spec, seed)?;
        let mask = FreezeMask(vec![true; params.len()]);
        Ok(AssembledModel {
            kind: Assembly::Plain,
            topology: spec.clone(),
            target_params: params,
            mask,
            ptus: Vec::new(),
            source: None,
        })
    }

    /// A network initialized from `source` according to `spec.states`.
    pub fn transfer(spec: &NetworkSpec, source: &ParamSet, seed: u64) -> Result<Self> {
        let fresh = build_network(spec, seed)?;
        let (params, mask) = apply_transfer_state(&fresh, source, &spec.states)?;
        Ok(AssembledModel {
            kind: Assembly::Plain,
            topology: spec.clone(),
            target_params: params,
            mask,
            ptus: Vec::new(),
            source: None,
        })
    }

    pub fn trainable_tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let AssembledModel {
            target_params,
            mask,
            ptus,
            ..
        } = self;
        let mut out: Vec<&mut Tensor> = target_params
            .entries_mut()
            .iter_mut()
            .enumerate()
            .filter(|(i, _)| mask.trainable(*i))
            .map(|(_, (_, t))| t)
            .collect();
        for p in ptus.iter_mut() {
            out.extend(p.tensors_mut());
        }
        out
    }

    pub fn trainable_scalar_count(&self) -> usize {
        let target: usize = (0..self.target_params.len())
            .filter(|&i| self.mask.trainable(i))
            .map(|i| self.target_params.tensor(i).len())
            .sum();
        target
            + self
                .ptus
                .iter()
                .flat_map(|p| p.tensors())
                .map(|t| t.len())
                .sum::<usize>()
    }

    /// Records the forward computation on `g`. With `track` off every leaf
    /// is a constant and no gradients can be taken.
    pub fn record(
        &self,
        g: &mut Graph,
        batch: &Tensor,
        track: bool,
        gates: GateOverride,
    ) -> Result<ForwardPass> {
        let x = g.constant(batch.clone());
        check_batch(&self.topology, g.shape(x))?;
        let mut trainable = Vec::new();
        let target_leaves: Vec<Var> = (0..self.target_params.len())
            .map(|i| {
                let t = self.target_params.tensor(i).clone();
                if track && self.mask.trainable(i) {
                    let v = g.param(t);
                    trainable.push(v);
                    v
                } else {
                    g.constant(t)
                }
            })
            .collect();
        let bound: Vec<BoundPtu> = self.ptus.iter().map(|p| p.bind(g, track)).collect();
        let ptu_vars: Vec<Vec<Var>> = bound.iter().map(|b| b.vars()).collect();
        if track {
            trainable.extend(ptu_vars.iter().flatten().copied());
        }

        let source_states = match (&self.source, self.kind) {
            (Some(src), Assembly::PtuCnn | Assembly::PtuRnn) => {
                let leaves: Vec<Var> = src
                    .params
                    .iter()
                    .map(|(_, t)| g.constant(t.clone()))
                    .collect();
                let mut states = Vec::new();
                let net = Net {
                    spec: &src.spec,
                    params: &src.params,
                    leaves: &leaves,
                };
                net.run(g, x, &mut |_, _, h| {
                    states.push(h);
                    Ok(h)
                })?;
                states
            }
            _ => Vec::new(),
        };

        let net = Net {
            spec: &self.topology,
            params: &self.target_params,
            leaves: &target_leaves,
        };
        let mut junctions = Vec::new();
        let logits = match self.kind {
            Assembly::Plain => net.run(g, x, &mut |_, _, h| Ok(h))?,
            Assembly::PtuCnn => net.run(g, x, &mut |g, l, h_t| {
                let l_count = self.topology.layer_count();
                if l >= l_count {
                    return Ok(h_t);
                }
                let nodes = ptu_graph(g, &bound[l - 1], source_states[l - 1], h_t, gates)?;
                junctions.push(nodes);
                Ok(nodes.combined)
            })?,
            Assembly::PtuRnn => net.run(g, x, &mut |g, step, h_t| {
                let nodes = ptu_graph(g, &bound[0], source_states[step - 1], h_t, gates)?;
                junctions.push(nodes);
                Ok(nodes.combined)
            })?,
        };
        Ok(ForwardPass {
            logits,
            junctions,
            trainable,
            ptu_vars,
        })
    }

    /// Logits and per-junction PTU outputs for `batch`.
    pub fn forward(
        &self,
        batch: &Tensor,
        track_gradients: bool,
    ) -> Result<(Tensor, Vec<PtuOutput>)> {
        self.forward_with(batch, track_gradients, GateOverride::NONE)
    }

    pub fn forward_with(
        &self,
        batch: &Tensor,
        track_gradients: bool,
        gates: GateOverride,
    ) -> Result<(Tensor, Vec<PtuOutput>)> {
        let mut g = Graph::new();
        let pass = self.record(&mut g, batch, track_gradients, gates)?;
        let outs = pass.junctions.iter().map(|n| n.output(&g)).collect();
        Ok((g.value(pass.logits).clone(), outs))
    }
}

fn check_batch(spec: &NetworkSpec, shape: &[usize]) -> Result<()> {
    match spec.input {
        InputSpec::Image {
            channels,
            height,
            width,
        } => {
            if shape.len() != 4 || shape[1..] != [channels, height, width] {
                return config(format!(
                    "batch {shape:?} does not match input [B×{channels}×{height}×{width}]"
                ));
            }
        }
        InputSpec::Sequence { features } => {
            let ok = matches!(shape.len(), 3 | 4)
                && shape[shape.len() - 1] == features
                && (shape.len() == 3 || shape[1] == 1);
            if !ok {
                return config(format!(
                    "batch {shape:?} is not a [B×T×{features}] sequence batch"
                ));
            }
        }
    }
    Ok(())
}

/// A network's layers bound to tape leaves. `hook(g, l, h)` sees the
/// post-activation output of parameterized layer `l` (recurrent: the hidden
/// state after step `l`) and returns what the next layer consumes.
struct Net<'a> {
    spec: &'a NetworkSpec,
    params: &'a ParamSet,
    leaves: &'a [Var],
}

type Hook<'h> = dyn FnMut(&mut Graph, usize, Var) -> Result<Var> + 'h;

impl Net<'_> {
    fn leaf(&self, l: usize, role: &str) -> Var {
        let name = format!("l{l}.{role}");
        self.leaves[self
            .params
            .index_of(&name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))]
    }

    fn run(&self, g: &mut Graph, x: Var, hook: &mut Hook<'_>) -> Result<Var> {
        match self.spec.family() {
            Family::Cnn => self.run_stack(g, x, hook),
            Family::Rnn => self.run_recurrent(g, x, hook),
        }
    }

    fn run_stack(&self, g: &mut Graph, x: Var, hook: &mut Hook<'_>) -> Result<Var> {
        let mut h = x;
        let mut l = 0;
        for layer in &self.spec.layers {
            if layer.has_params() {
                l += 1;
            }
            h = match *layer {
                LayerSpec::Conv {
                    stride,
                    padding,
                    separable,
                    ..
                } => {
                    let y = if separable {
                        g.depthwise_separable_conv2d(
                            h,
                            self.leaf(l, "depth"),
                            self.leaf(l, "point"),
                            stride,
                            padding,
                        )?
                    } else {
                        g.conv2d(h, self.leaf(l, "weight"), stride, padding)?
                    };
                    let y = g.add_bias(y, self.leaf(l, "bias"))?;
                    let y = g.relu(y);
                    hook(g, l, y)?
                }
                LayerSpec::Pool { size } => g.max_pool2d(h, size)?,
                LayerSpec::Flatten => g.flatten(h)?,
                LayerSpec::Dense { .. } => {
                    let y = g.matmul(h, self.leaf(l, "weight"))?;
                    let y = g.add_bias(y, self.leaf(l, "bias"))?;
                    let y = g.relu(y);
                    hook(g, l, y)?
                }
                LayerSpec::Output { .. } => {
                    let y = g.matmul(h, self.leaf(l, "weight"))?;
                    g.add_bias(y, self.leaf(l, "bias"))?
                }
                LayerSpec::RnnCell { .. } => {
                    return config("rnn cell inside a convolutional stack")
                }
            };
        }
        Ok(h)
    }

    fn run_recurrent(&self, g: &mut Graph, x: Var, hook: &mut Hook<'_>) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        let (b, f) = (shape[0], shape[shape.len() - 1]);
        let steps = shape[shape.len() - 2];
        if steps < 1 {
            return config("input sequence has no steps");
        }
        let flat = g.reshape(x, [b, steps * f])?;
        let (w_x, w_h, bias) = (
            self.leaf(1, "w_x"),
            self.leaf(1, "w_h"),
            self.leaf(1, "bias"),
        );
        // The initial state is zero, so the first step needs no recurrent product.
        let mut h: Option<Var> = None;
        for t in 0..steps {
            let x_t = g.slice(flat, 1, t * f, f)?;
            let mut pre = g.matmul(x_t, w_x)?;
            if let Some(prev) = h {
                let rec = g.matmul(prev, w_h)?;
                pre = g.add(pre, rec)?;
            }
            let pre = g.add_bias(pre, bias)?;
            let state = g.tanh(pre);
            h = Some(hook(g, t + 1, state)?);
        }
        let last = h.expect("at least one step");
        let y = g.matmul(last, self.leaf(2, "weight"))?;
        Ok(g.add_bias(y, self.leaf(2, "bias"))?)
    }
}

fn check_shared_architecture(source: &NetworkSpec, target: &NetworkSpec) -> Result<()> {
    if source.input != target.input {
        return config(format!(
            "source input {:?} differs from target input {:?}",
            source.input, target.input
        ));
    }
    let (ls, lt) = (&source.layers, &target.layers);
    if ls.len() != lt.len() {
        return config(format!(
            "source has {} layers, target {}",
            ls.len(),
            lt.len()
        ));
    }
    let mut l = 0;
    for (a, b) in ls.iter().zip(lt).take(ls.len() - 1) {
        if a.has_params() {
            l += 1;
        }
        if a != b {
            return config(format!("layer {l}: source `{a}` and target `{b}` differ"));
        }
    }
    Ok(())
}

fn check_source_params(src: &SourceNet) -> Result<()> {
    let expected = build_network(&src.spec, 0)?;
    for (name, t) in expected.iter() {
        let l = ParamSet::layer_of(name).unwrap_or(0);
        src.params.expect_shape(name, t.shape(), l)?;
    }
    Ok(())
}

/// Source frozen, target freshly initialized from `seed`, and one PTU per
/// junction `1..L−1`.
pub fn assemble_ptu_cnn(
    source: &SourceNet,
    spec: &NetworkSpec,
    seed: u64,
    opts: PtuOptions,
) -> Result<AssembledModel> {
    if spec.family() != Family::Cnn {
        return config("assemble_ptu_cnn needs a convolutional spec");
    }
    check_shared_architecture(&source.spec, spec)?;
    check_source_params(source)?;
    let phi = opts.phi.unwrap_or(Activation::Relu);
    let mut ptus = Vec::new();
    for (j, shape) in spec.junction_shapes()?.iter().enumerate() {
        let unit_seed = derive_seed(seed, 1000 + j as u64);
        let mut p = match shape.as_slice() {
            [d] => ptu_init(*d, phi, unit_seed, opts.scale)?,
            [c, _, _] => {
                ptu_init_conv(*c, opts.kernel, opts.separable, phi, unit_seed, opts.scale)?
            }
            other => {
                return config(format!(
                    "junction {}: unsupported activation shape {other:?}",
                    j + 1
                ))
            }
        };
        p.layer = j + 1;
        ptus.push(p);
    }
    let mut model = AssembledModel::scratch(spec, seed)?;
    model.kind = Assembly::PtuCnn;
    model.ptus = ptus;
    model.source = Some(source.clone());
    Ok(model)
}

/// Source and target recurrent nets with one PTU shared across steps.
pub fn assemble_ptu_rnn(
    source: &SourceNet,
    spec: &NetworkSpec,
    seed: u64,
    opts: PtuOptions,
) -> Result<AssembledModel> {
    let hidden = |s: &NetworkSpec| match s.layers.first() {
        Some(LayerSpec::RnnCell { hidden }) if s.family() == Family::Rnn => Ok(*hidden),
        _ => config("assemble_ptu_rnn needs recurrent source and target specs"),
    };
    let (hs, ht) = (hidden(&source.spec)?, hidden(spec)?);
    if hs != ht {
        return config(format!(
            "layer 1: source hidden size {hs} differs from target hidden size {ht}"
        ));
    }
    check_shared_architecture(&source.spec, spec)?;
    check_source_params(source)?;
    let phi = opts.phi.unwrap_or(Activation::Tanh);
    let ptu = ptu_init(ht, phi, derive_seed(seed, 1000), opts.scale)?;
    let mut model = AssembledModel::scratch(spec, seed)?;
    model.kind = Assembly::PtuRnn;
    model.ptus = vec![ptu];
    model.source = Some(source.clone());
    Ok(model)
}
