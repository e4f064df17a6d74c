use std::fmt;

use ptu_tensor::Padding;

use crate::error::{config, Error, Result};

/// Per-layer transfer state.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TransferState {
    /// Fresh initialization, trained.
    Random,
    /// Copied from the source, trained.
    FineTune,
    /// Copied from the source, never updated.
    Frozen,
}

impl TransferState {
    pub const ALL: [TransferState; 3] = [
        TransferState::Random,
        TransferState::FineTune,
        TransferState::Frozen,
    ];

    pub fn copies_source(self) -> bool {
        self != TransferState::Random
    }

    pub fn trainable(self) -> bool {
        self != TransferState::Frozen
    }

    pub fn name(self) -> &'static str {
        match self {
            TransferState::Random => "random",
            TransferState::FineTune => "finetune",
            TransferState::Frozen => "frozen",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LayerSpec {
    Conv {
        filters: usize,
        kernel: usize,
        stride: usize,
        padding: Padding,
        separable: bool,
    },
    Pool {
        size: usize,
    },
    Dense {
        out: usize,
    },
    RnnCell {
        hidden: usize,
    },
    Flatten,
    Output {
        classes: usize,
    },
}

impl LayerSpec {
    pub fn conv(filters: usize, kernel: usize) -> Self {
        LayerSpec::Conv {
            filters,
            kernel,
            stride: 1,
            padding: Padding::Valid,
            separable: false,
        }
    }

    pub fn has_params(&self) -> bool {
        matches!(
            self,
            LayerSpec::Conv { .. }
                | LayerSpec::Dense { .. }
                | LayerSpec::RnnCell { .. }
                | LayerSpec::Output { .. }
        )
    }

    /// Parses one token of the compact layer syntax:
    /// `conv:N:K[:sN][:same|:valid][:sep]`, `pool:S`, `dense:N`, `rnn:H`,
    /// `flatten`, `output[:C]`. A bare `output` takes `classes`.
    pub fn parse(token: &str, classes: usize) -> Result<Self> {
        let parts: Vec<&str> = token.trim().split(':').collect();
        let num = |i: usize| -> Result<usize> {
            let s = parts
                .get(i)
                .ok_or_else(|| Error::Config(format!("layer `{token}`: missing field {i}")))?;
            match s.parse::<usize>() {
                Ok(v) if v >= 1 => Ok(v),
                _ => config(format!("layer `{token}`: `{s}` is not a positive integer")),
            }
        };
        let arity = |n: usize| -> Result<()> {
            if parts.len() != n {
                return config(format!("layer `{token}`: expected {} field(s)", n - 1));
            }
            Ok(())
        };
        match parts[0] {
            "conv" => {
                let (filters, kernel) = (num(1)?, num(2)?);
                let (mut stride, mut padding, mut separable) = (1, Padding::Valid, false);
                for opt in &parts[3..] {
                    match *opt {
                        "same" => padding = Padding::Same,
                        "valid" => padding = Padding::Valid,
                        "sep" => separable = true,
                        s if s.starts_with('s')
                            && s[1..].parse::<usize>().is_ok_and(|v| v >= 1) =>
                        {
                            stride = s[1..].parse().unwrap()
                        }
                        other => {
                            return config(format!(
                                "layer `{token}`: unknown conv option `{other}`"
                            ))
                        }
                    }
                }
                Ok(LayerSpec::Conv {
                    filters,
                    kernel,
                    stride,
                    padding,
                    separable,
                })
            }
            "pool" => {
                arity(2)?;
                Ok(LayerSpec::Pool { size: num(1)? })
            }
            "dense" => {
                arity(2)?;
                Ok(LayerSpec::Dense { out: num(1)? })
            }
            "rnn" => {
                arity(2)?;
                Ok(LayerSpec::RnnCell { hidden: num(1)? })
            }
            "flatten" => {
                arity(1)?;
                Ok(LayerSpec::Flatten)
            }
            "output" if parts.len() == 1 => Ok(LayerSpec::Output { classes }),
            "output" => {
                arity(2)?;
                Ok(LayerSpec::Output { classes: num(1)? })
            }
            other => config(format!("unknown layer kind `{other}`")),
        }
    }
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerSpec::Conv {
                filters,
                kernel,
                stride,
                padding,
                separable,
            } => {
                write!(f, "conv:{filters}:{kernel}")?;
                if *stride != 1 {
                    write!(f, ":s{stride}")?;
                }
                if *padding == Padding::Same {
                    write!(f, ":same")?;
                }
                if *separable {
                    write!(f, ":sep")?;
                }
                Ok(())
            }
            LayerSpec::Pool { size } => write!(f, "pool:{size}"),
            LayerSpec::Dense { out } => write!(f, "dense:{out}"),
            LayerSpec::RnnCell { hidden } => write!(f, "rnn:{hidden}"),
            LayerSpec::Flatten => write!(f, "flatten"),
            LayerSpec::Output { classes } => write!(f, "output:{classes}"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InputSpec {
    Image {
        channels: usize,
        height: usize,
        width: usize,
    },
    /// Rows of a `[T×features]` sequence, one per step; any `T ≥ 1`.
    Sequence { features: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Family {
    Cnn,
    Rnn,
}

/// A layered network. `states` holds one transfer state per parameterized
/// layer, so its length is the layer count `L`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NetworkSpec {
    pub input: InputSpec,
    pub layers: Vec<LayerSpec>,
    pub states: Vec<TransferState>,
}

impl NetworkSpec {
    pub fn new(input: InputSpec, layers: Vec<LayerSpec>) -> Self {
        let l = layers.iter().filter(|l| l.has_params()).count();
        NetworkSpec {
            input,
            layers,
            states: vec![TransferState::Random; l],
        }
    }

    /// Five parameterized layers on 1×28×28 images: two 5×5 convolutions with
    /// 2×2 max-pooling, two hidden dense layers, and the classifier.
    pub fn lenet(classes: usize) -> Self {
        NetworkSpec::new(
            InputSpec::Image {
                channels: 1,
                height: 28,
                width: 28,
            },
            vec![
                LayerSpec::conv(32, 5),
                LayerSpec::Pool { size: 2 },
                LayerSpec::conv(64, 5),
                LayerSpec::Pool { size: 2 },
                LayerSpec::Flatten,
                LayerSpec::Dense { out: 256 },
                LayerSpec::Dense { out: 128 },
                LayerSpec::Output { classes },
            ],
        )
    }

    pub fn rnn(features: usize, hidden: usize, classes: usize) -> Self {
        NetworkSpec::new(
            InputSpec::Sequence { features },
            vec![LayerSpec::RnnCell { hidden }, LayerSpec::Output { classes }],
        )
    }

    /// Parses a comma-separated layer list; see [`LayerSpec::parse`].
    pub fn parse(input: InputSpec, layers: &str, classes: usize) -> Result<Self> {
        let layers = layers
            .split(',')
            .filter(|t| !t.trim().is_empty())
            .map(|t| LayerSpec::parse(t, classes))
            .collect::<Result<Vec<_>>>()?;
        let spec = NetworkSpec::new(input, layers);
        spec.shapes()?;
        Ok(spec)
    }

    pub fn with_states(mut self, states: Vec<TransferState>) -> Result<Self> {
        if states.len() != self.layer_count() {
            return config(format!(
                "{} transfer states given for {} parameterized layers",
                states.len(),
                self.layer_count()
            ));
        }
        self.states = states;
        Ok(self)
    }

    /// `L`: the number of parameterized layers, output included.
    pub fn layer_count(&self) -> usize {
        self.layers.iter().filter(|l| l.has_params()).count()
    }

    pub fn classes(&self) -> usize {
        match self.layers.last() {
            Some(LayerSpec::Output { classes }) => *classes,
            _ => 0,
        }
    }

    pub fn family(&self) -> Family {
        if self
            .layers
            .iter()
            .any(|l| matches!(l, LayerSpec::RnnCell { .. }))
        {
            Family::Rnn
        } else {
            Family::Cnn
        }
    }

    pub fn layers_string(&self) -> String {
        self.layers
            .iter()
            .map(|l| l.to_string())
            .collect::<Vec<_>>()
            .join(",")
    }

    /// Per-sample output shape of every layer, validating the whole stack.
    pub fn shapes(&self) -> Result<Vec<Vec<usize>>> {
        let outputs = self
            .layers
            .iter()
            .filter(|l| matches!(l, LayerSpec::Output { .. }))
            .count();
        if outputs != 1 || !matches!(self.layers.last(), Some(LayerSpec::Output { .. })) {
            return config("a network needs exactly one output layer, placed last");
        }
        if self.states.len() != self.layer_count() {
            return config("transfer states do not match the parameterized layer count");
        }
        match self.input {
            InputSpec::Sequence { features } => {
                if features < 1 {
                    return config("sequence features must be at least 1");
                }
                match self.layers.as_slice() {
                    [LayerSpec::RnnCell { hidden }, LayerSpec::Output { classes }] => {
                        if *hidden < 1 || *classes < 1 {
                            return config("hidden size and classes must be at least 1");
                        }
                        Ok(vec![vec![*hidden], vec![*classes]])
                    }
                    _ => config(
                        "a recurrent network is exactly one rnn cell followed by the output layer",
                    ),
                }
            }
            InputSpec::Image {
                channels,
                height,
                width,
            } => {
                if channels < 1 || height < 1 || width < 1 {
                    return config("image dimensions must be at least 1");
                }
                let mut shape = vec![channels, height, width];
                let mut out = Vec::with_capacity(self.layers.len());
                for (i, layer) in self.layers.iter().enumerate() {
                    shape = next_shape(i, layer, &shape)?;
                    out.push(shape.clone());
                }
                Ok(out)
            }
        }
    }

    /// Input shape each parameterized layer consumes, by layer number − 1.
    pub(crate) fn layer_inputs(&self) -> Result<Vec<Vec<usize>>> {
        let shapes = self.shapes()?;
        let mut prev = match self.input {
            InputSpec::Image {
                channels,
                height,
                width,
            } => vec![channels, height, width],
            InputSpec::Sequence { features } => vec![features],
        };
        let mut out = Vec::new();
        for (layer, shape) in self.layers.iter().zip(shapes) {
            if layer.has_params() {
                out.push(prev.clone());
            }
            prev = shape;
        }
        Ok(out)
    }

    /// Per-sample activation shape at each junction: the post-activation
    /// output of parameterized layers `1..L−1`.
    pub fn junction_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let shapes = self.shapes()?;
        let mut out: Vec<Vec<usize>> = self
            .layers
            .iter()
            .zip(shapes)
            .filter(|(l, _)| l.has_params())
            .map(|(_, s)| s)
            .collect();
        out.pop();
        Ok(out)
    }
}

fn next_shape(i: usize, layer: &LayerSpec, shape: &[usize]) -> Result<Vec<usize>> {
    let at = |msg: String| Error::Config(format!("layer {} ({layer}): {msg}", i + 1));
    match *layer {
        LayerSpec::Conv {
            filters,
            kernel,
            stride,
            padding,
            ..
        } => {
            let [_, h, w] = shape else {
                return Err(at(format!("needs an image input, got {shape:?}")));
            };
            if filters < 1 || kernel < 1 || stride < 1 {
                return Err(at("sizes must be at least 1".into()));
            }
            let extent = |n: usize| -> Result<usize> {
                match padding {
                    Padding::Same => Ok(n.div_ceil(stride)),
                    Padding::Valid if kernel <= n => Ok((n - kernel) / stride + 1),
                    Padding::Valid => Err(at(format!(
                        "{kernel}×{kernel} kernel exceeds {h}×{w} input"
                    ))),
                }
            };
            Ok(vec![filters, extent(*h)?, extent(*w)?])
        }
        LayerSpec::Pool { size } => {
            let [c, h, w] = shape else {
                return Err(at(format!("needs an image input, got {shape:?}")));
            };
            if size < 1 || size > *h || size > *w {
                return Err(at(format!("pool size {size} does not fit {h}×{w}")));
            }
            Ok(vec![*c, h / size, w / size])
        }
        LayerSpec::Flatten => Ok(vec![shape.iter().product()]),
        LayerSpec::Dense { out: n } | LayerSpec::Output { classes: n } => {
            if shape.len() != 1 {
                return Err(at(format!(
                    "needs a flat input, got {shape:?}; add a flatten layer"
                )));
            }
            if n < 1 {
                return Err(at("width must be at least 1".into()));
            }
            Ok(vec![n])
        }
        LayerSpec::RnnCell { .. } => Err(at(
            "rnn cells are not allowed in a convolutional stack".into()
        )),
    }
}
