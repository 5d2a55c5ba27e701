//! Time-unrolled spiking networks built from a declarative [`NetworkSpec`].
//!
//! Activations are carried time-major: a tensor for all `T` steps has
//! leading dimension `T·N`, block `t` holding timestep `t`. Stateless layers
//! (convolution, linear, norm, pooling) process every step in one call;
//! neuron layers unroll the recurrence. Until the first neuron layer the
//! direct-encoded input is identical at every step, so those layers run once
//! and the result is tiled across time just before it is needed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{NormStats, ParamId, ParamRole, ParamStore, Parameter, Tape, Var};
use crate::error::{Error, Result};
use crate::neurons::{self, LayerTrace, LifConfig, NeuronKind, SpikeCounts};
use crate::tensor::{ConvGeometry, Tensor};

fn one() -> usize {
    1
}
fn yes() -> bool {
    true
}
fn default_eps() -> f32 {
    1e-5
}
fn default_momentum() -> f32 {
    0.1
}
fn default_neuron_kind() -> NeuronKind {
    NeuronKind::Ternary
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "layer", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerSpec {
    Conv {
        out_channels: usize,
        kernel: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        padding: usize,
        #[serde(default = "yes")]
        bias: bool,
    },
    Linear {
        units: usize,
        #[serde(default = "yes")]
        bias: bool,
    },
    /// Per-channel batch normalization with running statistics.
    Norm {
        #[serde(default = "default_eps")]
        eps: f32,
        #[serde(default = "default_momentum")]
        momentum: f32,
    },
    Neuron {
        #[serde(default = "default_neuron_kind")]
        neuron: NeuronKind,
        #[serde(default = "crate::network::default_tau")]
        tau: f32,
        #[serde(default = "crate::network::default_v_th")]
        v_th: f32,
        #[serde(default = "crate::network::default_width")]
        surrogate_width: f32,
    },
    /// Adds the output of layer `from` to the current activation.
    Residual { from: usize },
    /// Non-overlapping average pooling.
    Pool { kernel: usize },
    Flatten,
}

pub(crate) fn default_tau() -> f32 {
    neurons::DEFAULT_TAU
}
pub(crate) fn default_v_th() -> f32 {
    neurons::DEFAULT_THRESHOLD
}
pub(crate) fn default_width() -> f32 {
    neurons::DEFAULT_SURROGATE_WIDTH
}

impl LayerSpec {
    pub fn neuron(cfg: LifConfig) -> Self {
        LayerSpec::Neuron {
            neuron: cfg.kind,
            tau: cfg.tau,
            v_th: cfg.v_th,
            surrogate_width: cfg.surrogate_width,
        }
    }

    pub fn conv(out_channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        LayerSpec::Conv {
            out_channels,
            kernel,
            stride,
            padding,
            bias: true,
        }
    }

    pub fn linear(units: usize) -> Self {
        LayerSpec::Linear { units, bias: true }
    }

    pub fn norm() -> Self {
        LayerSpec::Norm {
            eps: default_eps(),
            momentum: default_momentum(),
        }
    }

    pub fn lif(&self) -> Option<LifConfig> {
        match *self {
            LayerSpec::Neuron {
                neuron,
                tau,
                v_th,
                surrogate_width,
            } => Some(LifConfig {
                kind: neuron,
                tau,
                v_th,
                surrogate_width,
            }),
            _ => None,
        }
    }

    pub fn is_weighted(&self) -> bool {
        matches!(self, LayerSpec::Conv { .. } | LayerSpec::Linear { .. })
    }

    pub fn name(&self) -> &'static str {
        match self {
            LayerSpec::Conv { .. } => "conv",
            LayerSpec::Linear { .. } => "linear",
            LayerSpec::Norm { .. } => "norm",
            LayerSpec::Neuron { .. } => "neuron",
            LayerSpec::Residual { .. } => "residual",
            LayerSpec::Pool { .. } => "pool",
            LayerSpec::Flatten => "flatten",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Encoder {
    /// The same real-valued input at every timestep.
    #[default]
    Direct,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Readout {
    /// Time-average of the final (non-spiking) weighted layer's output.
    #[default]
    MeanPotential,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    /// Per-sample input shape, `[C, H, W]` or `[D]`.
    pub input_shape: Vec<usize>,
    pub timesteps: usize,
    #[serde(default)]
    pub encoder: Encoder,
    #[serde(default)]
    pub readout: Readout,
    pub layers: Vec<LayerSpec>,
}

pub const PRESETS: &[&str] = &["mlp-mnist", "cnn-mnist", "resnet-mini"];

/// Desk-scale presets for 28×28 single-channel inputs.
pub fn build_small_cnn(preset: &str, kind: NeuronKind, timesteps: usize) -> Result<NetworkSpec> {
    let lif = LayerSpec::neuron(LifConfig::new(kind));
    let layers = match preset {
        "mlp-mnist" => vec![
            LayerSpec::Flatten,
            LayerSpec::linear(256),
            lif.clone(),
            LayerSpec::linear(256),
            lif,
            LayerSpec::linear(10),
        ],
        "cnn-mnist" => vec![
            LayerSpec::conv(16, 3, 1, 1),
            LayerSpec::norm(),
            lif.clone(),
            LayerSpec::Pool { kernel: 2 },
            LayerSpec::conv(32, 3, 1, 1),
            LayerSpec::norm(),
            lif,
            LayerSpec::Pool { kernel: 2 },
            LayerSpec::Flatten,
            LayerSpec::linear(10),
        ],
        "resnet-mini" => vec![
            LayerSpec::conv(8, 3, 1, 1),
            LayerSpec::norm(),
            lif.clone(),
            LayerSpec::conv(8, 3, 1, 1),
            LayerSpec::norm(),
            lif.clone(),
            LayerSpec::conv(8, 3, 1, 1),
            LayerSpec::norm(),
            lif.clone(),
            LayerSpec::Residual { from: 2 },
            LayerSpec::conv(16, 4, 2, 1),
            LayerSpec::norm(),
            lif.clone(),
            LayerSpec::conv(16, 3, 1, 1),
            LayerSpec::norm(),
            lif.clone(),
            LayerSpec::conv(16, 3, 1, 1),
            LayerSpec::norm(),
            lif,
            LayerSpec::Residual { from: 12 },
            LayerSpec::Flatten,
            LayerSpec::linear(10),
        ],
        other => {
            return Err(Error::Config(format!(
                "unknown preset {other:?}; available presets: {}",
                PRESETS.join(", ")
            )))
        }
    };
    let spec = NetworkSpec {
        input_shape: vec![1, 28, 28],
        timesteps,
        encoder: Encoder::Direct,
        readout: Readout::MeanPotential,
        layers,
    };
    spec.validate()?;
    Ok(spec)
}

impl NetworkSpec {
    /// Per-sample output shape of every layer.
    pub fn layer_shapes(&self) -> Result<Vec<Vec<usize>>> {
        if self.input_shape.is_empty() || self.input_shape.contains(&0) {
            return Err(Error::Config(format!("invalid input shape {:?}", self.input_shape)));
        }
        let mut shapes: Vec<Vec<usize>> = Vec::with_capacity(self.layers.len());
        let mut cur = self.input_shape.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let bad = |msg: String| Error::Config(format!("layer {i} ({}): {msg}", layer.name()));
            cur = match layer {
                LayerSpec::Conv {
                    out_channels,
                    kernel,
                    stride,
                    padding,
                    ..
                } => {
                    if cur.len() != 3 {
                        return Err(bad(format!("expects a [C,H,W] input, got {cur:?}")));
                    }
                    if *out_channels == 0 {
                        return Err(bad("zero output channels".into()));
                    }
                    let g = ConvGeometry::new(
                        &[1, cur[0], cur[1], cur[2]],
                        &[*out_channels, cur[0], *kernel, *kernel],
                        *stride,
                        *padding,
                    )
                    .map_err(|e| bad(e.to_string()))?;
                    vec![*out_channels, g.out_h, g.out_w]
                }
                LayerSpec::Linear { units, .. } => {
                    if cur.len() != 1 {
                        return Err(bad(format!("expects a flat input, got {cur:?}")));
                    }
                    if *units == 0 {
                        return Err(bad("zero units".into()));
                    }
                    vec![*units]
                }
                LayerSpec::Norm { eps, momentum } => {
                    if !(*eps > 0.0) || !(0.0..=1.0).contains(momentum) {
                        return Err(bad("eps must be positive and momentum in [0,1]".into()));
                    }
                    cur
                }
                LayerSpec::Neuron { .. } => {
                    layer.lif().unwrap().validate().map_err(|e| bad(e.to_string()))?;
                    cur
                }
                LayerSpec::Residual { from } => {
                    if *from >= i {
                        return Err(bad(format!("residual source {from} is not an earlier layer")));
                    }
                    if shapes[*from] != cur {
                        return Err(bad(format!(
                            "residual shapes differ: {:?} from layer {from} vs {cur:?}",
                            shapes[*from]
                        )));
                    }
                    cur
                }
                LayerSpec::Pool { kernel } => {
                    if cur.len() != 3 || *kernel == 0 || !cur[1].is_multiple_of(*kernel) || !cur[2].is_multiple_of(*kernel) {
                        return Err(bad(format!("pool {kernel} does not tile {cur:?}")));
                    }
                    vec![cur[0], cur[1] / kernel, cur[2] / kernel]
                }
                LayerSpec::Flatten => vec![cur.iter().product()],
            };
            shapes.push(cur.clone());
        }
        Ok(shapes)
    }

    pub fn validate(&self) -> Result<()> {
        if self.timesteps == 0 {
            return Err(Error::Config("timesteps must be at least 1".into()));
        }
        let shapes = self.layer_shapes()?;
        match self.layers.last() {
            Some(LayerSpec::Linear { .. }) => {}
            _ => {
                return Err(Error::Config(
                    "the final layer must be a linear readout layer".into(),
                ))
            }
        }
        debug_assert_eq!(shapes.len(), self.layers.len());
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        match self.layers.last() {
            Some(LayerSpec::Linear { units, .. }) => *units,
            _ => 0,
        }
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    /// Input shape of every layer (the previous layer's output).
    pub fn layer_input_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let shapes = self.layer_shapes()?;
        let mut ins = Vec::with_capacity(shapes.len());
        ins.push(self.input_shape.clone());
        ins.extend(shapes.iter().take(shapes.len().saturating_sub(1)).cloned());
        Ok(ins)
    }

    /// For each layer, whether its input carries spikes (as opposed to
    /// real values from the encoder or a non-spiking layer).
    pub fn spiking_inputs(&self) -> Vec<bool> {
        let mut out_spiking: Vec<bool> = Vec::with_capacity(self.layers.len());
        let mut cur = false;
        let mut ins = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            ins.push(cur);
            cur = match layer {
                LayerSpec::Neuron { .. } => true,
                LayerSpec::Conv { .. } | LayerSpec::Linear { .. } | LayerSpec::Norm { .. } => false,
                LayerSpec::Residual { from } => cur && out_spiking[*from],
                LayerSpec::Pool { .. } | LayerSpec::Flatten => cur,
            };
            out_spiking.push(cur);
        }
        ins
    }

    /// Index of the first weighted layer; it consumes real-valued input.
    pub fn first_weighted_layer(&self) -> Option<usize> {
        self.layers.iter().position(LayerSpec::is_weighted)
    }

    pub fn neuron_layers(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l, LayerSpec::Neuron { .. }))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: Self = toml::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    /// Copy of this spec with every neuron layer switched to `kind`.
    pub fn with_neuron_kind(&self, kind: NeuronKind) -> Self {
        let mut spec = self.clone();
        for layer in &mut spec.layers {
            if let LayerSpec::Neuron { neuron, .. } = layer {
                *neuron = kind;
            }
        }
        spec
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Slot {
    Conv {
        weight: ParamId,
        bias: Option<ParamId>,
    },
    Linear {
        weight: ParamId,
        bias: Option<ParamId>,
    },
    Norm {
        gamma: ParamId,
        beta: ParamId,
        mean: ParamId,
        var: ParamId,
    },
    Neuron {
        amplitude: Option<ParamId>,
    },
    Stateless,
}

pub fn param_name(layer: usize, what: &str) -> String {
    format!("layer{layer}.{what}")
}

/// Options for one forward pass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ForwardOptions {
    /// Use batch statistics in norm layers and report them for updating.
    pub train: bool,
    /// Replace hard spikes by their piecewise-linear relaxation.
    pub relaxed: bool,
    /// Keep per-timestep membrane and spike tensors.
    pub record: bool,
}

impl ForwardOptions {
    pub fn eval() -> Self {
        Self::default()
    }

    pub fn train() -> Self {
        Self {
            train: true,
            ..Self::default()
        }
    }

    pub fn recording() -> Self {
        Self {
            record: true,
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NeuronRecord {
    pub layer: usize,
    pub kind: NeuronKind,
    pub counts: SpikeCounts,
    pub trace: Option<LayerTrace>,
}

/// Density of the input consumed by a weighted layer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WeightedInput {
    pub layer: usize,
    pub spiking: bool,
    pub nonzero: usize,
    pub total: usize,
}

/// What happened inside the network during one forward pass.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ForwardRecord {
    pub timesteps: usize,
    pub batch: usize,
    pub neurons: Vec<NeuronRecord>,
    pub weighted_inputs: Vec<WeightedInput>,
}

impl ForwardRecord {
    /// Fraction of neuron outputs that fired, per neuron layer.
    pub fn layer_sparsity(&self) -> Vec<(usize, f64)> {
        self.neurons
            .iter()
            .map(|n| (n.layer, n.counts.firing() as f64 / n.counts.total.max(1) as f64))
            .collect()
    }

    pub fn overall_sparsity(&self) -> f64 {
        let (f, t) = self.neurons.iter().fold((0usize, 0usize), |(f, t), n| {
            (f + n.counts.firing(), t + n.counts.total)
        });
        if t == 0 {
            0.0
        } else {
            f as f64 / t as f64
        }
    }

    /// Merges the counts of another batch into this record.
    pub fn merge_counts(&mut self, other: &ForwardRecord) {
        if self.neurons.is_empty() && self.weighted_inputs.is_empty() {
            self.timesteps = other.timesteps;
            self.neurons = other
                .neurons
                .iter()
                .map(|n| NeuronRecord {
                    trace: None,
                    ..n.clone()
                })
                .collect();
            self.weighted_inputs = other.weighted_inputs.clone();
            self.batch = other.batch;
            return;
        }
        self.batch += other.batch;
        for (a, b) in self.neurons.iter_mut().zip(&other.neurons) {
            a.counts.positive += b.counts.positive;
            a.counts.negative += b.counts.negative;
            a.counts.total += b.counts.total;
        }
        for (a, b) in self.weighted_inputs.iter_mut().zip(&other.weighted_inputs) {
            a.nonzero += b.nonzero;
            a.total += b.total;
        }
    }
}

pub struct TapeForward {
    pub logits: Var,
    pub record: ForwardRecord,
    /// Batch statistics of each norm layer, present in training mode.
    pub norm_stats: Vec<(usize, NormStats)>,
    /// Output of every layer, for locating non-finite values.
    pub layer_outputs: Vec<Var>,
}

#[derive(Clone, Copy)]
struct Act {
    var: Var,
    /// Whether the tensor is time-major `[T·N, ...]` or shared by all steps.
    timed: bool,
}

/// A spec together with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    spec: NetworkSpec,
    params: ParamStore,
    slots: Vec<Slot>,
}

impl Network {
    /// Fresh parameters: fan-in Kaiming normal weights, zero biases, identity
    /// norms and unit spike amplitudes.
    pub fn init(spec: NetworkSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let in_shapes = spec.layer_input_shapes()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for (i, layer) in spec.layers.iter().enumerate() {
            let input = &in_shapes[i];
            let mut kaiming = |shape: Vec<usize>, fan_in: usize| -> Result<Tensor> {
                let normal = Normal::new(0.0f32, (2.0 / fan_in as f32).sqrt())
                    .map_err(|e| Error::Config(e.to_string()))?;
                let n = shape.iter().product();
                Tensor::new(shape, (0..n).map(|_| normal.sample(&mut rng)).collect())
            };
            match layer {
                LayerSpec::Conv {
                    out_channels,
                    kernel,
                    bias,
                    ..
                } => {
                    let c = input[0];
                    let w = kaiming(vec![*out_channels, c, *kernel, *kernel], c * kernel * kernel)?;
                    params.insert(Parameter::new(param_name(i, "weight"), ParamRole::Weight, w))?;
                    if *bias {
                        params.insert(Parameter::new(
                            param_name(i, "bias"),
                            ParamRole::Bias,
                            Tensor::zeros(&[*out_channels]),
                        ))?;
                    }
                }
                LayerSpec::Linear { units, bias } => {
                    let w = kaiming(vec![input[0], *units], input[0])?;
                    params.insert(Parameter::new(param_name(i, "weight"), ParamRole::Weight, w))?;
                    if *bias {
                        params.insert(Parameter::new(
                            param_name(i, "bias"),
                            ParamRole::Bias,
                            Tensor::zeros(&[*units]),
                        ))?;
                    }
                }
                LayerSpec::Norm { .. } => {
                    let c = input[0];
                    params.insert(Parameter::new(param_name(i, "gamma"), ParamRole::NormScale, Tensor::ones(&[c])))?;
                    params.insert(Parameter::new(param_name(i, "beta"), ParamRole::NormShift, Tensor::zeros(&[c])))?;
                    params.insert(Parameter::new(param_name(i, "running_mean"), ParamRole::Buffer, Tensor::zeros(&[c])))?;
                    params.insert(Parameter::new(param_name(i, "running_var"), ParamRole::Buffer, Tensor::ones(&[c])))?;
                }
                LayerSpec::Neuron {
                    neuron: NeuronKind::TrainableTernary,
                    ..
                } => {
                    params.insert(Parameter::new(
                        param_name(i, "amplitude"),
                        ParamRole::Amplitude,
                        Tensor::scalar(1.0),
                    ))?;
                }
                _ => {}
            }
        }
        Self::from_parts(spec, params)
    }

    /// Binds an existing parameter store to a spec, checking every
    /// required parameter is present with the right shape.
    pub fn from_parts(spec: NetworkSpec, params: ParamStore) -> Result<Self> {
        spec.validate()?;
        let in_shapes = spec.layer_input_shapes()?;
        let mut slots = Vec::with_capacity(spec.layers.len());
        let lookup = |i: usize, what: &str, shape: &[usize]| -> Result<ParamId> {
            let name = param_name(i, what);
            let id = params
                .id(&name)
                .ok_or_else(|| Error::Config(format!("missing parameter {name}")))?;
            let got = params.get(id).value.shape();
            if got.iter().product::<usize>() != shape.iter().product::<usize>() {
                return Err(Error::Config(format!(
                    "parameter {name} has shape {got:?}, expected {shape:?}"
                )));
            }
            Ok(id)
        };
        for (i, layer) in spec.layers.iter().enumerate() {
            let input = &in_shapes[i];
            let slot = match layer {
                LayerSpec::Conv {
                    out_channels,
                    kernel,
                    bias,
                    ..
                } => Slot::Conv {
                    weight: lookup(i, "weight", &[*out_channels, input[0], *kernel, *kernel])?,
                    bias: bias.then(|| lookup(i, "bias", &[*out_channels])).transpose()?,
                },
                LayerSpec::Linear { units, bias } => Slot::Linear {
                    weight: lookup(i, "weight", &[input[0], *units])?,
                    bias: bias.then(|| lookup(i, "bias", &[*units])).transpose()?,
                },
                LayerSpec::Norm { .. } => {
                    let c = [input[0]];
                    Slot::Norm {
                        gamma: lookup(i, "gamma", &c)?,
                        beta: lookup(i, "beta", &c)?,
                        mean: lookup(i, "running_mean", &c)?,
                        var: lookup(i, "running_var", &c)?,
                    }
                }
                LayerSpec::Neuron { neuron, .. } => Slot::Neuron {
                    amplitude: (*neuron == NeuronKind::TrainableTernary)
                        .then(|| lookup(i, "amplitude", &[1]))
                        .transpose()?,
                },
                _ => Slot::Stateless,
            };
            slots.push(slot);
        }
        Ok(Self { spec, params, slots })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn into_parts(self) -> (NetworkSpec, ParamStore) {
        (self.spec, self.params)
    }

    /// Current amplitude of a trainable ternary layer, or 1.
    pub fn amplitude(&self, layer: usize) -> f32 {
        match self.slots.get(layer) {
            Some(Slot::Neuron {
                amplitude: Some(id),
            }) => self.params.get(*id).value.data()[0],
            _ => 1.0,
        }
    }

    /// Records the forward pass for `batch[N, ...input_shape]` on `tape`.
    pub fn forward_tape(&self, tape: &mut Tape, batch: &Tensor, opts: ForwardOptions) -> Result<TapeForward> {
        let n = *batch.shape().first().unwrap_or(&0);
        if batch.rank() != self.spec.input_shape.len() + 1 || batch.shape()[1..] != self.spec.input_shape[..] {
            return Err(Error::Config(format!(
                "batch shape {:?} does not match network input {:?}",
                batch.shape(),
                self.spec.input_shape
            )));
        }
        let steps = self.spec.timesteps;
        let shapes = self.spec.layer_shapes()?;
        let spiking = self.spec.spiking_inputs();
        let mut record = ForwardRecord {
            timesteps: steps,
            batch: n,
            ..Default::default()
        };
        let mut norm_stats = Vec::new();
        let mut outputs: Vec<Act> = Vec::with_capacity(self.spec.layers.len());
        let mut act = Act {
            var: tape.constant(batch.clone()),
            timed: false,
        };
        let tile = |tape: &mut Tape, a: Act| -> Result<Act> {
            if a.timed {
                Ok(a)
            } else {
                Ok(Act {
                    var: tape.repeat_rows(a.var, steps)?,
                    timed: true,
                })
            }
        };
        for (i, layer) in self.spec.layers.iter().enumerate() {
            let rows = if act.timed { steps * n } else { n };
            let mut out_shape = vec![rows];
            out_shape.extend_from_slice(&shapes[i]);
            let var = match (layer, &self.slots[i]) {
                (LayerSpec::Conv { stride, padding, .. }, Slot::Conv { weight, bias }) => {
                    self.note_input(tape, act, i, spiking[i], &mut record);
                    let w = tape.param(&self.params, *weight);
                    let mut y = tape.conv2d(act.var, w, *stride, *padding)?;
                    if let Some(b) = bias {
                        let b = tape.param(&self.params, *b);
                        y = tape.bias_add(y, b)?;
                    }
                    y
                }
                (LayerSpec::Linear { .. }, Slot::Linear { weight, bias }) => {
                    self.note_input(tape, act, i, spiking[i], &mut record);
                    let w = tape.param(&self.params, *weight);
                    let mut y = tape.matmul(act.var, w)?;
                    if let Some(b) = bias {
                        let b = tape.param(&self.params, *b);
                        y = tape.bias_add(y, b)?;
                    }
                    y
                }
                (
                    LayerSpec::Norm { eps, .. },
                    Slot::Norm {
                        gamma,
                        beta,
                        mean,
                        var,
                    },
                ) => {
                    let g = tape.param(&self.params, *gamma);
                    let b = tape.param(&self.params, *beta);
                    let running = (!opts.train).then(|| {
                        (
                            self.params.get(*mean).value.data(),
                            self.params.get(*var).value.data(),
                        )
                    });
                    let (y, stats) = tape.batch_norm(act.var, g, b, *eps, running)?;
                    if let Some(s) = stats {
                        norm_stats.push((i, s));
                    }
                    y
                }
                (LayerSpec::Neuron { .. }, Slot::Neuron { amplitude }) => {
                    let cfg = layer.lif().expect("neuron layer");
                    act = tile(tape, act)?;
                    let amp = amplitude.map(|id| tape.param(&self.params, id));
                    let out = neurons::lif_sequence(tape, act.var, amp, &cfg, steps, opts.relaxed, opts.record)?;
                    record.neurons.push(NeuronRecord {
                        layer: i,
                        kind: cfg.kind,
                        counts: out.counts,
                        trace: out.trace,
                    });
                    out_shape[0] = steps * n;
                    outputs.push(Act {
                        var: out.spikes,
                        timed: true,
                    });
                    act = outputs[i];
                    continue;
                }
                (LayerSpec::Residual { from }, _) => {
                    let other = outputs[*from];
                    let (a, b) = if act.timed == other.timed {
                        (act, other)
                    } else {
                        (tile(tape, act)?, tile(tape, other)?)
                    };
                    if a.timed {
                        out_shape[0] = steps * n;
                    }
                    let y = tape.add(a.var, b.var)?;
                    outputs.push(Act {
                        var: y,
                        timed: a.timed,
                    });
                    act = outputs[i];
                    continue;
                }
                (LayerSpec::Pool { kernel }, _) => tape.avg_pool2d(act.var, *kernel)?,
                (LayerSpec::Flatten, _) => tape.reshape(act.var, &out_shape)?,
                _ => unreachable!("slot/layer mismatch at layer {i}"),
            };
            debug_assert_eq!(tape.value(var).shape(), &out_shape[..], "layer {i}");
            outputs.push(Act {
                var,
                timed: act.timed,
            });
            act = outputs[i];
        }
        let logits = if act.timed {
            tape.group_mean(act.var, steps)?
        } else {
            act.var
        };
        Ok(TapeForward {
            logits,
            record,
            norm_stats,
            layer_outputs: outputs.iter().map(|a| a.var).collect(),
        })
    }

    fn note_input(&self, tape: &Tape, act: Act, layer: usize, spiking: bool, record: &mut ForwardRecord) {
        let v = tape.value(act.var);
        // shared (untimed) inputs are presented at every step
        let reps = if act.timed { 1 } else { self.spec.timesteps };
        record.weighted_inputs.push(WeightedInput {
            layer,
            spiking,
            nonzero: v.count_nonzero() * reps,
            total: v.numel() * reps,
        });
    }

    /// Inference on one batch.
    pub fn forward(&self, batch: &Tensor, opts: ForwardOptions) -> Result<(Tensor, ForwardRecord)> {
        let mut tape = Tape::new();
        let out = self.forward_tape(&mut tape, batch, ForwardOptions { train: false, ..opts })?;
        Ok((tape.value(out.logits).clone(), out.record))
    }

    /// Blends measured batch statistics into the running statistics.
    pub fn apply_norm_stats(&mut self, stats: &[(usize, NormStats)]) {
        for (layer, s) in stats {
            let (LayerSpec::Norm { momentum, .. }, Slot::Norm { mean, var, .. }) =
                (&self.spec.layers[*layer], &self.slots[*layer])
            else {
                continue;
            };
            let m = *momentum;
            for (r, &b) in self.params.get_mut(*mean).value.data_mut().iter_mut().zip(&s.mean) {
                *r = (1.0 - m) * *r + m * b;
            }
            for (r, &b) in self.params.get_mut(*var).value.data_mut().iter_mut().zip(&s.var) {
                *r = (1.0 - m) * *r + m * b;
            }
        }
    }
}
