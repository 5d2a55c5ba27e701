//! Leaky integrate-and-fire neurons with binary, ternary and
//! trainable-amplitude ternary outputs.
//!
//! All three kinds share one membrane update,
//!
//! ```text
//! u[t] = tau * u[t-1] * (1 - |b[t-1]|) + x[t]
//! ```
//!
//! where `b` is the spike base in `{0, 1}` or `{-1, 0, 1}`. Firing resets the
//! membrane to zero on the next step. A trainable ternary neuron emits
//! `a * b` for a learned per-layer amplitude `a`; the threshold test never
//! involves `a`.

use serde::{Deserialize, Serialize};

use crate::autograd::{BackwardRule, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NeuronKind {
    Binary,
    Ternary,
    #[serde(alias = "trainable_ternary")]
    TrainableTernary,
}

impl NeuronKind {
    pub fn is_ternary(self) -> bool {
        !matches!(self, NeuronKind::Binary)
    }

    /// Size of the spike alphabet.
    pub fn alphabet_size(self) -> u32 {
        if self.is_ternary() {
            3
        } else {
            2
        }
    }
}

impl std::str::FromStr for NeuronKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "binary" => Ok(NeuronKind::Binary),
            "ternary" => Ok(NeuronKind::Ternary),
            "trainable_ternary" | "trainable" => Ok(NeuronKind::TrainableTernary),
            other => Err(Error::Config(format!(
                "unknown neuron kind {other:?} (expected binary, ternary, trainable-ternary)"
            ))),
        }
    }
}

impl std::fmt::Display for NeuronKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            NeuronKind::Binary => "binary",
            NeuronKind::Ternary => "ternary",
            NeuronKind::TrainableTernary => "trainable-ternary",
        })
    }
}

pub const DEFAULT_TAU: f32 = 0.25;
pub const DEFAULT_THRESHOLD: f32 = 1.0;
pub const DEFAULT_SURROGATE_WIDTH: f32 = 0.5;

fn default_tau() -> f32 {
    DEFAULT_TAU
}
fn default_threshold() -> f32 {
    DEFAULT_THRESHOLD
}
fn default_width() -> f32 {
    DEFAULT_SURROGATE_WIDTH
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LifConfig {
    pub kind: NeuronKind,
    /// Leak factor applied to the surviving membrane each step.
    #[serde(default = "default_tau")]
    pub tau: f32,
    #[serde(default = "default_threshold")]
    pub v_th: f32,
    /// Half-width of the rectangular surrogate window.
    #[serde(default = "default_width")]
    pub surrogate_width: f32,
}

impl LifConfig {
    pub fn new(kind: NeuronKind) -> Self {
        Self {
            kind,
            tau: DEFAULT_TAU,
            v_th: DEFAULT_THRESHOLD,
            surrogate_width: DEFAULT_SURROGATE_WIDTH,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.tau) {
            return Err(Error::Config(format!("tau {} outside [0, 1)", self.tau)));
        }
        if !(self.v_th > 0.0) || !self.v_th.is_finite() {
            return Err(Error::Config(format!("threshold {} must be positive", self.v_th)));
        }
        if !(self.surrogate_width > 0.0) || !self.surrogate_width.is_finite() {
            return Err(Error::Config(format!(
                "surrogate width {} must be positive",
                self.surrogate_width
            )));
        }
        Ok(())
    }
}

/// Membrane update for one neuron.
#[inline]
pub fn integrate(u_prev: f32, base_prev: f32, input: f32, tau: f32) -> f32 {
    tau * u_prev * (1.0 - base_prev.abs()) + input
}

/// Spike base for a membrane value: `{0,1}` for binary, `{-1,0,1}` otherwise.
#[inline]
pub fn fire(u: f32, cfg: &LifConfig) -> f32 {
    if u >= cfg.v_th {
        1.0
    } else if cfg.kind.is_ternary() && u <= -cfg.v_th {
        -1.0
    } else {
        0.0
    }
}

/// Rectangular surrogate of `d base / d u`.
#[inline]
pub fn surrogate(u: f32, cfg: &LifConfig) -> f32 {
    let w = cfg.surrogate_width;
    let height = 1.0 / (2.0 * w);
    let mut g = 0.0;
    if (u - cfg.v_th).abs() <= w {
        g += height;
    }
    if cfg.kind.is_ternary() && (u + cfg.v_th).abs() <= w {
        g += height;
    }
    g
}

/// Piecewise-linear spike whose exact derivative is [`surrogate`].
/// Only used to build finite-difference checks of the surrogate path.
#[inline]
pub fn relaxed_fire(u: f32, cfg: &LifConfig) -> f32 {
    let w = cfg.surrogate_width;
    let ramp = |z: f32| ((z + w) / (2.0 * w)).clamp(0.0, 1.0);
    let pos = ramp(u - cfg.v_th);
    if cfg.kind.is_ternary() {
        pos - ramp(-u - cfg.v_th)
    } else {
        pos
    }
}

pub fn surrogate_grad(u: &Tensor, cfg: &LifConfig) -> Tensor {
    u.map(|v| surrogate(v, cfg))
}

/// State of one neuron layer between timesteps.
#[derive(Clone, Debug, PartialEq)]
pub struct NeuronLayerState {
    /// Membrane potentials of the last step, before reset. The reset is
    /// applied by the `(1 - |b|)` factor of the next update.
    pub u: Tensor,
    /// Spike values emitted at the previous step.
    pub o_prev: Tensor,
    /// Spike bases of the previous step; equals `o_prev` unless the
    /// amplitude differs from 1.
    pub base_prev: Tensor,
}

impl NeuronLayerState {
    /// Resting state: zero membranes, no previous spikes.
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            u: Tensor::zeros(shape),
            o_prev: Tensor::zeros(shape),
            base_prev: Tensor::zeros(shape),
        }
    }
}

/// Outcome of advancing a layer by one timestep.
#[derive(Clone, Debug, PartialEq)]
pub struct StepOutput {
    pub spikes: Tensor,
    /// Membrane before the firing reset.
    pub membrane: Tensor,
    pub state: NeuronLayerState,
}

fn step_impl(
    state: &NeuronLayerState,
    input: &Tensor,
    cfg: &LifConfig,
    amplitude: f32,
) -> Result<StepOutput> {
    if state.u.shape() != input.shape() {
        return Err(Error::dim("neuron step", state.u.shape(), input.shape()));
    }
    if state.base_prev.shape() != input.shape() {
        return Err(Error::dim("neuron step", state.base_prev.shape(), input.shape()));
    }
    let n = input.numel();
    let mut membrane = Vec::with_capacity(n);
    let mut base = Vec::with_capacity(n);
    let mut spikes = Vec::with_capacity(n);
    for i in 0..n {
        let u = integrate(
            state.u.data()[i],
            state.base_prev.data()[i],
            input.data()[i],
            cfg.tau,
        );
        let b = fire(u, cfg);
        membrane.push(u);
        base.push(b);
        spikes.push(amplitude * b);
    }
    let shape = input.shape().to_vec();
    let spikes = Tensor::new(shape.clone(), spikes)?;
    Ok(StepOutput {
        state: NeuronLayerState {
            u: Tensor::new(shape.clone(), membrane.clone())?,
            o_prev: spikes.clone(),
            base_prev: Tensor::new(shape.clone(), base)?,
        },
        spikes,
        membrane: Tensor::new(shape, membrane)?,
    })
}

/// One timestep of a binary LIF layer.
pub fn binary_step(state: &NeuronLayerState, input: &Tensor, cfg: &LifConfig) -> Result<StepOutput> {
    let cfg = LifConfig {
        kind: NeuronKind::Binary,
        ..*cfg
    };
    step_impl(state, input, &cfg, 1.0)
}

/// One timestep of a ternary LIF layer.
pub fn ternary_step(state: &NeuronLayerState, input: &Tensor, cfg: &LifConfig) -> Result<StepOutput> {
    let cfg = LifConfig {
        kind: NeuronKind::Ternary,
        ..*cfg
    };
    step_impl(state, input, &cfg, 1.0)
}

/// One timestep of a trainable ternary layer emitting `amplitude * b`.
pub fn trainable_ternary_step(
    state: &NeuronLayerState,
    input: &Tensor,
    cfg: &LifConfig,
    amplitude: f32,
) -> Result<StepOutput> {
    if !amplitude.is_finite() {
        return Err(Error::Contract(format!("spike amplitude {amplitude} is not finite")));
    }
    let cfg = LifConfig {
        kind: NeuronKind::TrainableTernary,
        ..*cfg
    };
    step_impl(state, input, &cfg, amplitude)
}

/// Dispatches on `cfg.kind`; `amplitude` is ignored unless trainable.
pub fn step(
    state: &NeuronLayerState,
    input: &Tensor,
    cfg: &LifConfig,
    amplitude: f32,
) -> Result<StepOutput> {
    match cfg.kind {
        NeuronKind::Binary => binary_step(state, input, cfg),
        NeuronKind::Ternary => ternary_step(state, input, cfg),
        NeuronKind::TrainableTernary => trainable_ternary_step(state, input, cfg, amplitude),
    }
}

/// Per-timestep tensors captured while running a layer over time.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LayerTrace {
    pub membranes: Vec<Tensor>,
    pub membranes_post: Vec<Tensor>,
    pub spikes: Vec<Tensor>,
    pub bases: Vec<Tensor>,
}

/// Spike counts of one layer over a whole sequence.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SpikeCounts {
    pub positive: usize,
    pub negative: usize,
    pub total: usize,
}

impl SpikeCounts {
    pub fn firing(&self) -> usize {
        self.positive + self.negative
    }
}

pub struct LifOutput {
    /// Spikes for all timesteps, time-major `[T·N, ...]`.
    pub spikes: Var,
    pub counts: SpikeCounts,
    pub trace: Option<LayerTrace>,
}

struct LifRule {
    timesteps: usize,
    tau: f32,
    amplitude: f32,
    /// Surrogate derivative at each membrane value.
    surrogate: Vec<f32>,
    /// Reset factor `1 - |b|`, treated as a constant.
    keep: Vec<f32>,
    /// Value multiplied by `a` in the output (the base, or its relaxation).
    unit_out: Vec<f32>,
}

impl BackwardRule for LifRule {
    fn backward(
        &self,
        grad_out: &Tensor,
        inputs: &[&Tensor],
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        let n = grad_out.numel();
        let block = n / self.timesteps;
        let g = grad_out.data();
        let mut dx = vec![0.0f32; n];
        let mut carry = vec![0.0f32; block];
        for t in (0..self.timesteps).rev() {
            let off = t * block;
            for i in 0..block {
                let gu = g[off + i] * self.amplitude * self.surrogate[off + i] + carry[i];
                dx[off + i] = gu;
                carry[i] = if t > 0 {
                    gu * self.tau * self.keep[off - block + i]
                } else {
                    0.0
                };
            }
        }
        let mut out = vec![None; inputs.len()];
        if needs[0] {
            out[0] = Some(Tensor::new(inputs[0].shape().to_vec(), dx)?);
        }
        if inputs.len() > 1 && needs[1] {
            let da = g
                .iter()
                .zip(&self.unit_out)
                .fold(0.0f32, |acc, (&gv, &b)| acc + gv * b);
            out[1] = Some(Tensor::full(inputs[1].shape(), da));
        }
        Ok(out)
    }
}

/// Runs a LIF layer over `timesteps` steps on a time-major input
/// `[T·N, ...]`, starting from rest, and records it on the tape.
///
/// Gradients flow through time along the membrane path and through the
/// threshold via [`surrogate`]; the reset factor is not differentiated.
/// With `relaxed` the forward output uses [`relaxed_fire`] instead of the
/// hard threshold; resets still follow the hard spikes.
pub fn lif_sequence(
    tape: &mut Tape,
    input: Var,
    amplitude: Option<Var>,
    cfg: &LifConfig,
    timesteps: usize,
    relaxed: bool,
    record: bool,
) -> Result<LifOutput> {
    cfg.validate()?;
    let x = tape.value(input).clone();
    let n = x.numel();
    if timesteps == 0 || x.rank() == 0 || !x.shape()[0].is_multiple_of(timesteps) {
        return Err(Error::Contract(format!(
            "input {:?} is not a time-major stack of {timesteps} steps",
            x.shape()
        )));
    }
    let a = match (cfg.kind, amplitude) {
        (NeuronKind::TrainableTernary, Some(v)) => {
            let av = tape.value(v);
            if av.numel() != 1 {
                return Err(Error::dim("spike amplitude", av.shape(), &[1]));
            }
            let a = av.data()[0];
            if !a.is_finite() {
                return Err(Error::Contract(format!("spike amplitude {a} is not finite")));
            }
            a
        }
        (NeuronKind::TrainableTernary, None) => {
            return Err(Error::Config("trainable ternary layer without amplitude".into()))
        }
        (_, _) => 1.0,
    };
    let block = n / timesteps;
    let mut step_shape = x.shape().to_vec();
    step_shape[0] /= timesteps;

    let mut out = vec![0.0f32; n];
    let mut sg = vec![0.0f32; n];
    let mut keep = vec![0.0f32; n];
    let mut unit_out = vec![0.0f32; n];
    let mut u_prev = vec![0.0f32; block];
    let mut b_prev = vec![0.0f32; block];
    let mut counts = SpikeCounts {
        total: n,
        ..Default::default()
    };
    let mut trace = record.then(LayerTrace::default);
    for t in 0..timesteps {
        let off = t * block;
        let mut mem = record.then(|| Vec::with_capacity(block));
        let mut post = record.then(|| Vec::with_capacity(block));
        for i in 0..block {
            let u = integrate(u_prev[i], b_prev[i], x.data()[off + i], cfg.tau);
            let b = fire(u, cfg);
            match b {
                v if v > 0.0 => counts.positive += 1,
                v if v < 0.0 => counts.negative += 1,
                _ => {}
            }
            let unit = if relaxed { relaxed_fire(u, cfg) } else { b };
            unit_out[off + i] = unit;
            out[off + i] = a * unit;
            sg[off + i] = surrogate(u, cfg);
            keep[off + i] = 1.0 - b.abs();
            if let (Some(m), Some(p)) = (mem.as_mut(), post.as_mut()) {
                m.push(u);
                p.push(if b != 0.0 { 0.0 } else { u });
            }
            u_prev[i] = u;
            b_prev[i] = b;
        }
        if let (Some(tr), Some(m), Some(p)) = (trace.as_mut(), mem, post) {
            tr.membranes.push(Tensor::new(step_shape.clone(), m)?);
            tr.membranes_post.push(Tensor::new(step_shape.clone(), p)?);
            tr.bases.push(Tensor::new(step_shape.clone(), b_prev.clone())?);
            tr.spikes
                .push(Tensor::new(step_shape.clone(), out[off..off + block].to_vec())?);
        }
    }
    let value = Tensor::new(x.shape().to_vec(), out)?;
    let rule = Box::new(LifRule {
        timesteps,
        tau: cfg.tau,
        amplitude: a,
        surrogate: sg,
        keep,
        unit_out,
    });
    let spikes = match (cfg.kind, amplitude) {
        (NeuronKind::TrainableTernary, Some(av)) => tape.custom(&[input, av], value, rule),
        _ => tape.custom(&[input], value, rule),
    };
    Ok(LifOutput {
        spikes,
        counts,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(kind: NeuronKind) -> LifConfig {
        LifConfig::new(kind)
    }

    fn scalar_state(u: f32, b: f32) -> NeuronLayerState {
        NeuronLayerState {
            u: Tensor::from_vec(vec![u]),
            o_prev: Tensor::from_vec(vec![b]),
            base_prev: Tensor::from_vec(vec![b]),
        }
    }

    #[test]
    fn quiescent_binary_neuron() {
        let s = NeuronLayerState::zeros(&[1]);
        let o = binary_step(&s, &Tensor::from_vec(vec![0.0]), &cfg(NeuronKind::Binary)).unwrap();
        assert_eq!(o.membrane.data(), &[0.0]);
        assert_eq!(o.spikes.data(), &[0.0]);
    }

    #[test]
    fn binary_subthreshold_and_firing() {
        let c = cfg(NeuronKind::Binary);
        let o = binary_step(&scalar_state(0.8, 0.0), &Tensor::from_vec(vec![0.5]), &c).unwrap();
        assert!((o.membrane.data()[0] - 0.7).abs() < 1e-7);
        assert_eq!(o.spikes.data(), &[0.0]);

        let o = binary_step(&scalar_state(0.8, 0.0), &Tensor::from_vec(vec![0.9]), &c).unwrap();
        assert!((o.membrane.data()[0] - 1.1).abs() < 1e-6);
        assert_eq!(o.spikes.data(), &[1.0]);
        // fired: the leak term vanishes on the next step
        let next = binary_step(&o.state, &Tensor::from_vec(vec![0.3]), &c).unwrap();
        assert_eq!(next.membrane.data(), &[0.3]);
    }

    #[test]
    fn ternary_negative_spike_and_reset() {
        let c = cfg(NeuronKind::Ternary);
        let o = ternary_step(&scalar_state(0.0, 0.0), &Tensor::from_vec(vec![-1.2]), &c).unwrap();
        assert_eq!(o.spikes.data(), &[-1.0]);
        let o = ternary_step(&scalar_state(0.0, 0.0), &Tensor::from_vec(vec![0.5]), &c).unwrap();
        assert_eq!(o.spikes.data(), &[0.0]);

        let o = ternary_step(&scalar_state(-0.8, 0.0), &Tensor::from_vec(vec![-0.9]), &c).unwrap();
        assert!((o.membrane.data()[0] + 1.1).abs() < 1e-6);
        assert_eq!(o.spikes.data(), &[-1.0]);
        let next = ternary_step(&o.state, &Tensor::from_vec(vec![0.25]), &c).unwrap();
        assert_eq!(next.membrane.data(), &[0.25]);
    }

    #[test]
    fn trainable_amplitude_scales_output_not_threshold() {
        let c = cfg(NeuronKind::TrainableTernary);
        let o = trainable_ternary_step(&scalar_state(0.0, 0.0), &Tensor::from_vec(vec![1.3]), &c, 0.5)
            .unwrap();
        assert_eq!(o.spikes.data(), &[0.5]);
        assert_eq!(o.state.base_prev.data(), &[1.0]);
        let o = trainable_ternary_step(&scalar_state(0.0, 0.0), &Tensor::from_vec(vec![-0.4]), &c, 2.0)
            .unwrap();
        assert_eq!(o.spikes.data(), &[0.0]);
    }

    #[test]
    fn non_finite_amplitude_is_rejected() {
        let c = cfg(NeuronKind::TrainableTernary);
        let r = trainable_ternary_step(&scalar_state(0.0, 0.0), &Tensor::from_vec(vec![0.0]), &c, f32::NAN);
        assert!(r.is_err());
    }

    #[test]
    fn shape_mismatch_is_dimension_error() {
        let s = NeuronLayerState::zeros(&[2]);
        let r = ternary_step(&s, &Tensor::zeros(&[3]), &cfg(NeuronKind::Ternary));
        assert!(matches!(r, Err(Error::Dimension { .. })));
    }

    #[test]
    fn surrogate_values() {
        let b = cfg(NeuronKind::Binary);
        assert_eq!(surrogate(1.0, &b), 1.0);
        assert_eq!(surrogate(0.0, &b), 0.0);
        assert_eq!(surrogate(-1.0, &b), 0.0);
        let t = cfg(NeuronKind::Ternary);
        assert_eq!(surrogate(-1.0, &t), 1.0);
        assert_eq!(surrogate(0.0, &t), 0.0);
    }

    #[test]
    fn relaxed_fire_matches_hard_spike_outside_windows() {
        let t = cfg(NeuronKind::Ternary);
        for u in [-3.0, -1.6, 0.0, 0.4, 1.6, 5.0] {
            assert_eq!(relaxed_fire(u, &t), fire(u, &t), "u = {u}");
        }
    }

    #[test]
    fn invalid_configs() {
        let mut c = cfg(NeuronKind::Binary);
        c.tau = 1.0;
        assert!(c.validate().is_err());
        let mut c = cfg(NeuronKind::Binary);
        c.v_th = 0.0;
        assert!(c.validate().is_err());
        let mut c = cfg(NeuronKind::Binary);
        c.surrogate_width = -1.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn amplitude_gradient_equals_base() {
        // loss = sum(o * onehot_k) picks out element k; d loss / d a = b_k
        let c = cfg(NeuronKind::TrainableTernary);
        let xs = vec![1.4, -1.7, 0.2, 3.0, -0.1, -2.5];
        for k in 0..xs.len() {
            let mut tape = Tape::new();
            let x = tape.leaf(Tensor::new(vec![2, 3], xs.clone()).unwrap(), true);
            let a = tape.leaf(Tensor::scalar(0.7), true);
            let out = lif_sequence(&mut tape, x, Some(a), &c, 2, false, true).unwrap();
            let bases: Vec<f32> = out
                .trace
                .as_ref()
                .unwrap()
                .bases
                .iter()
                .flat_map(|b| b.data().to_vec())
                .collect();
            let mut sel = vec![0.0; 6];
            sel[k] = 1.0;
            let m = tape.constant(Tensor::new(vec![2, 3], sel).unwrap());
            let picked = tape.mul(out.spikes, m).unwrap();
            let loss = tape.sum(picked);
            let grads = tape.gradients(loss).unwrap();
            assert_eq!(grads.get(a).unwrap().data()[0], bases[k]);
        }
    }
}
