//! Folds learned spike amplitudes into the layers that consume them, so a
//! trainable-ternary network can be deployed with plain {-1, 0, 1} spikes.
//!
//! A spike train `a·b` entering a weighted layer `K` produces `K·(a·b)`,
//! which equals `(a·K)·b`. Pooling and flattening are linear and pass the
//! factor through. A norm layer in between absorbs it into its scale and
//! shift (inference statistics only). Residual joins pass it through when
//! both branches carry the same amplitude and are rejected otherwise.

use serde::Serialize;

use crate::autograd::{ParamStore, Parameter};
use crate::error::{Error, Result};
use crate::network::{param_name, ForwardOptions, ForwardRecord, LayerSpec, Network};
use crate::neurons::NeuronKind;
use crate::tensor::Tensor;
use crate::training::Checkpoint;

pub const DEFAULT_TOLERANCE: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FoldedAmplitude {
    /// Neuron layer whose amplitude was removed.
    pub layer: usize,
    pub amplitude: f32,
    /// Weighted or norm layers that absorbed it.
    pub absorbed_by: Vec<usize>,
}

/// Result of [`fold_amplitudes`].
#[derive(Clone, Debug)]
pub struct Conversion {
    pub network: Network,
    pub folded: Vec<FoldedAmplitude>,
    /// Steps outside the plain neuron-to-weights case, and warnings.
    pub notes: Vec<String>,
}

impl Conversion {
    /// Report of the fold alone; deviation fields stay empty until
    /// [`verify_equivalence`] runs.
    pub fn report(&self) -> ConversionReport {
        ConversionReport {
            folded: self.folded.clone(),
            notes: self.notes.clone(),
            ..ConversionReport::default()
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct LayerAudit {
    pub layer: usize,
    /// Sign/zero structure of every spike equal between the two networks.
    pub pattern_match: bool,
    pub mismatched_spikes: usize,
    pub max_membrane_deviation: f64,
    /// Distinct spike values emitted by the converted network.
    pub alphabet: Vec<f32>,
    pub alphabet_ok: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct ConversionReport {
    pub folded: Vec<FoldedAmplitude>,
    pub notes: Vec<String>,
    pub probe_samples: usize,
    pub tolerance: f64,
    pub max_logit_deviation: Option<f64>,
    pub layers: Vec<LayerAudit>,
    pub first_divergence: Option<String>,
    pub passed: Option<bool>,
}

impl ConversionReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[derive(Clone, Debug)]
struct Scaled {
    amplitude: f32,
    sources: Vec<usize>,
}

impl Scaled {
    fn unit() -> Self {
        Self {
            amplitude: 1.0,
            sources: Vec::new(),
        }
    }

    fn describe(&self) -> String {
        match self.sources.as_slice() {
            [] => "a non-spiking branch (amplitude 1)".to_string(),
            s => format!(
                "neuron layer{} {} (amplitude {})",
                if s.len() > 1 { "s" } else { "" },
                s.iter().map(|l| l.to_string()).collect::<Vec<_>>().join(", "),
                self.amplitude
            ),
        }
    }
}

/// Folds every trainable-ternary amplitude of `network` into its consumers.
pub fn fold_network(network: &Network) -> Result<Conversion> {
    let spec = network.spec();
    let is_trainable = |l: &LayerSpec| {
        matches!(
            l,
            LayerSpec::Neuron {
                neuron: NeuronKind::TrainableTernary,
                ..
            }
        )
    };
    if !spec.layers.iter().any(is_trainable) {
        let msg = "network has no trainable-ternary neurons; nothing to fold".to_string();
        log::warn!("{msg}");
        return Ok(Conversion {
            network: network.clone(),
            folded: Vec::new(),
            notes: vec![msg],
        });
    }

    let mut layers = spec.layers.clone();
    let mut params = network.params().clone();
    let mut folded: Vec<FoldedAmplitude> = Vec::new();
    let mut notes = Vec::new();
    let mut outs: Vec<Scaled> = Vec::with_capacity(layers.len());
    let mut cur = Scaled::unit();

    let absorb = |folded: &mut Vec<FoldedAmplitude>, by: usize, sources: &[usize]| {
        for f in folded.iter_mut().filter(|f| sources.contains(&f.layer)) {
            f.absorbed_by.push(by);
        }
    };

    for (i, layer) in spec.layers.iter().enumerate() {
        let a = cur.amplitude;
        let next = match layer {
            LayerSpec::Neuron { neuron, .. } => {
                if a != 1.0 {
                    return Err(Error::Conversion(format!(
                        "layer {i} (neuron) is driven directly by {}; no weights to fold into",
                        cur.describe()
                    )));
                }
                if *neuron == NeuronKind::TrainableTernary {
                    let amplitude = network.amplitude(i);
                    if let LayerSpec::Neuron { neuron, .. } = &mut layers[i] {
                        *neuron = NeuronKind::Ternary;
                    }
                    folded.push(FoldedAmplitude {
                        layer: i,
                        amplitude,
                        absorbed_by: Vec::new(),
                    });
                    Scaled {
                        amplitude,
                        sources: vec![i],
                    }
                } else {
                    Scaled::unit()
                }
            }
            LayerSpec::Conv { .. } | LayerSpec::Linear { .. } => {
                if !cur.sources.is_empty() {
                    if a != 1.0 {
                        let id = params
                            .id(&param_name(i, "weight"))
                            .ok_or_else(|| Error::Conversion(format!("layer {i} has no weight")))?;
                        params.get_mut(id).value.data_mut().iter_mut().for_each(|w| *w *= a);
                    }
                    absorb(&mut folded, i, &cur.sources);
                }
                Scaled::unit()
            }
            LayerSpec::Norm { eps, .. } => {
                if !cur.sources.is_empty() {
                    if a != 1.0 {
                        fold_into_norm(&mut params, i, a, *eps)?;
                    }
                    absorb(&mut folded, i, &cur.sources);
                    notes.push(format!(
                        "layer {i} (norm): amplitude {a} folded into the norm scale and shift"
                    ));
                }
                Scaled::unit()
            }
            LayerSpec::Pool { .. } | LayerSpec::Flatten => cur.clone(),
            LayerSpec::Residual { from } => {
                let other = &outs[*from];
                if other.amplitude != a {
                    return Err(Error::Conversion(format!(
                        "residual join at layer {i} mixes {} with {}; amplitudes must be equal",
                        other.describe(),
                        cur.describe()
                    )));
                }
                let mut sources = cur.sources.clone();
                sources.extend(other.sources.iter().copied().filter(|s| !cur.sources.contains(s)));
                if !sources.is_empty() {
                    notes.push(format!(
                        "layer {i} (residual): equal amplitude {a} carried through the join"
                    ));
                }
                Scaled { amplitude: a, sources }
            }
        };
        outs.push(next.clone());
        cur = next;
    }

    let amplitude_names: Vec<String> = folded.iter().map(|f| param_name(f.layer, "amplitude")).collect();
    let mut kept = ParamStore::new();
    for p in params.iter().filter(|p| !amplitude_names.contains(&p.name)) {
        kept.insert(Parameter::new(p.name.clone(), p.role, p.value.clone()))?;
    }
    let mut new_spec = spec.clone();
    new_spec.layers = layers;
    Ok(Conversion {
        network: Network::from_parts(new_spec, kept)?,
        folded,
        notes,
    })
}

/// `gamma·(a·x − m)/s + beta` rewritten as `(gamma·a)·(x − 0)/s + (beta − gamma·m/s)`.
fn fold_into_norm(params: &mut ParamStore, layer: usize, a: f32, eps: f32) -> Result<()> {
    let id = |what: &str| {
        params
            .id(&param_name(layer, what))
            .ok_or_else(|| Error::Conversion(format!("layer {layer} (norm) is missing {what}")))
    };
    let (g, b, m, v) = (id("gamma")?, id("beta")?, id("running_mean")?, id("running_var")?);
    let inv: Vec<f32> = params.get(v).value.data().iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mean = params.get(m).value.data().to_vec();
    let gamma = params.get(g).value.data().to_vec();
    for (c, beta) in params.get_mut(b).value.data_mut().iter_mut().enumerate() {
        *beta -= gamma[c] * mean[c] * inv[c];
    }
    params.get_mut(g).value.data_mut().iter_mut().for_each(|x| *x *= a);
    params.get_mut(m).value.data_mut().iter_mut().for_each(|x| *x = 0.0);
    Ok(())
}

/// Checkpoint-level conversion. The history is carried over unchanged.
pub fn fold_amplitudes(checkpoint: &Checkpoint) -> Result<(Checkpoint, Conversion)> {
    let conv = fold_network(&checkpoint.network()?)?;
    let (spec, params) = conv.network.clone().into_parts();
    let out = Checkpoint {
        spec,
        params,
        epoch: checkpoint.epoch,
        history: checkpoint.history.clone(),
    };
    Ok((out, conv))
}

fn same_topology(a: &Network, b: &Network) -> bool {
    let (sa, sb) = (a.spec(), b.spec());
    let strip = |l: &LayerSpec| match l {
        LayerSpec::Neuron {
            neuron: NeuronKind::TrainableTernary,
            ..
        } => {
            let mut l = l.clone();
            if let LayerSpec::Neuron { neuron, .. } = &mut l {
                *neuron = NeuronKind::Ternary;
            }
            l
        }
        other => other.clone(),
    };
    sa.input_shape == sb.input_shape
        && sa.timesteps == sb.timesteps
        && sa.layers.len() == sb.layers.len()
        && sa.layers.iter().zip(&sb.layers).all(|(x, y)| strip(x) == strip(y))
}

/// Runs both networks on `probe` and audits logits, firing patterns and the
/// converted spike alphabet. Never fails on a mismatch; see `passed`.
pub fn compare(original: &Network, converted: &Network, probe: &Tensor, tolerance: f64) -> Result<ConversionReport> {
    if !same_topology(original, converted) {
        return Err(Error::Config("original and converted networks differ in topology".into()));
    }
    let conv = fold_network(original)?;
    let (lo, ro) = original.forward(probe, ForwardOptions::recording())?;
    let (lc, rc) = converted.forward(probe, ForwardOptions::recording())?;
    let deviation = lo.max_abs_diff(&lc)? as f64;
    let layers = audit_layers(&ro, &rc)?;

    let mut first = None;
    for (audit, rec) in layers.iter().zip(&ro.neurons) {
        if !audit.pattern_match {
            let t = first_pattern_step(rec, &rc, audit.layer);
            first = Some(format!(
                "layer {} (neuron): firing pattern differs first at timestep {t}",
                audit.layer
            ));
            break;
        }
    }
    if first.is_none() && deviation > tolerance {
        first = Some(
            layers
                .iter()
                .find(|a| a.max_membrane_deviation > tolerance)
                .map(|a| {
                    format!(
                        "layer {} (neuron): membrane deviation {:.3e}",
                        a.layer, a.max_membrane_deviation
                    )
                })
                .unwrap_or_else(|| "readout".to_string()),
        );
    }
    let passed = deviation <= tolerance && layers.iter().all(|a| a.pattern_match && a.alphabet_ok);
    Ok(ConversionReport {
        folded: conv.folded,
        notes: conv.notes,
        probe_samples: probe.shape().first().copied().unwrap_or(0),
        tolerance,
        max_logit_deviation: Some(deviation),
        layers,
        first_divergence: first,
        passed: Some(passed),
    })
}

/// Like [`compare`], but a failed audit becomes a verification error that
/// names the first diverging layer.
pub fn verify_equivalence(
    original: &Network,
    converted: &Network,
    probe: &Tensor,
    tolerance: f64,
) -> Result<ConversionReport> {
    let report = compare(original, converted, probe, tolerance)?;
    if report.passed == Some(true) {
        return Ok(report);
    }
    let bad_alphabet: Vec<usize> = report.layers.iter().filter(|a| !a.alphabet_ok).map(|a| a.layer).collect();
    Err(Error::Verification(format!(
        "max logit deviation {:.3e} (tolerance {:.1e}); first divergence: {}{}",
        report.max_logit_deviation.unwrap_or(f64::NAN),
        tolerance,
        report.first_divergence.as_deref().unwrap_or("none"),
        if bad_alphabet.is_empty() {
            String::new()
        } else {
            format!("; spikes outside {{-1,0,1}} at layers {bad_alphabet:?}")
        }
    )))
}

fn audit_layers(orig: &ForwardRecord, conv: &ForwardRecord) -> Result<Vec<LayerAudit>> {
    let mut out = Vec::new();
    for (ro, rc) in orig.neurons.iter().zip(&conv.neurons) {
        let (Some(to), Some(tc)) = (&ro.trace, &rc.trace) else {
            return Err(Error::Contract("forward pass did not record neuron traces".into()));
        };
        let mut mismatched = 0;
        let mut max_dev = 0.0f64;
        let mut alphabet: Vec<f32> = Vec::new();
        for t in 0..to.bases.len() {
            for (&bo, &sc) in to.bases[t].data().iter().zip(tc.spikes[t].data()) {
                if bo != sc.signum() * (sc != 0.0) as i32 as f32 {
                    mismatched += 1;
                }
                if !alphabet.contains(&sc) {
                    alphabet.push(sc);
                }
            }
            max_dev = max_dev.max(to.membranes[t].max_abs_diff(&tc.membranes[t])? as f64);
        }
        alphabet.sort_by(f32::total_cmp);
        out.push(LayerAudit {
            layer: ro.layer,
            pattern_match: mismatched == 0,
            mismatched_spikes: mismatched,
            max_membrane_deviation: max_dev,
            alphabet_ok: alphabet.iter().all(|v| [-1.0, 0.0, 1.0].contains(v)),
            alphabet,
        });
    }
    Ok(out)
}

fn first_pattern_step(orig: &crate::network::NeuronRecord, conv: &ForwardRecord, layer: usize) -> usize {
    let (Some(to), Some(tc)) = (
        &orig.trace,
        conv.neurons.iter().find(|r| r.layer == layer).and_then(|r| r.trace.as_ref()),
    ) else {
        return 0;
    };
    (0..to.bases.len())
        .find(|&t| {
            to.bases[t]
                .data()
                .iter()
                .zip(tc.bases[t].data())
                .any(|(a, b)| a != b)
        })
        .unwrap_or(0)
}
