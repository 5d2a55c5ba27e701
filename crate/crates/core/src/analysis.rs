//! Representation capacity, spike entropy and membrane-potential statistics.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{ForwardRecord, LayerSpec, NetworkSpec};
use crate::neurons::NeuronKind;

pub const DEFAULT_BINS: usize = 64;
pub const REAL_BITS: u32 = 32;

/// Bits needed to represent a map of `shape` whose elements take
/// `alphabet` values: `prod(shape) · log2(alphabet)`.
pub fn capacity(shape: &[usize], alphabet: usize) -> Result<f64> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(Error::Contract(format!("capacity needs positive dims, got {shape:?}")));
    }
    if alphabet < 2 {
        return Err(Error::Contract(format!("alphabet size must be >= 2, got {alphabet}")));
    }
    Ok(elements(shape) * (alphabet as f64).log2())
}

/// Bits of a real-valued map stored at `REAL_BITS` per element.
pub fn real_capacity(shape: &[usize]) -> Result<f64> {
    capacity(shape, 2).map(|b| b * REAL_BITS as f64)
}

fn elements(shape: &[usize]) -> f64 {
    shape.iter().map(|&d| d as f64).product()
}

/// Shannon entropy in bits; `0·log 0 = 0`.
pub fn entropy(p: &[f64]) -> Result<f64> {
    if p.is_empty() || p.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
        return Err(Error::Contract("probabilities must be finite and non-negative".into()));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > 1e-6 {
        return Err(Error::Contract(format!("probabilities sum to {total}, not 1")));
    }
    Ok(p.iter().filter(|&&x| x > 0.0).map(|&x| -x * x.log2()).sum())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerCapacity {
    pub layer: usize,
    pub shape: Vec<usize>,
    pub binary_bits: f64,
    pub ternary_bits: f64,
    pub real_bits: f64,
    pub ternary_over_binary: f64,
    pub real_over_binary: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CapacityReport {
    pub layers: Vec<LayerCapacity>,
}

impl CapacityReport {
    pub fn for_shape(layer: usize, shape: &[usize]) -> Result<LayerCapacity> {
        let binary_bits = capacity(shape, 2)?;
        let ternary_bits = capacity(shape, 3)?;
        let real_bits = real_capacity(shape)?;
        Ok(LayerCapacity {
            layer,
            shape: shape.to_vec(),
            binary_bits,
            ternary_bits,
            real_bits,
            ternary_over_binary: ternary_bits / binary_bits,
            real_over_binary: real_bits / binary_bits,
        })
    }

    /// One entry per neuron layer, sized by its output map.
    pub fn for_spec(spec: &NetworkSpec) -> Result<Self> {
        let shapes = spec.layer_shapes()?;
        let layers = spec
            .layers
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l, LayerSpec::Neuron { .. }))
            .map(|(i, _)| Self::for_shape(i, &shapes[i]))
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }
}

/// Which membrane value of a step to profile.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MembraneSource {
    #[default]
    PreReset,
    PostReset,
}

impl std::str::FromStr for MembraneSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pre-reset" | "pre" => Ok(Self::PreReset),
            "post-reset" | "post" => Ok(Self::PostReset),
            other => Err(Error::Config(format!(
                "unknown membrane source {other:?} (expected pre-reset or post-reset)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MembraneHistogram {
    pub layer: usize,
    pub timestep: usize,
    /// `bins + 1` uniform edges.
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerMoments {
    pub layer: usize,
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MembraneProfile {
    pub histograms: Vec<MembraneHistogram>,
    /// Moments over all timesteps of each layer.
    pub layers: Vec<LayerMoments>,
}

fn moments(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let (mut n, mut sum) = (0usize, 0.0f64);
    for v in values.clone() {
        n += 1;
        sum += v;
    }
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = sum / n as f64;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    (mean, var.sqrt())
}

/// Histogram over `[mean − 4·std, mean + 4·std]` intersected with the data
/// range. Values outside the window land in the end bins.
pub fn histogram(values: &[f32], bins: usize) -> Result<(Vec<f64>, Vec<u64>, f64, f64)> {
    if bins == 0 {
        return Err(Error::Contract("histogram needs at least one bin".into()));
    }
    if values.is_empty() {
        return Err(Error::Contract("no membrane values to profile".into()));
    }
    let it = values.iter().map(|&v| v as f64);
    let (mean, std) = moments(it.clone());
    let (min, max) = it.clone().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let lo = (mean - 4.0 * std).max(min);
    let mut hi = (mean + 4.0 * std).min(max);
    if hi <= lo {
        hi = lo + 1.0;
    }
    let width = (hi - lo) / bins as f64;
    let edges = (0..=bins).map(|i| lo + width * i as f64).collect();
    let mut counts = vec![0u64; bins];
    for v in it {
        let b = ((v - lo) / width).floor();
        let b = if b.is_nan() { 0 } else { (b.max(0.0) as usize).min(bins - 1) };
        counts[b] += 1;
    }
    Ok((edges, counts, mean, std))
}

/// Per-(layer, timestep) membrane histograms from a recorded forward pass.
pub fn membrane_profile(record: &ForwardRecord, bins: usize, source: MembraneSource) -> Result<MembraneProfile> {
    let mut histograms = Vec::new();
    let mut layers = Vec::new();
    for rec in &record.neurons {
        let trace = rec
            .trace
            .as_ref()
            .ok_or_else(|| Error::Contract(format!("layer {} has no recorded membranes", rec.layer)))?;
        let steps = match source {
            MembraneSource::PreReset => &trace.membranes,
            MembraneSource::PostReset => &trace.membranes_post,
        };
        for (t, m) in steps.iter().enumerate() {
            let (edges, counts, mean, std) = histogram(m.data(), bins)?;
            histograms.push(MembraneHistogram {
                layer: rec.layer,
                timestep: t,
                edges,
                counts,
                mean,
                std,
            });
        }
        let (mean, std) = moments(steps.iter().flat_map(|m| m.data().iter().map(|&v| v as f64)));
        layers.push(LayerMoments {
            layer: rec.layer,
            mean,
            std,
        });
    }
    if histograms.is_empty() {
        return Err(Error::Contract("record holds no membranes".into()));
    }
    Ok(MembraneProfile { histograms, layers })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpikeStats {
    pub layer: usize,
    pub kind: NeuronKind,
    pub positive_rate: f64,
    pub negative_rate: f64,
    pub silent_rate: f64,
    /// Marginal entropy of one neuron-step, in bits.
    pub entropy: f64,
    /// `log2` of the layer's alphabet size.
    pub max_entropy: f64,
}

/// Firing rates and marginal entropy of every neuron layer, over all
/// neurons, samples and timesteps in the record.
pub fn spike_stats(record: &ForwardRecord) -> Result<Vec<SpikeStats>> {
    record
        .neurons
        .iter()
        .map(|rec| {
            let c = rec.counts;
            if c.total == 0 {
                return Err(Error::Contract(format!("layer {} recorded no spikes", rec.layer)));
            }
            let n = c.total as f64;
            let pos = c.positive as f64 / n;
            let neg = c.negative as f64 / n;
            let silent = (c.total - c.positive - c.negative) as f64 / n;
            Ok(SpikeStats {
                layer: rec.layer,
                kind: rec.kind,
                positive_rate: pos,
                negative_rate: neg,
                silent_rate: silent,
                entropy: entropy(&[pos, neg, silent])?,
                max_entropy: (rec.kind.alphabet_size() as f64).log2(),
            })
        })
        .collect()
}

pub fn write_histograms_csv<W: Write>(out: W, profile: &MembraneProfile) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["layer", "timestep", "bin", "lower", "upper", "count", "mean", "std"])
        .map_err(csv_err)?;
    for h in &profile.histograms {
        for (b, &count) in h.counts.iter().enumerate() {
            w.serialize((h.layer, h.timestep, b, h.edges[b], h.edges[b + 1], count, h.mean, h.std))
                .map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_spike_stats_csv<W: Write>(out: W, stats: &[SpikeStats]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for s in stats {
        w.serialize(s).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_capacity_csv<W: Write>(out: W, report: &CapacityReport) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "layer",
        "shape",
        "binary_bits",
        "ternary_bits",
        "real_bits",
        "ternary_over_binary",
        "real_over_binary",
    ])
    .map_err(csv_err)?;
    for l in &report.layers {
        let shape = l.shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x");
        w.serialize((
            l.layer,
            shape,
            l.binary_bits,
            l.ternary_bits,
            l.real_bits,
            l.ternary_over_binary,
            l.real_over_binary,
        ))
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    Error::Serde(e.to_string())
}
