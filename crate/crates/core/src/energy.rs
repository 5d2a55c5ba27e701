//! Operation-count energy model.
//!
//! The first weighted layer sees real-valued input and is charged
//! multiply-accumulates as FLOPs. Every later weighted layer sees spikes
//! and is charged one synaptic operation per ANN addition that a nonzero
//! input triggers: `sops = s · T · A`. Each LIF neuron evaluates its sign
//! function once per step (twice for ternary neurons, one per threshold).

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{ForwardRecord, LayerSpec, NetworkSpec};
use crate::neurons::NeuronKind;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostTable {
    /// Joules per floating-point operation.
    pub flop: f64,
    /// Joules per synaptic operation.
    pub sop: f64,
    /// Joules per sign evaluation.
    pub sign: f64,
}

impl Default for CostTable {
    fn default() -> Self {
        Self {
            flop: 12.5e-12,
            sop: 77e-15,
            sign: 3.7e-12,
        }
    }
}

impl CostTable {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("flop", self.flop), ("sop", self.sop), ("sign", self.sign)] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("energy per {name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerAdditions {
    pub layer: usize,
    pub kind: String,
    /// Multiply-accumulates per image and timestep.
    pub macs: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AnnAdditions {
    /// The real-valued input layer, charged as FLOPs.
    pub first: Option<LayerAdditions>,
    /// Spike-driven layers; `macs` is their `A`.
    pub layers: Vec<LayerAdditions>,
}

impl AnnAdditions {
    pub fn total(&self) -> u64 {
        self.layers.iter().map(|l| l.macs).sum()
    }
}

/// Per-image ANN addition counts of every weighted layer.
pub fn count_ann_additions(spec: &NetworkSpec) -> Result<AnnAdditions> {
    if spec.layers.is_empty() {
        return Ok(AnnAdditions::default());
    }
    let ins = spec.layer_input_shapes()?;
    let outs = spec.layer_shapes()?;
    let first = spec.first_weighted_layer();
    let mut out = AnnAdditions::default();
    for (i, layer) in spec.layers.iter().enumerate() {
        let entry = match layer {
            LayerSpec::Conv { kernel, .. } => LayerAdditions {
                layer: i,
                kind: "conv".into(),
                macs: (outs[i].iter().product::<usize>() * ins[i][0] * kernel * kernel) as u64,
            },
            LayerSpec::Linear { units, .. } => LayerAdditions {
                layer: i,
                kind: "linear".into(),
                macs: (units * ins[i][0]) as u64,
            },
            _ => continue,
        };
        if Some(i) == first {
            out.first = Some(entry);
        } else {
            out.layers.push(entry);
        }
    }
    Ok(out)
}

/// Sign evaluations per neuron and timestep.
pub fn signs_per_neuron(kind: NeuronKind) -> u64 {
    if kind.is_ternary() {
        2
    } else {
        1
    }
}

/// `A = sops / (s · T)`.
pub fn implied_ann_additions(sops: f64, sparsity: f64, timesteps: f64) -> Result<f64> {
    if !(sparsity > 0.0 && sparsity <= 1.0) || !(timesteps > 0.0) {
        return Err(Error::Contract(format!(
            "sparsity must lie in (0, 1] and timesteps be positive, got {sparsity} and {timesteps}"
        )));
    }
    Ok(sops / (sparsity * timesteps))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerEnergy {
    pub layer: usize,
    pub additions: u64,
    pub sparsity: f64,
    pub sops: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    pub flops: f64,
    pub sops: f64,
    pub signs: f64,
    /// Addition-weighted mean input sparsity of the spiking layers.
    pub sparsity: Option<f64>,
    pub timesteps: Option<usize>,
    pub layers: Vec<LayerEnergy>,
    /// Total `A`; implied from `sops` when built from external counts.
    pub ann_additions: Option<f64>,
    pub flop_energy: f64,
    pub sop_energy: f64,
    pub sign_energy: f64,
    pub total_energy: f64,
}

impl EnergyReport {
    fn priced(flops: f64, sops: f64, signs: f64, cost: &CostTable) -> Self {
        let (f, s, g) = (flops * cost.flop, sops * cost.sop, signs * cost.sign);
        Self {
            flops,
            sops,
            signs,
            sparsity: None,
            timesteps: None,
            layers: Vec::new(),
            ann_additions: None,
            flop_energy: f,
            sop_energy: s,
            sign_energy: g,
            total_energy: f + s + g,
        }
    }

    /// Relative extra energy of `self` over `baseline`.
    pub fn overhead_over(&self, baseline: &EnergyReport) -> f64 {
        (self.total_energy - baseline.total_energy) / baseline.total_energy
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn micro(j: f64) -> f64 {
    j * 1e6
}

impl fmt::Display for EnergyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "FLOPs  {:>12.4}M  {:>9.3} uJ", self.flops / 1e6, micro(self.flop_energy))?;
        writeln!(f, "SOPs   {:>12.4}M  {:>9.3} uJ", self.sops / 1e6, micro(self.sop_energy))?;
        writeln!(f, "Signs  {:>12.4}M  {:>9.3} uJ", self.signs / 1e6, micro(self.sign_energy))?;
        if let Some(s) = self.sparsity {
            writeln!(f, "sparsity {s:.4}")?;
        }
        if let Some(a) = self.ann_additions {
            writeln!(f, "ANN additions {:.4}M", a / 1e6)?;
        }
        for l in &self.layers {
            writeln!(
                f,
                "  layer {:>3}: A {:>10}  s {:.4}  SOPs {:.4}M",
                l.layer,
                l.additions,
                l.sparsity,
                l.sops / 1e6
            )?;
        }
        write!(f, "total  {:.3} uJ", micro(self.total_energy))
    }
}

/// Per-image energy of `spec` at the given input sparsity of each
/// spike-driven weighted layer (in the order of `count_ann_additions`).
pub fn estimate(spec: &NetworkSpec, sparsity: &[f64], timesteps: usize, cost: &CostTable) -> Result<EnergyReport> {
    cost.validate()?;
    if let Some(s) = sparsity.iter().find(|s| !(0.0..=1.0).contains(*s)) {
        return Err(Error::Contract(format!("sparsity {s} outside [0, 1]")));
    }
    let adds = count_ann_additions(spec)?;
    if sparsity.len() != adds.layers.len() {
        return Err(Error::Config(format!(
            "{} sparsity values for {} spike-driven layers",
            sparsity.len(),
            adds.layers.len()
        )));
    }
    let t = timesteps as f64;
    let layers: Vec<LayerEnergy> = adds
        .layers
        .iter()
        .zip(sparsity)
        .map(|(l, &s)| LayerEnergy {
            layer: l.layer,
            additions: l.macs,
            sparsity: s,
            sops: s * t * l.macs as f64,
        })
        .collect();
    let flops = adds.first.as_ref().map_or(0.0, |l| 2.0 * l.macs as f64 * t);
    let sops: f64 = layers.iter().map(|l| l.sops).sum();
    let shapes = spec.layer_shapes()?;
    let signs: f64 = spec
        .layers
        .iter()
        .enumerate()
        .filter_map(|(i, l)| l.lif().map(|c| (i, c.kind)))
        .map(|(i, kind)| (shapes[i].iter().product::<usize>() as u64 * signs_per_neuron(kind)) as f64 * t)
        .sum();
    let total_a = adds.total() as f64;
    let mut r = EnergyReport::priced(flops, sops, signs, cost);
    r.sparsity = Some(if total_a > 0.0 { sops / (t * total_a) } else { 0.0 });
    r.timesteps = Some(timesteps);
    r.ann_additions = Some(total_a);
    r.layers = layers;
    Ok(r)
}

/// Energy with sparsities measured in a forward record.
pub fn estimate_from_record(spec: &NetworkSpec, record: &ForwardRecord, cost: &CostTable) -> Result<EnergyReport> {
    let adds = count_ann_additions(spec)?;
    let sparsity = adds
        .layers
        .iter()
        .map(|l| {
            record
                .weighted_inputs
                .iter()
                .find(|w| w.layer == l.layer)
                .map(|w| w.nonzero as f64 / w.total.max(1) as f64)
                .ok_or_else(|| Error::Contract(format!("record has no input density for layer {}", l.layer)))
        })
        .collect::<Result<Vec<_>>>()?;
    estimate(spec, &sparsity, spec.timesteps, cost)
}

/// Externally supplied operation counts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OpCounts {
    pub flops: f64,
    pub sops: f64,
    pub signs: f64,
    #[serde(default)]
    pub sparsity: Option<f64>,
    #[serde(default)]
    pub timesteps: Option<usize>,
}

impl OpCounts {
    pub fn parse(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("flops", self.flops), ("sops", self.sops), ("signs", self.signs)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be a non-negative count, got {v}")));
            }
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }
}

pub fn estimate_from_counts(counts: &OpCounts, cost: &CostTable) -> Result<EnergyReport> {
    cost.validate()?;
    counts.validate()?;
    let mut r = EnergyReport::priced(counts.flops, counts.sops, counts.signs, cost);
    r.sparsity = counts.sparsity;
    r.timesteps = counts.timesteps;
    if let (Some(s), Some(t)) = (counts.sparsity, counts.timesteps) {
        r.ann_additions = Some(implied_ann_additions(counts.sops, s, t as f64)?);
    }
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{Encoder, Readout};
    use crate::neurons::LifConfig;

    fn spec(layers: Vec<LayerSpec>, input: Vec<usize>) -> NetworkSpec {
        NetworkSpec {
            input_shape: input,
            timesteps: 2,
            encoder: Encoder::Direct,
            readout: Readout::MeanPotential,
            layers,
        }
    }

    #[test]
    fn linear_additions() {
        let s = spec(
            vec![
                LayerSpec::linear(4),
                LayerSpec::neuron(LifConfig::new(NeuronKind::Binary)),
                LayerSpec::linear(3),
            ],
            vec![5],
        );
        let a = count_ann_additions(&s).unwrap();
        assert_eq!(a.first.unwrap().macs, 20);
        assert_eq!(a.layers[0].macs, 12);
    }

    #[test]
    fn pointwise_conv_additions() {
        let s = spec(
            vec![
                LayerSpec::conv(1, 1, 1, 0),
                LayerSpec::neuron(LifConfig::new(NeuronKind::Binary)),
                LayerSpec::conv(1, 1, 1, 0),
                LayerSpec::Flatten,
                LayerSpec::linear(2),
            ],
            vec![1, 8, 8],
        );
        assert_eq!(count_ann_additions(&s).unwrap().layers[0].macs, 64);
    }

    #[test]
    fn published_rows() {
        let cost = CostTable::default();
        let b = estimate_from_counts(
            &OpCounts {
                flops: 3.54e6,
                sops: 71.20e6,
                signs: 0.11e6,
                sparsity: None,
                timesteps: None,
            },
            &cost,
        )
        .unwrap();
        assert!((micro(b.total_energy) - 50.14).abs() < 0.01);
        assert!((micro(b.flop_energy) - 44.25).abs() < 1e-9);
    }

    #[test]
    fn zero_sparsity_costs_only_flops() {
        let s = spec(
            vec![
                LayerSpec::linear(4),
                LayerSpec::neuron(LifConfig::new(NeuronKind::Binary)),
                LayerSpec::linear(3),
            ],
            vec![5],
        );
        let r = estimate(&s, &[0.0], 2, &CostTable::default()).unwrap();
        assert_eq!(r.sops, 0.0);
        assert_eq!(r.flops, 2.0 * 20.0 * 2.0);
        assert_eq!(r.signs, 8.0);
        assert!(estimate(&s, &[1.5], 2, &CostTable::default()).is_err());
        assert!(estimate(&s, &[0.1, 0.1], 2, &CostTable::default()).is_err());
    }

    #[test]
    fn implied_additions_identity() {
        assert_eq!(implied_ann_additions(5.0, 1.0, 1.0).unwrap(), 5.0);
        assert!(implied_ann_additions(5.0, 0.0, 1.0).is_err());
    }

    #[test]
    fn counts_file_parsing() {
        let c = OpCounts::parse("flops = 3.54e6\nsops = 71.20e6\nsigns = 0.11e6\nsparsity = 0.1642\ntimesteps = 2\n").unwrap();
        assert_eq!(c.timesteps, Some(2));
        assert!(OpCounts::parse("flops = 1\nsops = 1\n").is_err());
        assert!(OpCounts::parse("flops = 1\nsops = 1\nsigns = 1\nwatts = 3\n").is_err());
    }

    #[test]
    fn nonpositive_costs_rejected() {
        let c = CostTable {
            sop: 0.0,
            ..Default::default()
        };
        assert!(c.validate().is_err());
    }
}
