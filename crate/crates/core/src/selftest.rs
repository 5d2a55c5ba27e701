//! Brute-force cross-checks run by `tspike selftest`. Hermetic: no data
//! files, no network.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::analysis::{capacity, real_capacity};
use crate::autograd::Tape;
use crate::energy::{estimate_from_counts, implied_ann_additions, CostTable, OpCounts};
use crate::error::Result;
use crate::network::{Encoder, ForwardOptions, LayerSpec, Network, NetworkSpec, Readout};
use crate::neurons::{self, LifConfig, NeuronKind, NeuronLayerState};
use crate::tensor::{conv2d, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

pub fn run_all() -> Vec<Check> {
    let checks: [(&'static str, fn() -> Result<(bool, String)>); 6] = [
        ("neuron traces", neuron_traces),
        ("fused LIF sequence", fused_sequence),
        ("surrogate gradients", gradient_check),
        ("energy table", energy_table),
        ("capacity ratios", capacity_ratios),
        ("convolution", convolution),
    ];
    checks
        .iter()
        .map(|(name, f)| match f() {
            Ok((passed, detail)) => Check { name, passed, detail },
            Err(e) => Check {
                name,
                passed: false,
                detail: format!("error: {e}"),
            },
        })
        .collect()
}

/// Scalar LIF written out directly, no shared helpers.
fn scalar_lif(xs: &[f32], ternary: bool) -> (Vec<f32>, Vec<f32>) {
    let (mut u, mut b) = (0.0f32, 0.0f32);
    let (mut us, mut bs) = (Vec::new(), Vec::new());
    for &x in xs {
        u = 0.25 * u * (1.0 - b.abs()) + x;
        b = if u >= 1.0 {
            1.0
        } else if ternary && u <= -1.0 {
            -1.0
        } else {
            0.0
        };
        us.push(u);
        bs.push(b);
    }
    (us, bs)
}

fn random_sequences(rng: &mut ChaCha8Rng, n: usize, steps: usize) -> Vec<Vec<f32>> {
    (0..n)
        .map(|_| (0..steps).map(|_| rng.random_range(-2.5f32..2.5)).collect())
        .collect()
}

fn neuron_traces() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (n, steps) = (1000, 10);
    let seqs = random_sequences(&mut rng, n, steps);
    let mut mismatches = 0;
    for kind in [NeuronKind::Binary, NeuronKind::Ternary] {
        let cfg = LifConfig::new(kind);
        let mut state = NeuronLayerState::zeros(&[n]);
        for t in 0..steps {
            let x = Tensor::new(vec![n], seqs.iter().map(|s| s[t]).collect())?;
            let out = neurons::step(&state, &x, &cfg, 1.0)?;
            for (i, s) in seqs.iter().enumerate() {
                let (us, bs) = scalar_lif(&s[..=t], kind.is_ternary());
                if out.membrane.data()[i].to_bits() != us[t].to_bits() || out.spikes.data()[i] != bs[t] {
                    mismatches += 1;
                }
            }
            state = out.state;
        }
    }
    Ok((mismatches == 0, format!("{mismatches} mismatches over 2x{n} sequences")))
}

fn fused_sequence() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let (n, steps) = (64, 6);
    let seqs = random_sequences(&mut rng, n, steps);
    let cfg = LifConfig::new(NeuronKind::Ternary);
    let mut data = vec![0.0; n * steps];
    for (i, s) in seqs.iter().enumerate() {
        for t in 0..steps {
            data[t * n + i] = s[t];
        }
    }
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::new(vec![steps * n], data)?);
    let out = neurons::lif_sequence(&mut tape, x, None, &cfg, steps, false, false)?;
    let spikes = tape.value(out.spikes);
    let bad = seqs
        .iter()
        .enumerate()
        .filter(|(i, s)| {
            let (_, bs) = scalar_lif(s, true);
            (0..steps).any(|t| spikes.data()[t * n + i] != bs[t])
        })
        .count();
    Ok((bad == 0, format!("{bad} of {n} sequences differ")))
}

struct Harness {
    n: usize,
    inputs: usize,
    hidden: usize,
    classes: usize,
    steps: usize,
    x: Vec<f64>,
    labels: Vec<usize>,
}

const RAMP: f64 = 0.5;

fn relaxed(u: f64) -> f64 {
    let ramp = |z: f64| ((z + RAMP) / (2.0 * RAMP)).clamp(0.0, 1.0);
    ramp(u - 1.0) - ramp(-u - 1.0)
}

impl Harness {
    /// Loss of the relaxed two-layer network in f64, plus the smallest
    /// distance of any membrane to a kink of the relaxed spike.
    fn loss(&self, w1: &[f64], b1: &[f64], a: f64, w2: &[f64], b2: &[f64]) -> (f64, f64) {
        let (h, k) = (self.hidden, self.classes);
        let mut total = 0.0;
        let mut margin = f64::INFINITY;
        for s in 0..self.n {
            let mut current = vec![0.0; h];
            for (j, c) in current.iter_mut().enumerate() {
                *c = b1[j] + (0..self.inputs).map(|i| self.x[s * self.inputs + i] * w1[i * h + j]).sum::<f64>();
            }
            let mut u = vec![0.0; h];
            let mut b = vec![0.0; h];
            let mut logits = vec![0.0; k];
            for _ in 0..self.steps {
                for j in 0..h {
                    u[j] = 0.25 * u[j] * (1.0 - f64::abs(b[j])) + current[j];
                    for kink in [-1.5, -1.0, -0.5, 0.5, 1.0, 1.5] {
                        margin = margin.min((u[j] - kink).abs());
                    }
                    b[j] = if u[j] >= 1.0 {
                        1.0
                    } else if u[j] <= -1.0 {
                        -1.0
                    } else {
                        0.0
                    };
                }
                for (c, l) in logits.iter_mut().enumerate() {
                    *l += (b2[c] + (0..h).map(|j| a * relaxed(u[j]) * w2[j * k + c]).sum::<f64>()) / self.steps as f64;
                }
            }
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
            total += lse - logits[self.labels[s]];
        }
        (total / self.n as f64, margin)
    }
}

fn gradient_check() -> Result<(bool, String)> {
    let (inputs, hidden, classes, n, steps) = (4, 8, 3, 6, 2);
    let spec = NetworkSpec {
        input_shape: vec![inputs],
        timesteps: steps,
        encoder: Encoder::Direct,
        readout: Readout::MeanPotential,
        layers: vec![
            LayerSpec::linear(hidden),
            LayerSpec::neuron(LifConfig::new(NeuronKind::TrainableTernary)),
            LayerSpec::linear(classes),
        ],
    };
    let normal = Normal::new(0.0f32, 1.0).expect("unit normal");
    for seed in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let mut net = Network::init(spec.clone(), seed)?;
        let amp = net.params().id("layer1.amplitude").expect("amplitude");
        net.params_mut().get_mut(amp).value = Tensor::scalar(0.8);
        let x: Vec<f32> = (0..n * inputs).map(|_| 1.2 * normal.sample(&mut rng)).collect();
        let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
        let get = |net: &Network, name: &str| -> Vec<f64> {
            net.params().by_name(name).expect("param").value.data().iter().map(|&v| v as f64).collect()
        };
        let h = Harness {
            n,
            inputs,
            hidden,
            classes,
            steps,
            x: x.iter().map(|&v| v as f64).collect(),
            labels: labels.clone(),
        };
        let (w1, b1, w2, b2) = (
            get(&net, "layer0.weight"),
            get(&net, "layer0.bias"),
            get(&net, "layer2.weight"),
            get(&net, "layer2.bias"),
        );
        let a = 0.8f32 as f64;
        let (_, margin) = h.loss(&w1, &b1, a, &w2, &b2);
        if margin < 5e-3 {
            continue;
        }

        let mut tape = Tape::new();
        let batch = Tensor::new(vec![n, inputs], x)?;
        let out = net.forward_tape(
            &mut tape,
            &batch,
            ForwardOptions {
                relaxed: true,
                ..ForwardOptions::eval()
            },
        )?;
        let loss = tape.softmax_cross_entropy(out.logits, &labels)?;
        tape.backward(loss, net.params_mut())?;

        let eps = 1e-3;
        let mut worst = 0.0f64;
        let mut compare = |analytic: f32, plus: f64, minus: f64| {
            let fd = (plus - minus) / (2.0 * eps);
            let err = (analytic as f64 - fd).abs() / fd.abs().max(analytic.abs() as f64).max(1e-3);
            worst = worst.max(err);
        };
        let g = |net: &Network, name: &str| net.params().by_name(name).expect("param").grad.data().to_vec();
        for (i, &gv) in g(&net, "layer0.weight").iter().enumerate() {
            let (mut p, mut m) = (w1.clone(), w1.clone());
            p[i] += eps;
            m[i] -= eps;
            compare(gv, h.loss(&p, &b1, a, &w2, &b2).0, h.loss(&m, &b1, a, &w2, &b2).0);
        }
        for (i, &gv) in g(&net, "layer2.weight").iter().enumerate() {
            let (mut p, mut m) = (w2.clone(), w2.clone());
            p[i] += eps;
            m[i] -= eps;
            compare(gv, h.loss(&w1, &b1, a, &p, &b2).0, h.loss(&w1, &b1, a, &m, &b2).0);
        }
        let ga = g(&net, "layer1.amplitude")[0];
        compare(ga, h.loss(&w1, &b1, a + eps, &w2, &b2).0, h.loss(&w1, &b1, a - eps, &w2, &b2).0);
        return Ok((worst <= 1e-2, format!("worst relative error {worst:.2e} (seed {seed})")));
    }
    Ok((false, "no input draw kept membranes away from kinks".into()))
}

fn energy_table() -> Result<(bool, String)> {
    let cost = CostTable::default();
    let bin = OpCounts {
        flops: 3.54e6,
        sops: 71.20e6,
        signs: 0.11e6,
        sparsity: Some(0.1642),
        timesteps: Some(2),
    };
    let ter = OpCounts {
        sops: 79.21e6,
        signs: 0.23e6,
        sparsity: Some(0.1827),
        ..bin.clone()
    };
    let (b, t) = (estimate_from_counts(&bin, &cost)?, estimate_from_counts(&ter, &cost)?);
    let (eb, et) = (b.total_energy * 1e6, t.total_energy * 1e6);
    let overhead = t.overhead_over(&b) * 100.0;
    let ab = implied_ann_additions(bin.sops, 0.1642, 2.0)?;
    let at = implied_ann_additions(ter.sops, 0.1827, 2.0)?;
    let ok = ((eb - 50.14) / 50.14).abs() <= 0.005
        && ((et - 51.20) / 51.20).abs() <= 0.005
        && (overhead - 2.11).abs() <= 0.1
        && ((ab - at) / ab).abs() <= 1e-3;
    Ok((
        ok,
        format!(
            "binary {eb:.3} uJ, ternary {et:.3} uJ, overhead {overhead:.3}%, A {:.2}M / {:.2}M",
            ab / 1e6,
            at / 1e6
        ),
    ))
}

fn capacity_ratios() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut worst = 0.0f64;
    let mut real_ok = true;
    for _ in 0..100 {
        let shape: Vec<usize> = (0..3).map(|_| rng.random_range(1..64)).collect();
        let r = capacity(&shape, 3)? / capacity(&shape, 2)?;
        worst = worst.max((r - 3f64.log2()).abs());
        real_ok &= real_capacity(&shape)? / capacity(&shape, 2)? == 32.0;
    }
    Ok((worst <= 1e-12 && real_ok, format!("max ratio error {worst:.1e}")))
}

fn convolution() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let (n, c, h, w, o, k, stride, pad) = (2, 3, 7, 9, 4, 3, 2, 1);
    let input = Tensor::new(vec![n, c, h, w], (0..n * c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect())?;
    let kernel = Tensor::new(vec![o, c, k, k], (0..o * c * k * k).map(|_| rng.random_range(-1.0..1.0)).collect())?;
    let got = conv2d(&input, &kernel, stride, pad)?;
    let (ho, wo) = ((h + 2 * pad - k) / stride + 1, (w + 2 * pad - k) / stride + 1);
    let mut worst = 0.0f64;
    for b in 0..n {
        for oc in 0..o {
            for y in 0..ho {
                for x in 0..wo {
                    let mut acc = 0.0f64;
                    for ic in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let (iy, ix) = ((y * stride + ky) as isize - pad as isize, (x * stride + kx) as isize - pad as isize);
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                acc += input.data()[((b * c + ic) * h + iy as usize) * w + ix as usize] as f64
                                    * kernel.data()[((oc * c + ic) * k + ky) * k + kx] as f64;
                            }
                        }
                    }
                    let v = got.data()[((b * o + oc) * ho + y) * wo + x] as f64;
                    worst = worst.max((v - acc).abs());
                }
            }
        }
    }
    Ok((worst <= 1e-5, format!("max deviation {worst:.1e}")))
}
