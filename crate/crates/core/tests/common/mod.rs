//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ternary_spike::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f32, hi: f32) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Loop-based LIF: u = tau·u·(1−|b|) + x, fire at ±1.
pub fn scalar_lif(xs: &[f32], ternary: bool) -> (Vec<f32>, Vec<f32>) {
    let (mut u, mut b) = (0.0f32, 0.0f32);
    let mut us = Vec::with_capacity(xs.len());
    let mut bs = Vec::with_capacity(xs.len());
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

/// Direct cross-correlation with zero padding, accumulated in f64.
pub fn conv_oracle(input: &Tensor, kernel: &Tensor, stride: usize, pad: usize) -> Vec<f64> {
    let (n, c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2], input.shape()[3]);
    let (o, k) = (kernel.shape()[0], kernel.shape()[2]);
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (w + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; n * o * ho * wo];
    for b in 0..n {
        for oc in 0..o {
            for y in 0..ho {
                for x in 0..wo {
                    let mut acc = 0.0f64;
                    for ic in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (y * stride + ky) as isize - pad as isize;
                                let ix = (x * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                let v = input.data()[((b * c + ic) * h + iy as usize) * w + ix as usize];
                                let kv = kernel.data()[((oc * c + ic) * k + ky) * k + kx];
                                acc += v as f64 * kv as f64;
                            }
                        }
                    }
                    out[((b * o + oc) * ho + y) * wo + x] = acc;
                }
            }
        }
    }
    out
}

/// Relaxed spike: ramps of half-width 0.5 around ±1 (ternary) or +1.
pub fn relaxed_spike(u: f64, ternary: bool) -> f64 {
    let ramp = |z: f64| ((z + 0.5) / 1.0).clamp(0.0, 1.0);
    let pos = ramp(u - 1.0);
    if ternary {
        pos - ramp(-u - 1.0)
    } else {
        pos
    }
}

/// Two-layer spiking classifier (Linear → LIF → Linear, mean readout) in
/// f64 with relaxed spikes and a hard, non-differentiated reset.
pub struct RelaxedNet {
    pub inputs: usize,
    pub hidden: usize,
    pub classes: usize,
    pub steps: usize,
    pub ternary: bool,
}

impl RelaxedNet {
    /// Mean cross-entropy and the closest approach of any membrane to a
    /// point where the relaxed spike or the reset is not smooth.
    pub fn loss(
        &self,
        x: &[f64],
        labels: &[usize],
        w1: &[f64],
        b1: &[f64],
        a: f64,
        w2: &[f64],
        b2: &[f64],
    ) -> (f64, f64) {
        let (h, k) = (self.hidden, self.classes);
        let n = labels.len();
        let mut total = 0.0;
        let mut margin = f64::INFINITY;
        for s in 0..n {
            let cur: Vec<f64> = (0..h)
                .map(|j| b1[j] + (0..self.inputs).map(|i| x[s * self.inputs + i] * w1[i * h + j]).sum::<f64>())
                .collect();
            let (mut u, mut b) = (vec![0.0; h], vec![0.0; h]);
            let mut logits = vec![0.0; k];
            for _ in 0..self.steps {
                for j in 0..h {
                    u[j] = 0.25 * u[j] * (1.0 - f64::abs(b[j])) + cur[j];
                    for kink in [-1.5, -1.0, -0.5, 0.5, 1.0, 1.5] {
                        margin = margin.min((u[j] - kink).abs());
                    }
                    b[j] = if u[j] >= 1.0 {
                        1.0
                    } else if self.ternary && u[j] <= -1.0 {
                        -1.0
                    } else {
                        0.0
                    };
                }
                for (c, l) in logits.iter_mut().enumerate() {
                    let z: f64 = (0..h).map(|j| a * relaxed_spike(u[j], self.ternary) * w2[j * k + c]).sum();
                    *l += (z + b2[c]) / self.steps as f64;
                }
            }
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
            total += lse - logits[labels[s]];
        }
        (total / n as f64, margin)
    }
}

/// Shannon entropy in bits of empirical counts.
pub fn entropy_of_counts(counts: &[usize]) -> f64 {
    let n: usize = counts.iter().sum();
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n as f64;
            -p * p.log2()
        })
        .sum()
}

pub fn workspace_root() -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

/// Writes an MNIST-layout directory with `n_train`/`n_test` synthetic digits:
/// class `c` lights up a horizontal band at row block `c`.
pub fn write_idx_fixture(dir: &std::path::Path, n_train: usize, n_test: usize, side: usize) {
    let write = |name: &str, magic: u32, dims: &[u32], payload: &[u8]| {
        let mut bytes = magic.to_be_bytes().to_vec();
        for d in dims {
            bytes.extend_from_slice(&d.to_be_bytes());
        }
        bytes.extend_from_slice(payload);
        std::fs::write(dir.join(name), bytes).unwrap();
    };
    let mut r = rng(77);
    for (prefix, n) in [("train", n_train), ("t10k", n_test)] {
        let mut pixels = Vec::with_capacity(n * side * side);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let label = (i % 10) as u8;
            labels.push(label);
            let band = label as usize * side / 10;
            for y in 0..side {
                for _ in 0..side {
                    let on = y >= band && y < band + (side / 10).max(1);
                    let noise: u8 = r.random_range(0..40);
                    pixels.push(if on { 215 + noise } else { noise });
                }
            }
        }
        write(&format!("{prefix}-images-idx3-ubyte"), 0x803, &[n as u32, side as u32, side as u32], &pixels);
        write(&format!("{prefix}-labels-idx1-ubyte"), 0x801, &[n as u32], &labels);
    }
}
