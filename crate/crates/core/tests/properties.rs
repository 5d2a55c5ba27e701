mod common;

use proptest::prelude::*;
use ternary_spike::analysis::{capacity, entropy};
use ternary_spike::autograd::Tape;
use ternary_spike::config::RunConfig;
use ternary_spike::data::DatasetKind;
use ternary_spike::energy::{estimate, CostTable};
use ternary_spike::network::{build_small_cnn, ForwardOptions, Network};
use ternary_spike::neurons::{self, LifConfig, NeuronKind, NeuronLayerState};
use ternary_spike::reparam::{fold_network, verify_equivalence};
use ternary_spike::training::{LrSchedule, OptimizerKind, TrainConfig};
use ternary_spike::Tensor;

fn run_steps(kind: NeuronKind, a: f32, seqs: &[Vec<f32>]) -> (Vec<Vec<f32>>, Vec<Vec<f32>>) {
    let n = seqs.len();
    let steps = seqs[0].len();
    let cfg = LifConfig::new(kind);
    let mut state = NeuronLayerState::zeros(&[n]);
    let (mut mem, mut out) = (Vec::new(), Vec::new());
    for t in 0..steps {
        let x = Tensor::new(vec![n], seqs.iter().map(|s| s[t]).collect()).unwrap();
        let o = neurons::step(&state, &x, &cfg, a).unwrap();
        mem.push(o.membrane.data().to_vec());
        out.push(o.spikes.data().to_vec());
        state = o.state;
    }
    (mem, out)
}

fn sequences() -> impl Strategy<Value = Vec<Vec<f32>>> {
    (1usize..12).prop_flat_map(|steps| prop::collection::vec(prop::collection::vec(-3.0f32..3.0, steps), 1..16))
}

fn kind() -> impl Strategy<Value = NeuronKind> {
    prop_oneof![
        Just(NeuronKind::Binary),
        Just(NeuronKind::Ternary),
        Just(NeuronKind::TrainableTernary)
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn spike_values_stay_in_alphabet(seqs in sequences(), kind in kind(), a in 0.05f32..3.0) {
        let (_, out) = run_steps(kind, a, &seqs);
        let allowed: Vec<f32> = match kind {
            NeuronKind::Binary => vec![0.0, 1.0],
            NeuronKind::Ternary => vec![-1.0, 0.0, 1.0],
            NeuronKind::TrainableTernary => vec![-a, 0.0, a],
        };
        for v in out.iter().flatten() {
            prop_assert!(allowed.contains(v), "{v} not in {allowed:?}");
        }
    }

    #[test]
    fn firing_resets_the_leak(seqs in sequences(), kind in kind()) {
        let (mem, out) = run_steps(kind, 1.0, &seqs);
        for t in 1..mem.len() {
            for i in 0..seqs.len() {
                if out[t - 1][i] != 0.0 {
                    prop_assert_eq!(mem[t][i].to_bits(), seqs[i][t].to_bits());
                }
            }
        }
    }

    #[test]
    fn ternary_is_sign_antisymmetric(seqs in sequences()) {
        let neg: Vec<Vec<f32>> = seqs.iter().map(|s| s.iter().map(|v| -v).collect()).collect();
        let (m1, o1) = run_steps(NeuronKind::Ternary, 1.0, &seqs);
        let (m2, o2) = run_steps(NeuronKind::Ternary, 1.0, &neg);
        for t in 0..m1.len() {
            for i in 0..seqs.len() {
                prop_assert_eq!(m1[t][i].to_bits(), (-m2[t][i]).to_bits());
                prop_assert_eq!(o1[t][i], -o2[t][i]);
            }
        }
    }

    #[test]
    fn unit_amplitude_matches_ternary(seqs in sequences()) {
        let a = run_steps(NeuronKind::Ternary, 1.0, &seqs);
        let b = run_steps(NeuronKind::TrainableTernary, 1.0, &seqs);
        for (x, y) in a.0.iter().flatten().zip(b.0.iter().flatten()) {
            prop_assert_eq!(x.to_bits(), y.to_bits());
        }
        for (x, y) in a.1.iter().flatten().zip(b.1.iter().flatten()) {
            prop_assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn scalar_simulator_agrees(seqs in sequences(), ternary in any::<bool>()) {
        let kind = if ternary { NeuronKind::Ternary } else { NeuronKind::Binary };
        let (mem, out) = run_steps(kind, 1.0, &seqs);
        for (i, s) in seqs.iter().enumerate() {
            let (us, bs) = common::scalar_lif(s, ternary);
            for t in 0..s.len() {
                prop_assert_eq!(mem[t][i].to_bits(), us[t].to_bits());
                prop_assert_eq!(out[t][i], bs[t]);
            }
        }
    }

    #[test]
    fn amplitude_gradient_is_the_base_spike(seqs in sequences(), a in 0.1f32..2.0) {
        let n = seqs.len();
        let steps = seqs[0].len();
        let mut data = vec![0.0; n * steps];
        for (i, s) in seqs.iter().enumerate() {
            for t in 0..steps {
                data[t * n + i] = s[t];
            }
        }
        let cfg = LifConfig::new(NeuronKind::TrainableTernary);
        // one element at a time: d o_k / d a = b_k
        for k in 0..(n * steps).min(24) {
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::new(vec![n * steps], data.clone()).unwrap());
            let av = tape.leaf(Tensor::scalar(a), true);
            let out = neurons::lif_sequence(&mut tape, x, Some(av), &cfg, steps, false, false).unwrap();
            let mut pick = vec![0.0; n * steps];
            pick[k] = 1.0;
            let sel = tape.constant(Tensor::from_vec(pick));
            let prod = tape.mul(out.spikes, sel).unwrap();
            let loss = tape.sum(prod);
            let spike = tape.value(out.spikes).data()[k];
            let g = tape.gradients(loss).unwrap();
            let da = g.get(av).unwrap().item().unwrap();
            prop_assert_eq!(da * a, spike);
            prop_assert!([-1.0, 0.0, 1.0].contains(&da));
        }
    }

    #[test]
    fn entropy_bounded_by_log_alphabet(raw in prop::collection::vec(0.0f64..1.0, 1..10)) {
        let total: f64 = raw.iter().sum();
        prop_assume!(total > 1e-9);
        let p: Vec<f64> = raw.iter().map(|v| v / total).collect();
        let h = entropy(&p).unwrap();
        let max = (p.len() as f64).log2();
        prop_assert!(h <= max + 1e-12);
        prop_assert!(h >= 0.0);
        let uniform = p.iter().all(|v| (v - 1.0 / p.len() as f64).abs() < 1e-9);
        if !uniform {
            prop_assert!(h < max);
        }
    }

    #[test]
    fn capacity_is_linear(c in 1usize..64, h in 1usize..64, w in 1usize..64, k in 2usize..9) {
        let base = capacity(&[c, h, w], k).unwrap();
        prop_assert!((capacity(&[2 * c, h, w], k).unwrap() - 2.0 * base).abs() <= 1e-9 * base);
        prop_assert!((capacity(&[c, h, w], k * k).unwrap() - 2.0 * base).abs() <= 1e-9 * base);
    }

    #[test]
    fn energy_is_monotone(s1 in 0.0f64..1.0, s2 in 0.0f64..1.0, d in 0.0f64..0.5, t in 1usize..6) {
        let spec = build_small_cnn("cnn-mnist", NeuronKind::Ternary, t).unwrap();
        let cost = CostTable::default();
        let lo = estimate(&spec, &[s1, s2], t, &cost).unwrap();
        let hi = estimate(&spec, &[(s1 + d).min(1.0), s2], t, &cost).unwrap();
        let longer = estimate(&spec, &[s1, s2], t + 1, &cost).unwrap();
        prop_assert!(hi.total_energy >= lo.total_energy);
        prop_assert!(longer.total_energy >= lo.total_energy);
        let recomposed = lo.flops * cost.flop + lo.sops * cost.sop + lo.signs * cost.sign;
        prop_assert!((recomposed - lo.total_energy).abs() <= 1e-15);
    }

    #[test]
    fn tensor_container_round_trips(shape in prop::collection::vec(1usize..5, 0..4), seed in any::<u64>()) {
        let t = common::uniform(&mut common::rng(seed), &shape, -1e3, 1e3);
        let mut buf = Vec::new();
        t.write_to(&mut buf).unwrap();
        let back = Tensor::read_from(&mut buf.as_slice()).unwrap();
        prop_assert_eq!(back, t);
    }
}

fn run_config() -> impl Strategy<Value = RunConfig> {
    (
        prop_oneof![Just("mlp-mnist"), Just("cnn-mnist"), Just("resnet-mini")],
        kind(),
        1usize..8,
        prop_oneof![Just(DatasetKind::Mnist), Just(DatasetKind::FashionMnist), Just(DatasetKind::Cifar10)],
        prop::option::of(1usize..100_000),
        prop::option::of(1usize..10_000),
        (1usize..50, 1usize..512, 0.0f32..1.0, 0.0f32..0.01, 0.0f32..0.99, any::<u64>()),
        (any::<bool>(), any::<bool>(), 0.0f32..10.0, prop::option::of(1usize..10_000)),
        "[a-z]{1,8}",
    )
        .prop_map(|(preset, neuron, timesteps, dataset, train_limit, test_limit, t, o, dir)| {
            let (epochs, batch_size, learning_rate, weight_decay, momentum, seed) = t;
            let (adam, cosine, grad_clip, max_steps) = o;
            RunConfig {
                preset: preset.into(),
                neuron,
                timesteps,
                dataset,
                data_dir: format!("data/{dir}").into(),
                train_limit,
                test_limit,
                output_dir: format!("runs/{dir}").into(),
                train: TrainConfig {
                    epochs,
                    batch_size,
                    learning_rate,
                    weight_decay,
                    momentum,
                    seed,
                    optimizer: if adam { OptimizerKind::Adam } else { OptimizerKind::SgdMomentum },
                    lr_schedule: if cosine { LrSchedule::Cosine } else { LrSchedule::Constant },
                    grad_clip,
                    max_steps,
                    eval_batch_size: batch_size,
                },
                network: None,
            }
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn config_round_trips(cfg in run_config()) {
        let text = cfg.to_toml().unwrap();
        let back = RunConfig::from_toml(&text).unwrap();
        prop_assert_eq!(&back, &cfg);
        prop_assert_eq!(back.to_toml().unwrap(), text);
    }

    #[test]
    fn explicit_network_round_trips(kind in kind(), t in 1usize..5) {
        let cfg = RunConfig {
            network: Some(build_small_cnn("resnet-mini", kind, t).unwrap()),
            neuron: kind,
            timesteps: t,
            ..Default::default()
        };
        prop_assert_eq!(RunConfig::from_toml(&cfg.to_toml().unwrap()).unwrap(), cfg);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn folding_preserves_outputs(a1 in 0.1f32..3.0, a2 in 0.1f32..3.0, seed in 0u64..1000) {
        let mut net = Network::init(build_small_cnn("mlp-mnist", NeuronKind::TrainableTernary, 2).unwrap(), seed).unwrap();
        for (name, a) in [("layer2.amplitude", a1), ("layer4.amplitude", a2)] {
            let id = net.params().id(name).unwrap();
            net.params_mut().get_mut(id).value = Tensor::scalar(a);
        }
        let probe = common::uniform(&mut common::rng(seed), &[8, 1, 28, 28], -2.0, 2.0);
        let conv = fold_network(&net).unwrap();
        let report = verify_equivalence(&net, &conv.network, &probe, 1e-5).unwrap();
        prop_assert!(report.layers.iter().all(|l| l.pattern_match && l.alphabet_ok));
        let again = fold_network(&conv.network).unwrap();
        prop_assert_eq!(&again.network, &conv.network);
    }

    #[test]
    fn forward_is_deterministic(seed in 0u64..1000, kind in kind()) {
        let net = Network::init(build_small_cnn("cnn-mnist", kind, 2).unwrap(), seed).unwrap();
        let x = common::uniform(&mut common::rng(seed), &[2, 1, 28, 28], -1.0, 1.0);
        let (a, _) = net.forward(&x, ForwardOptions::eval()).unwrap();
        let (b, _) = net.forward(&x, ForwardOptions::eval()).unwrap();
        prop_assert_eq!(a, b);
    }
}
