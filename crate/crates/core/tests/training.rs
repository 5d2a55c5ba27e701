mod common;

use ternary_spike::autograd::ParamRole;
use ternary_spike::data::{Dataset, Split};
use ternary_spike::network::{build_small_cnn, Encoder, LayerSpec, Network, NetworkSpec, Readout};
use ternary_spike::neurons::{LifConfig, NeuronKind};
use ternary_spike::training::{evaluate, train, Checkpoint, OptimizerKind, TrainConfig, Trainer};
use ternary_spike::{Error, Tensor};

fn small_spec(kind: NeuronKind) -> NetworkSpec {
    NetworkSpec {
        input_shape: vec![1, 8, 8],
        timesteps: 2,
        encoder: Encoder::Direct,
        readout: Readout::MeanPotential,
        layers: vec![
            LayerSpec::Flatten,
            LayerSpec::linear(16),
            LayerSpec::neuron(LifConfig::new(kind)),
            LayerSpec::linear(10),
        ],
    }
}

fn fixture(n_train: usize, n_test: usize) -> Dataset {
    let dir = tempfile::tempdir().unwrap();
    common::write_idx_fixture(dir.path(), n_train, n_test, 8);
    Dataset::load_idx_dir(dir.path(), "fixture").unwrap()
}

fn set_all(net: &mut Network, role: ParamRole, value: f32) {
    for p in net.params_mut().iter_mut().filter(|p| p.role == role) {
        p.value = Tensor::full(p.value.shape(), value);
    }
}

#[test]
fn silent_network_predicts_the_tie_break_class() {
    let data = fixture(10, 40);
    let mut net = Network::init(small_spec(NeuronKind::Ternary), 0).unwrap();
    set_all(&mut net, ParamRole::Weight, 0.0);
    set_all(&mut net, ParamRole::Bias, 0.0);
    // bias the readout toward the most frequent label so ties resolve to it
    let labels = &data.test.labels;
    let majority = (0..10).max_by_key(|c| (labels.iter().filter(|&&l| l == *c).count(), usize::MAX - c)).unwrap();
    let id = net.params().id("layer3.bias").unwrap();
    net.params_mut().get_mut(id).value.data_mut()[majority] = 1.0;
    let m = evaluate(&net, &data.test, 16).unwrap();
    assert_eq!(m.overall_sparsity, 0.0);
    let rate = labels.iter().filter(|&&l| l == majority).count() as f64 / labels.len() as f64;
    assert_eq!(m.accuracy, rate);
}

#[test]
fn saturated_layer_has_sparsity_one() {
    let data = fixture(10, 20);
    let mut net = Network::init(small_spec(NeuronKind::Binary), 0).unwrap();
    set_all(&mut net, ParamRole::Weight, 0.0);
    let id = net.params().id("layer1.bias").unwrap();
    net.params_mut().get_mut(id).value = Tensor::full(&[16], 5.0);
    let m = evaluate(&net, &data.test, 8).unwrap();
    assert_eq!(m.overall_sparsity, 1.0);
    assert_eq!(m.layer_sparsity[0].sparsity, 1.0);
}

#[test]
fn frozen_optimizer_keeps_metrics() {
    let data = fixture(64, 20);
    for opt in [OptimizerKind::SgdMomentum, OptimizerKind::Adam] {
        let cfg = TrainConfig {
            epochs: 1,
            learning_rate: 0.0,
            batch_size: 16,
            optimizer: opt,
            ..Default::default()
        };
        let mut trainer = Trainer::new(small_spec(NeuronKind::TrainableTernary), cfg).unwrap();
        let before = evaluate(trainer.network(), &data.test, 8).unwrap();
        let values = |t: &Trainer| t.network().params().iter().map(|p| p.value.clone()).collect::<Vec<_>>();
        let params = values(&trainer);
        trainer.run_epoch(&data.train, 1).unwrap();
        assert_eq!(values(&trainer), params);
        let after = evaluate(trainer.network(), &data.test, 8).unwrap();
        assert_eq!(before.accuracy, after.accuracy);
        assert_eq!(before.loss.to_bits(), after.loss.to_bits());
    }
}

#[test]
fn training_is_reproducible_and_learns() {
    let data = fixture(200, 50);
    let cfg = TrainConfig {
        epochs: 3,
        batch_size: 20,
        learning_rate: 0.05,
        seed: 3,
        ..Default::default()
    };
    let a = train(small_spec(NeuronKind::Ternary), &data, &cfg).unwrap();
    let b = train(small_spec(NeuronKind::Ternary), &data, &cfg).unwrap();
    assert_eq!(a.history, b.history);
    assert_eq!(a.params, b.params);
    let best = a.history.iter().map(|h| h.val_accuracy).fold(0.0, f64::max);
    assert!(best > 0.5, "{:?}", a.history);
    // the returned checkpoint is the best epoch
    assert_eq!(a.history[a.epoch - 1].val_accuracy, best);
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let data = fixture(60, 30);
    let cfg = TrainConfig {
        epochs: 1,
        batch_size: 20,
        ..Default::default()
    };
    let ckpt = train(small_spec(NeuronKind::TrainableTernary), &data, &cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    ckpt.save(dir.path()).unwrap();
    let back = Checkpoint::load(dir.path()).unwrap();
    assert_eq!(back, ckpt);
    let m1 = evaluate(&ckpt.network().unwrap(), &data.test, 7).unwrap();
    let m2 = evaluate(&back.network().unwrap(), &data.test, 7).unwrap();
    assert_eq!(m1.loss.to_bits(), m2.loss.to_bits());
    assert_eq!(m1.accuracy, m2.accuracy);
    assert_eq!(m1.layer_sparsity, m2.layer_sparsity);
}

#[test]
fn corrupt_checkpoint_reports_offset() {
    let net = Network::init(small_spec(NeuronKind::Binary), 0).unwrap();
    let dir = tempfile::tempdir().unwrap();
    Checkpoint::from_network(&net, 0).save(dir.path()).unwrap();
    let file = dir.path().join("layer1.weight.tspk");
    let bytes = std::fs::read(&file).unwrap();
    std::fs::write(&file, &bytes[..bytes.len() - 3]).unwrap();
    match Checkpoint::load(dir.path()) {
        Err(Error::Format { offset, .. }) => assert!(offset > 0),
        other => panic!("{:?}", other.map(|c| c.epoch)),
    }
}

#[test]
fn mismatched_data_is_config_error() {
    let data = fixture(10, 10);
    let spec = build_small_cnn("mlp-mnist", NeuronKind::Binary, 2).unwrap();
    assert!(matches!(train(spec, &data, &TrainConfig::default()), Err(Error::Config(_))));
}

#[test]
fn nan_input_aborts_with_location() {
    // thresholding hides NaN activations from the loss, so the first
    // non-finite value shows up in the updated weights
    let images = Tensor::new(vec![2, 1, 8, 8], vec![f32::NAN; 128]).unwrap();
    let split = Split::new(images, vec![0, 1], 10).unwrap();
    let mut trainer = Trainer::new(small_spec(NeuronKind::Ternary), TrainConfig::default()).unwrap();
    let (x, y) = split.batch(&[0, 1]).unwrap();
    match trainer.train_step(&x, &y, 2) {
        Err(Error::Divergence { epoch, location }) => {
            assert_eq!(epoch, 2);
            assert_eq!(location, "parameter layer1.weight");
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn mlp_overfits_small_subset() {
    let data = Dataset::load_idx_dir(common::workspace_root().join("data/mnist"), "mnist")
        .unwrap()
        .truncated(Some(32), Some(32))
        .unwrap();
    for kind in [NeuronKind::Binary, NeuronKind::Ternary, NeuronKind::TrainableTernary] {
        let cfg = TrainConfig {
            batch_size: 32,
            learning_rate: 0.05,
            lr_schedule: ternary_spike::training::LrSchedule::Constant,
            ..Default::default()
        };
        let mut trainer = Trainer::new(build_small_cnn("mlp-mnist", kind, 2).unwrap(), cfg).unwrap();
        for step in 1..=200 {
            trainer.run_epoch(&data.train, step).unwrap();
        }
        assert_eq!(evaluate(trainer.network(), &data.train, 32).unwrap().accuracy, 1.0, "{kind:?}");
    }
}
