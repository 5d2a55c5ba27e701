//! Surrogate-gradient BPTT training, evaluation and checkpoints.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{ParamRole, ParamStore, Parameter, Tape};
use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::network::{ForwardOptions, ForwardRecord, Network, NetworkSpec};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    #[default]
    SgdMomentum,
    Adam,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LrSchedule {
    Constant,
    #[default]
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub weight_decay: f32,
    pub momentum: f32,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    pub lr_schedule: LrSchedule,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub grad_clip: f32,
    /// Stop after this many optimizer steps, whatever the epoch count.
    pub max_steps: Option<usize>,
    pub eval_batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 3,
            batch_size: 64,
            learning_rate: 0.1,
            weight_decay: 5e-4,
            momentum: 0.9,
            seed: 0,
            optimizer: OptimizerKind::SgdMomentum,
            lr_schedule: LrSchedule::Cosine,
            grad_clip: 5.0,
            max_steps: None,
            eval_batch_size: 256,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return bad("batch sizes must be positive");
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return bad("learning rate must be finite and non-negative");
        }
        if !(self.weight_decay >= 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return bad("weight decay must be >= 0 and momentum in [0, 1)");
        }
        if !(self.grad_clip >= 0.0) {
            return bad("grad_clip must be >= 0");
        }
        Ok(())
    }
}

enum OptState {
    Sgd { velocity: Vec<Tensor> },
    Adam { m: Vec<Tensor>, v: Vec<Tensor>, t: i32 },
}

struct Optimizer {
    kind: OptimizerKind,
    state: OptState,
}

const ADAM_BETA1: f32 = 0.9;
const ADAM_BETA2: f32 = 0.999;
const ADAM_EPS: f32 = 1e-8;

impl Optimizer {
    fn new(kind: OptimizerKind, params: &ParamStore) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.value.shape())).collect::<Vec<_>>();
        let state = match kind {
            OptimizerKind::SgdMomentum => OptState::Sgd { velocity: zeros() },
            OptimizerKind::Adam => OptState::Adam {
                m: zeros(),
                v: zeros(),
                t: 0,
            },
        };
        Self { kind, state }
    }

    fn step(&mut self, params: &mut ParamStore, lr: f32, cfg: &TrainConfig) {
        if let OptState::Adam { t, .. } = &mut self.state {
            *t += 1;
        }
        for (i, p) in params.iter_mut().enumerate() {
            if !p.role.trainable() {
                continue;
            }
            let decay = if p.role == ParamRole::Amplitude { 0.0 } else { cfg.weight_decay };
            let Parameter { value, grad, .. } = p;
            match &mut self.state {
                OptState::Sgd { velocity } => {
                    let vel = velocity[i].data_mut();
                    for ((w, &g), v) in value.data_mut().iter_mut().zip(grad.data()).zip(vel) {
                        let g = g + decay * *w;
                        *v = cfg.momentum * *v + g;
                        *w -= lr * *v;
                    }
                }
                OptState::Adam { m, v, t } => {
                    let bc1 = 1.0 - ADAM_BETA1.powi(*t);
                    let bc2 = 1.0 - ADAM_BETA2.powi(*t);
                    let (mm, vv) = (m[i].data_mut(), v[i].data_mut());
                    for (((w, &g), m1), v1) in value.data_mut().iter_mut().zip(grad.data()).zip(mm).zip(vv) {
                        let g = g + decay * *w;
                        *m1 = ADAM_BETA1 * *m1 + (1.0 - ADAM_BETA1) * g;
                        *v1 = ADAM_BETA2 * *v1 + (1.0 - ADAM_BETA2) * g * g;
                        *w -= lr * (*m1 / bc1) / ((*v1 / bc2).sqrt() + ADAM_EPS);
                    }
                }
            }
        }
        debug_assert!(matches!(
            (&self.kind, &self.state),
            (OptimizerKind::Adam, OptState::Adam { .. }) | (OptimizerKind::SgdMomentum, OptState::Sgd { .. })
        ));
    }
}

/// Scales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(params: &mut ParamStore, max_norm: f32) -> f32 {
    let sq: f64 = params
        .iter()
        .filter(|p| p.role.trainable())
        .flat_map(|p| p.grad.data().iter())
        .map(|&g| (g as f64) * (g as f64))
        .sum();
    let norm = sq.sqrt() as f32;
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for p in params.iter_mut() {
            p.grad.data_mut().iter_mut().for_each(|g| *g *= s);
        }
    }
    norm
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub loss: f32,
    pub correct: usize,
    pub grad_norm: f32,
}

/// Owns a network and its optimizer state.
pub struct Trainer {
    network: Network,
    cfg: TrainConfig,
    optimizer: Optimizer,
    rng: ChaCha8Rng,
    steps: usize,
    planned_steps: usize,
}

pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn count_correct(logits: &Tensor, labels: &[usize]) -> usize {
    let k = logits.shape()[1];
    labels
        .iter()
        .enumerate()
        .filter(|(i, &l)| argmax(&logits.data()[i * k..(i + 1) * k]) == l)
        .count()
}

impl Trainer {
    pub fn new(spec: NetworkSpec, cfg: TrainConfig) -> Result<Self> {
        let network = Network::init(spec, cfg.seed)?;
        Self::from_network(network, cfg)
    }

    pub fn from_network(network: Network, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let optimizer = Optimizer::new(cfg.optimizer, network.params());
        // data order stream is independent of the init stream
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED_0F_DA7A);
        Ok(Self {
            network,
            cfg,
            optimizer,
            rng,
            steps: 0,
            planned_steps: 0,
        })
    }

    pub fn network(&self) -> &Network {
        &self.network
    }

    pub fn into_network(self) -> Network {
        self.network
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Total steps the learning-rate schedule spans.
    pub fn plan(&mut self, total_steps: usize) {
        self.planned_steps = total_steps;
    }

    fn current_lr(&self) -> f32 {
        match self.cfg.lr_schedule {
            LrSchedule::Constant => self.cfg.learning_rate,
            LrSchedule::Cosine => {
                let total = self.planned_steps.max(1) as f32;
                let progress = (self.steps as f32 / total).min(1.0);
                self.cfg.learning_rate * 0.5 * (1.0 + (std::f32::consts::PI * progress).cos())
            }
        }
    }

    /// One forward/backward/update on a batch.
    pub fn train_step(&mut self, images: &Tensor, labels: &[usize], epoch: usize) -> Result<StepStats> {
        self.network.params_mut().zero_grad();
        let mut tape = Tape::new();
        let out = self.network.forward_tape(&mut tape, images, ForwardOptions::train())?;
        let loss = tape.softmax_cross_entropy(out.logits, labels)?;
        let loss_value = tape.value(loss).item()?;
        if !loss_value.is_finite() {
            let location = out
                .layer_outputs
                .iter()
                .position(|&v| !tape.value(v).all_finite())
                .map(|i| format!("layer {i} ({})", self.network.spec().layers[i].name()))
                .unwrap_or_else(|| "the loss".to_string());
            return Err(Error::Divergence { epoch, location });
        }
        let correct = count_correct(tape.value(out.logits), labels);
        tape.backward(loss, self.network.params_mut())?;
        let grad_norm = clip_grad_norm(self.network.params_mut(), self.cfg.grad_clip);
        let lr = self.current_lr();
        self.optimizer.step(self.network.params_mut(), lr, &self.cfg);
        self.network.apply_norm_stats(&out.norm_stats);
        if let Some(p) = self.network.params().iter().find(|p| !p.value.all_finite()) {
            return Err(Error::Divergence {
                epoch,
                location: format!("parameter {}", p.name),
            });
        }
        self.steps += 1;
        Ok(StepStats {
            loss: loss_value,
            correct,
            grad_norm,
        })
    }

    /// One shuffled pass over `split`. Returns (mean loss, accuracy).
    pub fn run_epoch(&mut self, split: &Split, epoch: usize) -> Result<(f32, f32)> {
        let mut order: Vec<usize> = (0..split.len()).collect();
        order.shuffle(&mut self.rng);
        let (mut loss_sum, mut correct, mut seen) = (0.0f64, 0usize, 0usize);
        for rows in order.chunks(self.cfg.batch_size) {
            if self.cfg.max_steps.is_some_and(|m| self.steps >= m) {
                break;
            }
            let (x, y) = split.batch(rows)?;
            let s = self.train_step(&x, &y, epoch)?;
            loss_sum += s.loss as f64 * rows.len() as f64;
            correct += s.correct;
            seen += rows.len();
        }
        let seen = seen.max(1) as f64;
        Ok(((loss_sum / seen) as f32, (correct as f64 / seen) as f32))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSparsity {
    pub layer: usize,
    pub sparsity: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Metrics {
    pub accuracy: f64,
    pub loss: f64,
    pub layer_sparsity: Vec<LayerSparsity>,
    pub overall_sparsity: f64,
    /// Spike and input counts summed over the evaluated data.
    pub record: ForwardRecord,
}

/// Deterministic evaluation in fixed-size batches.
pub fn evaluate(network: &Network, split: &Split, batch_size: usize) -> Result<Metrics> {
    if split.sample_shape() != network.spec().input_shape.as_slice() {
        return Err(Error::Config(format!(
            "data samples {:?} do not match network input {:?}",
            split.sample_shape(),
            network.spec().input_shape
        )));
    }
    let mut record = ForwardRecord::default();
    let (mut loss_sum, mut correct) = (0.0f64, 0usize);
    let rows: Vec<usize> = (0..split.len()).collect();
    for chunk in rows.chunks(batch_size.max(1)) {
        let (x, y) = split.batch(chunk)?;
        let mut tape = Tape::new();
        let out = network.forward_tape(&mut tape, &x, ForwardOptions::eval())?;
        let loss = tape.softmax_cross_entropy(out.logits, &y)?;
        loss_sum += tape.value(loss).item()? as f64 * chunk.len() as f64;
        correct += count_correct(tape.value(out.logits), &y);
        record.merge_counts(&out.record);
    }
    let n = split.len().max(1) as f64;
    Ok(Metrics {
        accuracy: correct as f64 / n,
        loss: loss_sum / n,
        layer_sparsity: record
            .layer_sparsity()
            .into_iter()
            .map(|(layer, sparsity)| LayerSparsity { layer, sparsity })
            .collect(),
        overall_sparsity: record.overall_sparsity(),
        record,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
    pub sparsity: f64,
}

/// Trains from a fresh initialization and returns the checkpoint with the
/// best validation (test-split) accuracy.
pub fn train(spec: NetworkSpec, data: &Dataset, cfg: &TrainConfig) -> Result<Checkpoint> {
    let mut trainer = Trainer::new(spec, cfg.clone())?;
    train_with(&mut trainer, data, cfg)
}

pub fn train_with(trainer: &mut Trainer, data: &Dataset, cfg: &TrainConfig) -> Result<Checkpoint> {
    let spec = trainer.network().spec().clone();
    if data.train.sample_shape() != spec.input_shape.as_slice() {
        return Err(Error::Config(format!(
            "dataset samples {:?} do not match network input {:?}",
            data.train.sample_shape(),
            spec.input_shape
        )));
    }
    let per_epoch = data.train.len().div_ceil(cfg.batch_size);
    let planned = cfg.max_steps.unwrap_or(usize::MAX).min(per_epoch * cfg.epochs);
    trainer.plan(planned);
    let mut history = Vec::new();
    let mut best: Option<(f64, Checkpoint)> = None;
    for epoch in 1..=cfg.epochs {
        let (train_loss, train_acc) = trainer.run_epoch(&data.train, epoch)?;
        let m = evaluate(trainer.network(), &data.test, cfg.eval_batch_size)?;
        log::info!(
            "epoch {epoch}: train loss {train_loss:.4} acc {:.2}% | val loss {:.4} acc {:.2}% | sparsity {:.4}",
            train_acc * 100.0,
            m.loss,
            m.accuracy * 100.0,
            m.overall_sparsity
        );
        history.push(EpochMetrics {
            epoch,
            train_loss: train_loss as f64,
            train_accuracy: train_acc as f64,
            val_loss: m.loss,
            val_accuracy: m.accuracy,
            sparsity: m.overall_sparsity,
        });
        if best.as_ref().is_none_or(|(acc, _)| m.accuracy > *acc) {
            best = Some((m.accuracy, Checkpoint::from_network(trainer.network(), epoch)));
        }
        if cfg.max_steps.is_some_and(|s| trainer.steps() >= s) {
            break;
        }
    }
    let mut ckpt = match best {
        Some((_, c)) => c,
        None => Checkpoint::from_network(trainer.network(), 0),
    };
    ckpt.history = history;
    Ok(ckpt)
}

/// Parameters, spec and training history of one network.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub spec: NetworkSpec,
    pub params: ParamStore,
    pub epoch: usize,
    pub history: Vec<EpochMetrics>,
}

pub const CHECKPOINT_FORMAT: &str = "tspk-checkpoint";
pub const MANIFEST_FILE: &str = "manifest.toml";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestEntry {
    name: String,
    role: ParamRole,
    file: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    version: u32,
    epoch: usize,
    spec: NetworkSpec,
    params: Vec<ManifestEntry>,
    #[serde(default)]
    history: Vec<EpochMetrics>,
}

impl Checkpoint {
    pub fn from_network(network: &Network, epoch: usize) -> Self {
        let (spec, mut params) = network.clone().into_parts();
        params.zero_grad();
        Self {
            spec,
            params,
            epoch,
            history: Vec::new(),
        }
    }

    pub fn network(&self) -> Result<Network> {
        Network::from_parts(self.spec.clone(), self.params.clone())
    }

    /// Writes `dir/manifest.toml` plus one `.tspk` tensor per parameter.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let mut entries = Vec::new();
        for p in self.params.iter() {
            let file = format!("{}.tspk", p.name);
            p.value.save(dir.join(&file))?;
            entries.push(ManifestEntry {
                name: p.name.clone(),
                role: p.role,
                file,
            });
        }
        let manifest = Manifest {
            format: CHECKPOINT_FORMAT.to_string(),
            version: 1,
            epoch: self.epoch,
            spec: self.spec.clone(),
            params: entries,
            history: self.history.clone(),
        };
        fs::write(dir.join(MANIFEST_FILE), toml::to_string(&manifest)?)?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path)
            .map_err(|e| Error::Config(format!("cannot read checkpoint manifest {}: {e}", path.display())))?;
        let manifest: Manifest = toml::from_str(&text)?;
        if manifest.format != CHECKPOINT_FORMAT || manifest.version != 1 {
            return Err(Error::Config(format!(
                "unsupported checkpoint {} v{}",
                manifest.format, manifest.version
            )));
        }
        let mut params = ParamStore::new();
        for e in manifest.params {
            let value = Tensor::load(dir.join(&e.file))?;
            params.insert(Parameter::new(e.name, e.role, value))?;
        }
        let ckpt = Self {
            spec: manifest.spec,
            params,
            epoch: manifest.epoch,
            history: manifest.history,
        };
        ckpt.network()?;
        Ok(ckpt)
    }
}
