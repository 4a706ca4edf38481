//! Minibatch Adam on the path-wise likelihood, with step-decay learning rates,
//! decoupled weight decay, per-epoch metrics and resumable checkpoints.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::hj_loss::{nll_loss, nll_loss_and_gradient, LossReport, StepRef};
use crate::model::{Dataset, ModelSpec};
use crate::policy::GaussianMixturePolicy;
use crate::rng::{substream, Purpose};
use crate::value_net::{Architecture, ValueNetwork, Whitening};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Multiply the rate by `factor` every `every` epochs, never going below `floor`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StepDecay {
    pub factor: f64,
    pub every: usize,
    pub floor: f64,
}

impl Default for StepDecay {
    fn default() -> Self {
        StepDecay {
            factor: 0.5,
            every: 5,
            floor: 1e-5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub initial_learning_rate: f64,
    pub schedule: StepDecay,
    pub weight_decay: f64,
    pub nu_squared: f64,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Write a checkpoint every this many epochs; 0 disables intermediate checkpoints.
    pub checkpoint_every: usize,
    /// Global-norm gradient clip.
    pub gradient_clip: Option<f64>,
    pub hidden: Vec<usize>,
    /// Fit an affine input whitening on the dataset before training.
    pub whiten_inputs: bool,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            batch_size: 256,
            epochs: 30,
            initial_learning_rate: 1e-3,
            schedule: StepDecay::default(),
            weight_decay: 0.001,
            nu_squared: 100.0,
            adam: AdamConfig::default(),
            seed: 0,
            checkpoint_every: 0,
            gradient_clip: None,
            hidden: vec![64, 64, 64],
            whiten_inputs: false,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size", "must be >= 1"));
        }
        let positive = [
            ("initial_learning_rate", self.initial_learning_rate),
            ("schedule.factor", self.schedule.factor),
            ("schedule.floor", self.schedule.floor),
            ("adam.epsilon", self.adam.epsilon),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(name, "must be positive and finite"));
            }
        }
        if self.schedule.every == 0 {
            return Err(Error::invalid("schedule.every", "must be >= 1"));
        }
        for (name, v) in [("adam.beta1", self.adam.beta1), ("adam.beta2", self.adam.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::invalid(name, "must lie in [0, 1)"));
            }
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::invalid("weight_decay", "must be >= 0"));
        }
        if !(self.nu_squared >= 0.0 && self.nu_squared.is_finite()) {
            return Err(Error::invalid("nu_squared", "must be >= 0"));
        }
        if let Some(c) = self.gradient_clip {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::invalid("gradient_clip", "must be positive"));
            }
        }
        Architecture {
            state_dim: 1,
            hidden: self.hidden.clone(),
        }
        .validate()
    }

    /// Learning rate used throughout epoch `epoch` (0-based).
    pub fn learning_rate(&self, epoch: usize) -> f64 {
        let drops = (epoch / self.schedule.every) as i32;
        (self.initial_learning_rate * self.schedule.factor.powi(drops)).max(self.schedule.floor)
    }

    /// Freshly initialized network for `dataset`, whitened if configured.
    pub fn initial_network(&self, dataset: &Dataset) -> Result<ValueNetwork> {
        let mut net = ValueNetwork::initialize(
            Architecture {
                state_dim: dataset.state_dim,
                hidden: self.hidden.clone(),
            },
            self.seed,
        )?;
        if self.whiten_inputs {
            net.whitening = Some(Whitening::fit(dataset));
        }
        Ok(net)
    }
}

/// First and second moment estimates with the step counter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamState {
    pub step: u64,
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
}

impl AdamState {
    pub fn new(n_params: usize) -> Self {
        AdamState {
            step: 0,
            first_moment: vec![0.0; n_params],
            second_moment: vec![0.0; n_params],
        }
    }

    /// One bias-corrected Adam update. Entries selected by `decay_mask` also
    /// shrink by `lr * weight_decay * p`, independently of the gradient.
    pub fn update(
        &mut self,
        adam: &AdamConfig,
        params: &mut [f64],
        grad: &[f64],
        lr: f64,
        weight_decay: f64,
        decay_mask: &[bool],
    ) -> Result<()> {
        check_dim("adam params", self.first_moment.len(), params.len())?;
        check_dim("adam gradient", params.len(), grad.len())?;
        check_dim("adam decay mask", params.len(), decay_mask.len())?;
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - adam.beta1.powi(t);
        let c2 = 1.0 - adam.beta2.powi(t);
        for i in 0..params.len() {
            let g = grad[i];
            let m = &mut self.first_moment[i];
            let v = &mut self.second_moment[i];
            *m = adam.beta1 * *m + (1.0 - adam.beta1) * g;
            *v = adam.beta2 * *v + (1.0 - adam.beta2) * g * g;
            let step = (*m / c1) / ((*v / c2).sqrt() + adam.epsilon);
            let decay = if decay_mask[i] { weight_decay * params[i] } else { 0.0 };
            params[i] -= lr * (step + decay);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub mean_loss: f64,
    pub hj_term: f64,
    pub delta_s_term: f64,
    pub clamp_events: usize,
    pub learning_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsLog {
    pub epochs: Vec<EpochMetrics>,
}

impl MetricsLog {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
        w.write_record(["epoch", "mean_loss", "hj_term", "delta_s_term", "clamp_events", "learning_rate"])
            .map_err(csv_err)?;
        for e in &self.epochs {
            w.serialize(e).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let epochs = r.deserialize().collect::<std::result::Result<_, _>>().map_err(csv_err)?;
        Ok(MetricsLog { epochs })
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(e.to_string())
}

/// Everything needed to continue a run: the network (flattened, so the file
/// also loads as a plain network) plus optimizer state and progress.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    #[serde(flatten)]
    pub network: ValueNetwork,
    pub training: TrainingProgress,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingProgress {
    pub checkpoint_format_version: u32,
    pub epochs_completed: usize,
    pub optimizer: AdamState,
    pub metrics: MetricsLog,
}

impl Checkpoint {
    pub fn fresh(network: ValueNetwork) -> Self {
        let n = network.n_params();
        Checkpoint {
            network,
            training: TrainingProgress {
                checkpoint_format_version: CHECKPOINT_FORMAT_VERSION,
                epochs_completed: 0,
                optimizer: AdamState::new(n),
                metrics: MetricsLog::default(),
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        let t = &self.training;
        if t.checkpoint_format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint_format_version {}",
                t.checkpoint_format_version
            )));
        }
        let n = self.network.n_params();
        check_dim("checkpoint first moment", n, t.optimizer.first_moment.len())?;
        check_dim("checkpoint second moment", n, t.optimizer.second_moment.len())?;
        check_dim("checkpoint metrics", t.epochs_completed, t.metrics.epochs.len())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: Checkpoint = serde_json::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Checkpoint::from_json(&std::fs::read_to_string(path)?)
    }
}

/// State just before the batch whose loss or gradient was non-finite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayBundle {
    pub epoch: usize,
    pub batch_index: usize,
    pub learning_rate: f64,
    pub batch: Vec<StepRef>,
    pub report: LossReport,
    pub checkpoint: Checkpoint,
}

impl ReplayBundle {
    /// Recomputes the offending batch loss from the saved network.
    pub fn replay(
        &self,
        dataset: &Dataset,
        spec: &ModelSpec,
        policy0: &GaussianMixturePolicy,
        nu_squared: f64,
    ) -> Result<LossReport> {
        nll_loss(&self.checkpoint.network, spec, policy0, dataset, &self.batch, nu_squared)
    }
}

/// Optional side channels for `train_from`.
#[derive(Default)]
pub struct TrainHooks<'a> {
    pub on_checkpoint: Option<Box<dyn FnMut(&Checkpoint) -> Result<()> + 'a>>,
    pub on_non_finite: Option<Box<dyn FnMut(&ReplayBundle) -> Result<()> + 'a>>,
    pub on_epoch: Option<Box<dyn FnMut(&EpochMetrics) + 'a>>,
}

/// The epoch permutation of all dataset steps, a function of `(seed, epoch)` only.
pub fn epoch_order(dataset: &Dataset, seed: u64, epoch: usize) -> Vec<StepRef> {
    let mut steps = StepRef::all(dataset);
    steps.shuffle(&mut substream(seed, Purpose::Shuffle, epoch as u64));
    steps
}

fn check_grid(dataset: &Dataset, spec: &ModelSpec) -> Result<()> {
    spec.validate()?;
    dataset.validate()?;
    check_dim("dataset state_dim", spec.state_dim, dataset.state_dim)?;
    check_dim("dataset action_dim", spec.action_dim, dataset.action_dim)?;
    check_dim("dataset n_steps", spec.n_steps, dataset.n_steps)?;
    if (dataset.horizon - spec.horizon).abs() > 1e-12 * spec.horizon.abs().max(1.0) {
        return Err(Error::invalid("dataset.horizon", "differs from the model horizon"));
    }
    Ok(())
}

fn global_clip(grad: &mut [f64], max_norm: f64) {
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grad.iter_mut().for_each(|g| *g *= s);
    }
}

/// Trains from a fresh optimizer state.
pub fn train(
    net: ValueNetwork,
    dataset: &Dataset,
    spec: &ModelSpec,
    policy0: &GaussianMixturePolicy,
    config: &TrainingConfig,
) -> Result<(ValueNetwork, MetricsLog)> {
    let done = train_from(Checkpoint::fresh(net), dataset, spec, policy0, config, TrainHooks::default())?;
    Ok((done.network, done.training.metrics))
}

/// Runs the remaining epochs of `config.epochs` starting from `start`.
pub fn train_from(
    start: Checkpoint,
    dataset: &Dataset,
    spec: &ModelSpec,
    policy0: &GaussianMixturePolicy,
    config: &TrainingConfig,
    mut hooks: TrainHooks,
) -> Result<Checkpoint> {
    config.validate()?;
    check_grid(dataset, spec)?;
    policy0.validate(spec)?;
    start.validate()?;
    check_dim("network state_dim", spec.state_dim, start.network.state_dim())?;
    let mut state = start;
    let mask = state.network.weight_mask();
    let mut params = state.network.params();
    for epoch in state.training.epochs_completed..config.epochs {
        let lr = config.learning_rate(epoch);
        let order = epoch_order(dataset, config.seed, epoch);
        let mut total = LossReport::default();
        let mut sums = [0.0; 3];
        for (batch_index, batch) in order.chunks(config.batch_size).enumerate() {
            let (report, mut grad) =
                nll_loss_and_gradient(&state.network, spec, policy0, dataset, batch, config.nu_squared)?;
            if !report.loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                if let Some(f) = hooks.on_non_finite.as_mut() {
                    f(&ReplayBundle {
                        epoch,
                        batch_index,
                        learning_rate: lr,
                        batch: batch.to_vec(),
                        report,
                        checkpoint: state.clone(),
                    })?;
                }
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: batch_index,
                });
            }
            if let Some(c) = config.gradient_clip {
                global_clip(&mut grad, c);
            }
            state
                .training
                .optimizer
                .update(&config.adam, &mut params, &grad, lr, config.weight_decay, &mask)?;
            state.network.set_params(&params)?;
            let w = report.n_steps as f64;
            sums[0] += report.loss * w;
            sums[1] += report.hj_term * w;
            sums[2] += report.delta_s_term * w;
            total.clamp_events += report.clamp_events;
            total.n_steps += report.n_steps;
        }
        let n = total.n_steps.max(1) as f64;
        let metrics = EpochMetrics {
            epoch: epoch + 1,
            mean_loss: sums[0] / n,
            hj_term: sums[1] / n,
            delta_s_term: sums[2] / n,
            clamp_events: total.clamp_events,
            learning_rate: lr,
        };
        if let Some(f) = hooks.on_epoch.as_mut() {
            f(&metrics);
        }
        state.training.metrics.epochs.push(metrics);
        state.training.epochs_completed = epoch + 1;
        if config.checkpoint_every > 0 && (epoch + 1) % config.checkpoint_every == 0 {
            if let Some(f) = hooks.on_checkpoint.as_mut() {
                f(&state)?;
            }
        }
    }
    Ok(state)
}

/// Full-dataset loss as a single batch.
pub fn evaluate_loss(
    net: &ValueNetwork,
    dataset: &Dataset,
    spec: &ModelSpec,
    policy0: &GaussianMixturePolicy,
    nu_squared: f64,
) -> Result<LossReport> {
    check_grid(dataset, spec)?;
    nll_loss(net, spec, policy0, dataset, &StepRef::all(dataset), nu_squared)
}
