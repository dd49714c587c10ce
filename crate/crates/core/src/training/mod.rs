//! Per-sample Adam training of the autoencoder.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::graph::build_forward;
use crate::model::{Checkpoint, KaeConfig, ModelParams};
use crate::rng::{stream_rng, Stream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
    /// Epochs between checkpoints; 0 disables periodic checkpoints.
    pub checkpoint_interval: usize,
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
            checkpoint_interval: 0,
            shuffle: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs < 1 {
            return bad("epochs must be >= 1".into());
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return bad(format!(
                "learning rate must be > 0, got {}",
                self.learning_rate
            ));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return bad(format!("{name} must lie in (0, 1), got {b}"));
            }
        }
        if !(self.epsilon > 0.0) {
            return bad(format!("adam epsilon must be > 0, got {}", self.epsilon));
        }
        Ok(())
    }
}

/// Adam moment estimates, one pair of buffers per parameter tensor in
/// canonical order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub step: u64,
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(params: &ModelParams) -> Self {
        Self::for_tensors(params.named().into_iter().map(|(_, t)| t))
    }

    pub fn for_tensors<'a>(tensors: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let zeros: Vec<Vec<f64>> = tensors.into_iter().map(|t| vec![0.0; t.len()]).collect();
        Self {
            step: 0,
            first_moment: zeros.clone(),
            second_moment: zeros,
        }
    }

    fn matches_lengths(&self, lengths: impl ExactSizeIterator<Item = usize>) -> bool {
        lengths.len() == self.first_moment.len()
            && lengths.len() == self.second_moment.len()
            && lengths
                .zip(self.first_moment.iter().zip(&self.second_moment))
                .all(|(n, (m, v))| m.len() == n && v.len() == n)
    }

    fn matches(&self, params: &ModelParams) -> bool {
        let lengths: Vec<usize> = params.named().iter().map(|(_, t)| t.len()).collect();
        self.matches_lengths(lengths.into_iter())
    }
}

/// One bias-corrected Adam update of `tensors` in place.
pub fn adam_update(
    tensors: Vec<&mut Tensor>,
    grads: &[Tensor],
    state: &mut OptimizerState,
    config: &TrainConfig,
) -> Result<()> {
    if grads.len() != tensors.len() {
        return Err(Error::Data(format!(
            "expected {} gradients, got {}",
            tensors.len(),
            grads.len()
        )));
    }
    if let Some((t, g)) = tensors
        .iter()
        .zip(grads)
        .find(|(t, g)| t.shape() != g.shape())
    {
        return Err(Error::shape("adam_step", t.shape(), g.shape()));
    }
    if !state.matches_lengths(
        tensors
            .iter()
            .map(|t| t.len())
            .collect::<Vec<_>>()
            .into_iter(),
    ) {
        return Err(Error::Data(
            "optimizer state does not mirror the parameters".into(),
        ));
    }
    state.step += 1;
    let t = i32::try_from(state.step).unwrap_or(i32::MAX);
    let c1 = 1.0 - config.beta1.powi(t);
    let c2 = 1.0 - config.beta2.powi(t);
    for (((param, grad), m), v) in tensors
        .into_iter()
        .zip(grads)
        .zip(&mut state.first_moment)
        .zip(&mut state.second_moment)
    {
        for (((p, &g), m), v) in param.data_mut().iter_mut().zip(grad.data()).zip(m).zip(v) {
            *m = config.beta1 * *m + (1.0 - config.beta1) * g;
            *v = config.beta2 * *v + (1.0 - config.beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= config.learning_rate * m_hat / (v_hat.sqrt() + config.epsilon);
        }
    }
    Ok(())
}

/// [`adam_update`] over all model parameters; `grads` follows the order of
/// [`ModelParams::named`].
pub fn adam_step(
    params: &mut ModelParams,
    grads: &[Tensor],
    state: &mut OptimizerState,
    config: &TrainConfig,
) -> Result<()> {
    adam_update(params.tensors_mut(), grads, state, config)
}

/// Losses of a single optimizer step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLoss {
    pub chamfer: f64,
    pub aux: Option<f64>,
    pub total: f64,
}

/// Mean losses over one epoch. `epoch` is 1-based.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub mean_chamfer: f64,
    pub mean_aux: f64,
    pub mean_total: f64,
}

/// Everything besides the weights needed to continue a run bit-exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingState {
    pub config: TrainConfig,
    pub epochs_completed: usize,
    pub optimizer: OptimizerState,
    pub history: Vec<EpochLoss>,
}

impl TrainingState {
    pub(crate) fn validate_against(&self, params: &ModelParams) -> Result<()> {
        self.config.validate()?;
        if !self.optimizer.matches(params) {
            return Err(Error::Data(
                "optimizer state does not match parameter shapes".into(),
            ));
        }
        if self.history.len() != self.epochs_completed {
            return Err(Error::Data(
                "loss history length differs from completed epochs".into(),
            ));
        }
        Ok(())
    }
}

pub fn init_params(config: &KaeConfig, seed: u64) -> Result<ModelParams> {
    ModelParams::init(config, seed)
}

/// Stateful training loop; one forward/backward/Adam step per cloud.
#[derive(Clone, Debug)]
pub struct Trainer {
    params: ModelParams,
    state: TrainingState,
}

impl Trainer {
    pub fn new(kae: &KaeConfig, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let params = init_params(kae, config.seed)?;
        Ok(Self::from_params(params, config))
    }

    /// Starts a fresh run from existing weights.
    pub fn from_params(params: ModelParams, config: TrainConfig) -> Self {
        let optimizer = OptimizerState::new(&params);
        Self {
            params,
            state: TrainingState {
                config,
                epochs_completed: 0,
                optimizer,
                history: Vec::new(),
            },
        }
    }

    /// Continues a run from a checkpoint that carries training state.
    pub fn resume(checkpoint: Checkpoint) -> Result<Self> {
        let state = checkpoint
            .training
            .ok_or_else(|| Error::Data("checkpoint has no training state to resume".into()))?;
        state.validate_against(&checkpoint.params)?;
        Ok(Self {
            params: checkpoint.params,
            state,
        })
    }

    /// Changes the target epoch count, e.g. to extend a resumed run.
    pub fn set_epochs(&mut self, epochs: usize) -> Result<()> {
        if epochs < 1 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        self.state.config.epochs = epochs;
        Ok(())
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn config(&self) -> &TrainConfig {
        &self.state.config
    }

    pub fn history(&self) -> &[EpochLoss] {
        &self.state.history
    }

    pub fn optimizer(&self) -> &OptimizerState {
        &self.state.optimizer
    }

    pub fn epochs_completed(&self) -> usize {
        self.state.epochs_completed
    }

    pub fn is_done(&self) -> bool {
        self.state.epochs_completed >= self.state.config.epochs
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::new(self.params.clone(), Some(self.state.clone()))
    }

    pub fn into_parts(self) -> (ModelParams, Vec<EpochLoss>) {
        (self.params, self.state.history)
    }

    /// Forward, backward, and one Adam update on a single cloud.
    pub fn step(
        &mut self,
        cloud: &crate::data::PointCloud,
        label: Option<usize>,
    ) -> Result<StepLoss> {
        let config = self.params.config();
        let label = if config.aux_enabled() { label } else { None };
        let mut tape = Tape::new();
        let net = self.params.bind(&mut tape);
        let x = tape.constant(cloud.to_tensor());
        let vars = build_forward(&mut tape, &net, config, x, label)?;
        tape.backward(vars.total)?;
        let loss = StepLoss {
            chamfer: tape.value(vars.chamfer).item(),
            aux: vars.aux_loss.map(|v| tape.value(v).item()),
            total: tape.value(vars.total).item(),
        };
        if !loss.total.is_finite() {
            return Err(Error::NonFinite("training loss"));
        }
        let grads: Vec<Tensor> = net
            .named()
            .into_iter()
            .map(|(_, &v)| {
                tape.take_grad(v)
                    .unwrap_or_else(|| Tensor::zeros(tape.value(v).shape()))
            })
            .collect();
        adam_step(
            &mut self.params,
            &grads,
            &mut self.state.optimizer,
            &self.state.config,
        )?;
        Ok(loss)
    }

    fn check_dataset(&self, dataset: &Dataset) -> Result<()> {
        let config = self.params.config();
        if dataset.is_empty() {
            return Err(Error::Data("training dataset is empty".into()));
        }
        if let Some(n) = dataset.n_points().filter(|&n| n != config.n_points) {
            return Err(Error::PointCount {
                context: "training dataset".into(),
                expected: config.n_points,
                found: n,
            });
        }
        if config.aux_enabled() {
            if dataset.n_classes() != config.n_classes {
                return Err(Error::Data(format!(
                    "dataset has {} classes, auxiliary classifier expects {}",
                    dataset.n_classes(),
                    config.n_classes
                )));
            }
            if dataset.labels().is_none() {
                return Err(Error::Data(
                    "auxiliary classifier needs labelled clouds".into(),
                ));
            }
        }
        Ok(())
    }

    /// Visit order for the next epoch, drawn from the shuffle stream keyed
    /// by the epoch index so a resumed run sees the same order.
    fn epoch_order(&self, n: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..n).collect();
        if self.state.config.shuffle {
            let mut rng = stream_rng(
                self.state.config.seed,
                Stream::Shuffle,
                self.state.epochs_completed as u64,
            );
            order.shuffle(&mut rng);
        }
        order
    }

    pub fn run_epoch(&mut self, dataset: &Dataset) -> Result<EpochLoss> {
        self.run_epoch_with(dataset, |_| {})
    }

    /// One pass over `dataset`, reporting every step's losses.
    pub fn run_epoch_with(
        &mut self,
        dataset: &Dataset,
        mut on_step: impl FnMut(&StepLoss),
    ) -> Result<EpochLoss> {
        self.check_dataset(dataset)?;
        let order = self.epoch_order(dataset.len());
        let (mut chamfer, mut aux, mut total) = (0.0, 0.0, 0.0);
        for &i in &order {
            let cloud = &dataset.clouds()[i];
            let loss = self.step(cloud, cloud.label())?;
            on_step(&loss);
            chamfer += loss.chamfer;
            aux += loss.aux.unwrap_or(0.0);
            total += loss.total;
        }
        let n = order.len() as f64;
        self.state.epochs_completed += 1;
        let record = EpochLoss {
            epoch: self.state.epochs_completed,
            mean_chamfer: chamfer / n,
            mean_aux: aux / n,
            mean_total: total / n,
        };
        self.state.history.push(record);
        Ok(record)
    }

    /// Runs the remaining epochs, calling `on_epoch` after each.
    pub fn run(
        &mut self,
        dataset: &Dataset,
        mut on_epoch: impl FnMut(&Trainer, &EpochLoss) -> Result<()>,
    ) -> Result<()> {
        while !self.is_done() {
            let record = self.run_epoch(dataset)?;
            on_epoch(self, &record)?;
        }
        Ok(())
    }

    /// Whether the periodic checkpoint interval falls on the last epoch.
    pub fn checkpoint_due(&self) -> bool {
        let every = self.state.config.checkpoint_interval;
        every > 0
            && self.state.epochs_completed > 0
            && self.state.epochs_completed.is_multiple_of(every)
    }
}

/// Trains from a fresh seeded initialization.
pub fn train(
    dataset: &Dataset,
    kae: &KaeConfig,
    config: &TrainConfig,
) -> Result<(ModelParams, Vec<EpochLoss>)> {
    let mut trainer = Trainer::new(kae, config.clone())?;
    trainer.run(dataset, |_, _| Ok(()))?;
    Ok(trainer.into_parts())
}

/// `epoch,mean_chamfer,mean_aux,mean_total` rows with a header line.
pub fn history_csv(history: &[EpochLoss]) -> String {
    let mut out = String::from("epoch,mean_chamfer,mean_aux,mean_total\n");
    for h in history {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            h.epoch, h.mean_chamfer, h.mean_aux, h.mean_total
        );
    }
    out
}
