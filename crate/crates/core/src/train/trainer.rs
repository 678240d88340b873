use std::io::Write;
use std::path::Path;

use patchfm_tensor::{Graph, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{forward_graph, ModelConfig, ModelInput, ModelWeights};
use crate::preprocess::WindowedSample;
use crate::train::checkpoint::{save_checkpoint, Checkpoint, Dtype};
use crate::train::loss::pinball_loss_graph;
use crate::train::optim::{clip_grad_norm, lr_at, optimizer_step, OptimizerState, TrainConfig};

/// RNG stream reserved for weight initialization; step `s` uses stream `s`.
const INIT_STREAM: u64 = u64::MAX;

/// Window geometry and masking settings a sample source must honour.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WindowSpec {
    pub context_length: usize,
    pub patch_size: usize,
    pub n_cpm: usize,
    pub mask_ratio: f64,
}

impl WindowSpec {
    pub fn new(model: &ModelConfig, train: &TrainConfig) -> Self {
        Self {
            context_length: model.context_length,
            patch_size: model.patch_size,
            n_cpm: train.n_cpm,
            mask_ratio: train.mask_ratio,
        }
    }
}

/// Anything that can draw masked, normalized training windows.
///
/// Implementations must be deterministic in `rng`: the trainer hands each
/// step a fresh generator derived from the seed and step index, which is
/// what makes resumed runs replay exactly.
pub trait SampleSource {
    fn draw(&self, rng: &mut ChaCha8Rng, spec: &WindowSpec) -> Result<WindowedSample>;
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    /// Completed steps after this update.
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
}

pub fn step_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Owns the weights and optimizer state of one training run.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub weights: ModelWeights,
    pub optimizer: OptimizerState,
    /// Completed optimizer steps.
    pub step: usize,
    decay: Vec<bool>,
}

impl Trainer {
    pub fn new(model: ModelConfig, train: TrainConfig) -> Result<Self> {
        model.validate()?;
        train.validate()?;
        let weights = ModelWeights::init(&model, &mut step_rng(train.seed, INIT_STREAM))?;
        let optimizer = {
            let shapes: Vec<&[usize]> = weights.tensors().iter().map(|(_, t)| t.shape()).collect();
            OptimizerState::new(&shapes)
        };
        Ok(Self::assemble(model, train, weights, optimizer, 0))
    }

    /// Resumes from a checkpoint; a checkpoint without optimizer moments
    /// starts them from zero.
    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        ck.model.validate()?;
        ck.train.validate()?;
        let optimizer = match ck.optimizer {
            Some(o) => o,
            None => {
                let shapes: Vec<&[usize]> = ck.weights.tensors().iter().map(|(_, t)| t.shape()).collect();
                OptimizerState::new(&shapes)
            }
        };
        Ok(Self::assemble(ck.model, ck.train, ck.weights, optimizer, ck.step))
    }

    fn assemble(
        model: ModelConfig,
        train: TrainConfig,
        weights: ModelWeights,
        optimizer: OptimizerState,
        step: usize,
    ) -> Self {
        // Decay matrices only; biases, norms and positional tables are exempt.
        let decay = weights.names().iter().map(|n| n.ends_with(".weight")).collect();
        Self {
            model,
            train,
            weights,
            optimizer,
            step,
            decay,
        }
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            train: self.train.clone(),
            step: self.step,
            weights: self.weights.clone(),
            optimizer: Some(self.optimizer.clone()),
        }
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.train.total_steps
    }

    /// Draws the batch for the next step.
    pub fn next_batch(&self, source: &dyn SampleSource) -> Result<Vec<WindowedSample>> {
        let spec = WindowSpec::new(&self.model, &self.train);
        let mut rng = step_rng(self.train.seed, self.step as u64);
        (0..self.train.batch_size).map(|_| source.draw(&mut rng, &spec)).collect()
    }

    /// Loss and per-parameter gradients on a batch, without updating.
    pub fn loss_and_grads(&self, batch: &[WindowedSample]) -> Result<(f64, Vec<Tensor>)> {
        let refs: Vec<&WindowedSample> = batch.iter().collect();
        let input = ModelInput::from_samples(&refs, &self.model)?;
        let mut g = Graph::new();
        let w = self.weights.bind(&mut g, true);
        let out = forward_graph(&mut g, &w, &self.model, &input)?;
        let loss = pinball_loss_graph(&mut g, out.q_norm, &refs, &self.model.levels)?;
        let value = g.value(loss).item();
        if !value.is_finite() {
            return Err(Error::Numeric(format!("loss is {value} at step {}", self.step + 1)));
        }
        g.backward(loss)?;
        let mut grads = Vec::with_capacity(self.decay.len());
        w.map(|_, v| grads.push(*v));
        let grads = grads
            .into_iter()
            .zip(self.weights.tensors())
            .map(|(v, (_, t))| g.take_grad(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect();
        Ok((value, grads))
    }

    /// One full update: sample, forward, loss, backward, clip, step.
    ///
    /// On a numeric failure the weights and optimizer state are left as they
    /// were before the call.
    pub fn step(&mut self, source: &dyn SampleSource) -> Result<StepMetrics> {
        let batch = self.next_batch(source)?;
        let (loss, mut grads) = self.loss_and_grads(&batch)?;
        let grad_norm = clip_grad_norm(&mut grads, self.train.grad_clip)?;
        let lr = lr_at(self.step + 1, &self.train);
        let mut params: Vec<&mut Tensor> = Vec::with_capacity(grads.len());
        self.weights.visit_mut(|_, t| params.push(t));
        optimizer_step(&mut params, &grads, &self.decay, &mut self.optimizer, lr, &self.train)?;
        self.step += 1;
        Ok(StepMetrics {
            step: self.step,
            loss,
            lr,
            grad_norm,
        })
    }
}

/// Runs until `total_steps`, writing one JSON metrics line per step to `log`
/// and, when `out_dir` is given, checkpoints `step_<n>.ptfm` at the configured
/// cadence plus `final.ptfm`.
///
/// A numeric failure stops the run before the offending update; the newest
/// checkpoint on disk is the last good state.
pub fn train_loop(
    trainer: &mut Trainer,
    source: &dyn SampleSource,
    out_dir: Option<&Path>,
    log: &mut dyn Write,
) -> Result<Vec<StepMetrics>> {
    let every = trainer.train.checkpoint_interval();
    let mut history = Vec::new();
    while !trainer.is_done() {
        let m = trainer.step(source)?;
        serde_json::to_writer(&mut *log, &m).map_err(|e| Error::Io(e.into()))?;
        writeln!(log)?;
        if let Some(dir) = out_dir {
            if m.step % every == 0 && m.step < trainer.train.total_steps {
                save_checkpoint(dir.join(format!("step_{:06}.ptfm", m.step)), &trainer.checkpoint(), Dtype::F64)?;
            }
        }
        history.push(m);
    }
    if let Some(dir) = out_dir {
        save_checkpoint(dir.join("final.ptfm"), &trainer.checkpoint(), Dtype::F64)?;
    }
    Ok(history)
}
