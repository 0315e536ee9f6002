use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{total_loss, LossBreakdown, LossWeights, SceneTargets};
use super::optim::Adam;
use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::model::{InvDriver, SceneInput};
use crate::query::ModelConfig;
use crate::scalar::Scalar;
use crate::scene::{SceneGenConfig, VectorScene};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    /// Scenes whose gradients are averaged into one optimizer step.
    pub batch_size: usize,
    /// Seeds parameter initialization and the per-epoch shuffles.
    pub seed: u64,
    pub loss_weights: LossWeights,
    /// Global gradient-norm threshold; 0 disables clipping.
    pub grad_clip: f64,
    /// Write a checkpoint every this many epochs (0: only at the end).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2e-4,
            epochs: 50,
            batch_size: 1,
            seed: 0,
            loss_weights: LossWeights::default(),
            grad_clip: 1.0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.grad_clip.is_finite() && self.grad_clip >= 0.0) {
            return Err(Error::Config(
                "grad_clip must be finite and nonnegative".into(),
            ));
        }
        self.loss_weights.validate()
    }
}

/// Epoch means of the weighted loss terms, 1-based epoch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub total: f64,
    pub terms: LossBreakdown,
}

/// Everything the loss needs from one scene, computed once.
#[derive(Clone, Debug)]
pub struct Example<T> {
    pub seed: u64,
    pub input: SceneInput<T>,
    pub targets: SceneTargets,
}

pub fn prepare_examples<T: Scalar>(
    scenes: &[VectorScene],
    scene_cfg: &SceneGenConfig,
    cfg: &ModelConfig,
) -> Result<Vec<Example<T>>> {
    scenes
        .iter()
        .map(|s| {
            Ok(Example {
                seed: s.seed,
                input: SceneInput::new(s, scene_cfg, cfg)?,
                targets: SceneTargets::new(s, cfg)?,
            })
        })
        .collect()
}

/// Model, optimizer state and progress of one training run.
pub struct Trainer<T> {
    pub model: InvDriver<T>,
    pub optimizer: Adam<T>,
    pub config: TrainConfig,
    pub epochs_done: usize,
    pub history: Vec<EpochRecord>,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(model_cfg: ModelConfig, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = InvDriver::new(model_cfg, config.seed)?;
        Ok(Self {
            optimizer: Adam::new(&model.store),
            model,
            config,
            epochs_done: 0,
            history: Vec::new(),
        })
    }

    /// Scene order of 0-based epoch `epoch`; a pure function of the seed.
    pub fn epoch_order(&self, epoch: usize, n: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(epoch as u64 + 1);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        order
    }

    /// Loss of one scene with gradients accumulated into the store.
    pub fn accumulate(&mut self, example: &Example<T>) -> Result<LossBreakdown> {
        let mut tape = Tape::new();
        let vars = self.model.forward(&mut tape, &[&example.input])?;
        let outputs = [
            vars.perception.points,
            vars.perception.class_logits,
            vars.prediction.trajectories,
            vars.prediction.mode_logits,
            vars.prediction.existence_logits,
            vars.planning.trajectories,
            vars.planning.mode_logits,
        ];
        // matching needs finite outputs, so check them before the loss
        if outputs.iter().any(|&v| !tape.value(v).all_finite()) {
            return Err(Error::NonFinite {
                what: format!(
                    "outputs at epoch {}, scene {}",
                    self.epochs_done + 1,
                    example.seed
                ),
            });
        }
        let (loss, log) = total_loss(
            &mut tape,
            &vars,
            0,
            &example.targets,
            &self.config.loss_weights,
            &self.model.cfg,
        )?;
        if !tape.value(loss).item().is_finite() {
            return Err(Error::NonFinite {
                what: format!(
                    "loss at epoch {}, scene {}",
                    self.epochs_done + 1,
                    example.seed
                ),
            });
        }
        tape.backward(loss, &mut self.model.store)?;
        Ok(log)
    }

    /// One pass over `examples` in the seeded order of the next epoch.
    pub fn run_epoch(&mut self, examples: &[Example<T>]) -> Result<EpochRecord> {
        if examples.is_empty() {
            return Err(Error::Input("training needs at least one scene".into()));
        }
        let order = self.epoch_order(self.epochs_done, examples.len());
        let mut sums = [0.0; 9];
        for batch in order.chunks(self.config.batch_size) {
            self.model.store.zero_grad();
            for &i in batch {
                let log = self.accumulate(&examples[i])?;
                for (s, t) in sums.iter_mut().zip(log.terms()) {
                    *s += t;
                }
            }
            self.model
                .store
                .scale_grads(T::one() / T::lit(batch.len() as f64));
            self.optimizer.step(
                &mut self.model.store,
                self.config.learning_rate,
                self.config.grad_clip,
            )?;
        }
        self.epochs_done += 1;
        let terms = LossBreakdown::from_terms(sums.map(|s| s / examples.len() as f64));
        let record = EpochRecord {
            epoch: self.epochs_done,
            total: terms.total(),
            terms,
        };
        self.history.push(record);
        Ok(record)
    }

    /// Trains until `config.epochs` epochs are done, checkpointing to
    /// `checkpoint` on the configured cadence and at the end.
    pub fn fit(
        &mut self,
        examples: &[Example<T>],
        checkpoint: Option<&Path>,
        mut on_epoch: impl FnMut(&EpochRecord),
    ) -> Result<()> {
        while self.epochs_done < self.config.epochs {
            let record = self.run_epoch(examples)?;
            on_epoch(&record);
            let every = self.config.checkpoint_every;
            let due = self.epochs_done == self.config.epochs
                || (every > 0 && self.epochs_done.is_multiple_of(every));
            if let (Some(path), true) = (checkpoint, due) {
                self.save(path)?;
            }
        }
        Ok(())
    }
}

/// Loss history as CSV, one row per epoch.
pub fn write_history_csv(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut out = String::from("epoch,total");
    for c in LossBreakdown::COLUMNS {
        out.push(',');
        out.push_str(c);
    }
    out.push('\n');
    for r in history {
        out.push_str(&format!("{},{}", r.epoch, r.total));
        for t in r.terms.terms() {
            out.push_str(&format!(",{t}"));
        }
        out.push('\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}
