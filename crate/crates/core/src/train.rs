//! Mini-batch fine-tuning with pluggable objectives.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{encode_batch, LabeledPairExample};
use crate::distill::{focal_weights, rmc_loss};
use crate::error::{Error, Result};
use crate::model::{ForwardOptions, TransformerClassifier};
use crate::tensor::{adamw_step, softmax, OptimizerState, Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Epochs for every compressed model and snapshot.
    pub epochs: usize,
    /// Epochs for the uncompressed teacher.
    pub teacher_epochs: usize,
    pub batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            weight_decay: 0.01,
            epochs: 5,
            teacher_epochs: 10,
            batch_size: 64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.teacher_epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "epochs, teacher_epochs and batch_size must be positive".into(),
            ));
        }
        OptimizerState::new(self.learning_rate, self.weight_decay).map(|_| ())
    }

    pub fn steps_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.batch_size)
    }

    pub fn total_steps(&self, n: usize) -> usize {
        self.epochs * self.steps_per_epoch(n)
    }

    /// The same settings with the teacher's epoch budget.
    pub fn for_teacher(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.teacher_epochs,
            ..self.clone()
        }
    }
}

/// Training loss, evaluated per mini-batch.
#[derive(Clone, Copy, Debug)]
pub enum Objective<'a> {
    CrossEntropy,
    /// Cross-entropy with a fixed weight per training example.
    WeightedCrossEntropy(&'a [f64]),
    /// Cross-entropy weighted by `(1-p)^gamma`, normalized within the batch.
    /// The weights are computed from the current predictions and treated as
    /// constants.
    Focal {
        gamma: f64,
    },
    /// `(1-lambda) * CE + lambda * KL(target || student)` with one target row
    /// per training example.
    Distill {
        targets: &'a Tensor,
        lambda: f64,
    },
}

/// Called before every optimizer step; used by the pruning schedule.
pub trait StepHook {
    fn before_step(&mut self, step: usize, total_steps: usize, model: &mut TransformerClassifier) -> Result<()>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub mean_loss: f64,
    pub sparsity: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochMetrics>,
    pub step_losses: Vec<f64>,
}

fn check_objective(objective: &Objective<'_>, n: usize, k: usize) -> Result<()> {
    match *objective {
        Objective::CrossEntropy => Ok(()),
        Objective::WeightedCrossEntropy(w) => {
            if w.len() != n {
                return Err(Error::Contract(format!("{} weights for {n} examples", w.len())));
            }
            Ok(())
        }
        Objective::Focal { gamma } => {
            if gamma.is_finite() && gamma >= 0.0 {
                Ok(())
            } else {
                Err(Error::Config(format!("focal gamma must be nonnegative, got {gamma}")))
            }
        }
        Objective::Distill { targets, lambda } => {
            if !(0.0..=1.0).contains(&lambda) {
                return Err(Error::Config(format!("lambda must lie in [0, 1], got {lambda}")));
            }
            if targets.shape() != [n, k] {
                return Err(Error::Contract(format!(
                    "targets have shape {:?}, expected [{n}, {k}]",
                    targets.shape()
                )));
            }
            Ok(())
        }
    }
}

fn gather_rows(t: &Tensor, rows: &[usize]) -> Tensor {
    let k = t.shape()[1];
    let mut data = Vec::with_capacity(rows.len() * k);
    for &r in rows {
        data.extend_from_slice(t.row(r));
    }
    Tensor::new(vec![rows.len(), k], data).expect("nonempty gather")
}

/// Fine-tunes `model` in place. Example order is shuffled each epoch by a
/// generator seeded with `seed`, so the result is a pure function of the
/// inputs.
pub fn fine_tune(
    model: &mut TransformerClassifier,
    examples: &[LabeledPairExample],
    cfg: &TrainConfig,
    objective: Objective<'_>,
    seed: u64,
    mut hook: Option<&mut dyn StepHook>,
) -> Result<TrainReport> {
    cfg.validate()?;
    if examples.is_empty() {
        return Err(Error::Contract("cannot train on an empty set".into()));
    }
    let k = model.config().num_classes;
    check_objective(&objective, examples.len(), k)?;

    let mut opt = OptimizerState::new(cfg.learning_rate, cfg.weight_decay)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total = cfg.total_steps(examples.len());
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut report = TrainReport::default();
    let mut step = 0;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            if let Some(h) = hook.as_deref_mut() {
                h.before_step(step, total, model)?;
            }
            let refs: Vec<&LabeledPairExample> = chunk.iter().map(|&i| &examples[i]).collect();
            let labels: Vec<usize> = refs.iter().map(|e| e.label).collect();
            let batch = encode_batch(&refs)?;

            let mut tape = Tape::new();
            let taped = model.forward_on_tape(&mut tape, &batch, ForwardOptions::TRAINING)?;
            let loss = match objective {
                Objective::CrossEntropy => tape.cross_entropy(taped.logits, &labels, None)?,
                Objective::WeightedCrossEntropy(w) => {
                    let bw: Vec<f64> = chunk.iter().map(|&i| w[i]).collect();
                    tape.cross_entropy(taped.logits, &labels, Some(&bw))?
                }
                Objective::Focal { gamma } => {
                    let probs = softmax(tape.value(taped.logits))?;
                    let gold: Vec<f64> = labels.iter().enumerate().map(|(r, &y)| probs.row(r)[y]).collect();
                    // A batch fitted to machine precision has no focal mass
                    // left; it then contributes nothing.
                    let w = if gold.iter().all(|&p| p == 1.0) {
                        vec![0.0; gold.len()]
                    } else {
                        focal_weights(&gold, gamma)?
                    };
                    tape.cross_entropy(taped.logits, &labels, Some(&w))?
                }
                Objective::Distill { targets, lambda } => rmc_loss(
                    &mut tape,
                    &labels,
                    taped.logits,
                    &gather_rows(targets, chunk),
                    lambda,
                    None,
                )?,
            };
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(Error::Numeric(format!("loss became {value} at step {step}")));
            }
            tape.backward(loss)?;
            model.collect_grads(&mut tape, &taped);
            adamw_step(model.params_mut(), &mut opt)?;

            report.step_losses.push(value);
            loss_sum += value * chunk.len() as f64;
            step += 1;
        }
        report.epochs.push(EpochMetrics {
            epoch,
            mean_loss: loss_sum / examples.len() as f64,
            sparsity: model.sparsity(),
        });
    }
    Ok(report)
}
