//! Magnitude pruning during fine-tuning and attention-head pruning.

use serde::{Deserialize, Serialize};

use crate::data::{encode_batch, LabeledPairExample};
use crate::error::{Error, Result};
use crate::model::{ForwardOptions, HeadMaskMode, TransformerClassifier};
use crate::tensor::Tape;
use crate::train::{fine_tune, Objective, StepHook, TrainConfig, TrainReport};

/// Snapshot sparsities used to estimate sample difficulty.
pub const SNAPSHOT_SPARSITIES: [f64; 5] = [0.2, 0.4, 0.6, 0.7, 0.85];

const RAMP_UPDATES: usize = 10;
const PROBE_BATCH: usize = 128;

/// Cubic sparsity ramp: zero for the first third of training, rising as
/// `target * (1 - (1 - t)^3)` over the middle third, then held at target.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneSchedule {
    pub target_sparsity: f64,
    pub warmup_steps: usize,
    pub pruning_steps: usize,
    pub total_steps: usize,
    /// Steps between mask updates inside the ramp.
    pub update_interval: usize,
}

impl PruneSchedule {
    pub fn new(target_sparsity: f64, total_steps: usize) -> Result<Self> {
        if !(0.0..1.0).contains(&target_sparsity) {
            return Err(Error::Config(format!(
                "target sparsity must lie in [0, 1), got {target_sparsity}"
            )));
        }
        let third = total_steps / 3;
        Ok(Self {
            target_sparsity,
            warmup_steps: third,
            pruning_steps: third,
            total_steps,
            update_interval: (third / RAMP_UPDATES).max(1),
        })
    }

    /// Scheduled sparsity at `step`.
    pub fn sparsity_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return 0.0;
        }
        let done = step - self.warmup_steps;
        if done >= self.pruning_steps {
            return self.target_sparsity;
        }
        let frac = done as f64 / self.pruning_steps as f64;
        self.target_sparsity * (1.0 - (1.0 - frac).powi(3))
    }

    /// Whether the mask is recomputed before `step`.
    pub fn is_update_step(&self, step: usize) -> bool {
        if step < self.warmup_steps {
            return false;
        }
        let done = step - self.warmup_steps;
        done == self.pruning_steps || (done < self.pruning_steps && done % self.update_interval == 0)
    }
}

/// Masks the globally smallest-magnitude unmasked encoder weights until
/// exactly `round(sparsity * maskable)` weights are masked. Ties are broken
/// by parameter order, then coordinate. Never unmasks anything.
pub fn prune_to_sparsity(model: &mut TransformerClassifier, sparsity: f64) -> Result<usize> {
    if !(0.0..=1.0).contains(&sparsity) {
        return Err(Error::Config(format!("sparsity must lie in [0, 1], got {sparsity}")));
    }
    let maskable = model.maskable_params();
    let total: usize = maskable.iter().map(|&i| model.params().get(i).value.numel()).sum();
    let want = (sparsity * total as f64).round() as usize;
    let mut alive = Vec::new();
    let mut masked = 0;
    for &pi in &maskable {
        let p = model.params().get(pi);
        let mask = p.mask.as_ref().expect("maskable");
        for (j, (&w, &m)) in p.value.data().iter().zip(mask.data()).enumerate() {
            if m == 0.0 {
                masked += 1;
            } else {
                alive.push((w.abs(), pi, j));
            }
        }
    }
    if want <= masked {
        return Ok(0);
    }
    let extra = want - masked;
    alive.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    for &(_, pi, j) in &alive[..extra] {
        let p = model.params_mut().get_mut(pi);
        p.mask.as_mut().expect("maskable").data_mut()[j] = 0.0;
        p.value.data_mut()[j] = 0.0;
    }
    Ok(extra)
}

struct MagnitudeHook {
    schedule: PruneSchedule,
}

impl StepHook for MagnitudeHook {
    fn before_step(&mut self, step: usize, _total: usize, model: &mut TransformerClassifier) -> Result<()> {
        if self.schedule.target_sparsity > 0.0 && self.schedule.is_update_step(step) {
            prune_to_sparsity(model, self.schedule.sparsity_at(step))?;
        }
        Ok(())
    }
}

/// Fine-tunes with embeddings frozen while ramping encoder sparsity up to the
/// schedule's target.
pub fn magnitude_prune_finetune(
    model: &mut TransformerClassifier,
    train: &[LabeledPairExample],
    schedule: &PruneSchedule,
    objective: Objective<'_>,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainReport> {
    if !(0.0..1.0).contains(&schedule.target_sparsity) {
        return Err(Error::Config(format!(
            "target sparsity must lie in [0, 1), got {}",
            schedule.target_sparsity
        )));
    }
    if model.sparsity() > schedule.target_sparsity {
        return Err(Error::Contract(format!(
            "model sparsity {} already exceeds target {}",
            model.sparsity(),
            schedule.target_sparsity
        )));
    }
    model.set_embeddings_trainable(false);
    let mut hook = MagnitudeHook { schedule: *schedule };
    let report = fine_tune(model, train, cfg, objective, seed, Some(&mut hook));
    model.set_embeddings_trainable(true);
    report
}

/// Mean absolute sensitivity of the loss to each head's mask scalar.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadImportance {
    pub num_layers: usize,
    pub num_heads: usize,
    /// Row-major `[layer][head]`.
    pub scores: Vec<f64>,
    pub samples: usize,
}

impl HeadImportance {
    pub fn score(&self, layer: usize, head: usize) -> f64 {
        self.scores[layer * self.num_heads + head]
    }
}

/// Computes `E_x |dL(x)/d xi(l, h)|` over the probe set with cross-entropy
/// loss. Model parameters are not touched.
pub fn head_importance(model: &TransformerClassifier, probe: &[LabeledPairExample]) -> Result<HeadImportance> {
    if probe.is_empty() {
        return Err(Error::Contract("head importance needs a nonempty probe set".into()));
    }
    let cfg = model.config();
    let (layers, heads) = (cfg.num_layers, cfg.num_heads);
    let mut sums = vec![0.0; layers * heads];
    let opts = ForwardOptions {
        param_grads: false,
        head_mask: HeadMaskMode::PerSample,
    };
    for chunk in probe.chunks(PROBE_BATCH) {
        let refs: Vec<&LabeledPairExample> = chunk.iter().collect();
        let labels: Vec<usize> = chunk.iter().map(|e| e.label).collect();
        let batch = encode_batch(&refs)?;
        let mut tape = Tape::new();
        let taped = model.forward_on_tape(&mut tape, &batch, opts)?;
        // Summed (not averaged) loss, so each sample's mask gradient is its
        // own per-sample sensitivity.
        let mean = tape.cross_entropy(taped.logits, &labels, None)?;
        let loss = tape.scale(mean, chunk.len() as f64);
        tape.backward(loss)?;
        for (l, &xi) in taped.head_masks.iter().enumerate() {
            let g = tape
                .grad(xi)
                .ok_or_else(|| Error::Contract("head mask received no gradient".into()))?;
            for b in 0..chunk.len() {
                for h in 0..heads {
                    sums[l * heads + h] += g[b * heads + h].abs();
                }
            }
        }
    }
    let n = probe.len() as f64;
    Ok(HeadImportance {
        num_layers: layers,
        num_heads: heads,
        scores: sums.into_iter().map(|s| s / n).collect(),
        samples: probe.len(),
    })
}

/// Zeroes the mask scalar of the `num_to_prune` lowest-scoring heads. Ties are
/// broken by layer, then head. Weights are left untouched.
pub fn structured_prune(
    model: &mut TransformerClassifier,
    scores: &HeadImportance,
    num_to_prune: usize,
) -> Result<Vec<(usize, usize)>> {
    let total = model.num_heads_total();
    let cfg = model.config();
    if scores.num_layers != cfg.num_layers || scores.num_heads != cfg.num_heads || scores.scores.len() != total {
        return Err(Error::Contract(
            "importance scores do not match the model's heads".into(),
        ));
    }
    if num_to_prune >= total {
        return Err(Error::Config(format!("cannot prune {num_to_prune} of {total} heads")));
    }
    let mut order: Vec<usize> = (0..total).collect();
    order.sort_by(|&a, &b| scores.scores[a].total_cmp(&scores.scores[b]).then(a.cmp(&b)));
    let heads = scores.num_heads;
    let pruned: Vec<(usize, usize)> = order[..num_to_prune].iter().map(|&i| (i / heads, i % heads)).collect();
    for &(l, h) in &pruned {
        model.set_head_mask(l, h, 0.0);
    }
    Ok(pruned)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn small() -> TransformerClassifier {
        TransformerClassifier::new(ModelConfig {
            embed_dim: 16,
            num_layers: 2,
            num_heads: 2,
            ffn_dim: 16,
            ..ModelConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn schedule_shape() {
        let s = PruneSchedule::new(0.6, 300).unwrap();
        assert_eq!(s.sparsity_at(0), 0.0);
        assert_eq!(s.sparsity_at(99), 0.0);
        assert_eq!(s.sparsity_at(100), 0.0);
        assert_eq!(s.sparsity_at(200), 0.6);
        assert_eq!(s.sparsity_at(299), 0.6);
        let mut last = 0.0;
        for t in 0..300 {
            assert!(s.sparsity_at(t) >= last);
            last = s.sparsity_at(t);
        }
        assert!(s.is_update_step(100) && s.is_update_step(110) && s.is_update_step(200));
        assert!(!s.is_update_step(105) && !s.is_update_step(201));
        assert!(matches!(PruneSchedule::new(1.0, 10), Err(Error::Config(_))));
    }

    #[test]
    fn tiny_schedules_still_reach_target() {
        let s = PruneSchedule::new(0.5, 2).unwrap();
        assert!(s.is_update_step(0));
        assert_eq!(s.sparsity_at(0), 0.5);
    }

    #[test]
    fn prunes_smallest_magnitudes_globally() {
        let mut m = small();
        let maskable = m.maskable_params();
        prune_to_sparsity(&mut m, 0.3).unwrap();
        let total: usize = maskable.iter().map(|&i| m.params().get(i).value.numel()).sum();
        let pruned = (m.sparsity() * total as f64).round() as usize;
        assert_eq!(pruned, (0.3 * total as f64).round() as usize);
        let mut survivors = f64::INFINITY;
        for &i in &maskable {
            let p = m.params().get(i);
            for (&w, &k) in p.value.data().iter().zip(p.mask.as_ref().unwrap().data()) {
                if k == 1.0 {
                    survivors = survivors.min(w.abs());
                } else {
                    assert_eq!(w, 0.0);
                }
            }
        }
        assert!(survivors > 0.0);
        // Lower targets never unmask.
        assert_eq!(prune_to_sparsity(&mut m, 0.1).unwrap(), 0);
    }

    #[test]
    fn structured_prune_tie_break() {
        let mut m = small();
        let before = m.params().clone();
        let scores = HeadImportance {
            num_layers: 2,
            num_heads: 2,
            scores: vec![1.0; 4],
            samples: 1,
        };
        let pruned = structured_prune(&mut m, &scores, 3).unwrap();
        assert_eq!(pruned, vec![(0, 0), (0, 1), (1, 0)]);
        assert_eq!(m.head_masks(), &[0.0, 0.0, 0.0, 1.0]);
        assert_eq!(m.params(), &before);
        assert!(matches!(structured_prune(&mut m, &scores, 4), Err(Error::Config(_))));
        let mut fresh = small();
        assert!(structured_prune(&mut fresh, &scores, 0).unwrap().is_empty());
        assert_eq!(fresh.head_masks(), &[1.0; 4]);
    }

    #[test]
    fn toy_weight_pruning_picks_small_entries() {
        let mut m = small();
        let idx = m.maskable_params();
        // Make every maskable weight large except two entries of the first.
        for &i in &idx {
            let p = m.params_mut().get_mut(i);
            for v in p.value.data_mut() {
                *v = 10.0;
            }
        }
        let p = m.params_mut().get_mut(idx[0]);
        p.value.data_mut()[..4].copy_from_slice(&[0.1, -5.0, 3.0, 0.2]);
        let total: usize = idx.iter().map(|&i| m.params().get(i).value.numel()).sum();
        prune_to_sparsity(&mut m, 2.0 / total as f64).unwrap();
        let mask = m.params().get(idx[0]).mask.clone().unwrap();
        assert_eq!(&mask.data()[..4], &[0.0, 1.0, 1.0, 0.0]);
        assert_eq!(m.params().get(idx[0]).value.data()[1], -5.0);
    }
}
