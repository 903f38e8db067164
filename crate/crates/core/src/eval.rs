//! Accuracy, accuracy gap, relative bias and easy/hard diagnostics.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{encode_batch, LabeledPairExample, Partition};
use crate::error::{Error, Result};
use crate::model::TransformerClassifier;
use crate::tensor::{argmax, Tensor};

pub const REPORT_SCHEMA_VERSION: u32 = 1;
const INFERENCE_BATCH: usize = 256;

/// Logits for every example, `N x num_classes`.
pub fn predict_logits(model: &TransformerClassifier, examples: &[LabeledPairExample]) -> Result<Tensor> {
    if examples.is_empty() {
        return Err(Error::Contract("cannot predict on an empty split".into()));
    }
    let k = model.config().num_classes;
    let mut data = Vec::with_capacity(examples.len() * k);
    for chunk in examples.chunks(INFERENCE_BATCH) {
        let refs: Vec<&LabeledPairExample> = chunk.iter().collect();
        data.extend_from_slice(model.forward(&encode_batch(&refs)?)?.data());
    }
    Tensor::new(vec![examples.len(), k], data)
}

/// Argmax class per row; ties go to the lower class index.
pub fn predictions(logits: &Tensor) -> Vec<usize> {
    (0..logits.shape()[0]).map(|r| argmax(logits.row(r))).collect()
}

pub fn accuracy_from_predictions(predicted: &[usize], labels: &[usize]) -> Result<f64> {
    if predicted.is_empty() {
        return Err(Error::Contract("accuracy of an empty split".into()));
    }
    if predicted.len() != labels.len() {
        return Err(Error::Contract(format!(
            "{} predictions for {} labels",
            predicted.len(),
            labels.len()
        )));
    }
    let hits = predicted.iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / predicted.len() as f64)
}

pub fn accuracy(model: &TransformerClassifier, split: &[LabeledPairExample]) -> Result<f64> {
    let preds = predictions(&predict_logits(model, split)?);
    let labels: Vec<usize> = split.iter().map(|e| e.label).collect();
    accuracy_from_predictions(&preds, &labels)
}

/// Accuracy on one adversarial set together with its size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdversarialResult {
    pub name: String,
    pub accuracy: f64,
    pub size: usize,
}

/// Size-weighted mean accuracy across adversarial sets.
pub fn overall_adversarial(sets: &[(f64, usize)]) -> Result<f64> {
    let total: usize = sets.iter().map(|&(_, n)| n).sum();
    if sets.is_empty() || sets.iter().any(|&(_, n)| n == 0) {
        return Err(Error::Contract("adversarial set sizes must be positive".into()));
    }
    Ok(sets.iter().map(|&(a, n)| a * n as f64).sum::<f64>() / total as f64)
}

/// `(dev - adversarial) / dev`.
pub fn accuracy_gap(dev: f64, adversarial: f64) -> Result<f64> {
    if !(dev > 0.0) {
        return Err(Error::UndefinedMetric(format!(
            "accuracy gap needs positive dev accuracy, got {dev}"
        )));
    }
    Ok((dev - adversarial) / dev)
}

/// Ratio of the compressed model's accuracy gap to the teacher's. Values
/// above 1 mean the compressed model leans on the shortcut more.
pub fn relative_bias(teacher_gap: f64, compressed_gap: f64) -> Result<f64> {
    if teacher_gap == 0.0 {
        return Err(Error::UndefinedMetric("teacher accuracy gap is zero".into()));
    }
    Ok(compressed_gap / teacher_gap)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EasyHard {
    pub easy: f64,
    pub hard: f64,
    /// `easy - hard`
    pub gap: f64,
}

pub fn easy_hard_from_predictions(predicted: &[usize], labels: &[usize], partition: &Partition) -> Result<EasyHard> {
    if partition.len() != predicted.len() || predicted.len() != labels.len() {
        return Err(Error::Contract("partition does not cover the split".into()));
    }
    if partition.easy.is_empty() || partition.hard.is_empty() {
        return Err(Error::Contract("easy/hard report needs both subsets nonempty".into()));
    }
    let acc = |idx: &[usize]| -> Result<f64> {
        if idx.iter().any(|&i| i >= predicted.len()) {
            return Err(Error::Contract("partition index outside the split".into()));
        }
        Ok(idx.iter().filter(|&&i| predicted[i] == labels[i]).count() as f64 / idx.len() as f64)
    };
    let easy = acc(&partition.easy)?;
    let hard = acc(&partition.hard)?;
    Ok(EasyHard {
        easy,
        hard,
        gap: easy - hard,
    })
}

pub fn easy_hard_report(
    model: &TransformerClassifier,
    dev: &[LabeledPairExample],
    partition: &Partition,
) -> Result<EasyHard> {
    let preds = predictions(&predict_logits(model, dev)?);
    let labels: Vec<usize> = dev.iter().map(|e| e.label).collect();
    easy_hard_from_predictions(&preds, &labels, partition)
}

/// Marks the `num_hard` highest-variance samples hard, so the predicted hard
/// fraction equals the known one. Ties go to the lower index.
pub fn partition_by_variance(variances: &[f64], num_hard: usize) -> Result<Partition> {
    if num_hard > variances.len() {
        return Err(Error::Contract(format!(
            "{num_hard} hard samples requested from {}",
            variances.len()
        )));
    }
    let mut order: Vec<usize> = (0..variances.len()).collect();
    order.sort_by(|&a, &b| variances[b].total_cmp(&variances[a]).then(a.cmp(&b)));
    let mut hard = vec![false; variances.len()];
    for &i in &order[..num_hard] {
        hard[i] = true;
    }
    Ok(Partition::from_flags(&hard))
}

/// Fraction of samples assigned to the same side by both partitions.
pub fn difficulty_agreement(predicted: &Partition, truth: &Partition) -> Result<f64> {
    if predicted.len() != truth.len() || predicted.is_empty() {
        return Err(Error::Contract("partitions cover different sample universes".into()));
    }
    let a = predicted.hard_flags();
    let b = truth.hard_flags();
    Ok(a.iter().zip(&b).filter(|(x, y)| x == y).count() as f64 / a.len() as f64)
}

/// Everything measured about one model on one seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub model: String,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub runs: usize,
    pub sparsity: f64,
    pub heads_pruned: usize,
    pub num_layers: usize,
    pub dev_accuracy: f64,
    pub dev_size: usize,
    pub adversarial: Vec<AdversarialResult>,
    pub adversarial_accuracy: f64,
    pub accuracy_gap: f64,
    /// Present when a teacher report was supplied.
    pub relative_bias: Option<f64>,
    pub easy_accuracy: f64,
    pub hard_accuracy: f64,
    pub easy_hard_gap: f64,
}

/// Evaluates `model` on the dev split and every adversarial set.
pub fn evaluate(
    name: &str,
    model: &TransformerClassifier,
    dev: &[LabeledPairExample],
    adversarial: &[(&str, &[LabeledPairExample])],
    partition: &Partition,
) -> Result<EvalReport> {
    let dev_logits = predict_logits(model, dev)?;
    let dev_preds = predictions(&dev_logits);
    let dev_labels: Vec<usize> = dev.iter().map(|e| e.label).collect();
    let dev_accuracy = accuracy_from_predictions(&dev_preds, &dev_labels)?;
    let eh = easy_hard_from_predictions(&dev_preds, &dev_labels, partition)?;
    let mut adv = Vec::with_capacity(adversarial.len());
    for (set_name, set) in adversarial {
        adv.push(AdversarialResult {
            name: set_name.to_string(),
            accuracy: accuracy(model, set)?,
            size: set.len(),
        });
    }
    let adversarial_accuracy = overall_adversarial(&adv.iter().map(|a| (a.accuracy, a.size)).collect::<Vec<_>>())?;
    Ok(EvalReport {
        schema_version: REPORT_SCHEMA_VERSION,
        model: name.to_string(),
        config_hash: String::new(),
        seeds: Vec::new(),
        runs: 1,
        sparsity: model.sparsity(),
        heads_pruned: model.head_masks().iter().filter(|&&x| x == 0.0).count(),
        num_layers: model.config().num_layers,
        dev_accuracy,
        dev_size: dev.len(),
        adversarial: adv,
        adversarial_accuracy,
        accuracy_gap: accuracy_gap(dev_accuracy, adversarial_accuracy)?,
        relative_bias: None,
        easy_accuracy: eh.easy,
        hard_accuracy: eh.hard,
        easy_hard_gap: eh.gap,
    })
}

impl EvalReport {
    /// Fills `relative_bias` against a teacher report. It stays `None` when
    /// the teacher's accuracy gap is zero and the ratio is undefined.
    pub fn with_teacher(mut self, teacher: &EvalReport) -> Result<Self> {
        self.relative_bias = match relative_bias(teacher.accuracy_gap, self.accuracy_gap) {
            Ok(b) => Some(b),
            Err(Error::UndefinedMetric(_)) => None,
            Err(e) => return Err(e),
        };
        Ok(self)
    }

    /// Mean of per-seed reports for the same model.
    pub fn average(reports: &[EvalReport]) -> Result<EvalReport> {
        let first = reports
            .first()
            .ok_or_else(|| Error::Contract("nothing to average".into()))?;
        let n = reports.len() as f64;
        let mean = |f: &dyn Fn(&EvalReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        let mut out = first.clone();
        out.seeds = reports.iter().flat_map(|r| r.seeds.iter().copied()).collect();
        out.runs = reports.iter().map(|r| r.runs).sum();
        out.sparsity = mean(&|r| r.sparsity);
        out.dev_accuracy = mean(&|r| r.dev_accuracy);
        for (j, a) in out.adversarial.iter_mut().enumerate() {
            a.accuracy = mean(&|r| r.adversarial[j].accuracy);
        }
        out.adversarial_accuracy = mean(&|r| r.adversarial_accuracy);
        out.accuracy_gap = mean(&|r| r.accuracy_gap);
        out.relative_bias = if reports.iter().all(|r| r.relative_bias.is_some()) {
            Some(mean(&|r| r.relative_bias.unwrap_or(0.0)))
        } else {
            None
        };
        out.easy_accuracy = mean(&|r| r.easy_accuracy);
        out.hard_accuracy = mean(&|r| r.hard_accuracy);
        out.easy_hard_gap = mean(&|r| r.easy_hard_gap);
        Ok(out)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))
    }
}

/// One CSV row per (model, split).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CsvRow {
    pub model: String,
    pub split: String,
    pub size: usize,
    pub accuracy: f64,
    pub sparsity: f64,
    pub heads_pruned: usize,
    pub num_layers: usize,
    pub accuracy_gap: f64,
    pub relative_bias: Option<f64>,
    pub easy_accuracy: Option<f64>,
    pub hard_accuracy: Option<f64>,
    pub easy_hard_gap: Option<f64>,
    pub runs: usize,
    pub config_hash: String,
}

pub fn csv_rows(report: &EvalReport) -> Vec<CsvRow> {
    let row = |split: &str, size: usize, acc: f64, dev: bool| CsvRow {
        model: report.model.clone(),
        split: split.to_string(),
        size,
        accuracy: acc,
        sparsity: report.sparsity,
        heads_pruned: report.heads_pruned,
        num_layers: report.num_layers,
        accuracy_gap: report.accuracy_gap,
        relative_bias: report.relative_bias,
        easy_accuracy: dev.then_some(report.easy_accuracy),
        hard_accuracy: dev.then_some(report.hard_accuracy),
        easy_hard_gap: dev.then_some(report.easy_hard_gap),
        runs: report.runs,
        config_hash: report.config_hash.clone(),
    };
    let mut rows = vec![row("dev", report.dev_size, report.dev_accuracy, true)];
    for a in &report.adversarial {
        rows.push(row(&a.name, a.size, a.accuracy, false));
    }
    rows
}

/// Writes any serializable rows as CSV with a header line.
pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Format(e.to_string()))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::Format(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gap_and_bias() {
        assert!((accuracy_gap(0.8, 0.6).unwrap() - 0.25).abs() < 1e-15);
        assert!(matches!(accuracy_gap(0.0, 0.0), Err(Error::UndefinedMetric(_))));
        assert_eq!(relative_bias(0.3, 0.3).unwrap(), 1.0);
        assert!(matches!(relative_bias(0.0, 0.1), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn bias_is_scale_consistent() {
        let g = accuracy_gap(0.9, 0.6).unwrap();
        let gs = accuracy_gap(0.9 * 0.7, 0.6 * 0.7).unwrap();
        assert!((relative_bias(0.2, g).unwrap() - relative_bias(0.2, gs).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn weighted_adversarial_mean() {
        assert_eq!(overall_adversarial(&[(0.7, 10)]).unwrap(), 0.7);
        assert!((overall_adversarial(&[(57.0, 5), (64.6, 5)]).unwrap() - 60.8).abs() < 1e-12);
        let qqp = overall_adversarial(&[(47.2, 8000), (33.5, 677)]).unwrap();
        assert!((qqp - 46.131).abs() < 1e-3);
        assert!(overall_adversarial(&[]).is_err());
    }

    #[test]
    fn accuracy_counts() {
        assert_eq!(accuracy_from_predictions(&[0, 0, 0, 0], &[0, 1, 0, 1]).unwrap(), 0.5);
        assert_eq!(accuracy_from_predictions(&[1, 0], &[1, 0]).unwrap(), 1.0);
        assert!(matches!(accuracy_from_predictions(&[], &[]), Err(Error::Contract(_))));
    }

    #[test]
    fn ties_go_to_lower_class() {
        let logits = Tensor::new(vec![2, 2], vec![0.3, 0.3, 0.1, 0.2]).unwrap();
        assert_eq!(predictions(&logits), vec![0, 1]);
    }

    #[test]
    fn easy_hard_split() {
        let p = Partition::from_flags(&[false, false, true, true]);
        let eh = easy_hard_from_predictions(&[1, 0, 0, 0], &[1, 0, 1, 0], &p).unwrap();
        assert_eq!((eh.easy, eh.hard, eh.gap), (1.0, 0.5, 0.5));
        let all_easy = Partition::from_flags(&[false, false]);
        assert!(matches!(
            easy_hard_from_predictions(&[0, 0], &[0, 0], &all_easy),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn variance_partition_and_agreement() {
        let p = partition_by_variance(&[0.1, 5.0, 0.2, 5.0], 2).unwrap();
        assert_eq!(p.hard, vec![1, 3]);
        let truth = Partition::from_flags(&[false, true, false, true]);
        assert_eq!(difficulty_agreement(&p, &truth).unwrap(), 1.0);
        let flipped = Partition::from_flags(&[true, false, true, false]);
        assert_eq!(difficulty_agreement(&flipped, &truth).unwrap(), 0.0);
        let other = Partition::from_flags(&[true]);
        assert!(matches!(difficulty_agreement(&other, &truth), Err(Error::Contract(_))));
        let tie = partition_by_variance(&[1.0, 1.0, 1.0], 1).unwrap();
        assert_eq!(tie.hard, vec![0]);
    }
}
