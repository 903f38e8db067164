//! Sample difficulty from loss variance across pruned snapshots, per-sample
//! teacher smoothing, the combined hard/soft objective, and the baseline
//! reweighting schemes.

use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::LabeledPairExample;
use crate::error::{Error, Result};
use crate::eval::{predict_logits, predictions};
use crate::model::TransformerClassifier;
use crate::pruning::{magnitude_prune_finetune, PruneSchedule};
use crate::tensor::{per_sample_nll, softmax, Tape, Tensor, Var};
use crate::train::{fine_tune, Objective, StepHook, TrainConfig, TrainReport};

/// Unreduced cross-entropy of every sample under every snapshot,
/// `samples x snapshots`.
pub fn per_sample_loss_matrix(snapshots: &[TransformerClassifier], examples: &[LabeledPairExample]) -> Result<Tensor> {
    let first = snapshots
        .first()
        .ok_or_else(|| Error::Contract("no snapshots given".into()))?;
    if snapshots.iter().any(|s| s.config() != first.config()) {
        return Err(Error::Contract(
            "snapshots were built with different model configs".into(),
        ));
    }
    let cfg = first.config();
    for (i, e) in examples.iter().enumerate() {
        let seq = e.to_sequence();
        if seq.len() > cfg.max_seq_len || seq.iter().any(|&t| t >= cfg.vocab_size) || e.label >= cfg.num_classes {
            return Err(Error::Contract(format!("example {i} does not fit the snapshot config")));
        }
    }
    let labels: Vec<usize> = examples.iter().map(|e| e.label).collect();
    let cols: Vec<Vec<f64>> = snapshots
        .iter()
        .map(|s| per_sample_nll(&predict_logits(s, examples)?, &labels))
        .collect::<Result<_>>()?;
    let k = cols.len();
    let mut data = vec![0.0; examples.len() * k];
    for (c, col) in cols.iter().enumerate() {
        for (r, &v) in col.iter().enumerate() {
            data[r * k + c] = v;
        }
    }
    Tensor::new(vec![examples.len(), k], data)
}

/// Population variance of each row.
pub fn variance_scores(losses: &Tensor) -> Result<Vec<f64>> {
    let (rows, cols) = losses.dims2()?;
    if cols < 2 {
        return Err(Error::Contract(format!(
            "variance needs at least 2 columns, got {cols}"
        )));
    }
    Ok((0..rows)
        .map(|r| {
            let row = losses.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / cols as f64
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DifficultyScores {
    pub variances: Vec<f64>,
    pub v_min: f64,
    pub v_max: f64,
    pub alpha: f64,
    /// Difficulty degree per sample, in `[alpha, 1]`.
    pub degrees: Vec<f64>,
}

/// Maps variances affinely onto `[alpha, 1]`. With all variances equal every
/// degree is 1.
pub fn difficulty_degree(variances: &[f64], alpha: f64) -> Result<DifficultyScores> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::Config(format!("alpha must lie in (0, 1], got {alpha}")));
    }
    if variances.is_empty() {
        return Err(Error::Contract("difficulty degree of an empty set".into()));
    }
    if variances.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::Numeric("variances must be finite and nonnegative".into()));
    }
    let v_min = variances.iter().copied().fold(f64::INFINITY, f64::min);
    let v_max = variances.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let degrees = if v_max > v_min {
        variances
            .iter()
            .map(|v| alpha + (1.0 - alpha) * (v - v_min) / (v_max - v_min))
            .collect()
    } else {
        vec![1.0; variances.len()]
    };
    Ok(DifficultyScores {
        variances: variances.to_vec(),
        v_min,
        v_max,
        alpha,
        degrees,
    })
}

/// Raises each teacher distribution to the power `d_i` and renormalizes.
/// `d = 1` returns the row unchanged; smaller `d` flattens it.
pub fn smooth_teacher(teacher_probs: &Tensor, degrees: &[f64]) -> Result<Tensor> {
    let (n, k) = teacher_probs.dims2()?;
    if degrees.len() != n {
        return Err(Error::Contract(format!("{} degrees for {n} rows", degrees.len())));
    }
    if let Some(d) = degrees.iter().find(|d| !(**d > 0.0) || !d.is_finite()) {
        return Err(Error::Config(format!("difficulty degree must be positive, got {d}")));
    }
    let mut out = Vec::with_capacity(n * k);
    for (r, &d) in degrees.iter().enumerate() {
        let row = teacher_probs.row(r);
        let sum: f64 = row.iter().sum();
        if row.iter().any(|&p| !(p >= 0.0)) || (sum - 1.0).abs() > 1e-6 {
            return Err(Error::Contract(format!(
                "teacher row {r} is not a probability distribution"
            )));
        }
        if d == 1.0 {
            out.extend_from_slice(row);
            continue;
        }
        // Dividing by the row maximum first keeps tiny powers from underflowing.
        let top = row.iter().copied().fold(0.0, f64::max);
        let powered: Vec<f64> = row.iter().map(|&p| (p / top).powf(d)).collect();
        let z: f64 = powered.iter().sum();
        out.extend(powered.iter().map(|p| p / z));
    }
    Tensor::new(vec![n, k], out)
}

/// `(1 - lambda) * CE(labels, logits) + lambda * KL(targets || softmax(logits))`,
/// with optional per-sample weights applied to both terms before averaging.
pub fn rmc_loss(
    tape: &mut Tape,
    labels: &[usize],
    logits: Var,
    targets: &Tensor,
    lambda: f64,
    weights: Option<&[f64]>,
) -> Result<Var> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Config(format!("lambda must lie in [0, 1], got {lambda}")));
    }
    let ce = tape.cross_entropy(logits, labels, weights)?;
    let kl = tape.kl_divergence(targets, logits, weights)?;
    if lambda == 0.0 {
        return Ok(ce);
    }
    if lambda == 1.0 {
        return Ok(kl);
    }
    let a = tape.scale(ce, 1.0 - lambda);
    let b = tape.scale(kl, lambda);
    tape.add(a, b)
}

/// `(1 - p_i)^gamma` rescaled to mean 1 over the batch, where `p_i` is the
/// probability assigned to the gold class.
pub fn focal_weights(gold_probs: &[f64], gamma: f64) -> Result<Vec<f64>> {
    if gold_probs.is_empty() {
        return Err(Error::Contract("focal weights of an empty batch".into()));
    }
    if let Some(p) = gold_probs.iter().find(|p| !(**p >= 0.0 && **p <= 1.0)) {
        return Err(Error::Contract(format!("gold probability {p} outside [0, 1]")));
    }
    let raw: Vec<f64> = gold_probs.iter().map(|p| (1.0 - p).powf(gamma)).collect();
    normalize_mean_one(raw, "every sample has gold probability 1; focal weights are undefined")
}

/// Raw weight `upweight` for samples the identification model gets wrong and
/// 1 otherwise, rescaled to mean 1 over the set.
pub fn jtt_weights_from_predictions(correct: &[bool], upweight: f64) -> Result<Vec<f64>> {
    if correct.is_empty() {
        return Err(Error::Contract("JTT weights of an empty set".into()));
    }
    if !(upweight > 0.0) || !upweight.is_finite() {
        return Err(Error::Config(format!("JTT up-weight must be positive, got {upweight}")));
    }
    let raw = correct.iter().map(|&c| if c { 1.0 } else { upweight }).collect();
    normalize_mean_one(raw, "JTT weights sum to zero")
}

pub fn jtt_weights(
    identifier: &TransformerClassifier,
    train: &[LabeledPairExample],
    upweight: f64,
) -> Result<Vec<f64>> {
    if train.is_empty() {
        return Err(Error::Contract("JTT weights of an empty set".into()));
    }
    let preds = predictions(&predict_logits(identifier, train)?);
    let correct: Vec<bool> = preds.iter().zip(train).map(|(p, e)| *p == e.label).collect();
    jtt_weights_from_predictions(&correct, upweight)
}

fn normalize_mean_one(raw: Vec<f64>, degenerate: &str) -> Result<Vec<f64>> {
    let mean = raw.iter().sum::<f64>() / raw.len() as f64;
    if !(mean > 0.0) || !mean.is_finite() {
        return Err(Error::Numeric(degenerate.to_string()));
    }
    Ok(raw.into_iter().map(|w| w / mean).collect())
}

/// Softmax of the teacher's logits on every example.
pub fn teacher_probabilities(teacher: &TransformerClassifier, examples: &[LabeledPairExample]) -> Result<Tensor> {
    softmax(&predict_logits(teacher, examples)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Vanilla,
    Distil,
    Smooth,
    Focal,
    Jtt,
    Rmc,
}

impl Strategy {
    pub const ALL: [Strategy; 6] = [
        Strategy::Vanilla,
        Strategy::Distil,
        Strategy::Smooth,
        Strategy::Focal,
        Strategy::Jtt,
        Strategy::Rmc,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Vanilla => "vanilla",
            Strategy::Distil => "distil",
            Strategy::Smooth => "smooth",
            Strategy::Focal => "focal",
            Strategy::Jtt => "jtt",
            Strategy::Rmc => "rmc",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown strategy {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillConfig {
    /// Weight of the soft (teacher) term.
    pub lambda: f64,
    /// Floor of the difficulty degree.
    pub alpha: f64,
    pub focal_gamma: f64,
    pub jtt_upweight: f64,
    /// Epochs used to train the JTT identification model.
    pub jtt_epochs: usize,
    /// Constant degree used by the `smooth` baseline.
    pub smooth_degree: f64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            lambda: 0.9,
            alpha: 0.5,
            focal_gamma: 2.0,
            jtt_upweight: 2.0,
            jtt_epochs: 1,
            smooth_degree: 0.9,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("lambda must lie in [0, 1], got {}", self.lambda)));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::Config(format!("alpha must lie in (0, 1], got {}", self.alpha)));
        }
        if !(self.smooth_degree > 0.0 && self.smooth_degree <= 1.0) {
            return Err(Error::Config("smooth_degree must lie in (0, 1]".into()));
        }
        if !(self.focal_gamma >= 0.0) || !(self.jtt_upweight > 0.0) || self.jtt_epochs == 0 {
            return Err(Error::Config(
                "focal_gamma, jtt_upweight and jtt_epochs out of range".into(),
            ));
        }
        Ok(())
    }
}

/// Where the student's capacity reduction comes from.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum StudentTraining {
    /// Plain fine-tuning of an already-compressed student (truncated or
    /// head-pruned).
    FineTune,
    /// Magnitude pruning ramped up to this sparsity during fine-tuning.
    MagnitudePrune(f64),
}

/// Inputs a strategy may need beyond the training set.
#[derive(Clone, Copy, Debug, Default)]
pub struct StudentInputs<'a> {
    /// Teacher probabilities on the training set; computed when absent.
    pub teacher_probs: Option<&'a Tensor>,
    /// Stage-one difficulty scores on the training set (required for rmc).
    pub difficulty: Option<&'a DifficultyScores>,
}

/// Trains `student` with the chosen mitigation strategy.
#[allow(clippy::too_many_arguments)]
pub fn train_student(
    strategy: Strategy,
    teacher: &TransformerClassifier,
    student: &mut TransformerClassifier,
    train: &[LabeledPairExample],
    inputs: StudentInputs<'_>,
    mode: StudentTraining,
    dcfg: &DistillConfig,
    tcfg: &TrainConfig,
    seed: u64,
) -> Result<TrainReport> {
    dcfg.validate()?;
    let owned_probs;
    let needs_probs = matches!(strategy, Strategy::Distil | Strategy::Smooth | Strategy::Rmc);
    let teacher_probs: Option<&Tensor> = if needs_probs {
        match inputs.teacher_probs {
            Some(p) => Some(p),
            None => {
                owned_probs = teacher_probabilities(teacher, train)?;
                Some(&owned_probs)
            }
        }
    } else {
        None
    };

    let targets;
    let weights;
    let objective = match strategy {
        Strategy::Vanilla => Objective::CrossEntropy,
        Strategy::Distil => Objective::Distill {
            targets: teacher_probs.expect("computed above"),
            lambda: dcfg.lambda,
        },
        Strategy::Smooth => {
            let tp = teacher_probs.expect("computed above");
            targets = smooth_teacher(tp, &vec![dcfg.smooth_degree; train.len()])?;
            Objective::Distill {
                targets: &targets,
                lambda: dcfg.lambda,
            }
        }
        Strategy::Rmc => {
            let scores = inputs
                .difficulty
                .ok_or_else(|| Error::Contract("rmc needs stage-one difficulty scores".into()))?;
            if scores.degrees.len() != train.len() {
                return Err(Error::Contract(format!(
                    "{} difficulty scores for {} training samples",
                    scores.degrees.len(),
                    train.len()
                )));
            }
            targets = smooth_teacher(teacher_probs.expect("computed above"), &scores.degrees)?;
            Objective::Distill {
                targets: &targets,
                lambda: dcfg.lambda,
            }
        }
        Strategy::Focal => Objective::Focal {
            gamma: dcfg.focal_gamma,
        },
        Strategy::Jtt => {
            let mut identifier = TransformerClassifier::new(*teacher.config())?;
            let id_cfg = TrainConfig {
                epochs: dcfg.jtt_epochs,
                ..tcfg.clone()
            };
            fine_tune(
                &mut identifier,
                train,
                &id_cfg,
                Objective::CrossEntropy,
                seed,
                None::<&mut dyn StepHook>,
            )?;
            weights = jtt_weights(&identifier, train, dcfg.jtt_upweight)?;
            Objective::WeightedCrossEntropy(&weights)
        }
    };

    match mode {
        StudentTraining::FineTune => fine_tune(student, train, tcfg, objective, seed, None),
        StudentTraining::MagnitudePrune(target) => {
            let schedule = PruneSchedule::new(target, tcfg.total_steps(train.len()))?;
            magnitude_prune_finetune(student, train, &schedule, objective, tcfg, seed)
        }
    }
}

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(fs::File::create(path)?))
}

fn open_lines(path: &Path) -> Result<std::io::Lines<BufReader<fs::File>>> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    Ok(BufReader::new(fs::File::open(path)?).lines())
}

fn parse_f64(s: &str, line: usize) -> Result<f64> {
    s.parse().map_err(|_| Error::Parse {
        line,
        message: format!("bad number {s:?}"),
    })
}

/// One `index <TAB> variance <TAB> degree` line per sample, preceded by an
/// `alpha` header line.
pub fn write_difficulty(path: &Path, scores: &DifficultyScores) -> Result<()> {
    let mut w = create(path)?;
    writeln!(w, "alpha\t{:?}", scores.alpha)?;
    for (i, (v, d)) in scores.variances.iter().zip(&scores.degrees).enumerate() {
        writeln!(w, "{i}\t{v:?}\t{d:?}")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_difficulty(path: &Path) -> Result<DifficultyScores> {
    let mut lines = open_lines(path)?;
    let header = lines.next().transpose()?.unwrap_or_default();
    let alpha = match header.split_once('\t') {
        Some(("alpha", a)) => parse_f64(a, 1)?,
        _ => {
            return Err(Error::Parse {
                line: 1,
                message: "missing alpha header".into(),
            })
        }
    };
    let mut variances = Vec::new();
    let mut degrees = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        let n = i + 2;
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 3 || f[0].parse::<usize>().ok() != Some(i) {
            return Err(Error::Parse {
                line: n,
                message: "expected `index<TAB>variance<TAB>degree` in order".into(),
            });
        }
        variances.push(parse_f64(f[1], n)?);
        degrees.push(parse_f64(f[2], n)?);
    }
    let mut scores = difficulty_degree(&variances, alpha)?;
    scores.degrees = degrees;
    Ok(scores)
}

/// One line of tab-separated class probabilities per sample.
pub fn write_probabilities(path: &Path, probs: &Tensor) -> Result<()> {
    let (n, _) = probs.dims2()?;
    let mut w = create(path)?;
    for r in 0..n {
        let row: Vec<String> = probs.row(r).iter().map(|p| format!("{p:?}")).collect();
        writeln!(w, "{}", row.join("\t"))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_probabilities(path: &Path, num_classes: usize) -> Result<Tensor> {
    let mut data = Vec::new();
    let mut rows = 0;
    for (i, line) in open_lines(path)?.enumerate() {
        let line = line?;
        let vals: Vec<f64> = line.split('\t').map(|s| parse_f64(s, i + 1)).collect::<Result<_>>()?;
        if vals.len() != num_classes {
            return Err(Error::Parse {
                line: i + 1,
                message: format!("expected {num_classes} probabilities, found {}", vals.len()),
            });
        }
        data.extend(vals);
        rows += 1;
    }
    if rows == 0 {
        return Err(Error::Contract(format!("{} holds no probabilities", path.display())));
    }
    Tensor::new(vec![rows, num_classes], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variance_examples() {
        let m = Tensor::new(vec![2, 5], vec![0.0, 0.0, 0.0, 0.0, 5.0, 1.0, 1.0, 1.0, 1.0, 1.0]).unwrap();
        assert_eq!(variance_scores(&m).unwrap(), vec![4.0, 0.0]);
        let one = Tensor::new(vec![2, 1], vec![1.0, 2.0]).unwrap();
        assert!(matches!(variance_scores(&one), Err(Error::Contract(_))));
    }

    #[test]
    fn degree_endpoints() {
        let s = difficulty_degree(&[0.0, 1.0, 2.0], 0.5).unwrap();
        assert_eq!(s.degrees, vec![0.5, 0.75, 1.0]);
        let flat = difficulty_degree(&[3.0, 3.0], 0.2).unwrap();
        assert_eq!(flat.degrees, vec![1.0, 1.0]);
        assert!(matches!(difficulty_degree(&[1.0], 0.0), Err(Error::Config(_))));
        assert!(matches!(difficulty_degree(&[1.0], 1.5), Err(Error::Config(_))));
    }

    #[test]
    fn smoothing_examples() {
        let p = Tensor::new(vec![1, 2], vec![0.9, 0.1]).unwrap();
        let s = smooth_teacher(&p, &[0.5]).unwrap();
        assert!((s.data()[0] - 0.75).abs() < 1e-12 && (s.data()[1] - 0.25).abs() < 1e-12);
        assert_eq!(smooth_teacher(&p, &[1.0]).unwrap(), p);
        let u = Tensor::filled(&[1, 4], 0.25);
        assert_eq!(smooth_teacher(&u, &[0.3]).unwrap(), u);
        assert!(matches!(smooth_teacher(&p, &[0.0]), Err(Error::Config(_))));
        let bad = Tensor::new(vec![1, 2], vec![0.9, 0.3]).unwrap();
        assert!(matches!(smooth_teacher(&bad, &[0.5]), Err(Error::Contract(_))));
    }

    #[test]
    fn focal_and_jtt_examples() {
        let w = focal_weights(&[0.9, 0.5], 2.0).unwrap();
        assert!((w[0] - 0.01 / 0.13).abs() < 1e-12 && (w[1] - 0.25 / 0.13).abs() < 1e-12);
        assert_eq!(focal_weights(&[0.3, 0.3, 0.3], 2.0).unwrap(), vec![1.0; 3]);
        assert!(focal_weights(&[1.0, 1.0], 2.0).is_err());

        let mut correct = vec![true; 10];
        correct[0] = false;
        correct[1] = false;
        let w = jtt_weights_from_predictions(&correct, 2.0).unwrap();
        assert!((w[0] - 2.0 * 10.0 / 12.0).abs() < 1e-12);
        assert!((w[5] - 10.0 / 12.0).abs() < 1e-12);
        assert_eq!(jtt_weights_from_predictions(&[true; 4], 2.0).unwrap(), vec![1.0; 4]);
        assert!(matches!(
            jtt_weights_from_predictions(&[], 2.0),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn loss_endpoints() {
        let logits = Tensor::new(vec![2, 2], vec![0.3, -0.2, 1.0, 0.5]).unwrap();
        let labels = [0, 1];
        let onehot = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();

        let mut t = Tape::new();
        let z = t.leaf(logits.clone(), true);
        let ce = t.cross_entropy(z, &labels, None).unwrap();
        let ce = t.value(ce).item();

        let mut t = Tape::new();
        let z = t.leaf(logits.clone(), true);
        let l0 = rmc_loss(&mut t, &labels, z, &onehot, 0.0, None).unwrap();
        assert_eq!(t.value(l0).item(), ce);

        let mut t = Tape::new();
        let z = t.leaf(logits, true);
        let l1 = rmc_loss(&mut t, &labels, z, &onehot, 1.0, None).unwrap();
        assert!((t.value(l1).item() - ce).abs() < 1e-12);
        assert!(matches!(
            rmc_loss(&mut t, &labels, z, &onehot, 1.5, None),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn strategy_names_round_trip() {
        for s in Strategy::ALL {
            assert_eq!(s.name().parse::<Strategy>().unwrap(), s);
        }
        assert!(matches!("bogus".parse::<Strategy>(), Err(Error::Config(_))));
    }

    #[test]
    fn difficulty_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.tsv");
        let s = difficulty_degree(&[0.1, 0.7, 0.30000000000000004], 0.5).unwrap();
        write_difficulty(&path, &s).unwrap();
        assert_eq!(read_difficulty(&path).unwrap(), s);
        let probs = Tensor::new(vec![2, 2], vec![0.1, 0.9, 1.0 / 3.0, 2.0 / 3.0]).unwrap();
        let pp = dir.path().join("p.tsv");
        write_probabilities(&pp, &probs).unwrap();
        assert_eq!(read_probabilities(&pp, 2).unwrap(), probs);
    }
}
