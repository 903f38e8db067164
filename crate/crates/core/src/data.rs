//! Synthetic sentence-pair task with an injected shortcut marker.
//!
//! The gold label is 1 exactly when the hypothesis occurs as a contiguous
//! run inside the premise. A class-marker token is appended to every
//! hypothesis; it names the gold class with probability `rho` and the other
//! class otherwise. Examples whose marker disagrees with the label are the
//! hard ones.
//!
//! Split files hold one example per line, tab-separated:
//!
//! ```text
//! premise_ids <TAB> hypothesis_ids <TAB> label <TAB> marker <TAB> hard
//! ```
//!
//! Ids are comma-separated, `marker` is a class index or `-`, and `hard` is
//! `0` or `1`.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Batch;

pub const PAD: usize = 0;
pub const CLS: usize = 1;
pub const SEP: usize = 2;
const MARKER_BASE: usize = 3;

/// Token id of the shortcut marker implying `class`.
pub fn marker_token(class: usize) -> usize {
    MARKER_BASE + class
}

/// First id available for content tokens.
pub fn first_content_token(num_classes: usize) -> usize {
    MARKER_BASE + num_classes
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabeledPairExample {
    pub premise: Vec<usize>,
    pub hypothesis: Vec<usize>,
    pub label: usize,
    /// Class implied by the appended marker, if any.
    pub marker: Option<usize>,
    pub hard: bool,
}

impl LabeledPairExample {
    /// `[CLS] premise [SEP] hypothesis [marker] [SEP]`
    pub fn to_sequence(&self) -> Vec<usize> {
        let mut seq = Vec::with_capacity(self.premise.len() + self.hypothesis.len() + 4);
        seq.push(CLS);
        seq.extend_from_slice(&self.premise);
        seq.push(SEP);
        seq.extend_from_slice(&self.hypothesis);
        if let Some(m) = self.marker {
            seq.push(marker_token(m));
        }
        seq.push(SEP);
        seq
    }

    pub fn seq_len(&self) -> usize {
        self.premise.len() + self.hypothesis.len() + 3 + usize::from(self.marker.is_some())
    }
}

/// Builds a padded model batch from examples.
pub fn encode_batch(examples: &[&LabeledPairExample]) -> Result<Batch> {
    let seqs: Vec<Vec<usize>> = examples.iter().map(|e| e.to_sequence()).collect();
    Batch::from_sequences(&seqs, PAD)
}

/// The semantic rule: does `hypothesis` occur contiguously in `premise`?
pub fn is_contiguous_subsequence(premise: &[usize], hypothesis: &[usize]) -> bool {
    !hypothesis.is_empty()
        && hypothesis.len() <= premise.len()
        && premise.windows(hypothesis.len()).any(|w| w == hypothesis)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskRule {
    ContiguousSubsequence,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    /// Set by the caller, never read from config files.
    #[serde(skip)]
    pub seed: u64,
    pub train_size: usize,
    pub dev_size: usize,
    pub adversarial_size: usize,
    /// Probability that the marker names the gold class in train and dev.
    pub shortcut_correlation: f64,
    /// Same probability for the adversarial split.
    pub adversarial_correlation: f64,
    /// Inclusive premise length range.
    pub premise_len: [usize; 2],
    /// Inclusive hypothesis length range.
    pub hypothesis_len: [usize; 2],
    pub vocab_size: usize,
    /// Number of distinct content tokens actually used.
    pub content_vocab: usize,
    pub num_classes: usize,
    /// Share of negatives built by substituting one token of a premise
    /// window; the rest draw every hypothesis token from outside the premise.
    pub substitution_fraction: f64,
    pub rule: TaskRule,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            train_size: 20_000,
            dev_size: 4_000,
            adversarial_size: 4_000,
            shortcut_correlation: 0.9,
            adversarial_correlation: 0.0,
            premise_len: [5, 8],
            hypothesis_len: [2, 3],
            vocab_size: 64,
            content_vocab: 12,
            num_classes: 2,
            substitution_fraction: 0.5,
            rule: TaskRule::ContiguousSubsequence,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::Generation(format!("{name} must lie in [0, 1], got {v}")))
            }
        };
        unit("shortcut_correlation", self.shortcut_correlation)?;
        unit("adversarial_correlation", self.adversarial_correlation)?;
        unit("substitution_fraction", self.substitution_fraction)?;
        if self.num_classes != 2 {
            return Err(Error::Generation(format!(
                "the contiguous-subsequence rule is binary; num_classes = {}",
                self.num_classes
            )));
        }
        let [pmin, pmax] = self.premise_len;
        let [hmin, hmax] = self.hypothesis_len;
        if pmin == 0 || pmin > pmax || hmin == 0 || hmin > hmax {
            return Err(Error::Generation("length ranges must be nonempty and positive".into()));
        }
        if hmax > pmin {
            return Err(Error::Generation(format!(
                "hypotheses up to {hmax} tokens cannot always be cut from premises of {pmin}"
            )));
        }
        if self.content_vocab <= pmax {
            return Err(Error::Generation(format!(
                "content vocabulary of {} leaves no token outside a {pmax}-token premise",
                self.content_vocab
            )));
        }
        if first_content_token(self.num_classes) + self.content_vocab > self.vocab_size {
            return Err(Error::Generation(format!(
                "{} content tokens plus reserved ids exceed vocab_size {}",
                self.content_vocab, self.vocab_size
            )));
        }
        Ok(())
    }

    /// Longest encoded sequence this spec can produce.
    pub fn max_sequence_len(&self) -> usize {
        self.premise_len[1] + self.hypothesis_len[1] + 4
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: Vec<LabeledPairExample>,
    pub dev: Vec<LabeledPairExample>,
    pub adversarial: Vec<LabeledPairExample>,
}

/// Generates all three splits. Each split draws from its own stream of a
/// generator seeded by `spec.seed`, so the output is a pure function of the
/// spec.
pub fn generate(spec: &DatasetSpec) -> Result<Splits> {
    spec.validate()?;
    Ok(Splits {
        train: generate_split(spec, 0, spec.train_size, spec.shortcut_correlation),
        dev: generate_split(spec, 1, spec.dev_size, spec.shortcut_correlation),
        adversarial: generate_split(spec, 2, spec.adversarial_size, spec.adversarial_correlation),
    })
}

fn generate_split(spec: &DatasetSpec, stream: u64, n: usize, rho: f64) -> Vec<LabeledPairExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(stream);
    let mut labels: Vec<usize> = (0..n).map(|i| i % spec.num_classes).collect();
    labels.shuffle(&mut rng);
    labels
        .into_iter()
        .map(|label| sample_example(spec, &mut rng, label, rho))
        .collect()
}

fn sample_example(spec: &DatasetSpec, rng: &mut ChaCha8Rng, label: usize, rho: f64) -> LabeledPairExample {
    let first = first_content_token(spec.num_classes);
    let content: Vec<usize> = (first..first + spec.content_vocab).collect();
    let [pmin, pmax] = spec.premise_len;
    let [hmin, hmax] = spec.hypothesis_len;
    let (premise, hypothesis) = loop {
        let plen = rng.gen_range(pmin..=pmax);
        let premise: Vec<usize> = (0..plen).map(|_| content[rng.gen_range(0..content.len())]).collect();
        let hlen = rng.gen_range(hmin..=hmax);
        let start = rng.gen_range(0..=plen - hlen);
        let mut hyp = premise[start..start + hlen].to_vec();
        if label == 0 {
            let absent: Vec<usize> = content.iter().copied().filter(|t| !premise.contains(t)).collect();
            if rng.gen_bool(spec.substitution_fraction) {
                let at = rng.gen_range(0..hlen);
                hyp[at] = absent[rng.gen_range(0..absent.len())];
            } else {
                for tok in hyp.iter_mut() {
                    *tok = absent[rng.gen_range(0..absent.len())];
                }
            }
        }
        if is_contiguous_subsequence(&premise, &hyp) == (label == 1) {
            break (premise, hyp);
        }
    };
    let marker = if rng.gen_bool(rho) { label } else { 1 - label };
    LabeledPairExample {
        premise,
        hypothesis,
        label,
        marker: Some(marker),
        hard: marker != label,
    }
}

fn join_ids(ids: &[usize]) -> String {
    ids.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

pub fn write_split(path: &Path, examples: &[LabeledPairExample]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut w = BufWriter::new(fs::File::create(path)?);
    for e in examples {
        let marker = e.marker.map_or_else(|| "-".to_string(), |m| m.to_string());
        writeln!(
            w,
            "{}\t{}\t{}\t{}\t{}",
            join_ids(&e.premise),
            join_ids(&e.hypothesis),
            e.label,
            marker,
            u8::from(e.hard)
        )?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_split(path: &Path, num_classes: usize) -> Result<Vec<LabeledPairExample>> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let reader = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        out.push(parse_record(&line?, num_classes).map_err(|message| Error::Parse { line: i + 1, message })?);
    }
    Ok(out)
}

fn parse_record(line: &str, num_classes: usize) -> std::result::Result<LabeledPairExample, String> {
    let fields: Vec<&str> = line.split('\t').collect();
    if fields.len() != 5 {
        return Err(format!("expected 5 tab-separated fields, found {}", fields.len()));
    }
    let ids = |s: &str, what: &str| -> std::result::Result<Vec<usize>, String> {
        if s.is_empty() {
            return Err(format!("empty {what}"));
        }
        s.split(',')
            .map(|t| t.parse().map_err(|_| format!("bad token id {t:?} in {what}")))
            .collect()
    };
    let class = |s: &str, what: &str| -> std::result::Result<usize, String> {
        let v: usize = s.parse().map_err(|_| format!("bad {what} {s:?}"))?;
        if v >= num_classes {
            return Err(format!("{what} {v} outside [0, {num_classes})"));
        }
        Ok(v)
    };
    let premise = ids(fields[0], "premise")?;
    let hypothesis = ids(fields[1], "hypothesis")?;
    let label = class(fields[2], "label")?;
    let marker = match fields[3] {
        "-" => None,
        s => Some(class(s, "marker")?),
    };
    let hard = match fields[4] {
        "0" => false,
        "1" => true,
        s => return Err(format!("bad hard flag {s:?}")),
    };
    if hard != (marker != Some(label)) {
        return Err("hard flag disagrees with marker and label".into());
    }
    Ok(LabeledPairExample {
        premise,
        hypothesis,
        label,
        marker,
        hard,
    })
}

/// Indices of easy and hard examples.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Partition {
    pub easy: Vec<usize>,
    pub hard: Vec<usize>,
}

impl Partition {
    pub fn len(&self) -> usize {
        self.easy.len() + self.hard.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Per-sample hard flags over `0..len`.
    pub fn hard_flags(&self) -> Vec<bool> {
        let mut flags = vec![false; self.len()];
        for &i in &self.hard {
            flags[i] = true;
        }
        flags
    }

    pub fn from_flags(hard: &[bool]) -> Self {
        let mut p = Self::default();
        for (i, &h) in hard.iter().enumerate() {
            if h {
                p.hard.push(i);
            } else {
                p.easy.push(i);
            }
        }
        p
    }
}

/// Splits examples by their ground-truth hard flag.
pub fn partition_by_flag(examples: &[LabeledPairExample]) -> Partition {
    Partition::from_flags(&examples.iter().map(|e| e.hard).collect::<Vec<_>>())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(n: usize, rho: f64) -> DatasetSpec {
        DatasetSpec {
            train_size: n,
            dev_size: n,
            adversarial_size: n,
            shortcut_correlation: rho,
            ..DatasetSpec::default()
        }
    }

    #[test]
    fn rule_examples() {
        assert!(is_contiguous_subsequence(&[5, 6, 7, 8], &[6, 7]));
        assert!(!is_contiguous_subsequence(&[5, 6, 7, 8], &[6, 8]));
        assert!(!is_contiguous_subsequence(&[5, 6], &[5, 6, 7]));
    }

    #[test]
    fn labels_follow_rule_and_ignore_marker() {
        let s = generate(&spec(2000, 0.9)).unwrap();
        for e in s.train.iter().chain(&s.dev).chain(&s.adversarial) {
            assert_eq!(
                usize::from(is_contiguous_subsequence(&e.premise, &e.hypothesis)),
                e.label
            );
            assert_eq!(e.hard, e.marker != Some(e.label));
            let max = first_content_token(2) + 12;
            assert!(e
                .premise
                .iter()
                .chain(&e.hypothesis)
                .all(|&t| t >= first_content_token(2) && t < max));
        }
    }

    #[test]
    fn splits_are_exactly_balanced() {
        let s = generate(&spec(1001, 0.9)).unwrap();
        for split in [&s.train, &s.dev, &s.adversarial] {
            let ones = split.iter().filter(|e| e.label == 1).count();
            assert!((ones as f64 / split.len() as f64 - 0.5).abs() < 0.02);
        }
    }

    #[test]
    fn full_correlation_means_all_easy() {
        let s = generate(&spec(500, 1.0)).unwrap();
        assert!(s.train.iter().chain(&s.dev).all(|e| !e.hard));
        assert!(s.adversarial.iter().all(|e| e.hard));
    }

    #[test]
    fn generation_is_pure() {
        assert_eq!(generate(&spec(300, 0.9)).unwrap(), generate(&spec(300, 0.9)).unwrap());
        let other = DatasetSpec {
            seed: 1,
            ..spec(300, 0.9)
        };
        assert_ne!(
            generate(&spec(300, 0.9)).unwrap().train,
            generate(&other).unwrap().train
        );
    }

    #[test]
    fn infeasible_specs_rejected() {
        let bad = DatasetSpec {
            content_vocab: 8,
            ..DatasetSpec::default()
        };
        assert!(matches!(generate(&bad), Err(Error::Generation(_))));
        let bad = DatasetSpec {
            hypothesis_len: [2, 6],
            ..DatasetSpec::default()
        };
        assert!(matches!(generate(&bad), Err(Error::Generation(_))));
        let bad = DatasetSpec {
            content_vocab: 60,
            ..DatasetSpec::default()
        };
        assert!(matches!(generate(&bad), Err(Error::Generation(_))));
    }

    #[test]
    fn partition_is_exhaustive() {
        let s = generate(&spec(400, 0.9)).unwrap();
        let p = partition_by_flag(&s.dev);
        assert_eq!(p.len(), s.dev.len());
        assert!(p.hard.iter().all(|&i| s.dev[i].hard));
        assert!(p.easy.iter().all(|&i| !s.dev[i].hard));
        let all_easy = generate(&spec(100, 1.0)).unwrap();
        assert!(partition_by_flag(&all_easy.dev).hard.is_empty());
    }

    #[test]
    fn read_rejects_bad_label_with_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.tsv");
        fs::write(&path, "5,6\t6\t1\t1\t0\n5,6\t6\t2\t1\t1\n").unwrap();
        match read_split(&path, 2) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn empty_split_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.tsv");
        write_split(&path, &[]).unwrap();
        assert_eq!(fs::read(&path).unwrap().len(), 0);
        assert!(read_split(&path, 2).unwrap().is_empty());
    }
}
