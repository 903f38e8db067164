//! The end-to-end experiment: data, teacher, difficulty snapshots,
//! compressed students, mitigation, evaluation and sparsity sweeps.
//!
//! All artifacts of one run live under `<out>/seed-<N>/`:
//!
//! ```text
//! data/{train,dev,adversarial}.tsv
//! teacher.rmck
//! teacher_probs.tsv             teacher probabilities on train
//! snapshots/sparsity-0.20.rmck  one per snapshot sparsity
//! difficulty.tsv                train-set variance and degree
//! difficulty_dev.tsv            dev-set variance and degree
//! students/<student>-<strategy>.rmck
//! reports/*.json, reports/*.csv
//! ```
//!
//! Checkpoints carry the config hash and run seed; loading one produced
//! under a different config is an error.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::{derive_seed, ExperimentConfig, Family};
use crate::data::{generate, partition_by_flag, read_split, write_split, DatasetSpec, LabeledPairExample, Splits};
use crate::distill::{
    difficulty_degree, per_sample_loss_matrix, read_difficulty, read_probabilities, teacher_probabilities,
    train_student, variance_scores, write_difficulty, write_probabilities, DifficultyScores, Strategy, StudentInputs,
    StudentTraining,
};
use crate::error::{Error, Result};
use crate::eval::{csv_rows, difficulty_agreement, evaluate, partition_by_variance, write_csv, EvalReport};
use crate::model::{load_checkpoint, save_checkpoint, truncate_student, ModelConfig, TransformerClassifier};
use crate::pruning::{head_importance, magnitude_prune_finetune, structured_prune, PruneSchedule};
use crate::train::{fine_tune, Objective};

const PROBE_SIZE: usize = 2000;

/// A compressed student architecture.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum StudentSpec {
    Magnitude(f64),
    Heads(usize),
    Truncate(usize),
}

impl StudentSpec {
    pub fn label(&self) -> String {
        match self {
            StudentSpec::Magnitude(s) => format!("magnitude-{s:.2}"),
            StudentSpec::Heads(n) => format!("heads-{n}"),
            StudentSpec::Truncate(l) => format!("truncate-{l}"),
        }
    }
}

/// Paths, seeds and config for one run seed.
#[derive(Clone, Debug)]
pub struct RunContext {
    pub config: ExperimentConfig,
    pub seed: u64,
    pub root: PathBuf,
    hash: String,
}

/// Outputs of the difficulty-estimation stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DifficultyReport {
    pub config_hash: String,
    pub seed: u64,
    pub snapshot_sparsities: Vec<f64>,
    pub alpha: f64,
    /// Agreement of the variance-ranked dev partition with construction flags.
    pub dev_agreement: f64,
    pub dev_hard: usize,
    pub dev_size: usize,
    pub train_mean_degree_easy: f64,
    pub train_mean_degree_hard: f64,
}

/// One row of a sparsity sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub sparsity: f64,
    pub strategy: Strategy,
    pub dev_accuracy: f64,
    pub adversarial_accuracy: f64,
    /// `None` when the teacher's accuracy gap is zero.
    pub relative_bias: Option<f64>,
    pub easy_hard_gap: f64,
}

impl RunContext {
    pub fn new(config: ExperimentConfig, seed: u64, out: &Path) -> Result<Self> {
        config.validate()?;
        let hash = config.hash();
        Ok(Self {
            config,
            seed,
            root: out.join(format!("seed-{seed}")),
            hash,
        })
    }

    pub fn config_hash(&self) -> &str {
        &self.hash
    }

    pub fn dataset_spec(&self) -> DatasetSpec {
        DatasetSpec {
            seed: derive_seed(self.seed, "data"),
            ..self.config.data.clone()
        }
    }

    /// Architecture and initialization shared by the teacher and every
    /// student.
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            seed: derive_seed(self.seed, "model"),
            ..self.config.model
        }
    }

    pub fn split_path(&self, name: &str) -> PathBuf {
        self.root.join("data").join(format!("{name}.tsv"))
    }

    pub fn teacher_path(&self) -> PathBuf {
        self.root.join("teacher.rmck")
    }

    pub fn teacher_probs_path(&self) -> PathBuf {
        self.root.join("teacher_probs.tsv")
    }

    pub fn snapshot_path(&self, sparsity: f64) -> PathBuf {
        self.root.join("snapshots").join(format!("sparsity-{sparsity:.2}.rmck"))
    }

    pub fn difficulty_path(&self) -> PathBuf {
        self.root.join("difficulty.tsv")
    }

    pub fn dev_difficulty_path(&self) -> PathBuf {
        self.root.join("difficulty_dev.tsv")
    }

    pub fn student_path(&self, spec: StudentSpec, strategy: Strategy) -> PathBuf {
        self.root
            .join("students")
            .join(format!("{}-{strategy}.rmck", spec.label()))
    }

    pub fn report_path(&self, name: &str, ext: &str) -> PathBuf {
        self.root.join("reports").join(format!("{name}.{ext}"))
    }

    /// The configured compressed student.
    pub fn configured_student(&self) -> StudentSpec {
        let c = &self.config.compression;
        match c.family {
            Family::Magnitude => StudentSpec::Magnitude(c.sparsity),
            Family::Heads => StudentSpec::Heads(c.heads_to_prune),
            Family::Truncate => StudentSpec::Truncate(c.student_layers),
        }
    }

    fn metadata(&self, role: &str) -> Vec<(String, String)> {
        vec![
            ("config_hash".into(), self.hash.clone()),
            ("seed".into(), self.seed.to_string()),
            ("role".into(), role.into()),
        ]
    }

    pub fn save_model(&self, path: &Path, model: &TransformerClassifier, role: &str) -> Result<()> {
        save_checkpoint(path, model, &self.metadata(role))
    }

    /// Loads a checkpoint, refusing ones built under another config or seed.
    pub fn load_model(&self, path: &Path) -> Result<TransformerClassifier> {
        let ck = load_checkpoint(path)?;
        if ck.meta("config_hash") != Some(self.hash.as_str()) || ck.meta("seed") != Some(self.seed.to_string().as_str())
        {
            return Err(Error::ConfigMismatch {
                path: path.to_path_buf(),
            });
        }
        Ok(ck.model)
    }

    fn cached_model(&self, path: &Path) -> Option<TransformerClassifier> {
        self.load_model(path).ok()
    }

    pub fn load_splits(&self) -> Result<Splits> {
        let k = self.config.data.num_classes;
        Ok(Splits {
            train: read_split(&self.split_path("train"), k)?,
            dev: read_split(&self.split_path("dev"), k)?,
            adversarial: read_split(&self.split_path("adversarial"), k)?,
        })
    }

    pub fn load_teacher(&self) -> Result<TransformerClassifier> {
        self.load_model(&self.teacher_path())
    }

    fn fresh_model(&self) -> Result<TransformerClassifier> {
        TransformerClassifier::new(self.model_config())
    }

    fn student_seed(&self) -> u64 {
        derive_seed(self.seed, "student")
    }

    fn evaluate_model(&self, name: &str, model: &TransformerClassifier, splits: &Splits) -> Result<EvalReport> {
        let partition = partition_by_flag(&splits.dev);
        let mut r = evaluate(
            name,
            model,
            &splits.dev,
            &[("adversarial", splits.adversarial.as_slice())],
            &partition,
        )?;
        r.config_hash = self.hash.clone();
        r.seeds = vec![self.seed];
        Ok(r)
    }

    fn write_report(&self, name: &str, report: &EvalReport) -> Result<()> {
        write_text(&self.report_path(name, "json"), &report.to_json()?)?;
        write_csv(&self.report_path(name, "csv"), &csv_rows(report))
    }

    fn teacher_report(&self, teacher: &TransformerClassifier, splits: &Splits) -> Result<EvalReport> {
        self.evaluate_model("teacher", teacher, splits)
    }

    /// Snapshot models at every configured sparsity, trained on demand.
    pub fn snapshots(&self, train: &[LabeledPairExample]) -> Result<Vec<TransformerClassifier>> {
        let mut out = Vec::new();
        for &s in &self.config.compression.snapshot_sparsities {
            let path = self.snapshot_path(s);
            let model = match self.cached_model(&path) {
                Some(m) => m,
                None => {
                    let m = self.train_magnitude(train, s, Strategy::Vanilla, StudentInputs::default())?;
                    self.save_model(&path, &m, "snapshot")?;
                    m
                }
            };
            out.push(model);
        }
        Ok(out)
    }

    fn train_magnitude(
        &self,
        train: &[LabeledPairExample],
        sparsity: f64,
        strategy: Strategy,
        inputs: StudentInputs<'_>,
    ) -> Result<TransformerClassifier> {
        let mut m = self.fresh_model()?;
        if strategy == Strategy::Vanilla {
            let schedule = PruneSchedule::new(sparsity, self.config.train.total_steps(train.len()))?;
            magnitude_prune_finetune(
                &mut m,
                train,
                &schedule,
                Objective::CrossEntropy,
                &self.config.train,
                self.student_seed(),
            )?;
        } else {
            let teacher = self.load_teacher()?;
            train_student(
                strategy,
                &teacher,
                &mut m,
                train,
                inputs,
                StudentTraining::MagnitudePrune(sparsity),
                &self.config.distill,
                &self.config.train,
                self.student_seed(),
            )?;
        }
        Ok(m)
    }

    /// Trains one compressed student with a mitigation strategy. Every
    /// student starts from the teacher's initialization, not its trained
    /// weights.
    pub fn train_compressed(
        &self,
        spec: StudentSpec,
        strategy: Strategy,
        splits: &Splits,
    ) -> Result<TransformerClassifier> {
        let teacher = self.load_teacher()?;
        let probs;
        let difficulty;
        let mut inputs = StudentInputs::default();
        if matches!(strategy, Strategy::Distil | Strategy::Smooth | Strategy::Rmc) {
            probs = self.teacher_probs(&teacher, &splits.train)?;
            inputs.teacher_probs = Some(&probs);
        }
        if strategy == Strategy::Rmc {
            difficulty = self.train_difficulty(splits)?;
            inputs.difficulty = Some(&difficulty);
        }
        let train = &splits.train;
        let seed = self.student_seed();
        let (dcfg, tcfg) = (&self.config.distill, &self.config.train);
        match spec {
            StudentSpec::Magnitude(s) => {
                if strategy == Strategy::Vanilla {
                    if let Some(m) = self.cached_model(&self.snapshot_path(s)) {
                        return Ok(m);
                    }
                }
                self.train_magnitude(train, s, strategy, inputs)
            }
            StudentSpec::Truncate(layers) => {
                let mut m = truncate_student(&self.fresh_model()?, layers)?;
                train_student(
                    strategy,
                    &teacher,
                    &mut m,
                    train,
                    inputs,
                    StudentTraining::FineTune,
                    dcfg,
                    tcfg,
                    seed,
                )?;
                Ok(m)
            }
            StudentSpec::Heads(n) => {
                let probe = &train[..train.len().min(PROBE_SIZE)];
                let scores = head_importance(&teacher, probe)?;
                let mut m = self.fresh_model()?;
                structured_prune(&mut m, &scores, n)?;
                train_student(
                    strategy,
                    &teacher,
                    &mut m,
                    train,
                    inputs,
                    StudentTraining::FineTune,
                    dcfg,
                    tcfg,
                    seed,
                )?;
                Ok(m)
            }
        }
    }

    fn teacher_probs(
        &self,
        teacher: &TransformerClassifier,
        train: &[LabeledPairExample],
    ) -> Result<crate::tensor::Tensor> {
        let path = self.teacher_probs_path();
        if path.exists() {
            let p = read_probabilities(&path, self.config.model.num_classes)?;
            if p.shape()[0] == train.len() {
                return Ok(p);
            }
        }
        let p = teacher_probabilities(teacher, train)?;
        write_probabilities(&path, &p)?;
        Ok(p)
    }

    fn train_difficulty(&self, splits: &Splits) -> Result<DifficultyScores> {
        let path = self.difficulty_path();
        if path.exists() {
            let d = read_difficulty(&path)?;
            if d.degrees.len() == splits.train.len() && d.alpha == self.config.distill.alpha {
                return Ok(d);
            }
        }
        Ok(self.stage_one(splits)?.0)
    }

    /// Builds snapshots, scores train and dev difficulty, and measures how
    /// well the dev ranking recovers the construction flags.
    pub fn stage_one(&self, splits: &Splits) -> Result<(DifficultyScores, DifficultyReport)> {
        let snaps = self.snapshots(&splits.train)?;
        let alpha = self.config.distill.alpha;
        let train_v = variance_scores(&per_sample_loss_matrix(&snaps, &splits.train)?)?;
        let train_d = difficulty_degree(&train_v, alpha)?;
        write_difficulty(&self.difficulty_path(), &train_d)?;
        let dev_v = variance_scores(&per_sample_loss_matrix(&snaps, &splits.dev)?)?;
        write_difficulty(&self.dev_difficulty_path(), &difficulty_degree(&dev_v, alpha)?)?;

        let truth = partition_by_flag(&splits.dev);
        let predicted = partition_by_variance(&dev_v, truth.hard.len())?;
        let mean_deg = |hard: bool| {
            let sel: Vec<f64> = splits
                .train
                .iter()
                .zip(&train_d.degrees)
                .filter(|(e, _)| e.hard == hard)
                .map(|(_, &d)| d)
                .collect();
            if sel.is_empty() {
                0.0
            } else {
                sel.iter().sum::<f64>() / sel.len() as f64
            }
        };
        let report = DifficultyReport {
            config_hash: self.hash.clone(),
            seed: self.seed,
            snapshot_sparsities: self.config.compression.snapshot_sparsities.clone(),
            alpha,
            dev_agreement: difficulty_agreement(&predicted, &truth)?,
            dev_hard: truth.hard.len(),
            dev_size: splits.dev.len(),
            train_mean_degree_easy: mean_deg(false),
            train_mean_degree_hard: mean_deg(true),
        };
        write_text(&self.report_path("difficulty", "json"), &to_json(&report)?)?;
        Ok((train_d, report))
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, text)?;
    Ok(())
}

fn to_json<T: Serialize>(value: &T) -> Result<String> {
    serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))
}

/// Generates and writes the three splits.
pub fn cmd_datagen(ctx: &RunContext) -> Result<Vec<PathBuf>> {
    let splits = generate(&ctx.dataset_spec())?;
    let mut written = Vec::new();
    for (name, set) in [
        ("train", &splits.train),
        ("dev", &splits.dev),
        ("adversarial", &splits.adversarial),
    ] {
        let path = ctx.split_path(name);
        write_split(&path, set)?;
        written.push(path);
    }
    Ok(written)
}

/// Fine-tunes the uncompressed teacher and reports on it.
pub fn cmd_train_teacher(ctx: &RunContext) -> Result<EvalReport> {
    let splits = ctx.load_splits()?;
    let mut teacher = ctx.fresh_model()?;
    fine_tune(
        &mut teacher,
        &splits.train,
        &ctx.config.train.for_teacher(),
        Objective::CrossEntropy,
        derive_seed(ctx.seed, "teacher"),
        None,
    )?;
    ctx.save_model(&ctx.teacher_path(), &teacher, "teacher")?;
    let report = ctx.teacher_report(&teacher, &splits)?;
    ctx.write_report("teacher", &report)?;
    Ok(report)
}

/// Builds the difficulty snapshots and scores, then trains the configured
/// compressed student with plain cross-entropy.
pub fn cmd_compress(ctx: &RunContext) -> Result<(EvalReport, DifficultyReport)> {
    let splits = ctx.load_splits()?;
    let teacher = ctx.load_teacher()?;
    let (_, difficulty) = ctx.stage_one(&splits)?;
    teacher_probs_cached(ctx, &teacher, &splits)?;
    let report = student_report(ctx, ctx.configured_student(), Strategy::Vanilla, &splits, &teacher)?;
    Ok((report, difficulty))
}

fn teacher_probs_cached(ctx: &RunContext, teacher: &TransformerClassifier, splits: &Splits) -> Result<()> {
    ctx.teacher_probs(teacher, &splits.train).map(|_| ())
}

/// Trains, saves, evaluates and reports one compressed student.
pub fn student_report(
    ctx: &RunContext,
    spec: StudentSpec,
    strategy: Strategy,
    splits: &Splits,
    teacher: &TransformerClassifier,
) -> Result<EvalReport> {
    let student = ctx.train_compressed(spec, strategy, splits)?;
    let path = ctx.student_path(spec, strategy);
    ctx.save_model(&path, &student, "student")?;
    let name = format!("{}-{strategy}", spec.label());
    let report = ctx
        .evaluate_model(&name, &student, splits)?
        .with_teacher(&ctx.teacher_report(teacher, splits)?)?;
    ctx.write_report(&name, &report)?;
    Ok(report)
}

/// Trains the configured compressed student with `strategy`.
pub fn cmd_mitigate(ctx: &RunContext, strategy: Strategy) -> Result<EvalReport> {
    let splits = ctx.load_splits()?;
    let teacher = ctx.load_teacher()?;
    if strategy == Strategy::Rmc && !ctx.difficulty_path().exists() {
        return Err(Error::MissingArtifact(ctx.difficulty_path()));
    }
    student_report(ctx, ctx.configured_student(), strategy, &splits, &teacher)
}

/// Every checkpoint under the run directory, teacher first, then sorted.
pub fn run_checkpoints(ctx: &RunContext) -> Result<Vec<PathBuf>> {
    let mut out = vec![ctx.teacher_path()];
    for dir in ["snapshots", "students"] {
        let d = ctx.root.join(dir);
        if d.is_dir() {
            let mut found: Vec<PathBuf> = fs::read_dir(&d)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "rmck"))
                .collect();
            found.sort();
            out.extend(found);
        }
    }
    Ok(out)
}

/// Evaluates checkpoints against the teacher and writes one JSON document
/// and one CSV file covering all of them.
pub fn cmd_eval(ctx: &RunContext, checkpoints: &[PathBuf]) -> Result<Vec<EvalReport>> {
    let splits = ctx.load_splits()?;
    let teacher = ctx.load_teacher()?;
    let teacher_report = ctx.teacher_report(&teacher, &splits)?;
    let paths = if checkpoints.is_empty() {
        run_checkpoints(ctx)?
    } else {
        checkpoints.to_vec()
    };
    let mut reports = Vec::new();
    for path in &paths {
        let model = ctx.load_model(path)?;
        let name = path
            .strip_prefix(&ctx.root)
            .unwrap_or(path)
            .with_extension("")
            .to_string_lossy()
            .replace('\\', "/");
        reports.push(
            ctx.evaluate_model(&name, &model, &splits)?
                .with_teacher(&teacher_report)?,
        );
    }
    write_text(&ctx.report_path("eval", "json"), &to_json(&reports)?)?;
    let rows: Vec<_> = reports.iter().flat_map(csv_rows).collect();
    write_csv(&ctx.report_path("eval", "csv"), &rows)?;
    Ok(reports)
}

/// Magnitude-pruned students at every sweep sparsity, trained with
/// `strategy`.
pub fn cmd_sweep(ctx: &RunContext, strategy: Strategy) -> Result<Vec<SweepRow>> {
    let splits = ctx.load_splits()?;
    let teacher = ctx.load_teacher()?;
    let teacher_report = ctx.teacher_report(&teacher, &splits)?;
    let mut rows = Vec::new();
    for &s in &ctx.config.compression.sweep_sparsities {
        let spec = StudentSpec::Magnitude(s);
        let model = ctx.train_compressed(spec, strategy, &splits)?;
        let r = ctx
            .evaluate_model(&format!("{}-{strategy}", spec.label()), &model, &splits)?
            .with_teacher(&teacher_report)?;
        rows.push(SweepRow {
            sparsity: s,
            strategy,
            dev_accuracy: r.dev_accuracy,
            adversarial_accuracy: r.adversarial_accuracy,
            relative_bias: r.relative_bias,
            easy_hard_gap: r.easy_hard_gap,
        });
    }
    write_csv(&ctx.report_path(&format!("sweep-{strategy}"), "csv"), &rows)?;
    write_text(&ctx.report_path(&format!("sweep-{strategy}"), "json"), &to_json(&rows)?)?;
    Ok(rows)
}
