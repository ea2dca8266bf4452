use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::dataio::{Dataset, Shard};
use crate::error::{Error, Result};
use crate::harness::metrics::{MetricsTable, Summary};
use crate::harness::seeds::stream;
use crate::numcore::{softmax_with_temperature, Activation, Mlp, Optimizer, OptimizerKind};

use super::stack::{make_targets, Metric, PassLedger, TargetMode, TeacherStack};
use super::teacher::{dataset_accuracy, Teacher};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CurriculumConfig {
    pub metric: Metric,
    pub target_mode: TargetMode,
    /// Minibatches held by the teacher stack.
    pub stack_n: usize,
    pub batch_m: usize,
    /// Epochs of `ceil(N / batch_m)` updates without a better validation accuracy.
    pub patience: u64,
    pub seed: u64,
    /// Updates between validation checks.
    pub eval_every: u64,
    /// Temperature applied to teacher soft labels.
    pub soft_temperature: f64,
    pub hidden: Vec<usize>,
    pub optimizer: OptimizerKind,
    /// Validation accuracy whose first crossing is reported as `backward_passes_to_target`.
    pub target_valid_acc: f64,
    /// Hard cap on student updates.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_updates: Option<u64>,
}

impl Default for CurriculumConfig {
    fn default() -> Self {
        CurriculumConfig {
            metric: Metric::Random,
            target_mode: TargetMode::TrueLabels,
            stack_n: 1,
            batch_m: 32,
            patience: 20,
            seed: 0,
            eval_every: 100,
            soft_temperature: 1.0,
            hidden: vec![32, 32],
            optimizer: OptimizerKind::adam(),
            target_valid_acc: 0.96,
            max_updates: None,
        }
    }
}

impl CurriculumConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stack_n == 0 {
            return Err(Error::config("stack_n", "must be at least 1"));
        }
        if self.batch_m == 0 {
            return Err(Error::config("batch_m", "must be at least 1"));
        }
        if self.patience == 0 {
            return Err(Error::config("patience", "must be at least 1"));
        }
        if self.eval_every == 0 {
            return Err(Error::config("eval_every", "must be at least 1"));
        }
        if !(self.soft_temperature > 0.0) || !self.soft_temperature.is_finite() {
            return Err(Error::config("soft_temperature", "must be positive"));
        }
        if self.hidden.contains(&0) {
            return Err(Error::config("hidden", "layer widths must be positive"));
        }
        if !(0.0..=1.0).contains(&self.target_valid_acc) {
            return Err(Error::config("target_valid_acc", "must lie in [0, 1]"));
        }
        if self.max_updates == Some(0) {
            return Err(Error::config("max_updates", "must be at least 1"));
        }
        Ok(())
    }

    /// Whether the run reads teacher predictions at all.
    pub fn needs_teacher(&self) -> bool {
        self.metric.needs_teacher() || self.target_mode == TargetMode::SoftLabels
    }

    pub fn run_id(&self) -> String {
        format!(
            "curriculum-{}-{}-n{}-s{}",
            self.metric.as_str(),
            self.target_mode.as_str(),
            self.stack_n,
            self.seed
        )
    }
}

#[derive(Debug)]
pub struct CurriculumRun {
    pub metrics: MetricsTable,
    pub summary: Summary,
    pub ledger: PassLedger,
    pub updates: u64,
    /// Student parameters at the best validation accuracy.
    pub student: Mlp<f32>,
    pub best_valid_acc: f64,
    pub test_acc_at_best: f64,
    /// Student backward passes (samples) when validation first reached the target.
    pub backward_passes_to_target: Option<u64>,
}

pub fn metric_columns() -> Vec<String> {
    vec!["backward_passes".into(), "valid_acc".into(), "test_acc_at_best".into()]
}

/// Trains a student through the teacher stack until validation stops improving.
///
/// Each update fills the stack with `stack_n` fresh minibatches (the student
/// predicts on all of them), lets the teacher keep the `batch_m` hardest
/// samples and takes one optimizer step on those. Backward passes in the
/// metrics are counted in samples.
pub fn run_curriculum(
    cfg: &CurriculumConfig,
    teacher: Option<&Teacher>,
    train: &Dataset,
    valid: &Dataset,
    test: &Dataset,
) -> Result<CurriculumRun> {
    cfg.validate()?;
    if train.is_empty() || valid.is_empty() || test.is_empty() {
        return Err(Error::data("curriculum needs non-empty train, validation and test sets"));
    }
    let teacher = match (cfg.needs_teacher(), teacher) {
        (true, None) => {
            return Err(Error::config(
                "metric",
                format!(
                    "{} with {} needs a trained teacher",
                    cfg.metric.as_str(),
                    cfg.target_mode.as_str()
                ),
            ))
        }
        (true, Some(t)) if t.rows() != train.len() => {
            return Err(Error::shape("teacher cache does not cover the training set"));
        }
        (true, Some(t)) => Some(t),
        (false, _) => None,
    };

    let mut dims = vec![train.dim()];
    dims.extend(&cfg.hidden);
    dims.push(train.classes());
    let mut student = Mlp::new(&dims, Activation::Relu, Activation::Identity, 0.0, &mut stream(cfg.seed, "curriculum/init"))?;
    let mut opt = Optimizer::new(cfg.optimizer);
    let mut data_rng = stream(cfg.seed, "curriculum/data");
    let mut select_rng = stream(cfg.seed, "curriculum/select");
    let mut train_rng = stream(cfg.seed, "curriculum/train");
    let mut shard = Shard::new(0, (0..train.len()).collect());
    let mut stack = TeacherStack::new(cfg.stack_n, cfg.batch_m, cfg.metric)?;
    let mut ledger = PassLedger::default();

    let patience_updates = cfg.patience * train.len().div_ceil(cfg.batch_m) as u64;
    let mut metrics = MetricsTable::new(cfg.run_id(), "update_index", metric_columns());
    let start = Instant::now();
    let mut best: Option<(f64, f64, u64, Mlp<f32>)> = None;
    let mut to_target = None;
    let mut updates = 0u64;

    loop {
        while !stack.is_full() {
            let idx = shard.next_batch(cfg.batch_m, &mut data_rng);
            let (x, y) = train.batch(&idx);
            let q = softmax_with_temperature(&student.predict(&x)?, 1.0)?;
            ledger.student_forward_passes += idx.len() as u64;
            let p = teacher.map(|t| t.probs_for(&idx));
            stack.push(&idx, &y, &q, p.as_ref(), &mut ledger)?;
        }
        let selected = stack.select_hardest(&mut select_rng)?;
        let targets = make_targets(&selected, cfg.target_mode, cfg.soft_temperature, train.classes())?;
        let rows: Vec<usize> = selected.iter().map(|e| e.index).collect();
        let (x, _) = train.batch(&rows);
        student.train_step(&mut opt, &x, &mut train_rng, |tape, tr| {
            tape.softmax_cross_entropy(tr.output, targets.into_data(), 1.0)
        })?;
        ledger.student_backward_passes += rows.len() as u64;
        updates += 1;

        let capped = cfg.max_updates.is_some_and(|m| updates >= m);
        if updates.is_multiple_of(cfg.eval_every) || capped {
            let valid_acc = dataset_accuracy(&student, valid)?;
            if best.as_ref().is_none_or(|b| valid_acc > b.0) {
                let test_acc = dataset_accuracy(&student, test)?;
                best = Some((valid_acc, test_acc, updates, student.clone()));
            }
            if to_target.is_none() && valid_acc >= cfg.target_valid_acc {
                to_target = Some(ledger.student_backward_passes);
            }
            let test_at_best = best.as_ref().map_or(0.0, |b| b.1);
            metrics.push(
                updates,
                vec![ledger.student_backward_passes as f64, valid_acc, test_at_best],
                start.elapsed().as_secs_f64(),
            )?;
        }
        let stale = best.as_ref().is_some_and(|b| updates - b.2 >= patience_updates);
        if capped || stale {
            break;
        }
    }

    let (best_valid_acc, test_acc_at_best, _, best_student) = best.expect("evaluated at least once");
    let mut summary = Summary::peak_of(&metrics, "valid_acc");
    summary.add("test_acc", test_acc_at_best);
    summary.add(
        "backward_passes_to_target",
        to_target.map_or_else(String::new, |b| b.to_string()),
    );
    summary.add("updates", updates);
    summary.add("student_forward_passes", ledger.student_forward_passes);
    summary.add("student_backward_passes", ledger.student_backward_passes);
    summary.add("teacher_forward_passes", ledger.teacher_forward_passes);
    Ok(CurriculumRun {
        metrics,
        summary,
        ledger,
        updates,
        student: best_student,
        best_valid_acc,
        test_acc_at_best,
        backward_passes_to_target: to_target,
    })
}
