use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{Scalar, Tape, Var, LOG_EPS};

/// Which models receive gradients from the message-likelihood term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CommLevel {
    /// No likelihood term.
    #[default]
    Baseline,
    /// The student fits the teacher's message; the teacher's message is a fixed target.
    #[serde(rename = "receive", alias = "receive_only")]
    ReceiveOnly,
    /// As `ReceiveOnly`, with the student's loss also flowing back into the teacher.
    #[serde(rename = "teacher_feedback", alias = "feedback_to_teacher")]
    FeedbackToTeacher,
    /// Each agent fits the other's message, gradients into both.
    #[serde(rename = "both", alias = "both_feedback")]
    BothFeedback,
}

impl CommLevel {
    pub const ALL: [CommLevel; 4] = [
        CommLevel::Baseline,
        CommLevel::ReceiveOnly,
        CommLevel::FeedbackToTeacher,
        CommLevel::BothFeedback,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            CommLevel::Baseline => "baseline",
            CommLevel::ReceiveOnly => "receive",
            CommLevel::FeedbackToTeacher => "teacher_feedback",
            CommLevel::BothFeedback => "both",
        }
    }

    /// 0.01 for the one-way level, 0.005 for the two-way ones, 0 for the baseline.
    pub fn default_weight(self) -> f64 {
        match self {
            CommLevel::Baseline => 0.0,
            CommLevel::ReceiveOnly => 0.01,
            CommLevel::FeedbackToTeacher | CommLevel::BothFeedback => 0.005,
        }
    }
}

/// Index map of the marginal pairing: row `i` is paired with message `i + 1 mod batch`.
pub fn cyclic_shift(batch: usize) -> Result<Vec<usize>> {
    if batch < 2 {
        return Err(Error::invalid("marginal pairs need a batch of at least 2"));
    }
    Ok((0..batch).map(|i| (i + 1) % batch).collect())
}

/// Discriminator inputs: joint rows `[x_i, s_i]` and marginal rows `[x_i, s_{i+1}]`.
pub fn mi_pairs<T: Scalar>(tape: &mut Tape<'_, T>, x: Var, s: Var) -> Result<(Var, Var)> {
    let (b, _) = tape.shape(x);
    if tape.shape(s).0 != b {
        return Err(Error::shape("observations and messages differ in batch size"));
    }
    let shift = cyclic_shift(b)?;
    let joint = tape.concat_cols(x, s)?;
    let shifted = tape.gather_rows(s, shift)?;
    let marginal = tape.concat_cols(x, shifted)?;
    Ok((joint, marginal))
}

/// `mean ln D(joint) + mean ln(1 - D(marginal))`, both logs clamped away from zero.
///
/// Discriminator and generator both ascend this value.
pub fn mi_value<T: Scalar>(tape: &mut Tape<'_, T>, d_joint: Var, d_marginal: Var) -> Var {
    let lo = T::from_f64_lossy(LOG_EPS);
    let hi = T::one();
    let lj = tape.log_clamped(d_joint, lo, hi);
    let lj = tape.mean(lj);
    let om = tape.one_minus(d_marginal);
    let lm = tape.log_clamped(om, lo, hi);
    let lm = tape.mean(lm);
    tape.add(lj, lm).expect("scalars")
}

/// Plain-number form of [`mi_value`].
pub fn mi_objective(d_joint: &[f64], d_marginal: &[f64]) -> Result<f64> {
    if d_joint.is_empty() || d_marginal.is_empty() {
        return Err(Error::invalid("empty discriminator outputs"));
    }
    let m = |v: &[f64], f: &dyn Fn(f64) -> f64| v.iter().map(|&d| f(d).clamp(LOG_EPS, 1.0).ln()).sum::<f64>() / v.len() as f64;
    Ok(m(d_joint, &|d| d) + m(d_marginal, &|d| 1.0 - d))
}

/// Message-likelihood loss between teacher message `s_a` and student message `s_b`.
///
/// One-way levels use `-Σ_t Σ_v s_a log s_b`, averaged over the batch; the
/// teacher side is detached for `ReceiveOnly`. `BothFeedback` adds the mirrored
/// term with `s_b` as the target.
pub fn likelihood_loss<T: Scalar>(tape: &mut Tape<'_, T>, s_a: Var, s_b: Var, level: CommLevel) -> Result<Var> {
    if tape.shape(s_a) != tape.shape(s_b) {
        return Err(Error::shape(format!(
            "messages of shape {:?} and {:?}",
            tape.shape(s_a),
            tape.shape(s_b)
        )));
    }
    let eps = T::from_f64_lossy(LOG_EPS);
    match level {
        CommLevel::Baseline => Err(Error::invalid("the baseline level has no likelihood term")),
        CommLevel::ReceiveOnly => {
            let target = tape.detach(s_a);
            tape.cross_entropy(target, s_b, eps)
        }
        CommLevel::FeedbackToTeacher => tape.cross_entropy(s_a, s_b, eps),
        CommLevel::BothFeedback => {
            let ab = tape.cross_entropy(s_a, s_b, eps)?;
            let ba = tape.cross_entropy(s_b, s_a, eps)?;
            tape.add(ab, ba)
        }
    }
}
