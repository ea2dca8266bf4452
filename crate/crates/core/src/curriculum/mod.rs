//! Teacher/student curriculum: the teacher scores stacked student minibatches
//! by how far the student's predictions are from its own and trains the
//! student on the hardest samples only.

mod run;
mod stack;
mod teacher;

pub use run::{metric_columns, run_curriculum, CurriculumConfig, CurriculumRun};
pub use stack::{
    distance_cross_entropy, distance_euclidean, hardest_indices, make_targets, Metric, PassLedger, StackEntry,
    TargetMode, TeacherStack,
};
pub use teacher::{dataset_accuracy, predict_probs, train_teacher, Teacher, TeacherConfig, TeacherRun};
