use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{Tensor, LOG_EPS};

/// How the teacher scores a sample; `Random` ignores scores.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    CrossEntropy,
    Euclidean,
    #[default]
    Random,
}

impl Metric {
    pub fn as_str(self) -> &'static str {
        match self {
            Metric::CrossEntropy => "cross_entropy",
            Metric::Euclidean => "euclidean",
            Metric::Random => "random",
        }
    }

    /// Score of a (teacher, student) pair; always zero for `Random`.
    pub fn score(self, p: &[f64], q: &[f64]) -> Result<f64> {
        match self {
            Metric::CrossEntropy => distance_cross_entropy(p, q),
            Metric::Euclidean => distance_euclidean(p, q),
            Metric::Random => Ok(0.0),
        }
    }

    pub fn needs_teacher(self) -> bool {
        self != Metric::Random
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetMode {
    #[default]
    TrueLabels,
    SoftLabels,
}

impl TargetMode {
    pub fn as_str(self) -> &'static str {
        match self {
            TargetMode::TrueLabels => "true_labels",
            TargetMode::SoftLabels => "soft_labels",
        }
    }
}

fn same_len(p: &[f64], q: &[f64]) -> Result<()> {
    if p.len() != q.len() || p.is_empty() {
        return Err(Error::shape(format!("distributions of {} and {} classes", p.len(), q.len())));
    }
    Ok(())
}

/// `-sum P(y) ln(Q(y) + eps)`; higher means harder for the student.
pub fn distance_cross_entropy(p: &[f64], q: &[f64]) -> Result<f64> {
    same_len(p, q)?;
    Ok(-p.iter().zip(q).map(|(a, b)| a * (b + LOG_EPS).ln()).sum::<f64>())
}

pub fn distance_euclidean(p: &[f64], q: &[f64]) -> Result<f64> {
    same_len(p, q)?;
    Ok(p.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
}

/// Forward/backward work done on behalf of the student, counted in samples.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct PassLedger {
    pub student_forward_passes: u64,
    pub student_backward_passes: u64,
    pub teacher_forward_passes: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StackEntry {
    /// Row of the training set.
    pub index: usize,
    pub label: usize,
    pub teacher: Option<Vec<f64>>,
    pub student: Vec<f64>,
    pub score: f64,
}

/// Up to `n` student minibatches of `m` samples awaiting the teacher's choice.
#[derive(Clone, Debug)]
pub struct TeacherStack {
    n: usize,
    m: usize,
    metric: Metric,
    entries: Vec<StackEntry>,
}

impl TeacherStack {
    pub fn new(n: usize, m: usize, metric: Metric) -> Result<Self> {
        if n == 0 || m == 0 {
            return Err(Error::invalid("teacher stack needs n >= 1 and m >= 1"));
        }
        Ok(TeacherStack {
            n,
            m,
            metric,
            entries: Vec::with_capacity(n * m),
        })
    }

    pub fn entries(&self) -> &[StackEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.entries.len() == self.n * self.m
    }

    /// Adds one minibatch with the student's and (optionally) the teacher's distributions.
    ///
    /// Teacher rows count as `m` teacher forward passes.
    pub fn push(
        &mut self,
        indices: &[usize],
        labels: &[usize],
        student: &Tensor<f32>,
        teacher: Option<&Tensor<f32>>,
        ledger: &mut PassLedger,
    ) -> Result<()> {
        if self.is_full() {
            return Err(Error::invalid("teacher stack is already full"));
        }
        if indices.len() != self.m || labels.len() != self.m || student.rows() != self.m {
            return Err(Error::shape(format!("a stack minibatch must hold exactly {} samples", self.m)));
        }
        if let Some(t) = teacher {
            if t.rows() != self.m || t.cols() != student.cols() {
                return Err(Error::shape("teacher predictions do not match the minibatch"));
            }
        } else if self.metric.needs_teacher() {
            return Err(Error::invalid(format!("metric {} needs teacher predictions", self.metric.as_str())));
        }
        let mut batch = Vec::with_capacity(self.m);
        for i in 0..self.m {
            let q: Vec<f64> = student.row(i).iter().map(|&v| v as f64).collect();
            let p: Option<Vec<f64>> = teacher.map(|t| t.row(i).iter().map(|&v| v as f64).collect());
            let score = match &p {
                Some(p) => self.metric.score(p, &q)?,
                None => 0.0,
            };
            batch.push(StackEntry {
                index: indices[i],
                label: labels[i],
                teacher: p,
                student: q,
                score,
            });
        }
        self.entries.extend(batch);
        if teacher.is_some() {
            ledger.teacher_forward_passes += self.m as u64;
        }
        Ok(())
    }

    /// Takes the `m` highest-scoring entries and empties the stack.
    ///
    /// Ties go to the earlier entry. Under `Random` the choice is uniform and
    /// the chosen entries keep their insertion order.
    pub fn select_hardest<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<Vec<StackEntry>> {
        if !self.is_full() {
            return Err(Error::invalid(format!(
                "teacher stack holds {} of {} samples",
                self.entries.len(),
                self.n * self.m
            )));
        }
        let mut entries = std::mem::take(&mut self.entries);
        let order: Vec<usize> = match self.metric {
            Metric::Random => {
                let mut pick = sample(rng, entries.len(), self.m).into_vec();
                pick.sort_unstable();
                pick
            }
            _ => hardest_indices(&entries.iter().map(|e| e.score).collect::<Vec<_>>(), self.m),
        };
        let mut slots: Vec<Option<StackEntry>> = entries.drain(..).map(Some).collect();
        Ok(order.into_iter().map(|i| slots[i].take().unwrap()).collect())
    }
}

/// Positions of the `m` largest scores, largest first, earlier first on ties.
pub fn hardest_indices(scores: &[f64], m: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    idx.truncate(m);
    idx
}

/// Training targets for the selected samples.
///
/// Soft labels are the teacher's distribution sharpened or flattened by
/// `tau`, i.e. `softmax(ln P / tau)`; `tau = 1` returns `P` itself.
pub fn make_targets(selected: &[StackEntry], mode: TargetMode, tau: f64, classes: usize) -> Result<Tensor<f32>> {
    if selected.is_empty() {
        return Err(Error::invalid("no samples selected"));
    }
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::invalid("soft-label temperature must be positive"));
    }
    let mut data = Vec::with_capacity(selected.len() * classes);
    for e in selected {
        match mode {
            TargetMode::TrueLabels => {
                if e.label >= classes {
                    return Err(Error::shape(format!("label {} outside {classes} classes", e.label)));
                }
                data.extend((0..classes).map(|c| if c == e.label { 1.0 } else { 0.0 }));
            }
            TargetMode::SoftLabels => {
                let p = e
                    .teacher
                    .as_ref()
                    .ok_or_else(|| Error::invalid("soft labels need teacher predictions"))?;
                if p.len() != classes {
                    return Err(Error::shape("teacher distribution has the wrong class count"));
                }
                if tau == 1.0 {
                    data.extend(p.iter().map(|&v| v as f32));
                } else {
                    let powed: Vec<f64> = p.iter().map(|v| v.powf(1.0 / tau)).collect();
                    let s: f64 = powed.iter().sum();
                    if !(s > 0.0) || !s.is_finite() {
                        return Err(Error::NonFinite("soft-label normalizer".into()));
                    }
                    data.extend(powed.iter().map(|v| (v / s) as f32));
                }
            }
        }
    }
    Tensor::matrix(selected.len(), classes, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn cross_entropy_values() {
        assert_abs_diff_eq!(distance_cross_entropy(&[0.0, 1.0], &[0.0, 1.0]).unwrap(), 0.0, epsilon = 1e-11);
        let q = [0.1, 0.6, 0.3];
        assert_abs_diff_eq!(distance_cross_entropy(&[0.0, 0.0, 1.0], &q).unwrap(), -(0.3f64.ln()), epsilon = 1e-10);
        let expected = 0.7 * -(0.4f64.ln()) + 0.3 * -(0.6f64.ln());
        let got = distance_cross_entropy(&[0.7, 0.3], &[0.4, 0.6]).unwrap();
        assert_abs_diff_eq!(got, expected, epsilon = 1e-10);
        assert_abs_diff_eq!(got, 0.7946, epsilon = 1e-4);
        assert!(distance_cross_entropy(&[1.0], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn cross_entropy_is_not_symmetric() {
        let (p, q) = ([0.9, 0.1], [0.5, 0.5]);
        let a = distance_cross_entropy(&p, &q).unwrap();
        let b = distance_cross_entropy(&q, &p).unwrap();
        assert!((a - b).abs() > 0.1);
    }

    #[test]
    fn euclidean_values() {
        assert_eq!(distance_euclidean(&[0.2, 0.8], &[0.2, 0.8]).unwrap(), 0.0);
        assert_abs_diff_eq!(distance_euclidean(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 2f64.sqrt(), epsilon = 1e-15);
        assert!(distance_euclidean(&[], &[]).is_err());
    }

    fn dist(rows: usize, c: usize, seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut data = Vec::new();
        for _ in 0..rows {
            let v: Vec<f32> = (0..c).map(|_| rng.random_range(0.01f32..1.0)).collect();
            let s: f32 = v.iter().sum();
            data.extend(v.iter().map(|x| x / s));
        }
        Tensor::matrix(rows, c, data).unwrap()
    }

    #[test]
    fn push_accounting_and_errors() {
        let mut ledger = PassLedger::default();
        let mut st = TeacherStack::new(2, 4, Metric::CrossEntropy).unwrap();
        let q = dist(4, 3, 1);
        assert!(st.push(&[0, 1, 2, 3], &[0; 4], &q, None, &mut ledger).is_err());
        st.push(&[0, 1, 2, 3], &[0; 4], &q, Some(&q), &mut ledger).unwrap();
        assert_eq!((st.len(), ledger.teacher_forward_passes), (4, 4));
        // identical rows score zero up to the log clamp
        assert!(st.entries().iter().all(|e| e.score >= 0.0));
        let mut e = TeacherStack::new(2, 4, Metric::Euclidean).unwrap();
        e.push(&[0, 1, 2, 3], &[0; 4], &q, Some(&q), &mut ledger).unwrap();
        assert!(e.entries().iter().all(|e| e.score == 0.0));
        assert!(st.select_hardest(&mut ChaCha8Rng::seed_from_u64(0)).is_err());
        st.push(&[4, 5, 6, 7], &[0; 4], &q, Some(&dist(4, 3, 2)), &mut ledger).unwrap();
        assert!(st.is_full());
        assert!(st.push(&[8, 9, 10, 11], &[0; 4], &q, Some(&q), &mut ledger).is_err());
        assert!(st.push(&[1], &[0], &q, Some(&q), &mut ledger).is_err());
        let sel = st.select_hardest(&mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(sel.len(), 4);
        assert!(st.is_empty());
    }

    #[test]
    fn single_minibatch_returns_itself() {
        for metric in [Metric::CrossEntropy, Metric::Euclidean, Metric::Random] {
            let mut st = TeacherStack::new(1, 5, metric).unwrap();
            let q = dist(5, 4, 3);
            let p = dist(5, 4, 4);
            st.push(&[10, 11, 12, 13, 14], &[0; 5], &q, Some(&p), &mut PassLedger::default()).unwrap();
            let mut got: Vec<usize> = st
                .select_hardest(&mut ChaCha8Rng::seed_from_u64(9))
                .unwrap()
                .iter()
                .map(|e| e.index)
                .collect();
            if metric == Metric::Random {
                assert_eq!(got, vec![10, 11, 12, 13, 14]);
            }
            got.sort_unstable();
            assert_eq!(got, vec![10, 11, 12, 13, 14]);
        }
    }

    #[test]
    fn ties_prefer_earlier_entries() {
        assert_eq!(hardest_indices(&[1.0, 2.0, 2.0, 1.0, 2.0], 2), vec![1, 2]);
        assert_eq!(hardest_indices(&[0.0; 4], 3), vec![0, 1, 2]);
    }

    #[test]
    fn targets_by_mode() {
        let mut st = TeacherStack::new(2, 3, Metric::CrossEntropy).unwrap();
        let mut ledger = PassLedger::default();
        for k in 0..2 {
            st.push(&[3 * k, 3 * k + 1, 3 * k + 2], &[0, 1, 2], &dist(3, 3, k as u64), Some(&dist(3, 3, 10 + k as u64)), &mut ledger)
                .unwrap();
        }
        let sel = st.select_hardest(&mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let hard = make_targets(&sel, TargetMode::TrueLabels, 1.0, 3).unwrap();
        for (row, e) in hard.iter_rows().zip(&sel) {
            assert_eq!(argmax_f32(row), e.label);
            assert_eq!(row.iter().sum::<f32>(), 1.0);
        }
        let soft = make_targets(&sel, TargetMode::SoftLabels, 1.0, 3).unwrap();
        for (row, e) in soft.iter_rows().zip(&sel) {
            let p = e.teacher.as_ref().unwrap();
            assert!(row.iter().zip(p).all(|(a, b)| *a == *b as f32));
            assert_abs_diff_eq!(row.iter().sum::<f32>(), 1.0, epsilon = 1e-5);
        }
        let sharp = make_targets(&sel, TargetMode::SoftLabels, 0.5, 3).unwrap();
        for (row, e) in sharp.iter_rows().zip(&sel) {
            let p = e.teacher.as_ref().unwrap();
            let z: f64 = p.iter().map(|v| v.ln() / 0.5).map(f64::exp).sum();
            for (a, b) in row.iter().zip(p) {
                assert_abs_diff_eq!(*a as f64, (b.ln() / 0.5).exp() / z, epsilon = 1e-6);
            }
        }
        assert!(make_targets(&[], TargetMode::TrueLabels, 1.0, 3).is_err());
    }

    fn argmax_f32(r: &[f32]) -> usize {
        crate::numcore::argmax(r)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn selection_matches_sort_oracle(
            n in 1usize..=10,
            m in 1usize..=64,
            seed in any::<u64>(),
            coarse in any::<bool>(),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            // coarse scores force many ties
            let scores: Vec<f64> = (0..n * m)
                .map(|_| if coarse { rng.random_range(0..4) as f64 } else { rng.random::<f64>() })
                .collect();
            let got = hardest_indices(&scores, m);
            let mut oracle: Vec<(f64, usize)> = scores.iter().copied().zip(0..).collect();
            let mut sorted = Vec::new();
            while !oracle.is_empty() {
                let mut best = 0;
                for k in 1..oracle.len() {
                    if oracle[k].0 > oracle[best].0 {
                        best = k;
                    }
                }
                sorted.push(oracle.remove(best).1);
            }
            sorted.truncate(m);
            prop_assert_eq!(got, sorted);
        }

        #[test]
        fn euclidean_matches_loop_and_is_symmetric(seed in any::<u64>(), c in 1usize..12) {
            let p = dist(1, c, seed);
            let q = dist(1, c, seed ^ 0xabc);
            let p: Vec<f64> = p.row(0).iter().map(|&v| v as f64).collect();
            let q: Vec<f64> = q.row(0).iter().map(|&v| v as f64).collect();
            let mut acc = 0.0;
            for i in 0..c {
                acc += (p[i] - q[i]).powi(2);
            }
            prop_assert!((distance_euclidean(&p, &q).unwrap() - acc.sqrt()).abs() < 1e-9);
            prop_assert_eq!(distance_euclidean(&p, &q).unwrap(), distance_euclidean(&q, &p).unwrap());
        }

        #[test]
        fn stored_scores_are_fresh(seed in any::<u64>()) {
            for metric in [Metric::CrossEntropy, Metric::Euclidean] {
                let mut st = TeacherStack::new(1, 8, metric).unwrap();
                let (q, p) = (dist(8, 5, seed), dist(8, 5, seed.wrapping_add(1)));
                st.push(&(0..8).collect::<Vec<_>>(), &[0; 8], &q, Some(&p), &mut PassLedger::default()).unwrap();
                for e in st.entries() {
                    let again = metric.score(e.teacher.as_ref().unwrap(), &e.student).unwrap();
                    prop_assert!((e.score - again).abs() <= 1e-9);
                }
            }
        }

        #[test]
        fn target_mode_never_changes_selection(seed in any::<u64>(), n in 1usize..5) {
            let mut a = TeacherStack::new(n, 6, Metric::CrossEntropy).unwrap();
            let mut ledger = PassLedger::default();
            for k in 0..n {
                let s = seed.wrapping_add(k as u64);
                a.push(&(6 * k..6 * k + 6).collect::<Vec<_>>(), &[1; 6], &dist(6, 4, s), Some(&dist(6, 4, !s)), &mut ledger).unwrap();
            }
            let mut b = a.clone();
            let sa = a.select_hardest(&mut ChaCha8Rng::seed_from_u64(1)).unwrap();
            let sb = b.select_hardest(&mut ChaCha8Rng::seed_from_u64(1)).unwrap();
            let ta = make_targets(&sa, TargetMode::TrueLabels, 1.0, 4).unwrap();
            let tb = make_targets(&sb, TargetMode::SoftLabels, 1.0, 4).unwrap();
            prop_assert_ne!(ta, tb);
            prop_assert_eq!(
                sa.iter().map(|e| e.index).collect::<Vec<_>>(),
                sb.iter().map(|e| e.index).collect::<Vec<_>>()
            );
        }
    }
}
