//! Evaluation: accuracy, teacher–student behavior similarity, calibration,
//! and the variance/bias decomposition of a mixed distillation target.
//!
//! Everything here is read-only and computed in `f64` from network logits.

use std::fmt;

use crate::data::{Dataset, DatasetSplit};
use crate::nn::{Network, NnError};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricsError {
    #[error("{rows} rows of predictions for {labels} labels")]
    LabelCount { rows: usize, labels: usize },
    #[error("class count mismatch: {0} vs {1}")]
    ClassMismatch(usize, usize),
    #[error("empty split")]
    Empty,
    #[error("mixing weights ({0}, {1}) must be non-negative and sum to 1")]
    Mixing(f64, f64),
    #[error("mixing weight {0} needs a {1} model")]
    MissingModel(f64, &'static str),
    #[error("bin count must be positive")]
    Bins,
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, MetricsError>;

/// Fraction of rows whose argmax (lowest index on ties) equals the label.
pub fn top1_accuracy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let pred = logits.argmax_rows()?;
    if pred.len() != labels.len() {
        return Err(MetricsError::LabelCount { rows: pred.len(), labels: labels.len() });
    }
    if pred.is_empty() {
        return Err(MetricsError::Empty);
    }
    let hits = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

pub fn model_accuracy(net: &Network, split: &DatasetSplit) -> Result<f64> {
    top1_accuracy(&net.logits(&split.inputs)?, &split.labels)
}

/// Row-wise `log softmax(z / τ)` in f64.
pub fn log_softmax_rows(logits: &[f32], k: usize, tau: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks_exact(k) {
        let z: Vec<f64> = row.iter().map(|&v| v as f64 / tau).collect();
        let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        out.extend(z.iter().map(|v| v - lse));
    }
    out
}

/// Row-wise softmax probabilities of a network's logits, in f64.
pub fn probabilities(net: &Network, inputs: &Tensor) -> Result<Vec<f64>> {
    let logits = net.logits(inputs)?;
    let k = net.spec().num_classes;
    Ok(log_softmax_rows(logits.data(), k, 1.0).into_iter().map(f64::exp).collect())
}

/// Per-row `KL(σ(target) ‖ σ(learner))` at τ = 1, no τ² factor.
pub fn per_sample_kl(target_logits: &Tensor, learner_logits: &Tensor) -> Result<Vec<f64>> {
    let (_, k) = target_logits.dims2("per_sample_kl")?;
    let (_, kl) = learner_logits.dims2("per_sample_kl")?;
    if k != kl {
        return Err(MetricsError::ClassMismatch(k, kl));
    }
    if target_logits.shape() != learner_logits.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "per_sample_kl",
            left: target_logits.shape().to_vec(),
            right: learner_logits.shape().to_vec(),
        }
        .into());
    }
    let lp = log_softmax_rows(target_logits.data(), k, 1.0);
    let lq = log_softmax_rows(learner_logits.data(), k, 1.0);
    Ok(lp
        .chunks_exact(k)
        .zip(lq.chunks_exact(k))
        .map(|(p, q)| p.iter().zip(q).map(|(a, b)| a.exp() * (a - b)).sum::<f64>().max(0.0))
        .collect())
}

/// Mean teacher→student KL over a split.
pub fn mean_kl(teacher: &Network, student: &Network, split: &DatasetSplit) -> Result<f64> {
    let (kt, ks) = (teacher.spec().num_classes, student.spec().num_classes);
    if kt != ks {
        return Err(MetricsError::ClassMismatch(kt, ks));
    }
    let kl = per_sample_kl(&teacher.logits(&split.inputs)?, &student.logits(&split.inputs)?)?;
    Ok(kl.iter().sum::<f64>() / kl.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityReport {
    pub kl_train: f64,
    pub kl_test: f64,
    pub dataset_id: String,
}

impl SimilarityReport {
    pub const COLUMNS: [&'static str; 3] = ["dataset", "kl_train", "kl_test"];
}

/// Mean `KL(σ(z_T) ‖ σ(z_S))` on both splits; lower means the student
/// mimics the teacher more closely.
pub fn behavior_similarity(teacher: &Network, student: &Network, data: &Dataset) -> Result<SimilarityReport> {
    Ok(SimilarityReport {
        kl_train: mean_kl(teacher, student, &data.train)?,
        kl_test: mean_kl(teacher, student, &data.test)?,
        dataset_id: data.id.clone(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibrationBin {
    pub confidence_mean: f64,
    pub accuracy: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationReport {
    pub ece: f64,
    pub bins: Vec<CalibrationBin>,
}

impl CalibrationReport {
    pub fn bin_count(&self) -> usize {
        self.bins.len()
    }
}

pub const ECE_BINS: usize = 15;

/// Expected calibration error over `bins` equal-width confidence bins. Bin
/// `b` covers `(b/B, (b+1)/B]`; a confidence of exactly 0 falls in bin 0.
pub fn expected_calibration_error<P: Copy + Into<f64>>(
    probs: &[P],
    num_classes: usize,
    labels: &[usize],
    bins: usize,
) -> Result<CalibrationReport> {
    if bins == 0 {
        return Err(MetricsError::Bins);
    }
    let rows = probs.len() / num_classes.max(1);
    if rows != labels.len() {
        return Err(MetricsError::LabelCount { rows, labels: labels.len() });
    }
    if rows == 0 {
        return Err(MetricsError::Empty);
    }
    let mut conf_sum = vec![0.0f64; bins];
    let mut hits = vec![0usize; bins];
    let mut count = vec![0usize; bins];
    for (row, &label) in probs.chunks_exact(num_classes).zip(labels) {
        let mut best = 0;
        let mut conf: f64 = row[0].into();
        for (j, &p) in row.iter().enumerate().skip(1) {
            let p: f64 = p.into();
            if p > conf {
                best = j;
                conf = p;
            }
        }
        let b = ((conf * bins as f64).ceil() as usize).saturating_sub(1).min(bins - 1);
        conf_sum[b] += conf;
        count[b] += 1;
        hits[b] += usize::from(best == label);
    }
    let n = rows as f64;
    let mut ece = 0.0;
    let bins = (0..bins)
        .map(|b| {
            if count[b] == 0 {
                return CalibrationBin { confidence_mean: 0.0, accuracy: 0.0, count: 0 };
            }
            let c = count[b] as f64;
            let bin = CalibrationBin { confidence_mean: conf_sum[b] / c, accuracy: hits[b] as f64 / c, count: count[b] };
            ece += c / n * (bin.accuracy - bin.confidence_mean).abs();
            bin
        })
        .collect();
    Ok(CalibrationReport { ece, bins })
}

pub fn model_ece(net: &Network, split: &DatasetSplit, bins: usize) -> Result<CalibrationReport> {
    let probs = probabilities(net, &split.inputs)?;
    expected_calibration_error(&probs, net.spec().num_classes, &split.labels, bins)
}

/// Convex weights `(w_T, w_A)` combining teacher and anchor outputs into a
/// single distillation target.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mixing {
    pub teacher: f64,
    pub anchor: f64,
}

impl Mixing {
    pub fn new(teacher: f64, anchor: f64) -> Result<Self> {
        if !(teacher >= 0.0 && anchor >= 0.0 && ((teacher + anchor) - 1.0).abs() <= 1e-9) {
            return Err(MetricsError::Mixing(teacher, anchor));
        }
        Ok(Self { teacher, anchor })
    }

    pub const TEACHER_ONLY: Mixing = Mixing { teacher: 1.0, anchor: 0.0 };
    pub const ANCHOR_ONLY: Mixing = Mixing { teacher: 0.0, anchor: 1.0 };
}

impl fmt::Display for Mixing {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.teacher, self.anchor)
    }
}

/// `w_T·f_T + w_A·f_A` over probability rows; a role with zero weight may
/// be absent.
pub fn mixed_target(teacher: Option<&[f64]>, anchor: Option<&[f64]>, mixing: Mixing) -> Result<Vec<f64>> {
    let mut parts: Vec<(f64, &[f64])> = Vec::with_capacity(2);
    for (w, p, role) in [(mixing.teacher, teacher, "teacher"), (mixing.anchor, anchor, "anchor")] {
        if w == 0.0 {
            continue;
        }
        parts.push((w, p.ok_or(MetricsError::MissingModel(w, role))?));
    }
    let len = parts.first().map_or(0, |(_, p)| p.len());
    let mut out = vec![0.0; len];
    for (w, p) in parts {
        out.iter_mut().zip(p).for_each(|(o, v)| *o += w * v);
    }
    Ok(out)
}

/// `Σ (x − mean)² / n`.
pub fn population_variance(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(MetricsError::Empty);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    Ok(values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n)
}

/// Per-sample `KL(target ‖ σ(z_S))` for probability-row targets.
pub fn per_sample_target_kl(target: &[f64], student_log_probs: &[f64], k: usize) -> Vec<f64> {
    target
        .chunks_exact(k)
        .zip(student_log_probs.chunks_exact(k))
        .map(|(p, lq)| {
            p.iter()
                .zip(lq)
                .filter(|(p, _)| **p > 0.0)
                .map(|(p, lq)| p * (p.ln() - lq))
                .sum::<f64>()
                .max(0.0)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BiasTerm {
    Value(f64),
    /// The dataset carries no true posterior.
    Unavailable,
}

impl fmt::Display for BiasTerm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BiasTerm::Value(v) => write!(f, "{v}"),
            BiasTerm::Unavailable => f.write_str("unavailable"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VarianceBiasReport {
    pub loss_variance: f64,
    pub bias_term: BiasTerm,
    pub mixing: Mixing,
}

/// Population variance, over the split, of the student's per-sample loss
/// against the mixed teacher/anchor target.
pub fn loss_variance(
    student: &Network,
    teacher: Option<&Network>,
    anchor: Option<&Network>,
    split: &DatasetSplit,
    mixing: Mixing,
) -> Result<f64> {
    if split.is_empty() {
        return Err(MetricsError::Empty);
    }
    let k = student.spec().num_classes;
    let target = role_target(teacher, anchor, split, mixing)?;
    let lq = log_softmax_rows(student.logits(&split.inputs)?.data(), k, 1.0);
    population_variance(&per_sample_target_kl(&target, &lq, k))
}

fn role_target(teacher: Option<&Network>, anchor: Option<&Network>, split: &DatasetSplit, mixing: Mixing) -> Result<Vec<f64>> {
    let probs = |net: Option<&Network>, w: f64| -> Result<Option<Vec<f64>>> {
        match net {
            Some(n) if w != 0.0 => Ok(Some(probabilities(n, &split.inputs)?)),
            _ => Ok(None),
        }
    };
    let t = probs(teacher, mixing.teacher)?;
    let a = probs(anchor, mixing.anchor)?;
    mixed_target(t.as_deref(), a.as_deref(), mixing)
}

/// Mean Euclidean distance between two sets of probability rows.
pub fn mean_l2_distance(a: &[f64], b: &[f64], k: usize) -> Result<f64> {
    if a.is_empty() {
        return Err(MetricsError::Empty);
    }
    let rows = a.len() / k;
    let total: f64 = a
        .chunks_exact(k)
        .zip(b.chunks_exact(k))
        .map(|(x, y)| x.iter().zip(y).map(|(u, v)| (u - v) * (u - v)).sum::<f64>().sqrt())
        .sum();
    Ok(total / rows as f64)
}

/// Mean `‖w_T·f_T + w_A·f_A − f_R‖₂` against the true posterior `f_R`.
pub fn bias_term(teacher: Option<&Network>, anchor: Option<&Network>, split: &DatasetSplit, mixing: Mixing) -> Result<BiasTerm> {
    let Some(posterior) = &split.posterior else {
        return Ok(BiasTerm::Unavailable);
    };
    let target = role_target(teacher, anchor, split, mixing)?;
    Ok(BiasTerm::Value(mean_l2_distance(&target, posterior, split.num_classes)?))
}

/// One row of the per-epoch experiment log.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Effective `w1..w6`; edges absent from the wiring read 0.
    pub weights: [f32; 6],
    /// Sample-weighted epoch means in `LossBreakdown` column order.
    pub losses: [f64; 8],
    pub train_acc_student: f64,
    pub test_acc_student: f64,
    /// NaN when the wiring has no teacher.
    pub train_acc_teacher: f64,
    pub test_acc_teacher: f64,
    pub kl_ts_test: f64,
}

impl MetricsRecord {
    pub const COLUMNS: [&'static str; 21] = [
        "epoch",
        "lr",
        "w1",
        "w2",
        "w3",
        "w4",
        "w5",
        "w6",
        "ce_student",
        "kl_teacher_to_student",
        "kl_anchor_to_student",
        "ce_teacher",
        "kl_student_to_teacher",
        "kl_anchor_to_teacher",
        "total_student",
        "total_teacher",
        "train_acc_student",
        "test_acc_student",
        "train_acc_teacher",
        "test_acc_teacher",
        "kl_ts_test",
    ];

    pub fn csv_fields(&self) -> Vec<String> {
        let mut row = vec![self.epoch.to_string(), self.lr.to_string()];
        row.extend(self.weights.iter().map(f32::to_string));
        row.extend(self.losses.iter().map(f64::to_string));
        row.extend(
            [self.train_acc_student, self.test_acc_student, self.train_acc_teacher, self.test_acc_teacher, self.kl_ts_test]
                .iter()
                .map(f64::to_string),
        );
        row
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::from_vec(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn accuracy_by_hand() {
        assert_eq!(top1_accuracy(&t(&[2, 2], &[2., 1., 0., 3.]), &[0, 1]).unwrap(), 1.0);
        assert_eq!(top1_accuracy(&t(&[3, 4], &[0.5; 12]), &[0, 0, 0]).unwrap(), 1.0);
        assert!(top1_accuracy(&t(&[2, 2], &[0.0; 4]), &[0]).is_err());
    }

    #[test]
    fn accuracy_at_chance() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let n = 10_000;
        let logits: Vec<f32> = (0..n * 10).map(|_| rng.random::<f32>()).collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..10)).collect();
        let acc = top1_accuracy(&t(&[n, 10], &logits), &labels).unwrap();
        assert!((acc - 0.1).abs() < 0.02, "{acc}");
    }

    #[test]
    fn ece_by_hand() {
        let perfect = [1.0f64, 0.0, 0.0, 1.0];
        assert_eq!(expected_calibration_error(&perfect, 2, &[0, 1], ECE_BINS).unwrap().ece, 0.0);
        // ten rows at confidence 0.9, half of them right
        let probs: Vec<f64> = (0..10).flat_map(|_| [0.9, 0.1]).collect();
        let labels: Vec<usize> = (0..10).map(|i| i % 2).collect();
        let r = expected_calibration_error(&probs, 2, &labels, ECE_BINS).unwrap();
        assert!((r.ece - 0.4).abs() < 1e-12);
        assert_eq!(r.bin_count(), 15);
        assert_eq!(r.bins.iter().map(|b| b.count).sum::<usize>(), 10);
    }

    #[test]
    fn kl_zero_for_identical_logits() {
        let z = t(&[2, 3], &[1., 2., 3., -1., 0., 5.]);
        assert!(per_sample_kl(&z, &z).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn variance_by_hand() {
        assert_eq!(population_variance(&[0.5; 7]).unwrap(), 0.0);
        assert_eq!(population_variance(&[0.0, 2.0]).unwrap(), 1.0);
        assert!(population_variance(&[]).is_err());
    }

    #[test]
    fn bias_of_uniform_against_one_hot() {
        let k = 2;
        let uniform = vec![0.5; 2 * k];
        let onehot = vec![1.0, 0.0, 0.0, 1.0];
        let mixed = mixed_target(None, Some(&uniform), Mixing::ANCHOR_ONLY).unwrap();
        let b = mean_l2_distance(&mixed, &onehot, k).unwrap();
        assert!((b - 0.707107).abs() < 1e-6);
        let kf = 5.0f64;
        let closed = ((1.0 - 1.0 / kf).powi(2) + (kf - 1.0) / (kf * kf)).sqrt();
        let mut u5 = vec![0.2; 5];
        let mut oh5 = vec![0.0; 5];
        oh5[3] = 1.0;
        u5 = mixed_target(None, Some(&u5), Mixing::ANCHOR_ONLY).unwrap();
        assert!((mean_l2_distance(&u5, &oh5, 5).unwrap() - closed).abs() < 1e-12);
    }

    #[test]
    fn mixing_validation() {
        assert!(Mixing::new(0.3, 0.7).is_ok());
        assert!(Mixing::new(0.3, 0.3).is_err());
        assert!(Mixing::new(-0.5, 1.5).is_err());
        assert!(matches!(
            mixed_target(None, Some(&[0.5, 0.5]), Mixing::new(0.5, 0.5).unwrap()),
            Err(MetricsError::MissingModel(..))
        ));
    }

    #[test]
    fn metrics_header_has_fixed_schema() {
        let h = MetricsRecord::COLUMNS;
        assert_eq!(MetricsRecord { epoch: 0, lr: 0.1, weights: [1.0; 6], losses: [0.0; 8], train_acc_student: 0.5,
            test_acc_student: 0.5, train_acc_teacher: f64::NAN, test_acc_teacher: f64::NAN, kl_ts_test: f64::NAN }
            .csv_fields().len(), h.len());
        assert_eq!(h[0], "epoch");
        assert_eq!(h[20], "kl_ts_test");
    }

    fn prob_rows(k: usize, n: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.01f64..1.0, n * k).prop_map(move |mut v| {
            for row in v.chunks_mut(k) {
                let s: f64 = row.iter().sum();
                row.iter_mut().for_each(|x| *x /= s);
            }
            v
        })
    }

    proptest! {
        #[test]
        fn ece_is_permutation_invariant(probs in prob_rows(3, 20), labels in prop::collection::vec(0usize..3, 20), seed in 0u64..1000) {
            let base = expected_calibration_error(&probs, 3, &labels, ECE_BINS).unwrap().ece;
            let mut order: Vec<usize> = (0..20).collect();
            use rand::seq::SliceRandom;
            order.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let p2: Vec<f64> = order.iter().flat_map(|&i| probs[i * 3..i * 3 + 3].to_vec()).collect();
            let l2: Vec<usize> = order.iter().map(|&i| labels[i]).collect();
            let shuffled = expected_calibration_error(&p2, 3, &l2, ECE_BINS).unwrap().ece;
            prop_assert!((base - shuffled).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&base));
        }

        #[test]
        fn variance_order_invariant_and_quadratic(values in prop::collection::vec(0.0f64..5.0, 1..40), c in 0.1f64..10.0) {
            let v = population_variance(&values).unwrap();
            let mut rev = values.clone();
            rev.reverse();
            prop_assert!((v - population_variance(&rev).unwrap()).abs() <= 1e-9 * (1.0 + v));
            let scaled: Vec<f64> = values.iter().map(|x| x * c).collect();
            prop_assert!((population_variance(&scaled).unwrap() - c * c * v).abs() <= 1e-9 * (1.0 + c * c * v));
        }

        #[test]
        fn bias_triangle_bound(t in prob_rows(4, 10), a in prob_rows(4, 10), r in prob_rows(4, 10), wt in 0.0f64..=1.0) {
            let mix = Mixing::new(wt, 1.0 - wt).unwrap();
            let both = mean_l2_distance(&mixed_target(Some(&t), Some(&a), mix).unwrap(), &r, 4).unwrap();
            let bt = mean_l2_distance(&t, &r, 4).unwrap();
            let ba = mean_l2_distance(&a, &r, 4).unwrap();
            prop_assert!(both <= wt * bt + (1.0 - wt) * ba + 1e-6);
        }
    }
}
