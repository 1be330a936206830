//! Loss terms of triplet distillation and their scheduled weighting.
//!
//! The student minimises `w1·CE(S) + w2·KL(T‖S) + w3·KL(A‖S)` and the
//! teacher, symmetrically, `w4·CE(T) + w5·KL(S‖T) + w6·KL(A‖T)`. Every KL
//! term is `τ²·KL(σ(z_target/τ) ‖ σ(z_learner/τ))` averaged over the batch,
//! with the target side detached so each objective only moves its own model.
//! Cross-entropy always uses `τ = 1`.

use std::fmt;
use std::str::FromStr;

use crate::nn::{tempered_softmax, NnError};
use crate::tensor::{Tape, Tensor, TensorError, PROB_FLOOR};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DistillError {
    #[error("label {label} at row {row} is outside [0, {classes})")]
    Label {
        row: usize,
        label: usize,
        classes: usize,
    },
    #[error("{labels} labels for a batch of {rows} rows")]
    LabelCount { labels: usize, rows: usize },
    #[error("probability row {row} sums to {sum}, not 1")]
    NotNormalized { row: usize, sum: f32 },
    #[error("{op}: logits shapes {left:?} and {right:?} differ")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("temperature must be positive, got {0}")]
    Temperature(f32),
    #[error("invalid distillation weights: {0}")]
    Weights(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

impl From<NnError> for DistillError {
    fn from(e: NnError) -> Self {
        match e {
            NnError::Temperature(t) => DistillError::Temperature(t),
            NnError::Tensor(t) => DistillError::Tensor(t),
            other => DistillError::Weights(other.to_string()),
        }
    }
}

pub type Result<T> = std::result::Result<T, DistillError>;

/// One of the six loss coefficients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum WeightSlot {
    W1,
    W2,
    W3,
    W4,
    W5,
    W6,
}

impl WeightSlot {
    pub const ALL: [WeightSlot; 6] = [Self::W1, Self::W2, Self::W3, Self::W4, Self::W5, Self::W6];
}

impl fmt::Display for WeightSlot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "w{}", *self as usize + 1)
    }
}

impl FromStr for WeightSlot {
    type Err = DistillError;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|w| w.to_string() == s)
            .ok_or_else(|| DistillError::Weights(format!("unknown weight `{s}`")))
    }
}

/// Weight overrides that take effect once training progress reaches `at`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleStep {
    pub at: f64,
    pub overrides: Vec<(WeightSlot, f32)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistillWeights {
    pub w1: f32,
    pub w2: f32,
    pub w3: f32,
    pub w4: f32,
    pub w5: f32,
    pub w6: f32,
    /// Temperature of every KL term.
    pub tau: f32,
    pub schedule: Vec<ScheduleStep>,
}

impl Default for DistillWeights {
    /// All weights 1 and `τ = 1`; from 62.5% of training on, `w1 = 0.1`
    /// and `w2 = 10`.
    fn default() -> Self {
        Self {
            schedule: vec![ScheduleStep {
                at: 0.625,
                overrides: vec![(WeightSlot::W1, 0.1), (WeightSlot::W2, 10.0)],
            }],
            ..Self::uniform(1.0)
        }
    }
}

impl DistillWeights {
    /// Every weight set to `w`, `τ = 1`, no schedule.
    pub fn uniform(w: f32) -> Self {
        Self {
            w1: w,
            w2: w,
            w3: w,
            w4: w,
            w5: w,
            w6: w,
            tau: 1.0,
            schedule: Vec::new(),
        }
    }

    pub fn get(&self, slot: WeightSlot) -> f32 {
        match slot {
            WeightSlot::W1 => self.w1,
            WeightSlot::W2 => self.w2,
            WeightSlot::W3 => self.w3,
            WeightSlot::W4 => self.w4,
            WeightSlot::W5 => self.w5,
            WeightSlot::W6 => self.w6,
        }
    }

    pub fn set(&mut self, slot: WeightSlot, v: f32) {
        *match slot {
            WeightSlot::W1 => &mut self.w1,
            WeightSlot::W2 => &mut self.w2,
            WeightSlot::W3 => &mut self.w3,
            WeightSlot::W4 => &mut self.w4,
            WeightSlot::W5 => &mut self.w5,
            WeightSlot::W6 => &mut self.w6,
        } = v;
    }

    pub fn as_array(&self) -> [f32; 6] {
        WeightSlot::ALL.map(|s| self.get(s))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DistillError::Weights(m));
        for slot in WeightSlot::ALL {
            let v = self.get(slot);
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{slot} must be a non-negative number, got {v}"));
            }
        }
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(DistillError::Temperature(self.tau));
        }
        let mut prev = f64::NEG_INFINITY;
        for step in &self.schedule {
            if !(0.0..=1.0).contains(&step.at) || step.at <= prev {
                return bad(format!("schedule fractions must be strictly increasing within [0, 1], got {}", step.at));
            }
            prev = step.at;
            for &(slot, v) in &step.overrides {
                if !(v.is_finite() && v >= 0.0) {
                    return bad(format!("schedule override {slot}={v} must be non-negative"));
                }
            }
        }
        Ok(())
    }

    /// Weights in force at `progress ∈ [0, 1]`. Later steps override
    /// earlier ones; the schedule itself is carried along unchanged.
    pub fn apply_schedule(&self, progress: f64) -> DistillWeights {
        let mut out = self.clone();
        for step in self.schedule.iter().filter(|s| progress >= s.at) {
            for &(slot, v) in &step.overrides {
                out.set(slot, v);
            }
        }
        out
    }
}

/// Scalar values of every loss component for one batch.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBreakdown {
    pub ce_student: f32,
    pub kl_teacher_to_student: f32,
    pub kl_anchor_to_student: f32,
    pub ce_teacher: f32,
    pub kl_student_to_teacher: f32,
    pub kl_anchor_to_teacher: f32,
    pub total_student: f32,
    pub total_teacher: f32,
}

impl LossBreakdown {
    pub const COLUMNS: [&'static str; 8] = [
        "ce_student",
        "kl_teacher_to_student",
        "kl_anchor_to_student",
        "ce_teacher",
        "kl_student_to_teacher",
        "kl_anchor_to_teacher",
        "total_student",
        "total_teacher",
    ];

    pub fn as_array(&self) -> [f32; 8] {
        [
            self.ce_student,
            self.kl_teacher_to_student,
            self.kl_anchor_to_student,
            self.ce_teacher,
            self.kl_student_to_teacher,
            self.kl_anchor_to_teacher,
            self.total_student,
            self.total_teacher,
        ]
    }
}

/// A differentiable objective and the values of its parts.
#[derive(Debug, Clone)]
pub struct Objective {
    pub total: Tensor,
    pub breakdown: LossBreakdown,
}

/// Batch mean of `−log p(label)`, with probabilities clamped at
/// [`PROB_FLOOR`] before the log.
pub fn cross_entropy(tape: &Tape, probs: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let (rows, k) = probs.dims2("cross_entropy")?;
    if labels.len() != rows {
        return Err(DistillError::LabelCount { labels: labels.len(), rows });
    }
    let mut onehot = vec![0.0f32; rows * k];
    for (row, &label) in labels.iter().enumerate() {
        if label >= k {
            return Err(DistillError::Label { row, label, classes: k });
        }
        let sum: f32 = probs.row(row).iter().sum();
        if !((sum - 1.0).abs() <= 1e-4) {
            return Err(DistillError::NotNormalized { row, sum });
        }
        onehot[row * k + label] = 1.0;
    }
    let onehot = Tensor::from_vec(vec![rows, k], onehot)?;
    let logp = tape.log(&tape.clamp_min(probs, PROB_FLOOR)?)?;
    let picked = tape.sum(&tape.mul(&onehot, &logp)?)?;
    Ok(tape.scale(&picked, -1.0 / rows as f32)?)
}

/// `τ² · mean_b KL(σ(target/τ) ‖ σ(learner/τ))`. No gradient reaches
/// `target_logits`.
pub fn kl_tempered(tape: &Tape, target_logits: &Tensor, learner_logits: &Tensor, tau: f32) -> Result<Tensor> {
    if target_logits.shape() != learner_logits.shape() {
        return Err(DistillError::Shape {
            op: "kl_tempered",
            left: target_logits.shape().to_vec(),
            right: learner_logits.shape().to_vec(),
        });
    }
    if !(tau > 0.0) {
        return Err(DistillError::Temperature(tau));
    }
    let (rows, k) = learner_logits.dims2("kl_tempered")?;
    let target = tempered_softmax(&Tape::no_grad(), &target_logits.detach(), tau)?;
    let log_target: Vec<f32> = target.data().iter().map(|p| p.max(PROB_FLOOR).ln()).collect();
    let log_target = Tensor::from_vec(vec![rows, k], log_target)?;
    let learner = tempered_softmax(tape, learner_logits, tau)?;
    let log_learner = tape.log(&tape.clamp_min(&learner, PROB_FLOOR)?)?;
    let diff = tape.sub(&log_target, &log_learner)?;
    let kl = tape.sum(&tape.mul(&target, &diff)?)?;
    Ok(tape.scale(&kl, tau * tau / rows as f32)?)
}

/// Weighted sum over the terms with a non-zero weight. Zero-weight terms
/// stay out of the graph, so their gradient contribution is exactly nothing.
fn weighted_total(tape: &Tape, terms: &[(f32, Option<&Tensor>)]) -> Result<Tensor> {
    let mut total: Option<Tensor> = None;
    for &(w, term) in terms {
        let Some(term) = term else { continue };
        if w == 0.0 {
            continue;
        }
        let scaled = tape.scale(term, w)?;
        total = Some(match total {
            None => scaled,
            Some(acc) => tape.add(&acc, &scaled)?,
        });
    }
    Ok(total.unwrap_or_else(|| Tensor::scalar(0.0)))
}

fn value(t: &Tensor) -> Result<f32> {
    Ok(t.item()?)
}

fn kl_value(t: &Option<Tensor>) -> Result<f32> {
    // rounding can leave a KL a few ulps below zero
    Ok(t.as_ref().map(value).transpose()?.unwrap_or(0.0).max(0.0))
}

/// Shared body of the student and teacher objectives: `own` learns from
/// labels, `peer` and `anchor`.
fn role_loss(
    tape: &Tape,
    peer: Option<&Tensor>,
    own: &Tensor,
    anchor: Option<&Tensor>,
    labels: &[usize],
    weights: [f32; 3],
    tau: f32,
) -> Result<(Tensor, [f32; 3])> {
    for other in [peer, anchor].into_iter().flatten() {
        if other.shape() != own.shape() {
            return Err(DistillError::Shape {
                op: "distillation loss",
                left: other.shape().to_vec(),
                right: own.shape().to_vec(),
            });
        }
    }
    // zero-weight terms are never built, so they read 0 in the breakdown
    let ce = if weights[0] != 0.0 {
        Some(cross_entropy(tape, &tempered_softmax(tape, own, 1.0)?, labels)?)
    } else {
        None
    };
    let kl_peer = peer.filter(|_| weights[1] != 0.0).map(|p| kl_tempered(tape, p, own, tau)).transpose()?;
    let kl_anchor = anchor.filter(|_| weights[2] != 0.0).map(|a| kl_tempered(tape, a, own, tau)).transpose()?;
    let total = weighted_total(
        tape,
        &[(weights[0], ce.as_ref()), (weights[1], kl_peer.as_ref()), (weights[2], kl_anchor.as_ref())],
    )?;
    let ce_value = ce.as_ref().map(value).transpose()?.unwrap_or(0.0);
    Ok((total, [ce_value, kl_value(&kl_peer)?, kl_value(&kl_anchor)?]))
}

/// `w1·CE(S) + w2·KL(T‖S) + w3·KL(A‖S)`. Absent roles contribute nothing.
/// Fills the student half of the breakdown.
pub fn student_loss(
    tape: &Tape,
    teacher: Option<&Tensor>,
    student: &Tensor,
    anchor: Option<&Tensor>,
    labels: &[usize],
    weights: &DistillWeights,
) -> Result<Objective> {
    let (total, [ce, kl_t, kl_a]) =
        role_loss(tape, teacher, student, anchor, labels, [weights.w1, weights.w2, weights.w3], weights.tau)?;
    Ok(Objective {
        breakdown: LossBreakdown {
            ce_student: ce,
            kl_teacher_to_student: kl_t,
            kl_anchor_to_student: kl_a,
            total_student: value(&total)?,
            ..Default::default()
        },
        total,
    })
}

/// `w4·CE(T) + w5·KL(S‖T) + w6·KL(A‖T)`. Fills the teacher half of the
/// breakdown.
pub fn teacher_loss(
    tape: &Tape,
    student: Option<&Tensor>,
    teacher: &Tensor,
    anchor: Option<&Tensor>,
    labels: &[usize],
    weights: &DistillWeights,
) -> Result<Objective> {
    let (total, [ce, kl_s, kl_a]) =
        role_loss(tape, student, teacher, anchor, labels, [weights.w4, weights.w5, weights.w6], weights.tau)?;
    Ok(Objective {
        breakdown: LossBreakdown {
            ce_teacher: ce,
            kl_student_to_teacher: kl_s,
            kl_anchor_to_teacher: kl_a,
            total_teacher: value(&total)?,
            ..Default::default()
        },
        total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::from_vec(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn item(x: Tensor) -> f32 {
        x.item().unwrap()
    }

    #[test]
    fn cross_entropy_hand_values() {
        let tape = Tape::new();
        let perfect = t(&[2, 3], &[1., 0., 0., 0., 0., 1.]);
        assert!(item(cross_entropy(&tape, &perfect, &[0, 2]).unwrap()) <= 1e-6);
        let quarter = t(&[1, 4], &[0.25; 4]);
        assert!((item(cross_entropy(&tape, &quarter, &[3]).unwrap()) - 1.386294).abs() < 1e-6);
        let uniform = t(&[1, 10], &[0.1; 10]);
        assert!((item(cross_entropy(&tape, &uniform, &[7]).unwrap()) - 2.302585).abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_validation() {
        let tape = Tape::new();
        let p = t(&[1, 2], &[0.5, 0.5]);
        assert!(matches!(cross_entropy(&tape, &p, &[2]), Err(DistillError::Label { label: 2, .. })));
        let skewed = t(&[1, 2], &[0.5, 0.6]);
        assert!(matches!(cross_entropy(&tape, &skewed, &[0]), Err(DistillError::NotNormalized { .. })));
        assert!(matches!(cross_entropy(&tape, &p, &[0, 1]), Err(DistillError::LabelCount { .. })));
    }

    #[test]
    fn kl_hand_values() {
        let tape = Tape::new();
        let z = t(&[2, 3], &[0.3, -1., 2., 4., 4., 0.]);
        assert_eq!(item(kl_tempered(&tape, &z, &z, 1.0).unwrap()), 0.0);
        // logits chosen so σ(target) = [0.5, 0.5], σ(learner) = [0.9, 0.1]
        let target = t(&[1, 2], &[0., 0.]);
        let learner = t(&[1, 2], &[9f32.ln(), 0.]);
        let v = item(kl_tempered(&tape, &target, &learner, 1.0).unwrap());
        assert!((v - 0.510826).abs() < 1e-6, "{v}");
    }

    #[test]
    fn kl_carries_tau_squared() {
        let tape = Tape::new();
        let target = t(&[2, 3], &[1., 0., -1., 0.5, 2., 0.]);
        let learner = t(&[2, 3], &[0., 0., 1., -1., 1., 3.]);
        let tau = 2.0;
        // plain KL of the τ-softened distributions, computed by hand in f64
        let soft = |z: &[f32]| {
            let m = z.iter().fold(f64::MIN, |a, &b| a.max(b as f64));
            let e: Vec<f64> = z.iter().map(|&v| ((v as f64 - m) / tau as f64).exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(|v| v / s).collect::<Vec<_>>()
        };
        let mut kl = 0.0;
        for r in 0..2 {
            let (p, q) = (soft(target.row(r)), soft(learner.row(r)));
            kl += p.iter().zip(&q).map(|(a, b)| a * (a / b).ln()).sum::<f64>();
        }
        kl /= 2.0;
        let v = item(kl_tempered(&tape, &target, &learner, tau).unwrap()) as f64;
        assert!((v - 4.0 * kl).abs() < 1e-5, "{v} vs {}", 4.0 * kl);
    }

    #[test]
    fn kl_rejects_bad_input() {
        let tape = Tape::new();
        let a = t(&[1, 2], &[0., 0.]);
        assert!(matches!(kl_tempered(&tape, &a, &t(&[1, 3], &[0.; 3]), 1.0), Err(DistillError::Shape { .. })));
        assert!(matches!(kl_tempered(&tape, &a, &a, 0.0), Err(DistillError::Temperature(_))));
    }

    #[test]
    fn kl_target_receives_no_gradient() {
        let target = Tensor::parameter(vec![2, 3], vec![1., 0., -1., 0.5, 2., 0.]).unwrap();
        let learner = Tensor::parameter(vec![2, 3], vec![0., 0., 1., -1., 1., 3.]).unwrap();
        let tape = Tape::new();
        let kl = kl_tempered(&tape, &target, &learner, 1.5).unwrap();
        tape.backward(&kl).unwrap();
        assert_eq!(target.grad(), None);
        assert!(learner.grad().unwrap().iter().any(|&g| g != 0.0));
    }

    #[test]
    fn schedule_defaults() {
        let w = DistillWeights::default();
        assert_eq!(w.apply_schedule(0.0).as_array(), [1.0; 6]);
        assert_eq!(w.apply_schedule(0.7).as_array(), [0.1, 10.0, 1.0, 1.0, 1.0, 1.0]);
        assert_eq!(w.apply_schedule(0.625).w1, 0.1);
        let plain = DistillWeights { w3: 0.25, ..DistillWeights::uniform(2.0) };
        for p in [0.0, 0.3, 1.0] {
            assert_eq!(plain.apply_schedule(p), plain);
        }
    }

    #[test]
    fn weights_validation() {
        assert!(DistillWeights::default().validate().is_ok());
        assert!(DistillWeights { w4: -1.0, ..Default::default() }.validate().is_err());
        assert!(DistillWeights { tau: 0.0, ..Default::default() }.validate().is_err());
        let mut w = DistillWeights::default();
        w.schedule.push(ScheduleStep { at: 0.5, overrides: vec![] });
        assert!(w.validate().is_err(), "fractions must increase");
    }

    #[test]
    fn weight_slot_names_round_trip() {
        for s in WeightSlot::ALL {
            assert_eq!(s.to_string().parse::<WeightSlot>().unwrap(), s);
        }
        assert!("w7".parse::<WeightSlot>().is_err());
    }

    #[test]
    fn absent_roles_contribute_nothing() {
        let tape = Tape::new();
        let s = t(&[2, 2], &[1., 0., 0., 1.]);
        let obj = student_loss(&tape, None, &s, None, &[0, 1], &DistillWeights::uniform(1.0)).unwrap();
        assert_eq!(obj.breakdown.kl_teacher_to_student, 0.0);
        assert_eq!(obj.breakdown.kl_anchor_to_student, 0.0);
        assert_eq!(obj.breakdown.total_student, obj.breakdown.ce_student);
    }
}
