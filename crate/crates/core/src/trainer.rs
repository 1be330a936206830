//! Training loops for every supervision wiring, and the generation
//! curriculum in which each trained student becomes the next anchor.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use crate::data::{batches, Dataset};
use crate::distill::{student_loss, teacher_loss, DistillError, DistillWeights, LossBreakdown};
use crate::metrics::{per_sample_kl, top1_accuracy, MetricsError, MetricsRecord, Mixing};
use crate::nn::{ArchitectureSpec, Network, NnError};
use crate::seed::{self, stream};
use crate::tensor::{Tape, Tensor, TensorError};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TrainError {
    #[error("wiring {0} needs an anchor checkpoint")]
    MissingAnchor(Wiring),
    #[error("wiring {0} needs a pre-trained teacher checkpoint")]
    MissingTeacher(Wiring),
    #[error("anchor architecture {anchor} differs from student architecture {student}")]
    AnchorSpec { anchor: String, student: String },
    #[error("{role} expects {expected_in} inputs and {expected_k} classes, data has {got_in} and {got_k}")]
    DataShape {
        role: &'static str,
        expected_in: usize,
        expected_k: usize,
        got_in: usize,
        got_k: usize,
    },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Distill(#[from] DistillError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// Which of {labels, teacher, anchor} supervises whom.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Wiring {
    /// Student and teacher each learn from labels alone.
    LabelOnly,
    /// Student learns from labels and a frozen pre-trained teacher.
    OfflineKd,
    /// Deep mutual learning: student and teacher learn from each other.
    OnlineDml,
    /// Student and teacher learn from each other, both held near the anchor.
    Trikd,
    /// Student learns from the frozen anchor only.
    M0,
    /// Student learns from the frozen anchor and a frozen teacher.
    M1,
    /// Student anchored, student and teacher mutual.
    M2,
    /// Teacher anchored, student and teacher mutual.
    M3,
    /// Same edges as `Trikd`.
    M4,
    /// Same edges as `M0`.
    BornAgain,
}

/// How the teacher takes part in a wiring.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TeacherRole {
    Absent,
    Frozen,
    Online,
}

/// Supervision edges of a wiring. Labels always supervise every trained model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Edges {
    pub student_from_teacher: bool,
    pub student_from_anchor: bool,
    pub teacher: TeacherRole,
    pub teacher_from_student: bool,
    pub teacher_from_anchor: bool,
}

impl Wiring {
    pub const ALL: [Wiring; 10] = [
        Wiring::LabelOnly,
        Wiring::OfflineKd,
        Wiring::OnlineDml,
        Wiring::Trikd,
        Wiring::M0,
        Wiring::M1,
        Wiring::M2,
        Wiring::M3,
        Wiring::M4,
        Wiring::BornAgain,
    ];

    pub const ABLATION: [Wiring; 5] = [Wiring::M0, Wiring::M1, Wiring::M2, Wiring::M3, Wiring::M4];

    pub fn edges(self) -> Edges {
        use TeacherRole::*;
        let e = |st, sa, teacher, ts, ta| Edges {
            student_from_teacher: st,
            student_from_anchor: sa,
            teacher,
            teacher_from_student: ts,
            teacher_from_anchor: ta,
        };
        match self {
            Wiring::LabelOnly => e(false, false, Online, false, false),
            Wiring::OfflineKd => e(true, false, Frozen, false, false),
            Wiring::OnlineDml => e(true, false, Online, true, false),
            Wiring::Trikd | Wiring::M4 => e(true, true, Online, true, true),
            Wiring::M0 | Wiring::BornAgain => e(false, true, Absent, false, false),
            Wiring::M1 => e(true, true, Frozen, false, false),
            Wiring::M2 => e(true, true, Online, true, false),
            Wiring::M3 => e(true, false, Online, true, true),
        }
    }

    /// Blend of soft targets the student learns from, as used by the
    /// variance and bias diagnostics. `teacher_share` applies only when
    /// both teacher and anchor supervise the student.
    pub fn target_mixing(self, teacher_share: f64) -> Mixing {
        let e = self.edges();
        match (e.student_from_teacher, e.student_from_anchor) {
            (true, true) => Mixing { teacher: teacher_share, anchor: 1.0 - teacher_share },
            (false, true) => Mixing::ANCHOR_ONLY,
            _ => Mixing::TEACHER_ONLY,
        }
    }

    pub fn needs_anchor(self) -> bool {
        let e = self.edges();
        e.student_from_anchor || e.teacher_from_anchor
    }

    pub fn needs_pretrained_teacher(self) -> bool {
        self.edges().teacher == TeacherRole::Frozen
    }

    pub fn name(self) -> &'static str {
        match self {
            Wiring::LabelOnly => "label_only",
            Wiring::OfflineKd => "offline_kd",
            Wiring::OnlineDml => "online_dml",
            Wiring::Trikd => "trikd",
            Wiring::M0 => "m0",
            Wiring::M1 => "m1",
            Wiring::M2 => "m2",
            Wiring::M3 => "m3",
            Wiring::M4 => "m4",
            Wiring::BornAgain => "born_again",
        }
    }
}

impl fmt::Display for Wiring {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Wiring {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Wiring::ALL
            .into_iter()
            .find(|w| w.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Wiring::ALL.iter().map(|w| w.name()).collect();
                format!("unknown wiring `{s}` (expected one of {})", names.join(", "))
            })
    }
}

/// SGD hyperparameters with step decay at fractions of the run.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Progress fractions in `(0, 1)` at which the rate is multiplied by `gamma`.
    pub milestones: Vec<f64>,
    pub gamma: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self { lr: 0.1, momentum: 0.9, weight_decay: 5e-4, milestones: vec![0.625, 0.875], gamma: 0.1 }
    }
}

impl OptimConfig {
    pub fn lr_at(&self, progress: f64) -> f64 {
        let passed = self.milestones.iter().filter(|&&m| progress >= m).count();
        self.lr * self.gamma.powi(passed as i32)
    }
}

/// Everything that defines a training run except the data and the seed.
#[derive(Debug, Clone, PartialEq)]
pub struct DistillConfig {
    pub wiring: Wiring,
    pub student: ArchitectureSpec,
    pub teacher: ArchitectureSpec,
    pub weights: DistillWeights,
    pub optim: OptimConfig,
    pub epochs: usize,
    pub batch_size: usize,
    /// Number of anchored generations after generation 0.
    pub generations: usize,
}

impl DistillConfig {
    pub fn new(wiring: Wiring, student: ArchitectureSpec, teacher: ArchitectureSpec) -> Self {
        Self {
            wiring,
            student,
            teacher,
            weights: DistillWeights::default(),
            optim: OptimConfig::default(),
            epochs: 60,
            batch_size: 128,
            generations: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TrainError::Config(m));
        self.student.validate()?;
        self.teacher.validate()?;
        self.weights.validate()?;
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        let o = &self.optim;
        if !(o.lr > 0.0 && o.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", o.lr));
        }
        if !(0.0..1.0).contains(&o.momentum) {
            return bad(format!("momentum must be in [0, 1), got {}", o.momentum));
        }
        if !(o.weight_decay >= 0.0 && o.weight_decay.is_finite()) {
            return bad(format!("weight_decay must be non-negative, got {}", o.weight_decay));
        }
        if !(o.gamma > 0.0 && o.gamma <= 1.0) {
            return bad(format!("lr gamma must be in (0, 1], got {}", o.gamma));
        }
        if let Some(m) = o.milestones.iter().find(|m| !(**m > 0.0 && **m < 1.0)) {
            return bad(format!("lr milestone {m} is outside (0, 1)"));
        }
        Ok(())
    }

    /// Scheduled weights at `progress`, with edges absent from the wiring zeroed.
    pub fn effective_weights(&self, progress: f64) -> DistillWeights {
        let mut w = self.weights.apply_schedule(progress);
        let e = self.wiring.edges();
        let zero_if = |v: &mut f32, keep: bool| {
            if !keep {
                *v = 0.0
            }
        };
        zero_if(&mut w.w2, e.student_from_teacher);
        zero_if(&mut w.w3, e.student_from_anchor);
        let online = e.teacher == TeacherRole::Online;
        zero_if(&mut w.w4, online);
        zero_if(&mut w.w5, online && e.teacher_from_student);
        zero_if(&mut w.w6, online && e.teacher_from_anchor);
        w
    }
}

/// `v ← m·v + g + λ·p; p ← p − lr·v`.
pub fn sgd_step(params: &mut [f32], grads: &[f32], velocity: &mut [f32], lr: f32, momentum: f32, weight_decay: f32) {
    for ((p, &g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        *v = momentum * *v + g + weight_decay * *p;
        *p -= lr * *v;
    }
}

/// Momentum buffers for one network, carried across the whole run.
#[derive(Debug, Clone)]
pub struct Sgd {
    velocity: Vec<Vec<f32>>,
    momentum: f32,
    weight_decay: f32,
}

impl Sgd {
    pub fn new(net: &Network, momentum: f64, weight_decay: f64) -> Self {
        Self {
            velocity: net.params().values().map(|p| vec![0.0; p.numel()]).collect(),
            momentum: momentum as f32,
            weight_decay: weight_decay as f32,
        }
    }

    /// Applies one update from the accumulated gradients; a parameter no
    /// backward pass reached is treated as having a zero gradient.
    pub fn step(&mut self, net: &mut Network, lr: f64) {
        let (m, wd) = (self.momentum, self.weight_decay);
        for ((_, p), v) in net.params_mut().zip(&mut self.velocity) {
            let grad = p.grad().unwrap_or_else(|| vec![0.0; v.len()]);
            p.update_data(|data| sgd_step(data, &grad, v, lr as f32, m, wd));
        }
    }
}

/// The networks entering a generation.
#[derive(Debug, Clone)]
pub struct TripletState {
    pub anchor: Option<Network>,
    pub teacher: Option<Network>,
    pub student: Network,
    pub generation: usize,
    pub seed: u64,
}

/// Pre-trained checkpoints a wiring may need.
#[derive(Debug, Clone, Default)]
pub struct Roles {
    pub anchor: Option<Network>,
    pub teacher: Option<Network>,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub wiring: Wiring,
    pub seed: u64,
    pub generation: usize,
    /// One record per epoch, in order.
    pub records: Vec<MetricsRecord>,
    pub student: Network,
    pub teacher: Option<Network>,
    pub anchor: Option<Network>,
    pub seconds: f64,
}

impl TrainReport {
    pub fn last(&self) -> Option<&MetricsRecord> {
        self.records.last()
    }

    pub fn final_student_test_acc(&self) -> f64 {
        self.last().map_or(f64::NAN, |r| r.test_acc_student)
    }

    pub fn final_teacher_test_acc(&self) -> f64 {
        self.last().map_or(f64::NAN, |r| r.test_acc_teacher)
    }

    pub fn total_student_series(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.losses[6]).collect()
    }

    pub fn total_teacher_series(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.losses[7]).collect()
    }
}

/// Fresh student and teacher for a seed. Each role draws from its own
/// stream, so adding or removing a role never shifts another's weights.
pub fn init_pair(cfg: &DistillConfig, seed: u64) -> Result<(Network, Network)> {
    Ok((
        Network::init(&cfg.student, seed::derive(seed, stream::STUDENT_INIT))?,
        Network::init(&cfg.teacher, seed::derive(seed, stream::TEACHER_INIT))?,
    ))
}

/// Shuffle seed for one epoch.
pub fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed::derive(seed::derive(seed, stream::SHUFFLE), epoch as u64)
}

fn check_fits(role: &'static str, net: &Network, data: &Dataset) -> Result<()> {
    let s = net.spec();
    if s.input_size() != data.input_dim() || s.num_classes != data.num_classes() {
        return Err(TrainError::DataShape {
            role,
            expected_in: s.input_size(),
            expected_k: s.num_classes,
            got_in: data.input_dim(),
            got_k: data.num_classes(),
        });
    }
    Ok(())
}

/// Trains the given networks under `cfg.wiring`. The anchor and any frozen
/// teacher are read, never written.
pub fn train_triplet(state: TripletState, cfg: &DistillConfig, data: &Dataset) -> Result<TrainReport> {
    cfg.validate()?;
    let start = Instant::now();
    let wiring = cfg.wiring;
    let edges = wiring.edges();
    let TripletState { anchor, teacher, mut student, generation, seed } = state;

    let anchor = match (wiring.needs_anchor(), anchor) {
        (true, None) => return Err(TrainError::MissingAnchor(wiring)),
        (true, Some(mut a)) => {
            if a.spec() != student.spec() {
                return Err(TrainError::AnchorSpec { anchor: describe(a.spec()), student: describe(student.spec()) });
            }
            a.freeze();
            Some(a)
        }
        (false, _) => None,
    };
    let mut teacher = match (edges.teacher, teacher) {
        (TeacherRole::Absent, _) => None,
        (TeacherRole::Frozen, None) => return Err(TrainError::MissingTeacher(wiring)),
        (TeacherRole::Online, None) => return Err(TrainError::Config("online teacher missing".into())),
        (TeacherRole::Frozen, Some(mut t)) => {
            t.freeze();
            Some(t)
        }
        (TeacherRole::Online, Some(t)) => Some(t),
    };
    check_fits("student", &student, data)?;
    if let Some(t) = &teacher {
        check_fits("teacher", t, data)?;
    }

    let online_teacher = edges.teacher == TeacherRole::Online;
    let mut opt_s = Sgd::new(&student, cfg.optim.momentum, cfg.optim.weight_decay);
    let mut opt_t = teacher.as_ref().map(|t| Sgd::new(t, cfg.optim.momentum, cfg.optim.weight_decay));
    let frozen = Tape::no_grad();
    let tape = Tape::new();
    let n = data.train.len() as f64;
    let mut records = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let progress = epoch as f64 / cfg.epochs as f64;
        let lr = cfg.optim.lr_at(progress);
        let w = cfg.effective_weights(progress);
        let mut sums = [0.0f64; 8];
        for idx in batches(&data.train, cfg.batch_size, epoch_seed(seed, epoch)) {
            let (x, y) = data.train.gather(&idx)?;
            let zs = student.forward(&tape, &x)?;
            let zt = match &teacher {
                Some(t) if online_teacher => Some(t.forward(&tape, &x)?),
                Some(t) => Some(t.forward(&frozen, &x)?),
                None => None,
            };
            let za = anchor.as_ref().map(|a| a.forward(&frozen, &x)).transpose()?;

            let s_obj = student_loss(&tape, zt.as_ref(), &zs, za.as_ref(), &y, &w)?;
            let mut breakdown = s_obj.breakdown;
            let mut total = s_obj.total;
            if online_teacher {
                let zt = zt.as_ref().expect("online teacher forward");
                let t_obj = teacher_loss(&tape, Some(&zs), zt, za.as_ref(), &y, &w)?;
                merge_teacher(&mut breakdown, &t_obj.breakdown);
                total = add_totals(&tape, total, t_obj.total)?;
            }
            if total.requires_grad() {
                tape.backward(&total)?;
            }
            tape.clear();
            opt_s.step(&mut student, lr);
            student.zero_grad();
            if let (true, Some(t), Some(opt)) = (online_teacher, teacher.as_mut(), opt_t.as_mut()) {
                opt.step(t, lr);
                t.zero_grad();
            }
            let rows = idx.len() as f64;
            sums.iter_mut().zip(breakdown.as_array()).for_each(|(s, v)| *s += v as f64 * rows);
        }
        records.push(evaluate(epoch, lr, &w, sums.map(|s| s / n), &student, teacher.as_ref(), data)?);
    }

    Ok(TrainReport {
        wiring,
        seed,
        generation,
        records,
        student,
        teacher,
        anchor,
        seconds: start.elapsed().as_secs_f64(),
    })
}

fn describe(spec: &ArchitectureSpec) -> String {
    format!("{}{:?}x{}", spec.kind, spec.base_widths, spec.width_multiplier)
}

fn merge_teacher(into: &mut LossBreakdown, t: &LossBreakdown) {
    into.ce_teacher = t.ce_teacher;
    into.kl_student_to_teacher = t.kl_student_to_teacher;
    into.kl_anchor_to_teacher = t.kl_anchor_to_teacher;
    into.total_teacher = t.total_teacher;
}

fn add_totals(tape: &Tape, a: Tensor, b: Tensor) -> Result<Tensor> {
    Ok(match (a.requires_grad(), b.requires_grad()) {
        (_, false) => a,
        (false, true) => b,
        (true, true) => tape.add(&a, &b)?,
    })
}

fn evaluate(
    epoch: usize,
    lr: f64,
    w: &DistillWeights,
    losses: [f64; 8],
    student: &Network,
    teacher: Option<&Network>,
    data: &Dataset,
) -> Result<MetricsRecord> {
    let s_train = student.logits(&data.train.inputs)?;
    let s_test = student.logits(&data.test.inputs)?;
    let mut rec = MetricsRecord {
        epoch,
        lr,
        weights: w.as_array(),
        losses,
        train_acc_student: top1_accuracy(&s_train, &data.train.labels)?,
        test_acc_student: top1_accuracy(&s_test, &data.test.labels)?,
        train_acc_teacher: f64::NAN,
        test_acc_teacher: f64::NAN,
        kl_ts_test: f64::NAN,
    };
    if let Some(t) = teacher {
        let t_test = t.logits(&data.test.inputs)?;
        rec.train_acc_teacher = top1_accuracy(&t.logits(&data.train.inputs)?, &data.train.labels)?;
        rec.test_acc_teacher = top1_accuracy(&t_test, &data.test.labels)?;
        let kl = per_sample_kl(&t_test, &s_test)?;
        rec.kl_ts_test = kl.iter().sum::<f64>() / kl.len() as f64;
    }
    Ok(rec)
}

/// Runs `wiring` from freshly initialized trainable roles. Offline roles
/// come from `roles`.
pub fn run_wiring(wiring: Wiring, cfg: &DistillConfig, data: &Dataset, seed: u64, roles: Roles) -> Result<TrainReport> {
    let cfg = DistillConfig { wiring, ..cfg.clone() };
    let (student, fresh_teacher) = init_pair(&cfg, seed)?;
    let teacher = match wiring.edges().teacher {
        TeacherRole::Absent => None,
        TeacherRole::Frozen => Some(roles.teacher.ok_or(TrainError::MissingTeacher(wiring))?),
        TeacherRole::Online => Some(fresh_teacher),
    };
    if wiring.needs_anchor() && roles.anchor.is_none() {
        return Err(TrainError::MissingAnchor(wiring));
    }
    train_triplet(TripletState { anchor: roles.anchor, teacher, student, generation: 0, seed }, &cfg, data)
}

/// One generation under `cfg.wiring` with fresh student and teacher.
pub fn train_generation(anchor: Option<&Network>, cfg: &DistillConfig, data: &Dataset, seed: u64) -> Result<TrainReport> {
    run_wiring(cfg.wiring, cfg, data, seed, Roles { anchor: anchor.cloned(), teacher: None })
}

/// Generation 0: plain online mutual learning. Its student is the first anchor.
pub fn bootstrap_generation0(cfg: &DistillConfig, data: &Dataset, seed: u64) -> Result<Network> {
    Ok(run_wiring(Wiring::OnlineDml, cfg, data, seed, Roles::default())?.student)
}

/// Generation 0 followed by `cfg.generations` anchored generations. The
/// student of generation `g − 1` anchors generation `g`, which is seeded
/// with `seed + g`.
pub fn run_curriculum(cfg: &DistillConfig, data: &Dataset, seed: u64) -> Result<Vec<TrainReport>> {
    if cfg.generations == 0 {
        return Err(TrainError::Config("a curriculum needs at least one generation".into()));
    }
    let mut reports = vec![run_wiring(Wiring::OnlineDml, cfg, data, seed, Roles::default())?];
    for g in 1..=cfg.generations {
        let anchor = reports[g - 1].student.clone();
        let mut report = run_wiring(Wiring::Trikd, cfg, data, seed + g as u64, Roles { anchor: Some(anchor), teacher: None })?;
        report.generation = g;
        reports.push(report);
    }
    Ok(reports)
}
