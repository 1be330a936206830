//! Flat `key = value` experiment configs.
//!
//! Blank lines and lines starting with `#` are ignored; so is anything after
//! ` #` on a value line. Every key may appear once. Relative paths are
//! resolved against the config file's directory, or against the working
//! directory for `--set` overrides.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use indexmap::IndexMap;

use crate::data::{self, Dataset, DataError, SplitId, SyntheticSpec};
use crate::distill::{DistillWeights, ScheduleStep, WeightSlot};
use crate::nn::{ArchKind, ArchitectureSpec};
use crate::trainer::{DistillConfig, OptimConfig, Wiring};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError {
    pub source: String,
    pub line: Option<usize>,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(l) => write!(f, "{}:{}: {}", self.source, l, self.message),
            None => write!(f, "{}: {}", self.source, self.message),
        }
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Origin {
    Line(usize),
    Override,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub value: String,
    pub origin: Origin,
}

/// Parsed but untyped config, keys in file order.
#[derive(Debug, Clone)]
pub struct RawConfig {
    pub source: String,
    pub base_dir: PathBuf,
    pub text: String,
    pub entries: IndexMap<String, Entry>,
}

impl RawConfig {
    pub fn parse(text: &str, source: &str, base_dir: &Path) -> Result<Self, ConfigError> {
        let mut entries = IndexMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let err = |message: String| ConfigError { source: source.to_string(), line: Some(line), message };
            let content = match raw.find(" #").or_else(|| raw.find("\t#")) {
                Some(at) => &raw[..at],
                None => raw,
            };
            let content = content.trim();
            if content.is_empty() || content.starts_with('#') {
                continue;
            }
            let (key, value) = content.split_once('=').ok_or_else(|| err(format!("expected `key = value`, found `{content}`")))?;
            let (key, value) = (key.trim(), value.trim());
            if key.is_empty() {
                return Err(err("empty key".into()));
            }
            if let Some(prev) = entries.get(key) {
                let Entry { origin: Origin::Line(first), .. } = prev else { unreachable!() };
                return Err(err(format!("duplicate key `{key}` (first set on line {first})")));
            }
            entries.insert(key.to_string(), Entry { value: value.to_string(), origin: Origin::Line(line) });
        }
        Ok(Self { source: source.to_string(), base_dir: base_dir.to_path_buf(), text: text.to_string(), entries })
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError {
            source: path.display().to_string(),
            line: None,
            message: format!("cannot read config: {e}"),
        })?;
        let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, &path.display().to_string(), &dir)
    }

    /// Applies a `key=value` override on top of the file.
    pub fn set(&mut self, assignment: &str) -> Result<(), ConfigError> {
        let (k, v) = assignment.split_once('=').ok_or_else(|| ConfigError {
            source: "--set".into(),
            line: None,
            message: format!("expected KEY=VALUE, found `{assignment}`"),
        })?;
        self.entries.insert(k.trim().to_string(), Entry { value: v.trim().to_string(), origin: Origin::Override });
        Ok(())
    }
}

/// Where the train and test splits come from.
#[derive(Debug, Clone, PartialEq)]
pub enum DatasetSource {
    Synthetic(SyntheticSpec),
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
    },
    Csv {
        train: PathBuf,
        test: PathBuf,
        label_column: String,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSettings {
    pub arch: ArchKind,
    pub base_widths: Vec<usize>,
    pub student_width: f64,
    pub teacher_width: f64,
    /// `[C, H, W]` for `tiny_cnn`; inferred from IDX files when absent.
    pub input_shape: Option<Vec<usize>>,
}

/// A fully typed, validated experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct Experiment {
    pub seed: u64,
    pub dataset: DatasetSource,
    pub model: ModelSettings,
    pub weights: DistillWeights,
    pub optim: OptimConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub wiring: Wiring,
    pub generations: usize,
    pub anchor: Option<PathBuf>,
    pub teacher: Option<PathBuf>,
    pub student: Option<PathBuf>,
    pub runs: Vec<PathBuf>,
    pub mixing_teacher: f64,
    pub ece_bins: usize,
    pub out: Option<PathBuf>,
}

struct Keys<'a> {
    raw: &'a RawConfig,
    left: IndexMap<String, Entry>,
}

impl<'a> Keys<'a> {
    fn err(&self, origin: Option<Origin>, message: String) -> ConfigError {
        match origin {
            Some(Origin::Line(l)) => ConfigError { source: self.raw.source.clone(), line: Some(l), message },
            Some(Origin::Override) => ConfigError { source: "--set".into(), line: None, message },
            None => ConfigError { source: self.raw.source.clone(), line: None, message },
        }
    }

    fn take(&mut self, key: &str) -> Option<Entry> {
        self.left.shift_remove(key)
    }

    fn required(&mut self, key: &str) -> Result<Entry, ConfigError> {
        self.take(key).ok_or_else(|| self.err(None, format!("missing required key `{key}`")))
    }

    fn parsed<T: FromStr>(&self, key: &str, e: &Entry, what: &str) -> Result<T, ConfigError> {
        e.value
            .parse()
            .map_err(|_| self.err(Some(e.origin), format!("`{key}` must be {what}, got `{}`", e.value)))
    }

    fn num<T: FromStr>(&mut self, key: &str, default: T, what: &str, ok: impl Fn(&T) -> bool) -> Result<T, ConfigError> {
        let Some(e) = self.take(key) else { return Ok(default) };
        let v = self.parsed(key, &e, what)?;
        if !ok(&v) {
            return Err(self.err(Some(e.origin), format!("`{key}` must be {what}, got `{}`", e.value)));
        }
        Ok(v)
    }

    fn path(&self, e: &Entry) -> PathBuf {
        let p = PathBuf::from(&e.value);
        match e.origin {
            _ if p.is_absolute() => p,
            Origin::Line(_) => self.raw.base_dir.join(p),
            Origin::Override => p,
        }
    }

    fn opt_path(&mut self, key: &str) -> Option<PathBuf> {
        self.take(key).map(|e| self.path(&e))
    }

    fn req_path(&mut self, key: &str) -> Result<PathBuf, ConfigError> {
        let e = self.required(key)?;
        Ok(self.path(&e))
    }

    fn list<T: FromStr>(&mut self, key: &str, what: &str) -> Result<Option<(Vec<T>, Origin)>, ConfigError> {
        let Some(e) = self.take(key) else { return Ok(None) };
        if e.value == "none" {
            return Ok(Some((Vec::new(), e.origin)));
        }
        let items = e
            .value
            .split(',')
            .map(|s| s.trim().parse().map_err(|_| self.err(Some(e.origin), format!("`{key}` must be {what}, got `{}`", e.value))))
            .collect::<Result<Vec<T>, _>>()?;
        Ok(Some((items, e.origin)))
    }
}

fn positive(v: &f64) -> bool {
    v.is_finite() && *v > 0.0
}

fn non_negative(v: &f64) -> bool {
    v.is_finite() && *v >= 0.0
}

fn parse_schedule(text: &str) -> Result<Vec<ScheduleStep>, String> {
    if text == "none" {
        return Ok(Vec::new());
    }
    text.split(';')
        .map(|step| {
            let (at, rest) = step.split_once(':').ok_or_else(|| format!("step `{}` lacks `fraction:`", step.trim()))?;
            let at: f64 = at.trim().parse().map_err(|_| format!("bad fraction `{}`", at.trim()))?;
            let overrides = rest
                .split(',')
                .map(|kv| {
                    let (k, v) = kv.split_once('=').ok_or_else(|| format!("override `{}` lacks `=`", kv.trim()))?;
                    let slot: WeightSlot = k.trim().parse().map_err(|e: crate::distill::DistillError| e.to_string())?;
                    let v: f32 = v.trim().parse().map_err(|_| format!("bad weight `{}`", v.trim()))?;
                    Ok((slot, v))
                })
                .collect::<Result<Vec<_>, String>>()?;
            Ok(ScheduleStep { at, overrides })
        })
        .collect()
}

fn format_schedule(steps: &[ScheduleStep]) -> String {
    if steps.is_empty() {
        return "none".into();
    }
    steps
        .iter()
        .map(|s| {
            let o: Vec<String> = s.overrides.iter().map(|(k, v)| format!("{k}={v}")).collect();
            format!("{}: {}", s.at, o.join(", "))
        })
        .collect::<Vec<_>>()
        .join("; ")
}

fn join<T: ToString>(v: &[T]) -> String {
    if v.is_empty() {
        return "none".into();
    }
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl Experiment {
    pub fn from_raw(raw: &RawConfig) -> Result<Self, ConfigError> {
        let mut k = Keys { raw, left: raw.entries.clone() };
        let seed_entry = k.required("seed")?;
        let seed: u64 = k.parsed("seed", &seed_entry, "a non-negative integer")?;
        let dataset_entry = k.required("dataset")?;
        let dataset = match dataset_entry.value.as_str() {
            "synthetic" => {
                let d = SyntheticSpec::default();
                DatasetSource::Synthetic(SyntheticSpec {
                    num_classes: k.num("synthetic.classes", d.num_classes, "an integer >= 2", |v| *v >= 2)?,
                    input_dim: k.num("synthetic.dim", d.input_dim, "a positive integer", |v| *v >= 1)?,
                    train_samples: k.num("synthetic.train", d.train_samples, "a positive integer", |v| *v >= 1)?,
                    test_samples: k.num("synthetic.test", d.test_samples, "a positive integer", |v| *v >= 1)?,
                    radius: k.num("synthetic.radius", d.radius, "a positive number", positive)?,
                    sigma: k.num("synthetic.sigma", d.sigma, "a positive number", positive)?,
                    seed: k.num("synthetic.seed", seed, "a non-negative integer", |_| true)?,
                })
            }
            "idx" => DatasetSource::Idx {
                train_images: k.req_path("idx.train_images")?,
                train_labels: k.req_path("idx.train_labels")?,
                test_images: k.req_path("idx.test_images")?,
                test_labels: k.req_path("idx.test_labels")?,
            },
            "csv" => DatasetSource::Csv {
                train: k.req_path("csv.train")?,
                test: k.req_path("csv.test")?,
                label_column: k.take("csv.label_column").map_or_else(|| "label".to_string(), |e| e.value),
            },
            other => {
                return Err(k.err(Some(dataset_entry.origin), format!("`dataset` must be synthetic, idx or csv, got `{other}`")))
            }
        };

        let arch = match k.take("arch") {
            None => ArchKind::Mlp,
            Some(e) => k.parsed("arch", &e, "mlp or tiny_cnn")?,
        };
        let base_widths = match k.list::<usize>("base_widths", "a comma-separated list of positive integers")? {
            None => vec![64, 64],
            Some((v, origin)) if v.is_empty() || v.contains(&0) => {
                return Err(k.err(Some(origin), "`base_widths` must list positive integers".into()))
            }
            Some((v, _)) => v,
        };
        let student_width = k.num("student_width", 0.5, "a positive number", positive)?;
        let teacher_width = k.num("teacher_width", 2.0, "a positive number", positive)?;
        if let Some(e) = k.take("anchor_width") {
            let v: f64 = k.parsed("anchor_width", &e, "a positive number")?;
            if v != student_width {
                return Err(k.err(
                    Some(e.origin),
                    format!("`anchor_width` ({v}) must equal `student_width` ({student_width}): the anchor shares the student's architecture"),
                ));
            }
        }
        let input_shape = match k.list::<usize>("input_shape", "C,H,W")? {
            None => None,
            Some((v, origin)) if v.len() != 3 || v.contains(&0) => {
                return Err(k.err(Some(origin), "`input_shape` must be three positive integers C,H,W".into()))
            }
            Some((v, _)) => Some(v),
        };

        let dw = DistillWeights::default();
        let mut weights = DistillWeights {
            w1: 0.0,
            w2: 0.0,
            w3: 0.0,
            w4: 0.0,
            w5: 0.0,
            w6: 0.0,
            tau: k.num("tau", dw.tau, "a positive number", |v: &f32| v.is_finite() && *v > 0.0)?,
            schedule: dw.schedule.clone(),
        };
        for slot in WeightSlot::ALL {
            let key = slot.to_string();
            let v = k.num(&key, dw.get(slot), "a non-negative number", |v: &f32| v.is_finite() && *v >= 0.0)?;
            weights.set(slot, v);
        }
        if let Some(e) = k.take("schedule") {
            weights.schedule = parse_schedule(&e.value).map_err(|m| k.err(Some(e.origin), format!("`schedule`: {m}")))?;
            weights.validate().map_err(|m| k.err(Some(e.origin), format!("`schedule`: {m}")))?;
        }

        let od = OptimConfig::default();
        let mut optim = OptimConfig {
            lr: k.num("lr", od.lr, "a positive number", positive)?,
            momentum: k.num("momentum", od.momentum, "a number in [0, 1)", |v| (0.0..1.0).contains(v))?,
            weight_decay: k.num("weight_decay", od.weight_decay, "a non-negative number", non_negative)?,
            milestones: od.milestones.clone(),
            gamma: k.num("lr_gamma", od.gamma, "a number in (0, 1]", |v| *v > 0.0 && *v <= 1.0)?,
        };
        if let Some((m, origin)) = k.list::<f64>("lr_milestones", "a comma-separated list of fractions")? {
            if m.iter().any(|v| !(*v > 0.0 && *v < 1.0)) || m.windows(2).any(|w| w[0] >= w[1]) {
                return Err(k.err(Some(origin), "`lr_milestones` must be strictly increasing fractions in (0, 1)".into()));
            }
            optim.milestones = m;
        }

        let epochs = k.num("epochs", 60usize, "a non-negative integer", |_| true)?;
        let batch_size = k.num("batch_size", 128usize, "a positive integer", |v| *v >= 1)?;
        let wiring = match k.take("wiring") {
            None => Wiring::Trikd,
            Some(e) => e.value.parse().map_err(|m: String| k.err(Some(e.origin), m))?,
        };
        let generations = k.num("generations", 1usize, "a positive integer", |v| *v >= 1)?;
        let anchor = k.opt_path("anchor");
        let teacher = k.opt_path("teacher");
        let student = k.opt_path("student");
        let runs = match k.take("runs") {
            None => Vec::new(),
            Some(e) => e
                .value
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|s| k.path(&Entry { value: s.to_string(), origin: e.origin }))
                .collect(),
        };
        let mixing_teacher = k.num("mixing_teacher", 0.5, "a number in [0, 1]", |v| (0.0..=1.0).contains(v))?;
        let ece_bins = k.num("ece_bins", crate::metrics::ECE_BINS, "a positive integer", |v| *v >= 1)?;
        let out = k.take("out").map(|e| PathBuf::from(e.value));

        if let Some((key, e)) = k.left.iter().min_by_key(|(_, e)| match e.origin {
            Origin::Line(l) => l,
            Origin::Override => 0,
        }) {
            return Err(k.err(Some(e.origin), format!("unknown key `{key}`")));
        }

        Ok(Experiment {
            seed,
            dataset,
            model: ModelSettings { arch, base_widths, student_width, teacher_width, input_shape },
            weights,
            optim,
            epochs,
            batch_size,
            wiring,
            generations,
            anchor,
            teacher,
            student,
            runs,
            mixing_teacher,
            ece_bins,
            out,
        })
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        Self::from_raw(&RawConfig::load(path)?)
    }

    pub fn load_dataset(&self) -> Result<Dataset, DataError> {
        match &self.dataset {
            DatasetSource::Synthetic(spec) => data::generate_synthetic(spec),
            DatasetSource::Idx { train_images, train_labels, test_images, test_labels } => {
                let train = data::load_idx_split(train_images, train_labels, SplitId::Train)?;
                let test = data::load_idx_split(test_images, test_labels, SplitId::Test)?;
                pair(format!("idx:{}", train_images.display()), train, test)
            }
            DatasetSource::Csv { train, test, label_column } => {
                let tr = data::load_csv(train, label_column, SplitId::Train)?;
                let te = data::load_csv(test, label_column, SplitId::Test)?;
                pair(format!("csv:{}", train.display()), tr, te)
            }
        }
    }

    /// Sample shape used by `tiny_cnn`.
    fn input_shape(&self, data: &Dataset) -> Result<Vec<usize>, String> {
        if let Some(s) = &self.model.input_shape {
            return Ok(s.clone());
        }
        if let DatasetSource::Idx { train_images, .. } = &self.dataset {
            let dims = data::read_idx(train_images).map_err(|e| e.to_string())?.dims;
            return Ok(match dims.as_slice() {
                [_, h, w] => vec![1, *h, *w],
                [_, c, h, w] => vec![*c, *h, *w],
                _ => return Err(format!("cannot infer an image shape from IDX dims {dims:?}; set `input_shape`")),
            });
        }
        Err(format!("tiny_cnn on {}-dimensional inputs needs `input_shape = C,H,W`", data.input_dim()))
    }

    pub fn distill_config(&self, data: &Dataset) -> Result<DistillConfig, String> {
        let k = data.num_classes();
        let m = &self.model;
        let student = match m.arch {
            ArchKind::Mlp => ArchitectureSpec::mlp(data.input_dim(), k, &m.base_widths, m.student_width),
            ArchKind::TinyCnn => {
                let shape = self.input_shape(data)?;
                if shape.iter().product::<usize>() != data.input_dim() {
                    return Err(format!("input_shape {shape:?} does not match {} input features", data.input_dim()));
                }
                ArchitectureSpec {
                    kind: ArchKind::TinyCnn,
                    input_dims: shape,
                    num_classes: k,
                    base_widths: m.base_widths.clone(),
                    width_multiplier: m.student_width,
                }
            }
        };
        let cfg = DistillConfig {
            wiring: self.wiring,
            teacher: student.with_multiplier(m.teacher_width),
            student,
            weights: self.weights.clone(),
            optim: self.optim.clone(),
            epochs: self.epochs,
            batch_size: self.batch_size,
            generations: self.generations,
        };
        cfg.validate().map_err(|e| e.to_string())?;
        Ok(cfg)
    }

    /// Canonical text of every setting; parsing it yields this experiment.
    /// `out` is left out so a stored copy never points back at its own
    /// results.
    pub fn to_text(&self) -> String {
        let mut lines: Vec<(String, String)> = vec![("seed".into(), self.seed.to_string())];
        let mut push = |k: &str, v: String| lines.push((k.to_string(), v));
        match &self.dataset {
            DatasetSource::Synthetic(s) => {
                push("dataset", "synthetic".into());
                push("synthetic.classes", s.num_classes.to_string());
                push("synthetic.dim", s.input_dim.to_string());
                push("synthetic.train", s.train_samples.to_string());
                push("synthetic.test", s.test_samples.to_string());
                push("synthetic.radius", s.radius.to_string());
                push("synthetic.sigma", s.sigma.to_string());
                push("synthetic.seed", s.seed.to_string());
            }
            DatasetSource::Idx { train_images, train_labels, test_images, test_labels } => {
                push("dataset", "idx".into());
                push("idx.train_images", train_images.display().to_string());
                push("idx.train_labels", train_labels.display().to_string());
                push("idx.test_images", test_images.display().to_string());
                push("idx.test_labels", test_labels.display().to_string());
            }
            DatasetSource::Csv { train, test, label_column } => {
                push("dataset", "csv".into());
                push("csv.train", train.display().to_string());
                push("csv.test", test.display().to_string());
                push("csv.label_column", label_column.clone());
            }
        }
        let m = &self.model;
        push("arch", m.arch.to_string());
        push("base_widths", join(&m.base_widths));
        push("student_width", m.student_width.to_string());
        push("teacher_width", m.teacher_width.to_string());
        if let Some(s) = &m.input_shape {
            push("input_shape", join(s));
        }
        for slot in WeightSlot::ALL {
            push(&slot.to_string(), self.weights.get(slot).to_string());
        }
        push("tau", self.weights.tau.to_string());
        push("schedule", format_schedule(&self.weights.schedule));
        push("epochs", self.epochs.to_string());
        push("batch_size", self.batch_size.to_string());
        push("lr", self.optim.lr.to_string());
        push("momentum", self.optim.momentum.to_string());
        push("weight_decay", self.optim.weight_decay.to_string());
        push("lr_milestones", join(&self.optim.milestones));
        push("lr_gamma", self.optim.gamma.to_string());
        push("wiring", self.wiring.to_string());
        push("generations", self.generations.to_string());
        for (key, p) in [("anchor", &self.anchor), ("teacher", &self.teacher), ("student", &self.student)] {
            if let Some(p) = p {
                push(key, absolute(p).display().to_string());
            }
        }
        if !self.runs.is_empty() {
            push("runs", self.runs.iter().map(|p| absolute(p).display().to_string()).collect::<Vec<_>>().join(","));
        }
        push("mixing_teacher", self.mixing_teacher.to_string());
        push("ece_bins", self.ece_bins.to_string());
        lines.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

fn absolute(p: &Path) -> PathBuf {
    std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf())
}

fn pair(id: String, train: data::DatasetSplit, test: data::DatasetSplit) -> Result<Dataset, DataError> {
    if train.input_dim() != test.input_dim() {
        return Err(DataError::BadDims(vec![train.input_dim(), test.input_dim()]));
    }
    let k = train.num_classes.max(test.num_classes);
    Ok(Dataset { id, train: train.with_num_classes(k)?, test: test.with_num_classes(k)? })
}
