//! Command-line front end: `train`, `curriculum` and `diagnose`.
//!
//! Exit codes: 0 on success, 1 on a runtime failure, 2 on an invalid
//! config or a failed validation.

pub mod checkpoint;
pub mod config;

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::data::Dataset;
use crate::metrics::{self, BiasTerm, MetricsRecord, SimilarityReport};
use crate::nn::Network;
use crate::trainer::{self, DistillConfig, Roles, TrainReport, Wiring};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointError};
pub use config::{ConfigError, Experiment, RawConfig};

/// Environment variable naming the root for output directories.
pub const OUT_ROOT_ENV: &str = "TRIKD_OUT_ROOT";
pub const LOCK_FILE: &str = ".trikd.lock";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Invalid(String),
    #[error("output directory {0} is locked by another process (remove {1} if it is stale)")]
    Locked(PathBuf, PathBuf),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Invalid(_) => 2,
            CliError::Locked(..) | CliError::Runtime(_) => 1,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

#[derive(Debug, Parser)]
#[command(name = "trikd", version, about = "Triplet knowledge distillation experiments")]
pub struct Cli {
    /// Threads used inside each matrix multiply; results do not depend on it.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one generation under the configured wiring.
    Train(RunArgs),
    /// Generation 0 plus `generations` anchored generations.
    Curriculum(RunArgs),
    /// Write diagnostic reports for trained checkpoints.
    Diagnose {
        #[command(flatten)]
        run: RunArgs,
        /// Reports to write.
        #[arg(value_enum, required = true)]
        which: Vec<Diagnostic>,
    },
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Experiment config: `key = value` lines, `#` comments.
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory; defaults to the config's `out`, then to
    /// `$TRIKD_OUT_ROOT/<config name>`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Replaces the config's `seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Diagnostic {
    Similarity,
    Ece,
    Variance,
    Bias,
}

/// Parses `args` (program name first), runs the command, and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    crate::tensor::set_threads(cli.threads);
    match dispatch(&cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cmd: &Command) -> Result<()> {
    match cmd {
        Command::Train(a) => {
            let (raw, exp) = resolve(a)?;
            cmd_train(&raw, &exp, &output_dir(a, &exp))
        }
        Command::Curriculum(a) => {
            let (raw, exp) = resolve(a)?;
            cmd_curriculum(&raw, &exp, &output_dir(a, &exp))
        }
        Command::Diagnose { run, which } => {
            let (_, exp) = resolve(run)?;
            cmd_diagnose(&exp, which, &output_dir(run, &exp))
        }
    }
}

fn resolve(a: &RunArgs) -> Result<(RawConfig, Experiment)> {
    let mut raw = RawConfig::load(&a.config)?;
    if let Some(seed) = a.seed {
        raw.set(&format!("seed={seed}"))?;
    }
    for o in &a.overrides {
        raw.set(o)?;
    }
    let exp = Experiment::from_raw(&raw)?;
    Ok((raw, exp))
}

fn output_dir(a: &RunArgs, exp: &Experiment) -> PathBuf {
    if let Some(out) = &a.out {
        return out.clone();
    }
    let root = std::env::var_os(OUT_ROOT_ENV).map(PathBuf::from);
    match (&exp.out, root) {
        (Some(out), Some(root)) if out.is_relative() => root.join(out),
        (Some(out), _) => out.clone(),
        (None, root) => {
            let stem = a.config.file_stem().map_or_else(|| "run".into(), |s| s.to_string_lossy().into_owned());
            root.unwrap_or_else(|| PathBuf::from("runs")).join(stem)
        }
    }
}

/// Exclusive claim on an output directory, released on drop.
#[derive(Debug)]
pub struct OutputLock {
    path: PathBuf,
}

impl OutputLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| runtime(format!("{}: {e}", dir.display())))?;
        let path = dir.join(LOCK_FILE);
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(CliError::Locked(dir.to_path_buf(), path)),
            Err(e) => Err(runtime(format!("{}: {e}", path.display()))),
        }
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

fn load_data(exp: &Experiment) -> Result<Dataset> {
    exp.load_dataset().map_err(|e| runtime(format!("loading dataset: {e}")))
}

fn load_role(path: &Path, role: &str) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(CliError::Invalid(format!("{role} checkpoint {} does not exist", path.display())));
    }
    load_checkpoint(path).map_err(|e| runtime(format!("{role} checkpoint {}: {e}", path.display())))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| runtime(format!("{}: {e}", path.display())))
}

fn save(net: &Network, generation: usize, path: &Path) -> Result<()> {
    save_checkpoint(net, generation, path).map_err(runtime)
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    csv::Writer::from_path(path).map_err(|e| runtime(format!("{}: {e}", path.display())))
}

fn write_rows<S: AsRef<str>>(path: &Path, header: &[&str], rows: &[Vec<S>]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(header).map_err(runtime)?;
    for r in rows {
        w.write_record(r.iter().map(AsRef::as_ref)).map_err(runtime)?;
    }
    w.flush().map_err(runtime)
}

pub fn write_metrics(path: &Path, records: &[MetricsRecord]) -> Result<()> {
    let rows: Vec<Vec<String>> = records.iter().map(MetricsRecord::csv_fields).collect();
    write_rows(path, &MetricsRecord::COLUMNS, &rows)
}

/// Metrics, checkpoints of every role present, and the config.
fn write_report(dir: &Path, report: &TrainReport, generation: usize, anchor_generation: Option<usize>) -> Result<()> {
    write_metrics(&dir.join("metrics.csv"), &report.records)?;
    save(&report.student, generation, &dir.join("student.ckpt"))?;
    if let Some(t) = &report.teacher {
        save(t, generation, &dir.join("teacher.ckpt"))?;
    }
    if let (Some(a), Some(g)) = (&report.anchor, anchor_generation) {
        save(a, g, &dir.join("anchor.ckpt"))?;
    }
    Ok(())
}

fn write_configs(dir: &Path, raw: &RawConfig, exp: &Experiment) -> Result<()> {
    write_file(&dir.join("config.cfg"), &raw.text)?;
    write_file(&dir.join("resolved.cfg"), exp.to_text())
}

fn distill_config(exp: &Experiment, data: &Dataset) -> Result<DistillConfig> {
    exp.distill_config(data).map_err(|m| CliError::Invalid(format!("invalid model settings: {m}")))
}

/// Runs the configured wiring for one generation and writes `metrics.csv`,
/// `student.ckpt`, `teacher.ckpt` / `anchor.ckpt` when those roles exist,
/// `config.cfg` (verbatim) and `resolved.cfg`.
pub fn cmd_train(raw: &RawConfig, exp: &Experiment, out: &Path) -> Result<()> {
    let wiring = exp.wiring;
    if wiring.needs_anchor() && exp.anchor.is_none() {
        return Err(CliError::Invalid(format!("wiring {wiring} needs an anchor checkpoint: set `anchor = PATH`")));
    }
    if wiring.needs_pretrained_teacher() && exp.teacher.is_none() {
        return Err(CliError::Invalid(format!(
            "wiring {wiring} needs a pre-trained teacher checkpoint: set `teacher = PATH`"
        )));
    }
    let anchor = match (&exp.anchor, wiring.needs_anchor()) {
        (Some(p), true) => Some(load_role(p, "anchor")?),
        _ => None,
    };
    let teacher = match (&exp.teacher, wiring.needs_pretrained_teacher()) {
        (Some(p), true) => Some(load_role(p, "teacher")?),
        _ => None,
    };
    let data = load_data(exp)?;
    let cfg = distill_config(exp, &data)?;
    let _lock = OutputLock::acquire(out)?;
    let anchor_generation = anchor.as_ref().map(|c| c.generation);
    let roles = Roles { anchor: anchor.map(|c| c.network), teacher: teacher.map(|c| c.network) };
    let report = trainer::run_wiring(wiring, &cfg, &data, exp.seed, roles).map_err(|e| match e {
        trainer::TrainError::AnchorSpec { .. } | trainer::TrainError::DataShape { .. } => CliError::Invalid(e.to_string()),
        other => runtime(other),
    })?;
    let generation = anchor_generation.map_or(0, |g| g + 1);
    write_report(out, &report, generation, anchor_generation)?;
    write_configs(out, raw, exp)?;
    eprintln!(
        "{wiring}: {} epochs, student test accuracy {:.4}, wrote {}",
        report.records.len(),
        report.final_student_test_acc(),
        out.display()
    );
    Ok(())
}

pub const SUMMARY_COLUMNS: [&str; 6] =
    ["generation", "seed", "train_acc_student", "test_acc_student", "test_acc_teacher", "kl_ts_test"];

/// Writes `gen0 … genG`, each with metrics, checkpoints and its own
/// `resolved.cfg`, plus `summary.csv` with one row per generation.
pub fn cmd_curriculum(raw: &RawConfig, exp: &Experiment, out: &Path) -> Result<()> {
    let data = load_data(exp)?;
    let cfg = distill_config(exp, &data)?;
    let _lock = OutputLock::acquire(out)?;
    let reports = trainer::run_curriculum(&cfg, &data, exp.seed).map_err(runtime)?;
    let mut summary = Vec::new();
    for (g, report) in reports.iter().enumerate() {
        let dir = out.join(format!("gen{g}"));
        fs::create_dir_all(&dir).map_err(|e| runtime(format!("{}: {e}", dir.display())))?;
        write_report(&dir, report, g, g.checked_sub(1))?;
        let gen_exp = Experiment {
            seed: report.seed,
            wiring: report.wiring,
            generations: 1,
            anchor: (g > 0).then(|| dir.join("anchor.ckpt")),
            ..exp.clone()
        };
        write_file(&dir.join("resolved.cfg"), gen_exp.to_text())?;
        let last = report.last();
        let f = |v: Option<f64>| v.unwrap_or(f64::NAN).to_string();
        summary.push(vec![
            g.to_string(),
            report.seed.to_string(),
            f(last.map(|r| r.train_acc_student)),
            f(last.map(|r| r.test_acc_student)),
            f(last.map(|r| r.test_acc_teacher)),
            f(last.map(|r| r.kl_ts_test)),
        ]);
        eprintln!("generation {g}: student test accuracy {:.4}", report.final_student_test_acc());
    }
    write_rows(&out.join("summary.csv"), &SUMMARY_COLUMNS, &summary)?;
    write_configs(out, raw, exp)
}

/// Checkpoints of one trained run.
struct ModelSet {
    name: String,
    wiring: Wiring,
    student: Option<Network>,
    teacher: Option<Network>,
    anchor: Option<Network>,
}

fn optional(path: &Path, role: &str) -> Result<Option<Network>> {
    if path.exists() {
        Ok(Some(load_role(path, role)?.network))
    } else {
        Ok(None)
    }
}

fn model_sets(exp: &Experiment) -> Result<Vec<ModelSet>> {
    if exp.runs.is_empty() {
        let load = |p: &Option<PathBuf>, role| p.as_deref().map(|p| load_role(p, role).map(|c| c.network)).transpose();
        return Ok(vec![ModelSet {
            name: "config".into(),
            wiring: exp.wiring,
            student: load(&exp.student, "student")?,
            teacher: load(&exp.teacher, "teacher")?,
            anchor: load(&exp.anchor, "anchor")?,
        }]);
    }
    exp.runs
        .iter()
        .map(|dir| {
            if !dir.is_dir() {
                return Err(CliError::Invalid(format!("run directory {} does not exist", dir.display())));
            }
            let run_cfg = Experiment::load(&dir.join("resolved.cfg"))?;
            Ok(ModelSet {
                name: dir.file_name().map_or_else(|| dir.display().to_string(), |n| n.to_string_lossy().into_owned()),
                wiring: run_cfg.wiring,
                student: Some(load_role(&dir.join("student.ckpt"), "student")?.network),
                teacher: optional(&dir.join("teacher.ckpt"), "teacher")?,
                anchor: optional(&dir.join("anchor.ckpt"), "anchor")?,
            })
        })
        .collect()
}

fn need<'a>(set: &'a ModelSet, net: &'a Option<Network>, role: &str, report: &str) -> Result<&'a Network> {
    net.as_ref()
        .ok_or_else(|| CliError::Invalid(format!("{report} for `{}` needs a {role} checkpoint", set.name)))
}

pub const ECE_COLUMNS: [&str; 6] = ["run", "role", "split", "ece", "accuracy", "bins"];
pub const ECE_BIN_COLUMNS: [&str; 9] =
    ["run", "role", "split", "bin", "lower", "upper", "confidence_mean", "accuracy", "count"];
pub const VARIANCE_COLUMNS: [&str; 5] = ["run", "wiring", "mixing_teacher", "mixing_anchor", "loss_variance"];
pub const BIAS_COLUMNS: [&str; 5] = ["run", "wiring", "mixing_teacher", "mixing_anchor", "bias_term"];

/// Writes one CSV per requested diagnostic:
///
/// | file | columns |
/// |---|---|
/// | `similarity.csv` | run, dataset, kl_train, kl_test |
/// | `ece.csv` | run, role, split, ece, accuracy, bins |
/// | `ece_bins.csv` | run, role, split, bin, lower, upper, confidence_mean, accuracy, count |
/// | `variance.csv` | run, wiring, mixing_teacher, mixing_anchor, loss_variance |
/// | `bias.csv` | run, wiring, mixing_teacher, mixing_anchor, bias_term |
///
/// Variance and bias are measured on the train split; `bias_term` reads
/// `unavailable` when the dataset has no true posterior.
pub fn cmd_diagnose(exp: &Experiment, which: &[Diagnostic], out: &Path) -> Result<()> {
    let sets = model_sets(exp)?;
    for set in &sets {
        for d in which {
            match d {
                Diagnostic::Similarity => {
                    need(set, &set.teacher, "teacher", "similarity")?;
                    need(set, &set.student, "student", "similarity")?;
                }
                Diagnostic::Ece | Diagnostic::Variance | Diagnostic::Bias => {
                    need(set, &set.student, "student", "diagnosis")?;
                }
            }
        }
    }
    let data = load_data(exp)?;
    let _lock = OutputLock::acquire(out)?;
    for d in which {
        match d {
            Diagnostic::Similarity => {
                let mut rows = Vec::new();
                for s in &sets {
                    let (t, st) = (s.teacher.as_ref().expect("checked"), s.student.as_ref().expect("checked"));
                    let r: SimilarityReport = metrics::behavior_similarity(t, st, &data).map_err(runtime)?;
                    rows.push(vec![s.name.clone(), r.dataset_id, r.kl_train.to_string(), r.kl_test.to_string()]);
                }
                write_rows(&out.join("similarity.csv"), &["run", "dataset", "kl_train", "kl_test"], &rows)?;
            }
            Diagnostic::Ece => {
                let (mut rows, mut bin_rows) = (Vec::new(), Vec::new());
                for s in &sets {
                    for (role, net) in [("student", &s.student), ("teacher", &s.teacher)] {
                        let Some(net) = net else { continue };
                        for split in [&data.train, &data.test] {
                            let rep = metrics::model_ece(net, split, exp.ece_bins).map_err(runtime)?;
                            let acc = metrics::model_accuracy(net, split).map_err(runtime)?;
                            let base = vec![s.name.clone(), role.to_string(), split.split.to_string()];
                            for (b, bin) in rep.bins.iter().enumerate() {
                                let n = rep.bins.len() as f64;
                                let mut r = base.clone();
                                r.extend([
                                    b.to_string(),
                                    (b as f64 / n).to_string(),
                                    ((b + 1) as f64 / n).to_string(),
                                    bin.confidence_mean.to_string(),
                                    bin.accuracy.to_string(),
                                    bin.count.to_string(),
                                ]);
                                bin_rows.push(r);
                            }
                            let mut r = base;
                            r.extend([rep.ece.to_string(), acc.to_string(), rep.bin_count().to_string()]);
                            rows.push(r);
                        }
                    }
                }
                write_rows(&out.join("ece.csv"), &ECE_COLUMNS, &rows)?;
                write_rows(&out.join("ece_bins.csv"), &ECE_BIN_COLUMNS, &bin_rows)?;
            }
            Diagnostic::Variance | Diagnostic::Bias => {
                let mut rows = Vec::new();
                for s in &sets {
                    let mix = s.wiring.target_mixing(exp.mixing_teacher);
                    let (t, a) = (s.teacher.as_ref(), s.anchor.as_ref());
                    let missing = (mix.teacher > 0.0 && t.is_none()) || (mix.anchor > 0.0 && a.is_none());
                    if missing {
                        return Err(CliError::Invalid(format!(
                            "{} target {mix} of `{}` needs teacher/anchor checkpoints that are absent",
                            s.wiring, s.name
                        )));
                    }
                    let value = if *d == Diagnostic::Variance {
                        let st = s.student.as_ref().expect("checked");
                        metrics::loss_variance(st, t, a, &data.train, mix).map_err(runtime)?.to_string()
                    } else {
                        let b: BiasTerm = metrics::bias_term(t, a, &data.train, mix).map_err(runtime)?;
                        b.to_string()
                    };
                    rows.push(vec![s.name.clone(), s.wiring.to_string(), mix.teacher.to_string(), mix.anchor.to_string(), value]);
                }
                let (file, header) = match d {
                    Diagnostic::Variance => ("variance.csv", VARIANCE_COLUMNS),
                    _ => ("bias.csv", BIAS_COLUMNS),
                };
                write_rows(&out.join(file), &header, &rows)?;
            }
        }
    }
    Ok(())
}
