//! Command implementations behind the CLI: benchmark construction, runs,
//! ablations, sweeps and report post-processing.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{
    build_task_stream, build_task_stream_with_order, parse_conll, write_conll, Corpus, DevMode,
    Lexicon, Task, TaskSpec, TaskStream, TaskStreamOptions,
};
use crate::error::{Error, Result};
use crate::metrics::write_confusion_csv;
use crate::protocol::{run_stream, Arm, RunConfig, RunReport};
use crate::relabel::BetaSchedule;

pub const MANIFEST_FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const REPORT_FILE: &str = "report.json";
pub const METADATA_FILE: &str = "metadata.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub dev: usize,
    pub test: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ManifestTask {
    pub index: usize,
    pub new_classes: Vec<String>,
    pub old_classes: Vec<String>,
    pub train: String,
    pub train_gold: String,
    pub dev: String,
    pub test: String,
    pub counts: SplitCounts,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Manifest {
    pub format_version: u32,
    pub seed: u64,
    pub classes_per_task: usize,
    pub class_order: Vec<String>,
    pub dev_mode: DevMode,
    /// Lexicon file relative to the manifest, if any.
    pub lexicon: Option<String>,
    pub tasks: Vec<ManifestTask>,
}

impl Manifest {
    /// Per-task class lists and split sizes as an aligned text table.
    pub fn stats_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<5} {:>7} {:>6} {:>6}  classes", "task", "#train", "#dev", "#test");
        for t in &self.tasks {
            let _ = writeln!(
                out,
                "{:<5} {:>7} {:>6} {:>6}  {}",
                t.index,
                t.counts.train,
                t.counts.dev,
                t.counts.test,
                t.new_classes.join(", ")
            );
        }
        out
    }
}

/// Where the benchmark's class order comes from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ClassOrder {
    Seeded { task_count: usize },
    /// One class per line.
    File(PathBuf),
}

#[derive(Debug, Clone)]
pub struct BuildTasks {
    pub corpus: PathBuf,
    pub order: ClassOrder,
    pub classes_per_task: usize,
    pub seed: u64,
    pub dev_mode: DevMode,
    pub lexicon: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub force: bool,
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write(path, text)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    serde_json::from_str(&read(path)?).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })
}

/// Creates `dir`, refusing to reuse a non-empty directory unless `force`.
pub fn prepare_out_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let occupied = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .next()
            .is_some();
        if occupied && !force {
            return Err(Error::Usage(format!(
                "output directory {} already exists; pass --force to overwrite",
                dir.display()
            )));
        }
        if occupied {
            fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn load_corpus(path: &Path) -> Result<Corpus> {
    parse_conll(&read(path)?)
}

fn load_split(path: &Path) -> Result<Corpus> {
    let text = read(path)?;
    if text.trim().is_empty() {
        return Ok(Corpus::empty());
    }
    parse_conll(&text)
}

/// Builds the task stream, writes split files and the manifest into `out_dir`.
pub fn build_tasks(args: &BuildTasks) -> Result<Manifest> {
    let corpus = load_corpus(&args.corpus)?;
    let options = TaskStreamOptions {
        dev_mode: args.dev_mode,
        ..TaskStreamOptions::default()
    };
    let stream = match &args.order {
        ClassOrder::Seeded { task_count } => {
            build_task_stream(&corpus, *task_count, args.classes_per_task, args.seed, options)?
        }
        ClassOrder::File(path) => {
            let order: Vec<String> = read(path)?
                .lines()
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .map(str::to_string)
                .collect();
            build_task_stream_with_order(&corpus, &order, args.classes_per_task, args.seed, options)?
        }
    };
    let lexicon = args.lexicon.as_deref().map(Lexicon::load).transpose()?;
    prepare_out_dir(&args.out_dir, args.force)?;

    let mut tasks = Vec::with_capacity(stream.task_count());
    for task in &stream.tasks {
        let i = task.spec.index;
        let name = |split: &str| format!("task{i:02}_{split}.tsv");
        let files = [
            (name("train"), &task.train),
            (name("train_gold"), &task.train_gold),
            (name("dev"), &task.dev),
            (name("test"), &task.test),
        ];
        for (file, corpus) in &files {
            write(&args.out_dir.join(file), write_conll(corpus))?;
        }
        let [train, train_gold, dev, test] = files.map(|(f, _)| f);
        tasks.push(ManifestTask {
            index: i,
            new_classes: task.spec.new_classes.clone(),
            old_classes: task.spec.old_classes.clone(),
            train,
            train_gold,
            dev,
            test,
            counts: SplitCounts {
                train: task.train.len(),
                dev: task.dev.len(),
                test: task.test.len(),
            },
        });
    }
    let lexicon_file = match lexicon {
        Some(lex) => {
            lex.save(&args.out_dir.join("lexicon.json"))?;
            Some("lexicon.json".to_string())
        }
        None => None,
    };
    let manifest = Manifest {
        format_version: MANIFEST_FORMAT_VERSION,
        seed: stream.seed,
        classes_per_task: stream.classes_per_task,
        class_order: stream.class_order.clone(),
        dev_mode: stream.dev_mode,
        lexicon: lexicon_file,
        tasks,
    };
    write_json(&args.out_dir.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

/// Reads a manifest and every split it references.
pub fn load_manifest(path: &Path) -> Result<(TaskStream, Option<Lexicon>)> {
    let manifest: Manifest = read_json(path)?;
    if manifest.format_version != MANIFEST_FORMAT_VERSION {
        return Err(Error::Config(format!(
            "{}: unsupported manifest format version {}",
            path.display(),
            manifest.format_version
        )));
    }
    let base = path.parent().unwrap_or(Path::new("."));
    let mut tasks = Vec::with_capacity(manifest.tasks.len());
    let mut class_to_task = BTreeMap::new();
    for (expected, t) in manifest.tasks.iter().enumerate() {
        if t.index != expected {
            return Err(Error::Config(format!(
                "{}: task {} listed at position {expected}",
                path.display(),
                t.index
            )));
        }
        for c in &t.new_classes {
            class_to_task.insert(c.clone(), t.index);
        }
        tasks.push(Task {
            spec: TaskSpec {
                index: t.index,
                new_classes: t.new_classes.clone(),
                old_classes: t.old_classes.clone(),
            },
            train: load_split(&base.join(&t.train))?,
            train_gold: load_split(&base.join(&t.train_gold))?,
            dev: load_split(&base.join(&t.dev))?,
            test: load_split(&base.join(&t.test))?,
        });
    }
    let lexicon = manifest
        .lexicon
        .as_ref()
        .map(|f| Lexicon::load(&base.join(f)))
        .transpose()?;
    let stream = TaskStream {
        tasks,
        class_to_task,
        class_order: manifest.class_order,
        seed: manifest.seed,
        classes_per_task: manifest.classes_per_task,
        dev_mode: manifest.dev_mode,
    };
    Ok((stream, lexicon))
}

pub fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let base = match path {
        Some(p) => RunConfig::from_json(&read(p)?).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", p.display())),
            other => other,
        })?,
        None => RunConfig::default(),
    };
    base.with_overrides(overrides)
}

/// One per-step row of a comparative table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct StepRow {
    pub series: String,
    pub step: usize,
    #[serde(rename = "microF1_span")]
    pub micro_f1_span: f64,
    #[serde(rename = "microF1_token")]
    pub micro_f1_token: f64,
    #[serde(rename = "macroF1_token")]
    pub macro_f1_token: f64,
    #[serde(rename = "oldMicroF1_token")]
    pub old_micro_f1_token: Option<f64>,
    #[serde(rename = "newMicroF1_token")]
    pub new_micro_f1_token: f64,
    pub outside_as_entity: usize,
    pub probe: Option<f64>,
}

pub fn step_rows(series: &str, report: &RunReport) -> Vec<StepRow> {
    report
        .steps
        .iter()
        .map(|s| StepRow {
            series: series.to_string(),
            step: s.step,
            micro_f1_span: s.metrics.micro_f1_span,
            micro_f1_token: s.metrics.micro_f1_token,
            macro_f1_token: s.metrics.macro_f1_token,
            old_micro_f1_token: s.metrics.old_micro_f1_token,
            new_micro_f1_token: s.metrics.new_micro_f1_token,
            outside_as_entity: s.metrics.outside_as_entity,
            probe: s.probe,
        })
        .collect()
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Serialize)]
struct EpochLine<'a> {
    step: usize,
    #[serde(flatten)]
    log: &'a crate::contrastive::EpochLog,
}

#[derive(Serialize)]
#[serde(rename_all = "camelCase")]
struct Metadata<'a> {
    created_unix_seconds: u64,
    manifest: &'a Path,
    tool_version: &'static str,
}

/// Writes every artifact of one run into `dir` (which must exist).
pub fn write_run(dir: &Path, report: &RunReport, manifest: &Path) -> Result<()> {
    write_json(&dir.join(REPORT_FILE), report)?;
    let created = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    write_json(
        &dir.join(METADATA_FILE),
        &Metadata {
            created_unix_seconds: created,
            manifest,
            tool_version: env!("CARGO_PKG_VERSION"),
        },
    )?;
    let mut epochs = String::new();
    for s in &report.steps {
        for e in &s.epochs {
            epochs.push_str(&serde_json::to_string(&EpochLine { step: s.step, log: e })?);
            epochs.push('\n');
        }
        let path = dir.join(format!("confusion_step{:02}.csv", s.step));
        let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        write_confusion_csv(&s.metrics, file)?;
    }
    write(&dir.join("epochs.jsonl"), epochs)?;
    write_csv(&dir.join("metrics.csv"), &step_rows("run", report))
}

pub fn train(cfg: &RunConfig, manifest: &Path, out_dir: &Path, force: bool) -> Result<RunReport> {
    let (stream, lexicon) = load_manifest(manifest)?;
    prepare_out_dir(out_dir, force)?;
    let report = run_stream(&stream, cfg, lexicon.as_ref())?;
    write_run(out_dir, &report, manifest)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesTable {
    pub parameter: String,
    pub series: Vec<String>,
    pub rows: Vec<StepRow>,
}

/// Runs each arm (in parallel) with shared seeds into `out_dir/<arm>/`.
pub fn ablate(
    cfg: &RunConfig,
    manifest: &Path,
    arms: &[Arm],
    out_dir: &Path,
    force: bool,
) -> Result<SeriesTable> {
    if arms.is_empty() {
        return Err(Error::Usage("no ablation arms given".into()));
    }
    let (stream, lexicon) = load_manifest(manifest)?;
    prepare_out_dir(out_dir, force)?;
    let reports: Vec<(Arm, RunReport)> = arms
        .par_iter()
        .map(|&arm| {
            info!("running arm {arm}");
            run_stream(&stream, &arm.apply(cfg), lexicon.as_ref()).map(|r| (arm, r))
        })
        .collect::<Result<_>>()?;
    let mut rows = Vec::new();
    for (arm, report) in &reports {
        let dir = out_dir.join(arm.name());
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        write_run(&dir, report, manifest)?;
        rows.extend(step_rows(arm.name(), report));
    }
    let table = SeriesTable {
        parameter: "arm".into(),
        series: arms.iter().map(|a| a.name().to_string()).collect(),
        rows,
    };
    write_json(&out_dir.join("ablation.json"), &table)?;
    write_csv(&out_dir.join("ablation.csv"), &table.rows)?;
    Ok(table)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepParameter {
    Beta,
    EntityThresholdIndex,
    Tau,
}

impl std::str::FromStr for SweepParameter {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "beta" => Ok(Self::Beta),
            "entityThresholdIndex" | "entity-threshold-index" => Ok(Self::EntityThresholdIndex),
            "tau" => Ok(Self::Tau),
            other => Err(Error::Usage(format!(
                "unsupported sweep parameter `{other}`; expected beta, entityThresholdIndex or tau"
            ))),
        }
    }
}

impl SweepParameter {
    pub fn name(self) -> &'static str {
        match self {
            Self::Beta => "beta",
            Self::EntityThresholdIndex => "entityThresholdIndex",
            Self::Tau => "tau",
        }
    }

    /// `cfg` with `value` applied. Beta takes `b` (fixed) or `base,slope`.
    pub fn apply(self, cfg: &RunConfig, value: &str) -> Result<RunConfig> {
        let number = |s: &str| -> Result<f64> {
            s.trim()
                .parse::<f64>()
                .map_err(|_| Error::Usage(format!("`{s}` is not a number")))
        };
        let mut out = cfg.clone();
        match self {
            Self::Beta => {
                let parts: Vec<&str> = value.split(',').collect();
                let mut beta = match parts.as_slice() {
                    [b] => BetaSchedule::fixed(number(b)?),
                    [base, slope] => BetaSchedule::linear(number(base)?, number(slope)?),
                    _ => return Err(Error::Usage(format!("bad beta value `{value}`"))),
                };
                beta.floor = cfg.relabel.beta.floor;
                out.relabel.beta = beta;
            }
            Self::EntityThresholdIndex => out.train.threshold_fraction = number(value)?,
            Self::Tau => out.train.temperature = number(value)?,
        }
        out.validate()?;
        Ok(out)
    }
}

/// One run per value with shared seeds, into `out_dir/<parameter>=<value>/`.
pub fn sweep(
    cfg: &RunConfig,
    manifest: &Path,
    parameter: SweepParameter,
    values: &[String],
    out_dir: &Path,
    force: bool,
) -> Result<SeriesTable> {
    if values.is_empty() {
        return Err(Error::Usage("sweep needs at least one value".into()));
    }
    let configs: Vec<RunConfig> = values
        .iter()
        .map(|v| parameter.apply(cfg, v))
        .collect::<Result<_>>()?;
    let (stream, lexicon) = load_manifest(manifest)?;
    prepare_out_dir(out_dir, force)?;
    let reports: Vec<RunReport> = configs
        .par_iter()
        .map(|c| run_stream(&stream, c, lexicon.as_ref()))
        .collect::<Result<_>>()?;
    let mut rows = Vec::new();
    let mut series = Vec::new();
    for (value, report) in values.iter().zip(&reports) {
        let label = format!("{}={value}", parameter.name());
        let dir = out_dir.join(&label);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        write_run(&dir, report, manifest)?;
        rows.extend(step_rows(&label, report));
        series.push(label);
    }
    let table = SeriesTable {
        parameter: parameter.name().into(),
        series,
        rows,
    };
    write_json(&out_dir.join("sweep.json"), &table)?;
    write_csv(&out_dir.join("sweep.csv"), &table.rows)?;
    Ok(table)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct RelabelStatsRow {
    pub step: usize,
    pub strategy: String,
    pub candidates: usize,
    pub relabeled: usize,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    #[serde(rename = "microF1")]
    pub micro_f1: Option<f64>,
    /// `task:beta:threshold` entries separated by spaces.
    pub thresholds: String,
}

/// Re-derives the relabeling table of a saved run and writes `relabel_stats.csv`.
pub fn relabel_stats(run_dir: &Path) -> Result<Vec<RelabelStatsRow>> {
    let report: RunReport = read_json(&run_dir.join(REPORT_FILE))?;
    let rows: Vec<RelabelStatsRow> = report
        .steps
        .iter()
        .filter_map(|s| s.relabel.as_ref())
        .map(|r| RelabelStatsRow {
            step: r.step,
            strategy: serde_json::to_value(r.strategy)
                .ok()
                .and_then(|v| v.as_str().map(str::to_string))
                .unwrap_or_default(),
            candidates: r.candidates,
            relabeled: r.relabeled,
            precision: r.stats.map(|s| s.precision),
            recall: r.stats.map(|s| s.recall),
            micro_f1: r.stats.map(|s| s.micro_f1),
            thresholds: r
                .per_task
                .iter()
                .map(|t| match t.threshold {
                    Some(th) => format!("{}:{:.3}:{:.4}", t.task, t.effective_beta, th),
                    None => format!("{}:{:.3}:-", t.task, t.effective_beta),
                })
                .collect::<Vec<_>>()
                .join(" "),
        })
        .collect();
    write_csv(&run_dir.join("relabel_stats.csv"), &rows)?;
    Ok(rows)
}

pub fn relabel_stats_table(rows: &[RelabelStatsRow]) -> String {
    let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"));
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<5} {:<9} {:>10} {:>9} {:>9} {:>9} {:>9}",
        "step", "strategy", "candidates", "relabeled", "precision", "recall", "microF1"
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{:<5} {:<9} {:>10} {:>9} {:>9} {:>9} {:>9}",
            r.step,
            r.strategy,
            r.candidates,
            r.relabeled,
            fmt(r.precision),
            fmt(r.recall),
            fmt(r.micro_f1)
        );
    }
    out
}

/// Per-step metrics of one run as an aligned text table.
pub fn metrics_table(report: &RunReport) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<5} {:>10} {:>10} {:>10} {:>10} {:>10} {:>8}",
        "step", "span-F1", "token-F1", "macro-F1", "old-F1", "new-F1", "O->ent"
    );
    for s in &report.steps {
        let m = &s.metrics;
        let _ = writeln!(
            out,
            "{:<5} {:>10.4} {:>10.4} {:>10.4} {:>10} {:>10.4} {:>8}",
            s.step,
            m.micro_f1_span,
            m.micro_f1_token,
            m.macro_f1_token,
            m.old_micro_f1_token.map_or("-".into(), |v| format!("{v:.4}")),
            m.new_micro_f1_token,
            m.outside_as_entity
        );
    }
    out
}
