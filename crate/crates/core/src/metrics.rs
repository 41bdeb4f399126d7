//! Evaluation, forgetting statistics and report emission.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::factorized::param_overhead;
use crate::model::ToyEncoderClassifier;
use crate::params::Parameterized;
use crate::tasks::{Dataset, Split};

const EVAL_CHUNK: usize = 128;

/// Fraction of `data` the model misclassifies when routed to `task`.
pub fn evaluate(model: &ToyEncoderClassifier, data: &Dataset, task: &str) -> Result<f64> {
    if !model.has_task(task) {
        return Err(Error::UnknownTask(task.to_string()));
    }
    if data.is_empty() {
        return Err(Error::Argument(format!("no samples to evaluate for {task}")));
    }
    let mut wrong = 0usize;
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(EVAL_CHUNK) {
        let batch = data.batch(chunk)?;
        let pred = model.predict_batch(&batch.frames, batch.seq_len, task)?;
        wrong += pred.iter().zip(&batch.labels).filter(|(p, y)| p != y).count();
    }
    Ok(wrong as f64 / data.len() as f64)
}

/// Relative change `(new − old) / old`. A zero baseline has no relative
/// change; the error carries the absolute change instead.
pub fn degradation(old_err: f64, new_err: f64) -> Result<f64> {
    if !(old_err >= 0.0) || !(new_err >= 0.0) {
        return Err(Error::Argument(format!("error rates must be ≥ 0, got {old_err} and {new_err}")));
    }
    if old_err == 0.0 {
        return Err(Error::UndefinedRate { absolute: new_err - old_err });
    }
    Ok((new_err - old_err) / old_err)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub iteration: usize,
    pub strategy: String,
    pub task_id: String,
    pub group: usize,
    pub split: Split,
    pub error_rate: f64,
    pub n_samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportancePoint {
    pub strategy: String,
    pub iteration: usize,
    pub threshold: f64,
    pub normalize: bool,
    pub fraction: f64,
}

/// Parameter accounting for the model that produced a report, next to the
/// per-matrix and whole-model figures it is compared against.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverheadContext {
    pub model_params: usize,
    pub params_per_task: usize,
    pub fraction_per_task: f64,
    /// Per-matrix fraction at k = 8, 1024 × 1024.
    pub reference_matrix_fraction: f64,
    /// Whole-model fraction per language for a 774M model that grows to 969M
    /// with 32 languages.
    pub reference_model_fraction: f64,
}

impl OverheadContext {
    /// Accounting for `model` with `tasks` tasks registered.
    pub fn for_model(model: &ToyEncoderClassifier) -> Result<Self> {
        let per_task = model.per_task_param_count();
        let total = model.param_count();
        let base = total - per_task * model.tasks().len();
        Ok(Self {
            model_params: base,
            params_per_task: per_task,
            fraction_per_task: per_task as f64 / base as f64,
            reference_matrix_fraction: param_overhead(8, 1024, 1024)?.fraction_of_dense,
            reference_model_fraction: reference_model_fraction(),
        })
    }
}

/// `(969M − 774M) / 32 / 774M`.
pub fn reference_model_fraction() -> f64 {
    (969e6 - 774e6) / 32.0 / 774e6
}

/// Per-strategy, per-iteration view derived from the rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationSummary {
    pub strategy: String,
    pub iteration: usize,
    pub split: Split,
    /// Mean error per task group.
    pub group_averages: BTreeMap<usize, f64>,
    /// Relative change of each earlier group's average since the previous
    /// iteration; absent where undefined.
    pub group_degradation: BTreeMap<usize, f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub importance: Vec<ImportancePoint>,
    pub overhead: Option<OverheadContext>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Csv,
    Json,
}

impl FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Format::Csv),
            "json" => Ok(Format::Json),
            other => Err(Error::Argument(format!("unknown report format `{other}`"))),
        }
    }
}

/// Parses a comma-separated format list such as `csv,json`.
pub fn parse_formats(s: &str) -> Result<Vec<Format>> {
    let mut out = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let f = part.parse()?;
        if !out.contains(&f) {
            out.push(f);
        }
    }
    if out.is_empty() {
        return Err(Error::Argument("no report format given".into()));
    }
    Ok(out)
}

impl EvalReport {
    /// Adds a row; each (iteration, strategy, task, split) may appear once.
    pub fn push(&mut self, row: EvalRow) -> Result<()> {
        if !(0.0..=1.0).contains(&row.error_rate) {
            return Err(Error::Contract(format!("error rate {} outside [0, 1]", row.error_rate)));
        }
        let dup = self.rows.iter().any(|r| {
            r.iteration == row.iteration && r.strategy == row.strategy && r.task_id == row.task_id && r.split == row.split
        });
        if dup {
            return Err(Error::Contract(format!(
                "{} already evaluated on {} at iteration {} under {}",
                row.task_id, row.split, row.iteration, row.strategy
            )));
        }
        self.rows.push(row);
        Ok(())
    }

    /// Evaluates every task registered in `model` and belonging to a known
    /// group, and records the rows.
    pub fn record(
        &mut self,
        model: &ToyEncoderClassifier,
        data: &[(&Dataset, usize)],
        iteration: usize,
        strategy: &str,
    ) -> Result<()> {
        for (dataset, group) in data {
            if !model.has_task(&dataset.task_id) {
                continue;
            }
            let err = evaluate(model, dataset, &dataset.task_id)?;
            self.push(EvalRow {
                iteration,
                strategy: strategy.to_string(),
                task_id: dataset.task_id.clone(),
                group: *group,
                split: dataset.split,
                error_rate: err,
                n_samples: dataset.len(),
            })?;
        }
        Ok(())
    }

    pub fn strategies(&self) -> Vec<String> {
        let mut seen = Vec::new();
        for r in &self.rows {
            if !seen.contains(&r.strategy) {
                seen.push(r.strategy.clone());
            }
        }
        seen
    }

    fn matching<'a>(&'a self, strategy: &'a str, iteration: usize, split: Split) -> impl Iterator<Item = &'a EvalRow> {
        self.rows
            .iter()
            .filter(move |r| r.strategy == strategy && r.iteration == iteration && r.split == split)
    }

    /// Unweighted mean error over `group`'s tasks.
    pub fn group_average(&self, strategy: &str, iteration: usize, group: usize, split: Split) -> Result<f64> {
        let errs: Vec<f64> = self
            .matching(strategy, iteration, split)
            .filter(|r| r.group == group)
            .map(|r| r.error_rate)
            .collect();
        if errs.is_empty() {
            return Err(Error::Argument(format!(
                "no {split} rows for group {group} at iteration {iteration} under {strategy}"
            )));
        }
        Ok(errs.iter().sum::<f64>() / errs.len() as f64)
    }

    /// Relative change of a group's average error from `iteration − 1` to
    /// `iteration`.
    pub fn group_degradation(&self, strategy: &str, iteration: usize, group: usize, split: Split) -> Result<f64> {
        if iteration == 0 {
            return Err(Error::Argument("iteration 0 has no predecessor".into()));
        }
        let old = self.group_average(strategy, iteration - 1, group, split)?;
        let new = self.group_average(strategy, iteration, group, split)?;
        degradation(old, new)
    }

    /// Every (strategy, iteration, split) combination present, in order of
    /// first appearance of the strategy, then iteration, then split.
    pub fn summaries(&self) -> Vec<IterationSummary> {
        let mut out = Vec::new();
        for strategy in self.strategies() {
            let keys: BTreeSet<(usize, Split)> = self
                .rows
                .iter()
                .filter(|r| r.strategy == strategy)
                .map(|r| (r.iteration, r.split))
                .collect();
            for (iteration, split) in keys {
                let groups: BTreeSet<usize> = self.matching(&strategy, iteration, split).map(|r| r.group).collect();
                let mut group_averages = BTreeMap::new();
                let mut group_degradation = BTreeMap::new();
                for g in groups {
                    group_averages.insert(g, self.group_average(&strategy, iteration, g, split).expect("group has rows"));
                    if iteration > 0 {
                        if let Ok(d) = self.group_degradation(&strategy, iteration, g, split) {
                            group_degradation.insert(g, d);
                        }
                    }
                }
                out.push(IterationSummary {
                    strategy: strategy.clone(),
                    iteration,
                    split,
                    group_averages,
                    group_degradation,
                });
            }
        }
        out
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(r).map_err(|e| Error::Contract(format!("CSV encoding failed: {e}")))?;
        }
        if self.rows.is_empty() {
            w.write_record(CSV_COLUMNS).map_err(|e| Error::Contract(format!("CSV encoding failed: {e}")))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Contract(format!("CSV encoding failed: {e}")))?;
        Ok(String::from_utf8(bytes).expect("CSV output is UTF-8"))
    }

    pub fn from_csv(text: &str) -> Result<Vec<EvalRow>> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let headers = r.headers().map_err(|e| Error::Argument(format!("bad CSV header: {e}")))?;
        if headers.iter().collect::<Vec<_>>() != CSV_COLUMNS {
            return Err(Error::Argument(format!("unexpected CSV columns {headers:?}")));
        }
        r.deserialize()
            .map(|row| row.map_err(|e| Error::Argument(format!("bad CSV row: {e}"))))
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = JsonReport {
            rows: &self.rows,
            summaries: self.summaries(),
            importance: &self.importance,
            overhead: self.overhead.as_ref(),
        };
        serde_json::to_string_pretty(&doc)
            .map(|s| s + "\n")
            .map_err(|e| Error::Contract(format!("JSON encoding failed: {e}")))
    }

    /// Writes `report.csv` and/or `report.json` into `dir`.
    pub fn emit(&self, dir: &Path, formats: &[Format]) -> Result<Vec<std::path::PathBuf>> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut written = Vec::new();
        for f in formats {
            let (name, body) = match f {
                Format::Csv => ("report.csv", self.to_csv()?),
                Format::Json => ("report.json", self.to_json()?),
            };
            let path = dir.join(name);
            fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
            written.push(path);
        }
        Ok(written)
    }

    /// Reads a report back from `report.json`.
    pub fn load_json(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let doc: JsonReportOwned =
            serde_json::from_str(&text).map_err(|e| Error::Json { path: path.into(), source: e })?;
        Ok(Self { rows: doc.rows, importance: doc.importance, overhead: doc.overhead })
    }

    /// Human-readable table of group averages (in percent) and degradation.
    pub fn render(&self, split: Split) -> String {
        let mut out = String::new();
        for s in self.summaries().into_iter().filter(|s| s.split == split) {
            let _ = write!(out, "{:<12} iter {:>2}", s.strategy, s.iteration);
            for (g, avg) in &s.group_averages {
                let _ = write!(out, "  g{g} {:>6.2}%", 100.0 * avg);
                if let Some(d) = s.group_degradation.get(g) {
                    let _ = write!(out, " ({:+.1}%)", 100.0 * d);
                }
            }
            out.push('\n');
        }
        for p in &self.importance {
            let _ = writeln!(
                out,
                "importance {:<12} iter {:>2}  tau {} normalize {}  {:.2}%",
                p.strategy,
                p.iteration,
                p.threshold,
                p.normalize,
                100.0 * p.fraction
            );
        }
        if let Some(o) = &self.overhead {
            let _ = writeln!(
                out,
                "overhead: {} params per task on {} shared ({:.2}%); 1024x1024 k=8 matrix {:.3}%; 774M->969M over 32 languages {:.2}% per language",
                o.params_per_task,
                o.model_params,
                100.0 * o.fraction_per_task,
                100.0 * o.reference_matrix_fraction,
                100.0 * o.reference_model_fraction
            );
        }
        out
    }
}

pub const CSV_COLUMNS: [&str; 7] = ["iteration", "strategy", "task_id", "group", "split", "error_rate", "n_samples"];

#[derive(Serialize)]
struct JsonReport<'a> {
    rows: &'a [EvalRow],
    summaries: Vec<IterationSummary>,
    importance: &'a [ImportancePoint],
    overhead: Option<&'a OverheadContext>,
}

#[derive(Deserialize)]
struct JsonReportOwned {
    rows: Vec<EvalRow>,
    #[allow(dead_code)]
    summaries: Vec<IterationSummary>,
    importance: Vec<ImportancePoint>,
    overhead: Option<OverheadContext>,
}
