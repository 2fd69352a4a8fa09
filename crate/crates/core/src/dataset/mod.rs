//! Score matrices, factor tables, splitting and masking.
//!
//! A [`ScoreMatrix`] is a sparse set of `(model, task, score)` observations
//! over fixed model and task registries. Train and validation matrices
//! produced by [`split`] share the registries of the matrix they came from,
//! so indices stay comparable across every derived matrix.

mod factors;
mod split;
pub mod synth;

use std::collections::HashMap;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub use factors::{
    load_model_factors, load_task_factors, read_model_factors, read_task_factors,
    write_model_factors, write_task_factors, Factor, FactorKind, FactorSide, FactorValue,
    ModelRecord, Records, TaskRecord, Transform,
};
pub use split::{mask_to_sparsity, split, Scenario, SplitSpec};

pub const SCORES_HEADER: [&str; 4] = ["model", "task", "score", "source"];

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub model: usize,
    pub task: usize,
    pub score: f64,
    pub source: Option<String>,
}

/// Non-fatal observations made while loading a file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LoadWarning {
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    models: Vec<String>,
    tasks: Vec<String>,
    entries: Vec<Entry>,
    cells: HashMap<(usize, usize), usize>,
}

impl ScoreMatrix {
    /// Builds a matrix, checking every invariant (score range, bounds,
    /// uniqueness of cells, unique registry names).
    pub fn new(models: Vec<String>, tasks: Vec<String>, entries: Vec<Entry>) -> Result<Self> {
        check_unique("model", &models)?;
        check_unique("task", &tasks)?;
        let mut cells = HashMap::with_capacity(entries.len());
        for (k, e) in entries.iter().enumerate() {
            if e.model >= models.len() || e.task >= tasks.len() {
                return Err(Error::Index(format!(
                    "entry ({}, {}) outside a {}x{} registry",
                    e.model,
                    e.task,
                    models.len(),
                    tasks.len()
                )));
            }
            if !(0.0..=1.0).contains(&e.score) {
                return Err(Error::Validation(format!(
                    "score {} for ({}, {}) is outside [0, 1]",
                    e.score, models[e.model], tasks[e.task]
                )));
            }
            if cells.insert((e.model, e.task), k).is_some() {
                return Err(Error::Validation(format!(
                    "duplicate cell ({}, {})",
                    models[e.model], tasks[e.task]
                )));
            }
        }
        Ok(ScoreMatrix {
            models,
            tasks,
            entries,
            cells,
        })
    }

    /// Same registries, a subset of the entries. Entry order is preserved.
    pub fn filtered(&self, mut keep: impl FnMut(&Entry) -> bool) -> ScoreMatrix {
        let entries: Vec<Entry> = self.entries.iter().filter(|e| keep(e)).cloned().collect();
        self.with_entries(entries)
    }

    pub(crate) fn with_entries(&self, entries: Vec<Entry>) -> ScoreMatrix {
        let cells = entries
            .iter()
            .enumerate()
            .map(|(k, e)| ((e.model, e.task), k))
            .collect();
        ScoreMatrix {
            models: self.models.clone(),
            tasks: self.tasks.clone(),
            entries,
            cells,
        }
    }

    pub fn models(&self) -> &[String] {
        &self.models
    }

    pub fn tasks(&self) -> &[String] {
        &self.tasks
    }

    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    pub fn n_models(&self) -> usize {
        self.models.len()
    }

    pub fn n_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn grid_size(&self) -> usize {
        self.models.len() * self.tasks.len()
    }

    pub fn density(&self) -> f64 {
        if self.grid_size() == 0 {
            return 0.0;
        }
        self.entries.len() as f64 / self.grid_size() as f64
    }

    pub fn sparsity(&self) -> f64 {
        1.0 - self.density()
    }

    pub fn get(&self, model: usize, task: usize) -> Option<f64> {
        self.cells.get(&(model, task)).map(|&k| self.entries[k].score)
    }

    pub fn model_index(&self, name: &str) -> Option<usize> {
        self.models.iter().position(|m| m == name)
    }

    pub fn task_index(&self, name: &str) -> Option<usize> {
        self.tasks.iter().position(|t| t == name)
    }

    pub fn entries_for_model(&self, model: usize) -> impl Iterator<Item = &Entry> {
        self.entries.iter().filter(move |e| e.model == model)
    }

    pub fn entries_for_task(&self, task: usize) -> impl Iterator<Item = &Entry> {
        self.entries.iter().filter(move |e| e.task == task)
    }

    /// Content hash over registries and entries, used to tag run directories.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for m in &self.models {
            h.update(m.as_bytes());
            h.update([0u8]);
        }
        h.update([1u8]);
        for t in &self.tasks {
            h.update(t.as_bytes());
            h.update([0u8]);
        }
        h.update([1u8]);
        for e in &self.entries {
            h.update((e.model as u64).to_le_bytes());
            h.update((e.task as u64).to_le_bytes());
            h.update(e.score.to_bits().to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(SCORES_HEADER).map_err(csv_err)?;
        for e in &self.entries {
            let score = e.score.to_string();
            w.write_record([
                self.models[e.model].as_str(),
                self.tasks[e.task].as_str(),
                score.as_str(),
                e.source.as_deref().unwrap_or(""),
            ])
            .map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::io("<writer>", e))?;
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(file)
    }
}

fn check_unique(what: &str, names: &[String]) -> Result<()> {
    let mut seen = HashMap::with_capacity(names.len());
    for n in names {
        if seen.insert(n.as_str(), ()).is_some() {
            return Err(Error::Linkage(format!("{what} '{n}' registered twice")));
        }
    }
    Ok(())
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
    Error::Parse {
        line,
        message: e.to_string(),
    }
}

/// One row of a scores file before range validation.
#[derive(Debug, Clone, PartialEq)]
pub struct RawScore {
    pub line: usize,
    pub model: String,
    pub task: String,
    pub value: f64,
    pub source: Option<String>,
}

fn read_raw_scores<R: Read>(reader: R) -> Result<Vec<RawScore>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header = rdr.headers().map_err(csv_err)?.clone();
    if header.is_empty() || (header.len() == 1 && header[0].is_empty()) {
        return Err(Error::Parse {
            line: 1,
            message: "empty file: missing header".into(),
        });
    }
    let cols: Vec<&str> = header.iter().collect();
    let ok = cols == SCORES_HEADER[..3] || cols == SCORES_HEADER[..];
    if !ok {
        return Err(Error::Parse {
            line: 1,
            message: format!(
                "header {:?} does not match '{}'",
                cols,
                SCORES_HEADER.join(",")
            ),
        });
    }

    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(csv_err)?;
        let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
        if rec.len() == 1 && rec[0].is_empty() {
            continue;
        }
        if rec.len() < 3 || rec.len() > cols.len() {
            return Err(Error::Parse {
                line,
                message: format!("expected {} fields, found {}", cols.len(), rec.len()),
            });
        }
        let model = rec[0].to_string();
        let task = rec[1].to_string();
        if model.is_empty() || task.is_empty() {
            return Err(Error::Parse {
                line,
                message: "model and task must be non-empty".into(),
            });
        }
        let value: f64 = rec[2].parse().map_err(|_| Error::Parse {
            line,
            message: format!("score '{}' is not a number", &rec[2]),
        })?;
        if !value.is_finite() {
            return Err(Error::Parse {
                line,
                message: format!("score '{}' is not finite", &rec[2]),
            });
        }
        let source = rec.get(3).filter(|s| !s.is_empty()).map(str::to_string);
        rows.push(RawScore {
            line,
            model,
            task,
            value,
            source,
        });
    }
    if rows.is_empty() {
        return Err(Error::Parse {
            line: 2,
            message: "no score rows".into(),
        });
    }
    Ok(rows)
}

fn assemble(rows: Vec<RawScore>) -> Result<(ScoreMatrix, Vec<LoadWarning>)> {
    let mut models: Vec<String> = Vec::new();
    let mut tasks: Vec<String> = Vec::new();
    let mut model_ix: HashMap<String, usize> = HashMap::new();
    let mut task_ix: HashMap<String, usize> = HashMap::new();
    let mut seen: HashMap<(usize, usize), usize> = HashMap::new();
    let mut entries = Vec::with_capacity(rows.len());
    let mut warnings = Vec::new();

    for row in rows {
        if !(0.0..=1.0).contains(&row.value) {
            return Err(Error::Validation(format!(
                "line {}: score {} for ({}, {}) is outside [0, 1]",
                row.line, row.value, row.model, row.task
            )));
        }
        let m = *model_ix.entry(row.model.clone()).or_insert_with(|| {
            models.push(row.model.clone());
            models.len() - 1
        });
        let t = *task_ix.entry(row.task.clone()).or_insert_with(|| {
            tasks.push(row.task.clone());
            tasks.len() - 1
        });
        if let Some(first) = seen.get(&(m, t)) {
            let w = LoadWarning {
                line: row.line,
                message: format!(
                    "duplicate score for ({}, {}); keeping the value from line {first}",
                    row.model, row.task
                ),
            };
            log::warn!("line {}: {}", w.line, w.message);
            warnings.push(w);
            continue;
        }
        seen.insert((m, t), row.line);
        entries.push(Entry {
            model: m,
            task: t,
            score: row.value,
            source: row.source,
        });
    }
    Ok((ScoreMatrix::new(models, tasks, entries)?, warnings))
}

/// Parses a scores table. Registries follow first-appearance order; a repeated
/// `(model, task)` keeps its first value and yields a warning.
pub fn read_scores<R: Read>(reader: R) -> Result<(ScoreMatrix, Vec<LoadWarning>)> {
    assemble(read_raw_scores(reader)?)
}

pub fn load_scores(path: impl AsRef<Path>) -> Result<ScoreMatrix> {
    Ok(load_scores_with_warnings(path)?.0)
}

pub fn load_scores_with_warnings(
    path: impl AsRef<Path>,
) -> Result<(ScoreMatrix, Vec<LoadWarning>)> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_scores(file)
}

/// Loads raw metric values and rescales each task to [0, 1] by min-max.
/// A task whose values are all equal maps to 1.0.
pub fn load_raw_scores_normalized(
    path: impl AsRef<Path>,
) -> Result<(ScoreMatrix, Vec<LoadWarning>)> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let rows = read_raw_scores(file)?;
    assemble(normalize_per_task(rows))
}

pub fn normalize_per_task(mut rows: Vec<RawScore>) -> Vec<RawScore> {
    let mut range: HashMap<String, (f64, f64)> = HashMap::new();
    for r in &rows {
        let e = range
            .entry(r.task.clone())
            .or_insert((f64::INFINITY, f64::NEG_INFINITY));
        e.0 = e.0.min(r.value);
        e.1 = e.1.max(r.value);
    }
    for r in &mut rows {
        let (lo, hi) = range[&r.task];
        r.value = if hi > lo { (r.value - lo) / (hi - lo) } else { 1.0 };
    }
    rows
}

/// Scores plus factor records aligned with the score registries.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub scores: ScoreMatrix,
    pub records: Records,
}

impl Dataset {
    pub fn load(
        scores: impl AsRef<Path>,
        models: impl AsRef<Path>,
        tasks: impl AsRef<Path>,
    ) -> Result<Self> {
        let scores = load_scores(scores)?;
        let model_records = load_model_factors(models)?;
        let task_records = load_task_factors(tasks)?;
        let records = Records::link(&scores, model_records, task_records)?;
        Ok(Dataset { scores, records })
    }

    /// The collaborative score matrix shipped with the crate (72 models x 29 tasks).
    pub fn bundled() -> Self {
        let (scores, _) = read_scores(BUNDLED_SCORES.as_bytes()).expect("bundled scores parse");
        let models = read_model_factors(BUNDLED_MODELS.as_bytes()).expect("bundled models parse");
        let tasks = read_task_factors(BUNDLED_TASKS.as_bytes()).expect("bundled tasks parse");
        let records = Records::link(&scores, models, tasks).expect("bundled tables link");
        Dataset { scores, records }
    }

    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.scores.content_hash().as_bytes());
        h.update(self.records.content_hash().as_bytes());
        hex::encode(h.finalize())
    }
}

pub const BUNDLED_SCORES: &str = include_str!("../../data/scores.csv");
pub const BUNDLED_MODELS: &str = include_str!("../../data/models.csv");
pub const BUNDLED_TASKS: &str = include_str!("../../data/tasks.csv");

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<(ScoreMatrix, Vec<LoadWarning>)> {
        read_scores(text.as_bytes())
    }

    #[test]
    fn three_rows_give_two_by_two() {
        let (m, w) = parse("model,task,score,source\nA,T1,0.5,\nA,T2,0.7,\nB,T1,0.2,\n").unwrap();
        assert!(w.is_empty());
        assert_eq!(m.n_models(), 2);
        assert_eq!(m.n_tasks(), 2);
        assert_eq!(m.density(), 0.75);
        assert_eq!(m.get(1, 0), Some(0.2));
        assert_eq!(m.get(1, 1), None);
    }

    #[test]
    fn out_of_range_score_names_row() {
        let err = parse("model,task,score,source\nA,T1,0.5,\nA,T2,1.3,\n").unwrap_err();
        match err {
            Error::Validation(msg) => assert!(msg.contains("line 3"), "{msg}"),
            e => panic!("unexpected {e:?}"),
        }
    }

    #[test]
    fn malformed_row_reports_line() {
        let err = parse("model,task,score,source\nA,T1,0.5,\nA,T2,abc,\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err:?}");
    }

    #[test]
    fn wrong_header_rejected() {
        let err = parse("name,task,score\nA,T1,0.5\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
    }

    #[test]
    fn empty_file_rejected() {
        assert!(matches!(parse("").unwrap_err(), Error::Parse { .. }));
        assert!(matches!(
            parse("model,task,score,source\n").unwrap_err(),
            Error::Parse { .. }
        ));
    }

    #[test]
    fn duplicate_keeps_first_with_warning() {
        let (m, w) = parse("model,task,score\nA,T1,0.5\nA,T1,0.9\n").unwrap();
        assert_eq!(m.len(), 1);
        assert_eq!(m.get(0, 0), Some(0.5));
        assert_eq!(w.len(), 1);
        assert_eq!(w[0].line, 3);
    }

    #[test]
    fn registry_follows_file_order() {
        let (m, _) = parse("model,task,score\nZ,T9,0.1\nA,T1,0.2\nZ,T1,0.3\n").unwrap();
        assert_eq!(m.models(), ["Z", "A"]);
        assert_eq!(m.tasks(), ["T9", "T1"]);
    }

    #[test]
    fn min_max_normalization() {
        let rows = read_raw_scores("model,task,score\nA,T,10\nB,T,30\nC,T,20\nA,U,5\n".as_bytes())
            .unwrap();
        let (m, _) = assemble(normalize_per_task(rows)).unwrap();
        assert_eq!(m.get(0, 0), Some(0.0));
        assert_eq!(m.get(1, 0), Some(1.0));
        assert_eq!(m.get(2, 0), Some(0.5));
        assert_eq!(m.get(0, 1), Some(1.0));
    }

    #[test]
    fn bundled_shape() {
        let d = Dataset::bundled();
        assert_eq!(d.scores.n_models(), 72);
        assert_eq!(d.scores.n_tasks(), 29);
        assert!((d.scores.density() - 0.56).abs() < 0.005, "{}", d.scores.density());
    }
}
