//! Descriptive factor tables for models and tasks.

use std::collections::HashMap;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{csv_err, ScoreMatrix};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Factor {
    Family,
    PretrainTokens,
    Params,
    GpuHours,
    Flops,
    ContextWindow,
    BatchSize,
    Layers,
    NumHeads,
    KvSize,
    BottleneckActivation,
    Carbon,
    Ability,
    TaskFamily,
    OutputFormat,
    FewShot,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FactorKind {
    Categorical,
    Numerical,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FactorSide {
    Model,
    Task,
}

/// Scalar transform applied to a numerical factor before standardization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Transform {
    Log1p,
    Identity,
}

impl Transform {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Transform::Log1p => x.ln_1p(),
            Transform::Identity => x,
        }
    }
}

impl Factor {
    pub const ALL: [Factor; 16] = [
        Factor::Family,
        Factor::PretrainTokens,
        Factor::Params,
        Factor::GpuHours,
        Factor::Flops,
        Factor::ContextWindow,
        Factor::BatchSize,
        Factor::Layers,
        Factor::NumHeads,
        Factor::KvSize,
        Factor::BottleneckActivation,
        Factor::Carbon,
        Factor::Ability,
        Factor::TaskFamily,
        Factor::OutputFormat,
        Factor::FewShot,
    ];

    pub const MODEL: [Factor; 12] = [
        Factor::Family,
        Factor::PretrainTokens,
        Factor::Params,
        Factor::GpuHours,
        Factor::Flops,
        Factor::ContextWindow,
        Factor::BatchSize,
        Factor::Layers,
        Factor::NumHeads,
        Factor::KvSize,
        Factor::BottleneckActivation,
        Factor::Carbon,
    ];

    pub const TASK: [Factor; 4] = [
        Factor::Ability,
        Factor::TaskFamily,
        Factor::OutputFormat,
        Factor::FewShot,
    ];

    /// Position in [`Factor::ALL`].
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn column(self) -> &'static str {
        match self {
            Factor::Family => "family",
            Factor::PretrainTokens => "pretrain_tokens_b",
            Factor::Params => "params_m",
            Factor::GpuHours => "gpu_hours",
            Factor::Flops => "flops",
            Factor::ContextWindow => "context_window",
            Factor::BatchSize => "batch_size_m",
            Factor::Layers => "layers",
            Factor::NumHeads => "num_heads",
            Factor::KvSize => "kv_size",
            Factor::BottleneckActivation => "bottleneck_activation_size",
            Factor::Carbon => "carbon_tco2eq",
            Factor::Ability => "ability",
            Factor::TaskFamily => "task_family",
            Factor::OutputFormat => "output_format",
            Factor::FewShot => "few_shot",
        }
    }

    pub fn from_column(name: &str) -> Option<Factor> {
        Factor::ALL.into_iter().find(|f| f.column() == name)
    }

    pub fn kind(self) -> FactorKind {
        match self {
            Factor::Family
            | Factor::ContextWindow
            | Factor::BatchSize
            | Factor::Ability
            | Factor::TaskFamily
            | Factor::OutputFormat
            | Factor::FewShot => FactorKind::Categorical,
            _ => FactorKind::Numerical,
        }
    }

    pub fn side(self) -> FactorSide {
        if self.index() < Factor::MODEL.len() {
            FactorSide::Model
        } else {
            FactorSide::Task
        }
    }

    pub fn transform(self) -> Option<Transform> {
        match self {
            Factor::Layers | Factor::NumHeads => Some(Transform::Identity),
            f if f.kind() == FactorKind::Numerical => Some(Transform::Log1p),
            _ => None,
        }
    }
}

impl std::fmt::Display for Factor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.column())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FactorValue<'a> {
    Categorical(Option<&'a str>),
    Numerical(Option<f64>),
}

/// Model factors. Missing numerical values are stored as 0 with the
/// presence flag cleared; missing categorical values are `None`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelRecord {
    pub identifier: String,
    pub family: Option<String>,
    pub pretrain_tokens_b: f64,
    pub params_m: f64,
    pub gpu_hours: f64,
    pub flops: f64,
    pub context_window: Option<String>,
    pub batch_size_m: Option<String>,
    pub layers: f64,
    pub num_heads: f64,
    pub kv_size: f64,
    pub bottleneck_activation_size: f64,
    pub carbon_tco2eq: f64,
    /// Indexed by position in [`Factor::MODEL`].
    pub present: [bool; 12],
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TaskRecord {
    pub identifier: String,
    pub ability: Option<String>,
    pub task_family: Option<String>,
    pub output_format: Option<String>,
    pub few_shot: Option<String>,
}

impl ModelRecord {
    pub fn new(identifier: impl Into<String>) -> Self {
        ModelRecord {
            identifier: identifier.into(),
            ..Default::default()
        }
    }

    pub fn value(&self, factor: Factor) -> FactorValue<'_> {
        let present = factor.side() == FactorSide::Model && self.present[factor.index()];
        let num = |x: f64| FactorValue::Numerical(present.then_some(x));
        match factor {
            Factor::Family => FactorValue::Categorical(self.family.as_deref()),
            Factor::ContextWindow => FactorValue::Categorical(self.context_window.as_deref()),
            Factor::BatchSize => FactorValue::Categorical(self.batch_size_m.as_deref()),
            Factor::PretrainTokens => num(self.pretrain_tokens_b),
            Factor::Params => num(self.params_m),
            Factor::GpuHours => num(self.gpu_hours),
            Factor::Flops => num(self.flops),
            Factor::Layers => num(self.layers),
            Factor::NumHeads => num(self.num_heads),
            Factor::KvSize => num(self.kv_size),
            Factor::BottleneckActivation => num(self.bottleneck_activation_size),
            Factor::Carbon => num(self.carbon_tco2eq),
            _ => FactorValue::Categorical(None),
        }
    }

    /// Sets a factor from its textual cell; an empty cell marks it missing.
    pub fn set(&mut self, factor: Factor, cell: &str) -> std::result::Result<(), String> {
        if factor.side() != FactorSide::Model {
            return Err(format!("{factor} is not a model factor"));
        }
        let cell = cell.trim();
        let present = !cell.is_empty();
        self.present[factor.index()] = present;
        let text = present.then(|| cell.to_string());
        let number = || -> std::result::Result<f64, String> {
            if !present {
                return Ok(0.0);
            }
            let x: f64 = cell
                .parse()
                .map_err(|_| format!("{factor}: '{cell}' is not a number"))?;
            if !x.is_finite() || x < 0.0 {
                return Err(format!("{factor}: '{cell}' must be a nonnegative number"));
            }
            Ok(x)
        };
        match factor {
            Factor::Family => self.family = text,
            Factor::ContextWindow => self.context_window = text,
            Factor::BatchSize => self.batch_size_m = text,
            Factor::PretrainTokens => self.pretrain_tokens_b = number()?,
            Factor::Params => self.params_m = number()?,
            Factor::GpuHours => self.gpu_hours = number()?,
            Factor::Flops => self.flops = number()?,
            Factor::Layers => self.layers = number()?,
            Factor::NumHeads => self.num_heads = number()?,
            Factor::KvSize => self.kv_size = number()?,
            Factor::BottleneckActivation => self.bottleneck_activation_size = number()?,
            Factor::Carbon => self.carbon_tco2eq = number()?,
            _ => unreachable!(),
        }
        Ok(())
    }

    /// True when a positive parameter count is recorded.
    pub fn has_params(&self) -> bool {
        self.present[Factor::Params.index()] && self.params_m > 0.0
    }

    fn cell(&self, factor: Factor) -> String {
        match self.value(factor) {
            FactorValue::Categorical(c) => c.unwrap_or("").to_string(),
            FactorValue::Numerical(x) => x.map(|x| x.to_string()).unwrap_or_default(),
        }
    }
}

impl TaskRecord {
    pub fn new(identifier: impl Into<String>) -> Self {
        TaskRecord {
            identifier: identifier.into(),
            ..Default::default()
        }
    }

    pub fn value(&self, factor: Factor) -> FactorValue<'_> {
        FactorValue::Categorical(match factor {
            Factor::Ability => self.ability.as_deref(),
            Factor::TaskFamily => self.task_family.as_deref(),
            Factor::OutputFormat => self.output_format.as_deref(),
            Factor::FewShot => self.few_shot.as_deref(),
            _ => None,
        })
    }

    pub fn set(&mut self, factor: Factor, cell: &str) -> std::result::Result<(), String> {
        let cell = cell.trim();
        let text = (!cell.is_empty()).then(|| cell.to_string());
        match factor {
            Factor::Ability => self.ability = text,
            Factor::TaskFamily => self.task_family = text,
            Factor::OutputFormat => self.output_format = text,
            Factor::FewShot => self.few_shot = text,
            _ => return Err(format!("{factor} is not a task factor")),
        }
        Ok(())
    }
}

fn read_table<R: Read>(
    reader: R,
    id_column: &str,
    factors: &[Factor],
) -> Result<Vec<(usize, String, Vec<String>)>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header: Vec<String> = rdr
        .headers()
        .map_err(csv_err)?
        .iter()
        .map(str::to_string)
        .collect();
    if header.first().map(String::as_str) != Some(id_column) {
        return Err(Error::Schema(format!(
            "first column must be '{id_column}', found {:?}",
            header.first()
        )));
    }
    for col in &header[1..] {
        match Factor::from_column(col) {
            Some(f) if factors.contains(&f) => {}
            _ => return Err(Error::Schema(format!("unknown column '{col}'"))),
        }
    }
    let expected: Vec<&str> = factors.iter().map(|f| f.column()).collect();
    if header[1..].iter().map(String::as_str).ne(expected.iter().copied()) {
        return Err(Error::Schema(format!(
            "columns must be '{},{}'",
            id_column,
            expected.join(",")
        )));
    }

    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(csv_err)?;
        let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
        let id = rec[0].to_string();
        if id.is_empty() {
            return Err(Error::Parse {
                line,
                message: format!("empty {id_column} identifier"),
            });
        }
        rows.push((line, id, rec.iter().skip(1).map(str::to_string).collect()));
    }
    let mut seen = HashMap::new();
    for (line, id, _) in &rows {
        if let Some(first) = seen.insert(id.clone(), *line) {
            return Err(Error::Linkage(format!(
                "{id_column} '{id}' defined twice (lines {first} and {line})"
            )));
        }
    }
    Ok(rows)
}

pub fn read_model_factors<R: Read>(reader: R) -> Result<Vec<ModelRecord>> {
    read_table(reader, "model", &Factor::MODEL)?
        .into_iter()
        .map(|(line, id, cells)| {
            let mut rec = ModelRecord::new(id);
            for (f, cell) in Factor::MODEL.iter().zip(&cells) {
                rec.set(*f, cell)
                    .map_err(|message| Error::Parse { line, message })?;
            }
            Ok(rec)
        })
        .collect()
}

pub fn read_task_factors<R: Read>(reader: R) -> Result<Vec<TaskRecord>> {
    read_table(reader, "task", &Factor::TASK)?
        .into_iter()
        .map(|(line, id, cells)| {
            let mut rec = TaskRecord::new(id);
            for (f, cell) in Factor::TASK.iter().zip(&cells) {
                rec.set(*f, cell)
                    .map_err(|message| Error::Parse { line, message })?;
            }
            Ok(rec)
        })
        .collect()
}

pub fn load_model_factors(path: impl AsRef<Path>) -> Result<Vec<ModelRecord>> {
    let path = path.as_ref();
    read_model_factors(File::open(path).map_err(|e| Error::io(path, e))?)
}

pub fn load_task_factors(path: impl AsRef<Path>) -> Result<Vec<TaskRecord>> {
    let path = path.as_ref();
    read_task_factors(File::open(path).map_err(|e| Error::io(path, e))?)
}

pub fn write_model_factors<W: Write>(records: &[ModelRecord], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["model"];
    header.extend(Factor::MODEL.iter().map(|f| f.column()));
    w.write_record(&header).map_err(csv_err)?;
    for r in records {
        let mut row = vec![r.identifier.clone()];
        row.extend(Factor::MODEL.iter().map(|f| r.cell(*f)));
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io("<writer>", e))
}

pub fn write_task_factors<W: Write>(records: &[TaskRecord], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["task"];
    header.extend(Factor::TASK.iter().map(|f| f.column()));
    w.write_record(&header).map_err(csv_err)?;
    for r in records {
        let mut row = vec![r.identifier.clone()];
        row.extend(Factor::TASK.iter().map(|f| match r.value(*f) {
            FactorValue::Categorical(c) => c.unwrap_or("").to_string(),
            FactorValue::Numerical(_) => String::new(),
        }));
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io("<writer>", e))
}

/// Factor records aligned index-for-index with a score matrix's registries.
#[derive(Debug, Clone, PartialEq)]
pub struct Records {
    pub models: Vec<ModelRecord>,
    pub tasks: Vec<TaskRecord>,
}

impl Records {
    /// Orders the records by the matrix registries. Every registered model and
    /// task must have a record; extra records are ignored.
    pub fn link(
        scores: &ScoreMatrix,
        models: Vec<ModelRecord>,
        tasks: Vec<TaskRecord>,
    ) -> Result<Records> {
        let mut by_model: HashMap<String, ModelRecord> = HashMap::new();
        for r in models {
            let id = r.identifier.clone();
            if by_model.insert(id.clone(), r).is_some() {
                return Err(Error::Linkage(format!("model '{id}' has two factor rows")));
            }
        }
        let mut by_task: HashMap<String, TaskRecord> = HashMap::new();
        for r in tasks {
            let id = r.identifier.clone();
            if by_task.insert(id.clone(), r).is_some() {
                return Err(Error::Linkage(format!("task '{id}' has two factor rows")));
            }
        }
        let missing_models: Vec<&str> = scores
            .models()
            .iter()
            .filter(|m| !by_model.contains_key(*m))
            .map(String::as_str)
            .collect();
        let missing_tasks: Vec<&str> = scores
            .tasks()
            .iter()
            .filter(|t| !by_task.contains_key(*t))
            .map(String::as_str)
            .collect();
        if !missing_models.is_empty() || !missing_tasks.is_empty() {
            let mut parts = Vec::new();
            if !missing_models.is_empty() {
                parts.push(format!("models without factors: {}", missing_models.join(", ")));
            }
            if !missing_tasks.is_empty() {
                parts.push(format!("tasks without factors: {}", missing_tasks.join(", ")));
            }
            return Err(Error::Linkage(parts.join("; ")));
        }
        Ok(Records {
            models: scores
                .models()
                .iter()
                .map(|m| by_model.remove(m).unwrap())
                .collect(),
            tasks: scores
                .tasks()
                .iter()
                .map(|t| by_task.remove(t).unwrap())
                .collect(),
        })
    }

    pub fn content_hash(&self) -> String {
        let mut buf = Vec::new();
        write_model_factors(&self.models, &mut buf).expect("in-memory write");
        write_task_factors(&self.tasks, &mut buf).expect("in-memory write");
        hex::encode(Sha256::digest(&buf))
    }
}
