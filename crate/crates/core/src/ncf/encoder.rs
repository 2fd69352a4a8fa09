//! Turns factor records into embedding lookups.
//!
//! Categorical factors index a learned table: one row per known category plus
//! a shared out-of-vocabulary row. Numerical factors are transformed,
//! standardized, and scale a learned vector. A missing value (or a factor
//! masked out at inference) contributes the zero vector.

use std::collections::HashMap;
use std::fmt::Write as _;

use crate::dataset::{Factor, FactorKind, FactorValue, Records, ScoreMatrix, Transform};
use crate::error::{Error, Result};

/// Categories carried by fewer training models (or tasks) than this share the
/// out-of-vocabulary row, which is what gives that row a training signal.
pub const MIN_CATEGORY_COUNT: usize = 2;

#[derive(Debug, Clone, PartialEq)]
pub enum FactorSpec {
    Categorical { vocab: Vec<String> },
    Numerical { transform: Transform, mean: f64, std: f64 },
}

impl FactorSpec {
    /// Rows of the parameter table backing this factor.
    pub fn rows(&self) -> usize {
        match self {
            FactorSpec::Categorical { vocab } => vocab.len() + 1,
            FactorSpec::Numerical { .. } => 1,
        }
    }
}

/// One encoded factor value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Code {
    Missing,
    /// Row of a categorical table; the last row is out-of-vocabulary.
    Row(usize),
    /// Standardized numerical value.
    Value(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct FactorEncoder {
    pub width: usize,
    /// Indexed by [`Factor::index`].
    pub specs: Vec<FactorSpec>,
    lookup: Vec<HashMap<String, usize>>,
}

/// Encoded records: one code per model factor per model, one per task
/// factor per task.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoded {
    pub models: Vec<[Code; 12]>,
    pub tasks: Vec<[Code; 4]>,
}

impl FactorEncoder {
    /// Vocabularies and standardization statistics come from the models and
    /// tasks that have at least one entry in `train`.
    pub fn fit(records: &Records, train: &ScoreMatrix, width: usize) -> Result<Self> {
        if records.models.len() != train.n_models() || records.tasks.len() != train.n_tasks() {
            return Err(Error::Linkage(format!(
                "records cover {}x{} but the matrix is {}x{}",
                records.models.len(),
                records.tasks.len(),
                train.n_models(),
                train.n_tasks()
            )));
        }
        if width == 0 {
            return Err(Error::Config("factor embedding width must be at least 1".into()));
        }
        let model_seen: Vec<bool> = (0..train.n_models())
            .map(|i| train.entries_for_model(i).next().is_some())
            .collect();
        let task_seen: Vec<bool> = (0..train.n_tasks())
            .map(|j| train.entries_for_task(j).next().is_some())
            .collect();

        let mut specs = Vec::with_capacity(16);
        for f in Factor::ALL {
            let values: Vec<FactorValue> = if Factor::MODEL.contains(&f) {
                records
                    .models
                    .iter()
                    .zip(&model_seen)
                    .filter(|(_, s)| **s)
                    .map(|(r, _)| r.value(f))
                    .collect()
            } else {
                records
                    .tasks
                    .iter()
                    .zip(&task_seen)
                    .filter(|(_, s)| **s)
                    .map(|(r, _)| r.value(f))
                    .collect()
            };
            specs.push(fit_one(f, &values));
        }
        Ok(Self::from_specs(width, specs))
    }

    pub fn from_specs(width: usize, specs: Vec<FactorSpec>) -> Self {
        let lookup = specs
            .iter()
            .map(|s| match s {
                FactorSpec::Categorical { vocab } => vocab
                    .iter()
                    .enumerate()
                    .map(|(i, v)| (v.clone(), i))
                    .collect(),
                FactorSpec::Numerical { .. } => HashMap::new(),
            })
            .collect();
        FactorEncoder {
            width,
            specs,
            lookup,
        }
    }

    pub fn code(&self, factor: Factor, value: FactorValue<'_>) -> Code {
        match (&self.specs[factor.index()], value) {
            (FactorSpec::Categorical { vocab }, FactorValue::Categorical(Some(c))) => {
                Code::Row(self.lookup[factor.index()].get(c).copied().unwrap_or(vocab.len()))
            }
            (FactorSpec::Numerical { transform, mean, std }, FactorValue::Numerical(Some(x))) => {
                Code::Value((transform.apply(x) - mean) / std)
            }
            _ => Code::Missing,
        }
    }

    pub fn encode(&self, records: &Records) -> Encoded {
        Encoded {
            models: records
                .models
                .iter()
                .map(|r| Factor::MODEL.map(|f| self.code(f, r.value(f))))
                .collect(),
            tasks: records
                .tasks
                .iter()
                .map(|r| Factor::TASK.map(|f| self.code(f, r.value(f))))
                .collect(),
        }
    }

    /// Stable textual description; the checkpoint schema hash is taken over it.
    pub fn describe(&self) -> String {
        let mut s = String::new();
        writeln!(s, "width\t{}", self.width).unwrap();
        for (f, spec) in Factor::ALL.iter().zip(&self.specs) {
            match spec {
                FactorSpec::Categorical { vocab } => {
                    write!(s, "factor\t{}\tcat", f.column()).unwrap();
                    for v in vocab {
                        write!(s, "\t{v}").unwrap();
                    }
                    writeln!(s).unwrap();
                }
                FactorSpec::Numerical { transform, mean, std } => {
                    let t = match transform {
                        Transform::Log1p => "log1p",
                        Transform::Identity => "identity",
                    };
                    writeln!(s, "factor\t{}\tnum\t{t}\t{mean}\t{std}", f.column()).unwrap();
                }
            }
        }
        s
    }

    /// Inverse of [`describe`](Self::describe).
    pub fn parse(lines: &mut dyn Iterator<Item = &str>) -> Result<Self> {
        let bad = |m: String| Error::Checkpoint(m);
        let first = lines.next().ok_or_else(|| bad("missing encoder".into()))?;
        let width: usize = first
            .strip_prefix("width\t")
            .and_then(|w| w.parse().ok())
            .ok_or_else(|| bad(format!("bad encoder width line '{first}'")))?;
        let mut specs = Vec::with_capacity(16);
        for f in Factor::ALL {
            let line = lines.next().ok_or_else(|| bad("truncated encoder".into()))?;
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() < 3 || cols[0] != "factor" || cols[1] != f.column() {
                return Err(bad(format!("expected factor '{}', got '{line}'", f.column())));
            }
            let spec = match (cols[2], f.kind()) {
                ("cat", FactorKind::Categorical) => FactorSpec::Categorical {
                    vocab: cols[3..].iter().map(|c| c.to_string()).collect(),
                },
                ("num", FactorKind::Numerical) if cols.len() == 6 => {
                    let transform = match cols[3] {
                        "log1p" => Transform::Log1p,
                        "identity" => Transform::Identity,
                        t => return Err(bad(format!("unknown transform '{t}'"))),
                    };
                    let num = |t: &str| {
                        t.parse::<f64>()
                            .map_err(|_| bad(format!("bad number '{t}' for {f}")))
                    };
                    FactorSpec::Numerical {
                        transform,
                        mean: num(cols[4])?,
                        std: num(cols[5])?,
                    }
                }
                _ => return Err(bad(format!("bad encoder line '{line}'"))),
            };
            specs.push(spec);
        }
        Ok(Self::from_specs(width, specs))
    }
}

fn fit_one(f: Factor, values: &[FactorValue]) -> FactorSpec {
    match f.kind() {
        FactorKind::Categorical => {
            let mut counts: HashMap<&str, usize> = HashMap::new();
            let mut order = Vec::new();
            for v in values {
                if let FactorValue::Categorical(Some(c)) = v {
                    let n = counts.entry(c).or_insert(0);
                    if *n == 0 {
                        order.push(*c);
                    }
                    *n += 1;
                }
            }
            let vocab = order
                .into_iter()
                .filter(|c| counts[c] >= MIN_CATEGORY_COUNT)
                .map(str::to_string)
                .collect();
            FactorSpec::Categorical { vocab }
        }
        FactorKind::Numerical => {
            let transform = f.transform().expect("numerical factors have a transform");
            let xs: Vec<f64> = values
                .iter()
                .filter_map(|v| match v {
                    FactorValue::Numerical(Some(x)) => Some(transform.apply(*x)),
                    _ => None,
                })
                .collect();
            let (mean, std) = if xs.is_empty() {
                (0.0, 1.0)
            } else {
                let n = xs.len() as f64;
                let mean = xs.iter().sum::<f64>() / n;
                let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
                let std = var.sqrt();
                (mean, if std > 1e-12 { std } else { 1.0 })
            };
            FactorSpec::Numerical { transform, mean, std }
        }
    }
}
