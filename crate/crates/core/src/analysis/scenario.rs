use std::fmt::{self, Write as _};
use std::str::FromStr;

use rayon::prelude::*;

use super::{cells_of, fixed, sci, train_method, ExperimentConfig, Method};
use crate::attribution::csv_field;
use crate::dataset::{split, Dataset, Scenario, SplitSpec};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, EvalReport};
use crate::scaling::scaling_predict_for_model;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScenarioKind {
    Cpp0,
    Cpp2,
}

impl ScenarioKind {
    fn scenario(self, target: usize) -> Scenario {
        match self {
            ScenarioKind::Cpp0 => Scenario::Cpp0 { target },
            ScenarioKind::Cpp2 => Scenario::Cpp2 { target },
        }
    }

    fn prior(self) -> usize {
        match self {
            ScenarioKind::Cpp0 => 0,
            ScenarioKind::Cpp2 => 2,
        }
    }
}

impl fmt::Display for ScenarioKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScenarioKind::Cpp0 => "cpp0",
            ScenarioKind::Cpp2 => "cpp2",
        })
    }
}

impl FromStr for ScenarioKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cpp0" => Ok(ScenarioKind::Cpp0),
            "cpp2" => Ok(ScenarioKind::Cpp2),
            _ => Err(Error::Config(format!("unknown scenario '{s}' (cpp0 or cpp2)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskPrediction {
    pub seed: u64,
    pub task: usize,
    pub truth: f64,
    pub predicted: f64,
    /// `None` when the family lacks two smaller scored members.
    pub scaling: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioResult {
    pub target: usize,
    pub kind: ScenarioKind,
    pub method: Method,
    pub report: EvalReport,
    pub predictions: Vec<TaskPrediction>,
}

/// Holds out the target's entries (all of them, or all but two), trains on
/// the rest and predicts the held-out tasks; where the target's family
/// allows it, the scaling baseline predicts the same tasks.
pub fn run_scenario(
    dataset: &Dataset,
    target: usize,
    kind: ScenarioKind,
    method: Method,
    seeds: &[u64],
    config: &ExperimentConfig,
) -> Result<ScenarioResult> {
    if seeds.is_empty() {
        return Err(Error::Config("need at least one seed".into()));
    }
    let name = dataset
        .scores
        .models()
        .get(target)
        .ok_or_else(|| Error::Index(format!("model {target} of {}", dataset.scores.n_models())))?;
    let runs: Vec<Result<_>> = seeds
        .par_iter()
        .map(|&seed| {
            run_one(dataset, target, kind, method, seed, config)
                .map_err(|e| e.in_job(format!("{kind} target '{name}', seed {seed}")))
        })
        .collect();
    let mut per_seed = Vec::new();
    let mut predictions = Vec::new();
    for r in runs {
        let (m, p) = r?;
        per_seed.push(m);
        predictions.extend(p);
    }
    Ok(ScenarioResult {
        target,
        kind,
        method,
        report: EvalReport::from_seeds(per_seed)?,
        predictions,
    })
}

fn run_one(
    dataset: &Dataset,
    target: usize,
    kind: ScenarioKind,
    method: Method,
    seed: u64,
    config: &ExperimentConfig,
) -> Result<(crate::metrics::SeedMetrics, Vec<TaskPrediction>)> {
    let spec = SplitSpec {
        seed,
        validation_fraction: config.validation_fraction,
        scenario: kind.scenario(target),
    };
    let (train, valid) = split(&dataset.scores, &spec)?;
    let prior = train.entries_for_model(target).count();
    if prior != kind.prior() {
        return Err(Error::Consistency(format!(
            "{kind} training set holds {prior} target entries"
        )));
    }
    let model = train_method(method, dataset, &train, config, seed)?;
    let preds = model.predict(&cells_of(&valid))?;
    let preds: Vec<f64> = preds
        .into_iter()
        .map(|p| p.ok_or_else(|| Error::Coverage(format!("{method} cannot predict every held-out task"))))
        .collect::<Result<_>>()?;
    let metrics = evaluate(seed, &valid, &preds, &dataset.scores)?;

    let models = &dataset.records.models;
    let mut out = Vec::with_capacity(valid.len());
    for (e, &p) in valid.entries().iter().zip(&preds) {
        let scaling = match scaling_predict_for_model(&models[target], models, &train, e.task, &config.bounds) {
            Ok((s, _)) => Some(s),
            Err(Error::Coverage(_)) | Err(Error::Degenerate(_)) => None,
            Err(err) => return Err(err),
        };
        out.push(TaskPrediction {
            seed,
            task: e.task,
            truth: e.score,
            predicted: p,
            scaling,
        });
    }
    Ok((metrics, out))
}

impl ScenarioResult {
    /// Mean squared errors of the model and of the scaling baseline over the
    /// cells the baseline covers, with the number of such cells.
    pub fn scaling_comparison(&self) -> (usize, Option<f64>, Option<f64>) {
        let covered: Vec<&TaskPrediction> = self.predictions.iter().filter(|p| p.scaling.is_some()).collect();
        if covered.is_empty() {
            return (0, None, None);
        }
        let n = covered.len() as f64;
        let cpp = covered.iter().map(|p| (p.predicted - p.truth).powi(2)).sum::<f64>() / n;
        let sc = covered
            .iter()
            .map(|p| (p.scaling.unwrap() - p.truth).powi(2))
            .sum::<f64>()
            / n;
        (covered.len(), Some(cpp), Some(sc))
    }

    pub fn to_csv(&self, dataset: &Dataset) -> String {
        let r = &self.report;
        let sd = r.std();
        let (covered, cpp, sc) = self.scaling_comparison();
        let opt = |x: Option<f64>| x.map(sci).unwrap_or_default();
        let mut s = String::from(
            "target,scenario,method,mse,mse_std,l1_mean,l1_std,accuracy_pct,accuracy_std,mae_at_2_pct,mae_at_2_std,n_seeds,n_eval,scaling_covered,cpp_mse_on_covered,scaling_mse_on_covered\n",
        );
        writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            csv_field(&dataset.scores.models()[self.target]),
            self.kind,
            self.method,
            sci(r.mse),
            sci(sd[0]),
            sci(r.l1_mean),
            sci(sd[1]),
            fixed(r.rank_accuracy_pct),
            fixed(sd[2]),
            fixed(r.mae_at_2_pct),
            fixed(sd[3]),
            r.per_seed.len(),
            r.n_eval,
            covered,
            opt(cpp),
            opt(sc)
        )
        .unwrap();
        s
    }

    /// `(true, predicted, scaling)` triples for plotting against `y = x`.
    pub fn predictions_csv(&self, dataset: &Dataset) -> String {
        let mut s = String::from("seed,task,true,predicted,scaling\n");
        for p in &self.predictions {
            writeln!(
                s,
                "{},{},{},{},{}",
                p.seed,
                csv_field(&dataset.scores.tasks()[p.task]),
                sci(p.truth),
                sci(p.predicted),
                p.scaling.map(sci).unwrap_or_default()
            )
            .unwrap();
        }
        s
    }
}
