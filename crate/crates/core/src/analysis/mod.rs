//! Experiments built from the predictors: benchmark tables, cold-start
//! scenarios, leave-one-out influence, and the sparsity sweep.
//!
//! Independent trainings run as parallel jobs on the current rayon pool;
//! results are always assembled in job order, so output does not depend on
//! the worker count.

mod benchmark;
mod cluster;
mod loo;
mod scenario;
mod sparsity;

use std::fmt;
use std::str::FromStr;

pub use benchmark::{run_benchmark_eval, BenchmarkTable};
pub use cluster::{flat_clusters, hierarchical_cluster, Dendrogram, Merge};
pub use loo::{leave_one_out, Axis, LooOptions, LooResult};
pub use scenario::{run_scenario, ScenarioKind, ScenarioResult, TaskPrediction};
pub use sparsity::{sparsity_sweep, SparsityRow, SparsityTable};

use crate::dataset::{Dataset, ScoreMatrix};
use crate::error::{Error, Result};
use crate::mf::{predict_mf, train_mf, MfModel, TrainConfig};
use crate::ncf::{train_ncf, Encoded, FactorSet, NcfConfig, NcfModel, Variant};
use crate::scaling::{scaling_predict_for_model, Bounds};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    Mf,
    /// Id-only neural model.
    Ncf,
    /// Factor-enhanced neural model.
    NcfFactor,
    FactorOnly,
    ScalingBaseline,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Mf,
        Method::Ncf,
        Method::NcfFactor,
        Method::FactorOnly,
        Method::ScalingBaseline,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Mf => "mf",
            Method::Ncf => "ncf",
            Method::NcfFactor => "ncf_factor",
            Method::FactorOnly => "factor_only",
            Method::ScalingBaseline => "scaling_baseline",
        }
    }

    pub fn variant(self) -> Option<Variant> {
        match self {
            Method::Ncf => Some(Variant::IdOnly),
            Method::NcfFactor => Some(Variant::FactorEnhanced),
            Method::FactorOnly => Some(Variant::FactorOnly),
            _ => None,
        }
    }

    pub fn parse_list(s: &str) -> Result<Vec<Method>> {
        s.split(',')
            .map(str::trim)
            .filter(|t| !t.is_empty())
            .map(str::parse)
            .collect()
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown method '{s}' (expected one of mf, ncf, ncf_factor, factor_only, scaling_baseline)"
                ))
            })
    }
}

/// Settings shared by every experiment. Per-run seeds replace the `seed`
/// fields of the training configurations.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub mf: TrainConfig,
    pub ncf: NcfConfig,
    pub bounds: Bounds,
    pub validation_fraction: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            mf: TrainConfig::default(),
            ncf: NcfConfig::default(),
            bounds: Bounds::default(),
            validation_fraction: 0.05,
        }
    }
}

/// A model trained by one of the [`Method`]s.
pub enum Trained<'a> {
    Mf(MfModel),
    Ncf(NcfModel, Option<Encoded>),
    /// Curves are fitted lazily, per predicted cell, from the training matrix.
    Scaling {
        dataset: &'a Dataset,
        train: ScoreMatrix,
        bounds: Bounds,
    },
}

pub fn train_method<'a>(
    method: Method,
    dataset: &'a Dataset,
    train: &ScoreMatrix,
    config: &ExperimentConfig,
    seed: u64,
) -> Result<Trained<'a>> {
    Ok(match method {
        Method::Mf => Trained::Mf(train_mf(train, &TrainConfig { seed, ..config.mf })?),
        Method::ScalingBaseline => Trained::Scaling {
            dataset,
            train: train.clone(),
            bounds: config.bounds,
        },
        m => {
            let variant = m.variant().expect("neural method");
            let mut ncf = config.ncf.clone();
            ncf.train.seed = seed;
            let model = train_ncf(train, Some(&dataset.records), variant, &ncf)?;
            let enc = model.encode(&dataset.records);
            Trained::Ncf(model, enc)
        }
    })
}

impl Trained<'_> {
    /// Predictions per cell; `None` where the method has no prediction (the
    /// scaling baseline without enough in-family points).
    pub fn predict(&self, cells: &[(usize, usize)]) -> Result<Vec<Option<f64>>> {
        match self {
            Trained::Mf(m) => cells
                .iter()
                .map(|&(a, b)| predict_mf(m, a, b).map(Some))
                .collect(),
            Trained::Ncf(m, enc) => Ok(m
                .predict_many(enc.as_ref(), cells, FactorSet::ALL)?
                .into_iter()
                .map(Some)
                .collect()),
            Trained::Scaling {
                dataset,
                train,
                bounds,
            } => cells
                .iter()
                .map(|&(a, b)| {
                    let models = &dataset.records.models;
                    match scaling_predict_for_model(&models[a], models, train, b, bounds) {
                        Ok((p, _)) => Ok(Some(p)),
                        Err(Error::Coverage(_)) | Err(Error::Degenerate(_)) => Ok(None),
                        Err(e) => Err(e),
                    }
                })
                .collect(),
        }
    }
}

pub(crate) fn cells_of(m: &ScoreMatrix) -> Vec<(usize, usize)> {
    m.entries().iter().map(|e| (e.model, e.task)).collect()
}

/// Runs `f` on a dedicated pool of `workers` threads.
pub fn with_workers<R: Send>(workers: usize, f: impl FnOnce() -> R + Send) -> Result<R> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot start {workers} workers: {e}")))?;
    Ok(pool.install(f))
}

/// Fixed-width scientific notation, so reports are byte-stable.
pub(crate) fn sci(x: f64) -> String {
    format!("{x:.6e}")
}

pub(crate) fn fixed(x: f64) -> String {
    format!("{x:.4}")
}
