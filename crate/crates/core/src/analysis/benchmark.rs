use std::fmt::Write as _;

use rayon::prelude::*;

use super::{cells_of, fixed, sci, train_method, ExperimentConfig, Method};
use crate::dataset::{split, Dataset, SplitSpec};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, EvalReport, SeedMetrics};

/// One row per method, in the order requested.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkTable {
    pub rows: Vec<(Method, EvalReport)>,
    pub seeds: Vec<u64>,
}

/// Trains and evaluates every method on each seed's random split.
///
/// The scaling baseline only predicts cells whose family has two smaller
/// members; it is evaluated on those cells alone.
pub fn run_benchmark_eval(
    dataset: &Dataset,
    methods: &[Method],
    seeds: &[u64],
    config: &ExperimentConfig,
) -> Result<BenchmarkTable> {
    if methods.is_empty() || seeds.is_empty() {
        return Err(Error::Config("need at least one method and one seed".into()));
    }
    let jobs: Vec<(Method, u64)> = methods
        .iter()
        .flat_map(|&m| seeds.iter().map(move |&s| (m, s)))
        .collect();
    let results: Vec<Result<SeedMetrics>> = jobs
        .par_iter()
        .map(|&(method, seed)| {
            run_one(dataset, method, seed, config)
                .map_err(|e| e.in_job(format!("method {method}, seed {seed}")))
        })
        .collect();
    let mut results = results.into_iter();
    let mut rows = Vec::with_capacity(methods.len());
    for &m in methods {
        let per_seed = results.by_ref().take(seeds.len()).collect::<Result<Vec<_>>>()?;
        rows.push((m, EvalReport::from_seeds(per_seed)?));
    }
    Ok(BenchmarkTable {
        rows,
        seeds: seeds.to_vec(),
    })
}

fn run_one(dataset: &Dataset, method: Method, seed: u64, config: &ExperimentConfig) -> Result<SeedMetrics> {
    let spec = SplitSpec {
        validation_fraction: config.validation_fraction,
        ..SplitSpec::random(seed)
    };
    let (train, valid) = split(&dataset.scores, &spec)?;
    let model = train_method(method, dataset, &train, config, seed)?;
    let preds = model.predict(&cells_of(&valid))?;
    let covered: Vec<bool> = preds.iter().map(Option::is_some).collect();
    let mut it = covered.iter();
    let valid = valid.filtered(|_| *it.next().unwrap());
    if valid.is_empty() {
        return Err(Error::Coverage(format!(
            "{method} has no prediction for any validation entry"
        )));
    }
    let preds: Vec<f64> = preds.into_iter().flatten().collect();
    evaluate(seed, &valid, &preds, &dataset.scores)
}

impl BenchmarkTable {
    /// Table layout: one row per method with the four metrics; standard
    /// deviation columns only when there is more than one seed.
    pub fn to_csv(&self) -> String {
        let with_std = self.seeds.len() > 1;
        let mut s = String::new();
        if with_std {
            writeln!(
                s,
                "method,mse,mse_std,l1_mean,l1_std,accuracy_pct,accuracy_std,mae_at_2_pct,mae_at_2_std,n_seeds,n_eval"
            )
            .unwrap();
        } else {
            writeln!(s, "method,mse,l1_mean,accuracy_pct,mae_at_2_pct,n_seeds,n_eval").unwrap();
        }
        for (m, r) in &self.rows {
            let sd = r.std();
            if with_std {
                writeln!(
                    s,
                    "{m},{},{},{},{},{},{},{},{},{},{}",
                    sci(r.mse),
                    sci(sd[0]),
                    sci(r.l1_mean),
                    sci(sd[1]),
                    fixed(r.rank_accuracy_pct),
                    fixed(sd[2]),
                    fixed(r.mae_at_2_pct),
                    fixed(sd[3]),
                    r.per_seed.len(),
                    r.n_eval
                )
                .unwrap();
            } else {
                writeln!(
                    s,
                    "{m},{},{},{},{},{},{}",
                    sci(r.mse),
                    sci(r.l1_mean),
                    fixed(r.rank_accuracy_pct),
                    fixed(r.mae_at_2_pct),
                    r.per_seed.len(),
                    r.n_eval
                )
                .unwrap();
            }
        }
        s
    }

    /// Per-seed values behind every row.
    pub fn per_seed_csv(&self) -> String {
        let mut s = String::from("method,seed,mse,l1_mean,accuracy_pct,mae_at_2_pct,n_eval\n");
        for (m, r) in &self.rows {
            for p in &r.per_seed {
                writeln!(
                    s,
                    "{m},{},{},{},{},{},{}",
                    p.seed,
                    sci(p.mse),
                    sci(p.l1_mean),
                    fixed(p.rank_accuracy_pct),
                    fixed(p.mae_at_2_pct),
                    p.n_eval
                )
                .unwrap();
            }
        }
        s
    }

    pub fn row(&self, method: Method) -> Option<&EvalReport> {
        self.rows.iter().find(|(m, _)| *m == method).map(|(_, r)| r)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{synth, Factor};
    use crate::mf::TrainConfig;

    /// Rank-1 scores whose descriptive factors identify every model (by
    /// size, which tracks its latent factor) and every task, so that the
    /// factor-only model has something to learn from.
    fn rank_one() -> Dataset {
        let lr = synth::low_rank(5, 4, 1, 1.0, 4);
        let mut records = synth::placeholder_records(&lr.matrix, 4);
        for (i, r) in records.models.iter_mut().enumerate() {
            r.set(Factor::Params, &format!("{:.3}", 100.0 * (4.0 * lr.p[i]).exp())).unwrap();
        }
        for (j, r) in records.tasks.iter_mut().enumerate() {
            r.set(Factor::OutputFormat, if j % 2 == 0 { "binary" } else { "generation" }).unwrap();
            r.set(Factor::FewShot, if j / 2 == 0 { "0-shot" } else { "5-shot" }).unwrap();
        }
        Dataset {
            scores: lr.matrix,
            records,
        }
    }

    fn quick() -> ExperimentConfig {
        let mut c = ExperimentConfig::default();
        c.mf = TrainConfig {
            latent_dim: 2,
            learning_rate: 0.05,
            iterations: 30_000,
            ..c.mf
        };
        c.ncf.train.iterations = 60_000;
        c.ncf.hidden = vec![16, 8];
        c.validation_fraction = 0.2;
        c
    }

    #[test]
    fn rank_one_is_easy_for_every_method() {
        let d = rank_one();
        let methods = [Method::Mf, Method::Ncf, Method::NcfFactor, Method::FactorOnly];
        let t = run_benchmark_eval(&d, &methods, &[1, 2], &quick()).unwrap();
        for (m, r) in &t.rows {
            assert!(r.mse < 1e-2, "{m}: {}", r.mse);
            assert_eq!(r.per_seed.len(), 2);
        }
    }

    #[test]
    fn single_seed_drops_std_columns() {
        let d = rank_one();
        let t = run_benchmark_eval(&d, &[Method::Mf], &[3], &quick()).unwrap();
        let csv = t.to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "method,mse,l1_mean,accuracy_pct,mae_at_2_pct,n_seeds,n_eval");
        assert!(lines.next().unwrap().starts_with("mf,"));
        assert!(lines.next().is_none());
    }

    #[test]
    fn worker_count_does_not_change_results() {
        let d = rank_one();
        let cfg = quick();
        let methods = [Method::Mf, Method::Ncf];
        let a = super::super::with_workers(1, || run_benchmark_eval(&d, &methods, &[1, 2, 3], &cfg)).unwrap().unwrap();
        let b = super::super::with_workers(3, || run_benchmark_eval(&d, &methods, &[1, 2, 3], &cfg)).unwrap().unwrap();
        assert_eq!(a.to_csv(), b.to_csv());
        assert_eq!(a.per_seed_csv(), b.per_seed_csv());
    }

    #[test]
    fn errors_name_the_job() {
        let d = rank_one();
        let mut cfg = quick();
        cfg.mf.latent_dim = 0;
        let err = run_benchmark_eval(&d, &[Method::Mf], &[7], &cfg).unwrap_err();
        assert!(err.to_string().contains("method mf, seed 7"), "{err}");
    }
}
