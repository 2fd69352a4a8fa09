use std::fmt::Write as _;

use rayon::prelude::*;

use super::{cells_of, fixed, sci, train_method, ExperimentConfig, Method};
use crate::dataset::{mask_to_sparsity, split, Dataset, SplitSpec};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, EvalReport, SeedMetrics};

#[derive(Debug, Clone, PartialEq)]
pub struct SparsityRow {
    /// Requested sparsity of the training matrix.
    pub level: f64,
    /// Sparsity actually reached, per seed.
    pub achieved: Vec<f64>,
    pub n_train: Vec<usize>,
    pub report: EvalReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SparsityTable {
    pub method: Method,
    pub validation_seed: u64,
    pub rows: Vec<SparsityRow>,
}

/// Evaluates `method` as the training matrix is thinned to each sparsity
/// level. One validation split (drawn with `validation_seed`) is shared by
/// every level and seed; each seed masks the remaining entries and trains
/// independently.
pub fn sparsity_sweep(
    dataset: &Dataset,
    levels: &[f64],
    seeds: &[u64],
    method: Method,
    validation_seed: u64,
    config: &ExperimentConfig,
) -> Result<SparsityTable> {
    if levels.is_empty() || seeds.is_empty() {
        return Err(Error::Config("need at least one sparsity level and one seed".into()));
    }
    let spec = SplitSpec {
        validation_fraction: config.validation_fraction,
        ..SplitSpec::random(validation_seed)
    };
    let (train, valid) = split(&dataset.scores, &spec)?;
    // Fail fast on unreachable levels before any training starts.
    for &level in levels {
        mask_to_sparsity(&train, level, 0)?;
    }
    let cells = cells_of(&valid);

    let jobs: Vec<(f64, u64)> = levels
        .iter()
        .flat_map(|&l| seeds.iter().map(move |&s| (l, s)))
        .collect();
    let results: Vec<Result<(SeedMetrics, f64, usize)>> = jobs
        .par_iter()
        .map(|&(level, seed)| {
            let run = || -> Result<_> {
                let masked = mask_to_sparsity(&train, level, seed)?;
                let model = train_method(method, dataset, &masked, config, seed)?;
                let preds: Vec<f64> = model
                    .predict(&cells)?
                    .into_iter()
                    .map(|p| p.ok_or_else(|| Error::Coverage(format!("{method} cannot predict every validation entry"))))
                    .collect::<Result<_>>()?;
                let m = evaluate(seed, &valid, &preds, &dataset.scores)?;
                Ok((m, masked.sparsity(), masked.len()))
            };
            run().map_err(|e| e.in_job(format!("sparsity {level}, seed {seed}")))
        })
        .collect();

    let mut results = results.into_iter();
    let mut rows = Vec::with_capacity(levels.len());
    for &level in levels {
        let mut per_seed = Vec::new();
        let mut achieved = Vec::new();
        let mut n_train = Vec::new();
        for r in results.by_ref().take(seeds.len()) {
            let (m, s, n) = r?;
            per_seed.push(m);
            achieved.push(s);
            n_train.push(n);
        }
        rows.push(SparsityRow {
            level,
            achieved,
            n_train,
            report: EvalReport::from_seeds(per_seed)?,
        });
    }
    Ok(SparsityTable {
        method,
        validation_seed,
        rows,
    })
}

impl SparsityTable {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "sparsity,achieved_sparsity,n_train,method,l1_mean,l1_std,accuracy_pct,accuracy_std,mae_at_2_pct,mae_at_2_std,mse,mse_std,n_seeds,n_eval\n",
        );
        for r in &self.rows {
            let e = &r.report;
            let sd = e.std();
            let achieved = r.achieved.iter().sum::<f64>() / r.achieved.len() as f64;
            let n_train = r.n_train.iter().sum::<usize>() as f64 / r.n_train.len() as f64;
            writeln!(
                s,
                "{},{},{:.1},{},{},{},{},{},{},{},{},{},{},{}",
                fixed(r.level),
                fixed(achieved),
                n_train,
                self.method,
                sci(e.l1_mean),
                sci(sd[1]),
                fixed(e.rank_accuracy_pct),
                fixed(sd[2]),
                fixed(e.mae_at_2_pct),
                fixed(sd[3]),
                sci(e.mse),
                sci(sd[0]),
                e.per_seed.len(),
                e.n_eval
            )
            .unwrap();
        }
        s
    }

    /// One line per (level, seed) for plotting the trend with spread.
    pub fn plot_csv(&self) -> String {
        let mut s = String::from("sparsity,seed,achieved_sparsity,l1_mean,accuracy_pct,mae_at_2_pct\n");
        for r in &self.rows {
            for (m, a) in r.report.per_seed.iter().zip(&r.achieved) {
                writeln!(
                    s,
                    "{},{},{},{},{},{}",
                    fixed(r.level),
                    m.seed,
                    fixed(*a),
                    sci(m.l1_mean),
                    fixed(m.rank_accuracy_pct),
                    fixed(m.mae_at_2_pct)
                )
                .unwrap();
            }
        }
        s
    }

    pub fn row(&self, level: f64) -> Option<&SparsityRow> {
        self.rows.iter().find(|r| r.level == level)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::synth;
    use crate::mf::TrainConfig;

    fn rank_one(seed: u64) -> Dataset {
        let lr = synth::low_rank(24, 18, 1, 1.0, seed);
        let records = synth::placeholder_records(&lr.matrix, seed);
        Dataset {
            scores: lr.matrix,
            records,
        }
    }

    fn mf_config() -> ExperimentConfig {
        let mut c = ExperimentConfig::default();
        c.mf = TrainConfig {
            latent_dim: 1,
            learning_rate: 0.1,
            iterations: 30_000,
            ..c.mf
        };
        c.validation_fraction = 0.2;
        c
    }

    #[test]
    fn current_level_is_a_no_op() {
        let d = rank_one(3);
        let cfg = mf_config();
        let spec = SplitSpec {
            validation_fraction: cfg.validation_fraction,
            ..SplitSpec::random(9)
        };
        let (train, valid) = split(&d.scores, &spec).unwrap();
        let level = train.sparsity();
        let t = sparsity_sweep(&d, &[level], &[5], Method::Mf, 9, &cfg).unwrap();

        let model = train_method(Method::Mf, &d, &train, &cfg, 5).unwrap();
        let preds: Vec<f64> = model.predict(&cells_of(&valid)).unwrap().into_iter().flatten().collect();
        let direct = evaluate(5, &valid, &preds, &d.scores).unwrap();
        assert_eq!(t.rows[0].report.per_seed[0], direct);
        assert_eq!(t.rows[0].n_train, vec![train.len()]);
    }

    #[test]
    fn rank_one_degrades_with_sparsity() {
        let d = rank_one(4);
        let levels = [0.6, 0.75, 0.9];
        let t = sparsity_sweep(&d, &levels, &[1, 2, 3, 4, 5], Method::Mf, 2, &mf_config()).unwrap();
        let acc: Vec<f64> = t.rows.iter().map(|r| r.report.rank_accuracy_pct).collect();
        let l1: Vec<f64> = t.rows.iter().map(|r| r.report.l1_mean).collect();
        for w in acc.windows(2) {
            assert!(w[1] <= w[0], "accuracy {acc:?}");
        }
        assert!(l1[2] > l1[0], "l1 {l1:?}");
        for (r, &level) in t.rows.iter().zip(&levels) {
            assert!(r.achieved.iter().all(|&a| a >= level - 1e-12 && a < level + 0.01));
        }
    }

    #[test]
    fn unreachable_level_is_a_range_error() {
        let d = rank_one(3);
        let err = sparsity_sweep(&d, &[0.05], &[1], Method::Mf, 1, &mf_config()).unwrap_err();
        assert!(matches!(err, Error::Range(_)), "{err}");
    }

    #[test]
    fn csv_layout() {
        let d = rank_one(3);
        let t = sparsity_sweep(&d, &[0.5, 0.7], &[1, 2], Method::Mf, 1, &mf_config()).unwrap();
        let csv = t.to_csv();
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.lines().nth(1).unwrap().starts_with("0.5000,0.5"));
        assert_eq!(t.plot_csv().lines().count(), 5);
    }
}
