//! Score losses and rank accuracy.
//!
//! Ranks are computed within a task's cohort: every model with an observed
//! true score on that task. Rank 1 is the highest score; ties go to the model
//! with the smaller registry index.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::dataset::ScoreMatrix;
use crate::error::{Error, Result};

pub const COHORT_DEFINITION: &str =
    "cohort = all models with an observed true score on the task (train and validation); \
     rank 1 = highest score; ties broken by registry index";

/// `(mse, l1_mean)`.
pub fn score_losses(pred: &[f64], truth: &[f64]) -> Result<(f64, f64)> {
    if pred.len() != truth.len() {
        return Err(Error::LengthMismatch(pred.len(), truth.len()));
    }
    if pred.is_empty() {
        return Err(Error::Input("no predictions to score".into()));
    }
    let n = pred.len() as f64;
    let (sq, abs) = pred
        .iter()
        .zip(truth)
        .fold((0.0, 0.0), |(sq, abs), (p, t)| {
            let d = p - t;
            (sq + d * d, abs + d.abs())
        });
    Ok((sq / n, abs / n))
}

/// Ranks models by descending score. Input is `(model_index, score)`.
pub fn derive_ranks(scores: &[(usize, f64)]) -> BTreeMap<usize, usize> {
    let mut order: Vec<(usize, f64)> = scores.to_vec();
    order.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    order
        .into_iter()
        .enumerate()
        .map(|(r, (m, _))| (m, r + 1))
        .collect()
}

/// Rank of `model` with score `score` among `cohort`, where `model`'s own
/// cohort score is replaced by `score`.
fn rank_within(cohort: &[(usize, f64)], model: usize, score: f64) -> usize {
    1 + cohort
        .iter()
        .filter(|&&(m, s)| m != model && (s > score || (s == score && m < model)))
        .count()
}

/// Returns `(accuracy_pct, mae_at_2_pct)` for predictions on `valid`.
///
/// `predictions[k]` belongs to `valid.entries()[k]`. For each entry the true
/// rank uses true scores only; the predicted rank swaps in the prediction for
/// that one model and keeps everyone else's true score.
pub fn rank_metrics(
    valid: &ScoreMatrix,
    predictions: &[f64],
    full: &ScoreMatrix,
) -> Result<(f64, f64)> {
    if predictions.len() != valid.len() {
        return Err(Error::LengthMismatch(predictions.len(), valid.len()));
    }
    if valid.is_empty() {
        return Err(Error::Input("empty validation set".into()));
    }
    let mut cohorts: Vec<Vec<(usize, f64)>> = vec![Vec::new(); full.n_tasks()];
    for e in full.entries() {
        cohorts[e.task].push((e.model, e.score));
    }
    let (mut exact, mut within2) = (0usize, 0usize);
    for (e, &p) in valid.entries().iter().zip(predictions) {
        let cohort = cohorts
            .get(e.task)
            .ok_or_else(|| Error::Consistency(format!("task {} outside full matrix", e.task)))?;
        let truth = cohort
            .iter()
            .find(|(m, _)| *m == e.model)
            .map(|&(_, s)| s)
            .ok_or_else(|| {
                Error::Consistency(format!(
                    "validation model '{}' has no observed score on '{}'",
                    valid.models()[e.model],
                    valid.tasks()[e.task]
                ))
            })?;
        let r = rank_within(cohort, e.model, truth);
        let r_hat = rank_within(cohort, e.model, p);
        exact += (r == r_hat) as usize;
        within2 += (r.abs_diff(r_hat) <= 2) as usize;
    }
    let n = valid.len() as f64;
    Ok((100.0 * exact as f64 / n, 100.0 * within2 as f64 / n))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeedMetrics {
    pub seed: u64,
    pub mse: f64,
    pub l1_mean: f64,
    pub rank_accuracy_pct: f64,
    pub mae_at_2_pct: f64,
    pub n_eval: usize,
}

/// Scores and rank metrics for one prediction set.
pub fn evaluate(
    seed: u64,
    valid: &ScoreMatrix,
    predictions: &[f64],
    full: &ScoreMatrix,
) -> Result<SeedMetrics> {
    let truth: Vec<f64> = valid.entries().iter().map(|e| e.score).collect();
    let (mse, l1_mean) = score_losses(predictions, &truth)?;
    let (acc, mae2) = rank_metrics(valid, predictions, full)?;
    Ok(SeedMetrics {
        seed,
        mse,
        l1_mean,
        rank_accuracy_pct: acc,
        mae_at_2_pct: mae2,
        n_eval: valid.len(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub mse: f64,
    pub l1_mean: f64,
    pub rank_accuracy_pct: f64,
    pub mae_at_2_pct: f64,
    pub per_seed: Vec<SeedMetrics>,
    /// Total number of evaluated entries across seeds.
    pub n_eval: usize,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

/// Sample standard deviation; 0 for a single value.
pub fn std_dev(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = xs.iter().sum::<f64>() / xs.len() as f64;
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

impl EvalReport {
    pub fn from_seeds(per_seed: Vec<SeedMetrics>) -> Result<Self> {
        if per_seed.is_empty() {
            return Err(Error::Input("no seeds evaluated".into()));
        }
        Ok(EvalReport {
            mse: mean(per_seed.iter().map(|s| s.mse)),
            l1_mean: mean(per_seed.iter().map(|s| s.l1_mean)),
            rank_accuracy_pct: mean(per_seed.iter().map(|s| s.rank_accuracy_pct)),
            mae_at_2_pct: mean(per_seed.iter().map(|s| s.mae_at_2_pct)),
            n_eval: per_seed.iter().map(|s| s.n_eval).sum(),
            per_seed,
        })
    }

    /// Standard deviations over seeds, in the order mse, l1, accuracy, MAE@2.
    pub fn std(&self) -> [f64; 4] {
        let col = |f: fn(&SeedMetrics) -> f64| -> f64 {
            std_dev(&self.per_seed.iter().map(f).collect::<Vec<_>>())
        };
        [
            col(|s| s.mse),
            col(|s| s.l1_mean),
            col(|s| s.rank_accuracy_pct),
            col(|s| s.mae_at_2_pct),
        ]
    }

    /// Structured text: aggregates, per-seed rows and the cohort definition.
    pub fn to_text(&self, title: &str) -> String {
        let mut s = String::new();
        let std = self.std();
        writeln!(s, "# {title}").unwrap();
        writeln!(s, "cohort: {COHORT_DEFINITION}").unwrap();
        writeln!(s, "n_eval: {}", self.n_eval).unwrap();
        writeln!(s, "mse: {:.6e} (std {:.3e})", self.mse, std[0]).unwrap();
        writeln!(s, "l1_mean: {:.6e} (std {:.3e})", self.l1_mean, std[1]).unwrap();
        writeln!(s, "rank_accuracy_pct: {:.4} (std {:.4})", self.rank_accuracy_pct, std[2]).unwrap();
        writeln!(s, "mae_at_2_pct: {:.4} (std {:.4})", self.mae_at_2_pct, std[3]).unwrap();
        writeln!(s, "seed,mse,l1_mean,rank_accuracy_pct,mae_at_2_pct,n_eval").unwrap();
        for p in &self.per_seed {
            writeln!(
                s,
                "{},{:.6e},{:.6e},{:.4},{:.4},{}",
                p.seed, p.mse, p.l1_mean, p.rank_accuracy_pct, p.mae_at_2_pct, p.n_eval
            )
            .unwrap();
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{Entry, ScoreMatrix};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cohort_matrix(scores: &[f64]) -> ScoreMatrix {
        let entries = scores
            .iter()
            .enumerate()
            .map(|(i, &s)| Entry {
                model: i,
                task: 0,
                score: s,
                source: None,
            })
            .collect();
        ScoreMatrix::new(
            (0..scores.len()).map(|i| format!("M{i}")).collect(),
            vec!["T".into()],
            entries,
        )
        .unwrap()
    }

    #[test]
    fn losses_basic() {
        assert_eq!(score_losses(&[0.3, 0.4], &[0.3, 0.4]).unwrap(), (0.0, 0.0));
        let (mse, l1) = score_losses(&[0.5], &[0.7]).unwrap();
        assert!((mse - 0.04).abs() < 1e-15);
        assert!((l1 - 0.2).abs() < 1e-15);
        assert!(matches!(score_losses(&[0.1], &[]), Err(Error::LengthMismatch(1, 0))));
    }

    #[test]
    fn losses_match_independent_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p: Vec<f64> = (0..100).map(|_| rng.random()).collect();
        let t: Vec<f64> = (0..100).map(|_| rng.random()).collect();
        let (mse, l1) = score_losses(&p, &t).unwrap();
        let mut sq = 0.0;
        let mut ab = 0.0;
        for i in (0..100).rev() {
            sq += (p[i] - t[i]) * (p[i] - t[i]);
            ab += (t[i] - p[i]).abs();
        }
        assert!((mse - sq / 100.0).abs() < 1e-14);
        assert!((l1 - ab / 100.0).abs() < 1e-14);
    }

    #[test]
    fn ranks_descending_with_index_ties() {
        let r = derive_ranks(&[(0, 0.9), (1, 0.7), (2, 0.8)]);
        assert_eq!(r[&0], 1);
        assert_eq!(r[&2], 2);
        assert_eq!(r[&1], 3);
        let r = derive_ranks(&[(1, 0.5), (0, 0.5)]);
        assert_eq!((r[&0], r[&1]), (1, 2));
    }

    #[test]
    fn ranks_match_sort_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let scores: Vec<(usize, f64)> = (0..20).map(|i| (i, (rng.random::<f64>() * 10.0).round() / 10.0)).collect();
        let r = derive_ranks(&scores);
        for &(m, s) in &scores {
            // rank = 1 + number of models strictly ahead
            let ahead = scores
                .iter()
                .filter(|&&(o, t)| t > s || (t == s && o < m))
                .count();
            assert_eq!(r[&m], ahead + 1);
        }
    }

    #[test]
    fn perfect_predictions() {
        let full = cohort_matrix(&[0.9, 0.4, 0.6, 0.1]);
        let preds: Vec<f64> = full.entries().iter().map(|e| e.score).collect();
        assert_eq!(rank_metrics(&full, &preds, &full).unwrap(), (100.0, 100.0));
    }

    #[test]
    fn single_model_cohort() {
        let full = cohort_matrix(&[0.3]);
        assert_eq!(rank_metrics(&full, &[0.99], &full).unwrap().0, 100.0);
    }

    #[test]
    fn rank_two_to_four_counts_for_mae2_only() {
        // true order: M0 (0.9) > M1 (0.7) > M2 (0.5) > M3 (0.3)
        let full = cohort_matrix(&[0.9, 0.7, 0.5, 0.3]);
        let valid = full.filtered(|e| e.model == 1);
        // predicted 0.2 puts M1 below M3: rank 4
        assert_eq!(rank_metrics(&valid, &[0.2], &full).unwrap(), (0.0, 100.0));
    }

    #[test]
    fn missing_from_cohort_is_error() {
        let full = cohort_matrix(&[0.9, 0.7]);
        let other = cohort_matrix(&[0.9, 0.7, 0.1]);
        let valid = other.filtered(|e| e.model == 2);
        assert!(matches!(
            rank_metrics(&valid, &[0.5], &full),
            Err(Error::Consistency(_))
        ));
    }

    #[test]
    fn report_aggregates_are_means() {
        let mk = |seed, mse| SeedMetrics {
            seed,
            mse,
            l1_mean: 2.0 * mse,
            rank_accuracy_pct: 50.0,
            mae_at_2_pct: 80.0,
            n_eval: 10,
        };
        let r = EvalReport::from_seeds(vec![mk(1, 0.01), mk(2, 0.03)]).unwrap();
        assert!((r.mse - 0.02).abs() < 1e-15);
        assert_eq!(r.n_eval, 20);
        assert!(r.std()[2] == 0.0);
        assert!(r.to_text("mf").contains("cohort:"));
    }
}
