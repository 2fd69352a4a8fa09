//! Synthetic score matrices with known ground truth.
//!
//! Used by the test suites and by the examples to check that a predictor
//! recovers structure it is known to be able to represent.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Dataset, Entry, Factor, ModelRecord, Records, ScoreMatrix, TaskRecord};

pub fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[derive(Debug, Clone)]
pub struct LowRank {
    /// Observed part.
    pub matrix: ScoreMatrix,
    /// Unobserved cells with their true values.
    pub held_out: ScoreMatrix,
    /// Row-major `n x d` model factors.
    pub p: Vec<f64>,
    /// Row-major `m x d` task factors.
    pub q: Vec<f64>,
    pub dim: usize,
}

impl LowRank {
    pub fn truth(&self, model: usize, task: usize) -> f64 {
        let d = self.dim;
        (0..d).map(|k| self.p[model * d + k] * self.q[task * d + k]).sum()
    }
}

fn names(prefix: &str, n: usize) -> Vec<String> {
    (0..n).map(|i| format!("{prefix}{i}")).collect()
}

/// Exact rank-`dim` scores `P Q^T` with factor entries drawn from
/// `U[0,1]/sqrt(dim)`, so every score lies in [0, 1].
///
/// `round(observed * n * m)` cells are observed, chosen uniformly. The mask
/// is redrawn (deterministically) until every row and column has at least
/// `min(dim, m)` / `min(dim, n)` observations, which the low-rank completion
/// needs for identifiability.
pub fn low_rank(n: usize, m: usize, dim: usize, observed: f64, seed: u64) -> LowRank {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = 1.0 / (dim as f64).sqrt();
    let p: Vec<f64> = (0..n * dim).map(|_| rng.random::<f64>() * scale).collect();
    let q: Vec<f64> = (0..m * dim).map(|_| rng.random::<f64>() * scale).collect();
    let k = ((observed * (n * m) as f64).round() as usize).clamp(1, n * m);

    let mut mask = vec![false; n * m];
    for _attempt in 0..1000 {
        mask.iter_mut().for_each(|c| *c = false);
        for c in index::sample(&mut rng, n * m, k) {
            mask[c] = true;
        }
        let rows_ok = (0..n).all(|i| (0..m).filter(|&j| mask[i * m + j]).count() >= dim.min(m));
        let cols_ok = (0..m).all(|j| (0..n).filter(|&i| mask[i * m + j]).count() >= dim.min(n));
        if rows_ok && cols_ok {
            break;
        }
    }

    let value = |i: usize, j: usize| -> f64 {
        (0..dim).map(|t| p[i * dim + t] * q[j * dim + t]).sum::<f64>().clamp(0.0, 1.0)
    };
    let mut seen = Vec::new();
    let mut unseen = Vec::new();
    for i in 0..n {
        for j in 0..m {
            let e = Entry {
                model: i,
                task: j,
                score: value(i, j),
                source: None,
            };
            if mask[i * m + j] {
                seen.push(e);
            } else {
                unseen.push(e);
            }
        }
    }
    let matrix = ScoreMatrix::new(names("M", n), names("T", m), seen).expect("valid synthetic");
    let held_out = matrix.with_entries(unseen);
    LowRank {
        matrix,
        held_out,
        p,
        q,
        dim,
    }
}

/// Simple factor records for a synthetic matrix: models get a family, a
/// parameter count and a layer count; tasks get an ability and format.
pub fn placeholder_records(matrix: &ScoreMatrix, seed: u64) -> Records {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let models = matrix
        .models()
        .iter()
        .enumerate()
        .map(|(i, name)| {
            let mut r = ModelRecord::new(name.clone());
            let params = 10f64.powf(rng.random_range(2.0..5.0));
            r.set(Factor::Family, &format!("fam{}", i % 3)).unwrap();
            r.set(Factor::Params, &format!("{params:.1}")).unwrap();
            r.set(Factor::Layers, &format!("{}", 8 + 4 * (i % 5))).unwrap();
            r.set(Factor::ContextWindow, if i % 2 == 0 { "2048" } else { "4096" })
                .unwrap();
            r
        })
        .collect();
    let tasks = matrix
        .tasks()
        .iter()
        .enumerate()
        .map(|(j, name)| {
            let mut r = TaskRecord::new(name.clone());
            r.set(Factor::Ability, &format!("ability{}", j % 3)).unwrap();
            r.set(Factor::OutputFormat, if j % 2 == 0 { "binary" } else { "generation" })
                .unwrap();
            r.set(Factor::FewShot, &format!("{}-shot", j % 2)).unwrap();
            r.set(Factor::TaskFamily, name).unwrap();
            r
        })
        .collect();
    Records { models, tasks }
}

/// Per-task sigmoid scaling curve shared by every family, plus a small
/// per-family offset on the bias.
#[derive(Debug, Clone)]
pub struct SigmoidFamilies {
    pub dataset: Dataset,
    /// `(w, b)` per task.
    pub curves: Vec<(f64, f64)>,
    pub family_offset: Vec<f64>,
    /// Model index of each family's largest member.
    pub largest: Vec<usize>,
}

impl SigmoidFamilies {
    pub fn truth(&self, model: usize, task: usize) -> f64 {
        let rec = &self.dataset.records.models[model];
        let fam: usize = rec.family.as_deref().unwrap()[3..].parse().unwrap();
        let (w, b) = self.curves[task];
        logistic(w * rec.params_m.ln() + b + self.family_offset[fam])
    }
}

/// Families of models at increasing parameter counts (millions), every model
/// scored on every task by `sigmoid(w_t ln C + b_t + offset_f)`.
pub fn sigmoid_families(families: usize, tasks: usize, seed: u64) -> SigmoidFamilies {
    const SIZES: [f64; 6] = [150.0, 400.0, 1_000.0, 3_000.0, 7_000.0, 20_000.0];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let curves: Vec<(f64, f64)> = (0..tasks)
        .map(|_| {
            // Keeps `b` inside the default scaling-fit bounds.
            let w = rng.random_range(0.7..1.1);
            let mid = rng.random_range(6.0..8.5);
            (w, -w * mid)
        })
        .collect();
    let family_offset: Vec<f64> = (0..families).map(|_| rng.random_range(-0.15..0.15)).collect();

    let mut models = Vec::new();
    let mut largest = Vec::new();
    for f in 0..families {
        let jitter = rng.random_range(0.85..1.15);
        for (s, size) in SIZES.iter().enumerate() {
            let mut r = ModelRecord::new(format!("fam{f}-{s}"));
            r.set(Factor::Family, &format!("fam{f}")).unwrap();
            r.set(Factor::Params, &format!("{:.1}", size * jitter)).unwrap();
            r.set(Factor::Layers, &format!("{}", 6 + 6 * s)).unwrap();
            r.set(Factor::PretrainTokens, &format!("{}", 300 + 100 * f)).unwrap();
            models.push(r);
        }
        largest.push(models.len() - 1);
    }
    let task_records: Vec<TaskRecord> = (0..tasks)
        .map(|j| {
            let mut r = TaskRecord::new(format!("task{j}"));
            r.set(Factor::Ability, &format!("ability{}", j % 3)).unwrap();
            r.set(Factor::TaskFamily, &format!("task{j}")).unwrap();
            r.set(Factor::OutputFormat, "multiple choice").unwrap();
            r.set(Factor::FewShot, "0-shot").unwrap();
            r
        })
        .collect();

    let mut entries = Vec::new();
    for (i, r) in models.iter().enumerate() {
        let f = i / SIZES.len();
        for (j, &(w, b)) in curves.iter().enumerate() {
            entries.push(Entry {
                model: i,
                task: j,
                score: logistic(w * r.params_m.ln() + b + family_offset[f]),
                source: None,
            });
        }
    }
    let scores = ScoreMatrix::new(
        models.iter().map(|r| r.identifier.clone()).collect(),
        task_records.iter().map(|r| r.identifier.clone()).collect(),
        entries,
    )
    .expect("valid synthetic");
    let records = Records {
        models,
        tasks: task_records,
    };
    SigmoidFamilies {
        dataset: Dataset { scores, records },
        curves,
        family_offset,
        largest,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn low_rank_scores_match_factors() {
        let lr = low_rank(10, 8, 2, 0.6, 3);
        assert_eq!(lr.matrix.len(), 48);
        assert_eq!(lr.held_out.len(), 32);
        for e in lr.matrix.entries().iter().chain(lr.held_out.entries()) {
            assert!((e.score - lr.truth(e.model, e.task)).abs() < 1e-15);
        }
    }

    #[test]
    fn sigmoid_families_are_monotone_in_size() {
        let s = sigmoid_families(3, 4, 1);
        let m = &s.dataset.scores;
        for &big in &s.largest {
            for t in 0..m.n_tasks() {
                assert!(m.get(big, t).unwrap() > m.get(big - 1, t).unwrap());
                assert!((m.get(big, t).unwrap() - s.truth(big, t)).abs() < 1e-15);
            }
        }
    }
}
