//! Matrix factorization trained by per-entry stochastic gradient descent.
//!
//! A score is predicted as the inner product of a model's latent vector and a
//! task's latent vector. Training samples one observed entry per step and
//! takes a gradient step on its squared error (plus an optional L2 penalty).

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::dataset::ScoreMatrix;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub latent_dim: usize,
    pub learning_rate: f64,
    /// Number of update steps; one sampled entry per step for matrix
    /// factorization, one training example for the neural model.
    pub iterations: usize,
    pub l2_penalty: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            latent_dim: 10,
            learning_rate: 0.01,
            iterations: 250_000,
            l2_penalty: 0.0,
            seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 {
            return Err(Error::Config("latent_dim must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be at least 1".into()));
        }
        if !(self.l2_penalty >= 0.0) {
            return Err(Error::Config("l2_penalty must be nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MfModel {
    dim: usize,
    n_models: usize,
    n_tasks: usize,
    /// Row-major `n_models x dim`.
    p: Vec<f64>,
    /// Row-major `n_tasks x dim`.
    q: Vec<f64>,
}

/// Gaussian(0, 0.1) initialization, reproducible from `config.seed`.
pub fn init_mf(n_models: usize, n_tasks: usize, config: &TrainConfig) -> Result<MfModel> {
    config.validate()?;
    if n_models == 0 || n_tasks == 0 {
        return Err(Error::Config("matrix must have at least one model and one task".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let normal = Normal::new(0.0, 0.1).unwrap();
    let d = config.latent_dim;
    let p = (0..n_models * d).map(|_| normal.sample(&mut rng)).collect();
    let q = (0..n_tasks * d).map(|_| normal.sample(&mut rng)).collect();
    Ok(MfModel {
        dim: d,
        n_models,
        n_tasks,
        p,
        q,
    })
}

/// Training-set MSE recorded every `TRACE_EVERY` steps.
pub const TRACE_EVERY: usize = 10_000;

pub fn train_mf(train: &ScoreMatrix, config: &TrainConfig) -> Result<MfModel> {
    Ok(train_mf_traced(train, config)?.0)
}

pub fn train_mf_traced(train: &ScoreMatrix, config: &TrainConfig) -> Result<(MfModel, Vec<f64>)> {
    if train.is_empty() {
        return Err(Error::Input("training matrix is empty".into()));
    }
    let mut model = init_mf(train.n_models(), train.n_tasks(), config)?;
    // Sampling uses its own stream so that initialization is unchanged by it.
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x9e37_79b9_7f4a_7c15));
    let d = model.dim;
    let lr = config.learning_rate;
    let lambda = config.l2_penalty;
    let entries = train.entries();
    let mut trace = Vec::new();
    let mut grad_p = vec![0.0; d];

    for step in 0..config.iterations {
        let e = &entries[rng.random_range(0..entries.len())];
        let (pu, qi) = model.rows_mut(e.model, e.task);
        let err = dot(pu, qi) - e.score;
        if !err.is_finite() {
            return Err(Error::Training {
                step,
                message: "prediction error is not finite".into(),
            });
        }
        for k in 0..d {
            grad_p[k] = 2.0 * err * qi[k] + 2.0 * lambda * pu[k];
        }
        for k in 0..d {
            qi[k] -= lr * (2.0 * err * pu[k] + 2.0 * lambda * qi[k]);
            pu[k] -= lr * grad_p[k];
        }
        if (step + 1) % TRACE_EVERY == 0 {
            let loss = model.training_mse(train);
            if !loss.is_finite() {
                return Err(Error::Training {
                    step,
                    message: "training loss is not finite".into(),
                });
            }
            trace.push(loss);
        }
    }
    let loss = model.training_mse(train);
    if !loss.is_finite() {
        return Err(Error::Training {
            step: config.iterations,
            message: "final training loss is not finite".into(),
        });
    }
    Ok((model, trace))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl MfModel {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_models(&self) -> usize {
        self.n_models
    }

    pub fn n_tasks(&self) -> usize {
        self.n_tasks
    }

    pub fn model_vector(&self, model: usize) -> &[f64] {
        &self.p[model * self.dim..(model + 1) * self.dim]
    }

    pub fn task_vector(&self, task: usize) -> &[f64] {
        &self.q[task * self.dim..(task + 1) * self.dim]
    }

    pub fn model_vector_mut(&mut self, model: usize) -> &mut [f64] {
        &mut self.p[model * self.dim..(model + 1) * self.dim]
    }

    pub fn task_vector_mut(&mut self, task: usize) -> &mut [f64] {
        &mut self.q[task * self.dim..(task + 1) * self.dim]
    }

    fn rows_mut(&mut self, model: usize, task: usize) -> (&mut [f64], &mut [f64]) {
        let d = self.dim;
        (
            &mut self.p[model * d..(model + 1) * d],
            &mut self.q[task * d..(task + 1) * d],
        )
    }

    fn check(&self, model: usize, task: usize) -> Result<()> {
        if model >= self.n_models || task >= self.n_tasks {
            return Err(Error::Index(format!(
                "({model}, {task}) outside a {}x{} model",
                self.n_models, self.n_tasks
            )));
        }
        Ok(())
    }

    /// Unclamped inner product.
    pub fn predict_raw(&self, model: usize, task: usize) -> Result<f64> {
        self.check(model, task)?;
        Ok(dot(self.model_vector(model), self.task_vector(task)))
    }

    pub fn training_mse(&self, train: &ScoreMatrix) -> f64 {
        let sum: f64 = train
            .entries()
            .iter()
            .map(|e| (dot(self.model_vector(e.model), self.task_vector(e.task)) - e.score).powi(2))
            .sum();
        sum / train.len().max(1) as f64
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    /// Text checkpoint: a magic line, `dim`, `models`, `tasks`, then the rows
    /// of P and of Q, one row per line. Floats use shortest round-trip form.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "{MF_MAGIC}").unwrap();
        writeln!(s, "dim {}", self.dim).unwrap();
        writeln!(s, "models {}", self.n_models).unwrap();
        writeln!(s, "tasks {}", self.n_tasks).unwrap();
        writeln!(s, "P").unwrap();
        for row in self.p.chunks(self.dim) {
            writeln!(s, "{}", join(row)).unwrap();
        }
        writeln!(s, "Q").unwrap();
        for row in self.q.chunks(self.dim) {
            writeln!(s, "{}", join(row)).unwrap();
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        let mut lines = text.lines();
        if lines.next() != Some(MF_MAGIC) {
            return Err(bad("not a matrix-factorization checkpoint"));
        }
        let mut header = |key: &str| -> Result<usize> {
            let line = lines.next().ok_or_else(|| bad("truncated header"))?;
            line.strip_prefix(key)
                .and_then(|v| v.trim().parse().ok())
                .ok_or_else(|| bad(&format!("expected '{key} <n>', got '{line}'")))
        };
        let dim = header("dim")?;
        let n_models = header("models")?;
        let n_tasks = header("tasks")?;
        if dim == 0 {
            return Err(bad("dim must be at least 1"));
        }
        let mut read_block = |tag: &str, rows: usize| -> Result<Vec<f64>> {
            if lines.next() != Some(tag) {
                return Err(bad(&format!("missing '{tag}' block")));
            }
            let mut out = Vec::with_capacity(rows * dim);
            for _ in 0..rows {
                let row = parse_row(lines.next().ok_or_else(|| bad("truncated table"))?)?;
                if row.len() != dim {
                    return Err(bad("row width does not match dim"));
                }
                out.extend(row);
            }
            Ok(out)
        };
        let p = read_block("P", n_models)?;
        let q = read_block("Q", n_tasks)?;
        Ok(MfModel {
            dim,
            n_models,
            n_tasks,
            p,
            q,
        })
    }
}

const MF_MAGIC: &str = "collabperf-mf v1";

pub(crate) fn join(row: &[f64]) -> String {
    row.iter().map(f64::to_string).collect::<Vec<_>>().join(" ")
}

pub(crate) fn parse_row(line: &str) -> Result<Vec<f64>> {
    line.split_whitespace()
        .map(|t| {
            t.parse::<f64>()
                .ok()
                .filter(|x| x.is_finite())
                .ok_or_else(|| Error::Checkpoint(format!("bad number '{t}'")))
        })
        .collect()
}

/// Clamped prediction in [0, 1].
pub fn predict_mf(model: &MfModel, model_index: usize, task_index: usize) -> Result<f64> {
    Ok(model.predict_raw(model_index, task_index)?.clamp(0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{synth, Entry};

    #[test]
    fn init_is_reproducible() {
        let cfg = TrainConfig {
            latent_dim: 2,
            seed: 1,
            ..Default::default()
        };
        let a = init_mf(2, 2, &cfg).unwrap();
        let b = init_mf(2, 2, &cfg).unwrap();
        assert_eq!(a.model_vector(1).len(), 2);
        assert_eq!(a, b);
        let bits = |m: &MfModel| m.p.iter().chain(&m.q).map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn zero_dim_is_config_error() {
        let cfg = TrainConfig {
            latent_dim: 0,
            ..Default::default()
        };
        assert!(matches!(init_mf(2, 2, &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn single_entry_fit() {
        let m = ScoreMatrix::new(
            vec!["A".into()],
            vec!["T".into()],
            vec![Entry {
                model: 0,
                task: 0,
                score: 0.5,
                source: None,
            }],
        )
        .unwrap();
        let cfg = TrainConfig {
            latent_dim: 1,
            iterations: 20_000,
            learning_rate: 0.05,
            ..Default::default()
        };
        let model = train_mf(&m, &cfg).unwrap();
        assert!((predict_mf(&model, 0, 0).unwrap() - 0.5).abs() < 1e-3);
    }

    #[test]
    fn clamps_and_zero_vectors() {
        let mut model = init_mf(2, 2, &TrainConfig { latent_dim: 2, ..Default::default() }).unwrap();
        model.model_vector_mut(0).fill(0.0);
        model.task_vector_mut(0).fill(0.0);
        assert_eq!(predict_mf(&model, 0, 0).unwrap(), 0.0);
        model.model_vector_mut(1).copy_from_slice(&[1.0, 0.4]);
        model.task_vector_mut(1).copy_from_slice(&[1.0, 1.0]);
        assert!((model.predict_raw(1, 1).unwrap() - 1.4).abs() < 1e-15);
        assert_eq!(predict_mf(&model, 1, 1).unwrap(), 1.0);
        assert!(matches!(predict_mf(&model, 2, 0), Err(Error::Index(_))));
    }

    #[test]
    fn divergence_reports_step() {
        let lr = synth::low_rank(6, 5, 2, 0.8, 2);
        let cfg = TrainConfig {
            latent_dim: 2,
            learning_rate: 1e6,
            iterations: 10_000,
            ..Default::default()
        };
        match train_mf(&lr.matrix, &cfg) {
            Err(Error::Training { step, .. }) => assert!(step < 10_000),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn rank_two_completion() {
        let lr = synth::low_rank(10, 8, 2, 0.6, 7);
        let cfg = TrainConfig {
            latent_dim: 2,
            iterations: 50_000,
            learning_rate: 0.2,
            seed: 1,
            ..Default::default()
        };
        let model = train_mf(&lr.matrix, &cfg).unwrap();
        let sq: f64 = lr
            .held_out
            .entries()
            .iter()
            .map(|e| (predict_mf(&model, e.model, e.task).unwrap() - e.score).powi(2))
            .sum();
        let mse = sq / lr.held_out.len() as f64;
        assert!(mse < 1e-3, "held-out mse {mse}");
    }

    #[test]
    fn training_is_bit_reproducible() {
        let lr = synth::low_rank(8, 6, 2, 0.7, 1);
        let cfg = TrainConfig {
            latent_dim: 3,
            iterations: 5_000,
            ..Default::default()
        };
        assert_eq!(train_mf(&lr.matrix, &cfg).unwrap(), train_mf(&lr.matrix, &cfg).unwrap());
    }

    #[test]
    fn checkpoint_roundtrip_is_exact() {
        let cfg = TrainConfig {
            latent_dim: 3,
            seed: 9,
            ..Default::default()
        };
        let m = init_mf(4, 5, &cfg).unwrap();
        let back = MfModel::from_text(&m.to_text()).unwrap();
        assert_eq!(m, back);
        assert!(MfModel::from_text("garbage").is_err());
    }
}
