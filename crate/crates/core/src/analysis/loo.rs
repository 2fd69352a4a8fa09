use std::fmt::{self, Write as _};
use std::str::FromStr;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use super::cluster::{flat_clusters, hierarchical_cluster, Dendrogram};
use super::{train_method, ExperimentConfig, Method};
use crate::attribution::csv_field;
use crate::dataset::{Dataset, Entry, ScoreMatrix};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Models,
    Tasks,
}

impl Axis {
    fn entity(self, e: &Entry) -> usize {
        match self {
            Axis::Models => e.model,
            Axis::Tasks => e.task,
        }
    }

    fn other(self, e: &Entry) -> usize {
        match self {
            Axis::Models => e.task,
            Axis::Tasks => e.model,
        }
    }

    fn names(self, m: &ScoreMatrix) -> &[String] {
        match self {
            Axis::Models => m.models(),
            Axis::Tasks => m.tasks(),
        }
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Axis::Models => "models",
            Axis::Tasks => "tasks",
        })
    }
}

impl FromStr for Axis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "models" => Ok(Axis::Models),
            "tasks" => Ok(Axis::Tasks),
            _ => Err(Error::Config(format!("unknown axis '{s}' (models or tasks)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LooOptions {
    pub method: Method,
    /// Share of each entity's entries held out to measure its loss.
    pub holdout_fraction: f64,
    /// Flat-cluster cut height on `1 - correlation`.
    pub cut: f64,
}

impl Default for LooOptions {
    fn default() -> Self {
        LooOptions {
            method: Method::NcfFactor,
            holdout_fraction: 0.2,
            cut: 0.5,
        }
    }
}

pub const LOO_LOSS: &str = "mse";

/// Rows are masked entities, columns validation entities; both index
/// `entities`.
#[derive(Debug, Clone, PartialEq)]
pub struct LooResult {
    pub axis: Axis,
    pub entities: Vec<usize>,
    pub loss_matrix: Vec<Vec<f64>>,
    pub baseline_losses: Vec<f64>,
    pub delta_matrix: Vec<Vec<f64>>,
    pub normalized_delta: Vec<Vec<f64>>,
    /// Columns with no spread; zero after normalization and left out of the
    /// correlation.
    pub degenerate: Vec<bool>,
    pub correlation: Vec<Vec<f64>>,
    pub dendrogram: Dendrogram,
    /// Groups of positions into `entities`.
    pub clusters: Vec<Vec<usize>>,
}

/// Held-out entries of one entity, chosen by a generator seeded from the run
/// seed and the entity's observation pattern, so entities observed on the
/// same cells get the same holdout.
fn holdout(axis: Axis, entries: &[&Entry], fraction: f64, seed: u64) -> Vec<usize> {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    for e in entries {
        h.update((axis.other(e) as u64).to_le_bytes());
    }
    let digest = h.finalize();
    let mut rng = ChaCha8Rng::seed_from_u64(u64::from_le_bytes(digest[..8].try_into().unwrap()));
    let k = ((fraction * entries.len() as f64).ceil() as usize).clamp(1, entries.len());
    let mut picked = index::sample(&mut rng, entries.len(), k).into_vec();
    picked.sort_unstable();
    picked.into_iter().map(|i| axis.other(entries[i])).collect()
}

/// Masks each entity in turn and measures how every entity's held-out loss
/// changes relative to an unmasked run, then correlates and clusters the
/// masked entities by those changes.
///
/// Each seed draws a holdout per entity; the baseline trains without any
/// holdout entry, and masking entity `A` additionally drops all of `A`'s
/// entries. Losses are averaged over seeds before taking differences.
pub fn leave_one_out(
    dataset: &Dataset,
    axis: Axis,
    seeds: &[u64],
    options: &LooOptions,
    config: &ExperimentConfig,
) -> Result<LooResult> {
    if seeds.is_empty() {
        return Err(Error::Config("need at least one seed".into()));
    }
    if !(options.holdout_fraction > 0.0 && options.holdout_fraction < 1.0) {
        return Err(Error::Config(format!(
            "holdout fraction {} must lie in (0, 1)",
            options.holdout_fraction
        )));
    }
    let scores = &dataset.scores;
    let names = axis.names(scores);
    let mut by_entity: Vec<Vec<&Entry>> = vec![Vec::new(); names.len()];
    for e in scores.entries() {
        by_entity[axis.entity(e)].push(e);
    }
    let mut entities = Vec::new();
    for (i, es) in by_entity.iter().enumerate() {
        if es.is_empty() {
            log::warn!("skipping {axis} entity '{}': no observed entries", names[i]);
        } else {
            entities.push(i);
        }
    }
    if entities.len() < 3 {
        return Err(Error::Config(format!(
            "leave-one-out needs at least 3 {axis} with entries, found {}",
            entities.len()
        )));
    }

    // Per seed: for each entity, the cells of its holdout.
    let holdouts: Vec<Vec<Vec<(usize, usize)>>> = seeds
        .iter()
        .map(|&seed| {
            entities
                .iter()
                .map(|&a| {
                    holdout(axis, &by_entity[a], options.holdout_fraction, seed)
                        .into_iter()
                        .map(|o| match axis {
                            Axis::Models => (a, o),
                            Axis::Tasks => (o, a),
                        })
                        .collect()
                })
                .collect()
        })
        .collect();

    let jobs: Vec<(usize, Option<usize>)> = (0..seeds.len())
        .flat_map(|s| std::iter::once((s, None)).chain((0..entities.len()).map(move |a| (s, Some(a)))))
        .collect();
    let losses: Vec<Result<Vec<f64>>> = jobs
        .par_iter()
        .map(|&(s, masked)| {
            let held: std::collections::HashSet<(usize, usize)> =
                holdouts[s].iter().flatten().copied().collect();
            let train = scores.filtered(|e| {
                !held.contains(&(e.model, e.task)) && masked.is_none_or(|a| axis.entity(e) != entities[a])
            });
            let label = masked.map_or("baseline".to_string(), |a| format!("masked '{}'", names[entities[a]]));
            entity_losses(dataset, &train, &holdouts[s], options.method, config, seeds[s])
                .map_err(|e| e.in_job(format!("leave-one-out {label}, seed {}", seeds[s])))
        })
        .collect();

    let k = entities.len();
    let mut loss_matrix = vec![vec![0.0; k]; k];
    let mut baseline_losses = vec![0.0; k];
    let n_seeds = seeds.len() as f64;
    for (&(_, masked), l) in jobs.iter().zip(losses) {
        let l = l?;
        let row = match masked {
            None => &mut baseline_losses,
            Some(a) => &mut loss_matrix[a],
        };
        for (acc, x) in row.iter_mut().zip(l) {
            *acc += x / n_seeds;
        }
    }

    let delta_matrix: Vec<Vec<f64>> = loss_matrix
        .iter()
        .map(|row| row.iter().zip(&baseline_losses).map(|(l, b)| l - b).collect())
        .collect();
    let (normalized_delta, degenerate) = normalize_columns(&delta_matrix);
    for (j, _) in degenerate.iter().enumerate().filter(|(_, d)| **d) {
        log::warn!(
            "delta column for '{}' is constant; excluded from the correlation",
            names[entities[j]]
        );
    }
    let correlation = row_correlation(&normalized_delta, &degenerate);
    let dendrogram = hierarchical_cluster(&correlation);
    let clusters = flat_clusters(&dendrogram, options.cut);
    Ok(LooResult {
        axis,
        entities,
        loss_matrix,
        baseline_losses,
        delta_matrix,
        normalized_delta,
        degenerate,
        correlation,
        dendrogram,
        clusters,
    })
}

fn entity_losses(
    dataset: &Dataset,
    train: &ScoreMatrix,
    holdouts: &[Vec<(usize, usize)>],
    method: Method,
    config: &ExperimentConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    let model = train_method(method, dataset, train, config, seed)?;
    let cells: Vec<(usize, usize)> = holdouts.iter().flatten().copied().collect();
    let preds = model.predict(&cells)?;
    let mut it = preds.into_iter();
    holdouts
        .iter()
        .map(|h| {
            let mut sum = 0.0;
            for &(m, t) in h {
                let p = it.next().unwrap().ok_or_else(|| {
                    Error::Coverage(format!("{method} has no prediction for a held-out entry"))
                })?;
                let truth = dataset.scores.get(m, t).expect("held-out cell is observed");
                sum += (p - truth).powi(2);
            }
            Ok(sum / h.len() as f64)
        })
        .collect()
}

/// Standardizes every column to mean 0 and population variance 1. Columns
/// without spread become zeros and are flagged.
pub(crate) fn normalize_columns(m: &[Vec<f64>]) -> (Vec<Vec<f64>>, Vec<bool>) {
    let rows = m.len();
    let cols = m.first().map_or(0, Vec::len);
    let mut out = vec![vec![0.0; cols]; rows];
    let mut degenerate = vec![false; cols];
    for j in 0..cols {
        let mean = m.iter().map(|r| r[j]).sum::<f64>() / rows as f64;
        let var = m.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / rows as f64;
        let std = var.sqrt();
        let scale = m.iter().map(|r| r[j].abs()).fold(0.0, f64::max);
        if !(std > 1e-12 * scale) {
            degenerate[j] = true;
            continue;
        }
        for i in 0..rows {
            out[i][j] = (m[i][j] - mean) / std;
        }
    }
    (out, degenerate)
}

/// Pearson correlation between rows over the non-degenerate columns. A row
/// with no spread correlates 0 with every other row.
pub(crate) fn row_correlation(m: &[Vec<f64>], degenerate: &[bool]) -> Vec<Vec<f64>> {
    let keep: Vec<usize> = (0..degenerate.len()).filter(|&j| !degenerate[j]).collect();
    let centered: Vec<Vec<f64>> = m
        .iter()
        .map(|r| {
            let xs: Vec<f64> = keep.iter().map(|&j| r[j]).collect();
            let mean = if xs.is_empty() { 0.0 } else { xs.iter().sum::<f64>() / xs.len() as f64 };
            xs.iter().map(|x| x - mean).collect()
        })
        .collect();
    let norms: Vec<f64> = centered.iter().map(|r| r.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
    let n = m.len();
    let mut c = vec![vec![0.0; n]; n];
    for i in 0..n {
        c[i][i] = 1.0;
        for j in i + 1..n {
            let v = if norms[i] > 0.0 && norms[j] > 0.0 {
                let dot: f64 = centered[i].iter().zip(&centered[j]).map(|(a, b)| a * b).sum();
                (dot / (norms[i] * norms[j])).clamp(-1.0, 1.0)
            } else {
                0.0
            };
            c[i][j] = v;
            c[j][i] = v;
        }
    }
    c
}

impl LooResult {
    fn names<'a>(&self, dataset: &'a Dataset) -> Vec<&'a String> {
        let all = self.axis.names(&dataset.scores);
        self.entities.iter().map(|&i| &all[i]).collect()
    }

    /// A square table with entity names on both axes.
    pub fn matrix_csv(&self, dataset: &Dataset, m: &[Vec<f64>]) -> String {
        let names = self.names(dataset);
        let mut s = String::from("masked");
        for n in &names {
            write!(s, ",{}", csv_field(n)).unwrap();
        }
        s.push('\n');
        for (n, row) in names.iter().zip(m) {
            s.push_str(&csv_field(n));
            for x in row {
                write!(s, ",{x:.6e}").unwrap();
            }
            s.push('\n');
        }
        s
    }

    /// Per validation entity: baseline loss, whether its delta column was
    /// degenerate, and its flat cluster.
    pub fn summary_csv(&self, dataset: &Dataset) -> String {
        let names = self.names(dataset);
        let mut cluster_of = vec![0; names.len()];
        for (c, members) in self.clusters.iter().enumerate() {
            for &m in members {
                cluster_of[m] = c;
            }
        }
        let mut s = format!("entity,axis,baseline_{LOO_LOSS},own_delta,degenerate_column,cluster\n");
        for (i, n) in names.iter().enumerate() {
            writeln!(
                s,
                "{},{},{:.6e},{:.6e},{},{}",
                csv_field(n),
                self.axis,
                self.baseline_losses[i],
                self.delta_matrix[i][i],
                self.degenerate[i],
                cluster_of[i]
            )
            .unwrap();
        }
        s
    }

    pub fn dendrogram_csv(&self, dataset: &Dataset) -> String {
        let names: Vec<String> = self.names(dataset).into_iter().cloned().collect();
        self.dendrogram.to_csv(&names)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{synth, Records, TaskRecord};
    use crate::mf::TrainConfig;
    use proptest::prelude::*;

    fn quick(iterations: usize) -> ExperimentConfig {
        let mut c = ExperimentConfig::default();
        c.ncf.train.iterations = iterations;
        c.ncf.hidden = vec![8, 4];
        c.ncf.embed_width = 4;
        c
    }

    /// Six models with distinct factors; models 2 and 3 are exact twins.
    fn with_twins() -> Dataset {
        let lr = synth::low_rank(6, 5, 2, 1.0, 21);
        let mut records = synth::placeholder_records(&lr.matrix, 5);
        let mut twin = records.models[2].clone();
        twin.identifier = records.models[3].identifier.clone();
        records.models[3] = twin;
        let tasks: Vec<TaskRecord> = records.tasks.clone();
        let mut entries = Vec::new();
        for t in 0..5 {
            for m in 0..6 {
                let src = if m == 3 { 2 } else { m };
                entries.push(Entry {
                    model: m,
                    task: t,
                    score: lr.truth(src, t),
                    source: None,
                });
            }
        }
        let scores = ScoreMatrix::new(lr.matrix.models().to_vec(), lr.matrix.tasks().to_vec(), entries).unwrap();
        let records = Records::link(&scores, records.models, tasks).unwrap();
        Dataset { scores, records }
    }

    #[test]
    fn twins_correlate_perfectly() {
        let d = with_twins();
        let opts = LooOptions {
            method: Method::FactorOnly,
            ..LooOptions::default()
        };
        let r = leave_one_out(&d, Axis::Models, &[1, 2], &opts, &quick(6_000)).unwrap();
        assert_eq!(r.loss_matrix[2], r.loss_matrix[3]);
        assert!((r.correlation[2][3] - 1.0).abs() < 1e-9, "{}", r.correlation[2][3]);
        assert!(r.clusters.iter().any(|c| c.contains(&2) && c.contains(&3)));
    }

    #[test]
    fn masking_an_entity_hurts_its_own_column() {
        let lr = synth::low_rank(8, 10, 1, 1.0, 5);
        let records = synth::placeholder_records(&lr.matrix, 5);
        let d = Dataset {
            scores: lr.matrix,
            records,
        };
        let mut cfg = quick(1);
        cfg.mf = TrainConfig {
            latent_dim: 1,
            learning_rate: 0.1,
            iterations: 20_000,
            ..cfg.mf
        };
        let opts = LooOptions {
            method: Method::Mf,
            ..LooOptions::default()
        };
        let r = leave_one_out(&d, Axis::Models, &[1, 2, 3], &opts, &cfg).unwrap();
        let own: Vec<f64> = (0..8).map(|i| r.delta_matrix[i][i]).collect();
        let mean = own.iter().sum::<f64>() / 8.0;
        assert!(mean > 0.0, "{own:?}");
        assert!(own.iter().filter(|d| **d > 0.0).count() >= 6, "{own:?}");
        for row in &r.correlation {
            assert_eq!(row.len(), 8);
        }
    }

    #[test]
    fn task_axis_and_empty_entities() {
        let lr = synth::low_rank(5, 6, 1, 1.0, 8);
        let scores = lr.matrix.filtered(|e| e.task != 4);
        let records = synth::placeholder_records(&scores, 2);
        let d = Dataset { scores, records };
        let opts = LooOptions {
            method: Method::Mf,
            ..LooOptions::default()
        };
        let mut cfg = quick(1);
        cfg.mf.iterations = 5_000;
        let r = leave_one_out(&d, Axis::Tasks, &[4], &opts, &cfg).unwrap();
        assert_eq!(r.entities, vec![0, 1, 2, 3, 5]);
        let first = format!("{},tasks,", d.scores.tasks()[0]);
        assert!(r.summary_csv(&d).lines().nth(1).unwrap().starts_with(&first));
    }

    #[test]
    fn constant_column_is_flagged_and_ignored() {
        let m = vec![vec![1.0, 0.3, 2.0], vec![2.0, 0.3, 1.0], vec![4.0, 0.3, 0.5]];
        let (z, deg) = normalize_columns(&m);
        assert_eq!(deg, vec![false, true, false]);
        assert!(z.iter().all(|r| r[1] == 0.0));
        let c = row_correlation(&z, &deg);
        let kept: Vec<Vec<f64>> = z.iter().map(|r| vec![r[0], r[2]]).collect();
        let reference = row_correlation(&kept, &[false, false]);
        for i in 0..3 {
            for j in 0..3 {
                assert!((c[i][j] - reference[i][j]).abs() < 1e-12);
            }
        }
    }

    proptest! {
        #[test]
        fn normalization_and_correlation_invariants(
            m in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 5), 4..8)
        ) {
            let (z, deg) = normalize_columns(&m);
            for j in 0..5 {
                let mean = z.iter().map(|r| r[j]).sum::<f64>() / z.len() as f64;
                prop_assert!(mean.abs() < 1e-9);
                if !deg[j] {
                    let var = z.iter().map(|r| r[j] * r[j]).sum::<f64>() / z.len() as f64;
                    prop_assert!((var - 1.0).abs() < 1e-9);
                }
            }
            let c = row_correlation(&z, &deg);
            for i in 0..c.len() {
                prop_assert!((c[i][i] - 1.0).abs() < 1e-9);
                for j in 0..c.len() {
                    prop_assert_eq!(c[i][j], c[j][i]);
                    prop_assert!(c[i][j].abs() <= 1.0);
                }
            }
        }
    }
}
