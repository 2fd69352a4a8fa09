use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Entry, ScoreMatrix};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scenario {
    /// Uniform sample of all observed entries.
    Random,
    /// The target model's entries are all held out.
    Cpp0 { target: usize },
    /// Two of the target model's entries stay in training; the rest are held out.
    Cpp2 { target: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitSpec {
    pub seed: u64,
    pub validation_fraction: f64,
    pub scenario: Scenario,
}

impl SplitSpec {
    pub fn random(seed: u64) -> Self {
        SplitSpec {
            seed,
            validation_fraction: 0.05,
            scenario: Scenario::Random,
        }
    }
}

/// Partitions the observed entries into `(train, valid)`.
///
/// Both halves keep the registries of `matrix` and the original entry order,
/// and the result depends only on `(matrix, spec)`.
pub fn split(matrix: &ScoreMatrix, spec: &SplitSpec) -> Result<(ScoreMatrix, ScoreMatrix)> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = matrix.len();
    let mut in_valid = vec![false; n];
    match spec.scenario {
        Scenario::Random => {
            let f = spec.validation_fraction;
            if !(f > 0.0 && f < 1.0) {
                return Err(Error::Config(format!(
                    "validation fraction {f} must lie in (0, 1)"
                )));
            }
            // Guard against 0.05 * 100 landing a hair above 5.
            let k = ((f * n as f64) - 1e-9).ceil().max(0.0) as usize;
            let k = k.min(n);
            for i in index::sample(&mut rng, n, k) {
                in_valid[i] = true;
            }
        }
        Scenario::Cpp0 { target } | Scenario::Cpp2 { target } => {
            if target >= matrix.n_models() {
                return Err(Error::Scenario(format!("target model {target} not in registry")));
            }
            let own: Vec<usize> = (0..n)
                .filter(|&k| matrix.entries()[k].model == target)
                .collect();
            let name = &matrix.models()[target];
            let keep = if matches!(spec.scenario, Scenario::Cpp2 { .. }) {
                if own.len() < 3 {
                    return Err(Error::Scenario(format!(
                        "cpp2 needs at least 3 observed entries for '{name}', found {}",
                        own.len()
                    )));
                }
                2
            } else {
                if own.is_empty() {
                    return Err(Error::Scenario(format!("'{name}' has no observed entries")));
                }
                0
            };
            for &k in &own {
                in_valid[k] = true;
            }
            for i in index::sample(&mut rng, own.len(), keep) {
                in_valid[own[i]] = false;
            }
        }
    }
    let (mut train, mut valid) = (Vec::new(), Vec::new());
    for (e, v) in matrix.entries().iter().zip(in_valid) {
        if v {
            valid.push(e.clone());
        } else {
            train.push(e.clone());
        }
    }
    Ok((matrix.with_entries(train), matrix.with_entries(valid)))
}

/// Removes uniformly chosen entries until the grid sparsity reaches
/// `target_sparsity`, removing as few as possible.
pub fn mask_to_sparsity(train: &ScoreMatrix, target_sparsity: f64, seed: u64) -> Result<ScoreMatrix> {
    if !(0.0..=1.0).contains(&target_sparsity) {
        return Err(Error::Range(format!(
            "sparsity {target_sparsity} must lie in [0, 1]"
        )));
    }
    let grid = train.grid_size();
    let current = train.sparsity();
    if target_sparsity < current - 1e-12 {
        return Err(Error::Range(format!(
            "target sparsity {target_sparsity:.4} is below the current sparsity {current:.4}"
        )));
    }
    // Smallest number of empty cells that satisfies the target.
    let empty_needed = ((target_sparsity * grid as f64) - 1e-9).ceil().max(0.0) as usize;
    let empty_now = grid - train.len();
    let remove = empty_needed.saturating_sub(empty_now).min(train.len());
    if remove == 0 {
        return Ok(train.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut drop = vec![false; train.len()];
    for i in index::sample(&mut rng, train.len(), remove) {
        drop[i] = true;
    }
    let kept: Vec<Entry> = train
        .entries()
        .iter()
        .zip(drop)
        .filter(|(_, d)| !d)
        .map(|(e, _)| e.clone())
        .collect();
    Ok(train.with_entries(kept))
}
