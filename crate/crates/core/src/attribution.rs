//! Exact Shapley values of descriptive factors.
//!
//! A trained factor model is evaluated on the validation entries with every
//! subset of the factors switched on; a masked factor reads as the zero
//! vector, exactly like a missing value. The per-entry value of a subset is
//! the negative squared error, so positive attributions mean a factor helps.

use std::io::Write;

use rayon::prelude::*;

use crate::dataset::{Factor, FactorKind, ScoreMatrix};
use crate::error::{Error, Result};
use crate::metrics::std_dev;
use crate::ncf::{Encoded, FactorSet, NcfModel};

pub const VALUE_CONVENTION: &str =
    "v(S) = -(mean squared validation error) with every factor outside S masked to the zero vector; \
     phi > 0 means the factor lowers the loss";

/// Largest player set enumerated exactly.
pub const MAX_PLAYERS: usize = 20;

/// A factor model seen through a mask. The wrapped model is never modified.
#[derive(Debug, Clone, Copy)]
pub struct MaskedModel<'a> {
    model: &'a NcfModel,
    active: FactorSet,
}

impl<'a> MaskedModel<'a> {
    pub fn new(model: &'a NcfModel) -> Result<Self> {
        if !model.variant().uses_factors() {
            return Err(Error::Input(format!(
                "variant {} has no factors to mask",
                model.variant()
            )));
        }
        Ok(MaskedModel {
            model,
            active: FactorSet::ALL,
        })
    }

    pub fn mask(self, f: Factor) -> Self {
        MaskedModel {
            active: self.active.without(f),
            ..self
        }
    }

    pub fn with_active(self, active: FactorSet) -> Self {
        MaskedModel { active, ..self }
    }

    pub fn active(&self) -> FactorSet {
        self.active
    }

    pub fn predict(&self, enc: &Encoded, mi: usize, ti: usize) -> Result<f64> {
        self.model.predict_masked(Some(enc), mi, ti, self.active)
    }
}

/// Mask a single factor.
pub fn mask_factor(model: &NcfModel, f: Factor) -> Result<MaskedModel<'_>> {
    Ok(MaskedModel::new(model)?.mask(f))
}

/// Per-entry values `-(prediction - truth)^2` with only `active` factors on.
pub fn instance_values(model: &NcfModel, enc: &Encoded, valid: &ScoreMatrix, active: FactorSet) -> Result<Vec<f64>> {
    let cells: Vec<(usize, usize)> = valid.entries().iter().map(|e| (e.model, e.task)).collect();
    let preds = model.predict_many(Some(enc), &cells, active)?;
    Ok(preds
        .iter()
        .zip(valid.entries())
        .map(|(p, e)| -(p - e.score).powi(2))
        .collect())
}

pub fn value_function(model: &NcfModel, enc: &Encoded, valid: &ScoreMatrix, active: FactorSet) -> Result<f64> {
    if valid.is_empty() {
        return Err(Error::Input("empty validation set".into()));
    }
    let v = instance_values(model, enc, valid, active)?;
    Ok(compensated_mean(v.into_iter()))
}

fn factorial(k: usize) -> u128 {
    (1..=k as u128).product()
}

/// Shapley weight `|S|! (n - |S| - 1)! / n!` for every coalition size.
pub fn shapley_weights(n: usize) -> Vec<f64> {
    let total = factorial(n) as f64;
    (0..n)
        .map(|s| (factorial(s) * factorial(n - s - 1)) as f64 / total)
        .collect()
}

/// Shapley values of an `n`-player game given by its value on every
/// coalition (`values[mask]`, bit `i` = player `i`).
pub fn shapley_from_table(n: usize, values: &[f64]) -> Vec<f64> {
    assert_eq!(values.len(), 1 << n);
    let w = shapley_weights(n);
    let mut phi = vec![0.0; n];
    for (i, phi_i) in phi.iter_mut().enumerate() {
        let bit = 1usize << i;
        let mut sum = Neumaier::default();
        for s in 0..values.len() {
            if s & bit == 0 {
                let size = s.count_ones() as usize;
                sum.add(w[size] * (values[s | bit] - values[s]));
            }
        }
        *phi_i = sum.total();
    }
    phi
}

fn compensated_mean(xs: impl Iterator<Item = f64>) -> f64 {
    let mut s = Neumaier::default();
    let mut count = 0usize;
    for x in xs {
        s.add(x);
        count += 1;
    }
    s.total() / count as f64
}

/// Compensated summation, so results do not depend on accumulation noise.
#[derive(Default)]
struct Neumaier {
    sum: f64,
    c: f64,
}

impl Neumaier {
    fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.c += (self.sum - t) + x;
        } else {
            self.c += (x - t) + self.sum;
        }
        self.sum = t;
    }

    fn total(&self) -> f64 {
        self.sum + self.c
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShapleyReport {
    /// Players, in the order given.
    pub factors: Vec<Factor>,
    /// `per_instance[k][i]`: attribution of factor `i` on validation entry `k`.
    pub per_instance: Vec<Vec<f64>>,
    pub mean: Vec<f64>,
    pub mean_abs: Vec<f64>,
    pub std: Vec<f64>,
    pub v_full: f64,
    pub v_empty: f64,
    /// `(model, task)` of every validation entry.
    pub cells: Vec<(usize, usize)>,
    pub convention: &'static str,
}

impl ShapleyReport {
    /// Factor positions sorted by descending mean attribution.
    pub fn ordering(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.factors.len()).collect();
        idx.sort_by(|&a, &b| self.mean[b].total_cmp(&self.mean[a]).then(a.cmp(&b)));
        idx
    }

    pub const CSV_HEADER: &'static str = "factor,kind,mean_shapley,std_over_instances,mean_abs_shapley";

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        let io = |e: std::io::Error| Error::Input(format!("writing Shapley report: {e}"));
        writeln!(out, "{}", Self::CSV_HEADER).map_err(io)?;
        for i in self.ordering() {
            let f = self.factors[i];
            let kind = match f.kind() {
                FactorKind::Categorical => "categorical",
                FactorKind::Numerical => "numerical",
            };
            writeln!(
                out,
                "{},{kind},{:.9e},{:.9e},{:.9e}",
                f.column(),
                self.mean[i],
                self.std[i],
                self.mean_abs[i]
            )
            .map_err(io)?;
        }
        Ok(())
    }

    /// One row per (factor, validation entry), for beeswarm-style plots.
    pub fn write_plot_data<W: Write>(&self, mut out: W, valid: &ScoreMatrix) -> Result<()> {
        let io = |e: std::io::Error| Error::Input(format!("writing Shapley plot data: {e}"));
        writeln!(out, "factor,model,task,value").map_err(io)?;
        for i in self.ordering() {
            for (k, &(mi, ti)) in self.cells.iter().enumerate() {
                writeln!(
                    out,
                    "{},{},{},{:.9e}",
                    self.factors[i].column(),
                    csv_field(&valid.models()[mi]),
                    csv_field(&valid.tasks()[ti]),
                    self.per_instance[k][i]
                )
                .map_err(io)?;
            }
        }
        Ok(())
    }
}

pub(crate) fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Exact Shapley values over the players in `players`; factors outside it
/// stay switched on throughout. Every coalition is evaluated once.
pub fn exact_shapley(model: &NcfModel, enc: &Encoded, valid: &ScoreMatrix, players: &[Factor]) -> Result<ShapleyReport> {
    let n = players.len();
    if n > MAX_PLAYERS {
        return Err(Error::Budget(format!(
            "{n} factors means 2^{n} coalitions; exact enumeration is limited to {MAX_PLAYERS} \
             (use a sampling estimator for more)"
        )));
    }
    if n == 0 {
        return Err(Error::Input("no factors to attribute".into()));
    }
    let mut sorted = players.to_vec();
    sorted.sort();
    sorted.dedup();
    if sorted.len() != n {
        return Err(Error::Input("factor listed twice".into()));
    }
    if valid.is_empty() {
        return Err(Error::Input("empty validation set".into()));
    }
    MaskedModel::new(model)?;

    let k = valid.len();
    let coalition = |s: usize| -> FactorSet {
        players
            .iter()
            .enumerate()
            .filter(|(i, _)| s & (1 << i) == 0)
            .fold(FactorSet::ALL, |acc, (_, &f)| acc.without(f))
    };
    // table[s * k + entry]
    let mut table = vec![0.0; (1usize << n) * k];
    table
        .par_chunks_mut(k)
        .enumerate()
        .try_for_each(|(s, row)| -> Result<()> {
            row.copy_from_slice(&instance_values(model, enc, valid, coalition(s))?);
            Ok(())
        })?;

    let per_instance: Vec<Vec<f64>> = (0..k)
        .into_par_iter()
        .map(|e| {
            let values: Vec<f64> = (0..1usize << n).map(|s| table[s * k + e]).collect();
            shapley_from_table(n, &values)
        })
        .collect();

    let full = (1usize << n) - 1;
    let mean_of = |xs: &mut dyn Iterator<Item = f64>| compensated_mean(xs);
    let mean: Vec<f64> = (0..n).map(|i| mean_of(&mut per_instance.iter().map(|r| r[i]))).collect();
    let mean_abs: Vec<f64> = (0..n)
        .map(|i| mean_of(&mut per_instance.iter().map(|r| r[i].abs())))
        .collect();
    let std: Vec<f64> = (0..n)
        .map(|i| std_dev(&per_instance.iter().map(|r| r[i]).collect::<Vec<_>>()))
        .collect();
    Ok(ShapleyReport {
        factors: players.to_vec(),
        v_full: mean_of(&mut (0..k).map(|e| table[full * k + e])),
        v_empty: mean_of(&mut (0..k).map(|e| table[e])),
        per_instance,
        mean,
        mean_abs,
        std,
        cells: valid.entries().iter().map(|e| (e.model, e.task)).collect(),
        convention: VALUE_CONVENTION,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::synth;
    use crate::mf::TrainConfig;
    use crate::ncf::{train_ncf, NcfConfig, Variant};

    fn trained(variant: Variant, seed: u64) -> (NcfModel, crate::dataset::Records, ScoreMatrix) {
        let lr = synth::low_rank(8, 5, 2, 0.8, seed);
        let recs = synth::placeholder_records(&lr.matrix, seed);
        let cfg = NcfConfig {
            train: TrainConfig {
                latent_dim: 3,
                iterations: 3_000,
                seed,
                ..Default::default()
            },
            embed_width: 3,
            hidden: vec![8, 4],
            ..Default::default()
        };
        let model = train_ncf(&lr.matrix, Some(&recs), variant, &cfg).unwrap();
        (model, recs, lr.held_out)
    }

    #[test]
    fn additive_toy_game() {
        // v({1}) - v({}) = v({1,2}) - v({2}) = 0.25, so phi_1 = 0.25 exactly.
        let v = [0.0, 0.25, 0.5, 0.75];
        assert_eq!(shapley_from_table(2, &v), vec![0.25, 0.5]);
    }

    #[test]
    fn weights_sum_per_player() {
        // sum over coalitions not containing i of w(|S|) is 1.
        for n in 1..=16usize {
            let w = shapley_weights(n);
            let total: f64 = (0..n)
                .map(|s| {
                    let choose = (factorial(n - 1) / (factorial(s) * factorial(n - 1 - s))) as f64;
                    choose * w[s]
                })
                .sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn naive_formula_agrees_on_four_factors() {
        let (model, recs, valid) = trained(Variant::FactorEnhanced, 1);
        let enc = model.encode(&recs).unwrap();
        let players = [Factor::Family, Factor::Params, Factor::Layers, Factor::Ability];
        let report = exact_shapley(&model, &enc, &valid, &players).unwrap();
        // Textbook formula, re-evaluating v from scratch for every term.
        let n = players.len();
        let fact = |k: usize| (1..=k as u64).product::<u64>() as f64;
        let set_of = |s: usize| {
            players
                .iter()
                .enumerate()
                .filter(|(i, _)| s & (1 << i) == 0)
                .fold(FactorSet::ALL, |a, (_, &f)| a.without(f))
        };
        for i in 0..n {
            let mut phi = 0.0;
            for s in 0..1usize << n {
                if s & (1 << i) != 0 {
                    continue;
                }
                let size = s.count_ones() as usize;
                let w = fact(size) * fact(n - size - 1) / fact(n);
                let with = value_function(&model, &enc, &valid, set_of(s | 1 << i)).unwrap();
                let without = value_function(&model, &enc, &valid, set_of(s)).unwrap();
                phi += w * (with - without);
            }
            assert!((phi - report.mean[i]).abs() < 1e-12, "{i}: {phi} vs {}", report.mean[i]);
        }
    }

    #[test]
    fn efficiency_dummy_and_no_mutation() {
        let (mut model, recs, valid) = trained(Variant::FactorEnhanced, 2);
        model.factor_params_mut(Factor::Layers).unwrap().fill(0.0);
        let enc = model.encode(&recs).unwrap();
        let before = model.clone();
        let players: Vec<Factor> = Factor::ALL.to_vec();
        let players = &players[..10];
        let r = exact_shapley(&model, &enc, &valid, players).unwrap();
        assert_eq!(model, before);
        let total: f64 = r.mean.iter().sum();
        assert!((total - (r.v_full - r.v_empty)).abs() < 1e-9);
        for row in &r.per_instance {
            assert_eq!(row[Factor::Layers.index()], 0.0);
        }
        assert_eq!(r.mean[Factor::Layers.index()], 0.0);
        let v_all = value_function(&model, &enc, &valid, FactorSet::ALL).unwrap();
        assert_eq!(r.v_full, v_all);
    }

    #[test]
    fn interchangeable_factors_get_equal_shares() {
        let lr = synth::low_rank(8, 5, 2, 0.8, 8);
        let mut recs = synth::placeholder_records(&lr.matrix, 8);
        for r in &mut recs.models {
            let cell = if r.has_params() { r.params_m.to_string() } else { String::new() };
            r.set(Factor::Flops, &cell).unwrap();
        }
        let cfg = NcfConfig {
            train: TrainConfig {
                latent_dim: 3,
                iterations: 3_000,
                seed: 8,
                ..Default::default()
            },
            embed_width: 3,
            hidden: vec![8, 4],
            ..Default::default()
        };
        let mut model = train_ncf(&lr.matrix, Some(&recs), Variant::FactorEnhanced, &cfg).unwrap();
        make_twin(&mut model, Factor::Params, Factor::Flops);
        let enc = model.encode(&recs).unwrap();
        let r = exact_shapley(&model, &enc, &lr.held_out, &[Factor::Family, Factor::Params, Factor::Flops, Factor::Layers])
            .unwrap();
        assert!((r.mean[1] - r.mean[2]).abs() < 1e-9, "{} vs {}", r.mean[1], r.mean[2]);
    }

    /// Makes factor `b` an exact copy of `a`: same projection and same
    /// first-layer columns. Both must already encode to the same codes.
    pub(crate) fn make_twin(model: &mut NcfModel, a: Factor, b: Factor) {
        let src = model.factor_params_mut(a).unwrap().to_vec();
        model.factor_params_mut(b).unwrap().copy_from_slice(&src);
        let (ca, cb) = (model.first_layer_columns(a).unwrap(), model.first_layer_columns(b).unwrap());
        let (w, fan_in) = model.first_layer_mut();
        for row in w.chunks_mut(fan_in) {
            for (i, j) in ca.clone().zip(cb.clone()) {
                row[j] = row[i];
            }
        }
    }

    #[test]
    fn full_mask_gives_constant_prediction() {
        let (model, recs, _) = trained(Variant::FactorOnly, 3);
        let enc = model.encode(&recs).unwrap();
        let masked = MaskedModel::new(&model).unwrap().with_active(FactorSet::EMPTY);
        let first = masked.predict(&enc, 0, 0).unwrap();
        for mi in 0..8 {
            for ti in 0..5 {
                assert_eq!(masked.predict(&enc, mi, ti).unwrap(), first);
            }
        }
    }

    #[test]
    fn masking_params_equals_missing_params() {
        let (model, mut recs, _) = trained(Variant::FactorEnhanced, 4);
        let enc = model.encode(&recs).unwrap();
        let masked = mask_factor(&model, Factor::Params).unwrap().predict(&enc, 2, 1).unwrap();
        recs.models[2].set(Factor::Params, "").unwrap();
        let enc_missing = model.encode(&recs).unwrap();
        assert_eq!(masked, model.predict_encoded(Some(&enc_missing), 2, 1).unwrap());
    }

    #[test]
    fn masking_category_erases_difference() {
        let (model, mut recs, _) = trained(Variant::FactorOnly, 5);
        recs.models[1] = recs.models[0].clone();
        recs.models[1].family = Some("fam1".into());
        let enc = model.encode(&recs).unwrap();
        let view = mask_factor(&model, Factor::Family).unwrap();
        assert_eq!(view.predict(&enc, 0, 2).unwrap(), view.predict(&enc, 1, 2).unwrap());
    }

    #[test]
    fn guards() {
        let (model, recs, valid) = trained(Variant::FactorEnhanced, 6);
        let enc = model.encode(&recs).unwrap();
        let many: Vec<Factor> = Factor::ALL.iter().cycle().take(21).copied().collect();
        assert!(matches!(exact_shapley(&model, &enc, &valid, &many), Err(Error::Budget(_))));
        let lr = synth::low_rank(4, 3, 2, 0.9, 1);
        let cfg = NcfConfig {
            train: TrainConfig {
                iterations: 10,
                ..Default::default()
            },
            ..Default::default()
        };
        let id = train_ncf(&lr.matrix, None, Variant::IdOnly, &cfg).unwrap();
        assert!(matches!(mask_factor(&id, Factor::Family), Err(Error::Input(_))));
    }

    #[test]
    fn csv_orders_by_mean() {
        let (model, recs, valid) = trained(Variant::FactorEnhanced, 7);
        let enc = model.encode(&recs).unwrap();
        let r = exact_shapley(&model, &enc, &valid, &[Factor::Family, Factor::Params, Factor::FewShot]).unwrap();
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], ShapleyReport::CSV_HEADER);
        assert_eq!(lines.len(), 4);
        let means: Vec<f64> = lines[1..].iter().map(|l| l.split(',').nth(2).unwrap().parse().unwrap()).collect();
        assert!(means.windows(2).all(|w| w[0] >= w[1]));
    }
}
