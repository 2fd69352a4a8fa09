//! Sigmoidal scaling-law baseline.
//!
//! Within a model family, a task score is modelled as `sigmoid(w ln C + b)`
//! where `C` is the parameter count in millions. Curves are fitted in logit
//! space from the family's smaller members and extrapolated to a larger one.

use std::io::Write;

use crate::dataset::{ModelRecord, ScoreMatrix};
use crate::dataset::synth::logistic;
use crate::error::{Error, Result};

/// Scores are clipped to `[CLIP, 1 - CLIP]` before the logit.
pub const CLIP: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bounds {
    pub w: (f64, f64),
    pub b: (f64, f64),
}

impl Default for Bounds {
    fn default() -> Self {
        Bounds {
            w: (0.5, 2.0),
            b: (-10.0, -3.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScalingCurve {
    pub w: f64,
    pub b: f64,
    pub family: String,
    pub task: String,
    /// Root-mean-square residual in logit space.
    pub residual: f64,
    pub n_points: usize,
}

fn logit(s: f64) -> f64 {
    let s = s.clamp(CLIP, 1.0 - CLIP);
    (s / (1.0 - s)).ln()
}

/// Box-constrained least squares of `logit(S)` on `ln C`.
///
/// The objective is a convex quadratic in `(w, b)`, so the constrained
/// minimum is either the unconstrained one or lies on an edge of the box;
/// each edge is a one-dimensional quadratic solved in closed form.
pub fn fit_curve(points: &[(f64, f64)], bounds: &Bounds) -> Result<ScalingCurve> {
    if points.len() < 2 {
        return Err(Error::Fit(format!(
            "need at least 2 points, got {}",
            points.len()
        )));
    }
    if let Some(&(c, _)) = points.iter().find(|(c, _)| !(*c > 0.0 && c.is_finite())) {
        return Err(Error::Domain(format!("parameter count {c} must be positive")));
    }
    let xs: Vec<f64> = points.iter().map(|(c, _)| c.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|&(_, s)| logit(s)).collect();
    let n = xs.len() as f64;
    let (sx, sy) = (xs.iter().sum::<f64>(), ys.iter().sum::<f64>());
    let sxx: f64 = xs.iter().map(|x| x * x).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| x * y).sum();
    let var = sxx - sx * sx / n;
    if var <= 1e-12 * sxx.max(1.0) {
        return Err(Error::Degenerate(
            "all points share the same parameter count".into(),
        ));
    }

    let sse = |w: f64, b: f64| -> f64 {
        xs.iter()
            .zip(&ys)
            .map(|(x, y)| (y - w * x - b).powi(2))
            .sum()
    };
    let inside = |v: f64, (lo, hi): (f64, f64)| v >= lo && v <= hi;

    let w0 = (sxy - sx * sy / n) / var;
    let b0 = (sy - w0 * sx) / n;
    let (w, b) = if inside(w0, bounds.w) && inside(b0, bounds.b) {
        (w0, b0)
    } else {
        let mut candidates = Vec::with_capacity(4);
        for w in [bounds.w.0, bounds.w.1] {
            candidates.push((w, ((sy - w * sx) / n).clamp(bounds.b.0, bounds.b.1)));
        }
        for b in [bounds.b.0, bounds.b.1] {
            candidates.push((((sxy - b * sx) / sxx).clamp(bounds.w.0, bounds.w.1), b));
        }
        candidates
            .into_iter()
            .min_by(|p, q| sse(p.0, p.1).total_cmp(&sse(q.0, q.1)))
            .unwrap()
    };
    Ok(ScalingCurve {
        w,
        b,
        family: String::new(),
        task: String::new(),
        residual: (sse(w, b) / n).sqrt(),
        n_points: points.len(),
    })
}

pub fn predict_curve(curve: &ScalingCurve, params_m: f64) -> Result<f64> {
    if !(params_m > 0.0 && params_m.is_finite()) {
        return Err(Error::Domain(format!(
            "parameter count {params_m} must be positive"
        )));
    }
    Ok(logistic(curve.w * params_m.ln() + curve.b))
}

/// In-family points `(params_M, score)` on `task` from models strictly
/// smaller than `target`, ordered by size.
pub fn family_points(
    target: &ModelRecord,
    models: &[ModelRecord],
    train: &ScoreMatrix,
    task: usize,
) -> Vec<(f64, f64)> {
    let Some(family) = target.family.as_deref() else {
        return Vec::new();
    };
    let mut pts: Vec<(f64, f64)> = train
        .entries_for_task(task)
        .filter_map(|e| {
            let r = &models[e.model];
            let smaller = r.family.as_deref() == Some(family)
                && r.has_params()
                && r.params_m < target.params_m
                && r.identifier != target.identifier;
            smaller.then_some((r.params_m, e.score))
        })
        .collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    pts
}

/// Fits the family curve on `task` and evaluates it at the target's size.
/// `models` is indexed like the rows of `train`.
pub fn scaling_predict_for_model(
    target: &ModelRecord,
    models: &[ModelRecord],
    train: &ScoreMatrix,
    task: usize,
    bounds: &Bounds,
) -> Result<(f64, ScalingCurve)> {
    if !target.has_params() {
        return Err(Error::Coverage(format!(
            "'{}' has no parameter count",
            target.identifier
        )));
    }
    let pts = family_points(target, models, train, task);
    if pts.len() < 2 {
        return Err(Error::Coverage(format!(
            "'{}' has {} smaller in-family models scored on '{}'",
            target.identifier,
            pts.len(),
            train.tasks()[task]
        )));
    }
    let mut curve = fit_curve(&pts, bounds)?;
    curve.family = target.family.clone().unwrap_or_default();
    curve.task = train.tasks()[task].clone();
    Ok((predict_curve(&curve, target.params_m)?, curve))
}

/// One curve per (family, task) with at least two distinct sizes scored,
/// fitted on every scored member. Families are ordered by name, tasks by
/// registry order; degenerate groups are skipped.
pub fn fit_family_curves(
    models: &[ModelRecord],
    scores: &ScoreMatrix,
    bounds: &Bounds,
) -> Result<Vec<ScalingCurve>> {
    let mut families: Vec<&str> = models
        .iter()
        .filter(|r| r.has_params())
        .filter_map(|r| r.family.as_deref())
        .collect();
    families.sort_unstable();
    families.dedup();
    let mut out = Vec::new();
    for family in families {
        for task in 0..scores.n_tasks() {
            let mut pts: Vec<(f64, f64)> = scores
                .entries_for_task(task)
                .filter_map(|e| {
                    let r = &models[e.model];
                    (r.family.as_deref() == Some(family) && r.has_params()).then_some((r.params_m, e.score))
                })
                .collect();
            if pts.len() < 2 {
                continue;
            }
            pts.sort_by(|a, b| a.0.total_cmp(&b.0));
            match fit_curve(&pts, bounds) {
                Ok(mut c) => {
                    c.family = family.to_string();
                    c.task = scores.tasks()[task].clone();
                    out.push(c);
                }
                Err(Error::Degenerate(_)) => {}
                Err(e) => return Err(e),
            }
        }
    }
    Ok(out)
}

pub const REPORT_HEADER: &str = "family,task,w,b,residual,n_points";

pub fn write_report<W: Write>(mut out: W, curves: &[ScalingCurve]) -> Result<()> {
    let mut w = csv::Writer::from_writer(&mut out);
    let io = |e: csv::Error| Error::Input(format!("writing scaling report: {e}"));
    w.write_record(REPORT_HEADER.split(',')).map_err(io)?;
    for c in curves {
        w.write_record([
            c.family.clone(),
            c.task.clone(),
            format!("{:.6}", c.w),
            format!("{:.6}", c.b),
            format!("{:.6}", c.residual),
            c.n_points.to_string(),
        ])
        .map_err(io)?;
    }
    w.flush().map_err(|e| Error::Input(format!("writing scaling report: {e}")))?;
    Ok(())
}
