//! Flat `key = value` run configuration. Every key has a default; the
//! resolved form lists all of them, so a run directory records exactly what
//! was run.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::analysis::{Axis, ExperimentConfig, LooOptions, Method, ScenarioKind};
use crate::dataset::Factor;
use crate::error::{Error, Result};
use crate::mf::TrainConfig;
use crate::ncf::{NcfConfig, Optimizer};
use crate::scaling::Bounds;

/// Environment variable holding the default worker count.
pub const WORKERS_ENV: &str = "COLLABPERF_WORKERS";

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// Empty paths select the bundled dataset.
    pub scores: Option<PathBuf>,
    pub model_factors: Option<PathBuf>,
    pub task_factors: Option<PathBuf>,
    pub method: Method,
    pub methods: Vec<Method>,
    pub seeds: Vec<u64>,
    pub experiment: ExperimentConfig,
    pub scenario: ScenarioKind,
    pub target: Option<String>,
    pub sparsity_levels: Vec<f64>,
    pub validation_seed: u64,
    pub loo_axis: Axis,
    pub loo: LooOptions,
    /// Shapley players; all sixteen factors by default.
    pub shapley_factors: Vec<Factor>,
    pub workers: usize,
    pub out: PathBuf,
}

impl RunConfig {
    pub fn defaults(workers: usize) -> Self {
        RunConfig {
            scores: None,
            model_factors: None,
            task_factors: None,
            method: Method::NcfFactor,
            methods: vec![Method::Mf, Method::Ncf, Method::NcfFactor, Method::FactorOnly],
            seeds: vec![1, 2, 3, 4, 5],
            experiment: ExperimentConfig::default(),
            scenario: ScenarioKind::Cpp2,
            target: None,
            sparsity_levels: vec![0.496, 0.6, 0.7, 0.8, 0.888],
            validation_seed: 1,
            loo_axis: Axis::Models,
            loo: LooOptions::default(),
            shapley_factors: Factor::ALL.to_vec(),
            workers: workers.max(1),
            out: PathBuf::from("runs/latest"),
        }
    }

    /// Worker count from the environment, else the machine's parallelism.
    pub fn default_workers() -> Result<usize> {
        match std::env::var(WORKERS_ENV) {
            Ok(v) => parse_num::<usize>(WORKERS_ENV, &v).and_then(|n| {
                if n == 0 {
                    Err(Error::Config(format!("{WORKERS_ENV} must be at least 1")))
                } else {
                    Ok(n)
                }
            }),
            Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
        }
    }

    pub fn load_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.apply_text(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Applies `key = value` lines; blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected 'key = value'", n + 1)))?;
            self.set(k.trim(), v.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let path = |v: &str| (!v.is_empty()).then(|| PathBuf::from(v));
        let mf = &mut self.experiment.mf;
        let ncf = &mut self.experiment.ncf;
        let bounds = &mut self.experiment.bounds;
        match key {
            "scores" => self.scores = path(value),
            "model_factors" => self.model_factors = path(value),
            "task_factors" => self.task_factors = path(value),
            "method" => self.method = value.parse()?,
            "methods" => {
                self.methods = Method::parse_list(value)?;
                if self.methods.is_empty() {
                    return Err(Error::Config("methods: empty list".into()));
                }
            }
            "seeds" => {
                self.seeds = parse_list(key, value)?;
                if self.seeds.is_empty() {
                    return Err(Error::Config("seeds: empty list".into()));
                }
            }
            "validation_fraction" => self.experiment.validation_fraction = parse_num(key, value)?,
            "mf_latent_dim" => mf.latent_dim = parse_num(key, value)?,
            "mf_learning_rate" => mf.learning_rate = parse_num(key, value)?,
            "mf_iterations" => mf.iterations = parse_num(key, value)?,
            "mf_l2_penalty" => mf.l2_penalty = parse_num(key, value)?,
            "ncf_latent_dim" => ncf.train.latent_dim = parse_num(key, value)?,
            "ncf_learning_rate" => ncf.train.learning_rate = parse_num(key, value)?,
            "ncf_iterations" => ncf.train.iterations = parse_num(key, value)?,
            "ncf_l2_penalty" => ncf.train.l2_penalty = parse_num(key, value)?,
            "ncf_batch_size" => ncf.batch_size = parse_num(key, value)?,
            "ncf_embed_width" => ncf.embed_width = parse_num(key, value)?,
            "ncf_hidden" => ncf.hidden = parse_list(key, value)?,
            "ncf_optimizer" => ncf.optimizer = value.parse()?,
            "scaling_w_min" => bounds.w.0 = parse_num(key, value)?,
            "scaling_w_max" => bounds.w.1 = parse_num(key, value)?,
            "scaling_b_min" => bounds.b.0 = parse_num(key, value)?,
            "scaling_b_max" => bounds.b.1 = parse_num(key, value)?,
            "scenario" => self.scenario = value.parse()?,
            "target" => self.target = (!value.is_empty()).then(|| value.to_string()),
            "sparsity_levels" => self.sparsity_levels = parse_list(key, value)?,
            "validation_seed" => self.validation_seed = parse_num(key, value)?,
            "loo_axis" => self.loo_axis = value.parse()?,
            "loo_method" => self.loo.method = value.parse()?,
            "loo_holdout_fraction" => self.loo.holdout_fraction = parse_num(key, value)?,
            "loo_cut" => self.loo.cut = parse_num(key, value)?,
            "shapley_factors" => {
                self.shapley_factors = if value == "all" {
                    Factor::ALL.to_vec()
                } else {
                    value
                        .split(',')
                        .map(str::trim)
                        .filter(|t| !t.is_empty())
                        .map(|t| {
                            Factor::from_column(t)
                                .ok_or_else(|| Error::Config(format!("shapley_factors: unknown factor '{t}'")))
                        })
                        .collect::<Result<_>>()?
                }
            }
            "workers" => {
                self.workers = parse_num(key, value)?;
                if self.workers == 0 {
                    return Err(Error::Config("workers must be at least 1".into()));
                }
            }
            "out" => self.out = PathBuf::from(value),
            _ => return Err(Error::Config(format!("unknown key '{key}'"))),
        }
        Ok(())
    }

    /// Checks the training configurations and bounds before any work starts.
    pub fn validate(&self) -> Result<()> {
        self.experiment.mf.validate()?;
        self.experiment.ncf.validate()?;
        let f = self.experiment.validation_fraction;
        if !(f > 0.0 && f < 1.0) {
            return Err(Error::Config(format!("validation_fraction {f} must lie in (0, 1)")));
        }
        let Bounds { w, b } = self.experiment.bounds;
        if !(w.0 <= w.1 && b.0 <= b.1) {
            return Err(Error::Config("scaling bounds: min exceeds max".into()));
        }
        Ok(())
    }

    /// Every key with its value, sorted; parsing this text back reproduces
    /// the configuration.
    pub fn resolved(&self) -> String {
        let e = &self.experiment;
        let TrainConfig {
            latent_dim,
            learning_rate,
            iterations,
            l2_penalty,
            ..
        } = e.mf;
        let NcfConfig {
            train,
            batch_size,
            embed_width,
            hidden,
            optimizer,
        } = &e.ncf;
        let opt_path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let join = |xs: Vec<String>| xs.join(",");
        let mut kv: Vec<(&str, String)> = vec![
            ("scores", opt_path(&self.scores)),
            ("model_factors", opt_path(&self.model_factors)),
            ("task_factors", opt_path(&self.task_factors)),
            ("method", self.method.to_string()),
            ("methods", join(self.methods.iter().map(Method::to_string).collect())),
            ("seeds", join(self.seeds.iter().map(u64::to_string).collect())),
            ("validation_fraction", e.validation_fraction.to_string()),
            ("mf_latent_dim", latent_dim.to_string()),
            ("mf_learning_rate", learning_rate.to_string()),
            ("mf_iterations", iterations.to_string()),
            ("mf_l2_penalty", l2_penalty.to_string()),
            ("ncf_latent_dim", train.latent_dim.to_string()),
            ("ncf_learning_rate", train.learning_rate.to_string()),
            ("ncf_iterations", train.iterations.to_string()),
            ("ncf_l2_penalty", train.l2_penalty.to_string()),
            ("ncf_batch_size", batch_size.to_string()),
            ("ncf_embed_width", embed_width.to_string()),
            ("ncf_hidden", join(hidden.iter().map(usize::to_string).collect())),
            (
                "ncf_optimizer",
                match optimizer {
                    Optimizer::Adam => "adam",
                    Optimizer::Sgd => "sgd",
                }
                .to_string(),
            ),
            ("scaling_w_min", e.bounds.w.0.to_string()),
            ("scaling_w_max", e.bounds.w.1.to_string()),
            ("scaling_b_min", e.bounds.b.0.to_string()),
            ("scaling_b_max", e.bounds.b.1.to_string()),
            ("scenario", self.scenario.to_string()),
            ("target", self.target.clone().unwrap_or_default()),
            ("sparsity_levels", join(self.sparsity_levels.iter().map(f64::to_string).collect())),
            ("validation_seed", self.validation_seed.to_string()),
            ("loo_axis", self.loo_axis.to_string()),
            ("loo_method", self.loo.method.to_string()),
            ("loo_holdout_fraction", self.loo.holdout_fraction.to_string()),
            ("loo_cut", self.loo.cut.to_string()),
            (
                "shapley_factors",
                join(self.shapley_factors.iter().map(|f| f.column().to_string()).collect()),
            ),
            ("workers", self.workers.to_string()),
            ("out", self.out.display().to_string()),
        ];
        kv.sort_by_key(|(k, _)| *k);
        let mut s = String::new();
        for (k, v) in kv {
            writeln!(s, "{k} = {v}").unwrap();
        }
        s
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse '{v}'")))
}

fn parse_list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| parse_num(key, t))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resolved_text_round_trips() {
        let mut c = RunConfig::defaults(3);
        c.apply_text("# comment\nseeds = 4,5\nncf_hidden = 32, 16\nmethods = mf,scaling_baseline\ntarget = Llama 2 (70B)\nncf_optimizer = sgd\n")
            .unwrap();
        let text = c.resolved();
        let mut d = RunConfig::defaults(1);
        d.apply_text(&text).unwrap();
        assert_eq!(c, d);
        assert_eq!(d.seeds, vec![4, 5]);
        assert_eq!(d.experiment.ncf.hidden, vec![32, 16]);
        assert_eq!(d.target.as_deref(), Some("Llama 2 (70B)"));
    }

    #[test]
    fn defaults_are_materialized() {
        let text = RunConfig::defaults(2).resolved();
        assert!(text.contains("mf_latent_dim = 10\n"));
        assert!(text.contains("mf_learning_rate = 0.01\n"));
        assert!(text.contains("seeds = 1,2,3,4,5\n"));
        assert!(text.contains("validation_fraction = 0.05\n"));
        let keys: Vec<&str> = text.lines().map(|l| l.split(" = ").next().unwrap()).collect();
        let mut sorted = keys.clone();
        sorted.sort();
        assert_eq!(keys, sorted);
    }

    #[test]
    fn bad_input_is_a_config_error() {
        let mut c = RunConfig::defaults(1);
        for bad in ["nonsense = 1", "seeds = a", "no equals sign", "method = svd", "workers = 0", "shapley_factors = color"] {
            let err = c.apply_text(bad).unwrap_err();
            assert!(matches!(err, Error::Config(_)), "{bad}: {err}");
            assert!(err.is_input_error());
        }
    }

    #[test]
    fn shapley_factor_subsets() {
        let mut c = RunConfig::defaults(1);
        c.set("shapley_factors", "params_m, family").unwrap();
        assert_eq!(c.shapley_factors, vec![Factor::Params, Factor::Family]);
        c.set("shapley_factors", "all").unwrap();
        assert_eq!(c.shapley_factors.len(), 16);
    }
}
