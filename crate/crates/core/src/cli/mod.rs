//! Command-line front end. Every experiment subcommand writes a run
//! directory:
//!
//! ```text
//! <out>/config.resolved   every configuration key, defaults included
//! <out>/report.csv        the main result table
//! <out>/plotdata/*.csv    per-seed / per-instance data behind the table
//! <out>/checkpoints/      trained models, when the command trains one
//! <out>/log.txt           tool version, dataset hash, conventions used
//! ```
//!
//! Exit codes: 0 success, 2 bad input (arguments, config, data files,
//! checkpoints), 3 failure while computing.

pub mod config;

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::analysis::{
    leave_one_out, run_benchmark_eval, run_scenario, sparsity_sweep, train_method, with_workers, Method, Trained,
};
use crate::attribution::{exact_shapley, VALUE_CONVENTION};
use crate::dataset::{
    load_model_factors, load_scores_with_warnings, load_task_factors, read_scores, split, Dataset, LoadWarning,
    Records, SplitSpec, BUNDLED_SCORES,
};
use crate::error::{Error, Result};
use crate::metrics::COHORT_DEFINITION;
use crate::mf::{predict_mf, MfModel};
use crate::ncf::{FactorSet, NcfModel};
use crate::scaling::{fit_family_curves, write_report};
use config::RunConfig;

/// Writes to stdout, ignoring a closed pipe (`collabperf ... | head`).
macro_rules! emitln {
    ($($arg:tt)*) => {
        emit(&format!("{}\n", format!($($arg)*)))
    };
}

fn emit(text: &str) {
    use std::io::Write;
    let _ = std::io::stdout().lock().write_all(text.as_bytes());
}

pub const EXIT_OK: i32 = 0;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "collabperf", version, about = "Predict missing benchmark scores of language models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct DataArgs {
    /// Score table (model,task,score[,source]); omit all three for the bundled data.
    #[arg(long)]
    scores: Option<PathBuf>,
    /// Model factor table.
    #[arg(long)]
    model_factors: Option<PathBuf>,
    /// Task factor table.
    #[arg(long)]
    task_factors: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct Common {
    #[command(flatten)]
    data: DataArgs,
    /// Config file of `key = value` lines; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Number of seeds: `--seeds 5` runs seeds 1..=5.
    #[arg(long, conflicts_with = "seed_list")]
    seeds: Option<u64>,
    /// Explicit comma-separated seeds.
    #[arg(long)]
    seed_list: Option<String>,
    /// Parallel training jobs [env: COLLABPERF_WORKERS].
    #[arg(long)]
    workers: Option<usize>,
    /// Any config key, e.g. `--set ncf_iterations=100000`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Check score and factor tables and print a summary.
    Validate {
        #[command(flatten)]
        data: DataArgs,
    },
    /// Train one method on every observed score and save a checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        method: Option<String>,
    },
    /// Predict scores of one model from a checkpoint.
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Model name as it appears in the score table.
        #[arg(long)]
        model: String,
        /// `all` or comma-separated task names.
        #[arg(long, default_value = "all")]
        tasks: String,
    },
    /// Benchmark table: every method on random validation splits.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        methods: Option<String>,
    },
    /// Cold-start prediction of one model with zero or two known scores.
    Scenario {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        target: Option<String>,
        /// cpp0 or cpp2.
        #[arg(long)]
        scenario: Option<String>,
        #[arg(long)]
        method: Option<String>,
    },
    /// Exact Shapley importance of the descriptive factors.
    Shapley {
        #[command(flatten)]
        common: Common,
        /// Factor-aware neural checkpoint; trained on the first seed's split when omitted.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// `all` or comma-separated factor columns.
        #[arg(long)]
        factors: Option<String>,
    },
    /// Leave-one-out influence matrix, correlation and clustering.
    Loo {
        #[command(flatten)]
        common: Common,
        /// models or tasks.
        #[arg(long)]
        axis: Option<String>,
        #[arg(long)]
        method: Option<String>,
    },
    /// Metrics as the training matrix is thinned.
    Sparsity {
        #[command(flatten)]
        common: Common,
        /// Comma-separated training-matrix sparsity levels.
        #[arg(long)]
        levels: Option<String>,
        #[arg(long)]
        method: Option<String>,
    },
    /// Fit a sigmoid scaling curve per model family and task.
    Scaling {
        #[command(flatten)]
        common: Common,
    },
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_INPUT } else { EXIT_OK };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_input_error() {
                EXIT_INPUT
            } else {
                EXIT_RUNTIME
            }
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Validate { data } => cmd_validate(&data),
        Command::Train { common, method } => {
            let cfg = resolve(&common, &[("method", method)])?;
            in_pool(&cfg, || cmd_train(&cfg))
        }
        Command::Predict {
            common,
            checkpoint,
            model,
            tasks,
        } => {
            let cfg = resolve(&common, &[])?;
            cmd_predict(&cfg, &checkpoint, &model, &tasks)
        }
        Command::Eval { common, methods } => {
            let cfg = resolve(&common, &[("methods", methods)])?;
            in_pool(&cfg, || cmd_eval(&cfg))
        }
        Command::Scenario {
            common,
            target,
            scenario,
            method,
        } => {
            let cfg = resolve(&common, &[("target", target), ("scenario", scenario), ("method", method)])?;
            in_pool(&cfg, || cmd_scenario(&cfg))
        }
        Command::Shapley {
            common,
            checkpoint,
            factors,
        } => {
            let cfg = resolve(&common, &[("shapley_factors", factors)])?;
            in_pool(&cfg, || cmd_shapley(&cfg, checkpoint.as_deref()))
        }
        Command::Loo { common, axis, method } => {
            let cfg = resolve(&common, &[("loo_axis", axis), ("loo_method", method)])?;
            in_pool(&cfg, || cmd_loo(&cfg))
        }
        Command::Sparsity { common, levels, method } => {
            let cfg = resolve(&common, &[("sparsity_levels", levels), ("method", method)])?;
            in_pool(&cfg, || cmd_sparsity(&cfg))
        }
        Command::Scaling { common } => {
            let cfg = resolve(&common, &[])?;
            cmd_scaling(&cfg)
        }
    }
}

/// Defaults, then the config file, then `--set`, then dedicated flags.
fn resolve(common: &Common, flags: &[(&str, Option<String>)]) -> Result<RunConfig> {
    let mut cfg = RunConfig::defaults(RunConfig::default_workers()?);
    if let Some(path) = &common.config {
        cfg.load_file(path)?;
    }
    for kv in &common.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got '{kv}'")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    let d = &common.data;
    for (key, path) in [("scores", &d.scores), ("model_factors", &d.model_factors), ("task_factors", &d.task_factors)] {
        if let Some(p) = path {
            cfg.set(key, &p.display().to_string())?;
        }
    }
    if let Some(n) = common.seeds {
        if n == 0 {
            return Err(Error::Config("--seeds must be at least 1".into()));
        }
        cfg.seeds = (1..=n).collect();
    }
    if let Some(list) = &common.seed_list {
        cfg.set("seeds", list)?;
    }
    if let Some(w) = common.workers {
        cfg.set("workers", &w.to_string())?;
    }
    if let Some(out) = &common.out {
        cfg.out = out.clone();
    }
    for (key, value) in flags {
        if let Some(v) = value {
            cfg.set(key, v)?;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn in_pool(cfg: &RunConfig, f: impl FnOnce() -> Result<()> + Send) -> Result<()> {
    with_workers(cfg.workers, f)?
}

struct Loaded {
    dataset: Dataset,
    warnings: Vec<LoadWarning>,
    source: String,
}

fn load_paths(scores: Option<&Path>, models: Option<&Path>, tasks: Option<&Path>) -> Result<Loaded> {
    match (scores, models, tasks) {
        (None, None, None) => {
            let (_, warnings) = read_scores(BUNDLED_SCORES.as_bytes())?;
            Ok(Loaded {
                dataset: Dataset::bundled(),
                warnings,
                source: "bundled".into(),
            })
        }
        (Some(s), Some(m), Some(t)) => {
            let (scores, warnings) = load_scores_with_warnings(s)?;
            let records = Records::link(&scores, load_model_factors(m)?, load_task_factors(t)?)?;
            Ok(Loaded {
                dataset: Dataset { scores, records },
                warnings,
                source: format!("{}, {}, {}", s.display(), m.display(), t.display()),
            })
        }
        _ => Err(Error::Config(
            "give all of --scores, --model-factors and --task-factors, or none for the bundled data".into(),
        )),
    }
}

fn load(cfg: &RunConfig) -> Result<Loaded> {
    load_paths(
        cfg.scores.as_deref(),
        cfg.model_factors.as_deref(),
        cfg.task_factors.as_deref(),
    )
}

fn summary(d: &Dataset) -> String {
    format!(
        "{} models, {} tasks, density {:.2}",
        d.scores.n_models(),
        d.scores.n_tasks(),
        d.scores.density()
    )
}

/// An open run directory; files are written as the command produces them.
struct RunDir {
    root: PathBuf,
    log: String,
}

impl RunDir {
    fn create(cfg: &RunConfig, command: &str, loaded: &Loaded) -> Result<Self> {
        let root = cfg.out.clone();
        for dir in [root.clone(), root.join("plotdata"), root.join("checkpoints")] {
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        let mut log = String::new();
        writeln!(log, "collabperf {}", env!("CARGO_PKG_VERSION")).unwrap();
        writeln!(log, "command: {command}").unwrap();
        writeln!(log, "data: {}", loaded.source).unwrap();
        writeln!(log, "dataset_sha256: {}", loaded.dataset.content_hash()).unwrap();
        writeln!(log, "dataset: {}, {} entries", summary(&loaded.dataset), loaded.dataset.scores.len()).unwrap();
        for w in &loaded.warnings {
            writeln!(log, "warning: scores line {}: {}", w.line, w.message).unwrap();
        }
        let dir = RunDir { root, log };
        dir.write("config.resolved", &cfg.resolved())?;
        Ok(dir)
    }

    fn note(&mut self, line: impl AsRef<str>) {
        self.log.push_str(line.as_ref());
        self.log.push('\n');
    }

    fn write(&self, rel: &str, text: &str) -> Result<()> {
        let path = self.root.join(rel);
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    fn finish(self) -> Result<()> {
        self.write("log.txt", &self.log)?;
        emitln!("run directory: {}", self.root.display());
        Ok(())
    }
}

fn cmd_validate(data: &DataArgs) -> Result<()> {
    let loaded = load_paths(data.scores.as_deref(), data.model_factors.as_deref(), data.task_factors.as_deref())?;
    for w in &loaded.warnings {
        emitln!("warning: line {}: {}", w.line, w.message);
    }
    emitln!("{}", summary(&loaded.dataset));
    emitln!("{} observed entries", loaded.dataset.scores.len());
    emitln!("dataset sha256 {}", loaded.dataset.content_hash());
    Ok(())
}

fn cmd_train(cfg: &RunConfig) -> Result<()> {
    let loaded = load(cfg)?;
    let mut dir = RunDir::create(cfg, "train", &loaded)?;
    let d = &loaded.dataset;
    let seed = cfg.seeds[0];
    if cfg.method == Method::ScalingBaseline {
        return Err(Error::Config(
            "the scaling baseline has no checkpoint; use the scaling command".into(),
        ));
    }
    let model = train_method(cfg.method, d, &d.scores, &cfg.experiment, seed)?;
    let (path, mse) = match &model {
        Trained::Mf(m) => {
            let p = dir.root.join("checkpoints").join("mf.ckpt");
            m.save(&p)?;
            (p, m.training_mse(&d.scores))
        }
        Trained::Ncf(m, enc) => {
            let p = dir.root.join("checkpoints").join(format!("{}.ckpt", cfg.method));
            m.save(&p)?;
            dir.note(format!("schema_sha256: {}", m.schema_hash()));
            (p, m.training_mse(&d.scores, enc.as_ref())?)
        }
        Trained::Scaling { .. } => unreachable!("rejected above"),
    };
    dir.note(format!("checkpoint: {}", path.display()));
    dir.write(
        "report.csv",
        &format!(
            "method,seed,n_train,training_mse\n{},{seed},{},{:.6e}\n",
            cfg.method,
            d.scores.len(),
            mse
        ),
    )?;
    emitln!("trained {} on {} entries, training MSE {mse:.4e}", cfg.method, d.scores.len());
    emitln!("checkpoint: {}", path.display());
    dir.finish()
}

enum Checkpoint {
    Mf(MfModel),
    Ncf(NcfModel),
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    if text.starts_with("collabperf-mf") {
        Ok(Checkpoint::Mf(MfModel::from_text(&text)?))
    } else {
        Ok(Checkpoint::Ncf(NcfModel::from_text(&text)?))
    }
}

fn check_shape(n_models: usize, n_tasks: usize, d: &Dataset) -> Result<()> {
    if n_models != d.scores.n_models() || n_tasks != d.scores.n_tasks() {
        return Err(Error::Checkpoint(format!(
            "checkpoint covers {n_models} models x {n_tasks} tasks, the dataset has {} x {}",
            d.scores.n_models(),
            d.scores.n_tasks()
        )));
    }
    Ok(())
}

fn cmd_predict(cfg: &RunConfig, checkpoint: &Path, model: &str, tasks: &str) -> Result<()> {
    let loaded = load(cfg)?;
    let d = &loaded.dataset;
    let ckpt = load_checkpoint(checkpoint)?;
    let mi = d
        .scores
        .model_index(model)
        .ok_or_else(|| Error::Input(format!("unknown model '{model}'")))?;
    let task_ids: Vec<usize> = if tasks == "all" {
        (0..d.scores.n_tasks()).collect()
    } else {
        tasks
            .split(',')
            .map(str::trim)
            .map(|t| d.scores.task_index(t).ok_or_else(|| Error::Input(format!("unknown task '{t}'"))))
            .collect::<Result<_>>()?
    };
    let cells: Vec<(usize, usize)> = task_ids.iter().map(|&t| (mi, t)).collect();
    let preds: Vec<f64> = match &ckpt {
        Checkpoint::Mf(m) => {
            check_shape(m.n_models(), m.n_tasks(), d)?;
            cells.iter().map(|&(a, b)| predict_mf(m, a, b)).collect::<Result<_>>()?
        }
        Checkpoint::Ncf(m) => {
            check_shape(m.n_models(), m.n_tasks(), d)?;
            let enc = m.encode(&d.records);
            m.predict_many(enc.as_ref(), &cells, FactorSet::ALL)?
        }
    };
    let mut dir = RunDir::create(cfg, "predict", &loaded)?;
    dir.note(format!("checkpoint: {}", checkpoint.display()));
    let mut csv = String::from("model,task,predicted,observed\n");
    for (&(a, b), p) in cells.iter().zip(&preds) {
        writeln!(
            csv,
            "{},{},{p:.6},{}",
            field(&d.scores.models()[a]),
            field(&d.scores.tasks()[b]),
            d.scores.get(a, b).map(|s| format!("{s:.6}")).unwrap_or_default()
        )
        .unwrap();
    }
    emit(&csv);
    dir.write("report.csv", &csv)?;
    dir.finish()
}

fn cmd_eval(cfg: &RunConfig) -> Result<()> {
    let loaded = load(cfg)?;
    let mut dir = RunDir::create(cfg, "eval", &loaded)?;
    let table = run_benchmark_eval(&loaded.dataset, &cfg.methods, &cfg.seeds, &cfg.experiment)?;
    dir.note(format!("rank cohort: {COHORT_DEFINITION}"));
    let csv = table.to_csv();
    dir.write("report.csv", &csv)?;
    dir.write("plotdata/per_seed.csv", &table.per_seed_csv())?;
    emit(&csv);
    dir.finish()
}

fn cmd_scenario(cfg: &RunConfig) -> Result<()> {
    let loaded = load(cfg)?;
    let d = &loaded.dataset;
    let name = cfg
        .target
        .as_deref()
        .ok_or_else(|| Error::Config("scenario needs a target model (--target)".into()))?;
    let target = d
        .scores
        .model_index(name)
        .ok_or_else(|| Error::Input(format!("unknown model '{name}'")))?;
    let mut dir = RunDir::create(cfg, "scenario", &loaded)?;
    let r = run_scenario(d, target, cfg.scenario, cfg.method, &cfg.seeds, &cfg.experiment)?;
    let (covered, _, _) = r.scaling_comparison();
    dir.note(format!(
        "scaling baseline covers {covered} of {} held-out predictions",
        r.predictions.len()
    ));
    let csv = r.to_csv(d);
    dir.write("report.csv", &csv)?;
    dir.write("plotdata/predictions.csv", &r.predictions_csv(d))?;
    emit(&csv);
    dir.finish()
}

fn cmd_shapley(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<()> {
    let loaded = load(cfg)?;
    let d = &loaded.dataset;
    let seed = cfg.seeds[0];
    let mut dir = RunDir::create(cfg, "shapley", &loaded)?;
    let spec = SplitSpec {
        validation_fraction: cfg.experiment.validation_fraction,
        ..SplitSpec::random(seed)
    };
    let (train, valid) = split(&d.scores, &spec)?;
    let model = match checkpoint {
        Some(p) => match load_checkpoint(p)? {
            Checkpoint::Ncf(m) => {
                check_shape(m.n_models(), m.n_tasks(), d)?;
                dir.note(format!("checkpoint: {}", p.display()));
                m
            }
            Checkpoint::Mf(_) => {
                return Err(Error::Input("Shapley attribution needs a factor-aware neural checkpoint".into()))
            }
        },
        None => {
            if !cfg.method.variant().is_some_and(|v| v.uses_factors()) {
                return Err(Error::Config(format!(
                    "method {} has no factors to attribute; use ncf_factor or factor_only",
                    cfg.method
                )));
            }
            let Trained::Ncf(m, _) = train_method(cfg.method, d, &train, &cfg.experiment, seed)? else {
                unreachable!("neural method")
            };
            let p = dir.root.join("checkpoints").join(format!("{}.ckpt", cfg.method));
            m.save(&p)?;
            dir.note(format!("trained {} on seed {seed} split, checkpoint {}", cfg.method, p.display()));
            m
        }
    };
    let enc = model
        .encode(&d.records)
        .ok_or_else(|| Error::Input("Shapley attribution needs a factor-aware neural checkpoint".into()))?;
    let report = exact_shapley(&model, &enc, &valid, &cfg.shapley_factors)?;
    let total: f64 = report.mean.iter().sum();
    let gap = (total - (report.v_full - report.v_empty)).abs();
    let check = format!(
        "efficiency: sum of attributions {total:.9e}, v(all) - v(none) {:.9e}, gap {gap:.3e}",
        report.v_full - report.v_empty
    );
    dir.note(format!("value function: {VALUE_CONVENTION}"));
    dir.note(format!("validation entries: {}", valid.len()));
    dir.note(&check);
    let mut csv = Vec::new();
    report.write_csv(&mut csv)?;
    let mut plot = Vec::new();
    report.write_plot_data(&mut plot, &valid)?;
    let csv = String::from_utf8(csv).expect("utf-8");
    dir.write("report.csv", &csv)?;
    dir.write("plotdata/instances.csv", &String::from_utf8(plot).expect("utf-8"))?;
    emit(&csv);
    emitln!("{check}");
    dir.finish()
}

fn cmd_loo(cfg: &RunConfig) -> Result<()> {
    let loaded = load(cfg)?;
    let d = &loaded.dataset;
    let mut dir = RunDir::create(cfg, "loo", &loaded)?;
    let r = leave_one_out(d, cfg.loo_axis, &cfg.seeds, &cfg.loo, &cfg.experiment)?;
    dir.note(format!(
        "loss: mean squared error on each entity's held-out entries; method {}",
        cfg.loo.method
    ));
    let degenerate = r.degenerate.iter().filter(|x| **x).count();
    dir.note(format!("degenerate delta columns excluded from the correlation: {degenerate}"));
    let csv = r.summary_csv(d);
    dir.write("report.csv", &csv)?;
    dir.write("plotdata/loss.csv", &r.matrix_csv(d, &r.loss_matrix))?;
    dir.write("plotdata/delta.csv", &r.matrix_csv(d, &r.delta_matrix))?;
    dir.write("plotdata/normalized_delta.csv", &r.matrix_csv(d, &r.normalized_delta))?;
    dir.write("plotdata/correlation.csv", &r.matrix_csv(d, &r.correlation))?;
    dir.write("plotdata/dendrogram.csv", &r.dendrogram_csv(d))?;
    emit(&csv);
    dir.finish()
}

fn cmd_sparsity(cfg: &RunConfig) -> Result<()> {
    let loaded = load(cfg)?;
    let mut dir = RunDir::create(cfg, "sparsity", &loaded)?;
    let t = sparsity_sweep(
        &loaded.dataset,
        &cfg.sparsity_levels,
        &cfg.seeds,
        cfg.method,
        cfg.validation_seed,
        &cfg.experiment,
    )?;
    dir.note("sparsity: share of the training matrix's grid with no observed score");
    let csv = t.to_csv();
    dir.write("report.csv", &csv)?;
    dir.write("plotdata/sparsity.csv", &t.plot_csv())?;
    emit(&csv);
    dir.finish()
}

fn cmd_scaling(cfg: &RunConfig) -> Result<()> {
    let loaded = load(cfg)?;
    let d = &loaded.dataset;
    let mut dir = RunDir::create(cfg, "scaling", &loaded)?;
    let curves = fit_family_curves(&d.records.models, &d.scores, &cfg.experiment.bounds)?;
    dir.note(format!("{} curves fitted", curves.len()));
    let mut buf = Vec::new();
    write_report(&mut buf, &curves)?;
    let csv = String::from_utf8(buf).expect("utf-8");
    dir.write("report.csv", &csv)?;
    emit(&csv);
    dir.finish()
}

fn field(s: &str) -> String {
    crate::attribution::csv_field(s)
}

