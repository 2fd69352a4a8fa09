use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use collabperf::cli::config::RunConfig;

fn collabperf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_collabperf"))
        .args(args)
        .env_remove("COLLABPERF_WORKERS")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A 4-model, 3-task dataset written to `dir`.
fn small_dataset(dir: &Path) -> [String; 3] {
    let scores = dir.join("scores.csv");
    let models = dir.join("models.csv");
    let tasks = dir.join("tasks.csv");
    let mut s = String::from("model,task,score\n");
    for (i, m) in ["a-1", "a-2", "b-1", "b-2"].iter().enumerate() {
        for (j, t) in ["t1", "t2", "t3"].iter().enumerate() {
            s.push_str(&format!("{m},{t},{:.3}\n", 0.2 + 0.1 * i as f64 + 0.05 * j as f64));
        }
    }
    fs::write(&scores, s).unwrap();
    fs::write(
        &models,
        "model,family,pretrain_tokens_b,params_m,gpu_hours,flops,context_window,batch_size_m,layers,\
         num_heads,kv_size,bottleneck_activation_size,carbon_tco2eq\n\
         a-1,a,,100,,,,,,,,,\na-2,a,,1000,,,,,,,,,\nb-1,b,,200,,,,,,,,,\nb-2,b,,2000,,,,,,,,,\n",
    )
    .unwrap();
    fs::write(
        &tasks,
        "task,ability,task_family,output_format,few_shot\n\
         t1,reasoning,x,binary,0-shot\nt2,reasoning,y,generation,0-shot\nt3,knowledge,z,binary,5-shot\n",
    )
    .unwrap();
    [scores, models, tasks].map(|p| p.display().to_string())
}

#[test]
fn validate_reports_bundled_shape() {
    let o = collabperf(&["validate"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("72 models, 29 tasks, density 0.56"), "{}", stdout(&o));
}

#[test]
fn validate_rejects_bad_files() {
    let dir = tempfile::tempdir().unwrap();
    let [scores, models, tasks] = small_dataset(dir.path());
    let o = collabperf(&["validate", "--scores", &scores, "--model-factors", &models, "--task-factors", &tasks]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("4 models, 3 tasks, density 1.00"));

    let unknown = dir.path().join("unknown.csv");
    fs::write(&unknown, "model,task,score\nzz-9,t1,0.5\n").unwrap();
    let o = collabperf(&["validate", "--scores", path_str(&unknown), "--model-factors", &models, "--task-factors", &tasks]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("linkage"), "{}", stderr(&o));

    let empty = dir.path().join("empty.csv");
    fs::write(&empty, "").unwrap();
    let o = collabperf(&["validate", "--scores", path_str(&empty), "--model-factors", &models, "--task-factors", &tasks]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));

    let o = collabperf(&["validate", "--scores", &scores]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn eval_writes_a_reproducible_run_directory() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str, workers: &str| {
        let out = dir.path().join(name);
        let o = collabperf(&[
            "eval",
            "--methods",
            "mf,scaling_baseline",
            "--seeds",
            "2",
            "--workers",
            workers,
            "--out",
            path_str(&out),
        ]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        out
    };
    let a = run("a", "1");
    let b = run("b", "2");
    let report = fs::read_to_string(a.join("report.csv")).unwrap();
    assert_eq!(report, fs::read_to_string(b.join("report.csv")).unwrap());
    assert!(report.starts_with("method,mse,mse_std,"));
    assert_eq!(report.lines().count(), 3);
    assert!(a.join("plotdata/per_seed.csv").is_file());
    assert!(a.join("checkpoints").is_dir());

    let log = fs::read_to_string(a.join("log.txt")).unwrap();
    assert!(log.contains("dataset_sha256: "));
    assert!(log.contains(concat!("collabperf ", env!("CARGO_PKG_VERSION"))));

    let resolved = fs::read_to_string(a.join("config.resolved")).unwrap();
    let mut cfg = RunConfig::defaults(7);
    cfg.apply_text(&resolved).unwrap();
    assert_eq!(cfg.seeds, vec![1, 2]);
    assert_eq!(cfg.workers, 1);
    assert_eq!(cfg.resolved(), resolved);
}

#[test]
fn config_file_then_flags() {
    let dir = tempfile::tempdir().unwrap();
    let conf = dir.path().join("run.conf");
    fs::write(&conf, "# quick\nseeds = 1,2\nmf_iterations = 2000\nmethods = mf\n").unwrap();
    let out = dir.path().join("run");
    let o = collabperf(&[
        "eval",
        "--config",
        path_str(&conf),
        "--seed-list",
        "9",
        "--set",
        "mf_latent_dim=3",
        "--out",
        path_str(&out),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let resolved = fs::read_to_string(out.join("config.resolved")).unwrap();
    assert!(resolved.contains("seeds = 9\n"));
    assert!(resolved.contains("mf_iterations = 2000\n"));
    assert!(resolved.contains("mf_latent_dim = 3\n"));

    fs::write(&conf, "not_a_key = 1\n").unwrap();
    let o = collabperf(&["eval", "--config", path_str(&conf)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("unknown key"));
}

#[test]
fn worker_count_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = Command::new(env!("CARGO_BIN_EXE_collabperf"))
        .args(["scaling", "--out", path_str(&out)])
        .env("COLLABPERF_WORKERS", "3")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0));
    assert!(fs::read_to_string(out.join("config.resolved")).unwrap().contains("workers = 3\n"));

    let o = Command::new(env!("CARGO_BIN_EXE_collabperf"))
        .args(["scaling", "--out", path_str(&out)])
        .env("COLLABPERF_WORKERS", "0")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn train_then_predict() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("train");
    let o = collabperf(&["train", "--method", "mf", "--out", path_str(&run)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let ckpt = run.join("checkpoints/mf.ckpt");
    assert!(ckpt.is_file());

    let pred = dir.path().join("predict");
    let o = collabperf(&[
        "predict",
        "--checkpoint",
        path_str(&ckpt),
        "--model",
        "LLama-2-70B",
        "--tasks",
        "all",
        "--out",
        path_str(&pred),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = fs::read_to_string(pred.join("report.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 29);
    for r in rows {
        let p: f64 = r.split(',').nth(2).unwrap().parse().unwrap();
        assert!((0.0..=1.0).contains(&p), "{r}");
    }

    let o = collabperf(&["predict", "--checkpoint", path_str(&ckpt), "--model", "nobody"]);
    assert_eq!(o.status.code(), Some(2));
    let garbage = dir.path().join("garbage.ckpt");
    fs::write(&garbage, "hello\n").unwrap();
    let o = collabperf(&["predict", "--checkpoint", path_str(&garbage), "--model", "LLama-2-70B"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn checkpoint_must_match_the_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let [scores, models, tasks] = small_dataset(dir.path());
    let run = dir.path().join("train");
    let o = collabperf(&[
        "train",
        "--method",
        "mf",
        "--scores",
        &scores,
        "--model-factors",
        &models,
        "--task-factors",
        &tasks,
        "--set",
        "mf_iterations=1000",
        "--out",
        path_str(&run),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let o = collabperf(&[
        "predict",
        "--checkpoint",
        path_str(&run.join("checkpoints/mf.ckpt")),
        "--model",
        "LLama-2-70B",
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("checkpoint"), "{}", stderr(&o));
}

#[test]
fn shapley_from_a_checkpoint_echoes_efficiency() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("train");
    let o = collabperf(&[
        "train",
        "--method",
        "ncf_factor",
        "--set",
        "ncf_iterations=5000",
        "--out",
        path_str(&run),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = dir.path().join("shapley");
    let o = collabperf(&[
        "shapley",
        "--checkpoint",
        path_str(&run.join("checkpoints/ncf_factor.ckpt")),
        "--factors",
        "params_m,family,ability,few_shot",
        "--out",
        path_str(&out),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = stdout(&o);
    let line = text.lines().find(|l| l.starts_with("efficiency:")).unwrap();
    let gap: f64 = line.rsplit("gap ").next().unwrap().parse().unwrap();
    assert!(gap < 1e-9, "{line}");
    let report = fs::read_to_string(out.join("report.csv")).unwrap();
    assert_eq!(report.lines().count(), 5);
    assert!(fs::read_to_string(out.join("log.txt")).unwrap().contains("value function: "));
}

#[test]
fn exit_codes_separate_input_from_runtime_failures() {
    let dir = tempfile::tempdir().unwrap();
    let o = collabperf(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
    let o = collabperf(&["eval", "--methods", "svd"]);
    assert_eq!(o.status.code(), Some(2));
    let o = collabperf(&["scenario", "--out", path_str(&dir.path().join("s"))]);
    assert_eq!(o.status.code(), Some(2), "missing target");

    // Training that blows up is a runtime failure.
    let o = collabperf(&[
        "train",
        "--method",
        "mf",
        "--set",
        "mf_learning_rate=1e6",
        "--out",
        path_str(&dir.path().join("t")),
    ]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("diverged"));
}

#[test]
fn scaling_and_scenario_commands() {
    let dir = tempfile::tempdir().unwrap();
    let [scores, models, tasks] = small_dataset(dir.path());
    let data = ["--scores", &scores, "--model-factors", &models, "--task-factors", &tasks];

    let out = dir.path().join("scaling");
    let mut args = vec!["scaling", "--out", path_str(&out)];
    args.extend(data);
    let o = collabperf(&args);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let report = fs::read_to_string(out.join("report.csv")).unwrap();
    assert_eq!(report.lines().next().unwrap(), "family,task,w,b,residual,n_points");
    assert_eq!(report.lines().count(), 1 + 6);

    let out = dir.path().join("scenario");
    let mut args = vec![
        "scenario",
        "--target",
        "a-2",
        "--scenario",
        "cpp0",
        "--method",
        "mf",
        "--seed-list",
        "1,2",
        "--set",
        "mf_iterations=2000",
        "--out",
        path_str(&out),
    ];
    args.extend(data);
    let o = collabperf(&args);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let preds = fs::read_to_string(out.join("plotdata/predictions.csv")).unwrap();
    assert_eq!(preds.lines().count(), 1 + 2 * 3);
    // a-2 has only one smaller family member, so no scaling prediction.
    assert!(preds.lines().skip(1).all(|l| l.ends_with(',')));
}
