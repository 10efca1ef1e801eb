use std::fs;
use std::path::Path;
use std::process::Command;

use dc3::dc3::Variant;
use dc3_bench::config::{RunConfig, Task};
use dc3_bench::experiment::{run_experiment, sweep_constraints, timing_harness, SweepAxis, Workspace};
use dc3_bench::report::by_method;

fn small(task: Task, dir: &Path, variants: &[&str], seeds: &[u64]) -> RunConfig {
    let mut c = RunConfig::for_task(task);
    c.variants = variants.iter().map(|s| s.to_string()).collect();
    c.seeds = seeds.to_vec();
    c.output = dir.to_path_buf();
    c.problem.n = 10;
    c.problem.n_eq = 5;
    c.problem.n_ineq = 5;
    c.data.instances = Some(120);
    c.train.epochs = Some(2);
    c.train.batch_size = Some(50);
    c
}

#[test]
fn five_seeds_give_a_spread() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(Task::Qp, dir.path(), &["dc3"], &[0, 1, 2, 3, 4]);
    let result = run_experiment(&cfg).unwrap();
    assert_eq!(result.failed, 0);
    let rows = by_method(&result.summary);
    let dc3 = rows["dc3"];
    assert_eq!(dc3.runs, 5);
    assert!(dc3.objective.unwrap().std > 0.0);
    assert_eq!(rows["optimizer"].runs, 1);
    for name in ["eval.csv", "timing.csv", "summary.csv", "report.md", "config.toml"] {
        assert!(dir.path().join(name).exists(), "{name}");
    }
    for seed in 0..5 {
        let cell = dir.path().join(format!("cells/dc3-seed{seed}"));
        for name in ["history.csv", "eval.csv", "timing.csv", "checkpoint.tensors"] {
            assert!(cell.join(name).exists(), "{name}");
        }
    }
}

/// Drops the wall-clock column from a markdown table.
fn without_time(md: &str) -> String {
    md.lines()
        .map(|l| {
            let cells: Vec<&str> = l.split('|').collect();
            if cells.len() > 8 { [&cells[..7], &cells[8..]].concat().join("|") } else { l.to_string() }
        })
        .collect::<Vec<_>>()
        .join("\n")
}

#[test]
fn reruns_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for task in [Task::Qp, Task::Nonconvex] {
        let ca = small(task, a.path(), &["dc3", "nn", "eqnn"], &[0, 1]);
        let cb = RunConfig { output: b.path().to_path_buf(), ..ca.clone() };
        run_experiment(&ca).unwrap();
        run_experiment(&cb).unwrap();
        for name in ["eval.csv", "summary.csv"] {
            let (x, y) = (fs::read(a.path().join(name)).unwrap(), fs::read(b.path().join(name)).unwrap());
            assert!(x == y, "{task}: {name} differs");
        }
        let read = |p: &Path| without_time(&fs::read_to_string(p.join("report.md")).unwrap());
        assert_eq!(read(a.path()), read(b.path()), "{task}: report.md differs");
    }
}

#[test]
fn report_has_the_metric_columns() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(Task::Qp, dir.path(), &["dc3", "dc3-no-completion"], &[0]);
    run_experiment(&cfg).unwrap();
    let md = fs::read_to_string(dir.path().join("report.md")).unwrap();
    let header = md.lines().find(|l| l.starts_with("| Method")).unwrap();
    let cols: Vec<&str> = header.split('|').map(str::trim).filter(|s| !s.is_empty()).collect();
    assert_eq!(cols, ["Method", "Obj. value", "Max eq.", "Mean eq.", "Max ineq.", "Mean ineq.", "Time (s)", "Gap"]);
    assert!(md.contains("| DC3 |") && md.contains("| DC3, ≠ |") && md.contains("| Optimizer |"));
}

#[test]
fn sweep_over_equality_counts() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(Task::Qp, dir.path(), &["dc3", "dc3-no-completion"], &[0]);
    cfg.problem.n = 60;
    cfg.problem.n_ineq = 20;
    cfg.train.epochs = Some(5);
    let sweep = sweep_constraints(&cfg, SweepAxis::NEq, &[10, 30, 50]).unwrap();
    assert_eq!(sweep.columns.len(), 3);
    for (v, r) in &sweep.columns {
        let rows = by_method(&r.summary);
        assert!(rows["dc3"].eq_max.unwrap().mean < 1e-6, "n_eq = {v}");
        assert!(rows["dc3-no-completion"].eq_max.unwrap().mean > 0.05, "n_eq = {v}");
    }
    let md = fs::read_to_string(dir.path().join("sweep.md")).unwrap();
    let header = md.lines().find(|l| l.starts_with("| Method")).unwrap();
    assert_eq!(header.matches("n_eq =").count(), 3);
}

#[test]
fn timing_is_per_instance_and_stable() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(Task::Qp, dir.path(), &["dc3"], &[0]);
    cfg.problem.n = 100;
    cfg.problem.n_eq = 50;
    cfg.problem.n_ineq = 50;
    cfg.data.instances = Some(2400);
    cfg.reference.enabled = false;
    let ws = Workspace::prepare(&cfg).unwrap();
    let params = dc3::nn::MlpParams::init(0, 50, 50);
    let x = ws.data.test_x();
    let dc = cfg.dc3_config(Variant::Dc3).unwrap();
    let best = |_: usize| {
        (0..3)
            .map(|_| timing_harness(&params, Variant::Dc3, ws.family.as_dyn(), &x, &dc).unwrap())
            .min_by(|a, b| a.total.total_cmp(&b.total))
            .unwrap()
    };
    let (a, b) = (best(0), best(1));
    assert_eq!(a.per_instance, a.total / x.rows() as f64);
    assert!((a.total - b.total).abs() < 0.5 * a.total.max(b.total), "{a:?} {b:?}");
}

fn bench() -> Command {
    Command::new(env!("CARGO_BIN_EXE_dc3-bench"))
}

#[test]
fn command_line_verbs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let common = ["--task", "qp", "--n", "10", "--n-eq", "5", "--n-ineq", "5", "--instances", "120", "--epochs", "2"];
    let run = |args: &[&str]| {
        bench().args(common).args(["--output", out, "--variants", "dc3", "--seeds", "0"]).args(args).output().unwrap()
    };
    assert!(run(&["generate"]).status.success());
    assert!(run(&["train", "--variant", "dc3", "--seed", "0"]).status.success());
    assert!(dir.path().join("cells/dc3-seed0/checkpoint.tensors").exists());
    let eval = run(&["eval", "--variant", "dc3", "--seed", "0"]);
    assert!(eval.status.success(), "{}", String::from_utf8_lossy(&eval.stderr));
    let report = run(&["report"]);
    assert!(report.status.success());
    assert!(String::from_utf8_lossy(&report.stdout).contains("| DC3 |"));

    let toml = dir.path().join("run.toml");
    fs::write(&toml, format!("task = \"qp\"\nvariants = [\"nn\"]\nseeds = [1]\noutput = {:?}\n[problem]\nn = 10\nn_eq = 5\nn_ineq = 5\n[data]\ninstances = 120\n[train]\nepochs = 1\n", dir.path().join("toml-run"))).unwrap();
    let s = bench().args(["--config", toml.to_str().unwrap(), "run"]).output().unwrap();
    assert!(s.status.success(), "{}", String::from_utf8_lossy(&s.stderr));
    assert!(dir.path().join("toml-run/cells/nn-seed1/eval.csv").exists());

    let bad = run(&["train", "--variant", "bogus"]);
    assert!(!bad.status.success());
    assert!(String::from_utf8_lossy(&bad.stderr).contains("bogus"));
    let missing = bench().args(["run"]).output().unwrap();
    assert!(!missing.status.success());
}

#[test]
fn failed_cells_make_the_run_fail() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    // A divergent learning rate turns the training loss non-finite.
    let toml = dir.path().join("run.toml");
    fs::write(
        &toml,
        format!("task = \"qp\"\nvariants = [\"nn\"]\nseeds = [0]\noutput = {out:?}\n[problem]\nn = 10\nn_eq = 5\nn_ineq = 5\n[data]\ninstances = 120\n[train]\nepochs = 5\nlr = 1e300\n"),
    )
    .unwrap();
    let s = bench().args(["--config", toml.to_str().unwrap(), "run"]).output().unwrap();
    assert!(!s.status.success());
    let eval = fs::read_to_string(dir.path().join("eval.csv")).unwrap();
    assert!(eval.contains("failed"));
}
