//! Datasets, reference solutions, per-cell training and evaluation, and the
//! experiment and sweep drivers.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use dc3::acopf::{AcopfFamily, PowerCase};
use dc3::dataset::{sample_instances, InstanceSet};
use dc3::dc3::{evaluate, measure, predict, train, EpochRecord, Variant};
use dc3::family::ProblemFamily;
use dc3::nn::MlpParams;
use dc3::qp::{ObjectiveKind, QpFamily};
use dc3::reference::{make_labels, solve_reduced_barrier, AdmmSettings, AdmmSolver, BarrierSettings, ReferenceSet};
use dc3::tensor::Tensor;
use dc3::tensor_io::{load_tensors, save_tensors, take_tensor};
use serde::Serialize;

use crate::config::{RunConfig, Task};
use crate::report::{self, EvalRow, SummaryRow, TimingRow, OPTIMIZER};
use crate::BenchError;

pub enum TaskFamily {
    Qp(QpFamily),
    Acopf(Box<AcopfFamily>),
}

impl TaskFamily {
    pub fn build(config: &RunConfig) -> Result<Self, BenchError> {
        let p = &config.problem;
        Ok(match config.task {
            Task::Qp | Task::Nonconvex => {
                let kind = if config.task == Task::Qp { ObjectiveKind::Quadratic } else { ObjectiveKind::Sine };
                TaskFamily::Qp(QpFamily::generate(p.family_seed, p.n, p.n_eq, p.n_ineq, kind)?)
            }
            Task::Acopf => {
                let case = match &p.case {
                    Some(path) => PowerCase::from_file(path)?,
                    None => PowerCase::case57(),
                };
                TaskFamily::Acopf(Box::new(AcopfFamily::new(case)?))
            }
        })
    }

    pub fn as_dyn(&self) -> &dyn ProblemFamily {
        match self {
            TaskFamily::Qp(f) => f,
            TaskFamily::Acopf(f) => f.as_ref(),
        }
    }
}

/// Solved reference points for a block of instances.
pub struct ReferenceRun {
    /// Per-row objective, NaN where the solver failed.
    pub objective: Tensor,
    pub y: Tensor,
    pub solved: Vec<bool>,
    /// Solve time of each row.
    pub row_seconds: Vec<f64>,
    pub seconds: f64,
}

impl ReferenceRun {
    pub fn select(&self, rows: &[usize]) -> ReferenceRun {
        let row_seconds: Vec<f64> = rows.iter().map(|&i| self.row_seconds[i]).collect();
        ReferenceRun {
            objective: self.objective.select_rows(rows),
            y: self.y.select_rows(rows),
            solved: rows.iter().map(|&i| self.solved[i]).collect(),
            seconds: row_seconds.iter().sum(),
            row_seconds,
        }
    }
}

fn barrier_settings(config: &RunConfig) -> BarrierSettings {
    let mut s = BarrierSettings::default();
    if let Some(k) = config.reference.barrier_starts {
        s.starts = k;
    } else if config.task == Task::Acopf {
        s.starts = 1;
    }
    s
}

/// Solve every row of `x` with the task's reference method: ADMM for the
/// convex family, the reduced barrier method otherwise.
pub fn solve_reference(config: &RunConfig, family: &TaskFamily, x: &Tensor) -> Result<ReferenceRun, BenchError> {
    let fam = family.as_dyn();
    let n = fam.dims().n;
    let mut y = Tensor::zeros(x.rows(), n);
    let mut objective = Tensor::filled(x.rows(), 1, f64::NAN);
    let mut solved = vec![false; x.rows()];
    let mut row_seconds = vec![0.0; x.rows()];
    let admm = match (config.task, family) {
        (Task::Qp, TaskFamily::Qp(q)) => Some(AdmmSolver::for_family(q, AdmmSettings::default())?),
        _ => None,
    };
    let settings = barrier_settings(config);
    for i in 0..x.rows() {
        let start = Instant::now();
        // ADMM keeps its best iterate when the iteration limit is hit.
        let result = match &admm {
            Some(solver) => solver.solve(x.row(i)).map(|s| (s.y, s.objective)),
            None => solve_reduced_barrier(fam, &x.select_rows(&[i]), &settings).map(|s| (s.y, s.objective)),
        };
        row_seconds[i] = start.elapsed().as_secs_f64();
        if let Ok((yi, fi)) = result {
            y.row_mut(i).copy_from_slice(&yi);
            objective.set(i, 0, fi);
            solved[i] = true;
        }
    }
    Ok(ReferenceRun { objective, y, solved, seconds: row_seconds.iter().sum(), row_seconds })
}

/// Family, instances (with labels when a supervised variant is requested)
/// and test-set reference solutions.
pub struct Workspace {
    pub config: RunConfig,
    pub family: TaskFamily,
    pub data: InstanceSet,
    pub reference: Option<ReferenceRun>,
}

impl Workspace {
    pub fn data_dir(config: &RunConfig) -> PathBuf {
        config.output.join("data")
    }

    fn data_key(config: &RunConfig, labels: bool) -> Result<String, BenchError> {
        #[derive(Serialize)]
        struct Key<'a> {
            task: Task,
            problem: &'a crate::config::ProblemConfig,
            data: &'a crate::config::DataConfig,
            reference: &'a crate::config::ReferenceConfig,
            instances: usize,
            labels: bool,
        }
        toml::to_string(&Key {
            task: config.task,
            problem: &config.problem,
            data: &config.data,
            reference: &config.reference,
            instances: config.instances(),
            labels,
        })
        .map_err(|e| BenchError::Config(e.to_string()))
    }

    fn needs_labels(config: &RunConfig) -> Result<bool, BenchError> {
        Ok(config.parsed_variants()?.iter().any(|v| v.needs_labels()))
    }

    /// Load the cached workspace under `output/data` when it was generated
    /// from the same settings, otherwise generate and cache it.
    pub fn prepare(config: &RunConfig) -> Result<Self, BenchError> {
        let labels = Self::needs_labels(config)?;
        let key = Self::data_key(config, labels)?;
        let dir = Self::data_dir(config);
        if fs::read_to_string(dir.join("key.toml")).ok().as_deref() == Some(key.as_str()) {
            if let Ok(ws) = Self::load(config, &dir) {
                return Ok(ws);
            }
        }
        let ws = Self::generate(config)?;
        ws.save(&dir)?;
        fs::write(dir.join("key.toml"), key)?;
        Ok(ws)
    }

    pub fn generate(config: &RunConfig) -> Result<Self, BenchError> {
        let family = TaskFamily::build(config)?;
        let fam = family.as_dyn();
        let mut data = sample_instances(fam, config.instances(), config.data.seed);
        let test = data.splits.test.clone();
        let reference = if Self::needs_labels(config)? {
            let run = solve_reference(config, &family, &data.x)?;
            let unsolved: Vec<usize> = (0..data.len()).filter(|&i| !run.solved[i]).collect();
            if !unsolved.is_empty() {
                return Err(BenchError::Solver(dc3::reference::SolverError::Unsolved(unsolved)));
            }
            let set: ReferenceSet = make_labels(fam, &data.x, |i, _| Some((run.y.row(i).to_vec(), run.objective.get(i, 0))))?;
            data.labels = Some(set.labels);
            Some(run.select(&test.collect::<Vec<_>>()))
        } else if config.reference.enabled {
            Some(solve_reference(config, &family, &data.test_x())?)
        } else {
            None
        };
        Ok(Workspace { config: config.clone(), family, data, reference })
    }

    pub fn save(&self, dir: &Path) -> Result<(), BenchError> {
        fs::create_dir_all(dir)?;
        self.data.save(dir)?;
        if let TaskFamily::Qp(q) = &self.family {
            q.save(dir)?;
        }
        if let Some(r) = &self.reference {
            let solved = Tensor::col_vector(&r.solved.iter().map(|&s| if s { 1.0 } else { 0.0 }).collect::<Vec<_>>());
            let secs = Tensor::col_vector(&r.row_seconds);
            save_tensors(
                &dir.join("reference.tensors"),
                &[("objective", &r.objective), ("y", &r.y), ("solved", &solved), ("seconds", &secs)],
            )?;
        }
        Ok(())
    }

    pub fn load(config: &RunConfig, dir: &Path) -> Result<Self, BenchError> {
        let family = match config.task {
            Task::Acopf => TaskFamily::build(config)?,
            _ => TaskFamily::Qp(QpFamily::load(dir)?),
        };
        let data = InstanceSet::load(dir)?;
        let reference = if dir.join("reference.tensors").exists() {
            let mut t = load_tensors(&dir.join("reference.tensors"))?;
            let row_seconds = take_tensor(&mut t, "seconds", None)?.into_data();
            Some(ReferenceRun {
                objective: take_tensor(&mut t, "objective", None)?,
                y: take_tensor(&mut t, "y", None)?,
                solved: take_tensor(&mut t, "solved", None)?.data().iter().map(|v| *v > 0.5).collect(),
                seconds: row_seconds.iter().sum(),
                row_seconds,
            })
        } else {
            None
        };
        Ok(Workspace { config: config.clone(), family, data, reference })
    }

    /// Metrics of the reference solutions on the test rows.
    pub fn reference_rows(&self) -> Result<Option<(EvalRow, TimingRow)>, BenchError> {
        let Some(r) = &self.reference else { return Ok(None) };
        let x = self.data.test_x();
        let m = measure(self.family.as_dyn(), &x, &r.y, &r.solved, None)?;
        let solved = r.solved.iter().filter(|s| **s).count();
        let objective = m.objective.iter().sum::<f64>() / solved.max(1) as f64;
        let row = EvalRow {
            method: OPTIMIZER.into(),
            seed: 0,
            status: "ok".into(),
            instances: x.rows(),
            converged: solved,
            objective: Some(objective),
            eq_max: Some(m.eq_max),
            eq_mean: Some(m.eq_mean),
            ineq_max: Some(m.ineq_max),
            ineq_mean: Some(m.ineq_mean),
            gap: None,
            message: String::new(),
        };
        let timing = TimingRow {
            method: OPTIMIZER.into(),
            seed: 0,
            total_seconds: r.seconds,
            per_instance_seconds: r.seconds / x.rows().max(1) as f64,
        };
        Ok(Some((row, timing)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Timing {
    pub total: f64,
    pub per_instance: f64,
}

/// Wall time of the test path over all of `x`, after one discarded pass.
pub fn timing_harness(
    params: &MlpParams,
    variant: Variant,
    family: &dyn ProblemFamily,
    x: &Tensor,
    config: &dc3::dc3::Dc3Config,
) -> Result<Timing, BenchError> {
    predict(params, variant, family, x, config)?;
    let start = Instant::now();
    predict(params, variant, family, x, config)?;
    let total = start.elapsed().as_secs_f64();
    Ok(Timing { total, per_instance: total / x.rows().max(1) as f64 })
}

pub struct CellOutcome {
    pub params: MlpParams,
    pub history: Vec<EpochRecord>,
    pub eval: EvalRow,
    pub timing: TimingRow,
}

#[derive(Serialize, serde::Deserialize)]
pub struct HistoryRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_objective: Option<f64>,
    pub valid_eq_max: Option<f64>,
    pub valid_ineq_max: Option<f64>,
}

pub fn cell_dir(config: &RunConfig, variant: Variant, seed: u64) -> PathBuf {
    config.output.join("cells").join(format!("{}-seed{seed}", variant.name()))
}

/// Train one variant with one seed.
pub fn train_cell(ws: &Workspace, variant: Variant, seed: u64) -> Result<(MlpParams, Vec<EpochRecord>), BenchError> {
    let cfg = ws.config.dc3_config(variant)?;
    let out = train(variant, ws.family.as_dyn(), &ws.data, &cfg, seed)?;
    Ok((out.params, out.history))
}

/// Evaluate trained parameters on the test split.
pub fn eval_cell(ws: &Workspace, variant: Variant, seed: u64, params: &MlpParams) -> Result<(EvalRow, TimingRow), BenchError> {
    let cfg = ws.config.dc3_config(variant)?;
    let fam = ws.family.as_dyn();
    let x = ws.data.test_x();
    let timing = timing_harness(params, variant, fam, &x, &cfg)?;
    let (_, report) = evaluate(params, variant, fam, &x, &cfg, ws.reference.as_ref().map(|r| &r.objective))?;
    let row = EvalRow::from_report(variant.name(), seed, &report);
    let t = TimingRow {
        method: variant.name().into(),
        seed,
        total_seconds: timing.total,
        per_instance_seconds: timing.per_instance,
    };
    Ok((row, t))
}

pub fn write_cell(config: &RunConfig, variant: Variant, seed: u64, outcome: &CellOutcome) -> Result<(), BenchError> {
    let dir = cell_dir(config, variant, seed);
    fs::create_dir_all(&dir)?;
    write_history(&dir, &outcome.history)?;
    outcome.params.write_checkpoint(fs::File::create(dir.join("checkpoint.tensors"))?)?;
    report::write_rows(&dir.join("eval.csv"), std::slice::from_ref(&outcome.eval))?;
    report::write_rows(&dir.join("timing.csv"), std::slice::from_ref(&outcome.timing))?;
    Ok(())
}

pub fn write_history(dir: &Path, history: &[EpochRecord]) -> Result<(), BenchError> {
    let rows: Vec<HistoryRow> = history
        .iter()
        .map(|h| HistoryRow {
            epoch: h.epoch,
            train_loss: h.train_loss,
            valid_objective: h.valid.map(|v| v.objective),
            valid_eq_max: h.valid.map(|v| v.eq_max),
            valid_ineq_max: h.valid.map(|v| v.ineq_max),
        })
        .collect();
    report::write_rows(&dir.join("history.csv"), &rows)
}

pub fn run_cell(ws: &Workspace, variant: Variant, seed: u64) -> Result<CellOutcome, BenchError> {
    let (params, history) = train_cell(ws, variant, seed)?;
    let (eval, timing) = eval_cell(ws, variant, seed, &params)?;
    Ok(CellOutcome { params, history, eval, timing })
}

pub struct ExperimentResult {
    pub rows: Vec<EvalRow>,
    pub timings: Vec<TimingRow>,
    pub summary: Vec<SummaryRow>,
    pub failed: usize,
}

/// Aggregate rows and write `eval.csv`, `timing.csv`, `summary.csv` and
/// `report.md` into the output directory.
pub fn write_outputs(config: &RunConfig, rows: Vec<EvalRow>, timings: Vec<TimingRow>) -> Result<ExperimentResult, BenchError> {
    let out = &config.output;
    fs::create_dir_all(out)?;
    report::write_rows(&out.join("eval.csv"), &rows)?;
    report::write_rows(&out.join("timing.csv"), &timings)?;
    let summary = report::aggregate(&rows, &timings);
    report::write_summary(&out.join("summary.csv"), &summary)?;
    let title = match config.task {
        Task::Acopf => format!("{} ({} instances)", config.task, config.instances()),
        _ => format!(
            "{} (n = {}, n_eq = {}, n_ineq = {}, {} instances)",
            config.task,
            config.problem.n,
            config.problem.n_eq,
            config.problem.n_ineq,
            config.instances()
        ),
    };
    fs::write(out.join("report.md"), report::markdown(&title, &summary))?;
    let failed = rows.iter().filter(|r| !r.ok()).count();
    Ok(ExperimentResult { rows, timings, summary, failed })
}

/// Train and evaluate every `(variant, seed)` cell, then write the reports.
/// A failing cell is recorded and does not stop the others.
pub fn run_experiment(config: &RunConfig) -> Result<ExperimentResult, BenchError> {
    config.validate()?;
    fs::create_dir_all(&config.output)?;
    fs::write(config.output.join("config.toml"), config.to_toml()?)?;
    let ws = Workspace::prepare(config)?;
    let mut rows = Vec::new();
    let mut timings = Vec::new();
    if let Some((r, t)) = ws.reference_rows()? {
        rows.push(r);
        timings.push(t);
    }
    for variant in config.parsed_variants()? {
        for &seed in &config.seeds {
            match run_cell(&ws, variant, seed) {
                Ok(outcome) => {
                    write_cell(config, variant, seed, &outcome)?;
                    rows.push(outcome.eval);
                    timings.push(outcome.timing);
                }
                Err(e) => rows.push(EvalRow::failed(variant.name(), seed, e.to_string())),
            }
        }
    }
    write_outputs(config, rows, timings)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    NEq,
    NIneq,
}

impl SweepAxis {
    pub fn as_str(self) -> &'static str {
        match self {
            SweepAxis::NEq => "n_eq",
            SweepAxis::NIneq => "n_ineq",
        }
    }

    pub fn parse(s: &str) -> Result<Self, BenchError> {
        match s {
            "n_eq" | "n-eq" => Ok(SweepAxis::NEq),
            "n_ineq" | "n-ineq" => Ok(SweepAxis::NIneq),
            _ => Err(BenchError::Config(format!("unknown sweep axis `{s}` (expected n_eq or n_ineq)"))),
        }
    }
}

pub struct SweepResult {
    pub columns: Vec<(usize, ExperimentResult)>,
    pub failed: usize,
}

/// One experiment per value of `axis`, each under `output/<axis>-<value>`,
/// plus a combined `sweep.md`.
pub fn sweep_constraints(base: &RunConfig, axis: SweepAxis, values: &[usize]) -> Result<SweepResult, BenchError> {
    if base.task == Task::Acopf {
        return Err(BenchError::Config("constraint sweeps apply to the qp and nonconvex tasks".into()));
    }
    if values.is_empty() {
        return Err(BenchError::Config("no sweep values".into()));
    }
    let mut columns = Vec::with_capacity(values.len());
    for &v in values {
        let mut c = base.clone();
        match axis {
            SweepAxis::NEq => c.problem.n_eq = v,
            SweepAxis::NIneq => c.problem.n_ineq = v,
        }
        c.output = base.output.join(format!("{}-{v}", axis.as_str()));
        columns.push((v, run_experiment(&c)?));
    }
    fs::create_dir_all(&base.output)?;
    let tables: Vec<(usize, Vec<SummaryRow>)> = columns.iter().map(|(v, r)| (*v, r.summary.clone())).collect();
    fs::write(base.output.join("sweep.md"), report::sweep_markdown(axis.as_str(), &tables))?;
    let failed = columns.iter().map(|(_, r)| r.failed).sum();
    Ok(SweepResult { columns, failed })
}
