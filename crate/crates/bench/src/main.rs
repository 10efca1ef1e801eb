use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dc3::dc3::Variant;
use dc3::nn::MlpParams;
use dc3_bench::config::{RunConfig, Task};
use dc3_bench::experiment::{
    cell_dir, eval_cell, run_experiment, sweep_constraints, train_cell, write_history, write_outputs, SweepAxis,
    Workspace,
};
use dc3_bench::report::{self, EvalRow, TimingRow};
use dc3_bench::BenchError;

/// Train and evaluate learned solvers against reference optimizers.
#[derive(Parser)]
#[command(name = "dc3-bench", version)]
struct Cli {
    /// TOML run configuration; flags below override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    task: Option<Task>,
    #[arg(long, global = true)]
    n: Option<usize>,
    #[arg(long, global = true)]
    n_eq: Option<usize>,
    #[arg(long, global = true)]
    n_ineq: Option<usize>,
    #[arg(long, global = true)]
    instances: Option<usize>,
    #[arg(long, global = true)]
    epochs: Option<usize>,
    /// Comma-separated variant names.
    #[arg(long, global = true, value_delimiter = ',')]
    variants: Option<Vec<String>>,
    /// Comma-separated seeds.
    #[arg(long, global = true, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long, global = true)]
    output: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate (or reuse) the dataset and reference solutions.
    Generate,
    /// Train one cell and save its checkpoint and history.
    Train {
        #[arg(long)]
        variant: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Evaluate a saved checkpoint on the test split.
    Eval {
        #[arg(long)]
        variant: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Aggregate the per-cell results into the top-level reports.
    Report,
    /// Train and evaluate every variant and seed.
    Run,
    /// Repeat `run` over constraint counts.
    Sweep {
        #[arg(long)]
        axis: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<usize>,
    },
}

impl Cli {
    fn run_config(&self) -> Result<RunConfig, BenchError> {
        let mut c = match (&self.config, self.task) {
            (Some(path), _) => RunConfig::load(path)?,
            (None, Some(task)) => RunConfig::for_task(task),
            (None, None) => return Err(BenchError::Config("pass --config or --task".into())),
        };
        if let (Some(task), Some(_)) = (self.task, &self.config) {
            c.task = task;
        }
        if let Some(v) = self.n {
            c.problem.n = v;
        }
        if let Some(v) = self.n_eq {
            c.problem.n_eq = v;
        }
        if let Some(v) = self.n_ineq {
            c.problem.n_ineq = v;
        }
        if self.instances.is_some() {
            c.data.instances = self.instances;
        }
        if self.epochs.is_some() {
            c.train.epochs = self.epochs;
        }
        if let Some(v) = &self.variants {
            c.variants = v.clone();
        }
        if let Some(s) = &self.seeds {
            c.seeds = s.clone();
        }
        if let Some(o) = &self.output {
            c.output = o.clone();
        }
        c.validate()?;
        Ok(c)
    }
}

fn variant(name: &str) -> Result<Variant, BenchError> {
    Variant::parse(name).ok_or_else(|| BenchError::Config(format!("unknown variant `{name}`")))
}

fn execute(cli: &Cli) -> Result<(), BenchError> {
    let config = cli.run_config()?;
    match &cli.command {
        Command::Generate => {
            let ws = Workspace::prepare(&config)?;
            println!("{} instances in {}", ws.data.len(), Workspace::data_dir(&config).display());
        }
        Command::Train { variant: name, seed } => {
            let v = variant(name)?;
            let ws = Workspace::prepare(&config)?;
            let (params, history) = train_cell(&ws, v, *seed)?;
            let dir = cell_dir(&config, v, *seed);
            fs::create_dir_all(&dir)?;
            write_history(&dir, &history)?;
            params.write_checkpoint(fs::File::create(dir.join("checkpoint.tensors"))?)?;
            println!("checkpoint written to {}", dir.display());
        }
        Command::Eval { variant: name, seed } => {
            let v = variant(name)?;
            let ws = Workspace::prepare(&config)?;
            let dir = cell_dir(&config, v, *seed);
            let params = MlpParams::read_checkpoint(fs::File::open(dir.join("checkpoint.tensors"))?)?;
            let (row, timing) = eval_cell(&ws, v, *seed, &params)?;
            report::write_rows(&dir.join("eval.csv"), std::slice::from_ref(&row))?;
            report::write_rows(&dir.join("timing.csv"), std::slice::from_ref(&timing))?;
            println!(
                "{}: objective {:.4}, eq max {:.2e}, ineq max {:.2e}",
                v.name(),
                row.objective.unwrap_or(f64::NAN),
                row.eq_max.unwrap_or(f64::NAN),
                row.ineq_max.unwrap_or(f64::NAN)
            );
        }
        Command::Report => {
            let ws = Workspace::prepare(&config)?;
            let mut rows = Vec::new();
            let mut timings = Vec::new();
            if let Some((r, t)) = ws.reference_rows()? {
                rows.push(r);
                timings.push(t);
            }
            for v in config.parsed_variants()? {
                for &seed in &config.seeds {
                    let dir = cell_dir(&config, v, seed);
                    match report::read_rows::<EvalRow>(&dir.join("eval.csv")) {
                        Ok(r) => rows.extend(r),
                        Err(e) => rows.push(EvalRow::failed(v.name(), seed, format!("no result: {e}"))),
                    }
                    if let Ok(t) = report::read_rows::<TimingRow>(&dir.join("timing.csv")) {
                        timings.extend(t);
                    }
                }
            }
            let result = write_outputs(&config, rows, timings)?;
            print!("{}", fs::read_to_string(config.output.join("report.md"))?);
            if result.failed > 0 {
                return Err(BenchError::CellsFailed(result.failed));
            }
        }
        Command::Run => {
            let result = run_experiment(&config)?;
            print!("{}", fs::read_to_string(config.output.join("report.md"))?);
            if result.failed > 0 {
                return Err(BenchError::CellsFailed(result.failed));
            }
        }
        Command::Sweep { axis, values } => {
            let result = sweep_constraints(&config, SweepAxis::parse(axis)?, values)?;
            print!("{}", fs::read_to_string(config.output.join("sweep.md"))?);
            if result.failed > 0 {
                return Err(BenchError::CellsFailed(result.failed));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
