//! Command-line experiment runner.
//!
//! Exit codes: 0 success, 1 simulation or model error, 2 usage or config
//! error.

use std::fs;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::Serialize;

use elastic_sim::config::{keys_help, ExperimentConfig};
use elastic_sim::cost::{fit_profile, read_profile_csv, ProfileSample};
use elastic_sim::metrics::{slo_capacity, RunSummary};
use elastic_sim::par::Exec;
use elastic_sim::scheduler::SchedulerPolicy;
use elastic_sim::sim::{closed_loop_cell, open_loop_cell, run_with_options, SimOptions};
use elastic_sim::types::write_iterations_csv;
use elastic_sim::Error;

#[derive(Parser)]
#[command(name = "elastic-sim", version, about = "Diffusion-LLM serving simulator with elastic chunk scheduling")]
struct Cli {
    /// TOML experiment config; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every simulation (replaces `seed` and `seeds`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for sweeps and multi-seed probes.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Output directory (replaces `output.dir`).
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one simulation; writes summary.json and iterations.csv.
    Run {
        /// Policy label; defaults to the first entry of `policy.policies`.
        #[arg(long)]
        policy: Option<String>,
    },
    /// Sweep batch size (closed loop) or arrival rate (open loop) for every
    /// configured policy; writes a long-format CSV.
    Sweep {
        axis: Axis,
        /// Comma-separated axis values; defaults to `sweep.batch_sizes` or
        /// `sweep.rates`.
        #[arg(long, value_delimiter = ',')]
        values: Vec<f64>,
        /// Keep cells already finished by an earlier run.
        #[arg(long)]
        resume: bool,
    },
    /// Fit a cost model to a profile CSV (`x,latency_ms`) and write its JSON.
    Calibrate {
        profile: PathBuf,
        /// Output JSON path; defaults to `<out-dir>/cost_model.json`.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Highest arrival rate meeting the P90 TPOT SLO, per policy.
    Capacity {
        /// SLO in milliseconds; defaults to `capacity.slo_ms`.
        #[arg(long)]
        slo: Option<f64>,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Axis {
    Batch,
    Rate,
}

impl Axis {
    fn name(self) -> &'static str {
        match self {
            Axis::Batch => "batch",
            Axis::Rate => "rate",
        }
    }
}

/// Error paired with its exit code.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config { .. } | Error::Parse(_) => 2,
            _ => 1,
        };
        Failure { code, message: e.to_string() }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure { code: 2, message: message.into() }
}

fn io(path: &Path, e: impl std::fmt::Display) -> Failure {
    Failure { code: 1, message: format!("{}: {e}", path.display()) }
}

fn main() -> ExitCode {
    let matches = Cli::command().after_help(keys_help()).get_matches();
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), Failure> {
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            return Err(usage("--jobs must be >= 1"));
        }
        rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global().map_err(|e| usage(e.to_string()))?;
    }
    if let Command::Calibrate { profile, output } = &cli.command {
        let out = output.clone().unwrap_or_else(|| cli.out_dir.clone().unwrap_or_else(|| "out".into()).join("cost_model.json"));
        return calibrate(profile, &out);
    }
    let cfg = load_config(&cli)?;
    let out_dir = cfg.output.dir.clone();
    fs::create_dir_all(&out_dir).map_err(|e| io(&out_dir, e))?;
    match cli.command {
        Command::Run { policy } => cmd_run(&cfg, policy.as_deref(), &out_dir),
        Command::Sweep { axis, values, resume } => cmd_sweep(&cfg, axis, values, resume, &out_dir),
        Command::Capacity { slo } => cmd_capacity(&cfg, slo, &out_dir),
        Command::Calibrate { .. } => unreachable!("handled above"),
    }
}

/// Any failure while loading the config is a config error.
fn load_config(cli: &Cli) -> Result<ExperimentConfig, Failure> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p).map_err(|e| usage(format!("{}: {e}", p.display())))?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
        cfg.seeds = vec![s];
    }
    if let Some(d) = &cli.out_dir {
        cfg.output.dir = d.clone();
    }
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    Ok(cfg)
}

/// Writes via a temporary sibling and a rename so readers never see a
/// partial file.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), Failure> {
    let tmp = path.with_extension(format!("{}.tmp", path.extension().and_then(|e| e.to_str()).unwrap_or("")));
    fs::write(&tmp, bytes).map_err(|e| io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Failure> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), Failure> {
    let mut buf = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut buf, r).expect("serializable");
        buf.push(b'\n');
    }
    write_atomic(path, &buf)
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), Failure> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| io(path, e))?;
    }
    let buf = w.into_inner().map_err(|e| io(path, e))?;
    write_atomic(path, &buf)
}

#[derive(Serialize)]
struct RunReport<'a> {
    policy: String,
    seed: u64,
    dataset: &'a str,
    model: &'a str,
    #[serde(flatten)]
    summary: RunSummary,
}

fn cmd_run(cfg: &ExperimentConfig, label: Option<&str>, out_dir: &Path) -> Result<(), Failure> {
    // Route --policy through the config so elastic picks up its candidates.
    let policy = match label {
        Some(l) => {
            let mut one = cfg.clone();
            one.policy.policies = vec![l.to_string()];
            one.policies().map_err(|e| usage(format!("--policy: {e}")))?.remove(0)
        }
        None => cfg.policies()?.remove(0),
    };
    let scenario = cfg.scenario(&policy)?;
    let options = SimOptions { dump_steps: cfg.output.dump_steps, dump_scores: cfg.output.dump_scores, check_invariants: false };
    let out = run_with_options(&scenario, options)?;
    let summary = out.summary()?;

    let mut csv = Vec::new();
    write_iterations_csv(&out.records, &mut csv)?;
    write_atomic(&out_dir.join("iterations.csv"), &csv)?;
    if cfg.output.dump_steps {
        write_jsonl(&out_dir.join("steps.jsonl"), &out.steps)?;
    }
    if cfg.output.dump_scores {
        write_jsonl(&out_dir.join("scores.jsonl"), &out.scores)?;
    }
    let report = RunReport { policy: policy.label(), seed: cfg.seed, dataset: &cfg.workload.dataset, model: &cfg.workload.model, summary };
    write_json(&out_dir.join("summary.json"), &report)?;
    println!("{}", serde_json::to_string(&report).expect("serializable"));
    Ok(())
}

/// One (policy, axis value) cell of a sweep.
struct Cell {
    policy: SchedulerPolicy,
    value: f64,
    path: PathBuf,
}

fn cell_file(dir: &Path, policy: &SchedulerPolicy, value: f64) -> PathBuf {
    dir.join(format!("{}_{value}.json", policy.label().replace(':', "-")))
}

fn read_cell<T: DeserializeOwned>(path: &Path) -> Option<T> {
    let f = fs::File::open(path).ok()?;
    serde_json::from_reader(BufReader::new(f)).ok()
}

fn cmd_sweep(cfg: &ExperimentConfig, axis: Axis, values: Vec<f64>, resume: bool, out_dir: &Path) -> Result<(), Failure> {
    let values: Vec<f64> = if !values.is_empty() {
        values
    } else if axis == Axis::Batch {
        cfg.sweep.batch_sizes.iter().map(|&b| f64::from(b)).collect()
    } else {
        cfg.sweep.rates.clone()
    };
    for &v in &values {
        let ok = match axis {
            Axis::Batch => v >= 1.0 && v.fract() == 0.0 && v <= f64::from(u32::MAX),
            Axis::Rate => v > 0.0 && v.is_finite(),
        };
        if !ok {
            return Err(usage(format!("invalid {} value {v}", axis.name())));
        }
    }
    let policies = cfg.policies()?;
    let cells_dir = out_dir.join(format!("sweep_{}_cells", axis.name()));
    fs::create_dir_all(&cells_dir).map_err(|e| io(&cells_dir, e))?;
    let cells: Vec<Cell> = policies
        .iter()
        .flat_map(|p| values.iter().map(|&v| Cell { policy: p.clone(), value: v, path: cell_file(&cells_dir, p, v) }))
        .collect();
    let table = out_dir.join(format!("sweep_{}.csv", axis.name()));
    match axis {
        Axis::Batch => {
            let base = cfg.scenario(&policies[0])?;
            let rows = sweep_cells(&cells, resume, |c| closed_loop_cell(&base, &c.policy, c.value as u32, cfg.sweep.requests_per_slot))?;
            write_csv(&table, &rows)?;
        }
        Axis::Rate => {
            let base = cfg.scenario(&policies[0])?;
            let rows = sweep_cells(&cells, resume, |c| open_loop_cell(&base, &c.policy, c.value, &cfg.seeds))?;
            write_csv(&table, &rows)?;
        }
    }
    println!("{}", table.display());
    Ok(())
}

/// Runs every cell not already on disk (with `resume`) in parallel, writing
/// each result as soon as it finishes.
fn sweep_cells<R, F>(cells: &[Cell], resume: bool, f: F) -> Result<Vec<R>, Failure>
where
    R: Serialize + DeserializeOwned + Send,
    F: Fn(&Cell) -> elastic_sim::Result<R> + Sync + Send,
{
    let results = Exec::Parallel.map(cells, |c| -> Result<R, Failure> {
        if resume {
            if let Some(row) = read_cell(&c.path) {
                return Ok(row);
            }
        }
        let row = f(c)?;
        write_json(&c.path, &row)?;
        eprintln!("done {} {}", c.policy.label(), c.value);
        Ok(row)
    });
    results.into_iter().collect()
}

fn calibrate(profile: &Path, out: &Path) -> Result<(), Failure> {
    let f = fs::File::open(profile).map_err(|e| io(profile, e))?;
    let samples: Vec<ProfileSample> = read_profile_csv(BufReader::new(f))?;
    let model = fit_profile(&samples)?;
    let mut stdout = std::io::stdout().lock();
    for s in model.segments() {
        let _ =
            writeln!(stdout, "segment x_start={} slope_us_per_token={:.6} intercept_ms={:.6}", s.x_start, s.slope * 1e6, s.intercept * 1e3);
    }
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
    }
    write_atomic(out, model.to_json().as_bytes())?;
    let _ = writeln!(stdout, "{}", out.display());
    Ok(())
}

#[derive(Serialize)]
struct CapacityRow {
    policy: String,
    slo_ms: f64,
    capacity: Option<f64>,
    probes: usize,
}

fn cmd_capacity(cfg: &ExperimentConfig, slo_ms: Option<f64>, out_dir: &Path) -> Result<(), Failure> {
    let slo = match slo_ms {
        Some(ms) if ms > 0.0 => ms / 1e3,
        Some(ms) => return Err(usage(format!("--slo must be > 0, got {ms}"))),
        None => cfg.slo()?,
    };
    let mut rows = Vec::new();
    let mut failure = None;
    for policy in cfg.policies()? {
        let template = cfg.scenario(&policy)?;
        match slo_capacity(&template, slo, cfg.rate_bounds(), &cfg.seeds, Exec::Parallel) {
            Ok(r) => {
                println!("{}\t{:.4}", policy.label(), r.rate);
                rows.push(CapacityRow { policy: policy.label(), slo_ms: slo * 1e3, capacity: Some(r.rate), probes: r.probes.len() });
            }
            Err(e @ Error::SloInfeasible { .. }) => {
                println!("{}\tinfeasible", policy.label());
                eprintln!("{}: {e}", policy.label());
                rows.push(CapacityRow { policy: policy.label(), slo_ms: slo * 1e3, capacity: None, probes: 1 });
                failure.get_or_insert(Failure::from(e));
            }
            Err(e) => return Err(e.into()),
        }
    }
    write_csv(&out_dir.join("capacity.csv"), &rows)?;
    failure.map_or(Ok(()), Err)
}
