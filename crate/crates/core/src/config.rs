//! TOML experiment configuration.
//!
//! Every table rejects unknown keys. Parse failures carry the TOML line and
//! column; semantic failures name the offending dotted key.

use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::commit::CommitProfile;
use crate::cost::{CostModel, REFERENCE_SCALE};
use crate::error::{Error, Result};
use crate::metrics::RateBounds;
use crate::scheduler::{
    default_candidates, SchedulerParams, SchedulerPolicy, DEFAULT_EWMA_ALPHA, DEFAULT_HYSTERESIS, DEFAULT_MIN_OBSERVATIONS,
};
use crate::sim::{LoadMode, OracleSpec, Scenario, DEFAULT_BLOCK_SIZE, DEFAULT_MAX_BATCH};
use crate::types::WindowRule;
use crate::workload::{preset_commit_profile, read_trace_jsonl, ArrivalProcess, DatasetProfile, ModelVariant, PRESET_NAMES};

/// Every accepted key with a one-line description, as shown by `--help`.
pub const CONFIG_KEYS: &[(&str, &str)] = &[
    ("seed", "base seed for single runs (default 0)"),
    ("seeds", "seed set for sweeps and capacity probes; median P90 is taken (default [1, 2, 3])"),
    ("max_batch", "maximum decode batch size (default 256)"),
    ("block_size", "diffusion block size B (default 32)"),
    ("window_rule", "chunked window rule: in_block | out_block (default in_block)"),
    ("workload.dataset", "dataset preset: sharegpt | lmsys | longbench | gsm8k | humaneval | mbpp | ifeval"),
    ("workload.model", "model variant for tokens/step: sdar-8b | llada2-16b"),
    ("workload.trace_path", "JSON-lines trace {id, arrival_s, prompt_tokens, output_tokens} (load.mode = trace)"),
    ("workload.prompt_mean", "override the preset prompt length mean"),
    ("workload.prompt_std", "override the preset prompt length std"),
    ("workload.output_mean", "override the preset output length mean"),
    ("workload.output_std", "override the preset output length std"),
    ("load.mode", "open_loop | closed_loop | trace"),
    ("load.rate", "open loop arrival rate in req/s, > 0"),
    ("load.requests", "open loop request count"),
    ("load.arrival", "open loop arrival process: poisson | uniform"),
    ("load.concurrency", "closed loop batch size b"),
    ("load.total_requests", "closed loop requests issued before draining"),
    ("load.exclude_fraction", "open loop fraction of requests dropped from TPOT at each end (default 0.1)"),
    ("policy.policies", "policy labels: elastic | fixed_chunk:C | fixed_block:B | block_level_batch:B | autoregressive"),
    ("policy.candidates", "elastic chunk candidates, even sizes in [2, B] (default 2, 4, ..., B)"),
    ("policy.hysteresis_eps", "elastic switch threshold as a score fraction (default 0.05)"),
    ("scheduler.ewma_alpha", "estimator EWMA weight on history (default 0.95)"),
    ("scheduler.min_observations", "observations before the estimator leaves its prior (default 8)"),
    ("scheduler.warmup_iterations", "initial decode iterations forced to the full block (default 32)"),
    ("scheduler.prior_q", "decay of the estimator prior (default: commit q)"),
    ("commit.oracle", "stochastic | deterministic"),
    ("commit.q", "override the preset per-rank commit decay"),
    ("commit.jitter_sigma", "override the preset per-request rate jitter sigma"),
    ("commit.curve", "deterministic oracle: commits for window sizes 1, 2, ..."),
    ("cost.model_path", "fitted cost model JSON; replaces the inline constants"),
    ("cost.intercept_ms", "latency at zero tokens"),
    ("cost.slopes_us_per_token", "three segment slopes, nondecreasing"),
    ("cost.breakpoints", "two segment starts in tokens"),
    ("cost.seq_surcharge_us_per_token", "latency per context token of each batch member (default 0)"),
    ("sweep.batch_sizes", "closed loop batch axis (default 1, 2, 4, ..., 256)"),
    ("sweep.rates", "open loop rate axis in req/s"),
    ("sweep.requests_per_slot", "closed loop requests issued per batch slot (default 4)"),
    ("capacity.slo_ms", "P90 TPOT target (default: the dataset's SLO, else 50)"),
    ("capacity.rate_low", "lowest probed rate in req/s"),
    ("capacity.rate_high", "highest probed rate in req/s"),
    ("output.dir", "output directory (default out)"),
    ("output.dump_steps", "write per-step JSON lines from run"),
    ("output.dump_scores", "write elastic score tables from run"),
];

/// `--help` section listing every key.
pub fn keys_help() -> String {
    let width = CONFIG_KEYS.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
    let mut out = String::from("Config keys (TOML):\n");
    for (k, d) in CONFIG_KEYS {
        out.push_str(&format!("  {k:<width$}  {d}\n"));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub seeds: Vec<u64>,
    pub max_batch: u32,
    pub block_size: u32,
    pub window_rule: WindowRule,
    pub workload: WorkloadConfig,
    pub load: LoadConfig,
    pub policy: PolicyConfig,
    pub scheduler: SchedulerConfig,
    pub commit: CommitConfig,
    pub cost: CostConfig,
    pub sweep: SweepConfig,
    pub capacity: CapacityConfig,
    pub output: OutputConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            seeds: vec![1, 2, 3],
            max_batch: DEFAULT_MAX_BATCH,
            block_size: DEFAULT_BLOCK_SIZE,
            window_rule: WindowRule::InBlock,
            workload: WorkloadConfig::default(),
            load: LoadConfig::default(),
            policy: PolicyConfig::default(),
            scheduler: SchedulerConfig::default(),
            commit: CommitConfig::default(),
            cost: CostConfig::default(),
            sweep: SweepConfig::default(),
            capacity: CapacityConfig::default(),
            output: OutputConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorkloadConfig {
    pub dataset: String,
    pub model: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trace_path: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub prompt_mean: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub prompt_std: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_mean: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_std: Option<f64>,
}

impl Default for WorkloadConfig {
    fn default() -> Self {
        WorkloadConfig {
            dataset: "sharegpt".into(),
            model: ModelVariant::Sdar8b.name().into(),
            trace_path: None,
            prompt_mean: None,
            prompt_std: None,
            output_mean: None,
            output_std: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoadKind {
    OpenLoop,
    ClosedLoop,
    Trace,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoadConfig {
    pub mode: LoadKind,
    pub rate: f64,
    pub requests: usize,
    pub arrival: ArrivalProcess,
    pub concurrency: u32,
    pub total_requests: usize,
    pub exclude_fraction: f64,
}

impl Default for LoadConfig {
    fn default() -> Self {
        LoadConfig {
            mode: LoadKind::OpenLoop,
            rate: 2.0,
            requests: 500,
            arrival: ArrivalProcess::Poisson,
            concurrency: 16,
            total_requests: 64,
            exclude_fraction: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyConfig {
    pub policies: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub candidates: Option<Vec<u32>>,
    pub hysteresis_eps: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            policies: vec!["elastic".into(), "fixed_block:32".into(), "block_level_batch:32".into(), "autoregressive".into()],
            candidates: None,
            hysteresis_eps: DEFAULT_HYSTERESIS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SchedulerConfig {
    pub ewma_alpha: f64,
    pub min_observations: u64,
    pub warmup_iterations: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub prior_q: Option<f64>,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        SchedulerConfig { ewma_alpha: DEFAULT_EWMA_ALPHA, min_observations: DEFAULT_MIN_OBSERVATIONS, warmup_iterations: 32, prior_q: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleKind {
    #[default]
    Stochastic,
    Deterministic,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CommitConfig {
    pub oracle: OracleKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub q: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub jitter_sigma: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub curve: Option<Vec<u32>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CostConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model_path: Option<PathBuf>,
    pub intercept_ms: f64,
    pub slopes_us_per_token: [f64; 3],
    pub breakpoints: [f64; 2],
    pub seq_surcharge_us_per_token: f64,
}

impl Default for CostConfig {
    fn default() -> Self {
        let k = REFERENCE_SCALE;
        CostConfig {
            model_path: None,
            intercept_ms: 6.0 * k,
            slopes_us_per_token: [0.5 * k, 8.0 * k, 14.0 * k],
            breakpoints: [128.0, 512.0],
            seq_surcharge_us_per_token: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub batch_sizes: Vec<u32>,
    pub rates: Vec<f64>,
    pub requests_per_slot: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig { batch_sizes: (0..=8).map(|k| 1 << k).collect(), rates: vec![0.5, 1.0, 2.0, 4.0, 6.0, 8.0], requests_per_slot: 4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CapacityConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub slo_ms: Option<f64>,
    pub rate_low: f64,
    pub rate_high: f64,
}

impl Default for CapacityConfig {
    fn default() -> Self {
        CapacityConfig { slo_ms: None, rate_low: 0.05, rate_high: 200.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: PathBuf,
    pub dump_steps: bool,
    pub dump_scores: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig { dir: PathBuf::from("out"), dump_steps: false, dump_scores: false }
    }
}

fn bad<T>(key: &str, message: impl Into<String>) -> Result<T> {
    Err(Error::Config { key: key.into(), message: message.into() })
}

fn check_pos(key: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        bad(key, format!("must be finite and > 0, got {v}"))
    }
}

fn check_nonneg(key: &str, v: f64) -> Result<()> {
    if v >= 0.0 && v.is_finite() {
        Ok(())
    } else {
        bad(key, format!("must be finite and >= 0, got {v}"))
    }
}

impl ExperimentConfig {
    /// Parses TOML text. Relative paths stay as written.
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))
    }

    /// Reads, parses and validates a config file; relative paths inside it
    /// resolve against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut Option<PathBuf>| {
            if let Some(p) = p.as_mut() {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        };
        resolve(&mut cfg.workload.trace_path);
        resolve(&mut cfg.cost.model_path);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn model(&self) -> Result<ModelVariant> {
        ModelVariant::parse(&self.workload.model)
            .or_else(|_| bad("workload.model", format!("unknown model `{}` (expected sdar-8b or llada2-16b)", self.workload.model)))
    }

    pub fn policies(&self) -> Result<Vec<SchedulerPolicy>> {
        if self.policy.policies.is_empty() {
            return bad("policy.policies", "needs at least one policy");
        }
        let b = self.block_size;
        let mut out = Vec::with_capacity(self.policy.policies.len());
        for label in &self.policy.policies {
            let mut p = SchedulerPolicy::parse(label, b).or_else(|e| bad("policy.policies", e.to_string()))?;
            if let SchedulerPolicy::ElasticChunked { candidates, hysteresis_eps } = &mut p {
                *candidates = self.policy.candidates.clone().unwrap_or_else(|| default_candidates(b));
                *hysteresis_eps = self.policy.hysteresis_eps;
            }
            p.validate(b).or_else(|e| {
                let key = if matches!(p, SchedulerPolicy::ElasticChunked { .. }) { "policy.candidates" } else { "policy.policies" };
                bad(key, e.to_string())
            })?;
            out.push(p);
        }
        Ok(out)
    }

    pub fn slo(&self) -> Result<f64> {
        match self.capacity.slo_ms {
            Some(ms) => Ok(ms / 1e3),
            None => Ok(self.dataset()?.default_slo().unwrap_or(0.050)),
        }
    }

    pub fn rate_bounds(&self) -> RateBounds {
        RateBounds { low: self.capacity.rate_low, high: self.capacity.rate_high }
    }

    fn dataset(&self) -> Result<DatasetProfile> {
        let mut d = DatasetProfile::preset(&self.workload.dataset).or_else(|_| {
            bad("workload.dataset", format!("unknown dataset `{}` (expected one of {})", self.workload.dataset, PRESET_NAMES.join(", ")))
        })?;
        let w = &self.workload;
        if let Some(v) = w.prompt_mean {
            d.prompt.mean = v;
        }
        if let Some(v) = w.prompt_std {
            d.prompt.std = v;
        }
        if let Some(v) = w.output_mean {
            d.output.mean = v;
        }
        if let Some(v) = w.output_std {
            d.output.std = v;
        }
        Ok(d)
    }

    pub fn cost_model(&self) -> Result<CostModel> {
        let c = &self.cost;
        let model = match &c.model_path {
            Some(p) => {
                let f = fs::File::open(p).or_else(|e| bad("cost.model_path", format!("{}: {e}", p.display())))?;
                CostModel::read_json(BufReader::new(f)).or_else(|e| bad("cost.model_path", e.to_string()))?
            }
            None => {
                let s = c.slopes_us_per_token.map(|v| v * 1e-6);
                CostModel::from_breakpoints(c.intercept_ms * 1e-3, s, c.breakpoints).or_else(|e| bad("cost", e.to_string()))?
            }
        };
        if c.seq_surcharge_us_per_token != 0.0 {
            return model
                .with_seq_surcharge(c.seq_surcharge_us_per_token * 1e-6)
                .or_else(|e| bad("cost.seq_surcharge_us_per_token", e.to_string()));
        }
        Ok(model)
    }

    fn commit_profile(&self, model: ModelVariant) -> Result<CommitProfile> {
        let mut p = preset_commit_profile(&self.workload.dataset, model).or_else(|e| bad("workload.dataset", e.to_string()))?;
        if let Some(q) = self.commit.q {
            if !(0.0..1.0).contains(&q) {
                return bad("commit.q", format!("must lie in [0, 1), got {q}"));
            }
            p.q = q;
            p.calibration_note = "config override".into();
        }
        if let Some(s) = self.commit.jitter_sigma {
            check_nonneg("commit.jitter_sigma", s)?;
            p.rate_jitter_sigma = s;
        }
        Ok(p)
    }

    fn load_mode(&self) -> Result<LoadMode> {
        let l = &self.load;
        Ok(match l.mode {
            LoadKind::OpenLoop => LoadMode::OpenLoop { rate: l.rate, requests: l.requests, arrival: l.arrival },
            LoadKind::ClosedLoop => LoadMode::ClosedLoop { concurrency: l.concurrency, total_requests: l.total_requests },
            LoadKind::Trace => {
                let Some(path) = &self.workload.trace_path else {
                    return bad("workload.trace_path", "required when load.mode = \"trace\"");
                };
                let f = fs::File::open(path).or_else(|e| bad("workload.trace_path", format!("{}: {e}", path.display())))?;
                let requests = read_trace_jsonl(BufReader::new(f)).or_else(|e| bad("workload.trace_path", e.to_string()))?;
                LoadMode::Trace { requests }
            }
        })
    }

    /// Scenario for one policy.
    pub fn scenario(&self, policy: &SchedulerPolicy) -> Result<Scenario> {
        let model = self.model()?;
        let oracle = match self.commit.oracle {
            OracleKind::Stochastic => OracleSpec::Stochastic,
            OracleKind::Deterministic => match &self.commit.curve {
                Some(c) if !c.is_empty() => OracleSpec::Deterministic { curve: c.clone() },
                _ => return bad("commit.curve", "required and nonempty when commit.oracle = \"deterministic\""),
            },
        };
        let s = Scenario {
            load: self.load_mode()?,
            decode_mode: policy.decode_mode(self.block_size, self.window_rule),
            policy: policy.clone(),
            commit_profile: self.commit_profile(model)?,
            cost_model: self.cost_model()?,
            dataset: self.dataset()?,
            seed: self.seed,
            max_batch: self.max_batch,
            scheduler: SchedulerParams {
                ewma_alpha: self.scheduler.ewma_alpha,
                min_observations: self.scheduler.min_observations,
                warmup_iterations: self.scheduler.warmup_iterations,
                prior_q: self.scheduler.prior_q,
            },
            oracle,
            exclude_fraction: self.load.exclude_fraction,
        };
        s.validate().or_else(|e| bad("scenario", e.to_string()))?;
        Ok(s)
    }

    /// Key-level checks; run before any simulation.
    pub fn validate(&self) -> Result<()> {
        if self.block_size < 2 {
            return bad("block_size", format!("must be >= 2, got {}", self.block_size));
        }
        if self.max_batch == 0 {
            return bad("max_batch", "must be >= 1");
        }
        if self.seeds.is_empty() {
            return bad("seeds", "needs at least one seed");
        }
        self.model()?;
        let d = self.dataset()?;
        for (key, m) in [("workload.prompt", d.prompt), ("workload.output", d.output)] {
            check_pos(&format!("{key}_mean"), m.mean)?;
            check_nonneg(&format!("{key}_std"), m.std)?;
        }
        let l = &self.load;
        match l.mode {
            LoadKind::OpenLoop => {
                check_pos("load.rate", l.rate)?;
                if l.requests == 0 {
                    return bad("load.requests", "must be >= 1");
                }
            }
            LoadKind::ClosedLoop => {
                if l.concurrency == 0 {
                    return bad("load.concurrency", "must be >= 1");
                }
                if l.concurrency > self.max_batch {
                    return bad("load.concurrency", format!("{} exceeds max_batch {}", l.concurrency, self.max_batch));
                }
                if l.total_requests < l.concurrency as usize {
                    return bad("load.total_requests", "must be >= load.concurrency");
                }
            }
            LoadKind::Trace => {
                if self.workload.trace_path.is_none() {
                    return bad("workload.trace_path", "required when load.mode = \"trace\"");
                }
            }
        }
        if !(0.0..0.5).contains(&l.exclude_fraction) {
            return bad("load.exclude_fraction", format!("must lie in [0, 0.5), got {}", l.exclude_fraction));
        }
        self.policies()?;
        check_nonneg("policy.hysteresis_eps", self.policy.hysteresis_eps)?;
        let s = &self.scheduler;
        if !(s.ewma_alpha > 0.0 && s.ewma_alpha < 1.0) {
            return bad("scheduler.ewma_alpha", format!("must lie in (0, 1), got {}", s.ewma_alpha));
        }
        if let Some(q) = s.prior_q {
            if !(0.0..1.0).contains(&q) {
                return bad("scheduler.prior_q", format!("must lie in [0, 1), got {q}"));
            }
        }
        self.commit_profile(self.model()?)?;
        if self.cost.model_path.is_none() {
            check_nonneg("cost.intercept_ms", self.cost.intercept_ms)?;
        }
        self.cost_model()?;
        if self.sweep.batch_sizes.contains(&0) {
            return bad("sweep.batch_sizes", "batch sizes must be >= 1");
        }
        if let Some(r) = self.sweep.rates.iter().find(|r| !(**r > 0.0 && r.is_finite())) {
            return bad("sweep.rates", format!("rates must be > 0, got {r}"));
        }
        if self.sweep.requests_per_slot == 0 {
            return bad("sweep.requests_per_slot", "must be >= 1");
        }
        if let Some(ms) = self.capacity.slo_ms {
            check_pos("capacity.slo_ms", ms)?;
        }
        check_pos("capacity.rate_low", self.capacity.rate_low)?;
        if self.capacity.rate_high.partial_cmp(&self.capacity.rate_low) != Some(std::cmp::Ordering::Greater) {
            return bad("capacity.rate_high", "must exceed capacity.rate_low");
        }
        Ok(())
    }
}
