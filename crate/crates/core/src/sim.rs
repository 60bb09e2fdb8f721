//! Virtual-clock serving loop.
//!
//! Each loop turn injects arrivals up to the clock, admits FCFS up to
//! `max_batch`, then runs exactly one GPU iteration: a prefill for the
//! oldest admitted request still needing one, otherwise one decode
//! iteration over the batch. When nothing is runnable the clock jumps to
//! the next arrival.

use std::collections::VecDeque;
use std::ops::Range;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::commit::{sample_rate_multiplier, CommitOracle, CommitProfile, DeterministicOracle, StochasticOracle};
use crate::cost::CostModel;
use crate::decode::{ar_step, block_diffusion_step, streaming_step, StepOutcome};
use crate::error::{Error, Result};
use crate::metrics::{summarize, RunSummary};
use crate::par::Exec;
use crate::rng::{stream_rng, WORKLOAD_STREAM};
use crate::scheduler::{score_table, select_chunk, Batcher, Candidate, CommitEstimator, SchedulerParams, SchedulerPolicy};
use crate::types::{DecodeMode, IterationKind, IterationRecord, Request, RequestSummary, TokenState, WindowRule};
use crate::workload::{
    generate_trace_with, preset_commit_profile, sample_length, ArrivalProcess, DatasetProfile, ModelVariant, TraceRequest,
};

/// Consecutive zero-progress iterations tolerated from oracles that do not
/// guarantee progress (replay).
const STALL_LIMIT: u64 = 100_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum LoadMode {
    /// `requests` arrivals at `rate` req/s.
    OpenLoop { rate: f64, requests: usize, arrival: ArrivalProcess },
    /// Holds `concurrency` requests in flight until `total_requests` have
    /// been issued, then drains.
    ClosedLoop { concurrency: u32, total_requests: usize },
    /// Explicit request list.
    Trace { requests: Vec<TraceRequest> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OracleSpec {
    Stochastic,
    Deterministic { curve: Vec<u32> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub load: LoadMode,
    pub decode_mode: DecodeMode,
    pub policy: SchedulerPolicy,
    pub commit_profile: CommitProfile,
    pub cost_model: CostModel,
    pub dataset: DatasetProfile,
    pub seed: u64,
    pub max_batch: u32,
    pub scheduler: SchedulerParams,
    pub oracle: OracleSpec,
    /// Fraction of open-loop requests excluded from TPOT statistics at each
    /// end (by arrival order).
    pub exclude_fraction: f64,
}

pub const DEFAULT_MAX_BATCH: u32 = 256;
pub const DEFAULT_BLOCK_SIZE: u32 = 32;

impl Scenario {
    /// Preset dataset and model with default block size, cost model and
    /// scheduler settings.
    pub fn preset(dataset: &str, model: ModelVariant, policy: SchedulerPolicy, load: LoadMode) -> Result<Self> {
        let decode_mode = policy.decode_mode(DEFAULT_BLOCK_SIZE, WindowRule::InBlock);
        Ok(Scenario {
            load,
            decode_mode,
            policy,
            commit_profile: preset_commit_profile(dataset, model)?,
            cost_model: CostModel::reference(),
            dataset: DatasetProfile::preset(dataset)?,
            seed: 0,
            max_batch: DEFAULT_MAX_BATCH,
            scheduler: SchedulerParams::default(),
            oracle: OracleSpec::Stochastic,
            exclude_fraction: 0.1,
        })
    }

    pub fn block_size(&self) -> u32 {
        self.decode_mode.block_size().unwrap_or(DEFAULT_BLOCK_SIZE)
    }

    pub fn window_rule(&self) -> WindowRule {
        match self.decode_mode {
            DecodeMode::ChunkedStreaming { window_rule, .. } => window_rule,
            _ => WindowRule::InBlock,
        }
    }

    /// Same scenario under another policy; the decode mode follows.
    pub fn with_policy(&self, policy: SchedulerPolicy) -> Self {
        let mut s = self.clone();
        s.decode_mode = policy.decode_mode(self.block_size(), self.window_rule());
        s.policy = policy;
        s
    }

    pub fn with_load(&self, load: LoadMode) -> Self {
        Scenario { load, ..self.clone() }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Scenario { seed, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        self.decode_mode.validate()?;
        self.policy.validate(self.block_size())?;
        if self.policy.decode_mode(self.block_size(), self.window_rule()) != self.decode_mode {
            return Err(Error::InvalidScenario(format!(
                "policy {} does not drive decode mode {:?}",
                self.policy.label(),
                self.decode_mode
            )));
        }
        self.commit_profile.validate()?;
        self.cost_model.validate()?;
        self.dataset.validate()?;
        if self.max_batch == 0 {
            return Err(Error::InvalidScenario("max_batch must be >= 1".into()));
        }
        if !(0.0..0.5).contains(&self.exclude_fraction) {
            return Err(Error::InvalidScenario("exclude_fraction must lie in [0, 0.5)".into()));
        }
        match &self.load {
            LoadMode::OpenLoop { rate, requests, .. } => {
                if !(*rate > 0.0 && rate.is_finite()) {
                    return Err(Error::InvalidScenario(format!("arrival rate must be > 0, got {rate}")));
                }
                if *requests == 0 {
                    return Err(Error::InvalidScenario("open loop needs at least one request".into()));
                }
            }
            LoadMode::ClosedLoop { concurrency, total_requests } => {
                if *concurrency == 0 {
                    return Err(Error::InvalidScenario("closed-loop concurrency must be >= 1".into()));
                }
                if *concurrency > self.max_batch {
                    return Err(Error::InvalidScenario(format!(
                        "closed-loop concurrency {concurrency} exceeds max_batch {}",
                        self.max_batch
                    )));
                }
                if *total_requests < *concurrency as usize {
                    return Err(Error::InvalidScenario("total_requests must be >= concurrency".into()));
                }
            }
            LoadMode::Trace { requests } => {
                if requests.is_empty() {
                    return Err(Error::InvalidScenario("trace is empty".into()));
                }
                if requests.windows(2).any(|w| w[1].arrival_s < w[0].arrival_s) {
                    return Err(Error::InvalidScenario("trace arrivals must be sorted".into()));
                }
            }
        }
        let p = &self.scheduler;
        if !(p.ewma_alpha > 0.0 && p.ewma_alpha < 1.0) {
            return Err(Error::InvalidScenario(format!("ewma_alpha must lie in (0, 1), got {}", p.ewma_alpha)));
        }
        if let Some(q) = p.prior_q {
            if !(0.0..1.0).contains(&q) {
                return Err(Error::InvalidScenario(format!("prior_q must lie in [0, 1), got {q}")));
            }
        }
        if let OracleSpec::Deterministic { curve } = &self.oracle {
            if curve.is_empty() {
                return Err(Error::InvalidScenario("deterministic oracle curve is empty".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SimOptions {
    /// Record per-request step details.
    pub dump_steps: bool,
    /// Record elastic score tables.
    pub dump_scores: bool,
    /// Check token-state monotonicity and commit accounting every step.
    pub check_invariants: bool,
}

/// One JSON-lines row of the per-step dump.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepDump {
    pub request_id: u64,
    pub step: u64,
    pub kv_positions: Vec<u32>,
    pub masked_positions: Vec<u32>,
    pub commits: Vec<u32>,
}

/// Elastic scheduler decision for one decode iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreDump {
    pub iteration: u64,
    pub batch_size: u32,
    pub chosen: u32,
    pub scores: Vec<(u32, f64)>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunOutput {
    pub records: Vec<IterationRecord>,
    /// Completed requests, by id.
    pub requests: Vec<RequestSummary>,
    /// Records used for throughput: warm-up and drain excluded in closed
    /// loop, everything otherwise.
    pub measured: Range<usize>,
    /// Request ids eligible for TPOT statistics.
    pub tpot_ids: Range<u64>,
    pub steps: Vec<StepDump>,
    pub scores: Vec<ScoreDump>,
}

impl RunOutput {
    pub fn eligible_requests(&self) -> Vec<RequestSummary> {
        self.requests.iter().filter(|r| self.tpot_ids.contains(&r.id)).cloned().collect()
    }

    /// Summary over the measured records and eligible requests.
    pub fn summary(&self) -> Result<RunSummary> {
        summarize(&self.records[self.measured.clone()], &self.eligible_requests())
    }

    /// Chunk sizes of measured decode iterations.
    pub fn decode_chunks(&self) -> Vec<u32> {
        self.records[self.measured.clone()].iter().filter(|r| r.kind == IterationKind::Decode).map(|r| r.chunk_size).collect()
    }
}

/// Runs a scenario with the oracle it specifies.
pub fn run(scenario: &Scenario) -> Result<RunOutput> {
    run_with_options(scenario, SimOptions::default())
}

pub fn run_with_options(scenario: &Scenario, options: SimOptions) -> Result<RunOutput> {
    match &scenario.oracle {
        OracleSpec::Stochastic => {
            let mut o = StochasticOracle { profile: scenario.commit_profile.clone() };
            run_with_oracle(scenario, &mut o, options)
        }
        OracleSpec::Deterministic { curve } => {
            let mut o = DeterministicOracle { curve: curve.clone() };
            run_with_oracle(scenario, &mut o, options)
        }
    }
}

struct Arrivals {
    pending: VecDeque<TraceRequest>,
    closed: Option<ClosedLoopState>,
}

struct ClosedLoopState {
    issued: usize,
    total: usize,
    rng: ChaCha8Rng,
}

impl Arrivals {
    fn next_time(&self) -> Option<f64> {
        self.pending.front().map(|r| r.arrival_s)
    }
}

fn make_request(s: &Scenario, t: &TraceRequest, offset: u32) -> Result<Request> {
    let mut r = Request::new(t.id, t.arrival_s, t.prompt_tokens, t.output_tokens, s.seed)?.with_block_offset(offset);
    if !matches!(s.decode_mode, DecodeMode::Autoregressive) {
        r.rate_multiplier = sample_rate_multiplier(&s.commit_profile, &mut r.rng);
    }
    Ok(r)
}

fn closed_loop_request(s: &Scenario, st: &mut ClosedLoopState, at: f64) -> TraceRequest {
    let id = st.issued as u64;
    st.issued += 1;
    let prompt_tokens = sample_length(s.dataset.prompt.mean, s.dataset.prompt.std, &mut st.rng);
    let output_tokens = sample_length(s.dataset.output.mean, s.dataset.output.std, &mut st.rng);
    TraceRequest { id, arrival_s: at, prompt_tokens, output_tokens }
}

fn check_step(before: &[TokenState], req: &Request) -> Result<()> {
    if let Some(p) = before.iter().zip(&req.states).position(|(a, b)| b < a) {
        return Err(Error::InvariantViolation(format!("request {} position {p} moved backward", req.id)));
    }
    let decoded = req.states.iter().filter(|s| s.is_committed()).count() as u32;
    if decoded != req.committed || req.committed > req.output_tokens {
        return Err(Error::InvariantViolation(format!("request {}: {decoded} decoded states but committed = {}", req.id, req.committed)));
    }
    Ok(())
}

/// Runs a scenario with a caller-supplied oracle.
pub fn run_with_oracle(s: &Scenario, oracle: &mut dyn CommitOracle, options: SimOptions) -> Result<RunOutput> {
    s.validate()?;
    let block = s.block_size();
    let cost = &s.cost_model;

    let mut waiting: VecDeque<Request> = VecDeque::new();
    let mut arrivals = Arrivals { pending: VecDeque::new(), closed: None };
    let total_requests;
    match &s.load {
        LoadMode::OpenLoop { rate, requests, arrival } => {
            arrivals.pending = generate_trace_with(&s.dataset, *rate, *requests, s.seed, *arrival)?.into();
            total_requests = *requests;
        }
        LoadMode::Trace { requests } => {
            arrivals.pending = requests.iter().copied().collect();
            total_requests = requests.len();
        }
        LoadMode::ClosedLoop { concurrency, total_requests: total } => {
            let mut st = ClosedLoopState { issued: 0, total: *total, rng: stream_rng(s.seed, WORKLOAD_STREAM) };
            let b = *concurrency;
            for i in 0..b {
                let t = closed_loop_request(s, &mut st, 0.0);
                // Stagger start positions so the initial population does not
                // cross block boundaries in lockstep.
                let offset = if matches!(s.decode_mode, DecodeMode::Autoregressive) { 0 } else { (i * block / b) % block };
                waiting.push_back(make_request(s, &t, offset)?);
            }
            arrivals.closed = Some(st);
            total_requests = *total;
        }
    }

    let prior_q = s.scheduler.prior_q.unwrap_or(s.commit_profile.q);
    let mut estimator =
        CommitEstimator::new(block.max(2), s.scheduler.ewma_alpha, prior_q)?.with_min_observations(s.scheduler.min_observations);
    let mut batcher = Batcher::new(&s.policy);
    let mut running: Vec<Request> = Vec::new();
    let mut out = RunOutput::default();
    let mut clock = 0.0_f64;
    let mut decode_iterations: u64 = 0;
    let mut prev_chunk: Option<u32> = None;
    let mut measure_start: Option<usize> = None;
    let mut drain_start: Option<usize> = None;
    let mut stalled: u64 = 0;
    let warmup = s.scheduler.warmup_iterations;

    loop {
        while arrivals.next_time().is_some_and(|t| t <= clock) {
            let t = arrivals.pending.pop_front().expect("peeked");
            waiting.push_back(make_request(s, &t, 0)?);
        }
        while running.len() < s.max_batch as usize {
            match waiting.pop_front() {
                Some(r) => running.push(r),
                None => break,
            }
        }

        if let Some(r) = running.iter_mut().find(|r| r.prefill_done_time.is_none()) {
            let latency = cost.latency(u64::from(r.prompt_tokens));
            out.records.push(IterationRecord {
                clock_start: clock,
                latency,
                batch_size: 1,
                chunk_size: 0,
                computed_tokens: u64::from(r.prompt_tokens),
                committed_tokens: 0,
                kind: IterationKind::Prefill,
            });
            clock += latency;
            r.prefill_done_time = Some(clock);
            continue;
        }

        let runnable: Vec<Candidate> =
            running.iter().map(|r| Candidate { id: r.id, block_index: r.block_index, finished: r.is_finished() }).collect();
        let members = batcher.form_batch(&runnable, |id| runnable.iter().find(|c| c.id == id).copied());
        let active: Vec<usize> = members
            .iter()
            .filter(|m| !m.idle)
            .map(|m| running.iter().position(|r| r.id == m.id).expect("active member is running"))
            .collect();

        if active.is_empty() {
            if let Some(t) = arrivals.next_time() {
                clock = clock.max(t);
                continue;
            }
            if waiting.is_empty() && running.is_empty() {
                break;
            }
            return Err(Error::NonTerminating { clock, detail: "requests pending but none runnable".into() });
        }

        let b = active.len() as u32;
        let context: u64 = active.iter().map(|&i| u64::from(running[i].prompt_tokens) + u64::from(running[i].committed)).sum();
        let surcharge = cost.seq_surcharge * context as f64;
        let chunk = match &s.policy {
            SchedulerPolicy::ElasticChunked { candidates, hysteresis_eps } => {
                let c = if decode_iterations < warmup {
                    block
                } else {
                    select_chunk(&estimator, cost, b, candidates, *hysteresis_eps, prev_chunk, surcharge)?
                };
                if options.dump_scores {
                    out.scores.push(ScoreDump {
                        iteration: decode_iterations,
                        batch_size: b,
                        chosen: c,
                        scores: score_table(&estimator, cost, b, candidates, surcharge)?,
                    });
                }
                prev_chunk = Some(c);
                c
            }
            SchedulerPolicy::FixedChunk { c } => *c,
            SchedulerPolicy::FixedBlock { block_size } | SchedulerPolicy::BlockLevelBatch { block_size } => *block_size,
            SchedulerPolicy::Autoregressive => 0,
        };

        let backlog_before: usize = active.iter().map(|&i| running[i].backlog_len()).sum();
        let mut computed: u64 = 0;
        let mut committed: u64 = 0;
        let mut outcomes: Vec<(usize, StepOutcome)> = Vec::with_capacity(active.len());
        let mut first_commit: Vec<usize> = Vec::new();
        for &i in &active {
            let req = &mut running[i];
            let before = options.check_invariants.then(|| req.states.clone());
            let had_commits = req.committed > 0;
            let step_index = req.steps;
            let outcome = match s.decode_mode {
                DecodeMode::Autoregressive => {
                    let pos = req.frontier();
                    let summary = ar_step(req)?;
                    StepOutcome { summary, kv_positions: vec![], window: vec![pos], commits: vec![pos] }
                }
                DecodeMode::BlockDiffusion { block_size } => block_diffusion_step(req, oracle, block_size)?,
                DecodeMode::ChunkedStreaming { .. } => streaming_step(req, oracle, chunk, &s.decode_mode)?,
            };
            if let Some(before) = before {
                check_step(&before, req)?;
            }
            if !had_commits && req.committed > 0 {
                first_commit.push(i);
            }
            computed += u64::from(outcome.summary.computed);
            committed += u64::from(outcome.summary.committed);
            if options.dump_steps {
                out.steps.push(StepDump {
                    request_id: req.id,
                    step: step_index,
                    kv_positions: outcome.kv_positions.clone(),
                    masked_positions: outcome.window.clone(),
                    commits: outcome.commits.clone(),
                });
            }
            outcomes.push((i, outcome));
        }
        if computed == 0 {
            return Err(Error::DegenerateIteration);
        }

        let backlog_after: usize = active.iter().map(|&i| running[i].backlog_len()).sum();
        if committed == 0 && backlog_after >= backlog_before {
            stalled += 1;
            if oracle.guarantees_progress() || stalled > STALL_LIMIT {
                return Err(Error::NonTerminating {
                    clock,
                    detail: format!("decode iteration {decode_iterations} with batch {b} committed nothing and drained no KV backlog"),
                });
            }
        } else {
            stalled = 0;
        }

        if matches!(s.policy, SchedulerPolicy::ElasticChunked { .. }) {
            for (_, o) in &outcomes {
                if !o.window.is_empty() {
                    estimator.observe(o.window.len() as u32, &o.committed_ranks());
                }
            }
        }

        let latency = cost.latency(computed) + surcharge;
        out.records.push(IterationRecord {
            clock_start: clock,
            latency,
            batch_size: members.len() as u32,
            chunk_size: chunk,
            computed_tokens: computed,
            committed_tokens: committed,
            kind: IterationKind::Decode,
        });
        clock += latency;
        decode_iterations += 1;
        if decode_iterations == warmup {
            measure_start = Some(out.records.len());
        }

        for i in first_commit {
            running[i].first_token_time = Some(clock);
        }
        let mut finished: Vec<Request> = Vec::new();
        let mut k = 0;
        while k < running.len() {
            if running[k].is_finished() {
                let mut r = running.remove(k);
                r.finish_time = Some(clock);
                finished.push(r);
            } else {
                k += 1;
            }
        }
        for r in finished {
            out.requests.push(r.summary());
            if let Some(st) = arrivals.closed.as_mut() {
                if st.issued < st.total {
                    let t = closed_loop_request(s, st, clock);
                    waiting.push_back(make_request(s, &t, 0)?);
                } else if drain_start.is_none() {
                    drain_start = Some(out.records.len());
                }
            }
        }
    }

    out.requests.sort_by_key(|r| r.id);
    let n = out.records.len();
    out.measured = match s.load {
        LoadMode::ClosedLoop { .. } => {
            let start = measure_start.unwrap_or(0);
            let end = drain_start.unwrap_or(n).max(start);
            if end > start {
                start..end
            } else {
                0..n
            }
        }
        _ => 0..n,
    };
    let total = total_requests as u64;
    out.tpot_ids = match s.load {
        LoadMode::OpenLoop { .. } => {
            let cut = (s.exclude_fraction * total as f64).floor() as u64;
            cut..total - cut
        }
        _ => 0..total,
    };
    Ok(out)
}

/// One row of a closed-loop batch sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClosedLoopRow {
    pub policy: String,
    pub batch_size: u32,
    pub throughput: f64,
    pub mean_tu: f64,
    pub mean_chunk: f64,
    pub median_chunk: u32,
}

/// Closed-loop throughput for every (policy, batch size) cell. Each cell
/// issues `requests_per_slot * b` requests.
pub fn sweep_closed_loop(
    base: &Scenario,
    batch_sizes: &[u32],
    policies: &[SchedulerPolicy],
    requests_per_slot: usize,
    exec: Exec,
) -> Result<Vec<ClosedLoopRow>> {
    let cells: Vec<(SchedulerPolicy, u32)> = policies.iter().flat_map(|p| batch_sizes.iter().map(move |&b| (p.clone(), b))).collect();
    exec.map(&cells, |(p, b)| closed_loop_cell(base, p, *b, requests_per_slot)).into_iter().collect()
}

pub fn closed_loop_cell(base: &Scenario, policy: &SchedulerPolicy, b: u32, requests_per_slot: usize) -> Result<ClosedLoopRow> {
    let load = LoadMode::ClosedLoop { concurrency: b, total_requests: requests_per_slot.max(1) * b as usize };
    let mut sc = base.with_policy(policy.clone()).with_load(load);
    sc.max_batch = sc.max_batch.max(b);
    let out = run(&sc)?;
    let sum = summarize(&out.records[out.measured.clone()], &out.requests)?;
    Ok(ClosedLoopRow {
        policy: policy.label(),
        batch_size: b,
        throughput: sum.decode_throughput,
        mean_tu: sum.mean_tu,
        mean_chunk: sum.mean_chunk,
        median_chunk: sum.median_chunk,
    })
}

/// One row of an open-loop rate sweep (median P90 over seeds).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpenLoopRow {
    pub policy: String,
    pub rate: f64,
    pub tpot_p90: f64,
    pub throughput: f64,
    pub mean_batch: f64,
    pub median_chunk: u32,
}

pub fn sweep_open_loop(
    base: &Scenario,
    rates: &[f64],
    policies: &[SchedulerPolicy],
    seeds: &[u64],
    exec: Exec,
) -> Result<Vec<OpenLoopRow>> {
    let cells: Vec<(SchedulerPolicy, f64)> = policies.iter().flat_map(|p| rates.iter().map(move |&r| (p.clone(), r))).collect();
    exec.map(&cells, |(p, r)| open_loop_cell(base, p, *r, seeds)).into_iter().collect()
}

pub fn open_loop_cell(base: &Scenario, policy: &SchedulerPolicy, rate: f64, seeds: &[u64]) -> Result<OpenLoopRow> {
    let requests = match base.load {
        LoadMode::OpenLoop { requests, .. } => requests,
        _ => 500,
    };
    let arrival = match base.load {
        LoadMode::OpenLoop { arrival, .. } => arrival,
        _ => ArrivalProcess::Poisson,
    };
    let seeds: Vec<u64> = if seeds.is_empty() { vec![base.seed] } else { seeds.to_vec() };
    let mut summaries = Vec::with_capacity(seeds.len());
    for &seed in &seeds {
        let sc = base.with_policy(policy.clone()).with_load(LoadMode::OpenLoop { rate, requests, arrival }).with_seed(seed);
        summaries.push(run(&sc)?.summary()?);
    }
    let mut p90: Vec<f64> = summaries.iter().map(|s| s.tpot_p90).collect();
    p90.sort_by(f64::total_cmp);
    let k = summaries.len() as f64;
    let mut chunks: Vec<u32> = summaries.iter().map(|s| s.median_chunk).collect();
    chunks.sort_unstable();
    Ok(OpenLoopRow {
        policy: policy.label(),
        rate,
        tpot_p90: p90[(p90.len() - 1) / 2],
        throughput: summaries.iter().map(|s| s.decode_throughput).sum::<f64>() / k,
        mean_batch: summaries.iter().map(|s| s.mean_batch).sum::<f64>() / k,
        median_chunk: chunks[(chunks.len() - 1) / 2],
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trace(reqs: &[(u32, u32)]) -> LoadMode {
        LoadMode::Trace {
            requests: reqs
                .iter()
                .enumerate()
                .map(|(i, &(p, o))| TraceRequest { id: i as u64, arrival_s: 0.0, prompt_tokens: p, output_tokens: o })
                .collect(),
        }
    }

    #[test]
    fn single_ar_request_decodes_at_batch_one_latency() {
        let sc = Scenario::preset("sharegpt", ModelVariant::Sdar8b, SchedulerPolicy::Autoregressive, trace(&[(10, 50)])).unwrap();
        let out = run(&sc).unwrap();
        let decode: Vec<_> = out.records.iter().filter(|r| r.kind == IterationKind::Decode).collect();
        assert_eq!(decode.len(), 50);
        let total: f64 = decode.iter().map(|r| r.latency).sum();
        assert!((total - 50.0 * sc.cost_model.latency(1)).abs() < 1e-12);
        let r = &out.requests[0];
        assert_eq!(r.prefill_done_time, Some(sc.cost_model.latency(10)));
        assert!(r.first_token_time.unwrap() <= r.finish_time.unwrap());
    }

    #[test]
    fn prefill_runs_before_decode() {
        // Lands inside the first decode iteration, after the first prefill.
        let second = CostModel::reference().latency(5) * 1.2;
        let reqs = vec![
            TraceRequest { id: 0, arrival_s: 0.0, prompt_tokens: 5, output_tokens: 40 },
            TraceRequest { id: 1, arrival_s: second, prompt_tokens: 7, output_tokens: 40 },
        ];
        let sc = Scenario::preset(
            "sharegpt",
            ModelVariant::Sdar8b,
            SchedulerPolicy::FixedBlock { block_size: 32 },
            LoadMode::Trace { requests: reqs },
        )
        .unwrap();
        let out = run(&sc).unwrap();
        // Request 1 arrives during the first decode iteration and is
        // prefilled before the second one.
        let kinds: Vec<_> = out.records.iter().take(4).map(|r| r.kind).collect();
        assert_eq!(kinds, vec![IterationKind::Prefill, IterationKind::Decode, IterationKind::Prefill, IterationKind::Decode]);
        assert_eq!(out.records[3].batch_size, 2);
    }

    #[test]
    fn rerun_is_identical() {
        let load = LoadMode::OpenLoop { rate: 20.0, requests: 60, arrival: ArrivalProcess::Poisson };
        let sc = Scenario::preset("lmsys", ModelVariant::Sdar8b, SchedulerPolicy::elastic(32), load).unwrap().with_seed(7);
        let a = run(&sc).unwrap();
        let b = run(&sc).unwrap();
        assert_eq!(a.records, b.records);
        assert_eq!(a.requests, b.requests);
    }

    #[test]
    fn invalid_rate_is_rejected() {
        let load = LoadMode::OpenLoop { rate: 0.0, requests: 10, arrival: ArrivalProcess::Poisson };
        let sc = Scenario::preset("lmsys", ModelVariant::Sdar8b, SchedulerPolicy::elastic(32), load).unwrap();
        assert!(matches!(run(&sc), Err(Error::InvalidScenario(_))));
    }

    #[test]
    fn mismatched_policy_and_mode_rejected() {
        let mut sc = Scenario::preset("lmsys", ModelVariant::Sdar8b, SchedulerPolicy::elastic(32), trace(&[(1, 3)])).unwrap();
        sc.decode_mode = DecodeMode::Autoregressive;
        assert!(matches!(sc.validate(), Err(Error::InvalidScenario(_))));
    }

    #[test]
    fn closed_loop_replaces_finished_requests() {
        let load = LoadMode::ClosedLoop { concurrency: 4, total_requests: 12 };
        let sc = Scenario::preset("mbpp", ModelVariant::Sdar8b, SchedulerPolicy::FixedBlock { block_size: 32 }, load).unwrap();
        let out = run(&sc).unwrap();
        assert_eq!(out.requests.len(), 12);
        let max_batch = out.records.iter().filter(|r| r.kind == IterationKind::Decode).map(|r| r.batch_size).max().unwrap();
        assert_eq!(max_batch, 4);
        assert!(out.measured.start > 0 && out.measured.end <= out.records.len());
    }

    #[test]
    fn block_level_batch_idles_finished_members() {
        let load = LoadMode::ClosedLoop { concurrency: 8, total_requests: 24 };
        let sc = Scenario::preset("sharegpt", ModelVariant::Sdar8b, SchedulerPolicy::BlockLevelBatch { block_size: 32 }, load).unwrap();
        let out = run_with_options(&sc, SimOptions { check_invariants: true, ..Default::default() }).unwrap();
        // Some iterations compute fewer than batch * block tokens because
        // members idle.
        assert!(out.records.iter().filter(|r| r.kind == IterationKind::Decode).any(|r| r.computed_tokens < u64::from(r.batch_size) * 32));
        assert_eq!(out.requests.len(), 24);
    }

    #[test]
    fn low_rate_elastic_always_picks_largest_chunk() {
        let load = LoadMode::OpenLoop { rate: 0.05, requests: 20, arrival: ArrivalProcess::Poisson };
        let sc = Scenario::preset("sharegpt", ModelVariant::Sdar8b, SchedulerPolicy::elastic(32), load).unwrap();
        let out = run(&sc).unwrap();
        let chunks = out.decode_chunks();
        assert!(!chunks.is_empty());
        assert!(chunks.iter().all(|&c| c == 32), "{:?}", chunks.iter().filter(|&&c| c != 32).count());
    }

    #[test]
    fn step_dump_matches_records() {
        let sc = Scenario::preset("mbpp", ModelVariant::Sdar8b, SchedulerPolicy::FixedChunk { c: 8 }, trace(&[(3, 20), (4, 9)])).unwrap();
        let out = run_with_options(&sc, SimOptions { dump_steps: true, dump_scores: false, check_invariants: true }).unwrap();
        let computed: usize = out.steps.iter().map(|d| d.kv_positions.len() + d.masked_positions.len()).sum();
        let recorded: u64 = out.records.iter().filter(|r| r.kind == IterationKind::Decode).map(|r| r.computed_tokens).sum();
        assert_eq!(computed as u64, recorded);
    }
}
