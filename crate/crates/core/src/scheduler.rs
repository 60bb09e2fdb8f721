//! Batching policies and the elastic chunk-size selector.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::cost::CostModel;
use crate::error::{Error, Result};
use crate::types::{DecodeMode, WindowRule};

pub const DEFAULT_EWMA_ALPHA: f64 = 0.95;
pub const DEFAULT_MIN_OBSERVATIONS: u64 = 8;
pub const DEFAULT_HYSTERESIS: f64 = 0.05;
const FIXED_POINT_ITERATIONS: usize = 10;
const FIXED_POINT_DAMPING: f64 = 0.5;

/// Online estimate of per-rank commit probabilities.
///
/// `hist[j]` tracks how often window rank `j` commits. Until
/// `min_observations` steps have been seen the estimator answers from a
/// geometric prior `q^j` instead.
#[derive(Debug, Clone, PartialEq)]
pub struct CommitEstimator {
    hist: Vec<f64>,
    prior: Vec<f64>,
    alpha: f64,
    observations: u64,
    min_observations: u64,
}

impl CommitEstimator {
    pub fn new(block_size: u32, alpha: f64, prior_q: f64) -> Result<Self> {
        if block_size < 2 {
            return Err(Error::InvalidScenario(format!("estimator block size must be >= 2, got {block_size}")));
        }
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::InvalidScenario(format!("EWMA alpha must lie in (0, 1), got {alpha}")));
        }
        if !(0.0..1.0).contains(&prior_q) {
            return Err(Error::InvalidScenario(format!("prior q must lie in [0, 1), got {prior_q}")));
        }
        let prior = (0..block_size).map(|j| prior_q.powi(j as i32)).collect();
        Ok(CommitEstimator {
            hist: vec![0.0; block_size as usize],
            prior,
            alpha,
            observations: 0,
            min_observations: DEFAULT_MIN_OBSERVATIONS,
        })
    }

    pub fn with_min_observations(mut self, n: u64) -> Self {
        self.min_observations = n;
        self
    }

    pub fn observations(&self) -> u64 {
        self.observations
    }

    /// Raw EWMA histogram.
    pub fn hist(&self) -> &[f64] {
        &self.hist
    }

    pub fn is_warm(&self) -> bool {
        self.observations >= self.min_observations
    }

    fn active(&self) -> &[f64] {
        if self.is_warm() {
            &self.hist
        } else {
            &self.prior
        }
    }

    /// Records one step: a window of `window_size` positions in which the
    /// given ranks committed. Ranks at or beyond the window are ignored.
    pub fn observe(&mut self, window_size: u32, committed_ranks: &[u32]) {
        let w = (window_size as usize).min(self.hist.len());
        let mut hit = vec![false; w];
        for &r in committed_ranks {
            if let Some(h) = hit.get_mut(r as usize) {
                *h = true;
            }
        }
        let a = self.alpha;
        for (h, &x) in self.hist[..w].iter_mut().zip(&hit) {
            *h = a * *h + (1.0 - a) * if x { 1.0 } else { 0.0 };
        }
        self.observations += 1;
    }

    /// `F(w) = sum_{j<w} hist[j]` over the active histogram.
    pub fn prefix(&self, w: u32) -> f64 {
        let h = self.active();
        h[..(w as usize).min(h.len())].iter().sum()
    }

    /// Steady-state commits per step at chunk size `c`.
    ///
    /// In steady state last step's commits occupy this step's KV slots, so
    /// the window is `c - N` and `N = F(c - N)`. Solved by damped iteration.
    pub fn expected_commits(&self, c: u32) -> Result<f64> {
        if c < 2 {
            return Err(Error::ChunkTooSmall(c));
        }
        let cap = f64::from(c - 1);
        let mut n = self.prefix(c).min(cap);
        for _ in 0..FIXED_POINT_ITERATIONS {
            let window = (f64::from(c) - n.round()).max(0.0) as u32;
            n = (FIXED_POINT_DAMPING * n + (1.0 - FIXED_POINT_DAMPING) * self.prefix(window)).clamp(0.0, cap);
        }
        Ok(n)
    }
}

/// Chunk candidates `2, 4, ..., block_size`.
pub fn default_candidates(block_size: u32) -> Vec<u32> {
    (1..=block_size / 2).map(|k| 2 * k).collect()
}

/// `N(c) * b / latency(b * c)`.
pub fn chunk_score(est: &CommitEstimator, cost: &CostModel, batch_size: u32, chunk: u32, extra_latency: f64) -> Result<f64> {
    let n = est.expected_commits(chunk)?;
    let t = cost.latency(u64::from(batch_size) * u64::from(chunk)) + extra_latency;
    Ok(n * f64::from(batch_size) / t)
}

/// Scores for every candidate, in candidate order.
pub fn score_table(
    est: &CommitEstimator,
    cost: &CostModel,
    batch_size: u32,
    candidates: &[u32],
    extra_latency: f64,
) -> Result<Vec<(u32, f64)>> {
    candidates.iter().map(|&c| Ok((c, chunk_score(est, cost, batch_size, c, extra_latency)?))).collect()
}

/// Picks the chunk size maximizing commit throughput for a batch of `b`.
///
/// Ties go to the smaller chunk. The previous choice is kept unless the best
/// score beats it by more than the factor `1 + hysteresis_eps`; a previous
/// choice outside `candidates` is never kept.
/// `extra_latency` is added to every latency (e.g. a context surcharge that
/// does not depend on the chunk).
pub fn select_chunk(
    est: &CommitEstimator,
    cost: &CostModel,
    batch_size: u32,
    candidates: &[u32],
    hysteresis_eps: f64,
    previous: Option<u32>,
    extra_latency: f64,
) -> Result<u32> {
    if candidates.is_empty() {
        return Err(Error::NoCandidates);
    }
    let b = batch_size.max(1);
    let mut sorted = candidates.to_vec();
    sorted.sort_unstable();
    let mut best = (sorted[0], chunk_score(est, cost, b, sorted[0], extra_latency)?);
    for &c in &sorted[1..] {
        let s = chunk_score(est, cost, b, c, extra_latency)?;
        if s > best.1 {
            best = (c, s);
        }
    }
    match previous {
        // Only a previous choice that is still a candidate can be held.
        Some(p) if p != best.0 && sorted.binary_search(&p).is_ok() => {
            let prev_score = chunk_score(est, cost, b, p, extra_latency)?;
            if best.1 > prev_score * (1.0 + hysteresis_eps) {
                Ok(best.0)
            } else {
                Ok(p)
            }
        }
        _ => Ok(best.0),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SchedulerPolicy {
    ElasticChunked {
        candidates: Vec<u32>,
        hysteresis_eps: f64,
    },
    FixedChunk {
        c: u32,
    },
    /// Block diffusion with iteration-level batching.
    FixedBlock {
        block_size: u32,
    },
    /// Block diffusion whose batch re-forms only between blocks.
    BlockLevelBatch {
        block_size: u32,
    },
    Autoregressive,
}

impl SchedulerPolicy {
    pub fn elastic(block_size: u32) -> Self {
        SchedulerPolicy::ElasticChunked { candidates: default_candidates(block_size), hysteresis_eps: DEFAULT_HYSTERESIS }
    }

    pub fn validate(&self, block_size: u32) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidScenario(m));
        match self {
            SchedulerPolicy::ElasticChunked { candidates, hysteresis_eps } => {
                if candidates.is_empty() {
                    return Err(Error::NoCandidates);
                }
                if let Some(c) = candidates.iter().find(|&&c| c < 2 || c % 2 != 0 || c > block_size) {
                    return bad(format!("chunk candidate {c} must be even and within [2, {block_size}]"));
                }
                if !(hysteresis_eps.is_finite() && *hysteresis_eps >= 0.0) {
                    return bad(format!("hysteresis must be finite and >= 0, got {hysteresis_eps}"));
                }
                Ok(())
            }
            SchedulerPolicy::FixedChunk { c } if *c < 2 => Err(Error::ChunkTooSmall(*c)),
            SchedulerPolicy::FixedChunk { c } if *c > block_size => bad(format!("chunk {c} exceeds block size {block_size}")),
            SchedulerPolicy::FixedBlock { block_size: b } | SchedulerPolicy::BlockLevelBatch { block_size: b } if *b < 2 => {
                bad(format!("block size must be >= 2, got {b}"))
            }
            _ => Ok(()),
        }
    }

    /// Decode mode this policy drives.
    pub fn decode_mode(&self, block_size: u32, window_rule: WindowRule) -> DecodeMode {
        match self {
            SchedulerPolicy::ElasticChunked { .. } | SchedulerPolicy::FixedChunk { .. } => {
                DecodeMode::ChunkedStreaming { block_size, window_rule }
            }
            SchedulerPolicy::FixedBlock { block_size } | SchedulerPolicy::BlockLevelBatch { block_size } => {
                DecodeMode::BlockDiffusion { block_size: *block_size }
            }
            SchedulerPolicy::Autoregressive => DecodeMode::Autoregressive,
        }
    }

    /// Short label used in tables and file names.
    pub fn label(&self) -> String {
        match self {
            SchedulerPolicy::ElasticChunked { .. } => "elastic".into(),
            SchedulerPolicy::FixedChunk { c } => format!("fixed_chunk:{c}"),
            SchedulerPolicy::FixedBlock { block_size } => format!("fixed_block:{block_size}"),
            SchedulerPolicy::BlockLevelBatch { block_size } => format!("block_level_batch:{block_size}"),
            SchedulerPolicy::Autoregressive => "autoregressive".into(),
        }
    }

    /// Parses a label such as `elastic`, `fixed_chunk:8` or `fixed_block`
    /// (block size defaults to `block_size`).
    pub fn parse(label: &str, block_size: u32) -> Result<Self> {
        let (name, arg) = match label.split_once(':') {
            Some((n, a)) => {
                let v = a.trim().parse::<u32>().map_err(|_| Error::InvalidScenario(format!("bad policy argument in `{label}`")))?;
                (n.trim(), Some(v))
            }
            None => (label.trim(), None),
        };
        let policy = match (name, arg) {
            ("elastic", None) => SchedulerPolicy::elastic(block_size),
            ("fixed_chunk", Some(c)) => SchedulerPolicy::FixedChunk { c },
            ("fixed_block", b) => SchedulerPolicy::FixedBlock { block_size: b.unwrap_or(block_size) },
            ("block_level_batch", b) => SchedulerPolicy::BlockLevelBatch { block_size: b.unwrap_or(block_size) },
            ("autoregressive" | "ar", None) => SchedulerPolicy::Autoregressive,
            _ => {
                return Err(Error::InvalidScenario(format!(
                    "unknown policy `{label}` (expected elastic, fixed_chunk:<c>, fixed_block[:<B>], block_level_batch[:<B>] or autoregressive)"
                )))
            }
        };
        Ok(policy)
    }
}

impl fmt::Display for SchedulerPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

impl FromStr for SchedulerPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SchedulerPolicy::parse(s, 32)
    }
}

/// Decode-batch membership.
///
/// Iteration-level policies take every runnable request each iteration.
/// Block-level batching freezes the member set until every member has
/// finished the block it was on when the batch formed.
#[derive(Debug, Clone, Default)]
pub struct Batcher {
    block_level: bool,
    /// (request id, block index at formation).
    frozen: Vec<(u64, u32)>,
}

/// What the batcher needs to know about one runnable request.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Candidate {
    pub id: u64,
    pub block_index: u32,
    pub finished: bool,
}

/// One member of the decode batch for the next iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Member {
    pub id: u64,
    /// Idle members stay in a frozen batch but compute nothing.
    pub idle: bool,
}

impl Batcher {
    pub fn new(policy: &SchedulerPolicy) -> Self {
        Batcher { block_level: matches!(policy, SchedulerPolicy::BlockLevelBatch { .. }), frozen: Vec::new() }
    }

    /// Membership for the next decode iteration.
    ///
    /// `runnable` lists prefilled requests in admission order; `lookup`
    /// reports the current state of any request id, including ones that
    /// finished since the batch formed (None once forgotten).
    pub fn form_batch(&mut self, runnable: &[Candidate], lookup: impl Fn(u64) -> Option<Candidate>) -> Vec<Member> {
        if !self.block_level {
            return runnable.iter().filter(|c| !c.finished).map(|c| Member { id: c.id, idle: false }).collect();
        }
        let done = |&(id, block): &(u64, u32)| match lookup(id) {
            Some(c) => c.finished || c.block_index > block,
            None => true,
        };
        if self.frozen.is_empty() || self.frozen.iter().all(done) {
            self.frozen = runnable.iter().filter(|c| !c.finished).map(|c| (c.id, c.block_index)).collect();
        }
        self.frozen.iter().map(|m| Member { id: m.0, idle: done(m) }).collect()
    }

    pub fn is_block_level(&self) -> bool {
        self.block_level
    }
}

/// Load-level settings of the elastic scheduler.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchedulerParams {
    pub ewma_alpha: f64,
    pub min_observations: u64,
    /// Decode iterations at the start of a run forced to `c = block_size`.
    pub warmup_iterations: u64,
    /// Prior decay for the cold estimator; the commit profile's q if unset.
    pub prior_q: Option<f64>,
}

impl Default for SchedulerParams {
    fn default() -> Self {
        SchedulerParams { ewma_alpha: DEFAULT_EWMA_ALPHA, min_observations: DEFAULT_MIN_OBSERVATIONS, warmup_iterations: 32, prior_q: None }
    }
}
