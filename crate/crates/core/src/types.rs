//! Shared domain vocabulary: token states, requests, decode modes and
//! per-iteration records.

use std::collections::VecDeque;
use std::fmt;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Lifecycle of one output position.
///
/// Ordered: a position only ever moves to a state that compares greater.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TokenState {
    /// Not yet committed; fed to the model as a mask token.
    Masked,
    /// Committed, but its KV entry was computed from a mask input and must be
    /// recomputed from the committed token.
    DecodedUncached,
    /// Committed with a KV entry computed from the committed token.
    DecodedCached,
}

impl TokenState {
    pub fn is_committed(self) -> bool {
        self != TokenState::Masked
    }

    /// Transitions are monotone; staying put is allowed.
    pub fn can_become(self, next: TokenState) -> bool {
        next >= self
    }
}

/// Which masked positions a streaming chunk may draw from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowRule {
    /// Only masked positions of the current block.
    InBlock,
    /// Up to `block_size` masked positions, crossing block boundaries.
    OutBlock,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DecodeMode {
    Autoregressive,
    BlockDiffusion { block_size: u32 },
    ChunkedStreaming { block_size: u32, window_rule: WindowRule },
}

impl DecodeMode {
    pub fn block_size(&self) -> Option<u32> {
        match *self {
            DecodeMode::Autoregressive => None,
            DecodeMode::BlockDiffusion { block_size } | DecodeMode::ChunkedStreaming { block_size, .. } => Some(block_size),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.block_size() {
            Some(b) if b < 2 => Err(Error::InvalidScenario(format!("diffusion block size must be at least 2, got {b}"))),
            _ => Ok(()),
        }
    }
}

/// One serving request and its decode progress.
#[derive(Debug, Clone)]
pub struct Request {
    pub id: u64,
    pub arrival_time: f64,
    pub prompt_tokens: u32,
    pub output_tokens: u32,
    pub committed: u32,
    /// Block containing the earliest uncommitted position.
    pub block_index: u32,
    /// Shifts the block grid: block `k` covers positions
    /// `[k*B - offset, (k+1)*B - offset)` clamped at 0. Used to stagger the
    /// initial population of closed-loop runs.
    pub block_offset: u32,
    pub states: Vec<TokenState>,
    pub prefill_done_time: Option<f64>,
    pub first_token_time: Option<f64>,
    pub finish_time: Option<f64>,
    /// Per-request commit-rate multiplier drawn from the commit profile.
    pub rate_multiplier: f64,
    /// Decode steps taken so far.
    pub steps: u64,
    pub rng: ChaCha8Rng,
    /// Uncached positions in commit order; drained oldest first.
    pub(crate) backlog: VecDeque<u32>,
    /// Earliest uncommitted position.
    pub(crate) frontier: u32,
}

impl Request {
    pub fn new(id: u64, arrival_time: f64, prompt_tokens: u32, output_tokens: u32, seed: u64) -> Result<Self> {
        if prompt_tokens == 0 || output_tokens == 0 {
            return Err(Error::InvalidScenario(format!(
                "request {id}: prompt and output lengths must be >= 1 (got {prompt_tokens}, {output_tokens})"
            )));
        }
        Ok(Request {
            id,
            arrival_time,
            prompt_tokens,
            output_tokens,
            committed: 0,
            block_index: 0,
            block_offset: 0,
            states: vec![TokenState::Masked; output_tokens as usize],
            prefill_done_time: None,
            first_token_time: None,
            finish_time: None,
            rate_multiplier: 1.0,
            steps: 0,
            rng: rng::stream_rng(seed, rng::request_stream(id)),
            backlog: VecDeque::new(),
            frontier: 0,
        })
    }

    pub fn with_block_offset(mut self, offset: u32) -> Self {
        self.block_offset = offset;
        self
    }

    pub fn is_finished(&self) -> bool {
        self.committed == self.output_tokens
    }

    pub fn frontier(&self) -> u32 {
        self.frontier
    }

    /// Uncached positions awaiting a KV update, oldest first.
    pub fn backlog(&self) -> impl Iterator<Item = u32> + '_ {
        self.backlog.iter().copied()
    }

    pub fn backlog_len(&self) -> usize {
        self.backlog.len()
    }

    /// State of `pos`; positions past the output length are phantom slots
    /// of the final block and always read as masked.
    pub fn state(&self, pos: u32) -> TokenState {
        self.states.get(pos as usize).copied().unwrap_or(TokenState::Masked)
    }

    pub fn is_real(&self, pos: u32) -> bool {
        pos < self.output_tokens
    }

    pub fn block_of(&self, pos: u32, block_size: u32) -> u32 {
        (pos + self.block_offset) / block_size
    }

    pub fn block_start(&self, block: u32, block_size: u32) -> u32 {
        (block * block_size).saturating_sub(self.block_offset)
    }

    /// Exclusive end of `block`, including phantom slots of the last block.
    pub fn block_end(&self, block: u32, block_size: u32) -> u32 {
        (block + 1) * block_size - self.block_offset
    }

    /// End of the last block (exclusive): the request's full position space
    /// including phantom slots.
    pub fn virtual_end(&self, block_size: u32) -> u32 {
        let last = self.block_of(self.output_tokens - 1, block_size);
        self.block_end(last, block_size)
    }

    /// Advances the frontier past committed positions and updates the block
    /// index. Returns true if the block index changed.
    pub(crate) fn advance_frontier(&mut self, block_size: Option<u32>) -> bool {
        while (self.frontier as usize) < self.states.len() && self.states[self.frontier as usize].is_committed() {
            self.frontier += 1;
        }
        match block_size {
            Some(b) if !self.is_finished() => {
                let next = self.block_of(self.frontier, b);
                let moved = next != self.block_index;
                self.block_index = next;
                moved
            }
            _ => false,
        }
    }

    pub fn summary(&self) -> RequestSummary {
        RequestSummary {
            id: self.id,
            arrival_time: self.arrival_time,
            prompt_tokens: self.prompt_tokens,
            output_tokens: self.output_tokens,
            committed: self.committed,
            decode_steps: self.steps,
            prefill_done_time: self.prefill_done_time,
            first_token_time: self.first_token_time,
            finish_time: self.finish_time,
        }
    }
}

/// Immutable record of a completed (or abandoned) request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestSummary {
    pub id: u64,
    pub arrival_time: f64,
    pub prompt_tokens: u32,
    pub output_tokens: u32,
    pub committed: u32,
    pub decode_steps: u64,
    pub prefill_done_time: Option<f64>,
    pub first_token_time: Option<f64>,
    pub finish_time: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IterationKind {
    Prefill,
    Decode,
}

impl fmt::Display for IterationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            IterationKind::Prefill => f.write_str("prefill"),
            IterationKind::Decode => f.write_str("decode"),
        }
    }
}

/// One GPU iteration. Serializes to a CSV row with header
/// `clock_start,latency,batch_size,chunk_size,computed_tokens,committed_tokens,kind`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub clock_start: f64,
    pub latency: f64,
    pub batch_size: u32,
    /// 0 for prefill and autoregressive rows.
    pub chunk_size: u32,
    pub computed_tokens: u64,
    pub committed_tokens: u64,
    pub kind: IterationKind,
}

pub const ITERATION_CSV_HEADER: &str = "clock_start,latency,batch_size,chunk_size,computed_tokens,committed_tokens,kind";

/// Fraction of computed tokens that were committed.
pub fn token_utilization(record: &IterationRecord) -> Result<f64> {
    if record.computed_tokens == 0 {
        return Err(Error::DegenerateIteration);
    }
    Ok(record.committed_tokens as f64 / record.computed_tokens as f64)
}

/// Parallel work exposed per step: batch size times chunk (or block) size.
pub fn effective_workload(batch_size: u32, chunk_size: u32) -> u64 {
    u64::from(batch_size) * u64::from(chunk_size)
}

pub fn write_iterations_csv<W: std::io::Write>(records: &[IterationRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
