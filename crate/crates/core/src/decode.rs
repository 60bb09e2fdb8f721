//! Per-request decoding state machines.
//!
//! Four execution models are provided for diffusion decoding plus the
//! autoregressive baseline:
//!
//! * [`block_diffusion_step`]: reference block-wise decoding. Every step
//!   computes the whole current block.
//! * [`prefix_cached_step`]: same commit schedule, but committed tokens
//!   whose KV has been rebuilt from the committed input are skipped.
//! * [`plan_naive_chunk`]: fixed contiguous sub-block segments, each fully
//!   decoded before the next opens.
//! * [`plan_chunk`] + [`apply_step`]: streaming chunked decoding. Each step's
//!   chunk first carries the oldest pending KV updates, then the earliest
//!   masked positions allowed by the window rule.
//!
//! A position committed in step `t` has its KV rebuilt no earlier than step
//! `t + 1`.

use serde::{Deserialize, Serialize};

use crate::commit::{CommitOracle, CommitTrace, OracleCtx, ReplayOracle};
use crate::error::{Error, Result};
use crate::types::{DecodeMode, Request, TokenState, WindowRule};

/// The token set one request computes in one streaming iteration.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkPlan {
    pub request_id: u64,
    /// Uncached positions whose KV is rebuilt this step, oldest first.
    pub kv_update_positions: Vec<u32>,
    /// Masked positions forming the decoding window, ascending.
    pub masked_positions: Vec<u32>,
    pub total_tokens: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct StepSummary {
    pub computed: u32,
    pub committed: u32,
}

/// A step summary plus what the oracle saw, for estimator feedback and
/// trace dumps.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StepOutcome {
    pub summary: StepSummary,
    pub kv_positions: Vec<u32>,
    pub window: Vec<u32>,
    /// Oracle output including phantom positions past the output length.
    pub commits: Vec<u32>,
}

impl StepOutcome {
    /// Window ranks of the committed positions.
    pub fn committed_ranks(&self) -> Vec<u32> {
        let mut ranks = Vec::with_capacity(self.commits.len());
        let mut i = 0;
        for &c in &self.commits {
            while self.window[i] != c {
                i += 1;
            }
            ranks.push(i as u32);
        }
        ranks
    }
}

fn ensure_active(req: &Request) -> Result<()> {
    if req.is_finished() {
        Err(Error::RequestComplete(req.id))
    } else {
        Ok(())
    }
}

fn masked_in(req: &Request, from: u32, to: u32, limit: usize) -> Vec<u32> {
    (from..to).filter(|&p| req.state(p) == TokenState::Masked).take(limit).collect()
}

/// Plans one streaming chunk of at most `chunk_size` tokens.
pub fn plan_chunk(req: &Request, chunk_size: u32, mode: &DecodeMode) -> Result<ChunkPlan> {
    ensure_active(req)?;
    let (block_size, rule) = match *mode {
        DecodeMode::ChunkedStreaming { block_size, window_rule } => (block_size, window_rule),
        other => return Err(Error::InvalidScenario(format!("plan_chunk needs a chunked streaming mode, got {other:?}"))),
    };
    if chunk_size < 2 {
        return Err(Error::ChunkTooSmall(chunk_size));
    }
    let kv: Vec<u32> = req.backlog.iter().copied().take(chunk_size as usize).collect();
    let room = (chunk_size as usize) - kv.len();
    let masked = match rule {
        WindowRule::InBlock => masked_in(req, req.frontier, req.block_end(req.block_index, block_size), room),
        WindowRule::OutBlock => masked_in(req, req.frontier, req.virtual_end(block_size), room.min(block_size as usize)),
    };
    Ok(ChunkPlan { request_id: req.id, total_tokens: (kv.len() + masked.len()) as u32, kv_update_positions: kv, masked_positions: masked })
}

/// Plans a naive chunk: the window is confined to the fixed, block-aligned
/// segment of `chunk_size` positions containing the frontier.
pub fn plan_naive_chunk(req: &Request, chunk_size: u32, block_size: u32) -> Result<ChunkPlan> {
    ensure_active(req)?;
    if chunk_size < 2 {
        return Err(Error::ChunkTooSmall(chunk_size));
    }
    let kv: Vec<u32> = req.backlog.iter().copied().take(chunk_size as usize).collect();
    let room = (chunk_size as usize) - kv.len();
    let block_start = req.block_start(req.block_index, block_size);
    let block_end = req.block_end(req.block_index, block_size);
    let seg_start = block_start + (req.frontier - block_start) / chunk_size * chunk_size;
    let seg_end = (seg_start + chunk_size).min(block_end);
    let masked = masked_in(req, req.frontier, seg_end, room);
    Ok(ChunkPlan { request_id: req.id, total_tokens: (kv.len() + masked.len()) as u32, kv_update_positions: kv, masked_positions: masked })
}

/// Applies one streaming step: KV slots become cached, commits become
/// uncached and join the backlog, and the frontier and block advance.
pub fn apply_step(req: &mut Request, plan: &ChunkPlan, commits: &[u32], block_size: u32) -> Result<StepSummary> {
    ensure_active(req)?;
    if plan.request_id != req.id {
        return Err(Error::InvalidScenario(format!("plan for request {} applied to {}", plan.request_id, req.id)));
    }
    for &c in commits {
        if plan.masked_positions.binary_search(&c).is_err() {
            return Err(Error::IllegalCommit { request_id: req.id, position: c });
        }
    }
    for &p in &plan.kv_update_positions {
        if req.backlog.pop_front() != Some(p) {
            return Err(Error::InvalidScenario(format!("stale plan for request {}: kv slot {p} not at backlog head", req.id)));
        }
        req.states[p as usize] = TokenState::DecodedCached;
    }
    let mut sorted: Vec<u32> = commits.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let mut committed = 0;
    for p in sorted {
        if req.is_real(p) {
            req.states[p as usize] = TokenState::DecodedUncached;
            req.backlog.push_back(p);
            committed += 1;
        }
    }
    req.committed += committed;
    req.steps += 1;
    req.advance_frontier(Some(block_size));
    Ok(StepSummary { computed: plan.total_tokens, committed })
}

/// Plans, consults the oracle, and applies one streaming step.
pub fn streaming_step<O: CommitOracle + ?Sized>(
    req: &mut Request,
    oracle: &mut O,
    chunk_size: u32,
    mode: &DecodeMode,
) -> Result<StepOutcome> {
    let plan = plan_chunk(req, chunk_size, mode)?;
    execute_plan(req, oracle, plan, mode.block_size().unwrap_or(chunk_size))
}

/// Like [`streaming_step`] with the naive fixed-segment layout.
pub fn naive_chunk_step<O: CommitOracle + ?Sized>(
    req: &mut Request,
    oracle: &mut O,
    chunk_size: u32,
    block_size: u32,
) -> Result<StepOutcome> {
    let plan = plan_naive_chunk(req, chunk_size, block_size)?;
    execute_plan(req, oracle, plan, block_size)
}

fn execute_plan<O: CommitOracle + ?Sized>(req: &mut Request, oracle: &mut O, plan: ChunkPlan, block_size: u32) -> Result<StepOutcome> {
    let commits = if plan.masked_positions.is_empty() {
        Vec::new()
    } else {
        let ctx = OracleCtx { request_id: req.id, step: req.steps, rate_multiplier: req.rate_multiplier };
        oracle.commits(&ctx, &mut req.rng, &plan.masked_positions)?
    };
    let summary = apply_step(req, &plan, &commits, block_size)?;
    Ok(StepOutcome { summary, kv_positions: plan.kv_update_positions, window: plan.masked_positions, commits })
}

fn blockwise_step<O: CommitOracle + ?Sized>(req: &mut Request, oracle: &mut O, block_size: u32, prefix_cache: bool) -> Result<StepOutcome> {
    ensure_active(req)?;
    let block = req.block_index;
    let start = req.block_start(block, block_size);
    let end = req.block_end(block, block_size);
    let real_end = end.min(req.output_tokens);
    let window = masked_in(req, req.frontier, end, usize::MAX);

    let kv_positions: Vec<u32> =
        if prefix_cache { (start..real_end).filter(|&p| req.state(p) == TokenState::DecodedUncached).collect() } else { Vec::new() };
    let computed = if prefix_cache {
        let cached = (start..real_end).filter(|&p| req.state(p) == TokenState::DecodedCached).count() as u32;
        end - start - cached + kv_positions.len() as u32
    } else {
        end - start
    };

    let ctx = OracleCtx { request_id: req.id, step: req.steps, rate_multiplier: req.rate_multiplier };
    let commits = oracle.commits(&ctx, &mut req.rng, &window)?;
    for &c in &commits {
        if window.binary_search(&c).is_err() {
            return Err(Error::IllegalCommit { request_id: req.id, position: c });
        }
    }

    // Prefix caching keeps the KV a token had when it committed, so
    // commits are cached at once; only leftover uncached positions are
    // refreshed here.
    for &p in &kv_positions {
        req.states[p as usize] = TokenState::DecodedCached;
    }
    let after_commit = if prefix_cache { TokenState::DecodedCached } else { TokenState::DecodedUncached };
    let mut committed = 0;
    for &p in &commits {
        if req.is_real(p) {
            req.states[p as usize] = after_commit;
            committed += 1;
        }
    }
    req.committed += committed;
    req.steps += 1;
    let moved = req.advance_frontier(Some(block_size));
    if moved || req.is_finished() {
        for p in start..real_end {
            req.states[p as usize] = TokenState::DecodedCached;
        }
    }
    Ok(StepOutcome { summary: StepSummary { computed, committed }, kv_positions, window, commits })
}

/// Reference block-wise diffusion step: computes every position of the
/// current block, including already-decoded ones.
pub fn block_diffusion_step<O: CommitOracle + ?Sized>(req: &mut Request, oracle: &mut O, block_size: u32) -> Result<StepOutcome> {
    blockwise_step(req, oracle, block_size, false)
}

/// Block-wise step that skips positions whose KV is already cached.
/// The commit schedule is identical to [`block_diffusion_step`].
pub fn prefix_cached_step<O: CommitOracle + ?Sized>(req: &mut Request, oracle: &mut O, block_size: u32) -> Result<StepOutcome> {
    blockwise_step(req, oracle, block_size, true)
}

/// One autoregressive token.
pub fn ar_step(req: &mut Request) -> Result<StepSummary> {
    ensure_active(req)?;
    let p = req.frontier;
    req.states[p as usize] = TokenState::DecodedCached;
    req.committed += 1;
    req.steps += 1;
    req.advance_frontier(None);
    Ok(StepSummary { computed: 1, committed: 1 })
}

/// Step counts of streaming chunked decoding (chunk = block, in-block
/// window) and reference block-wise decoding replaying the same trace.
///
/// Both runs use carrying replay so that trace positions outside a step's
/// window commit as soon as the window reaches them.
pub fn step_count_equivalence(template: &Request, trace: &CommitTrace, block_size: u32) -> Result<(u64, u64)> {
    let limit = 4 * u64::from(template.output_tokens) + 64;

    let mut blockwise = template.clone();
    let mut oracle = ReplayOracle::carrying(trace.clone());
    while !blockwise.is_finished() {
        block_diffusion_step(&mut blockwise, &mut oracle, block_size)?;
        if blockwise.steps > limit {
            return Err(Error::NonTerminating { clock: 0.0, detail: "block-wise replay did not finish".into() });
        }
    }

    let mut streaming = template.clone();
    let mut oracle = ReplayOracle::carrying(trace.clone());
    let mode = DecodeMode::ChunkedStreaming { block_size, window_rule: WindowRule::InBlock };
    while !streaming.is_finished() {
        streaming_step(&mut streaming, &mut oracle, block_size, &mode)?;
        if streaming.steps > limit {
            return Err(Error::NonTerminating { clock: 0.0, detail: "streaming replay did not finish".into() });
        }
    }
    Ok((streaming.steps, blockwise.steps))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::commit::{CommitProfile, DeterministicOracle, StochasticOracle};

    const IN_BLOCK_8: DecodeMode = DecodeMode::ChunkedStreaming { block_size: 8, window_rule: WindowRule::InBlock };

    fn req(output: u32) -> Request {
        Request::new(1, 0.0, 8, output, 11).unwrap()
    }

    fn commit(r: &mut Request, positions: &[u32], block_size: u32) {
        // Commit without a KV slot: a plan with an empty kv list.
        let plan = ChunkPlan {
            request_id: r.id,
            kv_update_positions: vec![],
            masked_positions: positions.to_vec(),
            total_tokens: positions.len() as u32,
        };
        apply_step(r, &plan, positions, block_size).unwrap();
    }

    #[test]
    fn fresh_block_plan() {
        let r = req(64);
        let mode = DecodeMode::ChunkedStreaming { block_size: 32, window_rule: WindowRule::InBlock };
        let plan = plan_chunk(&r, 8, &mode).unwrap();
        assert!(plan.kv_update_positions.is_empty());
        assert_eq!(plan.masked_positions, (0..8).collect::<Vec<_>>());
        assert_eq!(plan.total_tokens, 8);
    }

    #[test]
    fn backlog_takes_priority() {
        let mut r = req(64);
        commit(&mut r, &[0, 1, 2], 32);
        let mode = DecodeMode::ChunkedStreaming { block_size: 32, window_rule: WindowRule::InBlock };
        let plan = plan_chunk(&r, 8, &mode).unwrap();
        assert_eq!(plan.kv_update_positions, vec![0, 1, 2]);
        assert_eq!(plan.masked_positions, vec![3, 4, 5, 6, 7]);
    }

    #[test]
    fn in_block_window_does_not_spill() {
        let mut r = req(64);
        // Commit 0..6 of the first 8-block and flush their KV.
        commit(&mut r, &(0..6).collect::<Vec<_>>(), 8);
        let plan = plan_chunk(&r, 8, &IN_BLOCK_8).unwrap();
        apply_step(&mut r, &plan, &[], 8).unwrap();
        let plan = plan_chunk(&r, 8, &IN_BLOCK_8).unwrap();
        assert!(plan.kv_update_positions.is_empty());
        assert_eq!(plan.masked_positions, vec![6, 7]);

        let out = DecodeMode::ChunkedStreaming { block_size: 8, window_rule: WindowRule::OutBlock };
        let plan = plan_chunk(&r, 8, &out).unwrap();
        assert_eq!(plan.masked_positions, (6..14).collect::<Vec<_>>());
    }

    #[test]
    fn backlog_can_fill_the_whole_chunk() {
        let mut r = req(64);
        commit(&mut r, &[0, 1, 2], 32);
        let mode = DecodeMode::ChunkedStreaming { block_size: 32, window_rule: WindowRule::InBlock };
        let plan = plan_chunk(&r, 2, &mode).unwrap();
        assert_eq!(plan.kv_update_positions, vec![0, 1]);
        assert!(plan.masked_positions.is_empty());
    }

    #[test]
    fn apply_step_transitions() {
        let mut r = req(64);
        commit(&mut r, &[0, 1], 32);
        let plan = ChunkPlan { request_id: 1, kv_update_positions: vec![0, 1], masked_positions: (2..7).collect(), total_tokens: 7 };
        let s = apply_step(&mut r, &plan, &[2, 4], 32).unwrap();
        assert_eq!(s, StepSummary { computed: 7, committed: 2 });
        use TokenState::*;
        assert_eq!(&r.states[..6], &[DecodedCached, DecodedCached, DecodedUncached, Masked, DecodedUncached, Masked]);
        assert_eq!(r.backlog().collect::<Vec<_>>(), vec![2, 4]);
        assert_eq!(r.frontier(), 3);
    }

    #[test]
    fn apply_step_rejects_commit_outside_plan() {
        let mut r = req(64);
        let plan = ChunkPlan { request_id: 1, kv_update_positions: vec![], masked_positions: vec![0, 1], total_tokens: 2 };
        assert_eq!(apply_step(&mut r, &plan, &[5], 32), Err(Error::IllegalCommit { request_id: 1, position: 5 }));
    }

    #[test]
    fn completion_truncates_phantom_commits() {
        let mut r = req(5);
        let mode = DecodeMode::ChunkedStreaming { block_size: 8, window_rule: WindowRule::InBlock };
        let plan = plan_chunk(&r, 8, &mode).unwrap();
        // Window covers real positions 0..5 plus phantom slots 5..8.
        assert_eq!(plan.masked_positions, (0..8).collect::<Vec<_>>());
        let s = apply_step(&mut r, &plan, &plan.masked_positions.clone(), 8).unwrap();
        assert_eq!(s.committed, 5);
        assert!(r.is_finished());
        assert_eq!(r.committed, r.output_tokens);
        assert_eq!(plan_chunk(&r, 8, &mode), Err(Error::RequestComplete(1)));
    }

    #[test]
    fn chunk_of_two_commits_one_token_per_step_in_steady_state() {
        // Oracle commits only the earliest window position.
        let mut oracle = DeterministicOracle::fixed(1);
        let mut r = req(40);
        let mode = DecodeMode::ChunkedStreaming { block_size: 32, window_rule: WindowRule::InBlock };
        let first = streaming_step(&mut r, &mut oracle, 2, &mode).unwrap();
        assert_eq!(first.summary, StepSummary { computed: 2, committed: 1 });
        let mut computed = 0;
        let mut committed = 0;
        while !r.is_finished() {
            let s = streaming_step(&mut r, &mut oracle, 2, &mode).unwrap();
            assert_eq!(s.kv_positions.len(), 1);
            assert_eq!(s.window.len(), 1);
            assert_eq!(s.summary.committed, 1);
            computed += s.summary.computed;
            committed += s.summary.committed;
        }
        assert_eq!(computed, 2 * committed);
        assert_eq!(r.steps, 40);
    }

    #[test]
    fn chunk_below_two_is_rejected() {
        let r = req(10);
        assert_eq!(plan_chunk(&r, 1, &IN_BLOCK_8), Err(Error::ChunkTooSmall(1)));
    }

    struct Scripted(Vec<Vec<u32>>);
    impl CommitOracle for Scripted {
        fn commits(&mut self, ctx: &OracleCtx, _: &mut rand_chacha::ChaCha8Rng, w: &[u32]) -> Result<Vec<u32>> {
            Ok(self.0[ctx.step as usize].iter().copied().filter(|p| w.contains(p)).collect())
        }
    }

    #[test]
    fn block_diffusion_two_step_trace() {
        let mut r = req(4);
        let mut o = Scripted(vec![vec![0, 1], vec![2, 3]]);
        let a = block_diffusion_step(&mut r, &mut o, 4).unwrap();
        assert_eq!(a.summary, StepSummary { computed: 4, committed: 2 });
        assert_eq!(r.state(0), TokenState::DecodedUncached);
        let b = block_diffusion_step(&mut r, &mut o, 4).unwrap();
        assert_eq!(b.summary, StepSummary { computed: 4, committed: 2 });
        assert!(r.is_finished());
        assert!(r.states.iter().all(|s| *s == TokenState::DecodedCached));
    }

    #[test]
    fn block_diffusion_single_step_block() {
        let mut r = req(4);
        let mut o = Scripted(vec![vec![0, 1, 2, 3]]);
        let a = block_diffusion_step(&mut r, &mut o, 4).unwrap();
        assert_eq!(a.summary, StepSummary { computed: 4, committed: 4 });
        assert!(r.is_finished());
    }

    #[test]
    fn prefix_cached_counts_block_minus_cached_plus_uncached() {
        let mut r = req(64);
        for p in 0..10 {
            r.states[p] = TokenState::DecodedCached;
        }
        r.states[10] = TokenState::DecodedUncached;
        r.states[11] = TokenState::DecodedUncached;
        r.committed = 12;
        r.advance_frontier(Some(32));
        let s = prefix_cached_step(&mut r, &mut Scripted(vec![vec![12]]), 32).unwrap();
        assert_eq!(s.summary.computed, 24);
        assert_eq!(s.kv_positions, vec![10, 11]);
        assert!(r.states[..13].iter().all(|&t| t == TokenState::DecodedCached));

        // Nothing cached yet: same as the reference.
        let mut fresh = req(64);
        let s = prefix_cached_step(&mut fresh, &mut Scripted(vec![vec![0]]), 32).unwrap();
        assert_eq!(s.summary.computed, 32);
    }

    #[test]
    fn prefix_cached_skips_earlier_commits() {
        let script = vec![(0..8).collect(), vec![8, 9], vec![10]];
        let mut a = req(64);
        let mut b = req(64);
        let (mut oa, mut ob) = (Scripted(script.clone()), Scripted(script));
        let mut computed = vec![];
        for _ in 0..3 {
            let x = block_diffusion_step(&mut a, &mut oa, 32).unwrap();
            let y = prefix_cached_step(&mut b, &mut ob, 32).unwrap();
            assert_eq!(x.commits, y.commits);
            computed.push((x.summary.computed, y.summary.computed));
        }
        assert_eq!(computed, vec![(32, 32), (32, 24), (32, 22)]);
    }

    #[test]
    fn ar_examples() {
        let mut r = req(7);
        for _ in 0..7 {
            assert_eq!(ar_step(&mut r).unwrap(), StepSummary { computed: 1, committed: 1 });
        }
        assert!(r.is_finished());
        assert_eq!(r.steps, 7);
        assert_eq!(ar_step(&mut r), Err(Error::RequestComplete(1)));
    }

    #[test]
    fn sequential_trace_gives_equal_step_counts() {
        let template = req(20);
        let mut trace = CommitTrace::new();
        for s in 0..20 {
            trace.insert(1, s, vec![s as u32]);
        }
        let (streaming, blockwise) = step_count_equivalence(&template, &trace, 4).unwrap();
        assert_eq!((streaming, blockwise), (20, 20));
    }

    #[test]
    fn streaming_matches_calibrated_mean_per_step_on_long_requests() {
        let profile = CommitProfile::new(0.8, 0.0).unwrap();
        let mut oracle = StochasticOracle { profile };
        let mode = DecodeMode::ChunkedStreaming { block_size: 32, window_rule: WindowRule::InBlock };
        let mut r = Request::new(3, 0.0, 1, 2000, 5).unwrap();
        while !r.is_finished() {
            streaming_step(&mut r, &mut oracle, 32, &mode).unwrap();
        }
        let per_step = 2000.0 / r.steps as f64;
        assert!(per_step > 3.0 && per_step < 5.0, "{per_step}");
    }

    #[test]
    fn naive_chunking_confines_window_to_segment() {
        let mut r = req(32);
        let plan = plan_naive_chunk(&r, 8, 32).unwrap();
        assert_eq!(plan.masked_positions, (0..8).collect::<Vec<_>>());
        commit(&mut r, &[0, 1, 2, 3, 4, 5, 6], 32);
        let plan = plan_naive_chunk(&r, 8, 32).unwrap();
        // Backlog of 7 leaves one slot; the segment [0, 8) only offers 7.
        assert_eq!(plan.kv_update_positions.len(), 7);
        assert_eq!(plan.masked_positions, vec![7]);
    }

    #[test]
    fn committed_ranks_are_window_indices() {
        let o = StepOutcome { summary: StepSummary::default(), kv_positions: vec![], window: vec![3, 5, 9, 10], commits: vec![3, 9] };
        assert_eq!(o.committed_ranks(), vec![0, 2]);
    }
}
