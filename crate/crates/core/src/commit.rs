//! Stochastic commitment oracle.
//!
//! Stands in for confidence-threshold commitment: given the ordered masked
//! positions of a decoding window, decide which ones commit this step. The
//! earliest window position always commits; the position at window rank
//! `j >= 1` commits independently with probability `min(1, m * q^j)`, where
//! `m` is a per-request rate multiplier. The expected commit count over a
//! window of `w` positions is `(1 - q^w) / (1 - q)`, which is increasing and
//! concave in `w`.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{BufRead, Write};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

pub const MIN_RATE_MULTIPLIER: f64 = 0.25;
pub const MAX_RATE_MULTIPLIER: f64 = 4.0;

/// Parameters of the stochastic oracle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CommitProfile {
    /// Per-rank decay of the commit probability, in `[0, 1)`.
    pub q: f64,
    /// Lognormal sigma of the per-request rate multiplier.
    #[serde(default)]
    pub rate_jitter_sigma: f64,
    #[serde(default)]
    pub calibration_note: String,
}

impl CommitProfile {
    pub fn new(q: f64, rate_jitter_sigma: f64) -> Result<Self> {
        let p = CommitProfile { q, rate_jitter_sigma, calibration_note: String::new() };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.q) {
            return Err(Error::Config { key: "commit.q".into(), message: format!("must lie in [0, 1), got {}", self.q) });
        }
        if !(self.rate_jitter_sigma >= 0.0 && self.rate_jitter_sigma.is_finite()) {
            return Err(Error::Config {
                key: "commit.rate_jitter_sigma".into(),
                message: format!("must be finite and >= 0, got {}", self.rate_jitter_sigma),
            });
        }
        Ok(())
    }

    /// Expected commits for a window of `w` positions at multiplier 1.
    pub fn expected_commits(&self, w: u32) -> f64 {
        geometric_window_mean(self.q, w)
    }
}

/// `sum_{j<w} q^j`, the closed-form expected commit count of a window.
pub fn geometric_window_mean(q: f64, w: u32) -> f64 {
    let mut sum = 0.0;
    let mut term = 1.0;
    for _ in 0..w {
        sum += term;
        term *= q;
    }
    sum
}

fn check_window(window: &[u32]) -> Result<()> {
    if window.is_empty() {
        return Err(Error::EmptyWindow);
    }
    if window.windows(2).any(|p| p[0] >= p[1]) {
        return Err(Error::UnorderedWindow);
    }
    Ok(())
}

/// Draws the committed subset of `window`.
///
/// Consumes exactly `window.len() - 1` uniforms from `rng`, so the stream
/// position depends only on the window sizes seen.
pub fn commit_step(profile: &CommitProfile, rate_multiplier: f64, window: &[u32], rng: &mut ChaCha8Rng) -> Result<Vec<u32>> {
    check_window(window)?;
    let mut out = Vec::with_capacity(8);
    out.push(window[0]);
    let mut decay = 1.0;
    for &pos in &window[1..] {
        decay *= profile.q;
        let p = (rate_multiplier * decay).min(1.0);
        let u: f64 = rng.random();
        if u < p {
            out.push(pos);
        }
    }
    Ok(out)
}

/// Solves `(1 - q^B) / (1 - q) = target` for `q` by bisection.
pub fn calibrate_q(block_size: u32, target_mean_commits: f64) -> Result<f64> {
    let b = f64::from(block_size);
    if !(target_mean_commits >= 1.0 && target_mean_commits <= b) || block_size == 0 {
        return Err(Error::InfeasibleTarget { block_size, target: target_mean_commits });
    }
    if target_mean_commits == 1.0 {
        return Ok(0.0);
    }
    if target_mean_commits == b {
        return Ok(1.0 - 1e-9);
    }
    let (mut lo, mut hi) = (0.0_f64, 1.0_f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if geometric_window_mean(mid, block_size) < target_mean_commits {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Lognormal multiplier with median 1, clamped to `[0.25, 4]`.
pub fn sample_rate_multiplier(profile: &CommitProfile, rng: &mut ChaCha8Rng) -> f64 {
    if profile.rate_jitter_sigma == 0.0 {
        return 1.0;
    }
    let dist = LogNormal::new(0.0, profile.rate_jitter_sigma).expect("sigma validated");
    dist.sample(rng).clamp(MIN_RATE_MULTIPLIER, MAX_RATE_MULTIPLIER)
}

// ---------------------------------------------------------------------------
// Block-process calibration
// ---------------------------------------------------------------------------

/// Poisson-binomial pmf of the number of successes among `probs`.
fn poisson_binomial(probs: impl Iterator<Item = f64>, out: &mut Vec<f64>) {
    out.clear();
    out.push(1.0);
    for p in probs {
        out.push(0.0);
        for k in (1..out.len()).rev() {
            out[k] = out[k] * (1.0 - p) + out[k - 1] * p;
        }
        out[0] *= 1.0 - p;
    }
}

/// Exact expected step count and expected sum of squared per-step commits
/// for decoding one full block when every step's window is the whole set of
/// remaining masked positions.
///
/// Only the number of remaining masked positions matters because commit
/// probabilities depend on window rank alone.
pub fn block_process_moments(q: f64, rate_multiplier: f64, block_size: u32) -> (f64, f64) {
    let n = block_size as usize;
    let mut steps = vec![0.0; n + 1];
    let mut sq = vec![0.0; n + 1];
    let mut pmf = Vec::with_capacity(n + 1);
    for k in 1..=n {
        poisson_binomial((1..k).map(|j| (rate_multiplier * q.powi(j as i32)).min(1.0)), &mut pmf);
        let (mut s, mut t) = (1.0, 0.0);
        for (extra, &pr) in pmf.iter().enumerate() {
            let c = extra + 1;
            s += pr * steps[k - c];
            t += pr * ((c * c) as f64 + sq[k - c]);
        }
        steps[k] = s;
        sq[k] = t;
    }
    (steps[n], sq[n])
}

/// Pooled tokens-per-step mean and std of full-block decoding across a
/// population of requests whose multipliers follow the profile's lognormal.
pub fn block_process_tokens_per_step(q: f64, rate_jitter_sigma: f64, block_size: u32) -> (f64, f64) {
    const NODES: usize = 48;
    let multipliers: Vec<f64> = if rate_jitter_sigma == 0.0 {
        vec![1.0]
    } else {
        let normal = Normal::new(0.0, 1.0).expect("standard normal");
        (0..NODES)
            .map(|i| {
                let u = (i as f64 + 0.5) / NODES as f64;
                (rate_jitter_sigma * normal.inverse_cdf(u)).exp().clamp(MIN_RATE_MULTIPLIER, MAX_RATE_MULTIPLIER)
            })
            .collect()
    };
    let (mut steps, mut sq) = (0.0, 0.0);
    for &m in &multipliers {
        let (s, t) = block_process_moments(q, m, block_size);
        steps += s;
        sq += t;
    }
    steps /= multipliers.len() as f64;
    sq /= multipliers.len() as f64;
    let mean = f64::from(block_size) / steps;
    let var = (sq / steps - mean * mean).max(0.0);
    (mean, var.sqrt())
}

pub const DEFAULT_SIGMA_GRID: [f64; 5] = [0.0, 0.15, 0.3, 0.45, 0.6];

/// Fits a profile so that full-block decoding at `block_size` reproduces the
/// target pooled tokens/step mean; the jitter sigma is the grid point whose
/// pooled std lands closest to `target_std`.
pub fn calibrate_profile(block_size: u32, target_mean: f64, target_std: f64, sigma_grid: &[f64]) -> Result<CommitProfile> {
    let b = f64::from(block_size);
    if !(target_mean >= 1.0 && target_mean < b) {
        return Err(Error::InfeasibleTarget { block_size, target: target_mean });
    }
    let mut best: Option<(f64, CommitProfile)> = None;
    for &sigma in sigma_grid {
        let (mut lo, mut hi) = (0.0_f64, 1.0 - 1e-9);
        if block_process_tokens_per_step(hi, sigma, block_size).0 < target_mean {
            continue;
        }
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            if block_process_tokens_per_step(mid, sigma, block_size).0 < target_mean {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let q = 0.5 * (lo + hi);
        let (_, std) = block_process_tokens_per_step(q, sigma, block_size);
        let err = (std - target_std).abs();
        if best.as_ref().is_none_or(|(e, _)| err < *e) {
            let note = format!("block-process fit: B={block_size} mean={target_mean} (target std {target_std}, model std {std:.3})");
            best = Some((err, CommitProfile { q, rate_jitter_sigma: sigma, calibration_note: note }));
        }
    }
    best.map(|(_, p)| p).ok_or(Error::InfeasibleTarget { block_size, target: target_mean })
}

// ---------------------------------------------------------------------------
// Traces and replay
// ---------------------------------------------------------------------------

/// One JSON-lines row of a commit trace.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub request_id: u64,
    pub step: u64,
    pub positions: Vec<u32>,
}

/// Per-request, per-step committed positions.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CommitTrace {
    entries: BTreeMap<(u64, u64), Vec<u32>>,
}

impl CommitTrace {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, request_id: u64, step: u64, mut positions: Vec<u32>) {
        positions.sort_unstable();
        positions.dedup();
        self.entries.insert((request_id, step), positions);
    }

    pub fn get(&self, request_id: u64, step: u64) -> Option<&[u32]> {
        self.entries.get(&(request_id, step)).map(Vec::as_slice)
    }

    pub fn steps(&self, request_id: u64) -> impl Iterator<Item = (u64, &[u32])> + '_ {
        self.entries.range((request_id, 0)..=(request_id, u64::MAX)).map(|(&(_, s), v)| (s, v.as_slice()))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Checks that the union of a request's steps is exactly `0..output_tokens`
    /// with no position committed twice.
    pub fn covers_exactly(&self, request_id: u64, output_tokens: u32) -> bool {
        let mut seen = BTreeSet::new();
        for (_, positions) in self.steps(request_id) {
            for &p in positions {
                if !seen.insert(p) {
                    return false;
                }
            }
        }
        seen.len() == output_tokens as usize && seen.iter().copied().eq(0..output_tokens)
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        for (&(request_id, step), positions) in &self.entries {
            let row = TraceEntry { request_id, step, positions: positions.clone() };
            serde_json::to_writer(&mut out, &row)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(input: R) -> Result<Self> {
        let mut trace = CommitTrace::new();
        for line in input.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let row: TraceEntry = serde_json::from_str(&line)?;
            trace.insert(row.request_id, row.step, row.positions);
        }
        Ok(trace)
    }
}

/// Verbatim replay: the trace entry intersected with the window. No progress
/// rule is applied, so an empty entry yields an empty commit set.
pub fn replay_oracle(trace: &CommitTrace, request_id: u64, step: u64, window: &[u32]) -> Result<Vec<u32>> {
    let entry = trace.get(request_id, step).ok_or(Error::TraceExhausted { request_id, step })?;
    Ok(entry.iter().copied().filter(|p| window.binary_search(p).is_ok()).collect())
}

// ---------------------------------------------------------------------------
// Oracle interface used by the decode engines
// ---------------------------------------------------------------------------

/// Identifies the commit decision being made.
#[derive(Debug, Clone, Copy)]
pub struct OracleCtx {
    pub request_id: u64,
    /// Zero-based decode step of this request.
    pub step: u64,
    pub rate_multiplier: f64,
}

pub trait CommitOracle {
    /// Returns the committed subset of `window` (ascending).
    fn commits(&mut self, ctx: &OracleCtx, rng: &mut ChaCha8Rng, window: &[u32]) -> Result<Vec<u32>>;

    /// Whether every non-empty window is guaranteed at least one commit.
    fn guarantees_progress(&self) -> bool {
        true
    }
}

#[derive(Debug, Clone)]
pub struct StochasticOracle {
    pub profile: CommitProfile,
}

impl CommitOracle for StochasticOracle {
    fn commits(&mut self, ctx: &OracleCtx, rng: &mut ChaCha8Rng, window: &[u32]) -> Result<Vec<u32>> {
        commit_step(&self.profile, ctx.rate_multiplier, window, rng)
    }
}

/// Commits the earliest `curve[w - 1]` positions of a window of size `w`
/// (the last entry extends to larger windows).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeterministicOracle {
    pub curve: Vec<u32>,
}

impl DeterministicOracle {
    pub fn fixed(commits_per_step: u32) -> Self {
        DeterministicOracle { curve: vec![commits_per_step.max(1)] }
    }

    /// Curve `round((1 - q^w) / (1 - q))` for `w = 1..=max_window`.
    pub fn geometric_rounded(q: f64, max_window: u32) -> Self {
        DeterministicOracle { curve: (1..=max_window).map(|w| geometric_window_mean(q, w).round() as u32).collect() }
    }

    pub fn count_for(&self, w: usize) -> usize {
        let idx = w.min(self.curve.len()).saturating_sub(1);
        (self.curve.get(idx).copied().unwrap_or(1).max(1) as usize).min(w)
    }
}

impl CommitOracle for DeterministicOracle {
    fn commits(&mut self, _ctx: &OracleCtx, _rng: &mut ChaCha8Rng, window: &[u32]) -> Result<Vec<u32>> {
        check_window(window)?;
        Ok(window[..self.count_for(window.len())].to_vec())
    }
}

/// Replays a recorded trace.
///
/// In verbatim mode each step returns `trace[step] ∩ window`. In carry mode,
/// trace positions that fell outside the window stay pending and commit at
/// the first later step whose window contains them; this lets a trace
/// recorded under one engine drive another whose windows differ.
#[derive(Debug, Clone)]
pub struct ReplayOracle {
    trace: CommitTrace,
    carry: bool,
    pending: HashMap<u64, BTreeSet<u32>>,
    absorbed: HashMap<u64, u64>,
}

impl ReplayOracle {
    pub fn verbatim(trace: CommitTrace) -> Self {
        ReplayOracle { trace, carry: false, pending: HashMap::new(), absorbed: HashMap::new() }
    }

    pub fn carrying(trace: CommitTrace) -> Self {
        ReplayOracle { trace, carry: true, pending: HashMap::new(), absorbed: HashMap::new() }
    }
}

impl CommitOracle for ReplayOracle {
    fn commits(&mut self, ctx: &OracleCtx, _rng: &mut ChaCha8Rng, window: &[u32]) -> Result<Vec<u32>> {
        if !self.carry {
            return replay_oracle(&self.trace, ctx.request_id, ctx.step, window);
        }
        // Steps skipped without an oracle call (e.g. all-KV chunks) are
        // absorbed too.
        let next = self.absorbed.entry(ctx.request_id).or_insert(0);
        let pending = self.pending.entry(ctx.request_id).or_default();
        let mut found = false;
        for (step, entry) in self.trace.steps(ctx.request_id) {
            if step >= *next && step <= ctx.step {
                pending.extend(entry.iter().copied());
                found |= step == ctx.step;
            }
        }
        *next = (*next).max(ctx.step + 1);
        if !found && pending.is_empty() {
            return Err(Error::TraceExhausted { request_id: ctx.request_id, step: ctx.step });
        }
        let out: Vec<u32> = window.iter().copied().filter(|p| pending.contains(p)).collect();
        for p in &out {
            pending.remove(p);
        }
        Ok(out)
    }

    fn guarantees_progress(&self) -> bool {
        false
    }
}

/// Wraps an oracle and records every decision into a trace.
#[derive(Debug, Clone)]
pub struct RecordingOracle<O> {
    pub inner: O,
    pub trace: CommitTrace,
}

impl<O> RecordingOracle<O> {
    pub fn new(inner: O) -> Self {
        RecordingOracle { inner, trace: CommitTrace::new() }
    }
}

impl<O: CommitOracle> CommitOracle for RecordingOracle<O> {
    fn commits(&mut self, ctx: &OracleCtx, rng: &mut ChaCha8Rng, window: &[u32]) -> Result<Vec<u32>> {
        let out = self.inner.commits(ctx, rng, window)?;
        self.trace.insert(ctx.request_id, ctx.step, out.clone());
        Ok(out)
    }

    fn guarantees_progress(&self) -> bool {
        self.inner.guarantees_progress()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;

    fn ctx() -> OracleCtx {
        OracleCtx { request_id: 0, step: 0, rate_multiplier: 1.0 }
    }

    #[test]
    fn single_position_window_always_commits() {
        let p = CommitProfile::new(0.9, 0.0).unwrap();
        let mut rng = stream_rng(1, 1);
        for _ in 0..100 {
            assert_eq!(commit_step(&p, 1.0, &[17], &mut rng).unwrap(), vec![17]);
        }
    }

    #[test]
    fn zero_decay_commits_only_the_earliest() {
        let p = CommitProfile::new(0.0, 0.0).unwrap();
        let mut rng = stream_rng(2, 1);
        let window: Vec<u32> = (5..37).collect();
        for _ in 0..100 {
            assert_eq!(commit_step(&p, 4.0, &window, &mut rng).unwrap(), vec![5]);
        }
    }

    #[test]
    fn empty_window_is_an_error() {
        let p = CommitProfile::new(0.5, 0.0).unwrap();
        let mut rng = stream_rng(3, 1);
        assert_eq!(commit_step(&p, 1.0, &[], &mut rng), Err(Error::EmptyWindow));
        assert_eq!(commit_step(&p, 1.0, &[3, 3], &mut rng), Err(Error::UnorderedWindow));
    }

    #[test]
    fn window32_monte_carlo_matches_closed_form() {
        // Independent check: 1e5 draws against sum_{j<32} q^j.
        let q = 0.8108;
        let p = CommitProfile::new(q, 0.0).unwrap();
        let window: Vec<u32> = (0..32).collect();
        let mut rng = stream_rng(4, 1);
        let n = 100_000;
        let total: usize = (0..n).map(|_| commit_step(&p, 1.0, &window, &mut rng).unwrap().len()).sum();
        let mean = total as f64 / n as f64;
        let expect = (1.0 - q.powi(32)) / (1.0 - q);
        assert!((expect / 5.29 - 1.0).abs() < 0.005, "closed form {expect}");
        assert!((mean / expect - 1.0).abs() < 0.02, "mc {mean} vs {expect}");
    }

    #[test]
    fn calibrate_q_examples() {
        assert_eq!(calibrate_q(32, 1.0).unwrap(), 0.0);
        let q = calibrate_q(32, 5.29).unwrap();
        assert!((geometric_window_mean(q, 32) - 5.29).abs() < 1e-9);
        assert!((q - 0.8108).abs() < 1e-3, "q = {q}");
        let q = calibrate_q(32, 2.51).unwrap();
        assert!((geometric_window_mean(q, 32) - 2.51).abs() < 1e-9);
        assert!((q - 0.6016).abs() < 1e-3, "q = {q}");
        assert!((calibrate_q(32, 32.0).unwrap() - (1.0 - 1e-9)).abs() < 1e-15);
    }

    #[test]
    fn calibrate_q_rejects_infeasible_targets() {
        assert!(matches!(calibrate_q(32, 0.5), Err(Error::InfeasibleTarget { .. })));
        assert!(matches!(calibrate_q(32, 33.0), Err(Error::InfeasibleTarget { .. })));
        assert!(matches!(calibrate_q(32, f64::NAN), Err(Error::InfeasibleTarget { .. })));
    }

    #[test]
    fn rate_multiplier_examples() {
        let flat = CommitProfile::new(0.5, 0.0).unwrap();
        let mut rng = stream_rng(5, 1);
        assert_eq!(sample_rate_multiplier(&flat, &mut rng), 1.0);

        let p = CommitProfile::new(0.5, 0.6).unwrap();
        let mut draws: Vec<f64> = (0..100_000).map(|_| sample_rate_multiplier(&p, &mut rng)).collect();
        assert!(draws.iter().all(|m| (MIN_RATE_MULTIPLIER..=MAX_RATE_MULTIPLIER).contains(m)));
        draws.sort_by(f64::total_cmp);
        let median = draws[draws.len() / 2];
        assert!((0.97..=1.03).contains(&median), "median {median}");
    }

    #[test]
    fn replay_examples() {
        let mut trace = CommitTrace::new();
        trace.insert(1, 0, vec![3, 4]);
        trace.insert(1, 1, vec![]);
        trace.insert(1, 2, vec![7]);
        assert_eq!(replay_oracle(&trace, 1, 0, &[3, 4, 5]).unwrap(), vec![3, 4]);
        assert_eq!(replay_oracle(&trace, 1, 1, &[5, 6]).unwrap(), Vec::<u32>::new());
        assert_eq!(replay_oracle(&trace, 1, 2, &[3, 4]).unwrap(), Vec::<u32>::new());
        assert_eq!(replay_oracle(&trace, 1, 3, &[3]), Err(Error::TraceExhausted { request_id: 1, step: 3 }));
    }

    #[test]
    fn carrying_replay_defers_out_of_window_positions() {
        let mut trace = CommitTrace::new();
        trace.insert(0, 0, vec![0, 5]);
        trace.insert(0, 1, vec![1]);
        let mut oracle = ReplayOracle::carrying(trace);
        let mut rng = stream_rng(0, 0);
        let mut c = ctx();
        assert_eq!(oracle.commits(&c, &mut rng, &[0, 1, 2]).unwrap(), vec![0]);
        c.step = 1;
        assert_eq!(oracle.commits(&c, &mut rng, &[1, 2, 3, 4, 5]).unwrap(), vec![1, 5]);
        c.step = 2;
        assert!(matches!(oracle.commits(&c, &mut rng, &[2]), Err(Error::TraceExhausted { .. })));
    }

    #[test]
    fn deterministic_curve() {
        let o = DeterministicOracle::geometric_rounded(0.8, 16);
        assert_eq!(o.curve[..8], [1, 2, 2, 3, 3, 4, 4, 4]);
        assert_eq!(o.count_for(16), 5);
        assert_eq!(o.count_for(100), 5);
        assert_eq!(DeterministicOracle::fixed(3).count_for(2), 2);
    }

    #[test]
    fn trace_jsonl_round_trip() {
        let mut trace = CommitTrace::new();
        trace.insert(2, 0, vec![0, 1, 4]);
        trace.insert(2, 1, vec![2, 3]);
        trace.insert(9, 0, vec![0]);
        let mut buf = Vec::new();
        trace.write_jsonl(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text.lines().next().unwrap(), r#"{"request_id":2,"step":0,"positions":[0,1,4]}"#);
        assert_eq!(CommitTrace::read_jsonl(buf.as_slice()).unwrap(), trace);
        assert!(trace.covers_exactly(2, 5));
        assert!(!trace.covers_exactly(2, 6));
    }

    #[test]
    fn block_moments_trivial_cases() {
        // q = 0: one commit per step, B steps, each contributing 1.
        let (s, t) = block_process_moments(0.0, 1.0, 8);
        assert!((s - 8.0).abs() < 1e-12 && (t - 8.0).abs() < 1e-12);
        // Multiplier large enough that every rank commits: one step of B.
        let (s, t) = block_process_moments(0.999, 4.0, 4);
        assert!((s - 1.0).abs() < 1e-12 && (t - 16.0).abs() < 1e-12);
    }

    #[test]
    fn block_moments_two_position_block_by_hand() {
        // Block of 2: rank 1 commits with prob p = q. Steps = 1 + (1-p).
        let q = 0.3;
        let (s, t) = block_process_moments(q, 1.0, 2);
        assert!((s - (2.0 - q)).abs() < 1e-12);
        // Sum of squares: p*4 + (1-p)*(1 + 1).
        assert!((t - (4.0 * q + 2.0 * (1.0 - q))).abs() < 1e-12);
    }
}
