//! Run summaries and SLO capacity search.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par::Exec;
use crate::sim::{run, LoadMode, Scenario};
use crate::types::{IterationKind, IterationRecord, RequestSummary};
use crate::workload::ArrivalProcess;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    /// Committed tokens per second of decode time.
    pub decode_throughput: f64,
    pub tpot_p50: f64,
    pub tpot_p90: f64,
    pub tpot_p99: f64,
    pub mean_tu: f64,
    pub mean_batch: f64,
    pub mean_chunk: f64,
    pub median_chunk: u32,
    pub completed: usize,
}

/// Time per output token, anchored at the first committed token.
pub fn tpot(r: &RequestSummary) -> Result<f64> {
    if r.committed < 2 {
        return Err(Error::SingleToken(r.id));
    }
    match (r.first_token_time, r.finish_time) {
        (Some(first), Some(finish)) => Ok((finish - first) / f64::from(r.committed - 1)),
        _ => Err(Error::InvalidScenario(format!("request {} has not finished", r.id))),
    }
}

/// Nearest-rank percentile of ascending `sorted`; `p` in (0, 1].
pub fn percentile<T: Copy>(sorted: &[T], p: f64) -> Option<T> {
    if sorted.is_empty() {
        return None;
    }
    let rank = (p * sorted.len() as f64).ceil().max(1.0) as usize;
    Some(sorted[rank.min(sorted.len()) - 1])
}

/// Aggregates decode records and TPOT over the given requests.
///
/// Requests with fewer than two tokens are skipped for TPOT.
pub fn summarize(records: &[IterationRecord], requests: &[RequestSummary]) -> Result<RunSummary> {
    let decode: Vec<&IterationRecord> = records.iter().filter(|r| r.kind == IterationKind::Decode).collect();
    let mut tpots: Vec<f64> = requests.iter().filter_map(|r| tpot(r).ok()).collect();
    if decode.is_empty() || tpots.is_empty() {
        return Err(Error::EmptyRun);
    }
    tpots.sort_by(f64::total_cmp);
    let committed: u64 = decode.iter().map(|r| r.committed_tokens).sum();
    let computed: u64 = decode.iter().map(|r| r.computed_tokens).sum();
    let time: f64 = decode.iter().map(|r| r.latency).sum();
    let n = decode.len() as f64;
    let mut chunks: Vec<u32> = decode.iter().map(|r| r.chunk_size).collect();
    chunks.sort_unstable();
    Ok(RunSummary {
        decode_throughput: committed as f64 / time,
        tpot_p50: percentile(&tpots, 0.50).expect("nonempty"),
        tpot_p90: percentile(&tpots, 0.90).expect("nonempty"),
        tpot_p99: percentile(&tpots, 0.99).expect("nonempty"),
        mean_tu: if computed == 0 { 0.0 } else { committed as f64 / computed as f64 },
        mean_batch: decode.iter().map(|r| f64::from(r.batch_size)).sum::<f64>() / n,
        mean_chunk: chunks.iter().map(|&c| f64::from(c)).sum::<f64>() / n,
        median_chunk: percentile(&chunks, 0.5).expect("nonempty"),
        completed: requests.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateBounds {
    pub low: f64,
    pub high: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CapacityResult {
    /// Largest probed rate meeting the SLO.
    pub rate: f64,
    /// Every probe as (rate, median P90 TPOT).
    pub probes: Vec<(f64, f64)>,
}

/// Relative bracket width at which bisection stops.
pub const CAPACITY_TOLERANCE: f64 = 0.02;
const GRID_RATIO: f64 = 2.0;

/// Median P90 TPOT over `seeds` at `rate`, using the template's request
/// count and arrival process.
pub fn probe_p90(template: &Scenario, rate: f64, seeds: &[u64], exec: Exec) -> Result<f64> {
    let (requests, arrival) = match template.load {
        LoadMode::OpenLoop { requests, arrival, .. } => (requests, arrival),
        _ => (500, ArrivalProcess::Poisson),
    };
    let load = LoadMode::OpenLoop { rate, requests, arrival };
    let results =
        exec.map(seeds, |&seed| -> Result<f64> { Ok(run(&template.with_load(load.clone()).with_seed(seed))?.summary()?.tpot_p90) });
    let mut p90 = results.into_iter().collect::<Result<Vec<f64>>>()?;
    p90.sort_by(f64::total_cmp);
    Ok(p90[(p90.len() - 1) / 2])
}

/// Highest arrival rate whose median P90 TPOT stays within `slo` seconds.
///
/// A geometric grid from `bounds.low` brackets the first violation, then
/// bisection narrows it to [`CAPACITY_TOLERANCE`].
pub fn slo_capacity(template: &Scenario, slo: f64, bounds: RateBounds, seeds: &[u64], exec: Exec) -> Result<CapacityResult> {
    if !(bounds.low > 0.0 && bounds.high > bounds.low) {
        return Err(Error::InvalidScenario(format!("rate bounds must satisfy 0 < low < high, got {bounds:?}")));
    }
    if seeds.is_empty() {
        return Err(Error::InvalidScenario("capacity search needs at least one seed".into()));
    }
    if slo.is_infinite() && slo > 0.0 {
        return Ok(CapacityResult { rate: bounds.high, probes: vec![] });
    }
    let mut probes = Vec::new();
    let mut probe = |rate: f64| -> Result<bool> {
        let p = probe_p90(template, rate, seeds, exec)?;
        probes.push((rate, p));
        Ok(p <= slo)
    };
    if !probe(bounds.low)? {
        let p90 = probes[0].1;
        return Err(Error::SloInfeasible { rate: bounds.low, p90, slo });
    }
    let mut lo = bounds.low;
    let hi = loop {
        let next = (lo * GRID_RATIO).min(bounds.high);
        if probe(next)? {
            if next >= bounds.high {
                return Ok(CapacityResult { rate: bounds.high, probes });
            }
            lo = next;
        } else {
            break next;
        }
    };
    let mut hi = hi;
    while hi / lo - 1.0 > CAPACITY_TOLERANCE {
        let mid = (lo * hi).sqrt();
        if probe(mid)? {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(CapacityResult { rate: lo, probes })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn req(id: u64, first: f64, finish: f64, committed: u32) -> RequestSummary {
        RequestSummary {
            id,
            arrival_time: 0.0,
            prompt_tokens: 1,
            output_tokens: committed,
            committed,
            decode_steps: 1,
            prefill_done_time: Some(0.0),
            first_token_time: Some(first),
            finish_time: Some(finish),
        }
    }

    fn decode(committed: u64, computed: u64, latency: f64) -> IterationRecord {
        IterationRecord {
            clock_start: 0.0,
            latency,
            batch_size: 1,
            chunk_size: 32,
            computed_tokens: computed,
            committed_tokens: committed,
            kind: IterationKind::Decode,
        }
    }

    #[test]
    fn tpot_arithmetic() {
        assert!((tpot(&req(0, 1.0, 2.0, 11)).unwrap() - 0.1).abs() < 1e-12);
        assert_eq!(tpot(&req(3, 1.0, 1.0, 1)), Err(Error::SingleToken(3)));
    }

    #[test]
    fn nearest_rank_percentiles() {
        let xs: Vec<u32> = (1..=10).collect();
        assert_eq!(percentile(&xs, 0.5), Some(5));
        assert_eq!(percentile(&xs, 0.9), Some(9));
        assert_eq!(percentile(&xs, 0.91), Some(10));
        assert_eq!(percentile(&xs, 0.99), Some(10));
        assert_eq!(percentile::<u32>(&[], 0.5), None);
        assert_eq!(percentile(&[7], 0.01), Some(7));
    }

    #[test]
    fn single_record_summary() {
        let s = summarize(&[decode(5, 32, 0.05)], &[req(0, 0.0, 0.2, 5)]).unwrap();
        assert!((s.decode_throughput - 100.0).abs() < 1e-9);
        assert!((s.mean_tu - 5.0 / 32.0).abs() < 1e-12);
    }

    #[test]
    fn prefill_rows_are_excluded() {
        let mut pre = decode(0, 200, 1.0);
        pre.kind = IterationKind::Prefill;
        let s = summarize(&[pre, decode(5, 32, 0.05)], &[req(0, 0.0, 0.2, 5)]).unwrap();
        assert!((s.decode_throughput - 100.0).abs() < 1e-9);
    }

    #[test]
    fn empty_run() {
        assert_eq!(summarize(&[decode(1, 1, 0.1)], &[]), Err(Error::EmptyRun));
        assert_eq!(summarize(&[decode(1, 1, 0.1)], &[req(0, 0.0, 1.0, 1)]), Err(Error::EmptyRun));
        assert_eq!(summarize(&[], &[req(0, 0.0, 1.0, 4)]), Err(Error::EmptyRun));
    }
}
