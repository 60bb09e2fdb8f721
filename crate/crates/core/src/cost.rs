//! Piecewise-affine iteration latency over total computed tokens.
//!
//! Three regimes (memory-bound, transition, compute-bound) are modeled as
//! affine segments `t = intercept + slope * x`. The model is continuous,
//! nondecreasing and convex: slopes never decrease from one segment to the
//! next.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const CONTINUITY_TOL: f64 = 1e-9;

pub const SEGMENT_LABELS: [&str; 3] = ["memory_bound", "transition", "compute_bound"];

/// One affine regime, in seconds and tokens.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Segment {
    pub x_start: f64,
    /// Seconds per computed token.
    pub slope: f64,
    /// Seconds at x = 0 of the extended line (not at `x_start`).
    pub intercept: f64,
}

impl Segment {
    fn at(&self, x: f64) -> f64 {
        self.intercept + self.slope * x
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostModel {
    segments: [Segment; 3],
    /// Seconds per context token (prompt plus committed output) of every
    /// batch member, charged once per decode iteration. Zero by default.
    pub seq_surcharge: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        CostModel::reference()
    }
}

/// Multiplier on the base shape (6 ms, {0.5, 8, 14} us/token) of
/// [`CostModel::reference`]. Scaling leaves every throughput ratio and
/// chunk choice unchanged; it only moves where latency targets bind.
pub const REFERENCE_SCALE: f64 = 6.0;

impl CostModel {
    /// Builds and validates a model from explicit segments.
    pub fn new(segments: [Segment; 3]) -> Result<Self> {
        let m = CostModel { segments, seq_surcharge: 0.0 };
        m.validate()?;
        Ok(m)
    }

    /// Continuous model from the first intercept, the three slopes and the
    /// two breakpoints. All arguments in seconds and tokens.
    pub fn from_breakpoints(intercept: f64, slopes: [f64; 3], breakpoints: [f64; 2]) -> Result<Self> {
        let s0 = Segment { x_start: 0.0, slope: slopes[0], intercept };
        let y1 = s0.at(breakpoints[0]);
        let s1 = Segment { x_start: breakpoints[0], slope: slopes[1], intercept: y1 - slopes[1] * breakpoints[0] };
        let y2 = s1.at(breakpoints[1]);
        let s2 = Segment { x_start: breakpoints[1], slope: slopes[2], intercept: y2 - slopes[2] * breakpoints[1] };
        CostModel::new([s0, s1, s2])
    }

    /// Built-in model used when no profile is supplied.
    ///
    /// Saturation (onset of the compute-bound segment) at 512 tokens. The
    /// absolute scale is set so a 50 ms TPOT target binds below the
    /// batch ceiling; see [`REFERENCE_SCALE`].
    pub fn reference() -> Self {
        CostModel::from_breakpoints(6e-3, [0.5e-6, 8e-6, 14e-6], [128.0, 512.0]).expect("reference model is valid").scaled(REFERENCE_SCALE)
    }

    pub fn with_seq_surcharge(mut self, seconds_per_token: f64) -> Result<Self> {
        if !(seconds_per_token.is_finite() && seconds_per_token >= 0.0) {
            return Err(Error::InvalidCostModel(format!("sequence surcharge must be finite and >= 0, got {seconds_per_token}")));
        }
        self.seq_surcharge = seconds_per_token;
        Ok(self)
    }

    pub fn segments(&self) -> &[Segment; 3] {
        &self.segments
    }

    pub fn breakpoints(&self) -> [f64; 2] {
        [self.segments[1].x_start, self.segments[2].x_start]
    }

    pub fn validate(&self) -> Result<()> {
        let s = &self.segments;
        if s.iter().any(|g| !(g.x_start.is_finite() && g.slope.is_finite() && g.intercept.is_finite())) {
            return Err(Error::InvalidCostModel("non-finite coefficient".into()));
        }
        if s[0].x_start != 0.0 {
            return Err(Error::InvalidCostModel(format!("first segment must start at 0, got {}", s[0].x_start)));
        }
        if !(s[0].x_start < s[1].x_start && s[1].x_start < s[2].x_start) {
            return Err(Error::InvalidCostModel("segment starts must be strictly increasing".into()));
        }
        if s[0].slope < 0.0 {
            return Err(Error::InvalidCostModel("slopes must be nonnegative".into()));
        }
        if s[1].slope < s[0].slope || s[2].slope < s[1].slope {
            return Err(Error::InvalidCostModel("slopes must be nondecreasing across segments".into()));
        }
        for k in 1..3 {
            let x = s[k].x_start;
            let gap = (s[k - 1].at(x) - s[k].at(x)).abs();
            if gap > CONTINUITY_TOL {
                return Err(Error::InvalidCostModel(format!("discontinuity of {gap:e} s at x = {x}")));
            }
        }
        Ok(())
    }

    /// Latency in seconds of an iteration computing `x` tokens.
    pub fn eval(&self, x: f64) -> f64 {
        let seg = self.segments.iter().rev().find(|s| x >= s.x_start).unwrap_or(&self.segments[0]);
        seg.at(x)
    }

    pub fn latency(&self, computed_tokens: u64) -> f64 {
        self.eval(computed_tokens as f64)
    }

    /// Latency including the per-context-token surcharge.
    pub fn latency_with_context(&self, computed_tokens: u64, context_tokens: u64) -> f64 {
        self.latency(computed_tokens) + self.seq_surcharge * context_tokens as f64
    }

    /// Multiplies every latency by `k > 0`.
    pub fn scaled(&self, k: f64) -> Self {
        let mut out = self.clone();
        for s in &mut out.segments {
            s.slope *= k;
            s.intercept *= k;
        }
        out.seq_surcharge *= k;
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&CostModelFile::from(self)).expect("cost model serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: CostModelFile = serde_json::from_str(text)?;
        file.try_into()
    }

    pub fn read_json<R: Read>(reader: R) -> Result<Self> {
        let file: CostModelFile = serde_json::from_reader(reader)?;
        file.try_into()
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SegmentFile {
    x_start: f64,
    slope_us_per_token: f64,
    intercept_ms: f64,
}

/// On-disk model: milliseconds and microseconds per token.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CostModelFile {
    segments: Vec<SegmentFile>,
    #[serde(default, skip_serializing_if = "is_zero")]
    seq_surcharge_us_per_token: f64,
}

fn is_zero(v: &f64) -> bool {
    *v == 0.0
}

impl From<&CostModel> for CostModelFile {
    fn from(m: &CostModel) -> Self {
        CostModelFile {
            segments: m
                .segments
                .iter()
                .map(|s| SegmentFile { x_start: s.x_start, slope_us_per_token: s.slope * 1e6, intercept_ms: s.intercept * 1e3 })
                .collect(),
            seq_surcharge_us_per_token: m.seq_surcharge * 1e6,
        }
    }
}

impl TryFrom<CostModelFile> for CostModel {
    type Error = Error;

    fn try_from(f: CostModelFile) -> Result<Self> {
        if f.segments.len() != 3 {
            return Err(Error::InvalidCostModel(format!("expected exactly 3 segments, got {}", f.segments.len())));
        }
        let seg = |i: usize| Segment {
            x_start: f.segments[i].x_start,
            slope: f.segments[i].slope_us_per_token * 1e-6,
            intercept: f.segments[i].intercept_ms * 1e-3,
        };
        CostModel::new([seg(0), seg(1), seg(2)])?.with_seq_surcharge(f.seq_surcharge_us_per_token * 1e-6)
    }
}

/// One profiling measurement.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProfileSample {
    pub x: f64,
    pub latency_ms: f64,
}

/// Reads a profile CSV with header `x,latency_ms`.
pub fn read_profile_csv<R: Read>(reader: R) -> Result<Vec<ProfileSample>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let headers = rdr.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != ["x", "latency_ms"] {
        return Err(Error::Io(format!(
            "profile CSV header must be `x,latency_ms`, got `{}`",
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }
    rdr.deserialize().map(|r| r.map_err(Error::from)).collect()
}

pub fn write_profile_csv<W: Write>(samples: &[ProfileSample], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for s in samples {
        w.serialize(s)?;
    }
    w.flush()?;
    Ok(())
}

pub const MIN_PROFILE_SAMPLES: usize = 9;

/// Fits a continuous three-segment model to `(tokens, seconds)` samples.
///
/// Both breakpoints are grid-searched over the sample x values; each segment
/// must contain at least 3 distinct x values (a breakpoint counts for both
/// of its segments). Squared errors are relative (weight `1/t^2`) when all
/// latencies are positive. For each candidate pair the hinge model
/// `a + s1*x + d2*(x-k1)+ + d3*(x-k2)+` is fit by least squares under
/// `s1, d2, d3 >= 0`, which makes the result continuous, nondecreasing and
/// convex by construction. The constrained problem is solved exactly by
/// enumerating active sets.
pub fn fit(samples: &[(f64, f64)]) -> Result<CostModel> {
    if samples.len() < MIN_PROFILE_SAMPLES {
        return Err(Error::InsufficientProfile { samples: samples.len() });
    }
    if samples.iter().any(|&(x, t)| !(x.is_finite() && t.is_finite() && x >= 0.0)) {
        return Err(Error::InvalidCostModel("profile samples must be finite with x >= 0".into()));
    }
    let mut xs: Vec<f64> = samples.iter().map(|s| s.0).collect();
    xs.sort_by(f64::total_cmp);
    xs.dedup();
    let n = xs.len();

    // Latency noise scales with latency, so residuals are weighted by
    // 1/t^2 (relative error) when every sample is positive.
    let weights: Vec<f64> =
        if samples.iter().all(|s| s.1 > 0.0) { samples.iter().map(|s| s.1.powi(-2)).collect() } else { vec![1.0; samples.len()] };
    let mut best: Option<(f64, [f64; 4], f64, f64)> = None;
    // xs[i] = k1 needs >= 3 distinct values in [0, k1]: i >= 2.
    for i in 2..n {
        for j in (i + 2)..n.saturating_sub(2) {
            let (k1, k2) = (xs[i], xs[j]);
            let Some((coef, sse)) = fit_hinge(samples, &weights, k1, k2) else { continue };
            let better = match best {
                None => true,
                Some((b, ..)) => sse < b - 1e-12 * b.max(f64::MIN_POSITIVE),
            };
            if better {
                best = Some((sse, coef, k1, k2));
            }
        }
    }
    let (_, [a, s1, d2, d3], k1, k2) = best.ok_or(Error::InsufficientProfile { samples: samples.len() })?;
    CostModel::from_breakpoints(a, [s1, s1 + d2, s1 + d2 + d3], [k1, k2])
}

/// Same as [`fit`] on profile rows (milliseconds).
pub fn fit_profile(samples: &[ProfileSample]) -> Result<CostModel> {
    let pts: Vec<(f64, f64)> = samples.iter().map(|s| (s.x, s.latency_ms * 1e-3)).collect();
    fit(&pts)
}

fn hinge_row(x: f64, k1: f64, k2: f64) -> [f64; 4] {
    [1.0, x, (x - k1).max(0.0), (x - k2).max(0.0)]
}

/// Best nonnegativity-constrained hinge fit for fixed breakpoints.
fn fit_hinge(samples: &[(f64, f64)], weights: &[f64], k1: f64, k2: f64) -> Option<([f64; 4], f64)> {
    let mut ata = [[0.0; 4]; 4];
    let mut atb = [0.0; 4];
    for (&(x, t), &w) in samples.iter().zip(weights) {
        let r = hinge_row(x, k1, k2);
        for p in 0..4 {
            for q in 0..4 {
                ata[p][q] += w * r[p] * r[q];
            }
            atb[p] += w * r[p] * t;
        }
    }
    let mut best: Option<([f64; 4], f64)> = None;
    // Bit k set: constrained coefficient k+1 is free.
    for mask in 0..8u32 {
        let free: Vec<usize> = std::iter::once(0).chain((1..4).filter(|k| mask & (1 << (k - 1)) != 0)).collect();
        let m = free.len();
        let a = DMatrix::from_fn(m, m, |r, c| ata[free[r]][free[c]]);
        let b = DVector::from_fn(m, |r, _| atb[free[r]]);
        let Some(sol) = solve(a, b) else { continue };
        if sol.iter().skip(1).any(|&v| v < 0.0) {
            continue;
        }
        let mut coef = [0.0; 4];
        for (&p, &v) in free.iter().zip(&sol) {
            coef[p] = v;
        }
        let sse: f64 = samples
            .iter()
            .zip(weights)
            .map(|(&(x, t), &w)| {
                let r = hinge_row(x, k1, k2);
                let pred: f64 = r.iter().zip(&coef).map(|(a, b)| a * b).sum();
                w * (pred - t).powi(2)
            })
            .sum();
        if best.as_ref().is_none_or(|(_, b)| sse < *b) {
            best = Some((coef, sse));
        }
    }
    best
}

/// Solves `a x = b` by LU with partial pivoting; `None` when a pivot is
/// negligible against the largest entry.
fn solve(a: DMatrix<f64>, b: DVector<f64>) -> Option<DVector<f64>> {
    let scale = a.amax();
    let lu = a.lu();
    if lu.u().diagonal().iter().any(|p| p.abs() <= 1e-13 * scale) {
        return None;
    }
    lu.solve(&b)
}
