//! Dataset profiles and request-trace generation.

use std::io::{BufRead, Write};

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, LogNormal};
use serde::{Deserialize, Serialize};

use crate::commit::CommitProfile;
use crate::error::{Error, Result};
use crate::rng::{stream_rng, WORKLOAD_STREAM};

/// Model variant whose tokens-per-step statistics a profile carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelVariant {
    #[serde(rename = "sdar-8b")]
    Sdar8b,
    #[serde(rename = "llada2-16b")]
    Llada2_16b,
}

impl ModelVariant {
    pub const ALL: [ModelVariant; 2] = [ModelVariant::Sdar8b, ModelVariant::Llada2_16b];

    pub fn name(self) -> &'static str {
        match self {
            ModelVariant::Sdar8b => "sdar-8b",
            ModelVariant::Llada2_16b => "llada2-16b",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        ModelVariant::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidScenario(format!("unknown model `{s}` (expected sdar-8b or llada2-16b)")))
    }
}

/// Mean and standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub mean: f64,
    pub std: f64,
}

const fn m(mean: f64, std: f64) -> Moments {
    Moments { mean, std }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetProfile {
    pub name: String,
    pub prompt: Moments,
    pub output: Moments,
    /// Block-32 tokens per step for SDAR-8B and LLaDA2.0-16B.
    pub tokens_per_step: [Moments; 2],
}

struct Preset {
    name: &'static str,
    prompt: Moments,
    output: Moments,
    tps: [Moments; 2],
    /// Frozen `(q, sigma)` per model variant from `calibrate_profile` at
    /// block 32 over the default sigma grid.
    commit: [(f64, f64); 2],
    slo: Option<f64>,
}

const PRESETS: [Preset; 7] = [
    Preset {
        name: "sharegpt",
        prompt: m(213.0, 508.0),
        output: m(321.0, 214.0),
        tps: [m(5.29, 9.44), m(2.51, 4.19)],
        commit: [(0.876616, 0.6), (0.640079, 0.6)],
        slo: Some(0.050),
    },
    Preset {
        name: "lmsys",
        prompt: m(89.0, 133.0),
        output: m(183.0, 163.0),
        tps: [m(4.81, 8.80), m(2.52, 4.84)],
        commit: [(0.855396, 0.6), (0.641892, 0.6)],
        slo: Some(0.050),
    },
    Preset {
        name: "longbench",
        prompt: m(4015.0, 2057.0),
        output: m(116.0, 138.0),
        tps: [m(6.06, 10.74), m(1.63, 1.90)],
        commit: [(0.903742, 0.6), (0.393223, 0.6)],
        slo: Some(0.100),
    },
    Preset {
        name: "gsm8k",
        prompt: m(89.0, 22.0),
        output: m(175.0, 67.0),
        tps: [m(3.20, 5.68), m(2.61, 4.07)],
        commit: [(0.737843, 0.6), (0.657576, 0.6)],
        slo: None,
    },
    Preset {
        name: "humaneval",
        prompt: m(172.0, 65.0),
        output: m(103.0, 62.0),
        tps: [m(3.75, 5.96), m(6.01, 8.51)],
        commit: [(0.789479, 0.6), (0.902189, 0.6)],
        slo: None,
    },
    Preset {
        name: "mbpp",
        prompt: m(155.0, 77.0),
        output: m(49.0, 28.0),
        tps: [m(1.96, 3.33), m(3.34, 4.81)],
        commit: [(0.511379, 0.6), (0.752585, 0.6)],
        slo: None,
    },
    Preset {
        name: "ifeval",
        prompt: m(58.0, 24.0),
        output: m(281.0, 264.0),
        tps: [m(1.88, 3.90), m(1.28, 1.74)],
        commit: [(0.486360, 0.6), (0.209931, 0.6)],
        slo: None,
    },
];

pub const PRESET_NAMES: [&str; 7] = ["sharegpt", "lmsys", "longbench", "gsm8k", "humaneval", "mbpp", "ifeval"];

fn preset(name: &str) -> Result<&'static Preset> {
    PRESETS
        .iter()
        .find(|p| p.name == name)
        .ok_or_else(|| Error::InvalidScenario(format!("unknown dataset `{name}` (expected one of {})", PRESET_NAMES.join(", "))))
}

impl DatasetProfile {
    pub fn preset(name: &str) -> Result<Self> {
        let p = preset(name)?;
        Ok(DatasetProfile { name: p.name.into(), prompt: p.prompt, output: p.output, tokens_per_step: p.tps })
    }

    pub fn all_presets() -> Vec<Self> {
        PRESET_NAMES.iter().map(|n| DatasetProfile::preset(n).expect("preset exists")).collect()
    }

    pub fn tokens_per_step(&self, model: ModelVariant) -> Moments {
        self.tokens_per_step[model as usize]
    }

    /// Default TPOT SLO in seconds, where one is defined.
    pub fn default_slo(&self) -> Option<f64> {
        preset(&self.name).ok().and_then(|p| p.slo)
    }

    pub fn validate(&self) -> Result<()> {
        for (what, mo) in [("prompt", self.prompt), ("output", self.output)] {
            if !(mo.mean >= 1.0 && mo.std >= 0.0 && mo.mean.is_finite() && mo.std.is_finite()) {
                return Err(Error::InvalidScenario(format!("{what} length needs mean >= 1 and std >= 0")));
            }
        }
        Ok(())
    }
}

/// Frozen commit profile for a preset dataset and model.
pub fn preset_commit_profile(dataset: &str, model: ModelVariant) -> Result<CommitProfile> {
    let p = preset(dataset)?;
    let (q, sigma) = p.commit[model as usize];
    let t = p.tps[model as usize];
    let mut profile = CommitProfile::new(q, sigma)?;
    profile.calibration_note = format!("preset {}/{}: block-32 tokens/step {}({})", p.name, model.name(), t.mean, t.std);
    Ok(profile)
}

/// Draws a length with the given mean and std from a moment-matched
/// lognormal, rounded and clamped to at least 1.
pub fn sample_length(mean: f64, std: f64, rng: &mut ChaCha8Rng) -> u32 {
    if std <= 0.0 {
        return mean.round().max(1.0) as u32;
    }
    let s2 = (1.0 + (std / mean).powi(2)).ln();
    let mu = mean.ln() - s2 / 2.0;
    let d = LogNormal::new(mu, s2.sqrt()).expect("finite lognormal parameters");
    let x: f64 = d.sample(rng);
    x.round().clamp(1.0, f64::from(u32::MAX)) as u32
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRequest {
    pub id: u64,
    pub arrival_s: f64,
    pub prompt_tokens: u32,
    pub output_tokens: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArrivalProcess {
    #[default]
    Poisson,
    /// Evenly spaced arrivals at exactly `1 / rate`.
    Uniform,
}

/// Generates `n` requests at rate `rate` (req/s), starting at time 0.
pub fn generate_trace(profile: &DatasetProfile, rate: f64, n: usize, seed: u64) -> Result<Vec<TraceRequest>> {
    generate_trace_with(profile, rate, n, seed, ArrivalProcess::Poisson)
}

pub fn generate_trace_with(
    profile: &DatasetProfile,
    rate: f64,
    n: usize,
    seed: u64,
    arrivals: ArrivalProcess,
) -> Result<Vec<TraceRequest>> {
    if !(rate > 0.0 && rate.is_finite()) {
        return Err(Error::InvalidScenario(format!("arrival rate must be > 0, got {rate}")));
    }
    if n == 0 {
        return Err(Error::InvalidScenario("request count must be >= 1".into()));
    }
    let mut rng = stream_rng(seed, WORKLOAD_STREAM);
    let exp = Exp::new(rate).expect("positive rate");
    let mut t = 0.0;
    let mut out = Vec::with_capacity(n);
    for id in 0..n as u64 {
        t += match arrivals {
            ArrivalProcess::Poisson => loop {
                // Exp can return exactly 0 in principle; keep arrivals strictly increasing.
                let dt: f64 = exp.sample(&mut rng);
                if dt > 0.0 {
                    break dt;
                }
            },
            ArrivalProcess::Uniform => 1.0 / rate,
        };
        let prompt_tokens = sample_length(profile.prompt.mean, profile.prompt.std, &mut rng);
        let output_tokens = sample_length(profile.output.mean, profile.output.std, &mut rng);
        out.push(TraceRequest { id, arrival_s: t, prompt_tokens, output_tokens });
    }
    Ok(out)
}

pub fn write_trace_jsonl<W: Write>(trace: &[TraceRequest], mut out: W) -> Result<()> {
    for r in trace {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_trace_jsonl<R: BufRead>(input: R) -> Result<Vec<TraceRequest>> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let r: TraceRequest = serde_json::from_str(&line).map_err(|e| Error::Io(format!("trace line {}: {e}", i + 1)))?;
        if r.prompt_tokens == 0 || r.output_tokens == 0 {
            return Err(Error::InvalidScenario(format!("trace line {}: lengths must be >= 1", i + 1)));
        }
        out.push(r);
    }
    Ok(out)
}
