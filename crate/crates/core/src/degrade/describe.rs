//! Template descriptions of a degradation spec.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::DegradationSpec;
use crate::error::{Error, Result};
use crate::rng;

const DESCRIBE_SALT: u64 = 0x6465_7363;

const LIT: &str = "The image is well lit.";
const DARK: &str = "The image is dark.";
const NO_RAIN: &str = "No rain streaks detected.";
const RAIN: &str = "The image is degraded by rain streaks.";
const NO_NOISE: &str = "No noise detected.";
const NO_CLAUSES: &str = "No degradation information is available.";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    OracleGt,
    OracleGf,
    OracleNoisy,
    Mllm,
    User,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DescriptionText {
    pub text: String,
    pub provenance: Provenance,
}

impl DescriptionText {
    pub fn new(text: impl Into<String>, provenance: Provenance) -> Result<Self> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(Error::invalid("description text must be non-empty"));
        }
        Ok(Self { text, provenance })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum DescribeMode {
    /// Accurate description.
    Gt,
    /// Every clause negated.
    Gf,
    /// Accurate description with each clause corrupted with probability `p`.
    Noisy { p: f64 },
}

impl DescribeMode {
    pub const DEFAULT_CORRUPTION: f64 = 0.3;

    pub fn noisy() -> Self {
        Self::Noisy { p: Self::DEFAULT_CORRUPTION }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseLevel {
    Low,
    Medium,
    High,
}

impl NoiseLevel {
    const ALL: [NoiseLevel; 3] = [NoiseLevel::Low, NoiseLevel::Medium, NoiseLevel::High];

    fn word(self) -> &'static str {
        match self {
            Self::Low => "low",
            Self::Medium => "medium",
            Self::High => "high",
        }
    }
}

/// Buckets σ ≤ 15 → low, ≤ 25 → medium, otherwise high.
pub fn noise_level(sigma: f64) -> NoiseLevel {
    if sigma <= 15.0 {
        NoiseLevel::Low
    } else if sigma <= 25.0 {
        NoiseLevel::Medium
    } else {
        NoiseLevel::High
    }
}

fn noise_clause(level: NoiseLevel) -> String {
    format!("The image has gaussian noise degradation and the noise level is {}.", level.word())
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Clause {
    Light { dark: bool },
    Rain { present: bool },
    Noise(Option<NoiseLevel>),
}

impl Clause {
    fn render(self) -> String {
        match self {
            Clause::Light { dark: true } => DARK.into(),
            Clause::Light { dark: false } => LIT.into(),
            Clause::Rain { present: true } => RAIN.into(),
            Clause::Rain { present: false } => NO_RAIN.into(),
            Clause::Noise(Some(level)) => noise_clause(level),
            Clause::Noise(None) => NO_NOISE.into(),
        }
    }

    fn flipped(self) -> Clause {
        match self {
            Clause::Light { dark } => Clause::Light { dark: !dark },
            Clause::Rain { present } => Clause::Rain { present: !present },
            Clause::Noise(Some(_)) => Clause::Noise(None),
            Clause::Noise(None) => Clause::Noise(Some(NoiseLevel::High)),
        }
    }
}

fn gt_clauses(spec: &DegradationSpec) -> [Clause; 3] {
    [
        Clause::Light { dark: spec.has_low_light() },
        Clause::Rain { present: spec.has_rain() },
        Clause::Noise(spec.has_noise().then(|| noise_level(spec.noise_sigma))),
    ]
}

fn join(clauses: impl IntoIterator<Item = Clause>) -> String {
    let parts: Vec<String> = clauses.into_iter().map(Clause::render).collect();
    if parts.is_empty() {
        NO_CLAUSES.into()
    } else {
        parts.join(" ")
    }
}

/// Renders the light, rain and noise clauses for `spec`.
///
/// The identity spec has nothing to negate, so its `Gf` rendering equals
/// its `Gt` rendering.
pub fn describe(spec: &DegradationSpec, mode: DescribeMode, seed: u64) -> DescriptionText {
    let gt = gt_clauses(spec);
    let (text, provenance) = match mode {
        DescribeMode::Gt => (join(gt), Provenance::OracleGt),
        DescribeMode::Gf if spec.is_identity() => (join(gt), Provenance::OracleGf),
        DescribeMode::Gf => (join(gt.map(Clause::flipped)), Provenance::OracleGf),
        DescribeMode::Noisy { p } => (join(corrupt(gt, p, seed)), Provenance::OracleNoisy),
    };
    DescriptionText { text, provenance }
}

fn corrupt(clauses: [Clause; 3], p: f64, seed: u64) -> Vec<Clause> {
    let mut rng = rng::stream(seed, DESCRIBE_SALT);
    let mut out = Vec::with_capacity(3);
    for clause in clauses {
        if rng.random::<f64>() >= p {
            out.push(clause);
            continue;
        }
        // 0 = drop, 1 = flip, 2 = level shift (only for present noise)
        let options = if matches!(clause, Clause::Noise(Some(_))) { 3 } else { 2 };
        match rng.random_range(0..options) {
            0 => {}
            1 => out.push(clause.flipped()),
            _ => {
                let Clause::Noise(Some(level)) = clause else { unreachable!() };
                let others: Vec<NoiseLevel> = NoiseLevel::ALL.into_iter().filter(|l| *l != level).collect();
                out.push(Clause::Noise(Some(others[rng.random_range(0..others.len())])));
            }
        }
    }
    out
}
