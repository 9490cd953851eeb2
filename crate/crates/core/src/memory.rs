//! Experience memory distilled from mining trajectories: per-pattern
//! tallies, recommended and forbidden directions, and free-text insights.
//!
//! Formation, evolution and retrieval are deterministic counting rules so the
//! mechanism can be exercised without a language model.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsl::{parse, signature, PatternSignature};
use crate::library::FactorLibrary;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Admitted,
    ReplacedIn,
    RejectedIc,
    RejectedCorr,
    RejectedDup,
}

impl Outcome {
    pub fn is_success(self) -> bool {
        matches!(self, Outcome::Admitted | Outcome::ReplacedIn)
    }
}

/// Pipeline stage at which a candidate reached its terminal outcome.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Stage {
    #[serde(rename = "1")]
    FastScreen,
    #[serde(rename = "2")]
    Correlation,
    #[serde(rename = "2.5")]
    Replacement,
    #[serde(rename = "3")]
    Dedup,
    #[serde(rename = "4")]
    Validation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub batch: u64,
    pub name: String,
    pub formula: String,
    pub signature: PatternSignature,
    pub fitness: f64,
    pub icir: f64,
    pub max_corr: f64,
    #[serde(default)]
    pub blocking: Vec<u64>,
    pub outcome: Outcome,
    pub stage: Stage,
    /// Library id assigned on admission.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub library_id: Option<u64>,
    /// Library id removed by a replacement.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub replaced: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl TrajectoryRecord {
    pub fn is_consistent(&self) -> bool {
        match self.outcome {
            Outcome::RejectedCorr => !self.blocking.is_empty(),
            Outcome::Admitted => self.library_id.is_some(),
            Outcome::ReplacedIn => self.library_id.is_some() && self.replaced.is_some(),
            Outcome::RejectedIc | Outcome::RejectedDup => self.library_id.is_none(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Tally {
    pub attempts: u64,
    pub successes: u64,
    pub corr_rejections: u64,
}

impl Tally {
    pub fn success_rate(&self) -> f64 {
        if self.attempts == 0 {
            0.0
        } else {
            self.successes as f64 / self.attempts as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct MiningState {
    pub library_size: usize,
    pub batches_run: u64,
    /// Every signature seen so far, keyed by its text form.
    pub tallies: BTreeMap<String, Tally>,
    /// (signature, blocking library id) pairs from the latest batch.
    pub recent_blocking: Vec<(String, u64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recommended {
    pub signature: PatternSignature,
    #[serde(default)]
    pub name: String,
    #[serde(default)]
    pub description: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub example: Option<String>,
    pub successes: u64,
    pub attempts: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Forbidden {
    pub signature: PatternSignature,
    #[serde(default)]
    pub name: String,
    #[serde(default)]
    pub correlated_ids: Vec<u64>,
    pub max_abs_corr: f64,
    pub rejections: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub example: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ExperienceMemory {
    #[serde(default)]
    pub state: MiningState,
    #[serde(default)]
    pub recommended: Vec<Recommended>,
    #[serde(default)]
    pub forbidden: Vec<Forbidden>,
    #[serde(default)]
    pub insights: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MemoryConfig {
    /// Correlation rejections needed before a pattern is forbidden.
    pub f_min: u64,
    /// A pattern is forbidden only while its admission rate is below this.
    pub forbid_rate: f64,
    /// Recommended entries with at least this many attempts ...
    pub prune_attempts: u64,
    /// ... and a success rate below this are dropped.
    pub prune_rate: f64,
}

impl Default for MemoryConfig {
    fn default() -> Self {
        MemoryConfig {
            f_min: 3,
            forbid_rate: 0.10,
            prune_attempts: 10,
            prune_rate: 0.05,
        }
    }
}

/// Evidence about one signature extracted from a trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct SignatureDelta {
    pub signature: PatternSignature,
    pub attempts: u64,
    pub successes: u64,
    pub corr_rejections: u64,
    pub blocking: BTreeSet<u64>,
    pub max_abs_corr: f64,
    /// First formula seen with this signature.
    pub example: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MemoryDelta {
    /// Sorted by signature.
    pub entries: Vec<SignatureDelta>,
    pub blocking_pairs: Vec<(String, u64)>,
}

impl MemoryDelta {
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, sig: &PatternSignature) -> Option<&SignatureDelta> {
        self.entries.iter().find(|d| &d.signature == sig)
    }
}

/// Extracts per-signature evidence from a batch trajectory.
pub fn form(trajectory: &[TrajectoryRecord]) -> MemoryDelta {
    let mut by_sig: BTreeMap<PatternSignature, SignatureDelta> = BTreeMap::new();
    let mut blocking_pairs = Vec::new();
    for r in trajectory {
        let d = by_sig
            .entry(r.signature.clone())
            .or_insert_with(|| SignatureDelta {
                signature: r.signature.clone(),
                attempts: 0,
                successes: 0,
                corr_rejections: 0,
                blocking: BTreeSet::new(),
                max_abs_corr: 0.0,
                example: r.formula.clone(),
            });
        d.attempts += 1;
        if r.outcome.is_success() {
            d.successes += 1;
        }
        if r.outcome == Outcome::RejectedCorr {
            d.corr_rejections += 1;
            d.blocking.extend(r.blocking.iter().copied());
            if r.max_corr.abs() > d.max_abs_corr {
                d.max_abs_corr = r.max_corr.abs();
            }
            for &id in &r.blocking {
                blocking_pairs.push((r.signature.to_string(), id));
            }
        }
    }
    MemoryDelta {
        entries: by_sig.into_values().collect(),
        blocking_pairs,
    }
}

impl ExperienceMemory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_recommended(&self, sig: &PatternSignature) -> bool {
        self.recommended.iter().any(|r| &r.signature == sig)
    }

    pub fn is_forbidden(&self, sig: &PatternSignature) -> bool {
        self.forbidden.iter().any(|f| &f.signature == sig)
    }

    /// Tally for `sig`, falling back to the counts carried by its entry.
    fn tally_of(&self, key: &str, sig: &PatternSignature) -> Tally {
        if let Some(t) = self.state.tallies.get(key) {
            return *t;
        }
        if let Some(r) = self.recommended.iter().find(|r| &r.signature == sig) {
            return Tally {
                attempts: r.attempts,
                successes: r.successes,
                corr_rejections: 0,
            };
        }
        if let Some(f) = self.forbidden.iter().find(|f| &f.signature == sig) {
            return Tally {
                attempts: f.rejections,
                successes: 0,
                corr_rejections: f.rejections,
            };
        }
        Tally::default()
    }

    /// Merges a delta into the memory and reclassifies touched signatures.
    pub fn evolve(mut self, delta: &MemoryDelta, cfg: &MemoryConfig) -> ExperienceMemory {
        self.state.batches_run += 1;
        self.state.recent_blocking = delta.blocking_pairs.clone();
        for d in &delta.entries {
            let key = d.signature.to_string();
            let mut t = self.tally_of(&key, &d.signature);
            t.attempts += d.attempts;
            t.successes += d.successes;
            t.corr_rejections += d.corr_rejections;
            self.state.tallies.insert(key, t);

            let fpos = self.forbidden.iter().position(|f| f.signature == d.signature);
            let rpos = self.recommended.iter().position(|r| r.signature == d.signature);

            if d.successes > 0 {
                if let Some(i) = fpos {
                    self.forbidden.remove(i);
                }
                match rpos {
                    Some(i) => {
                        let r = &mut self.recommended[i];
                        r.successes = t.successes;
                        r.attempts = t.attempts;
                    }
                    None => self.recommended.push(Recommended {
                        signature: d.signature.clone(),
                        name: String::new(),
                        description: String::new(),
                        example: Some(d.example.clone()),
                        successes: t.successes,
                        attempts: t.attempts,
                    }),
                }
                continue;
            }

            if t.corr_rejections >= cfg.f_min && t.success_rate() < cfg.forbid_rate {
                if let Some(i) = rpos {
                    self.recommended.remove(i);
                }
                match fpos {
                    Some(i) => {
                        let f = &mut self.forbidden[i];
                        f.rejections = t.corr_rejections;
                        let mut ids: BTreeSet<u64> = f.correlated_ids.iter().copied().collect();
                        ids.extend(d.blocking.iter().copied());
                        f.correlated_ids = ids.into_iter().collect();
                        f.max_abs_corr = f.max_abs_corr.max(d.max_abs_corr);
                    }
                    None => self.forbidden.push(Forbidden {
                        signature: d.signature.clone(),
                        name: String::new(),
                        correlated_ids: d.blocking.iter().copied().collect(),
                        max_abs_corr: d.max_abs_corr,
                        rejections: t.corr_rejections,
                        example: Some(d.example.clone()),
                    }),
                }
                continue;
            }

            if let Some(i) = rpos {
                let r = &mut self.recommended[i];
                r.successes = t.successes;
                r.attempts = t.attempts;
                if r.attempts >= cfg.prune_attempts && t.success_rate() < cfg.prune_rate {
                    self.recommended.remove(i);
                }
            }
            if let Some(i) = fpos {
                let f = &mut self.forbidden[i];
                f.rejections = t.corr_rejections;
                f.correlated_ids.extend(d.blocking.iter().copied());
                f.correlated_ids.sort_unstable();
                f.correlated_ids.dedup();
                f.max_abs_corr = f.max_abs_corr.max(d.max_abs_corr);
            }
        }
        debug_assert!(self.check().is_ok());
        self
    }

    /// Checks the structural invariants.
    pub fn check(&self) -> Result<(), String> {
        let forbidden: BTreeSet<&PatternSignature> =
            self.forbidden.iter().map(|f| &f.signature).collect();
        for r in &self.recommended {
            if forbidden.contains(&r.signature) {
                return Err(format!("{} is both recommended and forbidden", r.signature));
            }
            if r.successes > r.attempts {
                return Err(format!("{} has more successes than attempts", r.signature));
            }
        }
        for (k, t) in &self.state.tallies {
            if t.successes > t.attempts {
                return Err(format!("{k} has more successes than attempts"));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("memory serializes") + "\n"
    }

    pub fn from_json(text: &str) -> Result<ExperienceMemory, MemoryError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let mem: ExperienceMemory =
            serde_path_to_error::deserialize(de).map_err(|e| MemoryError::Schema {
                path: e.path().to_string(),
                message: e.inner().to_string(),
            })?;
        mem.check().map_err(MemoryError::Invariant)?;
        Ok(mem)
    }

    pub fn save(&self, path: &Path) -> Result<(), MemoryError> {
        fs::write(path, self.to_json()).map_err(|source| MemoryError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<ExperienceMemory, MemoryError> {
        let text = fs::read_to_string(path).map_err(|source| MemoryError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }
}

#[derive(Debug, Error)]
pub enum MemoryError {
    #[error("memory schema violation at `{path}`: {message}")]
    Schema { path: String, message: String },
    #[error("memory invariant violated: {0}")]
    Invariant(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightedSignature {
    pub signature: PatternSignature,
    pub weight: f64,
    pub description: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForbiddenFilter {
    pub signature: PatternSignature,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LibrarySummary {
    pub size: usize,
    /// Library entries per signature.
    pub saturation: BTreeMap<String, usize>,
}

/// What the generator sees of the memory at the start of a batch.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MemorySignal {
    pub recommended: Vec<WeightedSignature>,
    pub forbidden: Vec<ForbiddenFilter>,
    pub library: LibrarySummary,
    #[serde(default)]
    pub recent_blocking: Vec<(String, u64)>,
    #[serde(default)]
    pub insights: Vec<String>,
}

impl MemorySignal {
    pub fn empty() -> Self {
        Self::default()
    }

    /// True when the signal carries no steering information.
    pub fn is_empty(&self) -> bool {
        self.recommended.is_empty() && self.forbidden.is_empty()
    }

    pub fn forbids(&self, sig: &PatternSignature) -> bool {
        self.forbidden.iter().any(|f| &f.signature == sig)
    }
}

pub fn smoothed_weight(successes: u64, attempts: u64) -> f64 {
    (successes as f64 + 1.0) / (attempts as f64 + 2.0)
}

pub fn retrieve(memory: &ExperienceMemory, lib: &FactorLibrary) -> MemorySignal {
    let recommended = memory
        .recommended
        .iter()
        .map(|r| WeightedSignature {
            signature: r.signature.clone(),
            weight: smoothed_weight(r.successes, r.attempts),
            description: describe(&r.name, &r.description, r.example.as_deref()),
        })
        .collect();
    let forbidden = memory
        .forbidden
        .iter()
        .map(|f| {
            let ids: Vec<String> = f.correlated_ids.iter().map(|i| format!("{i:03}")).collect();
            let mut reason = format!(
                "|rho| up to {:.2} with [{}] over {} rejections",
                f.max_abs_corr,
                ids.join(", "),
                f.rejections
            );
            if !f.name.is_empty() {
                reason = format!("{}: {reason}", f.name);
            }
            ForbiddenFilter {
                signature: f.signature.clone(),
                reason,
            }
        })
        .collect();
    let mut saturation = BTreeMap::new();
    for e in lib.entries() {
        *saturation.entry(signature(&e.expr).to_string()).or_insert(0) += 1;
    }
    MemorySignal {
        recommended,
        forbidden,
        library: LibrarySummary {
            size: lib.len(),
            saturation,
        },
        recent_blocking: memory.state.recent_blocking.clone(),
        insights: memory.insights.clone(),
    }
}

fn describe(name: &str, description: &str, example: Option<&str>) -> String {
    let mut parts = Vec::new();
    if !name.is_empty() {
        parts.push(name.to_string());
    }
    if !description.is_empty() {
        parts.push(description.to_string());
    }
    if let Some(e) = example {
        parts.push(format!("e.g. {e}"));
    }
    parts.join(" - ")
}

// (name, description, example, successes, attempts)
const SEED_RECOMMENDED: [(&str, &str, &str, u64, u64); 8] = [
    (
        "Higher moment regimes",
        "Skew or Kurt as an IfElse condition switching reversal logic in asymmetric or fat-tailed windows.",
        "IfElse(Greater(Skew($returns, 24), 1.0), Neg(Delta($close, 3)), Slope($close, 12))",
        3, 4,
    ),
    (
        "Price-volume correlation interaction",
        "Rolling Corr of price and volume combined with amount efficiency.",
        "Mul(Corr($close, $volume, 24), Div($returns, $amount))",
        3, 4,
    ),
    (
        "Robust efficiency",
        "Median-smoothed amount efficiency to suppress outliers.",
        "Neg(Med(Div($returns, $amount), 12))",
        3, 4,
    ),
    (
        "Smoothed efficiency rank",
        "EMA of amount efficiency before the cross-sectional rank.",
        "CsRank(EMA(Div($returns, $amount), 12))",
        3, 4,
    ),
    (
        "Adaptive trend regression",
        "Slope reversal when the fit is good, residual reversal when it is poor.",
        "IfElse(Greater(Rsquare($close, 24), 0.5), Neg(Slope($close, 24)), Neg(Resi($close, 24)))",
        3, 4,
    ),
    (
        "Or-combined extreme regimes",
        "Or of several volume and price extremes as the branch condition.",
        "IfElse(Or(Greater($volume, Mean($volume, 48)), Greater(Abs($returns), Std($returns, 48))), Neg($returns), $returns)",
        3, 4,
    ),
    (
        "Kurtosis regime",
        "Kurtosis picks the reversal horizon.",
        "IfElse(Greater(Kurt($returns, 48), 3.0), Neg(Delta($close, 6)), Neg(Delta($close, 24)))",
        3, 4,
    ),
    (
        "Efficiency rank interaction",
        "Time-series rank of amount efficiency times a distribution statistic.",
        "Mul(TsRank(Div($returns, $amount), 24), Kurt($returns, 24))",
        2, 4,
    ),
];

// (name, example, correlated ids, level)
const SEED_FORBIDDEN: [(&str, &str, &[u64], f64); 9] = [
    (
        "Standardized returns over amount",
        "Div(Div($returns, $amount), Std(Div($returns, $amount), 24))",
        &[6, 8, 9],
        0.6,
    ),
    (
        "VWAP deviation variants",
        "Neg(TsRank(Div(Sub($close, $vwap), $vwap), 24))",
        &[6, 9, 12, 13, 16],
        0.5,
    ),
    (
        "Mean reversion to moving average",
        "Neg(Div(Sub($close, Mean($close, 24)), Mean($close, 24)))",
        &[1, 2],
        0.5,
    ),
    ("Simple delta reversal", "Neg(Delta($close, 3))", &[23, 24], 0.5),
    (
        "Close position in range",
        "Div(Sub($close, $low), Sub($high, $low))",
        &[28, 44],
        0.87,
    ),
    (
        "Volatility branch on price position",
        "IfElse(Greater(Std($returns, 12), Mean(Std($returns, 12), 48)), Neg(CsRank(Delta($close, 3))), Neg(CsRank(Div(Sub($close, $low), Add(Sub($high, $low), 0.0001)))))",
        &[46, 64],
        0.6,
    ),
    (
        "Trend following weighted by fit",
        "Mul(Rsquare($close, 24), Slope($close, 24))",
        &[81, 83],
        0.6,
    ),
    (
        "Fit-weighted momentum",
        "Mul(Rsquare($close, 48), Delta($close, 12))",
        &[2, 23],
        0.7,
    ),
    (
        "Smoothed efficiency without rank",
        "WMA(Div($returns, $amount), 12)",
        &[92],
        0.9,
    ),
];

const SEED_INSIGHTS: [&str; 3] = [
    "Close-to-VWAP distances form the densest redundancy cluster; rescaling them by volatility or volume does not escape it.",
    "Regression operators (Slope, Rsquare, Resi) tend to stay orthogonal to price-deviation factors.",
    "Distinct formulas can compute the same signal; check structure before spending evaluation on a variant.",
];

/// The memory the engine ships with: eight recommended and nine forbidden
/// directions, each anchored on an example formula.
pub fn seed_memory(cfg: &MemoryConfig) -> ExperienceMemory {
    let sig_of = |text: &str| signature(&parse(text).expect("seed formula parses"));
    let mut mem = ExperienceMemory::new();
    for (name, description, example, successes, attempts) in SEED_RECOMMENDED {
        let sig = sig_of(example);
        mem.state.tallies.insert(
            sig.to_string(),
            Tally {
                attempts,
                successes,
                corr_rejections: 0,
            },
        );
        mem.recommended.push(Recommended {
            signature: sig,
            name: name.into(),
            description: description.into(),
            example: Some(parse(example).unwrap().format()),
            successes,
            attempts,
        });
    }
    for (name, example, ids, level) in SEED_FORBIDDEN {
        let sig = sig_of(example);
        mem.state.tallies.insert(
            sig.to_string(),
            Tally {
                attempts: cfg.f_min,
                successes: 0,
                corr_rejections: cfg.f_min,
            },
        );
        mem.forbidden.push(Forbidden {
            signature: sig,
            name: name.into(),
            correlated_ids: ids.to_vec(),
            max_abs_corr: level,
            rejections: cfg.f_min,
            example: Some(parse(example).unwrap().format()),
        });
    }
    mem.insights = SEED_INSIGHTS.iter().map(|s| s.to_string()).collect();
    mem
}

/// The seed as shipped in `data/memory_seed.json`.
pub const SEED_JSON: &str = include_str!("../data/memory_seed.json");
