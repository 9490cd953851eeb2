//! The factor library: admission control under a pairwise correlation
//! budget, single-slot replacement, and TSV persistence.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsl::{parse, FactorExpr};
use crate::kernels::{evaluate, Backend, EvalError};
use crate::metrics::{FactorStats, RankedSignal};
use crate::panel::{forward_return, Panel};
use crate::signal::SignalMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdmissionThresholds {
    pub tau_ic: f64,
    pub theta: f64,
    pub repl_ic_floor: f64,
    pub repl_ratio: f64,
}

impl Default for AdmissionThresholds {
    fn default() -> Self {
        AdmissionThresholds {
            tau_ic: 0.04,
            theta: 0.5,
            repl_ic_floor: 0.10,
            repl_ratio: 1.3,
        }
    }
}

impl AdmissionThresholds {
    pub fn new(tau_ic: f64, theta: f64) -> Self {
        AdmissionThresholds {
            tau_ic,
            theta,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.theta > 0.0 && self.theta < 1.0) {
            return Err(format!("theta must lie in (0, 1), got {}", self.theta));
        }
        if !(self.tau_ic > 0.0) {
            return Err(format!("tau_ic must be positive, got {}", self.tau_ic));
        }
        if !(self.repl_ratio > 1.0) {
            return Err(format!("repl_ratio must exceed 1, got {}", self.repl_ratio));
        }
        if !self.repl_ic_floor.is_finite() {
            return Err("repl_ic_floor must be finite".into());
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum LibraryError {
    #[error("stale decision: checked against version {checked}, library is at {current}")]
    Stale { checked: u64, current: u64 },
    #[error("{path}:{line}: {message}")]
    Format {
        path: String,
        line: usize,
        message: String,
    },
    #[error("integrity violation: factors {a} and {b} have |rho| = {rho:.6} >= theta {theta}")]
    Integrity { a: u64, b: u64, rho: f64, theta: f64 },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{0}")]
    Eval(#[from] EvalError),
    #[error("{0}")]
    Invalid(String),
}

/// An evaluated formula ready for an admission check.
#[derive(Debug, Clone)]
pub struct Candidate {
    pub name: String,
    pub expr: FactorExpr,
    pub stats: FactorStats,
    pub signal: RankedSignal,
}

impl Candidate {
    pub fn new(name: impl Into<String>, expr: FactorExpr, signal: SignalMatrix, target: &SignalMatrix) -> Self {
        let stats = FactorStats::compute(&signal, target).expect("signal and target share axes");
        Candidate {
            name: name.into(),
            expr,
            stats,
            signal: RankedSignal::new(signal),
        }
    }

    pub fn evaluate(
        name: impl Into<String>,
        expr: FactorExpr,
        panel: &Panel,
        target: &SignalMatrix,
        backend: Backend,
    ) -> Result<Self, EvalError> {
        let signal = evaluate(&expr, panel, backend)?;
        Ok(Self::new(name, expr, signal, target))
    }

    pub fn fitness(&self) -> f64 {
        self.stats.fitness
    }
}

#[derive(Debug, Clone)]
pub struct LibraryEntry {
    pub id: u64,
    pub name: String,
    pub expr: FactorExpr,
    pub stats: FactorStats,
    pub signal: RankedSignal,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Decision {
    Admit,
    Replace { target: u64 },
    RejectLowIc,
    RejectCorrelation { blocking: Vec<u64> },
}

/// A decision together with the correlations it was based on and the
/// library version it was computed against.
#[derive(Debug, Clone, PartialEq)]
pub struct Checked {
    pub decision: Decision,
    pub version: u64,
    /// Signed rho against every entry, in library order.
    pub correlations: Vec<(u64, f64)>,
    pub max_corr: f64,
    pub argmax: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Applied {
    pub admitted: Option<u64>,
    pub removed: Option<u64>,
}

#[derive(Debug, Clone)]
pub struct FactorLibrary {
    thresholds: AdmissionThresholds,
    entries: Vec<LibraryEntry>,
    /// Signed rho for every entry pair, keyed (smaller id, larger id).
    pair_corr: BTreeMap<(u64, u64), f64>,
    next_id: u64,
    version: u64,
}

fn pair_key(a: u64, b: u64) -> (u64, u64) {
    (a.min(b), a.max(b))
}

impl FactorLibrary {
    pub fn new(thresholds: AdmissionThresholds) -> Self {
        FactorLibrary {
            thresholds,
            entries: Vec::new(),
            pair_corr: BTreeMap::new(),
            next_id: 1,
            version: 0,
        }
    }

    pub fn thresholds(&self) -> &AdmissionThresholds {
        &self.thresholds
    }

    pub fn entries(&self) -> &[LibraryEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn next_id(&self) -> u64 {
        self.next_id
    }

    pub fn get(&self, id: u64) -> Option<&LibraryEntry> {
        self.entries.iter().find(|e| e.id == id)
    }

    pub fn cached_corr(&self, a: u64, b: u64) -> Option<f64> {
        self.pair_corr.get(&pair_key(a, b)).copied()
    }

    pub fn total_fitness(&self) -> f64 {
        self.entries.iter().map(|e| e.stats.fitness).sum()
    }

    /// Signed rho of `signal` against every entry. Pairs with no evaluable
    /// bar count as uncorrelated.
    pub fn correlations(&self, signal: &RankedSignal) -> Vec<(u64, f64)> {
        self.entries
            .iter()
            .map(|e| (e.id, signal.corr(&e.signal).unwrap_or(0.0)))
            .collect()
    }

    /// The entry with the largest |rho| against `signal` (earliest on ties),
    /// or `(None, 0.0)` for an empty library.
    pub fn max_corr(&self, signal: &RankedSignal) -> (Option<u64>, f64) {
        argmax_abs(&self.correlations(signal))
    }

    pub fn check_admission(&self, cand: &Candidate) -> Checked {
        let correlations = if cand.fitness() < self.thresholds.tau_ic {
            Vec::new()
        } else {
            self.correlations(&cand.signal)
        };
        self.decide(cand.fitness(), correlations)
    }

    /// Decision from precomputed correlations (used when the caller already
    /// holds them).
    pub fn decide(&self, fitness: f64, correlations: Vec<(u64, f64)>) -> Checked {
        let th = &self.thresholds;
        let (argmax, max_corr) = argmax_abs(&correlations);
        let decision = if fitness < th.tau_ic {
            Decision::RejectLowIc
        } else {
            let violators: Vec<u64> = correlations
                .iter()
                .filter(|(_, r)| r.abs() >= th.theta)
                .map(|(id, _)| *id)
                .collect();
            match violators.as_slice() {
                [] => Decision::Admit,
                [g] => {
                    let incumbent = self.get(*g).map_or(f64::INFINITY, |e| e.stats.fitness);
                    if fitness >= th.repl_ic_floor && fitness >= th.repl_ratio * incumbent {
                        Decision::Replace { target: *g }
                    } else {
                        Decision::RejectCorrelation {
                            blocking: violators,
                        }
                    }
                }
                _ => Decision::RejectCorrelation {
                    blocking: violators,
                },
            }
        };
        Checked {
            decision,
            version: self.version,
            correlations,
            max_corr,
            argmax,
        }
    }

    /// Applies a decision computed against the current version.
    pub fn apply(&mut self, checked: &Checked, cand: Candidate) -> Result<Applied, LibraryError> {
        if checked.version != self.version {
            return Err(LibraryError::Stale {
                checked: checked.version,
                current: self.version,
            });
        }
        let removed = match checked.decision {
            Decision::RejectLowIc | Decision::RejectCorrelation { .. } => {
                return Ok(Applied {
                    admitted: None,
                    removed: None,
                })
            }
            Decision::Admit => None,
            Decision::Replace { target } => {
                self.remove(target);
                Some(target)
            }
        };
        let id = self.next_id;
        self.next_id += 1;
        for &(other, rho) in &checked.correlations {
            if Some(other) != removed {
                assert!(
                    rho.abs() < self.thresholds.theta,
                    "admitting {id} would violate the correlation budget against {other}"
                );
                self.pair_corr.insert(pair_key(id, other), rho);
            }
        }
        let mut stats = cand.stats;
        stats.max_library_corr = checked
            .correlations
            .iter()
            .filter(|(o, _)| Some(*o) != removed)
            .map(|(_, r)| r.abs())
            .fold(0.0, f64::max);
        self.entries.push(LibraryEntry {
            id,
            name: cand.name,
            expr: cand.expr,
            stats,
            signal: cand.signal,
        });
        self.version += 1;
        Ok(Applied {
            admitted: Some(id),
            removed,
        })
    }

    fn remove(&mut self, id: u64) {
        self.entries.retain(|e| e.id != id);
        self.pair_corr.retain(|&(a, b), _| a != id && b != id);
    }

    /// Recomputes every pairwise rho from the stored signals and checks the
    /// budget.
    pub fn verify(&self) -> Result<(), LibraryError> {
        for (i, a) in self.entries.iter().enumerate() {
            for b in &self.entries[i + 1..] {
                let rho = a.signal.corr(&b.signal).unwrap_or(0.0);
                if rho.abs() >= self.thresholds.theta {
                    return Err(LibraryError::Integrity {
                        a: a.id,
                        b: b.id,
                        rho: rho.abs(),
                        theta: self.thresholds.theta,
                    });
                }
            }
        }
        Ok(())
    }

    /// Largest recomputed pairwise |rho| (0 for fewer than two entries).
    pub fn max_pairwise_corr(&self) -> f64 {
        let mut m: f64 = 0.0;
        for (i, a) in self.entries.iter().enumerate() {
            for b in &self.entries[i + 1..] {
                m = m.max(a.signal.corr(&b.signal).unwrap_or(0.0).abs());
            }
        }
        m
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::new();
        for e in &self.entries {
            let name: String = e
                .name
                .chars()
                .map(|c| if c == '\t' || c == '\n' || c == '\r' { ' ' } else { c })
                .collect();
            s.push_str(&format!("{}\t{}\t{}\n", e.id, name, e.expr));
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<(), LibraryError> {
        let io = |source| LibraryError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut f = fs::File::create(path).map_err(io)?;
        f.write_all(self.to_tsv().as_bytes()).map_err(io)?;
        Ok(())
    }

    /// Reads a library file, re-evaluates every formula on `panel` and
    /// re-verifies the correlation budget.
    pub fn load(
        path: &Path,
        panel: &Panel,
        thresholds: AdmissionThresholds,
        backend: Backend,
    ) -> Result<FactorLibrary, LibraryError> {
        let text = fs::read_to_string(path).map_err(|source| LibraryError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_tsv(&text, &path.display().to_string(), panel, thresholds, backend)
    }

    pub fn from_tsv(
        text: &str,
        origin: &str,
        panel: &Panel,
        thresholds: AdmissionThresholds,
        backend: Backend,
    ) -> Result<FactorLibrary, LibraryError> {
        let target = forward_return(panel).map_err(|e| LibraryError::Invalid(e.to_string()))?;
        let fmt_err = |line: usize, message: String| LibraryError::Format {
            path: origin.to_string(),
            line,
            message,
        };
        let mut lib = FactorLibrary::new(thresholds);
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            if raw.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = raw.splitn(3, '\t').collect();
            let [id, name, formula] = parts[..] else {
                return Err(fmt_err(line, "expected id<TAB>name<TAB>formula".into()));
            };
            let id: u64 = id
                .trim()
                .parse()
                .map_err(|_| fmt_err(line, format!("invalid id `{id}`")))?;
            if lib.get(id).is_some() {
                return Err(fmt_err(line, format!("duplicate id {id}")));
            }
            let expr = parse(formula).map_err(|e| fmt_err(line, e.to_string()))?;
            let cand = Candidate::evaluate(name, expr, panel, &target, backend)
                .map_err(|e| fmt_err(line, e.to_string()))?;
            let correlations = lib.correlations(&cand.signal);
            if let Some(&(other, rho)) = correlations.iter().find(|(_, r)| r.abs() >= thresholds.theta) {
                return Err(LibraryError::Integrity {
                    a: other,
                    b: id,
                    rho: rho.abs(),
                    theta: thresholds.theta,
                });
            }
            for &(other, rho) in &correlations {
                lib.pair_corr.insert(pair_key(id, other), rho);
            }
            let mut stats = cand.stats;
            stats.max_library_corr = correlations.iter().map(|(_, r)| r.abs()).fold(0.0, f64::max);
            lib.entries.push(LibraryEntry {
                id,
                name: cand.name,
                expr: cand.expr,
                stats,
                signal: cand.signal,
            });
            lib.next_id = lib.next_id.max(id + 1);
        }
        Ok(lib)
    }
}

fn argmax_abs(correlations: &[(u64, f64)]) -> (Option<u64>, f64) {
    let mut best: (Option<u64>, f64) = (None, 0.0);
    for &(id, r) in correlations {
        if best.0.is_none() || r.abs() > best.1 {
            best = (Some(id), r.abs());
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::FactorStats;

    fn stats(fitness: f64) -> FactorStats {
        FactorStats {
            ic_mean: fitness,
            ic_abs_mean: fitness,
            icir: 1.0,
            daily_win_rate: 1.0,
            fitness,
            max_library_corr: 0.0,
        }
    }

    fn cand(name: &str, rows: &[Vec<f64>], fitness: f64) -> Candidate {
        Candidate {
            name: name.into(),
            expr: parse("Neg($close)").unwrap(),
            stats: stats(fitness),
            signal: RankedSignal::new(SignalMatrix::from_rows(rows)),
        }
    }

    fn base() -> Vec<Vec<f64>> {
        vec![vec![1.0, 2.0, 3.0, 4.0, 5.0], vec![5.0, 1.0, 4.0, 2.0, 3.0]]
    }

    #[test]
    fn low_ic_rejected_before_correlation() {
        let lib = FactorLibrary::new(AdmissionThresholds::default());
        let c = lib.check_admission(&cand("a", &base(), 0.03));
        assert_eq!(c.decision, Decision::RejectLowIc);
        let c = lib.check_admission(&cand("a", &base(), 0.062));
        assert_eq!(c.decision, Decision::Admit);
        assert_eq!((c.argmax, c.max_corr), (None, 0.0));
    }

    #[test]
    fn admit_then_duplicate_is_blocked() {
        let mut lib = FactorLibrary::new(AdmissionThresholds::default());
        let a = cand("a", &base(), 0.05);
        let chk = lib.check_admission(&a);
        let applied = lib.apply(&chk, a.clone()).unwrap();
        assert_eq!(applied.admitted, Some(1));
        let (id, r) = lib.max_corr(&a.signal);
        assert_eq!((id, r), (Some(1), 1.0));
        let chk = lib.check_admission(&cand("b", &base(), 0.06));
        assert_eq!(chk.decision, Decision::RejectCorrelation { blocking: vec![1] });
    }

    #[test]
    fn replacement_rules() {
        let lib_with = |fit: f64| {
            let mut lib = FactorLibrary::new(AdmissionThresholds::default());
            let a = cand("a", &base(), fit);
            let chk = lib.check_admission(&a);
            lib.apply(&chk, a).unwrap();
            lib
        };
        // 0.101 >= floor but < 1.3 * 0.09
        let lib = lib_with(0.09);
        let d = lib.decide(0.101, vec![(1, 0.74)]).decision;
        assert_eq!(d, Decision::RejectCorrelation { blocking: vec![1] });
        // 0.12 >= 0.10 and >= 1.3 * 0.08
        let mut lib = lib_with(0.08);
        let c = cand("b", &base(), 0.12);
        let chk = lib.decide(0.12, vec![(1, 0.6)]);
        assert_eq!(chk.decision, Decision::Replace { target: 1 });
        let before = lib.total_fitness();
        let applied = lib.apply(&chk, c).unwrap();
        assert_eq!(applied, Applied { admitted: Some(2), removed: Some(1) });
        assert_eq!(lib.len(), 1);
        assert!(lib.total_fitness() > before);
        assert!(lib.get(1).is_none());
    }

    #[test]
    fn stale_decisions_conflict() {
        let mut lib = FactorLibrary::new(AdmissionThresholds::default());
        let a = cand("a", &base(), 0.05);
        let chk = lib.check_admission(&a);
        lib.apply(&chk, a.clone()).unwrap();
        assert!(matches!(lib.apply(&chk, a), Err(LibraryError::Stale { .. })));
    }

    #[test]
    fn reject_is_a_no_op() {
        let mut lib = FactorLibrary::new(AdmissionThresholds::default());
        let a = cand("a", &base(), 0.01);
        let chk = lib.check_admission(&a);
        let v = lib.version();
        assert_eq!(
            lib.apply(&chk, a).unwrap(),
            Applied {
                admitted: None,
                removed: None
            }
        );
        assert_eq!((lib.len(), lib.version()), (0, v));
    }

    #[test]
    fn thresholds_validate() {
        assert!(AdmissionThresholds::default().validate().is_ok());
        assert!(AdmissionThresholds::new(0.04, 1.0).validate().is_err());
        assert!(AdmissionThresholds::new(0.0, 0.5).validate().is_err());
    }
}
