use std::collections::BTreeMap;

use alphaloop::dsl::{parse, signature, PatternSignature};
use alphaloop::memory::{
    form, seed_memory, ExperienceMemory, MemoryConfig, Outcome, Stage, TrajectoryRecord,
};
use proptest::prelude::*;

const FORMULAS: [&str; 4] = [
    "Neg(TsRank(Sub($close, $open), 12))",
    "Neg(CsRank($returns))",
    "Div(Std($volume, 6), Mean($volume, 24))",
    "Corr($close, $volume, 12)",
];

const OUTCOMES: [Outcome; 5] = [
    Outcome::Admitted,
    Outcome::ReplacedIn,
    Outcome::RejectedIc,
    Outcome::RejectedCorr,
    Outcome::RejectedDup,
];

fn record(formula: &str, outcome: Outcome, blocking: u64) -> TrajectoryRecord {
    let expr = parse(formula).unwrap();
    let corr = outcome == Outcome::RejectedCorr;
    TrajectoryRecord {
        batch: 0,
        name: "x".into(),
        formula: expr.format(),
        signature: signature(&expr),
        fitness: 0.02,
        icir: 0.3,
        max_corr: if corr { 0.8 } else { 0.1 },
        blocking: if corr { vec![blocking] } else { vec![] },
        outcome,
        stage: Stage::Correlation,
        library_id: outcome.is_success().then_some(1),
        replaced: (outcome == Outcome::ReplacedIn).then_some(2),
        error: None,
    }
}

#[derive(Clone, Copy, PartialEq, Debug)]
enum Class {
    Unknown,
    Recommended,
    Forbidden,
}

/// Straight-line restatement of the classification rule over cumulative
/// counts, applied to each signature touched in a batch.
#[derive(Default)]
struct Oracle {
    counts: BTreeMap<String, (u64, u64, u64, Option<Class>)>,
}

impl Oracle {
    fn step(&mut self, batch: &[TrajectoryRecord], cfg: &MemoryConfig) {
        let mut seen: BTreeMap<String, (u64, u64, u64)> = BTreeMap::new();
        for r in batch {
            let e = seen.entry(r.signature.to_string()).or_default();
            e.0 += 1;
            e.1 += r.outcome.is_success() as u64;
            e.2 += (r.outcome == Outcome::RejectedCorr) as u64;
        }
        for (sig, (a, s, c)) in seen {
            let e = self.counts.entry(sig).or_insert((0, 0, 0, None));
            e.0 += a;
            e.1 += s;
            e.2 += c;
            let rate = e.1 as f64 / e.0 as f64;
            let cur = e.3.unwrap_or(Class::Unknown);
            e.3 = Some(if s > 0 {
                Class::Recommended
            } else if e.2 >= cfg.f_min && rate < cfg.forbid_rate {
                Class::Forbidden
            } else if cur == Class::Recommended && e.0 >= cfg.prune_attempts && rate < cfg.prune_rate {
                Class::Unknown
            } else {
                cur
            });
        }
    }

    fn class(&self, sig: &PatternSignature) -> Class {
        self.counts.get(&sig.to_string()).and_then(|e| e.3).unwrap_or(Class::Unknown)
    }
}

fn class_of(mem: &ExperienceMemory, sig: &PatternSignature) -> Class {
    match (mem.is_recommended(sig), mem.is_forbidden(sig)) {
        (true, false) => Class::Recommended,
        (false, true) => Class::Forbidden,
        (false, false) => Class::Unknown,
        (true, true) => panic!("{sig} in both lists"),
    }
}

fn batch_strategy() -> impl Strategy<Value = Vec<(usize, usize, u64)>> {
    prop::collection::vec((0..FORMULAS.len(), 0..OUTCOMES.len(), 1..6u64), 0..12)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn scripted_evolution_matches_oracle(batches in prop::collection::vec(batch_strategy(), 1..12)) {
        let cfg = MemoryConfig { f_min: 3, forbid_rate: 0.10, prune_attempts: 6, prune_rate: 0.2 };
        let mut mem = ExperienceMemory::new();
        let mut oracle = Oracle::default();
        for script in &batches {
            let traj: Vec<TrajectoryRecord> =
                script.iter().map(|&(f, o, b)| record(FORMULAS[f], OUTCOMES[o], b)).collect();
            mem = mem.evolve(&form(&traj), &cfg);
            oracle.step(&traj, &cfg);
            prop_assert!(mem.check().is_ok());
            for f in FORMULAS {
                let sig = signature(&parse(f).unwrap());
                prop_assert_eq!(class_of(&mem, &sig), oracle.class(&sig), "{}", sig);
                if let Some(t) = mem.state.tallies.get(&sig.to_string()) {
                    let e = oracle.counts[&sig.to_string()];
                    prop_assert_eq!((t.attempts, t.successes, t.corr_rejections), (e.0, e.1, e.2));
                }
            }
            // a saved memory resumes exactly where the live one is
            let back = ExperienceMemory::from_json(&mem.to_json()).unwrap();
            prop_assert_eq!(&back, &mem);
        }
        prop_assert_eq!(mem.state.batches_run, batches.len() as u64);
    }
}

#[test]
fn forbidden_entry_collects_blocking_ids() {
    let cfg = MemoryConfig::default();
    let f = FORMULAS[0];
    let mut mem = ExperienceMemory::new();
    for id in [9, 9, 4, 11, 4] {
        mem = mem.evolve(&form(&[record(f, Outcome::RejectedCorr, id)]), &cfg);
    }
    // ids accumulate from the batch that forbids the pattern onward
    let entry = &mem.forbidden[0];
    assert_eq!(entry.correlated_ids, vec![4, 11]);
    assert_eq!(entry.rejections, 5);
    assert_eq!(entry.example.as_deref(), Some(f));
    assert_eq!(mem.state.recent_blocking.len(), 1);
}

#[test]
fn seed_memory_survives_disk_round_trip() {
    let seed = seed_memory(&MemoryConfig::default());
    assert_eq!((seed.recommended.len(), seed.forbidden.len()), (8, 9));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("memory.json");
    seed.save(&path).unwrap();
    assert_eq!(ExperienceMemory::load(&path).unwrap(), seed);
}

#[test]
fn malformed_memory_reports_path() {
    let err = ExperienceMemory::from_json(r#"{"state": {"library_size": "many"}}"#).unwrap_err();
    assert!(err.to_string().contains("state.library_size"), "{err}");
    let missing = ExperienceMemory::load(std::path::Path::new("/nonexistent/memory.json")).unwrap_err();
    assert!(missing.to_string().starts_with("io error"));
}
