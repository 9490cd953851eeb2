mod common;

use alphaloop::dsl::parse;
use alphaloop::kernels::{evaluate, Backend};
use alphaloop::library::{AdmissionThresholds, Candidate, Decision, FactorLibrary, LibraryError};
use alphaloop::panel::{forward_return, synth_panel, Panel, SynthConfig};
use common::*;

fn panel() -> Panel {
    synth_panel(&SynthConfig::new(15, 400, 21).with_alpha(0.3)).unwrap()
}

fn build(panel: &Panel, formulas: &[&str], theta: f64) -> FactorLibrary {
    let target = forward_return(panel).unwrap();
    let mut lib = FactorLibrary::new(AdmissionThresholds::new(0.0, theta));
    for (i, f) in formulas.iter().enumerate() {
        let c = Candidate::evaluate(format!("f{i}"), parse(f).unwrap(), panel, &target, Backend::Optimized).unwrap();
        let ck = lib.check_admission(&c);
        assert_eq!(ck.decision, Decision::Admit, "{f}: {:?}", ck.correlations);
        lib.apply(&ck, c).unwrap();
    }
    lib
}

const THREE: [&str; 3] = ["Neg(CsRank($returns))", "TsRank($volume, 24)", FACTOR_046];

#[test]
fn max_corr_matches_oracle() {
    let p = panel();
    let lib = build(&p, &THREE, 0.95);
    let probe = evaluate(&parse("Neg(Delta($close, 1))").unwrap(), &p, Backend::Naive).unwrap();
    let target = forward_return(&p).unwrap();
    let cand = Candidate::new("probe", parse("Neg(Delta($close, 1))").unwrap(), probe.clone(), &target);
    let (arg, max) = lib.max_corr(&cand.signal);

    let oracle: Vec<f64> = lib
        .entries()
        .iter()
        .map(|e| corr_oracle(&probe, e.signal.signal()).unwrap())
        .collect();
    let (best, best_abs) = oracle
        .iter()
        .enumerate()
        .map(|(i, r)| (i, r.abs()))
        .fold((0, -1.0), |acc, x| if x.1 > acc.1 { x } else { acc });
    assert_eq!(arg, Some(lib.entries()[best].id));
    assert!(close_scaled(max, best_abs, 1e-12), "{max} vs {best_abs}");
    for (&(_, rho), o) in lib.correlations(&cand.signal).iter().zip(&oracle) {
        assert!(close_scaled(rho, *o, 1e-12));
    }
    assert!(close_scaled(lib.max_pairwise_corr(), {
        let s: Vec<_> = lib.entries().iter().map(|e| e.signal.signal().clone()).collect();
        let mut m = 0.0f64;
        for i in 0..3 {
            for j in i + 1..3 {
                m = m.max(corr_oracle(&s[i], &s[j]).unwrap().abs());
            }
        }
        m
    }, 1e-12));
}

#[test]
fn tsv_round_trip_reproduces_library() {
    let p = panel();
    let lib = build(&p, &THREE, 0.95);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("library.tsv");
    lib.save(&path).unwrap();
    let back = FactorLibrary::load(&path, &p, *lib.thresholds(), Backend::Naive).unwrap();
    assert_eq!(back.to_tsv(), lib.to_tsv());
    assert_eq!(back.next_id(), lib.next_id());
    for (a, b) in lib.entries().iter().zip(back.entries()) {
        assert_eq!(a.expr, b.expr);
        assert!(close_scaled(a.stats.fitness, b.stats.fitness, 1e-12));
    }
    back.verify().unwrap();
}

#[test]
fn duplicate_formula_violates_integrity() {
    let p = panel();
    let text = format!("1\ta\t{FACTOR_046}\n4\tb\tNeg(TsRank($volume, 24))\n7\tc\t{FACTOR_046}\n");
    let err = FactorLibrary::from_tsv(&text, "dup.tsv", &p, AdmissionThresholds::default(), Backend::Optimized)
        .unwrap_err();
    match err {
        LibraryError::Integrity { a, b, rho, .. } => {
            assert_eq!((a, b), (1, 7));
            assert!((rho - 1.0).abs() < 1e-12);
        }
        other => panic!("expected integrity error, got {other}"),
    }
}

#[test]
fn malformed_rows_are_located() {
    let p = panel();
    let th = AdmissionThresholds::default();
    let bad = FactorLibrary::from_tsv("1\ta\tNeg($close)\n\nx\tb\tNeg($open)\n", "lib.tsv", &p, th, Backend::Naive);
    assert!(matches!(bad, Err(LibraryError::Format { line: 3, .. })));
    let bad = FactorLibrary::from_tsv("1\ta\tNeg(\n", "lib.tsv", &p, th, Backend::Naive);
    assert!(matches!(bad, Err(LibraryError::Format { line: 1, .. })));
    let bad = FactorLibrary::from_tsv("1\tonly two\n", "lib.tsv", &p, th, Backend::Naive);
    assert!(bad.unwrap_err().to_string().starts_with("lib.tsv:1:"));
}

#[test]
fn reference_factor_loads_and_scores() {
    let p = panel();
    let lib = FactorLibrary::from_tsv(
        &format!("46\tregime switch\t{FACTOR_046}\n"),
        "ref.tsv",
        &p,
        AdmissionThresholds::default(),
        Backend::Optimized,
    )
    .unwrap();
    let e = lib.get(46).unwrap();
    assert_eq!(e.name, "regime switch");
    assert!(e.stats.fitness > 0.0 && e.stats.fitness.is_finite());
    assert_eq!(lib.next_id(), 47);
}
