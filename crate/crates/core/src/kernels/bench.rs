//! Timing harness comparing the two backends on single operators and on
//! whole factors. Only computation is timed; inputs are materialized first.

use std::io::Write;
use std::time::Instant;

use super::{apply, evaluate, Backend};
use crate::dsl::{FactorExpr, Op};
use crate::panel::{Field, Panel};
use crate::signal::SignalMatrix;

pub const CSV_HEADER: &str = "name,kind,backend,median_ms,speedup_vs_naive";

/// Window used by the operator-level rows.
pub const DEFAULT_WINDOW: usize = 48;

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub name: String,
    /// `operator` or `factor`.
    pub kind: &'static str,
    pub backend: Backend,
    pub median_ms: f64,
    pub speedup_vs_naive: f64,
}

#[derive(Debug, Clone, Default)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    pub fn write_csv<W: Write>(&self, w: W) -> csv::Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(CSV_HEADER.split(','))?;
        for r in &self.rows {
            wr.write_record([
                r.name.clone(),
                r.kind.to_string(),
                r.backend.to_string(),
                format!("{:.3}", r.median_ms),
                format!("{:.3}", r.speedup_vs_naive),
            ])?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("csv is utf-8")
    }

    pub fn find(&self, name: &str, backend: Backend) -> Option<&BenchRow> {
        self.rows
            .iter()
            .find(|r| r.name == name && r.backend == backend)
    }
}

/// The operator-level cases: (row name, operator, input fields, window).
pub fn operator_cases(window: usize) -> Vec<(String, Op, Vec<Field>, usize)> {
    let w = window;
    let one = |op: Op, name: &str| (name.to_string(), op, vec![Field::Close], w);
    vec![
        one(Op::TsRank, "TsRank"),
        one(Op::Std, "Std"),
        one(Op::Med, "Med"),
        one(Op::Mean, "Mean"),
        one(Op::TsMax, "TsMax"),
        one(Op::TsDecay, "TsDecay"),
        one(Op::Skew, "Skew"),
        one(Op::Slope, "Slope"),
        (
            "Corr".to_string(),
            Op::Corr,
            vec![Field::Close, Field::Volume],
            w,
        ),
        ("CsRank".to_string(), Op::CsRank, vec![Field::Close], 0),
    ]
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2.0
    }
}

fn time_ms(repeats: usize, mut f: impl FnMut() -> SignalMatrix) -> f64 {
    let samples = (0..repeats)
        .map(|_| {
            let start = Instant::now();
            let out = f();
            let ms = start.elapsed().as_secs_f64() * 1e3;
            std::hint::black_box(out);
            ms
        })
        .collect();
    median(samples)
}

fn push_pair(rows: &mut Vec<BenchRow>, name: String, kind: &'static str, naive: f64, fast: f64) {
    rows.push(BenchRow {
        name: name.clone(),
        kind,
        backend: Backend::Naive,
        median_ms: naive,
        speedup_vs_naive: 1.0,
    });
    rows.push(BenchRow {
        name,
        kind,
        backend: Backend::Optimized,
        median_ms: fast,
        speedup_vs_naive: if fast > 0.0 { naive / fast } else { f64::INFINITY },
    });
}

/// Median wall time over `repeats` runs (at least 3) of every operator case
/// and every expression, for both backends.
pub fn bench_kernels(
    panel: &Panel,
    exprs: &[FactorExpr],
    repeats: usize,
    window: usize,
) -> BenchReport {
    let repeats = repeats.max(3);
    let mut rows = Vec::new();
    for (name, op, fields, w) in operator_cases(window) {
        let inputs: Vec<SignalMatrix> = fields
            .iter()
            .filter_map(|f| panel.field(*f).cloned())
            .collect();
        if inputs.len() != fields.len() {
            continue;
        }
        let windows: Vec<usize> = if w > 0 { vec![w] } else { vec![] };
        let naive = time_ms(repeats, || apply(op, &inputs, &windows, Backend::Naive));
        let fast = time_ms(repeats, || apply(op, &inputs, &windows, Backend::Optimized));
        push_pair(&mut rows, name, "operator", naive, fast);
    }
    for e in exprs {
        if evaluate(e, panel, Backend::Naive).is_err() {
            continue;
        }
        let naive = time_ms(repeats, || evaluate(e, panel, Backend::Naive).unwrap());
        let fast = time_ms(repeats, || evaluate(e, panel, Backend::Optimized).unwrap());
        push_pair(&mut rows, e.format(), "factor", naive, fast);
    }
    BenchReport { rows }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsl::parse;
    use crate::panel::{synth_panel, SynthConfig};

    #[test]
    fn report_shape() {
        let p = synth_panel(&SynthConfig::new(4, 80, 1)).unwrap();
        let r = bench_kernels(&p, &[], 3, 10);
        assert_eq!(r.rows.len(), 2 * operator_cases(10).len());
        assert!(r.rows.iter().all(|row| row.kind == "operator"));
        let e = parse("Neg(TsRank($close, 5))").unwrap();
        let r = bench_kernels(&p, &[e], 3, 10);
        let csv = r.to_csv_string();
        assert!(csv.starts_with(CSV_HEADER));
        assert!(csv.contains("\"Neg(TsRank($close, 5))\",factor,optimized"));
        assert_eq!(r.find("TsRank", Backend::Naive).unwrap().speedup_vs_naive, 1.0);
    }
}
