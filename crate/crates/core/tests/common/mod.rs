//! Brute-force reference implementations and fixture builders shared by the
//! integration tests. Nothing here calls the crate's metric code.
#![allow(dead_code)]

use alphaloop::panel::{synth_panel, Field, Panel, SynthConfig};
use alphaloop::SignalMatrix;
use rand::Rng;

pub const FACTOR_046: &str = "IfElse(Greater(Std($returns, 12), Mean(Std($returns, 12), 48)), Neg(CsRank(Delta($close, 3))), Neg(CsRank(Div(Sub($close, $low), Add(Sub($high, $low), 0.0001)))))";
pub const VWAP_LEVEL: &str = "Neg(TsRank(Div(Sub($close, $vwap), $vwap), 24))";
pub const VWAP_MOMENTUM: &str = "Neg(CsRank(Delta(Sub($close, $vwap), 3)))";

/// |a - b| <= tol * max(1, |a|, |b|).
pub fn close_scaled(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * 1f64.max(a.abs()).max(b.abs())
}

/// Rank by counting: 1 + #smaller + (#equal - 1) / 2.
pub fn count_ranks(v: &[f64]) -> Vec<f64> {
    v.iter()
        .map(|&x| {
            let less = v.iter().filter(|&&y| y < x).count() as f64;
            let eq = v.iter().filter(|&&y| y == x).count() as f64;
            1.0 + less + (eq - 1.0) / 2.0
        })
        .collect()
}

/// Pearson correlation with two-pass moments; `None` on zero variance.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    (sxx > 0.0 && syy > 0.0).then(|| sxy / (sxx * syy).sqrt())
}

/// Spearman correlation over jointly present pairs; `None` with fewer than
/// three pairs or a constant side.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    let (xs, ys): (Vec<f64>, Vec<f64>) = x
        .iter()
        .zip(y)
        .filter(|(a, b)| !a.is_nan() && !b.is_nan())
        .map(|(a, b)| (*a, *b))
        .unzip();
    if xs.len() < 3 {
        return None;
    }
    pearson(&count_ranks(&xs), &count_ranks(&ys))
}

pub fn rows(m: &SignalMatrix) -> Vec<Vec<f64>> {
    m.rows()
}

pub fn ic_oracle(signal: &SignalMatrix, target: &SignalMatrix) -> Vec<Option<f64>> {
    let (s, y) = (rows(signal), rows(target));
    s.iter().zip(&y).map(|(a, b)| spearman(a, b)).collect()
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Mean over sample standard deviation of the defined values.
pub fn icir_oracle(ic: &[Option<f64>]) -> Option<f64> {
    let v: Vec<f64> = ic.iter().flatten().copied().collect();
    if v.len() < 2 {
        return None;
    }
    let m = mean(&v);
    let sd = (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() as f64 - 1.0)).sqrt();
    (sd > 0.0).then(|| m / sd)
}

pub fn corr_oracle(a: &SignalMatrix, b: &SignalMatrix) -> Option<f64> {
    let v: Vec<f64> = ic_oracle(a, b).into_iter().flatten().collect();
    (!v.is_empty()).then(|| mean(&v))
}

/// Random matrix over a small value alphabet (to force ties) with missing cells.
pub fn tied_matrix(rng: &mut impl Rng, t: usize, n: usize, levels: i32, p_missing: f64) -> SignalMatrix {
    let rows: Vec<Vec<f64>> = (0..t)
        .map(|_| {
            (0..n)
                .map(|_| {
                    if rng.gen::<f64>() < p_missing {
                        f64::NAN
                    } else {
                        rng.gen_range(-levels..=levels) as f64 * 0.25
                    }
                })
                .collect()
        })
        .collect();
    SignalMatrix::from_rows(&rows)
}

pub fn gaussian_matrix(rng: &mut impl Rng, t: usize, n: usize, p_missing: f64) -> SignalMatrix {
    let rows: Vec<Vec<f64>> = (0..t)
        .map(|_| {
            (0..n)
                .map(|_| {
                    if rng.gen::<f64>() < p_missing {
                        f64::NAN
                    } else {
                        rng.sample::<f64, _>(rand_distr::StandardNormal)
                    }
                })
                .collect()
        })
        .collect();
    SignalMatrix::from_rows(&rows)
}

/// A synthetic panel with whole cells (every raw field at once) removed.
pub fn gapped_panel(rng: &mut impl Rng, n_assets: usize, n_bars: usize, p_missing: f64) -> Panel {
    let base = synth_panel(&SynthConfig::new(n_assets, n_bars, rng.gen()).with_alpha(0.2)).unwrap();
    let holes: Vec<(usize, usize)> = (0..n_bars)
        .flat_map(|t| (0..n_assets).map(move |a| (t, a)))
        .filter(|_| rng.gen::<f64>() < p_missing)
        .collect();
    let raw = Field::RAW.map(|f| {
        let mut m = base.field(f).unwrap().clone();
        for &(t, a) in &holes {
            m.set(t, a, f64::NAN);
        }
        m
    });
    Panel::from_raw(base.timestamps().to_vec(), base.assets().to_vec(), raw).unwrap()
}

/// Rank-standardizes one bar: centered count-ranks over present cells divided
/// by their RMS (all ties give 0).
pub fn rank_standardize_row(row: &[f64]) -> Vec<f64> {
    let idx: Vec<usize> = (0..row.len()).filter(|&a| !row[a].is_nan()).collect();
    let mut out = vec![f64::NAN; row.len()];
    if idx.len() < 2 {
        return out;
    }
    let vals: Vec<f64> = idx.iter().map(|&a| row[a]).collect();
    let n = vals.len() as f64;
    let c: Vec<f64> = count_ranks(&vals).into_iter().map(|r| r - (n + 1.0) / 2.0).collect();
    let rms = (c.iter().map(|x| x * x).sum::<f64>() / n).sqrt();
    for (&a, x) in idx.iter().zip(c) {
        out[a] = if rms > 0.0 { x / rms } else { 0.0 };
    }
    out
}

/// Solves a dense square system by Gaussian elimination with partial pivoting.
pub fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
        a.swap(col, piv);
        b.swap(col, piv);
        for r in col + 1..n {
            let f = a[r][col] / a[col][col];
            for c in col..n {
                a[r][c] -= f * a[col][c];
            }
            b[r] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|c| a[r][c] * x[c]).sum();
        x[r] = (b[r] - s) / a[r][r];
    }
    x
}
