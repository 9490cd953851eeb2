//! Reference backend: every rolling output is recomputed from its own window,
//! written as directly as the operator definitions allow. Sums are carried in
//! double-double so that this backend doubles as a precision oracle.

use super::dd::{self, Dd};
use crate::dsl::Op;
use crate::rank::average_ranks;
use crate::signal::{is_missing, present_or_missing, MISSING};

/// Applies `f` to every complete, fully present trailing window.
fn windows(col: &[f64], n: usize, out: &mut [f64], f: impl Fn(&[f64]) -> f64) {
    for t in 0..col.len() {
        out[t] = if t + 1 >= n {
            let w = &col[t + 1 - n..=t];
            if w.iter().any(|v| is_missing(*v)) {
                MISSING
            } else {
                present_or_missing(f(w))
            }
        } else {
            MISSING
        };
    }
}

pub(crate) fn is_flat(w: &[f64]) -> bool {
    w.iter().all(|v| v.to_bits() == w[0].to_bits())
}

/// Central moment sums about the exact mean: (mean, m2, m3, m4).
fn central_moments(w: &[f64]) -> (Dd, Dd, Dd, Dd) {
    let n = w.len() as f64;
    let mean = dd::sum(w).div_f64(n);
    let (mut m2, mut m3, mut m4) = (Dd::ZERO, Dd::ZERO, Dd::ZERO);
    for &x in w {
        let d = Dd::from_f64(x) - mean;
        let d2 = d.square();
        m2 += d2;
        m3 += d2 * d;
        m4 += d2.square();
    }
    (mean, m2, m3, m4)
}

/// Turns central moment sums into the operator's statistic.
pub(crate) fn finish_moment(op: Op, n: usize, m2: Dd, m3: Dd, m4: Dd) -> f64 {
    let nf = n as f64;
    let var = m2.div_f64(nf - 1.0).to_f64();
    match op {
        Op::Var => var.max(0.0),
        Op::Std => var.max(0.0).sqrt(),
        Op::Skew => {
            let m2 = m2.to_f64();
            if m2 <= 0.0 {
                return MISSING;
            }
            nf * (nf - 1.0).sqrt() / (nf - 2.0) * m3.to_f64() / (m2 * m2.sqrt())
        }
        Op::Kurt => {
            let m2 = m2.to_f64();
            if m2 <= 0.0 {
                return MISSING;
            }
            let a = (nf + 1.0) * nf * (nf - 1.0) / ((nf - 2.0) * (nf - 3.0));
            let b = 3.0 * (nf - 1.0) * (nf - 1.0) / ((nf - 2.0) * (nf - 3.0));
            a * (m4.to_f64() / (m2 * m2)) - b
        }
        _ => unreachable!(),
    }
}

/// Sum of squared centered time indices, n(n^2 - 1)/12.
pub(crate) fn index_ss(n: usize) -> f64 {
    let n = n as f64;
    n * (n * n - 1.0) / 12.0
}

/// Regression statistic from the centered cross sum `sxy`, the centered sum
/// of squares `sxx` and the current bar's deviation from the window mean.
pub(crate) fn finish_regression(op: Op, n: usize, sxy: Dd, sxx: Dd, last_dev: Dd) -> f64 {
    let sii = index_ss(n);
    let slope = sxy.div_f64(sii);
    match op {
        Op::Slope => slope.to_f64(),
        Op::Rsquare => {
            let sxx = sxx.to_f64();
            if sxx <= 0.0 {
                return 0.0;
            }
            (sxy.to_f64() * slope.to_f64() / sxx).clamp(0.0, 1.0)
        }
        Op::Resi => {
            let offset = (n as f64 - 1.0) / 2.0;
            (last_dev - slope.mul_f64(offset)).to_f64()
        }
        _ => unreachable!(),
    }
}

pub(crate) fn finish_corr(sxy: Dd, sxx: Dd, syy: Dd) -> f64 {
    let (sxx, syy) = (sxx.to_f64(), syy.to_f64());
    if sxx <= 0.0 || syy <= 0.0 {
        return MISSING;
    }
    (sxy.to_f64() / (sxx * syy).sqrt()).clamp(-1.0, 1.0)
}

pub(crate) fn median_of_sorted(s: &[f64]) -> f64 {
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        (s[n / 2 - 1] + s[n / 2]) / 2.0
    }
}

pub(crate) fn wma_denominator(n: usize) -> f64 {
    (n * (n + 1)) as f64 / 2.0
}

/// One-input rolling operator over a single asset's series.
pub fn rolling(op: Op, col: &[f64], n: usize, out: &mut [f64]) {
    match op {
        Op::Sum => windows(col, n, out, |w| dd::sum(w).to_f64()),
        Op::Mean | Op::Sma => windows(col, n, out, |w| dd::sum(w).div_f64(n as f64).to_f64()),
        Op::Std | Op::Var => windows(col, n, out, |w| {
            if is_flat(w) {
                return 0.0;
            }
            let (_, m2, m3, m4) = central_moments(w);
            finish_moment(op, n, m2, m3, m4)
        }),
        Op::Skew | Op::Kurt => windows(col, n, out, |w| {
            if is_flat(w) {
                return MISSING;
            }
            let (_, m2, m3, m4) = central_moments(w);
            finish_moment(op, n, m2, m3, m4)
        }),
        Op::Med => windows(col, n, out, |w| {
            let mut s = w.to_vec();
            s.sort_by(f64::total_cmp);
            median_of_sorted(&s)
        }),
        Op::TsRank => windows(col, n, out, |w| average_ranks(w)[n - 1] / n as f64),
        Op::TsMax => windows(col, n, out, |w| w.iter().copied().fold(f64::MIN, f64::max)),
        Op::TsMin => windows(col, n, out, |w| w.iter().copied().fold(f64::MAX, f64::min)),
        Op::TsArgMax | Op::TsArgMin => windows(col, n, out, |w| {
            // Scan newest to oldest so that ties resolve to the most recent bar.
            let mut best = n - 1;
            for i in (0..n).rev() {
                let better = if op == Op::TsArgMax {
                    w[i] > w[best]
                } else {
                    w[i] < w[best]
                };
                if better {
                    best = i;
                }
            }
            (n - 1 - best) as f64
        }),
        Op::TsDecay | Op::Wma => windows(col, n, out, |w| {
            let mut acc = Dd::ZERO;
            for (i, &x) in w.iter().enumerate() {
                acc += Dd::from_f64(x).mul_f64((i + 1) as f64);
            }
            acc.div_f64(wma_denominator(n)).to_f64()
        }),
        Op::Slope | Op::Rsquare | Op::Resi => windows(col, n, out, |w| {
            if is_flat(w) {
                return 0.0;
            }
            let nf = n as f64;
            let mean = dd::sum(w).div_f64(nf);
            let ibar = (nf - 1.0) / 2.0;
            let (mut sxy, mut sxx) = (Dd::ZERO, Dd::ZERO);
            for (i, &x) in w.iter().enumerate() {
                let d = Dd::from_f64(x) - mean;
                sxy += d.mul_f64(i as f64 - ibar);
                sxx += d.square();
            }
            finish_regression(op, n, sxy, sxx, Dd::from_f64(w[n - 1]) - mean)
        }),
        _ => unreachable!("{op} is not a one-input rolling operator"),
    }
}

/// Rolling Pearson correlation of two series.
pub fn corr(x: &[f64], y: &[f64], n: usize, out: &mut [f64]) {
    for t in 0..x.len() {
        out[t] = MISSING;
        if t + 1 < n {
            continue;
        }
        let (wx, wy) = (&x[t + 1 - n..=t], &y[t + 1 - n..=t]);
        if wx.iter().chain(wy).any(|v| is_missing(*v)) || is_flat(wx) || is_flat(wy) {
            continue;
        }
        let nf = n as f64;
        let (mx, my) = (dd::sum(wx).div_f64(nf), dd::sum(wy).div_f64(nf));
        let (mut sxy, mut sxx, mut syy) = (Dd::ZERO, Dd::ZERO, Dd::ZERO);
        for (&a, &b) in wx.iter().zip(wy) {
            let (da, db) = (Dd::from_f64(a) - mx, Dd::from_f64(b) - my);
            sxy += da * db;
            sxx += da.square();
            syy += db.square();
        }
        out[t] = present_or_missing(finish_corr(sxy, sxx, syy));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(op: Op, col: &[f64], n: usize) -> Vec<f64> {
        let mut out = vec![0.0; col.len()];
        rolling(op, col, n, &mut out);
        out
    }

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-12
    }

    #[test]
    fn ts_rank_of_current_in_window() {
        let out = run(Op::TsRank, &[1.0, 3.0, 2.0], 3);
        assert!(out[0].is_nan() && out[1].is_nan());
        assert!(close(out[2], 2.0 / 3.0));
    }

    #[test]
    fn regression_on_a_line() {
        let w = [1.0, 2.0, 3.0];
        assert!(close(run(Op::Slope, &w, 3)[2], 1.0));
        assert!(close(run(Op::Rsquare, &w, 3)[2], 1.0));
        assert!(close(run(Op::Resi, &w, 3)[2], 0.0));
    }

    #[test]
    fn moments_match_textbook_values() {
        let w = [2.0, 4.0, 4.0, 4.0, 5.0, 5.0, 7.0, 9.0];
        // sample variance of this classic set is 32/7
        assert!(close(run(Op::Var, &w, 8)[7], 32.0 / 7.0));
        assert!(close(run(Op::Std, &w, 8)[7], (32.0f64 / 7.0).sqrt()));
        assert!(close(run(Op::Med, &w, 8)[7], 4.5));
        assert!(close(run(Op::Mean, &w, 8)[7], 5.0));
        let flat = [3.0; 5];
        assert_eq!(run(Op::Std, &flat, 4)[4], 0.0);
        assert!(run(Op::Skew, &flat, 4)[4].is_nan());
        assert_eq!(run(Op::Slope, &flat, 4)[4], 0.0);
    }

    #[test]
    fn skew_and_kurt_of_small_window() {
        // x = [0, 0, 0, 1]: mean 1/4, m2 = 3/4, m3 = 3/16*... computed by hand
        let w = [0.0, 0.0, 0.0, 1.0];
        let n = 4.0f64;
        let d = [-0.25f64, -0.25, -0.25, 0.75];
        let m2: f64 = d.iter().map(|x| x * x).sum();
        let m3: f64 = d.iter().map(|x| x * x * x).sum();
        let m4: f64 = d.iter().map(|x| x.powi(4)).sum();
        let g1 = n * (n - 1.0).sqrt() / (n - 2.0) * m3 / m2.powf(1.5);
        let g2 = (n + 1.0) * n * (n - 1.0) / ((n - 2.0) * (n - 3.0)) * m4 / (m2 * m2)
            - 3.0 * (n - 1.0).powi(2) / ((n - 2.0) * (n - 3.0));
        assert!(close(run(Op::Skew, &w, 4)[3], g1));
        assert!(close(run(Op::Kurt, &w, 4)[3], g2));
        assert!(close(g1, 2.0));
        assert!(close(g2, 4.0));
    }

    #[test]
    fn argmax_counts_bars_back_with_recent_ties() {
        let out = run(Op::TsArgMax, &[5.0, 3.0, 5.0, 1.0], 3);
        assert_eq!(out[2], 0.0);
        assert_eq!(out[3], 1.0);
        let out = run(Op::TsArgMin, &[1.0, 3.0, 2.0], 3);
        assert_eq!(out[2], 2.0);
    }

    #[test]
    fn decay_weights_newest_most() {
        let out = run(Op::TsDecay, &[1.0, 2.0, 3.0], 3);
        assert!(close(out[2], (1.0 + 4.0 + 9.0) / 6.0));
    }

    #[test]
    fn missing_in_window_propagates() {
        let out = run(Op::Sum, &[1.0, MISSING, 2.0, 3.0, 4.0], 2);
        assert!(out[1].is_nan() && out[2].is_nan());
        assert_eq!(out[3], 5.0);
    }

    #[test]
    fn corr_of_linear_pair() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let y = [2.0, 4.0, 6.0, 9.0];
        let mut out = [0.0; 4];
        corr(&x, &y, 3, &mut out);
        assert!(close(out[2], 1.0));
        let z = [1.0, 1.0, 1.0, 1.0];
        corr(&x, &z, 3, &mut out);
        assert!(out[3].is_nan());
    }
}
