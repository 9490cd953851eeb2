//! Streaming backend. Each asset's series is split into maximal runs of
//! present values (a window touching a gap is missing anyway) and every run
//! is processed with O(1) or O(log T) work per bar:
//!
//! - sums and moments: shifted power sums in double-double, re-anchored at
//!   the window mean whenever the anchor drifts or the variance collapses;
//! - extremes: monotonic deques;
//! - rank: a Fenwick tree over the series' sorted distinct values;
//! - median: a sorted copy of the window.

use std::collections::VecDeque;

use super::dd::{self, Dd};
use super::naive::{
    finish_corr, finish_moment, finish_regression, median_of_sorted, wma_denominator,
};
use crate::dsl::Op;
use crate::signal::{is_missing, present_or_missing, MISSING};

/// Calls `f(start, end)` for each maximal run of present values.
fn runs(col: &[f64], mut f: impl FnMut(usize, usize)) {
    let mut t = 0;
    while t < col.len() {
        if is_missing(col[t]) {
            t += 1;
            continue;
        }
        let start = t;
        while t < col.len() && !is_missing(col[t]) {
            t += 1;
        }
        f(start, t);
    }
}

/// Re-anchor when the anchor sits more than 16 standard deviations from the
/// window mean, or when the variance falls 2^20-fold below its recent peak.
const DRIFT_LIMIT: f64 = 256.0;
const COLLAPSE_LIMIT: f64 = 1.0 / (1u64 << 20) as f64;

/// Length of the trailing run of bitwise-identical values.
#[derive(Default)]
struct EqRun {
    last: u64,
    len: usize,
}

impl EqRun {
    fn push(&mut self, v: f64) {
        if self.len > 0 && v.to_bits() == self.last {
            self.len += 1;
        } else {
            self.last = v.to_bits();
            self.len = 1;
        }
    }
}

/// Power sums of `x - anchor` up to `order` over a sliding window.
struct PowerSums {
    order: usize,
    anchor: f64,
    s: [Dd; 5],
    peak_var: f64,
}

impl PowerSums {
    fn new(order: usize) -> Self {
        PowerSums {
            order,
            anchor: 0.0,
            s: [Dd::ZERO; 5],
            peak_var: 0.0,
        }
    }

    #[inline]
    fn accumulate(&mut self, x: f64, sign: f64) {
        let y = Dd::diff(x, self.anchor);
        let y2 = y.square();
        self.s[1] += y.mul_f64(sign);
        self.s[2] += y2.mul_f64(sign);
        if self.order >= 3 {
            self.s[3] += (y2 * y).mul_f64(sign);
        }
        if self.order >= 4 {
            self.s[4] += y2.square().mul_f64(sign);
        }
    }

    fn rebuild(&mut self, w: &[f64]) {
        self.anchor = dd::sum(w).div_f64(w.len() as f64).to_f64();
        self.s = [Dd::ZERO; 5];
        for &x in w {
            self.accumulate(x, 1.0);
        }
        self.peak_var = 0.0;
    }

    /// Central sums (m2, m3, m4) for a window of `n` values.
    fn central(&self, n: usize) -> (Dd, Dd, Dd) {
        let nf = n as f64;
        let d = self.s[1].div_f64(nf);
        let m2 = self.s[2] - self.s[1] * d;
        if self.order < 3 {
            return (m2, Dd::ZERO, Dd::ZERO);
        }
        let d2 = d.square();
        let m3 = self.s[3] - (d * self.s[2]).mul_f64(3.0) + (d2 * d).mul_f64(2.0 * nf);
        if self.order < 4 {
            return (m2, m3, Dd::ZERO);
        }
        let m4 = self.s[4] - (d * self.s[3]).mul_f64(4.0) + (d2 * self.s[2]).mul_f64(6.0)
            - d2.square().mul_f64(3.0 * nf);
        (m2, m3, m4)
    }

    /// Rebuilds from `w` if the current state has lost too much precision.
    fn refresh(&mut self, w: &[f64]) {
        let n = w.len() as f64;
        let shift = self.s[1].div_f64(n).to_f64();
        let var = self.central(w.len()).0.to_f64() / (n - 1.0).max(1.0);
        if var <= 0.0 || shift * shift > DRIFT_LIMIT * var || var < self.peak_var * COLLAPSE_LIMIT {
            self.rebuild(w);
            let var = self.central(w.len()).0.to_f64() / (n - 1.0).max(1.0);
            self.peak_var = var;
        } else if var > self.peak_var {
            self.peak_var = var;
        }
    }
}

fn moments(op: Op, r: &[f64], n: usize, out: &mut [f64]) {
    let order = match op {
        Op::Std | Op::Var => 2,
        Op::Skew => 3,
        _ => 4,
    };
    let mut ps = PowerSums::new(order);
    ps.rebuild(&r[..n]);
    let mut eq = EqRun::default();
    for &x in &r[..n - 1] {
        eq.push(x);
    }
    for t in n - 1..r.len() {
        eq.push(r[t]);
        if t >= n {
            ps.accumulate(r[t - n], -1.0);
            ps.accumulate(r[t], 1.0);
        }
        out[t] = if eq.len >= n {
            match op {
                Op::Std | Op::Var => 0.0,
                _ => MISSING,
            }
        } else {
            ps.refresh(&r[t + 1 - n..=t]);
            let (m2, m3, m4) = ps.central(n);
            present_or_missing(finish_moment(op, n, m2, m3, m4))
        };
    }
}

fn sums(op: Op, r: &[f64], n: usize, out: &mut [f64]) {
    let mut s = dd::sum(&r[..n - 1]);
    for t in n - 1..r.len() {
        s = s.add_f64(r[t]);
        if t >= n {
            s = s.add_f64(-r[t - n]);
        }
        out[t] = present_or_missing(if op == Op::Sum {
            s.to_f64()
        } else {
            s.div_f64(n as f64).to_f64()
        });
    }
}

fn decay(r: &[f64], n: usize, out: &mut [f64]) {
    // w = sum of (i + 1) * x_i over the window, s = plain sum.
    let mut w = Dd::ZERO;
    let mut s = Dd::ZERO;
    for (i, &x) in r[..n].iter().enumerate() {
        w += Dd::from_f64(x).mul_f64((i + 1) as f64);
        s = s.add_f64(x);
    }
    let denom = wma_denominator(n);
    for t in n - 1..r.len() {
        if t >= n {
            w = w - s + Dd::from_f64(r[t]).mul_f64(n as f64);
            s = s.add_f64(r[t]).add_f64(-r[t - n]);
        }
        out[t] = present_or_missing(w.div_f64(denom).to_f64());
    }
}

fn regression(op: Op, r: &[f64], n: usize, out: &mut [f64]) {
    let nf = n as f64;
    let ibar = (nf - 1.0) / 2.0;
    // Sums over y = x - anchor: sy, syy and siy = sum of i * y_i.
    struct State {
        anchor: f64,
        sy: Dd,
        syy: Dd,
        siy: Dd,
        peak_var: f64,
    }
    let build = |w: &[f64]| {
        let anchor = dd::sum(w).div_f64(nf).to_f64();
        let mut st = State {
            anchor,
            sy: Dd::ZERO,
            syy: Dd::ZERO,
            siy: Dd::ZERO,
            peak_var: 0.0,
        };
        for (i, &x) in w.iter().enumerate() {
            let y = Dd::diff(x, anchor);
            st.sy += y;
            st.syy += y.square();
            st.siy += y.mul_f64(i as f64);
        }
        st
    };
    let centered = |st: &State| {
        let mean = st.sy.div_f64(nf);
        let sxx = st.syy - st.sy * mean;
        (mean, sxx)
    };
    let mut st = build(&r[..n]);
    let mut eq = EqRun::default();
    for &x in &r[..n - 1] {
        eq.push(x);
    }
    for t in n - 1..r.len() {
        eq.push(r[t]);
        if t >= n {
            let y_old = Dd::diff(r[t - n], st.anchor);
            let y_new = Dd::diff(r[t], st.anchor);
            // shifting indices down by one subtracts the old window sum
            st.siy = st.siy - (st.sy - y_old) + y_new.mul_f64(nf - 1.0);
            st.sy = st.sy - y_old + y_new;
            st.syy = st.syy - y_old.square() + y_new.square();
        }
        if eq.len >= n {
            out[t] = 0.0;
            continue;
        }
        let (mean, sxx) = centered(&st);
        let (shift, var) = (mean.to_f64(), sxx.to_f64() / (nf - 1.0));
        if var <= 0.0 || shift * shift > DRIFT_LIMIT * var || var < st.peak_var * COLLAPSE_LIMIT {
            st = build(&r[t + 1 - n..=t]);
            st.peak_var = centered(&st).1.to_f64() / (nf - 1.0);
        } else if var > st.peak_var {
            st.peak_var = var;
        }
        let (mean, sxx) = centered(&st);
        let sxy = st.siy - st.sy.mul_f64(ibar);
        let last_dev = Dd::diff(r[t], st.anchor) - mean;
        out[t] = present_or_missing(finish_regression(op, n, sxy, sxx, last_dev));
    }
}

fn extremes(op: Op, r: &[f64], n: usize, out: &mut [f64]) {
    let is_max = matches!(op, Op::TsMax | Op::TsArgMax);
    // Indices with values strictly decreasing (max) or increasing (min) from
    // front to back; a new value evicts older values it ties with so that the
    // most recent extreme survives.
    let mut dq: VecDeque<usize> = VecDeque::with_capacity(n + 1);
    for t in 0..r.len() {
        while let Some(&b) = dq.back() {
            let dominated = if is_max { r[b] <= r[t] } else { r[b] >= r[t] };
            if dominated {
                dq.pop_back();
            } else {
                break;
            }
        }
        dq.push_back(t);
        if dq[0] + n <= t {
            dq.pop_front();
        }
        if t + 1 >= n {
            let best = dq[0];
            out[t] = match op {
                Op::TsMax | Op::TsMin => r[best],
                _ => (t - best) as f64,
            };
        }
    }
}

/// Counts over value ranks with prefix queries.
struct Fenwick {
    tree: Vec<u32>,
}

impl Fenwick {
    fn new(size: usize) -> Self {
        Fenwick {
            tree: vec![0; size + 1],
        }
    }

    #[inline]
    fn add(&mut self, idx: usize, delta: i32) {
        let mut i = idx + 1;
        while i < self.tree.len() {
            self.tree[i] = self.tree[i].wrapping_add_signed(delta);
            i += i & i.wrapping_neg();
        }
    }

    /// Number of stored items with rank < idx.
    #[inline]
    fn prefix(&self, idx: usize) -> u32 {
        let mut i = idx;
        let mut s = 0;
        while i > 0 {
            s += self.tree[i];
            i &= i - 1;
        }
        s
    }
}

/// Sorted distinct present values of a column and each cell's rank among them.
fn compress(col: &[f64]) -> (Vec<f64>, Vec<u32>) {
    let mut vals: Vec<f64> = col.iter().copied().filter(|v| !is_missing(*v)).collect();
    vals.sort_by(f64::total_cmp);
    vals.dedup_by(|a, b| a == b);
    let ranks = col
        .iter()
        .map(|&v| {
            if is_missing(v) {
                u32::MAX
            } else {
                vals.partition_point(|&u| u < v) as u32
            }
        })
        .collect();
    (vals, ranks)
}

fn ts_rank(col: &[f64], n: usize, out: &mut [f64]) {
    let (vals, ranks) = compress(col);
    let mut fw = Fenwick::new(vals.len());
    let nf = n as f64;
    runs(col, |start, end| {
        if end - start < n {
            return;
        }
        for t in start..end {
            let rk = ranks[t] as usize;
            fw.add(rk, 1);
            if t >= start + n {
                fw.add(ranks[t - n] as usize, -1);
            }
            if t + 1 < start + n {
                continue;
            }
            let less = fw.prefix(rk) as f64;
            let eq = (fw.prefix(rk + 1) as f64) - less;
            out[t] = (less + (eq + 1.0) / 2.0) / nf;
        }
        for t in end.saturating_sub(n).max(start)..end {
            fw.add(ranks[t] as usize, -1);
        }
    });
}

/// Median from a sorted copy of the window, maintained by binary-search
/// insertion and removal; memmove of a window is cheaper than tree descent
/// at the window sizes factors use.
fn sorted_median(r: &[f64], n: usize, out: &mut [f64]) {
    let mut sorted: Vec<f64> = r[..n - 1].to_vec();
    sorted.sort_by(f64::total_cmp);
    for t in n - 1..r.len() {
        if t >= n {
            let old = r[t - n];
            let i = sorted.partition_point(|v| v.total_cmp(&old).is_lt());
            sorted.remove(i);
        }
        let x = r[t];
        let i = sorted.partition_point(|v| v.total_cmp(&x).is_lt());
        sorted.insert(i, x);
        out[t] = median_of_sorted(&sorted);
    }
}

/// One-input rolling operator over a single asset's series.
pub fn rolling(op: Op, col: &[f64], n: usize, out: &mut [f64]) {
    out.fill(MISSING);
    if op == Op::TsRank {
        ts_rank(col, n, out);
        return;
    }
    runs(col, |start, end| {
        if end - start < n {
            return;
        }
        let (r, o) = (&col[start..end], &mut out[start..end]);
        match op {
            Op::Sum | Op::Mean | Op::Sma => sums(op, r, n, o),
            Op::Std | Op::Var | Op::Skew | Op::Kurt => moments(op, r, n, o),
            Op::TsMax | Op::TsMin | Op::TsArgMax | Op::TsArgMin => extremes(op, r, n, o),
            Op::TsDecay | Op::Wma => decay(r, n, o),
            Op::Med => sorted_median(r, n, o),
            Op::Slope | Op::Rsquare | Op::Resi => regression(op, r, n, o),
            _ => unreachable!("{op} is not a one-input rolling operator"),
        }
    });
}

/// Rolling Pearson correlation of two series.
pub fn corr(x: &[f64], y: &[f64], n: usize, out: &mut [f64]) {
    out.fill(MISSING);
    let joint: Vec<f64> = x
        .iter()
        .zip(y)
        .map(|(a, b)| if is_missing(*a) || is_missing(*b) { MISSING } else { 0.0 })
        .collect();
    runs(&joint, |start, end| {
        if end - start < n {
            return;
        }
        corr_run(&x[start..end], &y[start..end], n, &mut out[start..end]);
    });
}

fn corr_run(x: &[f64], y: &[f64], n: usize, out: &mut [f64]) {
    let nf = n as f64;
    struct State {
        kx: f64,
        ky: f64,
        sx: Dd,
        sy: Dd,
        sxx: Dd,
        syy: Dd,
        sxy: Dd,
        peak: (f64, f64),
    }
    let build = |wx: &[f64], wy: &[f64]| {
        let kx = dd::sum(wx).div_f64(nf).to_f64();
        let ky = dd::sum(wy).div_f64(nf).to_f64();
        let mut st = State {
            kx,
            ky,
            sx: Dd::ZERO,
            sy: Dd::ZERO,
            sxx: Dd::ZERO,
            syy: Dd::ZERO,
            sxy: Dd::ZERO,
            peak: (0.0, 0.0),
        };
        for (&a, &b) in wx.iter().zip(wy) {
            let (u, v) = (Dd::diff(a, kx), Dd::diff(b, ky));
            st.sx += u;
            st.sy += v;
            st.sxx += u.square();
            st.syy += v.square();
            st.sxy += u * v;
        }
        st
    };
    // centered sums and shifts of the means from the anchors
    let centered = |st: &State| {
        let (mx, my) = (st.sx.div_f64(nf), st.sy.div_f64(nf));
        (
            st.sxy - st.sx * my,
            st.sxx - st.sx * mx,
            st.syy - st.sy * my,
            mx.to_f64(),
            my.to_f64(),
        )
    };
    let mut st = build(&x[..n], &y[..n]);
    let (mut ex, mut ey) = (EqRun::default(), EqRun::default());
    for t in 0..n - 1 {
        ex.push(x[t]);
        ey.push(y[t]);
    }
    for t in n - 1..x.len() {
        ex.push(x[t]);
        ey.push(y[t]);
        if t >= n {
            let (u0, v0) = (Dd::diff(x[t - n], st.kx), Dd::diff(y[t - n], st.ky));
            let (u1, v1) = (Dd::diff(x[t], st.kx), Dd::diff(y[t], st.ky));
            st.sx = st.sx - u0 + u1;
            st.sy = st.sy - v0 + v1;
            st.sxx = st.sxx - u0.square() + u1.square();
            st.syy = st.syy - v0.square() + v1.square();
            st.sxy = st.sxy - u0 * v0 + u1 * v1;
        }
        if ex.len >= n || ey.len >= n {
            continue;
        }
        let (_, cxx, cyy, mx, my) = centered(&st);
        let (vx, vy) = (cxx.to_f64(), cyy.to_f64());
        let stale = |v: f64, m: f64, peak: f64| {
            v <= 0.0 || m * m > DRIFT_LIMIT * v / nf || v < peak * COLLAPSE_LIMIT
        };
        if stale(vx, mx, st.peak.0) || stale(vy, my, st.peak.1) {
            st = build(&x[t + 1 - n..=t], &y[t + 1 - n..=t]);
            let (_, cxx, cyy, _, _) = centered(&st);
            st.peak = (cxx.to_f64(), cyy.to_f64());
        } else {
            st.peak = (st.peak.0.max(vx), st.peak.1.max(vy));
        }
        let (cxy, cxx, cyy, _, _) = centered(&st);
        out[t] = present_or_missing(finish_corr(cxy, cxx, cyy));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::naive;

    fn both(op: Op, col: &[f64], n: usize) -> (Vec<f64>, Vec<f64>) {
        let mut a = vec![0.0; col.len()];
        let mut b = vec![0.0; col.len()];
        naive::rolling(op, col, n, &mut a);
        rolling(op, col, n, &mut b);
        (a, b)
    }

    fn assert_agree(op: Op, col: &[f64], n: usize) {
        let (a, b) = both(op, col, n);
        for (t, (x, y)) in a.iter().zip(&b).enumerate() {
            assert_eq!(x.is_nan(), y.is_nan(), "{op} mask differs at {t}: {x} vs {y}");
            if !x.is_nan() {
                let tol = 1e-9 * x.abs().max(y.abs()).max(1.0);
                assert!((x - y).abs() <= tol, "{op} n={n} t={t}: {x} vs {y}");
            }
        }
    }

    fn series() -> Vec<f64> {
        let mut v = Vec::new();
        let mut x = 100.0;
        for i in 0..300u64 {
            x += ((i * 7919 % 113) as f64 - 56.0) / 10.0;
            v.push(if i % 37 == 5 { MISSING } else { x });
            if (150..170).contains(&i) {
                *v.last_mut().unwrap() = 42.0;
            }
        }
        v
    }

    #[test]
    fn matches_naive_on_gapped_series() {
        let col = series();
        for op in [
            Op::Sum,
            Op::Mean,
            Op::Std,
            Op::Var,
            Op::Skew,
            Op::Kurt,
            Op::Med,
            Op::TsRank,
            Op::TsMax,
            Op::TsMin,
            Op::TsArgMax,
            Op::TsArgMin,
            Op::Wma,
            Op::Slope,
            Op::Rsquare,
            Op::Resi,
        ] {
            for n in [4, 5, 12, 30] {
                assert_agree(op, &col, n);
            }
        }
    }

    #[test]
    fn survives_level_shifts_and_volatility_collapse() {
        let mut col: Vec<f64> = (0..200).map(|i| 1e6 + (i as f64 * 1.3).sin() * 1e5).collect();
        col.extend((0..200).map(|i| 3.0 + (i as f64 * 0.7).cos() * 1e-4));
        for op in [Op::Std, Op::Skew, Op::Kurt, Op::Slope, Op::Rsquare, Op::Resi] {
            assert_agree(op, &col, 10);
        }
    }

    #[test]
    fn corr_matches_naive() {
        let x = series();
        let y: Vec<f64> = x.iter().enumerate().map(|(i, v)| v * 0.3 + (i % 11) as f64).collect();
        for n in [3, 8, 25] {
            let mut a = vec![0.0; x.len()];
            let mut b = vec![0.0; x.len()];
            naive::corr(&x, &y, n, &mut a);
            corr(&x, &y, n, &mut b);
            for (p, q) in a.iter().zip(&b) {
                assert_eq!(p.is_nan(), q.is_nan());
                if !p.is_nan() {
                    assert!((p - q).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn fenwick_prefix_counts() {
        let mut f = Fenwick::new(10);
        for r in [3, 1, 7, 3] {
            f.add(r, 1);
        }
        assert_eq!(f.prefix(3), 1);
        assert_eq!(f.prefix(4), 3);
        assert_eq!(f.prefix(8), 4);
        f.add(3, -1);
        assert_eq!(f.prefix(4), 2);
    }
}
