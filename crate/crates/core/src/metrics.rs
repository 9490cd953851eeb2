//! Signal quality: information coefficient, ICIR, factor-to-factor rank
//! correlation, and the per-factor tear-sheet statistics.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rank::average_ranks;
use crate::signal::{is_missing, SignalMatrix, MISSING};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("shape mismatch: {0:?} vs {1:?}")]
    Shape((usize, usize), (usize, usize)),
    #[error("{0}")]
    Precondition(String),
    #[error("undefined result: {0}")]
    Undefined(String),
}

fn check_shapes(a: &SignalMatrix, b: &SignalMatrix) -> Result<(), MetricsError> {
    if a.shape() != b.shape() {
        return Err(MetricsError::Shape(a.shape(), b.shape()));
    }
    Ok(())
}

/// Per-bar cross-sectional Spearman correlations, aligned to timestamps.
#[derive(Debug, Clone, PartialEq)]
pub struct IcSeries {
    pub timestamps: Vec<i64>,
    /// Missing where fewer than 3 joint pairs exist or a side is constant.
    pub values: Vec<f64>,
}

impl IcSeries {
    pub fn present(&self) -> impl Iterator<Item = f64> + '_ {
        self.values.iter().copied().filter(|v| !is_missing(*v))
    }

    pub fn mean(&self) -> Option<f64> {
        let (sum, n) = self.present().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
        (n > 0).then(|| sum / n as f64)
    }
}

/// Pearson correlation of centered average ranks; `None` when a side has no
/// rank dispersion.
fn rank_pearson(dx: &[f64], dy: &[f64]) -> Option<f64> {
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&a, &b) in dx.iter().zip(dy) {
        sxy += a * b;
        sxx += a * a;
        syy += b * b;
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Ranks centered on their mean (n + 1) / 2. Values are half-integers, so
/// the sums in [`rank_pearson`] are exact.
fn centered_ranks(values: &[f64]) -> Vec<f64> {
    let mid = (values.len() as f64 + 1.0) / 2.0;
    average_ranks(values).into_iter().map(|r| r - mid).collect()
}

/// Spearman correlation at bar `t` over assets present in both signals.
pub fn spearman_at(a: &SignalMatrix, b: &SignalMatrix, t: usize) -> f64 {
    let mut xs = Vec::with_capacity(a.n_assets());
    let mut ys = Vec::with_capacity(a.n_assets());
    for m in 0..a.n_assets() {
        let (x, y) = (a.get(t, m), b.get(t, m));
        if !is_missing(x) && !is_missing(y) {
            xs.push(x);
            ys.push(y);
        }
    }
    if xs.len() < 3 {
        return MISSING;
    }
    rank_pearson(&centered_ranks(&xs), &centered_ranks(&ys)).unwrap_or(MISSING)
}

pub fn ic_series(signal: &SignalMatrix, target: &SignalMatrix) -> Result<IcSeries, MetricsError> {
    check_shapes(signal, target)?;
    Ok(IcSeries {
        timestamps: signal.axes().timestamps.clone(),
        values: (0..signal.n_times())
            .map(|t| spearman_at(signal, target, t))
            .collect(),
    })
}

/// Mean over standard deviation (sample) of the present IC values.
pub fn icir(series: &IcSeries) -> Result<f64, MetricsError> {
    let v: Vec<f64> = series.present().collect();
    if v.len() < 2 {
        return Err(MetricsError::Precondition(format!(
            "ICIR needs at least 2 IC values, got {}",
            v.len()
        )));
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    let sd = var.sqrt();
    if sd == 0.0 {
        return Err(MetricsError::Undefined("IC series has zero dispersion".into()));
    }
    Ok(mean / sd)
}

/// Time-average of per-bar cross-sectional Spearman correlation.
pub fn factor_corr(a: &SignalMatrix, b: &SignalMatrix) -> Result<f64, MetricsError> {
    check_shapes(a, b)?;
    let (mut sum, mut n) = (0.0, 0usize);
    for t in 0..a.n_times() {
        let v = spearman_at(a, b, t);
        if !is_missing(v) {
            sum += v;
            n += 1;
        }
    }
    if n == 0 {
        return Err(MetricsError::Precondition(
            "no bar has 3 or more jointly present assets".into(),
        ));
    }
    Ok(sum / n as f64)
}

/// A signal with its per-bar centered ranks precomputed, so that repeated
/// correlations against it skip re-ranking whenever two signals share a
/// bar's missing pattern. Results are bit-identical to [`factor_corr`].
#[derive(Debug, Clone)]
pub struct RankedSignal {
    signal: SignalMatrix,
    /// Per bar: present asset indices and their centered ranks.
    bars: Vec<(Vec<u32>, Vec<f64>)>,
}

impl RankedSignal {
    pub fn new(signal: SignalMatrix) -> Self {
        let bars = (0..signal.n_times())
            .map(|t| {
                let mut idx = Vec::new();
                let mut vals = Vec::new();
                for m in 0..signal.n_assets() {
                    let v = signal.get(t, m);
                    if !is_missing(v) {
                        idx.push(m as u32);
                        vals.push(v);
                    }
                }
                let ranks = centered_ranks(&vals);
                (idx, ranks)
            })
            .collect();
        RankedSignal { signal, bars }
    }

    pub fn signal(&self) -> &SignalMatrix {
        &self.signal
    }

    pub fn corr(&self, other: &RankedSignal) -> Result<f64, MetricsError> {
        check_shapes(&self.signal, &other.signal)?;
        let (mut sum, mut n) = (0.0, 0usize);
        for t in 0..self.signal.n_times() {
            let ((ia, ra), (ib, rb)) = (&self.bars[t], &other.bars[t]);
            let v = if ia == ib {
                if ia.len() < 3 {
                    MISSING
                } else {
                    rank_pearson(ra, rb).unwrap_or(MISSING)
                }
            } else {
                spearman_at(&self.signal, &other.signal, t)
            };
            if !is_missing(v) {
                sum += v;
                n += 1;
            }
        }
        if n == 0 {
            return Err(MetricsError::Precondition(
                "no bar has 3 or more jointly present assets".into(),
            ));
        }
        Ok(sum / n as f64)
    }
}

/// Summary statistics of one factor against the forward target.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FactorStats {
    pub ic_mean: f64,
    /// |E[IC_t]|.
    pub ic_abs_mean: f64,
    /// 0 when undefined (fewer than two IC values or zero dispersion).
    pub icir: f64,
    pub daily_win_rate: f64,
    /// Selection fitness, equal to `ic_abs_mean`.
    pub fitness: f64,
    pub max_library_corr: f64,
}

impl FactorStats {
    pub fn from_ic(series: &IcSeries) -> FactorStats {
        let ic_mean = series.mean().unwrap_or(0.0);
        FactorStats {
            ic_mean,
            ic_abs_mean: ic_mean.abs(),
            icir: icir(series).unwrap_or(0.0),
            daily_win_rate: daily_win_rate(series).unwrap_or(0.0),
            fitness: ic_mean.abs(),
            max_library_corr: 0.0,
        }
    }

    pub fn compute(signal: &SignalMatrix, target: &SignalMatrix) -> Result<FactorStats, MetricsError> {
        Ok(Self::from_ic(&ic_series(signal, target)?))
    }
}

/// Fraction of UTC days whose mean IC is strictly positive.
pub fn daily_win_rate(series: &IcSeries) -> Result<f64, MetricsError> {
    let mut days: BTreeMap<i64, (f64, usize)> = BTreeMap::new();
    for (&ts, &v) in series.timestamps.iter().zip(&series.values) {
        if is_missing(v) {
            continue;
        }
        let e = days.entry(ts.div_euclid(86_400)).or_default();
        e.0 += v;
        e.1 += 1;
    }
    if days.is_empty() {
        return Err(MetricsError::Precondition("no day has an IC value".into()));
    }
    let wins = days.values().filter(|(s, n)| s / *n as f64 > 0.0).count();
    Ok(wins as f64 / days.len() as f64)
}

/// Bucket (0-based) of each listed asset at one bar, ordering by value and
/// breaking ties by asset index.
fn buckets(values: &[(usize, f64)], q: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| {
        values[i]
            .1
            .total_cmp(&values[j].1)
            .then(values[i].0.cmp(&values[j].0))
    });
    let n = values.len();
    let mut out = vec![0; n];
    for (pos, &i) in order.iter().enumerate() {
        out[i] = pos * q / n;
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantileReport {
    pub q: usize,
    /// Time-averaged equal-weight target per quantile, lowest signal first.
    pub quantile_returns: Vec<f64>,
    /// Per-bar top-minus-bottom return; missing where the bar had too few assets.
    pub ls_series: Vec<f64>,
    pub ls_mean: f64,
    pub ls_cumulative: Vec<f64>,
    pub monotonicity: f64,
}

fn check_q(q: usize) -> Result<(), MetricsError> {
    if q < 2 {
        return Err(MetricsError::Precondition(format!("need q >= 2, got {q}")));
    }
    Ok(())
}

fn no_evaluable_bar(q: usize) -> MetricsError {
    MetricsError::Precondition(format!("no bar has at least {q} present assets"))
}

/// Per-bar quantile means of `target` after bucketing by `signal`.
fn quantile_bars(
    signal: &SignalMatrix,
    target: &SignalMatrix,
    q: usize,
) -> Vec<Option<Vec<f64>>> {
    (0..signal.n_times())
        .map(|t| {
            let pairs: Vec<(usize, f64, f64)> = (0..signal.n_assets())
                .filter_map(|m| {
                    let (s, y) = (signal.get(t, m), target.get(t, m));
                    (!is_missing(s) && !is_missing(y)).then_some((m, s, y))
                })
                .collect();
            if pairs.len() < q {
                return None;
            }
            let keyed: Vec<(usize, f64)> = pairs.iter().map(|&(m, s, _)| (m, s)).collect();
            let b = buckets(&keyed, q);
            let mut sums = vec![0.0; q];
            let mut counts = vec![0usize; q];
            for (&(_, _, y), &k) in pairs.iter().zip(&b) {
                sums[k] += y;
                counts[k] += 1;
            }
            Some(
                sums.iter()
                    .zip(&counts)
                    .map(|(s, &c)| s / c as f64)
                    .collect(),
            )
        })
        .collect()
}

pub fn quantile_analysis(
    signal: &SignalMatrix,
    target: &SignalMatrix,
    q: usize,
) -> Result<QuantileReport, MetricsError> {
    check_shapes(signal, target)?;
    check_q(q)?;
    let bars = quantile_bars(signal, target, q);
    let mut totals = vec![0.0; q];
    let mut n_bars = 0usize;
    let mut ls_series = Vec::with_capacity(bars.len());
    let mut ls_cumulative = Vec::with_capacity(bars.len());
    let mut cum = 0.0;
    for bar in &bars {
        match bar {
            Some(means) => {
                for (t, m) in totals.iter_mut().zip(means) {
                    *t += m;
                }
                n_bars += 1;
                let ls = means[q - 1] - means[0];
                cum += ls;
                ls_series.push(ls);
            }
            None => ls_series.push(MISSING),
        }
        ls_cumulative.push(cum);
    }
    if n_bars == 0 {
        return Err(no_evaluable_bar(q));
    }
    let quantile_returns: Vec<f64> = totals.iter().map(|t| t / n_bars as f64).collect();
    let ordered = quantile_returns.windows(2).filter(|w| w[1] > w[0]).count();
    let monotonicity = ordered as f64 / (q - 1) as f64;
    let ls_mean = ls_series.iter().filter(|v| !is_missing(**v)).sum::<f64>() / n_bars as f64;
    Ok(QuantileReport {
        q,
        quantile_returns,
        ls_series,
        ls_mean,
        ls_cumulative,
        monotonicity,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Side {
    Bottom,
    Top,
    Neither,
}

fn sides(signal: &SignalMatrix, t: usize, q: usize) -> Option<Vec<Side>> {
    let keyed: Vec<(usize, f64)> = (0..signal.n_assets())
        .filter_map(|m| {
            let v = signal.get(t, m);
            (!is_missing(v)).then_some((m, v))
        })
        .collect();
    if keyed.len() < q {
        return None;
    }
    let mut out = vec![Side::Neither; signal.n_assets()];
    for (&(m, _), k) in keyed.iter().zip(buckets(&keyed, q)) {
        out[m] = if k == 0 {
            Side::Bottom
        } else if k == q - 1 {
            Side::Top
        } else {
            Side::Neither
        };
    }
    Some(out)
}

/// Turnover between bar t-1 and t for every t (missing at t = 0 and where
/// either bar has fewer than q present assets).
pub fn turnover_series(signal: &SignalMatrix, q: usize) -> Result<Vec<f64>, MetricsError> {
    check_q(q)?;
    let mut out = vec![MISSING; signal.n_times()];
    let mut prev: Option<Vec<Side>> = None;
    for (t, slot) in out.iter_mut().enumerate() {
        let cur = sides(signal, t, q);
        if let (Some(p), Some(c)) = (&prev, &cur) {
            let mut changed = 0usize;
            let mut universe = 0usize;
            for m in 0..signal.n_assets() {
                let present_either = signal.is_present(t, m) || signal.is_present(t - 1, m);
                if present_either {
                    universe += 1;
                    if p[m] != c[m] {
                        changed += 1;
                    }
                }
            }
            *slot = changed as f64 / universe as f64;
        }
        prev = cur;
    }
    Ok(out)
}

/// Average fraction of assets changing extreme-quantile membership per bar.
pub fn turnover(signal: &SignalMatrix, q: usize) -> Result<f64, MetricsError> {
    let s = turnover_series(signal, q)?;
    let present: Vec<f64> = s.into_iter().filter(|v| !is_missing(*v)).collect();
    if present.is_empty() {
        return Err(if signal.n_times() < 2 {
            MetricsError::Precondition("turnover needs at least 2 bars".into())
        } else {
            no_evaluable_bar(q)
        });
    }
    Ok(present.iter().sum::<f64>() / present.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostSeries {
    pub cost_bps: f64,
    /// Cumulative net long-short return per bar.
    pub cumulative: Vec<f64>,
}

/// Net long-short cumulative returns under each transaction cost, charging
/// `cost / 10_000` per unit of extreme-quantile turnover.
pub fn cost_stress(
    signal: &SignalMatrix,
    target: &SignalMatrix,
    q: usize,
    costs_bps: &[f64],
) -> Result<Vec<CostSeries>, MetricsError> {
    if costs_bps.is_empty() || costs_bps.iter().any(|c| !(*c >= 0.0)) {
        return Err(MetricsError::Precondition(
            "costs must be a non-empty list of non-negative basis points".into(),
        ));
    }
    let report = quantile_analysis(signal, target, q)?;
    let turn = turnover_series(signal, q)?;
    Ok(costs_bps
        .iter()
        .map(|&c| {
            let rate = c / 10_000.0;
            let mut cum = 0.0;
            let cumulative = report
                .ls_series
                .iter()
                .zip(&turn)
                .map(|(&ls, &tv)| {
                    if !is_missing(ls) {
                        let tv = if is_missing(tv) { 0.0 } else { tv };
                        cum += ls - rate * tv;
                    }
                    cum
                })
                .collect();
            CostSeries {
                cost_bps: c,
                cumulative,
            }
        })
        .collect())
}

/// The per-factor evaluation summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TearSheet {
    pub ic_mean: f64,
    pub icir: f64,
    pub daily_win_rate: f64,
    pub q1_return: f64,
    #[serde(rename = "qN_return")]
    pub qn_return: f64,
    pub ls_return: f64,
    pub ls_cumulative: f64,
    pub monotonicity: f64,
    pub avg_turnover: f64,
}

pub const TEAR_SHEET_HEADER: &str =
    "ic_mean,icir,daily_win_rate,q1_return,qN_return,ls_return,ls_cumulative,monotonicity,avg_turnover";

impl TearSheet {
    pub fn compute(
        signal: &SignalMatrix,
        target: &SignalMatrix,
        q: usize,
    ) -> Result<TearSheet, MetricsError> {
        let ic = ic_series(signal, target)?;
        let qr = quantile_analysis(signal, target, q)?;
        Ok(TearSheet {
            ic_mean: ic.mean().unwrap_or(MISSING),
            icir: icir(&ic).unwrap_or(MISSING),
            daily_win_rate: daily_win_rate(&ic).unwrap_or(MISSING),
            q1_return: qr.quantile_returns[0],
            qn_return: qr.quantile_returns[q - 1],
            ls_return: qr.ls_mean,
            ls_cumulative: *qr.ls_cumulative.last().unwrap_or(&0.0),
            monotonicity: qr.monotonicity,
            avg_turnover: turnover(signal, q).unwrap_or(MISSING),
        })
    }

    /// One CSV data row matching [`TEAR_SHEET_HEADER`]; undefined values are empty.
    pub fn csv_row(&self) -> String {
        [
            self.ic_mean,
            self.icir,
            self.daily_win_rate,
            self.q1_return,
            self.qn_return,
            self.ls_return,
            self.ls_cumulative,
            self.monotonicity,
            self.avg_turnover,
        ]
        .iter()
        .map(|v| if v.is_finite() { v.to_string() } else { String::new() })
        .collect::<Vec<_>>()
        .join(",")
    }
}
