//! Combining and selecting admitted factors.
//!
//! Every method works on per-bar rank-standardized inputs, which makes the
//! results invariant to strictly monotone transforms of any input signal.

use std::io::Write;

use serde::Serialize;
use thiserror::Error;

use crate::metrics::{ic_series, icir, IcSeries};
use crate::rank::average_ranks;
use crate::signal::{is_missing, SignalMatrix};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PortfolioError {
    #[error("no factors supplied")]
    Empty,
    #[error("factor {index} has shape {got:?}, expected {want:?}")]
    Shape {
        index: usize,
        got: (usize, usize),
        want: (usize, usize),
    },
    #[error("{0}")]
    Degenerate(String),
    #[error("{0}")]
    Invalid(String),
}

fn check_inputs(signals: &[SignalMatrix], ics: Option<&[f64]>) -> Result<(), PortfolioError> {
    let first = signals.first().ok_or(PortfolioError::Empty)?;
    for (index, s) in signals.iter().enumerate() {
        if s.shape() != first.shape() {
            return Err(PortfolioError::Shape {
                index,
                got: s.shape(),
                want: first.shape(),
            });
        }
    }
    if let Some(ics) = ics {
        if ics.len() != signals.len() {
            return Err(PortfolioError::Invalid(format!(
                "{} train ICs for {} factors",
                ics.len(),
                signals.len()
            )));
        }
        if ics.iter().any(|v| !v.is_finite()) {
            return Err(PortfolioError::Invalid("train ICs must be finite".into()));
        }
    }
    Ok(())
}

/// +1 or -1; a zero IC counts as positive.
pub fn ic_sign(ic: f64) -> f64 {
    if ic < 0.0 {
        -1.0
    } else {
        1.0
    }
}

/// Per bar: centered average ranks over present assets divided by their
/// root mean square. Bars with fewer than two present assets are missing; a
/// bar with all values tied maps to zero.
pub fn rank_standardize(signal: &SignalMatrix) -> SignalMatrix {
    let mut out = SignalMatrix::missing(signal.axes().clone());
    let mut idx = Vec::with_capacity(signal.n_assets());
    let mut vals = Vec::with_capacity(signal.n_assets());
    for t in 0..signal.n_times() {
        idx.clear();
        vals.clear();
        for a in 0..signal.n_assets() {
            let v = signal.get(t, a);
            if !is_missing(v) {
                idx.push(a);
                vals.push(v);
            }
        }
        let n = vals.len();
        if n < 2 {
            continue;
        }
        let mid = (n as f64 + 1.0) / 2.0;
        let c: Vec<f64> = average_ranks(&vals).into_iter().map(|r| r - mid).collect();
        let rms = (c.iter().map(|x| x * x).sum::<f64>() / n as f64).sqrt();
        for (&a, &x) in idx.iter().zip(&c) {
            out.set(t, a, if rms > 0.0 { x / rms } else { 0.0 });
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct CombinedSignal {
    pub signal: SignalMatrix,
    pub method: &'static str,
    pub weights: Vec<f64>,
    pub signs: Vec<f64>,
}

/// Σ w_i s_i z_i over the factors present at a cell, divided by the present
/// weight; missing where no factor with positive weight is present.
fn weighted_combine(z: &[SignalMatrix], weights: &[f64], signs: &[f64]) -> SignalMatrix {
    let mut out = SignalMatrix::missing(z[0].axes().clone());
    for a in 0..out.n_assets() {
        let cols: Vec<&[f64]> = z.iter().map(|m| m.column(a)).collect();
        let dst = out.column_mut(a);
        for (t, d) in dst.iter_mut().enumerate() {
            let (mut num, mut den) = (0.0, 0.0);
            for i in 0..cols.len() {
                let v = cols[i][t];
                if weights[i] > 0.0 && !is_missing(v) {
                    num += weights[i] * signs[i] * v;
                    den += weights[i];
                }
            }
            if den > 0.0 {
                *d = num / den;
            }
        }
    }
    out
}

pub fn combine_equal(signals: &[SignalMatrix], train_ics: &[f64]) -> Result<CombinedSignal, PortfolioError> {
    check_inputs(signals, Some(train_ics))?;
    let k = signals.len();
    let weights = vec![1.0 / k as f64; k];
    let signs: Vec<f64> = train_ics.iter().map(|&v| ic_sign(v)).collect();
    let z: Vec<SignalMatrix> = signals.iter().map(rank_standardize).collect();
    Ok(CombinedSignal {
        signal: weighted_combine(&z, &weights, &signs),
        method: "equal",
        weights,
        signs,
    })
}

pub fn combine_ic_weighted(
    signals: &[SignalMatrix],
    train_ics: &[f64],
) -> Result<CombinedSignal, PortfolioError> {
    check_inputs(signals, Some(train_ics))?;
    let total: f64 = train_ics.iter().map(|v| v.abs()).sum();
    if total <= 0.0 {
        return Err(PortfolioError::Degenerate("all train ICs are zero".into()));
    }
    let weights: Vec<f64> = train_ics.iter().map(|v| v.abs() / total).collect();
    let signs: Vec<f64> = train_ics.iter().map(|&v| ic_sign(v)).collect();
    let z: Vec<SignalMatrix> = signals.iter().map(rank_standardize).collect();
    Ok(CombinedSignal {
        signal: weighted_combine(&z, &weights, &signs),
        method: "ic_weighted",
        weights,
        signs,
    })
}

/// Descending |IC|, ties by input position.
pub fn ic_order(train_ics: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..train_ics.len()).collect();
    order.sort_by(|&a, &b| train_ics[b].abs().total_cmp(&train_ics[a].abs()).then(a.cmp(&b)));
    order
}

pub const GS_DROP_TOL: f64 = 1e-10;

/// Per-bar Gram-Schmidt components, one matrix per input (in input order).
/// Each bar uses the assets present in every input; a component whose
/// residual norm falls below [`GS_DROP_TOL`] is missing for that bar.
pub fn orthogonal_components(
    signals: &[SignalMatrix],
    train_ics: &[f64],
) -> Result<Vec<SignalMatrix>, PortfolioError> {
    check_inputs(signals, Some(train_ics))?;
    let order = ic_order(train_ics);
    let axes = signals[0].axes().clone();
    let mut comps: Vec<SignalMatrix> = signals.iter().map(|_| SignalMatrix::missing(axes.clone())).collect();
    let (n_times, n_assets) = signals[0].shape();
    for t in 0..n_times {
        let common: Vec<usize> = (0..n_assets)
            .filter(|&a| signals.iter().all(|s| !is_missing(s.get(t, a))))
            .collect();
        let n = common.len();
        if n < 2 {
            continue;
        }
        let mut basis: Vec<Vec<f64>> = Vec::new();
        for &i in &order {
            let vals: Vec<f64> = common.iter().map(|&a| signals[i].get(t, a)).collect();
            let mid = (n as f64 + 1.0) / 2.0;
            let mut v: Vec<f64> = average_ranks(&vals).into_iter().map(|r| r - mid).collect();
            let norm = dot(&v, &v).sqrt();
            if norm < GS_DROP_TOL {
                continue;
            }
            v.iter_mut().for_each(|x| *x /= norm);
            for e in &basis {
                let p = dot(&v, e);
                v.iter_mut().zip(e).for_each(|(x, y)| *x -= p * y);
            }
            let norm = dot(&v, &v).sqrt();
            if norm < GS_DROP_TOL {
                continue;
            }
            v.iter_mut().for_each(|x| *x /= norm);
            for (&a, &x) in common.iter().zip(&v) {
                comps[i].set(t, a, x);
            }
            basis.push(v);
        }
    }
    Ok(comps)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Equal average of the sign-corrected surviving components at each cell.
pub fn combine_orthogonal(
    signals: &[SignalMatrix],
    train_ics: &[f64],
) -> Result<CombinedSignal, PortfolioError> {
    let comps = orthogonal_components(signals, train_ics)?;
    let k = signals.len();
    let weights = vec![1.0 / k as f64; k];
    let signs: Vec<f64> = train_ics.iter().map(|&v| ic_sign(v)).collect();
    Ok(CombinedSignal {
        signal: weighted_combine(&comps, &weights, &signs),
        method: "orthogonal",
        weights,
        signs,
    })
}

/// Training or validation cells of the stacked regression problem.
#[derive(Debug, Clone)]
pub struct Design {
    /// (bar, asset) of every row.
    pub cells: Vec<(usize, usize)>,
    /// One column per factor: rank-standardized values, missing as 0.
    pub columns: Vec<Vec<f64>>,
    /// Rank-standardized target.
    pub y: Vec<f64>,
}

/// Stacks cells in `bars` whose target is present.
pub fn build_design(
    z: &[SignalMatrix],
    target_z: &SignalMatrix,
    bars: std::ops::Range<usize>,
) -> Design {
    let mut cells = Vec::new();
    let mut y = Vec::new();
    for t in bars {
        for a in 0..target_z.n_assets() {
            let v = target_z.get(t, a);
            if !is_missing(v) {
                cells.push((t, a));
                y.push(v);
            }
        }
    }
    let columns = z
        .iter()
        .map(|m| {
            cells
                .iter()
                .map(|&(t, a)| {
                    let v = m.get(t, a);
                    if is_missing(v) {
                        0.0
                    } else {
                        v
                    }
                })
                .collect()
        })
        .collect();
    Design { cells, columns, y }
}

/// Centers and scales every column and the response to unit variance.
/// Returns the kept column indices; zero-variance columns are dropped.
pub fn standardize(columns: &[Vec<f64>], y: &[f64]) -> (Vec<Vec<f64>>, Vec<f64>, Vec<usize>) {
    let scale = |v: &[f64]| -> Option<Vec<f64>> {
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let sd = (v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt();
        (sd > 1e-12).then(|| v.iter().map(|x| (x - mean) / sd).collect())
    };
    let mut kept = Vec::new();
    let mut cols = Vec::new();
    for (j, c) in columns.iter().enumerate() {
        match scale(c) {
            Some(s) => {
                kept.push(j);
                cols.push(s);
            }
            None => log::info!("lasso: dropping factor {j} (zero variance on training cells)"),
        }
    }
    let y = scale(y).unwrap_or_else(|| vec![0.0; y.len()]);
    (cols, y, kept)
}

pub const LASSO_TOL: f64 = 1e-8;
const LASSO_MAX_SWEEPS: usize = 1_000_000;

/// Minimizes (1/2N)·|y - Xβ|² + λ·|β|₁ by cyclic coordinate descent from
/// `start`, stopping once a full sweep changes no coefficient by more than
/// [`LASSO_TOL`].
pub fn lasso_cd(columns: &[Vec<f64>], y: &[f64], lambda: f64, start: &[f64]) -> Vec<f64> {
    let p = columns.len();
    let n = y.len() as f64;
    let mut beta = start.to_vec();
    let mut resid = y.to_vec();
    for (j, c) in columns.iter().enumerate() {
        if beta[j] != 0.0 {
            resid.iter_mut().zip(c).for_each(|(r, x)| *r -= beta[j] * x);
        }
    }
    let sq: Vec<f64> = columns.iter().map(|c| dot(c, c) / n).collect();
    for _ in 0..LASSO_MAX_SWEEPS {
        let mut max_delta: f64 = 0.0;
        for j in 0..p {
            if sq[j] == 0.0 {
                continue;
            }
            let rho = dot(&columns[j], &resid) / n + sq[j] * beta[j];
            let new = soft_threshold(rho, lambda) / sq[j];
            let delta = new - beta[j];
            if delta != 0.0 {
                resid.iter_mut().zip(&columns[j]).for_each(|(r, x)| *r -= delta * x);
                beta[j] = new;
                max_delta = max_delta.max(delta.abs());
            }
        }
        if max_delta < LASSO_TOL {
            break;
        }
    }
    beta
}

fn soft_threshold(x: f64, lambda: f64) -> f64 {
    if x > lambda {
        x - lambda
    } else if x < -lambda {
        x + lambda
    } else {
        0.0
    }
}

/// Gradient of the smooth part, X^T (y - Xβ) / N.
pub fn lasso_gradient(columns: &[Vec<f64>], y: &[f64], beta: &[f64]) -> Vec<f64> {
    let n = y.len() as f64;
    let mut resid = y.to_vec();
    for (c, &b) in columns.iter().zip(beta) {
        resid.iter_mut().zip(c).for_each(|(r, x)| *r -= b * x);
    }
    columns.iter().map(|c| dot(c, &resid) / n).collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct LassoPoint {
    pub lambda: f64,
    pub nonzero: usize,
    /// Mean IC of the fitted combination over the validation bars; missing
    /// when the fit is all zero.
    pub validation_ic: f64,
    /// One coefficient per input factor.
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct LassoSelection {
    pub lambda: f64,
    /// One coefficient per input factor (0 for dropped columns).
    pub weights: Vec<f64>,
    /// Nonzero factors, descending by |coefficient|.
    pub selected: Vec<usize>,
    pub path: Vec<LassoPoint>,
    pub dropped: Vec<usize>,
}

pub const LASSO_HEADER: &str = "rank,factor_id,coefficient,abs_coefficient";

impl LassoSelection {
    pub fn to_csv(&self, ids: &[u64]) -> String {
        let mut s = format!("{LASSO_HEADER}\n");
        for (r, &j) in self.selected.iter().enumerate() {
            let w = self.weights[j];
            s.push_str(&format!("{},{},{:.8},{:.8}\n", r + 1, ids[j], w, w.abs()));
        }
        s
    }
}

fn combination(z: &[SignalMatrix], weights: &[f64]) -> SignalMatrix {
    let mut out = SignalMatrix::filled(z[0].axes().clone(), 0.0);
    for (m, &w) in z.iter().zip(weights) {
        if w == 0.0 {
            continue;
        }
        for a in 0..out.n_assets() {
            let src = m.column(a);
            for (d, &v) in out.column_mut(a).iter_mut().zip(src) {
                if !is_missing(v) {
                    *d += w * v;
                }
            }
        }
    }
    out
}

fn mean_ic_over(series: &IcSeries, bars: std::ops::Range<usize>) -> Option<f64> {
    let v: Vec<f64> = series.values[bars].iter().copied().filter(|x| !is_missing(*x)).collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Fits the lasso path on bars `[0, split)` and picks λ by the mean IC of the
/// fitted combination on bars `[split, T)`. Ties go to the larger λ.
pub fn select_lasso(
    signals: &[SignalMatrix],
    target: &SignalMatrix,
    lambda_grid: &[f64],
    split: usize,
) -> Result<LassoSelection, PortfolioError> {
    check_inputs(signals, None)?;
    if target.shape() != signals[0].shape() {
        return Err(PortfolioError::Shape {
            index: signals.len(),
            got: target.shape(),
            want: signals[0].shape(),
        });
    }
    let n_times = target.n_times();
    if split == 0 || split >= n_times {
        return Err(PortfolioError::Invalid(format!(
            "split {split} must lie strictly inside 0..{n_times}"
        )));
    }
    if lambda_grid.is_empty() || lambda_grid.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
        return Err(PortfolioError::Invalid("lambda grid must be non-empty, finite and >= 0".into()));
    }
    let z: Vec<SignalMatrix> = signals.iter().map(rank_standardize).collect();
    let design = build_design(&z, &rank_standardize(target), 0..split);
    if design.y.len() < 2 {
        return Err(PortfolioError::Degenerate("fewer than 2 training cells".into()));
    }
    let (cols, y, kept) = standardize(&design.columns, &design.y);
    let dropped: Vec<usize> = (0..signals.len()).filter(|j| !kept.contains(j)).collect();

    let mut grid: Vec<f64> = lambda_grid.to_vec();
    grid.sort_by(|a, b| b.total_cmp(a));
    grid.dedup();
    let mut beta = vec![0.0; kept.len()];
    let mut path = Vec::with_capacity(grid.len());
    for &lambda in &grid {
        beta = lasso_cd(&cols, &y, lambda, &beta);
        let mut weights = vec![0.0; signals.len()];
        for (k, &j) in kept.iter().enumerate() {
            weights[j] = beta[k];
        }
        let nonzero = weights.iter().filter(|w| **w != 0.0).count();
        let validation_ic = if nonzero == 0 {
            f64::NAN
        } else {
            let combo = combination(&z, &weights);
            let series = ic_series(&combo, target).expect("aligned");
            mean_ic_over(&series, split..n_times).unwrap_or(f64::NAN)
        };
        path.push(LassoPoint {
            lambda,
            nonzero,
            validation_ic,
            weights,
        });
    }
    let best = path
        .iter()
        .enumerate()
        .filter(|(_, p)| p.validation_ic.is_finite())
        .fold(None::<(usize, f64)>, |acc, (i, p)| match acc {
            Some((_, v)) if p.validation_ic <= v => acc,
            _ => Some((i, p.validation_ic)),
        })
        .map_or(0, |(i, _)| i);
    let chosen = &path[best];
    let mut selected: Vec<usize> = (0..signals.len()).filter(|&j| chosen.weights[j] != 0.0).collect();
    selected.sort_by(|&a, &b| chosen.weights[b].abs().total_cmp(&chosen.weights[a].abs()).then(a.cmp(&b)));
    Ok(LassoSelection {
        lambda: chosen.lambda,
        weights: chosen.weights.clone(),
        selected,
        dropped,
        path,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepRow {
    pub step: usize,
    pub added: usize,
    pub individual_ic: f64,
    pub combined_ic: f64,
    pub icir: f64,
    pub delta_icir: f64,
}

pub const STEPWISE_HEADER: &str = "step,factor_id,individual_ic,combined_ic,icir,delta_icir";

pub fn stepwise_csv(rows: &[StepRow], ids: &[u64]) -> String {
    let mut s = format!("{STEPWISE_HEADER}\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{:.8},{:.8},{:.8},{:.8}\n",
            r.step, ids[r.added], r.individual_ic, r.combined_ic, r.icir, r.delta_icir
        ));
    }
    s
}

/// Mean IC and ICIR of a signal; ICIR is `-inf` when undefined so it never
/// wins a comparison.
pub fn ic_stats(signal: &SignalMatrix, target: &SignalMatrix) -> (f64, f64) {
    let series = ic_series(signal, target).expect("aligned");
    let mean = series.mean().unwrap_or(f64::NAN);
    let ir = icir(&series).unwrap_or(f64::NEG_INFINITY);
    (mean, ir)
}

/// Greedy forward selection on equal-weight combined ICIR, with each factor
/// signed by its own mean IC.
pub fn select_stepwise(
    signals: &[SignalMatrix],
    target: &SignalMatrix,
    max_steps: usize,
) -> Result<(Vec<usize>, Vec<StepRow>), PortfolioError> {
    check_inputs(signals, None)?;
    if max_steps == 0 {
        return Err(PortfolioError::Invalid("max_steps must be >= 1".into()));
    }
    let z: Vec<SignalMatrix> = signals.iter().map(rank_standardize).collect();
    let solo: Vec<(f64, f64)> = z.iter().map(|s| ic_stats(s, target)).collect();
    let signs: Vec<f64> = solo.iter().map(|(m, _)| ic_sign(if m.is_nan() { 0.0 } else { *m })).collect();

    let mut chosen: Vec<usize> = Vec::new();
    let mut rows: Vec<StepRow> = Vec::new();
    let mut current = f64::NEG_INFINITY;
    while chosen.len() < max_steps.min(signals.len()) {
        let mut best: Option<(usize, f64, f64)> = None;
        for j in 0..signals.len() {
            if chosen.contains(&j) {
                continue;
            }
            let (ic, ir) = if chosen.is_empty() {
                // sign-corrected standalone numbers
                (signs[j] * solo[j].0, signs[j] * solo[j].1)
            } else {
                let mut set = chosen.clone();
                set.push(j);
                set_stats(&z, &signs, &set, target)
            };
            if ir.is_finite() && best.is_none_or(|(_, _, b)| ir > b) {
                best = Some((j, ic, ir));
            }
        }
        let Some((j, ic, ir)) = best else { break };
        if !chosen.is_empty() && ir <= current {
            break;
        }
        let delta = if chosen.is_empty() { 0.0 } else { ir - current };
        chosen.push(j);
        rows.push(StepRow {
            step: chosen.len(),
            added: j,
            individual_ic: solo[j].0,
            combined_ic: ic,
            icir: ir,
            delta_icir: delta,
        });
        current = ir;
    }
    Ok((chosen, rows))
}

/// Mean IC and ICIR of the equal-weight combination of `set`.
/// The average is a plain sum in `set` order over the present count, so
/// cells that tie exactly in rank space stay tied.
pub fn set_stats(z: &[SignalMatrix], signs: &[f64], set: &[usize], target: &SignalMatrix) -> (f64, f64) {
    let mut out = SignalMatrix::missing(z[0].axes().clone());
    for a in 0..out.n_assets() {
        let dst = out.column_mut(a);
        for (t, d) in dst.iter_mut().enumerate() {
            let (mut sum, mut n) = (0.0, 0usize);
            for &j in set {
                let v = z[j].column(a)[t];
                if !is_missing(v) {
                    sum += signs[j] * v;
                    n += 1;
                }
            }
            if n > 0 {
                *d = sum / n as f64;
            }
        }
    }
    ic_stats(&out, target)
}

/// Writes `time,asset,f_<id>...,target` rows for every cell with a present
/// target; factor values are rank-standardized and blank when missing.
pub fn export_design<W: Write>(
    w: W,
    signals: &[SignalMatrix],
    ids: &[u64],
    target: &SignalMatrix,
) -> Result<(), PortfolioError> {
    check_inputs(signals, None)?;
    let z: Vec<SignalMatrix> = signals.iter().map(rank_standardize).collect();
    let io = |e: csv::Error| PortfolioError::Invalid(format!("design export failed: {e}"));
    let mut wr = csv::Writer::from_writer(w);
    let mut header = vec!["time".to_string(), "asset".to_string()];
    header.extend(ids.iter().map(|id| format!("f_{id}")));
    header.push("target".into());
    wr.write_record(&header).map_err(io)?;
    let axes = target.axes();
    for t in 0..target.n_times() {
        for a in 0..target.n_assets() {
            let y = target.get(t, a);
            if is_missing(y) {
                continue;
            }
            let mut rec = vec![axes.timestamps[t].to_string(), axes.assets[a].clone()];
            for m in &z {
                let v = m.get(t, a);
                rec.push(if is_missing(v) { String::new() } else { format!("{v:?}") });
            }
            rec.push(format!("{y:?}"));
            wr.write_record(&rec).map_err(io)?;
        }
    }
    wr.flush().map_err(|e| PortfolioError::Invalid(e.to_string()))?;
    Ok(())
}
