//! Dense (time, asset) signal storage with explicit missing cells.
//!
//! Values are stored asset-major so that every per-asset time series is a
//! contiguous slice; cross-sectional consumers gather rows through
//! [`SignalMatrix::row`].

use std::sync::Arc;

/// Sentinel for an absent cell. NaN is never a valid present value: every
/// kernel normalizes non-finite results to this marker.
pub const MISSING: f64 = f64::NAN;

#[inline]
pub fn is_missing(v: f64) -> bool {
    v.is_nan()
}

/// Maps any non-finite value onto [`MISSING`].
#[inline]
pub fn present_or_missing(v: f64) -> f64 {
    if v.is_finite() {
        v
    } else {
        MISSING
    }
}

/// Time and asset axes shared between a panel and every signal derived from it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Axes {
    pub timestamps: Vec<i64>,
    pub assets: Vec<String>,
}

impl Axes {
    /// Synthetic axes: 10-minute bars from epoch zero and assets `A0..`.
    pub fn synthetic(n_times: usize, n_assets: usize) -> Self {
        Axes {
            timestamps: (0..n_times as i64).map(|t| t * 600).collect(),
            assets: (0..n_assets).map(|a| format!("A{a}")).collect(),
        }
    }

    pub fn n_times(&self) -> usize {
        self.timestamps.len()
    }

    pub fn n_assets(&self) -> usize {
        self.assets.len()
    }
}

/// Realized factor values indexed by (time, asset).
#[derive(Debug, Clone)]
pub struct SignalMatrix {
    axes: Arc<Axes>,
    data: Vec<f64>,
}

impl SignalMatrix {
    pub fn filled(axes: Arc<Axes>, value: f64) -> Self {
        let len = axes.n_times() * axes.n_assets();
        SignalMatrix {
            axes,
            data: vec![value; len],
        }
    }

    pub fn missing(axes: Arc<Axes>) -> Self {
        Self::filled(axes, MISSING)
    }

    /// Builds from asset-major storage. Non-finite values become missing.
    pub fn from_columns_data(axes: Arc<Axes>, mut data: Vec<f64>) -> Self {
        assert_eq!(
            data.len(),
            axes.n_times() * axes.n_assets(),
            "column data does not match axes"
        );
        for v in &mut data {
            *v = present_or_missing(*v);
        }
        SignalMatrix { axes, data }
    }

    /// Builds from row-major input (`rows[t][a]`) with synthetic axes.
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let n_times = rows.len();
        let n_assets = rows.first().map_or(0, Vec::len);
        Self::from_rows_with_axes(Arc::new(Axes::synthetic(n_times, n_assets)), rows)
    }

    pub fn from_rows_with_axes(axes: Arc<Axes>, rows: &[Vec<f64>]) -> Self {
        let (n_times, n_assets) = (axes.n_times(), axes.n_assets());
        assert_eq!(rows.len(), n_times, "row count does not match axes");
        let mut out = Self::missing(axes);
        for (t, row) in rows.iter().enumerate() {
            assert_eq!(row.len(), n_assets, "ragged rows");
            for (a, &v) in row.iter().enumerate() {
                out.set(t, a, v);
            }
        }
        out
    }

    pub fn axes(&self) -> &Arc<Axes> {
        &self.axes
    }

    pub fn n_times(&self) -> usize {
        self.axes.n_times()
    }

    pub fn n_assets(&self) -> usize {
        self.axes.n_assets()
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.n_times(), self.n_assets())
    }

    #[inline]
    pub fn get(&self, t: usize, a: usize) -> f64 {
        self.data[a * self.n_times() + t]
    }

    /// Stores `v`, mapping non-finite values to missing.
    #[inline]
    pub fn set(&mut self, t: usize, a: usize, v: f64) {
        let n = self.n_times();
        self.data[a * n + t] = present_or_missing(v);
    }

    #[inline]
    pub fn is_present(&self, t: usize, a: usize) -> bool {
        !is_missing(self.get(t, a))
    }

    pub fn column(&self, a: usize) -> &[f64] {
        let n = self.n_times();
        &self.data[a * n..(a + 1) * n]
    }

    pub fn column_mut(&mut self, a: usize) -> &mut [f64] {
        let n = self.n_times();
        &mut self.data[a * n..(a + 1) * n]
    }

    pub fn columns(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.n_times().max(1)).take(self.n_assets())
    }

    /// Gathers one cross-section.
    pub fn row(&self, t: usize) -> Vec<f64> {
        (0..self.n_assets()).map(|a| self.get(t, a)).collect()
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        (0..self.n_times()).map(|t| self.row(t)).collect()
    }

    pub fn as_column_data(&self) -> &[f64] {
        &self.data
    }

    /// Keeps the first `n_assets` assets.
    pub fn subset_assets(&self, n_assets: usize) -> SignalMatrix {
        let n_assets = n_assets.min(self.n_assets());
        let axes = Arc::new(Axes {
            timestamps: self.axes.timestamps.clone(),
            assets: self.axes.assets[..n_assets].to_vec(),
        });
        self.with_subset_axes(axes)
    }

    /// Bars `start..end` (clamped).
    pub fn slice_times(&self, start: usize, end: usize) -> SignalMatrix {
        let end = end.min(self.n_times());
        let start = start.min(end);
        let axes = Arc::new(Axes {
            timestamps: self.axes.timestamps[start..end].to_vec(),
            assets: self.axes.assets.clone(),
        });
        let mut data = Vec::with_capacity((end - start) * self.n_assets());
        for col in self.columns() {
            data.extend_from_slice(&col[start..end]);
        }
        SignalMatrix { data, axes }
    }

    /// Re-labels the first `axes.n_assets()` columns under `axes` (which must
    /// share the time axis).
    pub fn with_subset_axes(&self, axes: Arc<Axes>) -> SignalMatrix {
        assert_eq!(axes.n_times(), self.n_times());
        assert!(axes.n_assets() <= self.n_assets());
        let len = axes.n_times() * axes.n_assets();
        SignalMatrix {
            data: self.data[..len].to_vec(),
            axes,
        }
    }

    /// Applies `f` to every present cell; the result is normalized.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> SignalMatrix {
        let data = self
            .data
            .iter()
            .map(|&v| {
                if is_missing(v) {
                    MISSING
                } else {
                    present_or_missing(f(v))
                }
            })
            .collect();
        SignalMatrix {
            axes: self.axes.clone(),
            data,
        }
    }

    pub fn count_present(&self) -> usize {
        self.data.iter().filter(|v| !is_missing(**v)).count()
    }

    pub fn missing_mask(&self) -> Vec<bool> {
        self.data.iter().map(|v| is_missing(*v)).collect()
    }

    /// Bitwise equality, treating all missing cells as equal.
    pub fn bit_eq(&self, other: &SignalMatrix) -> bool {
        self.shape() == other.shape()
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| (is_missing(*a) && is_missing(*b)) || a.to_bits() == b.to_bits())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_round_trip_and_normalize_non_finite() {
        let m = SignalMatrix::from_rows(&[vec![1.0, f64::INFINITY], vec![3.0, 4.0]]);
        assert_eq!(m.shape(), (2, 2));
        assert_eq!(m.get(1, 0), 3.0);
        assert!(is_missing(m.get(0, 1)));
        assert_eq!(m.column(1)[1], 4.0);
        assert!(m.rows()[0][1].is_nan());
    }

    #[test]
    fn subset_keeps_leading_assets() {
        let m = SignalMatrix::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]);
        let s = m.subset_assets(2);
        assert_eq!(s.shape(), (2, 2));
        assert_eq!(s.row(1), vec![4.0, 5.0]);
    }
}
