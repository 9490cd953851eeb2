//! Market panel: the (time, asset, field) tensor, CSV ingestion, a
//! deterministic synthetic market and the forward-return target.

use std::collections::HashMap;
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::signal::{is_missing, Axes, SignalMatrix, MISSING};

pub const CSV_HEADER: [&str; 9] = [
    "timestamp", "asset", "open", "high", "low", "close", "volume", "amount", "vwap",
];

#[derive(Debug, Error)]
pub enum PanelError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error at line {line}: {message}")]
    Parse { line: u64, message: String },
    #[error("data error at line {line}: {message}")]
    Data { line: u64, message: String },
    #[error("invalid panel: {0}")]
    Invalid(String),
    #[error("invalid synth config: {0}")]
    Config(String),
}

/// Raw and derived market fields.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize,
)]
#[serde(rename_all = "lowercase")]
pub enum Field {
    Open,
    High,
    Low,
    Close,
    Volume,
    Amount,
    Vwap,
    Returns,
}

impl Field {
    pub const ALL: [Field; 8] = [
        Field::Open,
        Field::High,
        Field::Low,
        Field::Close,
        Field::Volume,
        Field::Amount,
        Field::Vwap,
        Field::Returns,
    ];

    /// Fields carried by the CSV schema; `returns` is always derived.
    pub const RAW: [Field; 7] = [
        Field::Open,
        Field::High,
        Field::Low,
        Field::Close,
        Field::Volume,
        Field::Amount,
        Field::Vwap,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Field::Open => "open",
            Field::High => "high",
            Field::Low => "low",
            Field::Close => "close",
            Field::Volume => "volume",
            Field::Amount => "amount",
            Field::Vwap => "vwap",
            Field::Returns => "returns",
        }
    }

    pub fn is_price(self) -> bool {
        matches!(
            self,
            Field::Open | Field::High | Field::Low | Field::Close | Field::Vwap
        )
    }

    fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Field {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Field {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "open" => Ok(Field::Open),
            "high" => Ok(Field::High),
            "low" => Ok(Field::Low),
            "close" => Ok(Field::Close),
            "volume" => Ok(Field::Volume),
            "amount" | "amt" => Ok(Field::Amount),
            "vwap" => Ok(Field::Vwap),
            "returns" => Ok(Field::Returns),
            other => Err(format!("unknown field `{other}`")),
        }
    }
}

/// The market tensor. Immutable after construction.
#[derive(Debug, Clone)]
pub struct Panel {
    axes: Arc<Axes>,
    fields: Vec<Option<SignalMatrix>>,
}

impl Panel {
    /// Builds a panel from the seven raw fields, validating every invariant
    /// and deriving `returns`.
    pub fn from_raw(
        timestamps: Vec<i64>,
        assets: Vec<String>,
        raw: [SignalMatrix; 7],
    ) -> Result<Panel, PanelError> {
        if timestamps.windows(2).any(|w| w[0] >= w[1]) {
            return Err(PanelError::Invalid(
                "timestamps must be strictly increasing".into(),
            ));
        }
        let mut seen = HashMap::new();
        for (i, a) in assets.iter().enumerate() {
            if let Some(j) = seen.insert(a.as_str(), i) {
                return Err(PanelError::Invalid(format!(
                    "duplicate asset `{a}` at positions {j} and {i}"
                )));
            }
        }
        let axes = Arc::new(Axes { timestamps, assets });
        let mut fields: Vec<Option<SignalMatrix>> = vec![None; Field::ALL.len()];
        for (field, m) in Field::RAW.into_iter().zip(raw) {
            if m.shape() != (axes.n_times(), axes.n_assets()) {
                return Err(PanelError::Invalid(format!(
                    "field {field} has shape {:?}, expected {:?}",
                    m.shape(),
                    (axes.n_times(), axes.n_assets())
                )));
            }
            for (a, col) in m.columns().enumerate() {
                for (t, &v) in col.iter().enumerate() {
                    if is_missing(v) {
                        continue;
                    }
                    let ok = if field.is_price() { v > 0.0 } else { v >= 0.0 };
                    if !ok {
                        return Err(PanelError::Invalid(format!(
                            "field {field} has invalid value {v} at (t={t}, asset={})",
                            axes.assets[a]
                        )));
                    }
                }
            }
            fields[field.index()] = Some(m.with_subset_axes(axes.clone()));
        }
        let close = fields[Field::Close.index()].as_ref().expect("close present");
        let returns = derive_returns(close);
        fields[Field::Returns.index()] = Some(returns);
        Ok(Panel { axes, fields })
    }

    pub fn axes(&self) -> &Arc<Axes> {
        &self.axes
    }

    pub fn timestamps(&self) -> &[i64] {
        &self.axes.timestamps
    }

    pub fn assets(&self) -> &[String] {
        &self.axes.assets
    }

    pub fn n_times(&self) -> usize {
        self.axes.n_times()
    }

    pub fn n_assets(&self) -> usize {
        self.axes.n_assets()
    }

    pub fn field(&self, field: Field) -> Option<&SignalMatrix> {
        self.fields[field.index()].as_ref()
    }

    pub fn field_names(&self) -> Vec<Field> {
        Field::ALL
            .into_iter()
            .filter(|f| self.fields[f.index()].is_some())
            .collect()
    }

    /// A copy with the given fields removed (e.g. a feed without `vwap`).
    pub fn without_fields(&self, drop: &[Field]) -> Panel {
        let mut fields = self.fields.clone();
        for f in drop {
            fields[f.index()] = None;
        }
        Panel {
            axes: self.axes.clone(),
            fields,
        }
    }

    /// The panel restricted to its first `n_assets` assets.
    pub fn subset_assets(&self, n_assets: usize) -> Panel {
        let n_assets = n_assets.min(self.n_assets());
        let axes = Arc::new(Axes {
            timestamps: self.axes.timestamps.clone(),
            assets: self.axes.assets[..n_assets].to_vec(),
        });
        let fields = self
            .fields
            .iter()
            .map(|f| f.as_ref().map(|m| m.with_subset_axes(axes.clone())))
            .collect();
        Panel { axes, fields }
    }

    /// The panel restricted to bars `start..end`. Returns are re-derived, so
    /// the first bar of the slice is missing.
    pub fn slice_times(&self, start: usize, end: usize) -> Panel {
        let end = end.min(self.n_times());
        let start = start.min(end);
        let axes = Arc::new(Axes {
            timestamps: self.axes.timestamps[start..end].to_vec(),
            assets: self.axes.assets.clone(),
        });
        let mut fields: Vec<Option<SignalMatrix>> = vec![None; Field::ALL.len()];
        for field in Field::RAW {
            if let Some(m) = self.field(field) {
                let mut data = Vec::with_capacity((end - start) * self.n_assets());
                for col in m.columns() {
                    data.extend_from_slice(&col[start..end]);
                }
                fields[field.index()] =
                    Some(SignalMatrix::from_columns_data(axes.clone(), data));
            }
        }
        let close = fields[Field::Close.index()].as_ref().expect("close present");
        fields[Field::Returns.index()] = Some(derive_returns(close));
        Panel { axes, fields }
    }

    /// Writes the raw fields in the ingestion CSV schema. Cells with no raw
    /// field present are omitted; individually missing fields are empty.
    pub fn write_csv(&self, path: &Path) -> Result<(), PanelError> {
        let io_err = |source| PanelError::Io {
            path: path.display().to_string(),
            source,
        };
        let file = std::fs::File::create(path).map_err(io_err)?;
        let mut w = std::io::BufWriter::new(file);
        self.write_csv_to(&mut w).map_err(io_err)?;
        w.flush().map_err(io_err)
    }

    pub fn write_csv_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        writeln!(w, "{}", CSV_HEADER.join(","))?;
        let raw: Vec<&SignalMatrix> = Field::RAW
            .iter()
            .map(|f| self.field(*f).expect("raw field present"))
            .collect();
        for t in 0..self.n_times() {
            for a in 0..self.n_assets() {
                if raw.iter().all(|m| !m.is_present(t, a)) {
                    continue;
                }
                write!(w, "{},{}", self.axes.timestamps[t], self.axes.assets[a])?;
                for m in &raw {
                    let v = m.get(t, a);
                    if is_missing(v) {
                        write!(w, ",")?;
                    } else {
                        write!(w, ",{v}")?;
                    }
                }
                writeln!(w)?;
            }
        }
        Ok(())
    }
}

fn derive_returns(close: &SignalMatrix) -> SignalMatrix {
    let mut out = SignalMatrix::missing(close.axes().clone());
    for a in 0..close.n_assets() {
        let src = close.column(a);
        let dst = out.column_mut(a);
        for t in 1..src.len() {
            dst[t] = crate::signal::present_or_missing(src[t] / src[t - 1] - 1.0);
        }
    }
    out
}

/// Reads a bar CSV with header
/// `timestamp,asset,open,high,low,close,volume,amount,vwap`.
pub fn load_csv(path: &Path) -> Result<Panel, PanelError> {
    let file = std::fs::File::open(path).map_err(|source| PanelError::Io {
        path: path.display().to_string(),
        source,
    })?;
    read_csv(file)
}

pub fn read_csv<R: std::io::Read>(reader: R) -> Result<Panel, PanelError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| PanelError::Parse {
            line: 1,
            message: e.to_string(),
        })?
        .clone();
    if headers.iter().collect::<Vec<_>>() != CSV_HEADER {
        return Err(PanelError::Parse {
            line: 1,
            message: format!("expected header `{}`", CSV_HEADER.join(",")),
        });
    }

    struct Row {
        ts: i64,
        asset: usize,
        values: [f64; 7],
        line: u64,
    }
    let mut rows = Vec::new();
    let mut asset_ids: HashMap<String, usize> = HashMap::new();
    let mut assets = Vec::new();
    for result in rdr.records() {
        let record = result.map_err(|e| PanelError::Parse {
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let parse_err = |message: String| PanelError::Parse { line, message };
        if record.len() != CSV_HEADER.len() {
            return Err(parse_err(format!(
                "expected {} columns, found {}",
                CSV_HEADER.len(),
                record.len()
            )));
        }
        let ts: i64 = record[0]
            .parse()
            .map_err(|_| parse_err(format!("invalid timestamp `{}`", &record[0])))?;
        let name = &record[1];
        if name.is_empty() {
            return Err(parse_err("empty asset identifier".into()));
        }
        let asset = match asset_ids.get(name) {
            Some(&i) => i,
            None => {
                asset_ids.insert(name.to_string(), assets.len());
                assets.push(name.to_string());
                assets.len() - 1
            }
        };
        let mut values = [MISSING; 7];
        for (k, field) in Field::RAW.iter().enumerate() {
            let cell = &record[k + 2];
            if cell.is_empty() {
                continue;
            }
            let v: f64 = cell
                .parse()
                .map_err(|_| parse_err(format!("invalid {field} value `{cell}`")))?;
            if !v.is_finite() {
                return Err(parse_err(format!("non-finite {field} value `{cell}`")));
            }
            let ok = if field.is_price() { v > 0.0 } else { v >= 0.0 };
            if !ok {
                return Err(PanelError::Data {
                    line,
                    message: format!("{field} must be {}, got {v}", if field.is_price() { "positive" } else { "non-negative" }),
                });
            }
            values[k] = v;
        }
        rows.push(Row {
            ts,
            asset,
            values,
            line,
        });
    }

    let mut timestamps: Vec<i64> = rows.iter().map(|r| r.ts).collect();
    timestamps.sort_unstable();
    timestamps.dedup();
    let time_index: HashMap<i64, usize> = timestamps
        .iter()
        .enumerate()
        .map(|(i, &t)| (t, i))
        .collect();
    let axes = Arc::new(Axes {
        timestamps: timestamps.clone(),
        assets: assets.clone(),
    });
    let mut raw: [SignalMatrix; 7] = std::array::from_fn(|_| SignalMatrix::missing(axes.clone()));
    let mut filled: HashMap<(usize, usize), u64> = HashMap::new();
    for row in &rows {
        let t = time_index[&row.ts];
        if let Some(first) = filled.insert((t, row.asset), row.line) {
            return Err(PanelError::Data {
                line: row.line,
                message: format!(
                    "duplicate (timestamp {}, asset {}) first seen at line {first}",
                    row.ts, assets[row.asset]
                ),
            });
        }
        for (k, m) in raw.iter_mut().enumerate() {
            m.set(t, row.asset, row.values[k]);
        }
    }
    Panel::from_raw(timestamps, assets, raw)
}

/// Parameters of the deterministic synthetic market.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub n_assets: usize,
    pub n_bars: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_base_price")]
    pub base_price: f64,
    /// Per-bar log-return volatility.
    #[serde(default = "default_vol_scale")]
    pub vol_scale: f64,
    /// Median traded volume per bar.
    #[serde(default = "default_volume_scale")]
    pub volume_scale: f64,
    /// Strength in `[0, 1)` of the planted next-bar predictability (a blend of
    /// short-term reversal, volume shock and wick imbalance). Zero yields a
    /// pure random walk.
    #[serde(default)]
    pub alpha_strength: f64,
}

fn default_base_price() -> f64 {
    20.0
}

fn default_vol_scale() -> f64 {
    0.004
}

fn default_volume_scale() -> f64 {
    1.0e5
}

impl SynthConfig {
    pub fn new(n_assets: usize, n_bars: usize, seed: u64) -> Self {
        SynthConfig {
            n_assets,
            n_bars,
            seed,
            base_price: default_base_price(),
            vol_scale: default_vol_scale(),
            volume_scale: default_volume_scale(),
            alpha_strength: 0.0,
        }
    }

    pub fn with_alpha(mut self, alpha_strength: f64) -> Self {
        self.alpha_strength = alpha_strength;
        self
    }

    pub fn validate(&self) -> Result<(), PanelError> {
        if self.n_assets < 2 {
            return Err(PanelError::Config("n_assets must be >= 2".into()));
        }
        if self.n_bars < 2 {
            return Err(PanelError::Config("n_bars must be >= 2".into()));
        }
        if !(self.vol_scale > 0.0 && self.vol_scale.is_finite()) {
            return Err(PanelError::Config("vol_scale must be > 0".into()));
        }
        if !(self.base_price > 0.0 && self.base_price.is_finite()) {
            return Err(PanelError::Config("base_price must be > 0".into()));
        }
        if !(self.volume_scale > 0.0 && self.volume_scale.is_finite()) {
            return Err(PanelError::Config("volume_scale must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.alpha_strength) {
            return Err(PanelError::Config("alpha_strength must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// First bar: 2024-01-02 01:30 UTC; 24 ten-minute bars per calendar day.
const SYNTH_EPOCH: i64 = 1_704_159_000;
const BARS_PER_DAY: usize = 24;

pub fn synth_timestamp(bar: usize) -> i64 {
    let day = (bar / BARS_PER_DAY) as i64;
    let slot = (bar % BARS_PER_DAY) as i64;
    SYNTH_EPOCH + day * 86_400 + slot * 600
}

/// Generates a deterministic synthetic panel.
///
/// Close follows a per-asset geometric random walk; open is the previous
/// close; high and low bracket the bar body with exponential wicks; volume is
/// log-normal and vwap is a typical price inside the bar range. With
/// `alpha_strength > 0` the standardized innovation of bar `t+1` loads on a
/// score built from bar `t` (negative own return, volume shock, wick
/// imbalance), which plants recoverable cross-sectional signal.
pub fn synth_panel(config: &SynthConfig) -> Result<Panel, PanelError> {
    config.validate()?;
    let (n_assets, n_bars) = (config.n_assets, config.n_bars);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let timestamps: Vec<i64> = (0..n_bars).map(synth_timestamp).collect();
    let assets: Vec<String> = (0..n_assets).map(|a| format!("S{a:04}")).collect();
    let axes = Arc::new(Axes {
        timestamps: timestamps.clone(),
        assets: assets.clone(),
    });
    let mut cols: [Vec<f64>; 7] = std::array::from_fn(|_| Vec::with_capacity(n_assets * n_bars));
    let strength = config.alpha_strength;
    let residual = (1.0 - strength * strength).sqrt();

    for _ in 0..n_assets {
        let level: f64 = StandardNormal.sample(&mut rng);
        let vol_mult: f64 = StandardNormal.sample(&mut rng);
        let mut close = config.base_price * (0.3 * level).exp();
        let sigma = config.vol_scale * (0.25 * vol_mult).exp();
        let mut score = 0.0_f64;
        for _ in 0..n_bars {
            let open = close;
            let eps: f64 = StandardNormal.sample(&mut rng);
            let innovation = strength * score + residual * eps;
            close = open * (sigma * innovation).exp();
            let up: f64 = Exp1.sample(&mut rng);
            let down: f64 = Exp1.sample(&mut rng);
            let high = open.max(close) * (0.5 * sigma * up).exp();
            let low = open.min(close) * (-0.5 * sigma * down).exp();
            let shock: f64 = StandardNormal.sample(&mut rng);
            let volume = config.volume_scale * (0.5 * shock + 0.3 * innovation.abs()).exp();
            let weight: f64 = rng.gen_range(0.25..0.75);
            let typical = 0.5 * (open + close);
            let vwap = (typical + weight * (high - low) - 0.5 * (high - low)).clamp(low, high);
            let amount = volume * vwap;
            score = (-innovation + shock + (up - down) / std::f64::consts::SQRT_2)
                / 3.0_f64.sqrt();
            for (k, v) in [open, high, low, close, volume, amount, amount / volume]
                .into_iter()
                .enumerate()
            {
                cols[k].push(v);
            }
        }
    }
    let raw = cols.map(|data| SignalMatrix::from_columns_data(axes.clone(), data));
    Panel::from_raw(timestamps, assets, raw)
}

/// Next-bar open-to-close return `(close[t+1] - open[t+1]) / open[t+1]`,
/// aligned to bar `t`. The last bar is missing.
pub fn forward_return(panel: &Panel) -> Result<SignalMatrix, PanelError> {
    let open = panel
        .field(Field::Open)
        .ok_or_else(|| PanelError::Invalid("open field absent".into()))?;
    let close = panel
        .field(Field::Close)
        .ok_or_else(|| PanelError::Invalid("close field absent".into()))?;
    let mut out = SignalMatrix::missing(panel.axes().clone());
    for a in 0..panel.n_assets() {
        let (o, c) = (open.column(a), close.column(a));
        let dst = out.column_mut(a);
        for t in 0..o.len().saturating_sub(1) {
            let (o1, c1) = (o[t + 1], c[t + 1]);
            if is_missing(o1) || is_missing(c1) || o1 == 0.0 {
                continue;
            }
            dst[t] = crate::signal::present_or_missing((c1 - o1) / o1);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    const SMALL: &str = "timestamp,asset,open,high,low,close,volume,amount,vwap
600,A,10,10.5,9.5,10,100,1000,10
600,B,20,21,19,20,100,2000,20
1200,A,10,11.5,9.8,11,100,1050,10.5
1200,B,20,21,19,20.5,100,2030,20.3
1800,A,11,11.2,9.8,9.9,100,1050,10.5
1800,B,20.5,21,20,20.8,100,2070,20.7
";

    #[test]
    fn loads_small_panel_and_derives_returns() {
        let p = read_csv(SMALL.as_bytes()).unwrap();
        assert_eq!((p.n_times(), p.n_assets()), (3, 2));
        assert_eq!(p.field_names().len(), 8);
        let r = p.field(Field::Returns).unwrap();
        assert!(is_missing(r.get(0, 0)));
        assert!((r.get(1, 0) - 0.10).abs() < 1e-12);
        assert!((r.get(2, 0) + 0.10).abs() < 1e-12);
    }

    #[test]
    fn missing_cell_propagates_into_returns() {
        let text: String = SMALL
            .lines()
            .filter(|l| !l.starts_with("1200,B"))
            .map(|l| format!("{l}\n"))
            .collect();
        let p = read_csv(text.as_bytes()).unwrap();
        for f in Field::RAW {
            assert!(!p.field(f).unwrap().is_present(1, 1));
        }
        let r = p.field(Field::Returns).unwrap();
        assert!(!r.is_present(1, 1));
        assert!(!r.is_present(2, 1));
        assert!(r.is_present(2, 0));
    }

    #[test]
    fn rejects_duplicates_bad_prices_and_malformed_rows() {
        let dup = format!("{SMALL}600,A,10,10.5,9.5,10,100,1000,10\n");
        match read_csv(dup.as_bytes()) {
            Err(PanelError::Data { line, .. }) => assert_eq!(line, 8),
            other => panic!("expected data error, got {other:?}"),
        }
        let bad = SMALL.replace("1200,A,10,", "1200,A,-10,");
        assert!(matches!(read_csv(bad.as_bytes()), Err(PanelError::Data { line: 4, .. })));
        let malformed = SMALL.replace("1800,A,11,", "1800,A,eleven,");
        assert!(matches!(
            read_csv(malformed.as_bytes()),
            Err(PanelError::Parse { line: 6, .. })
        ));
        let header = SMALL.replace("vwap\n", "vw\n");
        assert!(matches!(read_csv(header.as_bytes()), Err(PanelError::Parse { line: 1, .. })));
    }

    #[test]
    fn unsorted_rows_are_sorted_by_timestamp() {
        let mut lines: Vec<&str> = SMALL.lines().collect();
        lines[1..].reverse();
        let p = read_csv(lines.join("\n").as_bytes()).unwrap();
        assert_eq!(p.timestamps(), &[600, 1200, 1800]);
        assert_eq!(p.assets(), &["B".to_string(), "A".to_string()]);
    }

    #[test]
    fn forward_return_is_next_bar_open_to_close() {
        let p = read_csv(SMALL.as_bytes()).unwrap();
        let fr = forward_return(&p).unwrap();
        assert!((fr.get(0, 0) - 0.1).abs() < 1e-12);
        assert!((fr.get(1, 0) - (9.9 - 11.0) / 11.0).abs() < 1e-12);
        assert!(!fr.is_present(2, 0) && !fr.is_present(2, 1));

        let q = read_csv(
            "timestamp,asset,open,high,low,close,volume,amount,vwap
0,A,100,102,99,101,1,1,100
0,B,100,102,99,101,1,1,100
1,A,100,102,99,101,1,1,100
1,B,,102,99,101,1,1,100
"
            .as_bytes(),
        )
        .unwrap();
        let fr = forward_return(&q).unwrap();
        assert!((fr.get(0, 0) - 0.01).abs() < 1e-15);
        assert!(!fr.is_present(0, 1));
    }

    #[test]
    fn synth_is_deterministic_and_bracketed() {
        let cfg = SynthConfig::new(5, 300, 42).with_alpha(0.2);
        let a = synth_panel(&cfg).unwrap();
        let b = synth_panel(&cfg).unwrap();
        for f in Field::ALL {
            assert!(a.field(f).unwrap().bit_eq(b.field(f).unwrap()));
        }
        let (o, h, l, c) = (
            a.field(Field::Open).unwrap(),
            a.field(Field::High).unwrap(),
            a.field(Field::Low).unwrap(),
            a.field(Field::Close).unwrap(),
        );
        for t in 0..a.n_times() {
            for s in 0..a.n_assets() {
                let (o, h, l, c) = (o.get(t, s), h.get(t, s), l.get(t, s), c.get(t, s));
                assert!(h >= o.max(c) && o.max(c) >= o.min(c) && o.min(c) >= l);
            }
        }
    }

    #[test]
    fn synth_rejects_bad_config() {
        assert!(synth_panel(&SynthConfig::new(1, 10, 0)).is_err());
        assert!(synth_panel(&SynthConfig::new(3, 1, 0)).is_err());
        let mut cfg = SynthConfig::new(3, 10, 0);
        cfg.vol_scale = 0.0;
        assert!(synth_panel(&cfg).is_err());
    }

    #[test]
    fn csv_round_trip_reproduces_rows() {
        let p = synth_panel(&SynthConfig::new(3, 50, 7)).unwrap();
        let mut buf = Vec::new();
        p.write_csv_to(&mut buf).unwrap();
        let q = read_csv(buf.as_slice()).unwrap();
        for f in Field::ALL {
            assert!(p.field(f).unwrap().bit_eq(q.field(f).unwrap()), "{f}");
        }
        let mut again = Vec::new();
        q.write_csv_to(&mut again).unwrap();
        assert_eq!(buf, again);
    }
}
