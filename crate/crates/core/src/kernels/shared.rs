//! Operators whose implementation is the same in both backends: elementwise
//! arithmetic and logic, cross-sectional transforms, lags, and the two
//! inherently sequential rolling operators (EMA and Product).

use crate::dsl::Op;
use crate::rank::average_ranks;
use crate::signal::{is_missing, present_or_missing, SignalMatrix, MISSING};

fn truth(v: bool) -> f64 {
    if v {
        1.0
    } else {
        0.0
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub fn unary_fn(op: Op) -> fn(f64) -> f64 {
    match op {
        Op::Neg => |x| -x,
        Op::Abs => f64::abs,
        Op::Log => |x| if x > 0.0 { x.ln() } else { MISSING },
        Op::Inv => |x| if x == 0.0 { MISSING } else { 1.0 / x },
        Op::Sqrt => |x| if x < 0.0 { MISSING } else { x.sqrt() },
        Op::Square => |x| x * x,
        Op::Exp => f64::exp,
        Op::Tanh => f64::tanh,
        _ => unreachable!("{op} is not unary elementwise"),
    }
}

pub fn binary_fn(op: Op) -> fn(f64, f64) -> f64 {
    match op {
        Op::Add => |a, b| a + b,
        Op::Sub => |a, b| a - b,
        Op::Mul => |a, b| a * b,
        Op::Div => |a, b| if b == 0.0 { MISSING } else { a / b },
        Op::Power => f64::powf,
        Op::SignedPower => |a, b| sign(a) * a.abs().powf(b),
        Op::Greater => |a, b| truth(a > b),
        Op::Less => |a, b| truth(a < b),
        Op::GreaterEqual => |a, b| truth(a >= b),
        Op::LessEqual => |a, b| truth(a <= b),
        Op::Eq => |a, b| truth(a == b),
        Op::Ne => |a, b| truth(a != b),
        Op::And => |a, b| truth(a != 0.0 && b != 0.0),
        Op::Or => |a, b| truth(a != 0.0 || b != 0.0),
        _ => unreachable!("{op} is not binary elementwise"),
    }
}

pub fn unary(op: Op, x: &SignalMatrix) -> SignalMatrix {
    x.map(unary_fn(op))
}

pub fn binary(op: Op, a: &SignalMatrix, b: &SignalMatrix) -> SignalMatrix {
    let f = binary_fn(op);
    let data = a
        .as_column_data()
        .iter()
        .zip(b.as_column_data())
        .map(|(&x, &y)| {
            if is_missing(x) || is_missing(y) {
                MISSING
            } else {
                present_or_missing(f(x, y))
            }
        })
        .collect();
    SignalMatrix::from_columns_data(a.axes().clone(), data)
}

pub fn if_else(c: &SignalMatrix, a: &SignalMatrix, b: &SignalMatrix) -> SignalMatrix {
    let data = c
        .as_column_data()
        .iter()
        .zip(a.as_column_data().iter().zip(b.as_column_data()))
        .map(|(&c, (&x, &y))| {
            if is_missing(c) {
                MISSING
            } else if c != 0.0 {
                x
            } else {
                y
            }
        })
        .collect();
    SignalMatrix::from_columns_data(c.axes().clone(), data)
}

/// Average rank over the present assets of each bar, divided by their count.
pub fn cs_rank(x: &SignalMatrix) -> SignalMatrix {
    let mut out = SignalMatrix::missing(x.axes().clone());
    let mut idx = Vec::new();
    let mut vals = Vec::new();
    for t in 0..x.n_times() {
        idx.clear();
        vals.clear();
        for a in 0..x.n_assets() {
            let v = x.get(t, a);
            if !is_missing(v) {
                idx.push(a);
                vals.push(v);
            }
        }
        let n = vals.len() as f64;
        for (r, &a) in average_ranks(&vals).iter().zip(&idx) {
            out.set(t, a, r / n);
        }
    }
    out
}

/// Divides each present value by the bar's sum of absolute values.
pub fn scale(x: &SignalMatrix) -> SignalMatrix {
    let mut out = SignalMatrix::missing(x.axes().clone());
    for t in 0..x.n_times() {
        let total: f64 = (0..x.n_assets())
            .map(|a| x.get(t, a))
            .filter(|v| !is_missing(*v))
            .map(f64::abs)
            .sum();
        if total == 0.0 || !total.is_finite() {
            continue;
        }
        for a in 0..x.n_assets() {
            let v = x.get(t, a);
            if !is_missing(v) {
                out.set(t, a, v / total);
            }
        }
    }
    out
}

pub fn delay(col: &[f64], d: usize, out: &mut [f64]) {
    for t in 0..col.len() {
        out[t] = if t >= d { col[t - d] } else { MISSING };
    }
}

pub fn delta(col: &[f64], d: usize, out: &mut [f64]) {
    for t in 0..col.len() {
        out[t] = if t >= d {
            present_or_missing(col[t] - col[t - d])
        } else {
            MISSING
        };
    }
}

/// Exponential average with smoothing 2/(n+1), restarted at the first present
/// value after any gap and reported once n consecutive values are present.
pub fn ema(col: &[f64], n: usize, out: &mut [f64]) {
    let alpha = 2.0 / (n as f64 + 1.0);
    let mut state = 0.0;
    let mut run = 0usize;
    for (t, &v) in col.iter().enumerate() {
        if is_missing(v) {
            run = 0;
            out[t] = MISSING;
            continue;
        }
        state = if run == 0 {
            v
        } else {
            alpha * v + (1.0 - alpha) * state
        };
        run += 1;
        out[t] = if run >= n {
            present_or_missing(state)
        } else {
            MISSING
        };
    }
}

/// Rolling product, multiplied oldest to newest.
pub fn product(col: &[f64], n: usize, out: &mut [f64]) {
    for t in 0..col.len() {
        out[t] = if t + 1 >= n {
            let w = &col[t + 1 - n..=t];
            if w.iter().any(|v| is_missing(*v)) {
                MISSING
            } else {
                present_or_missing(w.iter().product())
            }
        } else {
            MISSING
        };
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn elementwise_missing_rules() {
        assert!(unary_fn(Op::Log)(0.0).is_nan());
        assert!(unary_fn(Op::Sqrt)(-1.0).is_nan());
        assert!(binary_fn(Op::Div)(1.0, 0.0).is_nan());
        assert_eq!(binary_fn(Op::Div)(0.0, 2.0), 0.0);
        assert_eq!(binary_fn(Op::SignedPower)(-4.0, 0.5), -2.0);
        assert_eq!(binary_fn(Op::SignedPower)(0.0, 2.0), 0.0);
        assert_eq!(binary_fn(Op::Or)(0.0, 2.0), 1.0);
        assert_eq!(binary_fn(Op::And)(0.0, 2.0), 0.0);
    }

    #[test]
    fn cs_rank_normalizes_by_present_count() {
        let x = SignalMatrix::from_rows(&[vec![3.0, 1.0, 2.0], vec![5.0, MISSING, 5.0]]);
        let r = cs_rank(&x);
        assert_eq!(r.row(0), vec![1.0, 1.0 / 3.0, 2.0 / 3.0]);
        assert_eq!(r.get(1, 0), 0.75);
        assert!(r.get(1, 1).is_nan());
    }

    #[test]
    fn scale_has_unit_gross() {
        let x = SignalMatrix::from_rows(&[vec![1.0, -3.0, MISSING], vec![0.0, 0.0, 0.0]]);
        let s = scale(&x);
        assert_eq!(s.get(0, 0), 0.25);
        assert_eq!(s.get(0, 1), -0.75);
        assert!(s.get(1, 0).is_nan());
    }

    #[test]
    fn ema_restarts_after_gap() {
        let col = [1.0, 2.0, 3.0, MISSING, 4.0, 6.0];
        let mut out = [0.0; 6];
        ema(&col, 2, &mut out);
        let a = 2.0 / 3.0;
        assert!(out[0].is_nan());
        assert_eq!(out[1], a * 2.0 + (1.0 - a) * 1.0);
        assert!(out[3].is_nan() && out[4].is_nan());
        assert_eq!(out[5], a * 6.0 + (1.0 - a) * 4.0);
    }

    #[test]
    fn lags() {
        let col = [10.0, 11.0, 13.0];
        let mut out = [0.0; 3];
        delta(&col, 1, &mut out);
        assert!(out[0].is_nan());
        assert_eq!(&out[1..], &[1.0, 2.0]);
        delay(&col, 2, &mut out);
        assert_eq!(out[2], 10.0);
        product(&col, 2, &mut out);
        assert_eq!(out[2], 143.0);
    }
}
