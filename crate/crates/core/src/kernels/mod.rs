//! Expression evaluation over a panel, with a naive reference backend and a
//! streaming backend that must agree with it.

pub mod bench;
pub mod dd;
pub mod naive;
pub mod optimized;
pub mod shared;

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsl::{parse, FactorExpr, Node, Op, ParseError};
use crate::panel::{Field, Panel};
use crate::signal::SignalMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    Naive,
    #[default]
    Optimized,
}

impl Backend {
    pub const ALL: [Backend; 2] = [Backend::Naive, Backend::Optimized];

    pub fn as_str(self) -> &'static str {
        match self {
            Backend::Naive => "naive",
            Backend::Optimized => "optimized",
        }
    }
}

impl fmt::Display for Backend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Backend {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "naive" => Ok(Backend::Naive),
            "optimized" => Ok(Backend::Optimized),
            _ => Err(format!("unknown backend `{s}` (expected naive or optimized)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("field ${0} is not present in the panel")]
    MissingField(Field),
    #[error("parse error: {0}")]
    Parse(#[from] ParseError),
}

/// Evaluates `expr` over `panel`. The value at bar t depends only on panel
/// data at bars up to t.
pub fn evaluate(
    expr: &FactorExpr,
    panel: &Panel,
    backend: Backend,
) -> Result<SignalMatrix, EvalError> {
    for f in expr.fields() {
        if panel.field(f).is_none() {
            return Err(EvalError::MissingField(f));
        }
    }
    Ok(eval_node(expr.root(), panel, backend))
}

/// Parses and evaluates one formula.
pub fn evaluate_formula(
    text: &str,
    panel: &Panel,
    backend: Backend,
) -> Result<SignalMatrix, EvalError> {
    evaluate(&parse(text)?, panel, backend)
}

fn pool(workers: usize) -> rayon::ThreadPool {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .expect("failed to start evaluation workers")
}

/// Evaluates every expression, in input order, on `workers` threads. Each
/// result is identical to a sequential [`evaluate`] call.
pub fn evaluate_batch(
    exprs: &[FactorExpr],
    panel: &Panel,
    backend: Backend,
    workers: usize,
) -> Vec<Result<SignalMatrix, EvalError>> {
    if exprs.is_empty() {
        return Vec::new();
    }
    pool(workers).install(|| {
        exprs
            .par_iter()
            .map(|e| evaluate(e, panel, backend))
            .collect()
    })
}

/// Like [`evaluate_batch`] over formula strings; parse failures are reported
/// per entry.
pub fn evaluate_formulas(
    texts: &[&str],
    panel: &Panel,
    backend: Backend,
    workers: usize,
) -> Vec<Result<SignalMatrix, EvalError>> {
    if texts.is_empty() {
        return Vec::new();
    }
    pool(workers).install(|| {
        texts
            .par_iter()
            .map(|t| evaluate_formula(t, panel, backend))
            .collect()
    })
}

fn per_column(
    x: &SignalMatrix,
    mut f: impl FnMut(&[f64], &mut [f64]),
) -> SignalMatrix {
    let mut out = SignalMatrix::missing(x.axes().clone());
    for a in 0..x.n_assets() {
        f(x.column(a), out.column_mut(a));
    }
    out
}

fn eval_node(node: &Node, panel: &Panel, backend: Backend) -> SignalMatrix {
    let call = match node {
        Node::Field(f) => return panel.field(*f).expect("fields checked").clone(),
        Node::Const(v) => return SignalMatrix::filled(panel.axes().clone(), *v),
        Node::Call(c) => c,
    };
    let args: Vec<SignalMatrix> = call
        .args
        .iter()
        .map(|a| eval_node(a, panel, backend))
        .collect();
    apply(call.op, &args, &call.windows, backend)
}

/// Applies one operator to already evaluated arguments.
pub fn apply(op: Op, args: &[SignalMatrix], windows: &[usize], backend: Backend) -> SignalMatrix {
    let n = windows.first().copied().unwrap_or(0);
    match op {
        Op::Neg | Op::Abs | Op::Log | Op::Inv | Op::Sqrt | Op::Square | Op::Exp | Op::Tanh => {
            shared::unary(op, &args[0])
        }
        Op::Add
        | Op::Sub
        | Op::Mul
        | Op::Div
        | Op::Power
        | Op::SignedPower
        | Op::Greater
        | Op::Less
        | Op::GreaterEqual
        | Op::LessEqual
        | Op::Eq
        | Op::Ne
        | Op::And
        | Op::Or => shared::binary(op, &args[0], &args[1]),
        Op::IfElse => shared::if_else(&args[0], &args[1], &args[2]),
        Op::CsRank => shared::cs_rank(&args[0]),
        Op::Scale => shared::scale(&args[0]),
        Op::Delay => per_column(&args[0], |c, o| shared::delay(c, n, o)),
        Op::Delta => per_column(&args[0], |c, o| shared::delta(c, n, o)),
        Op::Ema => per_column(&args[0], |c, o| shared::ema(c, n, o)),
        Op::Product => per_column(&args[0], |c, o| shared::product(c, n, o)),
        Op::Corr => {
            let (x, y) = (&args[0], &args[1]);
            let mut out = SignalMatrix::missing(x.axes().clone());
            for a in 0..x.n_assets() {
                match backend {
                    Backend::Naive => naive::corr(x.column(a), y.column(a), n, out.column_mut(a)),
                    Backend::Optimized => {
                        optimized::corr(x.column(a), y.column(a), n, out.column_mut(a))
                    }
                }
            }
            out
        }
        _ => per_column(&args[0], |c, o| match backend {
            Backend::Naive => naive::rolling(op, c, n, o),
            Backend::Optimized => optimized::rolling(op, c, n, o),
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::panel::{synth_panel, SynthConfig};

    fn panel() -> Panel {
        synth_panel(&SynthConfig::new(6, 60, 3)).unwrap()
    }

    #[test]
    fn if_else_selects_branches() {
        let p = panel();
        let s = evaluate_formula(
            "IfElse(Greater($close, $open), $volume, Neg($volume))",
            &p,
            Backend::Optimized,
        )
        .unwrap();
        let (c, o, v) = (
            p.field(Field::Close).unwrap(),
            p.field(Field::Open).unwrap(),
            p.field(Field::Volume).unwrap(),
        );
        for t in 0..p.n_times() {
            for a in 0..p.n_assets() {
                let want = if c.get(t, a) > o.get(t, a) {
                    v.get(t, a)
                } else {
                    -v.get(t, a)
                };
                assert_eq!(s.get(t, a), want);
            }
        }
    }

    #[test]
    fn window_longer_than_history_is_all_missing() {
        let p = panel();
        let s = evaluate_formula("Mean($close, 100)", &p, Backend::Naive).unwrap();
        assert_eq!(s.count_present(), 0);
    }

    #[test]
    fn missing_field_is_reported() {
        let p = panel().without_fields(&[Field::Open]);
        let e = evaluate_formula("Add($close, $open)", &p, Backend::Naive).unwrap_err();
        assert_eq!(e, EvalError::MissingField(Field::Open));
    }

    #[test]
    fn batch_isolates_failures_and_keeps_order() {
        let p = panel();
        let texts = ["Neg($close)", "Add($close)", "CsRank($volume)"];
        let out = evaluate_formulas(&texts, &p, Backend::Optimized, 2);
        assert_eq!(out.len(), 3);
        assert!(out[0].is_ok() && out[2].is_ok());
        match &out[1] {
            Err(EvalError::Parse(e)) => assert_eq!(e.offset, 0),
            other => panic!("expected parse error, got {other:?}"),
        }
        assert!(evaluate_batch(&[], &p, Backend::Naive, 4).is_empty());
    }

    #[test]
    fn constant_leaf_fills_panel() {
        let p = panel();
        let s = evaluate_formula("Add($close, 1.5)", &p, Backend::Naive).unwrap();
        let c = p.field(Field::Close).unwrap();
        assert_eq!(s.get(3, 2), c.get(3, 2) + 1.5);
    }
}
