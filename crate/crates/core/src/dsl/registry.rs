//! The operator registry: names, arities, parameter slots and value kinds.

use std::fmt;

use serde::{Deserialize, Serialize};

/// Value kind flowing along an expression edge.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Kind {
    Numeric,
    Logical,
}

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize,
)]
#[serde(rename_all = "kebab-case")]
pub enum Category {
    Arithmetic,
    Statistical,
    TimeSeries,
    CrossSectional,
    Smoothing,
    Regression,
    Logical,
}

impl Category {
    pub const ALL: [Category; 7] = [
        Category::Arithmetic,
        Category::Statistical,
        Category::TimeSeries,
        Category::CrossSectional,
        Category::Smoothing,
        Category::Regression,
        Category::Logical,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Category::Arithmetic => "arithmetic",
            Category::Statistical => "statistical",
            Category::TimeSeries => "time-series",
            Category::CrossSectional => "cross-sectional",
            Category::Smoothing => "smoothing",
            Category::Regression => "regression",
            Category::Logical => "logical",
        }
    }

    pub fn parse(s: &str) -> Option<Category> {
        Category::ALL.into_iter().find(|c| c.as_str() == s)
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Op {
    // arithmetic
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Abs,
    Log,
    SignedPower,
    Power,
    Inv,
    Sqrt,
    Square,
    Exp,
    Tanh,
    // statistical
    Mean,
    Std,
    Var,
    Skew,
    Kurt,
    Med,
    Sum,
    Product,
    Corr,
    // time-series
    Delay,
    Delta,
    TsRank,
    TsMax,
    TsMin,
    TsArgMax,
    TsArgMin,
    TsDecay,
    // cross-sectional
    CsRank,
    Scale,
    // smoothing
    Sma,
    Ema,
    Wma,
    // regression
    Slope,
    Rsquare,
    Resi,
    // logical
    IfElse,
    Greater,
    Less,
    GreaterEqual,
    LessEqual,
    And,
    Or,
    Eq,
    Ne,
}

/// Static description of one operator.
#[derive(Debug, Clone, Copy)]
pub struct OpSpec {
    pub op: Op,
    pub name: &'static str,
    pub category: Category,
    /// Kinds of the expression children, in order.
    pub inputs: &'static [Kind],
    /// Number of trailing integer window parameters (0 or 1).
    pub windows: usize,
    /// Smallest admissible window.
    pub min_window: usize,
    pub output: Kind,
    /// Child order does not matter.
    pub commutative: bool,
}

use Category as C;
use Kind::{Logical as L, Numeric as N};

const fn spec(
    op: Op,
    name: &'static str,
    category: Category,
    inputs: &'static [Kind],
    windows: usize,
    min_window: usize,
    output: Kind,
    commutative: bool,
) -> OpSpec {
    OpSpec {
        op,
        name,
        category,
        inputs,
        windows,
        min_window,
        output,
        commutative,
    }
}

const fn elem(op: Op, name: &'static str, inputs: &'static [Kind]) -> OpSpec {
    spec(op, name, C::Arithmetic, inputs, 0, 0, N, false)
}

const fn rolling(op: Op, name: &'static str, category: Category, min_window: usize) -> OpSpec {
    spec(op, name, category, &[N], 1, min_window, N, false)
}

const fn compare(op: Op, name: &'static str, commutative: bool) -> OpSpec {
    spec(op, name, C::Logical, &[N, N], 0, 0, L, commutative)
}

/// Indexed by `Op as usize`.
static OPS: [OpSpec; 48] = [
    spec(Op::Add, "Add", C::Arithmetic, &[N, N], 0, 0, N, true),
    elem(Op::Sub, "Sub", &[N, N]),
    spec(Op::Mul, "Mul", C::Arithmetic, &[N, N], 0, 0, N, true),
    elem(Op::Div, "Div", &[N, N]),
    elem(Op::Neg, "Neg", &[N]),
    elem(Op::Abs, "Abs", &[N]),
    elem(Op::Log, "Log", &[N]),
    elem(Op::SignedPower, "SignedPower", &[N, N]),
    elem(Op::Power, "Power", &[N, N]),
    elem(Op::Inv, "Inv", &[N]),
    elem(Op::Sqrt, "Sqrt", &[N]),
    elem(Op::Square, "Square", &[N]),
    elem(Op::Exp, "Exp", &[N]),
    elem(Op::Tanh, "Tanh", &[N]),
    rolling(Op::Mean, "Mean", C::Statistical, 1),
    rolling(Op::Std, "Std", C::Statistical, 2),
    rolling(Op::Var, "Var", C::Statistical, 2),
    rolling(Op::Skew, "Skew", C::Statistical, 3),
    rolling(Op::Kurt, "Kurt", C::Statistical, 4),
    rolling(Op::Med, "Med", C::Statistical, 1),
    rolling(Op::Sum, "Sum", C::Statistical, 1),
    rolling(Op::Product, "Product", C::Statistical, 1),
    spec(Op::Corr, "Corr", C::Statistical, &[N, N], 1, 3, N, true),
    rolling(Op::Delay, "Delay", C::TimeSeries, 1),
    rolling(Op::Delta, "Delta", C::TimeSeries, 1),
    rolling(Op::TsRank, "TsRank", C::TimeSeries, 2),
    rolling(Op::TsMax, "TsMax", C::TimeSeries, 1),
    rolling(Op::TsMin, "TsMin", C::TimeSeries, 1),
    rolling(Op::TsArgMax, "TsArgMax", C::TimeSeries, 1),
    rolling(Op::TsArgMin, "TsArgMin", C::TimeSeries, 1),
    rolling(Op::TsDecay, "TsDecay", C::TimeSeries, 1),
    spec(Op::CsRank, "CsRank", C::CrossSectional, &[N], 0, 0, N, false),
    spec(Op::Scale, "Scale", C::CrossSectional, &[N], 0, 0, N, false),
    rolling(Op::Sma, "SMA", C::Smoothing, 1),
    rolling(Op::Ema, "EMA", C::Smoothing, 1),
    rolling(Op::Wma, "WMA", C::Smoothing, 1),
    rolling(Op::Slope, "Slope", C::Regression, 2),
    rolling(Op::Rsquare, "Rsquare", C::Regression, 3),
    rolling(Op::Resi, "Resi", C::Regression, 3),
    spec(Op::IfElse, "IfElse", C::Logical, &[L, N, N], 0, 0, N, false),
    compare(Op::Greater, "Greater", false),
    compare(Op::Less, "Less", false),
    compare(Op::GreaterEqual, "GreaterEqual", false),
    compare(Op::LessEqual, "LessEqual", false),
    spec(Op::And, "And", C::Logical, &[L, L], 0, 0, L, true),
    spec(Op::Or, "Or", C::Logical, &[L, L], 0, 0, L, true),
    compare(Op::Eq, "Eq", true),
    compare(Op::Ne, "Ne", true),
];

impl Op {
    pub fn spec(self) -> &'static OpSpec {
        &OPS[self as usize]
    }

    pub fn name(self) -> &'static str {
        self.spec().name
    }

    pub fn category(self) -> Category {
        self.spec().category
    }

    pub fn output(self) -> Kind {
        self.spec().output
    }

    pub fn arity(self) -> usize {
        self.spec().inputs.len()
    }

    pub fn all() -> impl Iterator<Item = Op> {
        OPS.iter().map(|s| s.op)
    }

    pub fn from_name(name: &str) -> Option<Op> {
        OPS.iter().find(|s| s.name == name).map(|s| s.op)
    }
}

impl fmt::Display for Op {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// The set of operators available to parsing and sampling.
#[derive(Debug, Clone)]
pub struct OperatorRegistry {
    ops: Vec<Op>,
}

impl Default for OperatorRegistry {
    fn default() -> Self {
        Self::standard()
    }
}

impl OperatorRegistry {
    /// Every built-in operator.
    pub fn standard() -> Self {
        OperatorRegistry {
            ops: Op::all().collect(),
        }
    }

    /// A restricted registry, e.g. to steer sampling away from some operators.
    pub fn with_ops(ops: impl IntoIterator<Item = Op>) -> Self {
        let mut ops: Vec<Op> = ops.into_iter().collect();
        ops.sort();
        ops.dedup();
        OperatorRegistry { ops }
    }

    pub fn ops(&self) -> &[Op] {
        &self.ops
    }

    pub fn lookup(&self, name: &str) -> Option<&'static OpSpec> {
        Op::from_name(name)
            .filter(|op| self.ops.contains(op))
            .map(Op::spec)
    }

    pub fn contains(&self, op: Op) -> bool {
        self.ops.contains(&op)
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }
}
