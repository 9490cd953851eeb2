//! Formula language: operator registry, expression trees, parser, formatter
//! and pattern fingerprints.

pub mod expr;
pub mod parser;
pub mod registry;
pub mod signature;

pub use expr::{Call, ExprError, FactorExpr, Node};
pub use parser::{parse, parse_with, ParseError, ParseErrorKind};
pub use registry::{Category, Kind, Op, OpSpec, OperatorRegistry};
pub use signature::{signature, signature_of, PatternSignature};
