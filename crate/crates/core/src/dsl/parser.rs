//! Recursive-descent parser for the formula grammar
//!
//! ```text
//! expr := $field | number | Name(arg {, arg})
//! ```
//!
//! where the trailing `windows` arguments of a call (as declared by the
//! registry) must be integer literals and every other argument is an
//! expression. Errors carry the character offset where they were detected.

use std::fmt;

use thiserror::Error;

use super::expr::{Call, FactorExpr, Node};
use super::registry::{Kind, OperatorRegistry};
use crate::panel::Field;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ParseErrorKind {
    UnknownOperator(String),
    UnknownField(String),
    Arity {
        op: String,
        expected: usize,
        found: usize,
    },
    Type(String),
    MalformedNumber(String),
    UnbalancedParens,
    InvalidWindow(String),
    Unexpected(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{kind} at offset {offset}")]
pub struct ParseError {
    /// Character (not byte) offset into the input.
    pub offset: usize,
    pub kind: ParseErrorKind,
}

impl fmt::Display for ParseErrorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParseErrorKind::UnknownOperator(n) => write!(f, "unknown operator `{n}`"),
            ParseErrorKind::UnknownField(n) => write!(f, "unknown field `${n}`"),
            ParseErrorKind::Arity {
                op,
                expected,
                found,
            } => write!(f, "{op} takes {expected} arguments, found {found}"),
            ParseErrorKind::Type(m) => write!(f, "type error: {m}"),
            ParseErrorKind::MalformedNumber(s) => write!(f, "malformed number `{s}`"),
            ParseErrorKind::UnbalancedParens => f.write_str("unbalanced parentheses"),
            ParseErrorKind::InvalidWindow(m) => write!(f, "invalid window: {m}"),
            ParseErrorKind::Unexpected(m) => write!(f, "unexpected {m}"),
        }
    }
}

/// Parses with the standard registry.
pub fn parse(text: &str) -> Result<FactorExpr, ParseError> {
    parse_with(text, &OperatorRegistry::standard())
}

pub fn parse_with(text: &str, registry: &OperatorRegistry) -> Result<FactorExpr, ParseError> {
    let mut p = Parser {
        text,
        bytes: text.as_bytes(),
        pos: 0,
        registry,
    };
    p.skip_ws();
    let (root, start) = match p.parse_arg()? {
        Arg::Expr(node, start) => (node, start),
        Arg::Number { .. } => unreachable!("parse_arg yields numbers as expressions"),
    };
    p.skip_ws();
    if p.pos < p.bytes.len() {
        let kind = if p.bytes[p.pos] == b')' {
            ParseErrorKind::UnbalancedParens
        } else {
            ParseErrorKind::Unexpected("trailing input".into())
        };
        return Err(p.error_at(p.pos, kind));
    }
    if root.kind() != Kind::Numeric {
        return Err(p.error_at(
            start,
            ParseErrorKind::Type("the formula must produce a numeric value".into()),
        ));
    }
    // The parser checks everything validation does; this guards against the
    // two drifting apart.
    FactorExpr::new(root, registry).map_err(|e| ParseError {
        offset: 0,
        kind: ParseErrorKind::Type(e.to_string()),
    })
}

enum Arg {
    Expr(Node, usize),
    /// A bare numeric literal: may become a window or a constant.
    Number {
        text: String,
        value: f64,
        start: usize,
    },
}

struct Parser<'a> {
    text: &'a str,
    bytes: &'a [u8],
    pos: usize,
    registry: &'a OperatorRegistry,
}

impl Parser<'_> {
    fn error_at(&self, byte_pos: usize, kind: ParseErrorKind) -> ParseError {
        let end = byte_pos.min(self.text.len());
        let offset = self.text[..end].chars().count();
        ParseError { offset, kind }
    }

    fn skip_ws(&mut self) {
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&self) -> Option<u8> {
        self.bytes.get(self.pos).copied()
    }

    fn unexpected_here(&self) -> ParseError {
        match self.text[self.pos..].chars().next() {
            None => self.error_at(self.pos, ParseErrorKind::Unexpected("end of input".into())),
            Some(c) => self.error_at(self.pos, ParseErrorKind::Unexpected(format!("`{c}`"))),
        }
    }

    /// Parses one argument; numeric literals are returned as `Arg::Number`
    /// only when called from a call's argument list.
    fn parse_arg(&mut self) -> Result<Arg, ParseError> {
        let arg = self.parse_item()?;
        Ok(match arg {
            Arg::Number { value, start, .. } => Arg::Expr(Node::Const(value), start),
            e => e,
        })
    }

    fn parse_item(&mut self) -> Result<Arg, ParseError> {
        self.skip_ws();
        let start = self.pos;
        match self.peek() {
            Some(b'$') => {
                self.pos += 1;
                let name = self.ident().to_string();
                if name.is_empty() {
                    return Err(self.error_at(start, ParseErrorKind::UnknownField(String::new())));
                }
                match name.parse::<Field>() {
                    Ok(f) => Ok(Arg::Expr(Node::Field(f), start)),
                    Err(_) => Err(self.error_at(start, ParseErrorKind::UnknownField(name))),
                }
            }
            Some(c) if c.is_ascii_digit() || matches!(c, b'-' | b'+' | b'.') => self.number(),
            Some(c) if c.is_ascii_alphabetic() || c == b'_' => self.call(start),
            Some(b'(') | Some(b')') => Err(self.error_at(start, ParseErrorKind::UnbalancedParens)),
            _ => Err(self.unexpected_here()),
        }
    }

    fn ident(&mut self) -> &str {
        let start = self.pos;
        while self.pos < self.bytes.len()
            && (self.bytes[self.pos].is_ascii_alphanumeric() || self.bytes[self.pos] == b'_')
        {
            self.pos += 1;
        }
        &self.text[start..self.pos]
    }

    fn number(&mut self) -> Result<Arg, ParseError> {
        let start = self.pos;
        // Greedily take everything that could belong to a numeric token so
        // that `1.2.3` or `1e` is reported as one malformed literal.
        while self.pos < self.bytes.len() {
            let c = self.bytes[self.pos];
            let sign_ok = (c == b'-' || c == b'+')
                && (self.pos == start || matches!(self.bytes[self.pos - 1], b'e' | b'E'));
            if c.is_ascii_alphanumeric() || c == b'.' || sign_ok {
                self.pos += 1;
            } else {
                break;
            }
        }
        let text = &self.text[start..self.pos];
        let well_formed = {
            let body = text.strip_prefix(['-', '+']).unwrap_or(text);
            let (mantissa, exp) = match body.find(['e', 'E']) {
                Some(i) => (&body[..i], Some(&body[i + 1..])),
                None => (body, None),
            };
            let mut parts = mantissa.splitn(2, '.');
            let int = parts.next().unwrap_or("");
            let frac = parts.next();
            let digits = |s: &str| s.bytes().all(|b| b.is_ascii_digit());
            let mantissa_ok = digits(int)
                && frac.is_none_or(digits)
                && !(int.is_empty() && frac.is_none_or(str::is_empty));
            let exp_ok = exp.is_none_or(|e| {
                let e = e.strip_prefix(['-', '+']).unwrap_or(e);
                !e.is_empty() && digits(e)
            });
            mantissa_ok && exp_ok
        };
        let value = text.parse::<f64>().ok().filter(|v| v.is_finite());
        match value {
            Some(value) if well_formed => Ok(Arg::Number {
                text: text.to_string(),
                value,
                start,
            }),
            _ => Err(self.error_at(start, ParseErrorKind::MalformedNumber(text.into()))),
        }
    }

    fn call(&mut self, start: usize) -> Result<Arg, ParseError> {
        let name = self.ident().to_string();
        let Some(spec) = self.registry.lookup(&name) else {
            return Err(self.error_at(start, ParseErrorKind::UnknownOperator(name)));
        };
        self.skip_ws();
        if self.peek() != Some(b'(') {
            return Err(match self.peek() {
                None => self.error_at(self.pos, ParseErrorKind::UnbalancedParens),
                _ => self.unexpected_here(),
            });
        }
        let open = self.pos;
        self.pos += 1;

        let mut items = Vec::new();
        self.skip_ws();
        if self.peek() == Some(b')') {
            self.pos += 1;
        } else {
            loop {
                items.push(self.parse_item()?);
                self.skip_ws();
                match self.peek() {
                    Some(b',') => self.pos += 1,
                    Some(b')') => {
                        self.pos += 1;
                        break;
                    }
                    None => return Err(self.error_at(open, ParseErrorKind::UnbalancedParens)),
                    _ => return Err(self.unexpected_here()),
                }
            }
        }

        let expected = spec.inputs.len() + spec.windows;
        if items.len() != expected {
            return Err(self.error_at(
                start,
                ParseErrorKind::Arity {
                    op: name,
                    expected,
                    found: items.len(),
                },
            ));
        }

        let mut windows = Vec::with_capacity(spec.windows);
        for item in items.drain(spec.inputs.len()..) {
            let (text, at) = match item {
                Arg::Number { text, start, .. } => (text, start),
                Arg::Expr(_, at) => {
                    return Err(self.error_at(
                        at,
                        ParseErrorKind::InvalidWindow(format!(
                            "{name} expects an integer window as its last argument"
                        )),
                    ))
                }
            };
            let w = text.parse::<usize>().map_err(|_| {
                self.error_at(
                    at,
                    ParseErrorKind::InvalidWindow(format!("`{text}` is not a positive integer")),
                )
            })?;
            if w < spec.min_window {
                return Err(self.error_at(
                    at,
                    ParseErrorKind::InvalidWindow(format!(
                        "{name} needs a window of at least {}, got {w}",
                        spec.min_window
                    )),
                ));
            }
            windows.push(w);
        }

        let mut args = Vec::with_capacity(items.len());
        for (item, &kind) in items.into_iter().zip(spec.inputs) {
            let (node, at) = match item {
                Arg::Expr(node, at) => (node, at),
                Arg::Number { value, start, .. } => (Node::Const(value), start),
            };
            if node.kind() != kind {
                let msg = match kind {
                    Kind::Numeric => format!("{name} cannot take a logical value here"),
                    Kind::Logical => format!("{name} needs a condition here"),
                };
                return Err(self.error_at(at, ParseErrorKind::Type(msg)));
            }
            args.push(node);
        }

        Ok(Arg::Expr(
            Node::Call(Call {
                op: spec.op,
                args,
                windows,
            }),
            start,
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsl::registry::Op;

    fn kind(s: &str) -> (usize, ParseErrorKind) {
        let e = parse(s).unwrap_err();
        (e.offset, e.kind)
    }

    #[test]
    fn parses_nested_call_with_window() {
        let e = parse("Neg(CsRank(Delta($close, 3)))").unwrap();
        let want = Node::call(
            Op::Neg,
            vec![Node::call(
                Op::CsRank,
                vec![Node::call(Op::Delta, vec![Node::Field(Field::Close)], vec![3])],
                vec![],
            )],
            vec![],
        );
        assert_eq!(e.root(), &want);
    }

    #[test]
    fn whitespace_insensitive() {
        let a = parse("Add( $close ,\n\t$open )").unwrap();
        assert_eq!(a.format(), "Add($close, $open)");
    }

    #[test]
    fn constants_in_child_slots() {
        let e = parse("Div($close, 0.0001)").unwrap();
        assert_eq!(e.format(), "Div($close, 0.0001)");
        let e = parse("Mul(-2, $close)").unwrap();
        assert_eq!(e.format(), "Mul(-2.0, $close)");
        assert!(parse("1.5").is_ok());
    }

    #[test]
    fn error_kinds_and_offsets() {
        assert_eq!(
            kind("Add($close)"),
            (
                0,
                ParseErrorKind::Arity {
                    op: "Add".into(),
                    expected: 2,
                    found: 1
                }
            )
        );
        assert_eq!(kind("Neg(Foo($close))").0, 4);
        assert!(matches!(kind("Neg(Foo($close))").1, ParseErrorKind::UnknownOperator(_)));
        assert!(matches!(kind("add($close, $open)").1, ParseErrorKind::UnknownOperator(_)));
        assert!(matches!(kind("Neg($price)"), (4, ParseErrorKind::UnknownField(_))));
        assert!(matches!(kind("Div($close, 1.2.3)"), (12, ParseErrorKind::MalformedNumber(_))));
        assert!(matches!(kind("Div($close, 1e)"), (12, ParseErrorKind::MalformedNumber(_))));
        assert!(matches!(kind("Neg($close"), (3, ParseErrorKind::UnbalancedParens)));
        assert!(matches!(kind("Neg($close))"), (11, ParseErrorKind::UnbalancedParens)));
        assert!(matches!(kind("Delta($close, 0)"), (14, ParseErrorKind::InvalidWindow(_))));
        assert!(matches!(kind("Delta($close, 2.5)"), (14, ParseErrorKind::InvalidWindow(_))));
        assert!(matches!(kind("Delta($close, $open)"), (14, ParseErrorKind::InvalidWindow(_))));
        assert!(matches!(kind("Std($close, 1)").1, ParseErrorKind::InvalidWindow(_)));
        assert!(matches!(kind("Neg($close) $open").1, ParseErrorKind::Unexpected(_)));
        assert!(matches!(kind("").1, ParseErrorKind::Unexpected(_)));
    }

    #[test]
    fn type_errors_are_located() {
        assert!(matches!(
            kind("Add(Greater($close, $open), $close)"),
            (4, ParseErrorKind::Type(_))
        ));
        assert!(matches!(
            kind("IfElse($close, $open, $low)"),
            (7, ParseErrorKind::Type(_))
        ));
        assert!(matches!(
            kind("Greater($close, $open)"),
            (0, ParseErrorKind::Type(_))
        ));
        assert!(parse("IfElse(And(Greater($close, $open), Less($volume, 1.0)), $close, $open)").is_ok());
    }

    #[test]
    fn offsets_count_characters() {
        let e = parse("Add(\u{00e9}, $close)").unwrap_err();
        assert_eq!(e.offset, 4);
    }
}
