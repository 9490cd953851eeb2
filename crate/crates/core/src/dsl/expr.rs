//! Expression trees and their canonical text form.

use std::fmt;

use thiserror::Error;

use super::registry::{Kind, Op, OperatorRegistry};
use crate::panel::Field;

#[derive(Debug, Clone, PartialEq)]
pub enum Node {
    Field(Field),
    Const(f64),
    Call(Call),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Call {
    pub op: Op,
    pub args: Vec<Node>,
    pub windows: Vec<usize>,
}

impl Node {
    pub fn call(op: Op, args: Vec<Node>, windows: Vec<usize>) -> Node {
        Node::Call(Call { op, args, windows })
    }

    pub fn kind(&self) -> Kind {
        match self {
            Node::Field(_) | Node::Const(_) => Kind::Numeric,
            Node::Call(c) => c.op.output(),
        }
    }

    /// Levels in the tree; a leaf has depth 1.
    pub fn depth(&self) -> usize {
        match self {
            Node::Call(c) => 1 + c.args.iter().map(Node::depth).max().unwrap_or(0),
            _ => 1,
        }
    }

    pub fn size(&self) -> usize {
        match self {
            Node::Call(c) => 1 + c.args.iter().map(Node::size).sum::<usize>(),
            _ => 1,
        }
    }

    pub fn visit<'a>(&'a self, f: &mut impl FnMut(&'a Node)) {
        f(self);
        if let Node::Call(c) = self {
            for a in &c.args {
                a.visit(f);
            }
        }
    }

    /// Distinct fields referenced anywhere below this node, sorted.
    pub fn fields(&self) -> Vec<Field> {
        let mut out = Vec::new();
        self.visit(&mut |n| {
            if let Node::Field(f) = n {
                out.push(*f);
            }
        });
        out.sort();
        out.dedup();
        out
    }

    /// Largest window parameter anywhere in the tree.
    pub fn max_window(&self) -> usize {
        let mut w = 0;
        self.visit(&mut |n| {
            if let Node::Call(c) = n {
                w = c.windows.iter().copied().fold(w, usize::max);
            }
        });
        w
    }
}

/// A validation failure on a programmatically built tree; `path` locates the
/// node as a list of child indices from the root.
#[derive(Debug, Clone, PartialEq, Error)]
#[error("invalid expression at node {path:?}: {message}")]
pub struct ExprError {
    pub path: Vec<usize>,
    pub message: String,
}

/// A validated factor expression.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorExpr {
    root: Node,
    depth: usize,
    size: usize,
}

impl FactorExpr {
    /// Validates `root` against `registry`: arity, window counts and minimums,
    /// kind compatibility of every edge and a numeric root.
    pub fn new(root: Node, registry: &OperatorRegistry) -> Result<FactorExpr, ExprError> {
        let mut path = Vec::new();
        validate(&root, Kind::Numeric, registry, &mut path)?;
        Ok(FactorExpr {
            depth: root.depth(),
            size: root.size(),
            root,
        })
    }

    pub fn root(&self) -> &Node {
        &self.root
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn fields(&self) -> Vec<Field> {
        self.root.fields()
    }

    /// Canonical single-line text form.
    pub fn format(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for FactorExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.root.fmt(f)
    }
}

impl fmt::Display for Node {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Node::Field(field) => write!(f, "${field}"),
            // Debug formatting is the shortest representation that parses
            // back to the same bits.
            Node::Const(v) => write!(f, "{v:?}"),
            Node::Call(c) => {
                write!(f, "{}(", c.op.name())?;
                let mut first = true;
                for a in &c.args {
                    if !first {
                        f.write_str(", ")?;
                    }
                    first = false;
                    a.fmt(f)?;
                }
                for w in &c.windows {
                    write!(f, ", {w}")?;
                }
                f.write_str(")")
            }
        }
    }
}

fn validate(
    node: &Node,
    expected: Kind,
    registry: &OperatorRegistry,
    path: &mut Vec<usize>,
) -> Result<(), ExprError> {
    let err = |path: &Vec<usize>, message: String| ExprError {
        path: path.clone(),
        message,
    };
    match node {
        Node::Const(v) if !v.is_finite() => {
            return Err(err(path, format!("constant {v} is not finite")))
        }
        Node::Call(c) => {
            let spec = c.op.spec();
            if !registry.contains(c.op) {
                return Err(err(path, format!("operator {} not in registry", spec.name)));
            }
            if c.args.len() != spec.inputs.len() {
                return Err(err(
                    path,
                    format!(
                        "{} expects {} expression arguments, got {}",
                        spec.name,
                        spec.inputs.len(),
                        c.args.len()
                    ),
                ));
            }
            if c.windows.len() != spec.windows {
                return Err(err(
                    path,
                    format!(
                        "{} expects {} window parameters, got {}",
                        spec.name,
                        spec.windows,
                        c.windows.len()
                    ),
                ));
            }
            if let Some(&w) = c.windows.iter().find(|&&w| w < spec.min_window) {
                return Err(err(
                    path,
                    format!("{} window {w} below minimum {}", spec.name, spec.min_window),
                ));
            }
            for (i, (arg, kind)) in c.args.iter().zip(spec.inputs).enumerate() {
                path.push(i);
                validate(arg, *kind, registry, path)?;
                path.pop();
            }
        }
        _ => {}
    }
    if node.kind() != expected {
        return Err(err(
            path,
            match expected {
                Kind::Numeric => "logical value used where a numeric value is required".into(),
                Kind::Logical => "numeric value used where a condition is required".into(),
            },
        ));
    }
    Ok(())
}
