//! Structural fingerprints used to group formulas into patterns.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::expr::{FactorExpr, Node};
use super::registry::Category;
use crate::panel::Field;

/// The root operator, the multiset of operators in the top two levels and the
/// fields referenced anywhere in the tree. Rendered as
/// `Root|category.Op,category.Op|field,field`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PatternSignature {
    pub root: String,
    /// Sorted; includes the root itself.
    pub ops: Vec<(Category, String)>,
    /// Sorted and distinct.
    pub fields: Vec<Field>,
}

fn root_name(node: &Node) -> String {
    match node {
        Node::Call(c) => c.op.name().to_string(),
        Node::Field(f) => format!("${f}"),
        Node::Const(_) => "const".to_string(),
    }
}

pub fn signature(expr: &FactorExpr) -> PatternSignature {
    signature_of(expr.root())
}

pub fn signature_of(root: &Node) -> PatternSignature {
    let mut ops = Vec::new();
    if let Node::Call(c) = root {
        ops.push((c.op.category(), c.op.name().to_string()));
        for child in &c.args {
            if let Node::Call(cc) = child {
                ops.push((cc.op.category(), cc.op.name().to_string()));
            }
        }
    }
    ops.sort();
    PatternSignature {
        root: root_name(root),
        ops,
        fields: root.fields(),
    }
}

impl PatternSignature {
    /// Operators of the second level only (the multiset minus the root).
    pub fn child_ops(&self) -> Vec<&str> {
        let mut skipped_root = false;
        self.ops
            .iter()
            .filter(|(_, n)| {
                if !skipped_root && *n == self.root {
                    skipped_root = true;
                    false
                } else {
                    true
                }
            })
            .map(|(_, n)| n.as_str())
            .collect()
    }
}

impl fmt::Display for PatternSignature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}|", self.root)?;
        for (i, (c, n)) in self.ops.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{c}.{n}")?;
        }
        f.write_str("|")?;
        for (i, fld) in self.fields.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{fld}")?;
        }
        Ok(())
    }
}

impl FromStr for PatternSignature {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<&str> = s.split('|').collect();
        let [root, ops, fields] = parts[..] else {
            return Err(format!("signature `{s}` must have three `|`-separated parts"));
        };
        if root.is_empty() {
            return Err(format!("signature `{s}` has an empty root"));
        }
        let mut op_list = Vec::new();
        for item in ops.split(',').filter(|x| !x.is_empty()) {
            let (cat, name) = item
                .split_once('.')
                .ok_or_else(|| format!("operator entry `{item}` is not category.Name"))?;
            let cat = Category::parse(cat).ok_or_else(|| format!("unknown category `{cat}`"))?;
            op_list.push((cat, name.to_string()));
        }
        op_list.sort();
        let mut field_list = Vec::new();
        for item in fields.split(',').filter(|x| !x.is_empty()) {
            field_list.push(item.parse::<Field>().map_err(|e| e.to_string())?);
        }
        field_list.sort();
        field_list.dedup();
        Ok(PatternSignature {
            root: root.to_string(),
            ops: op_list,
            fields: field_list,
        })
    }
}

impl Serialize for PatternSignature {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for PatternSignature {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}
