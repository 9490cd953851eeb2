//! Candidate generation: typed random trees, memory-guided trees and an
//! external process speaking a line-delimited JSON protocol.

use std::collections::HashSet;
use std::io::{BufRead, BufReader, Write};
use std::process::{Command, Stdio};
use std::sync::mpsc;
use std::time::{Duration, Instant};

use rand::distributions::WeightedIndex;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsl::{parse_with, signature, FactorExpr, Kind, Node, Op, OperatorRegistry, PatternSignature};
use crate::memory::MemorySignal;
use crate::panel::Field;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub max_depth: usize,
    pub max_nodes: usize,
    /// Leaf probability grows by this much per level below the root; the
    /// root is never a leaf and the deepest level always is.
    pub leaf_probability_ramp: f64,
    /// Chance that a leaf is a constant rather than a field.
    pub const_probability: f64,
    pub window_choices: Vec<usize>,
    pub constant_range: (f64, f64),
    pub fields: Vec<Field>,
    /// Share of guided candidates drawn from the unbiased sampler.
    pub explore: f64,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            max_depth: 5,
            max_nodes: 25,
            leaf_probability_ramp: 0.25,
            const_probability: 0.1,
            window_choices: vec![3, 6, 12, 24, 48],
            constant_range: (-2.0, 2.0),
            fields: Field::ALL.to_vec(),
            explore: 0.2,
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<(), GenError> {
        let bad = |m: &str| Err(GenError::Config(m.to_string()));
        if self.max_depth < 1 {
            return bad("max_depth must be >= 1");
        }
        if self.window_choices.is_empty() || self.window_choices.iter().any(|&w| w < 2) {
            return bad("window_choices must be non-empty and all >= 2");
        }
        if !(self.leaf_probability_ramp >= 0.0 && self.leaf_probability_ramp.is_finite()) {
            return bad("leaf_probability_ramp must be finite and >= 0");
        }
        if !(0.0..=1.0).contains(&self.const_probability) || !(0.0..=1.0).contains(&self.explore) {
            return bad("probabilities must lie in [0, 1]");
        }
        let (lo, hi) = self.constant_range;
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return bad("constant_range must be a finite interval");
        }
        if self.fields.is_empty() && self.const_probability < 1.0 {
            return bad("fields must be non-empty");
        }
        Ok(())
    }

    /// Probability that a numeric node at `depth` (root = 1) is a leaf.
    pub fn leaf_probability(&self, depth: usize) -> f64 {
        if depth >= self.max_depth {
            1.0
        } else if depth <= 1 {
            0.0
        } else {
            (self.leaf_probability_ramp * (depth - 1) as f64).min(1.0)
        }
    }
}

#[derive(Debug, Error)]
pub enum GenError {
    #[error("invalid generator config: {0}")]
    Config(String),
    #[error("no valid tree found: {0}")]
    Infeasible(String),
    #[error("every sampled candidate is forbidden by: {}", .0.join("; "))]
    AllForbidden(Vec<String>),
    #[error("external generator: {0}")]
    External(String),
}

const MAX_RETRIES: usize = 1000;
const SKELETON_RETRIES: usize = 20;

/// Minimum levels needed below and including a node of this kind.
fn kind_need(k: Kind) -> usize {
    match k {
        Kind::Numeric => 1,
        Kind::Logical => 2,
    }
}

fn op_need(op: Op) -> usize {
    1 + op.spec().inputs.iter().map(|&k| kind_need(k)).max().unwrap_or(0)
}

/// Stateful sampler: one RNG stream and a record of every formula already
/// emitted, so successive batches never repeat a formula.
pub struct Generator {
    registry: OperatorRegistry,
    cfg: GenConfig,
    rng: ChaCha8Rng,
    seen: HashSet<String>,
}

impl Generator {
    pub fn new(registry: OperatorRegistry, cfg: GenConfig) -> Result<Self, GenError> {
        cfg.validate()?;
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Ok(Generator {
            registry,
            cfg,
            rng,
            seen: HashSet::new(),
        })
    }

    pub fn config(&self) -> &GenConfig {
        &self.cfg
    }

    pub fn registry(&self) -> &OperatorRegistry {
        &self.registry
    }

    /// Marks formulas as already produced (e.g. library contents).
    pub fn mark_seen<'a>(&mut self, formulas: impl IntoIterator<Item = &'a str>) {
        self.seen.extend(formulas.into_iter().map(str::to_string));
    }

    pub fn random(&mut self, n: usize) -> Result<Vec<FactorExpr>, GenError> {
        self.guided(n, &MemorySignal::empty())
    }

    /// Samples `n` distinct candidates; with an empty signal this is exactly
    /// the random sampler.
    pub fn guided(&mut self, n: usize, signal: &MemorySignal) -> Result<Vec<FactorExpr>, GenError> {
        let weighted: Vec<(&PatternSignature, f64)> = signal
            .recommended
            .iter()
            .filter(|r| r.weight > 0.0 && r.weight.is_finite())
            .map(|r| (&r.signature, r.weight))
            .collect();
        let dist = if weighted.is_empty() {
            None
        } else {
            Some(WeightedIndex::new(weighted.iter().map(|w| w.1)).expect("positive weights"))
        };
        let mut out = Vec::with_capacity(n);
        let mut forbidden_hits = 0usize;
        while out.len() < n {
            let mut found = None;
            for _ in 0..MAX_RETRIES {
                let node = match &dist {
                    Some(d) if self.rng.gen::<f64>() >= self.cfg.explore => {
                        let target = weighted[d.sample(&mut self.rng)].0;
                        self.skeleton(target)
                    }
                    _ => self.tree(),
                };
                let Some(expr) = node.and_then(|n| FactorExpr::new(n, &self.registry).ok()) else {
                    continue;
                };
                if signal.forbids(&signature(&expr)) {
                    forbidden_hits += 1;
                    continue;
                }
                let text = expr.format();
                if self.seen.insert(text) {
                    found = Some(expr);
                    break;
                }
            }
            match found {
                Some(e) => out.push(e),
                None if forbidden_hits > 0 => {
                    return Err(GenError::AllForbidden(
                        signal.forbidden.iter().map(|f| f.signature.to_string()).collect(),
                    ))
                }
                None => {
                    return Err(GenError::Infeasible(format!(
                        "{MAX_RETRIES} attempts produced no new tree within depth {} and {} nodes",
                        self.cfg.max_depth, self.cfg.max_nodes
                    )))
                }
            }
        }
        Ok(out)
    }

    /// One unconstrained tree, or `None` if this draw exceeded the bounds.
    pub fn tree(&mut self) -> Option<Node> {
        let fields = self.cfg.fields.clone();
        let node = self.numeric_call(1, &fields, None)?;
        (node.size() <= self.cfg.max_nodes).then_some(node)
    }

    fn feasible(&self, op: Op, depth: usize, out: Kind) -> bool {
        let spec = op.spec();
        spec.output == out
            && depth + op_need(op) - 1 <= self.cfg.max_depth
            && (spec.windows == 0 || self.cfg.window_choices.iter().any(|&w| w >= spec.min_window))
    }

    fn pick_op(&mut self, depth: usize, out: Kind) -> Option<Op> {
        let ops: Vec<Op> = self
            .registry
            .ops()
            .iter()
            .copied()
            .filter(|&op| self.feasible(op, depth, out))
            .collect();
        ops.choose(&mut self.rng).copied()
    }

    fn leaf(&mut self, fields: &[Field]) -> Node {
        if fields.is_empty() || self.rng.gen::<f64>() < self.cfg.const_probability {
            let (lo, hi) = self.cfg.constant_range;
            let v: f64 = if lo == hi { lo } else { self.rng.gen_range(lo..hi) };
            Node::Const((v * 100.0).round() / 100.0)
        } else {
            Node::Field(*fields.choose(&mut self.rng).expect("non-empty"))
        }
    }

    fn windows(&mut self, op: Op) -> Vec<usize> {
        let spec = op.spec();
        if spec.windows == 0 {
            return Vec::new();
        }
        let choices: Vec<usize> = self
            .cfg
            .window_choices
            .iter()
            .copied()
            .filter(|&w| w >= spec.min_window)
            .collect();
        vec![*choices.choose(&mut self.rng).expect("feasible op has a window")]
    }

    fn node(&mut self, kind: Kind, depth: usize, fields: &[Field]) -> Option<Node> {
        match kind {
            Kind::Numeric => {
                if self.rng.gen::<f64>() < self.cfg.leaf_probability(depth) {
                    Some(self.leaf(fields))
                } else {
                    self.numeric_call(depth, fields, None)
                }
            }
            Kind::Logical => {
                let op = self.pick_op(depth, Kind::Logical)?;
                self.call_with(op, depth, fields)
            }
        }
    }

    fn numeric_call(&mut self, depth: usize, fields: &[Field], op: Option<Op>) -> Option<Node> {
        let op = match op {
            Some(op) => op,
            None => match self.pick_op(depth, Kind::Numeric) {
                Some(op) => op,
                None if depth > 1 => return Some(self.leaf(fields)),
                None => return None,
            },
        };
        self.call_with(op, depth, fields)
    }

    fn call_with(&mut self, op: Op, depth: usize, fields: &[Field]) -> Option<Node> {
        let mut args = Vec::with_capacity(op.arity());
        for &k in op.spec().inputs {
            args.push(self.node(k, depth + 1, fields)?);
        }
        let windows = self.windows(op);
        Some(Node::call(op, args, windows))
    }

    /// A tree whose root, direct child operators and field set reproduce
    /// `target`; deeper structure is random. `None` after bounded retries.
    fn skeleton(&mut self, target: &PatternSignature) -> Option<Node> {
        let root = Op::from_name(&target.root)?;
        if root.output() != Kind::Numeric || !self.registry.contains(root) {
            return None;
        }
        let children: Vec<Op> = target
            .child_ops()
            .into_iter()
            .map(Op::from_name)
            .collect::<Option<_>>()?;
        let inputs = root.spec().inputs;
        if children.len() > inputs.len() {
            return None;
        }
        for _ in 0..SKELETON_RETRIES {
            let mut slots: Vec<usize> = (0..inputs.len()).collect();
            slots.shuffle(&mut self.rng);
            let mut assigned: Vec<Option<Op>> = vec![None; inputs.len()];
            let mut ok = true;
            for &c in &children {
                match slots.iter().position(|&s| assigned[s].is_none() && inputs[s] == c.output()) {
                    Some(p) => assigned[slots[p]] = Some(c),
                    None => {
                        ok = false;
                        break;
                    }
                }
            }
            if !ok {
                return None;
            }
            let mut args = Vec::with_capacity(inputs.len());
            for (slot, &k) in inputs.iter().enumerate() {
                let arg = match (assigned[slot], k) {
                    (Some(c), _) if self.feasible(c, 2, c.output()) => self.call_with(c, 2, &target.fields),
                    (Some(_), _) => None,
                    (None, Kind::Numeric) => Some(self.leaf(&target.fields)),
                    (None, Kind::Logical) => None,
                };
                match arg {
                    Some(a) => args.push(a),
                    None => {
                        ok = false;
                        break;
                    }
                }
            }
            if !ok {
                continue;
            }
            let windows = self.windows(root);
            let node = Node::call(root, args, windows);
            if node.size() <= self.cfg.max_nodes && crate::dsl::signature_of(&node) == *target {
                return Some(node);
            }
        }
        None
    }
}

pub fn random_candidates(
    n: usize,
    registry: &OperatorRegistry,
    cfg: &GenConfig,
) -> Result<Vec<FactorExpr>, GenError> {
    Generator::new(registry.clone(), cfg.clone())?.random(n)
}

pub fn guided_candidates(
    n: usize,
    signal: &MemorySignal,
    registry: &OperatorRegistry,
    cfg: &GenConfig,
) -> Result<Vec<FactorExpr>, GenError> {
    Generator::new(registry.clone(), cfg.clone())?.guided(n, signal)
}

/// A generator process: launched once per batch, sent one request line and
/// read until it reports completion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExternalEndpoint {
    pub program: String,
    #[serde(default)]
    pub args: Vec<String>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: f64,
}

fn default_timeout() -> f64 {
    120.0
}

impl ExternalEndpoint {
    pub fn new(program: impl Into<String>, args: Vec<String>) -> Self {
        ExternalEndpoint {
            program: program.into(),
            args,
            timeout_secs: default_timeout(),
        }
    }
}

#[derive(Serialize)]
struct Request<'a> {
    #[serde(rename = "type")]
    kind: &'static str,
    count: usize,
    signal: &'a MemorySignal,
}

#[derive(Deserialize)]
struct Response {
    #[serde(rename = "type")]
    kind: Option<String>,
    formula: Option<String>,
}

#[derive(Debug, Clone, Default)]
pub struct ExternalBatch {
    pub candidates: Vec<FactorExpr>,
    /// (offending line, reason) for every dropped response.
    pub dropped: Vec<(String, String)>,
}

pub fn external_candidates(
    n: usize,
    signal: &MemorySignal,
    endpoint: &ExternalEndpoint,
    registry: &OperatorRegistry,
) -> Result<ExternalBatch, GenError> {
    let ext = |m: String| GenError::External(m);
    let mut child = Command::new(&endpoint.program)
        .args(&endpoint.args)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::inherit())
        .spawn()
        .map_err(|e| ext(format!("failed to launch `{}`: {e}", endpoint.program)))?;

    let request = serde_json::to_string(&Request {
        kind: "generate",
        count: n,
        signal,
    })
    .expect("request serializes");
    {
        let mut stdin = child.stdin.take().expect("piped stdin");
        if let Err(e) = writeln!(stdin, "{request}").and_then(|_| stdin.flush()) {
            let _ = child.kill();
            let _ = child.wait();
            return Err(ext(format!("failed to send request: {e}")));
        }
    }

    let stdout = child.stdout.take().expect("piped stdout");
    let (tx, rx) = mpsc::channel();
    std::thread::spawn(move || {
        for line in BufReader::new(stdout).lines() {
            if tx.send(line).is_err() {
                break;
            }
        }
    });

    let deadline = Instant::now() + Duration::from_secs_f64(endpoint.timeout_secs.max(0.0));
    let mut batch = ExternalBatch::default();
    let mut seen = HashSet::new();
    let mut done = false;
    let mut failure = None;
    while !done {
        let left = deadline.saturating_duration_since(Instant::now());
        let line = match rx.recv_timeout(left) {
            Ok(Ok(line)) => line,
            Ok(Err(e)) => {
                failure = Some(format!("read error: {e}"));
                break;
            }
            Err(mpsc::RecvTimeoutError::Timeout) => {
                failure = Some(format!("timed out after {} s", endpoint.timeout_secs));
                break;
            }
            Err(mpsc::RecvTimeoutError::Disconnected) => {
                failure = Some("process closed its output before sending done".into());
                break;
            }
        };
        if line.trim().is_empty() {
            continue;
        }
        let mut drop = |reason: String| {
            log::warn!("external generator: dropped `{line}`: {reason}");
            batch.dropped.push((line.clone(), reason));
        };
        let resp: Response = match serde_json::from_str(&line) {
            Ok(r) => r,
            Err(e) => {
                drop(format!("not a protocol message: {e}"));
                continue;
            }
        };
        if resp.kind.as_deref() == Some("done") {
            done = true;
            continue;
        }
        let Some(text) = resp.formula else {
            drop("message has neither a formula nor type done".into());
            continue;
        };
        let expr = match parse_with(&text, registry) {
            Ok(e) => e,
            Err(e) => {
                drop(format!("parse error: {e}"));
                continue;
            }
        };
        if signal.forbids(&signature(&expr)) {
            drop(format!("forbidden pattern {}", signature(&expr)));
            continue;
        }
        if batch.candidates.len() >= n {
            drop("more formulas than requested".into());
            continue;
        }
        if !seen.insert(expr.format()) {
            drop("duplicate formula".into());
            continue;
        }
        batch.candidates.push(expr);
    }

    if !done || child.try_wait().ok().flatten().is_none() {
        let _ = child.kill();
    }
    let _ = child.wait();
    if let Some(f) = failure {
        return Err(ext(f));
    }
    if batch.candidates.is_empty() {
        return Err(ext("no valid formulas returned".into()));
    }
    Ok(batch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::memory::{ForbiddenFilter, WeightedSignature};

    fn registry() -> OperatorRegistry {
        OperatorRegistry::standard()
    }

    #[test]
    fn random_respects_bounds_and_seed() {
        let cfg = GenConfig {
            seed: 7,
            ..GenConfig::default()
        };
        let a = random_candidates(1000, &registry(), &cfg).unwrap();
        assert_eq!(a.len(), 1000);
        assert!(a.iter().all(|e| e.depth() <= 5 && e.size() <= 25 && e.depth() >= 2));
        let texts: HashSet<String> = a.iter().map(|e| e.format()).collect();
        assert_eq!(texts.len(), 1000);
        let b = random_candidates(1000, &registry(), &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn impossible_bounds_error() {
        let cfg = GenConfig {
            max_depth: 1,
            ..GenConfig::default()
        };
        assert!(matches!(
            random_candidates(1, &registry(), &cfg),
            Err(GenError::Infeasible(_))
        ));
        let cfg = GenConfig {
            window_choices: vec![1],
            ..GenConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn empty_signal_is_random() {
        let cfg = GenConfig {
            seed: 3,
            ..GenConfig::default()
        };
        let a = random_candidates(200, &registry(), &cfg).unwrap();
        let b = guided_candidates(200, &MemorySignal::empty(), &registry(), &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn forbidden_is_never_emitted() {
        let sig = signature(&crate::dsl::parse("Neg(Delta($close, 3))").unwrap());
        let signal = MemorySignal {
            forbidden: vec![ForbiddenFilter {
                signature: sig.clone(),
                reason: String::new(),
            }],
            recommended: vec![WeightedSignature {
                signature: sig.clone(),
                weight: 1.0,
                description: String::new(),
            }],
            ..MemorySignal::default()
        };
        let out = guided_candidates(300, &signal, &registry(), &GenConfig::default()).unwrap();
        assert!(out.iter().all(|e| signature(e) != sig));
    }

    #[test]
    fn skeleton_reproduces_signature() {
        let text = "IfElse(Greater(Rsquare($close, 24), 0.5), Neg(Slope($close, 24)), Neg(Resi($close, 24)))";
        let sig = signature(&crate::dsl::parse(text).unwrap());
        let mut g = Generator::new(registry(), GenConfig::default()).unwrap();
        let hits = (0..50).filter_map(|_| g.skeleton(&sig)).count();
        assert!(hits >= 45, "{hits}");
    }
}
