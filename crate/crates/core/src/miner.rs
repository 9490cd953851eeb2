//! The mining loop: retrieve a memory signal, generate a batch, screen it
//! through the staged pipeline, update the library and distill the batch
//! back into memory.

use std::fmt;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsl::{signature, FactorExpr, OperatorRegistry};
use crate::generator::{external_candidates, ExternalEndpoint, GenConfig, GenError, Generator};
use crate::kernels::{evaluate, Backend};
use crate::library::{AdmissionThresholds, Candidate, Decision, FactorLibrary};
use crate::memory::{
    form, retrieve, ExperienceMemory, MemoryConfig, MemorySignal, Outcome, Stage, TrajectoryRecord,
};
use crate::metrics::{FactorStats, RankedSignal};
use crate::panel::{forward_return, Panel};
use crate::signal::SignalMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorKind {
    Random,
    #[default]
    Guided,
    External,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MemoryMode {
    #[default]
    WithMemory,
    NoMemory,
}

impl fmt::Display for MemoryMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MemoryMode::WithMemory => "with_memory",
            MemoryMode::NoMemory => "no_memory",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MiningConfig {
    /// Target library size K.
    pub target_size: usize,
    pub max_batches: usize,
    pub batch_size: usize,
    pub thresholds: AdmissionThresholds,
    /// Assets used by the fast screen (the first ones by index).
    pub fast_assets: usize,
    /// Assets used for correlation checks and final validation.
    pub full_assets: usize,
    pub generator: GeneratorKind,
    pub external: Option<ExternalEndpoint>,
    pub workers: usize,
    pub seed: u64,
    pub backend: Backend,
    pub gen: GenConfig,
    pub memory: MemoryConfig,
}

impl Default for MiningConfig {
    fn default() -> Self {
        MiningConfig {
            target_size: 15,
            max_batches: 60,
            batch_size: 40,
            thresholds: AdmissionThresholds::default(),
            fast_assets: 20,
            full_assets: 50,
            generator: GeneratorKind::Guided,
            external: None,
            workers: 1,
            seed: 0,
            backend: Backend::Optimized,
            gen: GenConfig::default(),
            memory: MemoryConfig::default(),
        }
    }
}

#[derive(Debug, Error)]
pub enum MinerError {
    #[error("invalid mining config: {0}")]
    Config(String),
    #[error("{0}")]
    Generator(#[from] GenError),
}

impl MiningConfig {
    pub fn validate(&self, panel: &Panel) -> Result<(), MinerError> {
        let bad = |m: String| Err(MinerError::Config(m));
        if self.target_size < 1 {
            return bad("target_size must be >= 1".into());
        }
        if self.batch_size < 1 {
            return bad("batch_size must be >= 1".into());
        }
        if self.fast_assets < 3 || self.fast_assets > self.full_assets {
            return bad(format!(
                "need 3 <= fast_assets ({}) <= full_assets ({})",
                self.fast_assets, self.full_assets
            ));
        }
        if self.full_assets > panel.n_assets() {
            return bad(format!(
                "full_assets ({}) exceeds the panel's {} assets",
                self.full_assets,
                panel.n_assets()
            ));
        }
        let longest = self.gen.window_choices.iter().max().copied().unwrap_or(0);
        if panel.n_times() <= longest * 2 {
            return bad(format!(
                "panel has {} bars, too few for windows up to {longest}",
                panel.n_times()
            ));
        }
        if self.generator == GeneratorKind::External && self.external.is_none() {
            return bad("generator `external` needs an `external` endpoint".into());
        }
        self.thresholds.validate().map_err(MinerError::Config)?;
        self.gen.validate()?;
        Ok(())
    }
}

/// Per-batch stage accounting.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct BatchSummary {
    pub batch: u64,
    pub generated: usize,
    pub stage1_passed: usize,
    pub stage2_blocked: usize,
    pub stage2_replacements: usize,
    pub stage3_dropped: usize,
    pub admitted: usize,
    pub replaced: usize,
    pub library_size: usize,
    pub signal_recommended: usize,
    pub signal_forbidden: usize,
    /// Signatures the generator was barred from in this batch.
    #[serde(default)]
    pub forbidden: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator_error: Option<String>,
    #[serde(default)]
    pub lessons: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LogEntry {
    Candidate(TrajectoryRecord),
    Batch(BatchSummary),
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunLog {
    pub entries: Vec<LogEntry>,
}

impl RunLog {
    pub fn records(&self) -> impl Iterator<Item = &TrajectoryRecord> {
        self.entries.iter().filter_map(|e| match e {
            LogEntry::Candidate(r) => Some(r),
            _ => None,
        })
    }

    pub fn batches(&self) -> impl Iterator<Item = &BatchSummary> {
        self.entries.iter().filter_map(|e| match e {
            LogEntry::Batch(b) => Some(b),
            _ => None,
        })
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for e in &self.entries {
            serde_json::to_writer(&mut w, e)?;
            w.write_all(b"\n")?;
        }
        w.flush()
    }

    pub fn to_jsonl(&self) -> String {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("json is utf-8")
    }
}

pub struct MiningResult {
    pub library: FactorLibrary,
    pub memory: ExperienceMemory,
    pub log: RunLog,
}

fn finite(v: f64) -> f64 {
    if v.is_finite() {
        v
    } else {
        0.0
    }
}

struct Pending {
    index: usize,
    expr: FactorExpr,
    fast: Option<FactorStats>,
    error: Option<String>,
}

struct Survivor {
    index: usize,
    expr: FactorExpr,
    fast_fitness: f64,
    full: RankedSignal,
}

struct Environment {
    full: Panel,
    fast: Panel,
    full_target: SignalMatrix,
    fast_target: SignalMatrix,
    pool: rayon::ThreadPool,
}

/// Runs the mining loop until the library holds `target_size` factors or
/// `max_batches` batches have run.
pub fn ralph_loop(
    panel: &Panel,
    cfg: &MiningConfig,
    memory: ExperienceMemory,
) -> Result<MiningResult, MinerError> {
    run(panel, cfg, memory, MemoryMode::WithMemory)
}

pub fn run(
    panel: &Panel,
    cfg: &MiningConfig,
    mut memory: ExperienceMemory,
    mode: MemoryMode,
) -> Result<MiningResult, MinerError> {
    cfg.validate(panel)?;
    let full = panel.subset_assets(cfg.full_assets);
    let fast = panel.subset_assets(cfg.fast_assets);
    let target_err = |e: crate::panel::PanelError| MinerError::Config(e.to_string());
    let env = Environment {
        full_target: forward_return(&full).map_err(target_err)?,
        fast_target: forward_return(&fast).map_err(target_err)?,
        full,
        fast,
        pool: rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.workers.max(1))
            .build()
            .map_err(|e| MinerError::Config(format!("cannot start workers: {e}")))?,
    };
    let registry = OperatorRegistry::standard();
    let gen_cfg = GenConfig {
        seed: cfg.seed,
        ..cfg.gen.clone()
    };
    let mut generator = Generator::new(registry.clone(), gen_cfg)?;
    let mut library = FactorLibrary::new(cfg.thresholds);
    let mut log = RunLog::default();

    for batch in 1..=cfg.max_batches as u64 {
        if library.len() >= cfg.target_size {
            break;
        }
        let signal = match (mode, cfg.generator) {
            (MemoryMode::NoMemory, _) | (_, GeneratorKind::Random) => MemorySignal::empty(),
            _ => retrieve(&memory, &library),
        };
        let mut summary = BatchSummary {
            batch,
            signal_recommended: signal.recommended.len(),
            signal_forbidden: signal.forbidden.len(),
            forbidden: signal.forbidden.iter().map(|f| f.signature.to_string()).collect(),
            ..BatchSummary::default()
        };
        let exprs = match generate(&mut generator, cfg, &signal, &registry) {
            Ok(e) => e,
            Err(e) => {
                log::warn!("batch {batch}: generator failed, skipping: {e}");
                summary.generator_error = Some(e.to_string());
                summary.library_size = library.len();
                log.entries.push(LogEntry::Batch(summary));
                continue;
            }
        };
        let records = run_batch(batch, exprs, cfg, &env, &mut library, &mut summary);
        if mode == MemoryMode::WithMemory {
            memory = memory.evolve(&form(&records), &cfg.memory);
            memory.state.library_size = library.len();
        }
        log.entries
            .extend(records.into_iter().map(LogEntry::Candidate));
        log.entries.push(LogEntry::Batch(summary));
    }
    Ok(MiningResult {
        library,
        memory,
        log,
    })
}

fn generate(
    generator: &mut Generator,
    cfg: &MiningConfig,
    signal: &MemorySignal,
    registry: &OperatorRegistry,
) -> Result<Vec<FactorExpr>, GenError> {
    match (cfg.generator, &cfg.external) {
        (GeneratorKind::Random, _) => generator.random(cfg.batch_size),
        (GeneratorKind::External, Some(endpoint)) => {
            match external_candidates(cfg.batch_size, signal, endpoint, registry) {
                Ok(b) => {
                    let texts: Vec<String> = b.candidates.iter().map(|e| e.format()).collect();
                    generator.mark_seen(texts.iter().map(String::as_str));
                    Ok(b.candidates)
                }
                Err(e) => {
                    log::warn!("{e}; falling back to the guided sampler");
                    generator.guided(cfg.batch_size, signal)
                }
            }
        }
        _ => generator.guided(cfg.batch_size, signal),
    }
}

fn record(
    batch: u64,
    index: usize,
    expr: &FactorExpr,
    stats: Option<&FactorStats>,
    outcome: Outcome,
    stage: Stage,
) -> TrajectoryRecord {
    TrajectoryRecord {
        batch,
        name: format!("b{batch:03}_c{index:03}"),
        formula: expr.format(),
        signature: signature(expr),
        fitness: stats.map_or(0.0, |s| finite(s.fitness)),
        icir: stats.map_or(0.0, |s| finite(s.icir)),
        max_corr: 0.0,
        blocking: Vec::new(),
        outcome,
        stage,
        library_id: None,
        replaced: None,
        error: None,
    }
}

fn run_batch(
    batch: u64,
    exprs: Vec<FactorExpr>,
    cfg: &MiningConfig,
    env: &Environment,
    library: &mut FactorLibrary,
    summary: &mut BatchSummary,
) -> Vec<TrajectoryRecord> {
    let th = *library.thresholds();
    let backend = cfg.backend;
    summary.generated = exprs.len();
    let mut slots: Vec<Option<TrajectoryRecord>> = vec![None; exprs.len()];

    // Stage 1: fast screen on the leading assets.
    let pending: Vec<Pending> = env.pool.install(|| {
        exprs
            .into_par_iter()
            .enumerate()
            .map(|(index, expr)| match evaluate(&expr, &env.fast, backend) {
                Ok(sig) => Pending {
                    index,
                    fast: FactorStats::compute(&sig, &env.fast_target).ok(),
                    expr,
                    error: None,
                },
                Err(e) => Pending {
                    index,
                    expr,
                    fast: None,
                    error: Some(e.to_string()),
                },
            })
            .collect()
    });
    let mut passed = Vec::new();
    for p in pending {
        let fitness = p.fast.map_or(0.0, |s| finite(s.fitness));
        if p.error.is_some() || fitness < th.tau_ic {
            let mut r = record(batch, p.index, &p.expr, p.fast.as_ref(), Outcome::RejectedIc, Stage::FastScreen);
            r.error = p.error;
            slots[p.index] = Some(r);
        } else {
            passed.push(p);
        }
    }
    summary.stage1_passed = passed.len();

    // Stage 2: correlation against the library on the full universe.
    let evaluated: Vec<(Survivor, Vec<(u64, f64)>)> = env.pool.install(|| {
        passed
            .into_par_iter()
            .map(|p| {
                let full = evaluate(&p.expr, &env.full, backend).expect("fields checked at stage 1");
                let full = RankedSignal::new(full);
                let corrs = library.correlations(&full);
                let fast_fitness = finite(p.fast.map_or(0.0, |s| s.fitness));
                (
                    Survivor {
                        index: p.index,
                        expr: p.expr,
                        fast_fitness,
                        full,
                    },
                    corrs,
                )
            })
            .collect()
    });
    let mut admits = Vec::new();
    let mut replacements = Vec::new();
    for (s, corrs) in evaluated {
        let checked = library.decide(s.fast_fitness, corrs);
        match checked.decision {
            Decision::Admit => admits.push(s),
            Decision::Replace { .. } => replacements.push(s),
            Decision::RejectCorrelation { blocking } => {
                let mut r = record(batch, s.index, &s.expr, None, Outcome::RejectedCorr, Stage::Correlation);
                r.fitness = s.fast_fitness;
                r.max_corr = checked.max_corr;
                r.blocking = blocking;
                slots[s.index] = Some(r);
                summary.stage2_blocked += 1;
            }
            Decision::RejectLowIc => unreachable!("stage 1 enforces tau_ic"),
        }
    }
    summary.stage2_replacements = replacements.len();

    // Stage 3: greedy intra-batch dedup, strongest first.
    let by_fitness = |a: &Survivor, b: &Survivor| {
        b.fast_fitness
            .total_cmp(&a.fast_fitness)
            .then(a.index.cmp(&b.index))
    };
    admits.sort_by(by_fitness);
    replacements.sort_by(by_fitness);
    let mut kept: Vec<Survivor> = Vec::new();
    for s in admits {
        let worst = kept
            .iter()
            .map(|k| s.full.corr(&k.full).unwrap_or(0.0).abs())
            .fold(0.0, f64::max);
        if worst >= th.theta {
            let mut r = record(batch, s.index, &s.expr, None, Outcome::RejectedDup, Stage::Dedup);
            r.fitness = s.fast_fitness;
            r.max_corr = worst;
            slots[s.index] = Some(r);
            summary.stage3_dropped += 1;
        } else {
            kept.push(s);
        }
    }

    // Stage 4: final statistics on the full universe; replacements first.
    let finals: Vec<(Survivor, FactorStats)> = env.pool.install(|| {
        replacements
            .into_par_iter()
            .chain(kept.into_par_iter())
            .map(|s| {
                let stats = FactorStats::compute(s.full.signal(), &env.full_target)
                    .expect("aligned with target");
                (s, stats)
            })
            .collect()
    });
    for (s, stats) in finals {
        let cand = Candidate {
            name: format!("b{batch:03}_c{:03}", s.index),
            expr: s.expr.clone(),
            stats,
            signal: s.full,
        };
        let checked = library.check_admission(&cand);
        let mut r = record(batch, s.index, &s.expr, Some(&stats), Outcome::RejectedIc, Stage::Validation);
        r.max_corr = finite(checked.max_corr);
        match &checked.decision {
            Decision::RejectLowIc => {}
            Decision::RejectCorrelation { blocking } => {
                r.outcome = Outcome::RejectedCorr;
                r.blocking = blocking.clone();
            }
            Decision::Admit if library.len() >= cfg.target_size => {
                r.outcome = Outcome::RejectedDup;
            }
            Decision::Admit | Decision::Replace { .. } => {
                let applied = library.apply(&checked, cand).expect("decision is fresh");
                r.library_id = applied.admitted;
                r.replaced = applied.removed;
                if applied.removed.is_some() {
                    r.outcome = Outcome::ReplacedIn;
                    summary.replaced += 1;
                } else {
                    r.outcome = Outcome::Admitted;
                    summary.admitted += 1;
                }
            }
        }
        slots[s.index] = Some(r);
    }
    summary.library_size = library.len();

    let records: Vec<TrajectoryRecord> = slots
        .into_iter()
        .map(|r| r.expect("every candidate reaches a terminal outcome"))
        .collect();
    summary.lessons = lessons(&records);
    records
}

fn lessons(records: &[TrajectoryRecord]) -> Vec<String> {
    let mut out = Vec::new();
    let best = records
        .iter()
        .filter(|r| r.stage != Stage::FastScreen)
        .max_by(|a, b| a.fitness.total_cmp(&b.fitness));
    if let Some(b) = best {
        if !b.outcome.is_success() {
            let why = match b.outcome {
                Outcome::RejectedCorr => format!(
                    "correlation {:.2} with {:?}",
                    b.max_corr, b.blocking
                ),
                Outcome::RejectedDup => "redundancy within the batch or a full library".into(),
                _ => "final validation".into(),
            };
            out.push(format!(
                "highest-fitness candidate {} ({:.3}) was rejected by {why}",
                b.name, b.fitness
            ));
        }
    }
    let blocked = records
        .iter()
        .filter(|r| r.outcome == Outcome::RejectedCorr)
        .count();
    if blocked > 0 {
        out.push(format!("{blocked} candidates blocked by library correlation"));
    }
    out
}

/// Comparison row for one memory mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub mode: MemoryMode,
    pub generated: usize,
    /// Candidates passing the fast IC screen.
    pub high_quality: usize,
    pub yield_pct: f64,
    /// High-quality candidates rejected as redundant (library or batch).
    pub rejected_redundant: usize,
    pub rejection_pct: f64,
    pub admitted: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub tau_ic: f64,
    pub theta: f64,
    pub rows: Vec<AblationRow>,
}

pub const ABLATION_HEADER: &str =
    "mode,generated,high_quality,yield_pct,rejected_redundant,rejection_pct,admitted";

impl AblationReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(ABLATION_HEADER);
        s.push('\n');
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{:.4},{},{:.4},{}\n",
                r.mode, r.generated, r.high_quality, r.yield_pct, r.rejected_redundant, r.rejection_pct, r.admitted
            ));
        }
        s
    }

    pub fn row(&self, mode: MemoryMode) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.mode == mode)
    }
}

pub fn ablation_row(mode: MemoryMode, log: &RunLog) -> AblationRow {
    let (mut generated, mut hq, mut redundant, mut admitted) = (0, 0, 0, 0);
    for r in log.records() {
        generated += 1;
        if r.stage != Stage::FastScreen {
            hq += 1;
            if matches!(r.outcome, Outcome::RejectedCorr | Outcome::RejectedDup) {
                redundant += 1;
            }
        }
        if r.outcome.is_success() {
            admitted += 1;
        }
    }
    let pct = |a: usize, b: usize| if b == 0 { 0.0 } else { 100.0 * a as f64 / b as f64 };
    AblationRow {
        mode,
        generated,
        high_quality: hq,
        yield_pct: pct(hq, generated),
        rejected_redundant: redundant,
        rejection_pct: pct(redundant, hq),
        admitted,
    }
}

/// Runs the loop with memory and again with memory disabled from the same
/// seed and starting memory.
pub fn ablation_run(
    panel: &Panel,
    cfg: &MiningConfig,
    memory: &ExperienceMemory,
) -> Result<(AblationReport, [MiningResult; 2]), MinerError> {
    let with = run(panel, cfg, memory.clone(), MemoryMode::WithMemory)?;
    let without = run(panel, cfg, memory.clone(), MemoryMode::NoMemory)?;
    let report = AblationReport {
        tau_ic: cfg.thresholds.tau_ic,
        theta: cfg.thresholds.theta,
        rows: vec![
            ablation_row(MemoryMode::WithMemory, &with.log),
            ablation_row(MemoryMode::NoMemory, &without.log),
        ],
    };
    Ok((report, [with, without]))
}
