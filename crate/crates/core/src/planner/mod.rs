//! Query plans: operator DAG construction, optimization passes,
//! inheritance-based alternatives, canary profiling and plan selection.

mod build;
mod passes;
mod plan;
mod profile;

use thiserror::Error;

pub use build::{Alternative, BindingPlan, Blueprint, Choice};
pub use passes::{conjunct_key, fuse_operators, order_conjuncts, pull_up_predicates, ConjunctStat};
pub use plan::{BindingSpec, OpKind, OpNode, PlanDag, PropSpec, RelationSpec, PLAN_VERSION};
pub use profile::{f1_score, profile, select_plan, Confusion, ProfileReport, Selection};

use crate::dsl::ValidatedProgram;
use crate::executor::ExecOptions;
use crate::registry::Registry;
use crate::trace_io::{TraceRecord, VideoMeta};

pub const DEFAULT_ALTERNATIVE_CAP: usize = 32;

#[derive(Debug, Error)]
pub enum PlanError {
    #[error("invalid plan: {0}")]
    Invalid(String),
    #[error("unsupported query shape: {0}")]
    Unsupported(String),
    #[error("link error: {0}")]
    Link(String),
    #[error("plan file: {0}")]
    Io(String),
    #[error("malformed plan file: {0}")]
    Parse(String),
    #[error("plan version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("profiling failed: {0}")]
    Profile(String),
}

/// Structural optimizations applied to every candidate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PlanOptions {
    pub pullup: bool,
    pub fusion: bool,
    /// Adds trackers to branches with intrinsic properties.
    pub memo: bool,
}

impl Default for PlanOptions {
    fn default() -> Self {
        PlanOptions { pullup: true, fusion: true, memo: true }
    }
}

impl PlanOptions {
    pub fn none() -> Self {
        PlanOptions { pullup: false, fusion: false, memo: false }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CostMetric {
    Counted,
    WallClock,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlannerConfig {
    pub accuracy_target: f64,
    pub options: PlanOptions,
    pub alternative_cap: usize,
    pub cost_metric: CostMetric,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        PlannerConfig {
            accuracy_target: 0.9,
            options: PlanOptions::default(),
            alternative_cap: DEFAULT_ALTERNATIVE_CAP,
            cost_metric: CostMetric::Counted,
        }
    }
}

impl PlannerConfig {
    pub fn validate(&self) -> Result<(), PlanError> {
        if !(0.0..=1.0).contains(&self.accuracy_target) {
            return Err(PlanError::Invalid(format!("accuracy target {} outside [0, 1]", self.accuracy_target)));
        }
        if self.alternative_cap == 0 {
            return Err(PlanError::Invalid("alternative cap must be at least 1".into()));
        }
        Ok(())
    }
}

/// Applies the enabled structural passes.
pub fn optimize(plan: &PlanDag, options: &PlanOptions) -> PlanDag {
    let mut p = plan.clone();
    if options.pullup {
        p = pull_up_predicates(&p);
    }
    if options.fusion {
        p = fuse_operators(&p);
    }
    p.seal();
    p
}

/// Unoptimized plan for one alternative.
pub fn build_base_dag(
    vp: &ValidatedProgram,
    registry: &Registry,
    query: &str,
    fps: f64,
    alt: Option<&Alternative>,
    options: &PlanOptions,
) -> Result<PlanDag, PlanError> {
    let bp = Blueprint::new(vp, query, fps)?;
    let alt = alt.cloned().unwrap_or_else(|| bp.general());
    bp.assemble(vp, registry, &alt, options)
}

/// The user's initial DAG: most general detectors, no approximate filters,
/// no optimizations. Its output is the profiling ground truth.
pub fn reference_plan(vp: &ValidatedProgram, registry: &Registry, query: &str, fps: f64) -> Result<PlanDag, PlanError> {
    build_base_dag(vp, registry, query, fps, None, &PlanOptions::none())
}

/// The general alternative with the enabled optimizations.
pub fn general_plan(
    vp: &ValidatedProgram,
    registry: &Registry,
    query: &str,
    fps: f64,
    options: &PlanOptions,
) -> Result<PlanDag, PlanError> {
    Ok(optimize(&build_base_dag(vp, registry, query, fps, None, options)?, options))
}

/// One optimized candidate per alternative, general first.
pub fn enumerate_alternatives(
    vp: &ValidatedProgram,
    registry: &Registry,
    query: &str,
    fps: f64,
    config: &PlannerConfig,
) -> Result<Vec<PlanDag>, PlanError> {
    let bp = Blueprint::new(vp, query, fps)?;
    bp.alternatives(config.alternative_cap)
        .iter()
        .map(|alt| Ok(optimize(&bp.assemble(vp, registry, alt, &config.options)?, &config.options)))
        .collect()
}

/// Outcome of planning one query.
#[derive(Clone, Debug)]
pub struct PlanChoice {
    /// The plan to execute, filters ordered by canary measurements.
    pub plan: PlanDag,
    pub reference: PlanDag,
    pub candidates: Vec<PlanDag>,
    pub reports: Vec<ProfileReport>,
    pub selection: Selection,
}

/// Enumerates the alternatives of `query`, profiles them on `canary`
/// against the reference plan and picks the cheapest one that is accurate
/// enough.
pub fn plan_query(
    vp: &ValidatedProgram,
    registry: &Registry,
    query: &str,
    meta: &VideoMeta,
    canary: &[TraceRecord],
    config: &PlannerConfig,
    exec: &ExecOptions,
) -> Result<PlanChoice, PlanError> {
    config.validate()?;
    let candidates = enumerate_alternatives(vp, registry, query, meta.fps, config)?;
    let reference = reference_plan(vp, registry, query, meta.fps)?;
    let reports = profile(&candidates, &reference, registry, meta, canary, exec, config.cost_metric)?;
    let selection = select_plan(&reports, config.accuracy_target, &reference);
    if let Some(w) = &selection.warning {
        log::warn!("{query}: {w}");
    }
    let plan = match selection.index {
        Some(i) => order_conjuncts(&candidates[i], &reports[i].conjuncts),
        None => reference.clone(),
    };
    Ok(PlanChoice { plan, reference, candidates, reports, selection })
}
