//! Canary profiling of candidate plans against the reference plan.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::passes::ConjunctStat;
use super::plan::PlanDag;
use super::{CostMetric, PlanError};
use crate::executor::{run, ExecOptions, RunOutput};
use crate::registry::Registry;
use crate::trace_io::{FrameId, TraceRecord, VideoMeta};

/// Frame-level confusion counts against reference labels.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl Confusion {
    /// Counts over `frames`, each labelled positive iff it is in the set.
    pub fn count(frames: &[FrameId], predicted: &BTreeSet<FrameId>, truth: &BTreeSet<FrameId>) -> Self {
        let mut c = Confusion::default();
        for f in frames {
            match (predicted.contains(f), truth.contains(f)) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        c
    }

    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

/// `2TP / (2TP + FP + FN)`; 1.0 when both sides are empty.
pub fn f1_score(c: &Confusion) -> f64 {
    ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProfileReport {
    pub plan_id: String,
    pub label: String,
    pub operators: usize,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub confusion: Confusion,
    /// Cost under the configured metric.
    pub cost: f64,
    pub cost_units: f64,
    pub cost_per_batch: f64,
    pub wall_per_batch: f64,
    pub op_costs: BTreeMap<String, f64>,
    /// Frames the candidate reported.
    pub positives: Vec<FrameId>,
    /// Frames the reference plan reported.
    pub reference_positives: Vec<FrameId>,
    #[serde(skip)]
    pub conjuncts: BTreeMap<String, ConjunctStat>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Selection {
    /// Index into the candidates, or `None` for the reference plan.
    pub index: Option<usize>,
    pub plan_id: String,
    /// Set when no candidate met the accuracy target.
    pub warning: Option<String>,
}

fn positives(out: &RunOutput, query: &str) -> BTreeSet<FrameId> {
    out.results.get(query).map(|r| r.frames.keys().copied().collect()).unwrap_or_default()
}

/// Runs the reference and every candidate on the canary and scores each
/// candidate's output frames against the reference's.
pub fn profile(
    candidates: &[PlanDag],
    reference: &PlanDag,
    registry: &Registry,
    meta: &VideoMeta,
    canary: &[TraceRecord],
    options: &ExecOptions,
    metric: CostMetric,
) -> Result<Vec<ProfileReport>, PlanError> {
    if canary.is_empty() {
        return Err(PlanError::Profile("canary has no frames".into()));
    }
    let frames: Vec<FrameId> = canary.iter().map(|r| r.frame_id).collect();
    let batches = canary.len().div_ceil(options.batch_size.max(1)) as f64;
    let reference_out =
        run(reference, registry, meta, canary, options).map_err(|e| PlanError::Profile(format!("reference plan: {e}")))?;
    let truth = positives(&reference_out, &reference.query);
    candidates
        .par_iter()
        .map(|plan| {
            let out = run(plan, registry, meta, canary, options)
                .map_err(|e| PlanError::Profile(format!("plan {}: {e}", plan.label)))?;
            let predicted = positives(&out, &plan.query);
            let confusion = Confusion::count(&frames, &predicted, &truth);
            let cost = match metric {
                CostMetric::Counted => out.stats.cost_units,
                CostMetric::WallClock => out.stats.wall_seconds,
            };
            Ok(ProfileReport {
                plan_id: plan.plan_id.clone(),
                label: plan.label.clone(),
                operators: plan.ops.len(),
                f1: f1_score(&confusion),
                precision: confusion.precision(),
                recall: confusion.recall(),
                confusion,
                cost,
                cost_units: out.stats.cost_units,
                cost_per_batch: out.stats.cost_units / batches,
                wall_per_batch: out.stats.wall_seconds / batches,
                op_costs: out.stats.operator_cost.clone(),
                positives: predicted.into_iter().collect(),
                reference_positives: truth.iter().copied().collect(),
                conjuncts: out.stats.conjuncts,
            })
        })
        .collect()
}

/// Cheapest candidate whose F1 reaches `target`; ties go to fewer
/// operators, then the smaller plan id. Falls back to the reference plan.
pub fn select_plan(reports: &[ProfileReport], target: f64, reference: &PlanDag) -> Selection {
    let best = reports.iter().enumerate().filter(|(_, r)| r.f1 >= target).min_by(|(_, a), (_, b)| {
        a.cost.total_cmp(&b.cost).then(a.operators.cmp(&b.operators)).then(a.plan_id.cmp(&b.plan_id))
    });
    match best {
        Some((i, r)) => Selection { index: Some(i), plan_id: r.plan_id.clone(), warning: None },
        None => Selection {
            index: None,
            plan_id: reference.plan_id.clone(),
            warning: Some(format!("no candidate reached F1 {target}; using the reference plan")),
        },
    }
}
