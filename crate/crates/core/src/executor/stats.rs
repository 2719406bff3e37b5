use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::planner::ConjunctStat;

/// Counted execution statistics. Property counts are one per function body
/// entry; costs are the declared cost units of every invocation.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ExecStats {
    /// Batches processed per operator, keyed `"{id} {kind}"`.
    pub operator_invocations: BTreeMap<String, u64>,
    pub operator_cost: BTreeMap<String, f64>,
    /// Frames processed per detector.
    pub detector_invocations: BTreeMap<String, u64>,
    pub classifier_invocations: BTreeMap<String, u64>,
    pub frame_filter_invocations: BTreeMap<String, u64>,
    /// Body entries per property name.
    pub property_invocations: BTreeMap<String, u64>,
    /// Body entries per property function.
    pub function_invocations: BTreeMap<String, u64>,
    pub memo_hits: u64,
    pub frames_read: u64,
    pub frames_emitted: u64,
    pub cost_units: f64,
    #[serde(skip)]
    pub wall_seconds: f64,
    #[serde(skip)]
    pub conjuncts: BTreeMap<String, ConjunctStat>,
}

impl ExecStats {
    pub fn total_operator_invocations(&self) -> u64 {
        self.operator_invocations.values().sum()
    }

    pub fn total_detector_invocations(&self) -> u64 {
        self.detector_invocations.values().sum()
    }

    pub fn function(&self, name: &str) -> u64 {
        self.function_invocations.get(name).copied().unwrap_or(0)
    }

    pub fn property(&self, name: &str) -> u64 {
        self.property_invocations.get(name).copied().unwrap_or(0)
    }

    pub(crate) fn charge(&mut self, op: &str, cost: f64) {
        self.cost_units += cost;
        *self.operator_cost.entry(op.to_string()).or_default() += cost;
    }
}
