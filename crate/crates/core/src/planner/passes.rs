use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::plan::{OpKind, OpNode, PlanDag};
use crate::dsl::print_expr;

/// Canary measurements for one filter conjunct.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ConjunctStat {
    pub evaluated: u64,
    pub passed: u64,
    /// Cost units spent computing properties while evaluating it.
    pub cost: f64,
}

impl ConjunctStat {
    /// Cost per evaluation divided by the rejection rate; lower runs first.
    pub fn rank(&self) -> f64 {
        if self.evaluated == 0 {
            return f64::INFINITY;
        }
        let reject = 1.0 - self.passed as f64 / self.evaluated as f64;
        let cost = self.cost / self.evaluated as f64;
        if reject <= 0.0 {
            f64::INFINITY
        } else {
            cost / reject
        }
    }
}

/// Linear chains of branch operators, keyed by binding, and of tuple
/// operators, keyed by unit.
fn chains(plan: &PlanDag) -> Vec<Vec<usize>> {
    let mut by_key: BTreeMap<(u8, String), Vec<usize>> = BTreeMap::new();
    for op in &plan.ops {
        let key = match &op.kind {
            OpKind::Join { unit, .. } | OpKind::RelationProjector { unit, .. } | OpKind::RelationFilter { unit, .. } => {
                Some((1, unit.clone()))
            }
            OpKind::Fused { ops } => match ops.first() {
                Some(OpKind::RelationProjector { unit, .. } | OpKind::RelationFilter { unit, .. }) => Some((1, unit.clone())),
                _ => op.kind.binding().map(|b| (0, b.to_string())),
            },
            k => k.binding().map(|b| (0, b.to_string())),
        };
        if let Some(k) = key {
            by_key.entry(k).or_default().push(op.id);
        }
    }
    by_key.into_values().collect()
}

/// Rewires each chain into its new order and renumbers the plan.
fn reorder(plan: &PlanDag, rewrites: &[(Vec<usize>, Vec<usize>)]) -> PlanDag {
    let mut ops = plan.ops.clone();
    let mut slot: BTreeMap<usize, (usize, usize)> = ops.iter().map(|o| (o.id, (o.id, 0))).collect();
    for (old, new) in rewrites {
        if old == new || old.is_empty() {
            continue;
        }
        let head_inputs = plan.ops[old[0]].inputs.clone();
        let tail = *old.last().expect("non-empty chain");
        let new_tail = *new.last().expect("non-empty chain");
        for (i, &id) in new.iter().enumerate() {
            ops[id].inputs = if i == 0 { head_inputs.clone() } else { vec![new[i - 1]] };
            slot.insert(id, (old[0], i));
        }
        let members: BTreeSet<usize> = old.iter().copied().collect();
        for op in ops.iter_mut().filter(|o| !members.contains(&o.id)) {
            for input in op.inputs.iter_mut() {
                if *input == tail {
                    *input = new_tail;
                }
            }
        }
    }
    let mut order: Vec<usize> = ops.iter().map(|o| o.id).collect();
    order.sort_by_key(|id| slot[id]);
    renumber(plan, ops, &order)
}

fn renumber(plan: &PlanDag, ops: Vec<OpNode>, order: &[usize]) -> PlanDag {
    let map: BTreeMap<usize, usize> = order.iter().enumerate().map(|(new, old)| (*old, new)).collect();
    let by_id: BTreeMap<usize, OpNode> = ops.into_iter().map(|o| (o.id, o)).collect();
    let mut out = plan.clone();
    out.ops = order
        .iter()
        .map(|old| {
            let mut op = by_id[old].clone();
            op.id = map[old];
            op.inputs = op.inputs.iter().map(|i| map[i]).collect();
            op
        })
        .collect();
    out.seal();
    out
}

/// Moves each filter up to just behind the projectors it reads, and frame
/// filters ahead of the detector (or, on tracked branches, right after the
/// history prefix). Filters keep their relative order; projectors no filter
/// reads move to the end.
pub fn pull_up_predicates(plan: &PlanDag) -> PlanDag {
    let mut rewrites = Vec::new();
    for chain in chains(plan) {
        let kinds: Vec<&OpKind> = chain.iter().map(|&id| &plan.ops[id].kind).collect();
        if kinds.iter().any(|k| matches!(k, OpKind::Fused { .. })) {
            continue;
        }
        let new = if matches!(kinds[0], OpKind::Join { .. }) {
            tuple_order(plan, &chain)
        } else {
            branch_order(plan, &chain)
        };
        rewrites.push((chain, new));
    }
    reorder(plan, &rewrites)
}

fn filter_slots(
    plan: &PlanDag,
    projectors: &[usize],
    filters: &[usize],
    provides: impl Fn(&OpKind) -> Option<String>,
    needs: impl Fn(&OpKind) -> BTreeSet<String>,
) -> Vec<usize> {
    let provided: Vec<Option<String>> = projectors.iter().map(|&id| provides(&plan.ops[id].kind)).collect();
    let mut emitted = vec![false; projectors.len()];
    let mut out = Vec::new();
    for &f in filters {
        let need = needs(&plan.ops[f].kind);
        for (i, p) in provided.iter().enumerate() {
            if !emitted[i] && p.as_ref().is_some_and(|p| need.contains(p)) {
                emitted[i] = true;
                out.push(projectors[i]);
            }
        }
        out.push(f);
    }
    out.extend(projectors.iter().zip(&emitted).filter(|(_, e)| !**e).map(|(p, _)| *p));
    out
}

fn branch_order(plan: &PlanDag, chain: &[usize]) -> Vec<usize> {
    let mut frame_filters = Vec::new();
    let mut head = Vec::new();
    let mut projectors = Vec::new();
    let mut filters = Vec::new();
    let mut tracked = false;
    for &id in chain {
        match &plan.ops[id].kind {
            OpKind::FrameFilter { .. } => frame_filters.push(id),
            OpKind::ObjectDetector { .. } => head.push(id),
            OpKind::ObjectTracker { .. } => {
                tracked = true;
                head.push(id);
            }
            OpKind::VObjProjector { history: true, .. } => head.push(id),
            OpKind::VObjProjector { .. } => projectors.push(id),
            OpKind::VObjFilter { .. } => filters.push(id),
            _ => head.push(id),
        }
    }
    let binding = plan.ops[chain[0]].kind.binding().unwrap_or_default().to_string();
    let spec = plan.bindings.get(&binding);
    let body = filter_slots(
        plan,
        &projectors,
        &filters,
        |k| match k {
            OpKind::VObjProjector { property, .. } => Some(property.clone()),
            _ => None,
        },
        |k| match k {
            OpKind::VObjFilter { conjuncts, .. } => {
                let names: Vec<String> = conjuncts.iter().flat_map(|c| c.refs()).map(|r| r.name.clone()).collect();
                spec.map(|s| s.closure(&names)).unwrap_or(names).into_iter().collect()
            }
            _ => BTreeSet::new(),
        },
    );
    let mut out = Vec::new();
    if tracked {
        out.extend(&head);
        out.extend(&frame_filters);
    } else {
        out.extend(&frame_filters);
        out.extend(&head);
    }
    out.extend(body);
    out
}

fn tuple_order(plan: &PlanDag, chain: &[usize]) -> Vec<usize> {
    // Stateful projectors record history for every tuple, so no filter may
    // precede them.
    let stateful = |id: usize| match &plan.ops[id].kind {
        OpKind::RelationProjector { relation, property, .. } => plan
            .relations
            .get(relation)
            .and_then(|r| r.properties.get(property))
            .is_some_and(|p| p.is_stateful()),
        _ => false,
    };
    let projectors: Vec<usize> = chain
        .iter()
        .copied()
        .filter(|&id| matches!(plan.ops[id].kind, OpKind::RelationProjector { .. }) && !stateful(id))
        .collect();
    let filters: Vec<usize> = chain
        .iter()
        .copied()
        .filter(|&id| matches!(plan.ops[id].kind, OpKind::RelationFilter { .. }))
        .collect();
    let body = filter_slots(
        plan,
        &projectors,
        &filters,
        |k| match k {
            OpKind::RelationProjector { relation, property, .. } => Some(format!("{relation}.{property}")),
            _ => None,
        },
        |k| match k {
            OpKind::RelationFilter { conjuncts, .. } => {
                let mut out = BTreeSet::new();
                for r in conjuncts.iter().flat_map(|c| c.refs()) {
                    let Some(b) = &r.binding else { continue };
                    if let Some(spec) = plan.relations.get(b) {
                        for p in spec.closure(std::slice::from_ref(&r.name)) {
                            out.insert(format!("{b}.{p}"));
                        }
                    }
                }
                out
            }
            _ => BTreeSet::new(),
        },
    );
    let mut out = vec![chain[0]];
    out.extend(chain.iter().copied().filter(|&id| stateful(id)));
    out.extend(body);
    out
}

fn fusible(k: &OpKind) -> Option<(u8, String)> {
    match k {
        OpKind::VObjProjector { binding, history: false, .. } | OpKind::VObjFilter { binding, .. } => {
            Some((0, binding.clone()))
        }
        OpKind::RelationProjector { unit, .. } | OpKind::RelationFilter { unit, .. } => Some((1, unit.clone())),
        _ => None,
    }
}

/// Merges maximal runs of adjacent same-branch projectors and filters into
/// single fused operators.
pub fn fuse_operators(plan: &PlanDag) -> PlanDag {
    let mut ops = plan.ops.clone();
    let mut removed: BTreeSet<usize> = BTreeSet::new();
    for chain in chains(plan) {
        let mut i = 0;
        while i < chain.len() {
            let Some(key) = fusible(&plan.ops[chain[i]].kind) else {
                i += 1;
                continue;
            };
            let mut j = i + 1;
            while j < chain.len() && fusible(&plan.ops[chain[j]].kind).as_ref() == Some(&key) {
                j += 1;
            }
            if j - i >= 2 {
                let run = &chain[i..j];
                let first = run[0];
                let last = *run.last().expect("run");
                ops[first].kind = OpKind::Fused { ops: run.iter().map(|&id| plan.ops[id].kind.clone()).collect() };
                ops[first].cost = run.iter().map(|&id| plan.ops[id].cost).sum();
                removed.extend(&run[1..]);
                for op in ops.iter_mut() {
                    for input in op.inputs.iter_mut() {
                        if *input == last {
                            *input = first;
                        }
                    }
                }
                ops[first].inputs = plan.ops[first].inputs.clone();
            }
            i = j;
        }
    }
    let kept: Vec<OpNode> = ops.into_iter().filter(|o| !removed.contains(&o.id)).collect();
    let order: Vec<usize> = kept.iter().map(|o| o.id).collect();
    renumber(plan, kept, &order)
}

/// Key under which conjunct statistics are recorded.
pub fn conjunct_key(conjuncts: &[crate::dsl::Expr]) -> String {
    conjuncts.iter().map(print_expr).collect::<Vec<_>>().join(" & ")
}

/// Sorts the filters inside each fused operator by ascending rank,
/// keeping declaration order for ties and unmeasured conjuncts.
pub fn order_conjuncts(plan: &PlanDag, stats: &BTreeMap<String, ConjunctStat>) -> PlanDag {
    let mut out = plan.clone();
    for op in out.ops.iter_mut() {
        let OpKind::Fused { ops } = &mut op.kind else { continue };
        let slots: Vec<usize> = ops
            .iter()
            .enumerate()
            .filter(|(_, k)| matches!(k, OpKind::VObjFilter { .. } | OpKind::RelationFilter { .. }))
            .map(|(i, _)| i)
            .collect();
        let mut filters: Vec<(f64, usize, OpKind)> = slots
            .iter()
            .map(|&i| {
                let key = match &ops[i] {
                    OpKind::VObjFilter { conjuncts, .. } | OpKind::RelationFilter { conjuncts, .. } => conjunct_key(conjuncts),
                    _ => unreachable!(),
                };
                let rank = stats.get(&key).map_or(f64::INFINITY, ConjunctStat::rank);
                (rank, i, ops[i].clone())
            })
            .collect();
        filters.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for (slot, (_, _, kind)) in slots.iter().zip(filters) {
            ops[*slot] = kind;
        }
    }
    out.seal();
    out
}
