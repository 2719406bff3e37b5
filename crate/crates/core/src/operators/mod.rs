//! Physical operators: frame filters, detection, tracking, projection,
//! filtering, joins, relation evaluation and higher-order evaluators.

mod eval;
mod higher_order;
mod runtime;

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

pub use eval::{compare, eval_expr, materialize, node_property, window_key, BindingRt, RelationRt, Truth, TupleView};
pub use higher_order::{
    duration_firings, run_ends, run_starts, temporal_witnesses, DurationTracker, VideoAggregator,
};
pub use runtime::{OpError, Operator, TupleRt};

use crate::datamodel::{Edge, FrameGraph, NodeId};
use crate::trace_io::{FrameId, TraceRecord};

/// Data passed between operators for one batch.
#[derive(Clone, Debug, PartialEq)]
pub enum Flow {
    /// Alive frames before detection.
    Frames(BTreeMap<FrameId, Arc<TraceRecord>>),
    /// Nodes of one VObj binding.
    Branch(FrameGraph),
    /// Candidate binding tuples after a join or at a sink.
    Tuples(TupleSet),
    /// Frames on which a higher-order query occurs.
    Occurrences(BTreeSet<FrameId>),
}

impl Flow {
    pub fn frames(&self) -> BTreeSet<FrameId> {
        match self {
            Flow::Frames(f) => f.keys().copied().collect(),
            Flow::Branch(g) => g.frames.keys().copied().collect(),
            Flow::Tuples(t) => t.frames.keys().copied().collect(),
            Flow::Occurrences(o) => o.clone(),
        }
    }
}

/// Per-binding node graphs plus the tuples that still satisfy the query.
///
/// Each binding keeps its own graph so the same detection may appear under
/// two bindings with different track histories.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TupleSet {
    pub frames: BTreeMap<FrameId, Arc<TraceRecord>>,
    /// Tuple layout.
    pub bindings: Vec<String>,
    pub branches: BTreeMap<String, FrameGraph>,
    pub tuples: BTreeMap<FrameId, Vec<Vec<NodeId>>>,
    pub edges: BTreeMap<(String, Vec<NodeId>), Edge>,
}

impl TupleSet {
    /// Frames kept iff every branch has a node there; tuples are the
    /// cartesian product of the branches' nodes in binding order.
    pub fn join(branches: Vec<(String, FrameGraph)>) -> TupleSet {
        let bindings: Vec<String> = branches.iter().map(|(b, _)| b.clone()).collect();
        let mut frames: BTreeMap<FrameId, Arc<TraceRecord>> = BTreeMap::new();
        if let Some((_, first)) = branches.first() {
            for (f, rec) in &first.frames {
                if branches.iter().all(|(_, g)| g.frames.contains_key(f) && g.nodes_in_frame(*f).next().is_some()) {
                    frames.insert(*f, rec.clone());
                }
            }
        }
        let mut tuples = BTreeMap::new();
        for f in frames.keys() {
            let mut acc: Vec<Vec<NodeId>> = vec![Vec::new()];
            for (_, g) in &branches {
                let ids = g.node_ids_in_frame(*f);
                acc = acc
                    .iter()
                    .flat_map(|prefix| {
                        ids.iter().map(move |id| {
                            let mut t = prefix.clone();
                            t.push(*id);
                            t
                        })
                    })
                    .collect();
            }
            tuples.insert(*f, acc);
        }
        let mut graphs = BTreeMap::new();
        for (b, mut g) in branches {
            let dead: Vec<FrameId> = g.frames.keys().filter(|f| !frames.contains_key(f)).copied().collect();
            for f in dead {
                g.remove_frame(f);
            }
            graphs.insert(b, g);
        }
        TupleSet { frames, bindings, branches: graphs, tuples, edges: BTreeMap::new() }
    }

    /// Single-binding view: one tuple per node.
    pub fn from_branch(binding: &str, graph: FrameGraph) -> TupleSet {
        let mut tuples = BTreeMap::new();
        for f in graph.frames.keys() {
            let ids = graph.node_ids_in_frame(*f);
            if !ids.is_empty() {
                tuples.insert(*f, ids.into_iter().map(|id| vec![id]).collect());
            }
        }
        let frames = graph.frames.iter().filter(|(f, _)| tuples.contains_key(*f)).map(|(f, r)| (*f, r.clone())).collect();
        TupleSet {
            frames,
            bindings: vec![binding.to_string()],
            branches: BTreeMap::from([(binding.to_string(), graph)]),
            tuples,
            edges: BTreeMap::new(),
        }
    }

    /// Drops frames left without tuples.
    pub fn prune(&mut self) {
        self.tuples.retain(|_, ts| !ts.is_empty());
        let tuples = &self.tuples;
        self.frames.retain(|f, _| tuples.contains_key(f));
    }
}
