use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write as _};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{BBox, Value};
use crate::trace_io::{FrameBatch, FrameId, TraceRecord};

/// Detection index reserved for the per-frame scene node.
pub const SCENE_INDEX: u32 = u32::MAX;

/// `(frame, per-frame detection index)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NodeId {
    pub frame: FrameId,
    pub index: u32,
}

impl NodeId {
    pub fn new(frame: FrameId, index: u32) -> Self {
        NodeId { frame, index }
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.index == SCENE_INDEX {
            write!(f, "f{}.scene", self.frame)
        } else {
            write!(f, "f{}.{}", self.frame, self.index)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VObjInstance {
    pub node_id: NodeId,
    /// Declared VObj type this node was detected as.
    pub class_name: String,
    /// Raw class label from the trace.
    pub detected_class: String,
    pub frame_id: FrameId,
    pub bbox: BBox,
    pub score: f64,
    pub track_id: Option<u64>,
    pub attrs: BTreeMap<String, Value>,
    pub properties: BTreeMap<String, Value>,
    /// Window snapshots of stateful dependencies, one entry per dependency,
    /// recorded by the stateful projector for deferred evaluation.
    pub windows: BTreeMap<String, Vec<Value>>,
}

impl VObjInstance {
    pub fn new(node_id: NodeId, class_name: &str, detected_class: &str, bbox: BBox, score: f64) -> Self {
        VObjInstance {
            node_id,
            class_name: class_name.to_string(),
            detected_class: detected_class.to_string(),
            frame_id: node_id.frame,
            bbox,
            score,
            track_id: None,
            attrs: BTreeMap::new(),
            properties: BTreeMap::new(),
            windows: BTreeMap::new(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum EdgeKind {
    Motion,
    SpatialRelation,
    DurationRelation { max_frames: u64 },
    TemporalRelation,
}

impl fmt::Display for EdgeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EdgeKind::Motion => f.write_str("motion"),
            EdgeKind::SpatialRelation => f.write_str("spatial"),
            EdgeKind::DurationRelation { max_frames } => write!(f, "duration<={max_frames}"),
            EdgeKind::TemporalRelation => f.write_str("temporal"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Edge {
    pub kind: EdgeKind,
    pub from: NodeId,
    pub to: NodeId,
    /// All participants in order; `[from, to]` for binary edges.
    pub participants: Vec<NodeId>,
    /// Relation binding that produced the edge, if any.
    pub relation: Option<String>,
    pub properties: BTreeMap<String, Value>,
    pub windows: BTreeMap<String, Vec<Value>>,
}

impl Edge {
    pub fn new(kind: EdgeKind, from: NodeId, to: NodeId) -> Self {
        Edge {
            kind,
            from,
            to,
            participants: vec![from, to],
            relation: None,
            properties: BTreeMap::new(),
            windows: BTreeMap::new(),
        }
    }

    pub fn relation(relation: &str, participants: Vec<NodeId>) -> Self {
        let from = participants[0];
        let to = *participants.last().expect("relation edge has participants");
        Edge {
            kind: EdgeKind::SpatialRelation,
            from,
            to,
            participants,
            relation: Some(relation.to_string()),
            properties: BTreeMap::new(),
            windows: BTreeMap::new(),
        }
    }

    fn key(&self) -> (Option<&str>, &[NodeId], String) {
        (self.relation.as_deref(), &self.participants, self.kind.to_string())
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum GraphError {
    #[error("frame ranges differ: {0:?} vs {1:?}")]
    RangeMismatch((FrameId, FrameId), (FrameId, FrameId)),
    #[error("merge conflict on {node} property `{property}`: {left} vs {right}")]
    MergeConflict { node: NodeId, property: String, left: Value, right: Value },
    #[error("edge {from} -> {to} references a missing node")]
    DanglingEdge { from: NodeId, to: NodeId },
    #[error("invalid {kind} edge {from} -> {to}: {reason}")]
    InvalidEdge { kind: EdgeKind, from: NodeId, to: NodeId, reason: String },
    #[error("node {0} lies outside the graph's frames")]
    OrphanNode(NodeId),
}

/// Graph of VObj nodes and their relationships for one batch of frames.
///
/// `frames` holds the raw records of frames still alive in the pipeline;
/// filters drop frames by removing them here.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FrameGraph {
    pub frame_range: (FrameId, FrameId),
    pub frames: BTreeMap<FrameId, Arc<TraceRecord>>,
    pub nodes: BTreeMap<NodeId, VObjInstance>,
    pub edges: Vec<Edge>,
    /// Binding name to member nodes, assigned at join/sink time.
    pub bindings: BTreeMap<String, BTreeSet<NodeId>>,
    /// Satisfying binding tuples per frame, set by a query sink.
    pub matches: BTreeMap<FrameId, Vec<Vec<NodeId>>>,
}

impl FrameGraph {
    pub fn empty(frame_range: (FrameId, FrameId)) -> Self {
        FrameGraph { frame_range, ..Default::default() }
    }

    pub fn from_batch(batch: &FrameBatch) -> Self {
        let first = batch.first_frame().unwrap_or(0);
        let last = batch.last_frame().unwrap_or(0);
        let frames = batch.records.iter().map(|r| (r.frame_id, Arc::new(r.clone()))).collect();
        FrameGraph { frame_range: (first, last), frames, ..Default::default() }
    }

    pub fn add_node(&mut self, node: VObjInstance) {
        self.nodes.insert(node.node_id, node);
    }

    pub fn nodes_in_frame(&self, frame: FrameId) -> impl Iterator<Item = &VObjInstance> {
        self.nodes
            .range(NodeId::new(frame, 0)..=NodeId::new(frame, u32::MAX))
            .map(|(_, n)| n)
    }

    pub fn node_ids_in_frame(&self, frame: FrameId) -> Vec<NodeId> {
        self.nodes_in_frame(frame).map(|n| n.node_id).collect()
    }

    /// Removes a node together with its edges and binding memberships.
    pub fn remove_node(&mut self, id: NodeId) {
        self.nodes.remove(&id);
        self.edges.retain(|e| !e.participants.contains(&id));
        for members in self.bindings.values_mut() {
            members.remove(&id);
        }
    }

    /// Drops a frame and everything living on it.
    pub fn remove_frame(&mut self, frame: FrameId) {
        self.frames.remove(&frame);
        let ids = self.node_ids_in_frame(frame);
        for id in &ids {
            self.nodes.remove(id);
        }
        self.edges.retain(|e| e.participants.iter().all(|p| p.frame != frame));
        for members in self.bindings.values_mut() {
            for id in &ids {
                members.remove(id);
            }
        }
        self.matches.remove(&frame);
    }

    pub fn binding_nodes_in_frame(&self, binding: &str, frame: FrameId) -> Vec<NodeId> {
        match self.bindings.get(binding) {
            Some(members) => members
                .range(NodeId::new(frame, 0)..=NodeId::new(frame, u32::MAX))
                .copied()
                .collect(),
            None => Vec::new(),
        }
    }

    /// Node/edge union with node-id deduplication.
    pub fn merge(&self, other: &FrameGraph) -> Result<FrameGraph, GraphError> {
        if self.frame_range != other.frame_range && !self.frames.is_empty() && !other.frames.is_empty() {
            return Err(GraphError::RangeMismatch(self.frame_range, other.frame_range));
        }
        let mut out = self.clone();
        if out.frames.is_empty() && out.nodes.is_empty() {
            out.frame_range = other.frame_range;
        }
        for (frame, record) in &other.frames {
            out.frames.entry(*frame).or_insert_with(|| record.clone());
        }
        for (id, node) in &other.nodes {
            match out.nodes.get_mut(id) {
                None => {
                    out.nodes.insert(*id, node.clone());
                }
                Some(existing) => merge_node(existing, node)?,
            }
        }
        for edge in &other.edges {
            match out.edges.iter_mut().find(|e| e.key() == edge.key()) {
                None => out.edges.push(edge.clone()),
                Some(existing) => {
                    for (k, v) in &edge.properties {
                        match existing.properties.get(k) {
                            Some(old) if old != v => {
                                return Err(GraphError::MergeConflict {
                                    node: edge.from,
                                    property: k.clone(),
                                    left: old.clone(),
                                    right: v.clone(),
                                })
                            }
                            Some(_) => {}
                            None => {
                                existing.properties.insert(k.clone(), v.clone());
                            }
                        }
                    }
                }
            }
        }
        for (binding, members) in &other.bindings {
            out.bindings.entry(binding.clone()).or_default().extend(members.iter().copied());
        }
        for (frame, tuples) in &other.matches {
            let entry = out.matches.entry(*frame).or_default();
            for t in tuples {
                if !entry.contains(t) {
                    entry.push(t.clone());
                }
            }
        }
        Ok(out)
    }

    /// Structural check of node placement and every edge-kind invariant.
    pub fn validate(&self) -> Result<(), GraphError> {
        for id in self.nodes.keys() {
            if !self.frames.contains_key(&id.frame) {
                return Err(GraphError::OrphanNode(*id));
            }
        }
        for e in &self.edges {
            let endpoints: Option<Vec<&VObjInstance>> = e.participants.iter().map(|p| self.nodes.get(p)).collect();
            let Some(endpoints) = endpoints else {
                return Err(GraphError::DanglingEdge { from: e.from, to: e.to });
            };
            let (a, b) = (endpoints[0], endpoints[endpoints.len() - 1]);
            let bad = |reason: &str| GraphError::InvalidEdge {
                kind: e.kind,
                from: e.from,
                to: e.to,
                reason: reason.to_string(),
            };
            match e.kind {
                EdgeKind::Motion => {
                    if a.track_id.is_none() || a.track_id != b.track_id {
                        return Err(bad("endpoints carry different track ids"));
                    }
                    if b.frame_id != a.frame_id + 1 {
                        return Err(bad("endpoints are not in consecutive frames"));
                    }
                }
                EdgeKind::SpatialRelation => {
                    if endpoints.iter().any(|n| n.frame_id != a.frame_id) {
                        return Err(bad("endpoints are in different frames"));
                    }
                }
                EdgeKind::TemporalRelation => {
                    if a.frame_id >= b.frame_id {
                        return Err(bad("source frame does not precede target frame"));
                    }
                }
                EdgeKind::DurationRelation { max_frames } => {
                    if a.frame_id.abs_diff(b.frame_id) > max_frames {
                        return Err(bad("frame distance exceeds the time constraint"));
                    }
                }
            }
        }
        Ok(())
    }

    /// Graph-description text used for golden tests and debugging.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "graph frames={}..={} alive={}", self.frame_range.0, self.frame_range.1, self.frames.len());
        for n in self.nodes.values() {
            let _ = write!(out, "  node {} {}", n.node_id, n.class_name);
            if let Some(t) = n.track_id {
                let _ = write!(out, " track={t}");
            }
            for (k, v) in &n.properties {
                let _ = write!(out, " {k}={v}");
            }
            out.push('\n');
        }
        for e in &self.edges {
            let _ = write!(out, "  edge {} {} -> {}", e.kind, e.from, e.to);
            if let Some(r) = &e.relation {
                let _ = write!(out, " rel={r}");
            }
            for (k, v) in &e.properties {
                let _ = write!(out, " {k}={v}");
            }
            out.push('\n');
        }
        out
    }
}

fn merge_node(existing: &mut VObjInstance, incoming: &VObjInstance) -> Result<(), GraphError> {
    match (existing.track_id, incoming.track_id) {
        (Some(a), Some(b)) if a != b => {
            return Err(GraphError::MergeConflict {
                node: existing.node_id,
                property: "track_id".into(),
                left: Value::Num(a as f64),
                right: Value::Num(b as f64),
            })
        }
        (None, Some(b)) => existing.track_id = Some(b),
        _ => {}
    }
    for (k, v) in &incoming.properties {
        match existing.properties.get(k) {
            Some(old) if old != v => {
                return Err(GraphError::MergeConflict {
                    node: existing.node_id,
                    property: k.clone(),
                    left: old.clone(),
                    right: v.clone(),
                })
            }
            Some(_) => {}
            None => {
                existing.properties.insert(k.clone(), v.clone());
            }
        }
    }
    for (k, w) in &incoming.windows {
        existing.windows.entry(k.clone()).or_insert_with(|| w.clone());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn graph(frames: &[u64], nodes: &[(u64, u32)]) -> FrameGraph {
        let mut g = FrameGraph::empty((0, 9));
        for f in frames {
            g.frames.insert(*f, Arc::new(TraceRecord::empty(*f)));
        }
        for (f, i) in nodes {
            g.add_node(VObjInstance::new(NodeId::new(*f, *i), "Car", "car", BBox::new(0.0, 0.0, 1.0, 1.0), 1.0));
        }
        g
    }

    #[test]
    fn merge_identity_and_union() {
        let g = graph(&[0, 1], &[(0, 0), (1, 0)]);
        let empty = FrameGraph::empty((0, 9));
        assert_eq!(g.merge(&empty).unwrap(), g);
        let h = graph(&[0, 1], &[(0, 1), (1, 1), (1, 2)]);
        assert_eq!(g.merge(&h).unwrap().nodes.len(), 5);
    }

    #[test]
    fn merge_same_property_is_idempotent() {
        let mut g = graph(&[0], &[(0, 0)]);
        g.nodes.get_mut(&NodeId::new(0, 0)).unwrap().properties.insert("color".into(), "red".into());
        let merged = g.merge(&g.clone()).unwrap();
        assert_eq!(merged.nodes.len(), 1);
        assert_eq!(merged.nodes[&NodeId::new(0, 0)].properties["color"], Value::from("red"));
    }

    #[test]
    fn merge_conflict_is_an_error() {
        let mut g = graph(&[0], &[(0, 0)]);
        let mut h = g.clone();
        g.nodes.get_mut(&NodeId::new(0, 0)).unwrap().properties.insert("color".into(), "red".into());
        h.nodes.get_mut(&NodeId::new(0, 0)).unwrap().properties.insert("color".into(), "blue".into());
        assert!(matches!(g.merge(&h), Err(GraphError::MergeConflict { .. })));
    }

    #[test]
    fn validator_checks_edge_kinds() {
        let mut g = graph(&[0, 1, 2], &[(0, 0), (1, 0), (2, 0), (0, 1)]);
        for id in [NodeId::new(0, 0), NodeId::new(1, 0), NodeId::new(2, 0)] {
            g.nodes.get_mut(&id).unwrap().track_id = Some(3);
        }
        g.edges.push(Edge::new(EdgeKind::Motion, NodeId::new(0, 0), NodeId::new(1, 0)));
        g.edges.push(Edge::relation("near", vec![NodeId::new(0, 0), NodeId::new(0, 1)]));
        g.edges.push(Edge::new(EdgeKind::TemporalRelation, NodeId::new(0, 1), NodeId::new(2, 0)));
        g.edges.push(Edge::new(EdgeKind::DurationRelation { max_frames: 2 }, NodeId::new(0, 0), NodeId::new(2, 0)));
        assert!(g.validate().is_ok());

        let mut bad = g.clone();
        bad.edges.push(Edge::new(EdgeKind::Motion, NodeId::new(0, 0), NodeId::new(2, 0)));
        assert!(bad.validate().is_err());
        let mut bad = g.clone();
        bad.edges.push(Edge::relation("near", vec![NodeId::new(0, 0), NodeId::new(1, 0)]));
        assert!(bad.validate().is_err());
        let mut bad = g.clone();
        bad.edges.push(Edge::new(EdgeKind::TemporalRelation, NodeId::new(2, 0), NodeId::new(0, 0)));
        assert!(bad.validate().is_err());
        let mut bad = g.clone();
        bad.edges.push(Edge::new(EdgeKind::Motion, NodeId::new(0, 0), NodeId::new(5, 0)));
        assert!(matches!(bad.validate(), Err(GraphError::DanglingEdge { .. })));
    }

    #[test]
    fn remove_frame_drops_nodes_and_edges() {
        let mut g = graph(&[0, 1], &[(0, 0), (0, 1), (1, 0)]);
        g.edges.push(Edge::relation("near", vec![NodeId::new(0, 0), NodeId::new(0, 1)]));
        g.remove_frame(0);
        assert_eq!(g.nodes.len(), 1);
        assert!(g.edges.is_empty());
        assert!(g.validate().is_ok());
    }

    #[test]
    fn dump_lists_nodes_and_edges() {
        let mut g = graph(&[0], &[(0, 0), (0, 1)]);
        g.edges.push(Edge::relation("near", vec![NodeId::new(0, 0), NodeId::new(0, 1)]));
        let text = g.dump();
        assert!(text.contains("node f0.0 Car"));
        assert!(text.contains("edge spatial f0.0 -> f0.1 rel=near"));
    }
}
