//! Object-centric data model: VObj instances, edges between them, the
//! per-batch frame graph, and per-track property histories.

mod graph;
mod track;
mod value;

pub use graph::{Edge, EdgeKind, FrameGraph, GraphError, NodeId, VObjInstance, SCENE_INDEX};
pub use track::{SchemaError, Track};
pub use value::{BBox, Value, ValueType};
