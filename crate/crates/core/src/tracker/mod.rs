//! Kalman-filter tracker with IoU-gated greedy association.

pub mod kalman;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::datamodel::{BBox, Edge, EdgeKind, NodeId};
use crate::trace_io::FrameId;
pub use kalman::{predict, KalmanState};

#[derive(Debug, thiserror::Error)]
#[error("invalid tracker config: {0}")]
pub struct ConfigError(String);

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackerConfig {
    pub iou_threshold: f64,
    /// Frames a track survives without a match.
    pub max_age: u64,
    /// Matches before a track's continuations produce motion edges.
    pub min_hits: u32,
    pub process_noise: f64,
    pub measurement_noise: f64,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        TrackerConfig { iou_threshold: 0.3, max_age: 30, min_hits: 1, process_noise: 1.0, measurement_noise: 1.0 }
    }
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.iou_threshold > 0.0 && self.iou_threshold < 1.0) {
            return Err(ConfigError(format!("iou_threshold {} outside (0, 1)", self.iou_threshold)));
        }
        if self.max_age == 0 || self.min_hits == 0 {
            return Err(ConfigError("max_age and min_hits must be positive".into()));
        }
        if !(self.process_noise > 0.0 && self.measurement_noise > 0.0) {
            return Err(ConfigError("noise scales must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Association {
    pub matches: Vec<(usize, usize)>,
    pub unmatched_tracks: Vec<usize>,
    pub unmatched_detections: Vec<usize>,
}

/// Greedy matching on an IoU matrix (`iou[track][detection]`): repeatedly
/// take the highest remaining pair at or above the threshold. Ties go to
/// the lower track index, then the lower detection index.
pub fn associate_matrix(iou: &[Vec<f64>], n_detections: usize, threshold: f64) -> Association {
    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for (t, row) in iou.iter().enumerate() {
        for (d, &v) in row.iter().enumerate() {
            if v >= threshold {
                pairs.push((v, t, d));
            }
        }
    }
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut track_used = vec![false; iou.len()];
    let mut det_used = vec![false; n_detections];
    let mut matches = Vec::new();
    for (_, t, d) in pairs {
        if !track_used[t] && !det_used[d] {
            track_used[t] = true;
            det_used[d] = true;
            matches.push((t, d));
        }
    }
    matches.sort_unstable();
    Association {
        matches,
        unmatched_tracks: (0..iou.len()).filter(|t| !track_used[*t]).collect(),
        unmatched_detections: (0..n_detections).filter(|d| !det_used[*d]).collect(),
    }
}

pub fn associate(tracks: &[BBox], detections: &[BBox], threshold: f64) -> Association {
    let iou: Vec<Vec<f64>> = tracks.iter().map(|t| detections.iter().map(|d| t.iou(d)).collect()).collect();
    associate_matrix(&iou, detections.len(), threshold)
}

#[derive(Clone, Debug)]
struct LiveTrack {
    id: u64,
    state: KalmanState,
    hits: u32,
    since_update: u64,
    last_node: NodeId,
    last_frame: FrameId,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepOutput {
    /// Track id for every input detection, in input order.
    pub assignments: Vec<(NodeId, u64)>,
    pub motion_edges: Vec<Edge>,
    pub retired: Vec<u64>,
}

/// Tracker for one VObj type; ids start at 0.
#[derive(Clone, Debug)]
pub struct Tracker {
    config: TrackerConfig,
    tracks: Vec<LiveTrack>,
    next_id: u64,
    last_frame: Option<FrameId>,
}

impl Tracker {
    pub fn new(config: TrackerConfig) -> Self {
        Tracker { config, tracks: Vec::new(), next_id: 0, last_frame: None }
    }

    pub fn config(&self) -> &TrackerConfig {
        &self.config
    }

    pub fn live_tracks(&self) -> usize {
        self.tracks.len()
    }

    /// Processes the detections of one frame. Frames must arrive in
    /// increasing order; skipped frames advance the motion model once each.
    pub fn step(&mut self, frame: FrameId, detections: &[(NodeId, BBox)]) -> StepOutput {
        let elapsed = self.last_frame.map_or(1, |last| frame.saturating_sub(last).max(1));
        self.last_frame = Some(frame);
        for t in &mut self.tracks {
            for _ in 0..elapsed {
                t.state = predict(&t.state, self.config.process_noise);
            }
            t.since_update += elapsed;
        }
        let predicted: Vec<BBox> = self.tracks.iter().map(|t| t.state.to_bbox()).collect();
        let boxes: Vec<BBox> = detections.iter().map(|(_, b)| *b).collect();
        let assoc = associate(&predicted, &boxes, self.config.iou_threshold);

        let mut out = StepOutput::default();
        let mut ids: BTreeMap<usize, u64> = BTreeMap::new();
        for &(t, d) in &assoc.matches {
            let track = &mut self.tracks[t];
            let (node, bbox) = detections[d];
            track.state.update(&bbox, self.config.measurement_noise);
            track.hits += 1;
            track.since_update = 0;
            if track.hits >= self.config.min_hits && track.last_frame + 1 == frame {
                out.motion_edges.push(Edge::new(EdgeKind::Motion, track.last_node, node));
            }
            track.last_node = node;
            track.last_frame = frame;
            ids.insert(d, track.id);
        }
        for &d in &assoc.unmatched_detections {
            let (node, bbox) = detections[d];
            let id = self.next_id;
            self.next_id += 1;
            self.tracks.push(LiveTrack {
                id,
                state: KalmanState::from_bbox(&bbox),
                hits: 1,
                since_update: 0,
                last_node: node,
                last_frame: frame,
            });
            ids.insert(d, id);
        }
        let max_age = self.config.max_age;
        self.tracks.retain(|t| {
            let keep = t.since_update <= max_age;
            if !keep {
                out.retired.push(t.id);
            }
            keep
        });
        out.assignments = detections.iter().enumerate().map(|(i, (node, _))| (*node, ids[&i])).collect();
        out
    }
}

/// Number of times an object's assigned track id changes between
/// consecutive observations. Input pairs are (true identity, track id) in
/// frame order.
pub fn id_switches(observations: impl IntoIterator<Item = (u64, u64)>) -> usize {
    let mut last: BTreeMap<u64, u64> = BTreeMap::new();
    let mut switches = 0;
    for (truth, track) in observations {
        if let Some(prev) = last.insert(truth, track) {
            if prev != track {
                switches += 1;
            }
        }
    }
    switches
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeSet;

    use proptest::prelude::*;

    use super::*;

    fn moving_box(x0: f64, y0: f64, vx: f64, vy: f64, t: u64) -> BBox {
        let (x, y) = (x0 + vx * t as f64, y0 + vy * t as f64);
        BBox::new(x, y, x + 20.0, y + 20.0)
    }

    #[test]
    fn identical_sets_match_perfectly() {
        let b = [BBox::new(0.0, 0.0, 10.0, 10.0), BBox::new(50.0, 0.0, 60.0, 10.0)];
        let a = associate(&b, &b, 0.3);
        assert_eq!(a.matches, vec![(0, 0), (1, 1)]);
        assert!(a.unmatched_tracks.is_empty() && a.unmatched_detections.is_empty());
    }

    #[test]
    fn disjoint_sets_match_nothing() {
        let a = associate(&[BBox::new(0.0, 0.0, 10.0, 10.0)], &[BBox::new(50.0, 0.0, 60.0, 10.0)], 0.3);
        assert!(a.matches.is_empty());
        assert_eq!((a.unmatched_tracks, a.unmatched_detections), (vec![0], vec![0]));
    }

    /// Brute force over every injective assignment: greedy must equal the
    /// result of repeatedly taking the global maximum.
    #[test]
    fn greedy_matrix_example() {
        let iou = vec![vec![0.9, 0.3], vec![0.4, 0.8]];
        let a = associate_matrix(&iou, 2, 0.5);
        assert_eq!(a.matches, vec![(0, 0), (1, 1)]);
        let a = associate_matrix(&iou, 2, 0.85);
        assert_eq!(a.matches, vec![(0, 0)]);
        assert_eq!(a.unmatched_tracks, vec![1]);
    }

    #[test]
    fn linear_object_yields_one_track() {
        let mut tr = Tracker::new(TrackerConfig::default());
        let mut ids = BTreeSet::new();
        let mut edges = 0;
        for f in 0..10 {
            let out = tr.step(f, &[(NodeId::new(f, 0), moving_box(10.0, 10.0, 3.0, 1.0, f))]);
            ids.extend(out.assignments.iter().map(|(_, id)| *id));
            edges += out.motion_edges.len();
        }
        assert_eq!(ids.len(), 1);
        assert_eq!(edges, 9);
    }

    #[test]
    fn one_frame_dropout_keeps_id() {
        let config = TrackerConfig { max_age: 3, ..Default::default() };
        let mut tr = Tracker::new(config);
        let mut seen = Vec::new();
        for f in 0..12 {
            if f == 6 {
                tr.step(f, &[]);
                continue;
            }
            let out = tr.step(f, &[(NodeId::new(f, 0), moving_box(10.0, 10.0, 4.0, 0.0, f))]);
            seen.push(out.assignments[0].1);
        }
        assert!(seen.iter().all(|id| *id == seen[0]), "{seen:?}");
    }

    #[test]
    fn retired_after_max_age() {
        let mut tr = Tracker::new(TrackerConfig { max_age: 2, ..Default::default() });
        tr.step(0, &[(NodeId::new(0, 0), BBox::new(0.0, 0.0, 10.0, 10.0))]);
        tr.step(1, &[]);
        tr.step(2, &[]);
        let out = tr.step(3, &[]);
        assert_eq!(out.retired, vec![0]);
        let out = tr.step(4, &[(NodeId::new(4, 0), BBox::new(0.0, 0.0, 10.0, 10.0))]);
        assert_eq!(out.assignments[0].1, 1);
    }

    #[test]
    fn separated_objects_keep_distinct_ids() {
        let mut tr = Tracker::new(TrackerConfig::default());
        let mut obs = Vec::new();
        for f in 0..30 {
            let dets: Vec<(NodeId, BBox)> = (0..2)
                .map(|i| (NodeId::new(f, i), moving_box(10.0, 10.0 + 100.0 * i as f64, 2.0, 0.0, f)))
                .collect();
            let out = tr.step(f, &dets);
            obs.extend(out.assignments.iter().map(|(n, id)| (n.index as u64, *id)));
        }
        assert_eq!(id_switches(obs.iter().copied()), 0);
        assert_eq!(obs.iter().map(|o| o.1).collect::<BTreeSet<_>>().len(), 2);
    }

    proptest! {
        #[test]
        fn association_is_a_partial_matching(
            iou in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 0..6), 0..6),
            thr in 0.05f64..0.95,
        ) {
            let n_det = iou.iter().map(Vec::len).max().unwrap_or(0);
            let iou: Vec<Vec<f64>> = iou.into_iter().map(|mut r| { r.resize(n_det, 0.0); r }).collect();
            let a = associate_matrix(&iou, n_det, thr);
            let ts: BTreeSet<usize> = a.matches.iter().map(|m| m.0).collect();
            let ds: BTreeSet<usize> = a.matches.iter().map(|m| m.1).collect();
            prop_assert_eq!(ts.len(), a.matches.len());
            prop_assert_eq!(ds.len(), a.matches.len());
            for &(t, d) in &a.matches {
                prop_assert!(iou[t][d] >= thr);
            }
            prop_assert_eq!(a.matches.len() + a.unmatched_tracks.len(), iou.len());
            prop_assert_eq!(a.matches.len() + a.unmatched_detections.len(), n_det);
        }
    }
}
