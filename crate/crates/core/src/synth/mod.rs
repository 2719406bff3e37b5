//! Synthetic worlds: objects moving along known trajectories, rendered into
//! noisy detection traces with exact ground truth.
//!
//! Nothing here calls into the engine; labels are computed from the world
//! definition directly.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datamodel::{BBox, Value};
use crate::registry::{mix_seed, unit_draw};
use crate::trace_io::{save_trace, Detection, FrameId, GroundTruth, TraceError, TraceRecord, TruthObject, TruthRecord, VideoMeta};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid world: {0}")]
    Spec(String),
    #[error("object {object} leaves the frame at frame {frame} without declaring an exit")]
    OutOfBounds { object: usize, frame: FrameId },
    #[error("label query not expressible over this world: {0}")]
    Unsupported(String),
    #[error(transparent)]
    Io(#[from] TraceError),
    #[error("{0}")]
    File(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Trajectory {
    /// Constant velocity in pixels per frame.
    Linear { velocity: (f64, f64) },
    /// Two linear segments; `after` applies from `turn_at` frames after entry.
    Turn { velocity: (f64, f64), turn_at: u64, after: (f64, f64) },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub class: String,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub attrs: BTreeMap<String, Value>,
    /// Box width and height.
    pub size: (f64, f64),
    /// Box center at the entry frame.
    pub start: (f64, f64),
    pub trajectory: Trajectory,
    /// First frame present.
    pub entry: FrameId,
    /// First frame absent; the object stays until the end when unset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exit: Option<FrameId>,
    #[serde(default = "default_score")]
    pub score: f64,
}

fn default_score() -> f64 {
    0.9
}

impl ObjectSpec {
    pub fn linear(class: &str, start: (f64, f64), velocity: (f64, f64), entry: FrameId, exit: Option<FrameId>) -> Self {
        ObjectSpec {
            class: class.to_string(),
            attrs: BTreeMap::new(),
            size: (20.0, 20.0),
            start,
            trajectory: Trajectory::Linear { velocity },
            entry,
            exit,
            score: default_score(),
        }
    }

    pub fn with_attr(mut self, key: &str, value: impl Into<Value>) -> Self {
        self.attrs.insert(key.to_string(), value.into());
        self
    }

    pub fn with_size(mut self, w: f64, h: f64) -> Self {
        self.size = (w, h);
        self
    }

    pub fn alive(&self, frame: FrameId, frames: FrameId) -> bool {
        frame >= self.entry && frame < self.exit.unwrap_or(frames)
    }

    /// Exact box center on `frame`.
    pub fn center(&self, frame: FrameId) -> (f64, f64) {
        let t = frame.saturating_sub(self.entry) as f64;
        match self.trajectory {
            Trajectory::Linear { velocity } => (self.start.0 + velocity.0 * t, self.start.1 + velocity.1 * t),
            Trajectory::Turn { velocity, turn_at, after } => {
                let t1 = t.min(turn_at as f64);
                let t2 = (t - turn_at as f64).max(0.0);
                (
                    self.start.0 + velocity.0 * t1 + after.0 * t2,
                    self.start.1 + velocity.1 * t1 + after.1 * t2,
                )
            }
        }
    }

    pub fn bbox(&self, frame: FrameId) -> BBox {
        let (cx, cy) = self.center(frame);
        BBox::from_center(cx, cy, self.size.0, self.size.1)
    }
}

/// Frames on which one object produces no detection.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dropout {
    pub object: usize,
    pub start: FrameId,
    pub len: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    /// Probability that a detection is missing.
    #[serde(default)]
    pub miss_rate: f64,
    /// Probability per frame of one spurious detection.
    #[serde(default)]
    pub false_rate: f64,
    /// Class of spurious detections.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub false_class: Option<String>,
    /// Maximum absolute bbox coordinate perturbation in pixels.
    #[serde(default)]
    pub jitter: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub dropouts: Vec<Dropout>,
}

/// A named frame interval with known ground truth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventSpec {
    pub name: String,
    pub start: FrameId,
    /// Inclusive.
    pub end: FrameId,
}

/// A constant channel value over an inclusive frame interval.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelSegment {
    pub start: FrameId,
    pub end: FrameId,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldSpec {
    pub frames: u64,
    #[serde(default = "default_fps")]
    pub fps: f64,
    pub width: u32,
    pub height: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub px_per_m: Option<f64>,
    pub objects: Vec<ObjectSpec>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub events: Vec<EventSpec>,
    /// Extra trace channels; `motion_score` is always derived from motion
    /// unless given here.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub channels: BTreeMap<String, Vec<ChannelSegment>>,
    #[serde(default)]
    pub noise: NoiseSpec,
    pub seed: u64,
}

fn default_fps() -> f64 {
    30.0
}

impl WorldSpec {
    pub fn new(frames: u64, width: u32, height: u32, seed: u64) -> Self {
        WorldSpec {
            frames,
            fps: default_fps(),
            width,
            height,
            px_per_m: None,
            objects: Vec::new(),
            events: Vec::new(),
            channels: BTreeMap::new(),
            noise: NoiseSpec::default(),
            seed,
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, SynthError> {
        let text = std::fs::read_to_string(path.as_ref())
            .map_err(|e| SynthError::File(format!("{}: {e}", path.as_ref().display())))?;
        serde_json::from_str(&text).map_err(|e| SynthError::Spec(format!("{}: {e}", path.as_ref().display())))
    }

    pub fn meta(&self) -> VideoMeta {
        VideoMeta { fps: self.fps, width: self.width, height: self.height, frame_count: self.frames, calibration: self.px_per_m }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        self.meta().validate().map_err(|e| SynthError::Spec(e.to_string()))?;
        let rate = |r: f64| (0.0..=1.0).contains(&r);
        if !rate(self.noise.miss_rate) || !rate(self.noise.false_rate) || self.noise.jitter < 0.0 {
            return Err(SynthError::Spec("noise rates must be in [0, 1] and jitter non-negative".into()));
        }
        for (i, o) in self.objects.iter().enumerate() {
            if !(o.size.0 > 0.0 && o.size.1 > 0.0) {
                return Err(SynthError::Spec(format!("object {i} has a non-positive size")));
            }
            if o.exit.is_some_and(|x| x <= o.entry) {
                return Err(SynthError::Spec(format!("object {i} exits before it enters")));
            }
            for f in (o.entry..o.exit.unwrap_or(self.frames)).take_while(|f| *f < self.frames) {
                let (cx, cy) = o.center(f);
                if cx < 0.0 || cy < 0.0 || cx > f64::from(self.width) || cy > f64::from(self.height) {
                    return Err(SynthError::OutOfBounds { object: i, frame: f });
                }
            }
        }
        for d in &self.noise.dropouts {
            if d.object >= self.objects.len() {
                return Err(SynthError::Spec(format!("dropout names unknown object {}", d.object)));
            }
        }
        Ok(())
    }

    fn dropped(&self, object: usize, frame: FrameId) -> bool {
        self.noise.dropouts.iter().any(|d| d.object == object && frame >= d.start && frame < d.start + d.len)
    }

    fn channel_value(&self, name: &str, frame: FrameId) -> Option<f64> {
        self.channels.get(name)?.iter().rev().find(|s| frame >= s.start && frame <= s.end).map(|s| s.value)
    }

    /// Total true displacement of the objects present on `frame` since the
    /// previous frame.
    fn motion(&self, frame: FrameId) -> f64 {
        self.objects
            .iter()
            .filter(|o| frame > 0 && o.alive(frame, self.frames) && o.alive(frame - 1, self.frames))
            .map(|o| {
                let (a, b) = (o.center(frame - 1), o.center(frame));
                ((b.0 - a.0).powi(2) + (b.1 - a.1).powi(2)).sqrt()
            })
            .sum()
    }
}

/// Maps a trace detection back to the object that produced it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Identity {
    pub frame: FrameId,
    pub index: u32,
    pub object: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct World {
    pub meta: VideoMeta,
    pub trace: Vec<TraceRecord>,
    /// Exact objects per frame.
    pub truth: GroundTruth,
    pub identities: Vec<Identity>,
}

impl World {
    /// Writes `trace.jsonl`, `meta.json`, `truth.jsonl` and `identities.json`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<(), SynthError> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| SynthError::File(format!("{}: {e}", dir.display())))?;
        save_trace(dir.join("trace.jsonl"), &self.trace)?;
        self.meta.save(dir.join("meta.json"))?;
        self.truth.save(dir.join("truth.jsonl"))?;
        let ids = serde_json::to_string_pretty(&self.identities).expect("identities serialize");
        std::fs::write(dir.join("identities.json"), ids + "\n")
            .map_err(|e| SynthError::File(format!("{}: {e}", dir.display())))?;
        Ok(())
    }

    /// True object id of a detection.
    pub fn object_of(&self, frame: FrameId, index: u32) -> Option<u64> {
        self.identities.iter().find(|i| i.frame == frame && i.index == index).map(|i| i.object)
    }
}

fn jitter(seed: u64, frame: FrameId, object: usize, k: u64, amount: f64) -> f64 {
    if amount == 0.0 {
        return 0.0;
    }
    (unit_draw(mix_seed(&[seed, frame, object as u64, k])) * 2.0 - 1.0) * amount
}

/// Renders the world into a trace. Detections on each frame are listed in
/// object order, followed by any spurious detection.
pub fn generate(spec: &WorldSpec) -> Result<World, SynthError> {
    spec.validate()?;
    let mut trace = Vec::with_capacity(spec.frames as usize);
    let mut truth = GroundTruth::new();
    let mut identities = Vec::new();
    let (w, h) = (f64::from(spec.width), f64::from(spec.height));
    for f in 0..spec.frames {
        let mut record = TraceRecord::empty(f);
        let mut objects = Vec::new();
        for (i, o) in spec.objects.iter().enumerate() {
            if !o.alive(f, spec.frames) {
                continue;
            }
            let exact = o.bbox(f);
            objects.push(TruthObject { id: i as u64, class_name: o.class.clone(), bbox: Some(exact), attrs: o.attrs.clone() });
            let missed = spec.noise.miss_rate > 0.0 && unit_draw(mix_seed(&[spec.seed, f, i as u64, 0x51])) < spec.noise.miss_rate;
            if missed || spec.dropped(i, f) {
                continue;
            }
            let j = |k| jitter(spec.seed, f, i, k, spec.noise.jitter);
            let bbox = BBox::new(exact.x1 + j(1), exact.y1 + j(2), exact.x2 + j(3), exact.y2 + j(4));
            let mut det = Detection::new(o.class.clone(), bbox, o.score);
            det.attrs = o.attrs.clone();
            identities.push(Identity { frame: f, index: record.detections.len() as u32, object: i as u64 });
            record.detections.push(det);
        }
        if spec.noise.false_rate > 0.0 && unit_draw(mix_seed(&[spec.seed, f, 0xFA])) < spec.noise.false_rate {
            let class = spec
                .noise
                .false_class
                .clone()
                .or_else(|| spec.objects.first().map(|o| o.class.clone()))
                .unwrap_or_else(|| "clutter".into());
            let cx = unit_draw(mix_seed(&[spec.seed, f, 0xFB])) * w;
            let cy = unit_draw(mix_seed(&[spec.seed, f, 0xFC])) * h;
            record.detections.push(Detection::new(class, BBox::from_center(cx, cy, 20.0, 20.0), 0.5));
        }
        record.channels.insert("motion_score".into(), spec.motion(f));
        for name in spec.channels.keys() {
            if let Some(v) = spec.channel_value(name, f) {
                record.channels.insert(name.clone(), v);
            }
        }
        truth.insert(TruthRecord { frame: f, label: None, objects: Some(objects) })?;
        trace.push(record);
    }
    Ok(World { meta: spec.meta(), trace, truth, identities })
}

/// Condition on a single object, evaluated on the exact world.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ObjectPredicate {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class: Option<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub attrs: BTreeMap<String, Value>,
    /// Dominant direction of motion over the last `window` frames.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub direction: Option<String>,
    /// Speed over the last `window` frames, in pixels per second.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min_speed: Option<f64>,
    #[serde(default = "default_window")]
    pub window: u64,
}

fn default_window() -> u64 {
    5
}

impl ObjectPredicate {
    pub fn class(class: &str) -> Self {
        ObjectPredicate { class: Some(class.to_string()), window: default_window(), ..Default::default() }
    }

    pub fn with_attr(mut self, key: &str, value: impl Into<Value>) -> Self {
        self.attrs.insert(key.to_string(), value.into());
        self
    }

    pub fn moving(mut self, direction: &str) -> Self {
        self.direction = Some(direction.to_string());
        self
    }

    fn holds(&self, spec: &WorldSpec, o: &ObjectSpec, frame: FrameId) -> bool {
        if self.class.as_ref().is_some_and(|c| *c != o.class) {
            return false;
        }
        if self.attrs.iter().any(|(k, v)| o.attrs.get(k) != Some(v)) {
            return false;
        }
        if self.direction.is_none() && self.min_speed.is_none() {
            return true;
        }
        let k = self.window;
        if frame + 1 < o.entry + k {
            return false;
        }
        let (a, b) = (o.center(frame + 1 - k), o.center(frame));
        let (dx, dy) = (b.0 - a.0, b.1 - a.1);
        if let Some(want) = &self.direction {
            let got = if dx.abs().max(dy.abs()) < 1.0 {
                "stationary"
            } else if dx.abs() >= dy.abs() {
                if dx > 0.0 {
                    "right"
                } else {
                    "left"
                }
            } else if dy > 0.0 {
                "down"
            } else {
                "up"
            };
            if got != want {
                return false;
            }
        }
        if let Some(min) = self.min_speed {
            let speed = (dx * dx + dy * dy).sqrt() * spec.fps / (k - 1) as f64;
            if speed <= min {
                return false;
            }
        }
        true
    }
}

/// Per-frame condition with a closed-form answer on the world.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LabelQuery {
    /// Some object satisfies the predicate.
    Object(ObjectPredicate),
    /// Two distinct objects satisfy `a` and `b` with centers within `max_px`.
    Near { a: ObjectPredicate, b: ObjectPredicate, max_px: f64 },
    /// A declared event is in progress.
    Event { name: String },
}

fn check_predicate(p: &ObjectPredicate) -> Result<(), SynthError> {
    if (p.direction.is_some() && p.window < 2) || (p.min_speed.is_some() && p.window < 2) {
        return Err(SynthError::Unsupported("motion predicates need a window of at least 2 frames".into()));
    }
    if let Some(d) = &p.direction {
        if !["left", "right", "up", "down", "stationary"].contains(&d.as_str()) {
            return Err(SynthError::Unsupported(format!("unknown direction `{d}`")));
        }
    }
    Ok(())
}

/// Exact per-frame labels of `query` over the noiseless world.
pub fn label(spec: &WorldSpec, query: &LabelQuery) -> Result<GroundTruth, SynthError> {
    spec.validate()?;
    let alive = |f: FrameId| spec.objects.iter().enumerate().filter(move |(_, o)| o.alive(f, spec.frames));
    let labels: Vec<(FrameId, bool)> = match query {
        LabelQuery::Object(p) => {
            check_predicate(p)?;
            (0..spec.frames).map(|f| (f, alive(f).any(|(_, o)| p.holds(spec, o, f)))).collect()
        }
        LabelQuery::Near { a, b, max_px } => {
            check_predicate(a)?;
            check_predicate(b)?;
            (0..spec.frames)
                .map(|f| {
                    let hit = alive(f).any(|(i, oa)| {
                        a.holds(spec, oa, f)
                            && alive(f).any(|(j, ob)| {
                                let (p, q) = (oa.center(f), ob.center(f));
                                i != j && b.holds(spec, ob, f) && ((p.0 - q.0).powi(2) + (p.1 - q.1).powi(2)).sqrt() <= *max_px
                            })
                    });
                    (f, hit)
                })
                .collect()
        }
        LabelQuery::Event { name } => {
            let events: Vec<&EventSpec> = spec.events.iter().filter(|e| e.name == *name).collect();
            if events.is_empty() {
                return Err(SynthError::Unsupported(format!("no event named `{name}`")));
            }
            (0..spec.frames).map(|f| (f, events.iter().any(|e| f >= e.start && f <= e.end))).collect()
        }
    };
    Ok(GroundTruth::from_labels(labels))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn world(objects: Vec<ObjectSpec>) -> WorldSpec {
        let mut w = WorldSpec::new(10, 640, 480, 7);
        w.objects = objects;
        w
    }

    #[test]
    fn static_object_gives_identical_detections() {
        let w = generate(&world(vec![ObjectSpec::linear("car", (100.0, 100.0), (0.0, 0.0), 0, None)])).unwrap();
        assert_eq!(w.trace.len(), 10);
        let first = &w.trace[0].detections;
        assert_eq!(first.len(), 1);
        assert!(w.trace.iter().all(|r| r.detections == *first));
    }

    #[test]
    fn linear_motion_is_an_arithmetic_progression() {
        let w = generate(&world(vec![ObjectSpec::linear("car", (100.0, 100.0), (2.0, 0.0), 0, None)])).unwrap();
        let xs: Vec<f64> = w.trace.iter().map(|r| r.detections[0].bbox.x1).collect();
        for pair in xs.windows(2) {
            assert!((pair[1] - pair[0] - 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn leaving_the_frame_is_a_spec_error() {
        let spec = world(vec![ObjectSpec::linear("car", (630.0, 100.0), (5.0, 0.0), 0, None)]);
        assert!(matches!(generate(&spec), Err(SynthError::OutOfBounds { object: 0, frame: 3 })));
        let mut ok = spec.clone();
        ok.objects[0].exit = Some(3);
        generate(&ok).unwrap();
    }

    #[test]
    fn seeded_misses_are_frozen() {
        let mut spec = WorldSpec::new(100, 640, 480, 7);
        spec.objects.push(ObjectSpec::linear("car", (100.0, 100.0), (1.0, 0.0), 0, None));
        spec.noise.miss_rate = 0.1;
        let w = generate(&spec).unwrap();
        let missing: Vec<FrameId> = w.trace.iter().filter(|r| r.detections.is_empty()).map(|r| r.frame_id).collect();
        assert_eq!(missing, generate(&spec).unwrap().trace.iter().filter(|r| r.detections.is_empty()).map(|r| r.frame_id).collect::<Vec<_>>());
        assert_eq!(missing, vec![0, 2, 12, 16, 28, 30, 53, 73, 74, 92]);
    }

    #[test]
    fn color_label_tracks_presence() {
        let spec = world(vec![
            ObjectSpec::linear("car", (100.0, 100.0), (0.0, 0.0), 2, Some(6)).with_attr("color", "red"),
            ObjectSpec::linear("car", (300.0, 100.0), (0.0, 0.0), 0, None).with_attr("color", "blue"),
            ObjectSpec::linear("car", (500.0, 100.0), (0.0, 0.0), 0, None).with_attr("color", "white"),
        ]);
        let gt = label(&spec, &LabelQuery::Object(ObjectPredicate::class("car").with_attr("color", "red"))).unwrap();
        assert_eq!(gt.positives().collect::<Vec<_>>(), vec![2, 3, 4, 5]);
    }

    #[test]
    fn speed_label_matches_kinematics() {
        // 3 px/frame at 30 fps is 90 px/s; faster than 60 from the 5th frame on.
        let spec = world(vec![ObjectSpec::linear("car", (100.0, 100.0), (3.0, 0.0), 0, None)]);
        let mut p = ObjectPredicate::class("car");
        p.min_speed = Some(60.0);
        let gt = label(&spec, &LabelQuery::Object(p)).unwrap();
        assert_eq!(gt.positives().collect::<Vec<_>>(), (4..10).collect::<Vec<_>>());
    }

    #[test]
    fn planted_event_is_labelled() {
        let mut spec = WorldSpec::new(100, 640, 480, 1);
        spec.events.push(EventSpec { name: "meet".into(), start: 50, end: 52 });
        let gt = label(&spec, &LabelQuery::Event { name: "meet".into() }).unwrap();
        assert_eq!(gt.positives().collect::<Vec<_>>(), vec![50, 51, 52]);
        assert!(matches!(label(&spec, &LabelQuery::Event { name: "x".into() }), Err(SynthError::Unsupported(_))));
    }

    #[test]
    fn turn_changes_direction_label() {
        let mut o = ObjectSpec::linear("car", (100.0, 300.0), (0.0, 0.0), 0, None);
        o.trajectory = Trajectory::Turn { velocity: (5.0, 0.0), turn_at: 4, after: (0.0, -5.0) };
        let spec = world(vec![o]);
        let right = label(&spec, &LabelQuery::Object(ObjectPredicate::class("car").moving("right"))).unwrap();
        let up = label(&spec, &LabelQuery::Object(ObjectPredicate::class("car").moving("up"))).unwrap();
        assert_eq!(right.positives().collect::<Vec<_>>(), vec![4, 5, 6]);
        assert_eq!(up.positives().collect::<Vec<_>>(), vec![7, 8, 9]);
    }
}
