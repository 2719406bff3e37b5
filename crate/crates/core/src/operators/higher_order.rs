//! Duration, temporal and video-level evaluators over per-frame results.

use std::collections::{BTreeMap, BTreeSet};

use crate::dsl::Quantifier;
use crate::operators::Truth;
use crate::trace_io::FrameId;

/// Streaming duration check for one key (a tuple of track ids).
///
/// A key fires on a satisfying frame `f` once it has satisfied the base
/// query on a run of frames spanning at least `min_frames`, where holes
/// of at most `gap` frames do not break the run.
#[derive(Clone, Debug, PartialEq)]
pub struct DurationTracker {
    min_frames: u64,
    gap: u64,
    runs: BTreeMap<Vec<u64>, (FrameId, FrameId)>,
}

impl DurationTracker {
    pub fn new(min_frames: u64, gap: u64) -> Self {
        DurationTracker { min_frames: min_frames.max(1), gap, runs: BTreeMap::new() }
    }

    /// Records that `key` satisfied the base query on `frame`; frames must
    /// arrive in increasing order per key. Returns whether it fires.
    pub fn observe(&mut self, key: &[u64], frame: FrameId) -> bool {
        let gap = self.gap;
        let run = self
            .runs
            .entry(key.to_vec())
            .and_modify(|(start, last)| {
                if frame > *last + 1 + gap {
                    *start = frame;
                }
                *last = frame;
            })
            .or_insert((frame, frame));
        frame + 1 - run.0 >= self.min_frames
    }
}

/// Firing frames of a single key over a whole satisfaction set.
pub fn duration_firings(satisfied: &BTreeSet<FrameId>, min_frames: u64, gap: u64) -> BTreeSet<FrameId> {
    let mut t = DurationTracker::new(min_frames, gap);
    satisfied.iter().copied().filter(|&f| t.observe(&[0], f)).collect()
}

/// Last frames of the maximal runs in `frames`.
pub fn run_ends(frames: &BTreeSet<FrameId>) -> Vec<FrameId> {
    frames.iter().copied().filter(|f| !frames.contains(&(f + 1))).collect()
}

/// First frames of the maximal runs in `frames`.
pub fn run_starts(frames: &BTreeSet<FrameId>) -> Vec<FrameId> {
    frames.iter().copied().filter(|&f| f == 0 || !frames.contains(&(f - 1))).collect()
}

/// Witness pairs `(f1, f2)`: `f1` ends a run of the first event, `f2`
/// starts a run of the second, `f1 < f2` and `f2 - f1 <= within`.
pub fn temporal_witnesses(first: &BTreeSet<FrameId>, then: &BTreeSet<FrameId>, within: u64) -> Vec<(FrameId, FrameId)> {
    let ends = run_ends(first);
    let mut out = Vec::new();
    for s in run_starts(then) {
        for &e in ends.iter().filter(|&&e| e < s && s - e <= within) {
            out.push((e, s));
        }
    }
    out.sort_unstable();
    out
}

/// Per-track accumulation of a video constraint.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct VideoAggregator {
    seen: BTreeMap<u64, (bool, bool)>,
}

impl VideoAggregator {
    pub fn observe(&mut self, track: u64, truth: Truth) {
        let e = self.seen.entry(track).or_default();
        match truth {
            Truth::True => e.0 = true,
            Truth::False => e.1 = true,
            Truth::Unknown => {}
        }
    }

    /// Tracks satisfying the constraint: `all` needs no false frame and at
    /// least one true one (undefined frames are skipped); `any` needs one
    /// true frame.
    pub fn satisfying(&self, quantifier: Quantifier) -> Vec<u64> {
        self.seen
            .iter()
            .filter(|(_, (t, f))| match quantifier {
                Quantifier::All => *t && !*f,
                Quantifier::Any => *t,
            })
            .map(|(id, _)| *id)
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn set(r: impl IntoIterator<Item = u64>) -> BTreeSet<u64> {
        r.into_iter().collect()
    }

    #[test]
    fn duration_fires_from_the_dth_frame() {
        let fired = duration_firings(&set(1..=25), 20, 0);
        assert_eq!(fired, set(20..=25));
        assert_eq!(duration_firings(&set([3, 5, 8]), 1, 0), set([3, 5, 8]));
    }

    #[test]
    fn hole_breaks_run_without_gap_tolerance() {
        let sat: BTreeSet<u64> = (0..30).filter(|&f| f != 10).collect();
        let fired = duration_firings(&sat, 15, 0);
        assert_eq!(fired, set(25..30));
        let tolerant = duration_firings(&sat, 15, 1);
        assert_eq!(tolerant, set(14..30).into_iter().filter(|&f| f != 10).collect());
    }

    #[test]
    fn temporal_interval_checks() {
        let q1 = set(90..=100);
        let q2 = set(120..=130);
        assert_eq!(temporal_witnesses(&q1, &q2, 30), vec![(100, 120)]);
        assert!(temporal_witnesses(&q1, &q2, 10).is_empty());
        assert!(temporal_witnesses(&q2, &q1, 1000).is_empty());
    }

    #[test]
    fn aggregation_counts_tracks_once() {
        let mut agg = VideoAggregator::default();
        for _ in 0..100 {
            agg.observe(7, Truth::True);
        }
        agg.observe(8, Truth::True);
        agg.observe(8, Truth::False);
        agg.observe(9, Truth::Unknown);
        assert_eq!(agg.satisfying(Quantifier::All), vec![7]);
        assert_eq!(agg.satisfying(Quantifier::Any), vec![7, 8]);
        assert!(VideoAggregator::default().satisfying(Quantifier::Any).is_empty());
    }

    fn brute_force(sat: &BTreeSet<u64>, d: u64, horizon: u64) -> BTreeSet<u64> {
        (0..horizon).filter(|&f| f + 1 >= d && (f + 1 - d..=f).all(|g| sat.contains(&g))).collect()
    }

    proptest! {
        #[test]
        fn duration_matches_window_scan(bits in prop::collection::vec(any::<bool>(), 0..120), d in 1u64..12) {
            let sat: BTreeSet<u64> = bits.iter().enumerate().filter(|(_, b)| **b).map(|(i, _)| i as u64).collect();
            prop_assert_eq!(duration_firings(&sat, d, 0), brute_force(&sat, d, bits.len() as u64));
        }
    }
}
