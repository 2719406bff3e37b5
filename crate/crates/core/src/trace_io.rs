//! On-disk formats for detection traces, video metadata and ground truth.
//!
//! Traces and ground-truth files are line-delimited JSON, one record per
//! line, so readers can stream them without loading whole files.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::datamodel::{BBox, Value};

pub type FrameId = u64;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: frame {frame} does not follow frame {previous}")]
    Ordering { line: usize, frame: FrameId, previous: FrameId },
    #[error("line {line}: duplicate frame {frame}")]
    Duplicate { line: usize, frame: FrameId },
    #[error("invalid metadata: {0}")]
    Meta(String),
}

fn io_err(path: &Path, source: io::Error) -> TraceError {
    TraceError::Io { path: path.display().to_string(), source }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoMeta {
    pub fps: f64,
    pub width: u32,
    pub height: u32,
    #[serde(rename = "frames")]
    pub frame_count: u64,
    #[serde(rename = "px_per_m", default, skip_serializing_if = "Option::is_none")]
    pub calibration: Option<f64>,
}

impl VideoMeta {
    pub fn new(fps: f64, width: u32, height: u32, frame_count: u64) -> Self {
        VideoMeta { fps, width, height, frame_count, calibration: None }
    }

    pub fn validate(&self) -> Result<(), TraceError> {
        if !(self.fps > 0.0) {
            return Err(TraceError::Meta(format!("fps must be positive, got {}", self.fps)));
        }
        if self.width == 0 || self.height == 0 {
            return Err(TraceError::Meta("resolution must be positive".into()));
        }
        if let Some(c) = self.calibration {
            if !(c > 0.0) {
                return Err(TraceError::Meta(format!("px_per_m must be positive, got {c}")));
            }
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TraceError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        let meta: VideoMeta = serde_json::from_str(&text)
            .map_err(|e| TraceError::Parse { line: e.line(), message: e.to_string() })?;
        meta.validate()?;
        Ok(meta)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), TraceError> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).expect("meta serializes");
        std::fs::write(path, text + "\n").map_err(|e| io_err(path, e))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "class")]
    pub class_name: String,
    pub bbox: BBox,
    pub score: f64,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub attrs: BTreeMap<String, Value>,
}

impl Detection {
    pub fn new(class_name: impl Into<String>, bbox: BBox, score: f64) -> Self {
        Detection { class_name: class_name.into(), bbox, score, attrs: BTreeMap::new() }
    }

    pub fn with_attr(mut self, key: &str, value: impl Into<Value>) -> Self {
        self.attrs.insert(key.to_string(), value.into());
        self
    }

    fn check(&self) -> Result<(), String> {
        if !self.bbox.is_valid() {
            return Err(format!("degenerate bbox {:?}", <[f64; 4]>::from(self.bbox)));
        }
        if !(0.0..=1.0).contains(&self.score) {
            return Err(format!("score {} outside [0, 1]", self.score));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    #[serde(rename = "frame")]
    pub frame_id: FrameId,
    #[serde(rename = "dets", default)]
    pub detections: Vec<Detection>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub channels: BTreeMap<String, f64>,
}

impl TraceRecord {
    pub fn empty(frame_id: FrameId) -> Self {
        TraceRecord { frame_id, detections: Vec::new(), channels: BTreeMap::new() }
    }

    /// Canonical single-line encoding.
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("trace record serializes")
    }
}

/// Streaming reader over a trace file; yields records in strictly
/// increasing frame order or an error naming the offending line.
pub struct TraceReader<R> {
    lines: io::Lines<R>,
    line_no: usize,
    previous: Option<FrameId>,
    bounds: Option<(f64, f64)>,
    failed: bool,
}

impl<R: BufRead> TraceReader<R> {
    pub fn new(reader: R) -> Self {
        TraceReader { lines: reader.lines(), line_no: 0, previous: None, bounds: None, failed: false }
    }

    /// Also reject boxes that fall outside the given resolution.
    pub fn with_bounds(mut self, meta: &VideoMeta) -> Self {
        self.bounds = Some((meta.width as f64, meta.height as f64));
        self
    }

    fn parse_line(&mut self, line: &str) -> Result<TraceRecord, TraceError> {
        let line_no = self.line_no;
        let record: TraceRecord = serde_json::from_str(line)
            .map_err(|e| TraceError::Parse { line: line_no, message: e.to_string() })?;
        for det in &record.detections {
            det.check().map_err(|message| TraceError::Parse { line: line_no, message })?;
            if let Some((w, h)) = self.bounds {
                let b = det.bbox;
                if b.x1 < 0.0 || b.y1 < 0.0 || b.x2 > w || b.y2 > h {
                    return Err(TraceError::Parse {
                        line: line_no,
                        message: format!("bbox {:?} outside {w}x{h}", <[f64; 4]>::from(b)),
                    });
                }
            }
        }
        if let Some(prev) = self.previous {
            if record.frame_id <= prev {
                return Err(TraceError::Ordering { line: line_no, frame: record.frame_id, previous: prev });
            }
        }
        self.previous = Some(record.frame_id);
        Ok(record)
    }
}

impl<R: BufRead> Iterator for TraceReader<R> {
    type Item = Result<TraceRecord, TraceError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed {
            return None;
        }
        loop {
            let line = match self.lines.next()? {
                Ok(line) => line,
                Err(e) => {
                    self.failed = true;
                    return Some(Err(TraceError::Parse { line: self.line_no + 1, message: e.to_string() }));
                }
            };
            self.line_no += 1;
            if line.trim().is_empty() {
                continue;
            }
            let result = self.parse_line(&line);
            self.failed = result.is_err();
            return Some(result);
        }
    }
}

pub fn open_trace(path: impl AsRef<Path>) -> Result<TraceReader<BufReader<File>>, TraceError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    Ok(TraceReader::new(BufReader::new(file)))
}

pub fn read_trace(path: impl AsRef<Path>) -> Result<Vec<TraceRecord>, TraceError> {
    open_trace(path)?.collect()
}

pub fn write_trace<'a, W: Write>(
    mut out: W,
    records: impl IntoIterator<Item = &'a TraceRecord>,
) -> io::Result<()> {
    for record in records {
        writeln!(out, "{}", record.to_line())?;
    }
    Ok(())
}

pub fn save_trace(path: impl AsRef<Path>, records: &[TraceRecord]) -> Result<(), TraceError> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut out = io::BufWriter::new(file);
    write_trace(&mut out, records).map_err(|e| io_err(path, e))?;
    out.flush().map_err(|e| io_err(path, e))
}

/// SHA-256 of the canonical encoding of a record sequence; identical
/// content hashes identically regardless of file name.
pub fn content_hash<'a>(records: impl IntoIterator<Item = &'a TraceRecord>) -> String {
    let mut hasher = Sha256::new();
    for r in records {
        hasher.update(r.to_line().as_bytes());
        hasher.update(b"\n");
    }
    hex::encode(hasher.finalize())
}

/// Fills frames missing from a trace with empty records, starting at 0.
pub struct Densify<I> {
    inner: I,
    next_frame: FrameId,
    pending: Option<TraceRecord>,
}

impl<I> Densify<I> {
    pub fn new(inner: I) -> Self {
        Densify { inner, next_frame: 0, pending: None }
    }
}

impl<I: Iterator<Item = Result<TraceRecord, TraceError>>> Iterator for Densify<I> {
    type Item = Result<TraceRecord, TraceError>;

    fn next(&mut self) -> Option<Self::Item> {
        let record = match self.pending.take() {
            Some(r) => r,
            None => match self.inner.next()? {
                Ok(r) => r,
                Err(e) => return Some(Err(e)),
            },
        };
        if record.frame_id > self.next_frame {
            let gap = TraceRecord::empty(self.next_frame);
            self.next_frame += 1;
            self.pending = Some(record);
            return Some(Ok(gap));
        }
        self.next_frame = record.frame_id + 1;
        Some(Ok(record))
    }
}

/// A run of consecutive trace records executed together.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameBatch {
    pub records: Vec<TraceRecord>,
}

impl FrameBatch {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn first_frame(&self) -> Option<FrameId> {
        self.records.first().map(|r| r.frame_id)
    }

    pub fn last_frame(&self) -> Option<FrameId> {
        self.records.last().map(|r| r.frame_id)
    }
}

pub struct Batches<I> {
    inner: I,
    size: usize,
}

impl<I: Iterator<Item = Result<TraceRecord, TraceError>>> Iterator for Batches<I> {
    type Item = Result<FrameBatch, TraceError>;

    fn next(&mut self) -> Option<Self::Item> {
        let mut records = Vec::with_capacity(self.size);
        while records.len() < self.size {
            match self.inner.next() {
                Some(Ok(r)) => records.push(r),
                Some(Err(e)) => return Some(Err(e)),
                None => break,
            }
        }
        if records.is_empty() {
            None
        } else {
            Some(Ok(FrameBatch { records }))
        }
    }
}

/// Groups a record stream into batches of at most `batch_size` frames.
///
/// Panics if `batch_size` is zero.
pub fn batch<I>(records: I, batch_size: usize) -> Batches<I::IntoIter>
where
    I: IntoIterator<Item = Result<TraceRecord, TraceError>>,
{
    assert!(batch_size >= 1, "batch_size must be at least 1");
    Batches { inner: records.into_iter(), size: batch_size }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TruthObject {
    pub id: u64,
    #[serde(rename = "class")]
    pub class_name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bbox: Option<BBox>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub attrs: BTreeMap<String, Value>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TruthRecord {
    pub frame: FrameId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub objects: Option<Vec<TruthObject>>,
}

/// Per-frame labels and/or true object identities.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GroundTruth {
    records: BTreeMap<FrameId, TruthRecord>,
}

impl GroundTruth {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_labels(labels: impl IntoIterator<Item = (FrameId, bool)>) -> Self {
        let mut gt = GroundTruth::new();
        for (frame, label) in labels {
            gt.records.insert(frame, TruthRecord { frame, label: Some(label), objects: None });
        }
        gt
    }

    pub fn insert(&mut self, record: TruthRecord) -> Result<(), TraceError> {
        let frame = record.frame;
        if self.records.insert(frame, record).is_some() {
            return Err(TraceError::Duplicate { line: 0, frame });
        }
        Ok(())
    }

    /// Label for a frame, or `None` when the frame is unlabeled.
    pub fn lookup(&self, frame: FrameId) -> Option<bool> {
        self.records.get(&frame).and_then(|r| r.label)
    }

    pub fn objects(&self, frame: FrameId) -> Option<&[TruthObject]> {
        self.records.get(&frame).and_then(|r| r.objects.as_deref())
    }

    pub fn frames(&self) -> impl Iterator<Item = FrameId> + '_ {
        self.records.keys().copied()
    }

    pub fn positives(&self) -> impl Iterator<Item = FrameId> + '_ {
        self.records.values().filter(|r| r.label == Some(true)).map(|r| r.frame)
    }

    pub fn records(&self) -> impl Iterator<Item = &TruthRecord> {
        self.records.values()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), TraceError> {
        let path = path.as_ref();
        let mut text = String::new();
        for r in self.records.values() {
            text.push_str(&serde_json::to_string(r).expect("truth record serializes"));
            text.push('\n');
        }
        std::fs::write(path, text).map_err(|e| io_err(path, e))
    }
}

pub fn parse_ground_truth<R: BufRead>(reader: R) -> Result<GroundTruth, TraceError> {
    let mut gt = GroundTruth::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| TraceError::Parse { line: line_no, message: e.to_string() })?;
        if line.trim().is_empty() {
            continue;
        }
        let record: TruthRecord = serde_json::from_str(&line)
            .map_err(|e| TraceError::Parse { line: line_no, message: e.to_string() })?;
        let frame = record.frame;
        if gt.records.insert(frame, record).is_some() {
            return Err(TraceError::Duplicate { line: line_no, frame });
        }
    }
    Ok(gt)
}

pub fn load_ground_truth(path: impl AsRef<Path>) -> Result<GroundTruth, TraceError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    parse_ground_truth(BufReader::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reader(text: &str) -> TraceReader<&[u8]> {
        TraceReader::new(text.as_bytes())
    }

    #[test]
    fn empty_file_is_empty_stream() {
        assert_eq!(reader("").count(), 0);
    }

    #[test]
    fn ordered_records_pass_through() {
        let text = "{\"frame\":0}\n{\"frame\":1,\"dets\":[]}\n{\"frame\":2}\n";
        let frames: Vec<_> = reader(text).map(|r| r.unwrap().frame_id).collect();
        assert_eq!(frames, vec![0, 1, 2]);
    }

    #[test]
    fn out_of_order_frame_reports_line() {
        let text = "{\"frame\":0}\n{\"frame\":2}\n{\"frame\":1}\n";
        let results: Vec<_> = reader(text).collect();
        assert!(results[0].is_ok() && results[1].is_ok());
        match &results[2] {
            Err(TraceError::Ordering { line, frame, previous }) => {
                assert_eq!((*line, *frame, *previous), (3, 1, 2));
            }
            other => panic!("expected ordering error, got {other:?}"),
        }
        assert_eq!(results.len(), 3);
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let text = "{\"frame\":0}\nnot json\n";
        let err = reader(text).nth(1).unwrap().unwrap_err();
        assert!(matches!(err, TraceError::Parse { line: 2, .. }));
    }

    #[test]
    fn rejects_bad_detections() {
        let text = r#"{"frame":0,"dets":[{"class":"car","bbox":[5,5,1,9],"score":0.5}]}"#;
        assert!(reader(text).next().unwrap().is_err());
        let text = r#"{"frame":0,"dets":[{"class":"car","bbox":[1,1,5,9],"score":1.5}]}"#;
        assert!(reader(text).next().unwrap().is_err());
        let meta = VideoMeta::new(10.0, 100, 100, 1);
        let text = r#"{"frame":0,"dets":[{"class":"car","bbox":[1,1,500,9],"score":0.5}]}"#;
        assert!(reader(text).with_bounds(&meta).next().unwrap().is_err());
    }

    #[test]
    fn ground_truth_lookup_and_duplicates() {
        let gt = parse_ground_truth("{\"frame\":0,\"label\":true}\n{\"frame\":1,\"label\":false}\n".as_bytes())
            .unwrap();
        assert_eq!(gt.lookup(0), Some(true));
        assert_eq!(gt.lookup(1), Some(false));
        assert_eq!(gt.lookup(7), None);
        let dup = "{\"frame\":5,\"label\":true}\n{\"frame\":5,\"label\":false}\n";
        assert!(matches!(parse_ground_truth(dup.as_bytes()), Err(TraceError::Duplicate { frame: 5, line: 2 })));
    }

    fn ok_records(frames: &[u64]) -> Vec<Result<TraceRecord, TraceError>> {
        frames.iter().map(|f| Ok(TraceRecord::empty(*f))).collect()
    }

    #[test]
    fn batch_sizes() {
        let frames: Vec<u64> = (0..10).collect();
        let sizes: Vec<_> = batch(ok_records(&frames), 4).map(|b| b.unwrap().len()).collect();
        assert_eq!(sizes, vec![4, 4, 2]);
        assert_eq!(batch(ok_records(&frames), 1).count(), 10);
        assert_eq!(batch(ok_records(&[]), 3).count(), 0);
    }

    #[test]
    fn densify_fills_gaps() {
        let frames: Vec<_> = Densify::new(ok_records(&[1, 2, 5]).into_iter())
            .map(|r| r.unwrap().frame_id)
            .collect();
        assert_eq!(frames, vec![0, 1, 2, 3, 4, 5]);
    }

    #[test]
    fn meta_roundtrip_and_validation() {
        let meta: VideoMeta =
            serde_json::from_str(r#"{"fps":10,"width":640,"height":480,"frames":3,"px_per_m":12.5}"#).unwrap();
        assert_eq!(meta.calibration, Some(12.5));
        assert!(meta.validate().is_ok());
        let bad = VideoMeta { fps: 0.0, ..meta.clone() };
        assert!(bad.validate().is_err());
        let bad = VideoMeta { calibration: Some(-1.0), ..meta };
        assert!(bad.validate().is_err());
    }
}
