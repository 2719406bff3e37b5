//! Result files and the content-addressed result store.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value as Json};

use super::{ExecError, ExecStats};
use crate::trace_io::FrameId;

/// Output of one query: per-frame lines and the optional video-level value.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    pub query: String,
    /// Frame line fields besides `query` and `frame` (`matches` or `witnesses`).
    pub frames: BTreeMap<FrameId, Map<String, Json>>,
    pub video: Option<Json>,
}

impl QueryResult {
    /// Frames with at least one output line.
    pub fn positive_frames(&self) -> Vec<FrameId> {
        self.frames.keys().copied().collect()
    }

    fn lines(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (f, fields) in &self.frames {
            let mut line = fields.clone();
            line.insert("query".into(), Json::String(self.query.clone()));
            line.insert("frame".into(), Json::from(*f));
            out.push(Json::Object(line).to_string());
        }
        if let Some(v) = &self.video {
            out.push(serde_json::json!({ "query": self.query, "video": v }).to_string());
        }
        out
    }
}

/// One JSON object per line: frame lines, then video lines, query by
/// query, then a statistics trailer when `stats` is given.
pub fn render_results(results: &BTreeMap<String, QueryResult>, stats: Option<&ExecStats>) -> String {
    let mut out = String::new();
    for r in results.values() {
        for line in r.lines() {
            out.push_str(&line);
            out.push('\n');
        }
    }
    if let Some(s) = stats {
        out.push_str(&serde_json::json!({ "stats": s }).to_string());
        out.push('\n');
    }
    out
}

/// Result lines without the statistics trailer; equal for runs that differ
/// only in how much work they did.
pub fn canonical_results(results: &BTreeMap<String, QueryResult>) -> String {
    render_results(results, None)
}

/// Inverse of [`render_results`]; the statistics trailer is skipped.
pub fn parse_results(text: &str) -> Result<BTreeMap<String, QueryResult>, String> {
    let mut out: BTreeMap<String, QueryResult> = BTreeMap::new();
    for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let v: Json = serde_json::from_str(line).map_err(|e| format!("line {}: {e}", n + 1))?;
        let Json::Object(mut obj) = v else { return Err(format!("line {}: not an object", n + 1)) };
        if obj.contains_key("stats") {
            continue;
        }
        let query = match obj.remove("query") {
            Some(Json::String(q)) => q,
            _ => return Err(format!("line {}: missing query", n + 1)),
        };
        let entry = out.entry(query.clone()).or_insert_with(|| QueryResult { query, ..Default::default() });
        if let Some(video) = obj.remove("video") {
            entry.video = Some(video);
            continue;
        }
        let frame = obj
            .remove("frame")
            .and_then(|f| f.as_u64())
            .ok_or_else(|| format!("line {}: missing frame", n + 1))?;
        entry.frames.insert(frame, obj);
    }
    Ok(out)
}

/// Directory of `{key}.json` entries, one query result each.
#[derive(Clone, Debug)]
pub struct ResultStore {
    dir: PathBuf,
}

impl ResultStore {
    pub fn open(dir: impl AsRef<Path>) -> Result<Self, ExecError> {
        std::fs::create_dir_all(dir.as_ref())
            .map_err(|e| ExecError::Store(format!("{}: {e}", dir.as_ref().display())))?;
        Ok(ResultStore { dir: dir.as_ref().to_path_buf() })
    }

    pub fn path(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.json"))
    }

    /// Stored result, if present and readable. A corrupt entry is removed
    /// with a warning so the caller recomputes it.
    pub fn get(&self, key: &str) -> Option<QueryResult> {
        let path = self.path(key);
        let text = std::fs::read_to_string(&path).ok()?;
        let parsed = serde_json::from_str::<QueryResult>(&text);
        match parsed {
            Ok(r) => Some(r),
            Err(e) => {
                log::warn!("discarding corrupt cached result {}: {e}", path.display());
                let _ = std::fs::remove_file(&path);
                None
            }
        }
    }

    pub fn put(&self, key: &str, result: &QueryResult) -> Result<(), ExecError> {
        let text = serde_json::to_string(result).expect("results serialize") + "\n";
        let tmp = self.dir.join(format!("{key}.tmp"));
        std::fs::write(&tmp, text)
            .and_then(|_| std::fs::rename(&tmp, self.path(key)))
            .map_err(|e| ExecError::Store(format!("{}: {e}", self.dir.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> QueryResult {
        let mut r = QueryResult { query: "q".into(), ..Default::default() };
        let mut line = Map::new();
        line.insert("matches".into(), serde_json::json!([{ "c": { "node": "f3.0", "color": "red" } }]));
        r.frames.insert(3, line);
        r.video = Some(serde_json::json!({ "count": 1 }));
        r
    }

    #[test]
    fn render_then_parse_is_identity() {
        let results = BTreeMap::from([("q".to_string(), sample())]);
        let text = render_results(&results, Some(&ExecStats::default()));
        assert_eq!(text.lines().count(), 3);
        assert_eq!(parse_results(&text).unwrap(), results);
    }

    #[test]
    fn corrupt_entry_is_dropped() {
        let dir = tempfile::tempdir().unwrap();
        let store = ResultStore::open(dir.path()).unwrap();
        store.put("k", &sample()).unwrap();
        assert_eq!(store.get("k"), Some(sample()));
        std::fs::write(store.path("k"), "{not json").unwrap();
        assert_eq!(store.get("k"), None);
        assert!(!store.path("k").exists());
    }
}
