use std::collections::BTreeMap;

use crate::datamodel::Value;

type Key = (String, u64, String);

/// Intrinsic property values and intrinsic predicate labels per track.
/// Entries are written once and never replaced.
#[derive(Clone, Debug, Default)]
pub struct MemoStore {
    values: BTreeMap<Key, Value>,
    labels: BTreeMap<Key, bool>,
}

impl MemoStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn value(&self, scope: &str, track: u64, key: &str) -> Option<&Value> {
        self.values.get(&(scope.to_string(), track, key.to_string()))
    }

    /// Stores a value unless one is already present; returns the stored value.
    pub fn insert_value(&mut self, scope: &str, track: u64, key: &str, value: Value) -> &Value {
        self.values.entry((scope.to_string(), track, key.to_string())).or_insert(value)
    }

    pub fn label(&self, scope: &str, track: u64, key: &str) -> Option<bool> {
        self.labels.get(&(scope.to_string(), track, key.to_string())).copied()
    }

    pub fn insert_label(&mut self, scope: &str, track: u64, key: &str, label: bool) -> bool {
        *self.labels.entry((scope.to_string(), track, key.to_string())).or_insert(label)
    }

    pub fn len(&self) -> usize {
        self.values.len() + self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_write_wins() {
        let mut m = MemoStore::new();
        m.insert_value("s", 1, "color", Value::from("red"));
        m.insert_value("s", 1, "color", Value::from("blue"));
        assert_eq!(m.value("s", 1, "color"), Some(&Value::from("red")));
        assert_eq!(m.value("s", 2, "color"), None);
        assert!(m.insert_label("s", 1, "p", true));
        assert!(m.insert_label("s", 1, "p", false));
        assert_eq!(m.len(), 2);
    }
}
