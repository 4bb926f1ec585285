//! In-memory sample store: one writer per node, any number of readers.
//!
//! Writers buffer locally and publish on `commit`, replacing the node's
//! shared snapshot. Readers clone `Arc`s under a short read lock and never
//! observe a partially committed batch.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::{Arc, Mutex, RwLock};

use thiserror::Error;

use super::Sample;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum StoreError {
    #[error("node {0} already has an active writer")]
    WriterBusy(String),
    #[error("sample for node {got} written through the writer for {expected}")]
    WrongNode { expected: String, got: String },
}

#[derive(Debug, Default)]
pub struct SampleStore {
    nodes: RwLock<BTreeMap<String, Arc<Vec<Sample>>>>,
    writers: Mutex<BTreeSet<String>>,
}

impl SampleStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Claims the single writer slot for `node_id`.
    pub fn writer(&self, node_id: &str) -> Result<NodeWriter<'_>, StoreError> {
        let mut writers = self.writers.lock().expect("writer registry poisoned");
        if !writers.insert(node_id.to_string()) {
            return Err(StoreError::WriterBusy(node_id.to_string()));
        }
        Ok(NodeWriter {
            store: self,
            node_id: node_id.to_string(),
            pending: Vec::new(),
        })
    }

    /// Consistent view of every node's committed samples.
    pub fn snapshot(&self) -> BTreeMap<String, Arc<Vec<Sample>>> {
        self.nodes.read().expect("store poisoned").clone()
    }

    pub fn node(&self, node_id: &str) -> Option<Arc<Vec<Sample>>> {
        self.nodes.read().expect("store poisoned").get(node_id).cloned()
    }

    fn publish(&self, node_id: &str, batch: Vec<Sample>) {
        let current = self.node(node_id);
        let mut merged: Vec<Sample> = current.map(|c| c.as_ref().clone()).unwrap_or_default();
        merged.extend(batch);
        // Sort on load; ties keep arrival order.
        merged.sort_by_key(|s| s.timestamp);
        self.nodes
            .write()
            .expect("store poisoned")
            .insert(node_id.to_string(), Arc::new(merged));
    }
}

#[derive(Debug)]
pub struct NodeWriter<'a> {
    store: &'a SampleStore,
    node_id: String,
    pending: Vec<Sample>,
}

impl NodeWriter<'_> {
    pub fn push(&mut self, sample: Sample) -> Result<(), StoreError> {
        if sample.node_id != self.node_id {
            return Err(StoreError::WrongNode {
                expected: self.node_id.clone(),
                got: sample.node_id,
            });
        }
        self.pending.push(sample);
        Ok(())
    }

    /// Publishes buffered samples atomically.
    pub fn commit(&mut self) {
        let batch = std::mem::take(&mut self.pending);
        if !batch.is_empty() {
            self.store.publish(&self.node_id, batch);
        }
    }
}

impl Drop for NodeWriter<'_> {
    fn drop(&mut self) {
        self.commit();
        if let Ok(mut w) = self.store.writers.lock() {
            w.remove(&self.node_id);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::timeseries::LocationClass;
    use chrono::{Duration, TimeZone, Utc};

    fn sample(node: &str, secs: i64, pm: f64) -> Sample {
        Sample {
            timestamp: Utc.with_ymd_and_hms(2020, 9, 10, 0, 0, 0).unwrap() + Duration::seconds(secs),
            node_id: node.into(),
            location_class: LocationClass::Outdoor,
            pm25: pm,
            pm25_std: None,
            fix: None,
            env: None,
        }
    }

    #[test]
    fn single_writer_per_node() {
        let store = SampleStore::new();
        let w1 = store.writer("a").unwrap();
        assert_eq!(store.writer("a").unwrap_err(), StoreError::WriterBusy("a".into()));
        let _other = store.writer("b").unwrap();
        drop(w1);
        assert!(store.writer("a").is_ok());
    }

    #[test]
    fn readers_see_only_committed_batches() {
        let store = SampleStore::new();
        let mut w = store.writer("a").unwrap();
        w.push(sample("a", 20, 2.0)).unwrap();
        w.push(sample("a", 10, 1.0)).unwrap();
        assert!(store.node("a").is_none());
        w.commit();
        let snap = store.snapshot();
        w.push(sample("a", 30, 3.0)).unwrap();
        w.commit();
        assert_eq!(snap["a"].len(), 2);
        assert_eq!(snap["a"][0].pm25, 1.0);
        assert_eq!(store.node("a").unwrap().len(), 3);
        assert!(w.push(sample("b", 0, 0.0)).is_err());
    }

    #[test]
    fn concurrent_writers_on_distinct_nodes() {
        let store = SampleStore::new();
        std::thread::scope(|s| {
            for node in ["a", "b", "c", "d"] {
                let store = &store;
                s.spawn(move || {
                    let mut w = store.writer(node).unwrap();
                    for i in 0..500 {
                        w.push(sample(node, i, i as f64)).unwrap();
                        if i % 50 == 49 {
                            w.commit();
                        }
                    }
                });
                s.spawn(|| {
                    for _ in 0..100 {
                        let snap = store.snapshot();
                        assert!(snap.values().all(|v| v.len() % 50 == 0));
                    }
                });
            }
        });
        let snap = store.snapshot();
        assert_eq!(snap.len(), 4);
        assert!(snap.values().all(|v| v.len() == 500));
    }
}
