//! Content-addressed weight sharing between model instances.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, Weak};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::sparse::Sparse4x1Weight;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct WeightStats {
    /// Distinct weights still referenced somewhere.
    pub live_entries: usize,
    /// Storage of those weights, each counted once.
    pub unique_bytes: usize,
}

/// Maps a SHA-256 of each weight's contents to a weak handle, so identical
/// weights loaded by several instances resolve to one allocation.
#[derive(Debug, Default)]
pub struct WeightRegistry {
    entries: Mutex<HashMap<[u8; 32], Weak<Sparse4x1Weight>>>,
}

fn digest(w: &Sparse4x1Weight) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update((w.rows() as u64).to_le_bytes());
    h.update((w.cols() as u64).to_le_bytes());
    for n in w.group_nnz() {
        h.update(n.to_le_bytes());
    }
    for i in w.indices() {
        h.update(i.to_le_bytes());
    }
    h.update(w.values().iter().map(|&v| v as u8).collect::<Vec<_>>());
    for s in w.scales() {
        h.update(s.to_bits().to_le_bytes());
    }
    h.finalize().into()
}

impl WeightRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Shared handle for `w`: an existing live copy when one is registered.
    pub fn register(&self, w: Arc<Sparse4x1Weight>) -> Arc<Sparse4x1Weight> {
        let key = digest(&w);
        let mut map = self.entries.lock().expect("registry lock");
        if let Some(existing) = map.get(&key).and_then(Weak::upgrade) {
            if *existing == *w {
                return existing;
            }
        }
        map.insert(key, Arc::downgrade(&w));
        w
    }

    pub fn stats(&self) -> WeightStats {
        let mut map = self.entries.lock().expect("registry lock");
        map.retain(|_, w| w.strong_count() > 0);
        let unique_bytes = map.values().filter_map(Weak::upgrade).map(|w| w.storage_bytes()).sum();
        WeightStats { live_entries: map.len(), unique_bytes }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sparse::generate_pattern_weight;

    fn weight(seed: u64) -> Arc<Sparse4x1Weight> {
        Arc::new(Sparse4x1Weight::encode(&generate_pattern_weight(16, 32, 0.5, seed)).unwrap())
    }

    #[test]
    fn equal_weights_are_shared() {
        let r = WeightRegistry::new();
        let a = r.register(weight(1));
        let b = r.register(weight(1));
        let c = r.register(weight(2));
        assert!(Arc::ptr_eq(&a, &b));
        assert!(!Arc::ptr_eq(&a, &c));
        let s = r.stats();
        assert_eq!(s.live_entries, 2);
        assert_eq!(s.unique_bytes, a.storage_bytes() + c.storage_bytes());
        drop((a, b));
        assert_eq!(r.stats().live_entries, 1);
    }
}
