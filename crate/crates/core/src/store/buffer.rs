use std::collections::{BTreeMap, HashMap};

use super::PageId;

/// Page access counters. `misses` is the charged I/O.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct IoStats {
    pub logical_reads: u64,
    pub misses: u64,
    /// Misses on leaf pages, included in `misses`.
    pub leaf_misses: u64,
    pub writes: u64,
}

impl IoStats {
    pub fn since(&self, earlier: &IoStats) -> IoStats {
        IoStats {
            logical_reads: self.logical_reads - earlier.logical_reads,
            misses: self.misses - earlier.misses,
            leaf_misses: self.leaf_misses - earlier.leaf_misses,
            writes: self.writes - earlier.writes,
        }
    }
}

/// Strict LRU page buffer.
#[derive(Debug, Clone)]
pub struct BufferPool {
    capacity: usize,
    clock: u64,
    resident: HashMap<PageId, u64>,
    order: BTreeMap<u64, PageId>,
    stats: IoStats,
}

impl BufferPool {
    pub fn new(capacity: usize) -> Self {
        Self { capacity, clock: 0, resident: HashMap::new(), order: BTreeMap::new(), stats: IoStats::default() }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn stats(&self) -> IoStats {
        self.stats
    }

    /// Brings `page` to the MRU position; returns true on a hit.
    fn pin(&mut self, page: PageId) -> bool {
        self.clock += 1;
        let hit = match self.resident.insert(page, self.clock) {
            Some(old) => {
                self.order.remove(&old);
                true
            }
            None => false,
        };
        self.order.insert(self.clock, page);
        if self.resident.len() > self.capacity {
            if let Some((_, victim)) = self.order.pop_first() {
                self.resident.remove(&victim);
            }
        }
        hit
    }

    /// Charges a read of `page`; returns true on a miss.
    pub fn read(&mut self, page: PageId) -> bool {
        self.stats.logical_reads += 1;
        let miss = self.capacity == 0 || !self.pin(page);
        if miss {
            self.stats.misses += 1;
        }
        miss
    }

    pub fn read_leaf(&mut self, page: PageId) {
        if self.read(page) {
            self.stats.leaf_misses += 1;
        }
    }

    pub fn write(&mut self, page: PageId) {
        self.stats.writes += 1;
        if self.capacity > 0 {
            self.pin(page);
        }
    }

    pub fn forget(&mut self, page: PageId) {
        if let Some(stamp) = self.resident.remove(&page) {
            self.order.remove(&stamp);
        }
    }

    /// Empties the buffer and zeroes the counters.
    pub fn reset(&mut self) {
        self.resident.clear();
        self.order.clear();
        self.stats = IoStats::default();
    }

    pub fn reset_counters(&mut self) {
        self.stats = IoStats::default();
    }
}
