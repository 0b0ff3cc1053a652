//! Disk-page-simulated B+-tree with an LRU buffer and I/O accounting.
//!
//! Pages live in memory; every page the tree touches goes through the
//! [`BufferPool`], and a buffer miss is one charged I/O. Node capacities are
//! derived from a 4 KiB page budget and fixed-size records.

mod buffer;
mod snapshot;

use std::cell::RefCell;

pub use buffer::{BufferPool, IoStats};
pub use snapshot::{read_page_images, write_page_images};

use crate::error::{Error, Result};
use crate::UserId;

pub type PageId = u32;

pub const PAGE_SIZE: usize = 4096;
pub const PAGE_HEADER_BYTES: usize = 24;
/// key + uid + x, y, vx, vy + t + policy_ref
pub const LEAF_ENTRY_BYTES: usize = 8 + 8 + 4 * 8 + 8 + 8;
/// (key, uid) separator
pub const INNER_SEPARATOR_BYTES: usize = 16;
pub const INNER_CHILD_BYTES: usize = 8;

pub const LEAF_CAPACITY: usize = (PAGE_SIZE - PAGE_HEADER_BYTES) / LEAF_ENTRY_BYTES;
/// Maximum children of an internal node.
pub const INNER_CAPACITY: usize =
    (PAGE_SIZE - PAGE_HEADER_BYTES - INNER_CHILD_BYTES) / (INNER_SEPARATOR_BYTES + INNER_CHILD_BYTES) + 1;

pub const DEFAULT_BUFFER_PAGES: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LeafEntry {
    pub key: u64,
    pub uid: UserId,
    pub x: f64,
    pub y: f64,
    pub vx: f64,
    pub vy: f64,
    pub t: f64,
    pub policy_ref: u64,
}

impl LeafEntry {
    #[inline]
    pub fn order_key(&self) -> (u64, UserId) {
        (self.key, self.uid)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TreeConfig {
    pub leaf_capacity: usize,
    /// Maximum number of children per internal node.
    pub inner_capacity: usize,
    pub buffer_pages: usize,
}

impl Default for TreeConfig {
    fn default() -> Self {
        Self { leaf_capacity: LEAF_CAPACITY, inner_capacity: INNER_CAPACITY, buffer_pages: DEFAULT_BUFFER_PAGES }
    }
}

impl TreeConfig {
    fn min_leaf(&self) -> usize {
        self.leaf_capacity.div_ceil(2)
    }

    fn min_children(&self) -> usize {
        self.inner_capacity.div_ceil(2)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Leaf {
    pub(crate) entries: Vec<LeafEntry>,
    pub(crate) next: Option<PageId>,
    pub(crate) prev: Option<PageId>,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Inner {
    /// `seps[i]` is the smallest order key reachable through `children[i + 1]`.
    pub(crate) seps: Vec<(u64, UserId)>,
    pub(crate) children: Vec<PageId>,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) enum Node {
    Leaf(Leaf),
    Inner(Inner),
}

impl Node {
    fn size(&self) -> usize {
        match self {
            Node::Leaf(l) => l.entries.len(),
            Node::Inner(i) => i.children.len(),
        }
    }
}

/// What a scan visitor wants next.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Flow {
    Continue,
    /// Resume at the first key `>=` the given key that is still in range.
    SkipTo(u64),
    Stop,
}

/// Nearest key observed on one side of a scan, from pages already read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Neighbor {
    Key(u64),
    /// The tree has no key on that side.
    Nothing,
    #[default]
    Unknown,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ScanStats {
    pub entries_visited: u64,
    pub pages_touched: u64,
    /// Largest key below the first sought key, if it sat in the first leaf read.
    pub before: Neighbor,
    /// First key beyond the ranges where the scan ended.
    pub after: Neighbor,
}

/// A set of keys, queried by successor search.
pub trait KeyRanges {
    /// Smallest key in the set that is `>= from`.
    fn seek(&self, from: u64) -> Option<u64>;
}

/// Inclusive key interval.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KeyInterval {
    pub lo: u64,
    pub hi: u64,
}

impl KeyRanges for KeyInterval {
    fn seek(&self, from: u64) -> Option<u64> {
        (from <= self.hi).then(|| from.max(self.lo))
    }
}

/// Sorted, pairwise-disjoint inclusive intervals.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct IntervalList(pub Vec<(u64, u64)>);

impl KeyRanges for IntervalList {
    fn seek(&self, from: u64) -> Option<u64> {
        let i = self.0.partition_point(|&(_, hi)| hi < from);
        self.0.get(i).map(|&(lo, _)| lo.max(from))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TreeStats {
    pub height: u32,
    pub leaf_count: usize,
    pub entry_count: usize,
    pub page_count: usize,
}

#[derive(Debug)]
pub struct BPlusTree {
    cfg: TreeConfig,
    pub(crate) nodes: Vec<Option<Node>>,
    free: Vec<PageId>,
    pub(crate) root: PageId,
    pub(crate) height: u32,
    len: usize,
    buffer: RefCell<BufferPool>,
}

impl Clone for BPlusTree {
    fn clone(&self) -> Self {
        Self {
            cfg: self.cfg,
            nodes: self.nodes.clone(),
            free: self.free.clone(),
            root: self.root,
            height: self.height,
            len: self.len,
            buffer: RefCell::new(self.buffer.borrow().clone()),
        }
    }
}

impl Default for BPlusTree {
    fn default() -> Self {
        Self::new(TreeConfig::default())
    }
}

impl BPlusTree {
    pub fn new(cfg: TreeConfig) -> Self {
        assert!(cfg.leaf_capacity >= 3 && cfg.inner_capacity >= 3, "node capacity too small");
        let root = Node::Leaf(Leaf { entries: Vec::new(), next: None, prev: None });
        Self {
            cfg,
            nodes: vec![Some(root)],
            free: Vec::new(),
            root: 0,
            height: 1,
            len: 0,
            buffer: RefCell::new(BufferPool::new(cfg.buffer_pages)),
        }
    }

    /// Builds a tree from entries sorted by `(key, uid)`, filling each node
    /// to `fill` of its capacity.
    pub fn bulk_load(cfg: TreeConfig, mut entries: Vec<LeafEntry>, fill: f64) -> Result<Self> {
        entries.sort_by_key(|e| e.order_key());
        if let Some(w) = entries.windows(2).find(|w| w[0].order_key() == w[1].order_key()) {
            return Err(Error::DuplicateEntry { key: w[1].key, uid: w[1].uid });
        }
        let mut tree = Self::new(cfg);
        if entries.is_empty() {
            return Ok(tree);
        }
        tree.nodes.clear();
        tree.len = entries.len();
        let fill = fill.clamp(0.5, 1.0);

        let leaf_target = ((cfg.leaf_capacity as f64 * fill) as usize).clamp(cfg.min_leaf(), cfg.leaf_capacity);
        let mut level: Vec<(PageId, (u64, UserId))> = Vec::new();
        for chunk in balanced_chunks(entries.len(), leaf_target, cfg.leaf_capacity) {
            let part: Vec<LeafEntry> = entries.drain(..chunk).collect();
            let first = part[0].order_key();
            let id = tree.nodes.len() as PageId;
            let prev = level.last().map(|&(p, _)| p);
            tree.nodes.push(Some(Node::Leaf(Leaf { entries: part, next: None, prev })));
            if let Some(p) = prev {
                tree.leaf_mut(p).next = Some(id);
            }
            level.push((id, first));
        }
        let inner_target =
            ((cfg.inner_capacity as f64 * fill) as usize).clamp(cfg.min_children(), cfg.inner_capacity);
        let mut height = 1;
        while level.len() > 1 {
            let mut upper = Vec::new();
            let mut rest = level.as_slice();
            for chunk in balanced_chunks(level.len(), inner_target, cfg.inner_capacity) {
                let (group, tail) = rest.split_at(chunk);
                rest = tail;
                let node = Inner {
                    seps: group[1..].iter().map(|&(_, k)| k).collect(),
                    children: group.iter().map(|&(p, _)| p).collect(),
                };
                let id = tree.nodes.len() as PageId;
                tree.nodes.push(Some(Node::Inner(node)));
                upper.push((id, group[0].1));
            }
            level = upper;
            height += 1;
        }
        tree.root = level[0].0;
        tree.height = height;
        let pages = tree.nodes.len() as PageId;
        let mut buf = tree.buffer.borrow_mut();
        for p in 0..pages {
            buf.write(p);
        }
        buf.reset();
        drop(buf);
        Ok(tree)
    }

    pub(crate) fn from_parts(cfg: TreeConfig, nodes: Vec<Option<Node>>, root: PageId, height: u32) -> Self {
        let free = nodes.iter().enumerate().filter(|(_, n)| n.is_none()).map(|(i, _)| i as PageId).collect();
        let len = nodes
            .iter()
            .flatten()
            .map(|n| match n {
                Node::Leaf(l) => l.entries.len(),
                Node::Inner(_) => 0,
            })
            .sum();
        Self { cfg, nodes, free, root, height, len, buffer: RefCell::new(BufferPool::new(cfg.buffer_pages)) }
    }

    pub fn config(&self) -> TreeConfig {
        self.cfg
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn io(&self) -> IoStats {
        self.buffer.borrow().stats()
    }

    /// Cold buffer and zeroed counters.
    pub fn reset_io(&self) {
        self.buffer.borrow_mut().reset();
    }

    pub fn reset_io_counters(&self) {
        self.buffer.borrow_mut().reset_counters();
    }

    pub fn stats(&self) -> TreeStats {
        let mut leaf_count = 0;
        let mut page_count = 0;
        for n in self.nodes.iter().flatten() {
            page_count += 1;
            if matches!(n, Node::Leaf(_)) {
                leaf_count += 1;
            }
        }
        TreeStats { height: self.height, leaf_count, entry_count: self.len, page_count }
    }

    // --- page access -----------------------------------------------------

    fn read_page(&self, id: PageId) -> &Node {
        let node = self.node(id);
        match node {
            Node::Leaf(_) => self.buffer.borrow_mut().read_leaf(id),
            Node::Inner(_) => {
                self.buffer.borrow_mut().read(id);
            }
        }
        node
    }

    fn node(&self, id: PageId) -> &Node {
        self.nodes[id as usize].as_ref().expect("dangling page id")
    }

    fn node_mut(&mut self, id: PageId) -> &mut Node {
        self.nodes[id as usize].as_mut().expect("dangling page id")
    }

    fn leaf(&self, id: PageId) -> &Leaf {
        match self.node(id) {
            Node::Leaf(l) => l,
            Node::Inner(_) => panic!("page {id} is not a leaf"),
        }
    }

    fn leaf_mut(&mut self, id: PageId) -> &mut Leaf {
        match self.node_mut(id) {
            Node::Leaf(l) => l,
            Node::Inner(_) => panic!("page {id} is not a leaf"),
        }
    }

    fn inner_mut(&mut self, id: PageId) -> &mut Inner {
        match self.node_mut(id) {
            Node::Inner(i) => i,
            Node::Leaf(_) => panic!("page {id} is not internal"),
        }
    }

    fn mark_written(&self, id: PageId) {
        self.buffer.borrow_mut().write(id);
    }

    fn alloc(&mut self, node: Node) -> PageId {
        match self.free.pop() {
            Some(id) => {
                self.nodes[id as usize] = Some(node);
                id
            }
            None => {
                self.nodes.push(Some(node));
                (self.nodes.len() - 1) as PageId
            }
        }
    }

    fn release(&mut self, id: PageId) {
        self.nodes[id as usize] = None;
        self.free.push(id);
        self.buffer.borrow_mut().forget(id);
    }

    /// Root-to-leaf descent toward `target`, charging each page. Returns the
    /// leaf and the `(inner page, child slot)` path.
    fn descend(&self, target: (u64, UserId)) -> (PageId, Vec<(PageId, usize)>) {
        let mut path = Vec::with_capacity(self.height as usize);
        let mut id = self.root;
        loop {
            match self.read_page(id) {
                Node::Leaf(_) => return (id, path),
                Node::Inner(inner) => {
                    let slot = inner.seps.partition_point(|s| *s <= target);
                    path.push((id, slot));
                    id = inner.children[slot];
                }
            }
        }
    }

    // --- modification ----------------------------------------------------

    pub fn insert(&mut self, entry: LeafEntry) -> Result<()> {
        let target = entry.order_key();
        let (leaf_id, path) = self.descend(target);
        let leaf = self.leaf_mut(leaf_id);
        let pos = leaf.entries.partition_point(|e| e.order_key() < target);
        if leaf.entries.get(pos).is_some_and(|e| e.order_key() == target) {
            return Err(Error::DuplicateEntry { key: entry.key, uid: entry.uid });
        }
        leaf.entries.insert(pos, entry);
        self.len += 1;
        self.mark_written(leaf_id);
        if self.leaf(leaf_id).entries.len() > self.cfg.leaf_capacity {
            self.split_leaf(leaf_id, path);
        }
        Ok(())
    }

    fn split_leaf(&mut self, leaf_id: PageId, path: Vec<(PageId, usize)>) {
        let leaf = self.leaf_mut(leaf_id);
        let mid = leaf.entries.len() / 2;
        let right_entries = leaf.entries.split_off(mid);
        let old_next = leaf.next;
        let sep = right_entries[0].order_key();
        let right = self.alloc(Node::Leaf(Leaf { entries: right_entries, next: old_next, prev: Some(leaf_id) }));
        self.leaf_mut(leaf_id).next = Some(right);
        if let Some(n) = old_next {
            self.leaf_mut(n).prev = Some(right);
            self.mark_written(n);
        }
        self.mark_written(right);
        self.insert_separator(path, sep, right);
    }

    /// Adds `(sep, right)` to the parent at the end of `path`, splitting upward.
    fn insert_separator(&mut self, mut path: Vec<(PageId, usize)>, mut sep: (u64, UserId), mut right: PageId) {
        loop {
            let Some((parent, slot)) = path.pop() else {
                let old_root = self.root;
                self.root = self.alloc(Node::Inner(Inner { seps: vec![sep], children: vec![old_root, right] }));
                self.height += 1;
                self.mark_written(self.root);
                return;
            };
            let cap = self.cfg.inner_capacity;
            let node = self.inner_mut(parent);
            node.seps.insert(slot, sep);
            node.children.insert(slot + 1, right);
            if node.children.len() <= cap {
                self.mark_written(parent);
                return;
            }
            let mid = node.children.len() / 2;
            let right_children = node.children.split_off(mid);
            let mut right_seps = node.seps.split_off(mid - 1);
            let promoted = right_seps.remove(0);
            let new_right = self.alloc(Node::Inner(Inner { seps: right_seps, children: right_children }));
            self.mark_written(parent);
            self.mark_written(new_right);
            sep = promoted;
            right = new_right;
        }
    }

    pub fn delete(&mut self, key: u64, uid: UserId) -> Result<LeafEntry> {
        let target = (key, uid);
        let (leaf_id, path) = self.descend(target);
        let leaf = self.leaf_mut(leaf_id);
        let pos = leaf.entries.partition_point(|e| e.order_key() < target);
        if leaf.entries.get(pos).is_none_or(|e| e.order_key() != target) {
            return Err(Error::MissingEntry { key, uid });
        }
        let removed = leaf.entries.remove(pos);
        self.len -= 1;
        self.mark_written(leaf_id);
        self.rebalance(leaf_id, path);
        Ok(removed)
    }

    fn min_size(&self, id: PageId) -> usize {
        match self.node(id) {
            Node::Leaf(_) => self.cfg.min_leaf(),
            Node::Inner(_) => self.cfg.min_children(),
        }
    }

    /// Restores occupancy bottom-up after a removal, preferring the left sibling.
    fn rebalance(&mut self, mut id: PageId, mut path: Vec<(PageId, usize)>) {
        loop {
            let Some(&(parent, slot)) = path.last() else {
                // root: collapse a single-child internal root
                if let Node::Inner(inner) = self.node(id) {
                    if inner.children.len() == 1 {
                        let child = inner.children[0];
                        self.release(id);
                        self.root = child;
                        self.height -= 1;
                    }
                }
                return;
            };
            if self.node(id).size() >= self.min_size(id) {
                return;
            }
            path.pop();
            let siblings = match self.node(parent) {
                Node::Inner(p) => (slot.checked_sub(1).map(|s| p.children[s]), p.children.get(slot + 1).copied()),
                Node::Leaf(_) => unreachable!(),
            };
            let min = self.min_size(id);
            if let Some(left) = siblings.0 {
                self.buffer.borrow_mut().read(left);
                if self.node(left).size() > min {
                    self.borrow_from_left(parent, slot, left, id);
                    return;
                }
            }
            if let Some(right) = siblings.1 {
                self.buffer.borrow_mut().read(right);
                if self.node(right).size() > min {
                    self.borrow_from_right(parent, slot, id, right);
                    return;
                }
            }
            match siblings {
                (Some(left), _) => self.merge(parent, slot - 1, left, id),
                (None, Some(right)) => self.merge(parent, slot, id, right),
                (None, None) => unreachable!("non-root node without siblings"),
            }
            self.mark_written(parent);
            id = parent;
        }
    }

    fn borrow_from_left(&mut self, parent: PageId, slot: usize, left: PageId, id: PageId) {
        let down = self.inner_mut(parent).seps[slot - 1];
        let moved_sep = match self.node_mut(left) {
            Node::Leaf(l) => {
                let e = l.entries.pop().unwrap();
                self.leaf_mut(id).entries.insert(0, e);
                e.order_key()
            }
            Node::Inner(l) => {
                let child = l.children.pop().unwrap();
                let up = l.seps.pop().unwrap();
                let node = self.inner_mut(id);
                node.children.insert(0, child);
                node.seps.insert(0, down);
                up
            }
        };
        self.inner_mut(parent).seps[slot - 1] = moved_sep;
        for p in [left, id, parent] {
            self.mark_written(p);
        }
    }

    fn borrow_from_right(&mut self, parent: PageId, slot: usize, id: PageId, right: PageId) {
        let down = self.inner_mut(parent).seps[slot];
        let new_sep = match self.node_mut(right) {
            Node::Leaf(r) => {
                let e = r.entries.remove(0);
                let next_first = r.entries[0].order_key();
                self.leaf_mut(id).entries.push(e);
                next_first
            }
            Node::Inner(r) => {
                let child = r.children.remove(0);
                let up = r.seps.remove(0);
                let node = self.inner_mut(id);
                node.children.push(child);
                node.seps.push(down);
                up
            }
        };
        self.inner_mut(parent).seps[slot] = new_sep;
        for p in [right, id, parent] {
            self.mark_written(p);
        }
    }

    /// Folds `right` into `left`; `sep_slot` indexes the separator between them.
    fn merge(&mut self, parent: PageId, sep_slot: usize, left: PageId, right: PageId) {
        let p = self.inner_mut(parent);
        let down = p.seps.remove(sep_slot);
        p.children.remove(sep_slot + 1);
        let right_node = self.nodes[right as usize].take().expect("dangling page id");
        let mut relink = None;
        match (self.node_mut(left), right_node) {
            (Node::Leaf(l), Node::Leaf(r)) => {
                l.entries.extend(r.entries);
                l.next = r.next;
                relink = r.next;
            }
            (Node::Inner(l), Node::Inner(r)) => {
                l.seps.push(down);
                l.seps.extend(r.seps);
                l.children.extend(r.children);
            }
            _ => unreachable!("siblings at different levels"),
        }
        if let Some(n) = relink {
            self.leaf_mut(n).prev = Some(left);
            self.mark_written(n);
        }
        self.nodes[right as usize] = Some(Node::Leaf(Leaf { entries: Vec::new(), next: None, prev: None }));
        self.release(right);
        self.mark_written(left);
    }

    // --- search ----------------------------------------------------------

    /// Visits entries with `lo <= key <= hi` in key order.
    pub fn range_scan(&self, lo: u64, hi: u64, visit: impl FnMut(&LeafEntry) -> Flow) -> ScanStats {
        self.scan(&KeyInterval { lo, hi }, visit)
    }

    /// Visits, in key order, every entry whose key is in `ranges`. The scan
    /// descends to the leaf holding the first wanted key and follows sibling
    /// links; when the next wanted key lies past the current leaf it descends
    /// again from the root. Every page touched is charged through the buffer.
    pub fn scan<R: KeyRanges + ?Sized>(&self, ranges: &R, mut visit: impl FnMut(&LeafEntry) -> Flow) -> ScanStats {
        let before_reads = self.io().logical_reads;
        let mut stats = ScanStats::default();
        let Some(mut target) = ranges.seek(0) else {
            return stats;
        };
        let (mut leaf_id, _) = self.descend((target, 0));
        let mut leaf = self.leaf(leaf_id);
        let mut pos = leaf.entries.partition_point(|e| e.key < target);
        stats.before = if pos > 0 {
            Neighbor::Key(leaf.entries[pos - 1].key)
        } else if leaf.prev.is_none() {
            Neighbor::Nothing
        } else {
            Neighbor::Unknown
        };
        loop {
            if pos >= leaf.entries.len() {
                match leaf.next {
                    None => {
                        stats.after = Neighbor::Nothing;
                        break;
                    }
                    Some(n) => {
                        self.buffer.borrow_mut().read_leaf(n);
                        leaf_id = n;
                        leaf = self.leaf(leaf_id);
                        pos = 0;
                        continue;
                    }
                }
            }
            let e = &leaf.entries[pos];
            let wanted = match ranges.seek(e.key) {
                None => {
                    stats.after = Neighbor::Key(e.key);
                    break;
                }
                Some(s) if s == e.key => {
                    stats.entries_visited += 1;
                    match visit(e) {
                        Flow::Continue => {
                            pos += 1;
                            continue;
                        }
                        Flow::Stop => break,
                        Flow::SkipTo(k) => match ranges.seek(k.max(e.key)) {
                            Some(t) => t,
                            None => {
                                stats.after = Neighbor::Unknown;
                                break;
                            }
                        },
                    }
                }
                Some(s) => s,
            };
            target = wanted;
            // reposition at the first entry with key >= target
            if leaf.entries.last().is_some_and(|last| last.key >= target) {
                pos += leaf.entries[pos..].partition_point(|e| e.key < target);
            } else if leaf.next.is_none() {
                stats.after = Neighbor::Nothing;
                break;
            } else {
                let (id, _) = self.descend((target, 0));
                leaf_id = id;
                leaf = self.leaf(leaf_id);
                pos = leaf.entries.partition_point(|e| e.key < target);
            }
        }
        stats.pages_touched = self.io().logical_reads - before_reads;
        stats
    }

    /// Looks up one entry by exact `(key, uid)`.
    pub fn get(&self, key: u64, uid: UserId) -> Option<LeafEntry> {
        let (leaf_id, _) = self.descend((key, uid));
        let leaf = self.leaf(leaf_id);
        let pos = leaf.entries.partition_point(|e| e.order_key() < (key, uid));
        leaf.entries.get(pos).filter(|e| e.order_key() == (key, uid)).copied()
    }

    /// All entries along the leaf chain, without I/O accounting.
    pub fn entries(&self) -> Vec<LeafEntry> {
        let mut id = self.root;
        while let Node::Inner(inner) = self.node(id) {
            id = inner.children[0];
        }
        let mut out = Vec::with_capacity(self.len);
        let mut cur = Some(id);
        while let Some(c) = cur {
            let l = self.leaf(c);
            out.extend_from_slice(&l.entries);
            cur = l.next;
        }
        out
    }

    /// Structural audit: ordering, separator bounds, occupancy, uniform
    /// depth, sibling chain and entry count.
    pub fn check_invariants(&self) -> std::result::Result<(), String> {
        let mut leaves = Vec::new();
        let mut count = 0;
        self.audit(self.root, None, None, 1, true, &mut leaves, &mut count)?;
        if count != self.len {
            return Err(format!("entry count {count} != len {}", self.len));
        }
        for (i, &id) in leaves.iter().enumerate() {
            let l = self.leaf(id);
            let want_prev = i.checked_sub(1).map(|j| leaves[j]);
            let want_next = leaves.get(i + 1).copied();
            if l.prev != want_prev || l.next != want_next {
                return Err(format!("broken sibling links at leaf {id}"));
            }
        }
        let chain = self.entries();
        if chain.windows(2).any(|w| w[0].order_key() >= w[1].order_key()) {
            return Err("leaf chain not strictly sorted".into());
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn audit(
        &self,
        id: PageId,
        lo: Option<(u64, UserId)>,
        hi: Option<(u64, UserId)>,
        depth: u32,
        is_root: bool,
        leaves: &mut Vec<PageId>,
        count: &mut usize,
    ) -> std::result::Result<(), String> {
        let in_bounds = |k: (u64, UserId)| lo.is_none_or(|l| k >= l) && hi.is_none_or(|h| k < h);
        match self.node(id) {
            Node::Leaf(l) => {
                if depth != self.height {
                    return Err(format!("leaf {id} at depth {depth}, height {}", self.height));
                }
                if !is_root && (l.entries.len() < self.cfg.min_leaf() || l.entries.len() > self.cfg.leaf_capacity) {
                    return Err(format!("leaf {id} occupancy {}", l.entries.len()));
                }
                if l.entries.iter().any(|e| !in_bounds(e.order_key())) {
                    return Err(format!("leaf {id} holds a key outside its fence"));
                }
                *count += l.entries.len();
                leaves.push(id);
            }
            Node::Inner(inner) => {
                let n = inner.children.len();
                if inner.seps.len() + 1 != n {
                    return Err(format!("inner {id} separator/child mismatch"));
                }
                let min = if is_root { 2 } else { self.cfg.min_children() };
                if n < min || n > self.cfg.inner_capacity {
                    return Err(format!("inner {id} has {n} children"));
                }
                if inner.seps.windows(2).any(|w| w[0] >= w[1]) || inner.seps.iter().any(|&s| !in_bounds(s)) {
                    return Err(format!("inner {id} separators out of order"));
                }
                for (i, &c) in inner.children.iter().enumerate() {
                    let clo = if i == 0 { lo } else { Some(inner.seps[i - 1]) };
                    let chi = if i + 1 == n { hi } else { Some(inner.seps[i]) };
                    self.audit(c, clo, chi, depth + 1, false, leaves, count)?;
                }
            }
        }
        Ok(())
    }
}

/// Splits `n` items into near-equal chunks of about `target` (at most
/// `cap`) each.
fn balanced_chunks(n: usize, target: usize, cap: usize) -> Vec<usize> {
    if n == 0 {
        return Vec::new();
    }
    let mut chunks = (n / target).max(1);
    if n.div_ceil(chunks) > cap {
        chunks = n.div_ceil(cap);
    }
    let (base, extra) = (n / chunks, n % chunks);
    (0..chunks).map(|i| base + usize::from(i < extra)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{seq::SliceRandom, Rng, SeedableRng};
    use std::collections::BTreeSet;

    fn entry(key: u64, uid: UserId) -> LeafEntry {
        LeafEntry { key, uid, x: 0.0, y: 0.0, vx: 0.0, vy: 0.0, t: 0.0, policy_ref: uid }
    }

    fn small() -> TreeConfig {
        TreeConfig { leaf_capacity: 4, inner_capacity: 4, buffer_pages: 8 }
    }

    fn keys_of(t: &BPlusTree) -> Vec<(u64, UserId)> {
        t.entries().iter().map(|e| e.order_key()).collect()
    }

    #[test]
    fn page_budget_capacities() {
        assert_eq!(LEAF_CAPACITY, 63);
        assert_eq!(INNER_CAPACITY, 170);
        assert!(PAGE_HEADER_BYTES + LEAF_CAPACITY * LEAF_ENTRY_BYTES <= PAGE_SIZE);
        assert!(
            PAGE_HEADER_BYTES + (INNER_CAPACITY - 1) * INNER_SEPARATOR_BYTES + INNER_CAPACITY * INNER_CHILD_BYTES
                <= PAGE_SIZE
        );
    }

    #[test]
    fn empty_tree() {
        let t = BPlusTree::default();
        assert_eq!(t.stats(), TreeStats { height: 1, leaf_count: 1, entry_count: 0, page_count: 1 });
        let s = t.range_scan(0, u64::MAX, |_| Flow::Continue);
        assert_eq!(s.entries_visited, 0);
        assert!(s.pages_touched >= 1);
    }

    #[test]
    fn first_insert_gives_single_leaf() {
        let mut t = BPlusTree::default();
        t.insert(entry(5, 1)).unwrap();
        assert_eq!(t.stats().height, 1);
        assert_eq!(t.stats().leaf_count, 1);
    }

    #[test]
    fn sequential_inserts_keep_sorted_chain() {
        let mut t = BPlusTree::new(small());
        let mut expect = Vec::new();
        for i in 0..500u64 {
            let k = (i * 7919) % 1000;
            t.insert(entry(k, i)).unwrap();
            expect.push((k, i));
        }
        expect.sort();
        assert_eq!(keys_of(&t), expect);
        t.check_invariants().unwrap();
        assert!(t.stats().height > 2);
    }

    #[test]
    fn split_adds_fence_to_parent() {
        let mut t = BPlusTree::new(small());
        for i in 0..5 {
            t.insert(entry(i, i)).unwrap();
        }
        assert_eq!(t.stats().height, 2);
        match t.node(t.root) {
            Node::Inner(i) => assert_eq!(i.seps.len(), 1),
            Node::Leaf(_) => panic!("root should have split"),
        }
        t.check_invariants().unwrap();
    }

    #[test]
    fn duplicate_and_missing() {
        let mut t = BPlusTree::default();
        t.insert(entry(1, 1)).unwrap();
        assert_eq!(t.insert(entry(1, 1)), Err(Error::DuplicateEntry { key: 1, uid: 1 }));
        t.insert(entry(1, 2)).unwrap();
        assert_eq!(t.delete(2, 1), Err(Error::MissingEntry { key: 2, uid: 1 }));
    }

    #[test]
    fn drain_to_empty() {
        let mut t = BPlusTree::new(small());
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut items: Vec<(u64, UserId)> = (0..300).map(|i| (rng.gen_range(0..50), i)).collect();
        for &(k, u) in &items {
            t.insert(entry(k, u)).unwrap();
        }
        items.shuffle(&mut rng);
        for (n, &(k, u)) in items.iter().enumerate() {
            t.delete(k, u).unwrap();
            if n % 37 == 0 {
                t.check_invariants().unwrap();
            }
        }
        assert!(t.is_empty());
        assert_eq!(t.stats().height, 1);
        assert_eq!(t.stats().leaf_count, 1);
        t.check_invariants().unwrap();
    }

    #[test]
    fn delete_after_insert_restores_set() {
        let mut t = BPlusTree::new(small());
        for i in 0..40 {
            t.insert(entry(i * 2, i)).unwrap();
        }
        let before = keys_of(&t);
        t.insert(entry(7, 99)).unwrap();
        t.delete(7, 99).unwrap();
        assert_eq!(keys_of(&t), before);
    }

    #[test]
    fn bulk_load_occupancy_bounds() {
        for e in [1usize, 63, 64, 1000, 5000] {
            let entries: Vec<_> = (0..e as u64).map(|i| entry(i, i)).collect();
            let t = BPlusTree::bulk_load(TreeConfig::default(), entries, 1.0).unwrap();
            t.check_invariants().unwrap();
            let f = LEAF_CAPACITY;
            let nl = t.stats().leaf_count;
            assert!(nl >= e.div_ceil(f) && nl <= (2 * e).div_ceil(f), "E={e} N_l={nl}");
        }
        let t = BPlusTree::bulk_load(small(), (0..1000).map(|i| entry(i / 3, i)).collect(), 0.75).unwrap();
        t.check_invariants().unwrap();
        assert!(BPlusTree::bulk_load(small(), vec![entry(1, 1), entry(1, 1)], 1.0).is_err());
    }

    #[test]
    fn repeated_query_is_free_with_large_buffer() {
        let cfg = TreeConfig { leaf_capacity: 8, inner_capacity: 8, buffer_pages: 10_000 };
        let t = BPlusTree::bulk_load(cfg, (0..2000).map(|i| entry(i, i)).collect(), 1.0).unwrap();
        t.reset_io();
        t.range_scan(100, 900, |_| Flow::Continue);
        let first = t.io();
        assert!(first.misses > 0);
        t.range_scan(100, 900, |_| Flow::Continue);
        assert_eq!(t.io().since(&first).misses, 0);
    }

    #[test]
    fn io_is_deterministic() {
        let run = || {
            let mut t = BPlusTree::new(small());
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
            for i in 0..400 {
                t.insert(entry(rng.gen_range(0..10_000), i)).unwrap();
            }
            t.reset_io();
            for _ in 0..50 {
                let lo = rng.gen_range(0..10_000);
                t.range_scan(lo, lo + 500, |_| Flow::Continue);
            }
            t.io()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn scan_reports_neighbours() {
        let t = BPlusTree::bulk_load(small(), (0..100).map(|i| entry(i * 10, i)).collect(), 1.0).unwrap();
        let s = t.range_scan(205, 240, |_| Flow::Continue);
        assert_eq!(s.entries_visited, 4);
        assert_eq!(s.after, Neighbor::Key(250));
        assert_eq!(s.before, Neighbor::Key(200));
        let s = t.range_scan(0, 5, |_| Flow::Continue);
        assert_eq!(s.before, Neighbor::Nothing);
        let s = t.range_scan(985, 2000, |_| Flow::Continue);
        assert_eq!(s.after, Neighbor::Nothing);
        assert_eq!(s.entries_visited, 1);
    }

    #[test]
    fn skip_and_stop() {
        let t = BPlusTree::bulk_load(small(), (0..100).map(|i| entry(i, i)).collect(), 1.0).unwrap();
        let mut seen = Vec::new();
        t.range_scan(0, 99, |e| {
            seen.push(e.key);
            if e.key % 10 == 0 {
                Flow::SkipTo(e.key + 5)
            } else if e.key == 57 {
                Flow::Stop
            } else {
                Flow::Continue
            }
        });
        assert_eq!(seen, vec![0, 5, 6, 7, 8, 9, 10, 15, 16, 17, 18, 19, 20, 25, 26, 27, 28, 29, 30, 35, 36, 37, 38, 39, 40, 45, 46, 47, 48, 49, 50, 55, 56, 57]);
    }

    #[derive(Debug, Clone)]
    enum Op {
        Insert(u64, UserId),
        Delete(usize),
    }

    fn ops() -> impl Strategy<Value = Vec<Op>> {
        prop::collection::vec(
            prop_oneof![
                3 => (0u64..200, 0u64..50).prop_map(|(k, u)| Op::Insert(k, u)),
                2 => any::<usize>().prop_map(Op::Delete),
            ],
            1..400,
        )
    }

    proptest! {
        #[test]
        fn shadow_set_audit(ops in ops(), cap in 3usize..8) {
            let mut t = BPlusTree::new(TreeConfig { leaf_capacity: cap, inner_capacity: cap, buffer_pages: 4 });
            let mut shadow = BTreeSet::new();
            for op in ops {
                match op {
                    Op::Insert(k, u) => {
                        let r = t.insert(entry(k, u));
                        prop_assert_eq!(r.is_ok(), shadow.insert((k, u)));
                    }
                    Op::Delete(i) => {
                        if shadow.is_empty() { continue; }
                        let victim = *shadow.iter().nth(i % shadow.len()).unwrap();
                        shadow.remove(&victim);
                        prop_assert!(t.delete(victim.0, victim.1).is_ok());
                    }
                }
            }
            prop_assert!(t.check_invariants().is_ok(), "{:?}", t.check_invariants());
            prop_assert_eq!(keys_of(&t), shadow.iter().copied().collect::<Vec<_>>());
        }

        #[test]
        fn range_scan_matches_filter(keys in prop::collection::vec(0u64..5000, 0..600), lo in 0u64..5000, span in 0u64..2000) {
            let entries: Vec<_> = keys.iter().enumerate().map(|(i, &k)| entry(k, i as UserId)).collect();
            let t = BPlusTree::bulk_load(small(), entries.clone(), 0.8).unwrap();
            let hi = lo + span;
            let mut got = Vec::new();
            t.range_scan(lo, hi, |e| { got.push(e.order_key()); Flow::Continue });
            let mut want: Vec<_> = entries.iter().filter(|e| e.key >= lo && e.key <= hi).map(|e| e.order_key()).collect();
            want.sort();
            prop_assert_eq!(got, want);
        }

        #[test]
        fn interval_list_scan_matches_filter(keys in prop::collection::vec(0u64..5000, 0..600), cuts in prop::collection::btree_set(0u64..5000, 0..20)) {
            let entries: Vec<_> = keys.iter().enumerate().map(|(i, &k)| entry(k, i as UserId)).collect();
            let t = BPlusTree::bulk_load(small(), entries.clone(), 1.0).unwrap();
            let cuts: Vec<u64> = cuts.into_iter().collect();
            let iv: Vec<(u64, u64)> = cuts.chunks(2).filter(|c| c.len() == 2).map(|c| (c[0], c[1])).collect();
            let list = IntervalList(iv.clone());
            let mut got = Vec::new();
            t.scan(&list, |e| { got.push(e.order_key()); Flow::Continue });
            let mut want: Vec<_> = entries.iter().filter(|e| iv.iter().any(|&(a, b)| e.key >= a && e.key <= b)).map(|e| e.order_key()).collect();
            want.sort();
            prop_assert_eq!(got, want);
        }
    }
}
