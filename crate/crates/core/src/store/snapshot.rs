//! Page-image persistence: a header page followed by one 4 KiB image per page.

use std::io::{Read, Write};

use super::{BPlusTree, Inner, Leaf, LeafEntry, Node, PageId, TreeConfig, PAGE_HEADER_BYTES, PAGE_SIZE};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"PEBX";
const VERSION: u32 = 1;
const NONE_PAGE: u32 = u32::MAX;

const KIND_FREE: u8 = 0;
const KIND_LEAF: u8 = 1;
const KIND_INNER: u8 = 2;

/// Fixed part of the header page before the caller's metadata.
const HEADER_FIXED: usize = 4 + 4 * 8 + 8 + 4;
pub const MAX_META_BYTES: usize = PAGE_SIZE - HEADER_FIXED;

struct Cursor<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let s = self
            .buf
            .get(self.at..self.at + n)
            .ok_or_else(|| Error::Snapshot("truncated page".into()))?;
        self.at += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn opt_page(p: Option<PageId>) -> u32 {
    p.unwrap_or(NONE_PAGE)
}

fn page_opt(p: u32) -> Option<PageId> {
    (p != NONE_PAGE).then_some(p)
}

fn encode_node(node: Option<&Node>) -> Result<Vec<u8>> {
    let mut b = Vec::with_capacity(PAGE_SIZE);
    match node {
        None => b.push(KIND_FREE),
        Some(Node::Leaf(l)) => {
            b.push(KIND_LEAF);
            b.push(0);
            b.extend_from_slice(&(l.entries.len() as u16).to_le_bytes());
            b.extend_from_slice(&opt_page(l.next).to_le_bytes());
            b.extend_from_slice(&opt_page(l.prev).to_le_bytes());
            b.resize(PAGE_HEADER_BYTES, 0);
            for e in &l.entries {
                b.extend_from_slice(&e.key.to_le_bytes());
                b.extend_from_slice(&e.uid.to_le_bytes());
                for v in [e.x, e.y, e.vx, e.vy, e.t] {
                    b.extend_from_slice(&v.to_le_bytes());
                }
                b.extend_from_slice(&e.policy_ref.to_le_bytes());
            }
        }
        Some(Node::Inner(i)) => {
            b.push(KIND_INNER);
            b.push(0);
            b.extend_from_slice(&(i.children.len() as u16).to_le_bytes());
            b.resize(PAGE_HEADER_BYTES, 0);
            for &(k, u) in &i.seps {
                b.extend_from_slice(&k.to_le_bytes());
                b.extend_from_slice(&u.to_le_bytes());
            }
            for &c in &i.children {
                b.extend_from_slice(&(c as u64).to_le_bytes());
            }
        }
    }
    if b.len() > PAGE_SIZE {
        return Err(Error::Snapshot(format!("node needs {} bytes, page holds {PAGE_SIZE}", b.len())));
    }
    b.resize(PAGE_SIZE, 0);
    Ok(b)
}

fn decode_node(page: &[u8]) -> Result<Option<Node>> {
    let mut c = Cursor { buf: page, at: 0 };
    let kind = c.u8()?;
    c.u8()?;
    let count = c.u16()? as usize;
    match kind {
        KIND_FREE => Ok(None),
        KIND_LEAF => {
            let next = page_opt(c.u32()?);
            let prev = page_opt(c.u32()?);
            c.at = PAGE_HEADER_BYTES;
            let mut entries = Vec::with_capacity(count);
            for _ in 0..count {
                entries.push(LeafEntry {
                    key: c.u64()?,
                    uid: c.u64()?,
                    x: c.f64()?,
                    y: c.f64()?,
                    vx: c.f64()?,
                    vy: c.f64()?,
                    t: c.f64()?,
                    policy_ref: c.u64()?,
                });
            }
            Ok(Some(Node::Leaf(Leaf { entries, next, prev })))
        }
        KIND_INNER => {
            if count == 0 {
                return Err(Error::Snapshot("internal page without children".into()));
            }
            c.at = PAGE_HEADER_BYTES;
            let mut seps = Vec::with_capacity(count - 1);
            for _ in 1..count {
                seps.push((c.u64()?, c.u64()?));
            }
            let mut children = Vec::with_capacity(count);
            for _ in 0..count {
                children.push(c.u64()? as PageId);
            }
            Ok(Some(Node::Inner(Inner { seps, children })))
        }
        k => Err(Error::Snapshot(format!("unknown page kind {k}"))),
    }
}

/// Writes the tree as a header page (carrying `meta`) plus one image per page.
pub fn write_page_images<W: Write>(tree: &BPlusTree, meta: &[u8], mut w: W) -> Result<()> {
    if meta.len() > MAX_META_BYTES {
        return Err(Error::Snapshot(format!("metadata of {} bytes does not fit the header page", meta.len())));
    }
    let cfg = tree.config();
    let mut h = Vec::with_capacity(PAGE_SIZE);
    h.extend_from_slice(MAGIC);
    for v in [
        VERSION,
        PAGE_SIZE as u32,
        tree.nodes.len() as u32,
        tree.root,
        tree.height,
        cfg.leaf_capacity as u32,
        cfg.inner_capacity as u32,
        cfg.buffer_pages as u32,
    ] {
        h.extend_from_slice(&v.to_le_bytes());
    }
    h.extend_from_slice(&(tree.len() as u64).to_le_bytes());
    h.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    h.extend_from_slice(meta);
    h.resize(PAGE_SIZE, 0);
    w.write_all(&h)?;
    for n in &tree.nodes {
        w.write_all(&encode_node(n.as_ref())?)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a snapshot, returning the tree and the header metadata.
pub fn read_page_images<R: Read>(mut r: R) -> Result<(BPlusTree, Vec<u8>)> {
    let mut page = vec![0u8; PAGE_SIZE];
    r.read_exact(&mut page)?;
    let mut c = Cursor { buf: &page, at: 0 };
    if c.take(4)? != MAGIC {
        return Err(Error::Snapshot("bad magic".into()));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(Error::Snapshot(format!("unsupported version {version}")));
    }
    let page_size = c.u32()? as usize;
    if page_size != PAGE_SIZE {
        return Err(Error::Snapshot(format!("page size {page_size} != {PAGE_SIZE}")));
    }
    let pages = c.u32()? as usize;
    let root = c.u32()?;
    let height = c.u32()?;
    let cfg = TreeConfig {
        leaf_capacity: c.u32()? as usize,
        inner_capacity: c.u32()? as usize,
        buffer_pages: c.u32()? as usize,
    };
    let len = c.u64()? as usize;
    let meta_len = c.u32()? as usize;
    let meta = c.take(meta_len)?.to_vec();
    let mut nodes = Vec::with_capacity(pages);
    for _ in 0..pages {
        r.read_exact(&mut page)?;
        nodes.push(decode_node(&page)?);
    }
    if root as usize >= pages || nodes[root as usize].is_none() {
        return Err(Error::Snapshot("root page missing".into()));
    }
    let tree = BPlusTree::from_parts(cfg, nodes, root, height);
    if tree.len() != len {
        return Err(Error::Snapshot(format!("header says {len} entries, pages hold {}", tree.len())));
    }
    tree.check_invariants().map_err(Error::Snapshot)?;
    Ok((tree, meta))
}
