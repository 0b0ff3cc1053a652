//! Moving-object index over the paged B+-tree: the policy-embedded variant
//! (`tid | sv | zv` keys) and the baseline spatial variant (`tid | zv`).

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::geom::{Point, Rect};
use crate::keys::{KeyLayout, SequenceValueMap, DEFAULT_FRAC_BITS};
use crate::motion::{MovingObject, TimePartitionConfig};
use crate::store::{BPlusTree, IoStats, LeafEntry, TreeConfig, TreeStats};
use crate::zcurve::GridConfig;
use crate::UserId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum IndexKind {
    /// Policy-embedded keys.
    Peb,
    /// Baseline spatial keys.
    Bx,
}

impl IndexKind {
    pub fn name(&self) -> &'static str {
        match self {
            IndexKind::Peb => "peb",
            IndexKind::Bx => "bx",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IndexConfig {
    pub grid: GridConfig,
    pub time: TimePartitionConfig,
    pub tree: TreeConfig,
    pub frac_bits: u32,
    /// Bulk-load node fill. Below 1.0 leaves room for later inserts.
    pub fill: f64,
}

impl Default for IndexConfig {
    fn default() -> Self {
        Self {
            grid: GridConfig::default(),
            time: TimePartitionConfig::default(),
            tree: TreeConfig::default(),
            frac_bits: DEFAULT_FRAC_BITS,
            fill: 0.7,
        }
    }
}

/// Largest observed speed in each axis direction (all `>= 0`).
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct DirectionalSpeeds {
    pub pos_x: f64,
    pub neg_x: f64,
    pub pos_y: f64,
    pub neg_y: f64,
}

impl DirectionalSpeeds {
    pub fn observe(&mut self, vx: f64, vy: f64) {
        self.pos_x = self.pos_x.max(vx);
        self.neg_x = self.neg_x.max(-vx);
        self.pos_y = self.pos_y.max(vy);
        self.neg_y = self.neg_y.max(-vy);
    }
}

// Guards the enlargement against rounding between the indexed and the
// extrapolated position.
const ENLARGE_SLACK: f64 = 1e-7;

/// Grows `r` so that every object inside it at `t_q` was inside the result
/// at `t_lab`, given directional maximum speeds; clamped to `space`.
pub fn enlarge(r: &Rect, t_lab: f64, t_q: f64, speeds: &DirectionalSpeeds, space: &Rect) -> Rect {
    let dt = t_q - t_lab;
    let (ahead, back) = (dt.max(0.0), (-dt).max(0.0));
    let out = Rect::new(
        r.x_lo - speeds.pos_x * ahead - speeds.neg_x * back,
        r.y_lo - speeds.pos_y * ahead - speeds.neg_y * back,
        r.x_hi + speeds.neg_x * ahead + speeds.pos_x * back,
        r.y_hi + speeds.neg_y * ahead + speeds.pos_y * back,
    );
    let pad = if dt == 0.0 { 0.0 } else { ENLARGE_SLACK };
    Rect::new(out.x_lo - pad, out.y_lo - pad, out.x_hi + pad, out.y_hi + pad).clamp_to(space)
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
struct Partition {
    count: usize,
    label: f64,
}

#[derive(Debug, Clone)]
pub struct MovingIndex {
    kind: IndexKind,
    cfg: IndexConfig,
    layout: KeyLayout,
    /// Quantized sequence value per user (empty for the baseline).
    svq: HashMap<UserId, u64>,
    tree: BPlusTree,
    partitions: Vec<Partition>,
    speeds: DirectionalSpeeds,
    /// Current key and reported state per user, used only to locate the
    /// old entry on update.
    current: HashMap<UserId, (u64, MovingObject)>,
}

impl MovingIndex {
    /// Policy-embedded index over `objects`, every one of which needs a
    /// sequence value in `sv`.
    pub fn build_peb(cfg: IndexConfig, objects: &[MovingObject], sv: &SequenceValueMap) -> Result<Self> {
        let layout = KeyLayout::peb(cfg.time.partitions(), sv.max_value(), cfg.frac_bits, cfg.grid.z_bits())?;
        let mut svq = HashMap::with_capacity(sv.len());
        for (u, v) in sv.iter() {
            svq.insert(u, layout.quantize_sv(v)?);
        }
        Self::build(IndexKind::Peb, cfg, layout, svq, objects)
    }

    pub fn build_bx(cfg: IndexConfig, objects: &[MovingObject]) -> Result<Self> {
        let layout = KeyLayout::bx(cfg.time.partitions(), cfg.grid.z_bits())?;
        Self::build(IndexKind::Bx, cfg, layout, HashMap::new(), objects)
    }

    fn build(
        kind: IndexKind,
        cfg: IndexConfig,
        layout: KeyLayout,
        svq: HashMap<UserId, u64>,
        objects: &[MovingObject],
    ) -> Result<Self> {
        let mut index = Self {
            kind,
            cfg,
            layout,
            svq,
            tree: BPlusTree::new(cfg.tree),
            partitions: vec![Partition::default(); cfg.time.partitions() as usize],
            speeds: DirectionalSpeeds::default(),
            current: HashMap::with_capacity(objects.len()),
        };
        let mut entries = Vec::with_capacity(objects.len());
        for o in objects {
            let t_lab = cfg.time.label_timestamp(o.t_u);
            let (entry, tid) = index.make_entry(o, t_lab)?;
            if index.current.insert(o.uid, (entry.key, *o)).is_some() {
                return Err(Error::DuplicateEntry { key: entry.key, uid: o.uid });
            }
            index.claim(tid, t_lab)?;
            index.speeds.observe(o.vx, o.vy);
            entries.push(entry);
        }
        index.tree = BPlusTree::bulk_load(cfg.tree, entries, cfg.fill)?;
        Ok(index)
    }

    fn claim(&mut self, tid: u32, t_lab: f64) -> Result<()> {
        let p = &mut self.partitions[tid as usize];
        if p.count > 0 && p.label != t_lab {
            return Err(Error::PartitionConflict { tid, held: p.label, incoming: t_lab });
        }
        p.label = t_lab;
        p.count += 1;
        Ok(())
    }

    fn make_entry(&self, o: &MovingObject, t_lab: f64) -> Result<(LeafEntry, u32)> {
        let tid = self.cfg.time.index_partition(t_lab)?;
        let zv = self.cfg.grid.z_of_point(&o.position_at(t_lab));
        let key = match self.kind {
            IndexKind::Peb => {
                let svq = *self.svq.get(&o.uid).ok_or(Error::NoSequenceValue(o.uid))?;
                self.layout.compose(tid, svq, zv)?
            }
            IndexKind::Bx => self.layout.compose(tid, 0, zv)?,
        };
        let entry =
            LeafEntry { key, uid: o.uid, x: o.x, y: o.y, vx: o.vx, vy: o.vy, t: o.t_u, policy_ref: o.uid };
        Ok((entry, tid))
    }

    /// Indexes a user not yet present, labelled from its own update time.
    pub fn insert(&mut self, o: &MovingObject) -> Result<()> {
        if let Some(&(key, _)) = self.current.get(&o.uid) {
            return Err(Error::DuplicateEntry { key, uid: o.uid });
        }
        self.place(o, self.cfg.time.label_timestamp(o.t_u))
    }

    fn place(&mut self, o: &MovingObject, t_lab: f64) -> Result<()> {
        let (entry, tid) = self.make_entry(o, t_lab)?;
        let p = self.partitions[tid as usize];
        if p.count > 0 && p.label != t_lab {
            return Err(Error::PartitionConflict { tid, held: p.label, incoming: t_lab });
        }
        self.tree.insert(entry)?;
        self.claim(tid, t_lab)?;
        self.speeds.observe(o.vx, o.vy);
        self.current.insert(o.uid, (entry.key, *o));
        Ok(())
    }

    /// Removes a user's entry.
    pub fn remove(&mut self, uid: UserId) -> Result<MovingObject> {
        let (key, obj) = *self.current.get(&uid).ok_or(Error::UnknownUser(uid))?;
        self.tree.delete(key, uid)?;
        let (tid, _, _) = self.layout.split(key);
        self.partitions[tid as usize].count -= 1;
        self.current.remove(&uid);
        Ok(obj)
    }

    /// Replaces the indexed state of `o.uid` with `o`, labelled from `now`.
    pub fn update(&mut self, o: &MovingObject, now: f64) -> Result<()> {
        let old = self.remove(o.uid)?;
        let t_lab = self.cfg.time.label_timestamp(now);
        if let Err(e) = self.place(o, t_lab) {
            // keep the index consistent with what callers last saw
            let back = self.cfg.time.label_timestamp(old.t_u);
            self.place(&old, back)?;
            return Err(e);
        }
        Ok(())
    }

    pub fn kind(&self) -> IndexKind {
        self.kind
    }

    pub fn config(&self) -> &IndexConfig {
        &self.cfg
    }

    pub fn layout(&self) -> &KeyLayout {
        &self.layout
    }

    pub fn grid(&self) -> &GridConfig {
        &self.cfg.grid
    }

    pub fn space(&self) -> Rect {
        self.cfg.grid.space()
    }

    pub fn speeds(&self) -> &DirectionalSpeeds {
        &self.speeds
    }

    pub fn tree(&self) -> &BPlusTree {
        &self.tree
    }

    pub fn len(&self) -> usize {
        self.current.len()
    }

    pub fn is_empty(&self) -> bool {
        self.current.is_empty()
    }

    pub fn stats(&self) -> TreeStats {
        self.tree.stats()
    }

    pub fn io(&self) -> IoStats {
        self.tree.io()
    }

    pub fn reset_io(&self) {
        self.tree.reset_io();
    }

    /// `(tid, label timestamp)` of every partition holding entries, by tid.
    pub fn live_partitions(&self) -> Vec<(u32, f64)> {
        self.partitions
            .iter()
            .enumerate()
            .filter(|(_, p)| p.count > 0)
            .map(|(i, p)| (i as u32, p.label))
            .collect()
    }

    pub fn partition_count(&self, tid: u32) -> usize {
        self.partitions.get(tid as usize).map_or(0, |p| p.count)
    }

    pub fn svq_of(&self, uid: UserId) -> Option<u64> {
        self.svq.get(&uid).copied()
    }

    pub fn object(&self, uid: UserId) -> Option<&MovingObject> {
        self.current.get(&uid).map(|(_, o)| o)
    }

    pub fn objects(&self) -> impl Iterator<Item = &MovingObject> {
        self.current.values().map(|(_, o)| o)
    }

    pub fn key_of(&self, uid: UserId) -> Option<u64> {
        self.current.get(&uid).map(|&(k, _)| k)
    }

    /// Enlarged query rectangle for one partition.
    pub fn enlarge_for(&self, r: &Rect, t_lab: f64, t_q: f64) -> Rect {
        enlarge(r, t_lab, t_q, &self.speeds, &self.space())
    }

    /// Serialized page images plus a header describing the key scheme.
    pub fn write_snapshot<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut meta = format!(
            "kind={}\nside={}\nlevels={}\norder={:?}\ndelta_t_mu={}\nn={}\ntid_bits={}\nsv_bits={}\nfrac_bits={}\nz_bits={}\n",
            self.kind.name(),
            self.cfg.grid.side,
            self.cfg.grid.levels,
            self.cfg.grid.order,
            self.cfg.time.delta_t_mu,
            self.cfg.time.n,
            self.layout.tid_bits,
            self.layout.sv_bits,
            self.layout.frac_bits,
            self.layout.z_bits,
        );
        let speeds = self.speeds;
        meta.push_str(&format!("speeds={},{},{},{}\n", speeds.pos_x, speeds.neg_x, speeds.pos_y, speeds.neg_y));
        crate::store::write_page_images(&self.tree, meta.as_bytes(), w)
    }

    /// Rebuilds an index from a snapshot written by [`MovingIndex::write_snapshot`].
    pub fn read_snapshot<R: std::io::Read>(r: R) -> Result<Self> {
        let (tree, meta) = crate::store::read_page_images(r)?;
        let meta = String::from_utf8(meta).map_err(|e| Error::Snapshot(e.to_string()))?;
        let kv: HashMap<&str, &str> = meta.lines().filter_map(|l| l.split_once('=')).collect();
        let get = |k: &str| kv.get(k).copied().ok_or_else(|| Error::Snapshot(format!("missing {k}")));
        let num = |k: &str| -> Result<f64> { get(k)?.parse().map_err(|_| Error::Snapshot(format!("bad {k}"))) };
        let kind = match get("kind")? {
            "peb" => IndexKind::Peb,
            "bx" => IndexKind::Bx,
            other => return Err(Error::Snapshot(format!("unknown index kind {other}"))),
        };
        let order = match get("order")? {
            "YLow" => crate::zcurve::BitOrder::YLow,
            _ => crate::zcurve::BitOrder::XLow,
        };
        let grid = GridConfig::new(num("side")?, num("levels")? as u32).with_order(order);
        let time = TimePartitionConfig::new(num("delta_t_mu")?, num("n")? as u32);
        let layout = KeyLayout {
            tid_bits: num("tid_bits")? as u32,
            sv_bits: num("sv_bits")? as u32,
            frac_bits: num("frac_bits")? as u32,
            z_bits: num("z_bits")? as u32,
        };
        let sp: Vec<f64> = get("speeds")?.split(',').filter_map(|s| s.parse().ok()).collect();
        if sp.len() != 4 {
            return Err(Error::Snapshot("bad speeds".into()));
        }
        let cfg = IndexConfig { grid, time, tree: tree.config(), frac_bits: layout.frac_bits, fill: 1.0 };
        let mut index = Self {
            kind,
            cfg,
            layout,
            svq: HashMap::new(),
            tree: BPlusTree::new(cfg.tree),
            partitions: vec![Partition::default(); time.partitions() as usize],
            speeds: DirectionalSpeeds { pos_x: sp[0], neg_x: sp[1], pos_y: sp[2], neg_y: sp[3] },
            current: HashMap::new(),
        };
        for e in tree.entries() {
            let (tid, svq, _) = layout.split(e.key);
            let o = MovingObject::new(e.uid, e.x, e.y, e.vx, e.vy, e.t);
            let t_lab = time.label_timestamp(e.t);
            index.claim(tid, t_lab)?;
            if kind == IndexKind::Peb {
                index.svq.insert(e.uid, svq);
            }
            index.current.insert(e.uid, (e.key, o));
        }
        index.tree = tree;
        Ok(index)
    }

    /// Position of `uid` at `t`, if indexed.
    pub fn position_at(&self, uid: UserId, t: f64) -> Option<Point> {
        self.object(uid).map(|o| o.position_at(t))
    }
}
