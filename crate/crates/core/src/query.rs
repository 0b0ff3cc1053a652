//! Privacy-aware range and k-nearest-neighbour queries over the
//! policy-embedded index, their spatial-then-filter baselines, and
//! brute-force reference implementations.

use std::collections::{HashMap, HashSet};

use crate::error::{Error, Result};
use crate::geom::{Point, Rect};
use crate::index::{IndexKind, MovingIndex};
use crate::keys::KeyLayout;
use crate::motion::MovingObject;
use crate::policy::PolicyStore;
use crate::store::{Flow, IntervalList, KeyRanges, LeafEntry, Neighbor, ScanStats};
use crate::zcurve::{CellRect, GridConfig, ZValue};
use crate::UserId;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrqRequest {
    pub qid: UserId,
    pub rect: Rect,
    pub t_q: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PknnRequest {
    pub qid: UserId,
    pub loc: Point,
    pub k: usize,
    pub t_q: f64,
}

/// Per-query work counters. `io` is the number of buffer misses.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct QueryStats {
    pub io: u64,
    /// Buffer misses on leaf pages.
    pub leaf_io: u64,
    pub page_reads: u64,
    pub entries_examined: u64,
    pub scans: u64,
}

impl QueryStats {
    fn add_scan(&mut self, s: &ScanStats) {
        self.entries_examined += s.entries_visited;
        self.scans += 1;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KnnResult {
    /// `(uid, distance)` ascending by distance, then uid.
    pub neighbors: Vec<(UserId, f64)>,
    /// Fewer than `k` visible users exist.
    pub short: bool,
}

impl KnnResult {
    fn from_candidates(mut cands: Vec<(f64, UserId)>, k: usize) -> Self {
        cands.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let short = cands.len() < k;
        cands.truncate(k);
        Self { neighbors: cands.into_iter().map(|(d, u)| (u, d)).collect(), short }
    }

    pub fn kth_distance(&self) -> Option<f64> {
        self.neighbors.last().map(|&(_, d)| d)
    }
}

// ---------------------------------------------------------------------------
// friend lists

/// Owners sharing one quantized sequence value.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FriendRow {
    pub svq: u64,
    /// Sorted by id.
    pub members: Vec<UserId>,
}

/// Users whose policies name the list owner, grouped by sequence value in
/// ascending order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FriendList {
    pub owner: UserId,
    rows: Vec<FriendRow>,
}

impl FriendList {
    pub fn new(owner: UserId, policies: &PolicyStore, index: &MovingIndex) -> Result<Self> {
        let mut pairs: Vec<(u64, UserId)> = policies
            .owners_visible_to(owner)
            .iter()
            .filter(|&&u| u != owner)
            .map(|&u| index.svq_of(u).map(|s| (s, u)).ok_or(Error::NoSequenceValue(u)))
            .collect::<Result<_>>()?;
        pairs.sort_unstable();
        let mut rows: Vec<FriendRow> = Vec::new();
        for (svq, u) in pairs {
            match rows.last_mut() {
                Some(r) if r.svq == svq => r.members.push(u),
                _ => rows.push(FriendRow { svq, members: vec![u] }),
            }
        }
        Ok(Self { owner, rows })
    }

    pub fn rows(&self) -> &[FriendRow] {
        &self.rows
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn friend_count(&self) -> usize {
        self.rows.iter().map(|r| r.members.len()).sum()
    }

    pub fn sv_min(&self) -> Option<u64> {
        self.rows.first().map(|r| r.svq)
    }

    pub fn sv_max(&self) -> Option<u64> {
        self.rows.last().map(|r| r.svq)
    }

    fn row_of(&self, svq: u64) -> Option<usize> {
        self.rows.binary_search_by_key(&svq, |r| r.svq).ok()
    }

    fn is_member(&self, row: usize, uid: UserId) -> bool {
        self.rows[row].members.binary_search(&uid).is_ok()
    }
}

/// Friend lists of every user, maintained alongside the index.
#[derive(Debug, Clone, Default)]
pub struct FriendLists {
    lists: HashMap<UserId, FriendList>,
}

impl FriendLists {
    pub fn build(policies: &PolicyStore, index: &MovingIndex) -> Result<Self> {
        let mut lists = HashMap::with_capacity(policies.user_count());
        for u in policies.users() {
            lists.insert(u, FriendList::new(u, policies, index)?);
        }
        Ok(Self { lists })
    }

    pub fn get(&self, uid: UserId) -> Result<&FriendList> {
        self.lists.get(&uid).ok_or(Error::UnknownUser(uid))
    }
}

// ---------------------------------------------------------------------------
// key regions

/// Keys `tid | svq | zv` with `svq` from `rows` and the cell of `zv` inside
/// one of `rects`, enumerated lazily by successor search.
#[derive(Debug, Clone)]
pub struct ZRegion<'a> {
    layout: KeyLayout,
    grid: &'a GridConfig,
    tid: u32,
    rows: Vec<u64>,
    rects: Vec<CellRect>,
    first_z: Option<ZValue>,
}

impl<'a> ZRegion<'a> {
    pub fn new(layout: KeyLayout, grid: &'a GridConfig, tid: u32, rows: Vec<u64>, rects: Vec<CellRect>) -> Self {
        debug_assert!(rows.windows(2).all(|w| w[0] < w[1]));
        let mut r = Self { layout, grid, tid, rows, rects, first_z: None };
        r.first_z = r.next_z(0);
        r
    }

    fn next_z(&self, from: ZValue) -> Option<ZValue> {
        self.rects.iter().filter_map(|c| self.grid.next_in_rect(from, c)).min()
    }
}

impl KeyRanges for ZRegion<'_> {
    fn seek(&self, from: u64) -> Option<u64> {
        let first_z = self.first_z?;
        let (t, s, z) = self.layout.split(from);
        let compose = |svq| self.layout.compose_unchecked(self.tid, svq, first_z);
        if t < self.tid {
            return self.rows.first().map(|&s0| compose(s0));
        }
        if t > self.tid {
            return None;
        }
        let mut i = self.rows.partition_point(|&r| r < s);
        if self.rows.get(i) == Some(&s) {
            if let Some(z2) = self.next_z(z) {
                return Some(self.layout.compose_unchecked(self.tid, s, z2));
            }
            i += 1;
        }
        self.rows.get(i).map(|&r| compose(r))
    }
}

/// Cross product of sequence values and Z-intervals as key intervals in
/// partition `tid`, merged into sorted, pairwise-disjoint intervals.
pub fn build_prq_key_intervals(
    svqs: &[u64],
    z_intervals: &[(ZValue, ZValue)],
    tid: u32,
    layout: &KeyLayout,
) -> Vec<(u64, u64)> {
    let mut iv: Vec<(u64, u64)> = svqs
        .iter()
        .flat_map(|&s| {
            z_intervals
                .iter()
                .map(move |&(a, b)| (layout.compose_unchecked(tid, s, a), layout.compose_unchecked(tid, s, b)))
        })
        .collect();
    merge_intervals(&mut iv);
    iv
}

/// Sorts and merges overlapping or touching inclusive intervals in place.
pub fn merge_intervals(iv: &mut Vec<(u64, u64)>) {
    iv.sort_unstable();
    let mut out: Vec<(u64, u64)> = Vec::with_capacity(iv.len());
    for &(lo, hi) in iv.iter() {
        match out.last_mut() {
            Some(last) if lo <= last.1.saturating_add(1) => last.1 = last.1.max(hi),
            _ => out.push((lo, hi)),
        }
    }
    *iv = out;
}

// ---------------------------------------------------------------------------
// range queries

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum IntervalRoute {
    /// Successor search over the rows x rectangle region.
    #[default]
    Lazy,
    /// Materialized, merged key intervals.
    Explicit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PrqOptions {
    /// Stop scanning a sequence value once all its owners were seen.
    pub skip_rule: bool,
    pub route: IntervalRoute,
}

impl Default for PrqOptions {
    fn default() -> Self {
        Self { skip_rule: true, route: IntervalRoute::Lazy }
    }
}

fn check_kind(index: &MovingIndex, kind: IndexKind) -> Result<()> {
    if index.kind() != kind {
        return Err(Error::WrongIndex { expected: kind.name() });
    }
    Ok(())
}

fn check_prq(req: &PrqRequest, index: &MovingIndex, policies: &PolicyStore) -> Result<()> {
    if !policies.has_user(req.qid) {
        return Err(Error::UnknownUser(req.qid));
    }
    if !req.rect.is_valid() || !index.space().contains_rect(&req.rect) {
        return Err(Error::InvalidQuery(format!("window {:?} outside the space", req.rect)));
    }
    Ok(())
}

/// Next key after every key of row `(tid, svq)`.
fn row_end(layout: &KeyLayout, tid: u32, svq: u64) -> Option<u64> {
    layout.compose_unchecked(tid, svq, 0).checked_add(1u64 << layout.z_bits)
}

#[inline]
fn verify(e: &LeafEntry, viewer: UserId, t_q: f64, policies: &PolicyStore) -> Option<Point> {
    let pos = MovingObject::new(e.uid, e.x, e.y, e.vx, e.vy, e.t).position_at(t_q);
    policies.visible(e.uid, viewer, &pos, t_q).then_some(pos)
}

fn finish(index: &MovingIndex, before: crate::store::IoStats, mut stats: QueryStats) -> QueryStats {
    let d = index.io().since(&before);
    stats.io = d.misses;
    stats.leaf_io = d.leaf_misses;
    stats.page_reads = d.logical_reads;
    stats
}

/// Privacy-aware range query on the policy-embedded index: users inside
/// `req.rect` at `req.t_q` whose policy lets `req.qid` see them there.
/// Result sorted by uid.
pub fn prq(
    index: &MovingIndex,
    policies: &PolicyStore,
    friends: &FriendList,
    req: &PrqRequest,
    opts: PrqOptions,
) -> Result<(Vec<UserId>, QueryStats)> {
    check_kind(index, IndexKind::Peb)?;
    check_prq(req, index, policies)?;
    let before = index.io();
    let mut stats = QueryStats::default();
    let mut result = Vec::new();
    if friends.is_empty() {
        return Ok((result, finish(index, before, stats)));
    }
    let layout = *index.layout();
    let grid = index.grid();
    let rows = friends.rows();
    let mut remaining: Vec<usize> = rows.iter().map(|r| r.members.len()).collect();
    let mut seen: HashSet<UserId> = HashSet::new();

    for (tid, t_lab) in index.live_partitions() {
        let active: Vec<u64> =
            rows.iter().zip(&remaining).filter(|&(_, &n)| n > 0 || !opts.skip_rule).map(|(r, _)| r.svq).collect();
        if active.is_empty() {
            break;
        }
        let window = index.enlarge_for(&req.rect, t_lab, req.t_q);
        let cells = grid.cell_rect(&window);
        let mut visit = |e: &LeafEntry| {
            let (_, svq, _) = layout.split(e.key);
            let Some(j) = friends.row_of(svq) else { return Flow::Continue };
            if e.uid == req.qid || !friends.is_member(j, e.uid) {
                return Flow::Continue;
            }
            if seen.insert(e.uid) {
                remaining[j] -= 1;
                if let Some(pos) = verify(e, req.qid, req.t_q, policies) {
                    if req.rect.contains(&pos) {
                        result.push(e.uid);
                    }
                }
            }
            if opts.skip_rule && remaining[j] == 0 {
                return row_end(&layout, tid, svq).map_or(Flow::Stop, Flow::SkipTo);
            }
            Flow::Continue
        };
        let s = match opts.route {
            IntervalRoute::Lazy => {
                let region = ZRegion::new(layout, grid, tid, active, vec![cells]);
                index.tree().scan(&region, &mut visit)
            }
            IntervalRoute::Explicit => {
                let z = grid.z_decompose(&cells)?;
                let list = IntervalList(build_prq_key_intervals(&active, &z, tid, &layout));
                index.tree().scan(&list, &mut visit)
            }
        };
        stats.add_scan(&s);
    }
    result.sort_unstable();
    Ok((result, finish(index, before, stats)))
}

/// Range query on the spatial baseline: spatial search of the enlarged
/// window, then policy filtering. Result sorted by uid.
pub fn baseline_range(index: &MovingIndex, policies: &PolicyStore, req: &PrqRequest) -> Result<(Vec<UserId>, QueryStats)> {
    check_kind(index, IndexKind::Bx)?;
    check_prq(req, index, policies)?;
    let before = index.io();
    let mut stats = QueryStats::default();
    let mut result = Vec::new();
    for (tid, t_lab) in index.live_partitions() {
        let window = index.enlarge_for(&req.rect, t_lab, req.t_q);
        let region = ZRegion::new(*index.layout(), index.grid(), tid, vec![0], vec![index.grid().cell_rect(&window)]);
        let s = index.tree().scan(&region, |e| {
            if e.uid != req.qid {
                if let Some(pos) = verify(e, req.qid, req.t_q, policies) {
                    if req.rect.contains(&pos) {
                        result.push(e.uid);
                    }
                }
            }
            Flow::Continue
        });
        stats.add_scan(&s);
    }
    result.sort_unstable();
    Ok((result, finish(index, before, stats)))
}

/// Literal evaluation over all objects. Result sorted by uid.
pub fn oracle_range<'a>(
    objects: impl IntoIterator<Item = &'a MovingObject>,
    policies: &PolicyStore,
    req: &PrqRequest,
) -> Vec<UserId> {
    let mut out: Vec<UserId> = objects
        .into_iter()
        .filter(|o| o.uid != req.qid)
        .filter(|o| {
            let p = o.position_at(req.t_q);
            req.rect.contains(&p) && policies.visible(o.uid, req.qid, &p, req.t_q)
        })
        .map(|o| o.uid)
        .collect();
    out.sort_unstable();
    out
}

// ---------------------------------------------------------------------------
// nearest neighbours

/// Estimated distance to the k'th nearest of `n` uniformly spread users in
/// a square of side `side`.
pub fn estimate_dk(k: usize, n: usize, side: f64) -> f64 {
    let ratio = (k as f64 / n.max(1) as f64).min(1.0);
    side * (2.0 / std::f64::consts::PI.sqrt()) * (1.0 - (1.0 - ratio.sqrt()).sqrt())
}

/// Visit order over the (friend row, expansion round) search matrix.
pub trait SearchOrder {
    fn cells(&self, rows: usize, cols: usize) -> Box<dyn Iterator<Item = (usize, usize)>>;
}

/// Anti-diagonals from the top-left cell, direction alternating per
/// diagonal so that row and round advance in turn.
#[derive(Debug, Clone, Copy, Default)]
pub struct Triangular;

impl SearchOrder for Triangular {
    fn cells(&self, rows: usize, cols: usize) -> Box<dyn Iterator<Item = (usize, usize)>> {
        let diagonals = (rows + cols).saturating_sub(1);
        Box::new((0..diagonals).flat_map(move |d| {
            let j_lo = d.saturating_sub(cols - 1);
            let j_hi = d.min(rows - 1);
            let down = d % 2 == 1;
            (0..=j_hi - j_lo).map(move |i| {
                let j = if down { j_lo + i } else { j_hi - i };
                (j, d - j)
            })
        }))
    }
}

/// Row by row, every round of a row before the next row.
#[derive(Debug, Clone, Copy, Default)]
pub struct RowMajor;

impl SearchOrder for RowMajor {
    fn cells(&self, rows: usize, cols: usize) -> Box<dyn Iterator<Item = (usize, usize)>> {
        Box::new((0..rows).flat_map(move |j| (0..cols).map(move |i| (j, i))))
    }
}

/// Round by round across all rows.
#[derive(Debug, Clone, Copy, Default)]
pub struct ColumnMajor;

impl SearchOrder for ColumnMajor {
    fn cells(&self, rows: usize, cols: usize) -> Box<dyn Iterator<Item = (usize, usize)>> {
        Box::new((0..cols).flat_map(move |i| (0..rows).map(move |j| (j, i))))
    }
}

/// Rounds needed before a square of half-side `i * r_q` around `q` covers
/// the whole space.
fn rounds_to_cover(q: &Point, side: f64, r_q: f64) -> usize {
    let reach = q.x.abs().max((side - q.x).abs()).max(q.y.abs()).max((side - q.y).abs());
    ((reach / r_q).ceil() as usize).max(1)
}

/// Search state over the friend-row by round matrix of one PkNN query.
struct SearchMatrix<'a> {
    index: &'a MovingIndex,
    policies: &'a PolicyStore,
    friends: &'a FriendList,
    req: &'a PknnRequest,
    parts: Vec<(u32, f64)>,
    r_q: f64,
    cols: usize,
    /// `[partition][round]` single Z-interval of the enlarged round square.
    col_z: Vec<Vec<Option<(ZValue, ZValue)>>>,
    /// `[row][partition]` contiguous Z-range already known in full.
    covered: Vec<Vec<Option<(ZValue, ZValue)>>>,
    remaining: Vec<usize>,
    seen: HashSet<UserId>,
    cands: Vec<(f64, UserId)>,
    stats: QueryStats,
}

impl<'a> SearchMatrix<'a> {
    fn z_max(&self) -> ZValue {
        self.index.grid().z_max()
    }

    fn square_z(&self, half: f64, t_lab: f64) -> (ZValue, ZValue) {
        let sq = Rect::square(self.req.loc, half);
        let window = self.index.enlarge_for(&sq, t_lab, self.req.t_q);
        let grid = self.index.grid();
        grid.z_bounds(&grid.cell_rect(&window))
    }

    fn column(&mut self, p: usize, col: usize) -> (ZValue, ZValue) {
        if let Some(z) = self.col_z[p][col] {
            return z;
        }
        let z = if col + 1 == self.cols { (0, self.z_max()) } else { self.square_z((col + 1) as f64 * self.r_q, self.parts[p].1) };
        self.col_z[p][col] = Some(z);
        z
    }

    fn row_open(&self, j: usize) -> bool {
        self.remaining[j] > 0 && self.covered[j].iter().any(|c| *c != Some((0, self.z_max())))
    }

    /// Scans `[zs, ze]` of row `j` in partition `p`, skipping the part
    /// already covered, and widens the coverage with what the scan saw.
    fn scan_row(&mut self, j: usize, p: usize, zs: ZValue, ze: ZValue) {
        if self.remaining[j] == 0 {
            return;
        }
        let (tid, _) = self.parts[p];
        let layout = *self.index.layout();
        let svq = self.friends.rows()[j].svq;
        let key = |z| layout.compose_unchecked(tid, svq, z);
        let mut parts = Vec::with_capacity(2);
        let cov = self.covered[j][p];
        match cov {
            None => parts.push((zs, ze)),
            Some((c_lo, c_hi)) => {
                if zs < c_lo {
                    parts.push((zs, c_lo - 1));
                }
                if ze > c_hi {
                    parts.push((c_hi + 1, ze));
                }
            }
        }
        if parts.is_empty() {
            return;
        }
        let first = parts[0].0;
        let last = parts[parts.len() - 1].1;
        let list = IntervalList(parts.iter().map(|&(a, b)| (key(a), key(b))).collect());
        let (friends, policies, req) = (self.friends, self.policies, self.req);
        let (seen, remaining, cands) = (&mut self.seen, &mut self.remaining, &mut self.cands);
        let s = self.index.tree().scan(&list, |e| {
            if e.uid == req.qid || !friends.is_member(j, e.uid) {
                return Flow::Continue;
            }
            if seen.insert(e.uid) {
                remaining[j] -= 1;
                if let Some(pos) = verify(e, req.qid, req.t_q, policies) {
                    cands.push((pos.dist(&req.loc), e.uid));
                }
            }
            if remaining[j] == 0 {
                Flow::Stop
            } else {
                Flow::Continue
            }
        });
        self.stats.add_scan(&s);
        if self.remaining[j] == 0 {
            return;
        }
        // keys seen just outside the scanned ranges bound the empty stretch
        let in_row = |k: u64| {
            let (t, sv, z) = layout.split(k);
            (t == tid && sv == svq).then_some(z)
        };
        let lo = match s.before {
            Neighbor::Nothing => 0,
            Neighbor::Key(k) if k < key(first) => in_row(k).map_or(0, |z| z + 1),
            _ => first,
        };
        let hi = match s.after {
            Neighbor::Nothing => self.z_max(),
            Neighbor::Key(k) if k > key(last) => in_row(k).map_or(self.z_max(), |z| z - 1),
            _ => last,
        };
        let (lo, hi) = match cov {
            None => (lo, hi),
            Some((c_lo, c_hi)) => {
                let lo = if first < c_lo { lo } else { c_lo };
                let hi = if last > c_hi { hi } else { c_hi };
                (lo.min(c_lo), hi.max(c_hi))
            }
        };
        self.covered[j][p] = Some((lo, hi));
    }

    fn confirmed_within(&self, r: f64) -> usize {
        self.cands.iter().filter(|c| c.0 <= r).count()
    }
}

/// Privacy-aware kNN on the policy-embedded index.
pub fn pknn(
    index: &MovingIndex,
    policies: &PolicyStore,
    friends: &FriendList,
    req: &PknnRequest,
    order: &dyn SearchOrder,
) -> Result<(KnnResult, QueryStats)> {
    check_kind(index, IndexKind::Peb)?;
    check_knn(req, policies)?;
    let before = index.io();
    let parts = index.live_partitions();
    if friends.is_empty() || parts.is_empty() {
        return Ok((KnnResult::from_candidates(Vec::new(), req.k), finish(index, before, QueryStats::default())));
    }
    let side = index.grid().side;
    let r_q = (estimate_dk(req.k, index.len(), side) / req.k as f64).max(index.grid().cell_size());
    let cols = rounds_to_cover(&req.loc, side, r_q);
    let rows = friends.rows().len();
    let mut m = SearchMatrix {
        index,
        policies,
        friends,
        req,
        col_z: vec![vec![None; cols]; parts.len()],
        covered: vec![vec![None; parts.len()]; rows],
        parts,
        r_q,
        cols,
        remaining: friends.rows().iter().map(|r| r.members.len()).collect(),
        seen: HashSet::new(),
        cands: Vec::new(),
        stats: QueryStats::default(),
    };

    let mut stopped = false;
    for (j, i) in order.cells(rows, cols) {
        if !m.row_open(j) {
            if (0..rows).all(|r| !m.row_open(r)) {
                break;
            }
            continue;
        }
        for p in 0..m.parts.len() {
            let (zs, ze) = m.column(p, i);
            m.scan_row(j, p, zs, ze);
        }
        if m.confirmed_within((i + 1) as f64 * r_q) >= req.k {
            stopped = true;
            break;
        }
    }
    if stopped {
        // every remaining row, shortened to the square around the k'th candidate
        let mut d: Vec<f64> = m.cands.iter().map(|c| c.0).collect();
        d.sort_by(f64::total_cmp);
        let kdist = d[req.k - 1];
        let squares: Vec<(ZValue, ZValue)> = m.parts.iter().map(|&(_, t_lab)| m.square_z(kdist, t_lab)).collect();
        for j in 0..rows {
            for (p, &(zs, ze)) in squares.iter().enumerate() {
                m.scan_row(j, p, zs, ze);
            }
        }
    }
    let stats = finish(index, before, m.stats);
    Ok((KnnResult::from_candidates(m.cands, req.k), stats))
}

fn check_knn(req: &PknnRequest, policies: &PolicyStore) -> Result<()> {
    if !policies.has_user(req.qid) {
        return Err(Error::UnknownUser(req.qid));
    }
    if req.k == 0 {
        return Err(Error::InvalidQuery("k must be positive".into()));
    }
    if !req.loc.x.is_finite() || !req.loc.y.is_finite() {
        return Err(Error::InvalidQuery("query location not finite".into()));
    }
    Ok(())
}

/// kNN on the spatial baseline: rings of growing squares are searched
/// until `k` policy-passing users lie inside the inscribed circle.
pub fn baseline_knn(index: &MovingIndex, policies: &PolicyStore, req: &PknnRequest) -> Result<(KnnResult, QueryStats)> {
    check_kind(index, IndexKind::Bx)?;
    check_knn(req, policies)?;
    let before = index.io();
    let mut stats = QueryStats::default();
    let mut cands: Vec<(f64, UserId)> = Vec::new();
    let parts = index.live_partitions();
    if index.is_empty() {
        return Ok((KnnResult::from_candidates(cands, req.k), finish(index, before, stats)));
    }
    let grid = index.grid();
    let side = grid.side;
    let r_q = (estimate_dk(req.k, index.len(), side) / req.k as f64).max(grid.cell_size());
    let rounds = rounds_to_cover(&req.loc, side, r_q);
    let mut prev: Vec<Option<CellRect>> = vec![None; parts.len()];
    for i in 1..=rounds {
        let half = i as f64 * r_q;
        for (p, &(tid, t_lab)) in parts.iter().enumerate() {
            let window = index.enlarge_for(&Rect::square(req.loc, half), t_lab, req.t_q);
            let cells = if i == rounds { grid.full_rect() } else { grid.cell_rect(&window) };
            let rects = match prev[p] {
                None => vec![cells],
                Some(old) => cells.minus(&old),
            };
            prev[p] = Some(cells);
            if rects.is_empty() {
                continue;
            }
            let region = ZRegion::new(*index.layout(), grid, tid, vec![0], rects);
            let s = index.tree().scan(&region, |e| {
                if e.uid != req.qid {
                    if let Some(pos) = verify(e, req.qid, req.t_q, policies) {
                        cands.push((pos.dist(&req.loc), e.uid));
                    }
                }
                Flow::Continue
            });
            stats.add_scan(&s);
        }
        if cands.iter().filter(|c| c.0 <= half).count() >= req.k {
            break;
        }
    }
    Ok((KnnResult::from_candidates(cands, req.k), finish(index, before, stats)))
}

/// Literal kNN over all objects; ties by ascending uid.
pub fn oracle_knn<'a>(
    objects: impl IntoIterator<Item = &'a MovingObject>,
    policies: &PolicyStore,
    req: &PknnRequest,
) -> KnnResult {
    let cands: Vec<(f64, UserId)> = objects
        .into_iter()
        .filter(|o| o.uid != req.qid)
        .filter_map(|o| {
            let p = o.position_at(req.t_q);
            policies.visible(o.uid, req.qid, &p, req.t_q).then(|| (p.dist(&req.loc), o.uid))
        })
        .collect();
    KnnResult::from_candidates(cands, req.k)
}

/// True when two kNN answers agree on the k'th distance (within `tol`)
/// and on their distance multisets, allowing any choice among ties at the
/// k'th distance.
pub fn knn_equivalent(a: &KnnResult, b: &KnnResult, tol: f64) -> bool {
    if a.neighbors.len() != b.neighbors.len() || a.short != b.short {
        return false;
    }
    a.neighbors.iter().zip(&b.neighbors).all(|(x, y)| (x.1 - y.1).abs() <= tol)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dk_limits() {
        let l = 1000.0;
        assert!((estimate_dk(7, 7, l) - l * 2.0 / std::f64::consts::PI.sqrt()).abs() < 1e-9);
        assert!(estimate_dk(1, 1 << 40, l) < 1e-3);
        let want = (2.0 / std::f64::consts::PI.sqrt()) * (1.0 - (1.0 - (5.0f64 / 10000.0).sqrt()).sqrt());
        assert_eq!(estimate_dk(5, 10_000, 1.0), want);
        assert!((estimate_dk(5, 10_000, 1.0) - 0.01268).abs() < 5e-5);
    }

    #[test]
    fn triangular_visits_every_cell_once_by_diagonal() {
        for (r, c) in [(1, 1), (1, 5), (5, 1), (3, 4), (6, 2)] {
            let cells: Vec<_> = Triangular.cells(r, c).collect();
            assert_eq!(cells.len(), r * c);
            let set: HashSet<_> = cells.iter().copied().collect();
            assert_eq!(set.len(), r * c);
            assert!(cells.windows(2).all(|w| w[0].0 + w[0].1 <= w[1].0 + w[1].1));
        }
        let head: Vec<_> = Triangular.cells(3, 3).take(6).collect();
        assert_eq!(head, vec![(0, 0), (0, 1), (1, 0), (2, 0), (1, 1), (0, 2)]);
    }

    #[test]
    fn merge_joins_touching_and_overlapping() {
        let mut v = vec![(10, 12), (1, 3), (4, 5), (11, 20), (30, 30)];
        merge_intervals(&mut v);
        assert_eq!(v, vec![(1, 5), (10, 20), (30, 30)]);
    }

    #[test]
    fn worked_key_intervals() {
        // sequence values used directly as 7-bit fields ahead of a 6-bit Z-value
        let layout = KeyLayout { tid_bits: 1, sv_bits: 7, frac_bits: 0, z_bits: 6 };
        let z = [(13, 16), (25, 28)];
        let iv = build_prq_key_intervals(&[25, 50, 89], &z, 0, &layout);
        assert_eq!(iv, vec![(1613, 1616), (1625, 1628), (3213, 3216), (3225, 3228), (5709, 5712), (5721, 5724)]);
        assert_eq!(build_prq_key_intervals(&[5], &[(0, 3)], 1, &layout).len(), 1);
    }

    #[test]
    fn zregion_matches_interval_list() {
        let grid = GridConfig::new(16.0, 4);
        let layout = KeyLayout { tid_bits: 2, sv_bits: 6, frac_bits: 0, z_bits: 8 };
        let rows = vec![3u64, 7, 8, 40];
        let rect = CellRect::new(2, 5, 9, 11);
        let region = ZRegion::new(layout, &grid, 1, rows.clone(), vec![rect]);
        let list = IntervalList(build_prq_key_intervals(&rows, &grid.z_decompose(&rect).unwrap(), 1, &layout));
        for from in 0..(1u64 << 16) {
            assert_eq!(region.seek(from), list.seek(from), "from {from}");
        }
    }
}
