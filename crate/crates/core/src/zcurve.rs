//! Z-order (Morton) encoding of grid cells, rectangle decomposition into
//! maximal runs of consecutive Z-values, and "next Z-value inside a
//! rectangle" search used to skip over gaps during index scans.

use crate::error::{Error, Result};
use crate::geom::{Point, Rect};

/// Which axis occupies the even (lower) bit of every interleaved pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BitOrder {
    #[default]
    XLow,
    YLow,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridConfig {
    /// Side length of the square space `[0, side]^2`.
    pub side: f64,
    /// Bits per axis.
    pub levels: u32,
    pub order: BitOrder,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self { side: 1000.0, levels: 10, order: BitOrder::XLow }
    }
}

/// A Z-curve position, `< 4^levels`.
pub type ZValue = u64;

/// Inclusive range of cells `[x_lo, x_hi] x [y_lo, y_hi]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CellRect {
    pub x_lo: u32,
    pub y_lo: u32,
    pub x_hi: u32,
    pub y_hi: u32,
}

impl CellRect {
    pub const fn new(x_lo: u32, y_lo: u32, x_hi: u32, y_hi: u32) -> Self {
        Self { x_lo, y_lo, x_hi, y_hi }
    }

    /// Cells spanned by the grid-line corners `(x0, y0)` and `(x1, y1)`,
    /// i.e. the half-open box `[x0, x1) x [y0, y1)`. `None` when empty.
    pub fn from_grid_corners(x0: u32, y0: u32, x1: u32, y1: u32) -> Option<Self> {
        (x1 > x0 && y1 > y0).then(|| Self::new(x0, y0, x1 - 1, y1 - 1))
    }

    pub fn contains(&self, cx: u32, cy: u32) -> bool {
        cx >= self.x_lo && cx <= self.x_hi && cy >= self.y_lo && cy <= self.y_hi
    }

    pub fn cells(&self) -> u64 {
        (self.x_hi - self.x_lo + 1) as u64 * (self.y_hi - self.y_lo + 1) as u64
    }

    /// `self` with `inner` removed, as at most four disjoint rectangles.
    /// `inner` must lie inside `self`.
    pub fn minus(&self, inner: &CellRect) -> Vec<CellRect> {
        let mut out = Vec::with_capacity(4);
        if inner.y_lo > self.y_lo {
            out.push(CellRect::new(self.x_lo, self.y_lo, self.x_hi, inner.y_lo - 1));
        }
        if inner.y_hi < self.y_hi {
            out.push(CellRect::new(self.x_lo, inner.y_hi + 1, self.x_hi, self.y_hi));
        }
        if inner.x_lo > self.x_lo {
            out.push(CellRect::new(self.x_lo, inner.y_lo, inner.x_lo - 1, inner.y_hi));
        }
        if inner.x_hi < self.x_hi {
            out.push(CellRect::new(inner.x_hi + 1, inner.y_lo, self.x_hi, inner.y_hi));
        }
        out
    }
}

#[inline]
fn spread(v: u32) -> u64 {
    let mut x = v as u64;
    x = (x | (x << 16)) & 0x0000_FFFF_0000_FFFF;
    x = (x | (x << 8)) & 0x00FF_00FF_00FF_00FF;
    x = (x | (x << 4)) & 0x0F0F_0F0F_0F0F_0F0F;
    x = (x | (x << 2)) & 0x3333_3333_3333_3333;
    x = (x | (x << 1)) & 0x5555_5555_5555_5555;
    x
}

#[inline]
fn compact(z: u64) -> u32 {
    let mut x = z & 0x5555_5555_5555_5555;
    x = (x | (x >> 1)) & 0x3333_3333_3333_3333;
    x = (x | (x >> 2)) & 0x0F0F_0F0F_0F0F_0F0F;
    x = (x | (x >> 4)) & 0x00FF_00FF_00FF_00FF;
    x = (x | (x >> 8)) & 0x0000_FFFF_0000_FFFF;
    x = (x | (x >> 16)) & 0x0000_0000_FFFF_FFFF;
    x as u32
}

impl GridConfig {
    pub fn new(side: f64, levels: u32) -> Self {
        assert!(side > 0.0 && (1..=31).contains(&levels), "invalid grid");
        Self { side, levels, order: BitOrder::XLow }
    }

    pub fn with_order(mut self, order: BitOrder) -> Self {
        self.order = order;
        self
    }

    /// Cells per axis.
    pub fn cells_per_axis(&self) -> u32 {
        1 << self.levels
    }

    pub fn cell_size(&self) -> f64 {
        self.side / self.cells_per_axis() as f64
    }

    /// Largest valid Z-value.
    pub fn z_max(&self) -> ZValue {
        (1u64 << (2 * self.levels)) - 1
    }

    /// Bits occupied by a Z-value.
    pub fn z_bits(&self) -> u32 {
        2 * self.levels
    }

    pub fn full_rect(&self) -> CellRect {
        let m = self.cells_per_axis() - 1;
        CellRect::new(0, 0, m, m)
    }

    pub fn space(&self) -> Rect {
        Rect::new(0.0, 0.0, self.side, self.side)
    }

    fn axis_cell(&self, v: f64) -> u32 {
        let c = (v / self.cell_size()).floor();
        if c.is_nan() || c < 0.0 {
            0
        } else {
            (c as u64).min(self.cells_per_axis() as u64 - 1) as u32
        }
    }

    /// Cell holding a continuous point; coordinates outside the space clamp
    /// to the border cells.
    pub fn cell_of(&self, p: &Point) -> (u32, u32) {
        (self.axis_cell(p.x), self.axis_cell(p.y))
    }

    /// Cells touched by a continuous rectangle (after clamping).
    pub fn cell_rect(&self, r: &Rect) -> CellRect {
        let (x_lo, y_lo) = self.cell_of(&Point::new(r.x_lo, r.y_lo));
        let (x_hi, y_hi) = self.cell_of(&Point::new(r.x_hi, r.y_hi));
        CellRect::new(x_lo, y_lo, x_hi.max(x_lo), y_hi.max(y_lo))
    }

    pub fn z_of_point(&self, p: &Point) -> ZValue {
        let (cx, cy) = self.cell_of(p);
        self.encode_unchecked(cx, cy)
    }

    #[inline]
    fn encode_unchecked(&self, cx: u32, cy: u32) -> ZValue {
        match self.order {
            BitOrder::XLow => spread(cx) | (spread(cy) << 1),
            BitOrder::YLow => spread(cy) | (spread(cx) << 1),
        }
    }

    pub fn z_encode(&self, cx: u32, cy: u32) -> Result<ZValue> {
        let side = self.cells_per_axis();
        if cx >= side || cy >= side {
            return Err(Error::CellOutOfRange { cx, cy, side });
        }
        Ok(self.encode_unchecked(cx, cy))
    }

    pub fn z_decode(&self, z: ZValue) -> Result<(u32, u32)> {
        if z > self.z_max() {
            return Err(Error::ZOutOfRange(z));
        }
        let (lo, hi) = (compact(z), compact(z >> 1));
        Ok(match self.order {
            BitOrder::XLow => (lo, hi),
            BitOrder::YLow => (hi, lo),
        })
    }

    /// Map a cell rectangle to curve-native coordinates: `(low-bit axis, high-bit axis)`.
    fn native(&self, r: &CellRect) -> [u32; 4] {
        match self.order {
            BitOrder::XLow => [r.x_lo, r.x_hi, r.y_lo, r.y_hi],
            BitOrder::YLow => [r.y_lo, r.y_hi, r.x_lo, r.x_hi],
        }
    }

    fn check_rect(&self, r: &CellRect) -> Result<()> {
        let side = self.cells_per_axis();
        if r.x_hi >= side || r.y_hi >= side {
            return Err(Error::CellOutOfRange { cx: r.x_hi, cy: r.y_hi, side });
        }
        Ok(())
    }

    /// Z-values of the lower-left and upper-right cells of `r`. Morton order
    /// is monotone in each axis, so these bound every cell of `r`.
    pub fn z_bounds(&self, r: &CellRect) -> (ZValue, ZValue) {
        (self.encode_unchecked(r.x_lo, r.y_lo), self.encode_unchecked(r.x_hi, r.y_hi))
    }

    /// Sorted, disjoint, non-adjacent inclusive intervals whose union is
    /// exactly the set of Z-values of cells inside `r`.
    pub fn z_decompose(&self, r: &CellRect) -> Result<Vec<(ZValue, ZValue)>> {
        self.check_rect(r)?;
        if r.x_lo > r.x_hi || r.y_lo > r.y_hi {
            return Ok(Vec::new());
        }
        let n = self.native(r);
        let mut out: Vec<(ZValue, ZValue)> = Vec::new();
        decompose_rec(&n, 0, 0, self.levels, 0, &mut out);
        Ok(out)
    }

    /// Smallest Z-value `>= from` whose cell lies in `r`.
    pub fn next_in_rect(&self, from: ZValue, r: &CellRect) -> Option<ZValue> {
        if from > self.z_max() || r.x_lo > r.x_hi || r.y_lo > r.y_hi {
            return None;
        }
        let n = self.native(r);
        next_rec(&n, 0, 0, self.levels, 0, from)
    }

    pub fn z_in_rect(&self, z: ZValue, r: &CellRect) -> bool {
        let (cx, cy) = match self.order {
            BitOrder::XLow => (compact(z), compact(z >> 1)),
            BitOrder::YLow => (compact(z >> 1), compact(z)),
        };
        r.contains(cx, cy)
    }
}

// `n` = [a_lo, a_hi, b_lo, b_hi] with `a` the low-bit axis. A node is the
// aligned square at (a0, b0) of side 2^level whose Z-range starts at `base`.
fn node_relation(n: &[u32; 4], a0: u32, b0: u32, level: u32) -> Overlap {
    let size = 1u64 << level;
    let (a1, b1) = (a0 as u64 + size - 1, b0 as u64 + size - 1);
    let (al, ah, bl, bh) = (n[0] as u64, n[1] as u64, n[2] as u64, n[3] as u64);
    if a1 < al || (a0 as u64) > ah || b1 < bl || (b0 as u64) > bh {
        Overlap::Disjoint
    } else if (a0 as u64) >= al && a1 <= ah && (b0 as u64) >= bl && b1 <= bh {
        Overlap::Inside
    } else {
        Overlap::Partial
    }
}

enum Overlap {
    Disjoint,
    Partial,
    Inside,
}

fn decompose_rec(n: &[u32; 4], a0: u32, b0: u32, level: u32, base: u64, out: &mut Vec<(u64, u64)>) {
    match node_relation(n, a0, b0, level) {
        Overlap::Disjoint => {}
        Overlap::Inside => {
            let hi = base + (1u64 << (2 * level)) - 1;
            match out.last_mut() {
                Some(last) if last.1 + 1 == base => last.1 = hi,
                _ => out.push((base, hi)),
            }
        }
        Overlap::Partial => {
            let child = level - 1;
            let half = 1u32 << child;
            let span = 1u64 << (2 * child);
            for q in 0..4u32 {
                let (da, db) = (q & 1, q >> 1);
                decompose_rec(n, a0 + da * half, b0 + db * half, child, base + q as u64 * span, out);
            }
        }
    }
}

fn next_rec(n: &[u32; 4], a0: u32, b0: u32, level: u32, base: u64, from: u64) -> Option<u64> {
    let last = base + (1u64 << (2 * level)) - 1;
    if last < from {
        return None;
    }
    match node_relation(n, a0, b0, level) {
        Overlap::Disjoint => None,
        Overlap::Inside => Some(base.max(from)),
        Overlap::Partial => {
            let child = level - 1;
            let half = 1u32 << child;
            let span = 1u64 << (2 * child);
            (0..4u32).find_map(|q| {
                let (da, db) = (q & 1, q >> 1);
                next_rec(n, a0 + da * half, b0 + db * half, child, base + q as u64 * span, from)
            })
        }
    }
}

pub fn z_encode(cx: u32, cy: u32, cfg: &GridConfig) -> Result<ZValue> {
    cfg.z_encode(cx, cy)
}

pub fn z_decode(z: ZValue, cfg: &GridConfig) -> Result<(u32, u32)> {
    cfg.z_decode(z)
}

pub fn z_decompose(rect: &CellRect, cfg: &GridConfig) -> Result<Vec<(ZValue, ZValue)>> {
    cfg.z_decompose(rect)
}
