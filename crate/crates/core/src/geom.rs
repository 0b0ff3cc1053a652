//! Points and axis-aligned rectangles in space units.

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn dist(&self, other: &Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// Closed rectangle `[x_lo, x_hi] x [y_lo, y_hi]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rect {
    pub x_lo: f64,
    pub y_lo: f64,
    pub x_hi: f64,
    pub y_hi: f64,
}

impl Rect {
    pub const fn new(x_lo: f64, y_lo: f64, x_hi: f64, y_hi: f64) -> Self {
        Self { x_lo, y_lo, x_hi, y_hi }
    }

    /// Square of half-side `half` centred at `c`.
    pub fn square(c: Point, half: f64) -> Self {
        Self::new(c.x - half, c.y - half, c.x + half, c.y + half)
    }

    pub fn is_valid(&self) -> bool {
        self.x_lo <= self.x_hi && self.y_lo <= self.y_hi
    }

    pub fn width(&self) -> f64 {
        self.x_hi - self.x_lo
    }

    pub fn height(&self) -> f64 {
        self.y_hi - self.y_lo
    }

    pub fn area(&self) -> f64 {
        if self.is_valid() {
            self.width() * self.height()
        } else {
            0.0
        }
    }

    pub fn contains(&self, p: &Point) -> bool {
        p.x >= self.x_lo && p.x <= self.x_hi && p.y >= self.y_lo && p.y <= self.y_hi
    }

    pub fn contains_rect(&self, r: &Rect) -> bool {
        r.x_lo >= self.x_lo && r.x_hi <= self.x_hi && r.y_lo >= self.y_lo && r.y_hi <= self.y_hi
    }

    pub fn intersection(&self, other: &Rect) -> Option<Rect> {
        let r = Rect::new(
            self.x_lo.max(other.x_lo),
            self.y_lo.max(other.y_lo),
            self.x_hi.min(other.x_hi),
            self.y_hi.min(other.y_hi),
        );
        r.is_valid().then_some(r)
    }

    pub fn overlap_area(&self, other: &Rect) -> f64 {
        self.intersection(other).map_or(0.0, |r| r.area())
    }

    pub fn clamp_to(&self, bounds: &Rect) -> Rect {
        Rect::new(
            self.x_lo.clamp(bounds.x_lo, bounds.x_hi),
            self.y_lo.clamp(bounds.y_lo, bounds.y_hi),
            self.x_hi.clamp(bounds.x_lo, bounds.x_hi),
            self.y_hi.clamp(bounds.y_lo, bounds.y_hi),
        )
    }
}
