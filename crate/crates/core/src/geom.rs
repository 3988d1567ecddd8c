/// Axis-aligned rectangle in pixel coordinates, half-open: `[x, x + w) × [y, y + h)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rect {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl Rect {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        Rect { x, y, w, h }
    }

    pub fn square(cx: f64, cy: f64, side: f64) -> Self {
        Rect { x: cx - side / 2.0, y: cy - side / 2.0, w: side, h: side }
    }

    pub fn full(width: u32, height: u32) -> Self {
        Rect { x: 0.0, y: 0.0, w: width as f64, h: height as f64 }
    }

    pub fn right(&self) -> f64 {
        self.x + self.w
    }

    pub fn bottom(&self) -> f64 {
        self.y + self.h
    }

    pub fn contains_point(&self, px: f64, py: f64) -> bool {
        px >= self.x && px < self.right() && py >= self.y && py < self.bottom()
    }

    /// Whether `other` lies inside `self` (closed containment, `tol` slack).
    pub fn contains_rect(&self, other: &Rect, tol: f64) -> bool {
        other.x >= self.x - tol
            && other.y >= self.y - tol
            && other.right() <= self.right() + tol
            && other.bottom() <= self.bottom() + tol
    }

    pub fn within_image(&self, width: u32, height: u32) -> bool {
        Rect::full(width, height).contains_rect(self, 1e-9)
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }
}
