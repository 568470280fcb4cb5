//! Planar geometry in projected meters: rectangles, polygons, clipping.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProjectedPoint {
    pub x: f64,
    pub y: f64,
}

impl ProjectedPoint {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

/// Axis-aligned rectangle, half-open: `[min_x, max_x) x [min_y, max_y)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub min_x: f64,
    pub min_y: f64,
    pub max_x: f64,
    pub max_y: f64,
}

impl Rect {
    pub fn new(min_x: f64, min_y: f64, max_x: f64, max_y: f64) -> Self {
        Self {
            min_x,
            min_y,
            max_x,
            max_y,
        }
    }

    pub fn width(&self) -> f64 {
        self.max_x - self.min_x
    }

    pub fn height(&self) -> f64 {
        self.max_y - self.min_y
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn centroid(&self) -> ProjectedPoint {
        ProjectedPoint::new(
            0.5 * (self.min_x + self.max_x),
            0.5 * (self.min_y + self.max_y),
        )
    }

    pub fn contains(&self, p: ProjectedPoint) -> bool {
        p.x >= self.min_x && p.x < self.max_x && p.y >= self.min_y && p.y < self.max_y
    }

    pub fn intersects(&self, other: &Rect) -> bool {
        self.min_x < other.max_x
            && other.min_x < self.max_x
            && self.min_y < other.max_y
            && other.min_y < self.max_y
    }

    /// Closed counter-clockwise ring of the four corners.
    pub fn ring(&self) -> Vec<ProjectedPoint> {
        vec![
            ProjectedPoint::new(self.min_x, self.min_y),
            ProjectedPoint::new(self.max_x, self.min_y),
            ProjectedPoint::new(self.max_x, self.max_y),
            ProjectedPoint::new(self.min_x, self.max_y),
            ProjectedPoint::new(self.min_x, self.min_y),
        ]
    }
}

/// Simple polygon with optional holes. Rings need not be explicitly closed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Polygon {
    pub exterior: Vec<ProjectedPoint>,
    #[serde(default)]
    pub holes: Vec<Vec<ProjectedPoint>>,
}

impl Polygon {
    pub fn new(exterior: Vec<ProjectedPoint>) -> Self {
        Self {
            exterior,
            holes: Vec::new(),
        }
    }

    pub fn from_rect(r: &Rect) -> Self {
        Self::new(r.ring())
    }

    pub fn area(&self) -> f64 {
        ring_area(&self.exterior).abs() - self.holes.iter().map(|h| ring_area(h).abs()).sum::<f64>()
    }

    pub fn bbox(&self) -> Rect {
        let mut r = Rect::new(f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
        for p in &self.exterior {
            r.min_x = r.min_x.min(p.x);
            r.min_y = r.min_y.min(p.y);
            r.max_x = r.max_x.max(p.x);
            r.max_y = r.max_y.max(p.y);
        }
        r
    }

    /// Area of the intersection with an axis-aligned rectangle.
    pub fn intersection_area(&self, r: &Rect) -> f64 {
        let outer = ring_area(&clip_ring(&self.exterior, r)).abs();
        let holes: f64 = self
            .holes
            .iter()
            .map(|h| ring_area(&clip_ring(h, r)).abs())
            .sum();
        (outer - holes).max(0.0)
    }

    /// Even-odd containment test (points exactly on an edge may go either way).
    pub fn contains(&self, p: ProjectedPoint) -> bool {
        ring_contains(&self.exterior, p) && !self.holes.iter().any(|h| ring_contains(h, p))
    }
}

/// Signed shoelace area; positive for counter-clockwise rings.
pub fn ring_area(ring: &[ProjectedPoint]) -> f64 {
    let n = ring.len();
    if n < 3 {
        return 0.0;
    }
    let mut s = 0.0;
    for i in 0..n {
        let a = ring[i];
        let b = ring[(i + 1) % n];
        s += a.x * b.y - b.x * a.y;
    }
    0.5 * s
}

fn ring_contains(ring: &[ProjectedPoint], p: ProjectedPoint) -> bool {
    let n = ring.len();
    let mut inside = false;
    let mut j = n.wrapping_sub(1);
    for i in 0..n {
        let (a, b) = (ring[i], ring[j]);
        if (a.y > p.y) != (b.y > p.y) {
            let x_cross = a.x + (p.y - a.y) * (b.x - a.x) / (b.y - a.y);
            if p.x < x_cross {
                inside = !inside;
            }
        }
        j = i;
    }
    inside
}

/// Sutherland-Hodgman clip of a ring against a rectangle. The clip window is
/// convex, so the area of the result is exact even for concave input rings
/// (any degenerate connecting edges have zero area).
pub fn clip_ring(ring: &[ProjectedPoint], r: &Rect) -> Vec<ProjectedPoint> {
    let mut pts: Vec<ProjectedPoint> = ring.to_vec();
    if pts.len() > 1 && pts.first() == pts.last() {
        pts.pop();
    }
    #[derive(Clone, Copy)]
    enum Edge {
        Left(f64),
        Right(f64),
        Bottom(f64),
        Top(f64),
    }
    let inside = |e: Edge, p: ProjectedPoint| match e {
        Edge::Left(v) => p.x >= v,
        Edge::Right(v) => p.x <= v,
        Edge::Bottom(v) => p.y >= v,
        Edge::Top(v) => p.y <= v,
    };
    let cross = |e: Edge, a: ProjectedPoint, b: ProjectedPoint| match e {
        Edge::Left(v) | Edge::Right(v) => {
            let t = (v - a.x) / (b.x - a.x);
            ProjectedPoint::new(v, a.y + t * (b.y - a.y))
        }
        Edge::Bottom(v) | Edge::Top(v) => {
            let t = (v - a.y) / (b.y - a.y);
            ProjectedPoint::new(a.x + t * (b.x - a.x), v)
        }
    };
    for e in [
        Edge::Left(r.min_x),
        Edge::Right(r.max_x),
        Edge::Bottom(r.min_y),
        Edge::Top(r.max_y),
    ] {
        if pts.is_empty() {
            break;
        }
        let input = std::mem::take(&mut pts);
        let mut prev = *input.last().unwrap();
        for &cur in &input {
            match (inside(e, prev), inside(e, cur)) {
                (true, true) => pts.push(cur),
                (true, false) => pts.push(cross(e, prev, cur)),
                (false, true) => {
                    pts.push(cross(e, prev, cur));
                    pts.push(cur);
                }
                (false, false) => {}
            }
            prev = cur;
        }
    }
    pts
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square(x0: f64, y0: f64, s: f64) -> Polygon {
        Polygon::from_rect(&Rect::new(x0, y0, x0 + s, y0 + s))
    }

    #[test]
    fn areas_and_clipping() {
        let p = square(0.0, 0.0, 10.0);
        assert_eq!(p.area(), 100.0);
        assert_eq!(p.intersection_area(&Rect::new(5.0, 5.0, 20.0, 20.0)), 25.0);
        assert_eq!(p.intersection_area(&Rect::new(20.0, 20.0, 30.0, 30.0)), 0.0);
        assert_eq!(p.intersection_area(&Rect::new(-5.0, -5.0, 50.0, 50.0)), 100.0);
    }

    #[test]
    fn concave_and_holed_polygons() {
        // L-shape: 10x10 square minus the upper-right 5x5 quadrant.
        let l = Polygon::new(vec![
            ProjectedPoint::new(0.0, 0.0),
            ProjectedPoint::new(10.0, 0.0),
            ProjectedPoint::new(10.0, 5.0),
            ProjectedPoint::new(5.0, 5.0),
            ProjectedPoint::new(5.0, 10.0),
            ProjectedPoint::new(0.0, 10.0),
        ]);
        assert_eq!(l.area(), 75.0);
        assert_eq!(l.intersection_area(&Rect::new(5.0, 0.0, 10.0, 10.0)), 25.0);
        assert!((l.intersection_area(&Rect::new(2.0, 2.0, 8.0, 8.0)) - 27.0).abs() < 1e-12);

        let mut holed = square(0.0, 0.0, 10.0);
        holed.holes.push(Rect::new(2.0, 2.0, 4.0, 4.0).ring());
        assert_eq!(holed.area(), 96.0);
        assert_eq!(holed.intersection_area(&Rect::new(0.0, 0.0, 3.0, 10.0)), 28.0);
        assert!(!holed.contains(ProjectedPoint::new(3.0, 3.0)));
        assert!(holed.contains(ProjectedPoint::new(5.0, 5.0)));
    }

    #[test]
    fn rect_is_half_open() {
        let r = Rect::new(0.0, 0.0, 2.0, 2.0);
        assert!(r.contains(ProjectedPoint::new(0.0, 0.0)));
        assert!(!r.contains(ProjectedPoint::new(2.0, 1.0)));
        assert!(!r.contains(ProjectedPoint::new(1.0, 2.0)));
    }
}
