//! Rectangle algebra for grasp planning.
//!
//! Two rectangle flavours live here: [`AxisRect`] (object boxes and proposal
//! envelopes, top-left anchored) and [`GraspRect`] (the five-parameter planar
//! grasp `(cx, cy, theta, w, h)`). Overlap between arbitrary rectangles is
//! computed by clipping one convex quadrilateral against the other.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("rectangle has non-positive extent ({w} x {h})")]
    NonPositiveExtent { w: f64, h: f64 },
    #[error("rectangle has a non-finite coordinate")]
    NonFinite,
    #[error("grid dimensions must be at least 1x1, got {width}x{height}")]
    InvalidDimension { width: i64, height: i64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }
}

/// Axis-aligned rectangle anchored at its top-left corner.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AxisRect {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl AxisRect {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<Self, GeometryError> {
        let r = Self { x, y, w, h };
        r.check()?;
        Ok(r)
    }

    /// Builds a rectangle from its center and size.
    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self, GeometryError> {
        Self::new(cx - w / 2.0, cy - h / 2.0, w, h)
    }

    pub fn check(&self) -> Result<(), GeometryError> {
        if ![self.x, self.y, self.w, self.h].iter().all(|v| v.is_finite()) {
            return Err(GeometryError::NonFinite);
        }
        if self.w <= 0.0 || self.h <= 0.0 {
            return Err(GeometryError::NonPositiveExtent { w: self.w, h: self.h });
        }
        Ok(())
    }

    pub fn right(&self) -> f64 {
        self.x + self.w
    }

    pub fn bottom(&self) -> f64 {
        self.y + self.h
    }

    pub fn center(&self) -> Point {
        Point::new(self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// Area of the overlap with `other` (closed form).
    pub fn intersection_area(&self, other: &AxisRect) -> f64 {
        let iw = overlap_1d(self.x, self.w, other.x, other.w);
        let ih = overlap_1d(self.y, self.h, other.y, other.h);
        if iw <= 0.0 || ih <= 0.0 {
            0.0
        } else {
            iw * ih
        }
    }

    /// Closed-form axis-aligned IoU.
    pub fn iou(&self, other: &AxisRect) -> f64 {
        let inter = self.intersection_area(other);
        if inter <= 0.0 {
            return 0.0;
        }
        inter / (self.area() + other.area() - inter)
    }

    pub fn contains(&self, other: &AxisRect) -> bool {
        other.x >= self.x
            && other.y >= self.y
            && other.right() <= self.right()
            && other.bottom() <= self.bottom()
    }

    pub fn contains_point(&self, p: Point) -> bool {
        p.x >= self.x && p.x <= self.right() && p.y >= self.y && p.y <= self.bottom()
    }
}

// A span nested in the other keeps its own length exactly, so self-overlap
// and containment give exact areas.
fn overlap_1d(a0: f64, aw: f64, b0: f64, bw: f64) -> f64 {
    let (a1, b1) = (a0 + aw, b0 + bw);
    if a0 >= b0 && a1 <= b1 {
        aw
    } else if b0 >= a0 && b1 <= a1 {
        bw
    } else {
        a1.min(b1) - a0.max(b0)
    }
}

/// Planar grasp rectangle: center, orientation in degrees against the x axis,
/// gripper opening `w` and jaw size `h`.
///
/// `theta` is kept in `[-90, 90)`; a rectangle is unchanged by a half turn.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GraspRect {
    pub cx: f64,
    pub cy: f64,
    pub theta: f64,
    pub w: f64,
    pub h: f64,
}

impl GraspRect {
    pub fn new(cx: f64, cy: f64, theta: f64, w: f64, h: f64) -> Result<Self, GeometryError> {
        let r = Self {
            cx,
            cy,
            theta: normalize_angle(theta),
            w,
            h,
        };
        r.check()?;
        Ok(r)
    }

    pub fn check(&self) -> Result<(), GeometryError> {
        if ![self.cx, self.cy, self.theta, self.w, self.h]
            .iter()
            .all(|v| v.is_finite())
        {
            return Err(GeometryError::NonFinite);
        }
        if self.w <= 0.0 || self.h <= 0.0 {
            return Err(GeometryError::NonPositiveExtent { w: self.w, h: self.h });
        }
        Ok(())
    }

    pub fn center(&self) -> Point {
        Point::new(self.cx, self.cy)
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// True when the rectangle is axis aligned (theta is 0 or -90).
    pub fn is_axis_aligned(&self) -> bool {
        self.theta == 0.0 || self.theta == -90.0
    }
}

/// Wraps an angle in degrees into `[-90, 90)`.
pub fn normalize_angle(theta: f64) -> f64 {
    if (-90.0..90.0).contains(&theta) {
        return theta;
    }
    let t = (theta + 90.0).rem_euclid(180.0) - 90.0;
    // rem_euclid can round up to exactly 180 for tiny negative inputs
    if t >= 90.0 {
        t - 180.0
    } else {
        t
    }
}

/// Smallest absolute difference between two orientations, modulo 180°.
pub fn angle_diff(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(180.0);
    d.min(180.0 - d)
}

/// `(sin, cos)` of an angle in degrees, exact at multiples of 90°.
pub(crate) fn sin_cos_deg(theta: f64) -> (f64, f64) {
    let q = theta / 90.0;
    if q == q.trunc() {
        match (q as i64).rem_euclid(4) {
            0 => (0.0, 1.0),
            1 => (1.0, 0.0),
            2 => (0.0, -1.0),
            _ => (-1.0, 0.0),
        }
    } else {
        theta.to_radians().sin_cos()
    }
}

/// A rectangle that can be viewed as a counter-clockwise (in image
/// coordinates, y down) convex quadrilateral.
pub trait Quad {
    fn corners(&self) -> [Point; 4];
    fn quad_area(&self) -> f64;
}

impl Quad for AxisRect {
    fn corners(&self) -> [Point; 4] {
        [
            Point::new(self.x, self.y),
            Point::new(self.right(), self.y),
            Point::new(self.right(), self.bottom()),
            Point::new(self.x, self.bottom()),
        ]
    }

    fn quad_area(&self) -> f64 {
        self.area()
    }
}

impl Quad for GraspRect {
    fn corners(&self) -> [Point; 4] {
        let (s, c) = sin_cos_deg(self.theta);
        let (hw, hh) = (self.w / 2.0, self.h / 2.0);
        let local = [(-hw, -hh), (hw, -hh), (hw, hh), (-hw, hh)];
        local.map(|(u, v)| Point::new(self.cx + u * c - v * s, self.cy + u * s + v * c))
    }

    fn quad_area(&self) -> f64 {
        self.area()
    }
}

/// Signed shoelace area.
fn signed_area(poly: &[Point]) -> f64 {
    let n = poly.len();
    if n < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..n {
        let (a, b) = (poly[i], poly[(i + 1) % n]);
        acc += a.x * b.y - b.x * a.y;
    }
    acc / 2.0
}

pub fn polygon_area(poly: &[Point]) -> f64 {
    signed_area(poly).abs()
}

fn cross(o: Point, a: Point, b: Point) -> f64 {
    (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x)
}

/// Intersection of segment `p`-`q` with the infinite line through `a`-`b`.
/// Axis-parallel lines snap the matching coordinate so axis-aligned inputs
/// stay exact.
fn line_intersection(p: Point, q: Point, a: Point, b: Point) -> Point {
    let dp = cross(a, b, p);
    let dq = cross(a, b, q);
    let t = dp / (dp - dq);
    let mut out = Point::new(p.x + t * (q.x - p.x), p.y + t * (q.y - p.y));
    if a.x == b.x {
        out.x = a.x;
    }
    if a.y == b.y {
        out.y = a.y;
    }
    if p.x == q.x {
        out.x = p.x;
    }
    if p.y == q.y {
        out.y = p.y;
    }
    out
}

/// Sutherland–Hodgman clipping of `subject` by the convex polygon `clip`.
/// Both polygons may be given in either winding order.
pub fn clip_convex(subject: &[Point], clip: &[Point]) -> Vec<Point> {
    let orient = signed_area(clip).signum();
    if orient == 0.0 {
        return Vec::new();
    }
    let mut output: Vec<Point> = subject.to_vec();
    let n = clip.len();
    for i in 0..n {
        if output.is_empty() {
            break;
        }
        let (a, b) = (clip[i], clip[(i + 1) % n]);
        let input = std::mem::take(&mut output);
        let inside = |p: Point| cross(a, b, p) * orient >= 0.0;
        let m = input.len();
        for j in 0..m {
            let cur = input[j];
            let prev = input[(j + m - 1) % m];
            match (inside(prev), inside(cur)) {
                (true, true) => output.push(cur),
                (true, false) => output.push(line_intersection(prev, cur, a, b)),
                (false, true) => {
                    output.push(line_intersection(prev, cur, a, b));
                    output.push(cur);
                }
                (false, false) => {}
            }
        }
    }
    output
}

/// Area of the overlap between two rectangles via polygon clipping.
pub fn intersection_area<A: Quad + ?Sized, B: Quad + ?Sized>(a: &A, b: &B) -> f64 {
    polygon_area(&clip_convex(&a.corners(), &b.corners()))
}

/// Intersection over union of two (possibly rotated) rectangles.
pub fn rect_iou<A: Quad + ?Sized, B: Quad + ?Sized>(a: &A, b: &B) -> f64 {
    let inter = intersection_area(a, b);
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.quad_area() + b.quad_area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Fraction of the proposal `g` lying inside the grounded region `k`.
pub fn tiou(g: &AxisRect, k: &AxisRect) -> f64 {
    (g.intersection_area(k) / g.area()).clamp(0.0, 1.0)
}

/// Minimal axis-aligned box enclosing a grasp rectangle.
pub fn axis_envelope(g: &GraspRect) -> AxisRect {
    let (s, c) = sin_cos_deg(g.theta);
    let ew = g.w * c.abs() + g.h * s.abs();
    let eh = g.w * s.abs() + g.h * c.abs();
    AxisRect {
        x: g.cx - ew / 2.0,
        y: g.cy - eh / 2.0,
        w: ew,
        h: eh,
    }
}

/// Which overlap measure the correctness criterion uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JaccardMode {
    #[default]
    Rotated,
    AxisAligned,
}

impl JaccardMode {
    pub fn jaccard(self, a: &GraspRect, b: &GraspRect) -> f64 {
        match self {
            JaccardMode::Rotated => rect_iou(a, b),
            JaccardMode::AxisAligned => axis_envelope(a).iou(&axis_envelope(b)),
        }
    }
}

/// Normalised coordinate features for every cell of a `width x height` map:
/// top-left, center, bottom-right, and the cell size.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialFeatureGrid {
    width: usize,
    height: usize,
    cells: Vec<[f64; 8]>,
}

impl SpatialFeatureGrid {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// Feature vector of column `i`, row `j`.
    pub fn cell(&self, i: usize, j: usize) -> Option<&[f64; 8]> {
        if i >= self.width || j >= self.height {
            return None;
        }
        self.cells.get(j * self.width + i)
    }

    pub fn cells(&self) -> &[[f64; 8]] {
        &self.cells
    }
}

pub fn spatial_grid(width: i64, height: i64) -> Result<SpatialFeatureGrid, GeometryError> {
    if width < 1 || height < 1 {
        return Err(GeometryError::InvalidDimension { width, height });
    }
    let (wf, hf) = (width as f64, height as f64);
    let (w, h) = (width as usize, height as usize);
    let mut cells = Vec::with_capacity(w * h);
    for j in 0..h {
        for i in 0..w {
            let (fi, fj) = (i as f64, j as f64);
            cells.push([
                fi / wf,
                fj / hf,
                (fi + 0.5) / wf,
                (fj + 0.5) / hf,
                (fi + 1.0) / wf,
                (fj + 1.0) / hf,
                1.0 / wf,
                1.0 / hf,
            ]);
        }
    }
    Ok(SpatialFeatureGrid {
        width: w,
        height: h,
        cells,
    })
}
