//! Ellipse primitives: containment, pairwise intersection, box and annulus
//! crossing predicates, and grid-cell coverage for spatial indexing.
//!
//! An ellipse is stored by its center, half-major length `R`, half-minor
//! length and the angle `V` of its major axis. The two major-axis endpoints
//! are `center ± R (cos V, sin V)`.

use serde::{Deserialize, Serialize};
use std::f64::consts::{FRAC_PI_2, PI};
use std::ops::{Add, Mul, Neg, Sub};

use crate::error::Error;

/// Margin used by every containment and intersection test.
pub const TOL_GEOM: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }

    pub fn dot(self, o: Point) -> f64 {
        self.x * o.x + self.y * o.y
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn norm_inf(self) -> f64 {
        self.x.abs().max(self.y.abs())
    }

    pub fn dist(self, o: Point) -> f64 {
        (self - o).norm()
    }

    pub fn polar(r: f64, angle: f64) -> Self {
        Point::new(r * angle.cos(), r * angle.sin())
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

impl Add for Point {
    type Output = Point;
    fn add(self, o: Point) -> Point {
        Point::new(self.x + o.x, self.y + o.y)
    }
}

impl Sub for Point {
    type Output = Point;
    fn sub(self, o: Point) -> Point {
        Point::new(self.x - o.x, self.y - o.y)
    }
}

impl Mul<f64> for Point {
    type Output = Point;
    fn mul(self, k: f64) -> Point {
        Point::new(self.x * k, self.y * k)
    }
}

impl Neg for Point {
    type Output = Point;
    fn neg(self) -> Point {
        Point::new(-self.x, -self.y)
    }
}

/// Maps any angle to the half-open range (-pi/2, pi/2].
pub fn normalize_angle(v: f64) -> f64 {
    let a = v.rem_euclid(PI);
    if a > FRAC_PI_2 {
        a - PI
    } else {
        a
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ellipse {
    pub center: Point,
    pub half_major: f64,
    pub half_minor: f64,
    /// Major-axis direction in (-pi/2, pi/2].
    pub angle: f64,
}

impl Ellipse {
    /// Builds an ellipse, normalizing the angle.
    ///
    /// Panics if the axes are not finite or `half_major < half_minor` or
    /// `half_minor <= 0`; use [`Ellipse::try_new`] for untrusted input.
    pub fn new(center: Point, half_major: f64, half_minor: f64, angle: f64) -> Self {
        Self::try_new(center, half_major, half_minor, angle).expect("invalid ellipse")
    }

    pub fn try_new(center: Point, half_major: f64, half_minor: f64, angle: f64) -> Result<Self, Error> {
        if !(center.is_finite() && half_major.is_finite() && angle.is_finite()) {
            return Err(Error::invalid("ellipse fields must be finite"));
        }
        if !(half_minor > 0.0) || half_major < half_minor {
            return Err(Error::invalid(format!(
                "ellipse axes must satisfy half_major >= half_minor > 0, got {half_major} and {half_minor}"
            )));
        }
        Ok(Ellipse { center, half_major, half_minor, angle: normalize_angle(angle) })
    }

    pub fn circle(center: Point, radius: f64) -> Self {
        Self::new(center, radius, radius, 0.0)
    }

    /// Unit vector along the major axis.
    pub fn axis(&self) -> Point {
        Point::new(self.angle.cos(), self.angle.sin())
    }

    pub fn endpoints(&self) -> (Point, Point) {
        let d = self.axis() * self.half_major;
        (self.center + d, self.center - d)
    }

    /// Coordinates of `p` in the frame of the ellipse axes.
    pub fn to_local(&self, p: Point) -> Point {
        let (s, c) = self.angle.sin_cos();
        let d = p - self.center;
        Point::new(d.x * c + d.y * s, -d.x * s + d.y * c)
    }

    pub fn from_local(&self, q: Point) -> Point {
        let (s, c) = self.angle.sin_cos();
        self.center + Point::new(q.x * c - q.y * s, q.x * s + q.y * c)
    }

    /// Value of the defining quadratic form; at most 1 inside.
    pub fn quad_form(&self, p: Point) -> f64 {
        let q = self.to_local(p);
        (q.x / self.half_major).powi(2) + (q.y / self.half_minor).powi(2)
    }

    pub fn contains(&self, p: Point) -> bool {
        point_in_ellipse(p, self)
    }

    pub fn boundary_point(&self, t: f64) -> Point {
        self.from_local(Point::new(self.half_major * t.cos(), self.half_minor * t.sin()))
    }

    pub fn area(&self) -> f64 {
        PI * self.half_major * self.half_minor
    }

    /// Half extents of the axis-aligned bounding box.
    pub fn half_extents(&self) -> (f64, f64) {
        let (s, c) = self.angle.sin_cos();
        let (a, b) = (self.half_major, self.half_minor);
        ((a * a * c * c + b * b * s * s).sqrt(), (a * a * s * s + b * b * c * c).sqrt())
    }

    /// Distance from `p` to the closed elliptical disk (zero inside).
    pub fn min_dist_to(&self, p: Point) -> f64 {
        let q = self.to_local(p);
        let (d, _) = dist_to_boundary(self.half_major, self.half_minor, q);
        if (q.x / self.half_major).powi(2) + (q.y / self.half_minor).powi(2) <= 1.0 {
            0.0
        } else {
            d
        }
    }

    /// Nearest point of the closed disk to `p`.
    pub fn nearest_point(&self, p: Point) -> Point {
        let q = self.to_local(p);
        if (q.x / self.half_major).powi(2) + (q.y / self.half_minor).powi(2) <= 1.0 {
            return p;
        }
        let (_, x) = dist_to_boundary(self.half_major, self.half_minor, q);
        self.from_local(x)
    }

    /// Largest distance from `p` to a point of the ellipse.
    pub fn max_dist_to(&self, p: Point) -> f64 {
        max_dist_local(self.half_major, self.half_minor, self.to_local(p))
    }

    /// True iff the closed disk meets the segment `[a, b]`.
    pub fn intersects_segment(&self, a: Point, b: Point) -> bool {
        let scale = |q: Point| Point::new(q.x / self.half_major, q.y / self.half_minor);
        let (pa, pb) = (scale(self.to_local(a)), scale(self.to_local(b)));
        segment_origin_dist(pa, pb) <= 1.0 + TOL_GEOM
    }

    /// Parameter interval `[t0, t1]` of the line `p + t d` inside the disk.
    pub fn line_interval(&self, p: Point, d: Point) -> Option<(f64, f64)> {
        let q = self.to_local(p);
        let (s, c) = self.angle.sin_cos();
        let dl = Point::new(d.x * c + d.y * s, -d.x * s + d.y * c);
        let (ia, ib) = (1.0 / self.half_major.powi(2), 1.0 / self.half_minor.powi(2));
        let qa = dl.x * dl.x * ia + dl.y * dl.y * ib;
        let qb = 2.0 * (q.x * dl.x * ia + q.y * dl.y * ib);
        let qc = q.x * q.x * ia + q.y * q.y * ib - 1.0;
        if qa <= 0.0 {
            return None;
        }
        let disc = qb * qb - 4.0 * qa * qc;
        if disc < 0.0 {
            return None;
        }
        let sq = disc.sqrt();
        Some(((-qb - sq) / (2.0 * qa), (-qb + sq) / (2.0 * qa)))
    }

    pub fn intersects_rect(&self, r: &AxisRect) -> bool {
        if r.contains(self.center) {
            return true;
        }
        let [a, b, c, d] = r.corners();
        self.intersects_segment(a, b)
            || self.intersects_segment(b, c)
            || self.intersects_segment(c, d)
            || self.intersects_segment(d, a)
    }

    pub fn intersects_disk(&self, center: Point, radius: f64) -> bool {
        self.min_dist_to(center) <= radius + TOL_GEOM
    }

    /// True iff every point of the ellipse lies in the closed rectangle.
    pub fn inside_rect(&self, r: &AxisRect) -> bool {
        let (ex, ey) = self.half_extents();
        self.center.x - ex >= r.origin.x
            && self.center.x + ex <= r.origin.x + r.width
            && self.center.y - ey >= r.origin.y
            && self.center.y + ey <= r.origin.y + r.height
    }
}

/// Distance from the origin to the segment `[a, b]`.
fn segment_origin_dist(a: Point, b: Point) -> f64 {
    let d = b - a;
    let len2 = d.dot(d);
    let t = if len2 > 0.0 { (-a.dot(d) / len2).clamp(0.0, 1.0) } else { 0.0 };
    (a + d * t).norm()
}

/// Distance from `q` (local frame) to the ellipse boundary with half axes
/// `e0 >= e1`, and the closest boundary point. Bisection on the Lagrange
/// multiplier after reflecting into the first quadrant.
fn dist_to_boundary(e0: f64, e1: f64, q: Point) -> (f64, Point) {
    let (sx, sy) = (q.x.signum(), q.y.signum());
    let (y0, y1) = (q.x.abs(), q.y.abs());
    let (x0, x1) = if y1 > 0.0 {
        if y0 > 0.0 {
            let z0 = y0 / e0;
            let z1 = y1 / e1;
            let g = z0 * z0 + z1 * z1 - 1.0;
            if g != 0.0 {
                let r0 = (e0 / e1) * (e0 / e1);
                let sbar = boundary_root(r0, z0, z1, g);
                (r0 * y0 / (sbar + r0), y1 / (sbar + 1.0))
            } else {
                (y0, y1)
            }
        } else {
            (0.0, e1)
        }
    } else {
        let numer0 = e0 * y0;
        let denom0 = e0 * e0 - e1 * e1;
        if numer0 < denom0 {
            let xde0 = numer0 / denom0;
            (e0 * xde0, e1 * (1.0 - xde0 * xde0).max(0.0).sqrt())
        } else {
            (e0, 0.0)
        }
    };
    let d = (x0 - y0).hypot(x1 - y1);
    let sx = if sx == 0.0 { 1.0 } else { sx };
    let sy = if sy == 0.0 { 1.0 } else { sy };
    (d, Point::new(sx * x0, sy * x1))
}

fn boundary_root(r0: f64, z0: f64, z1: f64, g: f64) -> f64 {
    let n0 = r0 * z0;
    let mut s0 = z1 - 1.0;
    let mut s1 = if g < 0.0 { 0.0 } else { n0.hypot(z1) - 1.0 };
    let mut s = 0.0;
    for _ in 0..2200 {
        s = 0.5 * (s0 + s1);
        if s == s0 || s == s1 {
            break;
        }
        let ratio0 = n0 / (s + r0);
        let ratio1 = z1 / (s + 1.0);
        let gs = ratio0 * ratio0 + ratio1 * ratio1 - 1.0;
        if gs > 0.0 {
            s0 = s;
        } else if gs < 0.0 {
            s1 = s;
        } else {
            break;
        }
    }
    s
}

/// Farthest-point distance from `q` (local frame) to the ellipse boundary.
/// The farthest point lies in the quadrant opposite to `q`; its multiplier
/// `t > 0` solves `(y0 e0 / t)^2 + (y1 e1 / (t + e0^2 - e1^2))^2 = 1`.
fn max_dist_local(e0: f64, e1: f64, q: Point) -> f64 {
    let (y0, y1) = (q.x.abs(), q.y.abs());
    let gap = e0 * e0 - e1 * e1;
    let f = |t: f64| {
        let a = if y0 > 0.0 { y0 * e0 / t } else { 0.0 };
        let b = if y1 > 0.0 { y1 * e1 / (t + gap) } else { 0.0 };
        a * a + b * b - 1.0
    };
    let point = |t: f64| -> (f64, f64) { (y0 * e0 * e0 / t, y1 * e1 * e1 / (t + gap)) };
    if y0 == 0.0 {
        if y1 == 0.0 {
            return e0;
        }
        if gap > 0.0 && y1 * e1 <= gap {
            let x1 = y1 * e1 * e1 / gap;
            let x0 = e0 * (1.0 - (x1 / e1).powi(2)).max(0.0).sqrt();
            return (y0 + x0).hypot(y1 + x1);
        }
    }
    let mut lo = 0.0f64;
    let mut hi = e0 * (y0.hypot(y1)).max(e0) + e0;
    while f(hi) > 0.0 {
        hi *= 2.0;
    }
    for _ in 0..2200 {
        let mid = 0.5 * (lo + hi);
        if mid == lo || mid == hi {
            break;
        }
        if f(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let t = hi.max(f64::MIN_POSITIVE);
    let (x0, x1) = point(t);
    let (x0, x1) = if y0 == 0.0 { (e0 * (1.0 - (x1 / e1).powi(2)).max(0.0).sqrt(), x1) } else { (x0, x1) };
    (y0 + x0).hypot(y1 + x1)
}

pub fn point_in_ellipse(p: Point, e: &Ellipse) -> bool {
    e.quad_form(p) <= 1.0 + TOL_GEOM
}

fn canonical_first(a: &Ellipse, b: &Ellipse) -> bool {
    let key = |e: &Ellipse| [e.half_major, e.half_minor, e.center.x, e.center.y, e.angle];
    let (ka, kb) = (key(a), key(b));
    for (x, y) in ka.iter().zip(kb.iter()) {
        match x.total_cmp(y) {
            std::cmp::Ordering::Greater => return true,
            std::cmp::Ordering::Less => return false,
            std::cmp::Ordering::Equal => {}
        }
    }
    true
}

/// Image of `e` under the affine map sending `frame` to the unit disk.
fn normalized_image(frame: &Ellipse, e: &Ellipse) -> Ellipse {
    let c = frame.to_local(e.center);
    let c = Point::new(c.x / frame.half_major, c.y / frame.half_minor);
    let rel = e.angle - frame.angle;
    let (s, co) = rel.sin_cos();
    // columns of N = D^-1 Rot(rel) diag(R, b)
    let n00 = co * e.half_major / frame.half_major;
    let n01 = -s * e.half_minor / frame.half_major;
    let n10 = s * e.half_major / frame.half_minor;
    let n11 = co * e.half_minor / frame.half_minor;
    let a = n00 * n00 + n01 * n01;
    let bb = n00 * n10 + n01 * n11;
    let cc = n10 * n10 + n11 * n11;
    let half_tr = 0.5 * (a + cc);
    let rad = (0.5 * (a - cc)).hypot(bb);
    let l1 = half_tr + rad;
    let det = (n00 * n11 - n01 * n10).powi(2);
    let l2 = det / l1;
    let phi = 0.5 * (2.0 * bb).atan2(a - cc);
    let major = l1.sqrt();
    let minor = l2.sqrt().min(major);
    Ellipse { center: c, half_major: major, half_minor: minor, angle: normalize_angle(phi) }
}

/// True iff the two closed elliptical disks share a point.
///
/// Three stages: bounding circles, center containment, then the exact
/// nearest-point distance from the origin after mapping one ellipse to the
/// unit disk. The mapped ellipse is always the one later in a fixed total
/// order, so the result is symmetric in its arguments.
pub fn ellipses_intersect(e1: &Ellipse, e2: &Ellipse) -> bool {
    if e1.center.dist(e2.center) > e1.half_major + e2.half_major + TOL_GEOM {
        return false;
    }
    if e1.contains(e2.center) || e2.contains(e1.center) {
        return true;
    }
    // each disk lies within distance half_minor of its major axis and
    // contains that axis
    let (a0, a1) = e1.endpoints();
    let (b0, b1) = e2.endpoints();
    if segments_cross(a0, a1, b0, b1) {
        return true;
    }
    if segment_segment_dist(a0, a1, b0, b1) > e1.half_minor + e2.half_minor + TOL_GEOM {
        return false;
    }
    let (frame, other) = if canonical_first(e1, e2) { (e1, e2) } else { (e2, e1) };
    let img = normalized_image(frame, other);
    img.min_dist_to(Point::new(0.0, 0.0)) <= 1.0 + TOL_GEOM
}

fn cross(o: Point, a: Point, b: Point) -> f64 {
    (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x)
}

/// Strict crossing of two segments; touching configurations return false.
fn segments_cross(a0: Point, a1: Point, b0: Point, b1: Point) -> bool {
    let d1 = cross(b0, b1, a0);
    let d2 = cross(b0, b1, a1);
    let d3 = cross(a0, a1, b0);
    let d4 = cross(a0, a1, b1);
    d1 * d2 < 0.0 && d3 * d4 < 0.0
}

fn point_segment_dist(p: Point, a: Point, b: Point) -> f64 {
    segment_origin_dist(Point::new(a.x - p.x, a.y - p.y), Point::new(b.x - p.x, b.y - p.y))
}

fn segment_segment_dist(a0: Point, a1: Point, b0: Point, b1: Point) -> f64 {
    if segments_cross(a0, a1, b0, b1) {
        return 0.0;
    }
    point_segment_dist(a0, b0, b1)
        .min(point_segment_dist(a1, b0, b1))
        .min(point_segment_dist(b0, a0, a1))
        .min(point_segment_dist(b1, a0, a1))
}

/// A point common to both disks, if any.
pub fn intersection_point(e1: &Ellipse, e2: &Ellipse) -> Option<Point> {
    if !ellipses_intersect(e1, e2) {
        return None;
    }
    if e2.contains(e1.center) {
        return Some(e1.center);
    }
    if e1.contains(e2.center) {
        return Some(e2.center);
    }
    let (frame, other) = if canonical_first(e1, e2) { (e1, e2) } else { (e2, e1) };
    let img = normalized_image(frame, other);
    let q = img.nearest_point(Point::new(0.0, 0.0));
    // shrink slightly toward the interior of both
    let q = q * (1.0 - 1e-12);
    Some(frame.from_local(Point::new(q.x * frame.half_major, q.y * frame.half_minor)))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AxisRect {
    pub origin: Point,
    pub width: f64,
    pub height: f64,
}

impl AxisRect {
    pub fn new(origin: Point, width: f64, height: f64) -> Self {
        assert!(width > 0.0 && height > 0.0, "rectangle sides must be positive");
        AxisRect { origin, width, height }
    }

    pub fn from_bounds(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self::new(Point::new(x0, y0), x1 - x0, y1 - y0)
    }

    pub fn centered(center: Point, width: f64, height: f64) -> Self {
        Self::new(Point::new(center.x - width / 2.0, center.y - height / 2.0), width, height)
    }

    pub fn x1(&self) -> f64 {
        self.origin.x + self.width
    }

    pub fn y1(&self) -> f64 {
        self.origin.y + self.height
    }

    pub fn center(&self) -> Point {
        Point::new(self.origin.x + self.width / 2.0, self.origin.y + self.height / 2.0)
    }

    pub fn area(&self) -> f64 {
        self.width * self.height
    }

    pub fn perimeter(&self) -> f64 {
        2.0 * (self.width + self.height)
    }

    pub fn contains(&self, p: Point) -> bool {
        p.x >= self.origin.x && p.x <= self.x1() && p.y >= self.origin.y && p.y <= self.y1()
    }

    /// Counterclockwise from the origin corner.
    pub fn corners(&self) -> [Point; 4] {
        let (x0, y0, x1, y1) = (self.origin.x, self.origin.y, self.x1(), self.y1());
        [Point::new(x0, y0), Point::new(x1, y0), Point::new(x1, y1), Point::new(x0, y1)]
    }

    pub fn padded(&self, pad: f64) -> AxisRect {
        AxisRect::new(
            Point::new(self.origin.x - pad, self.origin.y - pad),
            self.width + 2.0 * pad,
            self.height + 2.0 * pad,
        )
    }

    /// Rotation by a quarter turn counterclockwise around `pivot`.
    pub fn rotated_quarter(&self, pivot: Point) -> AxisRect {
        let rot = |p: Point| {
            let d = p - pivot;
            pivot + Point::new(-d.y, d.x)
        };
        let a = rot(self.origin);
        let b = rot(Point::new(self.x1(), self.y1()));
        AxisRect::from_bounds(a.x.min(b.x), a.y.min(b.y), a.x.max(b.x), a.y.max(b.y))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Annulus {
    pub center: Point,
    pub inner: f64,
    pub outer: f64,
}

impl Annulus {
    pub fn new(center: Point, inner: f64, outer: f64) -> Result<Self, Error> {
        if !(inner > 0.0 && inner < outer) {
            return Err(Error::invalid(format!("annulus needs 0 < l1 < l2, got {inner}, {outer}")));
        }
        Ok(Annulus { center, inner, outer })
    }
}

/// Left-right crossing: the ellipse meets both vertical sides of `rect`.
///
/// This is exactly the event that one ellipse crosses the box from left to
/// right: if the disk meets both sides at points `p` and `q`, the chord
/// `[p, q]` lies in the ellipse by convexity and in the box because both
/// endpoints do, so it is a crossing path. The converse is immediate.
pub fn crosses_box_lr(e: &Ellipse, rect: &AxisRect) -> bool {
    let [a, b, c, d] = rect.corners();
    e.intersects_segment(d, a) && e.intersects_segment(b, c)
}

/// Bottom-top crossing, the transpose of [`crosses_box_lr`].
pub fn crosses_box_bt(e: &Ellipse, rect: &AxisRect) -> bool {
    let [a, b, c, d] = rect.corners();
    e.intersects_segment(a, b) && e.intersects_segment(c, d)
}

/// Crossing between the two shorter sides (left-right on a square).
pub fn crosses_box_long(e: &Ellipse, rect: &AxisRect) -> bool {
    if rect.width >= rect.height {
        crosses_box_lr(e, rect)
    } else {
        crosses_box_bt(e, rect)
    }
}

/// The ellipse meets the closed inner disk and the complement of the open
/// outer disk of `a`.
pub fn crosses_annulus(e: &Ellipse, a: &Annulus) -> Result<bool, Error> {
    if a.outer - a.inner < 2.0 * e.half_minor {
        return Err(Error::invalid(format!(
            "annulus width {} is below the ellipse width {}",
            a.outer - a.inner,
            2.0 * e.half_minor
        )));
    }
    Ok(e.min_dist_to(a.center) <= a.inner + TOL_GEOM && e.max_dist_to(a.center) >= a.outer - TOL_GEOM)
}

/// Grid cells of side `cell` meeting the ellipse (a superset, padded by
/// `TOL_GEOM`). Scans rows and, per row, takes the exact x-range of the
/// ellipse over the row's strip, so a long thin ellipse at any angle covers
/// a number of cells linear in its length.
pub fn covered_cells(e: &Ellipse, cell: f64) -> Vec<(i64, i64)> {
    let mut out = Vec::new();
    for_each_covered_cell(e, cell, |c| out.push(c));
    out
}

pub fn for_each_covered_cell(e: &Ellipse, cell: f64, mut visit: impl FnMut((i64, i64))) {
    assert!(cell > 0.0);
    let (s, c) = e.angle.sin_cos();
    let (ra, rb) = (e.half_major, e.half_minor);
    let qa = c * c / (ra * ra) + s * s / (rb * rb);
    let qb = 2.0 * c * s * (1.0 / (ra * ra) - 1.0 / (rb * rb));
    let qc = s * s / (ra * ra) + c * c / (rb * rb);
    let (ex, ey) = e.half_extents();
    let y_at_xmax = (ra * ra - rb * rb) * c * s / ex;
    let x_range = |y: f64| -> (f64, f64) {
        let disc = (qb * qb * y * y - 4.0 * qa * (qc * y * y - 1.0)).max(0.0).sqrt();
        ((-qb * y - disc) / (2.0 * qa), (-qb * y + disc) / (2.0 * qa))
    };
    let (cx, cy) = (e.center.x, e.center.y);
    let j0 = ((cy - ey - TOL_GEOM) / cell).floor() as i64;
    let j1 = ((cy + ey + TOL_GEOM) / cell).floor() as i64;
    for j in j0..=j1 {
        let lo = (j as f64 * cell - cy).max(-ey);
        let hi = ((j + 1) as f64 * cell - cy).min(ey);
        let (lo, hi) = if lo > hi { (hi, hi) } else { (lo, hi) };
        let xr = x_range(y_at_xmax.clamp(lo, hi)).1;
        let xl = x_range((-y_at_xmax).clamp(lo, hi)).0;
        let i0 = ((cx + xl - TOL_GEOM) / cell).floor() as i64;
        let i1 = ((cx + xr + TOL_GEOM) / cell).floor() as i64;
        for i in i0..=i1 {
            visit((i, j));
        }
    }
}
