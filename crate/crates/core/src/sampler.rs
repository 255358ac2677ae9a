//! Seeded samplers for the ellipse process, the segment (long-range) process
//! and the change of variables between them.
//!
//! Ellipse process: centers Poisson with intensity `u`, half-major `R` Pareto
//! with `P(R > r) = (r / r_min)^-alpha`, angle uniform on (-pi/2, pi/2].
//!
//! Segment process: Poisson process of unordered pairs `{x, y}` with density
//! `beta |x - y|^-s` for `|x - y| > kappa`. Each unordered pair is stored once,
//! oriented so that `y - x` points into the right half plane, which is the
//! orientation produced by `psi` for angles in (-pi/2, pi/2].

use rand::Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::{FRAC_PI_2, PI};

use crate::error::{Error, Result};
use crate::geometry::{normalize_angle, AxisRect, Ellipse, Point};
use crate::rng::{self, child_stream, poisson, tag, unit};
use crate::stats;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EllipseModelParams {
    pub u: f64,
    pub alpha: f64,
    #[serde(default = "default_r_min")]
    pub r_min: f64,
    #[serde(default = "default_half_minor")]
    pub half_minor: f64,
}

fn default_r_min() -> f64 {
    1.0
}

fn default_half_minor() -> f64 {
    0.5
}

impl Default for EllipseModelParams {
    fn default() -> Self {
        EllipseModelParams { u: 1.0, alpha: 1.5, r_min: 1.0, half_minor: 0.5 }
    }
}

impl EllipseModelParams {
    pub fn new(u: f64, alpha: f64) -> Self {
        EllipseModelParams { u, alpha, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.u.is_finite() && self.u >= 0.0) {
            return Err(Error::invalid(format!("intensity u must be finite and >= 0, got {}", self.u)));
        }
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return Err(Error::invalid(format!("alpha must be > 0, got {}", self.alpha)));
        }
        if !(self.half_minor > 0.0 && self.r_min >= self.half_minor && self.r_min.is_finite()) {
            return Err(Error::invalid(format!(
                "need r_min >= half_minor > 0, got r_min={} half_minor={}",
                self.r_min, self.half_minor
            )));
        }
        Ok(())
    }

    /// Advisory messages for parameters outside the regime of interest.
    pub fn warnings(&self) -> Vec<String> {
        let mut w = Vec::new();
        if !(self.alpha > 1.0 && self.alpha < 2.0) {
            w.push(format!("alpha = {} lies outside the heavy-tailed regime (1, 2)", self.alpha));
        }
        w
    }

    /// `P(R > r)`.
    pub fn tail(&self, r: f64) -> f64 {
        if r <= self.r_min {
            1.0
        } else {
            (r / self.r_min).powf(-self.alpha)
        }
    }

    /// `P(lo <= R < hi)`; `hi` may be infinite.
    pub fn shell_mass(&self, lo: f64, hi: f64) -> f64 {
        (self.tail(lo) - self.tail(hi)).max(0.0)
    }

    /// Inverse-CDF draw of `R` conditioned on `[lo, hi)`.
    pub fn draw_radius(&self, lo: f64, hi: f64, u01: f64) -> f64 {
        let lo = lo.max(self.r_min);
        let (tlo, thi) = (self.tail(lo), self.tail(hi));
        let t = tlo - u01 * (tlo - thi);
        let r = self.r_min * t.powf(-1.0 / self.alpha);
        r.clamp(lo, if hi.is_finite() { hi } else { f64::MAX })
    }

    /// Expected number of ellipses with `R` in `[lo, hi)` (all `R` when
    /// `hi` is infinite) that hit a convex set of area `area` and perimeter
    /// `per`, averaged over orientations. Uses the rotation-averaged Steiner
    /// formula with the stadium bound `per(E) <= 4R + 2 pi b`.
    pub fn hitting_mean_bound(&self, area: f64, per: f64, lo: f64, hi: f64) -> Result<f64> {
        if self.u == 0.0 {
            return Ok(0.0);
        }
        if self.alpha <= 1.0 && hi.is_infinite() {
            return Err(Error::invalid(format!(
                "alpha = {} <= 1: infinitely many ellipses hit any bounded set",
                self.alpha
            )));
        }
        let b = self.half_minor;
        let lo = lo.max(self.r_min);
        let m0 = self.shell_mass(lo, hi);
        // first moment of R over [lo, hi)
        let a = self.alpha;
        let c = self.r_min.powf(a);
        let m1 = if (a - 1.0).abs() < 1e-12 {
            c * a * (hi.ln() - lo.ln())
        } else {
            let hi_term = if hi.is_finite() { hi.powf(1.0 - a) } else { 0.0 };
            c * a * (lo.powf(1.0 - a) - hi_term) / (a - 1.0)
        };
        Ok(self.u * ((area + per * b) * m0 + (2.0 * per / PI + PI * b) * m1))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LongRangeParams {
    pub beta: f64,
    pub s: f64,
    pub kappa: f64,
}

impl LongRangeParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta.is_finite() && self.beta >= 0.0) {
            return Err(Error::invalid(format!("beta must be finite and >= 0, got {}", self.beta)));
        }
        if !(self.s > 2.0 && self.s.is_finite()) {
            return Err(Error::invalid(format!("s must exceed 2 for a locally finite tail, got {}", self.s)));
        }
        if !(self.kappa > 0.0 && self.kappa.is_finite()) {
            return Err(Error::invalid(format!("kappa must be > 0, got {}", self.kappa)));
        }
        Ok(())
    }
}

/// `(u, alpha) -> (beta, s)` with `s = 2 + alpha`, `beta = u alpha 2^alpha / pi`.
pub fn beta_s_from_u_alpha(u: f64, alpha: f64) -> (f64, f64) {
    (u * alpha * 2f64.powf(alpha) / PI, 2.0 + alpha)
}

/// `(beta, s) -> (u, alpha)` with `alpha = s - 2`, `u = pi beta / (alpha 2^alpha)`.
pub fn u_alpha_from_beta_s(beta: f64, s: f64) -> (f64, f64) {
    let alpha = s - 2.0;
    (PI * beta / (alpha * 2f64.powf(alpha)), alpha)
}

/// Ellipse parameters to segment parameters; `kappa = 2 r_min` since the
/// segment length is twice the half-major length.
pub fn convert_params(p: &EllipseModelParams) -> LongRangeParams {
    let (beta, s) = beta_s_from_u_alpha(p.u, p.alpha);
    LongRangeParams { beta, s, kappa: 2.0 * p.r_min }
}

pub fn convert_params_inverse(lr: &LongRangeParams, half_minor: f64) -> EllipseModelParams {
    let (u, alpha) = u_alpha_from_beta_s(lr.beta, lr.s);
    EllipseModelParams { u, alpha, r_min: lr.kappa / 2.0, half_minor }
}

/// Endpoints `(z + R(cos V, sin V), z - R(cos V, sin V))`.
pub fn psi(z: Point, r: f64, v: f64) -> (Point, Point) {
    let d = Point::polar(r, v);
    (z + d, z - d)
}

/// Midpoint, half-length and angle in (-pi/2, pi/2] of the segment `{x, y}`.
pub fn psi_inverse(x: Point, y: Point) -> Result<(Point, f64, f64)> {
    if x == y {
        return Err(Error::invalid("psi_inverse needs distinct endpoints"));
    }
    let z = (x + y) * 0.5;
    let d = x - z;
    Ok((z, d.norm(), normalize_angle(d.y.atan2(d.x))))
}

pub fn ellipse_from_segment(x: Point, y: Point, half_minor: f64) -> Result<Ellipse> {
    let (z, r, v) = psi_inverse(x, y)?;
    Ellipse::try_new(z, r.max(half_minor), half_minor, v)
}

/// Convex target region for the restricted samplers.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Region {
    Rect(AxisRect),
    Disk { center: Point, radius: f64 },
}

impl Region {
    pub fn center(&self) -> Point {
        match self {
            Region::Rect(r) => r.center(),
            Region::Disk { center, .. } => *center,
        }
    }

    /// Half-width of the region's projection on the unit direction `(c, s)`.
    pub fn support(&self, c: f64, s: f64) -> f64 {
        match self {
            Region::Rect(r) => 0.5 * (r.width * c.abs() + r.height * s.abs()),
            Region::Disk { radius, .. } => *radius,
        }
    }

    pub fn max_support(&self) -> f64 {
        match self {
            Region::Rect(r) => 0.5 * r.width.hypot(r.height),
            Region::Disk { radius, .. } => *radius,
        }
    }

    pub fn hit(&self, e: &Ellipse) -> bool {
        match self {
            Region::Rect(r) => e.intersects_rect(r),
            Region::Disk { center, radius } => e.intersects_disk(*center, *radius),
        }
    }

    pub fn area(&self) -> f64 {
        match self {
            Region::Rect(r) => r.area(),
            Region::Disk { radius, .. } => PI * radius * radius,
        }
    }

    pub fn perimeter(&self) -> f64 {
        match self {
            Region::Rect(r) => r.perimeter(),
            Region::Disk { radius, .. } => 2.0 * PI * radius,
        }
    }
}

/// Ellipses with `R` in `[r_lo, r_hi)` hitting `region`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Requirement {
    pub region: Region,
    pub r_lo: f64,
    pub r_hi: f64,
}

impl Requirement {
    pub fn new(region: Region, r_lo: f64, r_hi: f64) -> Self {
        Requirement { region, r_lo, r_hi }
    }

    pub fn claims(&self, e: &Ellipse) -> bool {
        e.half_major >= self.r_lo && e.half_major < self.r_hi && self.region.hit(e)
    }
}

/// Exact sample of the ellipse process restricted to the union of the
/// requirement events, each ellipse appearing once.
///
/// Requirement `i` is sampled in dyadic `R`-shells. Within a shell `[lo, hi)`
/// the angle is drawn first; any ellipse meeting the region then has its
/// center in the slab `|a| <= hi + h_a`, `|p| <= b + h_p` in the ellipse's
/// own axes, where `h` is the region's support. Centers are drawn uniformly
/// there (with angle thinning against the largest slab), and an ellipse is
/// kept when it hits the region and no earlier requirement claims it.
pub fn sample_union<R: Rng + ?Sized>(params: &EllipseModelParams, reqs: &[Requirement], rng: &mut R) -> Vec<Ellipse> {
    let mut out = Vec::new();
    if params.u == 0.0 {
        return out;
    }
    let b = params.half_minor;
    for (i, req) in reqs.iter().enumerate() {
        assert!(req.r_hi.is_finite(), "requirement needs a finite upper radius");
        let mut lo = req.r_lo.max(params.r_min);
        while lo < req.r_hi {
            let hi = (2.0 * lo).min(req.r_hi);
            let dmax = req.region.max_support();
            let a_max = 4.0 * (hi + dmax) * (b + dmax);
            let mean = params.u * params.shell_mass(lo, hi) * a_max;
            let n = poisson(rng, mean);
            let c0 = req.region.center();
            for _ in 0..n {
                let v = FRAC_PI_2 - PI * unit(rng);
                let (sn, cs) = v.sin_cos();
                let ha = req.region.support(cs, sn);
                let hp = req.region.support(-sn, cs);
                let (ea, ep) = (hi + ha, b + hp);
                let keep_v = unit(rng) * a_max < 4.0 * ea * ep;
                let r = params.draw_radius(lo, hi, unit(rng));
                let a = (2.0 * unit(rng) - 1.0) * ea;
                let p = (2.0 * unit(rng) - 1.0) * ep;
                if !keep_v {
                    continue;
                }
                let center = c0 + Point::new(a * cs - p * sn, a * sn + p * cs);
                let e = Ellipse { center, half_major: r, half_minor: b, angle: normalize_angle(v) };
                if req.region.hit(&e) && !reqs[..i].iter().any(|q| q.claims(&e)) {
                    out.push(e);
                }
            }
            lo = hi;
        }
    }
    out
}

/// How ellipses centered outside the window are handled.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum FarField {
    /// Centers inside the window only, `R` untruncated.
    Off,
    /// Centers in the window padded by `max_r`, `R < max_r`.
    Box { max_r: f64 },
    /// Dyadic `R`-shells up to `max_r` with per-shell slab padding.
    Shells { max_r: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Window {
    pub rect: AxisRect,
    pub far_field: FarField,
}

impl Window {
    pub fn new(rect: AxisRect, far_field: FarField) -> Self {
        Window { rect, far_field }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProcessSample {
    pub params: EllipseModelParams,
    pub window: Window,
    pub seed: u64,
    pub ellipses: Vec<Ellipse>,
    /// Expected number of ellipses hitting the window that the far-field
    /// policy omits.
    pub truncation_bias_bound: f64,
}

pub const SAMPLE_FORMAT_VERSION: u32 = 1;

#[derive(Serialize)]
struct EllipseRecord {
    cx: f64,
    cy: f64,
    #[serde(rename = "R")]
    r: f64,
    #[serde(rename = "V")]
    v: f64,
}

impl ProcessSample {
    pub fn to_json(&self) -> serde_json::Value {
        let ellipses: Vec<EllipseRecord> = self
            .ellipses
            .iter()
            .map(|e| EllipseRecord { cx: e.center.x, cy: e.center.y, r: e.half_major, v: e.angle })
            .collect();
        serde_json::json!({
            "version": SAMPLE_FORMAT_VERSION,
            "params": self.params,
            "window": self.window,
            "seed": self.seed,
            "ellipses": ellipses,
            "bias_bound": self.truncation_bias_bound,
        })
    }

    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        for e in &self.ellipses {
            wr.serialize(EllipseRecord { cx: e.center.x, cy: e.center.y, r: e.half_major, v: e.angle })?;
        }
        wr.flush()?;
        Ok(())
    }
}

fn check_window(rect: &AxisRect) -> Result<()> {
    let ok = rect.origin.is_finite() && rect.width.is_finite() && rect.height.is_finite();
    if !ok || !(rect.width > 0.0 && rect.height > 0.0) {
        return Err(Error::invalid("window must be finite with positive area"));
    }
    Ok(())
}

/// Sample the ellipse process in a window. The result keeps exactly the
/// ellipses meeting the window.
pub fn sample_ellipse_process(params: &EllipseModelParams, window: &Window, seed: u64) -> Result<ProcessSample> {
    params.validate()?;
    check_window(&window.rect)?;
    let w = &window.rect;
    let mut rng = child_stream(seed, tag("ellipse-process"), 0);
    let b = params.half_minor;
    let (bias, ellipses) = match window.far_field {
        FarField::Off => {
            let bias = params.hitting_mean_bound(w.area(), w.perimeter(), params.r_min, f64::INFINITY)?
                - params.u * w.area();
            let n = poisson(&mut rng, params.u * w.area());
            let mut v = Vec::with_capacity(n as usize);
            for _ in 0..n {
                let c = Point::new(w.origin.x + w.width * unit(&mut rng), w.origin.y + w.height * unit(&mut rng));
                let r = params.draw_radius(params.r_min, f64::INFINITY, unit(&mut rng));
                let ang = FRAC_PI_2 - PI * unit(&mut rng);
                v.push(Ellipse { center: c, half_major: r, half_minor: b, angle: normalize_angle(ang) });
            }
            (bias.max(0.0), v)
        }
        FarField::Box { max_r } => {
            check_max_r(params, max_r)?;
            let pad = w.padded(max_r);
            let mean = params.u * pad.area() * params.shell_mass(params.r_min, max_r);
            let n = poisson(&mut rng, mean);
            let mut v = Vec::new();
            for _ in 0..n {
                let c = Point::new(pad.origin.x + pad.width * unit(&mut rng), pad.origin.y + pad.height * unit(&mut rng));
                let r = params.draw_radius(params.r_min, max_r, unit(&mut rng));
                let ang = FRAC_PI_2 - PI * unit(&mut rng);
                let e = Ellipse { center: c, half_major: r, half_minor: b, angle: normalize_angle(ang) };
                if e.intersects_rect(w) {
                    v.push(e);
                }
            }
            (params.hitting_mean_bound(w.area(), w.perimeter(), max_r, f64::INFINITY)?, v)
        }
        FarField::Shells { max_r } => {
            check_max_r(params, max_r)?;
            let req = Requirement::new(Region::Rect(*w), params.r_min, max_r);
            let v = sample_union(params, &[req], &mut rng);
            (params.hitting_mean_bound(w.area(), w.perimeter(), max_r, f64::INFINITY)?, v)
        }
    };
    Ok(ProcessSample { params: *params, window: *window, seed, ellipses, truncation_bias_bound: bias })
}

fn check_max_r(params: &EllipseModelParams, max_r: f64) -> Result<()> {
    if !(max_r.is_finite() && max_r > params.r_min) {
        return Err(Error::invalid(format!("max_r must be finite and exceed r_min, got {max_r}")));
    }
    Ok(())
}

/// Region over which segment-process pairs are sampled.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum SegmentRegion {
    /// Pairs with one endpoint in `a` and the other in `b` (disjoint boxes).
    Pair { a: AxisRect, b: AxisRect },
    /// Pairs whose midpoint lies in `window`, lengths at most `2 max_half`.
    Midpoint { window: AxisRect, max_half: f64 },
    /// Pairs with both endpoints in `window`.
    Within { window: AxisRect },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentSample {
    pub pairs: Vec<(Point, Point)>,
    /// Expected number of pairs in the region when available in closed form
    /// or by quadrature.
    pub total_intensity: Option<f64>,
}

fn rect_gap(a: &AxisRect, b: &AxisRect) -> f64 {
    let dx = (b.origin.x - a.x1()).max(a.origin.x - b.x1()).max(0.0);
    let dy = (b.origin.y - a.y1()).max(a.origin.y - b.y1()).max(0.0);
    dx.hypot(dy)
}

fn uniform_in<R: Rng + ?Sized>(r: &AxisRect, rng: &mut R) -> Point {
    Point::new(r.origin.x + r.width * unit(rng), r.origin.y + r.height * unit(rng))
}

/// Orients a pair so that the second point lies in the right half plane
/// seen from the first.
pub fn orient_pair(x: Point, y: Point) -> (Point, Point) {
    let d = y - x;
    let ang = d.y.atan2(d.x);
    if ang > FRAC_PI_2 || ang <= -FRAC_PI_2 {
        (y, x)
    } else {
        (x, y)
    }
}

/// Length law for displacement `r` with density proportional to `r^(1-s)`
/// on `[lo, hi)`.
fn draw_length<R: Rng + ?Sized>(s: f64, lo: f64, hi: f64, rng: &mut R) -> f64 {
    let e = 2.0 - s;
    let (a, b) = (lo.powf(e), if hi.is_finite() { hi.powf(e) } else { 0.0 });
    (a + unit(rng) * (b - a)).powf(1.0 / e)
}

fn length_mass(s: f64, lo: f64, hi: f64) -> f64 {
    let e = 2.0 - s;
    let b = if hi.is_finite() { hi.powf(e) } else { 0.0 };
    (lo.powf(e) - b) / (s - 2.0)
}

pub fn sample_segment_process(params: &LongRangeParams, region: &SegmentRegion, seed: u64) -> Result<SegmentSample> {
    params.validate()?;
    let mut rng = child_stream(seed, tag("segment-process"), 0);
    let mut pairs = Vec::new();
    if params.beta == 0.0 {
        return Ok(SegmentSample { pairs, total_intensity: Some(0.0) });
    }
    let (beta, s, kappa) = (params.beta, params.s, params.kappa);
    let total = match *region {
        SegmentRegion::Pair { a, b } => {
            check_window(&a)?;
            check_window(&b)?;
            let dmin = rect_gap(&a, &b).max(kappa);
            if !(rect_gap(&a, &b) > 0.0) && a.contains(b.center()) {
                return Err(Error::invalid("pair region boxes must be disjoint"));
            }
            let dom = beta * dmin.powf(-s) * a.area() * b.area();
            let n = poisson(&mut rng, dom);
            for _ in 0..n {
                let x = uniform_in(&a, &mut rng);
                let y = uniform_in(&b, &mut rng);
                let d = x.dist(y);
                if d > kappa && unit(&mut rng) < (dmin / d).powf(s) {
                    pairs.push((x, y));
                }
            }
            if rect_gap(&a, &b) >= kappa {
                Some(beta * box_pair_integral(&a, &b, s))
            } else {
                None
            }
        }
        SegmentRegion::Midpoint { window, max_half } => {
            check_window(&window)?;
            let hi = 2.0 * max_half;
            if !(hi > kappa) {
                return Err(Error::invalid("max_half must exceed kappa / 2"));
            }
            let pad = window.padded(max_half);
            let mean = beta * pad.area() * PI * length_mass(s, kappa, hi);
            let n = poisson(&mut rng, mean);
            for _ in 0..n {
                let x = uniform_in(&pad, &mut rng);
                let r = draw_length(s, kappa, hi, &mut rng);
                let th = FRAC_PI_2 - PI * unit(&mut rng);
                let y = x + Point::polar(r, th);
                if window.contains((x + y) * 0.5) {
                    pairs.push((x, y));
                }
            }
            Some(beta * window.area() * PI * length_mass(s, kappa, hi))
        }
        SegmentRegion::Within { window } => {
            check_window(&window)?;
            let hi = window.width.hypot(window.height);
            if !(hi > kappa) {
                return Ok(SegmentSample { pairs, total_intensity: Some(0.0) });
            }
            let mean = beta * window.area() * PI * length_mass(s, kappa, hi);
            let n = poisson(&mut rng, mean);
            for _ in 0..n {
                let x = uniform_in(&window, &mut rng);
                let r = draw_length(s, kappa, hi, &mut rng);
                let th = FRAC_PI_2 - PI * unit(&mut rng);
                let y = x + Point::polar(r, th);
                if window.contains(y) {
                    pairs.push((x, y));
                }
            }
            None
        }
    };
    Ok(SegmentSample { pairs, total_intensity: total })
}

/// `int_A int_B |x - y|^-s dx dy` for disjoint boxes by tensor Gauss-Legendre,
/// subdividing the larger box while the boxes are close relative to size.
pub fn box_pair_integral(a: &AxisRect, b: &AxisRect, s: f64) -> f64 {
    box_pair_rec(a, b, s, 0)
}

fn box_pair_rec(a: &AxisRect, b: &AxisRect, s: f64, depth: u32) -> f64 {
    let gap = rect_gap(a, b);
    let size = a.width.max(a.height).max(b.width).max(b.height);
    if gap < 1.5 * size && depth < 10 {
        let (big, small, swap) = if a.width.max(a.height) >= b.width.max(b.height) { (a, b, false) } else { (b, a, true) };
        let (hw, hh) = (big.width / 2.0, big.height / 2.0);
        let mut total = 0.0;
        for (dx, dy) in [(0.0, 0.0), (hw, 0.0), (0.0, hh), (hw, hh)] {
            let q = AxisRect::new(Point::new(big.origin.x + dx, big.origin.y + dy), hw, hh);
            total += if swap { box_pair_rec(small, &q, s, depth + 1) } else { box_pair_rec(&q, small, s, depth + 1) };
        }
        return total;
    }
    // the integrand is smooth at this separation; fewer nodes suffice far out
    let n = if gap > 12.0 * size { 3 } else if gap > 4.0 * size { 5 } else { 8 };
    let ax = stats::gl_interval(a.origin.x, a.x1(), n);
    let ay = stats::gl_interval(a.origin.y, a.y1(), n);
    let bx = stats::gl_interval(b.origin.x, b.x1(), n);
    let by = stats::gl_interval(b.origin.y, b.y1(), n);
    let mut total = 0.0;
    for &(x1, w1) in &ax {
        for &(y1, w2) in &ay {
            for &(x2, w3) in &bx {
                for &(y2, w4) in &by {
                    let d2 = (x1 - x2).powi(2) + (y1 - y2).powi(2);
                    total += w1 * w2 * w3 * w4 * d2.powf(-s / 2.0);
                }
            }
        }
    }
    total
}

/// Parameters of the two-route comparison between the segment and the
/// ellipse samplers.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CouplingTestConfig {
    pub ellipse: EllipseModelParams,
    /// Tail exponent used for the segment route; equal to `ellipse.alpha`
    /// for a matched test.
    pub segment_alpha: f64,
    pub window_side: f64,
    pub max_r: f64,
    pub replicates: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CouplingReport {
    pub n_from_segments: u64,
    pub n_from_ellipses: u64,
    pub p_radius: f64,
    pub p_angle: f64,
    pub p_count: f64,
}

impl CouplingReport {
    pub fn min_p(&self) -> f64 {
        self.p_radius.min(self.p_angle).min(self.p_count)
    }
}

/// Pushes a segment sample through `psi_inverse` and compares it with a
/// direct ellipse sample: two-sample KS on `R` and on `V`, and an exact
/// rate test on the counts. Both routes keep centers in the window and
/// `R <= max_r`.
pub fn coupling_equivalence_test(cfg: &CouplingTestConfig, seed: u64) -> Result<CouplingReport> {
    let p = cfg.ellipse;
    p.validate()?;
    let window = AxisRect::new(Point::new(0.0, 0.0), cfg.window_side, cfg.window_side);
    let seg_params = EllipseModelParams { alpha: cfg.segment_alpha, ..p };
    let lr = convert_params(&seg_params);
    let (mut rs_a, mut vs_a, mut rs_b, mut vs_b) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for rep in 0..cfg.replicates as u64 {
        if p.u > 0.0 {
            let seg = sample_segment_process(
                &lr,
                &SegmentRegion::Midpoint { window, max_half: cfg.max_r },
                rng::derive_seed(seed, tag("coupling-seg"), rep),
            )?;
            for (x, y) in seg.pairs {
                let (_, r, v) = psi_inverse(x, y)?;
                rs_a.push(r);
                vs_a.push(v);
            }
            let ell = sample_ellipse_process(
                &p,
                &Window::new(window, FarField::Off),
                rng::derive_seed(seed, tag("coupling-ell"), rep),
            )?;
            for e in ell.ellipses.iter().filter(|e| e.half_major <= cfg.max_r) {
                rs_b.push(e.half_major);
                vs_b.push(e.angle);
            }
        }
    }
    Ok(CouplingReport {
        n_from_segments: rs_a.len() as u64,
        n_from_ellipses: rs_b.len() as u64,
        p_radius: stats::ks_two_sample(&rs_a, &rs_b).1,
        p_angle: stats::ks_two_sample(&vs_a, &vs_b).1,
        p_count: stats::poisson_rate_test(rs_a.len() as u64, rs_b.len() as u64),
    })
}
