//! Long-range percolation on Z^2: a lazily evaluated edge field, explicit
//! box samples (direct and segment-coupled), the connecting-boxes estimate,
//! and the hierarchy search with its scale schedule.
//!
//! Edge law: `P(x ~ y) = 1 - exp(-beta |x - y|^-s)`. Each ordered pair
//! `(a, c)` carries an independent "pick" of probability
//! `1 - exp(-lambda / 2)` and the edge is open iff either endpoint picks the
//! other.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};

use crate::error::{Error, Result};
use crate::geometry::{AxisRect, Point};
use crate::rng::{splitmix64, unit_open0, SplitMix64, unit};
use crate::sampler::{box_pair_integral, sample_segment_process, LongRangeParams, SegmentRegion};
use crate::stats::{self, EstimateReport};

pub type Site = (i64, i64);

/// Row-major order key.
pub fn row_major(s: Site) -> (i64, i64) {
    (s.1, s.0)
}

pub fn dist_inf(a: Site, b: Site) -> i64 {
    (a.0 - b.0).abs().max((a.1 - b.1).abs())
}

pub fn dist_euclid(a: Site, b: Site) -> f64 {
    ((a.0 - b.0) as f64).hypot((a.1 - b.1) as f64)
}

pub fn norm_edge(a: Site, b: Site) -> (Site, Site) {
    if row_major(a) <= row_major(b) {
        (a, b)
    } else {
        (b, a)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatticeParams {
    pub beta: f64,
    pub s: f64,
    /// Minimal segment length in coupled mode.
    #[serde(default = "default_kappa")]
    pub kappa: f64,
}

fn default_kappa() -> f64 {
    0.5
}

impl LatticeParams {
    pub fn new(beta: f64, s: f64) -> Self {
        LatticeParams { beta, s, kappa: default_kappa() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta.is_finite() && self.beta >= 0.0) {
            return Err(Error::invalid(format!("beta must be finite and >= 0, got {}", self.beta)));
        }
        if !(self.s > 2.0 && self.s.is_finite()) {
            return Err(Error::invalid(format!("s must exceed 2, got {}", self.s)));
        }
        Ok(())
    }

    pub fn edge_prob(&self, d: f64) -> f64 {
        -(-self.beta * d.powf(-self.s)).exp_m1()
    }
}

/// Sites at infinity-distance exactly `r` from the origin, indexed
/// `0..8r` counterclockwise from `(r, -r)`.
fn ring_offset(r: i64, k: i64) -> Site {
    let side = k / (2 * r);
    let t = k % (2 * r);
    match side {
        0 => (r, -r + t),
        1 => (r - t, r),
        2 => (-r, r - t),
        _ => (-r + t, -r),
    }
}

/// Band `j` holds rings `2^j <= r < 2^(j+1)`.
fn band_of(d_inf: i64) -> u32 {
    63 - (d_inf as u64).leading_zeros()
}

fn band_offset(j: u32, idx: u64) -> Site {
    let r0 = 1i64 << j;
    let t = idx as f64 / 4.0 + (r0 * (r0 - 1)) as f64;
    let mut r = ((1.0 + (1.0 + 4.0 * t).sqrt()) / 2.0).floor() as i64;
    let before = |r: i64| 4 * (r * (r - 1) - r0 * (r0 - 1));
    while before(r) > idx as i64 {
        r -= 1;
    }
    while before(r + 1) <= idx as i64 {
        r += 1;
    }
    ring_offset(r, idx as i64 - before(r))
}

fn band_size(j: u32) -> u64 {
    let (r0, r1) = (1i64 << j, 1i64 << (j + 1));
    (4 * (r1 * (r1 - 1) - r0 * (r0 - 1))) as u64
}

/// Edge field on all of Z^2, evaluated on demand. Randomness for the picks
/// of site `a` in band `j` comes from a stream keyed by `(seed, a, j)`;
/// candidates are generated at the dominating rate `beta_dom` and thinned,
/// so fields with the same seed and `beta_dom` are increasing in `beta`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LazyLattice {
    pub params: LatticeParams,
    pub beta_dom: f64,
    pub seed: u64,
    pub kernel: Kernel,
}

/// Edge intensity as a function of the site offset `d`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Kernel {
    /// `beta |d|^-s`.
    Point,
    /// `beta * int int |p - q|^-s` over unit boxes at offset `scale * d`:
    /// the core-to-core bonds of a renormalized model after rescaling.
    UnitBoxes { scale: f64 },
}

impl Kernel {
    fn intensity(&self, beta: f64, s: f64, d: Site) -> f64 {
        match *self {
            Kernel::Point => beta * dist_euclid((0, 0), d).powf(-s),
            Kernel::UnitBoxes { scale } => {
                let a = AxisRect::centered(Point::new(0.0, 0.0), 1.0, 1.0);
                let b = AxisRect::centered(Point::new(scale * d.0 as f64, scale * d.1 as f64), 1.0, 1.0);
                beta * box_pair_integral(&a, &b, s)
            }
        }
    }

    /// Bounds `(lo, hi)` on the intensity; pairwise distances between two
    /// unit boxes at center offset `D` lie in `[D - sqrt 2, D + sqrt 2]`.
    fn intensity_bounds(&self, beta: f64, s: f64, d: Site) -> (f64, f64) {
        match *self {
            Kernel::Point => {
                let v = self.intensity(beta, s, d);
                (v, v)
            }
            Kernel::UnitBoxes { scale } => {
                let c = scale * dist_euclid((0, 0), d);
                let r2 = std::f64::consts::SQRT_2;
                if c <= 2.0 * r2 {
                    return (0.0, f64::INFINITY);
                }
                // the integral is E|v + w|^-s with w the difference of two
                // uniform points; odd moments vanish, E[w w^T] = I / 6, and
                // fourth directional derivatives are at most
                // s(s+1)(s+2)(s+3) r^(-s-4) (Gegenbauer bound), |w|^4 <= 4
                let mid = c.powf(-s) * (1.0 + s * s / (12.0 * c * c));
                let err = s * (s + 1.0) * (s + 2.0) * (s + 3.0) / 6.0 * (c - r2).powf(-s - 4.0);
                let lo = (c + r2).powf(-s).max(mid - err);
                let hi = (c - r2).powf(-s).min(mid + err);
                (beta * lo * (1.0 - 1e-9), beta * hi * (1.0 + 1e-9))
            }
        }
    }

    /// Upper bound on the intensity over band `j`.
    fn band_bound(&self, beta: f64, s: f64, j: u32) -> f64 {
        let r = (1u64 << j) as f64;
        match *self {
            Kernel::Point => beta * r.powf(-s),
            Kernel::UnitBoxes { scale } => beta * (scale * r - 1.0).max(1e-300).powf(-s),
        }
    }
}

impl LazyLattice {
    pub fn new(params: LatticeParams, seed: u64) -> Result<Self> {
        Self::coupled(params, params.beta, seed)
    }

    pub fn coupled(params: LatticeParams, beta_dom: f64, seed: u64) -> Result<Self> {
        params.validate()?;
        if beta_dom < params.beta {
            return Err(Error::invalid("beta_dom must dominate beta"));
        }
        Ok(LazyLattice { params, beta_dom, seed, kernel: Kernel::Point })
    }

    /// Core-to-core bonds between boxes of side `1 / scale` times the site
    /// spacing; requires `scale > 1` so that distinct boxes are disjoint.
    pub fn with_kernel(mut self, kernel: Kernel) -> Result<Self> {
        if let Kernel::UnitBoxes { scale } = kernel {
            if !(scale > 1.0) {
                return Err(Error::invalid("box kernel needs scale > 1"));
            }
        }
        self.kernel = kernel;
        Ok(self)
    }

    pub fn edge_prob(&self, a: Site, b: Site) -> f64 {
        -(-self.kernel.intensity(self.params.beta, self.params.s, (b.0 - a.0, b.1 - a.1))).exp_m1()
    }

    fn stream(&self, a: Site, j: u32) -> SplitMix64 {
        let h = splitmix64(self.seed ^ splitmix64((a.0 as u64) ^ splitmix64((a.1 as u64) ^ splitmix64(j as u64 + 1))));
        SplitMix64::new(h)
    }

    /// Sites picked by `a` at infinity-distance in band `j`.
    pub fn picks(&self, a: Site, j: u32) -> Vec<Site> {
        let mut out = Vec::new();
        if self.beta_dom == 0.0 || self.params.beta == 0.0 {
            return out;
        }
        let mu = 0.5 * self.kernel.band_bound(self.beta_dom, self.params.s, j);
        let q_dom = -(-mu).exp_m1();
        let m = band_size(j);
        let mut rng = self.stream(a, j);
        let mut idx: u64 = 0;
        loop {
            let skip = (-unit_open0(&mut rng).ln() / mu).floor();
            if skip >= (m - idx) as f64 {
                break;
            }
            idx += skip as u64;
            let v = unit(&mut rng) * q_dom;
            let off = band_offset(j, idx);
            let c = (a.0 + off.0, a.1 + off.1);
            let accept = |lam: f64| -(-0.5 * lam).exp_m1();
            let (lo, hi) = self.kernel.intensity_bounds(self.params.beta, self.params.s, off);
            let open = if v < accept(lo) {
                true
            } else if v >= accept(hi) {
                false
            } else {
                v < accept(self.kernel.intensity(self.params.beta, self.params.s, off))
            };
            if open {
                out.push(c);
            }
            idx += 1;
            if idx >= m {
                break;
            }
        }
        out
    }

    pub fn picks_site(&self, a: Site, c: Site) -> bool {
        if a == c {
            return false;
        }
        self.picks(a, band_of(dist_inf(a, c))).contains(&c)
    }
}

/// How a lattice sample is generated.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatticeMode {
    /// Independent edges with the point formula.
    Direct,
    /// Edges between sites whose unit boxes are joined by a segment.
    Coupled,
    /// Every pair open.
    Complete,
    /// No pair open.
    Empty,
}

/// Explicit edges among the sites of `[0, n)^2`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatticeSample {
    pub side: i64,
    pub params: LatticeParams,
    pub mode: LatticeMode,
    pub edges: BTreeSet<(Site, Site)>,
    /// Segments behind the edges in coupled mode.
    pub segments: Vec<(Point, Point)>,
    #[serde(skip)]
    adj: HashMap<Site, Vec<Site>>,
}

/// Site whose unit box `x + [-1/2, 1/2)^2` contains `p`.
pub fn site_of(p: Point) -> Site {
    ((p.x + 0.5).floor() as i64, (p.y + 0.5).floor() as i64)
}

/// Edges contracted from segments: each segment joins the sites of the
/// boxes holding its endpoints.
pub fn edges_from_segments(segments: &[(Point, Point)], side: i64) -> BTreeSet<(Site, Site)> {
    let inside = |s: Site| s.0 >= 0 && s.1 >= 0 && s.0 < side && s.1 < side;
    segments
        .iter()
        .map(|&(x, y)| (site_of(x), site_of(y)))
        .filter(|&(a, b)| a != b && inside(a) && inside(b))
        .map(|(a, b)| norm_edge(a, b))
        .collect()
}

pub fn sample_lattice(n: i64, params: &LatticeParams, mode: LatticeMode, seed: u64) -> Result<LatticeSample> {
    params.validate()?;
    if n < 1 {
        return Err(Error::invalid("lattice side must be positive"));
    }
    let inside = |s: Site| s.0 >= 0 && s.1 >= 0 && s.0 < n && s.1 < n;
    let mut segments = Vec::new();
    let edges = match mode {
        LatticeMode::Empty | LatticeMode::Complete => BTreeSet::new(),
        LatticeMode::Direct => {
            let lazy = LazyLattice::new(*params, seed)?;
            let max_band = band_of((n - 1).max(1));
            let sites: Vec<Site> = (0..n).flat_map(|y| (0..n).map(move |x| (x, y))).collect();
            let per_site: Vec<Vec<(Site, Site)>> = sites
                .par_iter()
                .map(|&a| {
                    let mut v = Vec::new();
                    for j in 0..=max_band {
                        for c in lazy.picks(a, j) {
                            if inside(c) {
                                v.push(norm_edge(a, c));
                            }
                        }
                    }
                    v
                })
                .collect();
            per_site.into_iter().flatten().collect()
        }
        LatticeMode::Coupled => {
            let lr = LongRangeParams { beta: params.beta, s: params.s, kappa: params.kappa };
            let window = AxisRect::new(Point::new(-0.5, -0.5), n as f64, n as f64);
            segments = sample_segment_process(&lr, &SegmentRegion::Within { window }, seed)?.pairs;
            edges_from_segments(&segments, n)
        }
    };
    let mut s = LatticeSample { side: n, params: *params, mode, edges, segments, adj: HashMap::new() };
    s.rebuild_adjacency();
    Ok(s)
}

impl LatticeSample {
    fn rebuild_adjacency(&mut self) {
        self.adj.clear();
        for &(a, b) in &self.edges {
            self.adj.entry(a).or_default().push(b);
            self.adj.entry(b).or_default().push(a);
        }
        for v in self.adj.values_mut() {
            v.sort_by_key(|&s| row_major(s));
        }
    }

    pub fn contains(&self, s: Site) -> bool {
        s.0 >= 0 && s.1 >= 0 && s.0 < self.side && s.1 < self.side
    }

    pub fn write_edge_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["x1", "y1", "x2", "y2"])?;
        for &(a, b) in &self.edges {
            wr.write_record([a.0.to_string(), a.1.to_string(), b.0.to_string(), b.1.to_string()])?;
        }
        wr.flush()?;
        Ok(())
    }
}

/// Sites at infinity-distance in `[lo, hi]` from `c`, row-major.
fn annulus_sites(c: Site, lo: i64, hi: i64, keep: impl Fn(Site) -> bool) -> Vec<Site> {
    let mut v = Vec::new();
    for dy in -hi..=hi {
        for dx in -hi..=hi {
            let d = dx.abs().max(dy.abs());
            let s = (c.0 + dx, c.1 + dy);
            if d >= lo && keep(s) {
                v.push(s);
            }
        }
    }
    v
}

/// Anything that can answer "is the edge open" and scan a neighborhood
/// pair for its first open edge.
pub trait EdgeSource {
    fn is_open(&self, a: Site, b: Site) -> bool;
    fn in_domain(&self, s: Site) -> bool;
    /// Open pairs `(a, b)`, `a` near `ca`, `b` near `cb`, both at
    /// infinity-distance in `[lo, hi]` from their centers, ordered by
    /// `(row_major(a), row_major(b))`; the first one not in `used` is
    /// returned.
    fn first_open_between(&self, ca: Site, cb: Site, lo: i64, hi: i64, used: &HashSet<(Site, Site)>) -> Option<(Site, Site)>;

    /// An open pair chosen to shorten the detour: with `p` and `q` the sites
    /// at infinity-distance `lo` from `ca` and `cb` on the segment between
    /// them, the pair minimizing `|a - p|_inf + |b - q|_inf`, ties broken
    /// row-major. Defaults to
    /// [`EdgeSource::first_open_between`].
    fn nearest_pick_between(&self, ca: Site, cb: Site, lo: i64, hi: i64, used: &HashSet<(Site, Site)>) -> Option<(Site, Site)> {
        self.first_open_between(ca, cb, lo, hi, used)
    }
}

fn in_ann(c: Site, lo: i64, hi: i64, s: Site) -> bool {
    let d = dist_inf(c, s);
    d >= lo && d <= hi
}

impl EdgeSource for LazyLattice {
    fn is_open(&self, a: Site, b: Site) -> bool {
        self.picks_site(a, b) || self.picks_site(b, a)
    }

    fn in_domain(&self, _s: Site) -> bool {
        true
    }

    fn first_open_between(&self, ca: Site, cb: Site, lo: i64, hi: i64, used: &HashSet<(Site, Site)>) -> Option<(Site, Site)> {
        let sa = annulus_sites(ca, lo, hi, |_| true);
        let sb = annulus_sites(cb, lo, hi, |_| true);
        // bands that can reach the other neighborhood
        let bands = |s: Site, c: Site| -> std::ops::RangeInclusive<u32> {
            let d = dist_inf(s, c);
            let dlo = (d - hi).max(1);
            let dhi = (d + hi).max(1);
            band_of(dlo)..=band_of(dhi)
        };
        let scan = |from: &[Site], c_to: Site, flip: bool| -> Vec<(Site, Site)> {
            from.par_iter()
                .flat_map_iter(|&s| {
                    let mut v = Vec::new();
                    for j in bands(s, c_to) {
                        for t in self.picks(s, j) {
                            if in_ann(c_to, lo, hi, t) {
                                v.push(if flip { (t, s) } else { (s, t) });
                            }
                        }
                    }
                    v
                })
                .collect()
        };
        let mut cand = scan(&sa, cb, false);
        cand.extend(scan(&sb, ca, true));
        cand.retain(|&(a, b)| a != b && !used.contains(&norm_edge(a, b)));
        cand.into_iter().min_by_key(|&(a, b)| (row_major(a), row_major(b)))
    }

    fn nearest_pick_between(&self, ca: Site, cb: Site, lo: i64, hi: i64, used: &HashSet<(Site, Site)>) -> Option<(Site, Site)> {
        let (p, q) = inner_targets(ca, cb, lo);
        let mut best: Option<(i64, (i64, i64), (i64, i64), Site, Site)> = None;
        // ring r around p; any later site scores at least r
        for r in 0..=(2 * hi) {
            if best.is_some_and(|b| b.0 <= r) {
                break;
            }
            for a in ring_sites(p, r) {
                if !in_ann(ca, lo, hi, a) {
                    continue;
                }
                for b in self.picks_into(a, cb, lo, hi, used) {
                    let key = (r + dist_inf(b, q), row_major(a), row_major(b), a, b);
                    if best.is_none_or(|x| key < x) {
                        best = Some(key);
                    }
                }
            }
            for b in ring_sites(q, r) {
                if !in_ann(cb, lo, hi, b) {
                    continue;
                }
                for a in self.picks_into(b, ca, lo, hi, used) {
                    let key = (r + dist_inf(a, p), row_major(a), row_major(b), a, b);
                    if best.is_none_or(|x| key < x) {
                        best = Some(key);
                    }
                }
            }
        }
        best.map(|k| (k.3, k.4))
    }
}

/// Sites at infinity-distance `lo` from `ca` and from `cb` on the segment
/// between them.
pub fn inner_targets(ca: Site, cb: Site, lo: i64) -> (Site, Site) {
    let d = (cb.0 - ca.0, cb.1 - ca.1);
    let m = d.0.abs().max(d.1.abs()).max(1) as f64;
    let off = ((d.0 as f64 * lo as f64 / m).round() as i64, (d.1 as f64 * lo as f64 / m).round() as i64);
    ((ca.0 + off.0, ca.1 + off.1), (cb.0 - off.0, cb.1 - off.1))
}

/// Sites at infinity-distance exactly `r` from `c`, row-major.
fn ring_sites(c: Site, r: i64) -> Vec<Site> {
    if r == 0 {
        return vec![c];
    }
    let mut v = Vec::with_capacity(8 * r as usize);
    for dy in -r..=r {
        if dy.abs() == r {
            v.extend((-r..=r).map(|dx| (c.0 + dx, c.1 + dy)));
        } else {
            v.push((c.0 - r, c.1 + dy));
            v.push((c.0 + r, c.1 + dy));
        }
    }
    v
}

impl LazyLattice {
    /// Unused picks of `a` landing at infinity-distance `[lo, hi]` from `cb`,
    /// in row-major order.
    fn picks_into(&self, a: Site, cb: Site, lo: i64, hi: i64, used: &HashSet<(Site, Site)>) -> Vec<Site> {
        let d = dist_inf(a, cb);
        let mut out = Vec::new();
        for j in band_of((d - hi).max(1))..=band_of((d + hi).max(1)) {
            out.extend(self.picks(a, j).into_iter().filter(|&t| t != a && in_ann(cb, lo, hi, t) && !used.contains(&norm_edge(a, t))));
        }
        out.sort_by_key(|&t| row_major(t));
        out
    }
}

impl EdgeSource for LatticeSample {
    fn is_open(&self, a: Site, b: Site) -> bool {
        if a == b || !self.contains(a) || !self.contains(b) {
            return false;
        }
        match self.mode {
            LatticeMode::Complete => true,
            LatticeMode::Empty => false,
            _ => self.edges.contains(&norm_edge(a, b)),
        }
    }

    fn in_domain(&self, s: Site) -> bool {
        self.contains(s)
    }

    fn first_open_between(&self, ca: Site, cb: Site, lo: i64, hi: i64, used: &HashSet<(Site, Site)>) -> Option<(Site, Site)> {
        let sa = annulus_sites(ca, lo, hi, |s| self.contains(s));
        match self.mode {
            LatticeMode::Empty => None,
            LatticeMode::Complete => {
                let sb = annulus_sites(cb, lo, hi, |s| self.contains(s));
                sa.iter()
                    .flat_map(|&a| sb.iter().map(move |&b| (a, b)))
                    .find(|&(a, b)| a != b && !used.contains(&norm_edge(a, b)))
            }
            _ => sa.iter().find_map(|&a| {
                self.adj.get(&a).and_then(|nb| {
                    nb.iter().find(|&&b| in_ann(cb, lo, hi, b) && !used.contains(&norm_edge(a, b))).map(|&b| (a, b))
                })
            }),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HierarchySchedule {
    pub big_n: f64,
    pub gamma: f64,
    pub eps: f64,
    pub depth: u32,
    pub delta_prime: f64,
}

impl HierarchySchedule {
    /// `N_k = N^(gamma^k)`.
    pub fn scale(&self, k: u32) -> f64 {
        self.big_n.powf(self.gamma.powi(k as i32))
    }
}

/// Depth `n`: the greatest positive integer with
/// `n log(1/gamma) <= log log N - eps log log log N`.
pub fn schedule(big_n: f64, gamma: f64, eps: f64) -> Result<HierarchySchedule> {
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(Error::invalid(format!("gamma must lie in (0, 1), got {gamma}")));
    }
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::invalid(format!("eps must be positive, got {eps}")));
    }
    if !(big_n > std::f64::consts::E.exp()) {
        return Err(Error::invalid(format!("N = {big_n} is too small for the iterated logarithms")));
    }
    let l2 = big_n.ln().ln();
    let l3 = l2.ln();
    let n = ((l2 - eps * l3) / (1.0 / gamma).ln()).floor();
    if n < 1.0 {
        return Err(Error::invalid(format!("N = {big_n} gives no positive depth")));
    }
    Ok(HierarchySchedule {
        big_n,
        gamma,
        eps,
        depth: n as u32,
        delta_prime: 2f64.ln() / (1.0 / gamma).ln(),
    })
}

/// Binary word as a string of '0' and '1'.
pub type Word = String;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Highway {
    pub word: Word,
    pub from: Site,
    pub to: Site,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hierarchy {
    pub depth: u32,
    pub x: Site,
    pub y: Site,
    pub z: BTreeMap<Word, Site>,
    /// `(z_{w01}, z_{w10})` for words `w` of length `0..=depth-2`.
    pub highways: Vec<Highway>,
    /// `(z_{w0}, z_{w1})` for words `w` of length `depth-1`, left to right.
    pub gaps: Vec<(Site, Site)>,
    /// Smallest `b` with every highway length in `[b N_k, N_k / b]`.
    pub b_measured: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum HierarchyOutcome {
    Found(Hierarchy),
    /// First level (1-based) at which a neighborhood pair had no open edge.
    Failed { level: u32 },
}

impl HierarchyOutcome {
    pub fn found(&self) -> Option<&Hierarchy> {
        match self {
            HierarchyOutcome::Found(h) => Some(h),
            HierarchyOutcome::Failed { .. } => None,
        }
    }
}

fn words(k: u32) -> impl Iterator<Item = Word> {
    (0..1u64 << k).map(move |i| (0..k).rev().map(|b| if i >> b & 1 == 1 { '1' } else { '0' }).collect())
}

/// Depth actually used: the schedule depth, capped by `max_depth` and by
/// the discreteness floor `N_k >= 4` on every neighborhood scale used.
pub fn effective_depth(sched: &HierarchySchedule, max_depth: Option<u32>) -> u32 {
    let mut n = sched.depth.min(max_depth.unwrap_or(u32::MAX)).max(1);
    while n > 1 && sched.scale(n - 1) < 4.0 {
        n -= 1;
    }
    n
}

/// Depth in `2..=effective_depth` minimizing the total gap length
/// `2^(n-2) N_(n-1)` left between consecutive hierarchy sites.
pub fn gap_budget_depth(sched: &HierarchySchedule) -> u32 {
    let top = effective_depth(sched, None);
    (2..=top.max(2))
        .min_by(|&a, &b| {
            let cost = |n: u32| 2f64.powi(n as i32 - 2) * sched.scale(n - 1);
            cost(a).total_cmp(&cost(b))
        })
        .unwrap_or(2)
        .min(top)
}

fn ring_bounds(nk: f64) -> (i64, i64) {
    ((0.5 * nk).ceil() as i64, nk.floor() as i64)
}

/// Level-by-level greedy construction. At level `k + 1` every word `w` of
/// length `k` gets the first open pair between the neighborhoods
/// `{z : N_{k+1}/2 <= |z - z_{w0}|_inf <= N_{k+1}}` and the same around
/// `z_{w1}`, scanning in row-major pair order and skipping edges already
/// used.
pub fn find_hierarchy<S: EdgeSource + ?Sized>(
    src: &S,
    x: Site,
    y: Site,
    sched: &HierarchySchedule,
    max_depth: Option<u32>,
) -> Result<HierarchyOutcome> {
    find_hierarchy_with(src, x, y, sched, max_depth, HighwayRule::FirstOpenPair)
}

/// How each highway is chosen among the open edges between two
/// neighborhoods.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HighwayRule {
    /// First open pair in row-major pair order ([`EdgeSource::first_open_between`]).
    #[default]
    FirstOpenPair,
    /// Shortest detour found from one side ([`EdgeSource::nearest_pick_between`]).
    NearestPick,
}

/// [`find_hierarchy`] with a choice of highway rule.
pub fn find_hierarchy_with<S: EdgeSource + ?Sized>(
    src: &S,
    x: Site,
    y: Site,
    sched: &HierarchySchedule,
    max_depth: Option<u32>,
    rule: HighwayRule,
) -> Result<HierarchyOutcome> {
    if (dist_euclid(x, y) - sched.big_n).abs() > 1e-9 * sched.big_n {
        return Err(Error::invalid(format!(
            "schedule scale {} does not match |x - y| = {}",
            sched.big_n,
            dist_euclid(x, y)
        )));
    }
    if !src.in_domain(x) || !src.in_domain(y) {
        return Err(Error::invalid("x and y must lie in the sample"));
    }
    let n = effective_depth(sched, max_depth);
    let mut z: BTreeMap<Word, Site> = BTreeMap::new();
    z.insert("0".into(), x);
    z.insert("1".into(), y);
    let mut highways = Vec::new();
    let mut used = HashSet::new();
    let mut b_measured: f64 = 1.0;
    for k in 0..n.saturating_sub(1) {
        let nk1 = sched.scale(k + 1);
        let (lo, hi) = ring_bounds(nk1);
        for w in words(k) {
            let (z0, z1) = (z[&format!("{w}0")], z[&format!("{w}1")]);
            z.insert(format!("{w}00"), z0);
            z.insert(format!("{w}11"), z1);
            let found = match rule {
                HighwayRule::FirstOpenPair => src.first_open_between(z0, z1, lo, hi, &used),
                HighwayRule::NearestPick => src.nearest_pick_between(z0, z1, lo, hi, &used),
            };
            match found {
                Some((a, b)) => {
                    used.insert(norm_edge(a, b));
                    z.insert(format!("{w}01"), a);
                    z.insert(format!("{w}10"), b);
                    let r = dist_euclid(a, b) / sched.scale(k);
                    b_measured = b_measured.min(r).min(1.0 / r);
                    highways.push(Highway { word: w, from: a, to: b });
                }
                None => return Ok(HierarchyOutcome::Failed { level: k + 1 }),
            }
        }
    }
    let gaps = words(n - 1).map(|w| (z[&format!("{w}0")], z[&format!("{w}1")])).collect();
    Ok(HierarchyOutcome::Found(Hierarchy { depth: n, x, y, z, highways, gaps, b_measured }))
}

/// Independent re-check of a hierarchy against raw edge data: endpoint
/// conditions, inheritance of outer sites, open and distinct highways, and
/// the neighborhood-size constraint on every highway endpoint.
pub fn validate_hierarchy<S: EdgeSource + ?Sized>(h: &Hierarchy, src: &S, sched: &HierarchySchedule) -> Result<()> {
    let n = h.depth;
    let get = |w: &str| h.z.get(w).copied().ok_or_else(|| Error::runtime(format!("missing site for word {w}")));
    if get("0")? != h.x || get("1")? != h.y {
        return Err(Error::runtime("z_0 = x and z_1 = y violated"));
    }
    for k in 1..=n {
        for w in words(k) {
            get(&w)?;
        }
    }
    let mut seen = HashSet::new();
    for k in 0..n.saturating_sub(1) {
        let nk1 = sched.scale(k + 1);
        for w in words(k) {
            if get(&format!("{w}00"))? != get(&format!("{w}0"))? || get(&format!("{w}11"))? != get(&format!("{w}1"))? {
                return Err(Error::runtime(format!("inheritance violated at word '{w}'")));
            }
            let (a, b) = (get(&format!("{w}01"))?, get(&format!("{w}10"))?);
            if a != b {
                if !src.is_open(a, b) {
                    return Err(Error::runtime(format!("highway at word '{w}' is closed")));
                }
                if !seen.insert(norm_edge(a, b)) {
                    return Err(Error::runtime(format!("highway at word '{w}' repeats an edge")));
                }
            }
            let d0 = dist_inf(a, get(&format!("{w}00"))?) as f64;
            let d1 = dist_inf(b, get(&format!("{w}11"))?) as f64;
            for d in [d0, d1] {
                if d < 0.5 * nk1 || d > nk1 {
                    return Err(Error::runtime(format!("neighborhood constraint violated at word '{w}': {d} vs {nk1}")));
                }
            }
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FailureRow {
    pub big_n: f64,
    pub beta: f64,
    pub depth: u32,
    pub trials: u64,
    pub failures: u64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    /// Failures per level (1-based index).
    pub by_level: Vec<u64>,
    /// Plug-in `c` from `P(fail) = 2^(n-1) exp(-c N_n^(4 gamma - s))`,
    /// when `0 < P(fail) < 1`.
    pub c_fit: Option<f64>,
    pub invalid: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FailureCurveConfig {
    pub s: f64,
    pub gamma: f64,
    pub eps: f64,
    pub max_depth: Option<u32>,
    #[serde(default)]
    pub rule: HighwayRule,
}

/// Empirical probability of no hierarchy. For each trial one lazy field is
/// drawn at the largest `beta` and thinned down the ladder, so the rows
/// share randomness.
pub fn hierarchy_failure_curve(
    ns: &[i64],
    cfg: &FailureCurveConfig,
    betas: &[f64],
    trials: u64,
    seed: u64,
) -> Result<Vec<FailureRow>> {
    let beta_dom = betas.iter().copied().fold(0.0, f64::max);
    let mut rows = Vec::new();
    for &n in ns {
        let sched = schedule(n as f64, cfg.gamma, cfg.eps)?;
        let depth = effective_depth(&sched, cfg.max_depth);
        for &beta in betas {
            let params = LatticeParams::new(beta, cfg.s);
            let results: Vec<Result<(Option<u32>, bool)>> = (0..trials)
                .into_par_iter()
                .map(|t| {
                    let lazy = LazyLattice::coupled(params, beta_dom, crate::rng::derive_seed(seed, n as u64, t))?;
                    let out = find_hierarchy_with(&lazy, (0, 0), (n, 0), &sched, cfg.max_depth, cfg.rule)?;
                    Ok(match out {
                        HierarchyOutcome::Found(h) => (None, validate_hierarchy(&h, &lazy, &sched).is_ok()),
                        HierarchyOutcome::Failed { level } => (Some(level), true),
                    })
                })
                .collect();
            let mut by_level = vec![0u64; depth.max(1) as usize];
            let (mut failures, mut invalid) = (0u64, 0u64);
            for r in results {
                let (lvl, ok) = r?;
                if let Some(l) = lvl {
                    failures += 1;
                    by_level[(l - 1) as usize] += 1;
                }
                invalid += (!ok) as u64;
            }
            let (ci_lo, ci_hi) = stats::wilson(failures, trials, stats::Z95);
            let p = failures as f64 / trials as f64;
            let c_fit = (p > 0.0 && p < 1.0).then(|| {
                let nn = sched.scale(depth);
                -(p / 2f64.powi(depth as i32 - 1)).ln() / nn.powf(4.0 * cfg.gamma - cfg.s)
            });
            rows.push(FailureRow { big_n: n as f64, beta, depth, trials, failures, ci_lo, ci_hi, by_level, c_fit, invalid });
        }
    }
    Ok(rows)
}

pub fn write_failure_csv<W: std::io::Write>(rows: &[FailureRow], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["N", "beta", "trials", "failures", "ci_lo", "ci_hi"])?;
    for r in rows {
        wr.write_record([
            r.big_n.to_string(),
            r.beta.to_string(),
            r.trials.to_string(),
            r.failures.to_string(),
            r.ci_lo.to_string(),
            r.ci_hi.to_string(),
        ])?;
    }
    wr.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxConnectReport {
    pub report: EstimateReport,
    /// `beta l^4 |z|^-s`.
    pub asymptote: f64,
    /// `1 - exp(-beta * integral)` by quadrature.
    pub quadrature: f64,
    /// The boxes meet, so the probability is 1 without sampling.
    pub forced_one: bool,
}

/// Monte Carlo estimate of the probability that some segment joins
/// `[-l/2, l/2]^2` and `z + [-l/2, l/2]^2`.
pub fn box_connect_prob(l: f64, z: Point, params: &LongRangeParams, trials: u64, seed: u64) -> Result<BoxConnectReport> {
    params.validate()?;
    if !(l > 0.0) {
        return Err(Error::invalid("box side must be positive"));
    }
    let info = serde_json::json!({"l": l, "z": [z.x, z.y], "beta": params.beta, "s": params.s, "kappa": params.kappa});
    let asymptote = params.beta * l.powi(4) * z.norm().powf(-params.s);
    if z.norm_inf() <= l {
        let report = EstimateReport::new("box_connect", info, trials, trials, seed).with_comparator("touching", 1.0);
        return Ok(BoxConnectReport { report, asymptote, quadrature: 1.0, forced_one: true });
    }
    let a = AxisRect::centered(Point::new(0.0, 0.0), l, l);
    let b = AxisRect::centered(z, l, l);
    let quadrature = -(-params.beta * box_pair_integral(&a, &b, params.s)).exp_m1();
    let hits: u64 = (0..trials)
        .into_par_iter()
        .map(|t| {
            sample_segment_process(params, &SegmentRegion::Pair { a, b }, crate::rng::derive_seed(seed, 0xB0C5, t))
                .map(|s| (!s.pairs.is_empty()) as u64)
        })
        .collect::<Result<Vec<u64>>>()?
        .into_iter()
        .sum();
    let report = EstimateReport::new("box_connect", info, hits, trials, seed).with_comparator("quadrature", quadrature);
    Ok(BoxConnectReport { report, asymptote, quadrature, forced_one: false })
}
