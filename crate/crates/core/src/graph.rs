//! Intersection graph of an ellipse sample, chemical and internal distances,
//! and the greedy chain extraction used for small-scale distance bounds.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap, VecDeque};

use crate::error::{Error, Result};
use crate::geometry::{ellipses_intersect, for_each_covered_cell, intersection_point, Ellipse, Point};
use crate::sampler::ProcessSample;

/// Ellipses spanning more than this many cells along their major axis skip
/// the grid and are tested against everything.
const LARGE_SPAN_CELLS: f64 = 4096.0;

#[derive(Clone, Debug)]
pub struct IntersectionGraph {
    pub ellipses: Vec<Ellipse>,
    pub adj: Vec<Vec<u32>>,
    pub cell: f64,
    grid: HashMap<(i64, i64), Vec<u32>>,
    large: Vec<u32>,
    labels: Vec<u32>,
    n_components: usize,
}

pub fn default_cell(half_minor: f64) -> f64 {
    4.0 * half_minor
}

pub fn build_graph(sample: &ProcessSample, cell: f64) -> Result<IntersectionGraph> {
    IntersectionGraph::new(sample.ellipses.clone(), cell)
}

impl IntersectionGraph {
    /// Exact intersection graph. Candidate pairs are those sharing a grid
    /// cell; every candidate is confirmed by [`ellipses_intersect`].
    pub fn new(ellipses: Vec<Ellipse>, cell: f64) -> Result<Self> {
        if !(cell > 0.0 && cell.is_finite()) {
            return Err(Error::invalid(format!("cell size must be positive, got {cell}")));
        }
        let n = ellipses.len();
        let mut grid: HashMap<(i64, i64), Vec<u32>> = HashMap::new();
        let mut large = Vec::new();
        let mut cells_of: Vec<Vec<(i64, i64)>> = vec![Vec::new(); n];
        for (i, e) in ellipses.iter().enumerate() {
            if e.half_major / cell > LARGE_SPAN_CELLS {
                large.push(i as u32);
                continue;
            }
            for_each_covered_cell(e, cell, |c| {
                grid.entry(c).or_default().push(i as u32);
                cells_of[i].push(c);
            });
        }
        let is_large: Vec<bool> = {
            let mut v = vec![false; n];
            for &i in &large {
                v[i as usize] = true;
            }
            v
        };
        let found: Vec<Vec<u32>> = (0..n)
            .into_par_iter()
            .map(|i| {
                let mut cand: Vec<u32> = if is_large[i] {
                    ((i as u32 + 1)..n as u32).collect()
                } else {
                    let mut c: Vec<u32> = cells_of[i]
                        .iter()
                        .flat_map(|k| grid[k].iter().copied())
                        .filter(|&j| j as usize > i)
                        .collect();
                    c.extend(large.iter().copied().filter(|&j| j as usize > i));
                    c
                };
                cand.sort_unstable();
                cand.dedup();
                cand.retain(|&j| ellipses_intersect(&ellipses[i], &ellipses[j as usize]));
                cand
            })
            .collect();
        let mut adj: Vec<Vec<u32>> = vec![Vec::new(); n];
        for (i, nb) in found.iter().enumerate() {
            for &j in nb {
                adj[i].push(j);
                adj[j as usize].push(i as u32);
            }
        }
        for a in adj.iter_mut() {
            a.sort_unstable();
        }
        let mut uf = UnionFind::new(n);
        for (i, nb) in found.iter().enumerate() {
            for &j in nb {
                uf.union(i, j as usize);
            }
        }
        let (labels, n_components) = uf.labels();
        Ok(IntersectionGraph { ellipses, adj, cell, grid, large, labels, n_components })
    }

    pub fn len(&self) -> usize {
        self.ellipses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ellipses.is_empty()
    }

    pub fn edge_count(&self) -> usize {
        self.adj.iter().map(Vec::len).sum::<usize>() / 2
    }

    pub fn edges(&self) -> impl Iterator<Item = (u32, u32)> + '_ {
        self.adj
            .iter()
            .enumerate()
            .flat_map(|(i, nb)| nb.iter().filter(move |&&j| j as usize > i).map(move |&j| (i as u32, j)))
    }

    /// Ids of ellipses containing `p`, ascending.
    pub fn containing(&self, p: Point) -> Vec<u32> {
        let key = ((p.x / self.cell).floor() as i64, (p.y / self.cell).floor() as i64);
        let mut out: Vec<u32> = self.grid.get(&key).map(|v| v.to_vec()).unwrap_or_default();
        out.extend(self.large.iter().copied());
        out.retain(|&i| self.ellipses[i as usize].contains(p));
        out.sort_unstable();
        out.dedup();
        out
    }

    pub fn label(&self, i: u32) -> u32 {
        self.labels[i as usize]
    }

    pub fn n_components(&self) -> usize {
        self.n_components
    }

    pub fn write_edge_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["i", "j"])?;
        for (i, j) in self.edges() {
            wr.write_record([i.to_string(), j.to_string()])?;
        }
        wr.flush()?;
        Ok(())
    }
}

pub struct UnionFind {
    parent: Vec<usize>,
    rank: Vec<u8>,
}

impl UnionFind {
    pub fn new(n: usize) -> Self {
        UnionFind { parent: (0..n).collect(), rank: vec![0; n] }
    }

    pub fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    pub fn union(&mut self, a: usize, b: usize) -> bool {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        match self.rank[ra].cmp(&self.rank[rb]) {
            Ordering::Less => self.parent[ra] = rb,
            Ordering::Greater => self.parent[rb] = ra,
            Ordering::Equal => {
                self.parent[rb] = ra;
                self.rank[ra] += 1;
            }
        }
        true
    }

    /// Labels numbered by first appearance in id order.
    pub fn labels(&mut self) -> (Vec<u32>, usize) {
        let n = self.parent.len();
        let mut map = HashMap::new();
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let r = self.find(i);
            let next = map.len() as u32;
            out.push(*map.entry(r).or_insert(next));
        }
        (out, map.len())
    }
}

pub fn components(g: &IntersectionGraph) -> Vec<u32> {
    g.labels.clone()
}

pub fn largest_component(g: &IntersectionGraph) -> Vec<u32> {
    if g.is_empty() {
        return Vec::new();
    }
    let mut size = vec![0usize; g.n_components];
    for &l in &g.labels {
        size[l as usize] += 1;
    }
    let best = (0..size.len()).max_by_key(|&l| (size[l], std::cmp::Reverse(l))).unwrap() as u32;
    (0..g.len() as u32).filter(|&i| g.labels[i as usize] == best).collect()
}

pub fn component_sizes(g: &IntersectionGraph) -> Vec<usize> {
    let mut size = vec![0usize; g.n_components];
    for &l in &g.labels {
        size[l as usize] += 1;
    }
    size.sort_unstable_by(|a, b| b.cmp(a));
    size
}

/// Multi-source BFS in node count: sources are at distance 1. Returns the
/// smallest distance to any target.
pub fn set_distance(g: &IntersectionGraph, sources: &[u32], is_target: impl Fn(u32) -> bool) -> Option<u32> {
    let mut dist = vec![u32::MAX; g.len()];
    let mut q = VecDeque::new();
    for &s in sources {
        if dist[s as usize] == u32::MAX {
            dist[s as usize] = 1;
            q.push_back(s);
        }
    }
    while let Some(i) = q.pop_front() {
        if is_target(i) {
            return Some(dist[i as usize]);
        }
        for &j in &g.adj[i as usize] {
            if dist[j as usize] == u32::MAX {
                dist[j as usize] = dist[i as usize] + 1;
                q.push_back(j);
            }
        }
    }
    None
}

/// Minimum number of ellipses a path from `x` to `y` inside the covered set
/// must meet.
///
/// Node-count BFS gives exactly this number: a chain `e_1, ..., e_n` with
/// `x` in `e_1`, `y` in `e_n` and consecutive members intersecting carries a
/// polyline through common points that touches only those `n` ellipses, and
/// conversely [`greedy_chain_cover`] extracts such a chain from the
/// ellipses met by any covered path, so no path meets fewer.
pub fn chemical_distance(g: &IntersectionGraph, x: Point, y: Point) -> Option<u32> {
    let sx = g.containing(x);
    let sy = g.containing(y);
    if sx.is_empty() || sy.is_empty() {
        return None;
    }
    let mut target = vec![false; g.len()];
    for &t in &sy {
        target[t as usize] = true;
    }
    set_distance(g, &sx, |i| target[i as usize])
}

/// Hierarchical grid answering neighbor queries on demand, for searches
/// that only touch a small part of a large sample. Level `k` has cells of
/// side `cell 2^k` and holds the ellipses with `half_major` in
/// `(cell 2^(k-1), cell 2^k]`, so every ellipse covers a bounded number of
/// cells at its own level.
pub struct LocalIndex<'a> {
    ellipses: &'a [Ellipse],
    cell: f64,
    levels: Vec<HashMap<(i64, i64), Vec<u32>>>,
}

impl<'a> LocalIndex<'a> {
    pub fn new(ellipses: &'a [Ellipse], cell: f64) -> Result<Self> {
        if !(cell > 0.0 && cell.is_finite()) {
            return Err(Error::invalid(format!("cell size must be positive, got {cell}")));
        }
        let mut levels: Vec<HashMap<(i64, i64), Vec<u32>>> = Vec::new();
        for (i, e) in ellipses.iter().enumerate() {
            let k = (e.half_major / cell).log2().ceil().max(0.0) as usize;
            if levels.len() <= k {
                levels.resize_with(k + 1, HashMap::new);
            }
            for_each_covered_cell(e, cell * 2f64.powi(k as i32), |c| levels[k].entry(c).or_default().push(i as u32));
        }
        Ok(LocalIndex { ellipses, cell, levels })
    }

    fn level_cell(&self, k: usize) -> f64 {
        self.cell * 2f64.powi(k as i32)
    }

    pub fn containing(&self, p: Point) -> Vec<u32> {
        let mut out = Vec::new();
        for (k, grid) in self.levels.iter().enumerate() {
            let c = self.level_cell(k);
            if let Some(v) = grid.get(&((p.x / c).floor() as i64, (p.y / c).floor() as i64)) {
                out.extend(v.iter().copied().filter(|&i| self.ellipses[i as usize].contains(p)));
            }
        }
        out.sort_unstable();
        out.dedup();
        out
    }

    /// Ellipses intersecting ellipse `i`, ascending, without `i`.
    pub fn neighbors(&self, i: u32) -> Vec<u32> {
        let e = &self.ellipses[i as usize];
        let mut cand = Vec::new();
        for (k, grid) in self.levels.iter().enumerate() {
            if grid.is_empty() {
                continue;
            }
            for_each_covered_cell(e, self.level_cell(k), |c| {
                if let Some(v) = grid.get(&c) {
                    cand.extend_from_slice(v);
                }
            });
        }
        cand.sort_unstable();
        cand.dedup();
        cand.retain(|&j| j != i && ellipses_intersect(e, &self.ellipses[j as usize]));
        cand
    }
}

/// [`chemical_distance`] by bidirectional breadth-first search over a
/// [`LocalIndex`]. Whole levels are expanded from the smaller side; when the
/// searches first meet, with levels `a` and `b` explored, the distance is the
/// least `d_x + d_y - 1` over meeting nodes.
pub fn chemical_distance_local(index: &LocalIndex, x: Point, y: Point) -> Option<u32> {
    let sx = index.containing(x);
    let sy = index.containing(y);
    if sx.is_empty() || sy.is_empty() {
        return None;
    }
    if sx.iter().any(|i| sy.binary_search(i).is_ok()) {
        return Some(1);
    }
    let mut dx: HashMap<u32, u32> = sx.iter().map(|&i| (i, 1)).collect();
    let mut dy: HashMap<u32, u32> = sy.iter().map(|&i| (i, 1)).collect();
    let mut fx = sx;
    let mut fy = sy;
    loop {
        if fx.is_empty() || fy.is_empty() {
            return None;
        }
        let from_x = fx.len() <= fy.len();
        let (front, mine, other) = if from_x { (&mut fx, &mut dx, &dy) } else { (&mut fy, &mut dy, &dx) };
        let mut next = Vec::new();
        let mut best: Option<u32> = None;
        for &i in front.iter() {
            let d = mine[&i] + 1;
            for j in index.neighbors(i) {
                if mine.contains_key(&j) {
                    continue;
                }
                mine.insert(j, d);
                next.push(j);
                if let Some(&o) = other.get(&j) {
                    best = Some(best.map_or(d + o - 1, |b| b.min(d + o - 1)));
                }
            }
        }
        if best.is_some() {
            return best;
        }
        next.sort_unstable();
        *front = next;
    }
}

fn key_cmp(a: &Ellipse, b: &Ellipse) -> Ordering {
    let ka = [a.half_major, a.half_minor, a.center.x, a.center.y, a.angle];
    let kb = [b.half_major, b.half_minor, b.center.x, b.center.y, b.angle];
    for (x, y) in ka.iter().zip(kb.iter()) {
        match x.total_cmp(y) {
            Ordering::Equal => {}
            o => return o,
        }
    }
    Ordering::Equal
}

const POLY_VERTICES: usize = 64;

fn inscribed_polygon(e: &Ellipse) -> Vec<Point> {
    (0..POLY_VERTICES)
        .map(|k| e.boundary_point(2.0 * std::f64::consts::PI * k as f64 / POLY_VERTICES as f64))
        .collect()
}

fn cross(o: Point, a: Point, b: Point) -> f64 {
    (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x)
}

/// Sutherland-Hodgman clip of a convex polygon by a convex CCW polygon.
fn clip_convex(subject: &[Point], clip: &[Point]) -> Vec<Point> {
    let mut out = subject.to_vec();
    for k in 0..clip.len() {
        if out.is_empty() {
            break;
        }
        let (a, b) = (clip[k], clip[(k + 1) % clip.len()]);
        let input = std::mem::take(&mut out);
        for i in 0..input.len() {
            let (p, q) = (input[i], input[(i + 1) % input.len()]);
            let (dp, dq) = (cross(a, b, p), cross(a, b, q));
            if dp >= 0.0 {
                out.push(p);
            }
            if (dp >= 0.0) != (dq >= 0.0) {
                let t = dp / (dp - dq);
                out.push(p + (q - p) * t);
            }
        }
    }
    out
}

fn radical_inverse(mut i: usize) -> f64 {
    let (mut r, mut f) = (0.0, 0.5);
    while i > 0 {
        if i & 1 == 1 {
            r += f;
        }
        i >>= 1;
        f *= 0.5;
    }
    r
}

/// Points of `a ∩ b` in a fixed nested order: the centroid of the clipped
/// inscribed polygons first, then polygon vertices in radical-inverse
/// order. A prefix of length `k` is the refinement-`k` point set.
fn lens_points(a: &Ellipse, b: &Ellipse, k: usize) -> Vec<Point> {
    let (a, b) = if key_cmp(a, b) != Ordering::Less { (a, b) } else { (b, a) };
    let poly = clip_convex(&inscribed_polygon(a), &inscribed_polygon(b));
    let poly: Vec<Point> = poly.into_iter().filter(|p| a.contains(*p) && b.contains(*p)).collect();
    if poly.is_empty() {
        return intersection_point(a, b).into_iter().collect();
    }
    let centroid = poly.iter().fold(Point::new(0.0, 0.0), |s, &p| s + p) * (1.0 / poly.len() as f64);
    let mut out = vec![centroid];
    let mut order: Vec<usize> = (0..poly.len()).collect();
    order.sort_by(|&i, &j| radical_inverse(i).total_cmp(&radical_inverse(j)));
    out.extend(order.into_iter().take(k.saturating_sub(1)).map(|i| poly[i]));
    out.truncate(k.max(1));
    out
}

#[derive(Copy, Clone, PartialEq)]
struct HeapItem(f64, usize);

impl Eq for HeapItem {}

impl Ord for HeapItem {
    fn cmp(&self, o: &Self) -> Ordering {
        o.0.total_cmp(&self.0).then_with(|| o.1.cmp(&self.1))
    }
}

impl PartialOrd for HeapItem {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}

/// Length of the shortest path in the chord graph on `{x, y}` and
/// `refinement` points from each pairwise overlap, two nodes being joined
/// when some ellipse contains both. Every chord lies in the covered set by
/// convexity, so the result bounds the internal distance from above.
pub fn internal_distance_ub(g: &IntersectionGraph, x: Point, y: Point, refinement: usize) -> Result<Option<f64>> {
    Ok(internal_path(g, x, y, refinement)?.map(|p| p.length))
}

/// Polyline realizing [`internal_distance_ub`], with the ellipse holding
/// each chord.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InternalPath {
    pub length: f64,
    pub waypoints: Vec<Point>,
    /// `ids[i]` contains the chord `waypoints[i]..waypoints[i + 1]`.
    pub ids: Vec<u32>,
}

impl InternalPath {
    /// Distinct ellipses along the path after merging repeats.
    pub fn ellipse_count(&self) -> usize {
        let mut v = self.ids.clone();
        v.sort_unstable();
        v.dedup();
        v.len()
    }

    /// The path as a chain: consecutive chords in different ellipses meet
    /// at a waypoint lying in both.
    pub fn to_chain(&self) -> ChainPath {
        let mut ids = Vec::new();
        let mut waypoints = vec![self.waypoints[0]];
        for (i, &e) in self.ids.iter().enumerate() {
            if ids.last() != Some(&e) {
                if !ids.is_empty() {
                    waypoints.push(self.waypoints[i]);
                }
                ids.push(e);
            }
        }
        waypoints.push(*self.waypoints.last().expect("non-empty path"));
        ChainPath { ids, x: self.waypoints[0], y: waypoints[waypoints.len() - 1], waypoints }
    }
}

pub fn internal_path(g: &IntersectionGraph, x: Point, y: Point, refinement: usize) -> Result<Option<InternalPath>> {
    if refinement == 0 {
        return Err(Error::invalid("refinement must be at least 1"));
    }
    let sx = g.containing(x);
    let sy = g.containing(y);
    if sx.is_empty() || sy.is_empty() || g.label(sx[0]) != g.label(sy[0]) {
        return Ok(None);
    }
    if let Some(&e) = sx.iter().find(|i| sy.contains(i)) {
        return Ok(Some(InternalPath { length: x.dist(y), waypoints: vec![x, y], ids: vec![e] }));
    }
    let comp = g.label(sx[0]);
    // node 0 = x, node 1 = y
    let mut pts = vec![x, y];
    let mut members: HashMap<u32, Vec<usize>> = HashMap::new();
    let mut owners: Vec<Vec<u32>> = vec![sx.clone(), sy.clone()];
    for &i in &sx {
        members.entry(i).or_default().push(0);
    }
    for &i in &sy {
        members.entry(i).or_default().push(1);
    }
    for (i, j) in g.edges() {
        if g.label(i) != comp {
            continue;
        }
        for p in lens_points(&g.ellipses[i as usize], &g.ellipses[j as usize], refinement) {
            let id = pts.len();
            pts.push(p);
            owners.push(vec![i, j]);
            members.entry(i).or_default().push(id);
            members.entry(j).or_default().push(id);
        }
    }
    let mut dist = vec![f64::INFINITY; pts.len()];
    let mut prev: Vec<(usize, u32)> = vec![(usize::MAX, 0); pts.len()];
    let mut heap = BinaryHeap::new();
    dist[0] = 0.0;
    heap.push(HeapItem(0.0, 0));
    while let Some(HeapItem(d, v)) = heap.pop() {
        if d > dist[v] {
            continue;
        }
        if v == 1 {
            let mut waypoints = vec![pts[1]];
            let mut ids = Vec::new();
            let mut cur = 1;
            while cur != 0 {
                let (p, e) = prev[cur];
                ids.push(e);
                waypoints.push(pts[p]);
                cur = p;
            }
            waypoints.reverse();
            ids.reverse();
            return Ok(Some(InternalPath { length: d, waypoints, ids }));
        }
        for &e in &owners[v] {
            for &w in &members[&e] {
                let nd = d + pts[v].dist(pts[w]);
                if nd < dist[w] {
                    dist[w] = nd;
                    prev[w] = (v, e);
                    heap.push(HeapItem(nd, w));
                }
            }
        }
    }
    Ok(None)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainPath {
    pub ids: Vec<u32>,
    pub x: Point,
    pub y: Point,
    /// `x`, one common point per consecutive pair, then `y`.
    pub waypoints: Vec<Point>,
}

impl ChainPath {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn length(&self) -> f64 {
        self.waypoints.windows(2).map(|w| w[0].dist(w[1])).sum()
    }

    /// Checks consecutive intersection, endpoint membership and that each
    /// polyline segment lies in one chain ellipse.
    pub fn validate(&self, ellipses: &[Ellipse]) -> Result<()> {
        if self.ids.is_empty() {
            return Err(Error::runtime("empty chain"));
        }
        let e = |k: usize| &ellipses[self.ids[k] as usize];
        if !e(0).contains(self.x) || !e(self.ids.len() - 1).contains(self.y) {
            return Err(Error::runtime("chain endpoints not covered"));
        }
        for k in 1..self.ids.len() {
            if !ellipses_intersect(e(k - 1), e(k)) {
                return Err(Error::runtime(format!("chain break between positions {} and {}", k - 1, k)));
            }
        }
        if self.waypoints.len() != self.ids.len() + 1 {
            return Err(Error::runtime("waypoint count mismatch"));
        }
        for k in 0..self.ids.len() {
            let (a, b) = (self.waypoints[k], self.waypoints[k + 1]);
            if !(e(k).contains(a) && e(k).contains(b)) {
                return Err(Error::runtime(format!("segment {k} leaves its ellipse")));
            }
        }
        Ok(())
    }

    /// Each chain ellipse meets only its predecessor and successor.
    pub fn only_neighbors(&self, ellipses: &[Ellipse]) -> bool {
        let n = self.ids.len();
        (0..n).all(|i| {
            (i + 2..n).all(|j| !ellipses_intersect(&ellipses[self.ids[i] as usize], &ellipses[self.ids[j] as usize]))
        })
    }
}

/// Parameter set `{t in [0, 1] : gamma(t) in e}` of a polyline `gamma`
/// traversed at uniform speed per segment, as a list of intervals.
fn preimage(e: &Ellipse, poly: &[Point]) -> Vec<(f64, f64)> {
    let m = (poly.len() - 1) as f64;
    let mut out = Vec::new();
    for k in 0..poly.len() - 1 {
        let (a, b) = (poly[k], poly[k + 1]);
        if a == b {
            if e.contains(a) {
                out.push((k as f64 / m, (k + 1) as f64 / m));
            }
            continue;
        }
        if let Some((t0, t1)) = e.line_interval(a, b - a) {
            // waypoints sit on boundaries; snap rounding at the segment ends
            let t0 = if t0 < 1e-9 { 0.0 } else { t0 };
            let t1 = if t1 > 1.0 - 1e-9 { 1.0 } else { t1.min(1.0) };
            if t0 <= t1 {
                out.push(((k as f64 + t0) / m, (k as f64 + t1) / m));
            }
        }
    }
    out
}

/// Greedy exploration along a covered polyline: start from the ellipse
/// containing `x` whose preimage reaches furthest, then repeatedly move to
/// the intersecting ellipse whose preimage reaches furthest, until `y` is
/// covered. Preimage suprema strictly increase, so any ellipse meeting
/// `e_j` other than `e_{j+1}` and `e_{j-1}` would have been chosen earlier.
pub fn greedy_chain_cover(g: &IntersectionGraph, ids: &[u32], polyline: &[Point]) -> Result<ChainPath> {
    if polyline.len() < 2 {
        return Err(Error::invalid("polyline needs at least two points"));
    }
    let (x, y) = (polyline[0], polyline[polyline.len() - 1]);
    let mut sup: HashMap<u32, f64> = HashMap::new();
    let mut intervals = Vec::new();
    for &i in ids {
        let pre = preimage(&g.ellipses[i as usize], polyline);
        if let Some(s) = pre.iter().map(|p| p.1).max_by(f64::total_cmp) {
            sup.insert(i, s);
            intervals.extend(pre);
        }
    }
    intervals.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut reach = 0.0;
    for &(a, b) in &intervals {
        if a > reach + 1e-12 {
            break;
        }
        reach = f64::max(reach, b);
    }
    if intervals.first().is_none_or(|f| f.0 > 1e-12) || reach < 1.0 - 1e-12 {
        return Err(Error::runtime("cover not connected along the path"));
    }
    let best = |cands: &mut dyn Iterator<Item = u32>| -> Option<u32> {
        cands.filter(|i| sup.contains_key(i)).max_by(|a, b| sup[a].total_cmp(&sup[b]).then(b.cmp(a)))
    };
    let start = best(&mut g.containing(x).into_iter().filter(|i| ids.contains(i)))
        .ok_or_else(|| Error::runtime("start point not covered by the given ellipses"))?;
    let mut chain = vec![start];
    let mut cur = start;
    while !g.ellipses[cur as usize].contains(y) {
        let s0 = sup[&cur];
        let next = best(&mut g.adj[cur as usize].iter().copied().filter(|j| sup.get(j).is_some_and(|&s| s > s0)));
        match next {
            Some(n) => {
                chain.push(n);
                cur = n;
            }
            None => return Err(Error::runtime("no chain step advances along the path")),
        }
    }
    let mut waypoints = vec![x];
    for w in chain.windows(2) {
        let p = intersection_point(&g.ellipses[w[0] as usize], &g.ellipses[w[1] as usize])
            .ok_or_else(|| Error::runtime("adjacent ellipses without a common point"))?;
        waypoints.push(p);
    }
    waypoints.push(y);
    Ok(ChainPath { ids: chain, x, y, waypoints })
}

/// Chain of ellipses along a BFS shortest path, with waypoints.
pub fn shortest_chain(g: &IntersectionGraph, x: Point, y: Point) -> Option<ChainPath> {
    let sx = g.containing(x);
    let sy = g.containing(y);
    if sx.is_empty() || sy.is_empty() {
        return None;
    }
    let mut prev = vec![u32::MAX; g.len()];
    let mut seen = vec![false; g.len()];
    let mut q = VecDeque::new();
    for &s in &sx {
        seen[s as usize] = true;
        q.push_back(s);
    }
    let mut end = None;
    while let Some(i) = q.pop_front() {
        if sy.binary_search(&i).is_ok() {
            end = Some(i);
            break;
        }
        for &j in &g.adj[i as usize] {
            if !seen[j as usize] {
                seen[j as usize] = true;
                prev[j as usize] = i;
                q.push_back(j);
            }
        }
    }
    let mut ids = vec![end?];
    while prev[*ids.last().unwrap() as usize] != u32::MAX {
        ids.push(prev[*ids.last().unwrap() as usize]);
    }
    ids.reverse();
    let mut waypoints = vec![x];
    for w in ids.windows(2) {
        waypoints.push(intersection_point(&g.ellipses[w[0] as usize], &g.ellipses[w[1] as usize])?);
    }
    waypoints.push(y);
    Some(ChainPath { ids, x, y, waypoints })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistanceQuery {
    pub x: Point,
    pub y: Point,
    pub chemical: Option<u32>,
    pub internal_ub: Option<f64>,
    pub component_sizes: Vec<usize>,
}

pub fn query(g: &IntersectionGraph, x: Point, y: Point, refinement: usize) -> Result<DistanceQuery> {
    Ok(DistanceQuery {
        x,
        y,
        chemical: chemical_distance(g, x, y),
        internal_ub: internal_distance_ub(g, x, y, refinement)?,
        component_sizes: component_sizes(g),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::AxisRect;
    use crate::rng::{stream, unit};
    use crate::sampler::{sample_ellipse_process, EllipseModelParams, FarField, Window};
    use proptest::prelude::*;

    fn random_sample(n_side: f64, u: f64, seed: u64) -> Vec<Ellipse> {
        let p = EllipseModelParams::new(u, 1.5);
        let w = Window::new(AxisRect::new(Point::new(0.0, 0.0), n_side, n_side), FarField::Box { max_r: 30.0 });
        sample_ellipse_process(&p, &w, seed).unwrap().ellipses
    }

    fn brute_edges(es: &[Ellipse]) -> Vec<(u32, u32)> {
        let mut out = Vec::new();
        for i in 0..es.len() {
            for j in i + 1..es.len() {
                if ellipses_intersect(&es[i], &es[j]) {
                    out.push((i as u32, j as u32));
                }
            }
        }
        out
    }

    #[test]
    fn disjoint_circles() {
        let es = vec![Ellipse::circle(Point::new(0.0, 0.0), 0.5), Ellipse::circle(Point::new(10.0, 0.0), 0.5)];
        let g = IntersectionGraph::new(es, 2.0).unwrap();
        assert_eq!(g.edge_count(), 0);
        assert_eq!(g.n_components(), 2);
        assert!(IntersectionGraph::new(Vec::new(), 0.0).is_err());
    }

    #[test]
    fn grid_graph_matches_all_pairs() {
        for seed in 0..20 {
            let es = random_sample(12.0, 0.8, seed);
            assert!(es.len() <= 400);
            let g = IntersectionGraph::new(es.clone(), 2.0).unwrap();
            assert_eq!(g.edges().collect::<Vec<_>>(), brute_edges(&es), "seed {seed}");
        }
    }

    #[test]
    fn needle_through_circles() {
        let mut es = vec![Ellipse::new(Point::new(0.0, 0.0), 60.0, 0.5, 0.3)];
        let (c, s) = (0.3f64.cos(), 0.3f64.sin());
        for k in 0..50 {
            let t = -49.0 + 2.0 * k as f64;
            es.push(Ellipse::circle(Point::new(t * c, t * s), 0.4));
        }
        let g = IntersectionGraph::new(es.clone(), 2.0).unwrap();
        assert_eq!(g.adj[0].len(), 50);
        assert_eq!(g.edges().collect::<Vec<_>>(), brute_edges(&es));
        // a needle longer than the large threshold takes the direct route
        let mut es2 = es.clone();
        es2[0].half_major = 1e5;
        let g2 = IntersectionGraph::new(es2.clone(), 2.0).unwrap();
        assert_eq!(g2.edges().collect::<Vec<_>>(), brute_edges(&es2));
    }

    #[test]
    fn chemical_distance_small_cases() {
        let e1 = Ellipse::new(Point::new(0.0, 0.0), 3.0, 0.5, 0.0);
        let e2 = Ellipse::new(Point::new(5.0, 0.0), 3.0, 0.5, 0.0);
        let g = IntersectionGraph::new(vec![e1, e2], 2.0).unwrap();
        assert_eq!(chemical_distance(&g, Point::new(-1.0, 0.0), Point::new(-2.0, 0.0)), Some(1));
        assert_eq!(chemical_distance(&g, Point::new(-2.0, 0.0), Point::new(7.0, 0.0)), Some(2));
        assert_eq!(chemical_distance(&g, Point::new(-2.0, 0.0), Point::new(70.0, 0.0)), None);
    }

    /// Shortest chain by exhaustive BFS started separately from every
    /// ellipse containing `x`, over an adjacency matrix built by brute force.
    fn exhaustive_chemical(es: &[Ellipse], x: Point, y: Point) -> Option<u32> {
        let n = es.len();
        let m: Vec<Vec<bool>> =
            (0..n).map(|i| (0..n).map(|j| i != j && ellipses_intersect(&es[i], &es[j])).collect()).collect();
        let mut best: Option<u32> = None;
        for a in (0..n).filter(|&a| es[a].contains(x)) {
            for b in (0..n).filter(|&b| es[b].contains(y)) {
                let mut d = vec![u32::MAX; n];
                d[a] = 1;
                let mut q = VecDeque::from([a]);
                while let Some(i) = q.pop_front() {
                    for j in 0..n {
                        if m[i][j] && d[j] == u32::MAX {
                            d[j] = d[i] + 1;
                            q.push_back(j);
                        }
                    }
                }
                if d[b] != u32::MAX {
                    best = Some(best.map_or(d[b], |v| v.min(d[b])));
                }
            }
        }
        best
    }

    #[test]
    fn chemical_distance_matches_exhaustive() {
        let mut rng = stream(9);
        let mut reached = 0;
        for seed in 0..40 {
            let es: Vec<Ellipse> = random_sample(10.0, 1.0, 100 + seed).into_iter().take(100).collect();
            let g = IntersectionGraph::new(es.clone(), 2.0).unwrap();
            for _ in 0..5 {
                let i = (unit(&mut rng) * es.len() as f64) as usize;
                let j = (unit(&mut rng) * es.len() as f64) as usize;
                let (x, y) = (es[i].center, es[j].center);
                let d = chemical_distance(&g, x, y);
                assert_eq!(d, exhaustive_chemical(&es, x, y));
                reached += d.is_some() as usize;
            }
        }
        assert!(reached > 20);
    }

    #[test]
    fn components_match_bfs() {
        for seed in 0..10 {
            let es = random_sample(15.0, 0.5, 300 + seed);
            let g = IntersectionGraph::new(es, 2.0).unwrap();
            let lab = components(&g);
            let mut bfs = vec![u32::MAX; g.len()];
            let mut next = 0;
            for s in 0..g.len() {
                if bfs[s] != u32::MAX {
                    continue;
                }
                bfs[s] = next;
                let mut q = VecDeque::from([s]);
                while let Some(i) = q.pop_front() {
                    for &j in &g.adj[i] {
                        if bfs[j as usize] == u32::MAX {
                            bfs[j as usize] = next;
                            q.push_back(j as usize);
                        }
                    }
                }
                next += 1;
            }
            assert_eq!(lab, bfs);
            let big = largest_component(&g);
            assert_eq!(big.len(), component_sizes(&g)[0]);
        }
        let g = IntersectionGraph::new(Vec::new(), 1.0).unwrap();
        assert!(components(&g).is_empty());
    }

    #[test]
    fn internal_distance_single_ellipse_and_unreachable() {
        let e = Ellipse::new(Point::new(0.0, 0.0), 5.0, 0.5, 0.0);
        let g = IntersectionGraph::new(vec![e], 2.0).unwrap();
        let (x, y) = (Point::new(-4.0, 0.1), Point::new(4.0, -0.1));
        assert_eq!(internal_distance_ub(&g, x, y, 1).unwrap(), Some(x.dist(y)));
        assert_eq!(internal_distance_ub(&g, x, Point::new(0.0, 3.0), 1).unwrap(), None);
        assert!(internal_distance_ub(&g, x, y, 0).is_err());
    }

    #[test]
    fn internal_distance_through_lens() {
        let c1 = Ellipse::circle(Point::new(0.0, 0.0), 1.0);
        let c2 = Ellipse::circle(Point::new(1.5, 0.0), 1.0);
        let g = IntersectionGraph::new(vec![c1, c2], 2.0).unwrap();
        let x = Point::new(-0.3, 0.9);
        let y = Point::new(1.8, 0.9);
        // exact optimum: the best lens point is on the upper lens boundary,
        // parametrized by its x coordinate; golden-section over [0.5, 1.0]
        let f = |t: f64| {
            let h = if t <= 0.75 { (1.0 - (t - 1.5).powi(2)).sqrt() } else { (1.0 - t * t).sqrt() };
            let p = Point::new(t, h);
            x.dist(p) + p.dist(y)
        };
        let (mut a, mut b) = (0.5, 1.0);
        let gr = (5f64.sqrt() - 1.0) / 2.0;
        for _ in 0..200 {
            let (c, d) = (b - gr * (b - a), a + gr * (b - a));
            if f(c) < f(d) {
                b = d;
            } else {
                a = c;
            }
        }
        let exact = f(0.5 * (a + b));
        let ub = internal_distance_ub(&g, x, y, 1000).unwrap().unwrap();
        assert!(ub >= exact - 1e-9 && ub <= exact * 1.01, "{ub} {exact}");
        let mut last = f64::INFINITY;
        for k in 1..12 {
            let v = internal_distance_ub(&g, x, y, k).unwrap().unwrap();
            assert!(v <= last + 1e-12);
            assert!(v >= x.dist(y));
            last = v;
        }
    }

    #[test]
    fn internal_path_is_a_valid_chain() {
        let es = random_sample(30.0, 0.6, 11);
        let g = IntersectionGraph::new(es.clone(), 2.0).unwrap();
        let big = largest_component(&g);
        let (a, b) = (es[big[0] as usize].center, es[*big.last().unwrap() as usize].center);
        let p = internal_path(&g, a, b, 3).unwrap().unwrap();
        let sum: f64 = p.waypoints.windows(2).map(|w| w[0].dist(w[1])).sum();
        assert!((sum - p.length).abs() < 1e-9);
        for (i, &e) in p.ids.iter().enumerate() {
            assert!(es[e as usize].contains(p.waypoints[i]) && es[e as usize].contains(p.waypoints[i + 1]));
        }
        let chain = p.to_chain();
        chain.validate(&es).unwrap();
        assert!(chain.len() >= chemical_distance(&g, a, b).unwrap() as usize);
    }

    #[test]
    fn internal_distance_permutation_invariant() {
        let es = random_sample(10.0, 1.5, 44);
        let g = IntersectionGraph::new(es.clone(), 2.0).unwrap();
        let mut rev = es.clone();
        rev.reverse();
        let g2 = IntersectionGraph::new(rev, 2.0).unwrap();
        let big = largest_component(&g);
        let (x, y) = (es[big[0] as usize].center, es[*big.last().unwrap() as usize].center);
        let a = internal_distance_ub(&g, x, y, 3).unwrap().unwrap();
        let b = internal_distance_ub(&g2, x, y, 3).unwrap().unwrap();
        assert!((a - b).abs() < 1e-9 * a.max(1.0));
        assert!(a >= x.dist(y));
    }

    #[test]
    fn minimal_chain_is_fixed_point() {
        let es: Vec<Ellipse> = (0..5).map(|k| Ellipse::new(Point::new(4.0 * k as f64, 0.0), 2.5, 0.5, 0.0)).collect();
        let g = IntersectionGraph::new(es.clone(), 2.0).unwrap();
        let poly = vec![Point::new(-2.0, 0.0), Point::new(18.0, 0.0)];
        let ids: Vec<u32> = (0..5).collect();
        let c = greedy_chain_cover(&g, &ids, &poly).unwrap();
        assert_eq!(c.ids, ids);
        c.validate(&es).unwrap();
        assert!(c.only_neighbors(&es));
    }

    #[test]
    fn shortcuts_are_taken() {
        let mut es: Vec<Ellipse> =
            (0..9).map(|k| Ellipse::new(Point::new(2.0 * k as f64, 0.0), 1.4, 0.5, 0.0)).collect();
        es.push(Ellipse::new(Point::new(8.0, 0.3), 7.0, 0.5, 0.0));
        let g = IntersectionGraph::new(es.clone(), 2.0).unwrap();
        let poly = vec![Point::new(-1.0, 0.0), Point::new(17.0, 0.0)];
        let ids: Vec<u32> = (0..10).collect();
        let c = greedy_chain_cover(&g, &ids, &poly).unwrap();
        assert!(c.len() < 9);
        c.validate(&es).unwrap();
        assert!(c.only_neighbors(&es));
        // exhaustive: no subset chain of the given ellipses is shorter
        let n = es.len();
        let mut best = usize::MAX;
        for mask in 1u32..(1 << n) {
            let sub: Vec<u32> = (0..n as u32).filter(|i| mask >> i & 1 == 1).collect();
            if sub.len() >= best {
                continue;
            }
            let sg = IntersectionGraph::new(sub.iter().map(|&i| es[i as usize]).collect(), 2.0).unwrap();
            if chemical_distance(&sg, poly[0], poly[1]).is_some() {
                best = sub.len();
            }
        }
        assert_eq!(c.len(), best);
    }

    #[test]
    fn broken_cover_is_rejected() {
        let es = vec![
            Ellipse::new(Point::new(0.0, 0.0), 2.0, 0.5, 0.0),
            Ellipse::new(Point::new(6.0, 0.0), 2.0, 0.5, 0.0),
        ];
        let g = IntersectionGraph::new(es, 2.0).unwrap();
        let r = greedy_chain_cover(&g, &[0, 1], &[Point::new(-1.0, 0.0), Point::new(7.0, 0.0)]);
        assert!(r.is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn chemical_triangle_inequality(seed in 0u64..1000) {
            let es = random_sample(10.0, 1.2, seed);
            prop_assume!(es.len() >= 3);
            let g = IntersectionGraph::new(es.clone(), 2.0).unwrap();
            let n = es.len();
            let (x, z, y) = (es[0].center, es[n / 2].center, es[n - 1].center);
            if let (Some(a), Some(b)) = (chemical_distance(&g, x, z), chemical_distance(&g, z, y)) {
                let d = chemical_distance(&g, x, y).unwrap();
                prop_assert!(d <= a + b);
            }
        }

        #[test]
        fn local_search_matches_full_graph(seed in 0u64..1000, cell in 0.7f64..6.0) {
            let es = random_sample(25.0, 1.0, seed);
            prop_assume!(es.len() >= 4);
            let g = IntersectionGraph::new(es.clone(), 2.0).unwrap();
            let idx = LocalIndex::new(&es, cell).unwrap();
            let n = es.len();
            for (a, b) in [(0, n - 1), (1, n / 2), (n / 3, n - 2)] {
                let (x, y) = (es[a].center, es[b].center);
                prop_assert_eq!(chemical_distance_local(&idx, x, y), chemical_distance(&g, x, y));
            }
            let mut nb = idx.neighbors(0);
            nb.sort_unstable();
            prop_assert_eq!(nb, g.adj[0].clone());
        }

        #[test]
        fn greedy_chain_families_disjoint(seed in 0u64..1000) {
            let es = random_sample(20.0, 1.0, seed);
            let g = IntersectionGraph::new(es.clone(), 2.0).unwrap();
            let big = largest_component(&g);
            prop_assume!(big.len() >= 2);
            if let Some(path) = shortest_chain(&g, es[big[0] as usize].center, es[*big.last().unwrap() as usize].center) {
                let c = greedy_chain_cover(&g, &path.ids, &path.waypoints).unwrap();
                prop_assert!(c.validate(&es).is_ok());
                prop_assert!(c.only_neighbors(&es));
                prop_assert!(c.len() <= path.len());
            }
        }
    }
}
