//! Monte Carlo experiments: single-ellipse crossings of boxes and annuli,
//! chemical and internal distance sweeps, the fast-highway recursion, the
//! chemical-distance lower bound, and the gluing sweep over the lazily
//! generated renormalized model.
//!
//! Trials run in parallel on streams `derive_seed(seed, tag, index)`, and
//! reductions are sums or sorted collections, so tables do not depend on the
//! thread count.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::geometry::{crosses_annulus, crosses_box_long, crosses_box_lr, ellipses_intersect, Annulus, AxisRect, Ellipse, Point};
use crate::graph::{chemical_distance, chemical_distance_local, greedy_chain_cover, LocalIndex, internal_distance_ub, internal_path, set_distance, ChainPath, IntersectionGraph};
use crate::lattice::{dist_inf, find_hierarchy_with, gap_budget_depth, schedule, validate_hierarchy, HierarchyOutcome, HighwayRule, Site};
use crate::renorm::{anchor_point, glue_path, GlueOptions, LazyWorld, RenormWorld};
use crate::rng::{child_stream, derive_seed, tag};
use crate::sampler::{sample_ellipse_process, sample_union, EllipseModelParams, FarField, Region, Requirement, Window};
use crate::stats::{self, linear_fit, EstimateReport, LinearFit};

/// Smallest `2^j lo` beyond which the expected number of ellipses hitting a
/// convex set (area, perimeter) is at most `tol`, with that expectation.
pub fn radius_cap(params: &EllipseModelParams, area: f64, per: f64, lo: f64, tol: f64) -> Result<(f64, f64)> {
    let mut cap = lo.max(params.r_min) * 2.0;
    for _ in 0..200 {
        let bias = params.hitting_mean_bound(area, per, cap, f64::INFINITY)?;
        if bias <= tol {
            return Ok((cap, bias));
        }
        cap *= 2.0;
    }
    Err(Error::runtime("no finite radius cap reaches the bias tolerance"))
}

/// Default bound on the expected number of ellipses ignored above the cap.
pub const CAP_TOLERANCE: f64 = 1e-6;

/// One point of a probability sweep. For Poisson-count events
/// `-log(1 - p)` is the mean number of qualifying ellipses.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub x: f64,
    pub report: EstimateReport,
    /// `-log(1 - p)`, infinite when every trial succeeded.
    pub neg_log_q: f64,
    /// Mean number of qualifying ellipses per trial.
    pub mean_count: f64,
    pub truncation_bias: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub name: String,
    pub rows: Vec<SweepRow>,
    /// Fit of `log(-log(1 - p))` on `log x` over rows with `0 < p < 1`.
    pub fit: Option<LinearFit>,
    pub expected_slope: f64,
}

fn neg_log_q(succ: u64, trials: u64) -> f64 {
    -(1.0 - succ as f64 / trials as f64).ln()
}

fn fit_rows(rows: &[SweepRow]) -> Option<LinearFit> {
    let pts: Vec<(f64, f64)> = rows
        .iter()
        .filter(|r| r.report.successes > 0 && r.report.successes < r.report.trials)
        .map(|r| (r.x.ln(), r.neg_log_q.ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let (x, y): (Vec<f64>, Vec<f64>) = pts.into_iter().unzip();
    Some(linear_fit(&x, &y, None))
}

/// Runs `trials` independent counts of qualifying ellipses.
fn count_trials(trials: u64, seed: u64, name: &str, f: impl Fn(u64) -> Result<u64> + Sync) -> Result<(u64, u64)> {
    let counts = (0..trials)
        .into_par_iter()
        .map(|t| f(derive_seed(seed, tag(name), t)))
        .collect::<Result<Vec<u64>>>()?;
    Ok((counts.iter().filter(|&&c| c > 0).count() as u64, counts.iter().sum()))
}

/// `P(LR_1(l; k))`: one ellipse crosses `[0, l] x [0, k l]` from left to
/// right. Such an ellipse has `R >= l / 2`.
pub fn crossing_sweep(params: &EllipseModelParams, k: f64, ls: &[f64], trials: u64, seed: u64) -> Result<SweepReport> {
    params.validate()?;
    if !(k > 0.0) || ls.iter().any(|&l| !(l > 0.0)) || trials == 0 {
        return Err(Error::invalid("crossing sweep needs k > 0, positive lengths and trials"));
    }
    let mut rows = Vec::new();
    for (i, &l) in ls.iter().enumerate() {
        let rect = AxisRect::new(Point::new(0.0, 0.0), l, k * l);
        let lo = (l / 2.0).max(params.r_min);
        let (cap, bias) = radius_cap(params, rect.area(), rect.perimeter(), lo, CAP_TOLERANCE)?;
        let req = [Requirement::new(Region::Rect(rect), lo, cap)];
        let s = derive_seed(seed, tag("crossing"), i as u64);
        let (succ, total) = count_trials(trials, s, "trial", |ts| {
            let mut rng = child_stream(ts, 0, 0);
            Ok(sample_union(params, &req, &mut rng).iter().filter(|e| crosses_box_lr(e, &rect)).count() as u64)
        })?;
        let info = serde_json::json!({"u": params.u, "alpha": params.alpha, "k": k, "l": l});
        rows.push(SweepRow {
            x: l,
            report: EstimateReport::new("crossing", info, succ, trials, s),
            neg_log_q: neg_log_q(succ, trials),
            mean_count: total as f64 / trials as f64,
            truncation_bias: bias,
        });
    }
    Ok(SweepReport { name: "crossing".into(), fit: fit_rows(&rows), rows, expected_slope: 2.0 - params.alpha })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnulusReport {
    pub sweep: SweepReport,
    pub l1: f64,
    /// Mean of `-log(1 - p) / (u l1 (l2 - l1)^(1 - alpha))` over the rows.
    pub c2_hat: Option<f64>,
}

fn annulus_count(params: &EllipseModelParams, l1: f64, l2: f64, seed: u64, cap: f64) -> Result<u64> {
    let ann = Annulus::new(Point::new(0.0, 0.0), l1, l2)?;
    let req = [Requirement::new(Region::Disk { center: ann.center, radius: l1 }, ((l2 - l1) / 2.0).max(params.r_min), cap)];
    let mut rng = child_stream(seed, 0, 0);
    let mut n = 0;
    for e in sample_union(params, &req, &mut rng) {
        if crosses_annulus(&e, &ann)? {
            n += 1;
        }
    }
    Ok(n)
}

/// `P(B(l1) <->_1 dB(l2))` for Euclidean balls: one ellipse meets the inner
/// ball and reaches the outer circle, so `2R >= l2 - l1`.
pub fn annulus_sweep(params: &EllipseModelParams, l1: f64, l2s: &[f64], trials: u64, seed: u64) -> Result<AnnulusReport> {
    params.validate()?;
    if !(l1 > 0.0) || trials == 0 || l2s.iter().any(|&l2| l2 - l1 < 2.0 * params.half_minor) {
        return Err(Error::invalid("annulus sweep needs l1 > 0, trials, and l2 - l1 at least the ellipse width"));
    }
    let mut rows = Vec::new();
    for (i, &l2) in l2s.iter().enumerate() {
        let lo = ((l2 - l1) / 2.0).max(params.r_min);
        let (cap, bias) = radius_cap(params, std::f64::consts::PI * l1 * l1, 2.0 * std::f64::consts::PI * l1, lo, CAP_TOLERANCE)?;
        let s = derive_seed(seed, tag("annulus"), i as u64);
        let (succ, total) = count_trials(trials, s, "trial", |ts| annulus_count(params, l1, l2, ts, cap))?;
        let info = serde_json::json!({"u": params.u, "alpha": params.alpha, "l1": l1, "l2": l2});
        rows.push(SweepRow {
            x: l2 - l1,
            report: EstimateReport::new("annulus", info, succ, trials, s),
            neg_log_q: neg_log_q(succ, trials),
            mean_count: total as f64 / trials as f64,
            truncation_bias: bias,
        });
    }
    let c2: Vec<f64> = rows
        .iter()
        .filter(|r| r.neg_log_q.is_finite() && r.neg_log_q > 0.0)
        .map(|r| r.neg_log_q / (params.u * l1 * r.x.powf(1.0 - params.alpha)))
        .collect();
    let c2_hat = (!c2.is_empty()).then(|| stats::mean(&c2));
    Ok(AnnulusReport {
        sweep: SweepReport { name: "annulus".into(), fit: fit_rows(&rows), rows, expected_slope: 1.0 - params.alpha },
        l1,
        c2_hat,
    })
}

/// Ratio of `-log(1 - p)` at inner radii `2 l1` and `l1` for a fixed gap;
/// near 2 when the mean is linear in `l1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RadiusRatio {
    pub gap: f64,
    pub small: SweepRow,
    pub large: SweepRow,
    pub ratio: f64,
}

pub fn annulus_radius_ratio(params: &EllipseModelParams, l1: f64, gap: f64, trials: u64, seed: u64) -> Result<RadiusRatio> {
    let a = annulus_sweep(params, l1, &[l1 + gap], trials, derive_seed(seed, tag("ratio"), 0))?;
    let b = annulus_sweep(params, 2.0 * l1, &[2.0 * l1 + gap], trials, derive_seed(seed, tag("ratio"), 1))?;
    let (small, large) = (a.sweep.rows[0].clone(), b.sweep.rows[0].clone());
    Ok(RadiusRatio { gap, ratio: large.neg_log_q / small.neg_log_q, small, large })
}

/// Largest distance from `c` to the ellipse boundary: a 64-point scan of the
/// parametrization refined by golden-section search around the best sample.
pub fn golden_max_dist(e: &Ellipse, c: Point) -> f64 {
    let f = |t: f64| e.boundary_point(t).dist(c);
    let n = 64;
    let h = std::f64::consts::TAU / n as f64;
    let best = (0..n).max_by(|&i, &j| f(i as f64 * h).total_cmp(&f(j as f64 * h))).unwrap();
    let (mut a, mut b) = ((best as f64 - 1.0) * h, (best as f64 + 1.0) * h);
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let (mut x1, mut x2) = (b - g * (b - a), a + g * (b - a));
    let (mut f1, mut f2) = (f(x1), f(x2));
    for _ in 0..80 {
        if f1 < f2 {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + g * (b - a);
            f2 = f(x2);
        } else {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - g * (b - a);
            f1 = f(x1);
        }
    }
    f1.max(f2).max(f(best as f64 * h))
}

/// Constants of the lower-bound induction.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LowerBoundParams {
    /// `(alpha - 1) / 2`.
    pub gamma: f64,
    /// `max(15, u 2^(alpha - 1) c2)`.
    pub c: f64,
}

impl LowerBoundParams {
    pub fn new(params: &EllipseModelParams, c2_hat: f64) -> Self {
        LowerBoundParams {
            gamma: (params.alpha - 1.0) / 2.0,
            c: f64::max(15.0, params.u * 2f64.powf(params.alpha - 1.0) * c2_hat),
        }
    }

    /// `log2 b_n = gamma^(1 - n - 2^n)`.
    pub fn log2_floor(&self, n: u32) -> f64 {
        self.gamma.powf(1.0 - n as f64 - 2f64.powi(n as i32))
    }

    /// `C^n r^(-2 gamma^(2^n))` in natural log, for `log r` given.
    pub fn log_bound(&self, n: u32, log_r: f64) -> f64 {
        n as f64 * self.c.ln() - 2.0 * self.gamma.powf(2f64.powi(n as i32)) * log_r
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LowerBoundReport {
    pub n: u32,
    pub params: LowerBoundParams,
    pub rows: Vec<SweepRow>,
    /// Fit of `log(-log(1 - p))` on `log r`.
    pub fit: Option<LinearFit>,
    /// Fit of `log p` on `log r`.
    pub fit_log_p: Option<LinearFit>,
    pub expected_slope: f64,
}

/// Ellipses that can start or end a chain of length at most `2^n` from
/// `B(1)` to `dB(r)`; only `n` in {0, 1} is supported. The second layer
/// holds, for every first-layer ellipse `e` of reach `m < r`, the ellipses
/// meeting the disk around `e` with `2R >= r - m`.
fn lower_bound_sample(params: &EllipseModelParams, n: u32, r: f64, seed: u64) -> Result<Vec<Ellipse>> {
    let unit_box = AxisRect::centered(Point::new(0.0, 0.0), 2.0, 2.0);
    let mut rng = child_stream(seed, tag("layers"), 0);
    match n {
        0 => {
            let lo = ((r - 1.0) / 2.0).max(params.r_min);
            let (cap, _) = radius_cap(params, 4.0, 8.0, lo, CAP_TOLERANCE)?;
            Ok(sample_union(params, &[Requirement::new(Region::Rect(unit_box), lo, cap)], &mut rng))
        }
        1 => {
            let (cap, _) = radius_cap(params, 4.0, 8.0, params.r_min, CAP_TOLERANCE)?;
            let first = sample_union(params, &[Requirement::new(Region::Rect(unit_box), params.r_min, cap)], &mut rng);
            let mut reqs = vec![Requirement::new(Region::Rect(unit_box), params.r_min, cap)];
            for e in first.iter().filter(|e| e.intersects_disk(Point::new(0.0, 0.0), 1.0)) {
                let m = golden_max_dist(e, Point::new(0.0, 0.0));
                if m >= r {
                    continue;
                }
                let lo = ((r - m) / 2.0).max(params.r_min);
                let rad = e.half_major + e.half_minor;
                let (cap2, _) = radius_cap(params, std::f64::consts::PI * rad * rad, std::f64::consts::TAU * rad, lo, CAP_TOLERANCE)?;
                reqs.push(Requirement::new(Region::Disk { center: e.center, radius: rad }, lo, cap2));
            }
            let mut rng2 = child_stream(seed, tag("layers"), 1);
            let mut second = sample_union(params, &reqs[1..], &mut rng2);
            // the first requirement already holds every ellipse meeting the box
            second.retain(|e| !reqs[0].claims(e));
            let mut all = first;
            all.extend(second);
            Ok(all)
        }
        _ => Err(Error::invalid("lower-bound sampling supports n = 0 and n = 1")),
    }
}

/// `P(D(B(1), dB(r)) <= 2^n)` by breadth-first search in the intersection
/// graph: sources meet the unit ball, targets reach distance `r` (by a
/// boundary search independent of the annulus predicate).
pub fn lower_bound_experiment(params: &EllipseModelParams, n: u32, rs: &[f64], trials: u64, seed: u64) -> Result<LowerBoundReport> {
    params.validate()?;
    let lb = LowerBoundParams::new(params, 1.0);
    if n > 1 {
        return Err(Error::invalid(format!("n = {n}: the validity floor 2^{} is beyond reach", lb.log2_floor(n))));
    }
    let floor = 2f64.powf(lb.log2_floor(n));
    if let Some(&r) = rs.iter().find(|&&r| !(r > floor)) {
        return Err(Error::invalid(format!("r = {r} is below the validity floor b_{n} = {floor}")));
    }
    let limit = 1u32 << n;
    let mut rows = Vec::new();
    for (i, &r) in rs.iter().enumerate() {
        let s = derive_seed(seed, tag("lower-bound"), i as u64);
        let (succ, total) = count_trials(trials, s, "trial", |ts| {
            let es = lower_bound_sample(params, n, r, ts)?;
            if es.is_empty() {
                return Ok(0);
            }
            let g = IntersectionGraph::new(es, 4.0)?;
            let o = Point::new(0.0, 0.0);
            let src: Vec<u32> = (0..g.len() as u32).filter(|&i| g.ellipses[i as usize].intersects_disk(o, 1.0)).collect();
            let reach: Vec<bool> = g.ellipses.iter().map(|e| golden_max_dist(e, o) >= r).collect();
            Ok(set_distance(&g, &src, |i| reach[i as usize]).is_some_and(|d| d <= limit) as u64)
        })?;
        let info = serde_json::json!({"u": params.u, "alpha": params.alpha, "n": n, "r": r});
        rows.push(SweepRow {
            x: r,
            report: EstimateReport::new("lower_bound", info, succ, trials, s),
            neg_log_q: neg_log_q(succ, trials),
            mean_count: total as f64 / trials as f64,
            truncation_bias: 0.0,
        });
    }
    let pts: Vec<(f64, f64)> =
        rows.iter().filter(|r| r.report.successes > 0).map(|r| (r.x.ln(), r.report.estimate.ln())).collect();
    let fit_log_p = (pts.len() >= 2).then(|| {
        let (x, y): (Vec<f64>, Vec<f64>) = pts.into_iter().unzip();
        linear_fit(&x, &y, None)
    });
    Ok(LowerBoundReport {
        n,
        params: lb,
        fit: fit_rows(&rows),
        fit_log_p,
        rows,
        expected_slope: -2.0 * lb.gamma.powf(2f64.powi(n as i32)),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorollaryRow {
    pub log10_r: f64,
    pub n: i64,
    /// Natural log of the bound `C^n r^(-2 gamma^(2^n))`.
    pub log_bound: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorollaryReport {
    pub alpha: f64,
    pub delta: f64,
    pub threshold: f64,
    pub rows: Vec<CorollaryRow>,
    /// `sup` of the bound over the remaining rows is nonincreasing.
    pub tail_sup_decreasing: bool,
    /// The bound at the last row is below that at the first.
    pub vanishing_trend: bool,
    pub warnings: Vec<String>,
}

/// Evaluates the iterated lower bound at
/// `n = floor((log delta + log log log r) / log 2)`; radii are given as
/// `log10 r` so astronomically large values stay finite. Pure arithmetic.
pub fn corollary_check(alpha: f64, u: f64, c2_hat: f64, delta: f64, log10_rs: &[f64]) -> Result<CorollaryReport> {
    if !(alpha > 1.0 && alpha < 2.0) || !(delta > 0.0) {
        return Err(Error::invalid("corollary check needs alpha in (1, 2) and delta > 0"));
    }
    let params = EllipseModelParams::new(u, alpha);
    let lb = LowerBoundParams::new(&params, c2_hat);
    let threshold = 1.0 / (1.0 / lb.gamma).ln();
    let mut warnings = Vec::new();
    if delta >= threshold {
        warnings.push(format!("delta = {delta} is not below 1/log(1/gamma) = {threshold:.4}: the bound need not vanish"));
    }
    let mut rows = Vec::new();
    for &lr in log10_rs {
        let log_r = lr * std::f64::consts::LN_10;
        if !(log_r.ln() > 1.0) {
            return Err(Error::invalid(format!("log log r must exceed 1, got r = 10^{lr}")));
        }
        let n = ((delta.ln() + log_r.ln().ln()) / 2f64.ln()).floor().max(0.0) as i64;
        rows.push(CorollaryRow { log10_r: lr, n, log_bound: lb.log_bound(n as u32, log_r) });
    }
    let mut tail_sup_decreasing = true;
    let mut sup = f64::NEG_INFINITY;
    let sups: Vec<f64> = rows
        .iter()
        .rev()
        .map(|r| {
            sup = sup.max(r.log_bound);
            sup
        })
        .collect();
    for w in sups.windows(2) {
        // reversed order: later rows come first
        if w[1] < w[0] {
            tail_sup_decreasing = false;
        }
    }
    let vanishing_trend = rows.len() >= 2 && rows.last().unwrap().log_bound < rows[0].log_bound;
    Ok(CorollaryReport { alpha, delta, threshold, rows, tail_sup_decreasing, vanishing_trend, warnings })
}

/// Fast-highway lengths `l_n = l_{n-1}^(2/alpha) / log l_{n-1}` and boxes
/// `B_n`, horizontal for odd `n`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HighwaySchedule {
    pub l0: f64,
    pub alpha: f64,
    /// `l_0, l_1, ..., l_n`.
    pub levels: Vec<f64>,
}

impl HighwaySchedule {
    pub fn l(&self, n: usize) -> f64 {
        self.levels[n]
    }

    pub fn depth(&self) -> usize {
        self.levels.len() - 1
    }

    pub fn box_n(&self, n: usize) -> AxisRect {
        assert!(n >= 1);
        let (a, b) = (self.levels[n], self.levels[n - 1]);
        if n % 2 == 1 {
            AxisRect::new(Point::new(0.0, 0.0), a, b)
        } else {
            AxisRect::new(Point::new(0.0, 0.0), b, a)
        }
    }

    /// `[-2l, 2l] x [l, 2l]` and its quarter turns, `l = l_n`.
    pub fn circuit_boxes(&self, n: usize) -> [AxisRect; 4] {
        let l = self.levels[n];
        let base = AxisRect::from_bounds(-2.0 * l, l, 2.0 * l, 2.0 * l);
        let o = Point::new(0.0, 0.0);
        let r1 = base.rotated_quarter(o);
        let r2 = r1.rotated_quarter(o);
        let r3 = r2.rotated_quarter(o);
        [base, r1, r2, r3]
    }

    /// Lower envelope `l0^((2/alpha)^n) (2/alpha)^(-S1) (log l0)^(-S2)`, in
    /// natural log, with the two sums of the growth estimate.
    pub fn log_lower_envelope(&self, n: usize) -> f64 {
        let q = 2.0 / self.alpha;
        let s1: f64 = (1..=n).map(|j| (n - j) as f64 * q.powi(j as i32 - 1)).sum();
        let s2: f64 = (1..=n).map(|j| q.powi(j as i32 - 1)).sum();
        q.powi(n as i32) * self.l0.ln() - s1 * q.ln() - s2 * self.l0.ln().ln()
    }
}

pub fn highway_schedule(l0: f64, alpha: f64, n: usize) -> Result<HighwaySchedule> {
    if !(l0 >= std::f64::consts::E) || !(alpha > 0.0) {
        return Err(Error::invalid("highway schedule needs l0 >= e and alpha > 0"));
    }
    let mut levels = vec![l0];
    for k in 1..=n {
        let p = levels[k - 1];
        let next = p.powf(2.0 / alpha) / p.ln();
        if !next.is_finite() {
            return Err(Error::invalid(format!("level {k} overflows")));
        }
        levels.push(next);
    }
    Ok(HighwaySchedule { l0, alpha, levels })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HighwayLevel {
    pub n: usize,
    pub l: f64,
    /// Failure of the long crossing of `B_n`.
    pub a_fail: EstimateReport,
    /// Failure of the four-box circuit.
    pub c_fail: EstimateReport,
    pub mean_crossings: f64,
    pub partial_sum_a_fail: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HighwayReport {
    pub schedule: HighwaySchedule,
    pub u: f64,
    pub trials: u64,
    pub levels: Vec<HighwayLevel>,
    /// Trials on which every `A_n` and `C_n` held.
    pub joint_successes: u64,
    /// Per joint success: ellipses in the shortest chain from a crossing of
    /// `B_1` to a crossing of the last box, through box and circuit
    /// crossings only.
    pub chain_counts: Vec<u32>,
    /// Every joint success obeys `count <= (n - n0) + 12`.
    pub accounting_holds: bool,
    /// Every joint success has each four-ellipse circuit closed.
    pub circuits_closed: bool,
}

/// Per trial, samples every ellipse long enough to cross some `B_n`
/// (`R >= l_n / 2`) or a circuit box (`R >= 2 l_n`) and records which
/// events hold; on joint success the witness chain is measured.
pub fn enhanced_highway_experiment(sched: &HighwaySchedule, u: f64, trials: u64, seed: u64) -> Result<HighwayReport> {
    let params = EllipseModelParams::new(u, sched.alpha);
    params.validate()?;
    let depth = sched.depth();
    if depth < 1 || trials == 0 {
        return Err(Error::invalid("highway experiment needs at least one level and one trial"));
    }
    let mut reqs = Vec::new();
    for n in 1..=depth {
        let b = sched.box_n(n);
        let lo = (b.width.max(b.height) / 2.0).max(params.r_min);
        let (cap, _) = radius_cap(&params, b.area(), b.perimeter(), lo, CAP_TOLERANCE)?;
        reqs.push(Requirement::new(Region::Rect(b), lo, cap));
        for c in sched.circuit_boxes(n) {
            let lo = (2.0 * sched.l(n)).max(params.r_min);
            let (cap, _) = radius_cap(&params, c.area(), c.perimeter(), lo, CAP_TOLERANCE)?;
            reqs.push(Requirement::new(Region::Rect(c), lo, cap));
        }
    }
    struct Trial {
        a_ok: Vec<bool>,
        c_ok: Vec<bool>,
        crossings: Vec<u64>,
        chain: Option<(u32, bool)>,
    }
    let results = (0..trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = child_stream(seed, tag("highway"), t);
            let es = if u == 0.0 { Vec::new() } else { sample_union(&params, &reqs, &mut rng) };
            let mut a_ok = Vec::new();
            let mut c_ok = Vec::new();
            let mut crossings = Vec::new();
            let mut a_ids: Vec<Vec<u32>> = Vec::new();
            let mut c_first: Vec<Option<[u32; 4]>> = Vec::new();
            let mut witnesses: Vec<u32> = Vec::new();
            for n in 1..=depth {
                let b = sched.box_n(n);
                let ids: Vec<u32> = (0..es.len() as u32).filter(|&i| crosses_box_long(&es[i as usize], &b)).collect();
                crossings.push(ids.len() as u64);
                a_ok.push(!ids.is_empty());
                let boxes = sched.circuit_boxes(n);
                let crossers: Vec<Vec<u32>> = boxes
                    .iter()
                    .map(|c| (0..es.len() as u32).filter(|&i| crosses_box_long(&es[i as usize], c)).collect())
                    .collect();
                let firsts: Vec<Option<u32>> = crossers.iter().map(|v| v.first().copied()).collect();
                witnesses.extend(crossers.into_iter().flatten());
                witnesses.extend(&ids);
                a_ids.push(ids);
                c_ok.push(firsts.iter().all(Option::is_some));
                c_first.push(if firsts.iter().all(Option::is_some) {
                    Some([firsts[0].unwrap(), firsts[1].unwrap(), firsts[2].unwrap(), firsts[3].unwrap()])
                } else {
                    None
                });
            }
            let chain = if a_ok.iter().all(|&x| x) && c_ok.iter().all(|&x| x) {
                // the witness chain runs through box and circuit crossings only
                witnesses.sort_unstable();
                witnesses.dedup();
                let local = |id: u32| witnesses.binary_search(&id).expect("witness") as u32;
                let g = IntersectionGraph::new(witnesses.iter().map(|&i| es[i as usize]).collect(), sched.l0)?;
                let first: Vec<u32> = a_ids[0].iter().map(|&i| local(i)).collect();
                let last: Vec<u32> = a_ids[depth - 1].iter().map(|&i| local(i)).collect();
                let d = set_distance(&g, &first, |i| last.contains(&i))
                    .ok_or_else(|| Error::runtime("consecutive box crossings failed to intersect"))?;
                let closed = c_first.iter().flatten().all(|c| {
                    (0..4).all(|j| ellipses_intersect(&es[c[j] as usize], &es[c[(j + 1) % 4] as usize]))
                });
                Some((d, closed))
            } else {
                None
            };
            Ok(Trial { a_ok, c_ok, crossings, chain })
        })
        .collect::<Result<Vec<Trial>>>()?;
    let mut levels = Vec::new();
    let mut partial = 0.0;
    for n in 1..=depth {
        let a_fail = results.iter().filter(|r| !r.a_ok[n - 1]).count() as u64;
        let c_fail = results.iter().filter(|r| !r.c_ok[n - 1]).count() as u64;
        let info = serde_json::json!({"u": u, "alpha": sched.alpha, "n": n, "l": sched.l(n)});
        let a = EstimateReport::new("highway_a_fail", info.clone(), a_fail, trials, seed);
        partial += a.estimate;
        levels.push(HighwayLevel {
            n,
            l: sched.l(n),
            mean_crossings: results.iter().map(|r| r.crossings[n - 1] as f64).sum::<f64>() / trials as f64,
            a_fail: a,
            c_fail: EstimateReport::new("highway_c_fail", info, c_fail, trials, seed),
            partial_sum_a_fail: partial,
        });
    }
    let chains: Vec<(u32, bool)> = results.iter().filter_map(|r| r.chain).collect();
    let chain_counts: Vec<u32> = chains.iter().map(|c| c.0).collect();
    let budget = (depth - 1) as u32 + 12;
    Ok(HighwayReport {
        schedule: sched.clone(),
        u,
        trials,
        levels,
        joint_successes: chains.len() as u64,
        accounting_holds: chain_counts.iter().all(|&c| c <= budget),
        circuits_closed: chains.iter().all(|c| c.1),
        chain_counts,
    })
}

/// Sample for a distance query between `x = (0, 0)` and `y = (L, 0)`: in
/// each dyadic shell `[r, 2r)` of half-lengths, the ellipses meeting the
/// disks of radius `2 M r` about `x` and `y`, and for `2r >= L / 4` also the
/// corridor `[-w, L + w] x [-w, w]`, `w = 2 M r`; half-lengths stop at
/// `M L`. Distances in a subset of the process bound those in the full
/// process from above.
pub fn multiscale_sample(params: &EllipseModelParams, dist: f64, m: f64, seed: u64) -> Vec<Ellipse> {
    let reqs = multiscale_requirements(params, dist, m);
    let mut rng = child_stream(seed, tag("multiscale"), 0);
    sample_union(params, &reqs, &mut rng)
}

fn multiscale_requirements(params: &EllipseModelParams, dist: f64, m: f64) -> Vec<Requirement> {
    let mut reqs = Vec::new();
    let mut lo = params.r_min;
    while lo < m * dist {
        let hi = (2.0 * lo).min(m * dist);
        let w = m * hi;
        for c in [Point::new(0.0, 0.0), Point::new(dist, 0.0)] {
            reqs.push(Requirement::new(Region::Disk { center: c, radius: w }, lo, hi));
        }
        if hi >= dist / 4.0 {
            reqs.push(Requirement::new(Region::Rect(AxisRect::from_bounds(-w, -w, dist + w, w)), lo, hi));
        }
        lo = hi;
    }
    reqs
}

/// The multiscale restriction applied to an existing sample.
pub fn multiscale_filter(params: &EllipseModelParams, es: &[Ellipse], dist: f64, m: f64) -> Vec<Ellipse> {
    let reqs = multiscale_requirements(params, dist, m);
    es.iter().copied().filter(|e| reqs.iter().any(|r| r.claims(e))).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistanceRow {
    pub dist: f64,
    pub attempts: u64,
    pub accepted: u64,
    pub acceptance: f64,
    /// `D` on accepted trials, ascending.
    pub chemical: Vec<u32>,
    pub mean_d: f64,
    pub median_ratio: f64,
    pub q10_ratio: f64,
    pub q90_ratio: f64,
    /// `internal / |x - y|` on accepted trials (empty unless requested).
    pub internal_ratio: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistanceSweep {
    pub u: f64,
    pub alpha: f64,
    pub multiscale: f64,
    pub rows: Vec<DistanceRow>,
    /// `1 / log(2 / (alpha - 1))` and `2 / log(2 / alpha)`.
    pub band: (f64, f64),
    /// Fit of `log(mean ratio - 1)` on `log |x - y|` (internal sweep only).
    pub excess_fit: Option<LinearFit>,
}

pub fn chemical_band(alpha: f64) -> (f64, f64) {
    (1.0 / (2.0 / (alpha - 1.0)).ln(), 2.0 / (2.0 / alpha).ln())
}

fn distance_sweep(
    params: &EllipseModelParams,
    dists: &[f64],
    accepted_target: u64,
    max_attempts: u64,
    m: f64,
    refinement: Option<usize>,
    seed: u64,
) -> Result<DistanceSweep> {
    params.validate()?;
    if dists.windows(2).any(|w| w[1] <= w[0]) || dists.iter().any(|&d| !(d.ln().ln() > 0.0)) {
        return Err(Error::invalid("distances must increase and exceed e"));
    }
    let mut rows = Vec::new();
    for (i, &d) in dists.iter().enumerate() {
        let (x, y) = (Point::new(0.0, 0.0), Point::new(d, 0.0));
        let s = derive_seed(seed, tag("distance"), i as u64);
        let mut results: Vec<(u64, u32, Option<f64>)> = Vec::new();
        let mut attempts = 0u64;
        // batches keep the accepted set a function of the seed only
        let batch = accepted_target.max(1);
        while (results.len() as u64) < accepted_target && attempts < max_attempts {
            let range = attempts..(attempts + batch).min(max_attempts);
            attempts = range.end;
            let mut got = range
                .into_par_iter()
                .map(|t| {
                    let es = multiscale_sample(params, d, m, derive_seed(s, tag("trial"), t));
                    let cell = 4.0 * params.half_minor;
                    let Some(k) = refinement else {
                        let idx = LocalIndex::new(&es, cell)?;
                        return Ok(chemical_distance_local(&idx, x, y).map(|dd| (t, dd, None)));
                    };
                    let g = IntersectionGraph::new(es, cell)?;
                    let Some(dd) = chemical_distance(&g, x, y) else {
                        return Ok(None);
                    };
                    Ok(Some((t, dd, internal_distance_ub(&g, x, y, k)?)))
                })
                .collect::<Result<Vec<Option<(u64, u32, Option<f64>)>>>>()?
                .into_iter()
                .flatten()
                .collect::<Vec<_>>();
            got.sort_by_key(|r| r.0);
            results.extend(got);
        }
        results.truncate(accepted_target as usize);
        let accepted = results.len() as u64;
        let mut chemical: Vec<u32> = results.iter().map(|r| r.1).collect();
        let internal_ratio: Vec<f64> = results.iter().filter_map(|r| r.2).map(|v| v / d).collect();
        chemical.sort_unstable();
        let ll = d.ln().ln();
        let ratios: Vec<f64> = chemical.iter().map(|&c| c as f64 / ll).collect();
        let used = results.last().map_or(attempts, |r| r.0 + 1);
        rows.push(DistanceRow {
            dist: d,
            attempts: used,
            accepted,
            acceptance: accepted as f64 / used.max(1) as f64,
            mean_d: stats::mean(&chemical.iter().map(|&c| c as f64).collect::<Vec<_>>()),
            median_ratio: stats::median(&ratios),
            q10_ratio: stats::quantile(&ratios, 0.1),
            q90_ratio: stats::quantile(&ratios, 0.9),
            chemical,
            internal_ratio,
        });
    }
    let excess_fit = if refinement.is_some() {
        let pts: Vec<(f64, f64)> = rows
            .iter()
            .filter_map(|r| {
                let e = stats::mean(&r.internal_ratio) - 1.0;
                (e > 0.0).then(|| (r.dist.ln(), e.ln()))
            })
            .collect();
        (pts.len() >= 2).then(|| {
            let (a, b): (Vec<f64>, Vec<f64>) = pts.into_iter().unzip();
            linear_fit(&a, &b, None)
        })
    } else {
        None
    };
    Ok(DistanceSweep { u: params.u, alpha: params.alpha, multiscale: m, rows, band: chemical_band(params.alpha), excess_fit })
}

/// Chemical distance between `(0, 0)` and `(L, 0)` conditioned on their
/// connection by rejection, on multiscale samples.
pub fn chemical_scaling_sweep(
    params: &EllipseModelParams,
    dists: &[f64],
    accepted: u64,
    max_attempts: u64,
    m: f64,
    seed: u64,
) -> Result<DistanceSweep> {
    distance_sweep(params, dists, accepted, max_attempts, m, None, seed)
}

/// As [`chemical_scaling_sweep`], with the chord-graph upper bound on the
/// internal distance.
pub fn internal_scaling_sweep(
    params: &EllipseModelParams,
    dists: &[f64],
    accepted: u64,
    max_attempts: u64,
    m: f64,
    refinement: usize,
    seed: u64,
) -> Result<DistanceSweep> {
    distance_sweep(params, dists, accepted, max_attempts, m, Some(refinement), seed)
}

/// Comparison of multiscale and full samples on the same realization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiscaleCheck {
    pub dist: f64,
    pub trials: u64,
    /// Trials connected in the restricted sample.
    pub connected: u64,
    /// Of those, trials where the restricted `D` equals the full one.
    pub equal: u64,
    /// The restricted `D` is never below the full one.
    pub dominates: bool,
}

/// Full window sample (with far-field shells), then the multiscale filter
/// applied to it.
pub fn multiscale_check(params: &EllipseModelParams, dist: f64, m: f64, trials: u64, seed: u64) -> Result<MultiscaleCheck> {
    let pad = 2.0 * dist;
    let window = Window::new(AxisRect::from_bounds(-pad, -pad, dist + pad, pad), FarField::Shells { max_r: m * dist });
    let (x, y) = (Point::new(0.0, 0.0), Point::new(dist, 0.0));
    let res = (0..trials)
        .into_par_iter()
        .map(|t| {
            let full = sample_ellipse_process(params, &window, derive_seed(seed, tag("full"), t))?;
            let sub = multiscale_filter(params, &full.ellipses, dist, m);
            let gf = IntersectionGraph::new(full.ellipses, 4.0)?;
            let idx = LocalIndex::new(&sub, 4.0)?;
            Ok((chemical_distance(&gf, x, y), chemical_distance_local(&idx, x, y)))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut connected = 0;
    let mut equal = 0;
    let mut dominates = true;
    for (f, s) in res {
        if let Some(s) = s {
            connected += 1;
            match f {
                Some(f) if f == s => equal += 1,
                Some(f) if f > s => dominates = false,
                None => dominates = false,
                _ => {}
            }
        }
    }
    Ok(MultiscaleCheck { dist, trials, connected, equal, dominates })
}

/// A greedy-cover instance: `W` is the disk of radius `rho` about `x`, the
/// path is the chord-graph shortest path from `x` to a point of `dW`, and
/// the chain is cut at its first ellipse meeting `dW`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoverInstance {
    pub chain: ChainPath,
    /// Position (0-based) of the first chain ellipse meeting `dW`.
    pub n: usize,
    pub volume: f64,
    /// `n - 1 <= 2 Vol(W) / (pi b^2)`.
    pub volume_bound_holds: bool,
    pub only_neighbors: bool,
}

pub fn greedy_cover_instance(params: &EllipseModelParams, rho: f64, seed: u64) -> Result<Option<CoverInstance>> {
    let x = Point::new(0.0, 0.0);
    let win = AxisRect::centered(x, 2.0 * rho, 2.0 * rho);
    let window = Window::new(win, FarField::Box { max_r: 4.0 * rho });
    let sample = sample_ellipse_process(params, &window, seed)?;
    let g = IntersectionGraph::new(sample.ellipses, 4.0 * params.half_minor)?;
    let start = g.containing(x);
    if start.is_empty() {
        return Ok(None);
    }
    let exits = |i: u32| g.ellipses[i as usize].max_dist_to(x) >= rho;
    let Some(target) = (0..g.len() as u32).find(|&i| exits(i) && g.label(i) == g.label(start[0])) else {
        return Ok(None);
    };
    // a point of the exit ellipse on dW
    let e = g.ellipses[target as usize];
    let dir = if e.center.norm() > 0.0 { e.center * (1.0 / e.center.norm()) } else { e.axis() };
    let mut y = None;
    for k in 0..720 {
        let a = dir.y.atan2(dir.x) + (k as f64) * std::f64::consts::PI / 360.0 * if k % 2 == 0 { 1.0 } else { -1.0 };
        let p = Point::new(rho * a.cos(), rho * a.sin());
        if e.contains(p) {
            y = Some(p);
            break;
        }
    }
    let Some(y) = y else {
        return Ok(None);
    };
    let Some(path) = internal_path(&g, x, y, 2)? else {
        return Ok(None);
    };
    let ids: Vec<u32> = (0..g.len() as u32).collect();
    let mut chain = greedy_chain_cover(&g, &ids, &path.waypoints)?;
    let n = chain.ids.iter().position(|&i| exits(i)).expect("the last chain ellipse reaches dW");
    chain.ids.truncate(n + 1);
    chain.waypoints.truncate(n + 1);
    let volume = std::f64::consts::PI * rho * rho;
    let b = params.half_minor;
    let only_neighbors = chain.only_neighbors(&g.ellipses);
    Ok(Some(CoverInstance {
        n: n + 1,
        volume,
        volume_bound_holds: (n as f64) <= 2.0 * volume / (std::f64::consts::PI * b * b),
        only_neighbors,
        chain,
    }))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlueRow {
    pub n: i64,
    pub depth: u32,
    pub trials: u64,
    /// Trials with a bad endpoint box, rejected before any search.
    pub rejected: u64,
    pub hierarchy_failures: u64,
    pub glue_failures: BTreeMap<String, u64>,
    pub ratios: Vec<f64>,
    pub mean_ratio: f64,
    pub ratio_se: f64,
    pub mean_euclid: f64,
    /// `path ellipses >= chemical distance` on every glued run.
    pub count_dominates: bool,
    pub w_counts: Vec<usize>,
    pub w_event_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlueSweep {
    pub k: f64,
    pub gamma: f64,
    pub eps: f64,
    pub max_depth: Option<u32>,
    pub p_good: f64,
    pub rows: Vec<GlueRow>,
    /// Fit of `log(mean ratio - 1)` on `log |x - y|`.
    pub excess_fit: Option<LinearFit>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlueSweepConfig {
    pub params: EllipseModelParams,
    pub k: f64,
    pub gamma: f64,
    pub eps: f64,
    /// Hierarchy depth; `None` picks [`gap_budget_depth`] per distance.
    pub max_depth: Option<u32>,
    pub opts: GlueOptions,
}

/// Per lattice distance `N` and trial: a fresh lazy renormalized world,
/// sites `(0, 0)` and `(N, 0)` (rejected when bad), the hierarchy search on
/// the core bonds (nearest-pick highway rule), and the glued path between the
/// right-witness midpoints of the two endpoint boxes.
pub fn glue_sweep(cfg: &GlueSweepConfig, ns: &[i64], trials: u64, seed: u64) -> Result<GlueSweep> {
    let mut rows = Vec::new();
    let mut p_good = 0.0;
    for &n in ns {
        let sched = schedule(n as f64, cfg.gamma, cfg.eps)?;
        let depth = cfg.max_depth.unwrap_or_else(|| gap_budget_depth(&sched));
        let res = (0..trials)
            .into_par_iter()
            .map(|t| -> Result<(u8, Option<crate::renorm::GlueOutcome>)> {
                // one world per trial index, shared across distances
                let world = LazyWorld::new(&cfg.params, cfg.k, derive_seed(seed, tag("world"), t))?;
                let (xs, ys): (Site, Site) = ((0, 0), (n, 0));
                if world.is_good(xs) != Some(true) || world.is_good(ys) != Some(true) {
                    return Ok((0, None));
                }
                let h = match find_hierarchy_with(&world.lattice, xs, ys, &sched, Some(depth), HighwayRule::NearestPick)? {
                    HierarchyOutcome::Found(h) => h,
                    HierarchyOutcome::Failed { .. } => return Ok((1, None)),
                };
                validate_hierarchy(&h, &world.lattice, &sched)?;
                let x = anchor_point(&world, xs).expect("good box");
                let y = anchor_point(&world, ys).expect("good box");
                Ok((2, Some(glue_path(&world, &h, x, y, &cfg.opts)?)))
            })
            .collect::<Result<Vec<_>>>()?;
        p_good = LazyWorld::new(&cfg.params, cfg.k, seed)?.p_good();
        let mut row = GlueRow {
            n,
            depth,
            trials,
            rejected: res.iter().filter(|r| r.0 == 0).count() as u64,
            hierarchy_failures: res.iter().filter(|r| r.0 == 1).count() as u64,
            glue_failures: BTreeMap::new(),
            ratios: Vec::new(),
            mean_ratio: f64::NAN,
            ratio_se: f64::NAN,
            mean_euclid: f64::NAN,
            count_dominates: true,
            w_counts: Vec::new(),
            w_event_rate: f64::NAN,
        };
        let mut euclid = Vec::new();
        let mut w_ok = 0;
        let mut glued = 0;
        for o in res.into_iter().filter_map(|r| r.1) {
            row.w_counts.extend(&o.w_counts);
            if o.ok {
                glued += 1;
                w_ok += o.w_event as u64;
                row.ratios.push(o.ratio);
                euclid.push(o.euclid);
                row.count_dominates &= o.chemical.is_some_and(|c| o.path_ellipses as u32 >= c);
            } else {
                *row.glue_failures.entry(o.failure.unwrap_or_default()).or_default() += 1;
            }
        }
        if !row.ratios.is_empty() {
            row.mean_ratio = stats::mean(&row.ratios);
            row.ratio_se = (stats::variance(&row.ratios) / row.ratios.len() as f64).sqrt();
            row.mean_euclid = stats::mean(&euclid);
            row.w_event_rate = w_ok as f64 / glued as f64;
        }
        rows.push(row);
    }
    let pts: Vec<(f64, f64)> = rows
        .iter()
        .filter(|r| r.mean_ratio > 1.0)
        .map(|r| (r.mean_euclid.ln(), (r.mean_ratio - 1.0).ln()))
        .collect();
    let excess_fit = (pts.len() >= 2).then(|| {
        let (a, b): (Vec<f64>, Vec<f64>) = pts.into_iter().unzip();
        linear_fit(&a, &b, None)
    });
    Ok(GlueSweep { k: cfg.k, gamma: cfg.gamma, eps: cfg.eps, max_depth: cfg.max_depth, p_good, rows, excess_fit })
}

/// Largest infinity-distance between consecutive hierarchy sites, for
/// reporting.
pub fn max_gap(gaps: &[(Site, Site)]) -> i64 {
    gaps.iter().map(|&(a, b)| dist_inf(a, b)).max().unwrap_or(0)
}
