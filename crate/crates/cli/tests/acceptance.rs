//! End-to-end acceptance suite. Each test prints one `PASS` or `FAIL` line
//! (straight to stderr, so it shows even when output is captured) and then
//! asserts.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use rand::Rng;

use ellperc::estimators::*;
use ellperc::geometry::{ellipses_intersect, AxisRect, Ellipse, Point};
use ellperc::lattice::*;
use ellperc::renorm::*;
use ellperc::rng::{derive_seed, stream};
use ellperc::sampler::*;
use ellperc::stats::{chi2_poisson_test, intervals_overlap, linear_fit};

fn verdict(name: &str, pass: bool, detail: String) {
    let line = format!("{} {name}: {detail}\n", if pass { "PASS" } else { "FAIL" });
    let _ = std::io::stderr().write_all(line.as_bytes());
    assert!(pass, "{name}: {detail}");
}

// ---------------------------------------------------------------- geometry

/// Quadratic form of `e` at `p`, written out from the axis convention.
fn form(e: &Ellipse, p: Point) -> f64 {
    let (c, s) = (e.angle.cos(), e.angle.sin());
    let (dx, dy) = (p.x - e.center.x, p.y - e.center.y);
    let u = dx * c + dy * s;
    let v = -dx * s + dy * c;
    (u / e.half_major).powi(2) + (v / e.half_minor).powi(2)
}

fn boundary(e: &Ellipse, t: f64) -> Point {
    let (c, s) = (e.angle.cos(), e.angle.sin());
    let (a, b) = (e.half_major * t.cos(), e.half_minor * t.sin());
    Point::new(e.center.x + a * c - b * s, e.center.y + a * s + b * c)
}

/// Boundary-sampling oracle: the disks meet iff one contains the other's
/// center or a sampled boundary point of one lies in the other.
fn sampled_intersect(a: &Ellipse, b: &Ellipse, samples: usize) -> bool {
    if form(b, a.center) <= 1.0 || form(a, b.center) <= 1.0 {
        return true;
    }
    (0..samples).any(|k| {
        let t = 2.0 * PI * k as f64 / samples as f64;
        form(b, boundary(a, t)) <= 1.0 || form(a, boundary(b, t)) <= 1.0
    })
}

fn grown(e: &Ellipse, f: f64) -> Ellipse {
    Ellipse { half_major: e.half_major * f, half_minor: e.half_minor * f, ..*e }
}

#[test]
fn geometry_oracle() {
    let start = Instant::now();
    let mut rng = stream(101);
    let draw = |rng: &mut rand_chacha::ChaCha8Rng| {
        let b: f64 = rng.random_range(0.1..1.0);
        let r = b.max(0.5 * (40f64).powf(rng.random_range(0.0..1.0)));
        Ellipse::new(Point::new(rng.random_range(-15.0..15.0), rng.random_range(-15.0..15.0)), r, b, rng.random_range(-PI / 2.0..PI / 2.0))
    };
    let (mut stable, mut agree, mut meeting) = (0, 0, 0);
    let mut first_bad = None;
    for _ in 0..10_000 {
        let a = draw(&mut rng);
        let b = draw(&mut rng);
        let lo = sampled_intersect(&grown(&a, 0.99), &grown(&b, 0.99), 4096);
        let hi = sampled_intersect(&grown(&a, 1.01), &grown(&b, 1.01), 4096);
        if lo != hi {
            continue;
        }
        stable += 1;
        meeting += lo as u32;
        if ellipses_intersect(&a, &b) == lo && ellipses_intersect(&b, &a) == lo {
            agree += 1;
        } else if first_bad.is_none() {
            first_bad = Some((a, b));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        "geometry_oracle",
        agree == stable && stable >= 9_500 && meeting >= 500 && secs < 30.0,
        format!("{agree}/{stable} margin-stable pairs agree ({meeting} meeting), first mismatch {first_bad:?}, {secs:.1}s"),
    );
}

// ----------------------------------------------------------------- sampler

#[test]
fn sampler_laws() {
    let params = EllipseModelParams::new(1.0, 1.5);
    let window = Window::new(AxisRect::from_bounds(0.0, 0.0, 60.0, 60.0), FarField::Off);
    let mut passes = 0;
    for rep in 0..100 {
        let s = sample_ellipse_process(&params, &window, derive_seed(7, 1, rep)).unwrap();
        let mut counts = vec![0u64; 400];
        for e in &s.ellipses {
            let (i, j) = ((e.center.x / 3.0) as usize, (e.center.y / 3.0) as usize);
            counts[i.min(19) * 20 + j.min(19)] += 1;
        }
        passes += (chi2_poisson_test(&counts, 9.0).2 > 0.01) as u32;
    }
    let big = Window::new(AxisRect::from_bounds(0.0, 0.0, 1000.0, 1000.0), FarField::Off);
    let s = sample_ellipse_process(&params, &big, 8).unwrap();
    let mut radii: Vec<f64> = s.ellipses.iter().map(|e| e.half_major).collect();
    radii.sort_by(f64::total_cmp);
    let n = radii.len() as f64;
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for j in 0.. {
        let r = 2f64.powf(j as f64 / 2.0);
        let above = radii.len() - radii.partition_point(|&x| x < r);
        if above < 1000 {
            break;
        }
        xs.push(r.ln());
        ys.push((above as f64 / n).ln());
    }
    let fit = linear_fit(&xs, &ys, None);
    verdict(
        "sampler_laws",
        passes >= 95 && (fit.slope + 1.5).abs() <= 0.05 && n >= 9.9e5,
        format!("chi-square p > 0.01 in {passes}/100; tail slope {:.4} over {n} draws (target -1.5 +- 0.05)", fit.slope),
    );
}

// ---------------------------------------------------------------- coupling

#[test]
fn coupling_reparametrization() {
    let mut rng = stream(202);
    let mut worst: f64 = 0.0;
    for _ in 0..10_000 {
        let z = Point::new(rng.random_range(-100.0..100.0), rng.random_range(-100.0..100.0));
        let r = rng.random_range(0.5..1000.0);
        let v = rng.random_range(-PI / 2.0..PI / 2.0);
        let (x, y) = psi(z, r, v);
        let (z2, r2, v2) = psi_inverse(x, y).unwrap();
        let dv = (v - v2).rem_euclid(PI);
        worst = worst.max((z - z2).norm()).max((r - r2).abs()).max(dv.min(PI - dv));
    }
    let matched = CouplingTestConfig {
        ellipse: EllipseModelParams::new(1.0, 1.5),
        segment_alpha: 1.5,
        window_side: 30.0,
        max_r: 50.0,
        replicates: 10,
    };
    let same = coupling_equivalence_test(&matched, 11).unwrap();
    let mismatch = CouplingTestConfig { ellipse: EllipseModelParams::new(1.0, 1.8), segment_alpha: 1.2, ..matched };
    let diff = coupling_equivalence_test(&mismatch, 11).unwrap();
    verdict(
        "coupling_reparametrization",
        worst <= 1e-10 && same.min_p() > 0.01 && diff.min_p() < 0.01,
        format!(
            "round-trip error {worst:.2e}; matched min p {:.3} ({} vs {} objects); 1.2 vs 1.8 min p {:.2e}",
            same.min_p(),
            same.n_from_segments,
            same.n_from_ellipses,
            diff.min_p()
        ),
    );
}

// ---------------------------------------------------------------- crossing

/// The crossing run shipped as `docs/configs/crossing.json`.
fn crossing_reference() -> SweepReport {
    crossing_sweep(&EllipseModelParams::new(0.02, 1.5), 1.0, &[50.0, 100.0, 200.0, 400.0, 800.0], 2000, 1).unwrap()
}

#[test]
fn box_crossing_exponent() {
    let start = Instant::now();
    let r = crossing_reference();
    let fit = r.fit.clone().unwrap();
    let ok = (fit.slope - 0.5).abs() <= 0.15 && r.rows.iter().all(|row| row.report.trials >= 2000);
    verdict(
        "box_crossing_exponent",
        ok,
        format!(
            "slope {:.3} +- {:.3} (target 0.5 +- 0.15), p = {:?}, {:.1}s",
            fit.slope,
            fit.slope_se,
            r.rows.iter().map(|row| row.report.estimate).collect::<Vec<_>>(),
            start.elapsed().as_secs_f64()
        ),
    );
}

// ----------------------------------------------------------------- annulus

#[test]
fn annulus_exponent_and_linearity() {
    let params = EllipseModelParams::new(0.5, 1.5);
    let r = annulus_sweep(&params, 1.0, &[5.0, 9.0, 17.0, 33.0, 65.0, 129.0], 4000, 2).unwrap();
    let fit = r.sweep.fit.clone().unwrap();
    let ratio = annulus_radius_ratio(&params, 2.0, 256.0, 8000, 3).unwrap();
    verdict(
        "annulus_exponent_and_linearity",
        (fit.slope + 0.5).abs() <= 0.15 && (ratio.ratio / 2.0 - 1.0).abs() <= 0.2,
        format!("gap slope {:.3} (target -0.5 +- 0.15); doubling l1 multiplies the mean by {:.3} (target 2 +- 20%)", fit.slope, ratio.ratio),
    );
}

// --------------------------------------------------------- box connection

/// `int int |x - y|^-s` over two unit boxes by a 24^4 midpoint rule.
fn pair_integral_oracle(z: Point, s: f64) -> f64 {
    let m = 24;
    let h = 1.0 / m as f64;
    let pts: Vec<f64> = (0..m).map(|i| -0.5 + (i as f64 + 0.5) * h).collect();
    let mut sum = 0.0;
    for &x1 in &pts {
        for &y1 in &pts {
            for &x2 in &pts {
                for &y2 in &pts {
                    let d = ((z.x + x2 - x1).powi(2) + (z.y + y2 - y1).powi(2)).sqrt();
                    sum += d.powf(-s);
                }
            }
        }
    }
    sum * h.powi(4)
}

#[test]
fn box_connection_probability() {
    let z = Point::new(50.0, 0.0);
    // beta chosen so that beta |z|^-s = 0.05
    let beta = 0.05 * 50f64.powf(3.5);
    let lr = LongRangeParams { beta, s: 3.5, kappa: 0.5 };
    let trials = 40_000;
    let r = box_connect_prob(1.0, z, &lr, trials, 9).unwrap();
    let oracle = -(-beta * pair_integral_oracle(z, 3.5)).exp_m1();
    let sigma = (oracle * (1.0 - oracle) / trials as f64).sqrt();
    let p = r.report.estimate;
    verdict(
        "box_connection_probability",
        (p - oracle).abs() <= 3.0 * sigma && (p / r.asymptote - 1.0).abs() <= 0.1 && (r.quadrature / oracle - 1.0).abs() < 1e-6,
        format!(
            "estimate {p:.5}, oracle {oracle:.5} (library quadrature {:.5}), {:.2} sigma, asymptote {:.5} ({:+.1}%)",
            r.quadrature,
            (p - oracle) / sigma,
            r.asymptote,
            100.0 * (p / r.asymptote - 1.0)
        ),
    );
}

// --------------------------------------------------------------- hierarchy

fn words(k: u32) -> Vec<String> {
    (0..1u32 << k).map(|i| (0..k).rev().map(|b| if i >> b & 1 == 1 { '1' } else { '0' }).collect()).collect()
}

/// Re-check of a hierarchy from its defining conditions and the raw edge
/// oracle.
fn hierarchy_ok(h: &Hierarchy, src: &impl EdgeSource, sched: &HierarchySchedule) -> Result<(), String> {
    let z = |w: &str| h.z.get(w).copied().ok_or(format!("no site for '{w}'"));
    if z("0")? != h.x || z("1")? != h.y {
        return Err("root sites".into());
    }
    let mut edges = BTreeSet::new();
    let mut highways = 0;
    for k in 0..h.depth - 1 {
        let nk = sched.big_n.powf(sched.gamma.powi(k as i32 + 1));
        for w in words(k) {
            if z(&format!("{w}00"))? != z(&format!("{w}0"))? || z(&format!("{w}11"))? != z(&format!("{w}1"))? {
                return Err(format!("outer sites of '{w}'"));
            }
            let (a, b) = (z(&format!("{w}01"))?, z(&format!("{w}10"))?);
            for (p, c) in [(a, z(&format!("{w}0"))?), (b, z(&format!("{w}1"))?)] {
                let d = (p.0 - c.0).abs().max((p.1 - c.1).abs()) as f64;
                if d < nk / 2.0 || d > nk {
                    return Err(format!("'{w}' endpoint at distance {d}, scale {nk}"));
                }
            }
            if !src.is_open(a, b) || !edges.insert((a.min(b), a.max(b))) {
                return Err(format!("highway of '{w}' closed or repeated"));
            }
            highways += 1;
        }
    }
    let gaps: Vec<(Site, Site)> =
        words(h.depth - 1).iter().map(|w| Ok((z(&format!("{w}0"))?, z(&format!("{w}1"))?))).collect::<Result<_, String>>()?;
    if gaps != h.gaps || highways != h.highways.len() {
        return Err("gap or highway lists disagree with the sites".into());
    }
    Ok(())
}

#[test]
fn hierarchy_validation_and_monotonicity() {
    let betas = [30.0, 60.0, 120.0, 240.0, 480.0, 960.0];
    let cfg = FailureCurveConfig { s: 3.5, gamma: 0.6, eps: 0.1, max_depth: None, rule: HighwayRule::NearestPick };
    let rows = hierarchy_failure_curve(&[1024], &cfg, &betas, 300, 12).unwrap();
    let failures: Vec<u64> = rows.iter().map(|r| r.failures).collect();
    let monotone = failures.windows(2).all(|w| w[1] <= w[0]);
    let invalid: u64 = rows.iter().map(|r| r.invalid).sum();
    let sched = schedule(1024.0, 0.6, 0.1).unwrap();
    let (mut found, mut checked_ok) = (0, 0);
    let mut first_err = None;
    for t in 0..200 {
        for beta in [120.0, 480.0] {
            let lazy = LazyLattice::coupled(LatticeParams::new(beta, 3.5), 960.0, derive_seed(13, 0, t)).unwrap();
            for rule in [HighwayRule::FirstOpenPair, HighwayRule::NearestPick] {
                if let HierarchyOutcome::Found(h) = find_hierarchy_with(&lazy, (0, 0), (1024, 0), &sched, None, rule).unwrap() {
                    found += 1;
                    match (hierarchy_ok(&h, &lazy, &sched), validate_hierarchy(&h, &lazy, &sched)) {
                        (Ok(()), Ok(())) => checked_ok += 1,
                        (a, b) => first_err = first_err.or(Some(format!("{a:?} / {b:?}"))),
                    }
                }
            }
        }
    }
    verdict(
        "hierarchy_validation_and_monotonicity",
        monotone && invalid == 0 && found > 0 && checked_ok == found,
        format!(
            "failures over beta {betas:?}: {failures:?}; {checked_ok}/{found} returned hierarchies pass both re-checks ({invalid} invalid in the curve) {}",
            first_err.unwrap_or_default()
        ),
    );
}

// ---------------------------------------------------------- renormalization

const STAR: [(i64, i64); 8] = [(1, 0), (1, 1), (0, 1), (-1, 1), (-1, 0), (-1, -1), (0, -1), (1, -1)];
const PLUS: [(i64, i64); 4] = [(1, 0), (0, 1), (-1, 0), (0, -1)];

fn star_connected_set(set: &BTreeSet<Site>) -> bool {
    let Some(&s0) = set.iter().next() else { return true };
    let mut seen = BTreeSet::from([s0]);
    let mut q = VecDeque::from([s0]);
    while let Some(s) = q.pop_front() {
        for d in STAR {
            let t = (s.0 + d.0, s.1 + d.1);
            if set.contains(&t) && seen.insert(t) {
                q.push_back(t);
            }
        }
    }
    seen.len() == set.len()
}

/// The set plus everything it encloses.
fn with_holes_filled(set: &BTreeSet<Site>) -> BTreeSet<Site> {
    let x0 = set.iter().map(|s| s.0).min().unwrap() - 1;
    let x1 = set.iter().map(|s| s.0).max().unwrap() + 1;
    let y0 = set.iter().map(|s| s.1).min().unwrap() - 1;
    let y1 = set.iter().map(|s| s.1).max().unwrap() + 1;
    let mut outside = BTreeSet::from([(x0, y0)]);
    let mut q = VecDeque::from([(x0, y0)]);
    while let Some(s) = q.pop_front() {
        for d in PLUS {
            let t = (s.0 + d.0, s.1 + d.1);
            if t.0 >= x0 && t.0 <= x1 && t.1 >= y0 && t.1 <= y1 && !set.contains(&t) && outside.insert(t) {
                q.push_back(t);
            }
        }
    }
    (x0..=x1).flat_map(|x| (y0..=y1).map(move |y| (x, y))).filter(|s| !outside.contains(s)).collect()
}

#[test]
fn renormalization_properties() {
    // good-box probability over the box scale
    let params = EllipseModelParams::new(1.0, 1.5);
    let rates: Vec<GoodRateReport> =
        [10.0, 20.0, 40.0, 80.0].iter().enumerate().map(|(i, &k)| good_box_rate(&params, k, 8, 4000, derive_seed(21, 0, i as u64)).unwrap()).collect();
    let p: Vec<f64> = rates.iter().map(|r| r.p_plugin).collect();
    let increasing = p.windows(2).all(|w| w[1] > w[0]);

    // boundary property of finite *-clusters
    let rect = SiteRect::new(0, 0, 80, 80).unwrap();
    let (mut clusters, mut multi, mut boundary_ok) = (0, 0, true);
    let mut seed = 0;
    while clusters < 1000 {
        let grid = bernoulli_grid(rect, 0.35, derive_seed(22, 0, seed));
        seed += 1;
        for c in bad_clusters(&grid).clusters.iter().filter(|c| !c.touches_border) {
            let filled = with_holes_filled(&c.sites);
            let outer: BTreeSet<Site> = filled
                .iter()
                .flat_map(|s| PLUS.map(|d| (s.0 + d.0, s.1 + d.1)))
                .filter(|t| !filled.contains(t))
                .collect();
            let inner: BTreeSet<Site> =
                filled.iter().copied().filter(|s| PLUS.iter().any(|d| !filled.contains(&(s.0 + d.0, s.1 + d.1)))).collect();
            boundary_ok &= star_connected_set(&outer) && star_connected_set(&inner);
            boundary_ok &= c.boundaries_connected() && c.filled == filled && c.outer_ext == outer && c.inner_ext == inner;
            boundary_ok &= outer.iter().all(|&s| grid.is_good(s) == Some(true));
            clusters += 1;
            multi += (c.sites.len() > 1) as u32;
        }
    }

    // circuits of good *-components lie in one cluster
    let dense = EllipseModelParams::new(1500.0, 1.5);
    let cfg = RenormConfig::new(8.0).unwrap();
    let (mut components, mut circuits_ok, mut good_sites) = (0, true, 0);
    for t in 0..20 {
        let (sample, field) = sample_witness_field(&dense, &cfg, 10, GoodBoxRule::Endpoints, derive_seed(23, 0, t)).unwrap();
        let rep = circuit_connectivity(&field, &sample.ellipses).unwrap();
        circuits_ok &= rep.holds();
        let good: Vec<Site> = field.grid.rect.sites().filter(|&s| field.grid.is_good(s) == Some(true)).collect();
        good_sites += good.len();
        let es: Vec<(Site, Ellipse)> =
            good.iter().flat_map(|&s| field.circuit(s).unwrap().map(|id| (s, sample.ellipses[id as usize]))).collect();
        // union-find over circuit ellipses, then over *-adjacent good sites
        let mut parent: Vec<usize> = (0..es.len()).collect();
        fn root(p: &mut [usize], mut i: usize) -> usize {
            while p[i] != i {
                p[i] = p[p[i]];
                i = p[i];
            }
            i
        }
        for i in 0..es.len() {
            for j in i + 1..es.len() {
                if ellipses_intersect(&es[i].1, &es[j].1) {
                    let (a, b) = (root(&mut parent, i), root(&mut parent, j));
                    parent[a] = b;
                }
            }
        }
        let goodset: BTreeSet<Site> = good.iter().copied().collect();
        let mut seen = BTreeSet::new();
        for &s in &good {
            if !seen.insert(s) {
                continue;
            }
            let mut comp = vec![s];
            let mut q = VecDeque::from([s]);
            while let Some(a) = q.pop_front() {
                for d in STAR {
                    let b = (a.0 + d.0, a.1 + d.1);
                    if goodset.contains(&b) && seen.insert(b) {
                        comp.push(b);
                        q.push_back(b);
                    }
                }
            }
            let compset: BTreeSet<Site> = comp.into_iter().collect();
            let roots: BTreeSet<usize> = (0..es.len()).filter(|&i| compset.contains(&es[i].0)).map(|i| root(&mut parent, i)).collect();
            circuits_ok &= roots.len() == 1;
            components += 1;
        }
    }
    verdict(
        "renormalization_properties",
        increasing && boundary_ok && clusters >= 1000 && circuits_ok && components > 0,
        format!(
            "P(good) {:?} increasing: {increasing}; boundary property on {clusters} finite clusters ({multi} with several sites): {boundary_ok}; circuits connected on {components} good components ({good_sites} good sites): {circuits_ok}",
            p.iter().map(|x| format!("{x:.3e}")).collect::<Vec<_>>()
        ),
    );
}

// ------------------------------------------------------------ greedy cover

#[test]
fn greedy_cover_properties() {
    let params = EllipseModelParams::new(1.0, 1.5);
    let rho = 8.0;
    let (mut instances, mut volume_ok, mut neighbors_ok) = (0, 0, 0);
    let mut seed = 0;
    while instances < 1000 && seed < 20_000 {
        let s = derive_seed(31, 0, seed);
        seed += 1;
        let Some(c) = greedy_cover_instance(&params, rho, s).unwrap() else { continue };
        instances += 1;
        let window = Window::new(AxisRect::centered(Point::new(0.0, 0.0), 2.0 * rho, 2.0 * rho), FarField::Box { max_r: 4.0 * rho });
        let es = sample_ellipse_process(&params, &window, s).unwrap().ellipses;
        let chain: Vec<Ellipse> = c.chain.ids.iter().map(|&i| es[i as usize]).collect();
        let bound = 2.0 * PI * rho * rho / (PI * params.half_minor * params.half_minor);
        volume_ok += ((chain.len() - 1) as f64 <= bound && c.volume_bound_holds) as u32;
        let linked = chain.windows(2).all(|w| ellipses_intersect(&w[0], &w[1]));
        let only = (0..chain.len()).all(|i| (i + 2..chain.len()).all(|j| !ellipses_intersect(&chain[i], &chain[j])));
        neighbors_ok += (linked && only && c.only_neighbors) as u32;
    }
    verdict(
        "greedy_cover_properties",
        instances == 1000 && volume_ok == instances && neighbors_ok == instances,
        format!("{instances} instances from {seed} seeds: volume bound {volume_ok}, only-neighbors {neighbors_ok}"),
    );
}

// ----------------------------------------------------------------- gluing

#[test]
fn gluing_sweep() {
    let start = Instant::now();
    let cfg = GlueSweepConfig {
        params: EllipseModelParams::new(3730.0, 1.5),
        k: 8.0,
        gamma: 0.85,
        eps: 0.1,
        max_depth: None,
        opts: GlueOptions::default(),
    };
    let ns = [512, 1024, 2048, 4096, 8192];
    let r = glue_sweep(&cfg, &ns, 40, 1).unwrap();
    let means: Vec<f64> = r.rows.iter().map(|row| row.mean_ratio).collect();
    let decreasing = means.windows(2).all(|w| w[1] < w[0]);
    let all_at_least_one = r.rows.iter().all(|row| row.ratios.iter().all(|&x| x >= 1.0));
    let dominates = r.rows.iter().all(|row| row.count_dominates);
    let glued: Vec<usize> = r.rows.iter().map(|row| row.ratios.len()).collect();
    let failures: Vec<&BTreeMap<String, u64>> = r.rows.iter().map(|row| &row.glue_failures).collect();
    verdict(
        "gluing_sweep",
        decreasing && all_at_least_one && dominates && glued.iter().all(|&g| g > 0),
        format!(
            "mean l/N {means:.4?} decreasing: {decreasing}; all >= 1: {all_at_least_one}; count >= chemical: {dominates}; glued {glued:?}, failures {failures:?}, P(good) {:.3}, {:.0}s",
            r.p_good,
            start.elapsed().as_secs_f64()
        ),
    );
}

// ------------------------------------------------------- chemical distance

#[test]
fn chemical_distance_band() {
    let start = Instant::now();
    let params = EllipseModelParams::new(1.0, 1.5);
    let r = chemical_scaling_sweep(&params, &[100.0, 1000.0, 10_000.0], 500, 20_000, 2.0, 1).unwrap();
    let (lo, hi) = chemical_band(1.5);
    let slack = 0.5;
    let (lo, hi) = (lo * (1.0 - slack), hi * (1.0 + slack));
    let inside = r.rows.iter().all(|row| row.median_ratio >= lo && row.median_ratio <= hi);
    let enough = r.rows.iter().all(|row| row.accepted >= 500);
    let means: Vec<f64> = r.rows.iter().map(|row| row.mean_d).collect();
    let nondecreasing = means.windows(2).all(|w| w[1] >= w[0]);
    verdict(
        "chemical_distance_band",
        inside && enough && nondecreasing,
        format!(
            "median D/loglog {:.3?} in [{lo:.3}, {hi:.3}]; accepted {:?} (rates {:.3?}); mean D {means:.3?}; {:.0}s",
            r.rows.iter().map(|row| row.median_ratio).collect::<Vec<_>>(),
            r.rows.iter().map(|row| row.accepted).collect::<Vec<_>>(),
            r.rows.iter().map(|row| row.acceptance).collect::<Vec<_>>(),
            start.elapsed().as_secs_f64()
        ),
    );
}

// ------------------------------------------------------------ lower bound

#[test]
fn lower_bound_base_case() {
    let params = EllipseModelParams::new(0.5, 1.5);
    let rs = [5.0, 9.0, 17.0, 33.0, 65.0, 129.0];
    let lb = lower_bound_experiment(&params, 0, &rs, 4000, 41).unwrap();
    let fit = lb.fit.clone().unwrap();
    let ann = annulus_sweep(&params, 1.0, &rs, 4000, 42).unwrap();
    let agree: Vec<bool> = lb
        .rows
        .iter()
        .zip(&ann.sweep.rows)
        .map(|(a, b)| intervals_overlap((a.report.ci_lo, a.report.ci_hi), (b.report.ci_lo, b.report.ci_hi)))
        .collect();
    verdict(
        "lower_bound_base_case",
        (fit.slope + 0.5).abs() <= 0.15 && agree.iter().all(|&x| x),
        format!(
            "slope {:.3} (target -0.5 +- 0.15); lower bound {:.4?} vs annulus {:.4?}: intervals overlap {agree:?}",
            fit.slope,
            lb.rows.iter().map(|r| r.report.estimate).collect::<Vec<_>>(),
            ann.sweep.rows.iter().map(|r| r.report.estimate).collect::<Vec<_>>()
        ),
    );
}

// ---------------------------------------------------------------- highway

#[test]
fn highway_recursion() {
    let sched = highway_schedule(5000.0, 1.5, 3).unwrap();
    let mut l = 5000.0f64;
    let mut exact = true;
    for n in 1..=3 {
        l = l.powf(4.0 / 3.0) / l.ln();
        exact &= ((sched.l(n) - l) / l).abs() < 1e-12;
    }
    let r = enhanced_highway_experiment(&sched, 0.07, 3000, 6).unwrap();
    let fails: Vec<f64> = r.levels.iter().map(|lv| lv.a_fail.estimate).collect();
    let decreasing = fails.windows(2).all(|w| w[1] < w[0]);
    let budget = (sched.depth() - 1) as u32 + 12;
    let accounting = r.chain_counts.iter().all(|&c| c <= budget) && r.accounting_holds;
    verdict(
        "highway_recursion",
        exact && sched.l(3) <= 1e5 && decreasing && accounting && r.circuits_closed && r.joint_successes > 0,
        format!(
            "levels {:.1?} exact: {exact}; P(no crossing) {fails:.4?} decreasing: {decreasing}; chain counts <= {budget} on all {} joint successes: {accounting}",
            sched.levels,
            r.joint_successes
        ),
    );
}

// -------------------------------------------------------- reproducibility

fn run_cli(config: &Path, out: &Path, extra: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_ellperc"))
        .args(["run", "--config"])
        .arg(config)
        .arg("--out")
        .arg(out)
        .args(extra)
        .env_remove("ELLPERC_OUT")
        .output()
        .unwrap()
}

fn data_files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().unwrap() != "manifest.json")
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect()
}

fn docs() -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../docs/configs")
}

#[test]
fn byte_identical_reruns() {
    let tmp = tempfile::tempdir().unwrap();
    let mut lines = Vec::new();
    let mut all_ok = true;
    for name in ["sample", "graph", "crossing", "annulus", "hierarchy", "renorm", "highway", "lowerbound", "corollary", "coupling-test"] {
        let cfg = docs().join(format!("{name}.json"));
        let a = tmp.path().join(format!("{name}-a"));
        let b = tmp.path().join(format!("{name}-b"));
        let ra = run_cli(&cfg, &a, &["--plot-data"]);
        let rb = run_cli(&cfg, &b, &["--plot-data", "--threads", "2"]);
        let fa = data_files(&a);
        let same = ra.status.success() && rb.status.success() && fa == data_files(&b) && fa.len() >= 3;
        let ma: serde_json::Value = serde_json::from_slice(&std::fs::read(a.join("manifest.json")).unwrap()).unwrap();
        let mb: serde_json::Value = serde_json::from_slice(&std::fs::read(b.join("manifest.json")).unwrap()).unwrap();
        let hashes = ma["config_sha256"] == mb["config_sha256"] && ma["files"] == mb["files"];
        all_ok &= same && hashes;
        lines.push(format!("{name}: {} files identical {same}, manifest hashes {hashes}", fa.len()));
    }
    // the shipped crossing config reproduces the library run
    let out = tmp.path().join("crossing-a");
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("report.json")).unwrap()).unwrap();
    let golden = serde_json::to_value(crossing_reference()).unwrap();
    let matches = report["result"] == golden;
    verdict("byte_identical_reruns", all_ok && matches, format!("{}; docs crossing run matches library: {matches}", lines.join("; ")));
}
