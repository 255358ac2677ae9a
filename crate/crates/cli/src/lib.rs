//! Config-driven batch runner for the ellperc experiments.
//!
//! A run reads one JSON config, dispatches to the named experiment, and
//! writes `report.json`, a table (`table.csv` or `table.json`), optional
//! `plot_data.csv`, experiment-specific data files, and `manifest.json`.
//! Everything except the manifest's wall time is a function of the resolved
//! config, so re-runs are byte-identical.

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ellperc::estimators as est;
use ellperc::geometry::{AxisRect, Point};
use ellperc::graph::{chemical_distance, internal_distance_ub, largest_component, IntersectionGraph};
use ellperc::lattice::{box_connect_prob, hierarchy_failure_curve, FailureCurveConfig, HighwayRule};
use ellperc::renorm::{good_box_rate, GlueOptions};
use ellperc::sampler::{coupling_equivalence_test, sample_ellipse_process, CouplingTestConfig, EllipseModelParams, FarField, LongRangeParams, Window};

/// Environment variable naming the default output directory.
pub const OUT_ENV: &str = "ELLPERC_OUT";

/// The JSON schema shipped with the tool.
pub const SCHEMA: &str = include_str!("../../../docs/config.schema.json");

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    Sample,
    Graph,
    Crossing,
    Annulus,
    Boxconnect,
    Hierarchy,
    Renorm,
    Glue,
    ChemSweep,
    DistSweep,
    Highway,
    Lowerbound,
    Corollary,
    CouplingTest,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    #[default]
    Csv,
    Json,
}

/// A config file as written. Keys left out fall back to command-line flags.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub experiment: Experiment,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threads: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub format: Option<Format>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plot_data: Option<bool>,
    pub params: Value,
}

/// Flag values; the config file wins where both are given.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub out: Option<PathBuf>,
    pub format: Option<Format>,
    pub plot_data: bool,
}

/// A config with every setting decided.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Resolved {
    pub experiment: Experiment,
    pub seed: u64,
    pub threads: usize,
    pub out: PathBuf,
    pub format: Format,
    pub plot_data: bool,
    pub params: Value,
}

impl Resolved {
    /// SHA-256 of the settings that determine the numbers: experiment,
    /// seed, format, plot flag and params (not the thread count or the
    /// output location).
    pub fn config_hash(&self) -> String {
        let v = json!({
            "experiment": self.experiment,
            "seed": self.seed,
            "format": self.format,
            "plot_data": self.plot_data,
            "params": self.params,
        });
        hex(&Sha256::digest(serde_json::to_vec(&v).expect("json")))
    }
}

pub fn resolve(cfg: RunConfig, flags: &Overrides) -> Resolved {
    Resolved {
        experiment: cfg.experiment,
        seed: cfg.seed.or(flags.seed).unwrap_or(0),
        threads: cfg.threads.or(flags.threads).unwrap_or(1).max(1),
        out: cfg
            .out
            .or_else(|| flags.out.clone())
            .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("ellperc-out")),
        format: cfg.format.or(flags.format).unwrap_or_default(),
        plot_data: cfg.plot_data.unwrap_or(flags.plot_data),
        params: cfg.params,
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct Diagnostics {
    pub errors: Vec<String>,
    pub warnings: Vec<String>,
}

impl Diagnostics {
    pub fn is_ok(&self) -> bool {
        self.errors.is_empty()
    }
}

fn default_multiscale() -> f64 {
    2.0
}

fn default_kappa() -> f64 {
    0.5
}

fn default_refinement() -> usize {
    2
}

fn default_pad() -> i64 {
    12
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleParams {
    pub model: EllipseModelParams,
    /// `[x0, y0, x1, y1]`.
    pub window: [f64; 4],
    pub far_field: FarField,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphParams {
    pub model: EllipseModelParams,
    pub window: [f64; 4],
    pub far_field: FarField,
    #[serde(default)]
    pub cell: Option<f64>,
    /// Optional pair of points for distance queries.
    #[serde(default)]
    pub points: Option<[[f64; 2]; 2]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CrossingParams {
    pub model: EllipseModelParams,
    pub k: f64,
    pub ls: Vec<f64>,
    pub trials: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RatioSpec {
    pub l1: f64,
    pub gap: f64,
    pub trials: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnulusParams {
    pub model: EllipseModelParams,
    pub l1: f64,
    pub l2s: Vec<f64>,
    pub trials: u64,
    #[serde(default)]
    pub ratio: Option<RatioSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxConnectParams {
    pub l: f64,
    pub z: [f64; 2],
    pub beta: f64,
    pub s: f64,
    #[serde(default = "default_kappa")]
    pub kappa: f64,
    pub trials: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HierarchyParams {
    pub ns: Vec<i64>,
    pub betas: Vec<f64>,
    pub s: f64,
    pub gamma: f64,
    pub eps: f64,
    #[serde(default)]
    pub max_depth: Option<u32>,
    #[serde(default)]
    pub rule: HighwayRule,
    pub trials: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RenormParams {
    pub model: EllipseModelParams,
    pub ks: Vec<f64>,
    /// Side of the site grid per trial.
    pub m: i64,
    pub trials: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GlueParams {
    pub model: EllipseModelParams,
    pub k: f64,
    pub gamma: f64,
    pub eps: f64,
    #[serde(default)]
    pub max_depth: Option<u32>,
    pub ns: Vec<i64>,
    pub trials: u64,
    #[serde(default = "default_refinement")]
    pub refinement: usize,
    #[serde(default = "default_pad")]
    pub pad: i64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChemSweepParams {
    pub model: EllipseModelParams,
    pub dists: Vec<f64>,
    /// Accepted (connected) trials per distance.
    pub accepted: u64,
    pub max_attempts: u64,
    #[serde(default = "default_multiscale")]
    pub multiscale: f64,
    /// Relative widening of the reported band.
    #[serde(default)]
    pub band_slack: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistSweepParams {
    pub model: EllipseModelParams,
    pub dists: Vec<f64>,
    pub accepted: u64,
    pub max_attempts: u64,
    #[serde(default = "default_multiscale")]
    pub multiscale: f64,
    #[serde(default = "default_refinement")]
    pub refinement: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HighwayParams {
    pub l0: f64,
    pub alpha: f64,
    pub n: usize,
    pub u: f64,
    pub trials: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LowerBoundParams {
    pub model: EllipseModelParams,
    pub n: u32,
    pub rs: Vec<f64>,
    pub trials: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorollaryParams {
    pub alpha: f64,
    pub u: f64,
    #[serde(default = "one")]
    pub c2: f64,
    pub delta: f64,
    pub log10_rs: Vec<f64>,
}

fn one() -> f64 {
    1.0
}

/// Typed parameters of one experiment.
#[derive(Clone, Debug, PartialEq)]
pub enum Params {
    Sample(SampleParams),
    Graph(GraphParams),
    Crossing(CrossingParams),
    Annulus(AnnulusParams),
    Boxconnect(BoxConnectParams),
    Hierarchy(HierarchyParams),
    Renorm(RenormParams),
    Glue(GlueParams),
    ChemSweep(ChemSweepParams),
    DistSweep(DistSweepParams),
    Highway(HighwayParams),
    Lowerbound(LowerBoundParams),
    Corollary(CorollaryParams),
    CouplingTest(CouplingTestConfig),
}

pub fn parse_params(exp: Experiment, v: &Value) -> Result<Params, serde_json::Error> {
    let v = v.clone();
    Ok(match exp {
        Experiment::Sample => Params::Sample(serde_json::from_value(v)?),
        Experiment::Graph => Params::Graph(serde_json::from_value(v)?),
        Experiment::Crossing => Params::Crossing(serde_json::from_value(v)?),
        Experiment::Annulus => Params::Annulus(serde_json::from_value(v)?),
        Experiment::Boxconnect => Params::Boxconnect(serde_json::from_value(v)?),
        Experiment::Hierarchy => Params::Hierarchy(serde_json::from_value(v)?),
        Experiment::Renorm => Params::Renorm(serde_json::from_value(v)?),
        Experiment::Glue => Params::Glue(serde_json::from_value(v)?),
        Experiment::ChemSweep => Params::ChemSweep(serde_json::from_value(v)?),
        Experiment::DistSweep => Params::DistSweep(serde_json::from_value(v)?),
        Experiment::Highway => Params::Highway(serde_json::from_value(v)?),
        Experiment::Lowerbound => Params::Lowerbound(serde_json::from_value(v)?),
        Experiment::Corollary => Params::Corollary(serde_json::from_value(v)?),
        Experiment::CouplingTest => Params::CouplingTest(serde_json::from_value(v)?),
    })
}

/// Parses a config file's text; any failure is a schema error.
pub fn parse_config(text: &str) -> Result<(RunConfig, Params), String> {
    let cfg: RunConfig = serde_json::from_str(text).map_err(|e| format!("config: {e}"))?;
    let params = parse_params(cfg.experiment, &cfg.params).map_err(|e| format!("params: {e}"))?;
    Ok((cfg, params))
}

fn model_of(p: &Params) -> Option<EllipseModelParams> {
    Some(match p {
        Params::Sample(x) => x.model,
        Params::Graph(x) => x.model,
        Params::Crossing(x) => x.model,
        Params::Annulus(x) => x.model,
        Params::Renorm(x) => x.model,
        Params::Glue(x) => x.model,
        Params::ChemSweep(x) => x.model,
        Params::DistSweep(x) => x.model,
        Params::Lowerbound(x) => x.model,
        Params::CouplingTest(x) => x.ellipse,
        Params::Highway(x) => EllipseModelParams::new(x.u, x.alpha),
        Params::Corollary(x) => EllipseModelParams::new(x.u, x.alpha),
        Params::Boxconnect(_) | Params::Hierarchy(_) => return None,
    })
}

/// Schema and semantic checks of a config file's text.
pub fn validate_text(text: &str) -> Diagnostics {
    match parse_config(text) {
        Err(e) => Diagnostics { errors: vec![e], warnings: Vec::new() },
        Ok((_, p)) => validate_params(&p),
    }
}

/// Semantic checks: the heavy-tailed regime warning and the lower-bound
/// validity floor.
pub fn validate_params(p: &Params) -> Diagnostics {
    let mut d = Diagnostics::default();
    if let Some(m) = model_of(p) {
        d.warnings.extend(m.warnings());
    }
    if let Params::Lowerbound(lb) = p {
        let gamma = (lb.model.alpha - 1.0) / 2.0;
        if !(gamma > 0.0) {
            d.errors.push("lower bound needs alpha > 1".into());
        } else {
            let log2_floor = est::LowerBoundParams { gamma, c: 15.0 }.log2_floor(lb.n);
            for &r in &lb.rs {
                if !(r.log2() > log2_floor) {
                    d.errors.push(format!("r = {r} is below the validity floor b_{} = 2^{log2_floor}", lb.n));
                }
            }
        }
    }
    if let Params::Corollary(c) = p {
        let gamma = (c.alpha - 1.0) / 2.0;
        if gamma > 0.0 && gamma < 1.0 {
            let t = 1.0 / (1.0 / gamma).ln();
            if c.delta >= t {
                d.warnings.push(format!("delta = {} is not below 1/log(1/gamma) = {t:.4}", c.delta));
            }
        }
    }
    d
}

/// A rectangular table.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Value>>,
}

impl Table {
    fn new(cols: &[&str]) -> Self {
        Table { columns: cols.iter().map(|s| s.to_string()).collect(), rows: Vec::new() }
    }

    fn push(&mut self, row: Vec<Value>) {
        assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> anyhow::Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.columns)?;
        for r in &self.rows {
            w.write_record(r.iter().map(cell))?;
        }
        Ok(w.into_inner()?)
    }

    pub fn to_json(&self) -> Vec<u8> {
        let rows: Vec<BTreeMap<&str, &Value>> =
            self.rows.iter().map(|r| self.columns.iter().map(String::as_str).zip(r.iter()).collect()).collect();
        let mut v = serde_json::to_vec_pretty(&rows).expect("json");
        v.push(b'\n');
        v
    }
}

fn cell(v: &Value) -> String {
    match v {
        Value::Null => String::new(),
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// One point of long-format plot data.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PlotPoint {
    pub series: String,
    pub x: f64,
    pub y: f64,
    pub lo: Option<f64>,
    pub hi: Option<f64>,
}

fn pp(series: &str, x: f64, y: f64, lo: Option<f64>, hi: Option<f64>) -> PlotPoint {
    PlotPoint { series: series.into(), x, y, lo, hi }
}

#[derive(Clone, Debug, Default)]
pub struct Output {
    pub report: Value,
    pub table: Table,
    pub plot: Vec<PlotPoint>,
    /// Additional data files, by name.
    pub files: Vec<(String, Vec<u8>)>,
}

fn num(x: f64) -> Value {
    // non-finite values have no JSON form
    if x.is_finite() {
        json!(x)
    } else {
        Value::String(format!("{x}"))
    }
}

fn rect_of(w: [f64; 4]) -> AxisRect {
    AxisRect::from_bounds(w[0], w[1], w[2], w[3])
}

fn sweep_table(rows: &[est::SweepRow], x_name: &str, plot: &mut Vec<PlotPoint>, series: &str) -> Table {
    let mut t = Table::new(&[x_name, "trials", "successes", "p_hat", "ci_lo", "ci_hi", "neg_log_q", "mean_count", "truncation_bias"]);
    for r in rows {
        let e = &r.report;
        t.push(vec![
            num(r.x),
            json!(e.trials),
            json!(e.successes),
            num(e.estimate),
            num(e.ci_lo),
            num(e.ci_hi),
            num(r.neg_log_q),
            num(r.mean_count),
            num(r.truncation_bias),
        ]);
        plot.push(pp(series, r.x, e.estimate, Some(e.ci_lo), Some(e.ci_hi)));
    }
    t
}

/// Runs one experiment.
pub fn run_experiment(p: &Params, seed: u64) -> anyhow::Result<Output> {
    let mut plot = Vec::new();
    let out = match p {
        Params::Sample(sp) => {
            let w = Window::new(rect_of(sp.window), sp.far_field);
            let s = sample_ellipse_process(&sp.model, &w, seed)?;
            let mut t = Table::new(&["cx", "cy", "half_major", "half_minor", "angle"]);
            for e in &s.ellipses {
                t.push(vec![num(e.center.x), num(e.center.y), num(e.half_major), num(e.half_minor), num(e.angle)]);
            }
            let report = json!({
                "count": s.ellipses.len(),
                "truncation_bias_bound": num(s.truncation_bias_bound),
            });
            let mut sample = serde_json::to_vec_pretty(&s.to_json())?;
            sample.push(b'\n');
            let mut sample_csv = Vec::new();
            s.write_csv(&mut sample_csv)?;
            Output { report, table: t, plot, files: vec![("sample.json".into(), sample), ("sample.csv".into(), sample_csv)] }
        }
        Params::Graph(gp) => {
            let w = Window::new(rect_of(gp.window), gp.far_field);
            let s = sample_ellipse_process(&gp.model, &w, seed)?;
            let cell = gp.cell.unwrap_or(4.0 * gp.model.half_minor);
            let g = IntersectionGraph::new(s.ellipses, cell)?;
            let big = largest_component(&g);
            let mut t = Table::new(&["i", "j"]);
            for (i, j) in g.edges() {
                t.push(vec![json!(i), json!(j)]);
            }
            let mut report = json!({
                "nodes": g.len(),
                "edges": g.edge_count(),
                "components": g.n_components(),
                "largest_component": big.len(),
            });
            if let Some([a, b]) = gp.points {
                let (x, y) = (Point::new(a[0], a[1]), Point::new(b[0], b[1]));
                report["chemical_distance"] = json!(chemical_distance(&g, x, y));
                report["internal_distance_ub"] = json!(internal_distance_ub(&g, x, y, 2)?.map(num));
            }
            Output { report, table: t, plot, files: Vec::new() }
        }
        Params::Crossing(cp) => {
            let r = est::crossing_sweep(&cp.model, cp.k, &cp.ls, cp.trials, seed)?;
            let t = sweep_table(&r.rows, "l", &mut plot, "crossing");
            Output { report: serde_json::to_value(&r)?, table: t, plot, files: Vec::new() }
        }
        Params::Annulus(ap) => {
            let r = est::annulus_sweep(&ap.model, ap.l1, &ap.l2s, ap.trials, seed)?;
            let t = sweep_table(&r.sweep.rows, "gap", &mut plot, "annulus");
            let ratio = match &ap.ratio {
                Some(rs) => Some(est::annulus_radius_ratio(&ap.model, rs.l1, rs.gap, rs.trials, seed)?),
                None => None,
            };
            let report = json!({"sweep": r, "ratio": ratio});
            Output { report, table: t, plot, files: Vec::new() }
        }
        Params::Boxconnect(bp) => {
            let lr = LongRangeParams { beta: bp.beta, s: bp.s, kappa: bp.kappa };
            let r = box_connect_prob(bp.l, Point::new(bp.z[0], bp.z[1]), &lr, bp.trials, seed)?;
            let mut t = Table::new(&["trials", "successes", "p_hat", "ci_lo", "ci_hi", "quadrature", "asymptote"]);
            let e = &r.report;
            t.push(vec![json!(e.trials), json!(e.successes), num(e.estimate), num(e.ci_lo), num(e.ci_hi), num(r.quadrature), num(r.asymptote)]);
            Output { report: serde_json::to_value(&r)?, table: t, plot, files: Vec::new() }
        }
        Params::Hierarchy(hp) => {
            let cfg = FailureCurveConfig { s: hp.s, gamma: hp.gamma, eps: hp.eps, max_depth: hp.max_depth, rule: hp.rule };
            let rows = hierarchy_failure_curve(&hp.ns, &cfg, &hp.betas, hp.trials, seed)?;
            let mut t = Table::new(&["n", "beta", "depth", "trials", "failures", "ci_lo", "ci_hi", "invalid"]);
            for r in &rows {
                t.push(vec![num(r.big_n), num(r.beta), json!(r.depth), json!(r.trials), json!(r.failures), num(r.ci_lo), num(r.ci_hi), json!(r.invalid)]);
                plot.push(pp(&format!("n={}", r.big_n), r.beta, r.failures as f64 / r.trials as f64, Some(r.ci_lo), Some(r.ci_hi)));
            }
            Output { report: json!({ "rows": rows }), table: t, plot, files: Vec::new() }
        }
        Params::Renorm(rp) => {
            let mut t = Table::new(&["k", "trials", "lambda_hat", "lambda_se", "lambda_quadrature", "p_plugin", "p_plugin_lo", "p_plugin_hi", "p_quadrature", "p_direct"]);
            let mut reports = Vec::new();
            for (i, &k) in rp.ks.iter().enumerate() {
                let r = good_box_rate(&rp.model, k, rp.m, rp.trials, ellperc::rng::derive_seed(seed, ellperc::rng::tag("renorm"), i as u64))?;
                t.push(vec![
                    num(k),
                    json!(r.trials),
                    num(r.lambda_hat),
                    num(r.lambda_se),
                    num(r.lambda_quadrature),
                    num(r.p_plugin),
                    num(r.p_plugin_lo),
                    num(r.p_plugin_hi),
                    num(r.p_quadrature),
                    num(r.direct.estimate),
                ]);
                plot.push(pp("p_good", k, r.p_plugin, Some(r.p_plugin_lo), Some(r.p_plugin_hi)));
                reports.push(r);
            }
            Output { report: json!({ "rows": reports }), table: t, plot, files: Vec::new() }
        }
        Params::Glue(gp) => {
            let cfg = est::GlueSweepConfig {
                params: gp.model,
                k: gp.k,
                gamma: gp.gamma,
                eps: gp.eps,
                max_depth: gp.max_depth,
                opts: GlueOptions { refinement: gp.refinement, pad: gp.pad },
            };
            let r = est::glue_sweep(&cfg, &gp.ns, gp.trials, seed)?;
            let mut t = Table::new(&["n", "depth", "trials", "rejected", "hierarchy_failures", "glued", "mean_ratio", "ratio_se", "min_ratio", "count_dominates", "w_event_rate"]);
            for row in &r.rows {
                let min = row.ratios.iter().copied().fold(f64::INFINITY, f64::min);
                t.push(vec![
                    json!(row.n),
                    json!(row.depth),
                    json!(row.trials),
                    json!(row.rejected),
                    json!(row.hierarchy_failures),
                    json!(row.ratios.len()),
                    num(row.mean_ratio),
                    num(row.ratio_se),
                    num(min),
                    json!(row.count_dominates),
                    num(row.w_event_rate),
                ]);
                plot.push(pp("ratio", row.n as f64, row.mean_ratio, Some(row.mean_ratio - 1.96 * row.ratio_se), Some(row.mean_ratio + 1.96 * row.ratio_se)));
            }
            Output { report: serde_json::to_value(&r)?, table: t, plot, files: Vec::new() }
        }
        Params::ChemSweep(cp) => {
            let r = est::chemical_scaling_sweep(&cp.model, &cp.dists, cp.accepted, cp.max_attempts, cp.multiscale, seed)?;
            let slack = cp.band_slack.unwrap_or(0.0);
            let band = (r.band.0 * (1.0 - slack), r.band.1 * (1.0 + slack));
            let t = distance_table(&r, &mut plot);
            let report = json!({ "sweep": r, "band_with_slack": [band.0, band.1] });
            Output { report, table: t, plot, files: Vec::new() }
        }
        Params::DistSweep(dp) => {
            let r = est::internal_scaling_sweep(&dp.model, &dp.dists, dp.accepted, dp.max_attempts, dp.multiscale, dp.refinement, seed)?;
            let mut t = Table::new(&["dist", "accepted", "acceptance", "mean_internal_ratio", "min_internal_ratio", "max_internal_ratio"]);
            for row in &r.rows {
                let m = ellperc::stats::mean(&row.internal_ratio);
                let lo = row.internal_ratio.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = row.internal_ratio.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                t.push(vec![num(row.dist), json!(row.accepted), num(row.acceptance), num(m), num(lo), num(hi)]);
                plot.push(pp("internal_ratio", row.dist, m, Some(lo), Some(hi)));
            }
            Output { report: serde_json::to_value(&r)?, table: t, plot, files: Vec::new() }
        }
        Params::Highway(hp) => {
            let s = est::highway_schedule(hp.l0, hp.alpha, hp.n)?;
            let r = est::enhanced_highway_experiment(&s, hp.u, hp.trials, seed)?;
            let mut t = Table::new(&["n", "l", "a_fail", "a_fail_lo", "a_fail_hi", "c_fail", "mean_crossings", "partial_sum_a_fail"]);
            for lv in &r.levels {
                t.push(vec![
                    json!(lv.n),
                    num(lv.l),
                    num(lv.a_fail.estimate),
                    num(lv.a_fail.ci_lo),
                    num(lv.a_fail.ci_hi),
                    num(lv.c_fail.estimate),
                    num(lv.mean_crossings),
                    num(lv.partial_sum_a_fail),
                ]);
                plot.push(pp("a_fail", lv.n as f64, lv.a_fail.estimate, Some(lv.a_fail.ci_lo), Some(lv.a_fail.ci_hi)));
            }
            Output { report: serde_json::to_value(&r)?, table: t, plot, files: Vec::new() }
        }
        Params::Lowerbound(lp) => {
            let r = est::lower_bound_experiment(&lp.model, lp.n, &lp.rs, lp.trials, seed)?;
            let t = sweep_table(&r.rows, "r", &mut plot, "lower_bound");
            Output { report: serde_json::to_value(&r)?, table: t, plot, files: Vec::new() }
        }
        Params::Corollary(cp) => {
            let r = est::corollary_check(cp.alpha, cp.u, cp.c2, cp.delta, &cp.log10_rs)?;
            let mut t = Table::new(&["log10_r", "n", "log_bound"]);
            for row in &r.rows {
                t.push(vec![num(row.log10_r), json!(row.n), num(row.log_bound)]);
                plot.push(pp("log_bound", row.log10_r, row.log_bound, None, None));
            }
            Output { report: serde_json::to_value(&r)?, table: t, plot, files: Vec::new() }
        }
        Params::CouplingTest(cp) => {
            let r = coupling_equivalence_test(cp, seed)?;
            let mut t = Table::new(&["n_from_segments", "n_from_ellipses", "p_radius", "p_angle", "p_count"]);
            t.push(vec![json!(r.n_from_segments), json!(r.n_from_ellipses), num(r.p_radius), num(r.p_angle), num(r.p_count)]);
            Output { report: serde_json::to_value(&r)?, table: t, plot, files: Vec::new() }
        }
    };
    Ok(out)
}

fn distance_table(r: &est::DistanceSweep, plot: &mut Vec<PlotPoint>) -> Table {
    let mut t = Table::new(&["dist", "attempts", "accepted", "acceptance", "mean_d", "median_ratio", "q10_ratio", "q90_ratio"]);
    for row in &r.rows {
        t.push(vec![
            num(row.dist),
            json!(row.attempts),
            json!(row.accepted),
            num(row.acceptance),
            num(row.mean_d),
            num(row.median_ratio),
            num(row.q10_ratio),
            num(row.q90_ratio),
        ]);
        plot.push(pp("d_over_loglog", row.dist, row.median_ratio, Some(row.q10_ratio), Some(row.q90_ratio)));
    }
    t
}

fn plot_csv(points: &[PlotPoint], exp: Experiment) -> anyhow::Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["experiment", "series", "x", "y", "lo", "hi"])?;
    let name = serde_json::to_value(exp)?.as_str().unwrap_or_default().to_string();
    for p in points {
        let f = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        w.write_record([name.clone(), p.series.clone(), p.x.to_string(), p.y.to_string(), f(p.lo), f(p.hi)])?;
    }
    Ok(w.into_inner()?)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub experiment: Experiment,
    pub seed: u64,
    pub threads: usize,
    pub config_sha256: String,
    pub status: String,
    pub error: Option<String>,
    pub warnings: Vec<String>,
    /// SHA-256 of every data file written.
    pub files: BTreeMap<String, String>,
    pub wall_time_s: f64,
}

fn write_file(dir: &Path, name: &str, bytes: &[u8], files: &mut BTreeMap<String, String>) -> anyhow::Result<()> {
    std::fs::write(dir.join(name), bytes)?;
    files.insert(name.to_string(), hex(&Sha256::digest(bytes)));
    Ok(())
}

/// Runs a resolved config and writes its artifacts. The manifest is written
/// in every case; on failure it records the error and whatever files were
/// completed.
pub fn execute(cfg: &Resolved, params: &Params) -> (Manifest, anyhow::Result<()>) {
    let start = std::time::Instant::now();
    let diag = validate_params(params);
    let mut files = BTreeMap::new();
    let result = (|| -> anyhow::Result<()> {
        std::fs::create_dir_all(&cfg.out)?;
        let pool = rayon::ThreadPoolBuilder::new().num_threads(cfg.threads).build()?;
        let out = pool.install(|| run_experiment(params, cfg.seed))?;
        let mut report = serde_json::to_vec_pretty(&json!({
            "experiment": cfg.experiment,
            "seed": cfg.seed,
            "params": cfg.params,
            "warnings": diag.warnings,
            "result": out.report,
        }))?;
        report.push(b'\n');
        write_file(&cfg.out, "report.json", &report, &mut files)?;
        match cfg.format {
            Format::Csv => write_file(&cfg.out, "table.csv", &out.table.to_csv()?, &mut files)?,
            Format::Json => write_file(&cfg.out, "table.json", &out.table.to_json(), &mut files)?,
        }
        if cfg.plot_data {
            write_file(&cfg.out, "plot_data.csv", &plot_csv(&out.plot, cfg.experiment)?, &mut files)?;
        }
        for (name, bytes) in &out.files {
            write_file(&cfg.out, name, bytes, &mut files)?;
        }
        Ok(())
    })();
    let manifest = Manifest {
        tool: "ellperc".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        experiment: cfg.experiment,
        seed: cfg.seed,
        threads: cfg.threads,
        config_sha256: cfg.config_hash(),
        status: if result.is_ok() { "ok" } else { "failed" }.into(),
        error: result.as_ref().err().map(|e| format!("{e:#}")),
        warnings: diag.warnings,
        files,
        wall_time_s: start.elapsed().as_secs_f64(),
    };
    let written = std::fs::create_dir_all(&cfg.out)
        .map_err(anyhow::Error::from)
        .and_then(|_| {
            let mut bytes = serde_json::to_vec_pretty(&manifest)?;
            bytes.push(b'\n');
            Ok(std::fs::write(cfg.out.join("manifest.json"), bytes)?)
        });
    let result = result.and(written);
    (manifest, result)
}
