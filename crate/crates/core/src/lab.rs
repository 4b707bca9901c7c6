//! Experiment runner: configuration, orchestration of the E1..E9 suites,
//! result tables and their CSV/JSON emission.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use num_rational::Ratio;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::gasket::{collar_measure, GasketMesh, LatticePoint, Rational};
use crate::montecarlo::{
    annealed_suite, exponential_formula_check, path_profile_functional, simulate_walk, AnnealedRun, TRANSFORMS,
};
use crate::operators::{laplacian_reflected, verlog_bound, EigenDecomposition, KernelPair, SubordinatorSpec, D_W};
use crate::potentials::{cell_point, check_w1, check_w2, check_w3, PoissonCloud, ProfileSpec, RadialShape};
use crate::spectra::{four_transform_suite, Perturbation, SuiteContext};

pub const SCHEMA_VERSION: u32 = 1;
pub const SEED_ENV: &str = "GASKET_IDS_SEED";
/// Largest `M + K + n` for which dense eigensolves are attempted.
pub const MAX_DENSE_DEPTH: u32 = 8;

#[derive(Debug, Error)]
pub enum LabError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("stage {stage} failed: {message}")]
    Stage { stage: String, message: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn stage<E: fmt::Display>(name: &str) -> impl FnOnce(E) -> LabError + '_ {
    move |e| LabError::Stage {
        stage: name.to_string(),
        message: e.to_string(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ExperimentId {
    #[serde(rename = "E1-free-ND")]
    FreeNd,
    #[serde(rename = "E2-poisson-convergence")]
    PoissonConvergence,
    #[serde(rename = "E3-profile-checks")]
    ProfileChecks,
    #[serde(rename = "E4-obstacles")]
    Obstacles,
    #[serde(rename = "E5-exponential-formula")]
    ExponentialFormula,
    #[serde(rename = "E6-collar")]
    Collar,
    #[serde(rename = "E7-quotient-identities")]
    QuotientIdentities,
    #[serde(rename = "E8-verlog")]
    Verlog,
    #[serde(rename = "E9-heat-trace-slope")]
    HeatTraceSlope,
}

impl ExperimentId {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentId::FreeNd => "E1-free-ND",
            ExperimentId::PoissonConvergence => "E2-poisson-convergence",
            ExperimentId::ProfileChecks => "E3-profile-checks",
            ExperimentId::Obstacles => "E4-obstacles",
            ExperimentId::ExponentialFormula => "E5-exponential-formula",
            ExperimentId::Collar => "E6-collar",
            ExperimentId::QuotientIdentities => "E7-quotient-identities",
            ExperimentId::Verlog => "E8-verlog",
            ExperimentId::HeatTraceSlope => "E9-heat-trace-slope",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeshParams {
    #[serde(rename = "M")]
    pub levels: Vec<u32>,
    pub n: u32,
    #[serde(rename = "K", default = "default_shells")]
    pub shells: u32,
}

/// Experiment specific knobs; unused ones are ignored.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Options {
    /// Clouds for E5.
    pub trials: Option<u64>,
    /// Height `c` of `f = c 1_A` in E5.
    pub constant: Option<f64>,
    /// Radii for E6, as rationals like `"1/3"`.
    pub collar_r: Option<Vec<String>>,
    /// `[t_min, t_max]` of the E9 fit.
    pub fit_window: Option<[f64; 2]>,
    pub fit_points: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentId,
    #[serde(default)]
    pub seed: u64,
    /// Output directory; not part of the config hash.
    #[serde(default, skip_serializing)]
    pub output: Option<PathBuf>,
    pub mesh: MeshParams,
    #[serde(default = "default_ts")]
    pub t: Vec<f64>,
    #[serde(default = "default_subordinator")]
    pub subordinator: SubordinatorSpec,
    #[serde(default)]
    pub profile: Option<ProfileSpec>,
    #[serde(default = "default_intensity")]
    pub intensity: f64,
    #[serde(default = "default_radius")]
    pub obstacle_radius: f64,
    #[serde(default = "default_clouds")]
    pub clouds: u64,
    #[serde(default)]
    pub options: Options,
}

fn default_shells() -> u32 {
    2
}
fn default_ts() -> Vec<f64> {
    vec![0.25, 1.0, 4.0]
}
fn default_subordinator() -> SubordinatorSpec {
    SubordinatorSpec::Identity
}
fn default_intensity() -> f64 {
    1.0
}
fn default_radius() -> f64 {
    0.5
}
fn default_clouds() -> u64 {
    200
}

fn parse_rational(s: &str) -> Result<Rational, LabError> {
    let bad = || LabError::Config(format!("cannot read {s:?} as a rational"));
    let (a, b) = match s.split_once('/') {
        Some((a, b)) => (a.trim(), b.trim()),
        None => (s.trim(), "1"),
    };
    let a: i128 = a.parse().map_err(|_| bad())?;
    let b: i128 = b.parse().map_err(|_| bad())?;
    if b == 0 {
        return Err(bad());
    }
    Ok(Ratio::new(a, b))
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, LabError> {
        toml::from_str(text).map_err(|e| LabError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, LabError> {
        let text = fs::read_to_string(path).map_err(|source| LabError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text)
    }

    /// Replaces the master seed with `GASKET_IDS_SEED` when set.
    pub fn apply_env_seed(&mut self) -> Result<(), LabError> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| LabError::Config(format!("{SEED_ENV}={v:?} is not a u64")))?;
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("file configs serialize");
        hex::encode(&Sha256::digest(canonical.as_bytes())[..8])
    }

    pub fn validate(&self) -> Result<(), LabError> {
        let err = |m: String| Err(LabError::Config(m));
        let MeshParams { levels, n, shells } = &self.mesh;
        if levels.is_empty() {
            return err("mesh.M is empty".into());
        }
        if levels.windows(2).any(|w| w[1] <= w[0]) {
            return err("mesh.M must be strictly increasing".into());
        }
        let top = *levels.last().expect("nonempty");
        if *shells == 0 {
            return err("mesh.K must be at least 1".into());
        }
        if self.t.is_empty() || self.t.iter().any(|t| !(t.is_finite() && *t > 0.0)) {
            return err("t must be a nonempty list of positive times".into());
        }
        if !(self.intensity.is_finite() && self.intensity >= 0.0) {
            return err(format!("intensity {} must be finite and nonnegative", self.intensity));
        }
        self.subordinator.validate().map_err(|e| LabError::Config(e.to_string()))?;
        if let Some(p) = &self.profile {
            p.validate().map_err(|e| LabError::Config(e.to_string()))?;
        }
        use ExperimentId::*;
        let dense = matches!(self.experiment, FreeNd | PoissonConvergence | Obstacles | QuotientIdentities);
        if dense && top + shells + n > MAX_DENSE_DEPTH {
            return err(format!("M + K + n = {} exceeds {MAX_DENSE_DEPTH}", top + shells + n));
        }
        if dense && levels[0] == 0 {
            return err("suite levels start at M = 1".into());
        }
        match self.experiment {
            PoissonConvergence | Obstacles if self.clouds < 30 => return err("clouds must be at least 30".into()),
            PoissonConvergence | ProfileChecks if self.profile.is_none() => {
                return err(format!("{} needs a profile", self.experiment.name()))
            }
            Obstacles if !(self.obstacle_radius > 0.0) => return err("obstacle_radius must be positive".into()),
            QuotientIdentities if *shells < 2 => return err("E7 needs K >= 2".into()),
            ExponentialFormula | ProfileChecks if top + n > crate::gasket::DEFAULT_MESH_CAP => {
                return err("window mesh too large".into())
            }
            HeatTraceSlope => {
                if let Some([a, b]) = self.options.fit_window {
                    if !(a > 0.0 && b > a) {
                        return err("fit_window must satisfy 0 < t_min < t_max".into());
                    }
                }
                if levels[0] + 1 + n > crate::gasket::DEFAULT_MESH_CAP {
                    return err("heat-trace mesh too large".into());
                }
            }
            _ => {}
        }
        if let Some(rs) = &self.options.collar_r {
            for r in rs {
                let r = parse_rational(r)?;
                if r <= Ratio::from_integer(0) {
                    return err(format!("collar radius {r} must be positive"));
                }
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// tables

#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Empty,
    Str(String),
    Int(i64),
    Float(f64),
    Bool(bool),
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Cell::Empty => Ok(()),
            Cell::Str(s) => f.write_str(s),
            Cell::Int(v) => write!(f, "{v}"),
            // shortest round-trip digits; exponent form for tiny and huge values
            Cell::Float(v) if *v == 0.0 => f.write_str("0.0"),
            Cell::Float(v) => write!(f, "{v:?}"),
            Cell::Bool(v) => write!(f, "{v}"),
        }
    }
}

impl Cell {
    fn to_json(&self) -> Value {
        match self {
            Cell::Empty => Value::Null,
            Cell::Str(s) => json!(s),
            Cell::Int(v) => json!(v),
            Cell::Float(v) if v.is_finite() => json!(v),
            Cell::Float(v) => json!(v.to_string()),
            Cell::Bool(v) => json!(v),
        }
    }
}

impl From<&str> for Cell {
    fn from(s: &str) -> Self {
        Cell::Str(s.to_string())
    }
}
impl From<String> for Cell {
    fn from(s: String) -> Self {
        Cell::Str(s)
    }
}
impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::Float(v)
    }
}
impl From<bool> for Cell {
    fn from(v: bool) -> Self {
        Cell::Bool(v)
    }
}
impl From<u32> for Cell {
    fn from(v: u32) -> Self {
        Cell::Int(v as i64)
    }
}
impl From<u64> for Cell {
    fn from(v: u64) -> Self {
        Cell::Int(v as i64)
    }
}
impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell::Int(v as i64)
    }
}
impl<T: Into<Cell>> From<Option<T>> for Cell {
    fn from(v: Option<T>) -> Self {
        v.map_or(Cell::Empty, Into::into)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub name: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
}

impl Table {
    pub fn new(name: &str, header: &[&str]) -> Self {
        Self {
            name: name.to_string(),
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<Cell>) {
        assert_eq!(row.len(), self.header.len(), "row width for table {}", self.name);
        self.rows.push(row);
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
        w.write_record(&self.header).expect("in-memory write");
        for row in &self.rows {
            w.write_record(row.iter().map(|c| c.to_string())).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf8 fields")
    }

    fn to_json(&self) -> Value {
        json!({
            "header": self.header,
            "rows": self.rows.iter().map(|r| r.iter().map(Cell::to_json).collect::<Vec<_>>()).collect::<Vec<_>>(),
        })
    }
}

const SPECTRA_HEADER: [&str; 11] = ["config_hash", "seed", "cloud", "M", "n", "K", "bc", "star_flag", "t", "value", "eigencount"];
const ESTIMATE_HEADER: [&str; 9] = ["config_hash", "experiment", "M", "t", "estimator", "mean", "stderr", "trials", "seed"];
const SUMMARY_HEADER: [&str; 9] = ["config_hash", "seed", "experiment", "key", "M", "t", "value", "stderr", "verdict"];

/// Raw tables, a summary table and stage timings for one run.
#[derive(Debug, Clone)]
pub struct ResultTable {
    pub config_hash: String,
    pub seed: u64,
    pub experiment: ExperimentId,
    pub config: Value,
    pub tables: Vec<Table>,
    /// Wall-clock milliseconds per stage. Not part of the deterministic output.
    pub timings: Vec<(String, f64)>,
}

/// Optional fields of a summary row.
#[derive(Default)]
pub struct SummaryRow {
    pub level: Option<u32>,
    pub t: Option<f64>,
    pub value: Option<f64>,
    pub stderr: Option<f64>,
    pub verdict: Option<bool>,
}

impl ResultTable {
    pub fn new(cfg: &ExperimentConfig) -> Self {
        Self {
            config_hash: cfg.hash(),
            seed: cfg.seed,
            experiment: cfg.experiment,
            config: serde_json::to_value(cfg).expect("file configs serialize"),
            tables: vec![Table::new("summary", &SUMMARY_HEADER)],
            timings: Vec::new(),
        }
    }

    pub fn table(&self, name: &str) -> Option<&Table> {
        self.tables.iter().find(|t| t.name == name)
    }

    fn table_mut(&mut self, name: &str, header: &[&str]) -> &mut Table {
        if let Some(k) = self.tables.iter().position(|t| t.name == name) {
            return &mut self.tables[k];
        }
        self.tables.push(Table::new(name, header));
        self.tables.last_mut().expect("just pushed")
    }

    pub fn summary(&mut self, key: &str, row: SummaryRow) {
        let (hash, seed, exp) = (self.config_hash.clone(), self.seed, self.experiment.name());
        self.table_mut("summary", &SUMMARY_HEADER).push(vec![
            hash.into(),
            seed.into(),
            exp.into(),
            key.into(),
            row.level.into(),
            row.t.into(),
            row.value.into(),
            row.stderr.into(),
            row.verdict.into(),
        ]);
    }

    /// Summary verdicts with key `key`.
    pub fn verdicts(&self, key: &str) -> Vec<bool> {
        let t = self.table("summary").expect("summary table");
        let (k, v) = (t.column("key").unwrap(), t.column("verdict").unwrap());
        t.rows
            .iter()
            .filter(|r| r[k] == Cell::Str(key.to_string()))
            .filter_map(|r| match r[v] {
                Cell::Bool(b) => Some(b),
                _ => None,
            })
            .collect()
    }

    pub fn to_json(&self) -> String {
        let tables: serde_json::Map<String, Value> = self.tables.iter().map(|t| (t.name.clone(), t.to_json())).collect();
        let doc = json!({
            "schema_version": SCHEMA_VERSION,
            "config_hash": self.config_hash,
            "seed": self.seed,
            "experiment": self.experiment.name(),
            "config": self.config,
            "tables": tables,
        });
        let mut s = serde_json::to_string_pretty(&doc).expect("json values serialize");
        s.push('\n');
        s
    }

    pub fn timings_csv(&self) -> String {
        let mut t = Table::new("timings", &["config_hash", "stage", "runtime_ms"]);
        for (stage, ms) in &self.timings {
            t.push(vec![self.config_hash.clone().into(), stage.clone().into(), (*ms).into()]);
        }
        t.to_csv()
    }
}

/// Writes `<table>.csv` for every table, `result.json`, and `timings.csv`.
/// Everything except `timings.csv` is a pure function of the config.
pub fn emit(table: &ResultTable, dir: &Path) -> Result<Vec<PathBuf>, LabError> {
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| LabError::Io { path, source }
    };
    fs::create_dir_all(dir).map_err(io(dir))?;
    let mut written = Vec::new();
    let mut write = |name: String, body: String| -> Result<(), LabError> {
        let path = dir.join(name);
        fs::write(&path, body).map_err(io(&path))?;
        written.push(path);
        Ok(())
    };
    for t in &table.tables {
        write(format!("{}.csv", t.name), t.to_csv())?;
    }
    write("result.json".into(), table.to_json())?;
    write("timings.csv".into(), table.timings_csv())?;
    Ok(written)
}

// ---------------------------------------------------------------------------
// experiments

pub fn run(cfg: &ExperimentConfig) -> Result<ResultTable, LabError> {
    let mut out = ResultTable::new(cfg);
    run_into(cfg, &mut out)?;
    Ok(out)
}

/// Runs the experiment, leaving partial results in `out` on failure.
pub fn run_into(cfg: &ExperimentConfig, out: &mut ResultTable) -> Result<(), LabError> {
    cfg.validate()?;
    use ExperimentId::*;
    match cfg.experiment {
        FreeNd => free_nd(cfg, out),
        PoissonConvergence => {
            let profile = cfg.profile.clone().expect("validated");
            poisson_suite(cfg, out, &Perturbation::Potential(profile))
        }
        ProfileChecks => profile_checks(cfg, out),
        Obstacles => poisson_suite(cfg, out, &Perturbation::Obstacles { radius: cfg.obstacle_radius }),
        ExponentialFormula => exponential_formula(cfg, out),
        Collar => collar(cfg, out),
        QuotientIdentities => quotient_identities(cfg, out),
        Verlog => verlog(cfg, out),
        HeatTraceSlope => heat_trace_slope(cfg, out),
    }
}

fn timed<T>(out: &mut ResultTable, name: &str, f: impl FnOnce() -> Result<T, LabError>) -> Result<T, LabError> {
    let start = Instant::now();
    let r = f();
    out.timings.push((name.to_string(), start.elapsed().as_secs_f64() * 1e3));
    r
}

fn contexts(cfg: &ExperimentConfig) -> Result<Vec<SuiteContext>, LabError> {
    let MeshParams { levels, n, shells } = &cfg.mesh;
    levels
        .par_iter()
        .map(|&m| SuiteContext::build(m, *n, *shells, &cfg.subordinator).map_err(stage("operators")))
        .collect()
}

fn strictly_decreasing(xs: &[f64]) -> bool {
    xs.windows(2).all(|w| w[1] < w[0])
}

fn push_suite_rows(out: &mut ResultTable, cfg: &ExperimentConfig, run: &AnnealedRun) {
    let (hash, seed) = (out.config_hash.clone(), out.seed);
    let MeshParams { n, shells, .. } = cfg.mesh;
    let table = out.table_mut("spectra", &SPECTRA_HEADER);
    for row in &run.results {
        for r in row {
            let vals = [(&r.l_d, "D", false), (&r.l_n, "N", false), (&r.l_dstar, "D", true), (&r.l_nstar, "N", true)];
            for (ti, &t) in r.t.iter().enumerate() {
                for (w, (v, bc, star)) in vals.iter().enumerate() {
                    table.push(vec![
                        hash.clone().into(),
                        seed.into(),
                        r.seed.into(),
                        r.level.into(),
                        n.into(),
                        shells.into(),
                        (*bc).into(),
                        (*star).into(),
                        t.into(),
                        v[ti].into(),
                        r.dims[w].into(),
                    ]);
                }
            }
        }
    }
}

fn free_nd(cfg: &ExperimentConfig, out: &mut ResultTable) -> Result<(), LabError> {
    let ctxs = timed(out, "operators", || contexts(cfg))?;
    let zero = Perturbation::Potential(ProfileSpec::Radial {
        range: 1.0,
        profile: RadialShape::Constant { height: 0.0 },
    });
    let results = timed(out, "spectra", || {
        ctxs.par_iter()
            .map(|ctx| {
                let empty = PoissonCloud::empty(0.0, ctx.level, cfg.mesh.n);
                four_transform_suite(ctx, &empty, &zero, &cfg.t).map_err(stage("spectra"))
            })
            .collect::<Result<Vec<_>, _>>()
    })?;
    let run = AnnealedRun {
        levels: cfg.mesh.levels.clone(),
        ts: cfg.t.clone(),
        intensity: 0.0,
        seed: cfg.seed,
        results: vec![results],
    };
    push_suite_rows(out, cfg, &run);
    nd_summary(out, &run);
    Ok(())
}

fn nd_summary(out: &mut ResultTable, run: &AnnealedRun) {
    let (gap, gap_star) = run.min_nd_gap();
    out.summary(
        "min_gap_N_minus_D",
        SummaryRow {
            value: Some(gap),
            verdict: Some(gap >= -1e-10),
            ..Default::default()
        },
    );
    out.summary(
        "min_gap_Nstar_minus_Dstar",
        SummaryRow {
            value: Some(gap_star),
            verdict: Some(gap_star >= -1e-10),
            ..Default::default()
        },
    );
    for (ti, &t) in run.ts.iter().enumerate() {
        let means = run.mean_abs_nd(ti);
        for (k, &m) in run.levels.iter().enumerate() {
            out.summary(
                "mean_abs_N_minus_D",
                SummaryRow {
                    level: Some(m),
                    t: Some(t),
                    value: Some(means[k]),
                    ..Default::default()
                },
            );
        }
        out.summary(
            "abs_N_minus_D_decreasing",
            SummaryRow {
                t: Some(t),
                verdict: Some(strictly_decreasing(&means)),
                ..Default::default()
            },
        );
    }
}

fn poisson_suite(cfg: &ExperimentConfig, out: &mut ResultTable, perturbation: &Perturbation) -> Result<(), LabError> {
    let ctxs = timed(out, "operators", || contexts(cfg))?;
    let run = timed(out, "clouds", || {
        annealed_suite(&ctxs, cfg.intensity, perturbation, &cfg.t, cfg.clouds, cfg.seed).map_err(stage("clouds"))
    })?;
    push_suite_rows(out, cfg, &run);
    let (hash, exp) = (out.config_hash.clone(), cfg.experiment.name());
    let est = out.table_mut("estimates", &ESTIMATE_HEADER);
    for e in run.estimates() {
        est.push(vec![
            hash.clone().into(),
            exp.into(),
            e.level.into(),
            e.t.into(),
            e.estimator.into(),
            e.mean.into(),
            e.stderr.into(),
            e.trials.into(),
            e.seed.into(),
        ]);
    }
    nd_summary(out, &run);
    let nstar = TRANSFORMS.iter().position(|&s| s == "L_Nstar").expect("known name");
    for (ti, &t) in cfg.t.iter().enumerate() {
        for (k, (mean, se)) in run.paired_steps(nstar, ti).into_iter().enumerate() {
            out.summary(
                "step_E_L_Nstar",
                SummaryRow {
                    level: Some(run.levels[k + 1]),
                    t: Some(t),
                    value: Some(mean),
                    stderr: Some(se),
                    verdict: Some(mean <= 2.0 * se),
                },
            );
        }
        out.summary(
            "E_L_Nstar_nonincreasing",
            SummaryRow {
                t: Some(t),
                verdict: Some(run.nonincreasing(nstar, ti, 2.0)),
                ..Default::default()
            },
        );
        let vars: Vec<f64> = (0..run.levels.len())
            .map(|k| run.samples(0, k, ti).into_iter().collect::<crate::montecarlo::MeanVar>().variance())
            .collect();
        for (k, &m) in run.levels.iter().enumerate() {
            out.summary(
                "var_L_D",
                SummaryRow {
                    level: Some(m),
                    t: Some(t),
                    value: Some(vars[k]),
                    ..Default::default()
                },
            );
        }
        for (k, ratio) in run.variance_ratios(0, ti).into_iter().enumerate() {
            out.summary(
                "var_ratio_L_D",
                SummaryRow {
                    level: Some(run.levels[k + 1]),
                    t: Some(t),
                    value: Some(ratio),
                    verdict: Some(ratio < 0.8),
                    ..Default::default()
                },
            );
        }
    }
    Ok(())
}

fn profile_checks(cfg: &ExperimentConfig, out: &mut ResultTable) -> Result<(), LabError> {
    let profile = cfg.profile.as_ref().expect("validated");
    let MeshParams { levels, n, shells } = &cfg.mesh;
    let top = *levels.last().expect("validated");
    let w1 = timed(out, "w1", || {
        let mesh = GasketMesh::build(levels[0], *n).map_err(stage("mesh"))?;
        Ok(check_w1(profile, &mesh))
    })?;
    out.summary(
        "w1_max_violation",
        SummaryRow {
            level: Some(levels[0]),
            value: Some(w1),
            verdict: Some(w1 <= 1e-12),
            ..Default::default()
        },
    );
    let w2 = timed(out, "w2", || {
        let window = GasketMesh::build(top, *n).map_err(stage("mesh"))?;
        check_w2(profile, 4 * top, &window).map_err(stage("w2"))
    })?;
    for (k, (term, sum)) in w2.terms.iter().zip(&w2.partial_sums).enumerate() {
        out.summary(
            "w2_term",
            SummaryRow {
                level: Some(k as u32 + 1),
                value: Some(*term),
                stderr: Some(*sum),
                ..Default::default()
            },
        );
    }
    out.summary(
        "w2_convergent_trend",
        SummaryRow {
            value: w2.decay_ratio,
            verdict: Some(w2.convergent_trend),
            ..Default::default()
        },
    );
    let w3 = timed(out, "w3", || check_w3(profile, levels, *n, *shells).map_err(stage("w3")))?;
    out.summary(
        "w3_pairs_checked",
        SummaryRow {
            value: Some(w3.pairs_checked as f64),
            verdict: Some(w3.holds),
            ..Default::default()
        },
    );
    let hash = out.config_hash.clone();
    let wt = out.table_mut("w3_witnesses", &["config_hash", "M", "x", "y", "lhs", "rhs"]);
    for w in &w3.witnesses {
        wt.push(vec![
            hash.clone().into(),
            w.level.into(),
            format!("{}/{}/{}", w.x.i, w.x.j, w.x.n).into(),
            format!("{}/{}/{}", w.y.i, w.y.j, w.y.n).into(),
            w.lhs.into(),
            w.rhs.into(),
        ]);
    }
    Ok(())
}

fn exponential_formula(cfg: &ExperimentConfig, out: &mut ResultTable) -> Result<(), LabError> {
    let MeshParams { levels, n, .. } = &cfg.mesh;
    let window = GasketMesh::build(*levels.last().expect("validated"), *n).map_err(stage("mesh"))?;
    let trials = cfg.options.trials.unwrap_or(10_000);
    let c = cfg.options.constant.unwrap_or(1.0);
    // f = c on the cells of G_0
    let reach = 1u64 << (n + 1);
    let f = move |y: &LatticePoint| if y.i + y.j < reach { c } else { 0.0 };
    let check = timed(out, "constant", || {
        exponential_formula_check(&window, cfg.intensity, &f, trials, cfg.seed).map_err(stage("clouds"))
    })?;
    let closed = (-cfg.intensity * (-(-c).exp_m1())).exp();
    let mut rows = vec![("constant_on_G0", check, Some(closed))];
    if let Some(profile) = &cfg.profile {
        let t = cfg.t[0];
        let origin = window.corner_indices()[0];
        let path = simulate_walk(&window, origin, t, cfg.seed);
        let g = path_profile_functional(&path, &window, profile, t);
        // cloud points are cell points, so tabulate once
        let table: std::collections::HashMap<LatticePoint, f64> =
            window.cells().iter().map(|&cell| (cell_point(cell, *n), g(&cell_point(cell, *n)))).collect();
        let lookup = move |y: &LatticePoint| table.get(y).copied().unwrap_or(0.0);
        let path_check = timed(out, "path", || {
            exponential_formula_check(&window, cfg.intensity, &lookup, trials, cfg.seed ^ 1).map_err(stage("clouds"))
        })?;
        rows.push(("walk_path_profile", path_check, None));
    }
    let (hash, exp) = (out.config_hash.clone(), cfg.experiment.name());
    let top = *levels.last().expect("validated");
    for (name, check, closed_form) in rows {
        let z = check.z_score();
        out.table_mut("estimates", &ESTIMATE_HEADER).push(vec![
            hash.clone().into(),
            exp.into(),
            top.into(),
            cfg.t[0].into(),
            name.into(),
            check.mean.into(),
            check.stderr.into(),
            check.clouds.into(),
            cfg.seed.into(),
        ]);
        out.summary(
            &format!("{name}_closed_form"),
            SummaryRow {
                value: Some(closed_form.unwrap_or(check.closed_form)),
                stderr: Some(z),
                verdict: Some(z.abs() <= 4.0),
                ..Default::default()
            },
        );
    }
    Ok(())
}

fn collar(cfg: &ExperimentConfig, out: &mut ResultTable) -> Result<(), LabError> {
    let radii: Vec<String> = cfg
        .options
        .collar_r
        .clone()
        .unwrap_or_else(|| vec!["1".into(), "1/2".into(), "1/3".into()]);
    let hash = out.config_hash.clone();
    let mut rows = Vec::new();
    for &m in &cfg.mesh.levels {
        for r in &radii {
            let rr = parse_rational(r)?;
            let v = collar_measure(m, rr).map_err(stage("collar"))?;
            let dyadic = (*rr.denom() & (*rr.denom() - 1)) == 0;
            rows.push((m, rr, v, dyadic));
        }
    }
    let t = out.table_mut("collar", &["config_hash", "M", "r", "value", "value_f64", "dyadic"]);
    for (m, r, v, dyadic) in &rows {
        t.push(vec![
            hash.clone().into(),
            (*m).into(),
            r.to_string().into(),
            v.to_string().into(),
            (*v.numer() as f64 / *v.denom() as f64).into(),
            (*dyadic).into(),
        ]);
    }
    for (m, r, v, _) in rows {
        let expected = match (m, r == Ratio::from_integer(1)) {
            (1, true) => Some(2),
            (2, true) => Some(4),
            _ => None,
        };
        if let Some(e) = expected {
            out.summary(
                "collar_exact",
                SummaryRow {
                    level: Some(m),
                    value: Some(*v.numer() as f64 / *v.denom() as f64),
                    verdict: Some(v == Ratio::from_integer(e)),
                    ..Default::default()
                },
            );
        }
    }
    Ok(())
}

fn quotient_identities(cfg: &ExperimentConfig, out: &mut ResultTable) -> Result<(), LabError> {
    let MeshParams { levels, n, shells } = &cfg.mesh;
    let reports = timed(out, "kernels", || {
        levels
            .par_iter()
            .map(|&m| {
                let pair = KernelPair::build(m, *n, *shells).map_err(stage("operators"))?;
                Ok(cfg
                    .t
                    .iter()
                    .map(|&t| (pair.report(&cfg.subordinator, t), pair.fiber_sum_residual(&cfg.subordinator, t)))
                    .collect::<Vec<_>>())
            })
            .collect::<Result<Vec<_>, LabError>>()
    })?;
    let hash = out.config_hash.clone();
    let table = out.table_mut(
        "kernels",
        &["config_hash", "M", "n", "K", "t", "c_tail", "diag_gap", "rotation_residual", "fiber_sum_residual"],
    );
    for per_m in &reports {
        for (r, fs) in per_m {
            table.push(vec![
                hash.clone().into(),
                r.level.into(),
                r.refinement.into(),
                r.shells.into(),
                r.t.into(),
                r.c_tail.into(),
                r.diag_gap.into(),
                r.rotation_residual.into(),
                (*fs).into(),
            ]);
        }
    }
    for (ti, &t) in cfg.t.iter().enumerate() {
        let c: Vec<f64> = reports.iter().map(|r| r[ti].0.c_tail).collect();
        let d: Vec<f64> = reports.iter().map(|r| r[ti].0.diag_gap).collect();
        let worst = reports
            .iter()
            .map(|r| r[ti].0.rotation_residual.max(r[ti].1))
            .fold(0.0f64, f64::max);
        for (key, v) in [("c_tail_decreasing", &c), ("diag_gap_decreasing", &d)] {
            out.summary(
                key,
                SummaryRow {
                    t: Some(t),
                    verdict: Some(strictly_decreasing(v)),
                    ..Default::default()
                },
            );
        }
        out.summary(
            "quotient_residual",
            SummaryRow {
                t: Some(t),
                value: Some(worst),
                verdict: Some(worst < 1e-10),
                ..Default::default()
            },
        );
    }
    Ok(())
}

fn verlog(cfg: &ExperimentConfig, out: &mut ResultTable) -> Result<(), LabError> {
    for &t in &cfg.t {
        let v = verlog_bound(&cfg.subordinator, t).map_err(stage("verlog"))?;
        // int_0^1 l^{gamma - 1} dl = 1/gamma for the stable family
        let closed = match &cfg.subordinator {
            SubordinatorSpec::Stable { alpha } => Some(t * D_W / alpha + (-1f64).exp()),
            SubordinatorSpec::Identity => Some(t + (-1f64).exp()),
            _ => None,
        };
        out.summary(
            "verlog_bound",
            SummaryRow {
                t: Some(t),
                value: Some(v),
                stderr: closed,
                verdict: closed.map(|c| (c - v).abs() <= 1e-6),
                ..Default::default()
            },
        );
    }
    Ok(())
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let n = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

/// Log-spaced times and `3^-M sum_k exp(-t phi(lambda_k))` for the free
/// Neumann generator on `G_M`.
pub fn free_heat_trace(
    level: u32,
    refinement: u32,
    spec: &SubordinatorSpec,
    window: [f64; 2],
    points: usize,
) -> Result<(Vec<f64>, Vec<f64>), LabError> {
    let gen = laplacian_reflected(level, refinement, 1).map_err(stage("operators"))?;
    let decomp = EigenDecomposition::of(&gen).map_err(stage("eigen"))?;
    let phis: Vec<f64> = decomp.values.iter().map(|&l| spec.phi(l)).collect();
    let (a, b) = (window[0].ln(), window[1].ln());
    let ts: Vec<f64> = (0..points)
        .map(|k| (a + (b - a) * k as f64 / (points - 1) as f64).exp())
        .collect();
    let w = 3f64.powi(-(level as i32));
    let traces = ts.iter().map(|&t| w * phis.iter().map(|p| (-t * p).exp()).sum::<f64>()).collect();
    Ok((ts, traces))
}

fn heat_trace_slope(cfg: &ExperimentConfig, out: &mut ResultTable) -> Result<(), LabError> {
    let m = cfg.mesh.levels[0];
    let n = cfg.mesh.n;
    let window = cfg.options.fit_window.unwrap_or([1e-3, 1e-1]);
    let points = cfg.options.fit_points.unwrap_or(41).max(2);
    let specs = [("identity", SubordinatorSpec::Identity), ("configured", cfg.subordinator.clone())];
    let hash = out.config_hash.clone();
    for (name, spec) in specs {
        let (ts, traces) = timed(out, name, || free_heat_trace(m, n, &spec, window, points))?;
        let table = out.table_mut("heat_trace", &["config_hash", "M", "n", "subordinator", "t", "trace"]);
        for (t, tr) in ts.iter().zip(&traces) {
            table.push(vec![hash.clone().into(), m.into(), n.into(), name.into(), (*t).into(), (*tr).into()]);
        }
        let slope = loglog_slope(&ts, &traces);
        // -d_s/2 scaled by 1/gamma
        let gamma = match &spec {
            SubordinatorSpec::Identity => Some(1.0),
            SubordinatorSpec::Stable { alpha } => Some(alpha / D_W),
            _ => None,
        };
        let target = gamma.map(|g| -crate::operators::D_S_HALF / g);
        let tol = if gamma == Some(1.0) { 0.05 } else { 0.08 };
        out.summary(
            &format!("heat_trace_slope_{name}"),
            SummaryRow {
                level: Some(m),
                value: Some(slope),
                stderr: target,
                verdict: target.map(|tg| (slope - tg).abs() <= tol),
                ..Default::default()
            },
        );
    }
    Ok(())
}
