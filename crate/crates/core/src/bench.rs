//! Experiment driver: builds workloads, runs query batches through both
//! indexes, checks answers against the oracles and reports mean I/O.

use std::collections::BTreeMap;
use std::io::Write;
use std::time::Instant;

use serde::Serialize;

use crate::costmodel::{cost_c, fit_cost_params, CostInputs, CostParams};
use crate::error::{Error, Result};
use crate::index::{IndexConfig, IndexKind, MovingIndex};
use crate::keys::{assign_sequence_values, SequenceValueMap};
use crate::motion::MovingObject;
use crate::policy::PolicyStore;
use crate::query::{
    baseline_knn, baseline_range, knn_equivalent, oracle_knn, oracle_range, pknn, prq, FriendLists, PknnRequest,
    PrqOptions, PrqRequest, Triangular,
};
use crate::workload::{gen_knn_queries, gen_objects, gen_policies, gen_range_queries, Churn, Distribution, NetworkScript, WorkloadConfig};
use crate::zcurve::GridConfig;
use crate::UserId;

pub const DEFAULT_SV0: f64 = 2.0;
pub const DEFAULT_DELTA: f64 = 2.0;

/// Tolerance for kNN distance comparisons against the oracle.
pub const KNN_TOL: f64 = 1e-9;

/// A generated population with both indexes built over it.
#[derive(Debug, Clone)]
pub struct Instance {
    pub cfg: WorkloadConfig,
    /// Current report of every user, indexed by uid.
    pub objects: Vec<MovingObject>,
    pub users: Vec<UserId>,
    pub policies: PolicyStore,
    pub sv: SequenceValueMap,
    pub peb: MovingIndex,
    pub bx: MovingIndex,
    pub friends: FriendLists,
    pub now: f64,
    /// Seconds spent on compatibility scoring and sequence assignment.
    pub prep_secs: f64,
    script: Option<NetworkScript>,
}

pub fn index_config_for(cfg: &WorkloadConfig) -> IndexConfig {
    let d = IndexConfig::default();
    IndexConfig { grid: GridConfig { side: cfg.side, ..d.grid }, ..d }
}

/// Compatibility scoring plus sequence assignment.
pub fn encode_policies(users: &[UserId], policies: &PolicyStore) -> SequenceValueMap {
    let compat = policies.compatibility_table();
    assign_sequence_values(users, &compat, DEFAULT_SV0, DEFAULT_DELTA)
}

impl Instance {
    pub fn build(cfg: &WorkloadConfig) -> Result<Self> {
        Self::build_with(cfg, index_config_for(cfg))
    }

    pub fn build_with(cfg: &WorkloadConfig, icfg: IndexConfig) -> Result<Self> {
        let (objects, script) = gen_objects(cfg)?;
        let users: Vec<UserId> = objects.iter().map(|o| o.uid).collect();
        let policies = gen_policies(&users, cfg)?.into_store(&users, cfg.space(), cfg.period)?;
        let started = Instant::now();
        let sv = encode_policies(&users, &policies);
        let prep_secs = started.elapsed().as_secs_f64();
        let peb = MovingIndex::build_peb(icfg, &objects, &sv)?;
        let bx = MovingIndex::build_bx(icfg, &objects)?;
        let friends = FriendLists::build(&policies, &peb)?;
        Ok(Self { cfg: *cfg, objects, users, policies, sv, peb, bx, friends, now: cfg.now(), prep_secs, script })
    }

    pub fn index(&self, kind: IndexKind) -> &MovingIndex {
        match kind {
            IndexKind::Peb => &self.peb,
            IndexKind::Bx => &self.bx,
        }
    }

    pub fn range_queries(&self, salt: u64) -> Vec<PrqRequest> {
        gen_range_queries(&self.cfg, &self.users, self.now, salt)
    }

    pub fn knn_queries(&self, salt: u64) -> Vec<PknnRequest> {
        gen_knn_queries(&self.cfg, &self.objects, self.now, salt)
    }

    /// Starts an update stream positioned at this instance's clock.
    pub fn churn(&mut self) -> Churn {
        Churn::new(&self.cfg, self.script.take())
    }

    /// Applies one churn round to both indexes.
    pub fn apply_round(&mut self, churn: &mut Churn) -> Result<usize> {
        let fresh = churn.next_round(&self.objects);
        self.now = churn.now;
        for o in &fresh {
            self.peb.update(o, self.now)?;
            self.bx.update(o, self.now)?;
            self.objects[o.uid as usize] = *o;
        }
        Ok(fresh.len())
    }
}

/// Outcome of one query batch on one index.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BatchResult {
    pub io: Vec<u64>,
    pub leaf_io: Vec<u64>,
    /// Queries whose answer matched the oracle.
    pub oracle_matches: usize,
    pub checked: bool,
    pub wall_ms: f64,
}

impl BatchResult {
    pub fn mean_io(&self) -> f64 {
        mean(&self.io)
    }

    pub fn mean_leaf_io(&self) -> f64 {
        mean(&self.leaf_io)
    }

    pub fn p95_io(&self) -> f64 {
        if self.io.is_empty() {
            return 0.0;
        }
        let mut v = self.io.clone();
        v.sort_unstable();
        let rank = ((0.95 * v.len() as f64).ceil() as usize).clamp(1, v.len());
        v[rank - 1] as f64
    }

    /// Share of queries that matched the oracle (1 when unchecked).
    pub fn oracle_rate(&self) -> f64 {
        if !self.checked || self.io.is_empty() {
            1.0
        } else {
            self.oracle_matches as f64 / self.io.len() as f64
        }
    }
}

fn mean(v: &[u64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<u64>() as f64 / v.len() as f64
    }
}

/// When the simulated buffer is emptied during a batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BufferReset {
    /// Once before the batch; queries share a warm buffer.
    #[default]
    PerBatch,
    /// Before every query.
    PerQuery,
}

impl BufferReset {
    fn before_batch(&self, index: &MovingIndex) {
        index.reset_io();
    }

    fn before_query(&self, index: &MovingIndex) {
        if *self == BufferReset::PerQuery {
            index.reset_io();
        }
    }
}

pub fn run_range_batch(
    inst: &Instance,
    kind: IndexKind,
    queries: &[PrqRequest],
    check: bool,
    reset: BufferReset,
) -> Result<BatchResult> {
    let index = inst.index(kind);
    let mut out = BatchResult { checked: check, ..Default::default() };
    let mut wall = 0.0;
    reset.before_batch(index);
    for q in queries {
        reset.before_query(index);
        let started = Instant::now();
        let (ids, stats) = match kind {
            IndexKind::Peb => prq(index, &inst.policies, inst.friends.get(q.qid)?, q, PrqOptions::default())?,
            IndexKind::Bx => baseline_range(index, &inst.policies, q)?,
        };
        wall += started.elapsed().as_secs_f64() * 1e3;
        out.io.push(stats.io);
        out.leaf_io.push(stats.leaf_io);
        if check && ids == oracle_range(&inst.objects, &inst.policies, q) {
            out.oracle_matches += 1;
        }
    }
    out.wall_ms = wall;
    Ok(out)
}

pub fn run_knn_batch(
    inst: &Instance,
    kind: IndexKind,
    queries: &[PknnRequest],
    check: bool,
    reset: BufferReset,
) -> Result<BatchResult> {
    let index = inst.index(kind);
    let mut out = BatchResult { checked: check, ..Default::default() };
    let mut wall = 0.0;
    reset.before_batch(index);
    for q in queries {
        reset.before_query(index);
        let started = Instant::now();
        let (res, stats) = match kind {
            IndexKind::Peb => pknn(index, &inst.policies, inst.friends.get(q.qid)?, q, &Triangular)?,
            IndexKind::Bx => baseline_knn(index, &inst.policies, q)?,
        };
        wall += started.elapsed().as_secs_f64() * 1e3;
        out.io.push(stats.io);
        out.leaf_io.push(stats.leaf_io);
        if check && knn_equivalent(&res, &oracle_knn(&inst.objects, &inst.policies, q), KNN_TOL) {
            out.oracle_matches += 1;
        }
    }
    out.wall_ms = wall;
    Ok(out)
}

// ---------------------------------------------------------------------------
// experiment specs

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sweep {
    N,
    Np,
    Theta,
    Window,
    K,
    Speed,
    Destinations,
    /// Rolling updates; `values` are ignored and `rounds` rounds are run.
    Churn,
}

impl Sweep {
    pub fn name(&self) -> &'static str {
        match self {
            Sweep::N => "N",
            Sweep::Np => "N_p",
            Sweep::Theta => "theta",
            Sweep::Window => "window",
            Sweep::K => "k",
            Sweep::Speed => "max_speed",
            Sweep::Destinations => "destinations",
            Sweep::Churn => "churn",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "n" => Sweep::N,
            "n_p" | "np" => Sweep::Np,
            "theta" => Sweep::Theta,
            "window" => Sweep::Window,
            "k" => Sweep::K,
            "max_speed" | "speed" => Sweep::Speed,
            "destinations" => Sweep::Destinations,
            "churn" | "updates" => Sweep::Churn,
            other => return Err(Error::InvalidQuery(format!("unknown sweep {other:?}"))),
        })
    }

    /// Workload for one point of the sweep.
    pub fn apply(&self, base: &WorkloadConfig, v: f64) -> WorkloadConfig {
        let mut c = *base;
        match self {
            Sweep::N => c.n = v as usize,
            Sweep::Np => c.n_p = v as usize,
            Sweep::Theta => c.theta = v,
            Sweep::Window => c.window = v,
            Sweep::K => c.k = v as usize,
            Sweep::Speed => c.max_speed = v,
            Sweep::Destinations => {
                c.distribution = if v < 1.0 { Distribution::Uniform } else { Distribution::Network { destinations: v as usize } }
            }
            Sweep::Churn => {}
        }
        c
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QueryKinds {
    Range,
    Knn,
    Both,
}

impl QueryKinds {
    fn range(&self) -> bool {
        matches!(self, QueryKinds::Range | QueryKinds::Both)
    }

    fn knn(&self) -> bool {
        matches!(self, QueryKinds::Knn | QueryKinds::Both)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSpec {
    pub base: WorkloadConfig,
    pub sweep: Sweep,
    pub values: Vec<f64>,
    pub rounds: u32,
    pub queries: QueryKinds,
    pub check_oracle: bool,
    /// Zero the wall-clock column so that reports are byte-identical.
    pub deterministic: bool,
    /// Parameters used for the `cost_estimate` column.
    pub cost_params: CostParams,
    pub reset: BufferReset,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            base: WorkloadConfig::default(),
            sweep: Sweep::N,
            values: vec![2_000.0, 5_000.0, 10_000.0, 20_000.0],
            rounds: 8,
            queries: QueryKinds::Both,
            check_oracle: true,
            deterministic: false,
            cost_params: CostParams::UNIFORM,
            reset: BufferReset::PerBatch,
        }
    }
}

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_key_values(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Parse { line: i + 1, msg: format!("expected key = value, got {line:?}") });
        };
        out.insert(k.trim().to_ascii_lowercase(), v.trim().to_owned());
    }
    Ok(out)
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Parse { line: 0, msg: format!("bad value {v:?} for {key}") })
}

fn flag(key: &str, v: &str) -> Result<bool> {
    match v.to_ascii_lowercase().as_str() {
        "1" | "true" | "yes" | "on" => Ok(true),
        "0" | "false" | "no" | "off" => Ok(false),
        _ => Err(Error::Parse { line: 0, msg: format!("bad flag {v:?} for {key}") }),
    }
}

/// Applies one workload setting; returns false for keys it does not know.
pub fn set_workload_key(cfg: &mut WorkloadConfig, key: &str, v: &str) -> Result<bool> {
    match key {
        "n" => cfg.n = num(key, v)?,
        "n_p" | "np" => cfg.n_p = num(key, v)?,
        "theta" => cfg.theta = num(key, v)?,
        "group_size" => cfg.group_size = num(key, v)?,
        "window" => cfg.window = num(key, v)?,
        "k" => cfg.k = num(key, v)?,
        "max_speed" | "speed" => cfg.max_speed = num(key, v)?,
        "side" => cfg.side = num(key, v)?,
        "seed" => cfg.seed = num(key, v)?,
        "queries" => cfg.queries = num(key, v)?,
        "delta_t_mu" => cfg.delta_t_mu = num(key, v)?,
        "destinations" => {
            let d: usize = num(key, v)?;
            cfg.distribution = if d == 0 { Distribution::Uniform } else { Distribution::Network { destinations: d } };
        }
        _ => return Ok(false),
    }
    Ok(true)
}

impl ExperimentSpec {
    /// Reads a spec from `key = value` text. Unset keys keep their defaults.
    pub fn from_key_values(text: &str) -> Result<Self> {
        let mut spec = Self::default();
        for (k, v) in parse_key_values(text)? {
            if set_workload_key(&mut spec.base, &k, &v)? {
                continue;
            }
            match k.as_str() {
                "sweep" => spec.sweep = Sweep::parse(&v)?,
                "values" => {
                    spec.values = v
                        .split(',')
                        .map(str::trim)
                        .filter(|s| !s.is_empty())
                        .map(|s| num("values", s))
                        .collect::<Result<_>>()?
                }
                "rounds" => spec.rounds = num(&k, &v)?,
                "query_type" => {
                    spec.queries = match v.as_str() {
                        "range" | "prq" => QueryKinds::Range,
                        "knn" | "pknn" => QueryKinds::Knn,
                        "both" => QueryKinds::Both,
                        _ => return Err(Error::Parse { line: 0, msg: format!("bad query_type {v:?}") }),
                    }
                }
                "check_oracle" => spec.check_oracle = flag(&k, &v)?,
                "deterministic" => spec.deterministic = flag(&k, &v)?,
                "buffer_reset" => {
                    spec.reset = match v.as_str() {
                        "batch" => BufferReset::PerBatch,
                        "query" => BufferReset::PerQuery,
                        _ => return Err(Error::Parse { line: 0, msg: format!("bad buffer_reset {v:?}") }),
                    }
                }
                "a1" => spec.cost_params.a1 = num(&k, &v)?,
                "a2" => spec.cost_params.a2 = num(&k, &v)?,
                other => return Err(Error::Parse { line: 0, msg: format!("unknown key {other:?}") }),
            }
        }
        Ok(spec)
    }
}

// ---------------------------------------------------------------------------
// report rows

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Row {
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "N_p")]
    pub n_p: usize,
    pub theta: f64,
    pub window: f64,
    pub k: usize,
    pub max_speed: f64,
    pub destinations: usize,
    pub index: String,
    pub query_type: String,
    pub seed: u64,
    pub mean_io: Option<f64>,
    pub p95_io: Option<f64>,
    pub oracle_ok: Option<f64>,
    pub cost_estimate: Option<f64>,
    pub wall_ms: Option<f64>,
    pub sweep: String,
    pub round: u32,
    pub error: String,
}

fn destinations_of(cfg: &WorkloadConfig) -> usize {
    match cfg.distribution {
        Distribution::Uniform => 0,
        Distribution::Network { destinations } => destinations,
    }
}

fn row_for(cfg: &WorkloadConfig, sweep: Sweep, round: u32, kind: IndexKind, qtype: &str) -> Row {
    Row {
        n: cfg.n,
        n_p: cfg.n_p,
        theta: cfg.theta,
        window: cfg.window,
        k: cfg.k,
        max_speed: cfg.max_speed,
        destinations: destinations_of(cfg),
        index: kind.name().to_owned(),
        query_type: qtype.to_owned(),
        seed: cfg.seed,
        mean_io: None,
        p95_io: None,
        oracle_ok: None,
        cost_estimate: None,
        wall_ms: None,
        sweep: sweep.name().to_owned(),
        round,
        error: String::new(),
    }
}

/// Cost-model inputs for an instance.
pub fn cost_inputs(inst: &Instance) -> CostInputs {
    CostInputs {
        n: inst.cfg.n as f64,
        n_p: inst.cfg.n_p as f64,
        theta: inst.cfg.theta,
        n_l: inst.peb.stats().leaf_count.max(1) as f64,
        side: inst.cfg.side,
    }
}

/// Measures one point (one round) on both indexes; appends its rows.
fn measure_point(inst: &Instance, spec: &ExperimentSpec, round: u32, salt: u64, rows: &mut Vec<Row>) -> Result<()> {
    let cfg = &inst.cfg;
    let finish = |mut row: Row, b: &BatchResult| {
        row.mean_io = Some(b.mean_io());
        row.p95_io = Some(b.p95_io());
        row.oracle_ok = Some(b.oracle_rate());
        row.wall_ms = Some(if spec.deterministic { 0.0 } else { b.wall_ms });
        row
    };
    if spec.queries.range() {
        let qs = inst.range_queries(salt);
        for kind in [IndexKind::Peb, IndexKind::Bx] {
            let b = run_range_batch(inst, kind, &qs, spec.check_oracle, spec.reset)?;
            let mut row = finish(row_for(cfg, spec.sweep, round, kind, "range"), &b);
            if kind == IndexKind::Peb {
                row.cost_estimate = Some(cost_c(spec.cost_params, &cost_inputs(inst)));
            }
            rows.push(row);
        }
    }
    if spec.queries.knn() {
        let qs = inst.knn_queries(salt);
        for kind in [IndexKind::Peb, IndexKind::Bx] {
            let b = run_knn_batch(inst, kind, &qs, spec.check_oracle, spec.reset)?;
            rows.push(finish(row_for(cfg, spec.sweep, round, kind, "knn"), &b));
        }
    }
    Ok(())
}

fn error_row(cfg: &WorkloadConfig, sweep: Sweep, round: u32, e: &Error) -> Row {
    let mut row = row_for(cfg, sweep, round, IndexKind::Peb, "");
    row.index = String::new();
    row.error = e.to_string();
    row
}

/// Runs every point of the experiment. Points that cannot be generated or
/// measured produce a row carrying the error; the run continues.
pub fn run_experiment(spec: &ExperimentSpec) -> Vec<Row> {
    let mut rows = Vec::new();
    if spec.base.queries == 0 {
        return rows;
    }
    if spec.sweep == Sweep::Churn {
        let res = (|| -> Result<()> {
            let mut inst = Instance::build(&spec.base)?;
            let mut churn = inst.churn();
            for round in 1..=spec.rounds {
                inst.apply_round(&mut churn)?;
                measure_point(&inst, spec, round, round as u64, &mut rows)?;
            }
            Ok(())
        })();
        if let Err(e) = res {
            rows.push(error_row(&spec.base, spec.sweep, 0, &e));
        }
        return rows;
    }
    for &v in &spec.values {
        let cfg = spec.sweep.apply(&spec.base, v);
        if let Err(e) = Instance::build(&cfg).and_then(|inst| measure_point(&inst, spec, 0, 0, &mut rows)) {
            log::warn!("point {}={v}: {e}", spec.sweep.name());
            rows.push(error_row(&cfg, spec.sweep, 0, &e));
        }
    }
    rows
}

pub fn write_rows(w: impl Write, rows: &[Row]) -> Result<()> {
    let mut wtr = csv::WriterBuilder::new().has_headers(false).from_writer(w);
    wtr.write_record(ROW_HEADER).map_err(|e| Error::Io(e.to_string()))?;
    for r in rows {
        wtr.serialize(r).map_err(|e| Error::Io(e.to_string()))?;
    }
    wtr.flush()?;
    Ok(())
}

pub const ROW_HEADER: [&str; 18] = [
    "N",
    "N_p",
    "theta",
    "window",
    "k",
    "max_speed",
    "destinations",
    "index",
    "query_type",
    "seed",
    "mean_io",
    "p95_io",
    "oracle_ok",
    "cost_estimate",
    "wall_ms",
    "sweep",
    "round",
    "error",
];

/// True when every measured row matched the oracle on every query.
pub fn all_correct(rows: &[Row]) -> bool {
    rows.iter().all(|r| r.error.is_empty() && r.oracle_ok.is_none_or(|v| v == 1.0))
}

// ---------------------------------------------------------------------------
// preprocessing time

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrepTiming {
    pub n: usize,
    pub n_p: usize,
    pub secs: f64,
}

/// Times policy encoding (compatibility scoring and sequence assignment)
/// for each population size, taking the best of `repeats` runs.
pub fn measure_preprocessing(base: &WorkloadConfig, ns: &[usize], repeats: usize) -> Result<Vec<PrepTiming>> {
    ns.iter()
        .map(|&n| {
            let cfg = WorkloadConfig { n, ..*base };
            let (objects, _) = gen_objects(&cfg)?;
            let users: Vec<UserId> = objects.iter().map(|o| o.uid).collect();
            let store = gen_policies(&users, &cfg)?.into_store(&users, cfg.space(), cfg.period)?;
            let mut best = f64::INFINITY;
            for _ in 0..repeats.max(1) {
                let started = Instant::now();
                let sv = encode_policies(&users, &store);
                best = best.min(started.elapsed().as_secs_f64());
                std::hint::black_box(sv);
            }
            Ok(PrepTiming { n, n_p: cfg.n_p, secs: best })
        })
        .collect()
}

/// Coefficient of determination of the least-squares line through `pts`.
pub fn linear_r2(pts: &[(f64, f64)]) -> f64 {
    let n = pts.len() as f64;
    if pts.len() < 2 {
        return 1.0;
    }
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let syy: f64 = pts.iter().map(|p| (p.1 - my).powi(2)).sum();
    if syy == 0.0 {
        return 1.0;
    }
    if sxx == 0.0 {
        return 0.0;
    }
    (sxy * sxy) / (sxx * syy)
}

// ---------------------------------------------------------------------------
// cost-model validation

#[derive(Debug, Clone, PartialEq)]
pub struct CostPoint {
    pub sweep: Sweep,
    pub value: f64,
    pub measured: f64,
    pub estimate: f64,
}

impl CostPoint {
    /// max(estimate, measured) / min(estimate, measured).
    pub fn factor(&self) -> f64 {
        let (lo, hi) = if self.estimate <= self.measured { (self.estimate, self.measured) } else { (self.measured, self.estimate) };
        if lo <= 0.0 {
            f64::INFINITY
        } else {
            hi / lo
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostValidation {
    pub params: CostParams,
    pub points: Vec<CostPoint>,
}

/// Measured cost of a point: mean leaf I/O of the policy-embedded range
/// query.
pub fn measured_prq_cost(inst: &Instance, reset: BufferReset) -> Result<f64> {
    let qs = inst.range_queries(0);
    Ok(run_range_batch(inst, IndexKind::Peb, &qs, false, reset)?.mean_leaf_io())
}

/// Fits the cost parameters from two population sizes, then compares
/// estimate and measurement along the given sweeps.
pub fn validate_cost(
    base: &WorkloadConfig,
    fit_ns: (usize, usize),
    sweeps: &[(Sweep, Vec<f64>)],
    reset: BufferReset,
) -> Result<CostValidation> {
    let sample = |n: usize| -> Result<(CostInputs, f64)> {
        let inst = Instance::build(&WorkloadConfig { n, ..*base })?;
        Ok((cost_inputs(&inst), measured_prq_cost(&inst, reset)?))
    };
    let (i1, c1) = sample(fit_ns.0)?;
    let (i2, c2) = sample(fit_ns.1)?;
    let params = fit_cost_params((&i1, c1), (&i2, c2))?;
    let mut points = Vec::new();
    for (sweep, values) in sweeps {
        for &v in values {
            let inst = Instance::build(&sweep.apply(base, v))?;
            points.push(CostPoint {
                sweep: *sweep,
                value: v,
                measured: measured_prq_cost(&inst, reset)?,
                estimate: cost_c(params, &cost_inputs(&inst)),
            });
        }
    }
    Ok(CostValidation { params, points })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> WorkloadConfig {
        WorkloadConfig { n: 600, n_p: 10, group_size: 50, queries: 30, seed: 3, ..Default::default() }
    }

    #[test]
    fn key_values_parse() {
        let spec = ExperimentSpec::from_key_values(
            "# grid\nsweep = theta\nvalues = 0, 0.5 ,1\nn = 1500\nseed=9\ndeterministic = yes\nquery_type = range\n",
        )
        .unwrap();
        assert_eq!(spec.sweep, Sweep::Theta);
        assert_eq!(spec.values, vec![0.0, 0.5, 1.0]);
        assert_eq!(spec.base.n, 1500);
        assert_eq!(spec.base.seed, 9);
        assert!(spec.deterministic);
        assert_eq!(spec.queries, QueryKinds::Range);
        assert!(ExperimentSpec::from_key_values("bogus = 1").is_err());
        assert!(matches!(ExperimentSpec::from_key_values("n 5"), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn batches_agree_with_oracles() {
        let inst = Instance::build(&tiny()).unwrap();
        let rq = inst.range_queries(0);
        let kq = inst.knn_queries(0);
        for kind in [IndexKind::Peb, IndexKind::Bx] {
            let r = run_range_batch(&inst, kind, &rq, true, BufferReset::PerQuery).unwrap();
            assert_eq!(r.oracle_matches, rq.len());
            assert!(r.io.iter().zip(&r.leaf_io).all(|(a, b)| b <= a));
            let k = run_knn_batch(&inst, kind, &kq, true, BufferReset::PerBatch).unwrap();
            assert_eq!(k.oracle_matches, kq.len());
        }
    }

    #[test]
    fn experiment_is_deterministic() {
        let spec = ExperimentSpec {
            base: tiny(),
            sweep: Sweep::Theta,
            values: vec![0.0, 1.0],
            deterministic: true,
            ..Default::default()
        };
        let a = run_experiment(&spec);
        assert_eq!(a.len(), 2 * 4);
        assert!(all_correct(&a));
        assert_eq!(a, run_experiment(&spec));
        let mut buf = Vec::new();
        write_rows(&mut buf, &a).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("N,N_p,theta,window,k,max_speed,destinations,index,query_type,seed,mean_io,p95_io,oracle_ok,cost_estimate,wall_ms"));
        assert_eq!(text.lines().count(), 9);
    }

    #[test]
    fn zero_queries_give_header_only() {
        let spec = ExperimentSpec { base: WorkloadConfig { queries: 0, ..tiny() }, ..Default::default() };
        let rows = run_experiment(&spec);
        assert!(rows.is_empty());
        let mut buf = Vec::new();
        write_rows(&mut buf, &rows).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 1);
    }

    #[test]
    fn infeasible_point_is_reported() {
        let spec = ExperimentSpec { base: tiny(), sweep: Sweep::Np, values: vec![10.0, 5000.0], ..Default::default() };
        let rows = run_experiment(&spec);
        assert_eq!(rows.len(), 5);
        assert!(!rows[4].error.is_empty());
        assert!(!all_correct(&rows));
    }

    #[test]
    fn churn_rounds_stay_correct() {
        let spec = ExperimentSpec { base: tiny(), sweep: Sweep::Churn, rounds: 5, queries: QueryKinds::Range, ..Default::default() };
        let rows = run_experiment(&spec);
        assert_eq!(rows.len(), 10);
        assert!(all_correct(&rows), "{rows:?}");
        assert_eq!(rows.last().unwrap().round, 5);
    }

    #[test]
    fn r2_of_lines() {
        assert!((linear_r2(&[(1.0, 2.0), (2.0, 4.0), (3.0, 6.0)]) - 1.0).abs() < 1e-12);
        assert!(linear_r2(&[(1.0, 1.0), (2.0, 3.0), (3.0, 1.0)]) < 0.1);
    }

    #[test]
    fn p95_rank() {
        let b = BatchResult { io: (1..=100).collect(), ..Default::default() };
        assert_eq!(b.p95_io(), 95.0);
        assert_eq!(b.mean_io(), 50.5);
    }
}
