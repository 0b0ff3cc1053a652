use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use peb_core::bench::{
    all_correct, encode_policies, linear_r2, measure_preprocessing, run_experiment, validate_cost, write_rows,
    BufferReset, ExperimentSpec, Instance, QueryKinds, Sweep,
};
use peb_core::formats::{
    read_objects, read_policies, read_queries, read_relationships, write_objects, write_policies, write_queries,
    write_relationships, QuerySpec,
};
use peb_core::geom::Rect;
use peb_core::index::{IndexKind, MovingIndex};
use peb_core::policy::PolicyStore;
use peb_core::query::{
    baseline_knn, baseline_range, knn_equivalent, oracle_knn, oracle_range, pknn, prq, FriendLists, KnnResult,
    PrqOptions, Triangular,
};
use peb_core::workload::{Distribution, WorkloadConfig};
use peb_core::UserId;

#[derive(Parser)]
#[command(name = "peb", version, about = "Policy-embedded moving-object index: data generation, queries and experiments")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a dataset, policies, relationships and a query batch.
    Gen(GenArgs),
    /// Build an index over a dataset and report its shape.
    Build(BuildArgs),
    /// Run a query file against an index.
    Query(QueryArgs),
    /// Run an experiment sweep and write CSV rows.
    Bench(BenchArgs),
    /// Fit the range-query cost model and compare it with measurements.
    Cost(CostArgs),
    /// Time policy encoding over population sizes.
    Preproc(PreprocArgs),
}

#[derive(Args, Clone, Default)]
struct WorkloadArgs {
    /// Number of users.
    #[arg(long = "n")]
    n: Option<usize>,
    /// Policies per user.
    #[arg(long = "n-p")]
    n_p: Option<usize>,
    /// Grouping factor in [0, 1].
    #[arg(long)]
    theta: Option<f64>,
    #[arg(long)]
    group_size: Option<usize>,
    /// Side of square range-query windows.
    #[arg(long)]
    window: Option<f64>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    max_speed: Option<f64>,
    /// Road-network destinations; 0 spreads users uniformly.
    #[arg(long)]
    destinations: Option<usize>,
    /// Side of the square space.
    #[arg(long)]
    side: Option<f64>,
    /// Queries per measurement point.
    #[arg(long)]
    queries: Option<usize>,
}

impl WorkloadArgs {
    fn apply(&self, cfg: &mut WorkloadConfig) {
        macro_rules! set {
            ($($f:ident),*) => { $(if let Some(v) = self.$f { cfg.$f = v; })* };
        }
        set!(n, n_p, theta, group_size, window, k, max_speed, side, queries);
        if let Some(d) = self.destinations {
            cfg.distribution = if d == 0 { Distribution::Uniform } else { Distribution::Network { destinations: d } };
        }
    }

    fn config(&self, seed: u64) -> WorkloadConfig {
        let mut cfg = WorkloadConfig { seed, ..Default::default() };
        self.apply(&mut cfg);
        cfg
    }
}

#[derive(Args)]
struct GenArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[command(flatten)]
    workload: WorkloadArgs,
}

#[derive(Args)]
struct DataArgs {
    /// Directory holding objects.csv, policies.csv and relationships.csv.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    objects: Option<PathBuf>,
    #[arg(long)]
    policies: Option<PathBuf>,
    #[arg(long)]
    relationships: Option<PathBuf>,
    /// Side of the square space.
    #[arg(long, default_value_t = 1000.0)]
    side: f64,
    /// Length of the cyclic policy day.
    #[arg(long, default_value_t = 1440.0)]
    period: f64,
}

#[derive(Clone, Copy, ValueEnum)]
enum IndexArg {
    Peb,
    Bx,
}

impl From<IndexArg> for IndexKind {
    fn from(a: IndexArg) -> Self {
        match a {
            IndexArg::Peb => IndexKind::Peb,
            IndexArg::Bx => IndexKind::Bx,
        }
    }
}

#[derive(Args)]
struct BuildArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, value_enum, default_value = "peb")]
    index: IndexArg,
    /// Write the index as a page-image snapshot.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct QueryArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Query file (defaults to queries.csv in the data directory).
    #[arg(long)]
    queries: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "peb")]
    index: IndexArg,
    /// Load the index from a snapshot instead of building it.
    #[arg(long)]
    snapshot: Option<PathBuf>,
    /// Compare every answer with the brute-force oracle.
    #[arg(long)]
    check: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum QueryTypeArg {
    Range,
    Knn,
    Both,
}

#[derive(Clone, Copy, ValueEnum)]
enum ResetArg {
    Batch,
    Query,
}

#[derive(Args)]
struct BenchArgs {
    /// key = value experiment file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: u64,
    /// Parameter to vary: N, N_p, theta, window, k, max_speed, destinations or churn.
    #[arg(long)]
    sweep: Option<String>,
    /// Comma-separated sweep values.
    #[arg(long)]
    values: Option<String>,
    /// Update rounds for the churn sweep.
    #[arg(long)]
    rounds: Option<u32>,
    #[arg(long, value_enum)]
    query_type: Option<QueryTypeArg>,
    #[arg(long, value_enum)]
    buffer_reset: Option<ResetArg>,
    /// Skip oracle checks.
    #[arg(long)]
    no_oracle: bool,
    /// Report wall_ms as 0 so that repeated runs are byte-identical.
    #[arg(long)]
    deterministic: bool,
    /// CSV output (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    workload: WorkloadArgs,
}

#[derive(Args)]
struct CostArgs {
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Two population sizes used to fit the parameters.
    #[arg(long, default_value = "5000,20000")]
    fit_n: String,
    #[arg(long, default_value = "0,0.25,0.5,0.75,1")]
    theta_values: String,
    #[arg(long, default_value = "10,50,100")]
    np_values: String,
    #[arg(long, default_value = "")]
    n_values: String,
    #[command(flatten)]
    workload: WorkloadArgs,
}

#[derive(Args)]
struct PreprocArgs {
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value = "2000,5000,10000,20000")]
    ns: String,
    #[arg(long, default_value_t = 3)]
    repeats: usize,
    #[command(flatten)]
    workload: WorkloadArgs,
}

fn parse_list<T: std::str::FromStr>(s: &str) -> Result<Vec<T>> {
    s.split(',')
        .map(str::trim)
        .filter(|x| !x.is_empty())
        .map(|x| x.parse().map_err(|_| anyhow::anyhow!("bad list item {x:?}")))
        .collect()
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path).with_context(|| format!("opening {}", path.display()))?))
}

fn gen(args: GenArgs) -> Result<()> {
    let cfg = args.workload.config(args.seed);
    let inst = Instance::build(&cfg)?;
    fs::create_dir_all(&args.out)?;
    write_objects(create(&args.out.join("objects.csv"))?, &inst.objects)?;
    write_policies(create(&args.out.join("policies.csv"))?, inst.policies.policies())?;
    write_relationships(create(&args.out.join("relationships.csv"))?, inst.policies.graph())?;
    let mut queries: Vec<QuerySpec> = inst.range_queries(0).into_iter().map(QuerySpec::Range).collect();
    queries.extend(inst.knn_queries(0).into_iter().map(QuerySpec::Knn));
    write_queries(create(&args.out.join("queries.csv"))?, &queries)?;
    println!(
        "wrote {} users, {} policies, {} queries to {}",
        inst.objects.len(),
        inst.policies.policies().len(),
        queries.len(),
        args.out.display()
    );
    Ok(())
}

struct Loaded {
    objects: Vec<peb_core::motion::MovingObject>,
    users: Vec<UserId>,
    store: PolicyStore,
}

fn load(d: &DataArgs) -> Result<Loaded> {
    let pick = |explicit: &Option<PathBuf>, name: &str| -> Result<PathBuf> {
        match (explicit, &d.data) {
            (Some(p), _) => Ok(p.clone()),
            (None, Some(dir)) => Ok(dir.join(name)),
            (None, None) => bail!("pass --data or --{}", name.trim_end_matches(".csv")),
        }
    };
    let objects = read_objects(open(&pick(&d.objects, "objects.csv")?)?)?;
    let policies = read_policies(open(&pick(&d.policies, "policies.csv")?)?, d.period)?;
    let graph = read_relationships(open(&pick(&d.relationships, "relationships.csv")?)?)?;
    let users: Vec<UserId> = objects.iter().map(|o| o.uid).collect();
    let store = PolicyStore::new(users.clone(), Rect::new(0.0, 0.0, d.side, d.side), d.period, policies, graph)?;
    Ok(Loaded { objects, users, store })
}

fn build_index(l: &Loaded, kind: IndexKind, side: f64) -> Result<MovingIndex> {
    let icfg = peb_core::bench::index_config_for(&WorkloadConfig { side, ..Default::default() });
    Ok(match kind {
        IndexKind::Peb => MovingIndex::build_peb(icfg, &l.objects, &encode_policies(&l.users, &l.store))?,
        IndexKind::Bx => MovingIndex::build_bx(icfg, &l.objects)?,
    })
}

fn build(args: BuildArgs) -> Result<()> {
    let l = load(&args.data)?;
    let started = Instant::now();
    let index = build_index(&l, args.index.into(), args.data.side)?;
    let s = index.stats();
    println!(
        "{} index: {} entries, {} leaves, height {}, {} pages, built in {:.3}s",
        index.kind().name(),
        s.entry_count,
        s.leaf_count,
        s.height,
        s.page_count,
        started.elapsed().as_secs_f64()
    );
    if let Some(out) = args.out {
        index.write_snapshot(create(&out)?)?;
        println!("snapshot written to {}", out.display());
    }
    Ok(())
}

fn format_knn(r: &KnnResult) -> String {
    r.neighbors.iter().map(|(u, d)| format!("{u}:{d:.6}")).collect::<Vec<_>>().join(" ")
}

fn query(args: QueryArgs) -> Result<bool> {
    let l = load(&args.data)?;
    let kind: IndexKind = args.index.into();
    let index = match &args.snapshot {
        Some(p) => {
            let idx = MovingIndex::read_snapshot(open(p)?)?;
            if idx.kind() != kind {
                bail!("snapshot holds a {} index, not {}", idx.kind().name(), kind.name());
            }
            idx
        }
        None => build_index(&l, kind, args.data.side)?,
    };
    let qpath = match (&args.queries, &args.data.data) {
        (Some(p), _) => p.clone(),
        (None, Some(dir)) => dir.join("queries.csv"),
        (None, None) => bail!("pass --queries"),
    };
    let queries = read_queries(open(&qpath)?)?;
    let friends = if kind == IndexKind::Peb { Some(FriendLists::build(&l.store, &index)?) } else { None };
    let stdout = io::stdout();
    let mut out = stdout.lock();
    writeln!(out, "kind,qid,io,oracle_ok,result")?;
    let mut all_ok = true;
    index.reset_io();
    for q in &queries {
        let (ok, io, result) = match q {
            QuerySpec::Range(r) => {
                let (ids, stats) = match &friends {
                    Some(f) => prq(&index, &l.store, f.get(r.qid)?, r, PrqOptions::default())?,
                    None => baseline_range(&index, &l.store, r)?,
                };
                let ok = !args.check || ids == oracle_range(&l.objects, &l.store, r);
                let text = ids.iter().map(u64::to_string).collect::<Vec<_>>().join(" ");
                (ok, stats.io, text)
            }
            QuerySpec::Knn(r) => {
                let (res, stats) = match &friends {
                    Some(f) => pknn(&index, &l.store, f.get(r.qid)?, r, &Triangular)?,
                    None => baseline_knn(&index, &l.store, r)?,
                };
                let ok = !args.check || knn_equivalent(&res, &oracle_knn(&l.objects, &l.store, r), 1e-9);
                (ok, stats.io, format_knn(&res))
            }
        };
        all_ok &= ok;
        let kind = if matches!(q, QuerySpec::Range(_)) { "range" } else { "knn" };
        let flag = if args.check { u8::from(ok).to_string() } else { String::new() };
        writeln!(out, "{kind},{},{io},{flag},{result}", q.qid())?;
    }
    Ok(all_ok)
}

fn bench(args: BenchArgs) -> Result<bool> {
    let mut spec = match &args.config {
        Some(p) => ExperimentSpec::from_key_values(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)?,
        None => ExperimentSpec::default(),
    };
    spec.base.seed = args.seed;
    args.workload.apply(&mut spec.base);
    if let Some(s) = &args.sweep {
        spec.sweep = Sweep::parse(s)?;
    }
    if let Some(v) = &args.values {
        spec.values = parse_list(v)?;
    }
    if let Some(r) = args.rounds {
        spec.rounds = r;
    }
    if let Some(q) = args.query_type {
        spec.queries = match q {
            QueryTypeArg::Range => QueryKinds::Range,
            QueryTypeArg::Knn => QueryKinds::Knn,
            QueryTypeArg::Both => QueryKinds::Both,
        };
    }
    if let Some(r) = args.buffer_reset {
        spec.reset = match r {
            ResetArg::Batch => BufferReset::PerBatch,
            ResetArg::Query => BufferReset::PerQuery,
        };
    }
    spec.check_oracle &= !args.no_oracle;
    spec.deterministic |= args.deterministic;
    let rows = run_experiment(&spec);
    match &args.out {
        Some(p) => write_rows(create(p)?, &rows)?,
        None => write_rows(io::stdout().lock(), &rows)?,
    }
    Ok(all_correct(&rows))
}

fn cost(args: CostArgs) -> Result<()> {
    let base = args.workload.config(args.seed);
    let fit: Vec<usize> = parse_list(&args.fit_n)?;
    let [n1, n2] = fit[..] else { bail!("--fit-n needs exactly two sizes") };
    let mut sweeps = Vec::new();
    for (sweep, text) in [(Sweep::Theta, &args.theta_values), (Sweep::Np, &args.np_values), (Sweep::N, &args.n_values)] {
        let values: Vec<f64> = parse_list(text)?;
        if !values.is_empty() {
            sweeps.push((sweep, values));
        }
    }
    let v = validate_cost(&base, (n1, n2), &sweeps, BufferReset::PerBatch)?;
    println!("# a1={} a2={}", v.params.a1, v.params.a2);
    println!("sweep,value,measured,estimate,factor");
    for p in &v.points {
        println!("{},{},{:.4},{:.4},{:.4}", p.sweep.name(), p.value, p.measured, p.estimate, p.factor());
    }
    Ok(())
}

fn preproc(args: PreprocArgs) -> Result<()> {
    let base = args.workload.config(args.seed);
    let ns: Vec<usize> = parse_list(&args.ns)?;
    let t = measure_preprocessing(&base, &ns, args.repeats)?;
    println!("N,N_p,seconds");
    for p in &t {
        println!("{},{},{:.6}", p.n, p.n_p, p.secs);
    }
    let pts: Vec<(f64, f64)> = t.iter().map(|p| (p.n as f64, p.secs)).collect();
    println!("# linear fit R^2 = {:.4}", linear_r2(&pts));
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let res = match cli.cmd {
        Cmd::Gen(a) => gen(a).map(|_| true),
        Cmd::Build(a) => build(a).map(|_| true),
        Cmd::Query(a) => query(a),
        Cmd::Bench(a) => bench(a),
        Cmd::Cost(a) => cost(a).map(|_| true),
        Cmd::Preproc(a) => preproc(a).map(|_| true),
    };
    match res {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("error: some answers disagreed with the oracle or a point failed");
            ExitCode::from(2)
        }
        Err(e) if e.downcast_ref::<io::Error>().is_some_and(|io| io.kind() == io::ErrorKind::BrokenPipe) => {
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
