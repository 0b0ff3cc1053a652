use std::path::Path;
use std::process::{Command, Output};

fn peb(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_peb")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn gen(dir: &Path) {
    let o = peb(&["gen", "--out", dir.to_str().unwrap(), "--n", "1500", "--n-p", "20", "--queries", "15", "--seed", "4"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["objects.csv", "policies.csv", "relationships.csv", "queries.csv"] {
        assert!(dir.join(f).exists(), "{f}");
    }
}

#[test]
fn gen_build_query_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen(&data);
    let d = data.to_str().unwrap();
    let snap = tmp.path().join("peb.idx");
    let o = peb(&["build", "--data", d, "--out", snap.to_str().unwrap()]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("1500 entries"));
    assert_eq!(std::fs::metadata(&snap).unwrap().len() % 4096, 0);

    let built = peb(&["query", "--data", d, "--check"]);
    assert!(built.status.success(), "{}", String::from_utf8_lossy(&built.stderr));
    let loaded = peb(&["query", "--data", d, "--snapshot", snap.to_str().unwrap(), "--check"]);
    assert!(loaded.status.success());
    let text = stdout(&built);
    assert_eq!(text.lines().count(), 31);
    assert!(text.lines().skip(1).all(|l| l.split(',').nth(3) == Some("1")));
    // same answers whether the index was rebuilt or loaded
    let answers = |s: &str| s.lines().map(|l| l.split(',').nth(4).unwrap_or("").to_owned()).collect::<Vec<_>>();
    assert_eq!(answers(&text), answers(&stdout(&loaded)));

    let bx = peb(&["query", "--data", d, "--index", "bx", "--check"]);
    assert!(bx.status.success());
    assert_eq!(answers(&stdout(&bx)), answers(&text));

    let wrong = peb(&["query", "--data", d, "--index", "bx", "--snapshot", snap.to_str().unwrap()]);
    assert!(!wrong.status.success());
}

#[test]
fn bench_requires_seed() {
    let o = peb(&["bench", "--n", "500"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("--seed"));
}

#[test]
fn bench_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("exp.conf");
    std::fs::write(&cfg, "# small theta sweep\nsweep = theta\nvalues = 0, 1\nn = 1500\nqueries = 10\nquery_type = range\n").unwrap();
    let run = |name: &str| {
        let out = tmp.path().join(name);
        let o = peb(&["bench", "--seed", "7", "--config", cfg.to_str().unwrap(), "--deterministic", "--out", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        std::fs::read_to_string(out).unwrap()
    };
    let a = run("a.csv");
    assert_eq!(a, run("b.csv"));
    let mut lines = a.lines();
    assert!(lines.next().unwrap().starts_with(
        "N,N_p,theta,window,k,max_speed,destinations,index,query_type,seed,mean_io,p95_io,oracle_ok,cost_estimate,wall_ms"
    ));
    let rows: Vec<_> = lines.collect();
    assert_eq!(rows.len(), 4);
    assert!(rows.iter().all(|r| r.contains(",range,7,")));
}

#[test]
fn infeasible_point_reports_error_row() {
    // more policies than users cannot be generated
    let o = peb(&["bench", "--seed", "1", "--n", "30", "--sweep", "n_p", "--values", "50", "--queries", "5"]);
    let text = stdout(&o);
    assert_eq!(text.lines().count(), 2, "{text}");
    assert!(!text.lines().nth(1).unwrap().ends_with(','));
}

#[test]
fn preproc_and_cost_print_tables() {
    let o = peb(&["preproc", "--ns", "500,1000,1500", "--repeats", "1", "--n-p", "10"]);
    assert!(o.status.success());
    let t = stdout(&o);
    assert_eq!(t.lines().filter(|l| l.starts_with(|c: char| c.is_ascii_digit())).count(), 3);
    assert!(t.contains("R^2"));

    let o = peb(&["cost", "--fit-n", "1500,3000", "--theta-values", "0,1", "--np-values", "", "--queries", "10"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let t = stdout(&o);
    assert!(t.starts_with("# a1="));
    assert_eq!(t.lines().filter(|l| l.starts_with("theta,")).count(), 2);
}
