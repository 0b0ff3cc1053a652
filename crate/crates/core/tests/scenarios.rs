use std::fs::File;
use std::io::{BufReader, BufWriter};

use peb_core::bench::{encode_policies, Instance};
use peb_core::formats::{
    read_objects, read_policies, read_queries, read_relationships, write_objects, write_policies, write_queries,
    write_relationships, QuerySpec,
};
use peb_core::geom::{Point, Rect};
use peb_core::index::{IndexConfig, MovingIndex};
use peb_core::motion::MovingObject;
use peb_core::policy::{LocationPrivacyPolicy, PolicyStore, RelationshipGraph, TimeSet};
use peb_core::query::{
    baseline_knn, baseline_range, knn_equivalent, oracle_knn, oracle_range, pknn, prq, ColumnMajor, FriendList,
    FriendLists, IntervalRoute, PknnRequest, PrqOptions, PrqRequest, RowMajor, SearchOrder, Triangular,
};
use peb_core::workload::{Distribution, WorkloadConfig};
use peb_core::zcurve::GridConfig;
use peb_core::UserId;

const DAY: f64 = 1440.0;

/// Issuer u1 with five friends; only u12 is visible inside the window and
/// u100, though nearest, keeps its location from u1 there.
fn small_world() -> (Vec<MovingObject>, PolicyStore, IndexConfig) {
    let space = Rect::new(0.0, 0.0, 8.0, 8.0);
    let at = |uid, x, y| MovingObject::new(uid, x, y, 0.0, 0.0, 60.0);
    let mut objects = vec![
        at(1, 3.6, 5.1),
        at(12, 3.2, 3.1),
        at(30, 2.5, 2.5),
        at(59, 6.2, 6.1),
        at(100, 3.4, 4.8),
        at(130, 1.0, 7.0),
    ];
    for uid in 200..240 {
        objects.push(at(uid, (uid % 8) as f64 + 0.5, ((uid / 8) % 8) as f64 + 0.25));
    }
    let mut graph = RelationshipGraph::new();
    let mut policies = Vec::new();
    let mut grant = |owner: UserId, region: Rect, times: TimeSet| {
        graph.add(owner, "friend", 1);
        policies.push(LocationPrivacyPolicy { owner, role: "friend".into(), region, times });
    };
    grant(12, space, TimeSet::full(DAY));
    grant(30, Rect::new(5.0, 5.0, 8.0, 8.0), TimeSet::full(DAY));
    grant(59, space, TimeSet::full(DAY));
    grant(100, Rect::new(0.0, 0.0, 2.0, 2.0), TimeSet::full(DAY));
    grant(130, space, TimeSet::cyclic(0.0, 10.0, DAY).unwrap());
    let users: Vec<UserId> = objects.iter().map(|o| o.uid).collect();
    let store = PolicyStore::new(users, space, DAY, policies, graph).unwrap();
    let d = IndexConfig::default();
    let icfg = IndexConfig { grid: GridConfig::new(8.0, 3), ..d };
    (objects, store, icfg)
}

#[test]
fn small_world_answers() {
    let (objects, store, icfg) = small_world();
    let users: Vec<UserId> = objects.iter().map(|o| o.uid).collect();
    let sv = encode_policies(&users, &store);
    let peb = MovingIndex::build_peb(icfg, &objects, &sv).unwrap();
    let bx = MovingIndex::build_bx(icfg, &objects).unwrap();
    let friends = FriendList::new(1, &store, &peb).unwrap();
    assert_eq!(friends.friend_count(), 5);

    let range = PrqRequest { qid: 1, rect: Rect::new(2.0, 2.0, 4.0, 6.0), t_q: 100.0 };
    let (got, _) = prq(&peb, &store, &friends, &range, PrqOptions::default()).unwrap();
    assert_eq!(got, vec![12]);
    assert_eq!(baseline_range(&bx, &store, &range).unwrap().0, vec![12]);
    assert_eq!(oracle_range(&objects, &store, &range), vec![12]);

    let nn = PknnRequest { qid: 1, loc: Point::new(3.6, 5.1), k: 1, t_q: 100.0 };
    let (res, _) = pknn(&peb, &store, &friends, &nn, &Triangular).unwrap();
    assert_eq!(res.neighbors.iter().map(|n| n.0).collect::<Vec<_>>(), vec![12]);
    assert_eq!(baseline_knn(&bx, &store, &nn).unwrap().0, res);

    // asking for more neighbours than visible users yields a short answer
    let many = PknnRequest { k: 4, ..nn };
    let (res, _) = pknn(&peb, &store, &friends, &many, &Triangular).unwrap();
    assert!(res.short);
    assert_eq!(res.neighbors.iter().map(|n| n.0).collect::<Vec<_>>(), vec![12, 59]);

    // u130 is visible only during the first ten minutes of the day
    let early = PknnRequest { t_q: DAY + 5.0, ..many };
    let (res, _) = pknn(&peb, &store, &friends, &early, &Triangular).unwrap();
    assert_eq!(res.neighbors.len(), 3);
    assert_eq!(res, oracle_knn(&objects, &store, &early));
}

fn dense(n: usize, theta: f64, seed: u64, distribution: Distribution) -> WorkloadConfig {
    WorkloadConfig {
        n,
        n_p: 30,
        theta,
        group_size: 60,
        seed,
        distribution,
        policy_side: (300.0, 1000.0),
        policy_duration: (DAY, DAY),
        queries: 60,
        ..Default::default()
    }
}

fn check_instance(inst: &Instance) -> (usize, usize) {
    let mut nonempty = 0;
    let mut full = 0;
    for q in inst.range_queries(1) {
        let oracle = oracle_range(&inst.objects, &inst.policies, &q);
        nonempty += usize::from(!oracle.is_empty());
        let fl = inst.friends.get(q.qid).unwrap();
        for route in [IntervalRoute::Lazy, IntervalRoute::Explicit] {
            for skip_rule in [true, false] {
                let (got, _) = prq(&inst.peb, &inst.policies, fl, &q, PrqOptions { skip_rule, route }).unwrap();
                assert_eq!(got, oracle, "{q:?} {route:?} skip {skip_rule}");
            }
        }
        assert_eq!(baseline_range(&inst.bx, &inst.policies, &q).unwrap().0, oracle);
    }
    let orders: [&dyn SearchOrder; 3] = [&Triangular, &RowMajor, &ColumnMajor];
    for (i, k) in [1usize, 3, 8].into_iter().enumerate() {
        for q in inst.knn_queries(10 + i as u64) {
            let q = PknnRequest { k, ..q };
            let oracle = oracle_knn(&inst.objects, &inst.policies, &q);
            full += usize::from(!oracle.short);
            let fl = inst.friends.get(q.qid).unwrap();
            for order in orders {
                let (got, _) = pknn(&inst.peb, &inst.policies, fl, &q, order).unwrap();
                assert!(knn_equivalent(&got, &oracle, 1e-9), "{q:?}\n{got:?}\n{oracle:?}");
            }
            let (got, _) = baseline_knn(&inst.bx, &inst.policies, &q).unwrap();
            assert!(knn_equivalent(&got, &oracle, 1e-9), "{q:?}\n{got:?}\n{oracle:?}");
        }
    }
    (nonempty, full)
}

#[test]
fn dense_visibility_matches_oracles() {
    let mut nonempty = 0;
    let mut full = 0;
    for (i, theta) in [0.0, 0.6, 1.0].into_iter().enumerate() {
        let inst = Instance::build(&dense(1_500, theta, 70 + i as u64, Distribution::Uniform)).unwrap();
        let (a, b) = check_instance(&inst);
        nonempty += a;
        full += b;
    }
    // the workload has to exercise non-trivial answers
    assert!(nonempty > 60, "{nonempty}");
    assert!(full > 200, "{full}");
}

#[test]
fn network_workload_matches_oracles() {
    let inst = Instance::build(&dense(1_200, 0.5, 5, Distribution::Network { destinations: 40 })).unwrap();
    check_instance(&inst);
}

#[test]
fn answers_stay_correct_under_churn() {
    for distribution in [Distribution::Uniform, Distribution::Network { destinations: 30 }] {
        let mut inst = Instance::build(&dense(1_000, 0.5, 9, distribution)).unwrap();
        let mut churn = inst.churn();
        for _ in 0..8 {
            let moved = inst.apply_round(&mut churn).unwrap();
            assert!(moved > 0);
            inst.peb.tree().check_invariants().unwrap();
            inst.bx.tree().check_invariants().unwrap();
            assert!(inst.peb.live_partitions().len() <= 3);
            check_instance(&inst);
        }
    }
}

#[test]
fn files_round_trip_to_same_answers() {
    let inst = Instance::build(&dense(800, 0.5, 21, Distribution::Uniform)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = |name: &str| dir.path().join(name);
    write_objects(BufWriter::new(File::create(path("objects.csv")).unwrap()), &inst.objects).unwrap();
    write_policies(BufWriter::new(File::create(path("policies.csv")).unwrap()), inst.policies.policies()).unwrap();
    write_relationships(BufWriter::new(File::create(path("relationships.csv")).unwrap()), inst.policies.graph()).unwrap();
    let mut queries: Vec<QuerySpec> = inst.range_queries(0).into_iter().map(QuerySpec::Range).collect();
    queries.extend(inst.knn_queries(0).into_iter().map(QuerySpec::Knn));
    write_queries(BufWriter::new(File::create(path("queries.csv")).unwrap()), &queries).unwrap();

    let objects = read_objects(BufReader::new(File::open(path("objects.csv")).unwrap())).unwrap();
    let policies = read_policies(BufReader::new(File::open(path("policies.csv")).unwrap()), DAY).unwrap();
    let graph = read_relationships(BufReader::new(File::open(path("relationships.csv")).unwrap())).unwrap();
    let back_queries = read_queries(BufReader::new(File::open(path("queries.csv")).unwrap())).unwrap();
    assert_eq!(objects, inst.objects);
    assert_eq!(back_queries, queries);
    let users: Vec<UserId> = objects.iter().map(|o| o.uid).collect();
    let store = PolicyStore::new(users.clone(), inst.cfg.space(), DAY, policies, graph).unwrap();
    let sv = encode_policies(&users, &store);
    let peb = MovingIndex::build_peb(*inst.peb.config(), &objects, &sv).unwrap();
    let friends = FriendLists::build(&store, &peb).unwrap();
    for q in &back_queries {
        match q {
            QuerySpec::Range(r) => {
                let a = prq(&peb, &store, friends.get(r.qid).unwrap(), r, PrqOptions::default()).unwrap().0;
                assert_eq!(a, oracle_range(&inst.objects, &inst.policies, r));
            }
            QuerySpec::Knn(r) => {
                let a = pknn(&peb, &store, friends.get(r.qid).unwrap(), r, &Triangular).unwrap().0;
                assert!(knn_equivalent(&a, &oracle_knn(&inst.objects, &inst.policies, r), 1e-9));
            }
        }
    }
}

#[test]
fn snapshot_file_serves_identical_queries() {
    let inst = Instance::build(&dense(900, 0.7, 4, Distribution::Uniform)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("peb.idx");
    inst.peb.write_snapshot(BufWriter::new(File::create(&file).unwrap())).unwrap();
    let len = std::fs::metadata(&file).unwrap().len();
    assert_eq!(len % 4096, 0);
    let back = MovingIndex::read_snapshot(BufReader::new(File::open(&file).unwrap())).unwrap();
    assert_eq!(back.len(), inst.peb.len());
    for q in inst.range_queries(3) {
        let fl = inst.friends.get(q.qid).unwrap();
        let a = prq(&inst.peb, &inst.policies, fl, &q, PrqOptions::default()).unwrap();
        let b = prq(&back, &inst.policies, fl, &q, PrqOptions::default()).unwrap();
        assert_eq!(a.0, b.0);
    }
}
