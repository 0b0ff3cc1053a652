//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails. Run with `cargo test --release --test acceptance`.

use std::collections::BTreeSet;
use std::time::Instant;

use peb_core::bench::{
    linear_r2, measure_preprocessing, BufferReset, run_knn_batch, run_range_batch, validate_cost, Instance, Sweep,
};
use peb_core::index::IndexKind;
use peb_core::keys::{assign_sequence_values, KeyLayout};
use peb_core::policy::CompatibilityTable;
use peb_core::query::{
    baseline_knn, baseline_range, knn_equivalent, oracle_knn, oracle_range, pknn, prq, PknnRequest, PrqOptions,
    Triangular,
};
use peb_core::store::{BPlusTree, LeafEntry, TreeConfig};
use peb_core::workload::WorkloadConfig;
use peb_core::zcurve::{BitOrder, CellRect, GridConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

const DESK_NS: [usize; 4] = [2_000, 5_000, 10_000, 20_000];

fn defaults() -> WorkloadConfig {
    WorkloadConfig { seed: 42, ..Default::default() }
}

fn golden_sv() -> Outcome {
    let t = Instant::now();
    let compat: CompatibilityTable =
        [(2, 1, 0.4), (4, 1, 0.9), (4, 3, 0.8), (5, 3, 0.2), (6, 3, 0.6)].into_iter().collect();
    let sv = assign_sequence_values(&[1, 2, 3, 4, 5, 6], &compat, 2.0, 2.0);
    let got: Vec<f64> = [3, 4, 5, 6, 1, 2].iter().map(|&u| sv.get(u).unwrap_or(f64::NAN)).collect();
    let secs = t.elapsed().as_secs_f64();
    outcome(got == [2.0, 2.2, 2.8, 2.4, 4.0, 4.6] && secs < 1.0, format!("u3..u6,u1,u2 = {got:?} in {secs:.4}s"))
}

fn golden_z() -> Outcome {
    let t = Instant::now();
    let g = GridConfig::new(8.0, 3).with_order(BitOrder::YLow);
    let Some(r) = CellRect::from_grid_corners(2, 2, 4, 6) else {
        return outcome(false, "rectangle rejected");
    };
    let iv: Vec<(u64, u64)> = match g.z_decompose(&r) {
        Ok(v) => v.into_iter().map(|(a, b)| (a + 1, b + 1)).collect(),
        Err(e) => return outcome(false, e.to_string()),
    };
    let secs = t.elapsed().as_secs_f64();
    outcome(iv == [(13, 16), (25, 28)] && secs < 1.0, format!("{iv:?} in {secs:.4}s"))
}

fn small_instances() -> Vec<Instance> {
    (0..20u64)
        .map(|i| {
            let theta = [0.0, 0.5, 1.0][i as usize % 3];
            let cfg = WorkloadConfig { n: 1_000, n_p: 50, theta, queries: 100, seed: 1_000 + i, ..Default::default() };
            Instance::build(&cfg).expect("small instance")
        })
        .collect()
}

fn prq_equivalence(insts: &[Instance]) -> Outcome {
    let t = Instant::now();
    let mut bad = 0;
    let mut total = 0;
    let mut nonempty = 0;
    for inst in insts {
        for q in inst.range_queries(0) {
            total += 1;
            let oracle = oracle_range(&inst.objects, &inst.policies, &q);
            let a = prq(&inst.peb, &inst.policies, inst.friends.get(q.qid).unwrap(), &q, PrqOptions::default()).unwrap().0;
            let b = baseline_range(&inst.bx, &inst.policies, &q).unwrap().0;
            nonempty += usize::from(!oracle.is_empty());
            if a != oracle || b != oracle {
                bad += 1;
            }
        }
    }
    let secs = t.elapsed().as_secs_f64();
    outcome(
        bad == 0 && total == 2_000 && secs < 60.0,
        format!("{bad} mismatches over {total} queries ({nonempty} non-empty) in {secs:.1}s"),
    )
}

fn pknn_equivalence(insts: &[Instance]) -> Outcome {
    let t = Instant::now();
    let mut bad = 0;
    let mut total = 0;
    let mut full = 0;
    for inst in insts {
        for k in [1, 5, 10] {
            for q in inst.knn_queries(k as u64) {
                let q = PknnRequest { k, ..q };
                total += 1;
                let oracle = oracle_knn(&inst.objects, &inst.policies, &q);
                full += usize::from(!oracle.short);
                let a = pknn(&inst.peb, &inst.policies, inst.friends.get(q.qid).unwrap(), &q, &Triangular).unwrap().0;
                let b = baseline_knn(&inst.bx, &inst.policies, &q).unwrap().0;
                for r in [&a, &b] {
                    let kth_ok = match (r.kth_distance(), oracle.kth_distance()) {
                        (Some(x), Some(y)) => (x - y).abs() <= 1e-9,
                        (None, None) => true,
                        _ => false,
                    };
                    if !kth_ok || !knn_equivalent(r, &oracle, 1e-9) {
                        bad += 1;
                    }
                }
            }
        }
    }
    let secs = t.elapsed().as_secs_f64();
    outcome(
        bad == 0 && secs < 120.0,
        format!("{bad} mismatches over {total} queries x 2 indexes ({full} with k visible) in {secs:.1}s"),
    )
}

struct Point {
    peb_prq: f64,
    bx_prq: f64,
    peb_knn: f64,
    bx_knn: f64,
}

fn measure(inst: &Instance, salt: u64, knn: bool) -> Point {
    let rq = inst.range_queries(salt);
    let a = run_range_batch(inst, IndexKind::Peb, &rq, false, BufferReset::PerBatch).unwrap();
    let b = run_range_batch(inst, IndexKind::Bx, &rq, false, BufferReset::PerBatch).unwrap();
    let (mut peb_knn, mut bx_knn) = (f64::NAN, f64::NAN);
    if knn {
        let kq = inst.knn_queries(salt);
        peb_knn = run_knn_batch(inst, IndexKind::Peb, &kq, false, BufferReset::PerBatch).unwrap().mean_io();
        bx_knn = run_knn_batch(inst, IndexKind::Bx, &kq, false, BufferReset::PerBatch).unwrap().mean_io();
    }
    Point { peb_prq: a.mean_io(), bx_prq: b.mean_io(), peb_knn, bx_knn }
}

fn size_trend() -> Outcome {
    let mut ok = true;
    let mut detail = Vec::new();
    let (mut last_r, mut last_k) = (f64::INFINITY, f64::INFINITY);
    for n in DESK_NS {
        let inst = Instance::build(&WorkloadConfig { n, ..defaults() }).unwrap();
        let p = measure(&inst, 0, true);
        let (rr, rk) = (p.peb_prq / p.bx_prq, p.peb_knn / p.bx_knn);
        ok &= p.peb_prq < p.bx_prq && p.peb_knn < p.bx_knn && rr <= last_r && rk <= last_k;
        last_r = rr;
        last_k = rk;
        detail.push(format!(
            "N={n}: prq {:.1}/{:.1}={rr:.3} knn {:.1}/{:.1}={rk:.3}",
            p.peb_prq, p.bx_prq, p.peb_knn, p.bx_knn
        ));
    }
    outcome(ok, detail.join("; "))
}

fn theta_trend() -> Outcome {
    let thetas = [0.0, 0.25, 0.5, 0.75, 1.0];
    let pts: Vec<Point> = thetas
        .iter()
        .map(|&theta| measure(&Instance::build(&WorkloadConfig { theta, ..defaults() }).unwrap(), 0, false))
        .collect();
    let bx: Vec<f64> = pts.iter().map(|p| p.bx_prq).collect();
    let (lo, hi) = bx.iter().fold((f64::INFINITY, 0.0f64), |(a, b), &v| (a.min(v), b.max(v)));
    let spread = (hi - lo) / lo;
    let ok = pts[4].peb_prq < pts[0].peb_prq && spread < 0.10;
    let peb: Vec<String> = pts.iter().map(|p| format!("{:.1}", p.peb_prq)).collect();
    outcome(ok, format!("peb by theta [{}]; baseline spread {:.1}%", peb.join(", "), 100.0 * spread))
}

fn window_trend() -> Outcome {
    let mut peb = Vec::new();
    let mut bx = Vec::new();
    for w in (1..=10).map(|i| 100.0 * i as f64) {
        let inst = Instance::build(&WorkloadConfig { window: w, ..defaults() }).unwrap();
        let p = measure(&inst, 0, false);
        peb.push(p.peb_prq);
        bx.push(p.bx_prq);
    }
    let m = peb.iter().sum::<f64>() / peb.len() as f64;
    let sd = (peb.iter().map(|v| (v - m).powi(2)).sum::<f64>() / peb.len() as f64).sqrt();
    let cv = sd / m;
    let increasing = bx.windows(2).all(|w| w[1] > w[0]);
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.0}")).collect::<Vec<_>>().join(",");
    outcome(cv < 0.25 && increasing, format!("peb cv {cv:.3} [{}]; baseline [{}]", fmt(&peb), fmt(&bx)))
}

fn cost_model() -> Outcome {
    let sweeps = vec![(Sweep::Theta, vec![0.0, 0.25, 0.5, 0.75, 1.0]), (Sweep::Np, vec![10.0, 50.0, 100.0])];
    let v = match validate_cost(&defaults(), (5_000, 20_000), &sweeps, BufferReset::PerBatch) {
        Ok(v) => v,
        Err(e) => return outcome(false, e.to_string()),
    };
    let within = v.points.iter().all(|p| p.factor() <= 2.0);
    let theta_est: Vec<f64> = v.points.iter().filter(|p| p.sweep == Sweep::Theta).map(|p| p.estimate).collect();
    let monotone = theta_est.windows(2).all(|w| w[1] <= w[0]);
    let pts: Vec<String> = v
        .points
        .iter()
        .map(|p| format!("{}={}: est {:.2} meas {:.2}", p.sweep.name(), p.value, p.estimate, p.measured))
        .collect();
    outcome(
        within && monotone,
        format!("a1={:.3} a2={:.3}; {}", v.params.a1, v.params.a2, pts.join("; ")),
    )
}

fn churn_stability() -> Outcome {
    let mut inst = Instance::build(&defaults()).unwrap();
    let mut churn = inst.churn();
    let mut peb = Vec::new();
    let mut bx = Vec::new();
    for round in 1..=8u32 {
        inst.apply_round(&mut churn).unwrap();
        let p = measure(&inst, round as u64, false);
        peb.push(p.peb_prq);
        bx.push(p.bx_prq);
    }
    let within = |v: &[f64]| v.iter().all(|x| (x / v[0] - 1.0).abs() <= 0.20);
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.1}")).collect::<Vec<_>>().join(",");
    outcome(within(&peb) && within(&bx), format!("peb [{}]; baseline [{}]", fmt(&peb), fmt(&bx)))
}

fn prep_linearity() -> Outcome {
    let t = match measure_preprocessing(&defaults(), &DESK_NS, 3) {
        Ok(t) => t,
        Err(e) => return outcome(false, e.to_string()),
    };
    let pts: Vec<(f64, f64)> = t.iter().map(|p| (p.n as f64, p.secs)).collect();
    let r2 = linear_r2(&pts);
    let s: Vec<String> = t.iter().map(|p| format!("{}:{:.3}s", p.n, p.secs)).collect();
    outcome(r2 > 0.95, format!("R^2 {r2:.4} [{}]", s.join(", ")))
}

// --- structural suites -------------------------------------------------------

fn shadow_audit() -> Result<(), String> {
    let cfg = TreeConfig { leaf_capacity: 8, inner_capacity: 6, buffer_pages: 16 };
    let mut tree = BPlusTree::new(cfg);
    let mut shadow: BTreeSet<(u64, u64)> = BTreeSet::new();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for step in 0..100_000u32 {
        let key = rng.gen_range(0..4_000u64);
        let uid = rng.gen_range(0..4u64);
        let e = LeafEntry { key, uid, x: 0.0, y: 0.0, vx: 0.0, vy: 0.0, t: 0.0, policy_ref: 0 };
        if rng.gen_bool(0.55) {
            let res = tree.insert(e);
            if res.is_ok() != shadow.insert((key, uid)) {
                return Err(format!("insert disagreement at step {step}"));
            }
        } else {
            let res = tree.delete(key, uid);
            if res.is_ok() != shadow.remove(&(key, uid)) {
                return Err(format!("delete disagreement at step {step}"));
            }
        }
        if step % 5_000 == 0 {
            tree.check_invariants()?;
        }
    }
    tree.check_invariants()?;
    let got: Vec<(u64, u64)> = tree.entries().iter().map(|e| (e.key, e.uid)).collect();
    if got != shadow.into_iter().collect::<Vec<_>>() {
        return Err("final contents differ".into());
    }
    Ok(())
}

fn z_round_trip() -> Result<(), String> {
    for levels in 1..=5 {
        for order in [BitOrder::XLow, BitOrder::YLow] {
            let g = GridConfig::new(1.0, levels).with_order(order);
            let side = g.cells_per_axis();
            let mut seen = vec![false; (side * side) as usize];
            for cx in 0..side {
                for cy in 0..side {
                    let z = g.z_encode(cx, cy).map_err(|e| e.to_string())?;
                    if g.z_decode(z).map_err(|e| e.to_string())? != (cx, cy) || seen[z as usize] {
                        return Err(format!("levels {levels}: ({cx},{cy}) -> {z}"));
                    }
                    seen[z as usize] = true;
                }
            }
        }
    }
    Ok(())
}

fn key_order() -> Result<(), String> {
    let layout = KeyLayout::peb(3, 5_000.0, 8, 20).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let tuple = |rng: &mut ChaCha8Rng| {
        let tid = rng.gen_range(0..3u32);
        let svq = rng.gen_range(0..(5_000u64 << 8));
        let z = rng.gen_range(0..(1u64 << 20));
        (tid, svq, z)
    };
    for _ in 0..100_000 {
        let a = tuple(&mut rng);
        let b = tuple(&mut rng);
        let ka = layout.compose(a.0, a.1, a.2).map_err(|e| e.to_string())?;
        let kb = layout.compose(b.0, b.1, b.2).map_err(|e| e.to_string())?;
        if a.cmp(&b) != ka.cmp(&kb) || layout.split(ka) != a {
            return Err(format!("{a:?} vs {b:?}"));
        }
    }
    Ok(())
}

fn skip_rule_safety(insts: &[Instance]) -> Result<(), String> {
    let mut n = 0;
    for inst in insts.iter().take(5) {
        for q in inst.range_queries(7) {
            let fl = inst.friends.get(q.qid).map_err(|e| e.to_string())?;
            let with = prq(&inst.peb, &inst.policies, fl, &q, PrqOptions::default()).map_err(|e| e.to_string())?;
            let without = prq(&inst.peb, &inst.policies, fl, &q, PrqOptions { skip_rule: false, ..Default::default() })
                .map_err(|e| e.to_string())?;
            if with.0 != without.0 || with.0 != oracle_range(&inst.objects, &inst.policies, &q) {
                return Err(format!("query {q:?}"));
            }
            if with.1.io > without.1.io {
                return Err(format!("skip rule read more pages on {q:?}"));
            }
            n += 1;
        }
    }
    if n != 500 {
        return Err(format!("ran {n} queries"));
    }
    Ok(())
}

fn structural(insts: &[Instance]) -> Outcome {
    let suites: [(&str, Box<dyn Fn() -> Result<(), String> + '_>); 4] = [
        ("shadow-set audit", Box::new(shadow_audit)),
        ("z round trip", Box::new(z_round_trip)),
        ("key order", Box::new(key_order)),
        ("skip rule", Box::new(|| skip_rule_safety(insts))),
    ];
    let mut ok = true;
    let mut detail = Vec::new();
    for (name, f) in suites {
        match f() {
            Ok(()) => detail.push(format!("{name} ok")),
            Err(e) => {
                ok = false;
                detail.push(format!("{name} FAILED: {e}"));
            }
        }
    }
    outcome(ok, detail.join("; "))
}

fn main() {
    let only: Option<Vec<usize>> =
        std::env::var("ACCEPTANCE_ONLY").ok().map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let wanted = |i: usize| only.as_ref().map_or(true, |v| v.contains(&i));
    let insts = if wanted(3) || wanted(4) || wanted(11) { small_instances() } else { Vec::new() };
    let criteria: Vec<(usize, &str, Box<dyn Fn() -> Outcome + '_>)> = vec![
        (1, "golden sequence assignment", Box::new(golden_sv)),
        (2, "golden z decomposition", Box::new(golden_z)),
        (3, "range query oracle equivalence", Box::new(|| prq_equivalence(&insts))),
        (4, "kNN oracle equivalence", Box::new(|| pknn_equivalence(&insts))),
        (5, "size trend", Box::new(size_trend)),
        (6, "grouping-factor trend", Box::new(theta_trend)),
        (7, "window trend", Box::new(window_trend)),
        (8, "cost model", Box::new(cost_model)),
        (9, "update churn stability", Box::new(churn_stability)),
        (10, "preprocessing linearity", Box::new(prep_linearity)),
        (11, "structural suites", Box::new(|| structural(&insts))),
    ];
    let mut failed = 0;
    for (i, name, f) in criteria {
        if !wanted(i) {
            continue;
        }
        let t = Instant::now();
        let o = f();
        println!(
            "{} {i:>2} {name}: {} ({:.1}s)",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail,
            t.elapsed().as_secs_f64()
        );
        failed += usize::from(!o.pass);
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
