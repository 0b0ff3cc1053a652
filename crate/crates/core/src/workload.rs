//! Synthetic datasets, grouped policy sets, query streams and update churn.
//!
//! Every generator draws from its own ChaCha stream derived from the
//! workload seed, so changing e.g. the grouping factor leaves the object
//! positions untouched.

use std::collections::HashSet;

use petgraph::algo::astar;
use petgraph::graph::{NodeIndex, UnGraph};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geom::{Point, Rect};
use crate::motion::MovingObject;
use crate::policy::{LocationPrivacyPolicy, PolicyStore, RelationshipGraph, TimeSet};
use crate::query::{PknnRequest, PrqRequest};
use crate::UserId;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Distribution {
    Uniform,
    /// Objects travel along routes between this many destinations.
    Network { destinations: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WorkloadConfig {
    pub n: usize,
    pub max_speed: f64,
    pub side: f64,
    pub distribution: Distribution,
    /// Policies per user.
    pub n_p: usize,
    /// Fraction of each user's policies that target its own group.
    pub theta: f64,
    pub group_size: usize,
    pub seed: u64,
    pub delta_t_mu: f64,
    /// Length of the cyclic policy time domain.
    pub period: f64,
    pub policy_side: (f64, f64),
    pub policy_duration: (f64, f64),
    pub window: f64,
    pub k: usize,
    pub queries: usize,
}

impl Default for WorkloadConfig {
    fn default() -> Self {
        let period = 1440.0;
        Self {
            n: 10_000,
            max_speed: 3.0,
            side: 1000.0,
            distribution: Distribution::Uniform,
            n_p: 50,
            theta: 0.7,
            group_size: 100,
            seed: 1,
            delta_t_mu: 120.0,
            period,
            policy_side: (50.0, 300.0),
            policy_duration: (period / 6.0, period / 2.0),
            window: 200.0,
            k: 5,
            queries: 200,
        }
    }
}

impl WorkloadConfig {
    pub fn space(&self) -> Rect {
        Rect::new(0.0, 0.0, self.side, self.side)
    }

    /// Time at which a freshly generated dataset is current.
    pub fn now(&self) -> f64 {
        self.delta_t_mu
    }

    fn rng(&self, stream: u64) -> ChaCha8Rng {
        let mut r = ChaCha8Rng::seed_from_u64(self.seed);
        r.set_stream(stream);
        r
    }
}

const STREAM_OBJECTS: u64 = 1;
const STREAM_POLICIES: u64 = 2;
const STREAM_RANGE: u64 = 3;
const STREAM_KNN: u64 = 4;
const STREAM_CHURN: u64 = 5;

fn random_velocity(rng: &mut impl Rng, max_speed: f64) -> (f64, f64) {
    let speed = if max_speed > 0.0 { rng.gen_range(0.0..=max_speed) } else { 0.0 };
    let dir = rng.gen_range(0.0..std::f64::consts::TAU);
    (speed * dir.cos(), speed * dir.sin())
}

/// `n` objects placed uniformly, moving in uniform directions at speeds
/// uniform in `[0, max_speed]`, last updated uniformly in `[0, delta_t_mu)`.
pub fn gen_uniform(cfg: &WorkloadConfig) -> Vec<MovingObject> {
    let mut rng = cfg.rng(STREAM_OBJECTS);
    (0..cfg.n as UserId)
        .map(|uid| {
            let x = rng.gen_range(0.0..cfg.side);
            let y = rng.gen_range(0.0..cfg.side);
            let (vx, vy) = random_velocity(&mut rng, cfg.max_speed);
            let t_u = rng.gen_range(0.0..cfg.delta_t_mu);
            MovingObject::new(uid, x, y, vx, vy, t_u)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// network movement

pub const SPEED_CLASSES: [f64; 3] = [0.75, 1.5, 3.0];

/// Distance over which an object speeds up after leaving, and slows down
/// before reaching, a destination.
const RAMP: f64 = 40.0;
const MIN_SPEED_FRACTION: f64 = 0.1;

/// Route network: destinations joined by two-way roads.
#[derive(Debug, Clone)]
pub struct RoadNetwork {
    pub graph: UnGraph<Point, f64>,
}

impl RoadNetwork {
    /// `destinations` uniform points joined by a random spanning tree plus
    /// random extra roads until the average degree reaches 3.
    pub fn generate(destinations: usize, side: f64, rng: &mut impl Rng) -> Result<Self> {
        if destinations < 2 {
            return Err(Error::Infeasible("a road network needs at least two destinations".into()));
        }
        let mut graph = UnGraph::<Point, f64>::with_capacity(destinations, destinations * 2);
        let nodes: Vec<NodeIndex> =
            (0..destinations).map(|_| graph.add_node(Point::new(rng.gen_range(0.0..side), rng.gen_range(0.0..side)))).collect();
        let len = |g: &UnGraph<Point, f64>, a: NodeIndex, b: NodeIndex| g[a].dist(&g[b]);
        for i in 1..destinations {
            // attach to the nearest of a few random earlier nodes
            let j = (0..3)
                .map(|_| rng.gen_range(0..i))
                .min_by(|&a, &b| len(&graph, nodes[i], nodes[a]).total_cmp(&len(&graph, nodes[i], nodes[b])))
                .unwrap();
            let w = len(&graph, nodes[i], nodes[j]);
            graph.add_edge(nodes[i], nodes[j], w);
        }
        let target_edges = (3 * destinations) / 2;
        let mut attempts = 0;
        while graph.edge_count() < target_edges && attempts < 100 * destinations {
            attempts += 1;
            let a = nodes[rng.gen_range(0..destinations)];
            let b = nodes[rng.gen_range(0..destinations)];
            if a != b && graph.find_edge(a, b).is_none() {
                let w = len(&graph, a, b);
                graph.add_edge(a, b, w);
            }
        }
        Ok(Self { graph })
    }

    pub fn destinations(&self) -> usize {
        self.graph.node_count()
    }

    fn route(&self, from: NodeIndex, to: NodeIndex) -> Vec<NodeIndex> {
        astar(&self.graph, from, |n| n == to, |e| *e.weight(), |_| 0.0).map(|(_, p)| p).unwrap_or_else(|| vec![from])
    }

    /// True when `p` lies on some road (within `tol`).
    pub fn on_road(&self, p: &Point, tol: f64) -> bool {
        self.graph.edge_indices().any(|e| {
            let (a, b) = self.graph.edge_endpoints(e).unwrap();
            segment_distance(p, &self.graph[a], &self.graph[b]) <= tol
        })
    }
}

fn segment_distance(p: &Point, a: &Point, b: &Point) -> f64 {
    let (dx, dy) = (b.x - a.x, b.y - a.y);
    let l2 = dx * dx + dy * dy;
    let t = if l2 == 0.0 { 0.0 } else { (((p.x - a.x) * dx + (p.y - a.y) * dy) / l2).clamp(0.0, 1.0) };
    p.dist(&Point::new(a.x + t * dx, a.y + t * dy))
}

/// One object's trip state on the road network.
#[derive(Debug, Clone)]
pub struct NetworkTraveller {
    pub uid: UserId,
    pub max_speed: f64,
    /// Remaining route, starting with the node last left.
    path: Vec<NodeIndex>,
    /// Distance covered on the current road.
    along: f64,
    /// Distance covered since the trip's origin and the trip's length.
    trip_done: f64,
    trip_len: f64,
    /// Simulation clock.
    pub time: f64,
}

impl NetworkTraveller {
    fn seg(&self, net: &RoadNetwork) -> (Point, Point, f64) {
        let a = net.graph[self.path[0]];
        let b = net.graph[self.path[1]];
        (a, b, a.dist(&b))
    }

    pub fn position(&self, net: &RoadNetwork) -> Point {
        let (a, b, l) = self.seg(net);
        let f = if l == 0.0 { 0.0 } else { self.along / l };
        Point::new(a.x + f * (b.x - a.x), a.y + f * (b.y - a.y))
    }

    /// Trapezoidal speed: ramps up leaving the origin, down nearing the target.
    pub fn speed(&self) -> f64 {
        let edge = self.trip_done.min(self.trip_len - self.trip_done).max(0.0);
        self.max_speed * (edge / RAMP).clamp(MIN_SPEED_FRACTION, 1.0)
    }

    pub fn velocity(&self, net: &RoadNetwork) -> (f64, f64) {
        let (a, b, l) = self.seg(net);
        if l == 0.0 {
            return (0.0, 0.0);
        }
        let s = self.speed() / l;
        ((b.x - a.x) * s, (b.y - a.y) * s)
    }

    fn new_trip(&mut self, net: &RoadNetwork, from: NodeIndex, rng: &mut impl Rng) {
        let n = net.destinations();
        let mut to = NodeIndex::new(rng.gen_range(0..n));
        if to == from {
            to = NodeIndex::new((to.index() + 1) % n);
        }
        self.path = net.route(from, to);
        if self.path.len() < 2 {
            self.path = vec![from, net.graph.neighbors(from).next().unwrap_or(from)];
        }
        self.along = 0.0;
        self.trip_done = 0.0;
        self.trip_len = self.path.windows(2).map(|w| net.graph[w[0]].dist(&net.graph[w[1]])).sum();
    }

    /// Moves forward to time `t` in unit time steps.
    pub fn advance(&mut self, net: &RoadNetwork, t: f64, rng: &mut impl Rng) {
        while self.time < t {
            let dt = (t - self.time).min(1.0);
            let mut left = self.speed() * dt;
            while left > 0.0 {
                let (_, _, l) = self.seg(net);
                let room = l - self.along;
                if left < room {
                    self.along += left;
                    self.trip_done += left;
                    left = 0.0;
                } else {
                    left -= room;
                    self.trip_done += room;
                    self.path.remove(0);
                    self.along = 0.0;
                    if self.path.len() < 2 {
                        let at = self.path[0];
                        self.new_trip(net, at, rng);
                        left = left.min(self.speed() * dt);
                    }
                }
            }
            self.time += dt;
        }
    }

    pub fn report(&self, net: &RoadNetwork) -> MovingObject {
        let p = self.position(net);
        let (vx, vy) = self.velocity(net);
        MovingObject::new(self.uid, p.x, p.y, vx, vy, self.time)
    }
}

/// Objects on a road network plus the state needed to keep moving them.
#[derive(Debug, Clone)]
pub struct NetworkScript {
    pub network: RoadNetwork,
    pub travellers: Vec<NetworkTraveller>,
    rng: ChaCha8Rng,
}

impl NetworkScript {
    /// Advances `uid` to `now` and returns its fresh report.
    pub fn report_at(&mut self, uid: UserId, now: f64) -> MovingObject {
        let t = &mut self.travellers[uid as usize];
        t.advance(&self.network, now, &mut self.rng);
        t.report(&self.network)
    }
}

/// Objects spread over a road network, one third per speed class, each on
/// a trip toward a random destination. Reports carry the position and the
/// velocity along the current road.
pub fn gen_network(cfg: &WorkloadConfig) -> Result<(Vec<MovingObject>, NetworkScript)> {
    let Distribution::Network { destinations } = cfg.distribution else {
        return Err(Error::Infeasible("network generation needs a network distribution".into()));
    };
    let mut rng = cfg.rng(STREAM_OBJECTS);
    let network = RoadNetwork::generate(destinations, cfg.side, &mut rng)?;
    let mut travellers = Vec::with_capacity(cfg.n);
    for uid in 0..cfg.n as UserId {
        let class = SPEED_CLASSES[rng.gen_range(0..SPEED_CLASSES.len())];
        let mut t = NetworkTraveller {
            uid,
            max_speed: class * cfg.max_speed / 3.0,
            path: Vec::new(),
            along: 0.0,
            trip_done: 0.0,
            trip_len: 0.0,
            time: 0.0,
        };
        let from = NodeIndex::new(rng.gen_range(0..destinations));
        t.new_trip(&network, from, &mut rng);
        // start somewhere along the first road
        let (_, _, l) = t.seg(&network);
        t.along = rng.gen_range(0.0..=l);
        t.trip_done = t.along;
        t.time = rng.gen_range(0.0..cfg.delta_t_mu);
        travellers.push(t);
    }
    let objects = travellers.iter().map(|t| t.report(&network)).collect();
    Ok((objects, NetworkScript { network, travellers, rng: cfg.rng(STREAM_CHURN) }))
}

/// Dataset for the configured distribution.
pub fn gen_objects(cfg: &WorkloadConfig) -> Result<(Vec<MovingObject>, Option<NetworkScript>)> {
    match cfg.distribution {
        Distribution::Uniform => Ok((gen_uniform(cfg), None)),
        Distribution::Network { .. } => gen_network(cfg).map(|(o, s)| (o, Some(s))),
    }
}

// ---------------------------------------------------------------------------
// policies

#[derive(Debug, Clone)]
pub struct PolicySet {
    pub policies: Vec<LocationPrivacyPolicy>,
    pub graph: RelationshipGraph,
    /// Group of each user, indexed by position in the user slice.
    pub group_of: Vec<usize>,
    /// Policies whose target shares the owner's group.
    pub in_group: usize,
}

impl PolicySet {
    pub fn into_store(self, users: &[UserId], space: Rect, period: f64) -> Result<PolicyStore> {
        PolicyStore::new(users.iter().copied(), space, period, self.policies, self.graph)
    }

    /// Realized in-group share of all policies.
    pub fn realized_theta(&self) -> f64 {
        if self.policies.is_empty() {
            0.0
        } else {
            self.in_group as f64 / self.policies.len() as f64
        }
    }
}

pub fn role_for(target: UserId) -> String {
    format!("peer:{target}")
}

/// Splits users into random groups of `group_size` and gives every user
/// `n_p` policies toward distinct targets: `theta * n_p` of them (rounded
/// at random to keep the expectation exact) inside the own group, the rest
/// outside it. With `theta == 0` targets are drawn from everyone.
pub fn gen_policies(users: &[UserId], cfg: &WorkloadConfig) -> Result<PolicySet> {
    let n = users.len();
    if !(0.0..=1.0).contains(&cfg.theta) {
        return Err(Error::Infeasible(format!("theta {} outside [0, 1]", cfg.theta)));
    }
    if cfg.group_size == 0 {
        return Err(Error::Infeasible("group size must be positive".into()));
    }
    if n > 0 && cfg.n_p >= n {
        return Err(Error::Infeasible(format!("{} policies per user need more than {n} users", cfg.n_p)));
    }
    let wanted = cfg.theta * cfg.n_p as f64;
    let max_in = wanted.ceil() as usize;
    let smallest_group = if n.is_multiple_of(cfg.group_size) || n < cfg.group_size { cfg.group_size.min(n) } else { n % cfg.group_size };
    if cfg.theta > 0.0 && n > 0 && max_in + 1 > smallest_group {
        return Err(Error::Infeasible(format!(
            "{max_in} in-group policies need groups larger than {smallest_group} users"
        )));
    }
    let min_out = cfg.n_p - wanted.floor() as usize;
    if cfg.theta > 0.0 && n > 0 && min_out > n - cfg.group_size.min(n) {
        return Err(Error::Infeasible(format!("{min_out} out-of-group policies need more users outside each group")));
    }

    let mut rng = cfg.rng(STREAM_POLICIES);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut group_of = vec![0; n];
    let mut members: Vec<Vec<usize>> = Vec::new();
    for (rank, &i) in order.iter().enumerate() {
        let g = rank / cfg.group_size;
        if members.len() <= g {
            members.push(Vec::new());
        }
        members[g].push(i);
        group_of[i] = g;
    }
    // a short trailing group joins the previous one
    if members.len() > 1 && members.last().unwrap().len() < cfg.group_size {
        let tail = members.pop().unwrap();
        let g = members.len() - 1;
        for &i in &tail {
            group_of[i] = g;
        }
        members[g].extend(tail);
    }

    let mut policies = Vec::with_capacity(n * cfg.n_p);
    let mut graph = RelationshipGraph::new();
    let mut in_group = 0;
    let mut chosen: HashSet<usize> = HashSet::new();
    for owner in 0..n {
        chosen.clear();
        let frac = wanted - wanted.floor();
        let n_gr = if cfg.theta == 0.0 {
            0
        } else {
            wanted.floor() as usize + usize::from(frac > 0.0 && rng.gen_bool(frac))
        };
        let group = &members[group_of[owner]];
        for &t in group.choose_multiple(&mut rng, (n_gr + 1).min(group.len())).filter(|&&t| t != owner).take(n_gr) {
            chosen.insert(t);
        }
        let mut targets: Vec<usize> = chosen.iter().copied().collect();
        targets.sort_unstable();
        in_group += targets.iter().filter(|&&t| group_of[t] == group_of[owner]).count();
        let rest = cfg.n_p - targets.len();
        let mut picked = 0;
        while picked < rest {
            let t = rng.gen_range(0..n);
            if t == owner || chosen.contains(&t) {
                continue;
            }
            if cfg.theta > 0.0 && group_of[t] == group_of[owner] {
                continue;
            }
            chosen.insert(t);
            if group_of[t] == group_of[owner] {
                in_group += 1;
            }
            targets.push(t);
            picked += 1;
        }
        for t in targets {
            let policy = random_policy(users[owner], users[t], cfg, &mut rng)?;
            graph.add(users[owner], &policy.role, users[t]);
            policies.push(policy);
        }
    }
    Ok(PolicySet { policies, graph, group_of, in_group })
}

fn random_policy(owner: UserId, target: UserId, cfg: &WorkloadConfig, rng: &mut impl Rng) -> Result<LocationPrivacyPolicy> {
    let (lo, hi) = cfg.policy_side;
    let w = rng.gen_range(lo..=hi).min(cfg.side);
    let h = rng.gen_range(lo..=hi).min(cfg.side);
    let x = rng.gen_range(0.0..=cfg.side - w);
    let y = rng.gen_range(0.0..=cfg.side - h);
    let (dlo, dhi) = cfg.policy_duration;
    let dur = rng.gen_range(dlo..=dhi).min(cfg.period);
    let start = rng.gen_range(0.0..cfg.period);
    let end = (start + dur) % cfg.period;
    let times = if dur >= cfg.period { TimeSet::full(cfg.period) } else { TimeSet::cyclic(start, end, cfg.period)? };
    Ok(LocationPrivacyPolicy { owner, role: role_for(target), region: Rect::new(x, y, x + w, y + h), times })
}

// ---------------------------------------------------------------------------
// queries

/// Range queries: square windows of side `cfg.window` around uniform
/// centres, shifted to lie inside the space; issuers uniform; query times
/// uniform in `[now, now + delta_t_mu]`. `salt` separates batches.
pub fn gen_range_queries(cfg: &WorkloadConfig, users: &[UserId], now: f64, salt: u64) -> Vec<PrqRequest> {
    let mut rng = cfg.rng(STREAM_RANGE + 16 * salt);
    if users.is_empty() {
        return Vec::new();
    }
    let w = cfg.window.min(cfg.side);
    (0..cfg.queries)
        .map(|_| {
            let cx = rng.gen_range(0.0..=cfg.side);
            let cy = rng.gen_range(0.0..=cfg.side);
            let x = (cx - w / 2.0).clamp(0.0, cfg.side - w);
            let y = (cy - w / 2.0).clamp(0.0, cfg.side - w);
            let qid = *users.choose(&mut rng).unwrap();
            let t_q = rng.gen_range(now..=now + cfg.delta_t_mu);
            PrqRequest { qid, rect: Rect::new(x, y, x + w, y + w), t_q }
        })
        .collect()
}

/// kNN queries issued by uniform users from their own predicted position
/// (clamped into the space).
pub fn gen_knn_queries(cfg: &WorkloadConfig, objects: &[MovingObject], now: f64, salt: u64) -> Vec<PknnRequest> {
    let mut rng = cfg.rng(STREAM_KNN + 16 * salt);
    if objects.is_empty() {
        return Vec::new();
    }
    (0..cfg.queries)
        .map(|_| {
            let o = objects.choose(&mut rng).unwrap();
            let t_q = rng.gen_range(now..=now + cfg.delta_t_mu);
            let p = o.position_at(t_q);
            let loc = Point::new(p.x.clamp(0.0, cfg.side), p.y.clamp(0.0, cfg.side));
            PknnRequest { qid: o.uid, loc, k: cfg.k, t_q }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// update churn

/// Reflects a coordinate into `[0, side]`.
fn reflect(mut v: f64, side: f64) -> f64 {
    let period = 2.0 * side;
    v = v.rem_euclid(period);
    if v > side {
        period - v
    } else {
        v
    }
}

/// Rolling updates: each round advances the clock by a quarter of the
/// maximum update interval and refreshes every object whose last update is
/// the oldest quarter, so four rounds renew the whole dataset once.
#[derive(Debug, Clone)]
pub struct Churn {
    cfg: WorkloadConfig,
    rng: ChaCha8Rng,
    script: Option<NetworkScript>,
    pub now: f64,
    pub round: u32,
}

impl Churn {
    pub fn new(cfg: &WorkloadConfig, script: Option<NetworkScript>) -> Self {
        Self { cfg: *cfg, rng: cfg.rng(STREAM_CHURN), script, now: cfg.now(), round: 0 }
    }

    pub fn slice(&self) -> f64 {
        self.cfg.delta_t_mu / 4.0
    }

    /// Fresh reports for the objects due in the next round; advances `now`.
    /// Uniform objects keep their current (reflected) position and draw a
    /// new velocity.
    pub fn next_round(&mut self, objects: &[MovingObject]) -> Vec<MovingObject> {
        if self.round > 0 {
            self.now += self.slice();
        }
        self.round += 1;
        let now = self.now;
        let (lo, hi) = (now - self.cfg.delta_t_mu, now - self.cfg.delta_t_mu + self.slice());
        let mut out = Vec::new();
        for o in objects {
            if o.t_u < lo || o.t_u >= hi {
                continue;
            }
            let fresh = match self.script.as_mut() {
                Some(s) => s.report_at(o.uid, now),
                None => {
                    let p = o.position_at(now);
                    let (vx, vy) = random_velocity(&mut self.rng, self.cfg.max_speed);
                    MovingObject::new(o.uid, reflect(p.x, self.cfg.side), reflect(p.y, self.cfg.side), vx, vy, now)
                }
            };
            out.push(fresh);
        }
        out
    }
}
