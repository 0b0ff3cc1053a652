//! Location-privacy policies, pairwise compatibility scoring and runtime
//! visibility checks.
//!
//! A policy `<role, region, times>` owned by `u` lets every member of `u`'s
//! relationship class `role` see `u` while `u` is inside `region` during
//! `times`. Time is cyclic with period `T`; intervals may wrap midnight.

use std::collections::{HashMap, HashSet};

use crate::error::{Error, Result};
use crate::geom::{Point, Rect};
use crate::UserId;

/// Sorted, disjoint, half-open intervals inside `[0, period)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSet {
    intervals: Vec<(f64, f64)>,
    period: f64,
}

impl TimeSet {
    pub fn empty(period: f64) -> Self {
        Self { intervals: Vec::new(), period }
    }

    pub fn full(period: f64) -> Self {
        Self { intervals: vec![(0.0, period)], period }
    }

    /// Interval from `start` to `end` on the cycle. `start > end` wraps past
    /// the end of the period; `start == end` is the empty set.
    pub fn cyclic(start: f64, end: f64, period: f64) -> Result<Self> {
        if !(0.0..=period).contains(&start) || !(0.0..=period).contains(&end) {
            return Err(Error::InvalidPolicy(format!("time [{start}, {end}) outside [0, {period}]")));
        }
        let mut s = Self::empty(period);
        if start < end {
            s.intervals.push((start, end));
        } else if start > end {
            if end > 0.0 {
                s.intervals.push((0.0, end));
            }
            if start < period {
                s.intervals.push((start, period));
            }
        }
        Ok(s)
    }

    /// Builds a set from arbitrary intervals, merging overlaps.
    pub fn from_intervals(mut iv: Vec<(f64, f64)>, period: f64) -> Result<Self> {
        for &(a, b) in &iv {
            if a < 0.0 || b > period || a > b {
                return Err(Error::InvalidPolicy(format!("time interval [{a}, {b}) outside [0, {period}]")));
            }
        }
        iv.retain(|(a, b)| b > a);
        iv.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut merged: Vec<(f64, f64)> = Vec::with_capacity(iv.len());
        for (a, b) in iv {
            match merged.last_mut() {
                Some(last) if a <= last.1 => last.1 = last.1.max(b),
                _ => merged.push((a, b)),
            }
        }
        Ok(Self { intervals: merged, period })
    }

    pub fn intervals(&self) -> &[(f64, f64)] {
        &self.intervals
    }

    pub fn period(&self) -> f64 {
        self.period
    }

    pub fn duration(&self) -> f64 {
        self.intervals.iter().map(|(a, b)| b - a).sum()
    }

    /// Whether absolute time `t` falls in the set, reduced modulo the period.
    pub fn contains(&self, t: f64) -> bool {
        let tod = t.rem_euclid(self.period);
        self.intervals.iter().any(|&(a, b)| tod >= a && tod < b)
    }

    pub fn overlap(&self, other: &TimeSet) -> f64 {
        let (mut i, mut j, mut total) = (0, 0, 0.0);
        let (a, b) = (&self.intervals, &other.intervals);
        while i < a.len() && j < b.len() {
            let lo = a[i].0.max(b[j].0);
            let hi = a[i].1.min(b[j].1);
            if hi > lo {
                total += hi - lo;
            }
            if a[i].1 < b[j].1 {
                i += 1;
            } else {
                j += 1;
            }
        }
        total
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocationPrivacyPolicy {
    pub owner: UserId,
    pub role: String,
    pub region: Rect,
    pub times: TimeSet,
}

impl LocationPrivacyPolicy {
    pub fn permits(&self, loc: &Point, t: f64) -> bool {
        self.region.contains(loc) && self.times.contains(t)
    }
}

/// Per owner: relationship label -> members holding that relationship.
#[derive(Debug, Clone, Default)]
pub struct RelationshipGraph {
    roles: HashMap<UserId, HashMap<String, HashSet<UserId>>>,
}

impl RelationshipGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, owner: UserId, role: &str, member: UserId) {
        self.roles.entry(owner).or_default().entry(role.to_owned()).or_default().insert(member);
    }

    pub fn members(&self, owner: UserId, role: &str) -> impl Iterator<Item = UserId> + '_ {
        self.roles.get(&owner).and_then(|r| r.get(role)).into_iter().flat_map(|s| s.iter().copied())
    }

    pub fn is_member(&self, owner: UserId, role: &str, member: UserId) -> bool {
        self.roles.get(&owner).and_then(|r| r.get(role)).is_some_and(|s| s.contains(&member))
    }

    /// `(owner, role, member)` triples in deterministic order.
    pub fn triples(&self) -> Vec<(UserId, String, UserId)> {
        let mut out: Vec<_> = self
            .roles
            .iter()
            .flat_map(|(&o, roles)| roles.iter().flat_map(move |(r, ms)| ms.iter().map(move |&m| (o, r.clone(), m))))
            .collect();
        out.sort();
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CompatibilityScore {
    pub alpha: f64,
    pub c: f64,
    pub mutual: bool,
}

impl CompatibilityScore {
    pub const NONE: Self = Self { alpha: 0.0, c: 0.0, mutual: false };
}

/// Overlap score of the two directed policies between a pair of users.
/// `area` and `period` normalise region size and duration. Returns the score
/// and whether the pair can simultaneously see each other.
pub fn alpha(
    p12: Option<&LocationPrivacyPolicy>,
    p21: Option<&LocationPrivacyPolicy>,
    area: f64,
    period: f64,
) -> (f64, bool) {
    if let (Some(a), Some(b)) = (p12, p21) {
        let o = a.region.overlap_area(&b.region);
        let d = a.times.overlap(&b.times);
        if o > 0.0 && d > 0.0 {
            return ((o / area) * (d / period), true);
        }
    }
    let term = |p: Option<&LocationPrivacyPolicy>| {
        p.map_or(0.0, |p| (p.region.area() / area) * (p.times.duration() / period))
    };
    (0.5 * (term(p12) + term(p21)), false)
}

/// Degree of compatibility from an overlap score.
pub fn score(alpha: f64, mutual: bool) -> CompatibilityScore {
    if alpha <= 0.0 {
        CompatibilityScore::NONE
    } else if mutual {
        CompatibilityScore { alpha, c: 0.5 * (1.0 + alpha), mutual }
    } else {
        CompatibilityScore { alpha, c: alpha, mutual }
    }
}

pub type PolicyId = usize;

/// All policies of a population plus the lookup structures queries need.
#[derive(Debug, Clone)]
pub struct PolicyStore {
    space: Rect,
    period: f64,
    users: HashSet<UserId>,
    policies: Vec<LocationPrivacyPolicy>,
    graph: RelationshipGraph,
    /// (owner, viewer) -> policy granting viewer access to owner.
    by_pair: HashMap<(UserId, UserId), PolicyId>,
    /// viewer -> owners holding a policy that names the viewer.
    incoming: HashMap<UserId, Vec<UserId>>,
}

impl PolicyStore {
    /// Loads policies, resolving each role through `graph`. At most one
    /// policy may cover any ordered (owner, viewer) pair.
    pub fn new(
        users: impl IntoIterator<Item = UserId>,
        space: Rect,
        period: f64,
        policies: Vec<LocationPrivacyPolicy>,
        graph: RelationshipGraph,
    ) -> Result<Self> {
        let users: HashSet<UserId> = users.into_iter().collect();
        let mut by_pair = HashMap::new();
        let mut incoming: HashMap<UserId, Vec<UserId>> = HashMap::new();
        for (id, p) in policies.iter().enumerate() {
            if !users.contains(&p.owner) {
                return Err(Error::UnknownUser(p.owner));
            }
            if !space.contains_rect(&p.region) || !p.region.is_valid() {
                return Err(Error::InvalidPolicy(format!("region {:?} of user {} outside space", p.region, p.owner)));
            }
            let mut members: Vec<UserId> = graph.members(p.owner, &p.role).collect();
            members.sort_unstable();
            for viewer in members {
                if !users.contains(&viewer) {
                    return Err(Error::UnknownUser(viewer));
                }
                if by_pair.insert((p.owner, viewer), id).is_some() {
                    return Err(Error::DuplicatePairPolicy { owner: p.owner, viewer });
                }
                incoming.entry(viewer).or_default().push(p.owner);
            }
        }
        for owners in incoming.values_mut() {
            owners.sort_unstable();
        }
        Ok(Self { space, period, users, policies, graph, by_pair, incoming })
    }

    pub fn space_area(&self) -> f64 {
        self.space.area()
    }

    pub fn period(&self) -> f64 {
        self.period
    }

    pub fn policies(&self) -> &[LocationPrivacyPolicy] {
        &self.policies
    }

    pub fn graph(&self) -> &RelationshipGraph {
        &self.graph
    }

    pub fn user_count(&self) -> usize {
        self.users.len()
    }

    pub fn has_user(&self, u: UserId) -> bool {
        self.users.contains(&u)
    }

    /// Sorted user ids.
    pub fn users(&self) -> Vec<UserId> {
        let mut v: Vec<_> = self.users.iter().copied().collect();
        v.sort_unstable();
        v
    }

    /// The policy `owner` holds toward `viewer`, if any.
    pub fn policy_for(&self, owner: UserId, viewer: UserId) -> Option<&LocationPrivacyPolicy> {
        self.by_pair.get(&(owner, viewer)).map(|&id| &self.policies[id])
    }

    /// Owners whose policies name `viewer` (sorted by id).
    pub fn owners_visible_to(&self, viewer: UserId) -> &[UserId] {
        self.incoming.get(&viewer).map_or(&[], |v| v.as_slice())
    }

    /// True iff `owner` lets `viewer` see them at `loc` at time `t`.
    pub fn evaluate_visibility(&self, owner: UserId, viewer: UserId, loc: &Point, t: f64) -> Result<bool> {
        for u in [owner, viewer] {
            if !self.users.contains(&u) {
                return Err(Error::UnknownUser(u));
            }
        }
        Ok(self.visible(owner, viewer, loc, t))
    }

    /// Unchecked variant for hot query loops.
    pub(crate) fn visible(&self, owner: UserId, viewer: UserId, loc: &Point, t: f64) -> bool {
        self.policy_for(owner, viewer).is_some_and(|p| {
            debug_assert!(self.graph.is_member(owner, &p.role, viewer));
            p.permits(loc, t)
        })
    }

    pub fn compatibility(&self, u1: UserId, u2: UserId) -> CompatibilityScore {
        let (a, mutual) = alpha(self.policy_for(u1, u2), self.policy_for(u2, u1), self.space_area(), self.period);
        score(a, mutual)
    }

    /// Compatibility of every pair linked by at least one policy.
    pub fn compatibility_table(&self) -> CompatibilityTable {
        let mut table = CompatibilityTable::new();
        for &(owner, viewer) in self.by_pair.keys() {
            let (lo, hi) = (owner.min(viewer), owner.max(viewer));
            if lo == hi || table.contains(lo, hi) {
                continue;
            }
            let s = self.compatibility(lo, hi);
            if s.c > 0.0 {
                table.set(lo, hi, s.c);
            }
        }
        table.sort_neighbours();
        table
    }
}

/// Symmetric sparse map of non-zero compatibility degrees.
#[derive(Debug, Clone, Default)]
pub struct CompatibilityTable {
    values: HashMap<(UserId, UserId), f64>,
    related: HashMap<UserId, Vec<UserId>>,
}

impl CompatibilityTable {
    pub fn new() -> Self {
        Self::default()
    }

    fn contains(&self, a: UserId, b: UserId) -> bool {
        self.values.contains_key(&(a.min(b), a.max(b)))
    }

    /// Stores `C(a, b) = C(b, a) = c`. Zero removes nothing and is ignored.
    pub fn set(&mut self, a: UserId, b: UserId, c: f64) {
        if c <= 0.0 || a == b {
            return;
        }
        if self.values.insert((a.min(b), a.max(b)), c).is_none() {
            self.related.entry(a).or_default().push(b);
            self.related.entry(b).or_default().push(a);
        }
    }

    fn sort_neighbours(&mut self) {
        for v in self.related.values_mut() {
            v.sort_unstable();
        }
    }

    pub fn get(&self, a: UserId, b: UserId) -> f64 {
        self.values.get(&(a.min(b), a.max(b))).copied().unwrap_or(0.0)
    }

    /// Users with non-zero compatibility to `u`.
    pub fn related_users(&self, u: UserId) -> &[UserId] {
        self.related.get(&u).map_or(&[], |v| v.as_slice())
    }

    pub fn pair_count(&self) -> usize {
        self.values.len()
    }
}

impl FromIterator<(UserId, UserId, f64)> for CompatibilityTable {
    fn from_iter<I: IntoIterator<Item = (UserId, UserId, f64)>>(iter: I) -> Self {
        let mut t = Self::new();
        for (a, b, c) in iter {
            t.set(a, b, c);
        }
        t.sort_neighbours();
        t
    }
}
