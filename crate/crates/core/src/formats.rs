//! Delimited text formats for datasets, policies, relationships and query
//! batches. Every file starts with a header row.
//!
//! Policy records carry one time interval each; `t_lo > t_hi` wraps past the
//! end of the day. Records sharing owner and role are merged into a single
//! policy and must agree on the region.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{Point, Rect};
use crate::motion::MovingObject;
use crate::policy::{LocationPrivacyPolicy, RelationshipGraph, TimeSet};
use crate::query::{PknnRequest, PrqRequest};
use crate::UserId;

fn parse_err(e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
    Error::Parse { line, msg: e.to_string() }
}

fn write_err(e: csv::Error) -> Error {
    Error::Io(e.to_string())
}

fn read_records<T: for<'de> Deserialize<'de>>(r: impl Read) -> Result<Vec<(usize, T)>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).comment(Some(b'#')).from_reader(r);
    let headers = rdr.headers().map_err(parse_err)?.clone();
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(parse_err)?;
        let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
        let row: T = rec.deserialize(Some(&headers)).map_err(|e| Error::Parse { line, msg: e.to_string() })?;
        out.push((line, row));
    }
    Ok(out)
}

fn write_records<T: Serialize>(w: impl Write, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    for row in rows {
        wtr.serialize(row).map_err(write_err)?;
    }
    wtr.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// dataset

#[derive(Debug, Serialize, Deserialize)]
struct ObjectRow {
    uid: UserId,
    x: f64,
    y: f64,
    vx: f64,
    vy: f64,
    t_u: f64,
}

pub fn read_objects(r: impl Read) -> Result<Vec<MovingObject>> {
    let rows: Vec<(usize, ObjectRow)> = read_records(r)?;
    Ok(rows.into_iter().map(|(_, o)| MovingObject::new(o.uid, o.x, o.y, o.vx, o.vy, o.t_u)).collect())
}

pub fn write_objects(w: impl Write, objects: &[MovingObject]) -> Result<()> {
    write_records(
        w,
        objects.iter().map(|o| ObjectRow { uid: o.uid, x: o.x, y: o.y, vx: o.vx, vy: o.vy, t_u: o.t_u }),
    )
}

// ---------------------------------------------------------------------------
// policies

#[derive(Debug, Serialize, Deserialize)]
struct PolicyRow {
    owner_id: UserId,
    role_label: String,
    x_lo: f64,
    y_lo: f64,
    x_hi: f64,
    y_hi: f64,
    t_lo: f64,
    t_hi: f64,
}

/// Reads policies over a cyclic day of length `period`.
pub fn read_policies(r: impl Read, period: f64) -> Result<Vec<LocationPrivacyPolicy>> {
    let rows: Vec<(usize, PolicyRow)> = read_records(r)?;
    let mut grouped: BTreeMap<(UserId, String), (Rect, Vec<(f64, f64)>)> = BTreeMap::new();
    for (line, row) in rows {
        let region = Rect::new(row.x_lo, row.y_lo, row.x_hi, row.y_hi);
        if !region.is_valid() {
            return Err(Error::Parse { line, msg: format!("inverted region {region:?}") });
        }
        let times = TimeSet::cyclic(row.t_lo, row.t_hi, period).map_err(|e| Error::Parse { line, msg: e.to_string() })?;
        let entry = grouped.entry((row.owner_id, row.role_label)).or_insert((region, Vec::new()));
        if entry.0 != region {
            return Err(Error::Parse { line, msg: "records of one policy disagree on the region".into() });
        }
        entry.1.extend_from_slice(times.intervals());
    }
    grouped
        .into_iter()
        .map(|((owner, role), (region, iv))| {
            Ok(LocationPrivacyPolicy { owner, role, region, times: TimeSet::from_intervals(iv, period)? })
        })
        .collect()
}

/// Splits a time set into records; a set touching both ends of the day is
/// written as one wrapping record.
fn time_records(t: &TimeSet) -> Vec<(f64, f64)> {
    let mut iv = t.intervals().to_vec();
    if iv.is_empty() {
        return vec![(0.0, 0.0)];
    }
    if iv.len() == 1 && iv[0] == (0.0, t.period()) {
        return iv;
    }
    if iv.len() > 1 && iv[0].0 == 0.0 && iv[iv.len() - 1].1 == t.period() {
        let head = iv.remove(0);
        let last = iv.len() - 1;
        iv[last] = (iv[last].0, head.1);
    }
    iv
}

pub fn write_policies(w: impl Write, policies: &[LocationPrivacyPolicy]) -> Result<()> {
    let rows = policies.iter().flat_map(|p| {
        time_records(&p.times).into_iter().map(move |(t_lo, t_hi)| PolicyRow {
            owner_id: p.owner,
            role_label: p.role.clone(),
            x_lo: p.region.x_lo,
            y_lo: p.region.y_lo,
            x_hi: p.region.x_hi,
            y_hi: p.region.y_hi,
            t_lo,
            t_hi,
        })
    });
    write_records(w, rows)
}

// ---------------------------------------------------------------------------
// relationships

#[derive(Debug, Serialize, Deserialize)]
struct RelationRow {
    owner_id: UserId,
    role_label: String,
    member_id: UserId,
}

pub fn read_relationships(r: impl Read) -> Result<RelationshipGraph> {
    let rows: Vec<(usize, RelationRow)> = read_records(r)?;
    let mut g = RelationshipGraph::new();
    for (_, row) in rows {
        g.add(row.owner_id, &row.role_label, row.member_id);
    }
    Ok(g)
}

pub fn write_relationships(w: impl Write, graph: &RelationshipGraph) -> Result<()> {
    write_records(
        w,
        graph.triples().into_iter().map(|(owner_id, role_label, member_id)| RelationRow { owner_id, role_label, member_id }),
    )
}

// ---------------------------------------------------------------------------
// queries

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum QuerySpec {
    Range(PrqRequest),
    Knn(PknnRequest),
}

impl QuerySpec {
    pub fn qid(&self) -> UserId {
        match self {
            QuerySpec::Range(r) => r.qid,
            QuerySpec::Knn(r) => r.qid,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct QueryRow {
    kind: String,
    qid: UserId,
    t_q: f64,
    x_lo: Option<f64>,
    y_lo: Option<f64>,
    x_hi: Option<f64>,
    y_hi: Option<f64>,
    x: Option<f64>,
    y: Option<f64>,
    k: Option<usize>,
}

pub fn read_queries(r: impl Read) -> Result<Vec<QuerySpec>> {
    let rows: Vec<(usize, QueryRow)> = read_records(r)?;
    rows.into_iter()
        .map(|(line, q)| {
            let missing = |f: &str| Error::Parse { line, msg: format!("{} query lacks {f}", q.kind) };
            match q.kind.as_str() {
                "range" => {
                    let rect = Rect::new(
                        q.x_lo.ok_or_else(|| missing("x_lo"))?,
                        q.y_lo.ok_or_else(|| missing("y_lo"))?,
                        q.x_hi.ok_or_else(|| missing("x_hi"))?,
                        q.y_hi.ok_or_else(|| missing("y_hi"))?,
                    );
                    Ok(QuerySpec::Range(PrqRequest { qid: q.qid, rect, t_q: q.t_q }))
                }
                "knn" => Ok(QuerySpec::Knn(PknnRequest {
                    qid: q.qid,
                    loc: Point::new(q.x.ok_or_else(|| missing("x"))?, q.y.ok_or_else(|| missing("y"))?),
                    k: q.k.ok_or_else(|| missing("k"))?,
                    t_q: q.t_q,
                })),
                other => Err(Error::Parse { line, msg: format!("unknown query kind {other:?}") }),
            }
        })
        .collect()
}

pub fn write_queries(w: impl Write, queries: &[QuerySpec]) -> Result<()> {
    write_records(
        w,
        queries.iter().map(|q| match q {
            QuerySpec::Range(r) => QueryRow {
                kind: "range".into(),
                qid: r.qid,
                t_q: r.t_q,
                x_lo: Some(r.rect.x_lo),
                y_lo: Some(r.rect.y_lo),
                x_hi: Some(r.rect.x_hi),
                y_hi: Some(r.rect.y_hi),
                x: None,
                y: None,
                k: None,
            },
            QuerySpec::Knn(r) => QueryRow {
                kind: "knn".into(),
                qid: r.qid,
                t_q: r.t_q,
                x_lo: None,
                y_lo: None,
                x_hi: None,
                y_hi: None,
                x: Some(r.loc.x),
                y: Some(r.loc.y),
                k: Some(r.k),
            },
        }),
    )
}
