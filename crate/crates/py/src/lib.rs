//! Python bindings: generate a workload, build both indexes and run
//! privacy-aware range and kNN queries against them or the oracles.

use pyo3::exceptions::{PyKeyError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use peb_core::bench::{cost_inputs, run_range_batch, set_workload_key, BufferReset, Instance as CoreInstance};
use peb_core::costmodel::{cost_c as core_cost_c, cost_c1 as core_cost_c1, fit_cost_params, CostInputs, CostParams};
use peb_core::geom::{Point, Rect};
use peb_core::index::IndexKind;
use peb_core::query::{
    baseline_knn, baseline_range, oracle_knn, oracle_range, pknn, prq, KnnResult, PknnRequest, PrqOptions,
    PrqRequest, Triangular,
};
use peb_core::workload::WorkloadConfig;
use peb_core::zcurve::{BitOrder, CellRect, GridConfig};
use peb_core::UserId;

fn err(e: peb_core::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn kind(name: &str) -> PyResult<IndexKind> {
    match name {
        "peb" => Ok(IndexKind::Peb),
        "bx" => Ok(IndexKind::Bx),
        other => Err(PyValueError::new_err(format!("unknown index {other:?}, expected 'peb' or 'bx'"))),
    }
}

fn neighbors(r: KnnResult) -> Vec<(UserId, f64)> {
    r.neighbors
}

/// A generated population with the policy-embedded and baseline indexes.
///
/// Keyword arguments override workload defaults: n, n_p, theta, group_size,
/// window, k, max_speed, side, seed, queries, delta_t_mu, destinations.
#[pyclass(unsendable, name = "Instance")]
struct Instance {
    inner: CoreInstance,
}

#[pymethods]
impl Instance {
    #[new]
    #[pyo3(signature = (**kwargs))]
    fn new(kwargs: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        let mut cfg = WorkloadConfig::default();
        if let Some(kw) = kwargs {
            for (k, v) in kw.iter() {
                let key: String = k.extract()?;
                let val = v.str()?.to_string();
                if !set_workload_key(&mut cfg, &key, &val).map_err(err)? {
                    return Err(PyKeyError::new_err(key));
                }
            }
        }
        Ok(Self { inner: CoreInstance::build(&cfg).map_err(err)? })
    }

    fn __len__(&self) -> usize {
        self.inner.objects.len()
    }

    /// Current time of the workload.
    #[getter]
    fn now(&self) -> f64 {
        self.inner.now
    }

    /// Seconds spent encoding policies into sequence values.
    #[getter]
    fn prep_secs(&self) -> f64 {
        self.inner.prep_secs
    }

    /// `(height, leaves, entries, pages)` of one index.
    #[pyo3(signature = (index = "peb"))]
    fn stats(&self, index: &str) -> PyResult<(u32, usize, usize, usize)> {
        let s = self.inner.index(kind(index)?).stats();
        Ok((s.height, s.leaf_count, s.entry_count, s.page_count))
    }

    /// `(uid, x, y, vx, vy, t_u)` of every user.
    fn objects(&self) -> Vec<(UserId, f64, f64, f64, f64, f64)> {
        self.inner.objects.iter().map(|o| (o.uid, o.x, o.y, o.vx, o.vy, o.t_u)).collect()
    }

    /// Generated range queries as `(qid, x_lo, y_lo, x_hi, y_hi, t_q)`.
    #[pyo3(signature = (salt = 0))]
    fn range_queries(&self, salt: u64) -> Vec<(UserId, f64, f64, f64, f64, f64)> {
        self.inner
            .range_queries(salt)
            .into_iter()
            .map(|q| (q.qid, q.rect.x_lo, q.rect.y_lo, q.rect.x_hi, q.rect.y_hi, q.t_q))
            .collect()
    }

    /// Generated kNN queries as `(qid, x, y, k, t_q)`.
    #[pyo3(signature = (salt = 0))]
    fn knn_queries(&self, salt: u64) -> Vec<(UserId, f64, f64, usize, f64)> {
        self.inner.knn_queries(salt).into_iter().map(|q| (q.qid, q.loc.x, q.loc.y, q.k, q.t_q)).collect()
    }

    /// Users visible to `qid` inside the window at `t_q`, with the page
    /// misses the query cost.
    #[pyo3(signature = (qid, x_lo, y_lo, x_hi, y_hi, t_q, index = "peb"))]
    #[allow(clippy::too_many_arguments)]
    fn prq(
        &self,
        qid: UserId,
        x_lo: f64,
        y_lo: f64,
        x_hi: f64,
        y_hi: f64,
        t_q: f64,
        index: &str,
    ) -> PyResult<(Vec<UserId>, u64)> {
        let q = PrqRequest { qid, rect: Rect::new(x_lo, y_lo, x_hi, y_hi), t_q };
        let inst = &self.inner;
        let (ids, stats) = match kind(index)? {
            IndexKind::Peb => {
                let fl = inst.friends.get(qid).map_err(err)?;
                prq(&inst.peb, &inst.policies, fl, &q, PrqOptions::default())
            }
            IndexKind::Bx => baseline_range(&inst.bx, &inst.policies, &q),
        }
        .map_err(err)?;
        Ok((ids, stats.io))
    }

    /// The `k` nearest users visible to `qid` as `(uid, distance)`, with
    /// the page misses the query cost.
    #[pyo3(signature = (qid, x, y, k, t_q, index = "peb"))]
    fn pknn(&self, qid: UserId, x: f64, y: f64, k: usize, t_q: f64, index: &str) -> PyResult<(Vec<(UserId, f64)>, u64)> {
        let q = PknnRequest { qid, loc: Point::new(x, y), k, t_q };
        let inst = &self.inner;
        let (res, stats) = match kind(index)? {
            IndexKind::Peb => {
                let fl = inst.friends.get(qid).map_err(err)?;
                pknn(&inst.peb, &inst.policies, fl, &q, &Triangular)
            }
            IndexKind::Bx => baseline_knn(&inst.bx, &inst.policies, &q),
        }
        .map_err(err)?;
        Ok((neighbors(res), stats.io))
    }

    /// Brute-force answer of a range query.
    fn oracle_prq(&self, qid: UserId, x_lo: f64, y_lo: f64, x_hi: f64, y_hi: f64, t_q: f64) -> Vec<UserId> {
        let q = PrqRequest { qid, rect: Rect::new(x_lo, y_lo, x_hi, y_hi), t_q };
        oracle_range(&self.inner.objects, &self.inner.policies, &q)
    }

    /// Brute-force answer of a kNN query.
    fn oracle_pknn(&self, qid: UserId, x: f64, y: f64, k: usize, t_q: f64) -> Vec<(UserId, f64)> {
        let q = PknnRequest { qid, loc: Point::new(x, y), k, t_q };
        neighbors(oracle_knn(&self.inner.objects, &self.inner.policies, &q))
    }

    /// Mean page misses of the generated range batch on one index, with the
    /// buffer cleared once before the batch.
    #[pyo3(signature = (index = "peb", salt = 0))]
    fn mean_range_io(&self, index: &str, salt: u64) -> PyResult<f64> {
        let qs = self.inner.range_queries(salt);
        let r = run_range_batch(&self.inner, kind(index)?, &qs, false, BufferReset::PerBatch).map_err(err)?;
        Ok(r.mean_io())
    }

    /// Cost-model inputs `(n, n_p, theta, n_l, side)` of this instance.
    fn cost_inputs(&self) -> (f64, f64, f64, f64, f64) {
        let c = cost_inputs(&self.inner);
        (c.n, c.n_p, c.theta, c.n_l, c.side)
    }
}

/// Grouping-only leaf cost of a range query.
#[pyfunction]
fn cost_c1(n_p: f64, theta: f64, n_l: f64) -> f64 {
    core_cost_c1(n_p, theta, n_l)
}

/// Leaf cost of a range query with the density term.
#[pyfunction]
#[pyo3(signature = (n, n_p, theta, n_l, side = 1000.0, a1 = CostParams::UNIFORM.a1, a2 = CostParams::UNIFORM.a2))]
fn cost_c(n: f64, n_p: f64, theta: f64, n_l: f64, side: f64, a1: f64, a2: f64) -> f64 {
    core_cost_c(CostParams { a1, a2 }, &CostInputs { n, n_p, theta, n_l, side })
}

/// Fits `(a1, a2)` from two `((n, n_p, theta, n_l, side), cost)` samples.
#[pyfunction]
fn fit_cost(s1: ((f64, f64, f64, f64, f64), f64), s2: ((f64, f64, f64, f64, f64), f64)) -> PyResult<(f64, f64)> {
    let inputs = |t: (f64, f64, f64, f64, f64)| CostInputs { n: t.0, n_p: t.1, theta: t.2, n_l: t.3, side: t.4 };
    let (a, b) = (inputs(s1.0), inputs(s2.0));
    let p = fit_cost_params((&a, s1.1), (&b, s2.1)).map_err(err)?;
    Ok((p.a1, p.a2))
}

/// Z-value intervals covering the cells of `[x0, x1) x [y0, y1)` on a
/// `2^levels` grid, with y in the low bit of each pair. Z-values start at 0.
#[pyfunction]
fn z_intervals(levels: u32, x0: u32, y0: u32, x1: u32, y1: u32) -> PyResult<Vec<(u64, u64)>> {
    let g = GridConfig::new(1.0, levels).with_order(BitOrder::YLow);
    let Some(r) = CellRect::from_grid_corners(x0, y0, x1, y1) else {
        return Ok(Vec::new());
    };
    g.z_decompose(&r).map_err(err)
}

#[pymodule]
fn pebtree(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Instance>()?;
    m.add_function(wrap_pyfunction!(cost_c1, m)?)?;
    m.add_function(wrap_pyfunction!(cost_c, m)?)?;
    m.add_function(wrap_pyfunction!(fit_cost, m)?)?;
    m.add_function(wrap_pyfunction!(z_intervals, m)?)?;
    Ok(())
}
