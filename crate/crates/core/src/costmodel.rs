//! Analytical leaf I/O of a privacy-aware range query on the policy-embedded
//! index, as a function of the policy load and grouping of the population.

use crate::error::{Error, Result};

/// Population and index shape a cost estimate is made for.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostInputs {
    /// Number of users.
    pub n: f64,
    /// Policies per user.
    pub n_p: f64,
    pub theta: f64,
    /// Leaf count of the index.
    pub n_l: f64,
    /// Side length of the space.
    pub side: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostParams {
    pub a1: f64,
    pub a2: f64,
}

impl CostParams {
    /// Fit reported for uniformly distributed users.
    pub const UNIFORM: CostParams = CostParams { a1: 10.0, a2: 0.3 };
}

/// Related users left ungrouped: `N_p - N_p^theta`, with `N_l` in place of
/// `N_p` once the policies outnumber the leaves.
fn spread(n_p: f64, theta: f64, n_l: f64) -> f64 {
    n_p.min(n_l) - n_p.powf(theta)
}

/// Grouping-only cost: `1 + N_p - N_p^theta` (or `1 + N_l - N_p^theta`).
pub fn cost_c1(n_p: f64, theta: f64, n_l: f64) -> f64 {
    1.0 + spread(n_p, theta, n_l)
}

/// Cost with the density term, clamped at one page from below.
pub fn cost_c(params: CostParams, inp: &CostInputs) -> f64 {
    let density = inp.n / (inp.side * inp.side);
    (1.0 + (params.a1 * density + params.a2) * spread(inp.n_p, inp.theta, inp.n_l)).max(1.0)
}

/// Solves for `(a1, a2)` from two measured points. The points must differ
/// in density and carry some ungrouped policy load.
pub fn fit_cost_params(s1: (&CostInputs, f64), s2: (&CostInputs, f64)) -> Result<CostParams> {
    let row = |inp: &CostInputs, c: f64| -> Result<(f64, f64)> {
        let f = spread(inp.n_p, inp.theta, inp.n_l);
        if f.abs() < 1e-12 {
            return Err(Error::SingularFit(format!("sample at theta {} carries no policy spread", inp.theta)));
        }
        Ok((inp.n / (inp.side * inp.side), (c - 1.0) / f))
    };
    let (d1, y1) = row(s1.0, s1.1)?;
    let (d2, y2) = row(s2.0, s2.1)?;
    if (d1 - d2).abs() < 1e-15 {
        return Err(Error::SingularFit("samples share the same density".into()));
    }
    let a1 = (y1 - y2) / (d1 - d2);
    let a2 = y1 - a1 * d1;
    if !a1.is_finite() || !a2.is_finite() {
        return Err(Error::SingularFit("non-finite parameters".into()));
    }
    Ok(CostParams { a1, a2 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn inputs(n: f64, n_p: f64, theta: f64) -> CostInputs {
        CostInputs { n, n_p, theta, n_l: 1e6, side: 1000.0 }
    }

    #[test]
    fn c1_values() {
        assert_eq!(cost_c1(50.0, 1.0, 1000.0), 1.0);
        assert_eq!(cost_c1(50.0, 0.0, 1000.0), 50.0);
        let v = cost_c1(50.0, 0.7, 1e9);
        assert!((v - (51.0 - 50f64.powf(0.7))).abs() < 1e-12);
        assert!((v - 35.5).abs() < 0.1);
        // more policies than leaves
        assert_eq!(cost_c1(50.0, 0.0, 20.0), 20.0);
    }

    #[test]
    fn c_values() {
        let p = CostParams::UNIFORM;
        assert_eq!(cost_c(p, &inputs(60_000.0, 50.0, 1.0)), 1.0);
        assert!((cost_c(p, &inputs(60_000.0, 50.0, 0.0)) - 45.1).abs() < 1e-9);
        // clamp when N_p^theta exceeds N_l
        let tiny = CostInputs { n_l: 2.0, ..inputs(60_000.0, 50.0, 0.9) };
        assert_eq!(cost_c(p, &tiny), 1.0);
    }

    #[test]
    fn fit_recovers_params() {
        let truth = CostParams { a1: 12.5, a2: 0.4 };
        let s1 = inputs(20_000.0, 50.0, 0.7);
        let s2 = inputs(60_000.0, 50.0, 0.7);
        let fit = fit_cost_params((&s1, cost_c(truth, &s1)), (&s2, cost_c(truth, &s2))).unwrap();
        assert!((fit.a1 - truth.a1).abs() < 1e-9 && (fit.a2 - truth.a2).abs() < 1e-9);
        for theta in [0.0, 0.3, 0.9] {
            let q = inputs(35_000.0, 80.0, theta);
            assert!((cost_c(fit, &q) - cost_c(truth, &q)).abs() < 1e-9);
        }
    }

    #[test]
    fn degenerate_fits_rejected() {
        let s = inputs(20_000.0, 50.0, 0.7);
        assert!(matches!(fit_cost_params((&s, 10.0), (&s, 12.0)), Err(Error::SingularFit(_))));
        let g = inputs(40_000.0, 50.0, 1.0);
        assert!(fit_cost_params((&s, 10.0), (&g, 1.0)).is_err());
    }

    proptest! {
        #[test]
        fn monotone_in_theta(a1 in 0.0..50.0f64, a2 in 0.0..5.0f64, n_p in 1.0..200.0f64,
                             n in 100.0..1e5f64, n_l in 1.0..5000.0f64, t1 in 0.0..=1.0f64, t2 in 0.0..=1.0f64) {
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            let p = CostParams { a1, a2 };
            let base = CostInputs { n, n_p, theta: lo, n_l, side: 1000.0 };
            let higher = CostInputs { theta: hi, ..base };
            let grouped = CostInputs { theta: 1.0, ..base };
            prop_assert!(cost_c(p, &base) >= cost_c(p, &higher));
            prop_assert_eq!(cost_c(p, &grouped), 1.0);
        }
    }
}
