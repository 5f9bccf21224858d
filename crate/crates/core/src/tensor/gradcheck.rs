use std::collections::BTreeMap;

use serde::Serialize;

use super::ParamStore;
use crate::error::Result;

/// Gradients below this magnitude are compared on an absolute scale. Central differences
/// with `h = 1e-5` on an O(10) loss carry roundoff near `1e-10`, so smaller entries carry no signal.
pub const REL_ERR_FLOOR: f64 = 1e-5;

/// `|a - n| / max(|a|, |n|, 1e-5)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let den = analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR);
    (analytic - numeric).abs() / den
}

#[derive(Clone, Debug, Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub entries: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub h: f64,
    pub tol: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.passed)
    }

    pub fn worst(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }
}

/// Compares analytic gradients against central differences for every entry of every parameter.
///
/// `value` evaluates the scalar objective; `gradient` returns its analytic gradient keyed by
/// parameter name (missing names count as all-zero). Mismatches are reported, never raised.
pub fn finite_diff_check<F, G>(
    value: F,
    gradient: G,
    params: &ParamStore,
    h: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore) -> Result<f64>,
    G: Fn(&ParamStore) -> Result<BTreeMap<String, Vec<f64>>>,
{
    assert!(h > 0.0, "finite-difference step must be positive");
    let analytic = gradient(params)?;
    let mut work = params.clone();
    let names: Vec<String> = params.names().map(str::to_owned).collect();
    let mut out = Vec::with_capacity(names.len());
    for name in names {
        let n = params.get(&name).unwrap().numel();
        let grad = analytic.get(&name);
        let mut max_rel: f64 = 0.0;
        let mut max_abs: f64 = 0.0;
        for k in 0..n {
            let orig = params.get(&name).unwrap().data()[k];
            work.get_mut(&name).unwrap().data_mut()[k] = orig + h;
            let up = value(&work)?;
            work.get_mut(&name).unwrap().data_mut()[k] = orig - h;
            let down = value(&work)?;
            work.get_mut(&name).unwrap().data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = grad.map_or(0.0, |g| g[k]);
            let rel = relative_error(a, numeric);
            // NaN must not slip through the comparison below.
            max_rel = if rel.is_nan() { f64::INFINITY } else { max_rel.max(rel) };
            max_abs = max_abs.max((a - numeric).abs());
        }
        out.push(ParamCheck { name, entries: n, max_rel_err: max_rel, max_abs_err: max_abs, passed: max_rel < tol });
    }
    Ok(GradCheckReport { h, tol, params: out })
}
