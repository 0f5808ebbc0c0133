//! Central-difference gradient oracle.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LiraError, Result};
use crate::params::ParamStore;

/// Relative error `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamCheck {
    pub checked: usize,
    pub max_rel_err: f64,
    /// Flat index of the worst coordinate.
    pub worst_index: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub h: f64,
    pub tol: f64,
    pub params: BTreeMap<String, ParamCheck>,
    pub max_rel_err: f64,
    pub checked: usize,
    pub passed: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub h: f64,
    pub tol: f64,
    /// Denominator floor of the relative error.
    pub floor: f64,
    /// Five-point central stencil (error O(h^4)) instead of the
    /// three-point one (O(h^2)).
    pub five_point: bool,
    /// Check at most this many coordinates per parameter (chosen with
    /// `seed`); `None` checks all of them.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            h: 1e-4,
            tol: 1e-4,
            five_point: true,
            floor: 1e-6,
            max_coords: None,
            seed: 0,
        }
    }
}

/// Compares `analytic` against central differences of `f` for every
/// trainable parameter. Frozen parameters are skipped; a trainable one
/// without an analytic gradient is checked against zero.
pub fn grad_check(
    store: &ParamStore,
    analytic: &BTreeMap<String, Vec<f64>>,
    opts: &GradCheckOptions,
    f: impl Fn(&ParamStore) -> Result<f64>,
) -> Result<GradCheckReport> {
    let mut work = store.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut params = BTreeMap::new();
    let names: Vec<String> = store.trainable().iter().cloned().collect();
    for name in names {
        let n = store.get(&name)?.len();
        let coords: Vec<usize> = match opts.max_coords {
            Some(k) if k < n => {
                let mut c = sample(&mut rng, n, k).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        let grad = analytic.get(&name);
        let mut check = ParamCheck {
            checked: 0,
            max_rel_err: 0.0,
            worst_index: 0,
            worst_analytic: 0.0,
            worst_numeric: 0.0,
        };
        for i in coords {
            let orig = work.get(&name)?.data()[i];
            let mut at = |dx: f64| -> Result<f64> {
                work.get_mut(&name)?.data_mut()[i] = orig + dx;
                let v = f(&work)?;
                if !v.is_finite() {
                    return Err(LiraError::NonFinite(format!("loss while perturbing {name}[{i}]")));
                }
                Ok(v)
            };
            let h = opts.h;
            let numeric = if opts.five_point {
                (8.0 * (at(h)? - at(-h)?) - (at(2.0 * h)? - at(-2.0 * h)?)) / (12.0 * h)
            } else {
                (at(h)? - at(-h)?) / (2.0 * h)
            };
            work.get_mut(&name)?.data_mut()[i] = orig;
            let a = grad.map_or(0.0, |g| g[i]);
            let err = relative_error(a, numeric, opts.floor);
            if err > check.max_rel_err {
                check.max_rel_err = err;
                check.worst_index = i;
                check.worst_analytic = a;
                check.worst_numeric = numeric;
            }
            check.checked += 1;
        }
        params.insert(name, check);
    }
    let max_rel_err = params.values().map(|c| c.max_rel_err).fold(0.0, f64::max);
    let checked = params.values().map(|c| c.checked).sum();
    Ok(GradCheckReport {
        h: opts.h,
        tol: opts.tol,
        params,
        max_rel_err,
        checked,
        passed: max_rel_err < opts.tol,
    })
}
