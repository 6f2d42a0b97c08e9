//! Central-difference verification of reverse-mode gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ParamGrads, ParamStore};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub epsilon: f64,
    pub tolerance: f64,
    /// Denominator floor of the relative error, so coordinates with
    /// near-zero gradients are judged on absolute error instead.
    pub floor: f64,
    /// Coordinates sampled per parameter; all of them when the parameter is
    /// smaller than this.
    pub coords_per_param: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            epsilon: 1e-5,
            tolerance: 1e-4,
            floor: 1e-3,
            coords_per_param: 16,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CoordCheck {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub coords_checked: usize,
    pub worst: Option<CoordCheck>,
    /// Largest relative error per parameter, in store order.
    pub per_param: Vec<(String, f64)>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compare `analytic` against central differences of `loss`.
///
/// `loss` must be deterministic and must keep any detached quantity frozen at
/// its value for the unperturbed parameters; otherwise the finite difference
/// measures a different function than backprop differentiates.
pub fn grad_check<F>(
    params: &ParamStore,
    mut loss: F,
    analytic: &ParamGrads,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore) -> Result<f64>,
{
    if !(1e-7..=1e-3).contains(&opts.epsilon) {
        return Err(Error::invalid(format!(
            "epsilon {} outside [1e-7, 1e-3]",
            opts.epsilon
        )));
    }
    let base = loss(params)?;
    if !base.is_finite() {
        return Err(Error::NonFinite(format!("loss {base}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work = params.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        tolerance: opts.tolerance,
        coords_checked: 0,
        worst: None,
        per_param: Vec::new(),
    };
    for id in params.ids() {
        let n = params.value(id).len();
        let coords: Vec<usize> = if n <= opts.coords_per_param {
            (0..n).collect()
        } else {
            let mut c = sample(&mut rng, n, opts.coords_per_param).into_vec();
            c.sort_unstable();
            c
        };
        let grad = analytic.get(id);
        let mut param_max: f64 = 0.0;
        for idx in coords {
            let original = params.value(id).data()[idx];
            work.value_mut(id).data_mut()[idx] = original + opts.epsilon;
            let plus = loss(&work)?;
            work.value_mut(id).data_mut()[idx] = original - opts.epsilon;
            let minus = loss(&work)?;
            work.value_mut(id).data_mut()[idx] = original;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite(format!(
                    "loss while perturbing {}[{idx}]",
                    params.name(id)
                )));
            }
            let numeric = (plus - minus) / (2.0 * opts.epsilon);
            let a = grad.map_or(0.0, |g| g.data()[idx]);
            let rel = relative_error(a, numeric, opts.floor);
            report.coords_checked += 1;
            param_max = param_max.max(rel);
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                report.worst = Some(CoordCheck {
                    param: params.name(id).to_string(),
                    index: idx,
                    analytic: a,
                    numeric,
                    rel_error: rel,
                });
            }
        }
        report.per_param.push((params.name(id).to_string(), param_max));
    }
    Ok(report)
}
