//! Central-difference verification of analytic gradients.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::params::{GradientMap, ParameterStore};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tolerance: f64,
    /// Check at most this many coordinates per parameter; `None` checks all.
    pub max_coords_per_param: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-4,
            tolerance: 1e-3,
            max_coords_per_param: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Coordinate {
    pub param: String,
    pub index: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst: Option<Coordinate>,
    pub checked: usize,
    /// Coordinates whose one-sided differences disagree, i.e. a kink (such
    /// as ReLU at zero) lies within one step. They are excluded from
    /// `max_rel_err`.
    pub skipped: Vec<Coordinate>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Relative size of the one-sided difference mismatch treated as a kink.
const KINK_RATIO: f64 = 0.1;

/// Compares `analytic` against central differences of `loss`.
pub fn finite_difference_gradcheck<F>(
    loss: F,
    params: &ParameterStore,
    analytic: &GradientMap,
    opts: &GradCheckOptions,
) -> GradCheckReport
where
    F: Fn(&ParameterStore) -> f64,
{
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work = params.clone();
    let base = loss(params);
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        checked: 0,
        skipped: Vec::new(),
        tolerance: opts.tolerance,
    };
    for p in 0..params.len() {
        let name = &params.names()[p];
        let n = params.tensor_at(p).len();
        let coords: Vec<usize> = match opts.max_coords_per_param {
            Some(m) if m < n => {
                let mut c = index::sample(&mut rng, n, m).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        for i in coords {
            let original = params.tensor_at(p).data()[i];
            work.tensors_mut()[p].data_mut()[i] = original + opts.step;
            let plus = loss(&work);
            work.tensors_mut()[p].data_mut()[i] = original - opts.step;
            let minus = loss(&work);
            work.tensors_mut()[p].data_mut()[i] = original;

            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = analytic.tensor_at(p).data()[i];
            let err = relative_error(a, numeric);
            let coord = Coordinate {
                param: name.clone(),
                index: i,
            };
            if err >= opts.tolerance {
                let forward = (plus - base) / opts.step;
                let backward = (base - minus) / opts.step;
                if (forward - backward).abs() > KINK_RATIO * forward.abs().max(backward.abs()) {
                    report.skipped.push(coord);
                    continue;
                }
            }
            report.checked += 1;
            if err > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(err);
                report.worst = Some(coord);
            }
        }
    }
    report
}
