use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::params::{ParamGrads, ParamStore};

/// Default central-difference step.
pub const DEFAULT_EPS: f64 = 1e-6;

/// Result of comparing analytic and numerical gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Block name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub coordinates: usize,
}

/// Compares `analytic` against central finite differences of `loss` at
/// `params`, coordinate by coordinate.
///
/// The per-coordinate error is `|a - f| / max(1, |a|, |f|)`.
pub fn grad_check<F>(loss: F, params: &ParamStore, analytic: &ParamGrads, eps: f64) -> GradCheckReport
where
    F: Fn(&ParamStore) -> f64,
{
    let all: Vec<Vec<usize>> = params.ids().map(|id| (0..params.block(id).len()).collect()).collect();
    check_coordinates(loss, params, analytic, eps, &all)
}

/// As [`grad_check`] on at most `per_block` seeded random coordinates of
/// every block; smaller blocks are checked completely.
pub fn grad_check_sampled<F>(
    loss: F,
    params: &ParamStore,
    analytic: &ParamGrads,
    eps: f64,
    per_block: usize,
    seed: u64,
) -> GradCheckReport
where
    F: Fn(&ParamStore) -> f64,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks: Vec<Vec<usize>> = params
        .ids()
        .map(|id| {
            let n = params.block(id).len();
            if n <= per_block {
                (0..n).collect()
            } else {
                let mut v = sample(&mut rng, n, per_block).into_vec();
                v.sort_unstable();
                v
            }
        })
        .collect();
    check_coordinates(loss, params, analytic, eps, &picks)
}

fn check_coordinates<F>(
    loss: F,
    params: &ParamStore,
    analytic: &ParamGrads,
    eps: f64,
    picks: &[Vec<usize>],
) -> GradCheckReport
where
    F: Fn(&ParamStore) -> f64,
{
    let mut probe = params.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        coordinates: 0,
    };
    for (id, idx) in params.ids().zip(picks) {
        for &i in idx {
            let orig = params.block(id).data[i];
            probe.block_mut(id).data[i] = orig + eps;
            let up = loss(&probe);
            probe.block_mut(id).data[i] = orig - eps;
            let down = loss(&probe);
            probe.block_mut(id).data[i] = orig;

            let f = (up - down) / (2.0 * eps);
            let a = analytic.block(id)[i];
            let err = (a - f).abs() / 1f64.max(a.abs()).max(f.abs());
            report.coordinates += 1;
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((params.block(id).name.clone(), i));
            }
        }
    }
    report
}
