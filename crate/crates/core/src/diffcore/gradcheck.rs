use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::param::{GradientRecord, ParamSet};
use crate::error::{FlowsError, Result};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    /// Coordinates sampled per array; arrays at most this long are checked fully.
    pub coords_per_array: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            coords_per_array: 6,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// `(array name, flat index, analytic, numeric)` of the worst coordinate.
    pub worst: Option<(String, usize, f64, f64)>,
}

/// Compares `analytic` against central differences of `loss` around `params`.
///
/// Uses the fourth-order central stencil
/// `(f(x-2h) - 8f(x-h) + 8f(x+h) - f(x+2h)) / 12h` with `h = eps`, so that a
/// comparatively large step keeps round-off low on losses of large magnitude.
/// The relative error of a coordinate is
/// `|a - n| / max(|a|, |n|, 1e-8)`; the maximum over sampled coordinates is reported.
pub fn grad_check<F>(
    mut loss: F,
    params: &ParamSet,
    analytic: &GradientRecord,
    eps: f64,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParamSet) -> Result<f64>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(FlowsError::config("eps", format!("{eps} is outside [1e-7, 1e-3]")));
    }
    if analytic.grads.len() != params.len() {
        return Err(FlowsError::Shape("gradient record does not match parameters".into()));
    }
    let base = loss(params)?;
    if !base.is_finite() {
        return Err(FlowsError::NonFinite {
            name: "loss".into(),
            message: format!("{base} at the unperturbed parameters"),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work = params.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        worst: None,
    };
    for (ai, array) in params.arrays.iter().enumerate() {
        let n = array.len();
        let mut coords: Vec<usize> = if n <= opts.coords_per_array {
            (0..n).collect()
        } else {
            sample(&mut rng, n, opts.coords_per_array).into_vec()
        };
        coords.sort_unstable();
        for i in coords {
            let x0 = array.values[i];
            let mut eval = |offset: f64| -> Result<f64> {
                work.arrays[ai].values[i] = x0 + offset;
                let v = loss(&work)?;
                work.arrays[ai].values[i] = x0;
                if v.is_finite() {
                    Ok(v)
                } else {
                    Err(FlowsError::NonFinite {
                        name: array.name.clone(),
                        message: format!("loss is {v} when entry {i} is perturbed by {offset}"),
                    })
                }
            };
            let (m2, m1, p1, p2) = (eval(-2.0 * eps)?, eval(-eps)?, eval(eps)?, eval(2.0 * eps)?);
            let numeric = ((m2 - p2) + 8.0 * (p1 - m1)) / (12.0 * eps);
            let a = analytic.grads[ai][i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            report.checked += 1;
            if report.worst.is_none() || rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((array.name.clone(), i, a, numeric));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::ParamArray;

    fn params() -> ParamSet {
        let mut p = ParamSet::new();
        p.push(ParamArray::new("a", vec![3], vec![0.5, -1.5, 2.0]).unwrap());
        p.push(ParamArray::new("b", vec![2, 2], vec![0.1, 0.2, -0.3, 4.0]).unwrap());
        p
    }

    fn sum_sq(p: &ParamSet) -> Result<f64> {
        Ok(p.arrays.iter().flat_map(|a| &a.values).map(|v| v * v).sum())
    }

    #[test]
    fn quadratic_is_exact() {
        let p = params();
        let g = GradientRecord {
            grads: p.arrays.iter().map(|a| a.values.iter().map(|v| 2.0 * v).collect()).collect(),
        };
        let r = grad_check(sum_sq, &p, &g, 1e-4, &GradCheckOptions::default()).unwrap();
        assert_eq!(r.checked, 7);
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }

    #[test]
    fn wrong_gradient_is_detected() {
        let p = params();
        let mut g = GradientRecord {
            grads: p.arrays.iter().map(|a| a.values.iter().map(|v| 2.0 * v).collect()).collect(),
        };
        g.grads[1][3] = 7.0;
        let r = grad_check(sum_sq, &p, &g, 1e-4, &GradCheckOptions::default()).unwrap();
        assert!(r.max_rel_error > 0.1);
        assert_eq!(r.worst.as_ref().unwrap().0, "b");
    }

    #[test]
    fn non_finite_loss_names_parameter() {
        let p = params();
        let g = GradientRecord::zeros_like(&p);
        let f = |q: &ParamSet| -> Result<f64> {
            let b = q.arrays[1].values[0];
            Ok(if b > 0.1 { f64::NAN } else { 0.0 })
        };
        let err = grad_check(f, &p, &g, 1e-4, &GradCheckOptions::default()).unwrap_err();
        assert!(err.to_string().contains("`b`"), "{err}");
    }

    #[test]
    fn eps_range_is_enforced() {
        let p = params();
        let g = GradientRecord::zeros_like(&p);
        assert!(grad_check(sum_sq, &p, &g, 1e-2, &GradCheckOptions::default()).is_err());
    }
}
