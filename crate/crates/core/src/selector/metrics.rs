use serde::{Deserialize, Serialize};

use crate::diffcore::Mat;

fn point_dist(a: &[f64], b: &[f64], n: usize) -> f64 {
    ((a[2 * n] - b[2 * n]).powi(2) + (a[2 * n + 1] - b[2 * n + 1]).powi(2)).sqrt()
}

/// Mean waypoint error over the first `h` waypoints.
pub fn ade_upto(pred: &[f64], y: &[f64], h: usize) -> f64 {
    (0..h).map(|n| point_dist(pred, y, n)).sum::<f64>() / h as f64
}

pub fn ade(pred: &[f64], y: &[f64]) -> f64 {
    ade_upto(pred, y, y.len() / 2)
}

/// Error at waypoint `h - 1`.
pub fn error_at(pred: &[f64], y: &[f64], h: usize) -> f64 {
    point_dist(pred, y, h - 1)
}

pub fn fde(pred: &[f64], y: &[f64]) -> f64 {
    error_at(pred, y, y.len() / 2)
}

fn rows(preds: &Mat) -> impl Iterator<Item = &[f64]> {
    preds.rows().into_iter().map(|r| r.to_slice().expect("contiguous rows"))
}

pub fn min_ade(preds: &Mat, y: &[f64]) -> f64 {
    rows(preds).map(|p| ade(p, y)).fold(f64::INFINITY, f64::min)
}

pub fn min_fde(preds: &Mat, y: &[f64]) -> f64 {
    rows(preds).map(|p| fde(p, y)).fold(f64::INFINITY, f64::min)
}

/// Every hypothesis ends farther than `threshold` from the truth.
pub fn miss(preds: &Mat, y: &[f64], threshold: f64) -> bool {
    min_fde(preds, y) > threshold
}

/// Linear-interpolated percentile (`q` in `[0, 100]`) of unsorted data.
pub fn percentile(data: &[f64], q: f64) -> f64 {
    if data.is_empty() {
        return 0.0;
    }
    let mut v = data.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q / 100.0 * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HorizonRow {
    /// Waypoints covered.
    pub horizon: usize,
    pub mean: f64,
    pub median: f64,
    pub p95: f64,
    pub p99: f64,
    /// Best-hypothesis mean error over waypoints `1..=horizon`.
    pub cumulative_ade: f64,
}

/// Endpoint-error statistics (best hypothesis per scene) at each horizon.
pub fn horizon_errors(preds: &[Mat], ys: &[Vec<f64>], horizons: &[usize]) -> Vec<HorizonRow> {
    horizons
        .iter()
        .map(|&h| {
            let errs: Vec<f64> = preds
                .iter()
                .zip(ys)
                .map(|(p, y)| rows(p).map(|r| error_at(r, y, h)).fold(f64::INFINITY, f64::min))
                .collect();
            let cum: Vec<f64> = preds
                .iter()
                .zip(ys)
                .map(|(p, y)| rows(p).map(|r| ade_upto(r, y, h)).fold(f64::INFINITY, f64::min))
                .collect();
            let n = errs.len().max(1) as f64;
            HorizonRow {
                horizon: h,
                mean: errs.iter().sum::<f64>() / n,
                median: percentile(&errs, 50.0),
                p95: percentile(&errs, 95.0),
                p99: percentile(&errs, 99.0),
                cumulative_ade: cum.iter().sum::<f64>() / n,
            }
        })
        .collect()
}

/// Waypoint counts for horizon fractions of `t`, rounded to the nearest waypoint.
pub fn horizon_steps(fractions: &[f64], t: usize) -> Vec<usize> {
    fractions.iter().map(|f| ((f * t as f64).round() as usize).clamp(1, t)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};

    #[test]
    fn exact_prediction() {
        let y = vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0];
        let p = Array2::from_shape_vec((1, 6), y.clone()).unwrap();
        assert_eq!(min_ade(&p, &y), 0.0);
        assert_eq!(min_fde(&p, &y), 0.0);
        assert!(!miss(&p, &y, 0.5));
        let rows = horizon_errors(&[p], &[y], &[1, 2, 3]);
        assert!(rows.iter().all(|r| r.mean == 0.0 && r.p99 == 0.0 && r.cumulative_ade == 0.0));
    }

    #[test]
    fn constant_offset() {
        let y = vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0];
        let p = Array2::from_shape_fn((1, 6), |(_, j)| y[j] + if j % 2 == 0 { 0.6 } else { 0.8 });
        assert!((min_ade(&p, &y) - 1.0).abs() < 1e-15);
        assert!((min_fde(&p, &y) - 1.0).abs() < 1e-15);
        assert!(miss(&p, &y, 0.5));
        let ys = vec![y.clone(), y.clone()];
        for r in horizon_errors(&[p.clone(), p], &ys, &[1, 2, 3]) {
            for v in [r.mean, r.median, r.p95, r.p99, r.cumulative_ade] {
                assert!((v - 1.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn best_hypothesis_is_chosen() {
        let y = vec![1.0, 0.0, 2.0, 0.0];
        let p = array![[1.0, 3.0, 2.0, 3.0], [1.0, 0.1, 2.0, 0.2]];
        // brute force over hypotheses
        let brute_ade = (0..2).map(|k| ade(p.row(k).to_slice().unwrap(), &y)).fold(f64::INFINITY, f64::min);
        let brute_fde = (0..2).map(|k| fde(p.row(k).to_slice().unwrap(), &y)).fold(f64::INFINITY, f64::min);
        assert_eq!(min_ade(&p, &y), brute_ade);
        assert_eq!(min_fde(&p, &y), brute_fde);
        assert!((brute_ade - 0.15).abs() < 1e-15 && (brute_fde - 0.2).abs() < 1e-15);
        let worst = (0..2).map(|k| ade(p.row(k).to_slice().unwrap(), &y)).fold(0.0, f64::max);
        assert!(min_ade(&p, &y) <= worst);
    }

    #[test]
    fn percentiles_interpolate() {
        let d = [4.0, 1.0, 3.0, 2.0, 5.0];
        assert_eq!(percentile(&d, 50.0), 3.0);
        assert_eq!(percentile(&d, 0.0), 1.0);
        assert_eq!(percentile(&d, 100.0), 5.0);
        assert!((percentile(&d, 95.0) - 4.8).abs() < 1e-12);
    }

    #[test]
    fn horizon_fractions() {
        assert_eq!(horizon_steps(&[0.375, 0.625, 1.0], 16), vec![6, 10, 16]);
    }
}
