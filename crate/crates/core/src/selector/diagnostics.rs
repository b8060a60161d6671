//! Transport-length and displacement-probe summaries.

use serde::{Deserialize, Serialize};

use crate::diffcore::Mat;

/// `E|Z|` for `Z` standard normal in `n` dimensions: `sqrt(2) G((n+1)/2) / G(n/2)`.
pub fn chi_mean(n: usize) -> f64 {
    assert!(n >= 1);
    // r(n) = G((n+1)/2) / G(n/2) satisfies r(1) = 1/sqrt(pi), r(n+1) = (n/2) / r(n).
    let mut r = 1.0 / std::f64::consts::PI.sqrt();
    for k in 1..n {
        r = (k as f64 / 2.0) / r;
    }
    std::f64::consts::SQRT_2 * r
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub lo: f64,
    pub hi: f64,
    pub prior: usize,
    pub gaussian: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransportStats {
    /// Mean over scenes of `min_k |Y - A_k|`.
    pub prior_mean: f64,
    /// Mean over scenes of `|Y - Z|`.
    pub gaussian_mean: f64,
    pub ratio: f64,
    /// Mean one-step displacement norm `|s(A, 0, 1, c)|` from prior anchors.
    pub prior_step_norm: f64,
    /// Same from standard-normal starting points.
    pub gaussian_step_norm: f64,
    pub histogram: Vec<HistogramBin>,
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Summaries of per-scene transport lengths and one-step displacement norms.
pub fn transport_stats(
    prior: &[f64],
    gaussian: &[f64],
    prior_steps: &[f64],
    gaussian_steps: &[f64],
    bins: usize,
) -> TransportStats {
    let hi = prior.iter().chain(gaussian).copied().fold(0.0, f64::max);
    let width = if hi > 0.0 { hi / bins as f64 } else { 1.0 };
    let count = |v: &[f64], b: usize| {
        v.iter()
            .filter(|x| {
                let i = ((**x / width) as usize).min(bins - 1);
                i == b
            })
            .count()
    };
    let histogram = (0..bins)
        .map(|b| HistogramBin {
            lo: b as f64 * width,
            hi: (b + 1) as f64 * width,
            prior: count(prior, b),
            gaussian: count(gaussian, b),
        })
        .collect();
    let (pm, gm) = (mean(prior), mean(gaussian));
    TransportStats {
        prior_mean: pm,
        gaussian_mean: gm,
        ratio: if gm > 0.0 { pm / gm } else { 0.0 },
        prior_step_norm: mean(prior_steps),
        gaussian_step_norm: mean(gaussian_steps),
        histogram,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeRow {
    pub t: f64,
    pub d: f64,
    /// Mean norm of the predicted displacement `d * s(X_t, t, d, c)`.
    pub disp_norm: f64,
    /// Mean norm of `(1 - t)(Y - A)`.
    pub target_norm: f64,
    /// Mean cosine between the two; a zero vector counts as cosine 0.
    pub cosine: f64,
    /// Mean `|X_t + d s - Y|`.
    pub l2: f64,
}

/// One probe row from per-scene displacements and targets (rows are scenes).
pub fn probe_row(t: f64, d: f64, disp: &Mat, target: &Mat) -> ProbeRow {
    let n = disp.nrows().max(1) as f64;
    let (mut dn, mut tn, mut cs, mut l2) = (0.0, 0.0, 0.0, 0.0);
    for (a, b) in disp.rows().into_iter().zip(target.rows()) {
        let na = a.dot(&a).sqrt();
        let nb = b.dot(&b).sqrt();
        dn += na;
        tn += nb;
        if na > 0.0 && nb > 0.0 {
            cs += a.dot(&b) / (na * nb);
        }
        let diff = &a - &b;
        l2 += diff.dot(&diff).sqrt();
    }
    ProbeRow {
        t,
        d,
        disp_norm: dn / n,
        target_norm: tn / n,
        cosine: cs / n,
        l2: l2 / n,
    }
}
