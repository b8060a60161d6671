//! Held-out evaluation: candidates, selection, the metrics suite and the
//! field diagnostics (transport, displacement probe, semigroup residual,
//! mixture calibration).
//!
//! Scenes are processed in fixed chunks, possibly in parallel; every random
//! draw comes from a per-scene stream and all reductions run over the ordered
//! per-scene results, so outputs do not depend on the thread count.

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, Variant};
use crate::diffcore::{Mat, ParamSet};
use crate::error::{FlowsError, Result};
use crate::exec::{map_range, with_threads, Exec};
use crate::flowfield::{consistency_target_with, semigroup_residual};
use crate::model::{predict, scene_rng, Model, Prediction};
use crate::prior::{argmin, kl_divergence, prior_nll, soft_targets};
use crate::scenesynth::{DensityBucket, Maneuver, SceneSample};
use crate::selector::{
    adaptive_threshold, error_at, horizon_errors, horizon_steps, map_metric, min_ade, min_fde, nms_select, probe_row,
    transport_stats, BucketMetrics, MetricsReport, ProbeRow, SceneDetections, SweepRow, TransportStats,
};

/// Histogram bins of the transport summary.
pub const TRANSPORT_BINS: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    pub steps: usize,
    pub exec: Exec,
    /// Worker threads; 0 uses the library default.
    pub threads: usize,
    /// Scenes per batched forward pass.
    pub chunk: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            steps: 1,
            exec: Exec::Parallel,
            threads: 0,
            chunk: 64,
        }
    }
}

fn chunks(n: usize, size: usize) -> Vec<(usize, usize)> {
    (0..n.div_ceil(size)).map(|i| (i * size, ((i + 1) * size).min(n))).collect()
}

/// Predictions for every scene in order.
fn predict_all(
    model: &Model,
    params: &ParamSet,
    variant: Variant,
    scenes: &[SceneSample],
    tau: f64,
    steps: usize,
    seed: u64,
    opts: &EvalOptions,
) -> Result<Vec<Prediction>> {
    let parts = chunks(scenes.len(), opts.chunk.max(1));
    let results = with_threads(opts.threads, || {
        map_range(opts.exec, parts.len(), |i| {
            let (lo, hi) = parts[i];
            let refs: Vec<&SceneSample> = scenes[lo..hi].iter().collect();
            predict(model, params, &refs, variant, tau, steps, seed, lo)
        })
    });
    let mut out = Vec::with_capacity(scenes.len());
    for r in results {
        out.extend(r?);
    }
    Ok(out)
}

struct SceneResult {
    kept: Mat,
    det: SceneDetections,
    min_ade: f64,
    min_fde: f64,
    miss: bool,
}

fn bucket_metrics(name: &str, rs: &[&SceneResult], ap: Option<(f64, f64)>) -> BucketMetrics {
    let n = rs.len().max(1) as f64;
    BucketMetrics {
        name: name.to_string(),
        count: rs.len(),
        min_ade: rs.iter().map(|r| r.min_ade).sum::<f64>() / n,
        min_fde: rs.iter().map(|r| r.min_fde).sum::<f64>() / n,
        miss_rate: rs.iter().filter(|r| r.miss).count() as f64 / n,
        ap: ap.map(|a| a.0),
        soft_ap: ap.map(|a| a.1),
    }
}

fn check_scenes(scenes: &[SceneSample]) -> Result<()> {
    if scenes.is_empty() {
        return Err(FlowsError::Data("no scenes to evaluate".into()));
    }
    Ok(())
}

/// Full metrics suite of `params` with `opts.steps` integration steps.
pub fn evaluate(
    model: &Model,
    params: &ParamSet,
    cfg: &RunConfig,
    variant: Variant,
    scenes: &[SceneSample],
    opts: &EvalOptions,
) -> Result<MetricsReport> {
    check_scenes(scenes)?;
    if opts.steps == 0 {
        return Err(FlowsError::config("steps", "must be >= 1"));
    }
    let preds = predict_all(model, params, variant, scenes, cfg.tau_infer, opts.steps, cfg.eval_seed, opts)?;
    let horizons = horizon_steps(&cfg.horizon_fractions, cfg.horizon);
    let rule = cfg.threshold_rule();
    let results: Vec<SceneResult> = preds
        .iter()
        .zip(scenes)
        .map(|(p, s)| {
            let thr = adaptive_threshold(s.history_speed(), &rule);
            let kept = nms_select(&p.candidates, thr, cfg.keep);
            let y = s.future.flat();
            let endpoint_errors = horizons
                .iter()
                .map(|&h| {
                    kept.trajectories
                        .rows()
                        .into_iter()
                        .map(|r| error_at(r.as_slice().expect("row"), &y, h))
                        .collect()
                })
                .collect();
            let mfde = min_fde(&kept.trajectories, &y);
            SceneResult {
                min_ade: min_ade(&kept.trajectories, &y),
                min_fde: mfde,
                miss: mfde > cfg.miss_threshold,
                det: SceneDetections {
                    bucket: s.maneuver.index(),
                    confidence: kept.confidence.clone(),
                    endpoint_errors,
                },
                kept: kept.trajectories,
            }
        })
        .collect();

    let dets: Vec<SceneDetections> = results.iter().map(|r| r.det.clone()).collect();
    let overall = map_metric(&dets, Maneuver::ALL.len(), cfg.miss_threshold);
    let all: Vec<&SceneResult> = results.iter().collect();
    let head = bucket_metrics("all", &all, None);

    let per_maneuver = Maneuver::ALL
        .iter()
        .map(|m| {
            let rs: Vec<&SceneResult> = results.iter().filter(|r| r.det.bucket == m.index()).collect();
            bucket_metrics(m.name(), &rs, overall.per_bucket[m.index()])
        })
        .collect();
    let per_density = DensityBucket::ALL
        .iter()
        .map(|d| {
            let idx: Vec<usize> = (0..scenes.len()).filter(|&i| scenes[i].density_bucket == *d).collect();
            let rs: Vec<&SceneResult> = idx.iter().map(|&i| &results[i]).collect();
            let ap = if idx.is_empty() {
                None
            } else {
                let sub: Vec<SceneDetections> = idx.iter().map(|&i| dets[i].clone()).collect();
                let m = map_metric(&sub, Maneuver::ALL.len(), cfg.miss_threshold);
                Some((m.map, m.soft_map))
            };
            bucket_metrics(d.name(), &rs, ap)
        })
        .collect();

    let kept: Vec<Mat> = results.iter().map(|r| r.kept.clone()).collect();
    let ys: Vec<Vec<f64>> = scenes.iter().map(|s| s.future.flat()).collect();
    let transport = if variant.uses_prior() {
        Some(transport_from(model, params, cfg, &preds, scenes)?)
    } else {
        None
    };

    Ok(MetricsReport {
        variant: variant.name().to_string(),
        steps: opts.steps,
        scenes: scenes.len(),
        min_ade: head.min_ade,
        min_fde: head.min_fde,
        miss_rate: head.miss_rate,
        map: overall.map,
        soft_map: overall.soft_map,
        per_maneuver,
        per_density,
        horizon: horizon_errors(&kept, &ys, &horizons),
        field_evals_per_scene: cfg.modes * opts.steps,
        transport,
        step_sweep: Vec::new(),
    })
}

fn gaussian_row(rng: &mut impl Rng, cols: usize) -> Mat {
    Array2::from_shape_simple_fn((1, cols), || rng.sample(StandardNormal))
}

fn norm(v: ndarray::ArrayView1<f64>) -> f64 {
    v.dot(&v).sqrt()
}

/// Seed of the diagnostic reference draws, kept apart from the anchor noise.
fn reference_seed(cfg: &RunConfig) -> u64 {
    cfg.eval_seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(1)
}

/// Transport lengths of the inference anchors against one standard-normal draw per scene.
fn transport_from(
    model: &Model,
    params: &ParamSet,
    cfg: &RunConfig,
    preds: &[Prediction],
    scenes: &[SceneSample],
) -> Result<TransportStats> {
    let t2 = 2 * cfg.horizon;
    let (mut prior, mut gauss, mut prior_steps, mut gauss_steps) = (vec![], vec![], vec![], vec![]);
    for (i, (p, s)) in preds.iter().zip(scenes).enumerate() {
        let y = ndarray::Array1::from(s.future.flat());
        let d: Vec<f64> = p.anchors.rows().into_iter().map(|a| norm((&y - &a).view())).collect();
        prior.push(d.iter().copied().fold(f64::INFINITY, f64::min));
        let z = gaussian_row(&mut scene_rng(reference_seed(cfg), i), t2);
        gauss.push(norm((&y - &z.row(0)).view()));
        let k = p.anchors.nrows();
        let c_rows = Array2::from_shape_fn((k + 1, p.context.len()), |(_, j)| p.context[j]);
        let mut starts = p.anchors.clone();
        starts.push_row(z.row(0)).expect("row");
        let disp = model.field.eval(params, &starts, &vec![0.0; k + 1], &vec![1.0; k + 1], &c_rows);
        for r in 0..k {
            prior_steps.push(norm(disp.row(r)));
        }
        gauss_steps.push(norm(disp.row(k)));
    }
    Ok(transport_stats(&prior, &gauss, &prior_steps, &gauss_steps, TRANSPORT_BINS))
}

/// Residual of one trained token: a direct step of size `token` against two half steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemigroupRow {
    pub token: f64,
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub variant: String,
    pub probe: Vec<ProbeRow>,
    pub semigroup: Vec<SemigroupRow>,
    /// Pooled residual over all tokens.
    pub semigroup_mean: f64,
    /// Mean `KL(pi_hat | pi)` over scenes; absent without a prior.
    pub mixture_kl: Option<f64>,
}

/// Field diagnostics on held-out scenes, starting from each scene's inference
/// anchor closest to the ground truth.
pub fn diagnostics(
    model: &Model,
    params: &ParamSet,
    cfg: &RunConfig,
    variant: Variant,
    scenes: &[SceneSample],
    opts: &EvalOptions,
) -> Result<Diagnostics> {
    check_scenes(scenes)?;
    let preds = predict_all(model, params, variant, scenes, cfg.tau_infer, 1, cfg.eval_seed, opts)?;
    let (n, t2) = (scenes.len(), 2 * cfg.horizon);
    let mut a = Array2::zeros((n, t2));
    let mut y = Array2::zeros((n, t2));
    let mut c = Array2::zeros((n, cfg.context_dim));
    for (i, (p, s)) in preds.iter().zip(scenes).enumerate() {
        let yf = ndarray::Array1::from(s.future.flat());
        let d: Vec<f64> = p.anchors.rows().into_iter().map(|r| norm((&yf - &r).view())).collect();
        a.row_mut(i).assign(&p.anchors.row(argmin(&d)));
        y.row_mut(i).assign(&yf);
        c.row_mut(i).assign(&ndarray::ArrayView1::from(&p.context));
    }
    let gap = &y - &a;
    let interp = |t: &[f64]| {
        let mut x = a.clone();
        for (mut r, (&tv, yr)) in x.rows_mut().into_iter().zip(t.iter().zip(y.rows())) {
            r.zip_mut_with(&yr, |av, yv| *av = (1.0 - tv) * *av + tv * yv);
        }
        x
    };
    let field = |x: &Mat, t: &[f64], d: &[f64]| model.field.eval(params, x, t, d, &c);

    let probe = cfg
        .probe_times
        .iter()
        .map(|&t| {
            let d = 1.0 - t;
            let tv = vec![t; n];
            let disp = field(&interp(&tv), &tv, &vec![d; n]) * d;
            probe_row(t, d, &disp, &(&gap * (1.0 - t)))
        })
        .collect();

    // One time draw per scene and token from a dedicated stream.
    let mut semigroup = Vec::with_capacity(cfg.cons_tokens.len());
    let (mut num, mut den) = (0.0, 0.0);
    for (j, &s) in cfg.cons_tokens.iter().enumerate() {
        let t: Vec<f64> = (0..n)
            .map(|i| {
                let mut rng = scene_rng(reference_seed(cfg).wrapping_add(j as u64 + 1), i);
                rng.gen::<f64>() * (1.0 - s)
            })
            .collect();
        let x = interp(&t);
        let direct = field(&x, &t, &vec![s; n]);
        let half = s / 2.0;
        let composed = consistency_target_with(field, &x, &t, &vec![half; n], &vec![cfg.teacher_token(half); n]);
        let r = semigroup_residual(&direct, &composed, &gap);
        let rows_den: f64 = gap.rows().into_iter().map(norm).sum();
        num += r * rows_den;
        den += rows_den;
        semigroup.push(SemigroupRow { token: s, residual: r });
    }

    let mixture_kl = if variant.uses_prior() {
        let total: f64 = preds
            .iter()
            .zip(scenes)
            .map(|(p, s)| {
                let out = p.prior.as_ref().expect("prior outputs");
                let (nll, _) = prior_nll(out, &s.future.flat());
                kl_divergence(&soft_targets(&nll, cfg.tau_mix), &out.pi)
            })
            .sum();
        Some(total / n as f64)
    } else {
        None
    };

    Ok(Diagnostics {
        variant: variant.name().to_string(),
        probe,
        semigroup,
        semigroup_mean: if den > 0.0 { num / den } else { 0.0 },
        mixture_kl,
    })
}

/// Headline metrics at each step count.
pub fn step_sweep(
    model: &Model,
    params: &ParamSet,
    cfg: &RunConfig,
    variant: Variant,
    scenes: &[SceneSample],
    steps: &[usize],
    opts: &EvalOptions,
) -> Result<Vec<SweepRow>> {
    steps
        .iter()
        .map(|&k| {
            let r = evaluate(model, params, cfg, variant, scenes, &EvalOptions { steps: k, ..*opts })?;
            Ok(SweepRow {
                steps: k,
                field_evals_per_scene: r.field_evals_per_scene,
                min_ade: r.min_ade,
                min_fde: r.min_fde,
                miss_rate: r.miss_rate,
                map: r.map,
                soft_map: r.soft_map,
            })
        })
        .collect()
}
