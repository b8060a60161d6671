//! Component ablation: every variant trained and evaluated on matched seeds.

use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, Variant};
use crate::error::Result;
use crate::eval::{diagnostics, evaluate, step_sweep, Diagnostics, EvalOptions};
use crate::exec::{map_ordered, Exec};
use crate::model::Model;
use crate::scenesynth::{generate_dataset, SceneSample, Split};
use crate::selector::MetricsReport;
use crate::train::{train, TrainOptions};

/// The three dataset splits of one scenario.
#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Vec<SceneSample>,
    pub val: Vec<SceneSample>,
    pub test: Vec<SceneSample>,
}

impl Splits {
    pub fn generate(cfg: &RunConfig) -> Result<Splits> {
        let sc = cfg.scenario();
        Ok(Splits {
            train: generate_dataset(&sc, Split::Train)?.0,
            val: generate_dataset(&sc, Split::Val)?.0,
            test: generate_dataset(&sc, Split::Test)?.0,
        })
    }
}

/// Everything measured for one trained `(variant, seed)` pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub variant: Variant,
    pub seed: u64,
    pub optimizer_steps: u64,
    /// One-step metrics with the configured step sweep attached.
    pub metrics: MetricsReport,
    pub diagnostics: Diagnostics,
    /// Mixture KL of the freshly initialized model on the test split.
    pub initial_kl: Option<f64>,
}

impl RunSummary {
    /// mAP at `steps` integration steps, if it was swept.
    pub fn map_at(&self, steps: usize) -> Option<f64> {
        self.metrics.step_sweep.iter().find(|r| r.steps == steps).map(|r| r.map)
    }
}

/// Trains one variant and evaluates it on the test split.
pub fn run_variant(
    cfg: &RunConfig,
    variant: Variant,
    seed: u64,
    data: &Splits,
    opts: &EvalOptions,
) -> Result<RunSummary> {
    let init = Model::new(cfg, seed);
    let initial_kl = diagnostics(&init, &init.params, cfg, variant, &data.test, opts)?.mixture_kl;
    let out = train(cfg, variant, seed, &data.train, &data.val, TrainOptions::default())?;
    let m = &out.model;
    let mut metrics = evaluate(m, &m.params, cfg, variant, &data.test, &EvalOptions { steps: 1, ..*opts })?;
    metrics.step_sweep = step_sweep(m, &m.params, cfg, variant, &data.test, &cfg.sweep_steps, opts)?;
    let diagnostics = diagnostics(m, &m.params, cfg, variant, &data.test, opts)?;
    log::info!("{} seed {seed}: mAP {:.4}", variant.name(), metrics.map);
    Ok(RunSummary {
        variant,
        seed,
        optimizer_steps: out.steps,
        metrics,
        diagnostics,
        initial_kl,
    })
}

/// All `variants x seeds` runs, seed-major, executed with `exec` at run level.
pub fn run_ablation(
    cfg: &RunConfig,
    variants: &[Variant],
    seeds: &[u64],
    data: &Splits,
    exec: Exec,
    opts: &EvalOptions,
) -> Result<Vec<RunSummary>> {
    let jobs: Vec<(u64, Variant)> = seeds.iter().flat_map(|&s| variants.iter().map(move |&v| (s, v))).collect();
    map_ordered(exec, &jobs, |&(seed, variant)| run_variant(cfg, variant, seed, data, opts))
        .into_iter()
        .collect()
}

/// Cross-seed aggregate of one variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub seeds: usize,
    pub map_mean: f64,
    /// Sample standard deviation across seeds (0 for a single seed).
    pub map_std: f64,
    pub soft_map_mean: f64,
    pub min_ade_mean: f64,
    pub min_fde_mean: f64,
    pub miss_rate_mean: f64,
    pub semigroup_mean: f64,
}

pub fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    if v.is_empty() {
        return (0.0, 0.0);
    }
    let m = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (m, var.sqrt())
}

/// One row per variant, in first-seen order.
pub fn summarize(runs: &[RunSummary]) -> Vec<AblationRow> {
    let mut order: Vec<Variant> = Vec::new();
    for r in runs {
        if !order.contains(&r.variant) {
            order.push(r.variant);
        }
    }
    order
        .into_iter()
        .map(|v| {
            let rs: Vec<&RunSummary> = runs.iter().filter(|r| r.variant == v).collect();
            let col = |f: &dyn Fn(&RunSummary) -> f64| -> Vec<f64> { rs.iter().map(|r| f(r)).collect() };
            let (map_mean, map_std) = mean_std(&col(&|r| r.metrics.map));
            AblationRow {
                variant: v,
                seeds: rs.len(),
                map_mean,
                map_std,
                soft_map_mean: mean_std(&col(&|r| r.metrics.soft_map)).0,
                min_ade_mean: mean_std(&col(&|r| r.metrics.min_ade)).0,
                min_fde_mean: mean_std(&col(&|r| r.metrics.min_fde)).0,
                miss_rate_mean: mean_std(&col(&|r| r.metrics.miss_rate)).0,
                semigroup_mean: mean_std(&col(&|r| r.diagnostics.semigroup_mean)).0,
            }
        })
        .collect()
}
