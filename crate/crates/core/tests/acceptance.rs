//! Acceptance harness: one PASS/FAIL line per criterion.
//!
//! Runs the full three-seed ablation at default settings (several minutes).
//! Exits 0 regardless of the outcome unless `FLOWS_ACCEPTANCE_STRICT=1`.

use std::path::Path;

use ndarray::{array, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use flows_core::ablation::{run_ablation, summarize, RunSummary, Splits};
use flows_core::diffcore::{
    adam_step, ema_update, grad_check, AdamConfig, AdamState, EmaState, GradCheckOptions, GradientRecord, Mat,
    ParamArray, ParamSet,
};
use flows_core::eval::{diagnostics, evaluate, step_sweep, EvalOptions};
use flows_core::exec::Exec;
use flows_core::flowfield::{consistency_target_with, euler_integrate_with, TokenMode};
use flows_core::model::{compute_losses, loss_value, prepare, Batch, LossWeights};
use flows_core::prior::{diversity_hinge, entropy_penalty, kl_divergence, prior_nll, PriorOutput, PriorWeights};
use flows_core::report::{write_json, write_report, DIAGNOSTICS_FILE, METRICS_FILE, SWEEP_FILE};
use flows_core::scenesynth::{generate_dataset, Split};
use flows_core::selector::{
    adaptive_threshold, average_precision, chi_mean, nms_indices, pl_rank_loss, pl_rank_loss_grad, CandidateSet,
    ThresholdRule,
};
use flows_core::train::{train, TrainOptions, FINAL_CHECKPOINT, TRAIN_LOG};
use flows_core::{Model, RunConfig, SceneSample, Variant};

// central-difference step for the fourth-order stencil
const FD_STEP: f64 = 1e-4;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn small_cfg() -> RunConfig {
    RunConfig {
        encoder_hidden: vec![16],
        context_dim: 8,
        prior_width: 16,
        query_dim: 4,
        field_hidden: vec![16],
        embed_freqs: 2,
        rank_hidden: 8,
        modes: 3,
        keep: 3,
        train_size: 64,
        val_size: 16,
        test_size: 32,
        batch_size: 8,
        ..RunConfig::default()
    }
}

// ---------------------------------------------------------------- criterion 1

fn isolate(base: &LossWeights, which: &str) -> LossWeights {
    let zero = PriorWeights { nll: 0.0, mix: 0.0, ent: 0.0, div: 0.0 };
    let mut w = LossWeights {
        prior: zero,
        flow: 0.0,
        cons: 0.0,
        rank: 0.0,
        margin: base.margin,
    };
    match which {
        "L_nll" => w.prior.nll = 1.0,
        "L_mix" => w.prior.mix = 1.0,
        "L_ent" => w.prior.ent = 1.0,
        "L_div" => w.prior.div = 1.0,
        "L_flow" => w.flow = 1.0,
        "L_cons" => w.cons = 1.0,
        "L_step" => {
            w.flow = base.flow;
            w.cons = base.cons;
        }
        "pl_rank_loss" => w.rank = 1.0,
        _ => unreachable!(),
    }
    w
}

fn worst_term_error(cfg: &RunConfig, model: &Model, scenes: &[SceneSample]) -> Vec<(&'static str, f64)> {
    let refs: Vec<&SceneSample> = scenes.iter().take(6).collect();
    let batch = Batch::new(model, &refs).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let frozen = prepare(model, &model.params, &batch, cfg, Variant::Full, &mut rng).unwrap();
    let base = LossWeights::for_variant(cfg, Variant::Full);
    let opts = GradCheckOptions { coords_per_array: 8, seed: 3 };
    ["L_nll", "L_mix", "L_ent", "L_div", "L_flow", "L_cons", "L_step", "pl_rank_loss"]
        .into_iter()
        .map(|name| {
            let w = isolate(&base, name);
            let (_, grads) = compute_losses(model, &model.params, &batch, &frozen, &w).unwrap();
            let rep = grad_check(|p| loss_value(model, p, &batch, &frozen, &w), &model.params, &grads, FD_STEP, &opts)
                .unwrap();
            (name, rep.max_rel_error)
        })
        .collect()
}

fn criterion_gradients() -> Outcome {
    let cfg = RunConfig { epochs: 13, ..small_cfg() };
    let (train_set, _) = generate_dataset(&cfg.scenario(), Split::Train).unwrap();
    let (val_set, _) = generate_dataset(&cfg.scenario(), Split::Val).unwrap();
    let init = Model::new(&cfg, 11);
    let mut at_100: Option<Model> = None;
    let mut hook = |step: u64, m: &Model| {
        if step == 100 {
            at_100 = Some(m.clone());
        }
    };
    let opts = TrainOptions {
        on_step: Some(&mut hook),
        ..TrainOptions::default()
    };
    train(&cfg, Variant::Full, 11, &train_set, &val_set, opts).unwrap();
    let trained = at_100.expect("training reaches step 100");

    let mut worst: f64 = 0.0;
    let mut parts = Vec::new();
    for (label, m) in [("init", &init), ("step100", &trained)] {
        for (name, e) in worst_term_error(&cfg, m, &val_set) {
            worst = worst.max(e);
            parts.push(format!("{label}/{name}={e:.1e}"));
        }
    }
    // the scalar ranking loss on its own
    let scores = [0.7, -0.2, 1.3, 0.1];
    let order = [2, 0, 3, 1];
    let set = {
        let mut p = ParamSet::new();
        p.push(ParamArray::new("s", vec![4], scores.to_vec()).unwrap());
        p
    };
    let (_, g) = pl_rank_loss_grad(&scores, &order);
    let rep = grad_check(
        |p| Ok(pl_rank_loss(&p.arrays[0].values, &order)),
        &set,
        &GradientRecord { grads: vec![g] },
        FD_STEP,
        &GradCheckOptions::default(),
    )
    .unwrap();
    worst = worst.max(rep.max_rel_error);
    parts.push(format!("scalar/pl_rank_loss={:.1e}", rep.max_rel_error));
    outcome(worst < 1e-4, format!("max rel err {worst:.2e} < 1e-4 [{}]", parts.join(" ")))
}

// ---------------------------------------------------------------- criterion 9

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

fn oracle_affine_ode() -> bool {
    let (a, n) = (0.5, 16);
    let x0 = array![[1.0, -2.0, 0.5]];
    let out = euler_integrate_with(|x, _, _| x * a, &x0, n, TokenMode::Step);
    let euler = (1.0 + a / n as f64).powi(n as i32);
    let exact = a.exp();
    let bound = a * a * exact / (2.0 * n as f64);
    let ok_euler = out.iter().zip(x0.iter()).all(|(o, x)| close(*o, euler * x, 1e-12));
    let gap = exact - euler;
    ok_euler && gap > 0.0 && gap <= bound
}

fn oracle_affine_consistency() -> bool {
    let (a, d) = (0.8, 0.25);
    let x = array![[1.0, 2.0], [-0.5, 3.0]];
    let target = consistency_target_with(|x, _, _| x * a, &x, &[0.1, 0.3], &[d, d], &[d, d]);
    let want = &x * (a * (1.0 + a * d / 2.0));
    target.iter().zip(want.iter()).all(|(p, q)| close(*p, *q, 1e-12))
}

fn oracle_pr_curve() -> bool {
    let conf: [&[f64]; 3] = [&[0.9, 0.1], &[0.8, 0.2], &[0.7, 0.3]];
    let matched = vec![vec![false, true], vec![true, true], vec![false, false]];
    // sorted: .9 FP, .8 TP, .7 FP, .3 FP, .2 (credit .25 when soft), .1 TP
    // hard: (R, P) = (1/3, 1/2), (2/3, 2/5)
    // soft: (1/3, 1/2), (2/3, 2.25/5.25)
    let hard = average_precision(&conf, &matched, false);
    let soft = average_precision(&conf, &matched, true);
    close(hard, 0.5 / 3.0 + 0.4 / 3.0, 1e-12) && close(soft, 0.5 / 3.0 + (3.0 / 7.0) / 3.0, 1e-12)
}

fn oracle_nms_trace() -> bool {
    let cands = CandidateSet {
        trajectories: array![[0.0, 0.0], [0.5, 0.0], [3.0, 0.0], [3.2, 0.0]],
        confidence: vec![0.4, 0.3, 0.2, 0.1],
        rank_scores: vec![0.0; 4],
    };
    // 0 kept; 1 within 1.0 of 0; 2 kept; 3 within 1.0 of 2; refill by confidence
    nms_indices(&cands, 1.0, 2) == vec![0, 2] && nms_indices(&cands, 1.0, 3) == vec![0, 2, 1]
}

fn oracle_adam_first_step() -> bool {
    let mut p = ParamSet::new();
    p.push(ParamArray::new("w", vec![3], vec![0.5, -2.0, 1.0]).unwrap());
    let before = p.arrays[0].values.clone();
    let g = vec![0.3, -4e-3, 25.0];
    let cfg = AdamConfig::default();
    let mut st = AdamState::new(&p, cfg);
    adam_step(&mut p, &GradientRecord { grads: vec![g.clone()] }, &mut st).unwrap();
    p.arrays[0]
        .values
        .iter()
        .zip(&before)
        .zip(&g)
        .all(|((a, b), gv)| close(a - b, -cfg.lr * gv.signum(), 1e-8))
}

fn oracle_ema() -> bool {
    let mut live = ParamSet::new();
    live.push(ParamArray::new("w", vec![1], vec![0.0]).unwrap());
    let mut ema = EmaState::new(&live, 0.9).unwrap();
    live.arrays[0].values[0] = 1.0;
    ema_update(&live, &mut ema).unwrap();
    ema_update(&live, &mut ema).unwrap();
    close(ema.shadow.arrays[0].values[0], 0.19, 1e-15)
}

fn oracle_plackett_luce() -> bool {
    let v = pl_rank_loss(&[1.0, 0.0, -1.0], &[0, 1, 2]);
    let e = std::f64::consts::E;
    let direct = -((e / (e + 1.0 + 1.0 / e)).ln() + (1.0 / (1.0 + 1.0 / e)).ln());
    close(v, direct, 1e-12) && close(v, 0.720868, 1e-6)
}

fn single(mu: Mat, sigma: Mat) -> PriorOutput {
    let k = mu.nrows();
    PriorOutput {
        mu,
        log_sigma: sigma.mapv(f64::ln),
        pi: vec![1.0 / k as f64; k],
    }
}

fn oracle_prior_terms() -> bool {
    let y: Vec<f64> = (0..32).map(|i| 0.1 * i as f64).collect();
    let mu = Array2::from_shape_vec((1, 32), y.clone()).unwrap();
    let nll = prior_nll(&single(mu, Array2::from_elem((1, 32), 2.0)), &y).0[0];
    let kl = kl_divergence(&[0.8, 0.2], &[0.5, 0.5]);
    let mixed = Array2::from_shape_fn((2, 4), |(i, _)| if i == 0 { 1.0 } else { std::f64::consts::E });
    let ent = entropy_penalty(&single(Array2::zeros((2, 4)), mixed));
    let off = single(array![[0.0, 0.0, 1.0, 1.0], [1.0, 0.0, 2.0, 1.0]], Array2::ones((2, 4)));
    close(nll, 32.0 * 2f64.ln(), 1e-12)
        && close(kl, 0.8 * 1.6f64.ln() + 0.2 * 0.4f64.ln(), 1e-15)
        && close(kl, 0.19274, 1e-5)
        && close(ent, -0.5, 1e-15)
        && close(diversity_hinge(&off, 3.0), 2.0, 1e-15)
}

fn oracle_threshold_and_chi() -> bool {
    let rule = ThresholdRule { lo_m: 2.0, hi_m: 4.0, meters_per_unit: 1.0, speed_at_hi: 1.0 };
    let mid = adaptive_threshold(0.5, &rule);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let n = 32;
    let draws = 20_000;
    let mc: f64 = (0..draws)
        .map(|_| (0..n).map(|_| rng.sample::<f64, _>(StandardNormal).powi(2)).sum::<f64>().sqrt())
        .sum::<f64>()
        / draws as f64;
    // std of |Z| is about 1/sqrt(2), so the MC error is well under 0.02
    close(mid, 3.0, 1e-15) && close(mc, chi_mean(n), 0.02)
}

fn criterion_oracles() -> Outcome {
    let checks: [(&str, fn() -> bool); 9] = [
        ("affine-ode", oracle_affine_ode),
        ("affine-consistency", oracle_affine_consistency),
        ("pr-curve", oracle_pr_curve),
        ("nms-trace", oracle_nms_trace),
        ("adam-first-step", oracle_adam_first_step),
        ("ema", oracle_ema),
        ("plackett-luce", oracle_plackett_luce),
        ("prior-terms", oracle_prior_terms),
        ("threshold-chi", oracle_threshold_and_chi),
    ];
    let failed: Vec<&str> = checks.iter().filter(|(_, f)| !f()).map(|(n, _)| *n).collect();
    outcome(
        failed.is_empty(),
        format!("{}/{} oracles match; failed: [{}]", checks.len() - failed.len(), checks.len(), failed.join(", ")),
    )
}

// ---------------------------------------------------------------- criterion 10

fn evaluate_into(dir: &Path, cfg: &RunConfig, model: &Model, test: &[SceneSample], exec: Exec, threads: usize) {
    let opts = EvalOptions { steps: 1, exec, threads, chunk: 16 };
    let m = evaluate(model, &model.params, cfg, Variant::Full, test, &opts).unwrap();
    let d = diagnostics(model, &model.params, cfg, Variant::Full, test, &opts).unwrap();
    let s = step_sweep(model, &model.params, cfg, Variant::Full, test, &cfg.sweep_steps, &opts).unwrap();
    write_json(&dir.join(METRICS_FILE), &m).unwrap();
    write_json(&dir.join(DIAGNOSTICS_FILE), &d).unwrap();
    write_json(&dir.join(SWEEP_FILE), &s).unwrap();
    write_report(dir).unwrap();
}

fn tree_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().unwrap() != "wall_time.txt" {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn criterion_determinism() -> Outcome {
    let cfg = RunConfig { epochs: 3, train_size: 256, test_size: 64, ..small_cfg() };
    let data = Splits::generate(&cfg).unwrap();
    let dirs: Vec<tempfile::TempDir> = (0..2).map(|_| tempfile::tempdir().unwrap()).collect();
    let mut models = Vec::new();
    for d in &dirs {
        let opts = TrainOptions {
            run_dir: Some(d.path().to_path_buf()),
            ..TrainOptions::default()
        };
        models.push(train(&cfg, Variant::Full, 4, &data.train, &data.val, opts).unwrap().model);
    }
    evaluate_into(dirs[0].path(), &cfg, &models[0], &data.test, Exec::Sequential, 1);
    evaluate_into(dirs[1].path(), &cfg, &models[1], &data.test, Exec::Parallel, 4);
    let (a, b) = (tree_bytes(dirs[0].path()), tree_bytes(dirs[1].path()));
    let names: Vec<&str> = a.iter().map(|(n, _)| n.as_str()).collect();
    let differing: Vec<&str> = a.iter().zip(&b).filter(|(x, y)| x != y).map(|(x, _)| x.0.as_str()).collect();
    let has_core = names.contains(&FINAL_CHECKPOINT) && names.contains(&TRAIN_LOG) && names.len() >= 10;
    outcome(
        has_core && a.len() == b.len() && differing.is_empty(),
        format!(
            "{} files compared (sequential/1 thread vs parallel/4 threads), {} differ {:?}",
            a.len(),
            differing.len(),
            differing
        ),
    )
}

// ---------------------------------------------------------------- criterion 8 control

fn criterion_symmetric_control() -> (bool, String) {
    let cfg = RunConfig {
        symmetric_init: true,
        lambda_div: 0.0,
        epochs: 3,
        ..small_cfg()
    };
    let data = Splits::generate(&cfg).unwrap();
    let out = train(&cfg, Variant::Full, 6, &data.train, &data.val, TrainOptions::default()).unwrap();
    let m = &out.model;
    let refs: Vec<&SceneSample> = data.test.iter().collect();
    let c = m.encoder.encode_batch(&m.params, &refs).unwrap();
    let outs = m.prior.eval_batch(&m.params, &c);
    let mut max_diff: f64 = 0.0;
    for o in &outs {
        for k in 1..o.modes() {
            for (x, y) in o.mu.row(k).iter().zip(o.mu.row(0)) {
                max_diff = max_diff.max((x - y).abs());
            }
        }
    }
    let moved = outs[0].mu.iter().map(|v| v.abs()).sum::<f64>() > 0.0;
    (max_diff == 0.0 && moved, format!("symmetric control max mode-mean diff {max_diff:e}"))
}

// ---------------------------------------------------------------- ablation criteria

fn runs_of(runs: &[RunSummary], v: Variant) -> Vec<&RunSummary> {
    runs.iter().filter(|r| r.variant == v).collect()
}

fn criterion_transport(runs: &[RunSummary]) -> Outcome {
    let ratios: Vec<f64> = runs_of(runs, Variant::Full)
        .iter()
        .map(|r| r.metrics.transport.as_ref().unwrap().ratio)
        .collect();
    outcome(
        ratios.iter().all(|&r| r <= 0.75),
        format!("prior/gaussian transport ratio per seed {ratios:.3?} <= 0.75"),
    )
}

fn criterion_semigroup(runs: &[RunSummary]) -> Outcome {
    let full: Vec<f64> = runs_of(runs, Variant::Full).iter().map(|r| r.diagnostics.semigroup_mean).collect();
    let none: Vec<f64> = runs_of(runs, Variant::PriorOnly).iter().map(|r| r.diagnostics.semigroup_mean).collect();
    let pass = full.iter().all(|&f| f < 0.10) && full.iter().zip(&none).all(|(f, n)| *n >= 2.0 * f);
    outcome(pass, format!("residual with consistency {full:.4?} < 0.10; without {none:.4?} (>= 2x)"))
}

fn criterion_step_resilience(runs: &[RunSummary]) -> Outcome {
    let gap = |r: &&RunSummary| (r.map_at(1).unwrap() - r.map_at(16).unwrap()).abs();
    let full: Vec<f64> = runs_of(runs, Variant::Full).iter().map(gap).collect();
    let none: Vec<f64> = runs_of(runs, Variant::PriorOnly).iter().map(gap).collect();
    let larger = full.iter().zip(&none).filter(|(f, n)| n > f).count();
    let pass = full.iter().all(|&g| g <= 0.02) && larger >= 2;
    outcome(
        pass,
        format!("|mAP1-mAP16| with consistency {full:.4?} <= 0.02; without {none:.4?}, larger on {larger}/3 seeds (need 2)"),
    )
}

fn criterion_ordering(runs: &[RunSummary]) -> Outcome {
    let rows = summarize(runs);
    let row = |v: Variant| rows.iter().find(|r| r.variant == v).unwrap();
    let (f, p, g, b) = (
        row(Variant::Full),
        row(Variant::PriorOnly),
        row(Variant::FieldOnly),
        row(Variant::GaussianBaseline),
    );
    let std = rows.iter().map(|r| r.map_std).fold(0.0, f64::max);
    let pass = f.map_mean > p.map_mean
        && p.map_mean > b.map_mean
        && f.map_mean > g.map_mean
        && g.map_mean > b.map_mean
        && f.map_mean - b.map_mean > std;
    outcome(
        pass,
        format!(
            "mean mAP full {:.4}±{:.4} prior_only {:.4}±{:.4} field_only {:.4}±{:.4} baseline {:.4}±{:.4}; full-baseline gap {:.4} vs max std {:.4}",
            f.map_mean, f.map_std, p.map_mean, p.map_std, g.map_mean, g.map_std, b.map_mean, b.map_std,
            f.map_mean - b.map_mean, std
        ),
    )
}

fn criterion_probe(runs: &[RunSummary]) -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for r in runs_of(runs, Variant::Full) {
        let probe = &r.diagnostics.probe;
        let at = |t: f64| probe.iter().find(|p| close(p.t, t, 1e-12)).unwrap();
        let drop = at(0.0).cosine - at(0.75).cosine;
        let l2: Vec<f64> = probe.iter().map(|p| p.l2).collect();
        let ratio = l2.iter().cloned().fold(f64::MIN, f64::max) / l2.iter().cloned().fold(f64::MAX, f64::min);
        pass &= drop >= 0.1 && ratio < 1.5;
        parts.push(format!("seed {}: cos drop {drop:.3} (>=0.1), l2 max/min {ratio:.2} (<1.5)", r.seed));
    }
    outcome(pass, parts.join("; "))
}

fn criterion_horizon(runs: &[RunSummary]) -> Outcome {
    let mut bad = Vec::new();
    for r in runs {
        let h = &r.metrics.horizon;
        let ok = h.windows(2).all(|w| w[1].cumulative_ade >= w[0].cumulative_ade && w[1].p95 >= w[0].p95);
        if !ok {
            bad.push(format!("{}/{}", r.variant.name(), r.seed));
        }
    }
    outcome(
        bad.is_empty(),
        format!("cumulative ADE and p95 non-decreasing in {}/{} runs {:?}", runs.len() - bad.len(), runs.len(), bad),
    )
}

fn criterion_calibration(runs: &[RunSummary], control: (bool, String)) -> Outcome {
    let mut pass = control.0;
    let mut parts = Vec::new();
    for r in runs_of(runs, Variant::Full) {
        let (init, fin) = (r.initial_kl.unwrap(), r.diagnostics.mixture_kl.unwrap());
        pass &= fin < 0.5 * init;
        parts.push(format!("seed {}: KL {fin:.3} vs init {init:.3}", r.seed));
    }
    parts.push(control.1);
    outcome(pass, parts.join("; "))
}

fn main() {
    let started = std::time::Instant::now();
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();

    results.push((1, "gradient correctness", criterion_gradients()));
    results.push((9, "exact-value oracles", criterion_oracles()));
    results.push((10, "determinism", criterion_determinism()));
    // the trained-ablation criteria take most of the run time
    if std::env::var("FLOWS_ACCEPTANCE_QUICK").is_ok_and(|v| v == "1") {
        return finish(results, started);
    }
    let control = criterion_symmetric_control();

    let cfg = RunConfig::default();
    let data = Splits::generate(&cfg).unwrap();
    let runs = run_ablation(
        &cfg,
        &Variant::ALL,
        &cfg.ablate_seeds,
        &data,
        Exec::Parallel,
        &EvalOptions::default(),
    )
    .unwrap();
    results.push((2, "transport reduction", criterion_transport(&runs)));
    results.push((3, "semigroup consistency", criterion_semigroup(&runs)));
    results.push((4, "step resilience", criterion_step_resilience(&runs)));
    results.push((5, "ablation ordering", criterion_ordering(&runs)));
    results.push((6, "scale-aware probe", criterion_probe(&runs)));
    results.push((7, "horizon monotonicity", criterion_horizon(&runs)));
    results.push((8, "mixture calibration", criterion_calibration(&runs, control)));
    finish(results, started);
}

fn finish(mut results: Vec<(usize, &str, Outcome)>, started: std::time::Instant) {
    results.sort_by_key(|r| r.0);

    for (i, name, o) in &results {
        println!("criterion {i:>2} {:<24} {}  {}", name, if o.pass { "PASS" } else { "FAIL" }, o.detail);
    }
    let passed = results.iter().filter(|r| r.2.pass).count();
    println!(
        "acceptance: {passed}/{} criteria pass in {:.0}s",
        results.len(),
        started.elapsed().as_secs_f64()
    );
    let strict = std::env::var("FLOWS_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    if strict && passed < results.len() {
        std::process::exit(1);
    }
}
