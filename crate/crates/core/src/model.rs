//! The assembled predictor: encoder, mixture prior, displacement field and
//! rank head sharing one parameter set.
//!
//! A training step is split in two. [`prepare`] runs everything that is held
//! fixed during differentiation (winner weights, soft mixture targets,
//! anchors, flow-matching pairs, teacher targets and candidate quality
//! orders); [`compute_losses`] then evaluates the objective on a tape and
//! returns its gradient.

use ndarray::{s, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, Variant};
use crate::diffcore::{GradientRecord, Mat, ParamArray, ParamSet, Tape, Var};
use crate::encoder::Encoder;
use crate::error::{FlowsError, Result};
use crate::flowfield::{consistency_target_with, mse, Field, FieldSpec};
use crate::prior::{
    argmin, batch_nll, batch_soft_targets, prior_loss_eval, relaxed_wta_weights, Prior, PriorOutput,
    PriorSpec,
};
use crate::scenesynth::SceneSample;
use crate::selector::{fde, pl_rank_loss_grad, quality_order, CandidateSet, RankHead};

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub encoder: Encoder,
    pub prior: Prior,
    pub field: Field,
    pub rank: RankHead,
    pub params: ParamSet,
}

impl Model {
    /// Fresh parameters drawn from `seed`.
    pub fn new(cfg: &RunConfig, seed: u64) -> Model {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let t2 = 2 * cfg.horizon;
        let encoder = Encoder::register(
            &mut params,
            cfg.scenario().encoder_input_len(),
            &cfg.encoder_hidden,
            cfg.context_dim,
            &mut rng,
        );
        let prior = Prior::register(
            &mut params,
            PriorSpec {
                modes: cfg.modes,
                horizon: cfg.horizon,
                context_dim: cfg.context_dim,
                width: cfg.prior_width,
                query_dim: cfg.query_dim,
                log_sigma_min: cfg.log_sigma_min,
                log_sigma_max: cfg.log_sigma_max,
                output_scale: cfg.traj_scale,
                symmetric_init: cfg.symmetric_init,
            },
            &mut rng,
        );
        let field = Field::register(
            &mut params,
            FieldSpec {
                horizon: cfg.horizon,
                context_dim: cfg.context_dim,
                hidden: cfg.field_hidden.clone(),
                freqs: cfg.embed_freqs,
                output_scale: cfg.traj_scale,
                out_gain: cfg.field_out_gain,
                endpoint: cfg.field_endpoint,
            },
            &mut rng,
        );
        let rank = RankHead::register(&mut params, cfg.context_dim, t2, cfg.rank_hidden, cfg.traj_scale, &mut rng);
        Model {
            encoder,
            prior,
            field,
            rank,
            params,
        }
    }

    /// Same architecture with other parameter values.
    pub fn with_params(&self, params: ParamSet) -> Result<Model> {
        self.params.check_layout(&params)?;
        Ok(Model {
            params,
            ..self.clone()
        })
    }

    pub fn horizon(&self) -> usize {
        self.field.spec.horizon
    }

    pub fn modes(&self) -> usize {
        self.prior.spec.modes
    }
}

/// Encoder inputs and flattened futures of a set of scenes.
#[derive(Debug, Clone)]
pub struct Batch {
    pub x: Mat,
    pub y: Mat,
}

impl Batch {
    pub fn new(model: &Model, scenes: &[&SceneSample]) -> Result<Batch> {
        let x = model.encoder.input_matrix(scenes)?;
        let t2 = 2 * model.horizon();
        let mut y = Array2::zeros((scenes.len(), t2));
        for (mut row, s) in y.rows_mut().into_iter().zip(scenes) {
            let f = s.future.flat();
            if f.len() != t2 {
                return Err(FlowsError::Shape(format!(
                    "scene `{}` has {} future values, expected {t2}",
                    s.scene_id,
                    f.len()
                )));
            }
            row.assign(&ndarray::ArrayView1::from(&f));
        }
        Ok(Batch { x, y })
    }

    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Rows fed to the field: scene index, state, time, token and target.
#[derive(Debug, Clone)]
pub struct FieldRows {
    pub scene: Vec<usize>,
    pub x: Mat,
    pub t: Vec<f64>,
    pub d: Vec<f64>,
    pub target: Mat,
}

impl FieldRows {
    fn empty(cols: usize) -> FieldRows {
        FieldRows {
            scene: Vec::new(),
            x: Array2::zeros((0, cols)),
            t: Vec::new(),
            d: Vec::new(),
            target: Array2::zeros((0, cols)),
        }
    }

    pub fn len(&self) -> usize {
        self.scene.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scene.is_empty()
    }
}

/// Everything held constant while differentiating one training step.
#[derive(Debug, Clone)]
pub struct Frozen {
    /// `B x K` winner weights; empty without a prior.
    pub wta: Mat,
    /// `B x K` soft mixture targets.
    pub pi_hat: Mat,
    pub flow: FieldRows,
    pub cons: FieldRows,
    /// `B*K x D` detached contexts and `B*K x 2T` one-step candidates.
    pub rank_c: Mat,
    pub rank_traj: Mat,
    /// Candidate indices per scene, best first.
    pub rank_order: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub nll: f64,
    pub mix: f64,
    pub ent: f64,
    pub div: f64,
    pub flow: f64,
    pub cons: f64,
    pub rank: f64,
    pub total: f64,
}

impl LossTerms {
    pub fn add_scaled(&mut self, other: &LossTerms, w: f64) {
        self.nll += w * other.nll;
        self.mix += w * other.mix;
        self.ent += w * other.ent;
        self.div += w * other.div;
        self.flow += w * other.flow;
        self.cons += w * other.cons;
        self.rank += w * other.rank;
        self.total += w * other.total;
    }

    pub fn is_finite(&self) -> bool {
        [self.nll, self.mix, self.ent, self.div, self.flow, self.cons, self.rank, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Loss weights of a variant: the prior terms vanish without a prior and the
/// consistency term without consistency training.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub prior: crate::prior::PriorWeights,
    pub flow: f64,
    pub cons: f64,
    pub rank: f64,
    pub margin: f64,
}

impl LossWeights {
    pub fn for_variant(cfg: &RunConfig, variant: Variant) -> LossWeights {
        let mut prior = cfg.prior_weights();
        if !variant.uses_prior() {
            prior = crate::prior::PriorWeights {
                nll: 0.0,
                mix: 0.0,
                ent: 0.0,
                div: 0.0,
            };
        }
        LossWeights {
            prior,
            flow: cfg.lambda_flow,
            cons: if variant.uses_consistency() { cfg.lambda_cons } else { 0.0 },
            rank: cfg.lambda_rank,
            margin: cfg.div_margin,
        }
    }

    fn prior_active(&self) -> bool {
        let p = &self.prior;
        p.nll != 0.0 || p.mix != 0.0 || p.ent != 0.0 || p.div != 0.0
    }
}

fn repeat_rows(m: &Mat, rows: &[usize]) -> Mat {
    let mut out = Array2::zeros((rows.len(), m.ncols()));
    for (mut r, &i) in out.rows_mut().into_iter().zip(rows) {
        r.assign(&m.row(i));
    }
    out
}

fn gaussian(rows: usize, cols: usize, rng: &mut impl Rng) -> Mat {
    Array2::from_shape_simple_fn((rows, cols), || rng.sample(StandardNormal))
}


/// Starting points used at inference for one batch: `B*K x 2T`, rows ordered
/// `(scene, candidate)`, plus the prior outputs when the variant has one.
pub fn inference_anchors(
    model: &Model,
    params: &ParamSet,
    c: &Mat,
    variant: Variant,
    tau: f64,
    rng: &mut impl Rng,
) -> (Mat, Option<Vec<PriorOutput>>) {
    let (b, k, t2) = (c.nrows(), model.modes(), 2 * model.horizon());
    let eps = gaussian(b * k, t2, rng);
    if variant.uses_prior() {
        let outs = model.prior.eval_batch(params, c);
        let mut a = eps;
        for (i, o) in outs.iter().enumerate() {
            let sig = o.sigma();
            let mut blk = a.slice_mut(s![i * k..(i + 1) * k, ..]);
            blk.zip_mut_with(&sig, |e, sg| *e *= tau * sg);
            blk += &o.mu;
        }
        (a, Some(outs))
    } else {
        (eps, None)
    }
}

/// Builds the frozen half of a training step.
///
/// `teacher` holds the EMA parameters that produce consistency targets.
pub fn prepare(
    model: &Model,
    teacher: &ParamSet,
    batch: &Batch,
    cfg: &RunConfig,
    variant: Variant,
    rng: &mut impl Rng,
) -> Result<Frozen> {
    let params = &model.params;
    let (b, k, t2) = (batch.len(), model.modes(), 2 * model.horizon());
    let weights = LossWeights::for_variant(cfg, variant);
    let scene_refs: Vec<usize> = (0..b).collect();
    let c = {
        let mut tape = Tape::new();
        let bound = tape.bind(params, false);
        let xi = tape.input(batch.x.clone());
        let cv = model.encoder.forward(&mut tape, &bound, xi);
        tape.value(cv).clone()
    };

    // Training anchors and the scenes they belong to.
    let (wta, pi_hat, anchors, anchor_scene) = if variant.uses_prior() {
        let outs = model.prior.eval_batch(params, &c);
        let (mu, ls, _) = crate::prior::stack_outputs(&outs);
        let nll = batch_nll(&mu, &ls, &batch.y, k);
        let wta = relaxed_wta_weights(&nll, cfg.wta_relax);
        let pi_hat = batch_soft_targets(&nll, cfg.tau_mix);
        let eps = gaussian(b * k, t2, rng);
        let a = &mu + &(ls.mapv(f64::exp) * cfg.tau_train * &eps);
        if cfg.wta_modes {
            // the winner is picked from the mode parameters, never from the sampled noise,
            // so the noise of a training anchor stays independent of the future
            let rows: Vec<usize> = (0..b)
                .map(|i| i * k + argmin(nll.row(i).as_slice().expect("row")))
                .collect();
            (wta, pi_hat, repeat_rows(&a, &rows), scene_refs.clone())
        } else {
            (wta, pi_hat, a, (0..b * k).map(|r| r / k).collect())
        }
    } else {
        let z = gaussian(b, t2, rng);
        (Array2::zeros((0, k)), Array2::zeros((0, k)), z, scene_refs.clone())
    };
    let y_rows = repeat_rows(&batch.y, &anchor_scene);
    let n = anchors.nrows();

    let flow = if weights.flow > 0.0 {
        let t: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
        let mut x = anchors.clone();
        for (mut r, (&tv, yr)) in x.rows_mut().into_iter().zip(t.iter().zip(y_rows.rows())) {
            r.zip_mut_with(&yr, |a, y| *a = (1.0 - tv) * *a + tv * y);
        }
        FieldRows {
            scene: anchor_scene.clone(),
            x,
            t,
            d: vec![0.0; n],
            target: &y_rows - &anchors,
        }
    } else {
        FieldRows::empty(t2)
    };

    let cons = if weights.cons > 0.0 && !cfg.cons_tokens.is_empty() {
        let tokens: Vec<f64> = (0..n).map(|_| cfg.cons_tokens[rng.gen_range(0..cfg.cons_tokens.len())]).collect();
        let t: Vec<f64> = tokens.iter().map(|s| rng.gen::<f64>() * (1.0 - s)).collect();
        let half: Vec<f64> = tokens.iter().map(|s| s / 2.0).collect();
        let teacher_tok: Vec<f64> = half.iter().map(|&d| cfg.teacher_token(d)).collect();
        let mut x = anchors.clone();
        for (mut r, (&tv, yr)) in x.rows_mut().into_iter().zip(t.iter().zip(y_rows.rows())) {
            r.zip_mut_with(&yr, |a, y| *a = (1.0 - tv) * *a + tv * y);
        }
        let c_teacher = {
            let mut tape = Tape::new();
            let bound = tape.bind(teacher, false);
            let xi = tape.input(batch.x.clone());
            let cv = model.encoder.forward(&mut tape, &bound, xi);
            repeat_rows(tape.value(cv), &anchor_scene)
        };
        let target = consistency_target_with(
            |xs, ts, ds| model.field.eval(teacher, xs, ts, ds, &c_teacher),
            &x,
            &t,
            &half,
            &teacher_tok,
        );
        FieldRows {
            scene: anchor_scene.clone(),
            x,
            t,
            d: tokens,
            target,
        }
    } else {
        FieldRows::empty(t2)
    };

    // Candidates as produced at inference, ranked by final-point error.
    let (rank_c, rank_traj, rank_order) = if weights.rank > 0.0 {
        let (a, _) = inference_anchors(model, params, &c, variant, cfg.tau_infer, rng);
        let rows: Vec<usize> = (0..b * k).map(|r| r / k).collect();
        let c_rows = repeat_rows(&c, &rows);
        let pred = model
            .field
            .integrate(params, &a, &c_rows, 1, variant.token_mode());
        let order = (0..b)
            .map(|i| {
                let y = batch.y.row(i).to_vec();
                let f: Vec<f64> = (0..k)
                    .map(|m| fde(pred.row(i * k + m).as_slice().expect("row"), &y))
                    .collect();
                quality_order(&f)
            })
            .collect();
        (c_rows, pred, order)
    } else {
        (Array2::zeros((0, c.ncols())), Array2::zeros((0, t2)), Vec::new())
    };

    Ok(Frozen {
        wta,
        pi_hat,
        flow,
        cons,
        rank_c,
        rank_traj,
        rank_order,
    })
}

fn field_term(
    model: &Model,
    tape: &mut Tape,
    bound: &[Var],
    c: Var,
    rows: &FieldRows,
) -> Option<(Var, f64, Mat)> {
    if rows.is_empty() {
        return None;
    }
    let c_rows = tape.gather(c, rows.scene.clone());
    let x = tape.input(rows.x.clone());
    let out = model.field.forward(tape, bound, x, &rows.t, &rows.d, c_rows);
    let (value, grad) = mse(tape.value(out), &rows.target);
    Some((out, value, grad))
}

/// Objective of one step on `params`, and its gradient.
pub fn compute_losses(
    model: &Model,
    params: &ParamSet,
    batch: &Batch,
    frozen: &Frozen,
    weights: &LossWeights,
) -> Result<(LossTerms, GradientRecord)> {
    model.params.check_layout(params)?;
    let mut tape = Tape::new();
    let bound = tape.bind(params, true);
    let xi = tape.input(batch.x.clone());
    let c = model.encoder.forward(&mut tape, &bound, xi);
    let mut terms = LossTerms::default();
    let mut seeds: Vec<(Var, Mat)> = Vec::new();

    if weights.prior_active() && frozen.wta.nrows() == batch.len() {
        let pv = model.prior.forward(&mut tape, &bound, c);
        let ev = prior_loss_eval(
            tape.value(pv.mu),
            tape.value(pv.log_sigma),
            tape.value(pv.logits),
            &batch.y,
            &frozen.wta,
            &frozen.pi_hat,
            &weights.prior,
            weights.margin,
        );
        terms.nll = ev.nll;
        terms.mix = ev.mix;
        terms.ent = ev.ent;
        terms.div = ev.div;
        terms.total += ev.weighted(&weights.prior);
        seeds.push((pv.mu, ev.d_mu));
        seeds.push((pv.log_sigma, ev.d_log_sigma));
        seeds.push((pv.logits, ev.d_logits));
    }

    if weights.flow > 0.0 {
        if let Some((out, v, g)) = field_term(model, &mut tape, &bound, c, &frozen.flow) {
            terms.flow = v;
            terms.total += weights.flow * v;
            seeds.push((out, g * weights.flow));
        }
    }
    if weights.cons > 0.0 {
        if let Some((out, v, g)) = field_term(model, &mut tape, &bound, c, &frozen.cons) {
            terms.cons = v;
            terms.total += weights.cons * v;
            seeds.push((out, g * weights.cons));
        }
    }

    if weights.rank > 0.0 && !frozen.rank_order.is_empty() {
        let r = model.rank.forward(&mut tape, &bound, &frozen.rank_c, &frozen.rank_traj);
        let scores = tape.value(r).clone();
        let b = frozen.rank_order.len();
        let k = scores.nrows() / b;
        let mut g = Array2::zeros((scores.nrows(), 1));
        let mut total = 0.0;
        for (i, order) in frozen.rank_order.iter().enumerate() {
            let sc: Vec<f64> = (0..k).map(|m| scores[[i * k + m, 0]]).collect();
            let (l, gr) = pl_rank_loss_grad(&sc, order);
            total += l / b as f64;
            for m in 0..k {
                g[[i * k + m, 0]] = weights.rank * gr[m] / b as f64;
            }
        }
        terms.rank = total;
        terms.total += weights.rank * total;
        seeds.push((r, g));
    }

    let grads = tape.backward(&seeds).to_record(&bound, params);
    Ok((terms, grads))
}

/// Loss value alone, for finite-difference checks.
pub fn loss_value(model: &Model, params: &ParamSet, batch: &Batch, frozen: &Frozen, weights: &LossWeights) -> Result<f64> {
    Ok(compute_losses(model, params, batch, frozen, weights)?.0.total)
}

/// Per-scene RNG used at inference: independent of batching and thread count.
pub fn scene_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

/// Candidate trajectories of one scene before selection.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub candidates: CandidateSet,
    pub anchors: Mat,
    pub prior: Option<PriorOutput>,
    pub context: Vec<f64>,
}

/// Predicts `K` candidates for each scene with `steps` integration steps.
///
/// Scene `i` of the slice draws its anchor noise from `scene_rng(seed, first + i)`.
#[allow(clippy::too_many_arguments)]
pub fn predict(
    model: &Model,
    params: &ParamSet,
    scenes: &[&SceneSample],
    variant: Variant,
    tau: f64,
    steps: usize,
    seed: u64,
    first: usize,
) -> Result<Vec<Prediction>> {
    let (k, t2) = (model.modes(), 2 * model.horizon());
    let c = model.encoder.encode_batch(params, scenes)?;
    let b = scenes.len();
    let mut eps = Array2::zeros((b * k, t2));
    for i in 0..b {
        let mut rng = scene_rng(seed, first + i);
        eps.slice_mut(s![i * k..(i + 1) * k, ..]).assign(&gaussian(k, t2, &mut rng));
    }
    let outs = if variant.uses_prior() {
        Some(model.prior.eval_batch(params, &c))
    } else {
        None
    };
    let mut a = eps;
    if let Some(outs) = &outs {
        for (i, o) in outs.iter().enumerate() {
            let sig = o.sigma();
            let mut blk = a.slice_mut(s![i * k..(i + 1) * k, ..]);
            blk.zip_mut_with(&sig, |e, sg| *e *= tau * sg);
            blk += &o.mu;
        }
    }
    let rows: Vec<usize> = (0..b * k).map(|r| r / k).collect();
    let c_rows = repeat_rows(&c, &rows);
    let traj = model.field.integrate(params, &a, &c_rows, steps, variant.token_mode());
    let r = model.rank.eval(params, &c_rows, &traj);
    Ok((0..b)
        .map(|i| {
            let rs = r[i * k..(i + 1) * k].to_vec();
            let prior = outs.as_ref().map(|o| o[i].clone());
            let logits: Vec<f64> = match &prior {
                Some(p) => p.pi.iter().zip(&rs).map(|(pi, rv)| pi.ln() + rv).collect(),
                None => rs.clone(),
            };
            Prediction {
                candidates: CandidateSet {
                    trajectories: traj.slice(s![i * k..(i + 1) * k, ..]).to_owned(),
                    confidence: crate::prior::softmax(&logits),
                    rank_scores: rs,
                },
                anchors: a.slice(s![i * k..(i + 1) * k, ..]).to_owned(),
                prior,
                context: c.row(i).to_vec(),
            }
        })
        .collect())
}

/// Live and EMA parameters as one checkpoint array list; EMA names get an `ema:` prefix.
pub fn checkpoint_arrays(live: &ParamSet, ema: &ParamSet) -> Vec<ParamArray> {
    live.arrays
        .iter()
        .cloned()
        .chain(ema.arrays.iter().map(|a| ParamArray {
            name: format!("ema:{}", a.name),
            ..a.clone()
        }))
        .collect()
}

/// Splits checkpoint arrays into live and EMA sets and checks both against `model`.
pub fn split_checkpoint(model: &Model, arrays: Vec<ParamArray>) -> Result<(ParamSet, ParamSet)> {
    let (ema, live): (Vec<_>, Vec<_>) = arrays.into_iter().partition(|a| a.name.starts_with("ema:"));
    let live = ParamSet { arrays: live };
    let ema = ParamSet {
        arrays: ema
            .into_iter()
            .map(|a| ParamArray {
                name: a.name["ema:".len()..].to_string(),
                ..a
            })
            .collect(),
    };
    model
        .params
        .check_layout(&live)
        .map_err(|e| FlowsError::Checkpoint(format!("live parameters: {e}")))?;
    model
        .params
        .check_layout(&ema)
        .map_err(|e| FlowsError::Checkpoint(format!("EMA parameters: {e}")))?;
    Ok((live, ema))
}
