//! Scene-conditioned mixture prior over trajectories.
//!
//! A shared trunk maps the context to `h`; every mode modulates it with its own
//! FiLM pair, `z_k = gamma_k * h + beta_k`, and appends a learned query `q_k`.
//! Shared heads then emit the mode mean (a coarse linear read-out followed by a
//! width-3 temporal refiner over waypoints), per-coordinate log-scales and a
//! mixture logit.

use ndarray::{Array2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::diffcore::{Activation, Linear, Mat, ParamArray, ParamId, ParamSet, Tape, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct PriorSpec {
    pub modes: usize,
    pub horizon: usize,
    pub context_dim: usize,
    pub width: usize,
    pub query_dim: usize,
    pub log_sigma_min: f64,
    /// Upper clamp; keeps modes that never win from growing without bound
    /// under the entropy term.
    pub log_sigma_max: f64,
    /// Multiplies the mean read-out, so that unit-scale activations cover
    /// trajectories several lanes long.
    pub output_scale: f64,
    /// Identical queries and FiLM pairs for every mode.
    pub symmetric_init: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prior {
    pub spec: PriorSpec,
    trunk1: Linear,
    trunk2: Linear,
    query: ParamId,
    gamma: ParamId,
    beta: ParamId,
    head: Linear,
    mean: Linear,
    refine_kernel: ParamId,
    refine_bias: ParamId,
    log_scale: Linear,
    logit: Linear,
}

/// Tape handles of a batched prior evaluation; rows are ordered `(scene, mode)`.
#[derive(Debug, Clone, Copy)]
pub struct PriorVars {
    /// `B*K x 2T`.
    pub mu: Var,
    /// `B*K x 2T`, already clamped.
    pub log_sigma: Var,
    /// `B*K x 1`.
    pub logits: Var,
}

/// Mixture parameters of one scene.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorOutput {
    /// `K x 2T`, waypoints flattened as `[x0, y0, x1, ..]`.
    pub mu: Mat,
    pub log_sigma: Mat,
    pub pi: Vec<f64>,
}

impl PriorOutput {
    pub fn modes(&self) -> usize {
        self.mu.nrows()
    }

    pub fn sigma(&self) -> Mat {
        self.log_sigma.mapv(f64::exp)
    }
}

/// Initial log-scale of waypoint `n` (0-based): rises linearly from -0.5 to 0.
pub fn initial_log_sigma(n: usize, horizon: usize) -> f64 {
    -0.5 + 0.5 * n as f64 / (horizon - 1) as f64
}

impl Prior {
    pub fn register<R: Rng>(params: &mut ParamSet, spec: PriorSpec, rng: &mut R) -> Prior {
        let (k, w, q, t2) = (spec.modes, spec.width, spec.query_dim, 2 * spec.horizon);
        let trunk1 = Linear::register(params, "prior.trunk1", spec.context_dim, w, Activation::Silu, 1.0, rng);
        let trunk2 = Linear::register(params, "prior.trunk2", w, w, Activation::Silu, 1.0, rng);
        let first: Vec<f64> = (0..q).map(|_| rng.sample(StandardNormal)).collect();
        let queries: Vec<f64> = if spec.symmetric_init {
            (0..k).flat_map(|_| first.iter().copied()).collect()
        } else {
            first.iter().copied().chain((q..k * q).map(|_| rng.sample(StandardNormal))).collect()
        };
        let query = params.push(ParamArray {
            name: "prior.query".into(),
            shape: vec![k, q],
            values: queries,
        });
        let gamma = params.push(ParamArray {
            name: "prior.film_gamma".into(),
            shape: vec![k, w],
            values: vec![1.0; k * w],
        });
        let beta = params.push(ParamArray::zeros("prior.film_beta", vec![k, w]));
        let head = Linear::register(params, "prior.head", w + q, w, Activation::Silu, 1.0, rng);
        let mean = Linear::register(params, "prior.mean", w, t2, Activation::Identity, 1.0, rng);
        let refine_kernel = params.push(ParamArray {
            name: "prior.refine.w".into(),
            shape: vec![2, 6],
            values: (0..12).map(|_| 0.1 * rng.sample::<f64, _>(StandardNormal)).collect(),
        });
        let refine_bias = params.push(ParamArray::zeros("prior.refine.b", vec![2]));
        let log_scale = Linear::register(params, "prior.log_scale", w, t2, Activation::Identity, 0.0, rng);
        let ramp: Vec<f64> = (0..t2).map(|i| initial_log_sigma(i / 2, spec.horizon)).collect();
        params.get_mut(log_scale.bias.unwrap()).values = ramp;
        // softmax over modes ignores a shared offset, so the logit has no bias
        let logit = Linear::register_unbiased(params, "prior.logit", w, 1, Activation::Identity, 0.0, rng);
        Prior {
            spec,
            trunk1,
            trunk2,
            query,
            gamma,
            beta,
            head,
            mean,
            refine_kernel,
            refine_bias,
            log_scale,
            logit,
        }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &[Var], c: Var) -> PriorVars {
        let b = tape.value(c).nrows();
        let k = self.spec.modes;
        let h1 = self.trunk1.forward(tape, bound, c);
        let h2 = self.trunk2.forward(tape, bound, h1);
        let h = tape.add(h1, h2);
        let scene_rows: Vec<usize> = (0..b * k).map(|r| r / k).collect();
        let mode_rows: Vec<usize> = (0..b * k).map(|r| r % k).collect();
        let hr = tape.gather(h, scene_rows);
        let g = tape.gather(bound[self.gamma.0], mode_rows.clone());
        let be = tape.gather(bound[self.beta.0], mode_rows.clone());
        let z = tape.mul(hr, g);
        let z = tape.add(z, be);
        let q = tape.gather(bound[self.query.0], mode_rows);
        let zq = tape.concat(&[z, q]);
        let u = self.head.forward(tape, bound, zq);
        let coarse = self.mean.forward(tape, bound, u);
        let coarse = tape.scale(coarse, self.spec.output_scale);
        let refined = tape.conv1d(coarse, bound[self.refine_kernel.0], bound[self.refine_bias.0], 2);
        let mu = tape.add(coarse, refined);
        let raw = self.log_scale.forward(tape, bound, u);
        let neg = tape.scale(raw, -1.0);
        let capped = tape.clamp_min(neg, -self.spec.log_sigma_max);
        let capped = tape.scale(capped, -1.0);
        let log_sigma = tape.clamp_min(capped, self.spec.log_sigma_min);
        let logits = self.logit.forward(tape, bound, u);
        PriorVars { mu, log_sigma, logits }
    }

    /// Mixture parameters for each row of `c`.
    pub fn eval_batch(&self, params: &ParamSet, c: &Mat) -> Vec<PriorOutput> {
        let mut tape = Tape::new();
        let bound = tape.bind(params, false);
        let ci = tape.input(c.clone());
        let v = self.forward(&mut tape, &bound, ci);
        split_outputs(tape.value(v.mu), tape.value(v.log_sigma), tape.value(v.logits), self.spec.modes)
    }
}

/// Regroups `(scene, mode)` rows into per-scene outputs.
pub fn split_outputs(mu: &Mat, log_sigma: &Mat, logits: &Mat, k: usize) -> Vec<PriorOutput> {
    let b = mu.nrows() / k;
    (0..b)
        .map(|i| {
            let rows = i * k..(i + 1) * k;
            let l: Vec<f64> = logits.slice(ndarray::s![rows.clone(), 0]).to_vec();
            PriorOutput {
                mu: mu.slice(ndarray::s![rows.clone(), ..]).to_owned(),
                log_sigma: log_sigma.slice(ndarray::s![rows, ..]).to_owned(),
                pi: softmax(&l),
            }
        })
        .collect()
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Anchors drawn by reparameterization, with the noise kept for replay.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorSet {
    /// `K x 2T`.
    pub anchors: Mat,
    pub eps: Mat,
    pub tau: f64,
}

/// `A_k = mu_k + tau * sigma_k * eps_k` for given noise.
pub fn anchors_from_noise(out: &PriorOutput, eps: &Mat, tau: f64) -> Mat {
    &out.mu + &(out.sigma() * eps * tau)
}

pub fn sample_anchors<R: Rng>(out: &PriorOutput, tau: f64, rng: &mut R) -> AnchorSet {
    assert!(tau > 0.0, "anchor temperature must be positive");
    let eps = Array2::from_shape_simple_fn(out.mu.dim(), || rng.sample(StandardNormal));
    AnchorSet {
        anchors: anchors_from_noise(out, &eps, tau),
        eps,
        tau,
    }
}

/// `NLL_k = 1/2 |(Y - mu_k) / sigma_k|^2 + sum log sigma_k`, one value per mode.
fn mode_nll(mu: ndarray::ArrayView1<f64>, log_sigma: ndarray::ArrayView1<f64>, y: &[f64]) -> f64 {
    mu.iter()
        .zip(log_sigma)
        .zip(y)
        .map(|((m, ls), yv)| 0.5 * ((yv - m) * (-ls).exp()).powi(2) + ls)
        .sum()
}

/// Per-mode NLL and the best mode (smallest index on ties).
pub fn prior_nll(out: &PriorOutput, y: &[f64]) -> (Vec<f64>, usize) {
    let nll: Vec<f64> = out
        .mu
        .rows()
        .into_iter()
        .zip(out.log_sigma.rows())
        .map(|(m, ls)| mode_nll(m, ls, y))
        .collect();
    let best = argmin(&nll);
    (nll, best)
}

pub fn argmin(x: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in x.iter().enumerate() {
        if *v < x[best] {
            best = i;
        }
    }
    best
}

/// `softmax(-NLL / tau_mix)`.
pub fn soft_targets(nll: &[f64], tau_mix: f64) -> Vec<f64> {
    let z: Vec<f64> = nll.iter().map(|v| -v / tau_mix).collect();
    softmax(&z)
}

/// `KL(p || q)` with `0 log 0 = 0`.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(pv, _)| **pv > 0.0)
        .map(|(pv, qv)| pv * (pv / qv).ln())
        .sum()
}

/// `KL(pi_hat || pi)` with `pi_hat = softmax(-NLL / tau_mix)`.
pub fn mixture_calibration_loss(pi: &[f64], nll: &[f64], tau_mix: f64) -> f64 {
    kl_divergence(&soft_targets(nll, tau_mix), pi)
}

/// Negative mean log-scale.
pub fn entropy_penalty(out: &PriorOutput) -> f64 {
    -out.log_sigma.mean().unwrap_or(0.0)
}

/// Mean per-waypoint distance between two flattened trajectories.
pub fn mean_waypoint_distance(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() / 2;
    a.chunks_exact(2)
        .zip(b.chunks_exact(2))
        .map(|(p, q)| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt())
        .sum::<f64>()
        / n as f64
}

/// Mean over unordered mode pairs of `max(0, margin - d(mu_i, mu_j))`.
pub fn diversity_hinge(out: &PriorOutput, margin: f64) -> f64 {
    let k = out.modes();
    let rows: Vec<Vec<f64>> = out.mu.rows().into_iter().map(|r| r.to_vec()).collect();
    let mut total = 0.0;
    let mut pairs = 0;
    for i in 0..k {
        for j in i + 1..k {
            total += (margin - mean_waypoint_distance(&rows[i], &rows[j])).max(0.0);
            pairs += 1;
        }
    }
    if pairs == 0 {
        0.0
    } else {
        total / pairs as f64
    }
}

/// Weights of the four prior terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PriorWeights {
    pub nll: f64,
    pub mix: f64,
    pub ent: f64,
    pub div: f64,
}

/// Prior objective of one scene, term by term.
pub fn prior_total_loss(out: &PriorOutput, y: &[f64], w: &PriorWeights, tau_mix: f64, margin: f64) -> f64 {
    let (nll, best) = prior_nll(out, y);
    let mut total = 0.0;
    if w.nll != 0.0 {
        total += w.nll * nll[best];
    }
    if w.mix != 0.0 {
        total += w.mix * mixture_calibration_loss(&out.pi, &nll, tau_mix);
    }
    if w.ent != 0.0 {
        total += w.ent * entropy_penalty(out);
    }
    if w.div != 0.0 {
        total += w.div * diversity_hinge(out, margin);
    }
    total
}

/// Per-mode NLL for row-batched prior values: `B x K`.
pub fn batch_nll(mu: &Mat, log_sigma: &Mat, y: &Mat, k: usize) -> Mat {
    let b = y.nrows();
    Array2::from_shape_fn((b, k), |(i, m)| {
        let r = i * k + m;
        mode_nll(mu.row(r), log_sigma.row(r), y.row(i).as_slice().expect("contiguous"))
    })
}

/// Winner-take-all weights: 1 on the best mode, or an even split over exact ties.
pub fn wta_weights(nll: &Mat) -> Mat {
    let mut w = Array2::zeros(nll.dim());
    for (row, mut out) in nll.rows().into_iter().zip(w.rows_mut()) {
        let best = row.iter().copied().fold(f64::INFINITY, f64::min);
        let ties = row.iter().filter(|v| **v == best).count() as f64;
        for (o, v) in out.iter_mut().zip(row) {
            if *v == best {
                *o = 1.0 / ties;
            }
        }
    }
    w
}

/// [`wta_weights`] with a share `relax` of each row's mass spread evenly over
/// the losing modes, so that modes which never win still receive gradient.
pub fn relaxed_wta_weights(nll: &Mat, relax: f64) -> Mat {
    let hard = wta_weights(nll);
    let k = nll.ncols();
    if relax == 0.0 || k < 2 {
        return hard;
    }
    let mut w = hard.clone();
    for (mut row, h) in w.rows_mut().into_iter().zip(hard.rows()) {
        let losers = h.iter().filter(|v| **v == 0.0).count() as f64;
        for (o, hv) in row.iter_mut().zip(h) {
            *o = if *hv == 0.0 { relax / losers } else { (1.0 - relax) * hv };
        }
    }
    w
}

/// Row-wise [`soft_targets`] of a `B x K` NLL matrix.
pub fn batch_soft_targets(nll: &Mat, tau_mix: f64) -> Mat {
    let mut out = Array2::zeros(nll.dim());
    for (row, mut o) in nll.rows().into_iter().zip(out.rows_mut()) {
        let p = soft_targets(row.as_slice().expect("contiguous"), tau_mix);
        o.assign(&ndarray::ArrayView1::from(&p));
    }
    out
}

/// Values of the prior terms on a batch, and the weighted adjoints of their sum.
#[derive(Debug, Clone)]
pub struct PriorLossEval {
    pub nll: f64,
    pub mix: f64,
    pub ent: f64,
    pub div: f64,
    pub d_mu: Mat,
    pub d_log_sigma: Mat,
    pub d_logits: Mat,
}

/// Batched prior objective with frozen winner weights and soft targets.
///
/// `mu`, `log_sigma` are `B*K x 2T`, `logits` is `B*K x 1`, `y` is `B x 2T`;
/// `wta` and `pi_hat` are `B x K`. Every term is a mean over scenes.
#[allow(clippy::too_many_arguments)]
pub fn prior_loss_eval(
    mu: &Mat,
    log_sigma: &Mat,
    logits: &Mat,
    y: &Mat,
    wta: &Mat,
    pi_hat: &Mat,
    w: &PriorWeights,
    margin: f64,
) -> PriorLossEval {
    let (b, k) = wta.dim();
    let cols = mu.ncols();
    let bf = b as f64;
    let mut d_mu = Array2::zeros(mu.dim());
    let mut d_ls = Array2::zeros(mu.dim());
    let mut d_logits = Array2::zeros((b * k, 1));
    let (mut nll, mut mix, mut div) = (0.0, 0.0, 0.0);

    for i in 0..b {
        let yr = y.row(i);
        for m in 0..k {
            let r = i * k + m;
            let wt = wta[[i, m]];
            if wt == 0.0 {
                continue;
            }
            for j in 0..cols {
                let inv = (-log_sigma[[r, j]]).exp();
                let z = (yr[j] - mu[[r, j]]) * inv;
                nll += wt * (0.5 * z * z + log_sigma[[r, j]]) / bf;
                d_mu[[r, j]] += w.nll * wt * (-z * inv) / bf;
                d_ls[[r, j]] += w.nll * wt * (1.0 - z * z) / bf;
            }
        }

        let l: Vec<f64> = (0..k).map(|m| logits[[i * k + m, 0]]).collect();
        let pi = softmax(&l);
        let target: Vec<f64> = pi_hat.row(i).to_vec();
        mix += kl_divergence(&target, &pi) / bf;
        for m in 0..k {
            d_logits[[i * k + m, 0]] = w.mix * (pi[m] - target[m]) / bf;
        }

        let pairs = (k * (k - 1) / 2) as f64;
        let n_pts = (cols / 2) as f64;
        for p in 0..k {
            for q in p + 1..k {
                let (rp, rq) = (i * k + p, i * k + q);
                let mut dist = 0.0;
                let mut units = Vec::with_capacity(cols / 2);
                for n in 0..cols / 2 {
                    let dx = mu[[rp, 2 * n]] - mu[[rq, 2 * n]];
                    let dy = mu[[rp, 2 * n + 1]] - mu[[rq, 2 * n + 1]];
                    let len = (dx * dx + dy * dy).sqrt();
                    dist += len / n_pts;
                    units.push(if len > 0.0 { [dx / len, dy / len] } else { [0.0, 0.0] });
                }
                if dist < margin {
                    div += (margin - dist) / (pairs * bf);
                    let scale = w.div / (n_pts * pairs * bf);
                    for (n, u) in units.iter().enumerate() {
                        for c in 0..2 {
                            d_mu[[rp, 2 * n + c]] -= scale * u[c];
                            d_mu[[rq, 2 * n + c]] += scale * u[c];
                        }
                    }
                }
            }
        }
    }

    let ent = -log_sigma.mean().unwrap_or(0.0);
    if w.ent != 0.0 {
        d_ls -= w.ent / log_sigma.len() as f64;
    }
    PriorLossEval {
        nll,
        mix,
        ent,
        div,
        d_mu,
        d_log_sigma: d_ls,
        d_logits,
    }
}

impl PriorLossEval {
    pub fn weighted(&self, w: &PriorWeights) -> f64 {
        w.nll * self.nll + w.mix * self.mix + w.ent * self.ent + w.div * self.div
    }
}

/// Stacks per-scene outputs back into row-batched matrices.
pub fn stack_outputs(outs: &[PriorOutput]) -> (Mat, Mat, Mat) {
    let mus: Vec<_> = outs.iter().map(|o| o.mu.view()).collect();
    let lss: Vec<_> = outs.iter().map(|o| o.log_sigma.view()).collect();
    let logits: Vec<f64> = outs.iter().flat_map(|o| o.pi.iter().map(|p| p.ln())).collect();
    let n = logits.len();
    (
        ndarray::concatenate(Axis(0), &mus).expect("rows"),
        ndarray::concatenate(Axis(0), &lss).expect("rows"),
        Array2::from_shape_vec((n, 1), logits).expect("column"),
    )
}
