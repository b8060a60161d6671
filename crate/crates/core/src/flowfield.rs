//! Step-conditioned displacement field and its integrators.
//!
//! One network `s(X, t, d, c)` serves both as the flow velocity (token `d = 0`)
//! and as the finite-step displacement (`d > 0`): `X_{t+d} = X_t + d s(X_t, t, d, c)`.

use ndarray::{Array2, Zip};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Activation, Mat, Mlp, ParamSet, Tape, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct FieldSpec {
    pub horizon: usize,
    pub context_dim: usize,
    pub hidden: Vec<usize>,
    /// Frequencies per scalar embedding (each gives a sine and a cosine).
    pub freqs: usize,
    /// Inputs are divided and outputs multiplied by this trajectory scale.
    pub output_scale: f64,
    pub out_gain: f64,
    /// The network predicts the endpoint `D` and `s = (D - X) / (1 - t)`,
    /// with `1 - t` floored at [`ENDPOINT_FLOOR`].
    pub endpoint: bool,
}

pub const ENDPOINT_FLOOR: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    pub spec: FieldSpec,
    pub mlp: Mlp,
}

/// Geometrically spaced frequencies from 1 to 64.
pub fn embedding_frequencies(freqs: usize) -> Vec<f64> {
    if freqs == 1 {
        return vec![1.0];
    }
    (0..freqs).map(|i| 64f64.powf(i as f64 / (freqs - 1) as f64)).collect()
}

/// `[sin(w_0 v), cos(w_0 v), sin(w_1 v), ..]`.
pub fn sinusoidal_embedding(v: f64, freqs: &[f64]) -> Vec<f64> {
    freqs.iter().flat_map(|w| [(w * v).sin(), (w * v).cos()]).collect()
}

/// How the step token is chosen when integrating with `n` steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenMode {
    /// `d = 1/n`: consistency-trained displacement.
    Step,
    /// `d = 0`: plain velocity Euler steps.
    Velocity,
}

impl TokenMode {
    pub fn token(self, steps: usize) -> f64 {
        match self {
            TokenMode::Step => 1.0 / steps as f64,
            TokenMode::Velocity => 0.0,
        }
    }
}

impl Field {
    pub fn register<R: Rng>(params: &mut ParamSet, spec: FieldSpec, rng: &mut R) -> Field {
        let t2 = 2 * spec.horizon;
        let mut widths = vec![t2 + 4 * spec.freqs + spec.context_dim];
        widths.extend_from_slice(&spec.hidden);
        widths.push(t2);
        let mlp = Mlp::register(params, "field", &widths, Activation::Silu, spec.out_gain, rng);
        Field { spec, mlp }
    }

    fn embeddings(&self, t: &[f64], d: &[f64]) -> Mat {
        let f = embedding_frequencies(self.spec.freqs);
        let w = 4 * self.spec.freqs;
        let mut m = Array2::zeros((t.len(), w));
        for (r, (tv, dv)) in t.iter().zip(d).enumerate() {
            let row: Vec<f64> = sinusoidal_embedding(*tv, &f)
                .into_iter()
                .chain(sinusoidal_embedding(*dv, &f))
                .collect();
            m.row_mut(r).assign(&ndarray::ArrayView1::from(&row));
        }
        m
    }

    /// Row-batched field: `x` is `R x 2T`, `c_rows` is `R x D`, one `(t, d)` per row.
    pub fn forward(&self, tape: &mut Tape, bound: &[Var], x: Var, t: &[f64], d: &[f64], c_rows: Var) -> Var {
        assert_eq!(t.len(), tape.value(x).nrows(), "one flow time per row");
        assert_eq!(d.len(), t.len(), "one step token per row");
        let xs = tape.scale(x, 1.0 / self.spec.output_scale);
        let emb = tape.input(self.embeddings(t, d));
        let inp = tape.concat(&[xs, emb, c_rows]);
        let out = self.mlp.forward(tape, bound, inp);
        let out = tape.scale(out, self.spec.output_scale);
        if !self.spec.endpoint {
            return out;
        }
        let cols = tape.value(x).ncols();
        let w = Array2::from_shape_fn((t.len(), cols), |(r, _)| 1.0 / (1.0 - t[r]).max(ENDPOINT_FLOOR));
        let neg_x = tape.scale(x, -1.0);
        let diff = tape.add(out, neg_x);
        let w = tape.input(w);
        tape.mul(diff, w)
    }

    /// Gradient-free evaluation.
    pub fn eval(&self, params: &ParamSet, x: &Mat, t: &[f64], d: &[f64], c_rows: &Mat) -> Mat {
        let mut tape = Tape::new();
        let bound = tape.bind(params, false);
        let xi = tape.input(x.clone());
        let ci = tape.input(c_rows.clone());
        let out = self.forward(&mut tape, &bound, xi, t, d, ci);
        tape.value(out).clone()
    }

    /// `A + s(A, 0, 1, c)` for every row.
    pub fn one_step_predict(&self, params: &ParamSet, a: &Mat, c_rows: &Mat) -> Mat {
        self.integrate(params, a, c_rows, 1, TokenMode::Step)
    }

    pub fn integrate(&self, params: &ParamSet, a: &Mat, c_rows: &Mat, steps: usize, mode: TokenMode) -> Mat {
        euler_integrate_with(|x, t, d| self.eval(params, x, t, d, c_rows), a, steps, mode)
    }

    /// Standard-normal starting points (`count x 2T`) pushed through the field.
    pub fn gaussian_baseline_predict<R: Rng>(
        &self,
        params: &ParamSet,
        c: &[f64],
        rng: &mut R,
        count: usize,
        steps: usize,
        mode: TokenMode,
    ) -> Mat {
        let z = Array2::from_shape_simple_fn((count, 2 * self.spec.horizon), || rng.sample(StandardNormal));
        let c_rows = Array2::from_shape_fn((count, c.len()), |(_, j)| c[j]);
        self.integrate(params, &z, &c_rows, steps, mode)
    }
}

/// `X_t = (1 - t) A + t Y`.
pub fn ot_interpolate(a: &[f64], y: &[f64], t: f64) -> Vec<f64> {
    a.iter().zip(y).map(|(av, yv)| (1.0 - t) * av + t * yv).collect()
}

/// `Y - A`, the same at every point of the straight path.
pub fn velocity_target(a: &[f64], y: &[f64]) -> Vec<f64> {
    a.iter().zip(y).map(|(av, yv)| yv - av).collect()
}

/// `n` Euler steps of size `1/n`, starting at `t = 0`.
///
/// `s(x, t, d)` evaluates the field for every row with per-row `t` and token `d`.
pub fn euler_integrate_with<S>(mut s: S, a: &Mat, steps: usize, mode: TokenMode) -> Mat
where
    S: FnMut(&Mat, &[f64], &[f64]) -> Mat,
{
    assert!(steps >= 1, "at least one integration step");
    let h = 1.0 / steps as f64;
    let tok = vec![mode.token(steps); a.nrows()];
    let mut x = a.clone();
    for i in 0..steps {
        let t = vec![i as f64 * h; a.nrows()];
        let v = s(&x, &t, &tok);
        x.scaled_add(h, &v);
    }
    x
}

/// Two teacher steps of size `d` averaged into one displacement:
/// `(s(X, t, k) + s(X + d s(X, t, k), t + d, k)) / 2` with token `k` per row.
pub fn consistency_target_with<S>(mut s: S, x: &Mat, t: &[f64], d: &[f64], token: &[f64]) -> Mat
where
    S: FnMut(&Mat, &[f64], &[f64]) -> Mat,
{
    let s1 = s(x, t, token);
    let mut x2 = x.clone();
    Zip::from(x2.rows_mut()).and(s1.rows()).and(d).for_each(|mut xr, sr, dv| {
        xr.scaled_add(*dv, &sr);
    });
    let t2: Vec<f64> = t.iter().zip(d).map(|(a, b)| a + b).collect();
    let s2 = s(&x2, &t2, token);
    (s1 + s2) * 0.5
}

/// Mean squared error over all entries, and its gradient with respect to `pred`.
pub fn mse(pred: &Mat, target: &Mat) -> (f64, Mat) {
    let n = pred.len() as f64;
    let diff = pred - target;
    let value = diff.iter().map(|v| v * v).sum::<f64>() / n;
    (value, diff * (2.0 / n))
}

/// Relative semigroup residual: mean `|s(X, t, 2d) - composed|` over mean `|Y - A|`.
pub fn semigroup_residual(direct: &Mat, composed: &Mat, target: &Mat) -> f64 {
    let num: f64 = (direct - composed).rows().into_iter().map(|r| r.dot(&r).sqrt()).sum();
    let den: f64 = target.rows().into_iter().map(|r| r.dot(&r).sqrt()).sum();
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}
