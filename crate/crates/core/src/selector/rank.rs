use rand::Rng;

use crate::diffcore::{Activation, Mat, Mlp, ParamSet, Tape, Var};

/// Listwise Plackett-Luce negative log-likelihood of `order` (best first)
/// under `scores`.
pub fn pl_rank_loss(scores: &[f64], order: &[usize]) -> f64 {
    pl_rank_loss_grad(scores, order).0
}

/// Loss and gradient with respect to `scores`.
pub fn pl_rank_loss_grad(scores: &[f64], order: &[usize]) -> (f64, Vec<f64>) {
    assert_eq!(scores.len(), order.len(), "order must rank every candidate");
    let mut grad = vec![0.0; scores.len()];
    let mut loss = 0.0;
    for i in 0..order.len() {
        let tail = &order[i..];
        let m = tail.iter().map(|&j| scores[j]).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = tail.iter().map(|&j| (scores[j] - m).exp()).sum();
        loss += m + z.ln() - scores[order[i]];
        grad[order[i]] -= 1.0;
        for &j in tail {
            grad[j] += (scores[j] - m).exp() / z;
        }
    }
    (loss, grad)
}

/// Indices by ascending final-displacement error.
pub fn quality_order(fde: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..fde.len()).collect();
    idx.sort_by(|&a, &b| fde[a].total_cmp(&fde[b]).then(a.cmp(&b)));
    idx
}

/// Scores each candidate from the scene context and the candidate itself.
#[derive(Debug, Clone, PartialEq)]
pub struct RankHead {
    pub mlp: Mlp,
    pub traj_scale: f64,
}

impl RankHead {
    pub fn register<R: Rng>(
        params: &mut ParamSet,
        context_dim: usize,
        traj_len: usize,
        hidden: usize,
        traj_scale: f64,
        rng: &mut R,
    ) -> RankHead {
        // the listwise loss and the confidence softmax ignore a shared offset
        let mlp = Mlp::register_unbiased_output(params, "rank", &[context_dim + traj_len, hidden, 1], Activation::Silu, 1.0, rng);
        RankHead { mlp, traj_scale }
    }

    /// `c_rows` and `traj` are constants (`R x D`, `R x 2T`); returns `R x 1` scores.
    pub fn forward(&self, tape: &mut Tape, bound: &[Var], c_rows: &Mat, traj: &Mat) -> Var {
        let c = tape.input(c_rows.clone());
        let y = tape.input(traj / self.traj_scale);
        let inp = tape.concat(&[c, y]);
        self.mlp.forward(tape, bound, inp)
    }

    pub fn eval(&self, params: &ParamSet, c_rows: &Mat, traj: &Mat) -> Vec<f64> {
        let mut tape = Tape::new();
        let bound = tape.bind(params, false);
        let r = self.forward(&mut tape, &bound, c_rows, traj);
        tape.value(r).iter().copied().collect()
    }
}
