//! History + junction features to a fixed-length context vector.
//!
//! A plain feed-forward network over the flattened history concatenated with
//! the map features. Scenes are agent-centric, so no further normalization
//! happens here.

use ndarray::Array2;
use rand::Rng;

use crate::diffcore::{Activation, Mat, Mlp, ParamSet, Tape, Var};
use crate::error::{FlowsError, Result};
use crate::scenesynth::SceneSample;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Encoder {
    pub mlp: Mlp,
}

impl Encoder {
    /// `hidden` widths between the input and the `context_dim` output.
    pub fn register<R: Rng>(
        params: &mut ParamSet,
        input_len: usize,
        hidden: &[usize],
        context_dim: usize,
        rng: &mut R,
    ) -> Encoder {
        let mut widths = vec![input_len];
        widths.extend_from_slice(hidden);
        widths.push(context_dim);
        Encoder {
            mlp: Mlp::register(params, "encoder", &widths, Activation::Silu, 1.0, rng),
        }
    }

    pub fn input_len(&self) -> usize {
        self.mlp.fan_in()
    }

    pub fn context_dim(&self) -> usize {
        self.mlp.fan_out()
    }

    /// Row-batched: `x` is `B x input_len`, the result `B x context_dim`.
    pub fn forward(&self, tape: &mut Tape, bound: &[Var], x: Var) -> Var {
        self.mlp.forward(tape, bound, x)
    }

    /// Encoder inputs of several scenes stacked as rows.
    pub fn input_matrix(&self, scenes: &[&SceneSample]) -> Result<Mat> {
        let n = self.input_len();
        let mut m = Array2::zeros((scenes.len(), n));
        for (mut row, s) in m.rows_mut().into_iter().zip(scenes) {
            let x = s.encoder_input();
            if x.len() != n {
                return Err(FlowsError::Shape(format!(
                    "scene `{}` gives {} encoder inputs, expected {n}",
                    s.scene_id,
                    x.len()
                )));
            }
            row.assign(&ndarray::ArrayView1::from(&x));
        }
        Ok(m)
    }

    pub fn encode_batch(&self, params: &ParamSet, scenes: &[&SceneSample]) -> Result<Mat> {
        let x = self.input_matrix(scenes)?;
        let mut tape = Tape::new();
        let bound = tape.bind(params, false);
        let xi = tape.input(x);
        let c = self.forward(&mut tape, &bound, xi);
        Ok(tape.value(c).clone())
    }
}

/// Context vector of one scene.
pub fn encode(scene: &SceneSample, encoder: &Encoder, params: &ParamSet) -> Result<Vec<f64>> {
    Ok(encoder.encode_batch(params, &[scene])?.into_iter().collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenesynth::{generate_scene, normalize, to_world, ScenarioConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy_scene() -> SceneSample {
        let cfg = ScenarioConfig {
            history_len: 2,
            ..ScenarioConfig::default()
        };
        generate_scene(&cfg, &mut ChaCha8Rng::seed_from_u64(3))
    }

    #[test]
    fn zero_weights_output_the_last_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut params = ParamSet::new();
        let enc = Encoder::register(&mut params, 12, &[4], 3, &mut rng);
        for a in &mut params.arrays {
            a.values.iter_mut().for_each(|v| *v = 0.0);
        }
        let last = enc.mlp.layers.last().unwrap().bias.unwrap();
        params.get_mut(last).values = vec![0.25, -1.0, 2.0];
        let c = encode(&toy_scene(), &enc, &params).unwrap();
        assert_eq!(c, vec![0.25, -1.0, 2.0]);
    }

    #[test]
    fn raw_frame_pose_does_not_change_context() {
        let cfg = ScenarioConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let scene = generate_scene(&cfg, &mut rng);
        let mut params = ParamSet::new();
        let enc = Encoder::register(&mut params, cfg.encoder_input_len(), &[64, 64], 32, &mut rng);
        let a = normalize(&to_world(&scene, [3.0, -7.0], 0.4));
        let b = normalize(&to_world(&scene, [-1.5, 2.0], -2.2));
        let ca = encode(&a, &enc, &params).unwrap();
        let cb = encode(&b, &enc, &params).unwrap();
        for (x, y) in ca.iter().zip(&cb) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn two_layer_toy_matches_scalar_evaluation() {
        let scene = toy_scene();
        let x = scene.encoder_input();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut params = ParamSet::new();
        let enc = Encoder::register(&mut params, 12, &[2], 1, &mut rng);
        // Hand weights: w1[i][j] = (i + 1) * (j == 0 ? 0.1 : -0.05), b1 = (0.2, -0.3),
        // w2 = (1.5, -0.5), b2 = 0.1.
        let l = &enc.mlp.layers;
        params.get_mut(l[0].weight).values = (0..12)
            .flat_map(|i| [(i + 1) as f64 * 0.1, (i + 1) as f64 * -0.05])
            .collect();
        params.get_mut(l[0].bias.unwrap()).values = vec![0.2, -0.3];
        params.get_mut(l[1].weight).values = vec![1.5, -0.5];
        params.get_mut(l[1].bias.unwrap()).values = vec![0.1];
        let silu = |v: f64| v / (1.0 + (-v).exp());
        let z0: f64 = 0.2 + x.iter().enumerate().map(|(i, v)| (i + 1) as f64 * 0.1 * v).sum::<f64>();
        let z1: f64 = -0.3 + x.iter().enumerate().map(|(i, v)| (i + 1) as f64 * -0.05 * v).sum::<f64>();
        let expected = 1.5 * silu(z0) - 0.5 * silu(z1) + 0.1;
        let c = encode(&scene, &enc, &params).unwrap();
        assert!((c[0] - expected).abs() < 1e-12, "{} vs {expected}", c[0]);
    }

    #[test]
    fn wrong_history_length_is_a_shape_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut params = ParamSet::new();
        let enc = Encoder::register(&mut params, 18, &[4], 3, &mut rng);
        assert!(matches!(encode(&toy_scene(), &enc, &params), Err(FlowsError::Shape(_))));
    }
}
