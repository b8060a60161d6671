use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::param::{ParamArray, ParamId, ParamSet};
use super::tape::{Mat, Tape, Var};
use crate::error::{FlowsError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Identity,
    /// `x * sigmoid(x)`, a smooth ReLU-like unit.
    Silu,
    /// Used for strictly positive outputs such as scales.
    Exp,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Silu => x / (1.0 + (-x).exp()),
            Activation::Exp => x.exp(),
        }
    }
}

/// A dense layer `act(x W + b)` whose parameters live in a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub weight: ParamId,
    /// `None` for layers whose outputs only matter up to a shared shift.
    pub bias: Option<ParamId>,
    pub activation: Activation,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    /// Registers a layer with scaled-normal weights and zero bias.
    pub fn register<R: Rng>(
        params: &mut ParamSet,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        activation: Activation,
        weight_gain: f64,
        rng: &mut R,
    ) -> Linear {
        Self::build(params, name, fan_in, fan_out, activation, weight_gain, true, rng)
    }

    /// Like [`Linear::register`] without a bias term.
    pub fn register_unbiased<R: Rng>(
        params: &mut ParamSet,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        activation: Activation,
        weight_gain: f64,
        rng: &mut R,
    ) -> Linear {
        Self::build(params, name, fan_in, fan_out, activation, weight_gain, false, rng)
    }

    #[allow(clippy::too_many_arguments)]
    fn build<R: Rng>(
        params: &mut ParamSet,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        activation: Activation,
        weight_gain: f64,
        with_bias: bool,
        rng: &mut R,
    ) -> Linear {
        let std = weight_gain / (fan_in as f64).sqrt();
        let w: Vec<f64> = (0..fan_in * fan_out)
            .map(|_| std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let weight = params.push(ParamArray {
            name: format!("{name}.w"),
            shape: vec![fan_in, fan_out],
            values: w,
        });
        let bias = with_bias.then(|| params.push(ParamArray::zeros(format!("{name}.b"), vec![fan_out])));
        Linear {
            weight,
            bias,
            activation,
            fan_in,
            fan_out,
        }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &[Var], x: Var) -> Var {
        let h = tape.matmul(x, bound[self.weight.0]);
        let h = match self.bias {
            Some(b) => tape.add_bias(h, bound[b.0]),
            None => h,
        };
        tape.act(h, self.activation)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// Hidden layers use `hidden_act`; the last layer is linear with its
    /// weights scaled by `out_gain` (0 gives an all-zero initial output).
    pub fn register<R: Rng>(
        params: &mut ParamSet,
        name: &str,
        widths: &[usize],
        hidden_act: Activation,
        out_gain: f64,
        rng: &mut R,
    ) -> Mlp {
        Self::build(params, name, widths, hidden_act, out_gain, true, rng)
    }

    /// Like [`Mlp::register`] with no bias on the output layer.
    pub fn register_unbiased_output<R: Rng>(
        params: &mut ParamSet,
        name: &str,
        widths: &[usize],
        hidden_act: Activation,
        out_gain: f64,
        rng: &mut R,
    ) -> Mlp {
        Self::build(params, name, widths, hidden_act, out_gain, false, rng)
    }

    fn build<R: Rng>(
        params: &mut ParamSet,
        name: &str,
        widths: &[usize],
        hidden_act: Activation,
        out_gain: f64,
        out_bias: bool,
        rng: &mut R,
    ) -> Mlp {
        assert!(widths.len() >= 2, "an MLP needs input and output widths");
        let n = widths.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let last = i + 1 == n;
                Linear::build(
                    params,
                    &format!("{name}.l{i}"),
                    widths[i],
                    widths[i + 1],
                    if last { Activation::Identity } else { hidden_act },
                    if last { out_gain } else { 1.0 },
                    !last || out_bias,
                    rng,
                )
            })
            .collect();
        Mlp { layers }
    }

    pub fn fan_in(&self) -> usize {
        self.layers[0].fan_in
    }

    pub fn fan_out(&self) -> usize {
        self.layers.last().map(|l| l.fan_out).unwrap_or(0)
    }

    pub fn forward(&self, tape: &mut Tape, bound: &[Var], x: Var) -> Var {
        self.layers.iter().fold(x, |h, l| l.forward(tape, bound, h))
    }
}

/// A free-standing dense layer, for [`mlp_apply`].
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    /// `fan_in x fan_out`.
    pub weights: Mat,
    pub biases: Vec<f64>,
    pub activation: Activation,
}

/// Evaluates a stack of dense layers on one input vector.
pub fn mlp_apply(input: &[f64], layers: &[DenseLayer]) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let mut width = input.len();
    let mut h = tape.input(Array2::from_shape_vec((1, width), input.to_vec()).expect("row"));
    for (i, layer) in layers.iter().enumerate() {
        let (fan_in, fan_out) = layer.weights.dim();
        if fan_in != width {
            return Err(FlowsError::config(
                format!("layer {i}"),
                format!("expects input width {fan_in}, got {width}"),
            ));
        }
        if layer.biases.len() != fan_out {
            return Err(FlowsError::config(
                format!("layer {i}"),
                format!("has {} biases for {fan_out} outputs", layer.biases.len()),
            ));
        }
        let w = tape.input(layer.weights.clone());
        let b = tape.input(Array2::from_shape_vec((1, fan_out), layer.biases.clone()).expect("row"));
        let z = tape.matmul(h, w);
        let z = tape.add_bias(z, b);
        h = tape.act(z, layer.activation);
        width = fan_out;
    }
    Ok(tape.value(h).iter().copied().collect())
}
