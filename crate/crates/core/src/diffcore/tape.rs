//! A recorded computation over row-batched matrices.
//!
//! Every node holds its forward value. [`Tape::backward`] walks the nodes in
//! reverse creation order, which is a valid reverse topological order because
//! an operation can only reference nodes created before it.

use ndarray::{s, Array2, Axis, Zip};

use super::nn::Activation;
use super::param::{GradientRecord, ParamSet};

pub type Mat = Array2<f64>;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Act(Var, Activation),
    ClampMin(Var, f64),
    Concat(Vec<Var>),
    Gather(Var, Vec<usize>),
    Conv1d {
        x: Var,
        kernel: Var,
        bias: Var,
        channels: usize,
    },
}

#[derive(Debug, Clone)]
struct Node {
    value: Mat,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Accumulated adjoints, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads[v.0].as_ref()
    }

    /// Collects the adjoints of `bound` (as returned by [`Tape::bind`]) into a
    /// record shaped like `params`. Unreached parameters get zeros.
    pub fn to_record(&self, bound: &[Var], params: &ParamSet) -> GradientRecord {
        let mut record = GradientRecord::zeros_like(params);
        for (slot, var) in record.grads.iter_mut().zip(bound) {
            if let Some(g) = self.get(*var) {
                slot.copy_from_slice(g.as_slice().expect("standard layout"));
            }
        }
        record
    }
}

fn accumulate(grads: &mut [Option<Mat>], v: Var, g: Mat) {
    match &mut grads[v.0] {
        Some(acc) => *acc += &g,
        slot @ None => *slot = Some(g),
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A constant input; no adjoint is propagated into it.
    pub fn input(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A differentiable leaf.
    pub fn param(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Places every array of `params` on the tape, in order.
    pub fn bind(&mut self, params: &ParamSet, differentiable: bool) -> Vec<Var> {
        params
            .arrays
            .iter()
            .map(|a| {
                if differentiable {
                    self.param(a.to_mat())
                } else {
                    self.input(a.to_mat())
                }
            })
            .collect()
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.ncols(), vb.nrows(), "matmul inner dimensions");
        let value = va.dot(vb);
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::MatMul(a, b), ng)
    }

    /// `a + bias`, with the single-row `bias` broadcast over every row of `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(bias));
        assert_eq!(vb.nrows(), 1, "bias must be a single row");
        assert_eq!(va.ncols(), vb.ncols(), "bias width");
        let value = va + vb;
        let ng = self.needs(a) || self.needs(bias);
        self.push(value, Op::AddBias(a, bias), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.dim(), vb.dim(), "add shapes");
        let value = va + vb;
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::Add(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.dim(), vb.dim(), "mul shapes");
        let value = va * vb;
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a) * factor;
        let ng = self.needs(a);
        self.push(value, Op::Scale(a, factor), ng)
    }

    pub fn act(&mut self, a: Var, activation: Activation) -> Var {
        if activation == Activation::Identity {
            return a;
        }
        let value = self.value(a).mapv(|x| activation.apply(x));
        let ng = self.needs(a);
        self.push(value, Op::Act(a, activation), ng)
    }

    /// Elementwise `max(a, lo)`; the adjoint is zero where the clamp is active.
    pub fn clamp_min(&mut self, a: Var, lo: f64) -> Var {
        let value = self.value(a).mapv(|x| x.max(lo));
        let ng = self.needs(a);
        self.push(value, Op::ClampMin(a, lo), ng)
    }

    /// Column-wise concatenation of matrices with equal row counts.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("concat row counts");
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(value, Op::Concat(parts.to_vec()), ng)
    }

    /// Row `r` of the result is row `rows[r]` of `a`.
    pub fn gather(&mut self, a: Var, rows: Vec<usize>) -> Var {
        let value = self.value(a).select(Axis(0), &rows);
        let ng = self.needs(a);
        self.push(value, Op::Gather(a, rows), ng)
    }

    /// Width-3, zero-padded 1-D convolution along the waypoint axis.
    ///
    /// Each row of `x` is a sequence laid out as `[p0c0, p0c1, .., p1c0, ..]`
    /// with `channels` values per position. `kernel` is `channels x (channels*3)`
    /// with `kernel[co, ci*3 + o]` weighting input position `n + o - 1`.
    pub fn conv1d(&mut self, x: Var, kernel: Var, bias: Var, channels: usize) -> Var {
        let vx = self.value(x);
        let vk = self.value(kernel);
        let vb = self.value(bias);
        assert_eq!(vk.dim(), (channels, channels * 3), "conv kernel shape");
        assert_eq!(vb.dim(), (1, channels), "conv bias shape");
        assert_eq!(vx.ncols() % channels, 0, "conv input width");
        let len = vx.ncols() / channels;
        let mut out = Array2::zeros(vx.dim());
        for (xr, mut orow) in vx.rows().into_iter().zip(out.rows_mut()) {
            for n in 0..len {
                for co in 0..channels {
                    let mut acc = vb[[0, co]];
                    for o in 0..3 {
                        let m = n as isize + o as isize - 1;
                        if m < 0 || m >= len as isize {
                            continue;
                        }
                        let m = m as usize;
                        for ci in 0..channels {
                            acc += vk[[co, ci * 3 + o]] * xr[m * channels + ci];
                        }
                    }
                    orow[n * channels + co] = acc;
                }
            }
        }
        let ng = self.needs(x) || self.needs(kernel) || self.needs(bias);
        self.push(
            out,
            Op::Conv1d {
                x,
                kernel,
                bias,
                channels,
            },
            ng,
        )
    }

    /// Propagates the given output adjoints back through the tape.
    pub fn backward(&self, seeds: &[(Var, Mat)]) -> Gradients {
        let mut grads: Vec<Option<Mat>> = vec![None; self.nodes.len()];
        for (v, g) in seeds {
            assert_eq!(self.value(*v).dim(), g.dim(), "seed shape");
            accumulate(&mut grads, *v, g.clone());
        }
        for i in (0..self.nodes.len()).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let g = match &grads[i] {
                Some(g) => g.clone(),
                None => continue,
            };
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, g.dot(&self.value(*b).t()));
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads, *b, self.value(*a).t().dot(&g));
                    }
                }
                Op::AddBias(a, b) => {
                    if self.needs(*b) {
                        accumulate(&mut grads, *b, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, g);
                    }
                }
                Op::Add(a, b) => {
                    if self.needs(*b) {
                        accumulate(&mut grads, *b, g.clone());
                    }
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, g);
                    }
                }
                Op::Mul(a, b) => {
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, &g * self.value(*b));
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads, *b, &g * self.value(*a));
                    }
                }
                Op::Scale(a, f) => accumulate(&mut grads, *a, g * *f),
                Op::Act(a, activation) => {
                    let mut ga = g;
                    let x = self.value(*a);
                    match activation {
                        Activation::Identity => {}
                        Activation::Silu => Zip::from(&mut ga).and(x).for_each(|g, &x| {
                            let sg = sigmoid(x);
                            *g *= sg * (1.0 + x * (1.0 - sg));
                        }),
                        Activation::Exp => Zip::from(&mut ga).and(&node.value).for_each(|g, &y| *g *= y),
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::ClampMin(a, lo) => {
                    let mut ga = g;
                    Zip::from(&mut ga).and(self.value(*a)).for_each(|g, &x| {
                        if x <= *lo {
                            *g = 0.0;
                        }
                    });
                    accumulate(&mut grads, *a, ga);
                }
                Op::Concat(parts) => {
                    let mut col = 0;
                    for p in parts {
                        let w = self.value(*p).ncols();
                        if self.needs(*p) {
                            accumulate(&mut grads, *p, g.slice(s![.., col..col + w]).to_owned());
                        }
                        col += w;
                    }
                }
                Op::Gather(a, rows) => {
                    let mut ga = Array2::zeros(self.value(*a).dim());
                    for (r, &src) in rows.iter().enumerate() {
                        let mut dst = ga.row_mut(src);
                        dst += &g.row(r);
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::Conv1d {
                    x,
                    kernel,
                    bias,
                    channels,
                } => {
                    let c = *channels;
                    let vx = self.value(*x);
                    let vk = self.value(*kernel);
                    let len = vx.ncols() / c;
                    let mut gx = Array2::zeros(vx.dim());
                    let mut gk = Array2::zeros(vk.dim());
                    let mut gb = Array2::zeros((1, c));
                    for ((grow, xr), mut gxr) in g.rows().into_iter().zip(vx.rows()).zip(gx.rows_mut()) {
                        for n in 0..len {
                            for co in 0..c {
                                let go = grow[n * c + co];
                                gb[[0, co]] += go;
                                for o in 0..3 {
                                    let m = n as isize + o as isize - 1;
                                    if m < 0 || m >= len as isize {
                                        continue;
                                    }
                                    let m = m as usize;
                                    for ci in 0..c {
                                        gk[[co, ci * 3 + o]] += go * xr[m * c + ci];
                                        gxr[m * c + ci] += go * vk[[co, ci * 3 + o]];
                                    }
                                }
                            }
                        }
                    }
                    if self.needs(*x) {
                        accumulate(&mut grads, *x, gx);
                    }
                    if self.needs(*kernel) {
                        accumulate(&mut grads, *kernel, gk);
                    }
                    if self.needs(*bias) {
                        accumulate(&mut grads, *bias, gb);
                    }
                }
            }
        }
        Gradients { grads }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    /// Central-difference adjoint of `sum(w ⊙ f(x))` with respect to `x`.
    fn numeric(f: &dyn Fn(&Mat) -> Mat, x: &Mat, w: &Mat) -> Mat {
        let h = 1e-6;
        let mut out = Array2::zeros(x.dim());
        for idx in ndarray::indices(x.dim()) {
            let mut xp = x.clone();
            xp[idx] += h;
            let mut xm = x.clone();
            xm[idx] -= h;
            out[idx] = ((&f(&xp) * w).sum() - (&f(&xm) * w).sum()) / (2.0 * h);
        }
        out
    }

    #[test]
    fn matmul_bias_silu_chain_matches_central_differences() {
        let x0 = array![[0.3, -1.2, 0.7], [1.1, 0.2, -0.4]];
        let w0 = array![[0.5, -0.3], [0.8, 0.1], [-0.6, 0.9]];
        let b0 = array![[0.05, -0.2]];
        let seed = array![[1.0, -2.0], [0.5, 0.25]];
        let forward = |x: &Mat| {
            let mut t = Tape::new();
            let xv = t.input(x.clone());
            let wv = t.input(w0.clone());
            let bv = t.input(b0.clone());
            let m = t.matmul(xv, wv);
            let a = t.add_bias(m, bv);
            let y = t.act(a, Activation::Silu);
            t.value(y).clone()
        };
        let mut t = Tape::new();
        let xv = t.param(x0.clone());
        let wv = t.param(w0.clone());
        let bv = t.param(b0.clone());
        let m = t.matmul(xv, wv);
        let a = t.add_bias(m, bv);
        let y = t.act(a, Activation::Silu);
        let grads = t.backward(&[(y, seed.clone())]);
        let num = numeric(&forward, &x0, &seed);
        for (a, n) in grads.get(xv).unwrap().iter().zip(num.iter()) {
            assert!((a - n).abs() < 1e-8, "{a} vs {n}");
        }
        assert!(grads.get(wv).is_some() && grads.get(bv).is_some());
    }

    #[test]
    fn conv_gather_concat_clamp_adjoints() {
        let x0 = array![[0.2, -0.1, 0.4, 0.3, -0.5, 0.9], [1.0, 0.0, -1.0, 0.5, 0.25, -0.75]];
        let k0 = array![[0.1, 0.2, -0.3, 0.4, 0.0, 0.5], [-0.2, 0.3, 0.1, -0.1, 0.6, 0.2]];
        let b0 = array![[0.01, -0.02]];
        let seed = Array2::from_shape_fn((3, 8), |(i, j)| ((i * 8 + j) as f64 * 0.37).sin());
        let build = |t: &mut Tape, x: Var, k: Var, b: Var| {
            let c = t.conv1d(x, k, b, 2);
            let sum = t.add(c, x);
            let clamped = t.clamp_min(sum, -0.3);
            let g = t.gather(clamped, vec![1, 0, 1]);
            let extra = t.gather(x, vec![0, 0, 1]);
            let e = t.scale(extra, 0.5);
            let e2 = t.mul(e, extra);
            let e2 = t.gather(e2, vec![0, 1, 2]);
            let cols = t.concat(&[g, e2]);
            // keep width 8 for the seed: 6 + 6 -> take the first 8 via a matmul with a selector
            let sel = Array2::from_shape_fn((12, 8), |(i, j)| if i == j { 1.0 } else { 0.0 });
            let sv = t.input(sel);
            t.matmul(cols, sv)
        };
        let forward = |x: &Mat| {
            let mut t = Tape::new();
            let xv = t.input(x.clone());
            let kv = t.input(k0.clone());
            let bv = t.input(b0.clone());
            let y = build(&mut t, xv, kv, bv);
            t.value(y).clone()
        };
        let mut t = Tape::new();
        let xv = t.param(x0.clone());
        let kv = t.param(k0.clone());
        let bv = t.param(b0.clone());
        let y = build(&mut t, xv, kv, bv);
        let grads = t.backward(&[(y, seed.clone())]);
        let num = numeric(&forward, &x0, &seed);
        for (a, n) in grads.get(xv).unwrap().iter().zip(num.iter()) {
            assert!((a - n).abs() < 1e-7, "{a} vs {n}");
        }
    }

    #[test]
    fn inputs_receive_no_adjoint() {
        let mut t = Tape::new();
        let x = t.input(array![[1.0, 2.0]]);
        let w = t.param(array![[1.0], [1.0]]);
        let y = t.matmul(x, w);
        let g = t.backward(&[(y, array![[1.0]])]);
        assert!(g.get(x).is_none());
        assert_eq!(g.get(w).unwrap(), &array![[1.0], [2.0]]);
    }
}
