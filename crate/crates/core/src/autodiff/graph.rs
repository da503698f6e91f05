//! Recorded forward computations and their reverse sweep.
//!
//! Nodes are appended in evaluation order, so the node list is already a
//! topological order and the backward pass is a single reverse scan.

use rand::Rng;

use super::kernels::{self, Conv2dDims};
use super::param::{ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    Abs,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Affine { x: Var, w: Var, b: Var },
    Conv1d { x: Var, w: Var, b: Var, k: usize },
    Conv2d { x: Var, w: Var, b: Var, dims: Conv2dDims },
    LayerNorm { x: Var, gain: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Act { x: Var, kind: Activation },
    SoftmaxRows { x: Var },
    Dropout { x: Var, mask: Vec<f64> },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Reshape(Var),
    TemporalDifference { next: Var, cur: Var },
    MeanRows(Var),
    MeanAll(Var),
    SumAll(Var),
    WeightedNll { p: Var, class: usize, weight: f64 },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Floor applied to probabilities before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let mut value = store.value(id).clone();
        value.requires_grad = true;
        self.push(value, Op::Param(id))
    }

    /// `out[t] = weight · x[t] + bias` for `x: T × d_in`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(Error::dim("affine", xs, ws));
        }
        if bs != [ws[0]] {
            return Err(Error::dim("affine bias", ws, bs));
        }
        let (rows, d_in, d_out) = (xs[0], xs[1], ws[0]);
        let y = kernels::affine(self.data(x), rows, d_in, self.data(w), self.data(b));
        Ok(self.push(Tensor::new(&[rows, d_out], y)?, Op::Affine { x, w, b }))
    }

    /// Same-padded temporal convolution of `x: T × c_in` with `w: c_out × c_in × k`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if ws.len() != 3 {
            return Err(Error::dim("conv1d kernel", xs, ws));
        }
        let k = ws[2];
        if k % 2 == 0 {
            return Err(Error::Config(format!(
                "conv1d kernel size must be odd for same padding, got {k}"
            )));
        }
        if xs.len() != 2 || xs[1] != ws[1] {
            return Err(Error::dim("conv1d", xs, ws));
        }
        if bs != [ws[0]] {
            return Err(Error::dim("conv1d bias", ws, bs));
        }
        let (len, c_in, c_out) = (xs[0], xs[1], ws[0]);
        let y = kernels::conv1d(self.data(x), len, c_in, self.data(w), self.data(b), k);
        Ok(self.push(Tensor::new(&[len, c_out], y)?, Op::Conv1d { x, w, b, k }))
    }

    /// Same-padded 2D convolution of `x: c_in × H × W` with `w: c_out × c_in × k × k`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if ws.len() != 4 || ws[2] != ws[3] {
            return Err(Error::dim("conv2d kernel", xs, ws));
        }
        let k = ws[2];
        if k % 2 == 0 {
            return Err(Error::Config(format!(
                "conv2d kernel size must be odd for same padding, got {k}"
            )));
        }
        if xs.len() != 3 || xs[0] != ws[1] {
            return Err(Error::dim("conv2d", xs, ws));
        }
        if bs != [ws[0]] {
            return Err(Error::dim("conv2d bias", ws, bs));
        }
        let dims = Conv2dDims {
            c_in: xs[0],
            c_out: ws[0],
            h: xs[1],
            w: xs[2],
            k,
        };
        let y = kernels::conv2d(self.data(x), self.data(w), self.data(b), dims);
        let out = Tensor::new(&[dims.c_out, dims.h, dims.w], y)?;
        Ok(self.push(out, Op::Conv2d { x, w, b, dims }))
    }

    /// Normalizes every row of `x: T × D` to zero mean and unit variance,
    /// then applies the per-feature `gain` and `beta`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, beta: Var) -> Result<Var> {
        let xs = self.shape(x);
        let d = *xs.last().unwrap();
        if xs.len() != 2 || self.shape(gain) != [d] || self.shape(beta) != [d] {
            return Err(Error::dim("layer_norm", xs, self.shape(gain)));
        }
        let shape = xs.to_vec();
        let (y, xhat, inv_std) =
            kernels::layer_norm(self.data(x), d, self.data(gain), self.data(beta));
        let op = Op::LayerNorm {
            x,
            gain,
            beta,
            xhat,
            inv_std,
        };
        Ok(self.push(Tensor::new(&shape, y)?, op))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        let f: fn(f64) -> f64 = match kind {
            Activation::Relu => |v| v.max(0.0),
            Activation::Sigmoid => kernels::sigmoid,
            Activation::Abs => f64::abs,
        };
        let y = self.value(x).map(f);
        self.push(y, Op::Act { x, kind })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Relu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Sigmoid)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Abs)
    }

    /// Softmax over the last dimension.
    pub fn softmax(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let y = kernels::softmax_rows(self.data(x), *shape.last().unwrap());
        self.push(Tensor::new(&shape, y).expect("same shape"), Op::SoftmaxRows { x })
    }

    /// Inverted dropout. With `rng == None` (evaluation) this is the identity.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: Option<&mut R>) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout rate must be in [0, 1), got {p}")));
        }
        let Some(rng) = rng else {
            return Ok(x);
        };
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..self.value(x).len())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let shape = self.shape(x).to_vec();
        let y: Vec<f64> = self.data(x).iter().zip(&mask).map(|(v, m)| v * m).collect();
        Ok(self.push(Tensor::new(&shape, y)?, Op::Dropout { x, mask }))
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: fn(f64, f64) -> f64) -> Result<Vec<f64>> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(name, self.shape(a), self.shape(b)));
        }
        Ok(self.data(a).iter().zip(self.data(b)).map(|(x, y)| f(*x, *y)).collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.binary(a, b, "add", |x, y| x + y)?;
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::new(&shape, y)?, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.binary(a, b, "sub", |x, y| x - y)?;
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::new(&shape, y)?, Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.binary(a, b, "mul", |x, y| x * y)?;
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::new(&shape, y)?, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let y = self.value(x).map(|v| v * c);
        self.push(y, Op::Scale(x, c))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let y = self.value(x).clone().reshape(shape)?;
        Ok(self.push(y, Op::Reshape(x)))
    }

    /// `out[t] = next[t + 1] − cur[t]` for `t < T − 1`, with a zero last row.
    pub fn temporal_difference(&mut self, next: Var, cur: Var) -> Result<Var> {
        let shape = self.shape(cur).to_vec();
        if shape.len() != 2 || self.shape(next) != shape.as_slice() {
            return Err(Error::dim("temporal_difference", self.shape(next), &shape));
        }
        let (t, d) = (shape[0], shape[1]);
        let (n, c) = (self.data(next), self.data(cur));
        let mut y = vec![0.0; t * d];
        for i in 0..t.saturating_sub(1) {
            for j in 0..d {
                y[i * d + j] = n[(i + 1) * d + j] - c[i * d + j];
            }
        }
        Ok(self.push(Tensor::new(&shape, y)?, Op::TemporalDifference { next, cur }))
    }

    /// Mean over the rows of `x: T × C`, giving a length-`C` vector.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x);
        if xs.len() != 2 {
            return Err(Error::Contract(format!("mean_rows needs a matrix, got {xs:?}")));
        }
        let (t, c) = (xs[0], xs[1]);
        let mut y = vec![0.0; c];
        for row in self.data(x).chunks_exact(c) {
            for (acc, v) in y.iter_mut().zip(row) {
                *acc += v;
            }
        }
        y.iter_mut().for_each(|v| *v /= t as f64);
        Ok(self.push(Tensor::new(&[c], y)?, Op::MeanRows(x)))
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let d = self.data(x);
        let m = d.iter().sum::<f64>() / d.len() as f64;
        self.push(Tensor::scalar(m), Op::MeanAll(x))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().sum::<f64>();
        self.push(Tensor::scalar(s), Op::SumAll(x))
    }

    /// `−weight · ln(max(p[class], PROB_FLOOR))` for a probability vector `p`.
    pub fn weighted_nll(&mut self, p: Var, class: usize, weight: f64) -> Result<Var> {
        let ps = self.shape(p);
        if ps.len() != 1 || class >= ps[0] {
            return Err(Error::Contract(format!(
                "weighted_nll needs a probability vector with class {class}, got {ps:?}"
            )));
        }
        let pc = self.data(p)[class].max(PROB_FLOOR);
        let loss = -weight * pc.ln();
        Ok(self.push(Tensor::scalar(loss), Op::WeightedNll { p, class, weight }))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn gradients(&self, loss: Var) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        fn acc(grads: &mut [Option<Vec<f64>>], v: Var, g: &[f64]) {
            match &mut grads[v.0] {
                Some(existing) => existing.iter_mut().zip(g).for_each(|(e, x)| *e += x),
                slot @ None => *slot = Some(g.to_vec()),
            }
        }
        fn acc_owned(grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
            match &mut grads[v.0] {
                Some(existing) => existing.iter_mut().zip(&g).for_each(|(e, x)| *e += x),
                slot @ None => *slot = Some(g),
            }
        }

        for idx in (0..=loss.0).rev() {
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf | Op::Param(_)) {
                grads[idx] = Some(dy);
                continue;
            }
            match &node.op {
                Op::Leaf | Op::Param(_) => unreachable!(),
                Op::Affine { x, w, b } => {
                    let xs = self.shape(*x);
                    let g = kernels::affine_backward(
                        &dy,
                        self.data(*x),
                        xs[0],
                        xs[1],
                        self.data(*w),
                        self.shape(*w)[0],
                    );
                    acc_owned(&mut grads, *x, g.dx);
                    acc_owned(&mut grads, *w, g.dw);
                    acc_owned(&mut grads, *b, g.db);
                }
                Op::Conv1d { x, w, b, k } => {
                    let xs = self.shape(*x);
                    let g = kernels::conv1d_backward(
                        &dy,
                        self.data(*x),
                        xs[0],
                        xs[1],
                        self.data(*w),
                        self.shape(*w)[0],
                        *k,
                    );
                    acc_owned(&mut grads, *x, g.dx);
                    acc_owned(&mut grads, *w, g.dw);
                    acc_owned(&mut grads, *b, g.db);
                }
                Op::Conv2d { x, w, b, dims } => {
                    let g = kernels::conv2d_backward(&dy, self.data(*x), self.data(*w), *dims);
                    acc_owned(&mut grads, *x, g.dx);
                    acc_owned(&mut grads, *w, g.dw);
                    acc_owned(&mut grads, *b, g.db);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let g = kernels::layer_norm_backward(&dy, xhat, inv_std, self.data(*gain));
                    acc_owned(&mut grads, *x, g.dx);
                    acc_owned(&mut grads, *gain, g.dw);
                    acc_owned(&mut grads, *beta, g.db);
                }
                Op::Act { x, kind } => {
                    let dx: Vec<f64> = match kind {
                        Activation::Relu => dy
                            .iter()
                            .zip(self.data(*x))
                            .map(|(g, v)| if *v > 0.0 { *g } else { 0.0 })
                            .collect(),
                        Activation::Sigmoid => dy
                            .iter()
                            .zip(node.value.data())
                            .map(|(g, s)| g * s * (1.0 - s))
                            .collect(),
                        Activation::Abs => dy
                            .iter()
                            .zip(self.data(*x))
                            .map(|(g, v)| {
                                if *v > 0.0 {
                                    *g
                                } else if *v < 0.0 {
                                    -g
                                } else {
                                    0.0
                                }
                            })
                            .collect(),
                    };
                    acc_owned(&mut grads, *x, dx);
                }
                Op::SoftmaxRows { x } => {
                    let d = *node.value.shape().last().unwrap();
                    let dx = kernels::softmax_rows_backward(&dy, node.value.data(), d);
                    acc_owned(&mut grads, *x, dx);
                }
                Op::Dropout { x, mask } => {
                    let dx = dy.iter().zip(mask).map(|(g, m)| g * m).collect();
                    acc_owned(&mut grads, *x, dx);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, &dy);
                    acc_owned(&mut grads, *b, dy);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *a, &dy);
                    acc_owned(&mut grads, *b, dy.iter().map(|g| -g).collect());
                }
                Op::Mul(a, b) => {
                    let da = dy.iter().zip(self.data(*b)).map(|(g, v)| g * v).collect();
                    let db = dy.iter().zip(self.data(*a)).map(|(g, v)| g * v).collect();
                    acc_owned(&mut grads, *a, da);
                    acc_owned(&mut grads, *b, db);
                }
                Op::Scale(x, c) => {
                    acc_owned(&mut grads, *x, dy.iter().map(|g| g * c).collect());
                }
                Op::Reshape(x) => acc_owned(&mut grads, *x, dy),
                Op::TemporalDifference { next, cur } => {
                    let s = node.value.shape();
                    let (t, d) = (s[0], s[1]);
                    let mut dn = vec![0.0; t * d];
                    let mut dc = vec![0.0; t * d];
                    for i in 0..t.saturating_sub(1) {
                        for j in 0..d {
                            dn[(i + 1) * d + j] = dy[i * d + j];
                            dc[i * d + j] = -dy[i * d + j];
                        }
                    }
                    acc_owned(&mut grads, *next, dn);
                    acc_owned(&mut grads, *cur, dc);
                }
                Op::MeanRows(x) => {
                    let xs = self.shape(*x);
                    let t = xs[0] as f64;
                    let dx = (0..xs[0]).flat_map(|_| dy.iter().map(|g| g / t)).collect();
                    acc_owned(&mut grads, *x, dx);
                }
                Op::MeanAll(x) => {
                    let n = self.value(*x).len();
                    acc_owned(&mut grads, *x, vec![dy[0] / n as f64; n]);
                }
                Op::SumAll(x) => {
                    let n = self.value(*x).len();
                    acc_owned(&mut grads, *x, vec![dy[0]; n]);
                }
                Op::WeightedNll { p, class, weight } => {
                    let pv = self.data(*p);
                    let mut dp = vec![0.0; pv.len()];
                    if pv[*class] > PROB_FLOOR {
                        dp[*class] = -weight * dy[0] / pv[*class];
                    }
                    acc_owned(&mut grads, *p, dp);
                }
            }
        }

        let mut params = Vec::new();
        let mut leaves = Vec::new();
        for (idx, slot) in grads.into_iter().enumerate() {
            let Some(g) = slot else { continue };
            let node = &self.nodes[idx];
            match node.op {
                Op::Param(id) => params.push((id, g)),
                Op::Leaf if node.value.requires_grad => {
                    let t = Tensor::new(node.value.shape(), g)?;
                    leaves.push((Var(idx), t));
                }
                _ => {}
            }
        }
        Ok(Gradients { params, leaves })
    }

    /// Computes `∂loss/∂param` for every parameter in `store`. Parameters not
    /// reachable from `loss` end up with a zero gradient.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let grads = self.gradients(loss)?;
        store.zero_grad();
        grads.accumulate_into(store);
        Ok(())
    }
}

/// Output of a reverse sweep.
#[derive(Debug)]
pub struct Gradients {
    params: Vec<(ParamId, Vec<f64>)>,
    leaves: Vec<(Var, Tensor)>,
}

impl Gradients {
    /// Gradient of a leaf created from a tensor with `requires_grad` set.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.leaves.iter().find(|(l, _)| *l == v).map(|(_, t)| t)
    }

    /// Adds every parameter gradient into `store`.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for (id, g) in &self.params {
            let target = store.get_mut(*id).grad.data_mut();
            target.iter_mut().zip(g).for_each(|(t, v)| *t += v);
        }
    }
}
