use super::kernels::{self, ConvGeom};
use super::{Float, Tensor};
use crate::error::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Probabilities are clamped to `[BCE_EPSILON, 1 - BCE_EPSILON]` inside the loss.
pub const BCE_EPSILON: f64 = 1e-7;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    index: usize,
    generation: u64,
}

enum Op<T> {
    Leaf,
    Conv2d {
        input: usize,
        weight: usize,
        bias: usize,
        geom: ConvGeom,
    },
    MaxPool {
        input: usize,
        argmax: Vec<usize>,
    },
    Upsample {
        input: usize,
        dims: [usize; 4],
    },
    Relu {
        input: usize,
    },
    Sigmoid {
        input: usize,
    },
    Dropout {
        input: usize,
        scale: Vec<T>,
    },
    Concat {
        a: usize,
        b: usize,
    },
    Bce {
        pred: usize,
        target: Vec<T>,
        weights: Vec<T>,
    },
    Sum {
        input: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Ordered record of primitive applications. Nodes are appended in
/// evaluation order, so every node's inputs precede it.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    generation: u64,
}

impl<T: Float> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            generation: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every record. Handles issued before the call become invalid.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.generation += 1;
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.generation != self.generation || v.index >= self.nodes.len() {
            return Err(Error::State(
                "variable does not belong to the current tape (was it cleared?)".into(),
            ));
        }
        Ok(v.index)
    }

    fn node(&self, v: Var) -> Result<&Node<T>> {
        self.check(v).map(|i| &self.nodes[i])
    }

    pub fn value(&self, v: Var) -> Result<&Tensor<T>> {
        self.node(v).map(|n| &n.value)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            index: self.nodes.len() - 1,
            generation: self.generation,
        }
    }

    fn grad_flag(&self, inputs: &[usize]) -> bool {
        inputs.iter().any(|&i| self.nodes[i].requires_grad)
    }

    /// Records a trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Records a leaf that receives no gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Size-preserving convolution: stride 1, odd square kernel, zero padding `k/2`.
    ///
    /// `input` is `N×C×H×W`, `weight` is `F×C×k×k`, `bias` has `F` elements.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (xi, wi, bi) = (self.check(input)?, self.check(weight)?, self.check(bias)?);
        let [n, c, h, w] = self.nodes[xi].value.dims4()?;
        let [f, wc, kh, kw] = self.nodes[wi].value.dims4()?;
        if wc != c {
            return Err(Error::Shape(format!(
                "conv weight expects {wc} input channels, input has {c}"
            )));
        }
        if kh != kw || kh % 2 == 0 {
            return Err(Error::Shape(format!(
                "conv kernel must be square and odd, got {kh}×{kw}"
            )));
        }
        if self.nodes[bi].value.len() != f {
            return Err(Error::Shape(format!(
                "conv bias has {} elements, expected {f}",
                self.nodes[bi].value.len()
            )));
        }
        let geom = ConvGeom {
            n,
            c,
            h,
            w,
            f,
            k: kh,
        };
        let out = kernels::conv2d_forward(
            &geom,
            self.nodes[xi].value.data(),
            self.nodes[wi].value.data(),
            self.nodes[bi].value.data(),
        );
        let rg = self.grad_flag(&[xi, wi, bi]);
        Ok(self.push(
            Tensor::new(&[n, f, h, w], out)?,
            Op::Conv2d {
                input: xi,
                weight: wi,
                bias: bi,
                geom,
            },
            rg,
        ))
    }

    /// 2×2 max pooling with stride 2.
    pub fn max_pool2d(&mut self, input: Var) -> Result<Var> {
        let xi = self.check(input)?;
        let dims = self.nodes[xi].value.dims4()?;
        let [n, c, h, w] = dims;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Shape(format!(
                "max pool needs even spatial size, got {h}×{w}"
            )));
        }
        let (out, argmax) = kernels::max_pool_forward(dims, self.nodes[xi].value.data());
        let rg = self.grad_flag(&[xi]);
        Ok(self.push(
            Tensor::new(&[n, c, h / 2, w / 2], out)?,
            Op::MaxPool { input: xi, argmax },
            rg,
        ))
    }

    /// Nearest-neighbour 2× upsampling.
    pub fn upsample_nearest2x(&mut self, input: Var) -> Result<Var> {
        let xi = self.check(input)?;
        let dims = self.nodes[xi].value.dims4()?;
        let [n, c, h, w] = dims;
        let out = kernels::upsample2x_forward(dims, self.nodes[xi].value.data());
        let rg = self.grad_flag(&[xi]);
        Ok(self.push(
            Tensor::new(&[n, c, 2 * h, 2 * w], out)?,
            Op::Upsample { input: xi, dims },
            rg,
        ))
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        let xi = self.check(input)?;
        let out = self.nodes[xi].value.map(|v| v.max(T::zero()));
        let rg = self.grad_flag(&[xi]);
        Ok(self.push(out, Op::Relu { input: xi }, rg))
    }

    pub fn sigmoid(&mut self, input: Var) -> Result<Var> {
        let xi = self.check(input)?;
        let out = self.nodes[xi].value.map(sigmoid);
        let rg = self.grad_flag(&[xi]);
        Ok(self.push(out, Op::Sigmoid { input: xi }, rg))
    }

    /// Inverted dropout. In training mode each element is zeroed with
    /// probability `p` and survivors are scaled by `1/(1-p)`; otherwise the
    /// input is passed through untouched.
    pub fn dropout(&mut self, input: Var, p: f64, training: bool, seed: u64) -> Result<Var> {
        let xi = self.check(input)?;
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Argument(format!(
                "dropout probability must be in [0, 1), got {p}"
            )));
        }
        if !training || p == 0.0 {
            return Ok(input);
        }
        let keep = T::from_f64(1.0 / (1.0 - p));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale: Vec<T> = (0..self.nodes[xi].value.len())
            .map(|_| {
                if rng.gen::<f64>() < p {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        let x = &self.nodes[xi].value;
        let out = Tensor::new(
            x.shape(),
            x.data().iter().zip(&scale).map(|(&v, &s)| v * s).collect(),
        )?;
        let rg = self.grad_flag(&[xi]);
        Ok(self.push(out, Op::Dropout { input: xi, scale }, rg))
    }

    /// Channel-wise concatenation of two `N×C×H×W` tensors.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        let [n, ca, h, w] = self.nodes[ai].value.dims4()?;
        let [nb, cb, hb, wb] = self.nodes[bi].value.dims4()?;
        if (n, h, w) != (nb, hb, wb) {
            return Err(Error::Shape(format!(
                "concat needs matching N,H,W: {:?} vs {:?}",
                self.nodes[ai].value.shape(),
                self.nodes[bi].value.shape()
            )));
        }
        let plane = h * w;
        let (da, db) = (self.nodes[ai].value.data(), self.nodes[bi].value.data());
        let mut out = Vec::with_capacity(da.len() + db.len());
        for s in 0..n {
            out.extend_from_slice(&da[s * ca * plane..(s + 1) * ca * plane]);
            out.extend_from_slice(&db[s * cb * plane..(s + 1) * cb * plane]);
        }
        let rg = self.grad_flag(&[ai, bi]);
        Ok(self.push(
            Tensor::new(&[n, ca + cb, h, w], out)?,
            Op::Concat { a: ai, b: bi },
            rg,
        ))
    }

    /// Weighted binary cross-entropy.
    ///
    /// Each sample's pixel-mean cross-entropy is multiplied by its weight and
    /// the products are averaged over the batch (the leading dimension).
    pub fn bce_loss(&mut self, pred: Var, target: &Tensor<T>, weights: &[T]) -> Result<Var> {
        let pi = self.check(pred)?;
        let p = &self.nodes[pi].value;
        if p.shape() != target.shape() {
            return Err(Error::Shape(format!(
                "prediction {:?} and target {:?} differ",
                p.shape(),
                target.shape()
            )));
        }
        let n = p.shape()[0];
        if weights.len() != n {
            return Err(Error::Shape(format!(
                "{} loss weights for a batch of {n}",
                weights.len()
            )));
        }
        if weights.iter().any(|&w| !(w > T::zero())) {
            return Err(Error::Argument("loss weights must be positive".into()));
        }
        let per = p.len() / n;
        let eps = T::from_f64(BCE_EPSILON);
        let hi = T::one() - eps;
        let mut total = T::zero();
        for ((ps, ts), &w) in p
            .data()
            .chunks(per)
            .zip(target.data().chunks(per))
            .zip(weights)
        {
            let mut acc = T::zero();
            for (&pv, &tv) in ps.iter().zip(ts) {
                let pc = pv.max(eps).min(hi);
                acc += -(tv * pc.ln() + (T::one() - tv) * (T::one() - pc).ln());
            }
            total += w * acc / T::from(per).unwrap();
        }
        let loss = total / T::from(n).unwrap();
        let rg = self.grad_flag(&[pi]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Bce {
                pred: pi,
                target: target.data().to_vec(),
                weights: weights.to_vec(),
            },
            rg,
        ))
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let xi = self.check(input)?;
        let s = self.nodes[xi].value.sum();
        let rg = self.grad_flag(&[xi]);
        Ok(self.push(Tensor::scalar(s), Op::Sum { input: xi }, rg))
    }

    /// Elementwise product of equally shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        let (x, y) = (&self.nodes[ai].value, &self.nodes[bi].value);
        if x.shape() != y.shape() {
            return Err(Error::Shape(format!(
                "mul operands {:?} and {:?} differ",
                x.shape(),
                y.shape()
            )));
        }
        let out = Tensor::new(
            x.shape(),
            x.data().iter().zip(y.data()).map(|(&u, &v)| u * v).collect(),
        )?;
        let rg = self.grad_flag(&[ai, bi]);
        Ok(self.push(out, Op::Mul { a: ai, b: bi }, rg))
    }

    /// Reverse accumulation from a scalar `loss`.
    ///
    /// The returned [`Gradients`] hold a tensor for every `requires_grad`
    /// leaf; leaves the loss does not depend on get zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let li = self.check(loss)?;
        if self.nodes[li].value.len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[li].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut leaves: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[li] = Some(Tensor::ones(self.nodes[li].value.shape()));

        for i in (0..=li).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => leaves[i] = Some(g),
                Op::Conv2d {
                    input,
                    weight,
                    bias,
                    geom,
                } => {
                    let need_input = self.nodes[*input].requires_grad;
                    let cg = kernels::conv2d_backward(
                        geom,
                        self.nodes[*input].value.data(),
                        self.nodes[*weight].value.data(),
                        g.data(),
                        need_input,
                    );
                    if let Some(dx) = cg.input {
                        self.accumulate(&mut grads, *input, dx);
                    }
                    self.accumulate(&mut grads, *weight, cg.weight);
                    self.accumulate(&mut grads, *bias, cg.bias);
                }
                Op::MaxPool { input, argmax } => {
                    let mut dx = vec![T::zero(); self.nodes[*input].value.len()];
                    for (&src, &gv) in argmax.iter().zip(g.data()) {
                        dx[src] += gv;
                    }
                    self.accumulate(&mut grads, *input, dx);
                }
                Op::Upsample { input, dims } => {
                    let dx = kernels::upsample2x_backward(*dims, g.data());
                    self.accumulate(&mut grads, *input, dx);
                }
                Op::Relu { input } => {
                    let x = self.nodes[*input].value.data();
                    let dx = x
                        .iter()
                        .zip(g.data())
                        .map(|(&xv, &gv)| if xv > T::zero() { gv } else { T::zero() })
                        .collect();
                    self.accumulate(&mut grads, *input, dx);
                }
                Op::Sigmoid { input } => {
                    let dx = node
                        .value
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&s, &gv)| gv * s * (T::one() - s))
                        .collect();
                    self.accumulate(&mut grads, *input, dx);
                }
                Op::Dropout { input, scale } => {
                    let dx = scale.iter().zip(g.data()).map(|(&s, &gv)| s * gv).collect();
                    self.accumulate(&mut grads, *input, dx);
                }
                Op::Concat { a, b } => {
                    let [n, ca, h, w] = self.nodes[*a].value.dims4()?;
                    let cb = self.nodes[*b].value.dims4()?[1];
                    let plane = h * w;
                    let (mut da, mut db) = (Vec::new(), Vec::new());
                    for chunk in g.data().chunks((ca + cb) * plane).take(n) {
                        da.extend_from_slice(&chunk[..ca * plane]);
                        db.extend_from_slice(&chunk[ca * plane..]);
                    }
                    self.accumulate(&mut grads, *a, da);
                    self.accumulate(&mut grads, *b, db);
                }
                Op::Bce {
                    pred,
                    target,
                    weights,
                } => {
                    let p = &self.nodes[*pred].value;
                    let n = weights.len();
                    let per = p.len() / n;
                    let eps = T::from_f64(BCE_EPSILON);
                    let hi = T::one() - eps;
                    let upstream = g.data()[0];
                    let norm = T::from(n * per).unwrap();
                    let mut dx = Vec::with_capacity(p.len());
                    for ((ps, ts), &w) in p.data().chunks(per).zip(target.chunks(per)).zip(weights) {
                        let coef = upstream * w / norm;
                        // derivative evaluated at the clamped probability
                        dx.extend(ps.iter().zip(ts).map(|(&pv, &tv)| {
                            let pc = pv.max(eps).min(hi);
                            coef * (-(tv / pc) + (T::one() - tv) / (T::one() - pc))
                        }));
                    }
                    self.accumulate(&mut grads, *pred, dx);
                }
                Op::Sum { input } => {
                    let upstream = g.data()[0];
                    let dx = vec![upstream; self.nodes[*input].value.len()];
                    self.accumulate(&mut grads, *input, dx);
                }
                Op::Mul { a, b } => {
                    let (x, y) = (self.nodes[*a].value.data(), self.nodes[*b].value.data());
                    let da = y.iter().zip(g.data()).map(|(&v, &gv)| v * gv).collect();
                    let db = x.iter().zip(g.data()).map(|(&v, &gv)| v * gv).collect();
                    self.accumulate(&mut grads, *a, da);
                    self.accumulate(&mut grads, *b, db);
                }
            }
        }

        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad && leaves[i].is_none() {
                leaves[i] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients {
            generation: self.generation,
            grads: leaves,
        })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], idx: usize, data: Vec<T>) {
        if !self.nodes[idx].requires_grad {
            return;
        }
        let t = Tensor::new(self.nodes[idx].value.shape(), data).expect("adjoint shape");
        match &mut grads[idx] {
            Some(acc) => acc.add_assign(&t),
            slot @ None => *slot = Some(t),
        }
    }
}

/// Gradients of a scalar with respect to the leaves of one tape.
pub struct Gradients<T> {
    generation: u64,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Float> Gradients<T> {
    /// Gradient for a `requires_grad` leaf; `None` for anything else.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        if v.generation != self.generation {
            return None;
        }
        self.grads.get(v.index).and_then(Option::as_ref)
    }
}

pub(crate) fn sigmoid<T: Float>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}
