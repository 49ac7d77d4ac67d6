//! Define-by-run reverse-mode differentiation.
//!
//! Every operation evaluates eagerly and appends one node to the [`Tape`].
//! Nodes only reference earlier nodes, so the tape is always in topological
//! order and [`Tape::backward`] is a single reverse sweep.

use indexmap::IndexMap;
use rand::Rng;

use crate::error::{shape_err, Error, Result};
use crate::ops::{self, conv, pool, Padding};
use crate::tensor::{Element, Shape, Tensor};

/// Lower clamp on probabilities inside the cross-entropy logarithm.
pub const LOG_CLAMP: f64 = 1e-12;

/// Handle to a value recorded on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Deliberately wrong backward rules, used as negative controls for the
/// gradient checker.
#[doc(hidden)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    /// Activation backward multiplies the upstream gradient by 1.5.
    ActivationGradient,
}

/// How a batch-norm node normalizes its input.
#[derive(Clone, Debug)]
pub enum NormStats<T> {
    /// Per-channel statistics of the current batch over `(n, h, w)`.
    Batch,
    /// Fixed per-channel mean and variance.
    Fixed { mean: Vec<T>, var: Vec<T> },
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: (usize, usize),
        padding: Padding,
    },
    Add(Var, Var),
    Relu(Var),
    Elu {
        x: Var,
        alpha: T,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    AvgPool {
        x: Var,
        window: (usize, usize),
        stride: (usize, usize),
        padding: Padding,
    },
    GlobalAvgPool(Var),
    Concat(Vec<Var>),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Softmax(Var),
    CrossEntropy {
        probs: Var,
        labels: Vec<usize>,
    },
    Sum(Var),
    SumSquares(Var),
    Scale {
        x: Var,
        factor: T,
    },
    AddConst(Var),
}

#[derive(Debug)]
struct Node<T> {
    op: Op<T>,
    value: Tensor<T>,
    requires_grad: bool,
}

/// Gradients keyed by trainable parameter name, in registration order.
pub type GradMap<T> = IndexMap<String, Tensor<T>>;

#[derive(Debug)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    params: IndexMap<String, Var>,
    fault: Option<Fault>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: IndexMap::new(),
            fault: None,
        }
    }

    #[doc(hidden)]
    pub fn inject_fault(&mut self, fault: Fault) {
        self.fault = Some(fault);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    /// Names of trainable leaves in registration order.
    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn param_var(&self, name: &str) -> Option<Var> {
        self.params.get(name).copied()
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push_with(op, value, requires_grad)
    }

    fn push_with(&mut self, op: Op<T>, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant input; no gradient flows into it.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push_with(Op::Leaf, value, false)
    }

    /// An unnamed leaf whose gradient is reported by [`Tape::backward_full`].
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.push_with(Op::Leaf, value, true)
    }

    /// A named trainable parameter. Registering a name twice is an error.
    pub fn param(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<Var> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::Autograd(format!(
                "parameter `{name}` registered twice"
            )));
        }
        let v = self.push_with(Op::Leaf, value, true);
        self.params.insert(name, v);
        Ok(v)
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: (usize, usize),
        padding: Padding,
    ) -> Result<Var> {
        let value = conv::conv2d_with(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            stride,
            padding,
        )?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(
            Op::Conv {
                x,
                w,
                b,
                stride,
                padding,
            },
            value,
            &inputs,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = ops::add(self.value(a), self.value(b))?;
        Ok(self.push(Op::Add(a, b), value, &[a, b]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = ops::relu(self.value(x));
        self.push(Op::Relu(x), value, &[x])
    }

    pub fn elu(&mut self, x: Var, alpha: T) -> Var {
        let value = ops::elu(self.value(x), alpha);
        self.push(Op::Elu { x, alpha }, value, &[x])
    }

    pub fn activation(&mut self, x: Var, act: ops::Activation) -> Var {
        match act {
            ops::Activation::Relu => self.relu(x),
            ops::Activation::Elu => self.elu(x, T::from_f64(ops::ELU_ALPHA)),
        }
    }

    pub fn max_pool(
        &mut self,
        x: Var,
        window: (usize, usize),
        stride: (usize, usize),
    ) -> Result<Var> {
        let (value, argmax) = pool::max_pool_with_argmax(self.value(x), window, stride)?;
        Ok(self.push(Op::MaxPool { x, argmax }, value, &[x]))
    }

    pub fn avg_pool(
        &mut self,
        x: Var,
        window: (usize, usize),
        stride: (usize, usize),
        padding: Padding,
    ) -> Result<Var> {
        let value = pool::avg_pool(self.value(x), window, stride, padding)?;
        Ok(self.push(
            Op::AvgPool {
                x,
                window,
                stride,
                padding,
            },
            value,
            &[x],
        ))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let value = pool::global_avg_pool(self.value(x));
        self.push(Op::GlobalAvgPool(x), value, &[x])
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let value = ops::concat_channels(&tensors)?;
        Ok(self.push(Op::Concat(parts.to_vec()), value, parts))
    }

    /// Batch normalization `gamma · (x − mean) / sqrt(var + eps) + beta`.
    ///
    /// With [`NormStats::Batch`] the per-channel batch mean and (biased)
    /// variance are returned alongside the output so the caller can update
    /// running statistics.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: NormStats<T>,
        eps: T,
    ) -> Result<(Var, Option<(Vec<T>, Vec<T>)>)> {
        let xs = self.shape(x);
        let c = xs.c;
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(shape_err(
                "batch_norm",
                format!(
                    "input has {c} channels, affine parameters have {}",
                    self.value(gamma).len()
                ),
            ));
        }
        let plane = xs.plane();
        let count = T::from_f64((xs.n * plane) as f64);
        let xv = self.value(x);
        let (mean, var, batch_stats) = match stats {
            NormStats::Batch => {
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for n in 0..xs.n {
                    for (ch, m) in mean.iter_mut().enumerate() {
                        let off = xs.offset(n, ch, 0, 0);
                        *m += xv.data()[off..off + plane].iter().copied().sum::<T>();
                    }
                }
                mean.iter_mut().for_each(|m| *m /= count);
                for n in 0..xs.n {
                    for ch in 0..c {
                        let off = xs.offset(n, ch, 0, 0);
                        let m = mean[ch];
                        var[ch] += xv.data()[off..off + plane]
                            .iter()
                            .map(|&v| (v - m) * (v - m))
                            .sum::<T>();
                    }
                }
                var.iter_mut().for_each(|v| *v /= count);
                (mean, var, true)
            }
            NormStats::Fixed { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(shape_err("batch_norm", "running statistics length"));
                }
                (mean, var, false)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data().to_vec();
        let bt = self.value(beta).data().to_vec();
        let mut xhat = Vec::with_capacity(xs.len());
        let mut out = Vec::with_capacity(xs.len());
        for n in 0..xs.n {
            for ch in 0..c {
                let off = xs.offset(n, ch, 0, 0);
                for &v in &xv.data()[off..off + plane] {
                    let h = (v - mean[ch]) * inv_std[ch];
                    xhat.push(h);
                    out.push(g[ch] * h + bt[ch]);
                }
            }
        }
        let xhat = Tensor::from_vec(xs, xhat)?;
        let value = Tensor::from_vec(xs, out)?;
        let v = self.push(
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
            value,
            &[x, gamma, beta],
        );
        Ok((v, batch_stats.then_some((mean, var))))
    }

    /// Inverted dropout: each element is zeroed with probability `rate` and
    /// survivors are scaled by `1 / (1 − rate)`. The mask is kept for backward.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidArgument(format!(
                "dropout rate {rate} outside [0, 1)"
            )));
        }
        let keep = T::from_f64(1.0 / (1.0 - rate));
        let mask: Vec<T> = (0..self.value(x).len())
            .map(|_| {
                if rng.gen::<f64>() < rate {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        let xv = self.value(x);
        let value = Tensor::from_vec(
            xv.shape(),
            xv.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect(),
        )?;
        Ok(self.push(Op::Dropout { x, mask }, value, &[x]))
    }

    /// Dense layer over flattened features: `x (n, F…) · W (1, 1, F, K) + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        let features = xs.c * xs.plane();
        if ws.n != 1 || ws.c != 1 || ws.h != features {
            return Err(shape_err(
                "linear",
                format!("{features} features against weight {ws}"),
            ));
        }
        let k = ws.w;
        let mut out = vec![T::zero(); xs.n * k];
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.len() != k {
                return Err(shape_err(
                    "linear",
                    format!("bias length {} for {k} outputs", bv.len()),
                ));
            }
            for row in out.chunks_exact_mut(k) {
                row.copy_from_slice(bv.data());
            }
        }
        crate::tensor::gemm(
            xs.n,
            features,
            k,
            self.value(x).data(),
            false,
            self.value(w).data(),
            false,
            &mut out,
            b.is_some(),
        );
        let value = Tensor::from_vec((xs.n, k, 1, 1), out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(Op::Linear { x, w, b }, value, &inputs))
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        let value = ops::softmax_rows(self.value(x));
        self.push(Op::Softmax(x), value, &[x])
    }

    /// Mean negative log-likelihood of `labels` under `probs (n, K, 1, 1)`,
    /// plus the constant `l2_term`.
    pub fn cross_entropy(&mut self, probs: Var, labels: &[usize], l2_term: T) -> Result<Var> {
        let loss = cross_entropy(self.value(probs), labels, l2_term)?;
        Ok(self.push(
            Op::CrossEntropy {
                probs,
                labels: labels.to_vec(),
            },
            Tensor::scalar(loss),
            &[probs],
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(Op::Sum(x), value, &[x])
    }

    pub fn sum_squares(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).data().iter().map(|&v| v * v).sum());
        self.push(Op::SumSquares(x), value, &[x])
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let value = self.value(x).scale(factor);
        self.push(Op::Scale { x, factor }, value, &[x])
    }

    /// `x + c` for a constant `c`.
    pub fn add_const(&mut self, x: Var, c: T) -> Var {
        let value = self.value(x).map(|v| v + c);
        self.push(Op::AddConst(x), value, &[x])
    }

    /// Gradients of the scalar `loss` with respect to every trainable
    /// parameter. Parameters the loss does not depend on get zeros.
    pub fn backward(&self, loss: Var) -> Result<GradMap<T>> {
        let grads = self.backpropagate(loss, false)?;
        Ok(grads.into_grad_map(self))
    }

    /// Gradients of `loss` for every node that requires one.
    pub fn backward_full(&self, loss: Var) -> Result<Gradients<T>> {
        self.backpropagate(loss, true)
    }

    /// With `keep_all` false, interior gradients are released as soon as
    /// they have been propagated and only leaf gradients are returned.
    fn backpropagate(&self, loss: Var, keep_all: bool) -> Result<Gradients<T>> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::Autograd(format!(
                "loss {loss:?} is not on this tape"
            )));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Autograd(format!(
                "loss must be scalar, got shape {}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));
        for idx in (0..=loss.0).rev() {
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.propagate(node, &dy, &mut grads)?;
            if keep_all || matches!(node.op, Op::Leaf) {
                grads[idx] = Some(dy);
            }
        }
        Ok(Gradients { grads })
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) -> Result<()> {
        if !self.needs(v) {
            return Ok(());
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => {
                *slot = Some(g);
                Ok(())
            }
        }
    }

    fn propagate(
        &self,
        node: &Node<T>,
        dy: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::Conv {
                x,
                w,
                b,
                stride,
                padding,
            } => {
                let g =
                    conv::conv2d_backward(self.value(*x), self.value(*w), dy, *stride, *padding)?;
                self.accumulate(grads, *x, g.input)?;
                self.accumulate(grads, *w, g.weight)?;
                if let Some(b) = b {
                    let bs = self.shape(*b);
                    self.accumulate(grads, *b, g.bias.reshape(bs)?)?;
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, dy.clone())?;
                self.accumulate(grads, *b, dy.clone())?;
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                let boost = self.fault_scale();
                let dx = xv
                    .data()
                    .iter()
                    .zip(dy.data())
                    .map(|(&v, &g)| if v > T::zero() { g * boost } else { T::zero() })
                    .collect();
                self.accumulate(grads, *x, Tensor::from_vec(xv.shape(), dx)?)?;
            }
            Op::Elu { x, alpha } => {
                let xv = self.value(*x);
                let boost = self.fault_scale();
                let dx = xv
                    .data()
                    .iter()
                    .zip(node.value.data())
                    .zip(dy.data())
                    .map(|((&v, &y), &g)| {
                        let d = if v >= T::zero() { T::one() } else { y + *alpha };
                        g * d * boost
                    })
                    .collect();
                self.accumulate(grads, *x, Tensor::from_vec(xv.shape(), dx)?)?;
            }
            Op::MaxPool { x, argmax } => {
                let dx = pool::max_pool_backward(self.shape(*x), argmax, dy)?;
                self.accumulate(grads, *x, dx)?;
            }
            Op::AvgPool {
                x,
                window,
                stride,
                padding,
            } => {
                let dx = pool::avg_pool_backward(self.shape(*x), *window, *stride, *padding, dy)?;
                self.accumulate(grads, *x, dx)?;
            }
            Op::GlobalAvgPool(x) => {
                let dx = pool::global_avg_pool_backward(self.shape(*x), dy);
                self.accumulate(grads, *x, dx)?;
            }
            Op::Concat(parts) => {
                let mut start = 0;
                for &p in parts {
                    let c = self.shape(p).c;
                    if self.needs(p) {
                        self.accumulate(grads, p, dy.slice_channels(start, c)?)?;
                    }
                    start += c;
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let s = xhat.shape();
                let plane = s.plane();
                let c = s.c;
                let count = T::from_f64((s.n * plane) as f64);
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for n in 0..s.n {
                    for ch in 0..c {
                        let off = s.offset(n, ch, 0, 0);
                        for i in off..off + plane {
                            dgamma[ch] += dy.data()[i] * xhat.data()[i];
                            dbeta[ch] += dy.data()[i];
                        }
                    }
                }
                if self.needs(*x) {
                    let g = self.value(*gamma).data();
                    let mut dx = vec![T::zero(); s.len()];
                    for n in 0..s.n {
                        for ch in 0..c {
                            let off = s.offset(n, ch, 0, 0);
                            let k = g[ch] * inv_std[ch];
                            for i in off..off + plane {
                                dx[i] = if *batch_stats {
                                    k * (dy.data()[i]
                                        - dbeta[ch] / count
                                        - xhat.data()[i] * dgamma[ch] / count)
                                } else {
                                    k * dy.data()[i]
                                };
                            }
                        }
                    }
                    self.accumulate(grads, *x, Tensor::from_vec(s, dx)?)?;
                }
                let gs = self.shape(*gamma);
                let bs = self.shape(*beta);
                self.accumulate(grads, *gamma, Tensor::from_vec(gs, dgamma)?)?;
                self.accumulate(grads, *beta, Tensor::from_vec(bs, dbeta)?)?;
            }
            Op::Dropout { x, mask } => {
                let dx = dy.data().iter().zip(mask).map(|(&g, &m)| g * m).collect();
                self.accumulate(grads, *x, Tensor::from_vec(dy.shape(), dx)?)?;
            }
            Op::Linear { x, w, b } => {
                let xs = self.shape(*x);
                let ws = self.shape(*w);
                let (n, f, k) = (xs.n, ws.h, ws.w);
                if self.needs(*w) {
                    let mut dw = vec![T::zero(); f * k];
                    crate::tensor::gemm(
                        f,
                        n,
                        k,
                        self.value(*x).data(),
                        true,
                        dy.data(),
                        false,
                        &mut dw,
                        false,
                    );
                    self.accumulate(grads, *w, Tensor::from_vec(ws, dw)?)?;
                }
                if self.needs(*x) {
                    let mut dx = vec![T::zero(); n * f];
                    crate::tensor::gemm(
                        n,
                        k,
                        f,
                        dy.data(),
                        false,
                        self.value(*w).data(),
                        true,
                        &mut dx,
                        false,
                    );
                    self.accumulate(grads, *x, Tensor::from_vec(xs, dx)?)?;
                }
                if let Some(b) = b {
                    let mut db = vec![T::zero(); k];
                    for row in dy.data().chunks_exact(k) {
                        for (d, &g) in db.iter_mut().zip(row) {
                            *d += g;
                        }
                    }
                    let bs = self.shape(*b);
                    self.accumulate(grads, *b, Tensor::from_vec(bs, db)?)?;
                }
            }
            Op::Softmax(x) => {
                let p = &node.value;
                let s = p.shape();
                let k = s.c * s.plane();
                let mut dx = Vec::with_capacity(p.len());
                for (prow, grow) in p.data().chunks_exact(k).zip(dy.data().chunks_exact(k)) {
                    let dot: T = prow.iter().zip(grow).map(|(&a, &b)| a * b).sum();
                    dx.extend(prow.iter().zip(grow).map(|(&pi, &gi)| pi * (gi - dot)));
                }
                self.accumulate(grads, *x, Tensor::from_vec(s, dx)?)?;
            }
            Op::CrossEntropy { probs, labels } => {
                let p = self.value(*probs);
                let s = p.shape();
                let k = s.c * s.plane();
                let g = dy.data()[0];
                let inv_n = T::one() / T::from_f64(labels.len() as f64);
                let clamp = T::from_f64(LOG_CLAMP);
                let mut dx = vec![T::zero(); p.len()];
                for (row, &label) in labels.iter().enumerate() {
                    let pv = p.data()[row * k + label];
                    if pv > clamp {
                        dx[row * k + label] = -g * inv_n / pv;
                    }
                }
                self.accumulate(grads, *probs, Tensor::from_vec(s, dx)?)?;
            }
            Op::Sum(x) => {
                let g = dy.data()[0];
                self.accumulate(grads, *x, Tensor::full(self.shape(*x), g))?;
            }
            Op::SumSquares(x) => {
                let g = dy.data()[0];
                let two = T::from_f64(2.0);
                self.accumulate(grads, *x, self.value(*x).map(|v| two * v * g))?;
            }
            Op::Scale { x, factor } => {
                self.accumulate(grads, *x, dy.scale(*factor))?;
            }
            Op::AddConst(x) => {
                self.accumulate(grads, *x, dy.clone())?;
            }
        }
        Ok(())
    }

    fn fault_scale(&self) -> T {
        match self.fault {
            Some(Fault::ActivationGradient) => T::from_f64(1.5),
            None => T::one(),
        }
    }
}

/// Mean `−ln(max(p[label], 1e-12))` over the batch plus `l2_term`.
pub fn cross_entropy<T: Element>(probs: &Tensor<T>, labels: &[usize], l2_term: T) -> Result<T> {
    let s = probs.shape();
    let k = s.c * s.plane();
    if labels.len() != s.n {
        return Err(shape_err(
            "cross_entropy",
            format!("{} labels for batch of {}", labels.len(), s.n),
        ));
    }
    let clamp = T::from_f64(LOG_CLAMP);
    let mut total = T::zero();
    for (row, &label) in labels.iter().enumerate() {
        if label >= k {
            return Err(Error::InvalidArgument(format!(
                "label {label} out of range for {k} classes"
            )));
        }
        total += -probs.data()[row * k + label].max(clamp).ln();
    }
    Ok(total / T::from_f64(labels.len() as f64) + l2_term)
}

/// Per-node gradients produced by [`Tape::backward_full`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn into_grad_map(mut self, tape: &Tape<T>) -> GradMap<T> {
        tape.params
            .iter()
            .map(|(name, &v)| {
                let g = self.grads[v.0]
                    .take()
                    .unwrap_or_else(|| Tensor::zeros(tape.shape(v)));
                (name.clone(), g)
            })
            .collect()
    }
}

/// Elementwise sum of gradient maps from independent tapes.
pub fn merge_grads<T: Element>(into: &mut GradMap<T>, other: &GradMap<T>) -> Result<()> {
    for (name, g) in other {
        match into.get_mut(name) {
            Some(acc) => acc.add_assign(g)?,
            None => {
                into.insert(name.clone(), g.clone());
            }
        }
    }
    Ok(())
}
