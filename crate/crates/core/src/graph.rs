//! Tape-based reverse-mode automatic differentiation.
//!
//! Nodes are appended in evaluation order, so the tape is always topologically sorted
//! and [`Graph::backward`] is a single reverse sweep. Gradients from multiple consumers
//! are summed in reverse tape order, which is fixed for a given graph.

use crate::conv::{conv2d_backward, conv2d_forward};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Batch-norm epsilon.
pub const BN_EPS: f64 = 1e-5;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        stride: usize,
        pad: usize,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AverageN(Vec<Var>),
    Relu(Var),
    BatchNormTrain {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    BatchNormEval {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    ChannelAffine {
        input: Var,
        scale: Var,
        shift: Var,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
    },
    GlobalAvgPool(Var),
    Sum(Var),
    SoftmaxCrossEntropy {
        logits: Var,
        probs: Vec<T>,
        labels: Vec<usize>,
    },
    ChannelSlice {
        input: Var,
        start: usize,
    },
    ConcatChannels(Vec<Var>),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Per-channel statistics of a training-mode batch norm, returned for running averages.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
}

fn same_shape<T: Scalar>(op: &str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(format!(
            "{op}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn per_channel_len<T: Scalar>(op: &str, t: &Tensor<T>, channels: usize) -> Result<()> {
    if t.shape() != [channels] {
        return Err(Error::dim(format!(
            "{op}: expected per-channel tensor [{channels}], got {:?}",
            t.shape()
        )));
    }
    Ok(())
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` loss with respect to `v`, if it was reached.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    fn push(&mut self, name: &str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::Numeric { op: name.into() });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, pad: usize) -> Result<Var> {
        let out = conv2d_forward(self.value(input), self.value(kernel), stride, pad)?;
        self.push(
            "conv2d",
            out,
            Op::Conv2d {
                input,
                kernel,
                stride,
                pad,
            },
            &[input, kernel],
        )
    }

    /// Convolution partitioned into `kernels.len()` channel groups; outputs are concatenated.
    pub fn group_conv2d(
        &mut self,
        input: Var,
        kernels: &[Var],
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let groups = kernels.len();
        let [_, c, _, _] = self.value(input).dims4("group_conv2d")?;
        if groups == 0 || c % groups != 0 {
            return Err(Error::dim(format!(
                "group_conv2d: {c} channels not divisible into {groups} groups"
            )));
        }
        if groups == 1 {
            return self.conv2d(input, kernels[0], stride, pad);
        }
        let per = c / groups;
        let mut outs = Vec::with_capacity(groups);
        for (g, &k) in kernels.iter().enumerate() {
            let part = self.channel_slice(input, g * per, per)?;
            outs.push(self.conv2d(part, k, stride, pad)?);
        }
        self.concat_channels(&outs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.value(a), self.value(b))?;
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.push("add", out, Op::Add(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", self.value(a), self.value(b))?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p * q).collect();
        let out = Tensor::new(x.shape(), data)?;
        self.push("mul", out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Result<Var> {
        let out = self.value(a).map(|v| v * factor);
        self.push("scale", out, Op::Scale(a, factor), &[a])
    }

    /// Elementwise mean of equally shaped inputs: sum in order, then divide by the count.
    pub fn average_n(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| Error::dim("average_n of zero inputs"))?;
        let mut acc = self.value(first).clone();
        for &v in &inputs[1..] {
            same_shape("average_n", &acc, self.value(v))?;
            acc.add_assign(self.value(v));
        }
        let k = T::from_usize(inputs.len()).unwrap();
        let out = acc.map(|v| v / k);
        self.push("average_n", out, Op::AverageN(inputs.to_vec()), inputs)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push("relu", out, Op::Relu(a), &[a])
    }

    /// Training-mode batch norm over `(N, H, W)` per channel. Returns the output and the
    /// biased batch statistics.
    pub fn batch_norm_train(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
    ) -> Result<(Var, BatchStats<T>)> {
        let x = self.value(input);
        let [n, c, h, w] = x.dims4("batch_norm")?;
        per_channel_len("batch_norm", self.value(gamma), c)?;
        per_channel_len("batch_norm", self.value(beta), c)?;
        let plane = h * w;
        let m = n * plane;
        if m == 0 {
            return Err(Error::dim("batch_norm over an empty batch/spatial extent"));
        }
        let mf = T::from_usize(m).unwrap();
        let eps = T::from_f64_lossy(BN_EPS);
        let xd = x.data();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        let mut inv_std = vec![T::zero(); c];
        for ch in 0..c {
            let mut s = T::zero();
            for i in 0..n {
                let base = (i * c + ch) * plane;
                for &v in &xd[base..base + plane] {
                    s = s + v;
                }
            }
            let mu = s / mf;
            let mut sq = T::zero();
            for i in 0..n {
                let base = (i * c + ch) * plane;
                for &v in &xd[base..base + plane] {
                    sq = sq + (v - mu) * (v - mu);
                }
            }
            mean[ch] = mu;
            var[ch] = sq / mf;
            inv_std[ch] = T::one() / (var[ch] + eps).sqrt();
        }
        let mut xhat = vec![T::zero(); xd.len()];
        let mut out = vec![T::zero(); xd.len()];
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * plane;
                for j in base..base + plane {
                    let xh = (xd[j] - mean[ch]) * inv_std[ch];
                    xhat[j] = xh;
                    out[j] = g[ch] * xh + b[ch];
                }
            }
        }
        let out = Tensor::new(x.shape(), out)?;
        let var_out = self.push(
            "batch_norm",
            out,
            Op::BatchNormTrain {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[input, gamma, beta],
        )?;
        Ok((var_out, BatchStats { mean, var }))
    }

    /// Inference-mode batch norm using fixed statistics.
    pub fn batch_norm_eval(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[T],
        running_var: &[T],
    ) -> Result<Var> {
        let x = self.value(input);
        let [n, c, h, w] = x.dims4("batch_norm")?;
        per_channel_len("batch_norm", self.value(gamma), c)?;
        per_channel_len("batch_norm", self.value(beta), c)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::dim("batch_norm running statistics length"));
        }
        if n * h * w == 0 {
            return Err(Error::dim("batch_norm over an empty batch/spatial extent"));
        }
        let eps = T::from_f64_lossy(BN_EPS);
        let inv_std: Vec<T> = running_var
            .iter()
            .map(|&v| T::one() / (v + eps).sqrt())
            .collect();
        let plane = h * w;
        let xd = x.data();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![T::zero(); xd.len()];
        let mut out = vec![T::zero(); xd.len()];
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * plane;
                for j in base..base + plane {
                    let xh = (xd[j] - running_mean[ch]) * inv_std[ch];
                    xhat[j] = xh;
                    out[j] = g[ch] * xh + b[ch];
                }
            }
        }
        let out = Tensor::new(x.shape(), out)?;
        self.push(
            "batch_norm",
            out,
            Op::BatchNormEval {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[input, gamma, beta],
        )
    }

    /// `y[n,c,h,w] = scale[c] * x[n,c,h,w] + shift[c]`.
    pub fn channel_affine(&mut self, input: Var, scale: Var, shift: Var) -> Result<Var> {
        let x = self.value(input);
        let [n, c, h, w] = x.dims4("channel_affine")?;
        per_channel_len("channel_affine", self.value(scale), c)?;
        per_channel_len("channel_affine", self.value(shift), c)?;
        let plane = h * w;
        let (s, b) = (self.value(scale).data(), self.value(shift).data());
        let mut out = x.data().to_vec();
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * plane;
                for v in &mut out[base..base + plane] {
                    *v = s[ch] * *v + b[ch];
                }
            }
        }
        let out = Tensor::new(x.shape(), out)?;
        self.push(
            "channel_affine",
            out,
            Op::ChannelAffine {
                input,
                scale,
                shift,
            },
            &[input, scale, shift],
        )
    }

    /// `[N, D] x [D, K] + [K]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (x, wt, b) = (self.value(input), self.value(weight), self.value(bias));
        let (&[n, d], &[d2, k]) = (x.shape(), wt.shape()) else {
            return Err(Error::dim(format!(
                "linear expects [N,D] and [D,K], got {:?} and {:?}",
                x.shape(),
                wt.shape()
            )));
        };
        if d != d2 || b.shape() != [k] {
            return Err(Error::dim(format!(
                "linear: input {:?}, weight {:?}, bias {:?}",
                x.shape(),
                wt.shape(),
                b.shape()
            )));
        }
        let mut out = Vec::with_capacity(n * k);
        for _ in 0..n {
            out.extend_from_slice(b.data());
        }
        T::gemm(
            n,
            d,
            k,
            T::one(),
            x.data(),
            d,
            1,
            wt.data(),
            k,
            1,
            T::one(),
            &mut out,
            k,
            1,
        );
        let out = Tensor::new(&[n, k], out)?;
        self.push(
            "linear",
            out,
            Op::Linear {
                input,
                weight,
                bias,
            },
            &[input, weight, bias],
        )
    }

    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let [n, c, h, w] = x.dims4("global_avg_pool")?;
        let plane = h * w;
        if plane == 0 {
            return Err(Error::dim("global_avg_pool over empty spatial extent"));
        }
        let pf = T::from_usize(plane).unwrap();
        let out: Vec<T> = x
            .data()
            .chunks(plane)
            .map(|ch| ch.iter().fold(T::zero(), |a, &v| a + v) / pf)
            .collect();
        let out = Tensor::new(&[n, c], out)?;
        self.push("global_avg_pool", out, Op::GlobalAvgPool(input), &[input])
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let s = self
            .value(input)
            .data()
            .iter()
            .fold(T::zero(), |a, &v| a + v);
        self.push("sum", Tensor::scalar(s), Op::Sum(input), &[input])
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let z = self.value(logits);
        let &[n, k] = z.shape() else {
            return Err(Error::dim(format!(
                "softmax_cross_entropy expects [N,K] logits, got {:?}",
                z.shape()
            )));
        };
        if labels.len() != n {
            return Err(Error::dim(format!(
                "{} labels for a batch of {n}",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Input(format!("label {bad} outside [0, {k})")));
        }
        let mut probs = vec![T::zero(); n * k];
        let mut total = T::zero();
        for (i, &label) in labels.iter().enumerate() {
            let row = &z.data()[i * k..(i + 1) * k];
            let max = row.iter().fold(T::neg_infinity(), |a, &v| a.max(v));
            let mut denom = T::zero();
            for (j, &v) in row.iter().enumerate() {
                let e = (v - max).exp();
                probs[i * k + j] = e;
                denom = denom + e;
            }
            for p in &mut probs[i * k..(i + 1) * k] {
                *p = *p / denom;
            }
            total = total + (denom.ln() + max - row[label]);
        }
        let loss = total / T::from_usize(n).unwrap();
        self.push(
            "softmax_cross_entropy",
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                labels: labels.to_vec(),
            },
            &[logits],
        )
    }

    pub fn channel_slice(&mut self, input: Var, start: usize, len: usize) -> Result<Var> {
        let out = self.value(input).channel_slice(start, len)?;
        self.push(
            "channel_slice",
            out,
            Op::ChannelSlice { input, start },
            &[input],
        )
    }

    pub fn concat_channels(&mut self, inputs: &[Var]) -> Result<Var> {
        let parts: Vec<&Tensor<T>> = inputs.iter().map(|&v| self.value(v)).collect();
        let out = Tensor::concat_channels(&parts)?;
        self.push(
            "concat_channels",
            out,
            Op::ConcatChannels(inputs.to_vec()),
            inputs,
        )
    }

    /// Reverse sweep from a scalar `loss`; replaces any previously computed gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 || self.value(loss).rank() > 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(upstream) = grads[idx].take() else {
                continue;
            };
            for (target, g) in self.local_grads(idx, &upstream)? {
                if !self.nodes[target.0].requires_grad {
                    continue;
                }
                match &mut grads[target.0] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
            grads[idx] = Some(upstream);
        }
        self.grads = grads;
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn local_grads(&self, idx: usize, dy: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let node = &self.nodes[idx];
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernel,
                stride,
                pad,
            } => {
                let (dx, dk) = conv2d_backward(
                    self.value(*input),
                    self.value(*kernel),
                    dy,
                    *stride,
                    *pad,
                    self.wants(*input),
                    self.wants(*kernel),
                )?;
                out.extend(dx.map(|g| (*input, g)));
                out.extend(dk.map(|g| (*kernel, g)));
            }
            Op::Add(a, b) => {
                out.push((*a, dy.clone()));
                out.push((*b, dy.clone()));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let da: Vec<T> = dy.data().iter().zip(vb.data()).map(|(&g, &v)| g * v).collect();
                let db: Vec<T> = dy.data().iter().zip(va.data()).map(|(&g, &v)| g * v).collect();
                out.push((*a, Tensor::new(va.shape(), da)?));
                out.push((*b, Tensor::new(vb.shape(), db)?));
            }
            Op::Scale(a, f) => out.push((*a, dy.map(|g| g * *f))),
            Op::AverageN(inputs) => {
                let k = T::from_usize(inputs.len()).unwrap();
                let g = dy.map(|v| v / k);
                for &v in inputs {
                    out.push((v, g.clone()));
                }
            }
            Op::Relu(a) => {
                let x = self.value(*a);
                let d: Vec<T> = dy
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
                    .collect();
                out.push((*a, Tensor::new(x.shape(), d)?));
            }
            Op::BatchNormTrain {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let [n, c, h, w] = dy.dims4("batch_norm")?;
                let plane = h * w;
                let m = T::from_usize(n * plane).unwrap();
                let g = self.value(*gamma).data();
                let d = dy.data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for i in 0..n {
                    for ch in 0..c {
                        let base = (i * c + ch) * plane;
                        for j in base..base + plane {
                            dgamma[ch] = dgamma[ch] + d[j] * xhat[j];
                            dbeta[ch] = dbeta[ch] + d[j];
                        }
                    }
                }
                if self.wants(*input) {
                    // dx = inv_std/m * (m*dxhat - sum(dxhat) - xhat*sum(dxhat*xhat)),
                    // with dxhat = dy*gamma, so the sums are gamma*dbeta and gamma*dgamma.
                    let mut dx = vec![T::zero(); d.len()];
                    for i in 0..n {
                        for ch in 0..c {
                            let base = (i * c + ch) * plane;
                            let k = g[ch] * inv_std[ch] / m;
                            for j in base..base + plane {
                                dx[j] = k * (m * d[j] - dbeta[ch] - xhat[j] * dgamma[ch]);
                            }
                        }
                    }
                    out.push((*input, Tensor::new(dy.shape(), dx)?));
                }
                out.push((*gamma, Tensor::new(&[c], dgamma)?));
                out.push((*beta, Tensor::new(&[c], dbeta)?));
            }
            Op::BatchNormEval {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let [n, c, h, w] = dy.dims4("batch_norm")?;
                let plane = h * w;
                let g = self.value(*gamma).data();
                let d = dy.data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                let mut dx = vec![T::zero(); d.len()];
                for i in 0..n {
                    for ch in 0..c {
                        let base = (i * c + ch) * plane;
                        let k = g[ch] * inv_std[ch];
                        for j in base..base + plane {
                            dgamma[ch] = dgamma[ch] + d[j] * xhat[j];
                            dbeta[ch] = dbeta[ch] + d[j];
                            dx[j] = d[j] * k;
                        }
                    }
                }
                out.push((*input, Tensor::new(dy.shape(), dx)?));
                out.push((*gamma, Tensor::new(&[c], dgamma)?));
                out.push((*beta, Tensor::new(&[c], dbeta)?));
            }
            Op::ChannelAffine {
                input,
                scale,
                shift,
            } => {
                let [n, c, h, w] = dy.dims4("channel_affine")?;
                let plane = h * w;
                let x = self.value(*input).data();
                let s = self.value(*scale).data();
                let d = dy.data();
                let mut dscale = vec![T::zero(); c];
                let mut dshift = vec![T::zero(); c];
                let mut dx = vec![T::zero(); d.len()];
                for i in 0..n {
                    for ch in 0..c {
                        let base = (i * c + ch) * plane;
                        for j in base..base + plane {
                            dscale[ch] = dscale[ch] + d[j] * x[j];
                            dshift[ch] = dshift[ch] + d[j];
                            dx[j] = d[j] * s[ch];
                        }
                    }
                }
                out.push((*input, Tensor::new(dy.shape(), dx)?));
                out.push((*scale, Tensor::new(&[c], dscale)?));
                out.push((*shift, Tensor::new(&[c], dshift)?));
            }
            Op::Linear {
                input,
                weight,
                bias,
            } => {
                let (x, wt) = (self.value(*input), self.value(*weight));
                let (n, d) = (x.shape()[0], x.shape()[1]);
                let k = wt.shape()[1];
                if self.wants(*input) {
                    let mut dx = vec![T::zero(); n * d];
                    // dX[N, D] = dY[N, K] * W^T
                    T::gemm(
                        n,
                        k,
                        d,
                        T::one(),
                        dy.data(),
                        k,
                        1,
                        wt.data(),
                        1,
                        k,
                        T::zero(),
                        &mut dx,
                        d,
                        1,
                    );
                    out.push((*input, Tensor::new(&[n, d], dx)?));
                }
                let mut dw = vec![T::zero(); d * k];
                // dW[D, K] = X^T * dY
                T::gemm(
                    d,
                    n,
                    k,
                    T::one(),
                    x.data(),
                    1,
                    d,
                    dy.data(),
                    k,
                    1,
                    T::zero(),
                    &mut dw,
                    k,
                    1,
                );
                out.push((*weight, Tensor::new(&[d, k], dw)?));
                let mut db = vec![T::zero(); k];
                for row in dy.data().chunks(k) {
                    for (acc, &g) in db.iter_mut().zip(row) {
                        *acc = *acc + g;
                    }
                }
                out.push((*bias, Tensor::new(&[k], db)?));
            }
            Op::GlobalAvgPool(a) => {
                let x = self.value(*a);
                let [_, _, h, w] = x.dims4("global_avg_pool")?;
                let plane = h * w;
                let pf = T::from_usize(plane).unwrap();
                let mut dx = Vec::with_capacity(x.numel());
                for &g in dy.data() {
                    let v = g / pf;
                    dx.extend(std::iter::repeat_n(v, plane));
                }
                out.push((*a, Tensor::new(x.shape(), dx)?));
            }
            Op::Sum(a) => {
                let g = dy.item();
                out.push((*a, Tensor::full(self.shape(*a), g)));
            }
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                labels,
            } => {
                let shape = self.shape(*logits).to_vec();
                let (n, k) = (shape[0], shape[1]);
                let scale = dy.item() / T::from_usize(n).unwrap();
                let mut dz = probs.clone();
                for (i, &l) in labels.iter().enumerate() {
                    dz[i * k + l] = dz[i * k + l] - T::one();
                }
                for v in &mut dz {
                    *v = *v * scale;
                }
                out.push((*logits, Tensor::new(&shape, dz)?));
            }
            Op::ChannelSlice { input, start } => {
                let x = self.value(*input);
                let [n, c, h, w] = x.dims4("channel_slice")?;
                let len = dy.shape()[1];
                let plane = h * w;
                let mut dx = vec![T::zero(); x.numel()];
                for i in 0..n {
                    let dst = (i * c + start) * plane;
                    let src = i * len * plane;
                    dx[dst..dst + len * plane].copy_from_slice(&dy.data()[src..src + len * plane]);
                }
                out.push((*input, Tensor::new(x.shape(), dx)?));
            }
            Op::ConcatChannels(inputs) => {
                let mut start = 0;
                for &v in inputs {
                    let c = self.shape(v)[1];
                    out.push((v, dy.channel_slice(start, c)?));
                    start += c;
                }
            }
        }
        Ok(out)
    }
}
