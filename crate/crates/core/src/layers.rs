//! Parameterised layers and the forward-pass session that binds them to a graph.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;

use crate::error::Result;
use crate::graph::{BatchStats, Graph, Var, BN_EPS};
use crate::tensor::{Scalar, Tensor};
use crate::train::init::he_normal;

/// Running-statistics momentum: `running = m * running + (1 - m) * batch`.
pub const BN_MOMENTUM: f64 = 0.9;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(u64);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct StatsId(u64);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// A trainable tensor. `decay` marks tensors that receive weight decay.
#[derive(Clone, Debug)]
pub struct Param<T> {
    id: ParamId,
    pub name: String,
    pub value: Tensor<T>,
    pub decay: bool,
}

impl<T: Scalar> Param<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>, decay: bool) -> Self {
        Self {
            id: ParamId(fresh_id()),
            name: name.into(),
            value,
            decay,
        }
    }

    pub fn id(&self) -> ParamId {
        self.id
    }
}

/// Something that owns parameters and batch-norm layers, in a fixed visiting order.
pub trait Module<T: Scalar> {
    fn params(&self) -> Vec<&Param<T>>;
    fn params_mut(&mut self) -> Vec<&mut Param<T>>;
    fn norms(&self) -> Vec<&BatchNorm<T>>;
    fn norms_mut(&mut self) -> Vec<&mut BatchNorm<T>>;

    fn num_parameters(&self) -> usize {
        self.params().iter().map(|p| p.value.numel()).sum()
    }

    /// Folds batch statistics recorded during a training forward pass into running averages.
    fn apply_stats(&mut self, updates: &[(StatsId, BatchStats<T>)]) {
        if updates.is_empty() {
            return;
        }
        let mut norms: HashMap<StatsId, &mut BatchNorm<T>> =
            self.norms_mut().into_iter().map(|n| (n.stats_id, n)).collect();
        for (id, stats) in updates {
            if let Some(bn) = norms.get_mut(id) {
                bn.update_running(stats);
            }
        }
    }
}

/// Forward-pass context: a fresh graph plus parameter bindings and collected BN statistics.
pub struct Session<T> {
    pub graph: Graph<T>,
    pub mode: Mode,
    bound: HashMap<ParamId, Var>,
    stats: Vec<(StatsId, BatchStats<T>)>,
    track_params: bool,
}

impl<T: Scalar> Session<T> {
    pub fn new(mode: Mode) -> Self {
        Self {
            graph: Graph::new(),
            mode,
            bound: HashMap::new(),
            stats: Vec::new(),
            track_params: true,
        }
    }

    /// A session whose parameters are constants (no parameter gradients).
    pub fn frozen(mode: Mode) -> Self {
        Self {
            track_params: false,
            ..Self::new(mode)
        }
    }

    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.graph.leaf(value, false)
    }

    pub fn input_with_grad(&mut self, value: Tensor<T>) -> Var {
        self.graph.leaf(value, true)
    }

    /// Leaf for a parameter, created on first use.
    pub fn param(&mut self, p: &Param<T>) -> Var {
        if let Some(&v) = self.bound.get(&p.id) {
            return v;
        }
        let v = self.graph.leaf(p.value.clone(), self.track_params);
        self.bound.insert(p.id, v);
        v
    }

    /// Binds a parameter to an existing node, so its value comes from `var` instead.
    pub fn bind(&mut self, p: &Param<T>, var: Var) {
        self.bound.insert(p.id, var);
    }

    pub fn param_var(&self, p: &Param<T>) -> Option<Var> {
        self.bound.get(&p.id).copied()
    }

    pub fn param_grad(&self, p: &Param<T>) -> Option<&Tensor<T>> {
        self.param_var(p).and_then(|v| self.graph.grad(v))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        self.graph.value(v)
    }

    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.graph.backward(loss)
    }

    pub fn take_stats(&mut self) -> Vec<(StatsId, BatchStats<T>)> {
        std::mem::take(&mut self.stats)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm<T> {
    stats_id: StatsId,
    pub name: String,
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
}

impl<T: Scalar> BatchNorm<T> {
    pub fn new(name: &str, channels: usize) -> Self {
        Self::from_parts(
            name,
            vec![T::one(); channels],
            vec![T::zero(); channels],
            vec![T::zero(); channels],
            vec![T::one(); channels],
        )
    }

    pub fn from_parts(
        name: &str,
        gamma: Vec<T>,
        beta: Vec<T>,
        running_mean: Vec<T>,
        running_var: Vec<T>,
    ) -> Self {
        let c = gamma.len();
        Self {
            stats_id: StatsId(fresh_id()),
            name: name.to_string(),
            gamma: Param::new(format!("{name}.gamma"), Tensor::new(&[c], gamma).unwrap(), false),
            beta: Param::new(format!("{name}.beta"), Tensor::new(&[c], beta).unwrap(), false),
            running_mean,
            running_var,
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }

    pub fn forward(&self, s: &mut Session<T>, x: Var) -> Result<Var> {
        let gamma = s.param(&self.gamma);
        let beta = s.param(&self.beta);
        match s.mode {
            Mode::Train => {
                let (y, stats) = s.graph.batch_norm_train(x, gamma, beta)?;
                s.stats.push((self.stats_id, stats));
                Ok(y)
            }
            Mode::Eval => {
                s.graph
                    .batch_norm_eval(x, gamma, beta, &self.running_mean, &self.running_var)
            }
        }
    }

    fn update_running(&mut self, stats: &BatchStats<T>) {
        let m = T::from_f64_lossy(BN_MOMENTUM);
        let one_m = T::one() - m;
        for (r, &b) in self.running_mean.iter_mut().zip(&stats.mean) {
            *r = m * *r + one_m * b;
        }
        for (r, &b) in self.running_var.iter_mut().zip(&stats.var) {
            *r = m * *r + one_m * b;
        }
    }

    /// Eval-mode behaviour as a per-channel `(scale, shift)`.
    pub fn eval_affine(&self) -> (Vec<T>, Vec<T>) {
        let eps = T::from_f64_lossy(BN_EPS);
        let g = self.gamma.value.data();
        let b = self.beta.value.data();
        let mut scale = Vec::with_capacity(g.len());
        let mut shift = Vec::with_capacity(g.len());
        for c in 0..g.len() {
            let s = g[c] / (self.running_var[c] + eps).sqrt();
            scale.push(s);
            shift.push(b[c] - self.running_mean[c] * s);
        }
        (scale, shift)
    }
}

/// Normalisation following a convolution.
#[derive(Clone, Debug)]
pub enum Norm<T> {
    Batch(BatchNorm<T>),
    /// Learned per-channel affine map with no batch statistics.
    Affine { scale: Param<T>, shift: Param<T> },
    Identity,
}

impl<T: Scalar> Norm<T> {
    pub fn affine(name: &str, scale: Vec<T>, shift: Vec<T>) -> Self {
        let c = scale.len();
        Norm::Affine {
            scale: Param::new(format!("{name}.scale"), Tensor::new(&[c], scale).unwrap(), false),
            shift: Param::new(format!("{name}.shift"), Tensor::new(&[c], shift).unwrap(), false),
        }
    }

    pub fn forward(&self, s: &mut Session<T>, x: Var) -> Result<Var> {
        match self {
            Norm::Batch(bn) => bn.forward(s, x),
            Norm::Affine { scale, shift } => {
                let (sc, sh) = (s.param(scale), s.param(shift));
                s.graph.channel_affine(x, sc, sh)
            }
            Norm::Identity => Ok(x),
        }
    }

    /// Eval-mode per-channel `(scale, shift)`.
    pub fn eval_affine(&self, channels: usize) -> (Vec<T>, Vec<T>) {
        match self {
            Norm::Batch(bn) => bn.eval_affine(),
            Norm::Affine { scale, shift } => {
                (scale.value.data().to_vec(), shift.value.data().to_vec())
            }
            Norm::Identity => (vec![T::one(); channels], vec![T::zero(); channels]),
        }
    }

    pub fn is_identity(&self) -> bool {
        matches!(self, Norm::Identity)
    }

    fn params(&self) -> Vec<&Param<T>> {
        match self {
            Norm::Batch(bn) => vec![&bn.gamma, &bn.beta],
            Norm::Affine { scale, shift } => vec![scale, shift],
            Norm::Identity => vec![],
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        match self {
            Norm::Batch(bn) => vec![&mut bn.gamma, &mut bn.beta],
            Norm::Affine { scale, shift } => vec![scale, shift],
            Norm::Identity => vec![],
        }
    }
}

/// Conv -> norm (-> ReLU).
#[derive(Clone, Debug)]
pub struct ConvLayer<T> {
    pub kernel: Param<T>,
    pub stride: usize,
    pub pad: usize,
    pub norm: Norm<T>,
    pub relu: bool,
}

impl<T: Scalar> ConvLayer<T> {
    /// He-initialised `k x k` convolution with "same" padding, followed by batch norm.
    pub fn conv_bn<R: Rng>(
        name: &str,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        relu: bool,
        rng: &mut R,
    ) -> Self {
        let kernel = he_normal(&[out_ch, in_ch, k, k], rng);
        Self {
            kernel: Param::new(format!("{name}.weight"), kernel, true),
            stride,
            pad: k / 2,
            norm: Norm::Batch(BatchNorm::new(&format!("{name}.bn"), out_ch)),
            relu,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.kernel.value.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.kernel.value.shape()[0]
    }

    pub fn kernel_size(&self) -> usize {
        self.kernel.value.shape()[2]
    }

    pub fn forward(&self, s: &mut Session<T>, x: Var) -> Result<Var> {
        let k = s.param(&self.kernel);
        let y = s.graph.conv2d(x, k, self.stride, self.pad)?;
        let y = self.norm.forward(s, y)?;
        if self.relu {
            s.graph.relu(y)
        } else {
            Ok(y)
        }
    }

    /// True when the layer is a pure convolution.
    pub fn is_linear(&self) -> bool {
        !self.relu && self.norm.is_identity()
    }
}

impl<T: Scalar> Module<T> for ConvLayer<T> {
    fn params(&self) -> Vec<&Param<T>> {
        let mut v = vec![&self.kernel];
        v.extend(self.norm.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v = vec![&mut self.kernel];
        v.extend(self.norm.params_mut());
        v
    }

    fn norms(&self) -> Vec<&BatchNorm<T>> {
        match &self.norm {
            Norm::Batch(bn) => vec![bn],
            _ => vec![],
        }
    }

    fn norms_mut(&mut self) -> Vec<&mut BatchNorm<T>> {
        match &mut self.norm {
            Norm::Batch(bn) => vec![bn],
            _ => vec![],
        }
    }
}

/// Fully connected classifier layer, weight `[D, K]`.
#[derive(Clone, Debug)]
pub struct Linear<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn new<R: Rng>(name: &str, in_features: usize, out_features: usize, rng: &mut R) -> Self {
        Self {
            weight: Param::new(
                format!("{name}.weight"),
                he_normal(&[in_features, out_features], rng),
                true,
            ),
            bias: Param::new(format!("{name}.bias"), Tensor::zeros(&[out_features]), false),
        }
    }

    pub fn forward(&self, s: &mut Session<T>, x: Var) -> Result<Var> {
        let (w, b) = (s.param(&self.weight), s.param(&self.bias));
        s.graph.linear(x, w, b)
    }
}

impl<T: Scalar> Module<T> for Linear<T> {
    fn params(&self) -> Vec<&Param<T>> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.weight, &mut self.bias]
    }

    fn norms(&self) -> Vec<&BatchNorm<T>> {
        vec![]
    }

    fn norms_mut(&mut self) -> Vec<&mut BatchNorm<T>> {
        vec![]
    }
}
