//! Residual, inception-like, merge-and-run and identity-parallel blocks.
//!
//! Every branch layer is Conv -> BN -> ReLU except the last, which stops after BN. The
//! skip (identity, projection or merge average) is added after that final BN and the
//! block's ReLU, when enabled, follows the addition on each line independently.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::Var;
use crate::layers::{BatchNorm, ConvLayer, Mode, Module, Norm, Param, Session};
use crate::tensor::{Scalar, Tensor};
use crate::train::init::he_normal;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BlockKind {
    Residual,
    InceptionLike,
    MergeAndRun,
    IdentityParallel,
}

impl BlockKind {
    /// Number of parallel state lines carried between blocks.
    pub fn lines(self) -> usize {
        match self {
            BlockKind::Residual | BlockKind::InceptionLike => 1,
            BlockKind::MergeAndRun | BlockKind::IdentityParallel => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            BlockKind::Residual => "resnet",
            BlockKind::InceptionLike => "dilnet",
            BlockKind::MergeAndRun => "dmrnet",
            BlockKind::IdentityParallel => "identity-parallel",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "resnet" | "residual" => Some(BlockKind::Residual),
            "dilnet" | "inception" | "inception-like" => Some(BlockKind::InceptionLike),
            "dmrnet" | "merge-and-run" | "mergerun" => Some(BlockKind::MergeAndRun),
            "identity-parallel" | "idnet" => Some(BlockKind::IdentityParallel),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerSpec {
    pub kernel: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BranchSpec {
    pub layers: Vec<LayerSpec>,
}

impl BranchSpec {
    /// `depth` 3x3 layers, the first mapping `in_ch -> out_ch` with `stride`.
    pub fn uniform(in_ch: usize, out_ch: usize, depth: usize, stride: usize) -> Self {
        let layers = (0..depth)
            .map(|i| LayerSpec {
                kernel: 3,
                in_channels: if i == 0 { in_ch } else { out_ch },
                out_channels: out_ch,
                stride: if i == 0 { stride } else { 1 },
            })
            .collect();
        Self { layers }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Usage("a branch needs at least one layer".into()));
        }
        for pair in self.layers.windows(2) {
            if pair[0].out_channels != pair[1].in_channels {
                return Err(Error::dim(format!(
                    "branch layers chain {} -> {} channels",
                    pair[0].out_channels, pair[1].in_channels
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BranchStyle {
    /// Conv-BN-ReLU layers, final layer Conv-BN.
    Standard,
    /// Bare convolutions; the branch is a linear map.
    Linear,
}

/// A residual branch `H`: an ordered stack of conv layers.
#[derive(Clone, Debug)]
pub struct Branch<T> {
    pub layers: Vec<ConvLayer<T>>,
}

impl<T: Scalar> Branch<T> {
    pub fn new<R: Rng>(name: &str, spec: &BranchSpec, style: BranchStyle, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let last = spec.layers.len() - 1;
        let layers = spec
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| {
                let lname = format!("{name}.conv{i}");
                match style {
                    BranchStyle::Standard => ConvLayer::conv_bn(
                        &lname,
                        l.in_channels,
                        l.out_channels,
                        l.kernel,
                        l.stride,
                        i != last,
                        rng,
                    ),
                    BranchStyle::Linear => ConvLayer {
                        kernel: Param::new(
                            format!("{lname}.weight"),
                            he_normal(&[l.out_channels, l.in_channels, l.kernel, l.kernel], rng),
                            true,
                        ),
                        stride: l.stride,
                        pad: l.kernel / 2,
                        norm: Norm::Identity,
                        relu: false,
                    },
                }
            })
            .collect();
        Ok(Self { layers })
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn in_channels(&self) -> usize {
        self.layers[0].in_channels()
    }

    pub fn out_channels(&self) -> usize {
        self.layers[self.layers.len() - 1].out_channels()
    }

    pub fn stride(&self) -> usize {
        self.layers.iter().map(|l| l.stride).product()
    }

    pub fn is_linear(&self) -> bool {
        self.layers.iter().all(ConvLayer::is_linear)
    }

    /// Sets every convolution kernel to zero, so the branch output is the final norm's shift.
    pub fn zero_kernels(&mut self) {
        for l in &mut self.layers {
            l.kernel.value.data_mut().fill(T::zero());
        }
    }

    pub fn forward(&self, s: &mut Session<T>, x: Var) -> Result<Var> {
        let mut h = x;
        for layer in &self.layers {
            h = layer.forward(s, h)?;
        }
        Ok(h)
    }
}

impl<T: Scalar> Module<T> for Branch<T> {
    fn params(&self) -> Vec<&Param<T>> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }
    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }
    fn norms(&self) -> Vec<&BatchNorm<T>> {
        self.layers.iter().flat_map(|l| l.norms()).collect()
    }
    fn norms_mut(&mut self) -> Vec<&mut BatchNorm<T>> {
        self.layers.iter_mut().flat_map(|l| l.norms_mut()).collect()
    }
}

fn skip<T: Scalar>(s: &mut Session<T>, x: Var, projection: Option<&ConvLayer<T>>) -> Result<Var> {
    match projection {
        Some(p) => p.forward(s, x),
        None => Ok(x),
    }
}

fn finish<T: Scalar>(s: &mut Session<T>, h: Var, skip: Var, relu: bool) -> Result<Var> {
    if s.graph.shape(h) != s.graph.shape(skip) {
        return Err(Error::dim(format!(
            "branch output {:?} does not match skip {:?}; a projection is required",
            s.graph.shape(h),
            s.graph.shape(skip)
        )));
    }
    let y = s.graph.add(h, skip)?;
    if relu {
        s.graph.relu(y)
    } else {
        Ok(y)
    }
}

/// `ReLU(H(x) + x)`, with `x` replaced by a projection when one is given.
pub fn residual_forward<T: Scalar>(
    s: &mut Session<T>,
    x: Var,
    branch: &Branch<T>,
    projection: Option<&ConvLayer<T>>,
    relu: bool,
) -> Result<Var> {
    let h = branch.forward(s, x)?;
    let sk = skip(s, x, projection)?;
    finish(s, h, sk, relu)
}

/// `ReLU(H0(x) + H1(x) + x)`.
pub fn inception_like_forward<T: Scalar>(
    s: &mut Session<T>,
    x: Var,
    b0: &Branch<T>,
    b1: &Branch<T>,
    projection: Option<&ConvLayer<T>>,
    relu: bool,
) -> Result<Var> {
    let h0 = b0.forward(s, x)?;
    let h1 = b1.forward(s, x)?;
    if s.graph.shape(h0) != s.graph.shape(h1) {
        return Err(Error::dim("inception-like branches disagree on output shape"));
    }
    let h = s.graph.add(h0, h1)?;
    let sk = skip(s, x, projection)?;
    finish(s, h, sk, relu)
}

fn check_lines<T: Scalar>(s: &Session<T>, xs: &[Var], branches: usize, what: &str) -> Result<()> {
    if xs.len() < 2 {
        return Err(Error::Usage(format!("{what} needs K >= 2 lines, got {}", xs.len())));
    }
    if branches != xs.len() {
        return Err(Error::Usage(format!(
            "{what}: {} lines but {branches} branches",
            xs.len()
        )));
    }
    let first = s.graph.shape(xs[0]);
    if let Some(bad) = xs.iter().find(|&&v| s.graph.shape(v) != first) {
        return Err(Error::dim(format!(
            "{what}: line shapes {:?} and {:?} differ",
            first,
            s.graph.shape(*bad)
        )));
    }
    Ok(())
}

fn line_skips<T: Scalar>(
    s: &mut Session<T>,
    xs: &[Var],
    projections: Option<&[ConvLayer<T>]>,
) -> Result<Vec<Var>> {
    match projections {
        Some(ps) => {
            if ps.len() != xs.len() {
                return Err(Error::Usage("one projection per line is required".into()));
            }
            xs.iter().zip(ps).map(|(&x, p)| p.forward(s, x)).collect()
        }
        None => Ok(xs.to_vec()),
    }
}

/// Merge-and-run over K lines: `y_i = ReLU(H_i(x_i) + mean_j(x_j))`.
///
/// With projections, each line is projected before merging.
pub fn k_branch_forward<T: Scalar>(
    s: &mut Session<T>,
    xs: &[Var],
    branches: &[&Branch<T>],
    projections: Option<&[ConvLayer<T>]>,
    relu: bool,
) -> Result<Vec<Var>> {
    check_lines(s, xs, branches.len(), "merge-and-run")?;
    let skips = line_skips(s, xs, projections)?;
    let avg = s.graph.average_n(&skips)?;
    xs.iter()
        .zip(branches)
        .map(|(&x, b)| {
            let h = b.forward(s, x)?;
            finish(s, h, avg, relu)
        })
        .collect()
}

/// Two-line merge-and-run block.
pub fn merge_and_run_forward<T: Scalar>(
    s: &mut Session<T>,
    x0: Var,
    x1: Var,
    b0: &Branch<T>,
    b1: &Branch<T>,
    relu: bool,
) -> Result<(Var, Var)> {
    let ys = k_branch_forward(s, &[x0, x1], &[b0, b1], None, relu)?;
    Ok((ys[0], ys[1]))
}

/// K independent residual lines: `y_i = ReLU(H_i(x_i) + x_i)`; the skip matrix is the identity.
pub fn identity_parallel_forward<T: Scalar>(
    s: &mut Session<T>,
    xs: &[Var],
    branches: &[&Branch<T>],
    projections: Option<&[ConvLayer<T>]>,
    relu: bool,
) -> Result<Vec<Var>> {
    check_lines(s, xs, branches.len(), "identity-parallel")?;
    let skips = line_skips(s, xs, projections)?;
    xs.iter()
        .zip(branches)
        .zip(skips)
        .map(|((&x, b), sk)| {
            let h = b.forward(s, x)?;
            finish(s, h, sk, relu)
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct ResidualBlock<T> {
    pub branch: Branch<T>,
    pub projection: Option<ConvLayer<T>>,
    pub relu: bool,
}

#[derive(Clone, Debug)]
pub struct InceptionBlock<T> {
    pub branches: [Branch<T>; 2],
    pub projection: Option<ConvLayer<T>>,
    pub relu: bool,
}

/// K-line block; used for both merge-and-run and identity-parallel skips.
#[derive(Clone, Debug)]
pub struct ParallelBlock<T> {
    pub branches: Vec<Branch<T>>,
    pub projections: Option<Vec<ConvLayer<T>>>,
    pub relu: bool,
}

impl<T: Scalar> ParallelBlock<T> {
    pub fn new(branches: Vec<Branch<T>>) -> Self {
        Self {
            branches,
            projections: None,
            relu: true,
        }
    }

    pub fn lines(&self) -> usize {
        self.branches.len()
    }

    pub fn merge_forward(&self, s: &mut Session<T>, xs: &[Var]) -> Result<Vec<Var>> {
        let branches: Vec<&Branch<T>> = self.branches.iter().collect();
        k_branch_forward(s, xs, &branches, self.projections.as_deref(), self.relu)
    }

    pub fn identity_forward(&self, s: &mut Session<T>, xs: &[Var]) -> Result<Vec<Var>> {
        let branches: Vec<&Branch<T>> = self.branches.iter().collect();
        identity_parallel_forward(s, xs, &branches, self.projections.as_deref(), self.relu)
    }
}

#[derive(Clone, Debug)]
pub enum Block<T> {
    Residual(ResidualBlock<T>),
    InceptionLike(InceptionBlock<T>),
    MergeAndRun(ParallelBlock<T>),
    IdentityParallel(ParallelBlock<T>),
}

impl<T: Scalar> Block<T> {
    pub fn kind(&self) -> BlockKind {
        match self {
            Block::Residual(_) => BlockKind::Residual,
            Block::InceptionLike(_) => BlockKind::InceptionLike,
            Block::MergeAndRun(_) => BlockKind::MergeAndRun,
            Block::IdentityParallel(_) => BlockKind::IdentityParallel,
        }
    }

    pub fn branches(&self) -> Vec<&Branch<T>> {
        match self {
            Block::Residual(b) => vec![&b.branch],
            Block::InceptionLike(b) => b.branches.iter().collect(),
            Block::MergeAndRun(b) | Block::IdentityParallel(b) => b.branches.iter().collect(),
        }
    }

    pub fn projections(&self) -> Vec<&ConvLayer<T>> {
        match self {
            Block::Residual(b) => b.projection.iter().collect(),
            Block::InceptionLike(b) => b.projection.iter().collect(),
            Block::MergeAndRun(b) | Block::IdentityParallel(b) => {
                b.projections.iter().flatten().collect()
            }
        }
    }

    pub fn forward(&self, s: &mut Session<T>, lines: &[Var]) -> Result<Vec<Var>> {
        let single = |lines: &[Var]| -> Result<Var> {
            match lines {
                [x] => Ok(*x),
                _ => Err(Error::Usage(format!(
                    "single-line block fed {} lines",
                    lines.len()
                ))),
            }
        };
        match self {
            Block::Residual(b) => {
                let x = single(lines)?;
                Ok(vec![residual_forward(s, x, &b.branch, b.projection.as_ref(), b.relu)?])
            }
            Block::InceptionLike(b) => {
                let x = single(lines)?;
                Ok(vec![inception_like_forward(
                    s,
                    x,
                    &b.branches[0],
                    &b.branches[1],
                    b.projection.as_ref(),
                    b.relu,
                )?])
            }
            Block::MergeAndRun(b) => b.merge_forward(s, lines),
            Block::IdentityParallel(b) => b.identity_forward(s, lines),
        }
    }
}

macro_rules! module_via_parts {
    ($ty:ident, |$b:ident| $parts:expr, |$m:ident| $parts_mut:expr) => {
        impl<T: Scalar> Module<T> for $ty<T> {
            fn params(&self) -> Vec<&Param<T>> {
                let $b = self;
                let parts: Vec<&dyn Module<T>> = $parts;
                parts.into_iter().flat_map(|p| p.params()).collect()
            }
            fn params_mut(&mut self) -> Vec<&mut Param<T>> {
                let $m = self;
                let parts: Vec<&mut dyn Module<T>> = $parts_mut;
                parts.into_iter().flat_map(|p| p.params_mut()).collect()
            }
            fn norms(&self) -> Vec<&BatchNorm<T>> {
                let $b = self;
                let parts: Vec<&dyn Module<T>> = $parts;
                parts.into_iter().flat_map(|p| p.norms()).collect()
            }
            fn norms_mut(&mut self) -> Vec<&mut BatchNorm<T>> {
                let $m = self;
                let parts: Vec<&mut dyn Module<T>> = $parts_mut;
                parts.into_iter().flat_map(|p| p.norms_mut()).collect()
            }
        }
    };
}

module_via_parts!(
    ResidualBlock,
    |b| {
        let mut v: Vec<&dyn Module<T>> = vec![&b.branch];
        v.extend(b.projection.iter().map(|p| p as &dyn Module<T>));
        v
    },
    |b| {
        let mut v: Vec<&mut dyn Module<T>> = vec![&mut b.branch];
        v.extend(b.projection.iter_mut().map(|p| p as &mut dyn Module<T>));
        v
    }
);

module_via_parts!(
    InceptionBlock,
    |b| {
        let mut v: Vec<&dyn Module<T>> = b.branches.iter().map(|x| x as &dyn Module<T>).collect();
        v.extend(b.projection.iter().map(|p| p as &dyn Module<T>));
        v
    },
    |b| {
        let mut v: Vec<&mut dyn Module<T>> =
            b.branches.iter_mut().map(|x| x as &mut dyn Module<T>).collect();
        v.extend(b.projection.iter_mut().map(|p| p as &mut dyn Module<T>));
        v
    }
);

module_via_parts!(
    ParallelBlock,
    |b| {
        let mut v: Vec<&dyn Module<T>> = b.branches.iter().map(|x| x as &dyn Module<T>).collect();
        v.extend(b.projections.iter().flatten().map(|p| p as &dyn Module<T>));
        v
    },
    |b| {
        let mut v: Vec<&mut dyn Module<T>> =
            b.branches.iter_mut().map(|x| x as &mut dyn Module<T>).collect();
        v.extend(
            b.projections
                .iter_mut()
                .flatten()
                .map(|p| p as &mut dyn Module<T>),
        );
        v
    }
);

impl<T: Scalar> Module<T> for Block<T> {
    fn params(&self) -> Vec<&Param<T>> {
        match self {
            Block::Residual(b) => b.params(),
            Block::InceptionLike(b) => b.params(),
            Block::MergeAndRun(b) | Block::IdentityParallel(b) => b.params(),
        }
    }
    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        match self {
            Block::Residual(b) => b.params_mut(),
            Block::InceptionLike(b) => b.params_mut(),
            Block::MergeAndRun(b) | Block::IdentityParallel(b) => b.params_mut(),
        }
    }
    fn norms(&self) -> Vec<&BatchNorm<T>> {
        match self {
            Block::Residual(b) => b.norms(),
            Block::InceptionLike(b) => b.norms(),
            Block::MergeAndRun(b) | Block::IdentityParallel(b) => b.norms(),
        }
    }
    fn norms_mut(&mut self) -> Vec<&mut BatchNorm<T>> {
        match self {
            Block::Residual(b) => b.norms_mut(),
            Block::InceptionLike(b) => b.norms_mut(),
            Block::MergeAndRun(b) | Block::IdentityParallel(b) => b.norms_mut(),
        }
    }
}

/// Row-major product of two `n x n` matrices.
pub fn square_matmul(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let mut c = vec![0.0; n * n];
    for i in 0..n {
        for k in 0..n {
            let aik = a[i * n + k];
            if aik == 0.0 {
                continue;
            }
            for j in 0..n {
                c[i * n + j] += aik * b[k * n + j];
            }
        }
    }
    c
}

/// `max |A^n - A|` for an `size x size` matrix, computing `A^n` by repeated multiplication.
pub fn power_deviation(a: &[f64], size: usize, n: u32) -> f64 {
    assert!(n >= 1, "matrix power needs n >= 1");
    assert_eq!(a.len(), size * size);
    let mut p = a.to_vec();
    for _ in 1..n {
        p = square_matmul(&p, a, size);
    }
    p.iter()
        .zip(a)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// The merge-and-run skip as a matrix: `K x K` blocks of `(1/K) I_d`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MergeMapping {
    k: usize,
    d: usize,
}

impl MergeMapping {
    pub fn new(k: usize, d: usize) -> Result<Self> {
        if k < 2 {
            return Err(Error::Usage(format!("merge mapping needs K >= 2, got {k}")));
        }
        if d == 0 {
            return Err(Error::Usage("merge mapping needs d >= 1".into()));
        }
        Ok(Self { k, d })
    }

    pub fn branches(&self) -> usize {
        self.k
    }

    pub fn line_dim(&self) -> usize {
        self.d
    }

    pub fn size(&self) -> usize {
        self.k * self.d
    }

    pub fn dense(&self) -> Vec<f64> {
        let n = self.size();
        let w = 1.0 / self.k as f64;
        let mut m = vec![0.0; n * n];
        for bi in 0..self.k {
            for bj in 0..self.k {
                for t in 0..self.d {
                    m[(bi * self.d + t) * n + bj * self.d + t] = w;
                }
            }
        }
        m
    }

    /// Dense matrix-vector product with a stacked `(K*d)` vector.
    pub fn apply(&self, stacked: &[f64]) -> Vec<f64> {
        let n = self.size();
        assert_eq!(stacked.len(), n);
        let m = self.dense();
        (0..n)
            .map(|i| (0..n).map(|j| m[i * n + j] * stacked[j]).sum())
            .collect()
    }

    /// `max |M^n - M|`; zero for `n = 1`.
    pub fn idempotence_check(&self, n: u32) -> f64 {
        power_deviation(&self.dense(), self.size(), n)
    }
}

/// Stacks per-line tensors into one flat vector, line after line.
fn stack(lines: &[&Tensor<f64>]) -> Vec<f64> {
    lines.iter().flat_map(|t| t.data().iter().copied()).collect()
}

fn require_linear_chain(blocks: &[ParallelBlock<f64>], inputs: &[Tensor<f64>]) -> Result<()> {
    if blocks.is_empty() {
        return Err(Error::Usage("need at least one block (t' < t)".into()));
    }
    let k = inputs.len();
    if k < 2 {
        return Err(Error::Usage("need K >= 2 input lines".into()));
    }
    for (i, b) in blocks.iter().enumerate() {
        if b.lines() != k {
            return Err(Error::Usage(format!("block {i} has {} lines, expected {k}", b.lines())));
        }
        if b.relu || b.projections.is_some() || !b.branches.iter().all(Branch::is_linear) {
            return Err(Error::Usage(format!(
                "block {i} is not linear: branches must be bare convolutions, no ReLU, no projections"
            )));
        }
    }
    Ok(())
}

/// Runs `blocks` (block t' up to block t-1) iteratively and compares the final lines with
/// the unrolled closed form
/// `H(x_{t-1}) + M * sum_{i=t'}^{t-2} H(x_i) + M * x_{t'}`, evaluated with the dense `M`.
/// Returns the largest absolute deviation.
pub fn unrolled_flow_check(inputs: &[Tensor<f64>], blocks: &[ParallelBlock<f64>]) -> Result<f64> {
    require_linear_chain(blocks, inputs)?;
    let k = inputs.len();
    let d = inputs[0].numel();
    let mapping = MergeMapping::new(k, d)?;

    let mut s = Session::frozen(Mode::Eval);
    let x0: Vec<Var> = inputs.iter().map(|t| s.input(t.clone())).collect();
    let mut lines = x0.clone();
    let mut branch_outputs: Vec<Vec<f64>> = Vec::with_capacity(blocks.len());
    for b in blocks {
        let hs = b
            .branches
            .iter()
            .zip(&lines)
            .map(|(br, &x)| br.forward(&mut s, x))
            .collect::<Result<Vec<_>>>()?;
        branch_outputs.push(stack(&hs.iter().map(|&h| s.value(h)).collect::<Vec<_>>()));
        lines = b.merge_forward(&mut s, &lines)?;
    }
    let iterative = stack(&lines.iter().map(|&v| s.value(v)).collect::<Vec<_>>());

    let (last, earlier) = branch_outputs.split_last().expect("non-empty");
    let mut acc = vec![0.0; k * d];
    for h in earlier {
        for (a, v) in acc.iter_mut().zip(h) {
            *a += v;
        }
    }
    let m_acc = mapping.apply(&acc);
    let m_x = mapping.apply(&stack(&inputs.iter().collect::<Vec<_>>()));
    let closed: Vec<f64> = (0..k * d).map(|i| last[i] + m_acc[i] + m_x[i]).collect();

    Ok(iterative
        .iter()
        .zip(&closed)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max))
}

/// Jacobian of the last block's stacked outputs with respect to the first block's stacked
/// inputs, assembled row by row from reverse-mode gradients. Row-major `(K*d) x (K*d)`.
pub fn flow_jacobian(inputs: &[Tensor<f64>], blocks: &[ParallelBlock<f64>]) -> Result<Vec<f64>> {
    require_linear_chain(blocks, inputs)?;
    let k = inputs.len();
    let d = inputs[0].numel();
    let n = k * d;
    let mut jac = vec![0.0; n * n];
    for row in 0..n {
        let mut s = Session::frozen(Mode::Eval);
        let xs: Vec<Var> = inputs.iter().map(|t| s.input_with_grad(t.clone())).collect();
        let mut lines = xs.clone();
        for b in blocks {
            lines = b.merge_forward(&mut s, &lines)?;
        }
        let (line, offset) = (row / d, row % d);
        let mut selector = Tensor::zeros(s.value(lines[line]).shape());
        selector.data_mut()[offset] = 1.0;
        let sel = s.input(selector);
        let picked = s.graph.mul(lines[line], sel)?;
        let loss = s.graph.sum(picked)?;
        s.backward(loss)?;
        for (j, &x) in xs.iter().enumerate() {
            if let Some(g) = s.graph.grad(x) {
                jac[row * n + j * d..row * n + (j + 1) * d].copy_from_slice(g.data());
            }
        }
    }
    Ok(jac)
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_rational::Ratio;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(5)
    }

    fn zero_branch(c: usize) -> Branch<f64> {
        let mut b = Branch::new("z", &BranchSpec::uniform(c, c, 2, 1), BranchStyle::Standard, &mut rng())
            .unwrap();
        b.zero_kernels();
        b
    }

    fn channels(vals: &[f64]) -> Tensor<f64> {
        Tensor::new(&[1, vals.len(), 1, 1], vals.to_vec()).unwrap()
    }

    #[test]
    fn spec_rejects_broken_chain() {
        let mut spec = BranchSpec::uniform(4, 8, 2, 1);
        spec.layers[1].in_channels = 5;
        assert!(spec.validate().is_err());
        assert!(BranchSpec { layers: vec![] }.validate().is_err());
    }

    #[test]
    fn zero_branch_residual_is_relu() {
        let b = zero_branch(3);
        let mut s = Session::new(Mode::Eval);
        let x = s.input(channels(&[-1.0, 0.5, 2.0]));
        let y = residual_forward(&mut s, x, &b, None, true).unwrap();
        assert_eq!(s.value(y).data(), &[0.0, 0.5, 2.0]);
    }

    #[test]
    fn residual_shape_mismatch_without_projection() {
        let b: Branch<f64> =
            Branch::new("b", &BranchSpec::uniform(2, 4, 2, 1), BranchStyle::Standard, &mut rng()).unwrap();
        let mut s = Session::new(Mode::Eval);
        let x = s.input(Tensor::zeros(&[1, 2, 4, 4]));
        assert!(matches!(
            residual_forward(&mut s, x, &b, None, true),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn merge_collapses_to_average() {
        let (b0, b1) = (zero_branch(2), zero_branch(2));
        let mut s = Session::new(Mode::Eval);
        let x0 = s.input(channels(&[2.0, 4.0]));
        let x1 = s.input(channels(&[6.0, 8.0]));
        let (y0, y1) = merge_and_run_forward(&mut s, x0, x1, &b0, &b1, true).unwrap();
        assert_eq!(s.value(y0).data(), &[4.0, 6.0]);
        assert_eq!(s.value(y1).data(), &[4.0, 6.0]);
    }

    #[test]
    fn k_branch_mean_of_three() {
        let bs: Vec<_> = (0..3).map(|_| zero_branch(1)).collect();
        let mut s = Session::new(Mode::Eval);
        let xs: Vec<_> = [3.0, 6.0, 9.0].iter().map(|&v| s.input(channels(&[v]))).collect();
        let refs: Vec<_> = bs.iter().collect();
        let ys = k_branch_forward(&mut s, &xs, &refs, None, true).unwrap();
        for y in ys {
            assert_eq!(s.value(y).data(), &[6.0]);
        }
    }

    #[test]
    fn k_branch_needs_two_lines() {
        let bs = [zero_branch(1)];
        let mut s = Session::new(Mode::Eval);
        let x = s.input(channels(&[1.0]));
        assert!(matches!(
            k_branch_forward(&mut s, &[x], &[&bs[0]], None, true),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn merge_line_shape_mismatch() {
        let (b0, b1) = (zero_branch(2), zero_branch(2));
        let mut s = Session::new(Mode::Eval);
        let x0 = s.input(channels(&[2.0, 4.0]));
        let x1 = s.input(Tensor::zeros(&[1, 2, 2, 2]));
        assert!(matches!(
            merge_and_run_forward(&mut s, x0, x1, &b0, &b1, true),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn idempotence_small_cases() {
        let m = MergeMapping::new(2, 1).unwrap();
        assert_eq!(m.dense(), vec![0.5, 0.5, 0.5, 0.5]);
        assert_eq!(m.idempotence_check(1), 0.0);
        assert_eq!(m.idempotence_check(2), 0.0);
        assert!(MergeMapping::new(3, 4).unwrap().idempotence_check(5) <= 1e-12);
        let eye: Vec<f64> = (0..16).map(|i| if i % 5 == 0 { 1.0 } else { 0.0 }).collect();
        assert_eq!(power_deviation(&eye, 4, 7), 0.0);
        assert!(MergeMapping::new(1, 4).is_err());
    }

    #[test]
    fn idempotence_is_exact_in_rationals() {
        for k in [2i64, 3, 4, 8] {
            let d = 3usize;
            let n = k as usize * d;
            let w = Ratio::new(1, k);
            let z = Ratio::from_integer(0);
            let mut m = vec![z; n * n];
            for i in 0..n {
                for j in 0..n {
                    if i % d == j % d {
                        m[i * n + j] = w;
                    }
                }
            }
            let mut sq = vec![z; n * n];
            for i in 0..n {
                for j in 0..n {
                    sq[i * n + j] = (0..n).map(|t| m[i * n + t] * m[t * n + j]).sum();
                }
            }
            assert_eq!(sq, m, "K={k}");
        }
    }

    #[test]
    fn unrolled_flow_rejects_nonlinear() {
        let b = ParallelBlock::new(vec![zero_branch(2), zero_branch(2)]);
        let xs = vec![channels(&[1.0, 2.0]), channels(&[3.0, 4.0])];
        assert!(matches!(unrolled_flow_check(&xs, &[b]), Err(Error::Usage(_))));
    }
}
