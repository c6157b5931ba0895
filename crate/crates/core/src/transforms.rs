//! Equivalence-preserving rewrites of parallel blocks.
//!
//! * [`widen_inception_like`] merges two 2-layer branches that share an input into one
//!   branch whose hidden layer is twice as wide.
//! * [`lower_merge_and_run`] turns a K-line merge-and-run block into a single-line block
//!   over the concatenated `K*d` channels: group convolutions plus a linear skip whose
//!   matrix is the merge mapping.
//!
//! Both rewrites are exact in eval mode, where batch norm is a fixed per-channel affine
//! map. [`certify`] checks a rewrite numerically on seeded random probes.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::blocks::{
    inception_like_forward, residual_forward, Branch, InceptionBlock, MergeMapping, ParallelBlock,
    ResidualBlock,
};
use crate::error::{Error, Result};
use crate::graph::Var;
use crate::layers::{BatchNorm, ConvLayer, Mode, Module, Norm, Param, Session};
use crate::tensor::{DType, Scalar, Tensor};

pub const DEFAULT_PROBES: usize = 8;
pub const PROBE_SEED: u64 = 0x5eed;

/// Default certification tolerance for the element type.
pub fn default_tolerance<T: Scalar>() -> f64 {
    match T::DTYPE {
        DType::F64 => 1e-10,
        DType::F32 => 1e-4,
    }
}

fn concat_norms<T: Scalar>(name: &str, parts: &[(&Norm<T>, usize)]) -> Norm<T> {
    if parts.iter().all(|(n, _)| n.is_identity()) {
        return Norm::Identity;
    }
    let batch: Option<Vec<&BatchNorm<T>>> = parts
        .iter()
        .map(|(n, _)| match n {
            Norm::Batch(bn) => Some(bn),
            _ => None,
        })
        .collect();
    if let Some(bns) = batch {
        let cat = |f: &dyn Fn(&BatchNorm<T>) -> Vec<T>| bns.iter().flat_map(|b| f(b)).collect::<Vec<T>>();
        return Norm::Batch(BatchNorm::from_parts(
            name,
            cat(&|b| b.gamma.value.data().to_vec()),
            cat(&|b| b.beta.value.data().to_vec()),
            cat(&|b| b.running_mean.clone()),
            cat(&|b| b.running_var.clone()),
        ));
    }
    let (mut scale, mut shift) = (Vec::new(), Vec::new());
    for (n, c) in parts {
        let (s, b) = n.eval_affine(*c);
        scale.extend(s);
        shift.extend(b);
    }
    Norm::affine(name, scale, shift)
}

fn require_two_layers<T: Scalar>(b: &Branch<T>) -> Result<()> {
    if b.depth() != 2 {
        return Err(Error::UnsupportedShape(format!(
            "widening needs 2-layer branches, got {}",
            b.depth()
        )));
    }
    Ok(())
}

/// Replaces two parallel 2-layer branches `H0, H1` (same input, summed outputs) by one
/// branch: layer 1 stacks both kernels along output channels (`d -> 2d`), layer 2 stacks
/// them along input channels (`2d -> d`).
///
/// The two final-layer norms cannot be concatenated because their outputs are summed; they
/// are folded into the layer-2 kernel as per-output-channel scales, and their shifts are
/// added into a single per-channel affine map.
pub fn widen_inception_like<T: Scalar>(b0: &Branch<T>, b1: &Branch<T>) -> Result<Branch<T>> {
    require_two_layers(b0)?;
    require_two_layers(b1)?;
    let (f0, f1) = (&b0.layers[0], &b1.layers[0]);
    let (s0, s1) = (&b0.layers[1], &b1.layers[1]);
    if f0.kernel.value.shape()[1..] != f1.kernel.value.shape()[1..]
        || f0.stride != f1.stride
        || f0.pad != f1.pad
        || f0.relu != f1.relu
    {
        return Err(Error::dim("first layers of the two branches are not compatible"));
    }
    if s0.out_channels() != s1.out_channels()
        || s0.kernel.value.shape()[2..] != s1.kernel.value.shape()[2..]
        || s0.stride != s1.stride
        || s0.pad != s1.pad
    {
        return Err(Error::dim("second layers of the two branches are not compatible"));
    }
    if s0.relu || s1.relu {
        return Err(Error::UnsupportedShape(
            "summed branch outputs must not pass through ReLU before the sum".into(),
        ));
    }

    let mut first_kernel = f0.kernel.value.data().to_vec();
    first_kernel.extend_from_slice(f1.kernel.value.data());
    let mut first_shape = f0.kernel.value.shape().to_vec();
    first_shape[0] += f1.out_channels();
    let first = ConvLayer {
        kernel: Param::new("wide.conv0.weight", Tensor::new(&first_shape, first_kernel)?, true),
        stride: f0.stride,
        pad: f0.pad,
        norm: concat_norms(
            "wide.conv0.norm",
            &[(&f0.norm, f0.out_channels()), (&f1.norm, f1.out_channels())],
        ),
        relu: f0.relu,
    };

    let out = s0.out_channels();
    let (c0, c1) = (s0.in_channels(), s1.in_channels());
    let (kh, kw) = (s0.kernel.value.shape()[2], s0.kernel.value.shape()[3]);
    let taps = kh * kw;
    let linear = s0.norm.is_identity() && s1.norm.is_identity();
    let (a0, sh0) = s0.norm.eval_affine(out);
    let (a1, sh1) = s1.norm.eval_affine(out);
    let mut second = Vec::with_capacity(out * (c0 + c1) * taps);
    for o in 0..out {
        let k0 = &s0.kernel.value.data()[o * c0 * taps..(o + 1) * c0 * taps];
        let k1 = &s1.kernel.value.data()[o * c1 * taps..(o + 1) * c1 * taps];
        if linear {
            second.extend_from_slice(k0);
            second.extend_from_slice(k1);
        } else {
            second.extend(k0.iter().map(|&v| v * a0[o]));
            second.extend(k1.iter().map(|&v| v * a1[o]));
        }
    }
    let norm = if linear {
        Norm::Identity
    } else {
        let shift = sh0.iter().zip(&sh1).map(|(&p, &q)| p + q).collect();
        Norm::affine("wide.conv1.norm", vec![T::one(); out], shift)
    };
    let second = ConvLayer {
        kernel: Param::new(
            "wide.conv1.weight",
            Tensor::new(&[out, c0 + c1, kh, kw], second)?,
            true,
        ),
        stride: s0.stride,
        pad: s0.pad,
        norm,
        relu: false,
    };
    Ok(Branch {
        layers: vec![first, second],
    })
}

/// Rewrites an inception-like block as a residual block with one widened branch.
pub fn widen_block<T: Scalar>(block: &InceptionBlock<T>) -> Result<ResidualBlock<T>> {
    Ok(ResidualBlock {
        branch: widen_inception_like(&block.branches[0], &block.branches[1])?,
        projection: block.projection.clone(),
        relu: block.relu,
    })
}

/// Conv layer whose kernel is split into independent channel groups.
#[derive(Clone, Debug)]
pub struct GroupConvLayer<T> {
    pub kernels: Vec<Param<T>>,
    pub stride: usize,
    pub pad: usize,
    pub norm: Norm<T>,
    pub relu: bool,
}

impl<T: Scalar> GroupConvLayer<T> {
    pub fn groups(&self) -> usize {
        self.kernels.len()
    }

    pub fn forward(&self, s: &mut Session<T>, x: Var) -> Result<Var> {
        let ks: Vec<Var> = self.kernels.iter().map(|k| s.param(k)).collect();
        let y = s.graph.group_conv2d(x, &ks, self.stride, self.pad)?;
        let y = self.norm.forward(s, y)?;
        if self.relu {
            s.graph.relu(y)
        } else {
            Ok(y)
        }
    }

    /// The equivalent dense kernel: group kernels placed on the block diagonal.
    pub fn block_diagonal_kernel(&self) -> Tensor<T> {
        let shape = self.kernels[0].value.shape();
        let (o, i, kh, kw) = (shape[0], shape[1], shape[2], shape[3]);
        let g = self.groups();
        let taps = kh * kw;
        let mut data = vec![T::zero(); g * o * g * i * taps];
        for (gi, k) in self.kernels.iter().enumerate() {
            for oc in 0..o {
                for ic in 0..i {
                    let src = &k.value.data()[(oc * i + ic) * taps..(oc * i + ic + 1) * taps];
                    let row = gi * o + oc;
                    let col = gi * i + ic;
                    let dst = (row * g * i + col) * taps;
                    data[dst..dst + taps].copy_from_slice(src);
                }
            }
        }
        Tensor::new(&[g * o, g * i, kh, kw], data).expect("block-diagonal shape")
    }
}

/// A merge-and-run block lowered to a single `K*d`-channel line.
#[derive(Clone, Debug)]
pub struct LoweredMergeRun<T> {
    pub layers: Vec<GroupConvLayer<T>>,
    pub mapping: MergeMapping,
    pub relu: bool,
}

impl<T: Scalar> LoweredMergeRun<T> {
    pub fn channels(&self) -> usize {
        self.mapping.size()
    }

    /// The `(K*d) x (K*d)` skip matrix.
    pub fn skip_matrix(&self) -> Vec<f64> {
        self.mapping.dense()
    }

    fn skip_kernel(&self) -> Tensor<T> {
        let n = self.channels();
        Tensor::from_f64(&[n, n, 1, 1], &self.skip_matrix()).expect("square skip kernel")
    }

    pub fn forward(&self, s: &mut Session<T>, z: Var) -> Result<Var> {
        let mut h = z;
        for layer in &self.layers {
            h = layer.forward(s, h)?;
        }
        let m = s.input(self.skip_kernel());
        let skip = s.graph.conv2d(z, m, 1, 0)?;
        let y = s.graph.add(h, skip)?;
        if self.relu {
            s.graph.relu(y)
        } else {
            Ok(y)
        }
    }
}

impl<T: Scalar> Module<T> for LoweredMergeRun<T> {
    fn params(&self) -> Vec<&Param<T>> {
        self.layers
            .iter()
            .flat_map(|l| {
                let mut v: Vec<&Param<T>> = l.kernels.iter().collect();
                match &l.norm {
                    Norm::Batch(bn) => v.extend([&bn.gamma, &bn.beta]),
                    Norm::Affine { scale, shift } => v.extend([scale, shift]),
                    Norm::Identity => {}
                }
                v
            })
            .collect()
    }
    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        self.layers
            .iter_mut()
            .flat_map(|l| {
                let mut v: Vec<&mut Param<T>> = l.kernels.iter_mut().collect();
                match &mut l.norm {
                    Norm::Batch(bn) => v.extend([&mut bn.gamma, &mut bn.beta]),
                    Norm::Affine { scale, shift } => v.extend([scale, shift]),
                    Norm::Identity => {}
                }
                v
            })
            .collect()
    }
    fn norms(&self) -> Vec<&BatchNorm<T>> {
        self.layers
            .iter()
            .filter_map(|l| match &l.norm {
                Norm::Batch(bn) => Some(bn),
                _ => None,
            })
            .collect()
    }
    fn norms_mut(&mut self) -> Vec<&mut BatchNorm<T>> {
        self.layers
            .iter_mut()
            .filter_map(|l| match &mut l.norm {
                Norm::Batch(bn) => Some(bn),
                _ => None,
            })
            .collect()
    }
}

/// Lowers a merge-and-run block (no projections, equal line widths) to group convolutions
/// plus the idempotent merge matrix on the skip.
pub fn lower_merge_and_run<T: Scalar>(block: &ParallelBlock<T>) -> Result<LoweredMergeRun<T>> {
    let k = block.lines();
    if k < 2 {
        return Err(Error::Usage("merge-and-run needs at least two lines".into()));
    }
    if block.projections.is_some() {
        return Err(Error::Usage(
            "blocks with projections change resolution and cannot be lowered".into(),
        ));
    }
    let d = block.branches[0].in_channels();
    for b in &block.branches {
        if b.in_channels() != d || b.out_channels() != d {
            return Err(Error::dim(format!(
                "lowering needs equal line widths: got branch {} -> {} against d = {d}",
                b.in_channels(),
                b.out_channels()
            )));
        }
        if b.stride() != 1 {
            return Err(Error::dim("lowering needs stride-1 branches"));
        }
    }
    let depth = block.branches[0].depth();
    if block.branches.iter().any(|b| b.depth() != depth) {
        return Err(Error::dim("branches differ in depth"));
    }
    let mut layers = Vec::with_capacity(depth);
    for li in 0..depth {
        let per: Vec<&ConvLayer<T>> = block.branches.iter().map(|b| &b.layers[li]).collect();
        let ref_layer = per[0];
        for l in &per {
            if l.kernel.value.shape() != ref_layer.kernel.value.shape()
                || l.stride != ref_layer.stride
                || l.pad != ref_layer.pad
                || l.relu != ref_layer.relu
            {
                return Err(Error::dim(format!("layer {li} differs across branches")));
            }
        }
        let norms: Vec<(&Norm<T>, usize)> = per.iter().map(|l| (&l.norm, l.out_channels())).collect();
        layers.push(GroupConvLayer {
            kernels: per
                .iter()
                .enumerate()
                .map(|(g, l)| {
                    Param::new(format!("lowered.conv{li}.group{g}"), l.kernel.value.clone(), true)
                })
                .collect(),
            stride: ref_layer.stride,
            pad: ref_layer.pad,
            norm: concat_norms(&format!("lowered.conv{li}.norm"), &norms),
            relu: ref_layer.relu,
        });
    }
    Ok(LoweredMergeRun {
        layers,
        mapping: MergeMapping::new(k, d)?,
        relu: block.relu,
    })
}

/// A block viewed as a function of one `[N, C, H, W]` tensor, evaluated in eval mode.
pub trait Probe<T: Scalar> {
    fn label(&self) -> String;
    fn input_channels(&self) -> usize;
    fn forward_single(&self, s: &mut Session<T>, x: Var) -> Result<Var>;

    fn run(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut s = Session::frozen(Mode::Eval);
        let v = s.input(x.clone());
        let y = self.forward_single(&mut s, v)?;
        Ok(s.value(y).clone())
    }
}

impl<T: Scalar> Probe<T> for ResidualBlock<T> {
    fn label(&self) -> String {
        format!("residual(width {})", self.branch.layers[0].out_channels())
    }
    fn input_channels(&self) -> usize {
        self.branch.in_channels()
    }
    fn forward_single(&self, s: &mut Session<T>, x: Var) -> Result<Var> {
        residual_forward(s, x, &self.branch, self.projection.as_ref(), self.relu)
    }
}

impl<T: Scalar> Probe<T> for InceptionBlock<T> {
    fn label(&self) -> String {
        "inception-like".into()
    }
    fn input_channels(&self) -> usize {
        self.branches[0].in_channels()
    }
    fn forward_single(&self, s: &mut Session<T>, x: Var) -> Result<Var> {
        inception_like_forward(
            s,
            x,
            &self.branches[0],
            &self.branches[1],
            self.projection.as_ref(),
            self.relu,
        )
    }
}

/// A K-line merge-and-run block fed with its lines concatenated along channels.
pub struct StackedLines<'a, T>(pub &'a ParallelBlock<T>);

impl<T: Scalar> Probe<T> for StackedLines<'_, T> {
    fn label(&self) -> String {
        format!("merge-and-run({} lines)", self.0.lines())
    }
    fn input_channels(&self) -> usize {
        self.0.lines() * self.0.branches[0].in_channels()
    }
    fn forward_single(&self, s: &mut Session<T>, x: Var) -> Result<Var> {
        let d = self.0.branches[0].in_channels();
        let lines = (0..self.0.lines())
            .map(|i| s.graph.channel_slice(x, i * d, d))
            .collect::<Result<Vec<_>>>()?;
        let ys = self.0.merge_forward(s, &lines)?;
        s.graph.concat_channels(&ys)
    }
}

impl<T: Scalar> Probe<T> for LoweredMergeRun<T> {
    fn label(&self) -> String {
        format!("lowered group-conv block ({} channels)", self.channels())
    }
    fn input_channels(&self) -> usize {
        self.channels()
    }
    fn forward_single(&self, s: &mut Session<T>, x: Var) -> Result<Var> {
        self.forward(s, x)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RewriteCertificate {
    pub source_id: String,
    pub target_id: String,
    pub probes: usize,
    pub max_deviation: f64,
    pub tolerance: f64,
    pub dtype: DType,
}

/// Probe input extents: batch 2, 8x8 spatial.
pub const PROBE_BATCH: usize = 2;
pub const PROBE_SIDE: usize = 8;

/// Runs both blocks on `probes` unit-normal inputs drawn from `seed` and records the largest
/// output deviation. Fails when it exceeds `tolerance`.
pub fn certify<T: Scalar>(
    source: &dyn Probe<T>,
    target: &dyn Probe<T>,
    probes: usize,
    tolerance: f64,
    seed: u64,
) -> Result<RewriteCertificate> {
    let c = source.input_channels();
    if target.input_channels() != c {
        return Err(Error::dim(format!(
            "source takes {c} channels, target takes {}",
            target.input_channels()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = [PROBE_BATCH, c, PROBE_SIDE, PROBE_SIDE];
    let numel: usize = shape.iter().product();
    let mut max_dev = 0.0f64;
    for _ in 0..probes {
        let data: Vec<T> = (0..numel)
            .map(|_| T::from_f64_lossy(StandardNormal.sample(&mut rng)))
            .collect();
        let x = Tensor::new(&shape, data)?;
        let a = source.run(&x)?;
        let b = target.run(&x)?;
        let dev = a.max_abs_diff(&b)?;
        max_dev = if dev.is_nan() { f64::INFINITY } else { max_dev.max(dev) };
    }
    let cert = RewriteCertificate {
        source_id: source.label(),
        target_id: target.label(),
        probes,
        max_deviation: max_dev,
        tolerance,
        dtype: T::DTYPE,
    };
    if max_dev > tolerance {
        return Err(Error::Certification {
            source_id: cert.source_id,
            target_id: cert.target_id,
            deviation: max_dev,
            tolerance,
        });
    }
    Ok(cert)
}
