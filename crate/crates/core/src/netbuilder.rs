//! Whole networks: conv0, three stages of blocks, global pooling and an FC classifier.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::blocks::{
    Block, BlockKind, Branch, BranchSpec, BranchStyle, InceptionBlock, ParallelBlock, ResidualBlock,
};
use crate::error::{Error, Result};
use crate::graph::Var;
use crate::layers::{BatchNorm, ConvLayer, Linear, Mode, Module, Param, Session};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NetworkSpec {
    pub kind: BlockKind,
    /// Depth parameter `L`.
    pub depth: usize,
    /// Layers per residual branch (`B`).
    pub branch_layers: usize,
    pub stage_widths: Vec<usize>,
    pub width_multiplier: usize,
    pub num_classes: usize,
    pub in_channels: usize,
    pub blocks_per_stage: Option<usize>,
    pub branch_length_override: Option<usize>,
}

impl NetworkSpec {
    pub fn new(kind: BlockKind, depth: usize) -> Self {
        Self {
            kind,
            depth,
            branch_layers: 2,
            stage_widths: vec![16, 32, 64],
            width_multiplier: 1,
            num_classes: 10,
            in_channels: 3,
            blocks_per_stage: None,
            branch_length_override: None,
        }
    }

    pub fn with_widths(mut self, widths: &[usize]) -> Self {
        self.stage_widths = widths.to_vec();
        self
    }

    pub fn with_classes(mut self, num_classes: usize) -> Self {
        self.num_classes = num_classes;
        self
    }

    pub fn with_multiplier(mut self, m: usize) -> Self {
        self.width_multiplier = m;
        self
    }

    /// ResNets stack `L/3` blocks per stage; the two-branch kinds `L/6`, so one parallel block
    /// stands in for two residual blocks.
    pub fn stage_blocks(&self) -> Result<usize> {
        if let Some(n) = self.blocks_per_stage {
            if n == 0 {
                return Err(Error::config("blocks_per_stage", "must be positive"));
            }
            return Ok(n);
        }
        let per = match self.kind {
            BlockKind::Residual => 3,
            _ => 6,
        };
        if self.depth == 0 || !self.depth.is_multiple_of(per) {
            return Err(Error::config(
                "L",
                format!("{} needs L divisible by {per}, got {}", self.kind.name(), self.depth),
            ));
        }
        Ok(self.depth / per)
    }

    pub fn branch_depth(&self) -> usize {
        self.branch_length_override.unwrap_or(self.branch_layers)
    }

    pub fn validate(&self) -> Result<()> {
        self.stage_blocks()?;
        if self.branch_depth() == 0 {
            return Err(Error::config("B", "branches need at least one layer"));
        }
        if self.stage_widths.is_empty() || self.stage_widths.contains(&0) {
            return Err(Error::config("widths", "need at least one positive stage width"));
        }
        if self.width_multiplier == 0 {
            return Err(Error::config("width_multiplier", "must be positive"));
        }
        if self.num_classes < 2 {
            return Err(Error::config("num_classes", "need at least two classes"));
        }
        Ok(())
    }

    /// Parametrised layers on the longest input-to-output path: conv0, every branch layer, FC.
    pub fn longest_path(&self) -> Result<usize> {
        let blocks = self.stage_blocks()? * self.stage_widths.len();
        Ok(blocks * self.branch_depth() + 2)
    }
}

#[derive(Clone, Debug)]
pub struct Network<T> {
    pub spec: NetworkSpec,
    pub conv0: ConvLayer<T>,
    pub stages: Vec<Vec<Block<T>>>,
    pub fc: Linear<T>,
}

/// Builds a network with He-initialised weights drawn from `seed`.
pub fn build<T: Scalar>(spec: &NetworkSpec, seed: u64) -> Result<Network<T>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let per_stage = spec.stage_blocks()?;
    let depth = spec.branch_depth();
    let widths: Vec<usize> = spec
        .stage_widths
        .iter()
        .map(|w| w * spec.width_multiplier)
        .collect();
    let conv0 = ConvLayer::conv_bn("conv0", spec.in_channels, widths[0], 3, 1, true, &mut rng);

    let mut in_w = widths[0];
    let mut stages = Vec::with_capacity(widths.len());
    for (si, &w) in widths.iter().enumerate() {
        let mut blocks = Vec::with_capacity(per_stage);
        for bi in 0..per_stage {
            let stride = if si > 0 && bi == 0 { 2 } else { 1 };
            let needs_projection = stride != 1 || in_w != w;
            let name = format!("stage{}.block{bi}", si + 1);
            let branch_spec = BranchSpec::uniform(in_w, w, depth, stride);
            let branch = |i: usize, rng: &mut ChaCha8Rng| {
                Branch::new(&format!("{name}.branch{i}"), &branch_spec, BranchStyle::Standard, rng)
            };
            let projection = |i: usize, rng: &mut ChaCha8Rng| {
                ConvLayer::conv_bn(&format!("{name}.proj{i}"), in_w, w, 1, stride, false, rng)
            };
            let block = match spec.kind {
                BlockKind::Residual => Block::Residual(ResidualBlock {
                    branch: branch(0, &mut rng)?,
                    projection: needs_projection.then(|| projection(0, &mut rng)),
                    relu: true,
                }),
                BlockKind::InceptionLike => Block::InceptionLike(InceptionBlock {
                    branches: [branch(0, &mut rng)?, branch(1, &mut rng)?],
                    projection: needs_projection.then(|| projection(0, &mut rng)),
                    relu: true,
                }),
                BlockKind::MergeAndRun | BlockKind::IdentityParallel => {
                    let lines = spec.kind.lines();
                    let branches = (0..lines)
                        .map(|i| branch(i, &mut rng))
                        .collect::<Result<Vec<_>>>()?;
                    let projections = needs_projection
                        .then(|| (0..lines).map(|i| projection(i, &mut rng)).collect());
                    let b = ParallelBlock {
                        branches,
                        projections,
                        relu: true,
                    };
                    if spec.kind == BlockKind::MergeAndRun {
                        Block::MergeAndRun(b)
                    } else {
                        Block::IdentityParallel(b)
                    }
                }
            };
            blocks.push(block);
            in_w = w;
        }
        stages.push(blocks);
    }
    let fc = Linear::new("fc", in_w, spec.num_classes, &mut rng);
    Ok(Network {
        spec: spec.clone(),
        conv0,
        stages,
        fc,
    })
}

/// Residual network whose branches span `2L/3` layers (3 blocks, one per stage) or `L/3`
/// layers (6 blocks, two per stage). Both contain `2L` branch layers.
pub fn build_long_branch_resnet<T: Scalar>(
    depth: usize,
    blocks: usize,
    widths: &[usize],
    num_classes: usize,
    seed: u64,
) -> Result<Network<T>> {
    if depth == 0 || !depth.is_multiple_of(3) {
        return Err(Error::config("L", format!("L must be divisible by 3, got {depth}")));
    }
    let (per_stage, branch_len) = match blocks {
        3 => (1, 2 * depth / 3),
        6 => (2, depth / 3),
        other => {
            return Err(Error::config(
                "blocks",
                format!("long-branch ResNets have 3 or 6 blocks, got {other}"),
            ))
        }
    };
    let spec = NetworkSpec {
        blocks_per_stage: Some(per_stage),
        branch_length_override: Some(branch_len),
        ..NetworkSpec::new(BlockKind::Residual, depth)
            .with_widths(widths)
            .with_classes(num_classes)
    };
    build(&spec, seed)
}

impl<T: Scalar> Network<T> {
    pub fn blocks(&self) -> impl Iterator<Item = &Block<T>> {
        self.stages.iter().flatten()
    }

    /// Logits `[N, num_classes]` for an input node.
    pub fn forward(&self, s: &mut Session<T>, x: Var) -> Result<Var> {
        let h = self.conv0.forward(s, x)?;
        let mut lines = vec![h; self.spec.kind.lines()];
        for block in self.blocks() {
            lines = block.forward(s, &lines)?;
        }
        let merged = if lines.len() > 1 {
            s.graph.average_n(&lines)?
        } else {
            lines[0]
        };
        let pooled = s.graph.global_avg_pool(merged)?;
        self.fc.forward(s, pooled)
    }

    /// Convenience: logits for a batch with constant parameters.
    pub fn predict(&self, input: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let mut s = Session::frozen(mode);
        let x = s.input(input.clone());
        let y = self.forward(&mut s, x)?;
        Ok(s.value(y).clone())
    }

    pub fn count_parameters(&self) -> usize {
        self.num_parameters()
    }
}

impl<T: Scalar> Module<T> for Network<T> {
    fn params(&self) -> Vec<&Param<T>> {
        let mut v = self.conv0.params();
        v.extend(self.blocks().flat_map(|b| b.params()));
        v.extend(self.fc.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v = self.conv0.params_mut();
        v.extend(self.stages.iter_mut().flatten().flat_map(|b| b.params_mut()));
        v.extend(self.fc.params_mut());
        v
    }

    fn norms(&self) -> Vec<&BatchNorm<T>> {
        let mut v = self.conv0.norms();
        v.extend(self.blocks().flat_map(|b| b.norms()));
        v
    }

    fn norms_mut(&mut self) -> Vec<&mut BatchNorm<T>> {
        let mut v = self.conv0.norms_mut();
        v.extend(self.stages.iter_mut().flatten().flat_map(|b| b.norms_mut()));
        v
    }
}
