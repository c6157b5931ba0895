//! Self-verification suites: idempotence, gradient checks, rewrite certificates and the
//! unrolled information flow.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::blocks::{
    unrolled_flow_check, BlockKind, Branch, BranchSpec, BranchStyle, InceptionBlock, MergeMapping,
    ParallelBlock,
};
use crate::error::{Error, Result};
use crate::gradcheck::{self, GradCheckOptions};
use crate::graph::Var;
use crate::layers::{Module, Session};
use crate::netbuilder::{build, NetworkSpec};
use crate::tensor::Tensor;
use crate::transforms::{
    certify, default_tolerance, lower_merge_and_run, widen_block, StackedLines, DEFAULT_PROBES,
    PROBE_SEED,
};

pub const IDEMPOTENCE_TOL: f64 = 1e-12;
pub const GRADCHECK_TOL: f64 = 1e-4;
pub const FLOW_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    Idempotence,
    Gradcheck,
    Widen,
    Lower,
    Flow,
}

impl Suite {
    pub const ALL: [Suite; 5] = [
        Suite::Idempotence,
        Suite::Gradcheck,
        Suite::Widen,
        Suite::Lower,
        Suite::Flow,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Idempotence => "idempotence",
            Suite::Gradcheck => "gradcheck",
            Suite::Widen => "widen",
            Suite::Lower => "lower",
            Suite::Flow => "flow",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|x| x.name() == s)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct VerifyOptions {
    /// Test hook: adds this amount to one weight of every rewrite target before certifying.
    pub perturb: Option<f64>,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckRow {
    pub name: String,
    pub max_deviation: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl CheckRow {
    pub fn new(name: impl Into<String>, max_deviation: f64, tolerance: f64) -> Self {
        Self {
            name: name.into(),
            max_deviation,
            tolerance,
            pass: max_deviation <= tolerance,
        }
    }
}

pub fn rows_to_csv(rows: &[CheckRow]) -> String {
    let mut out = String::from("name,max_deviation,tolerance,pass\n");
    for r in rows {
        let _ = writeln!(out, "{},{:e},{:e},{}", r.name, r.max_deviation, r.tolerance, r.pass);
    }
    out
}

pub fn run_suite(suite: Suite, opts: &VerifyOptions) -> Result<Vec<CheckRow>> {
    match suite {
        Suite::Idempotence => idempotence_suite(),
        Suite::Gradcheck => gradcheck_suite(opts.seed),
        Suite::Widen => widen_suite(opts),
        Suite::Lower => lower_suite(opts),
        Suite::Flow => flow_suite(opts.seed),
    }
}

pub fn idempotence_suite() -> Result<Vec<CheckRow>> {
    let mut rows = Vec::new();
    for k in [2, 3, 4, 8] {
        for d in [1, 4, 16] {
            let dev = MergeMapping::new(k, d)?.idempotence_check(2);
            rows.push(CheckRow::new(format!("idempotence K={k} d={d}"), dev, IDEMPOTENCE_TOL));
        }
    }
    Ok(rows)
}

/// Random gamma, beta and running statistics, so eval-mode batch norm is a non-trivial
/// affine map.
pub fn randomize_norms<M: Module<f64>, R: Rng>(module: &mut M, rng: &mut R) {
    for bn in module.norms_mut() {
        for g in bn.gamma.value.data_mut() {
            *g = rng.gen_range(0.5..1.5);
        }
        for b in bn.beta.value.data_mut() {
            *b = rng.gen_range(-0.5..0.5);
        }
        for m in &mut bn.running_mean {
            *m = rng.gen_range(-0.5..0.5);
        }
        for v in &mut bn.running_var {
            *v = rng.gen_range(0.5..2.0);
        }
    }
}

pub fn normal_tensor<R: Rng>(shape: &[usize], rng: &mut R) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| StandardNormal.sample(&mut *rng)).collect())
        .expect("shape matches")
}

fn standard_branch<R: Rng>(name: &str, d: usize, rng: &mut R) -> Result<Branch<f64>> {
    Branch::new(name, &BranchSpec::uniform(d, d, 2, 1), BranchStyle::Standard, rng)
}

fn perturb_first_weight<M: Module<f64>>(module: &mut M, amount: f64) {
    if let Some(p) = module.params_mut().into_iter().next() {
        p.value.data_mut()[0] += amount;
    }
}

fn certificate_row(name: &str, result: Result<crate::transforms::RewriteCertificate>) -> Result<CheckRow> {
    match result {
        Ok(cert) => Ok(CheckRow::new(name, cert.max_deviation, cert.tolerance)),
        Err(Error::Certification {
            deviation,
            tolerance,
            ..
        }) => Ok(CheckRow::new(name, deviation, tolerance)),
        Err(e) => Err(e),
    }
}

/// Two-branch inception-like block, `d = 16`, with BN (eval) and ReLU, certified against its
/// widened single-branch form.
pub fn widen_suite(opts: &VerifyOptions) -> Result<Vec<CheckRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x51de);
    let d = 16;
    let mut source = InceptionBlock {
        branches: [
            standard_branch("b0", d, &mut rng)?,
            standard_branch("b1", d, &mut rng)?,
        ],
        projection: None,
        relu: true,
    };
    randomize_norms(&mut source, &mut rng);
    let mut target = widen_block(&source)?;
    if let Some(delta) = opts.perturb {
        perturb_first_weight(&mut target, delta);
    }
    let tol = default_tolerance::<f64>();
    let cert = certify::<f64>(&source, &target, DEFAULT_PROBES, tol, PROBE_SEED ^ opts.seed);
    Ok(vec![certificate_row("widen inception-like d=16", cert)?])
}

/// Two-line merge-and-run block, `d = 16`, with BN (eval) and ReLU, certified against its
/// group-convolution lowering; plus idempotence of the lowered skip matrix.
pub fn lower_suite(opts: &VerifyOptions) -> Result<Vec<CheckRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x10e5);
    let d = 16;
    let mut source = ParallelBlock::new(vec![
        standard_branch("b0", d, &mut rng)?,
        standard_branch("b1", d, &mut rng)?,
    ]);
    randomize_norms(&mut source, &mut rng);
    let mut target = lower_merge_and_run(&source)?;
    if let Some(delta) = opts.perturb {
        perturb_first_weight(&mut target, delta);
    }
    let m = target.skip_matrix();
    let skip_dev = crate::blocks::power_deviation(&m, target.channels(), 2);
    let tol = default_tolerance::<f64>();
    let cert = certify::<f64>(
        &StackedLines(&source),
        &target,
        DEFAULT_PROBES,
        tol,
        PROBE_SEED ^ opts.seed,
    );
    Ok(vec![
        CheckRow::new("lowered skip idempotence 32x32", skip_dev, IDEMPOTENCE_TOL),
        certificate_row("lower merge-and-run d=16", cert)?,
    ])
}

/// Linear two-line chains of 1..=5 blocks over `d = 8` (2 channels of 2x2), iterative
/// against the unrolled closed form.
pub fn flow_suite(seed: u64) -> Result<Vec<CheckRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xf10);
    let shape = [1, 2, 2, 2];
    let mut rows = Vec::new();
    for span in 1..=5 {
        let blocks = (0..span)
            .map(|i| {
                let branches = (0..2)
                    .map(|j| {
                        Branch::new(
                            &format!("block{i}.branch{j}"),
                            &BranchSpec::uniform(2, 2, 2, 1),
                            BranchStyle::Linear,
                            &mut rng,
                        )
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(ParallelBlock {
                    branches,
                    projections: None,
                    relu: false,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let inputs = [normal_tensor(&shape, &mut rng), normal_tensor(&shape, &mut rng)];
        let dev = unrolled_flow_check(&inputs, &blocks)?;
        rows.push(CheckRow::new(format!("unrolled flow t-t'={span} d=8"), dev, FLOW_TOL));
    }
    Ok(rows)
}

/// Projects an arbitrary-shaped output onto a scalar with fixed random weights.
fn project<R: Rng>(s: &mut Session<f64>, y: Var, rng: &mut R) -> Result<Var> {
    let w = normal_tensor(s.graph.shape(y), rng);
    let w = s.input(w);
    let p = s.graph.mul(y, w)?;
    s.graph.sum(p)
}

type OpCase = (&'static str, Vec<Vec<usize>>, fn(&mut Session<f64>, &[Var]) -> Result<Var>);

fn primitive_cases() -> Vec<OpCase> {
    vec![
        ("conv2d 3x3 pad 1", vec![vec![2, 3, 5, 5], vec![4, 3, 3, 3]], |s, v| {
            s.graph.conv2d(v[0], v[1], 1, 1)
        }),
        ("conv2d 3x3 stride 2", vec![vec![2, 3, 6, 6], vec![4, 3, 3, 3]], |s, v| {
            s.graph.conv2d(v[0], v[1], 2, 1)
        }),
        ("conv2d 1x1 stride 2", vec![vec![2, 3, 6, 6], vec![4, 3, 1, 1]], |s, v| {
            s.graph.conv2d(v[0], v[1], 2, 0)
        }),
        (
            "group_conv2d G=2",
            vec![vec![2, 4, 5, 5], vec![3, 2, 3, 3], vec![3, 2, 3, 3]],
            |s, v| s.graph.group_conv2d(v[0], &v[1..], 1, 1),
        ),
        ("add", vec![vec![2, 3, 2, 2], vec![2, 3, 2, 2]], |s, v| s.graph.add(v[0], v[1])),
        ("mul", vec![vec![2, 3, 2, 2], vec![2, 3, 2, 2]], |s, v| s.graph.mul(v[0], v[1])),
        ("scale", vec![vec![2, 3, 2, 2]], |s, v| s.graph.scale(v[0], -1.5)),
        (
            "average_n K=3",
            vec![vec![2, 3, 2, 2], vec![2, 3, 2, 2], vec![2, 3, 2, 2]],
            |s, v| s.graph.average_n(v),
        ),
        ("relu", vec![vec![2, 3, 4, 4]], |s, v| s.graph.relu(v[0])),
        ("batch_norm train", vec![vec![3, 2, 3, 3], vec![2], vec![2]], |s, v| {
            Ok(s.graph.batch_norm_train(v[0], v[1], v[2])?.0)
        }),
        ("batch_norm eval", vec![vec![3, 2, 3, 3], vec![2], vec![2]], |s, v| {
            s.graph.batch_norm_eval(v[0], v[1], v[2], &[0.3, -0.2], &[1.5, 0.7])
        }),
        ("channel_affine", vec![vec![2, 3, 2, 2], vec![3], vec![3]], |s, v| {
            s.graph.channel_affine(v[0], v[1], v[2])
        }),
        ("linear", vec![vec![4, 5], vec![5, 3], vec![3]], |s, v| {
            s.graph.linear(v[0], v[1], v[2])
        }),
        ("global_avg_pool", vec![vec![2, 3, 4, 4]], |s, v| s.graph.global_avg_pool(v[0])),
        ("sum", vec![vec![2, 3, 2, 2]], |s, v| s.graph.sum(v[0])),
        ("softmax_cross_entropy", vec![vec![4, 5]], |s, v| {
            s.graph.softmax_cross_entropy(v[0], &[0, 3, 4, 1])
        }),
        ("channel_slice", vec![vec![2, 5, 2, 2]], |s, v| s.graph.channel_slice(v[0], 1, 3)),
        ("concat_channels", vec![vec![2, 2, 2, 2], vec![2, 3, 2, 2]], |s, v| {
            s.graph.concat_channels(v)
        }),
    ]
}

/// Every primitive op, then a 3-block DMRNet (L = 6, widths 2/4/4, 8x8 inputs) with respect
/// to all of its parameters and its input.
pub fn gradcheck_suite(seed: u64) -> Result<Vec<CheckRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9c);
    let opts = GradCheckOptions {
        seed,
        ..GradCheckOptions::default()
    };
    let mut rows = Vec::new();
    for (name, shapes, op) in primitive_cases() {
        let inputs: Vec<Tensor<f64>> = shapes.iter().map(|s| normal_tensor(s, &mut rng)).collect();
        let proj_seed: u64 = rng.gen();
        let report = gradcheck::check(name, &inputs, &opts, |s, v| {
            let y = op(s, v)?;
            if s.graph.shape(y).iter().product::<usize>() == 1 {
                return Ok(y);
            }
            project(s, y, &mut ChaCha8Rng::seed_from_u64(proj_seed))
        })?;
        rows.push(CheckRow::new(format!("grad {name}"), report.max_rel_error, GRADCHECK_TOL));
    }

    let spec = NetworkSpec::new(BlockKind::MergeAndRun, 6)
        .with_widths(&[2, 4, 4])
        .with_classes(3);
    let net = build::<f64>(&spec, seed)?;
    let x = normal_tensor(&[2, 3, 8, 8], &mut rng);
    let labels = [0usize, 2];
    let report = gradcheck::check_module("dmrnet L=6 params", &net, &opts, |s, m| {
        let xv = s.input(x.clone());
        let logits = m.forward(s, xv)?;
        s.graph.softmax_cross_entropy(logits, &labels)
    })?;
    rows.push(CheckRow::new(
        "grad dmrnet L=6 parameters",
        report.max_rel_error,
        GRADCHECK_TOL,
    ));
    let report = gradcheck::check("dmrnet L=6 input", std::slice::from_ref(&x), &opts, |s, v| {
        let logits = net.forward(s, v[0])?;
        s.graph.softmax_cross_entropy(logits, &labels)
    })?;
    rows.push(CheckRow::new("grad dmrnet L=6 input", report.max_rel_error, GRADCHECK_TOL));
    Ok(rows)
}
