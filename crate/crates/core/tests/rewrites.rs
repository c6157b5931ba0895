mod common;

use common::*;
use mrnet::blocks::{Branch, BranchSpec, BranchStyle, InceptionBlock, ParallelBlock, ResidualBlock};
use mrnet::layers::{Mode, Module, Session};
use mrnet::transforms::{
    certify, default_tolerance, lower_merge_and_run, widen_block, widen_inception_like, Probe, StackedLines,
    DEFAULT_PROBES, PROBE_SEED,
};
use mrnet::verify::randomize_norms;
use mrnet::Error;

fn inception(d: usize, seed: u64) -> InceptionBlock<f64> {
    let mut r = rng(seed);
    let mut b = InceptionBlock {
        branches: [standard_branch(d, 2, &mut r), standard_branch(d, 2, &mut r)],
        projection: None,
        relu: true,
    };
    randomize_norms(&mut b, &mut r);
    b
}

fn merge_run(k: usize, d: usize, seed: u64) -> ParallelBlock<f64> {
    let mut r = rng(seed);
    let mut b = ParallelBlock::new((0..k).map(|_| standard_branch(d, 2, &mut r)).collect());
    randomize_norms(&mut b, &mut r);
    b
}

fn first_kernel_nudge<M: Module<f64>>(m: &mut M, delta: f64) {
    m.params_mut()[0].value.data_mut()[0] += delta;
}

#[test]
fn a_block_certifies_against_itself_exactly() {
    let b = inception(4, 1);
    let cert = certify::<f64>(&b, &b, DEFAULT_PROBES, 0.0, PROBE_SEED).unwrap();
    assert_eq!(cert.max_deviation, 0.0);
    assert_eq!(cert.probes, DEFAULT_PROBES);
    let m = merge_run(3, 4, 2);
    let stacked = StackedLines(&m);
    assert_eq!(certify::<f64>(&stacked, &stacked, 2, 0.0, 0).unwrap().max_deviation, 0.0);
}

#[test]
fn widened_and_lowered_blocks_certify() {
    let tol = default_tolerance::<f64>();
    for (d, seed) in [(4, 3), (16, 4)] {
        let src = inception(d, seed);
        let cert = certify::<f64>(&src, &widen_block(&src).unwrap(), DEFAULT_PROBES, tol, PROBE_SEED).unwrap();
        assert!(cert.max_deviation <= tol);
    }
    for k in [2, 3, 4] {
        let src = merge_run(k, 4, 10 + k as u64);
        let low = lower_merge_and_run(&src).unwrap();
        let cert = certify::<f64>(&StackedLines(&src), &low, DEFAULT_PROBES, tol, PROBE_SEED).unwrap();
        assert!(cert.max_deviation <= tol, "K={k}: {cert:?}");
    }
}

#[test]
fn zero_branches_widen_to_zero_output() {
    let mut r = rng(5);
    let mut b0 = standard_branch(4, 2, &mut r);
    let mut b1 = standard_branch(4, 2, &mut r);
    b0.zero_kernels();
    b1.zero_kernels();
    let wide = widen_inception_like(&b0, &b1).unwrap();
    let mut s = Session::frozen(Mode::Eval);
    let x = s.input(normal(&[2, 4, 6, 6], &mut r));
    let y = wide.forward(&mut s, x).unwrap();
    assert!(s.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn lowered_block_with_zero_branches_is_the_merge_matrix() {
    let (k, d) = (3, 2);
    let mut r = rng(6);
    let mut block = ParallelBlock::new((0..k).map(|_| standard_branch(d, 2, &mut r)).collect());
    block.relu = false;
    for b in &mut block.branches {
        b.zero_kernels();
    }
    let low = lower_merge_and_run(&block).unwrap();
    let x = normal(&[1, k * d, 3, 3], &mut r);
    let got = low.run(&x).unwrap();
    let m = merge_matrix(k, d);
    let hw = 9;
    for p in 0..hw {
        let column: Vec<f64> = (0..k * d).map(|c| x.data()[c * hw + p]).collect();
        let expected = dense_matvec(&m, &column);
        for (c, e) in expected.iter().enumerate() {
            assert!((got.data()[c * hw + p] - e).abs() < 1e-15);
        }
    }
}

#[test]
fn perturbed_targets_are_rejected() {
    let tol = default_tolerance::<f64>();
    let src = inception(4, 7);
    let mut wide = widen_block(&src).unwrap();
    first_kernel_nudge(&mut wide, 0.1);
    let err = certify::<f64>(&src, &wide, DEFAULT_PROBES, tol, PROBE_SEED).unwrap_err();
    match err {
        Error::Certification { deviation, tolerance, .. } => {
            assert!(deviation > tolerance);
            assert_eq!(tolerance, tol);
        }
        other => panic!("expected certification error, got {other}"),
    }

    let m = merge_run(2, 4, 8);
    let mut low = lower_merge_and_run(&m).unwrap();
    first_kernel_nudge(&mut low, 0.1);
    assert!(matches!(
        certify::<f64>(&StackedLines(&m), &low, DEFAULT_PROBES, tol, PROBE_SEED),
        Err(Error::Certification { .. })
    ));
}

#[test]
fn certificates_are_deterministic() {
    let src = inception(4, 9);
    let wide = widen_block(&src).unwrap();
    let a = certify::<f64>(&src, &wide, DEFAULT_PROBES, 1.0, PROBE_SEED).unwrap();
    let b = certify::<f64>(&src, &wide, DEFAULT_PROBES, 1.0, PROBE_SEED).unwrap();
    assert_eq!(a, b);
}

#[test]
fn single_precision_certification() {
    let mut r = rng(10);
    let spec = BranchSpec::uniform(8, 8, 2, 1);
    let branch = |r: &mut _| Branch::<f32>::new("b", &spec, BranchStyle::Standard, r).unwrap();
    let src = InceptionBlock {
        branches: [branch(&mut r), branch(&mut r)],
        projection: None,
        relu: true,
    };
    let wide: ResidualBlock<f32> = widen_block(&src).unwrap();
    let tol = default_tolerance::<f32>();
    assert_eq!(tol, 1e-4);
    let cert = certify::<f32>(&src, &wide, DEFAULT_PROBES, tol, PROBE_SEED).unwrap();
    assert!(cert.max_deviation <= tol);

    let m = ParallelBlock::new(vec![branch(&mut r), branch(&mut r)]);
    let low = lower_merge_and_run(&m).unwrap();
    certify::<f32>(&StackedLines(&m), &low, DEFAULT_PROBES, tol, PROBE_SEED).unwrap();
}

#[test]
fn unsupported_rewrites_are_refused() {
    let mut r = rng(11);
    let single = ParallelBlock::new(vec![standard_branch(4, 2, &mut r)]);
    assert!(lower_merge_and_run(&single).is_err());

    let strided = BranchSpec::uniform(4, 4, 2, 2);
    let b = |r: &mut _| Branch::<f64>::new("b", &strided, BranchStyle::Standard, r).unwrap();
    let m = ParallelBlock::new(vec![b(&mut r), b(&mut r)]);
    assert!(matches!(lower_merge_and_run(&m), Err(Error::Dimension(_))));

    let deep0 = standard_branch(4, 3, &mut r);
    let deep1 = standard_branch(4, 3, &mut r);
    assert!(matches!(widen_inception_like(&deep0, &deep1), Err(Error::UnsupportedShape(_))));
}
