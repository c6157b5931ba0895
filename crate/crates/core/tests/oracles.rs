mod common;

use common::*;
use mrnet::blocks::{
    inception_like_forward, merge_and_run_forward, InceptionBlock, ParallelBlock,
};
use mrnet::conv::{conv2d_backward, conv2d_forward};
use mrnet::layers::{Mode, Session};
use mrnet::paths::enumerate_paths;
use mrnet::blocks::BlockKind;
use mrnet::verify::randomize_norms;
use mrnet::Tensor;
use num_bigint::BigUint;

#[test]
fn im2col_conv_matches_naive_loops() {
    let mut r = rng(1);
    for &(c, o, h, w, k, stride, pad) in &[
        (3, 4, 7, 7, 3, 1, 1),
        (2, 5, 8, 6, 3, 2, 1),
        (4, 3, 5, 5, 1, 1, 0),
        (4, 3, 6, 6, 1, 2, 0),
        (1, 2, 5, 5, 5, 1, 2),
        (3, 2, 4, 4, 3, 1, 0),
    ] {
        let x = normal(&[2, c, h, w], &mut r);
        let kern = normal(&[o, c, k, k], &mut r);
        let fast = conv2d_forward(&x, &kern, stride, pad).unwrap();
        let slow = naive_conv(&x, &kern, stride, pad);
        assert_eq!(fast.shape(), slow.shape());
        assert!(max_diff(fast.data(), slow.data()) < 1e-12);
    }
}

/// The backward pass is the adjoint of the (linear) forward map: <conv(x), g> = <x, dx>.
#[test]
fn conv_backward_is_adjoint_of_naive_forward() {
    let mut r = rng(2);
    for &(stride, pad) in &[(1, 1), (2, 1), (2, 0), (1, 0)] {
        let x = normal(&[2, 3, 6, 6], &mut r);
        let kern = normal(&[4, 3, 3, 3], &mut r);
        let y = naive_conv(&x, &kern, stride, pad);
        let g = normal(y.shape(), &mut r);
        let (dx, dk) = conv2d_backward(&x, &kern, &g, stride, pad, true, true).unwrap();
        let (dx, dk) = (dx.unwrap(), dk.unwrap());
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).sum::<f64>();
        let lhs = dot(y.data(), g.data());
        // Linearity in x and in k separately.
        assert!((lhs - dot(x.data(), dx.data())).abs() < 1e-9 * lhs.abs().max(1.0));
        assert!((lhs - dot(kern.data(), dk.data())).abs() < 1e-9 * lhs.abs().max(1.0));
    }
}

#[test]
fn group_conv_equals_block_diagonal_dense_kernel() {
    let mut r = rng(3);
    let (g, ci, co) = (3, 2, 4);
    let x = normal(&[2, g * ci, 5, 5], &mut r);
    let kernels: Vec<Tensor<f64>> = (0..g).map(|_| normal(&[co, ci, 3, 3], &mut r)).collect();
    let mut dense = vec![0.0; g * co * g * ci * 9];
    for (gi, k) in kernels.iter().enumerate() {
        for o in 0..co {
            for i in 0..ci {
                for t in 0..9 {
                    dense[(((gi * co + o) * g * ci) + gi * ci + i) * 9 + t] = k.data()[(o * ci + i) * 9 + t];
                }
            }
        }
    }
    let dense = Tensor::new(&[g * co, g * ci, 3, 3], dense).unwrap();
    let expected = naive_conv(&x, &dense, 1, 1);

    let mut s = Session::<f64>::frozen(Mode::Eval);
    let xv = s.input(x);
    let kv: Vec<_> = kernels.into_iter().map(|k| s.input(k)).collect();
    let y = s.graph.group_conv2d(xv, &kv, 1, 1).unwrap();
    assert!(max_diff(s.value(y).data(), expected.data()) < 1e-12);
}

fn stacked(parts: &[&Tensor<f64>]) -> Vec<f64> {
    parts.iter().flat_map(|t| t.data().iter().copied()).collect()
}

/// Merge-and-run output equals `[H0(x0); H1(x1)] + M [x0; x1]` with M built entry-wise.
#[test]
fn merge_and_run_matches_dense_matrix_form() {
    let mut r = rng(4);
    for case in 0..50 {
        let d = [1, 2, 4][case % 3];
        let mut block = ParallelBlock::new(vec![
            standard_branch(d, 2, &mut r),
            standard_branch(d, 2, &mut r),
        ]);
        block.relu = false;
        randomize_norms(&mut block, &mut r);
        let x0 = normal(&[2, d, 3, 3], &mut r);
        let x1 = normal(&[2, d, 3, 3], &mut r);

        let mut s = Session::frozen(Mode::Eval);
        let (v0, v1) = (s.input(x0.clone()), s.input(x1.clone()));
        let (y0, y1) =
            merge_and_run_forward(&mut s, v0, v1, &block.branches[0], &block.branches[1], false)
                .unwrap();
        let h0 = block.branches[0].forward(&mut s, v0).unwrap();
        let h1 = block.branches[1].forward(&mut s, v1).unwrap();

        let line = x0.numel();
        let m = merge_matrix(2, line);
        let mx = dense_matvec(&m, &stacked(&[&x0, &x1]));
        let h = stacked(&[s.value(h0), s.value(h1)]);
        let expected: Vec<f64> = h.iter().zip(&mx).map(|(a, b)| a + b).collect();
        let got = stacked(&[s.value(y0), s.value(y1)]);
        assert!(max_diff(&got, &expected) <= 1e-12, "case {case}");
    }
}

/// Inception-like output equals `[I I] [H0(x); H1(x)] + x`.
#[test]
fn inception_like_matches_dense_matrix_form() {
    let mut r = rng(5);
    for case in 0..50 {
        let d = [1, 3, 4][case % 3];
        let mut block = InceptionBlock {
            branches: [standard_branch(d, 2, &mut r), standard_branch(d, 2, &mut r)],
            projection: None,
            relu: false,
        };
        randomize_norms(&mut block, &mut r);
        let x = normal(&[2, d, 3, 3], &mut r);
        let mut s = Session::frozen(Mode::Eval);
        let v = s.input(x.clone());
        let y = inception_like_forward(&mut s, v, &block.branches[0], &block.branches[1], None, false)
            .unwrap();
        let h0 = block.branches[0].forward(&mut s, v).unwrap();
        let h1 = block.branches[1].forward(&mut s, v).unwrap();
        let n = x.numel();
        let h = stacked(&[s.value(h0), s.value(h1)]);
        let expected: Vec<f64> = (0..n)
            .map(|i| (0..2 * n).map(|j| if j % n == i { h[j] } else { 0.0 }).sum::<f64>() + x.data()[i])
            .collect();
        assert!(max_diff(s.value(y).data(), &expected) <= 1e-12, "case {case}");
    }
}

/// Lists every path literally: at each block the path picks one of the lines' branch or
/// merge continuations. Only feasible for tiny L.
fn brute_force_dmr(blocks: usize, b: usize) -> Vec<usize> {
    // From any line: own branch (length b), or merge edge to line 0 or line 1 (length 0).
    fn walk(block: usize, len: usize, blocks: usize, b: usize, out: &mut Vec<usize>) {
        if block == blocks {
            out.push(len);
            return;
        }
        walk(block + 1, len + b, blocks, b, out);
        for _target_line in 0..2 {
            walk(block + 1, len, blocks, b, out);
        }
    }
    let mut out = Vec::new();
    for _start_line in 0..2 {
        walk(0, 0, blocks, b, &mut out);
    }
    out
}

#[test]
fn merge_and_run_path_count_matches_brute_force_listing() {
    for blocks in 0..=6 {
        for b in 1..=3 {
            let listed = brute_force_dmr(blocks, b);
            assert_eq!(listed.len(), 2 * 3usize.pow(blocks as u32));
            let dist = enumerate_paths(BlockKind::MergeAndRun, blocks, b).unwrap();
            assert_eq!(dist.total_paths(), BigUint::from(listed.len()));
            for (&len, count) in &dist.entries {
                let brute = listed.iter().filter(|&&l| l == len).count();
                assert_eq!(*count, BigUint::from(brute), "blocks {blocks} B {b} length {len}");
            }
        }
    }
}

#[test]
fn residual_and_inception_counts_are_powers() {
    for n in 0..10u32 {
        assert_eq!(
            enumerate_paths(BlockKind::Residual, n as usize, 2).unwrap().total_paths(),
            BigUint::from(2u32).pow(n)
        );
        assert_eq!(
            enumerate_paths(BlockKind::InceptionLike, n as usize, 2).unwrap().total_paths(),
            BigUint::from(3u32).pow(n)
        );
    }
}
