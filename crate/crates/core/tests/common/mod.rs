#![allow(dead_code)]

use mrnet::blocks::{Branch, BranchSpec, BranchStyle};
use mrnet::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| StandardNormal.sample(&mut *rng)).collect();
    Tensor::new(shape, data).unwrap()
}

pub fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Direct six-loop cross-correlation with zero padding.
pub fn naive_conv(x: &Tensor<f64>, k: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (o, kh, kw) = (k.shape()[0], k.shape()[2], k.shape()[3]);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * o * oh * ow];
    for b in 0..n {
        for oc in 0..o {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = 0.0;
                    for ic in 0..c {
                        for dy in 0..kh {
                            for dx in 0..kw {
                                let iy = (y * stride + dy) as isize - pad as isize;
                                let ix = (xx * stride + dx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                let xi = ((b * c + ic) * h + iy as usize) * w + ix as usize;
                                let ki = ((oc * c + ic) * kh + dy) * kw + dx;
                                acc += x.data()[xi] * k.data()[ki];
                            }
                        }
                    }
                    out[((b * o + oc) * oh + y) * ow + xx] = acc;
                }
            }
        }
    }
    Tensor::new(&[n, o, oh, ow], out).unwrap()
}

pub fn dense_matvec(m: &[f64], v: &[f64]) -> Vec<f64> {
    let n = v.len();
    (0..n).map(|i| (0..n).map(|j| m[i * n + j] * v[j]).sum()).collect()
}

/// `(1/K) [I ... I; ...; I ... I]` built entry by entry.
pub fn merge_matrix(k: usize, d: usize) -> Vec<f64> {
    let n = k * d;
    let mut m = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            if i % d == j % d {
                m[i * n + j] = 1.0 / k as f64;
            }
        }
    }
    m
}

pub fn standard_branch(d: usize, depth: usize, rng: &mut ChaCha8Rng) -> Branch<f64> {
    Branch::new("b", &BranchSpec::uniform(d, d, depth, 1), BranchStyle::Standard, rng).unwrap()
}
