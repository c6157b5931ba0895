//! He (MSRA) initialisation: zero-mean normal with variance `2 / fan_in`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::{Scalar, Tensor};

/// Fan-in of a conv kernel `[Cout, Cin, kh, kw]` (`Cin*kh*kw`) or an FC weight `[D, K]` (`D`).
pub fn fan_in(shape: &[usize]) -> usize {
    match shape {
        [_, cin, rest @ ..] if shape.len() == 4 => cin * rest.iter().product::<usize>(),
        [d, _] => *d,
        [d] => *d,
        _ => shape.iter().skip(1).product(),
    }
}

pub fn he_normal<T: Scalar, R: Rng>(shape: &[usize], rng: &mut R) -> Tensor<T> {
    let std = (2.0 / fan_in(shape).max(1) as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("finite std");
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| T::from_f64_lossy(normal.sample(rng)))
        .collect();
    Tensor::new(shape, data).expect("shape matches buffer")
}

/// Seeded He initialisation.
pub fn he_init<T: Scalar>(shape: &[usize], seed: u64) -> Tensor<T> {
    he_normal(shape, &mut ChaCha8Rng::seed_from_u64(seed))
}
