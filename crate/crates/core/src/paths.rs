//! Path-length distributions of residual, inception-like and merge-and-run networks.
//!
//! A path picks, at every block, either a branch (adding its layer count) or a skip
//! (adding nothing). Distributions are computed with per-line generating polynomials:
//! `poly[len]` counts the paths of that length that currently sit on the line.
//!
//! Merge-and-run semantics: the input fans out to both lines; from line `i` a path either
//! runs branch `i` and stays on line `i`, or takes the merge edge to any line; the final
//! merge closes every path.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use num_bigint::BigUint;
use num_rational::BigRational;
use num_traits::{One, ToPrimitive, Zero};

use crate::blocks::BlockKind;
use crate::error::{Error, Result};

/// Number of lines in a merge-and-run network.
const MERGE_LINES: usize = 2;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PathLengthDistribution {
    pub kind: BlockKind,
    pub num_blocks: usize,
    pub branch_layers: usize,
    pub include_endpoints: bool,
    /// length -> number of paths with that length
    pub entries: BTreeMap<usize, BigUint>,
}

type Poly = Vec<BigUint>;

fn shifted_add(acc: &mut Poly, src: &Poly, shift: usize, times: u32) {
    if acc.len() < src.len() + shift {
        acc.resize(src.len() + shift, BigUint::zero());
    }
    for (i, c) in src.iter().enumerate() {
        if !c.is_zero() {
            acc[i + shift] += c * times;
        }
    }
}

fn to_entries(poly: &Poly) -> BTreeMap<usize, BigUint> {
    poly.iter()
        .enumerate()
        .filter(|(_, c)| !c.is_zero())
        .map(|(len, c)| (len, c.clone()))
        .collect()
}

/// Exact distribution of block-only path lengths (conv0/FC excluded, projections count 0).
pub fn enumerate_paths(kind: BlockKind, num_blocks: usize, b: usize) -> Result<PathLengthDistribution> {
    let one: Poly = vec![BigUint::one()];
    let entries = match kind {
        BlockKind::Residual | BlockKind::InceptionLike => {
            let branches = if kind == BlockKind::Residual { 1 } else { 2 };
            let mut poly = one;
            for _ in 0..num_blocks {
                let mut next = poly.clone();
                shifted_add(&mut next, &poly, b, branches);
                poly = next;
            }
            to_entries(&poly)
        }
        BlockKind::MergeAndRun => {
            let mut lines: Vec<Poly> = vec![one; MERGE_LINES];
            for _ in 0..num_blocks {
                let mut merged: Poly = Vec::new();
                for line in &lines {
                    shifted_add(&mut merged, line, 0, 1);
                }
                lines = lines
                    .iter()
                    .map(|line| {
                        let mut next = merged.clone();
                        shifted_add(&mut next, line, b, 1);
                        next
                    })
                    .collect();
            }
            let mut total: Poly = Vec::new();
            for line in &lines {
                shifted_add(&mut total, line, 0, 1);
            }
            to_entries(&total)
        }
        BlockKind::IdentityParallel => {
            return Err(Error::Usage(
                "path enumeration supports resnet, dilnet and dmrnet".into(),
            ))
        }
    };
    Ok(PathLengthDistribution {
        kind,
        num_blocks,
        branch_layers: b,
        include_endpoints: false,
        entries,
    })
}

/// Distribution for the network of depth parameter `L`: `2L` residual blocks for a ResNet,
/// `L` parallel blocks otherwise, with conv0 and FC counted.
pub fn network_paths(kind: BlockKind, depth: usize, b: usize) -> Result<PathLengthDistribution> {
    let blocks = match kind {
        BlockKind::Residual => 2 * depth,
        _ => depth,
    };
    Ok(enumerate_paths(kind, blocks, b)?.with_endpoints())
}

/// Closed-form mean path length including conv0 and FC: `BL+2`, `(2B/3)L+2`, `(B/3)L+2`.
pub fn average_length(kind: BlockKind, depth: usize, b: usize) -> Result<BigRational> {
    let bl = BigRational::from_integer((b * depth).into());
    let two = BigRational::from_integer(2.into());
    let frac = |n: i64, d: i64| BigRational::new(n.into(), d.into());
    Ok(match kind {
        BlockKind::Residual => bl + two,
        BlockKind::InceptionLike => bl * frac(2, 3) + two,
        BlockKind::MergeAndRun => bl * frac(1, 3) + two,
        BlockKind::IdentityParallel => {
            return Err(Error::Usage("no closed form for identity-parallel networks".into()))
        }
    })
}

/// Residual stages given as `(branch length, skip is a projection)` per block; a projection
/// counts as one layer on the skip path. Endpoints included.
pub fn residual_paths_with_projections(blocks: &[(usize, bool)]) -> PathLengthDistribution {
    let mut poly: Poly = vec![BigUint::one()];
    for &(len, projected) in blocks {
        let mut next: Poly = Vec::new();
        shifted_add(&mut next, &poly, usize::from(projected), 1);
        shifted_add(&mut next, &poly, len, 1);
        poly = next;
    }
    PathLengthDistribution {
        kind: BlockKind::Residual,
        num_blocks: blocks.len(),
        branch_layers: blocks.first().map_or(0, |b| b.0),
        include_endpoints: false,
        entries: to_entries(&poly),
    }
    .with_endpoints()
}

impl PathLengthDistribution {
    pub fn with_endpoints(mut self) -> Self {
        if !self.include_endpoints {
            self.entries = self
                .entries
                .into_iter()
                .map(|(len, c)| (len + 2, c))
                .collect();
            self.include_endpoints = true;
        }
        self
    }

    pub fn total_paths(&self) -> BigUint {
        self.entries.values().sum()
    }

    fn moment(&self, power: u32) -> BigRational {
        let num: BigUint = self
            .entries
            .iter()
            .map(|(&len, c)| BigUint::from(len).pow(power) * c)
            .sum();
        BigRational::new(num.into(), self.total_paths().into())
    }

    pub fn mean(&self) -> BigRational {
        self.moment(1)
    }

    pub fn variance(&self) -> BigRational {
        let m = self.mean();
        self.moment(2) - &m * &m
    }

    pub fn std(&self) -> f64 {
        ratio_to_f64(&self.variance()).sqrt()
    }

    /// `(length, multiplicity, probability)` rows.
    pub fn rows(&self) -> Vec<(usize, BigUint, f64)> {
        let total = self.total_paths();
        self.entries
            .iter()
            .map(|(&len, c)| {
                let p = BigRational::new(c.clone().into(), total.clone().into());
                (len, c.clone(), ratio_to_f64(&p))
            })
            .collect()
    }
}

pub fn ratio_to_f64(r: &BigRational) -> f64 {
    r.to_f64().unwrap_or(f64::NAN)
}

/// CSV body plus a trailing `# mean=..., std=...` line.
pub fn distribution_report(dist: &PathLengthDistribution) -> String {
    let mut out = String::from("length,multiplicity,probability\n");
    for (len, count, p) in dist.rows() {
        let _ = writeln!(out, "{len},{count},{p:.17e}");
    }
    let mean = dist.mean();
    let _ = writeln!(
        out,
        "# mean={}, std={}, mean_exact={}",
        ratio_to_f64(&mean),
        dist.std(),
        mean
    );
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn q(n: i64, d: i64) -> BigRational {
        BigRational::new(n.into(), d.into())
    }

    #[test]
    fn two_block_building_block_averages() {
        assert_eq!(enumerate_paths(BlockKind::Residual, 2, 2).unwrap().mean(), q(2, 1));
        assert_eq!(enumerate_paths(BlockKind::InceptionLike, 1, 2).unwrap().mean(), q(4, 3));
        assert_eq!(enumerate_paths(BlockKind::MergeAndRun, 1, 2).unwrap().mean(), q(2, 3));
    }

    #[test]
    fn closed_form_examples() {
        assert_eq!(average_length(BlockKind::Residual, 9, 2).unwrap(), q(20, 1));
        assert_eq!(average_length(BlockKind::InceptionLike, 9, 2).unwrap(), q(14, 1));
        assert_eq!(average_length(BlockKind::MergeAndRun, 9, 2).unwrap(), q(8, 1));
        for kind in [BlockKind::Residual, BlockKind::InceptionLike, BlockKind::MergeAndRun] {
            assert_eq!(average_length(kind, 7, 0).unwrap(), q(2, 1));
            assert_eq!(network_paths(kind, 7, 0).unwrap().mean(), q(2, 1));
        }
    }

    #[test]
    fn single_path_has_zero_std() {
        let d = enumerate_paths(BlockKind::Residual, 0, 2).unwrap();
        assert_eq!(d.total_paths(), BigUint::one());
        assert_eq!(d.std(), 0.0);
    }

    #[test]
    fn identity_parallel_is_unsupported() {
        assert!(matches!(
            enumerate_paths(BlockKind::IdentityParallel, 3, 2),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn report_probabilities_sum_to_one() {
        let d = network_paths(BlockKind::MergeAndRun, 24, 2).unwrap();
        let report = distribution_report(&d);
        let total: f64 = report
            .lines()
            .skip(1)
            .filter(|l| !l.starts_with('#'))
            .map(|l| l.split(',').nth(2).unwrap().parse::<f64>().unwrap())
            .sum();
        assert!((total - 1.0).abs() < 1e-12);
        assert!(report.trim_end().ends_with("mean_exact=18"));
    }

    #[test]
    fn long_branch_resnets_average_l_plus_three() {
        for depth in [6usize, 9, 12, 30] {
            let three = [(2 * depth / 3, false), (2 * depth / 3, true), (2 * depth / 3, true)];
            let len = depth / 3;
            let six = [
                (len, false),
                (len, false),
                (len, true),
                (len, false),
                (len, true),
                (len, false),
            ];
            let expected = q(depth as i64 + 3, 1);
            assert_eq!(residual_paths_with_projections(&three).mean(), expected);
            assert_eq!(residual_paths_with_projections(&six).mean(), expected);
        }
    }
}
