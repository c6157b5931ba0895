use mrnet::blocks::BlockKind;
use mrnet::paths::{
    average_length, distribution_report, enumerate_paths, network_paths,
    residual_paths_with_projections,
};
use num_rational::BigRational;

fn q(n: i64, d: i64) -> BigRational {
    BigRational::new(n.into(), d.into())
}

const KINDS: [BlockKind; 3] = [BlockKind::Residual, BlockKind::InceptionLike, BlockKind::MergeAndRun];

#[test]
fn closed_forms_hold_on_reference_grid() {
    for depth in [3, 6, 9, 12, 24] {
        for b in 1..=3 {
            let means: Vec<BigRational> = KINDS
                .iter()
                .map(|&k| network_paths(k, depth, b).unwrap().mean())
                .collect();
            for (k, m) in KINDS.iter().zip(&means) {
                assert_eq!(*m, average_length(*k, depth, b).unwrap(), "{k:?} L={depth} B={b}");
            }
            assert!(means[2] < means[1] && means[1] < means[0]);
        }
    }
}

#[test]
fn single_block_averages() {
    assert_eq!(enumerate_paths(BlockKind::Residual, 2, 2).unwrap().mean(), q(2, 1));
    assert_eq!(enumerate_paths(BlockKind::InceptionLike, 1, 2).unwrap().mean(), q(4, 3));
    assert_eq!(enumerate_paths(BlockKind::MergeAndRun, 1, 2).unwrap().mean(), q(2, 3));
    assert_eq!(network_paths(BlockKind::InceptionLike, 1, 2).unwrap().mean(), q(10, 3));
}

#[test]
fn merge_and_run_single_block_distribution() {
    // Branch continuations keep length B, the two merge continuations add nothing.
    let d = enumerate_paths(BlockKind::MergeAndRun, 1, 2).unwrap();
    let rows: Vec<(usize, String)> = d.entries.iter().map(|(l, c)| (*l, c.to_string())).collect();
    assert_eq!(rows, vec![(0, "4".to_string()), (2, "2".to_string())]);
}

#[test]
fn longest_path_matches_plain_depth() {
    let d = network_paths(BlockKind::MergeAndRun, 27, 2).unwrap();
    assert_eq!(*d.entries.keys().last().unwrap(), 56);
    let r = network_paths(BlockKind::Residual, 6, 2).unwrap();
    assert_eq!(*r.entries.keys().last().unwrap(), 26);
}

#[test]
fn report_format() {
    let report = distribution_report(&network_paths(BlockKind::Residual, 9, 2).unwrap());
    let mut lines = report.lines();
    assert_eq!(lines.next(), Some("length,multiplicity,probability"));
    let last = report.lines().last().unwrap();
    assert!(last.starts_with("# mean=20, std="), "{last}");
    assert_eq!(report.lines().filter(|l| !l.starts_with('#')).count(), 1 + 19);
}

#[test]
fn deepest_supported_network() {
    for kind in KINDS {
        let d = network_paths(kind, 96, 3).unwrap();
        assert_eq!(d.mean(), average_length(kind, 96, 3).unwrap());
    }
}

#[test]
fn long_branch_resnets_with_projections() {
    // 3 blocks of length 2L/3, the last two with projected skips.
    let d = residual_paths_with_projections(&[(6, false), (6, true), (6, true)]);
    assert_eq!(d.mean(), q(9 + 3, 1));
    assert_eq!(d.total_paths(), 8u32.into());
}
