mod common;

use common::*;
use mrnet::blocks::BlockKind;
use mrnet::data::synthetic_split;
use mrnet::layers::{Mode, Module, Param};
use mrnet::netbuilder::{build, Network, NetworkSpec};
use mrnet::train::checkpoint;
use mrnet::train::optim::{sgd_nesterov_step, SgdNesterov};
use mrnet::train::{batch_loss, strip_timing, train_loop, train_step, TrainConfig};
use mrnet::{Error, Tensor};

fn tiny_net(seed: u64) -> Network<f64> {
    let spec = NetworkSpec::new(BlockKind::MergeAndRun, 6).with_widths(&[2, 4, 4]).with_classes(2);
    build(&spec, seed).unwrap()
}

fn snapshot(net: &Network<f64>) -> Vec<Vec<f64>> {
    net.params().iter().map(|p| p.value.data().to_vec()).collect()
}

#[test]
fn nesterov_momentum_trace() {
    let lr = 0.1;
    let mut p = [0.0f64];
    let mut v = [1.0f64];
    let mut prev = p[0];
    for expected in [0.81, 0.729, 0.6561] {
        sgd_nesterov_step(&mut p, &[0.0], &mut v, lr, 0.9, 0.0).unwrap();
        assert!((prev - p[0] - lr * expected).abs() < 1e-15);
        prev = p[0];
    }
}

#[test]
fn quadratic_bowl_converges() {
    let mut w = [5.0f64, -3.0];
    let mut v = [0.0; 2];
    for _ in 0..100 {
        let g = w;
        sgd_nesterov_step(&mut w, &g, &mut v, 0.1, 0.9, 0.0).unwrap();
    }
    assert!(w.iter().all(|x| x.abs() < 1e-3), "{w:?}");
}

#[test]
fn weight_decay_skips_flagged_parameters() {
    let t = |v: f64| Tensor::<f64>::from_f64(&[1], &[v]).unwrap();
    let mut weight = Param::new("conv.weight", t(2.0), true);
    let mut gamma = Param::new("bn.gamma", t(2.0), false);
    let mut opt = SgdNesterov::new(0.9, 0.01);
    opt.step(vec![&mut weight, &mut gamma], &[Some(t(0.0)), Some(t(0.0))], 0.1).unwrap();
    assert_eq!(gamma.value.data(), &[2.0]);
    let expected = 2.0 - 0.1 * 0.01 * 2.0 * 1.9;
    assert!((weight.value.data()[0] - expected).abs() < 1e-15);
}

#[test]
fn zero_learning_rate_freezes_parameters() {
    let (train, _) = synthetic_split(2, 40, 2, 1).unwrap();
    let mut net = tiny_net(1);
    let before = snapshot(&net);
    let cfg = TrainConfig {
        epochs: 3,
        batch_size: 16,
        base_lr: 0.0,
        augment: false,
        ..TrainConfig::default()
    };
    let m = train_loop(&mut net, &train, None, &cfg, None).unwrap();
    assert_eq!(snapshot(&net), before);
    assert!(m.rows.iter().all(|r| r.train_loss == m.rows[0].train_loss));
}

#[test]
fn training_is_deterministic() {
    let (train, test) = synthetic_split(2, 40, 10, 2).unwrap();
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 8,
        seed: 5,
        ..TrainConfig::default()
    };
    let run = || {
        let mut net = tiny_net(3);
        let m = train_loop(&mut net, &train, Some(&test), &cfg, None).unwrap();
        (strip_timing(&m.to_csv()), snapshot(&net))
    };
    assert_eq!(run(), run());
}

#[test]
fn small_step_reduces_batch_loss() {
    let mut decreased = 0;
    for trial in 0..20u64 {
        let mut r = rng(100 + trial);
        let x = normal(&[8, 3, 8, 8], &mut r);
        let labels: Vec<usize> = (0..8).map(|i| (i + trial as usize) % 2).collect();
        let mut net = tiny_net(trial);
        let mut opt = SgdNesterov::new(0.9, 0.0);
        let (before, _) = train_step(&mut net, &mut opt, &x, &labels, 1e-3).unwrap();
        let (after, _) = batch_loss(&net, &x, &labels, Mode::Train).unwrap();
        if after < before {
            decreased += 1;
        }
    }
    assert!(decreased >= 19, "loss decreased in {decreased}/20 trials");
}

#[test]
fn nan_weight_is_a_numeric_error() {
    let mut net = tiny_net(4);
    net.conv0.kernel.value.data_mut()[0] = f64::NAN;
    let x = normal(&[2, 3, 8, 8], &mut rng(4));
    let mut opt = SgdNesterov::new(0.9, 0.0);
    let err = train_step(&mut net, &mut opt, &x, &[0, 1], 0.1).unwrap_err();
    match err {
        Error::Numeric { op } => assert!(op.contains("conv"), "{op}"),
        other => panic!("expected numeric error, got {other}"),
    }
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let (train, _) = synthetic_split(2, 16, 2, 6).unwrap();
    let mut net = tiny_net(6);
    let cfg = TrainConfig {
        epochs: 1,
        batch_size: 8,
        ..TrainConfig::default()
    };
    train_loop(&mut net, &train, None, &cfg, None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.mrn");
    checkpoint::save(&net, &path).unwrap();

    let mut restored = tiny_net(99);
    checkpoint::load(&mut restored, &path).unwrap();
    assert_eq!(snapshot(&restored), snapshot(&net));
    let x = normal(&[3, 3, 8, 8], &mut rng(6));
    let a = net.predict(&x, Mode::Eval).unwrap();
    let b = restored.predict(&x, Mode::Eval).unwrap();
    assert!(a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()));

    let other = NetworkSpec::new(BlockKind::MergeAndRun, 6).with_widths(&[2, 4, 8]).with_classes(2);
    let mut mismatched = build::<f64>(&other, 0).unwrap();
    assert!(checkpoint::load(&mut mismatched, &path).is_err());
}

#[test]
fn separable_synthetic_data_is_fit() {
    let (train, test) = synthetic_split(2, 200, 50, 0).unwrap();
    let spec = NetworkSpec::new(BlockKind::MergeAndRun, 6).with_widths(&[4, 8, 16]).with_classes(2);
    let mut net = build::<f32>(&spec, 0).unwrap();
    let cfg = TrainConfig {
        epochs: 10,
        batch_size: 32,
        augment: false,
        ..TrainConfig::default()
    };
    let m = train_loop(&mut net, &train, Some(&test), &cfg, None).unwrap();
    assert!(m.rows.iter().any(|r| r.train_err == 0.0), "{}", m.to_csv());
}
